//! Synthetic longitudinal corpus with a known image ↔ report ↔ label rule.
//!
//! Each patient has one or two studies. A study image is a 32×32 field at a
//! patient-specific background level with up to four bright glyphs (disc,
//! bar, cross, ring), one per quadrant; the label vector marks which glyphs
//! are drawn. The report lists the visible glyphs and, for a second study,
//! a temporal clause derived from the label change since the prior study:
//!
//! ```text
//! first study:   "disc present ring present"
//! second study:  "disc present new bar"          (bar appeared)
//!                "no finding resolved ring"      (ring went away)
//!                "disc present unchanged"
//! ```
//!
//! The clause cannot be read off the current image alone, so a model only
//! produces it reliably when the prior scan is part of its input.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tokenizer::{ReportVocab, ToyImage};

pub const IMAGE_SIDE: usize = 32;
pub const GLYPHS: [&str; 4] = ["disc", "bar", "cross", "ring"];
pub const SCHEMA_VERSION: u32 = 1;
pub const RULE_VERSION: &str = "glyph-quadrant-v1";

const GLYPH_LEVEL: f64 = 0.9;
const BACKGROUND_LEVELS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
const PIXEL_NOISE: f64 = 0.02;
const FIRST_STUDY_PREVALENCE: f64 = 0.4;
pub const FLIP_PROBABILITY: f64 = 0.2;
pub const DELTA_RANGE_DAYS: (f64, f64) = (1.0, 128.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// One patient visit.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRecord {
    pub patient_id: u64,
    pub time_step: u32,
    pub split: Split,
    pub image: ToyImage,
    pub report: String,
    pub labels: Vec<u8>,
    /// Days since the prior study; `None` for a first study.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub split: Split,
    pub one_study_patients: usize,
    pub two_study_patients: usize,
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub rule_version: String,
    pub generator_seed: u64,
    pub pathologies: usize,
    pub two_study_fraction: f64,
    pub splits: Vec<SplitCounts>,
}

impl CorpusManifest {
    pub fn counts(&self, split: Split) -> Option<&SplitCounts> {
        self.splits.iter().find(|s| s.split == split)
    }
}

/// Records plus a (patient, time step) index for prior lookup.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<StudyRecord>,
    pub manifest: CorpusManifest,
    index: HashMap<(u64, u32), usize>,
}

impl Corpus {
    pub fn new(records: Vec<StudyRecord>, manifest: CorpusManifest) -> Self {
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.patient_id, r.time_step), i))
            .collect();
        Self {
            records,
            manifest,
            index,
        }
    }

    pub fn prior(&self, record: &StudyRecord) -> Option<&StudyRecord> {
        if record.delta.is_none() || record.time_step == 0 {
            return None;
        }
        self.index
            .get(&(record.patient_id, record.time_step - 1))
            .map(|&i| &self.records[i])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &StudyRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn pathologies(&self) -> usize {
        self.manifest.pathologies
    }
}

/// Recomputes per-split counts from the records themselves.
pub fn recount(records: &[StudyRecord]) -> Vec<SplitCounts> {
    Split::ALL
        .iter()
        .map(|&split| {
            let mut per_patient: HashMap<u64, usize> = HashMap::new();
            let mut n = 0;
            for r in records.iter().filter(|r| r.split == split) {
                *per_patient.entry(r.patient_id).or_default() += 1;
                n += 1;
            }
            SplitCounts {
                split,
                one_study_patients: per_patient.values().filter(|&&c| c == 1).count(),
                two_study_patients: per_patient.values().filter(|&&c| c == 2).count(),
                records: n,
            }
        })
        .collect()
}

/// Pixel mask of glyph `g` in its quadrant.
pub fn glyph_mask(g: usize, r: usize, c: usize) -> bool {
    let half = IMAGE_SIDE / 2;
    let (qr, qc) = match g {
        0 => (0, 0),
        1 => (0, 1),
        2 => (1, 0),
        3 => (1, 1),
        _ => return false,
    };
    if r / half != qr || c / half != qc {
        return false;
    }
    let centre = (half as f64 - 1.0) / 2.0;
    let dy = (r % half) as f64 - centre;
    let dx = (c % half) as f64 - centre;
    let rad = (dx * dx + dy * dy).sqrt();
    match g {
        0 => rad <= 5.5,
        1 => dy.abs() < 2.0 && dx.abs() < 6.0,
        2 => (dx.abs() < 1.5 && dy.abs() < 6.0) || (dy.abs() < 1.5 && dx.abs() < 6.0),
        _ => (3.5..=6.0).contains(&rad),
    }
}

/// Draws a study image for `labels` over a flat background, 8-bit quantised.
pub fn render_image(labels: &[u8], background: f64, rng: &mut impl Rng) -> ToyImage {
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid normal");
    let mut pixels = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE);
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let on = labels
                .iter()
                .enumerate()
                .any(|(g, &l)| l == 1 && glyph_mask(g, r, c));
            let base = if on { GLYPH_LEVEL } else { background };
            let p: f64 = base + noise.sample(rng);
            pixels.push(p.clamp(0.0, 1.0));
        }
    }
    ToyImage {
        height: IMAGE_SIDE,
        width: IMAGE_SIDE,
        pixels,
    }
    .quantize_8bit()
}

/// Report sentence for `labels`, with a temporal clause when `prior` is given.
pub fn render_report(labels: &[u8], prior: Option<&[u8]>) -> String {
    let mut words: Vec<&str> = Vec::new();
    for (g, &l) in labels.iter().enumerate() {
        if l == 1 {
            words.extend([GLYPHS[g], "present"]);
        }
    }
    if words.is_empty() {
        words.extend(["no", "finding"]);
    }
    if let Some(prior) = prior {
        words.extend(temporal_clause(labels, prior));
    }
    words.join(" ")
}

/// `new <glyph>` / `resolved <glyph>` per changed label, or `unchanged`.
pub fn temporal_clause(labels: &[u8], prior: &[u8]) -> Vec<&'static str> {
    let mut words = Vec::new();
    for (g, (&now, &before)) in labels.iter().zip(prior).enumerate() {
        match (before, now) {
            (0, 1) => words.extend(["new", GLYPHS[g]]),
            (1, 0) => words.extend(["resolved", GLYPHS[g]]),
            _ => {}
        }
    }
    if words.is_empty() {
        words.push("unchanged");
    }
    words
}

pub const TEMPORAL_WORDS: [&str; 3] = ["new", "resolved", "unchanged"];

/// Splits a report into its presence part and its temporal clause (the
/// clause starts at the first temporal keyword).
pub fn split_clause(words: &[String]) -> (&[String], &[String]) {
    let at = words
        .iter()
        .position(|w| TEMPORAL_WORDS.contains(&w.as_str()))
        .unwrap_or(words.len());
    words.split_at(at)
}

/// Findings read back from report text: current presence plus new/resolved
/// events, `3c` binary indicators in that order.
pub fn findings_from_report(report: &str, c: usize) -> Vec<u8> {
    let words: Vec<String> = report.split_whitespace().map(str::to_string).collect();
    let mut out = vec![0u8; 3 * c];
    let glyph = |w: &str| GLYPHS[..c].iter().position(|g| *g == w);
    for pair in words.windows(2) {
        match (glyph(&pair[0]), pair[1].as_str()) {
            (Some(g), "present") => out[g] = 1,
            _ => {}
        }
        match (pair[0].as_str(), glyph(&pair[1])) {
            ("new", Some(g)) => out[c + g] = 1,
            ("resolved", Some(g)) => out[2 * c + g] = 1,
            _ => {}
        }
    }
    out
}

/// Every word the report grammar can emit for `c` pathologies.
pub fn report_vocab(c: usize) -> ReportVocab {
    let mut words: Vec<&str> = GLYPHS[..c].to_vec();
    words.extend(["present", "no", "finding"]);
    words.extend(TEMPORAL_WORDS);
    ReportVocab::new(words).expect("grammar words are valid")
}

/// Longest report the grammar can produce for `c` pathologies.
pub fn max_report_len(c: usize) -> usize {
    2 * c.max(1) + (2 * c).max(1)
}

fn split_sizes(n: usize) -> [usize; 3] {
    let train = (n as f64 * 0.8).round() as usize;
    let val = ((n - train) as f64 / 2.0).round() as usize;
    [train, val, n - train - val]
}

/// Deterministic corpus: `n_patients` split 80/10/10 into train/val/test,
/// with `round(two_study_fraction · split size)` two-study patients per split.
pub fn generate_corpus(seed: u64, n_patients: usize, two_study_fraction: f64, c: usize) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&two_study_fraction) {
        return Err(invalid(format!(
            "two-study fraction {two_study_fraction} outside [0, 1]"
        )));
    }
    if c == 0 || c > GLYPHS.len() {
        return Err(invalid(format!(
            "pathology count must be in 1..={}, got {c}",
            GLYPHS.len()
        )));
    }
    let sizes = split_sizes(n_patients);
    let mut records = Vec::new();
    let mut pid = 0u64;
    for (split, size) in Split::ALL.into_iter().zip(sizes) {
        let n_two = (two_study_fraction * size as f64).round() as usize;
        let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
        order_rng.set_stream(1_000_000 + split as u64);
        let mut two_study = vec![false; size];
        two_study[..n_two].iter_mut().for_each(|x| *x = true);
        // Fisher-Yates so the two-study patients are spread over the split.
        for i in (1..size).rev() {
            two_study.swap(i, order_rng.gen_range(0..=i));
        }
        for &has_second in &two_study {
            records.extend(patient_studies(seed, pid, split, has_second, c));
            pid += 1;
        }
    }
    let manifest = CorpusManifest {
        schema_version: SCHEMA_VERSION,
        rule_version: RULE_VERSION.to_string(),
        generator_seed: seed,
        pathologies: c,
        two_study_fraction,
        splits: recount(&records),
    };
    Ok(Corpus::new(records, manifest))
}

fn patient_studies(seed: u64, pid: u64, split: Split, has_second: bool, c: usize) -> Vec<StudyRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pid);
    let background = BACKGROUND_LEVELS[rng.gen_range(0..BACKGROUND_LEVELS.len())];
    let first: Vec<u8> = (0..c)
        .map(|_| u8::from(rng.gen_bool(FIRST_STUDY_PREVALENCE)))
        .collect();
    let mut out = vec![StudyRecord {
        patient_id: pid,
        time_step: 0,
        split,
        image: render_image(&first, background, &mut rng),
        report: render_report(&first, None),
        labels: first.clone(),
        delta: None,
    }];
    if has_second {
        let second: Vec<u8> = first
            .iter()
            .map(|&l| if rng.gen_bool(FLIP_PROBABILITY) { 1 - l } else { l })
            .collect();
        let (lo, hi) = DELTA_RANGE_DAYS;
        let delta = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
        out.push(StudyRecord {
            patient_id: pid,
            time_step: 1,
            split,
            image: render_image(&second, background, &mut rng),
            report: render_report(&second, Some(&first)),
            labels: second,
            delta: Some(delta),
        });
    }
    out
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    patient_id: u64,
    time_step: u32,
    split: Split,
    height: usize,
    width: usize,
    image: String,
    report: String,
    labels: Vec<u8>,
    delta: Option<f64>,
}

/// Sidecar manifest path: `corpus.jsonl` → `corpus.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

/// Writes JSONL records plus the manifest sidecar.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in &corpus.records {
        let line = RecordLine {
            patient_id: r.patient_id,
            time_step: r.time_step,
            split: r.split,
            height: r.image.height,
            width: r.image.width,
            image: B64.encode(r.image.to_bytes()),
            report: r.report.clone(),
            labels: r.labels.clone(),
            delta: r.delta,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let manifest = serde_json::to_string_pretty(&corpus.manifest)?;
    std::fs::write(manifest_path(path), manifest + "\n")?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let manifest_file = manifest_path(path);
    let manifest: CorpusManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_file)?)
        .map_err(|e| Error::Malformed {
            path: manifest_file.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Malformed {
            path: manifest_file,
            line: 1,
            msg: format!("unsupported schema version {}", manifest.schema_version),
        });
    }
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let bytes = B64.decode(&rec.image).map_err(|e| bad(e.to_string()))?;
        let image = ToyImage::from_bytes(rec.height, rec.width, &bytes).map_err(|e| bad(e.to_string()))?;
        if rec.labels.len() != manifest.pathologies || rec.labels.iter().any(|&l| l > 1) {
            return Err(bad("labels must be a binary vector of the manifest's length".into()));
        }
        if matches!(rec.delta, Some(d) if !(d > 0.0)) {
            return Err(bad("delta must be positive".into()));
        }
        records.push(StudyRecord {
            patient_id: rec.patient_id,
            time_step: rec.time_step,
            split: rec.split,
            image,
            report: rec.report,
            labels: rec.labels,
            delta: rec.delta,
        });
    }
    Ok(Corpus::new(records, manifest))
}
