//! Autoregressive decoding in both directions, nucleus sampling, and
//! entropy-based selection across checkpoint ensembles.

use std::ops::Range;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Tokenizers;
use crate::error::{invalid, Error, Result};
use crate::layout::{assemble, AssembledSequence, Mode, Special};
use crate::model::{Decoder, Model};
use crate::tensor::sigmoid;
use crate::tokenizer::ToyImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Nucleus mass.
    pub p: f64,
    pub temperature: f64,
    /// Always take the most likely legal id.
    pub greedy: bool,
    /// Cap on generated report words (the slot length applies regardless).
    pub max_tokens: Option<usize>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            p: 0.9,
            temperature: 0.7,
            greedy: false,
            max_tokens: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            greedy: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(invalid(format!("top-p mass must be in (0, 1], got {}", self.p)));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Nucleus sampling over `logits` (indices are token ids).
///
/// Temperature-scaled softmax, then the smallest set of most likely ids
/// whose mass reaches `p` (ties ordered by lower id) is renormalised and
/// sampled.
pub fn top_p_sample(logits: &[f64], cfg: &SamplerConfig, rng: &mut impl Rng) -> usize {
    assert!(!logits.is_empty(), "cannot sample from an empty distribution");
    if cfg.greedy {
        return argmax(logits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| (i, ((x - max) / cfg.temperature).exp()))
        .collect();
    let total: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= total);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &(_, pr) in &probs {
        kept += 1;
        mass += pr;
        if mass >= cfg.p {
            break;
        }
    }
    let nucleus = &probs[..kept];
    let mut u = rng.gen::<f64>() * mass;
    for &(id, pr) in nucleus {
        if u < pr {
            return id;
        }
        u -= pr;
    }
    nucleus[kept - 1].0
}

/// Samples among `legal` ids only, returning a unified-vocabulary id.
fn sample_legal(logits: &[f64], legal: &[usize], cfg: &SamplerConfig, rng: &mut impl Rng) -> usize {
    let restricted: Vec<f64> = legal.iter().map(|&id| logits[id]).collect();
    legal[top_p_sample(&restricted, cfg, rng)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedReport {
    /// Word indices (excluding framing).
    pub words: Vec<usize>,
    /// `true` when no stop token was produced before the length limit.
    pub truncated: bool,
    /// Pathology probabilities read at the cls position.
    pub cls_probs: Vec<f64>,
    /// Logits used at each sampling step, for consistency checks.
    #[serde(skip)]
    pub step_logits: Vec<Vec<f64>>,
    #[serde(skip)]
    pub sequence: Option<AssembledSequence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImage {
    /// Exactly `N_x` codebook indices.
    pub codes: Vec<usize>,
    #[serde(skip)]
    pub step_logits: Vec<Vec<f64>>,
    #[serde(skip)]
    pub sequence: Option<AssembledSequence>,
}

fn target_of(seq: &AssembledSequence) -> Range<usize> {
    seq.target.clone().expect("inference layouts carry a target")
}

/// Current report from the current image (and optionally the prior image).
pub fn generate_report(
    model: &Model,
    current_image: &[usize],
    prior_image: Option<&[usize]>,
    delta: Option<f64>,
    sampler: &SamplerConfig,
) -> Result<GeneratedReport> {
    sampler.validate()?;
    let cfg = &model.config;
    let vocab = cfg.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut seq = assemble(
        &vocab,
        cfg.geometry,
        None,
        Some(current_image),
        prior_image,
        delta,
        Mode::InferReport,
        &mut rng,
    )?;
    let target = target_of(&seq);
    let stop = vocab.special(Special::ReportStop);
    let pad = vocab.special(Special::Pad);
    let mut legal: Vec<usize> = vocab.word_range().collect();
    legal.push(stop);
    let limit = sampler.max_tokens.unwrap_or(cfg.geometry.n_r).min(cfg.geometry.n_r);

    let mut dec = Decoder::new(model);
    let mut logits = dec.feed(&seq, 0..target.start)?;
    let vsz = cfg.vocab_size();
    let mut words = Vec::new();
    let mut step_logits = Vec::new();
    let mut truncated = true;
    for pos in target.clone() {
        let row = logits[logits.len() - vsz..].to_vec();
        let id = if words.len() >= limit {
            stop
        } else {
            sample_legal(&row, &legal, sampler, &mut rng)
        };
        step_logits.push(row);
        seq.ids[pos] = id;
        if id == stop {
            truncated = words.len() >= limit;
            for p in pos + 1..target.end {
                seq.ids[p] = pad;
            }
            break;
        }
        words.push(id - vocab.word_range().start);
        logits = dec.feed(&seq, pos..pos + 1)?;
    }
    dec.feed(&seq, dec.position()..seq.len())?;
    let cls_probs = dec.cls_logits().into_iter().map(sigmoid).collect();
    Ok(GeneratedReport {
        words,
        truncated,
        cls_probs,
        step_logits,
        sequence: Some(seq),
    })
}

/// Current image from the report (and optionally the prior image).
pub fn generate_image(
    model: &Model,
    report: &[usize],
    prior_image: Option<&[usize]>,
    delta: Option<f64>,
    sampler: &SamplerConfig,
) -> Result<GeneratedImage> {
    sampler.validate()?;
    let cfg = &model.config;
    let vocab = cfg.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut seq = assemble(
        &vocab,
        cfg.geometry,
        Some(report),
        None,
        prior_image,
        delta,
        Mode::InferImage,
        &mut rng,
    )?;
    let target = target_of(&seq);
    let legal: Vec<usize> = vocab.image_range().collect();
    let n_x = cfg.geometry.n_x;
    let vsz = cfg.vocab_size();
    let mut dec = Decoder::new(model);
    let mut logits = dec.feed(&seq, 0..target.start)?;
    let mut codes = Vec::with_capacity(n_x);
    let mut step_logits = Vec::with_capacity(n_x);
    for pos in target.start..target.start + n_x {
        let row = logits[logits.len() - vsz..].to_vec();
        let id = sample_legal(&row, &legal, sampler, &mut rng);
        step_logits.push(row);
        seq.ids[pos] = id;
        codes.push(vocab.image_code(id).expect("legal ids are image codes"));
        if pos + 1 < target.start + n_x {
            logits = dec.feed(&seq, pos..pos + 1)?;
        }
    }
    seq.ids[target.start + n_x] = vocab.special(Special::CurrentStop);
    Ok(GeneratedImage {
        codes,
        step_logits,
        sequence: Some(seq),
    })
}

/// Shannon entropy (nats) of the pixel histogram over `bins` equal-width
/// bins of `[0, 1]`.
pub fn pixel_entropy(img: &ToyImage, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(invalid("entropy needs at least two bins"));
    }
    if img.pixels.is_empty() {
        return Ok(0.0);
    }
    let mut counts = vec![0usize; bins];
    for &p in &img.pixels {
        let b = ((p * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = img.pixels.len() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / n;
            -q * q.ln()
        })
        .sum())
}

pub const ENTROPY_BINS: usize = 256;

/// Index of the maximal entropy; ties keep the earliest.
pub fn select_max_entropy(entropies: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &e) in entropies.iter().enumerate() {
        if best.map_or(true, |b| e > entropies[b]) {
            best = Some(i);
        }
    }
    best
}

/// Checkpoints that loaded, plus a warning for each one that did not.
pub struct Ensemble {
    pub members: Vec<Checkpoint>,
    pub paths: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl Ensemble {
    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        if paths.is_empty() {
            return Err(invalid("an ensemble needs at least one checkpoint"));
        }
        let mut members = Vec::new();
        let mut kept = Vec::new();
        let mut warnings = Vec::new();
        for p in paths {
            match Checkpoint::load(p) {
                Ok(ck) => {
                    members.push(ck);
                    kept.push(p.clone());
                }
                Err(e) => warnings.push(format!("skipping {}: {e}", p.display())),
            }
        }
        if members.is_empty() {
            return Err(Error::Checkpoint(format!(
                "no ensemble member could be loaded ({})",
                warnings.join("; ")
            )));
        }
        Ok(Self {
            members,
            paths: kept,
            warnings,
        })
    }
}

/// Seed of member `i`: the base seed for the first member, mixed for the rest.
pub fn member_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleImage {
    pub image: ToyImage,
    pub codes: Vec<usize>,
    pub chosen: usize,
    pub entropies: Vec<f64>,
}

/// One image per member, decoded with `tokenizers`; the one with the
/// highest pixel entropy wins.
pub fn ensemble_generate_image(
    members: &[&Model],
    tokenizers: &Tokenizers,
    report: &[usize],
    prior_image: Option<&[usize]>,
    delta: Option<f64>,
    sampler: &SamplerConfig,
) -> Result<EnsembleImage> {
    if members.is_empty() {
        return Err(invalid("an ensemble needs at least one member"));
    }
    let mut candidates = Vec::with_capacity(members.len());
    let mut entropies = Vec::with_capacity(members.len());
    for (i, model) in members.iter().enumerate() {
        let cfg = SamplerConfig {
            seed: member_seed(sampler.seed, i),
            ..*sampler
        };
        let gen = generate_image(model, report, prior_image, delta, &cfg)?;
        let img = tokenizers.decode_image(&gen.codes)?;
        entropies.push(pixel_entropy(&img, ENTROPY_BINS)?);
        candidates.push((img, gen.codes));
    }
    let chosen = select_max_entropy(&entropies).expect("non-empty");
    let (image, codes) = candidates.swap_remove(chosen);
    Ok(EnsembleImage {
        image,
        codes,
        chosen,
        entropies,
    })
}
