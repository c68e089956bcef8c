//! Test-split generation under each conditioning and the metrics report.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{tokenize_record, Sample, Tokenizers};
use crate::error::{invalid, Result};
use crate::generation::{ensemble_generate_image, generate_report, member_seed, pixel_entropy, SamplerConfig, ENTROPY_BINS};
use crate::metrics::{bleu_n, label_metrics, rouge_l, ssim, token_accuracy, SSIM_WINDOW};
use crate::model::Model;
use crate::synth::{findings_from_report, split_clause, Corpus, Split, StudyRecord};

pub const CR_GIVEN_CX: &str = "CR|CX";
pub const CR_GIVEN_PX_CX: &str = "CR|(PX,CX)";
pub const CX_GIVEN_CR: &str = "CX|CR";
pub const CX_GIVEN_CR_PX: &str = "CX|(CR,PX)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    WithPrior,
    WithoutPrior,
    All,
}

impl Subset {
    pub fn name(self) -> &'static str {
        match self {
            Subset::WithPrior => "with-prior",
            Subset::WithoutPrior => "without-prior",
            Subset::All => "all",
        }
    }

    pub fn contains(self, has_prior: bool) -> bool {
        match self {
            Subset::WithPrior => has_prior,
            Subset::WithoutPrior => !has_prior,
            Subset::All => true,
        }
    }
}

impl FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "with-prior" => Ok(Subset::WithPrior),
            "without-prior" => Ok(Subset::WithoutPrior),
            "all" => Ok(Subset::All),
            other => Err(format!("unknown subset {other:?} (with-prior, without-prior, all)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub split: Split,
    pub subset: Subset,
    pub sampler: SamplerConfig,
    pub reports: bool,
    pub images: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            subset: Subset::All,
            sampler: SamplerConfig::default(),
            reports: true,
            images: true,
        }
    }
}

/// Metric name → value for one conditioning row.
pub type Row = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub subset: Subset,
    pub seed: u64,
    pub greedy: bool,
    pub records: usize,
    pub rows: BTreeMap<String, Row>,
}

impl EvalReport {
    pub fn metric(&self, row: &str, name: &str) -> Option<f64> {
        self.rows.get(row).and_then(|r| r.get(name)).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn words_of(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

#[derive(Default)]
struct ReportAcc {
    bleu: [f64; 4],
    rouge: f64,
    exact: usize,
    truncated: usize,
    clause_acc: f64,
    clause_n: usize,
    findings_pred: Vec<Vec<u8>>,
    findings_true: Vec<Vec<u8>>,
    cls_pred: Vec<Vec<u8>>,
    cls_true: Vec<Vec<u8>>,
    n: usize,
}

impl ReportAcc {
    fn add(&mut self, rec: &StudyRecord, generated: &str, truncated: bool, cls_probs: &[f64], c: usize) -> Result<()> {
        let gen = words_of(generated);
        let truth = words_of(&rec.report);
        for (k, b) in self.bleu.iter_mut().enumerate() {
            *b += bleu_n(&gen, &truth, k + 1)?;
        }
        self.rouge += rouge_l(&gen, &truth).f;
        self.exact += usize::from(gen == truth);
        self.truncated += usize::from(truncated);
        let (_, gt_clause) = split_clause(&truth);
        if !gt_clause.is_empty() {
            let (_, gen_clause) = split_clause(&gen);
            self.clause_acc += token_accuracy(gen_clause, gt_clause);
            self.clause_n += 1;
        }
        self.findings_pred.push(findings_from_report(generated, c));
        self.findings_true.push(findings_from_report(&rec.report, c));
        self.cls_pred.push(cls_probs.iter().map(|&p| u8::from(p >= 0.5)).collect());
        self.cls_true.push(rec.labels.clone());
        self.n += 1;
        Ok(())
    }

    fn finish(self) -> Result<Row> {
        let n = self.n as f64;
        let mut row = Row::new();
        row.insert("n".into(), n);
        for (k, b) in self.bleu.iter().enumerate() {
            row.insert(format!("bleu_{}", k + 1), b / n);
        }
        row.insert("rouge_l".into(), self.rouge / n);
        row.insert("exact_match".into(), self.exact as f64 / n);
        row.insert("truncated".into(), self.truncated as f64);
        if self.clause_n > 0 {
            row.insert("clause_token_accuracy".into(), self.clause_acc / self.clause_n as f64);
        }
        let f = label_metrics(&self.findings_pred, &self.findings_true)?;
        row.insert("label_precision".into(), f.precision);
        row.insert("label_recall".into(), f.recall);
        row.insert("label_f1".into(), f.f1);
        let cls = label_metrics(&self.cls_pred, &self.cls_true)?;
        row.insert("cls_precision".into(), cls.precision);
        row.insert("cls_recall".into(), cls.recall);
        row.insert("cls_f1".into(), cls.f1);
        Ok(row)
    }
}

#[derive(Default)]
struct ImageAcc {
    ssim: f64,
    ssim_vq: f64,
    entropy: f64,
    n: usize,
}

impl ImageAcc {
    fn finish(self) -> Row {
        let n = self.n as f64;
        let mut row = Row::new();
        row.insert("n".into(), n);
        row.insert("ssim".into(), self.ssim / n);
        row.insert("ssim_vq".into(), self.ssim_vq / n);
        row.insert("pixel_entropy".into(), self.entropy / n);
        row
    }
}

/// Generates for every record of `cfg.split` in `cfg.subset` and scores the
/// outputs. Reports come from `report_model`; images from the ensemble
/// (entropy selection). Prior-conditioned rows cover the records that have
/// a prior study; unconditioned rows cover every selected record.
pub fn evaluate(
    corpus: &Corpus,
    tokenizers: &Tokenizers,
    report_model: &Model,
    image_ensemble: &[&Model],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let c = corpus.pathologies();
    let selected: Vec<(&StudyRecord, Sample)> = corpus
        .split(cfg.split)
        .map(|r| tokenize_record(corpus, r, tokenizers).map(|s| (r, s)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|(_, s)| cfg.subset.contains(s.has_prior()))
        .collect();
    if selected.is_empty() {
        return Err(invalid(format!(
            "subset {} of the {:?} split is empty",
            cfg.subset.name(),
            cfg.split
        )));
    }

    let mut rows = BTreeMap::new();
    if cfg.reports {
        let mut plain = ReportAcc::default();
        let mut prior = ReportAcc::default();
        for (i, (rec, s)) in selected.iter().enumerate() {
            let sampler = SamplerConfig {
                seed: member_seed(cfg.sampler.seed, i),
                ..cfg.sampler
            };
            let g = generate_report(report_model, &s.image, None, None, &sampler)?;
            plain.add(rec, &tokenizers.decode_report(&g.words)?, g.truncated, &g.cls_probs, c)?;
            if let Some(px) = &s.prior_image {
                let g = generate_report(report_model, &s.image, Some(px), s.delta, &sampler)?;
                prior.add(rec, &tokenizers.decode_report(&g.words)?, g.truncated, &g.cls_probs, c)?;
            }
        }
        rows.insert(CR_GIVEN_CX.to_string(), plain.finish()?);
        if prior.n > 0 {
            rows.insert(CR_GIVEN_PX_CX.to_string(), prior.finish()?);
        }
    }
    if cfg.images {
        let mut plain = ImageAcc::default();
        let mut prior = ImageAcc::default();
        for (i, (rec, s)) in selected.iter().enumerate() {
            let sampler = SamplerConfig {
                seed: member_seed(cfg.sampler.seed, i),
                ..cfg.sampler
            };
            let reference_vq = tokenizers.decode_image(&s.image)?;
            let score = |acc: &mut ImageAcc, prior_image: Option<&[usize]>, delta| -> Result<()> {
                let out = ensemble_generate_image(image_ensemble, tokenizers, &s.report, prior_image, delta, &sampler)?;
                acc.ssim += ssim(&out.image, &rec.image, SSIM_WINDOW)?;
                acc.ssim_vq += ssim(&out.image, &reference_vq, SSIM_WINDOW)?;
                acc.entropy += pixel_entropy(&out.image, ENTROPY_BINS)?;
                acc.n += 1;
                Ok(())
            };
            score(&mut plain, None, None)?;
            if let Some(px) = &s.prior_image {
                score(&mut prior, Some(px), s.delta)?;
            }
        }
        rows.insert(CX_GIVEN_CR.to_string(), plain.finish());
        if prior.n > 0 {
            rows.insert(CX_GIVEN_CR_PX.to_string(), prior.finish());
        }
    }
    Ok(EvalReport {
        split: cfg.split,
        subset: cfg.subset,
        seed: cfg.sampler.seed,
        greedy: cfg.sampler.greedy,
        records: selected.len(),
        rows,
    })
}
