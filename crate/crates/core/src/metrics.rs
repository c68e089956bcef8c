//! Text, label and image metrics.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tokenizer::ToyImage;

/// Recall weight used by [`rouge_l`].
pub const ROUGE_BETA: f64 = 1.2;

fn ngram_counts<T: Hash + Eq + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram precision as `(matches, total candidate n-grams)`.
pub fn modified_precision<T: Hash + Eq + Clone>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matches = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, candidate.len().saturating_sub(n - 1))
}

/// Single-reference sentence BLEU-`n`: geometric mean of clipped 1..n-gram
/// precisions times the brevity penalty `min(1, e^(1 − r/c))`. No smoothing:
/// any zero precision gives 0.
pub fn bleu_n<T: Hash + Eq + Clone>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    if reference.is_empty() {
        return Err(invalid("BLEU needs a non-empty reference"));
    }
    if !(1..=4).contains(&n) {
        return Err(invalid(format!("BLEU order must be 1..=4, got {n}")));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, total) = modified_precision(candidate, reference, k);
        if m == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / total as f64).ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Longest common subsequence length.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// LCS-based ROUGE-L with `F = (1+β²)PR / (R + β²P)`, `β = 1.2`.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeL {
    let zero = RougeL {
        precision: 0.0,
        recall: 0.0,
        f: 0.0,
    };
    if candidate.is_empty() || reference.is_empty() {
        return zero;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return zero;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    RougeL {
        precision: p,
        recall: r,
        f: (1.0 + b2) * p * r / (r + b2 * p),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

/// Micro-averaged precision/recall/F1 over every (sample, label) pair.
pub fn label_metrics(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<LabelMetrics> {
    if pred.len() != truth.len() {
        return Err(invalid(format!(
            "{} predictions for {} references",
            pred.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "label_metrics",
                lhs: vec![p.len()],
                rhs: vec![t.len()],
            });
        }
        for (&a, &b) in p.iter().zip(t) {
            match (a != 0, b != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let mut zero_division = false;
    let mut ratio = |num: f64, den: f64| {
        if den == 0.0 {
            zero_division = true;
            0.0
        } else {
            num / den
        }
    };
    let precision = ratio(tp as f64, (tp + fp) as f64);
    let recall = ratio(tp as f64, (tp + fn_) as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Ok(LabelMetrics {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        zero_division,
    })
}

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 8;

/// Mean SSIM over every `window × window` placement (stride 1, uniform
/// weights, population statistics) for images in `[0, 1]`.
pub fn ssim(a: &ToyImage, b: &ToyImage, window: usize) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        });
    }
    if window == 0 || window > a.height || window > a.width {
        return Err(invalid(format!(
            "window {window} does not fit a {}x{} image",
            a.height, a.width
        )));
    }
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=a.height - window {
        for c0 in 0..=a.width - window {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + window {
                for c in c0..c0 + window {
                    let (x, y) = (a.get(r, c), b.get(r, c));
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Fraction of reference positions whose token the candidate reproduces
/// at the same index. An empty reference scores 1 for an empty candidate.
pub fn token_accuracy<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if reference.is_empty() {
        return if candidate.is_empty() { 1.0 } else { 0.0 };
    }
    let hits = reference
        .iter()
        .enumerate()
        .filter(|(i, r)| candidate.get(*i) == Some(r))
        .count();
    hits as f64 / reference.len() as f64
}
