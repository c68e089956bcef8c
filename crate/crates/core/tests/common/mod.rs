#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use temporal_bigen::layout::Geometry;
use temporal_bigen::model::{Model, ModelConfig};
use temporal_bigen::synth::generate_corpus;
use temporal_bigen::dataset::Tokenizers;
use temporal_bigen::tensor::Tensor;

pub mod grad_cases;

pub const FD_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Compares tape gradients of `f` (which must return a scalar) with central
/// differences for every input; returns the worst relative error.
pub fn grad_check(inputs: &[(Vec<f64>, Vec<usize>)], f: impl Fn(&[Tensor]) -> Tensor) -> f64 {
    let leaves: Vec<Tensor> = inputs.iter().map(|(d, s)| Tensor::param(d.clone(), s)).collect();
    f(&leaves).backward().expect("scalar loss");
    let mut worst = 0.0f64;
    for (i, (data, _)) in inputs.iter().enumerate() {
        let analytic = leaves[i].grad().unwrap_or_else(|| vec![0.0; data.len()]);
        let mut numeric = vec![0.0; data.len()];
        for j in 0..data.len() {
            let eval = |delta: f64| {
                let ts: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, (d, s))| {
                        let mut d = d.clone();
                        if k == i {
                            d[j] += delta;
                        }
                        Tensor::new(d, s)
                    })
                    .collect();
                f(&ts).item()
            };
            numeric[j] = (eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Scalar projection `Σ w ⊙ t` with fixed random weights, so every output
/// entry contributes a distinct gradient.
pub fn project(t: &Tensor, seed: u64) -> Tensor {
    let w = uniform(&mut rng(seed), t.numel(), -1.0, 1.0);
    t.mul(&Tensor::new(w, t.shape())).unwrap().sum()
}

/// A small fully functional model over a fitted toy corpus.
pub fn tiny_model(seed: u64, layers: usize) -> (Model, Tokenizers, temporal_bigen::synth::Corpus) {
    let corpus = generate_corpus(seed, 12, 0.75, 4).unwrap();
    let tok = Tokenizers::fit(&corpus, 8, 8, seed).unwrap();
    let geometry: Geometry = tok.geometry(4);
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: layers,
        n_heads: 2,
        m_features: 8,
        mlp_hidden: 24,
        dropout: 0.0,
        init_seed: seed,
        ..ModelConfig::toy(tok.vocab(), geometry, 4)
    };
    (Model::new(cfg).unwrap(), tok, corpus)
}
