//! Finite-difference cases shared by the gradient tests and the acceptance run.

use super::{grad_check, project, rng, tiny_model, uniform};
use rand::Rng;
use temporal_bigen::attention::{causal_linear_attention, feature_map, RandomFeatureMap};
use temporal_bigen::dataset::tokenize_record;
use temporal_bigen::layout::{assemble, Mode};
use temporal_bigen::tensor::Tensor;

pub const INSTANCES: u64 = 20;
pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

fn dims(r: &mut impl Rng, lo: usize, hi: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.gen_range(lo..=hi)).collect()
}

fn sized(shape: &[usize], r: &mut impl Rng, lo: f64, hi: f64) -> (Vec<f64>, Vec<usize>) {
    (uniform(r, shape.iter().product(), lo, hi), shape.to_vec())
}

fn away_from_zero(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = r.gen_range(0.05..1.5);
            if r.gen_bool(0.5) {
                x
            } else {
                -x
            }
        })
        .collect()
}

/// Worst relative error of one op over its instances.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
}

fn run_cases(out: &mut Vec<OpReport>, name: &str, mut case: impl FnMut(u64) -> f64) {
    let worst = (0..INSTANCES).map(&mut case).fold(0.0, f64::max);
    out.push(OpReport {
        name: name.to_string(),
        instances: INSTANCES as usize,
        worst,
    });
}

fn matmul_plain_and_batched(out: &mut Vec<OpReport>) {
    run_cases(out, "matmul", |seed| {
        let r = &mut rng(seed);
        let d = dims(r, 1, 5, 3);
        let a = sized(&[d[0], d[1]], r, -1.0, 1.0);
        let b = sized(&[d[1], d[2]], r, -1.0, 1.0);
        grad_check(&[a, b], |t| project(&t[0].matmul(&t[1]).unwrap(), seed))
    });
    run_cases(out, "batched matmul", |seed| {
        let r = &mut rng(100 + seed);
        let d = dims(r, 1, 4, 4);
        let a = sized(&[d[3], d[0], d[1]], r, -1.0, 1.0);
        let b = sized(&[d[1], d[2]], r, -1.0, 1.0);
        grad_check(&[a, b], |t| project(&t[0].matmul(&t[1]).unwrap(), seed))
    });
}

fn binary_ops_with_broadcast(out: &mut Vec<OpReport>) {
    type Op = fn(&Tensor, &Tensor) -> Tensor;
    let ops: [(&str, Op); 3] = [
        ("add", |a, b| a.add(b).unwrap()),
        ("sub", |a, b| a.sub(b).unwrap()),
        ("mul", |a, b| a.mul(b).unwrap()),
    ];
    for (name, op) in ops {
        run_cases(out, name, |seed| {
            let r = &mut rng(200 + seed);
            let d = dims(r, 1, 5, 2);
            let a = sized(&[d[0], d[1]], r, -1.0, 1.0);
            let b = if seed % 2 == 0 {
                sized(&[d[1]], r, -1.0, 1.0)
            } else {
                sized(&[d[0], d[1]], r, -1.0, 1.0)
            };
            grad_check(&[a, b], |t| project(&op(&t[0], &t[1]), seed))
        });
    }
}

fn unary_ops(out: &mut Vec<OpReport>) {
    run_cases(out, "exp", |seed| {
        let r = &mut rng(300 + seed);
        let x = sized(&dims(r, 1, 6, 2), r, -2.0, 2.0);
        grad_check(&[x], |t| project(&t[0].exp(), seed))
    });
    run_cases(out, "log", |seed| {
        let r = &mut rng(400 + seed);
        let x = sized(&dims(r, 1, 6, 2), r, 0.3, 3.0);
        grad_check(&[x], |t| project(&t[0].log(), seed))
    });
    run_cases(out, "relu", |seed| {
        let r = &mut rng(500 + seed);
        let shape = dims(r, 1, 6, 2);
        let x = (away_from_zero(r, shape.iter().product()), shape);
        grad_check(&[x], |t| project(&t[0].relu(), seed))
    });
    run_cases(out, "scale", |seed| {
        let r = &mut rng(600 + seed);
        let s: f64 = r.gen_range(-3.0..3.0);
        let x = sized(&dims(r, 1, 6, 2), r, -1.0, 1.0);
        grad_check(&[x], |t| project(&t[0].scale(s), seed))
    });
}

fn reductions_and_structure(out: &mut Vec<OpReport>) {
    run_cases(out, "sum", |seed| {
        let r = &mut rng(700 + seed);
        let x = sized(&dims(r, 1, 6, 2), r, -1.0, 1.0);
        grad_check(&[x], |t| t[0].exp().sum())
    });
    run_cases(out, "mean", |seed| {
        let r = &mut rng(800 + seed);
        let x = sized(&dims(r, 1, 6, 2), r, -1.0, 1.0);
        grad_check(&[x], |t| t[0].exp().mean())
    });
    run_cases(out, "reshape", |seed| {
        let r = &mut rng(900 + seed);
        let d = dims(r, 1, 4, 2);
        let x = sized(&[d[0], d[1]], r, -1.0, 1.0);
        grad_check(&[x], |t| project(&t[0].reshape(&[d[1], d[0]]).unwrap(), seed))
    });
    run_cases(out, "permute", |seed| {
        let r = &mut rng(1000 + seed);
        let d = dims(r, 1, 4, 3);
        let x = sized(&d, r, -1.0, 1.0);
        grad_check(&[x], |t| project(&t[0].permute(&[2, 0, 1]).unwrap(), seed))
    });
    run_cases(out, "gather_rows", |seed| {
        let r = &mut rng(1100 + seed);
        let d = dims(r, 2, 6, 2);
        let ids: Vec<Option<usize>> = (0..r.gen_range(1..8))
            .map(|_| if r.gen_bool(0.2) { None } else { Some(r.gen_range(0..d[0])) })
            .collect();
        let x = sized(&d, r, -1.0, 1.0);
        grad_check(&[x], |t| project(&t[0].gather_rows(&ids).unwrap(), seed))
    });
    run_cases(out, "row", |seed| {
        let r = &mut rng(1200 + seed);
        let d = dims(r, 2, 6, 2);
        let i = r.gen_range(0..d[0]);
        let x = sized(&d, r, -1.0, 1.0);
        grad_check(&[x], |t| project(&t[0].row(i).unwrap(), seed))
    });
}

fn layer_norm_all_inputs(out: &mut Vec<OpReport>) {
    run_cases(out, "layer_norm", |seed| {
        let r = &mut rng(1300 + seed);
        let (rows, d) = (r.gen_range(1..=5), r.gen_range(2..=8));
        let x = sized(&[rows, d], r, -2.0, 2.0);
        let g = sized(&[d], r, 0.5, 1.5);
        let b = sized(&[d], r, -0.5, 0.5);
        grad_check(&[x, g, b], |t| project(&t[0].layer_norm(&t[1], &t[2], 1e-5).unwrap(), seed))
    });
}

fn losses(out: &mut Vec<OpReport>) {
    run_cases(out, "cross_entropy_logits", |seed| {
        let r = &mut rng(1400 + seed);
        let (n, v) = (r.gen_range(1..=6), r.gen_range(2..=7));
        let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..v)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.7)).collect();
        mask[0] = true;
        let x = sized(&[n, v], r, -3.0, 3.0);
        grad_check(&[x], |t| t[0].cross_entropy_logits(&targets, &mask).unwrap())
    });
    run_cases(out, "binary_cross_entropy_logits", |seed| {
        let r = &mut rng(1500 + seed);
        let c = r.gen_range(1..=6);
        let labels: Vec<f64> = (0..c).map(|_| f64::from(u8::from(r.gen_bool(0.5)))).collect();
        let x = sized(&[c], r, -4.0, 4.0);
        grad_check(&[x], |t| t[0].binary_cross_entropy_logits(&labels).unwrap())
    });
}

fn favor_feature_map(out: &mut Vec<OpReport>) {
    run_cases(out, "feature_map", |seed| {
        let r = &mut rng(1600 + seed);
        let (n, d, m) = (r.gen_range(1..=5), r.gen_range(1..=6), r.gen_range(1..=12));
        let map = RandomFeatureMap::new(m, d, seed, seed % 2 == 0).unwrap();
        let x = sized(&[n, d], r, -0.8, 0.8);
        grad_check(&[x], |t| project(&feature_map(&t[0], &map).unwrap(), seed))
    });
}

fn favor_causal_attention(out: &mut Vec<OpReport>) {
    run_cases(out, "causal_linear_attention", |seed| {
        let r = &mut rng(1700 + seed);
        // Lengths past one chunk exercise the carried prefix state.
        let (h, n, d, dv) = (r.gen_range(1..=2), r.gen_range(1..=40), r.gen_range(1..=4), r.gen_range(1..=4));
        let map = RandomFeatureMap::new(r.gen_range(2..=10), d, seed, true).unwrap();
        let q = sized(&[h, n, d], r, -1.0, 1.0);
        let k = sized(&[h, n, d], r, -1.0, 1.0);
        let v = sized(&[h, n, dv], r, -1.0, 1.0);
        grad_check(&[q, k, v], |t| {
            project(&causal_linear_attention(&t[0], &t[1], &t[2], &map, 1e-6).unwrap(), seed)
        })
    });
}


/// Every op family, `INSTANCES` random cases each.
pub fn op_reports() -> Vec<OpReport> {
    let mut out = Vec::new();
    matmul_plain_and_batched(&mut out);
    binary_ops_with_broadcast(&mut out);
    unary_ops(&mut out);
    reductions_and_structure(&mut out);
    layer_norm_all_inputs(&mut out);
    losses(&mut out);
    favor_feature_map(&mut out);
    favor_causal_attention(&mut out);
    out
}

/// Relative error of the full gradient of a 2-layer model loss.
pub fn end_to_end_error() -> f64 {
    let (mut model, tok, corpus) = tiny_model(3, 2);
    let rec = corpus.records.iter().find(|r| r.delta.is_some()).unwrap();
    let s = tokenize_record(&corpus, rec, &tok).unwrap();
    let seq = assemble(
        &model.config.vocab,
        model.config.geometry,
        Some(&s.report),
        Some(&s.image),
        s.prior_image.as_deref(),
        s.delta,
        Mode::Train,
        &mut rng(9),
    )
    .unwrap();
    let w = model.leaves();
    model.loss(&w, &seq, &s.labels, None).unwrap().total.backward().unwrap();
    let analytic: Vec<f64> = w
        .named()
        .iter()
        .flat_map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    let sizes: Vec<usize> = model.params.named().iter().map(|(_, p)| p.data.len()).collect();
    for (pi, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let mut at = |delta: f64| {
                model.params.values_mut()[pi].data[j] += delta;
                let l = model.loss(&model.leaves(), &seq, &s.labels, None).unwrap().total.item();
                model.params.values_mut()[pi].data[j] -= delta;
                l
            };
            let (plus, minus) = (at(super::FD_EPS), at(-super::FD_EPS));
            numeric.push((plus - minus) / (2.0 * super::FD_EPS));
        }
    }
    super::rel_err(&analytic, &numeric)
}
