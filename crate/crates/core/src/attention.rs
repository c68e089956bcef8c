//! Causal linear attention with positive random features (FAVOR+).
//!
//! Queries and keys are scaled by `d^(-1/4)` and mapped through
//! `φ(x) = exp(ωx − ‖x‖²/2) / √m`, so that `φ(q)ᵀφ(k)` is an unbiased
//! estimate of `exp(qᵀk/√d)`. The causal output is then a ratio of prefix
//! sums,
//!
//! ```text
//! out_i = φ(q_i)ᵀ S_i / (φ(q_i)ᵀ z_i + ε),   S_i = Σ_{j≤i} φ(k_j) v_jᵀ,   z_i = Σ_{j≤i} φ(k_j)
//! ```
//!
//! computed in a single left-to-right pass, `O(n·m·d)` per head.
//! [`exact_causal_softmax_attention`] is the quadratic reference.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Denominator stabiliser used by the model.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Fixed projection matrix `ω` (`m × d`, row-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomFeatureMap {
    pub omega: Vec<f64>,
    pub m: usize,
    pub d: usize,
    pub seed: u64,
    pub orthogonal: bool,
}

impl RandomFeatureMap {
    /// Draws `m` projection rows from `N(0, I_d)`. With `orthogonal`, each
    /// block of `d` rows is Gram-Schmidt orthogonalised and rescaled to norm
    /// `√d`, the expected norm of a standard normal vector.
    pub fn new(m: usize, d: usize, seed: u64, orthogonal: bool) -> Result<Self> {
        if m < 1 {
            return Err(invalid("random feature count m must be at least 1"));
        }
        if d < 1 {
            return Err(invalid("head dimension d must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut omega: Vec<f64> = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
        if orthogonal {
            let target = (d as f64).sqrt();
            for block_start in (0..m).step_by(d) {
                let block_end = (block_start + d).min(m);
                for r in block_start..block_end {
                    for prev in block_start..r {
                        let proj = linalg::dot(&omega[r * d..(r + 1) * d], &omega[prev * d..(prev + 1) * d]);
                        for j in 0..d {
                            omega[r * d + j] -= proj * omega[prev * d + j];
                        }
                    }
                    let norm = linalg::dot(&omega[r * d..(r + 1) * d], &omega[r * d..(r + 1) * d]).sqrt();
                    for j in 0..d {
                        omega[r * d + j] /= norm;
                    }
                }
                for x in &mut omega[block_start * d..block_end * d] {
                    *x *= target;
                }
            }
        }
        Ok(Self {
            omega,
            m,
            d,
            seed,
            orthogonal,
        })
    }

    /// `φ` applied to each `d`-row of `x` (already scaled), giving `rows × m`.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.d;
        let mut u = vec![0.0; rows * self.m];
        linalg::gemm(rows, self.d, self.m, x, (self.d, 1), &self.omega, (1, self.d), &mut u, false);
        let norm = 1.0 / (self.m as f64).sqrt();
        for r in 0..rows {
            let xr = &x[r * self.d..(r + 1) * self.d];
            let half_sq = 0.5 * linalg::dot(xr, xr);
            for v in &mut u[r * self.m..(r + 1) * self.m] {
                *v = norm * (*v - half_sq).exp();
            }
        }
        u
    }

    /// Pulls `dφ` back to `dx` given `x` and `φ(x)` (all row-major).
    fn features_backward(&self, x: &[f64], phi: &[f64], dphi: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.d;
        let du: Vec<f64> = phi.iter().zip(dphi).map(|(p, g)| p * g).collect();
        let mut dx = vec![0.0; x.len()];
        linalg::gemm(rows, self.m, self.d, &du, (self.m, 1), &self.omega, (self.d, 1), &mut dx, false);
        for r in 0..rows {
            let s: f64 = du[r * self.m..(r + 1) * self.m].iter().sum();
            for j in 0..self.d {
                dx[r * self.d + j] -= x[r * self.d + j] * s;
            }
        }
        dx
    }
}

/// Differentiable `φ(x)` over the last axis: `[.., n, d] → [.., n, m]`.
pub fn feature_map(x: &Tensor, map: &RandomFeatureMap) -> Result<Tensor> {
    let shape = x.shape();
    if shape.last() != Some(&map.d) {
        return Err(Error::ShapeMismatch {
            op: "feature_map",
            lhs: shape.to_vec(),
            rhs: vec![map.m, map.d],
        });
    }
    let phi = map.features(x.data());
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = map.m;
    let (tx, map, saved) = (x.clone(), map.clone(), phi.clone());
    Ok(Tensor::from_op(phi, out_shape, vec![x.clone()], move |g| {
        vec![Some(map.features_backward(tx.data(), &saved, g))]
    }))
}

/// Running sums for one head: `S` (`m × d_v`) and `z` (`m`).
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixState {
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    m: usize,
    dv: usize,
}

impl PrefixState {
    pub fn new(m: usize, dv: usize) -> Self {
        Self {
            s: vec![0.0; m * dv],
            z: vec![0.0; m],
            m,
            dv,
        }
    }

    pub fn push(&mut self, phi_k: &[f64], v: &[f64]) {
        for a in 0..self.m {
            let p = phi_k[a];
            self.z[a] += p;
            let row = &mut self.s[a * self.dv..(a + 1) * self.dv];
            for (sb, vb) in row.iter_mut().zip(v) {
                *sb += p * vb;
            }
        }
    }

    /// Writes `φ(q)ᵀS / (φ(q)ᵀz + ε)` into `out`; returns the denominator.
    pub fn read(&self, phi_q: &[f64], eps: f64, out: &mut [f64]) -> f64 {
        out.iter_mut().for_each(|o| *o = 0.0);
        for a in 0..self.m {
            let p = phi_q[a];
            let row = &self.s[a * self.dv..(a + 1) * self.dv];
            for (o, sb) in out.iter_mut().zip(row) {
                *o += p * sb;
            }
        }
        let den = linalg::dot(phi_q, &self.z) + eps;
        out.iter_mut().for_each(|o| *o /= den);
        den
    }
}

/// Rows per block in [`causal_product`].
const CHUNK: usize = 16;

/// `out_i = Σ_{j≤i} (x_i·y_j) z_j` (or `Σ_{j≥i}` with `reverse`) for `x, y`
/// of shape `n×a` and `z` of shape `n×b`.
///
/// Works block by block: products inside a block use a masked `x yᵀ`, and
/// earlier blocks enter through the running `yᵀz`. Cost is linear in `n`.
/// Masked pairs contribute an exact zero, so outputs never depend on
/// positions on the far side of `i`.
#[allow(clippy::too_many_arguments)]
pub fn causal_product(x: &[f64], y: &[f64], z: &[f64], n: usize, a: usize, b: usize, reverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; n * b];
    let mut state = vec![0.0; a * b];
    let mut att = vec![0.0; CHUNK * CHUNK];
    let mut starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    if reverse {
        starts.reverse();
    }
    for start in starts {
        let end = (start + CHUNK).min(n);
        let rows = ChunkRows {
            x: &x[start * a..end * a],
            y: &y[start * a..end * a],
            z: &z[start * b..end * b],
            c: end - start,
        };
        chunk_step(&rows, a, b, reverse, &mut state, &mut att, &mut out[start * b..end * b]);
    }
    out
}

struct ChunkRows<'a> {
    x: &'a [f64],
    y: &'a [f64],
    z: &'a [f64],
    c: usize,
}

/// One block of [`causal_product`]: adds the block's outputs to `out` and
/// folds the block into `state`.
fn chunk_step(rows: &ChunkRows<'_>, a: usize, b: usize, reverse: bool, state: &mut [f64], att: &mut [f64], out: &mut [f64]) {
    let ChunkRows { x, y, z, c } = *rows;
    linalg::gemm(c, a, b, x, (a, 1), state, (b, 1), out, false);
    linalg::gemm(c, a, c, x, (a, 1), y, (1, a), att, false);
    for i in 0..c {
        for j in 0..c {
            if (j > i && !reverse) || (j < i && reverse) {
                att[i * c + j] = 0.0;
            }
        }
    }
    linalg::gemm(c, c, b, att, (c, 1), z, (b, 1), out, true);
    linalg::gemm(a, c, b, y, (1, a), z, (b, 1), state, true);
}

/// `[v | 1]`, so one causal product yields numerators and denominators.
fn with_ones(v: &[f64], n: usize, dv: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (dv + 1));
    for row in v.chunks_exact(dv) {
        out.extend_from_slice(row);
        out.push(1.0);
    }
    out
}

/// Per-head forward on plain slices: `q, k` are `n × d`, `v` is `n × d_v`.
/// Returns `(out, φ(q̃), φ(k̃), denominators)`.
fn favor_head_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    dv: usize,
    map: &RandomFeatureMap,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = (map.d as f64).powf(-0.25);
    let qs: Vec<f64> = q.iter().map(|x| x * scale).collect();
    let ks: Vec<f64> = k.iter().map(|x| x * scale).collect();
    let pq = map.features(&qs);
    let pk = map.features(&ks);
    let nd = causal_product(&pq, &pk, &with_ones(v, n, dv), n, map.m, dv + 1, false);
    let mut out = vec![0.0; n * dv];
    let mut den = vec![0.0; n];
    for i in 0..n {
        let row = &nd[i * (dv + 1)..(i + 1) * (dv + 1)];
        den[i] = row[dv] + eps;
        for b in 0..dv {
            out[i * dv + b] = row[b] / den[i];
        }
    }
    (out, pq, pk, den)
}

/// Plain (tape-free) causal FAVOR+ for one head. Features are computed one
/// block at a time, so memory beyond the output is `O(m·d_v)`.
pub fn favor_head(q: &[f64], k: &[f64], v: &[f64], n: usize, dv: usize, map: &RandomFeatureMap, eps: f64) -> Vec<f64> {
    let (d, m) = (map.d, map.m);
    let scale = (d as f64).powf(-0.25);
    let mut out = vec![0.0; n * dv];
    let mut state = vec![0.0; m * (dv + 1)];
    let mut att = vec![0.0; CHUNK * CHUNK];
    let mut nd = vec![0.0; CHUNK * (dv + 1)];
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let c = end - start;
        let qs: Vec<f64> = q[start * d..end * d].iter().map(|x| x * scale).collect();
        let ks: Vec<f64> = k[start * d..end * d].iter().map(|x| x * scale).collect();
        let (pq, pk) = (map.features(&qs), map.features(&ks));
        let z = with_ones(&v[start * dv..end * dv], c, dv);
        let nd = &mut nd[..c * (dv + 1)];
        nd.iter_mut().for_each(|x| *x = 0.0);
        chunk_step(&ChunkRows { x: &pq, y: &pk, z: &z, c }, m, dv + 1, false, &mut state, &mut att, nd);
        for (i, row) in nd.chunks_exact(dv + 1).enumerate() {
            let den = row[dv] + eps;
            for (o, x) in out[(start + i) * dv..(start + i + 1) * dv].iter_mut().zip(row) {
                *o = x / den;
            }
        }
    }
    out
}

struct HeadDims {
    heads: usize,
    n: usize,
    d: usize,
    dv: usize,
    out_shape: Vec<usize>,
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, map: Option<&RandomFeatureMap>) -> Result<HeadDims> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    let mismatch = |rhs: &[usize]| Error::ShapeMismatch {
        op: "causal attention",
        lhs: sq.to_vec(),
        rhs: rhs.to_vec(),
    };
    if sq.len() < 2 || sq != sk {
        return Err(mismatch(sk));
    }
    if sv.len() != sq.len() || sv[..sv.len() - 1] != sq[..sq.len() - 1] {
        return Err(mismatch(sv));
    }
    let n = sq[sq.len() - 2];
    let d = sq[sq.len() - 1];
    let dv = sv[sv.len() - 1];
    if n < 1 {
        return Err(invalid("sequence length must be at least 1"));
    }
    if let Some(map) = map {
        if map.d != d {
            return Err(mismatch(&[map.m, map.d]));
        }
    }
    let heads = sq[..sq.len() - 2].iter().product();
    let mut out_shape = sv.to_vec();
    *out_shape.last_mut().unwrap() = dv;
    Ok(HeadDims {
        heads,
        n,
        d,
        dv,
        out_shape,
    })
}

/// Causal FAVOR+ over `[.., n, d]` inputs with all leading axes treated as
/// independent heads. Fully differentiable.
pub fn causal_linear_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    map: &RandomFeatureMap,
    eps: f64,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(invalid("denominator stabiliser must be positive"));
    }
    let HeadDims {
        heads,
        n,
        d,
        dv,
        out_shape,
    } = check_qkv(q, k, v, Some(map))?;
    let m = map.m;
    let mut out = vec![0.0; heads * n * dv];
    let mut saved = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = &q.data()[h * n * d..(h + 1) * n * d];
        let kh = &k.data()[h * n * d..(h + 1) * n * d];
        let vh = &v.data()[h * n * dv..(h + 1) * n * dv];
        let (o, pq, pk, den) = favor_head_forward(qh, kh, vh, n, dv, map, eps);
        out[h * n * dv..(h + 1) * n * dv].copy_from_slice(&o);
        saved.push((o, pq, pk, den));
    }

    let (tq, tk, tv, map) = (q.clone(), k.clone(), v.clone(), map.clone());
    Ok(Tensor::from_op(
        out,
        out_shape,
        vec![q.clone(), k.clone(), v.clone()],
        move |g| {
            let scale = (d as f64).powf(-0.25);
            let mut gq = vec![0.0; heads * n * d];
            let mut gk = vec![0.0; heads * n * d];
            let mut gv = vec![0.0; heads * n * dv];
            for (h, (out, pq, pk, den)) in saved.iter().enumerate() {
                let gh = &g[h * n * dv..(h + 1) * n * dv];
                let vh = &tv.data()[h * n * dv..(h + 1) * n * dv];
                // Upstream gradients of [numerator | denominator] per row.
                let mut gnd = vec![0.0; n * (dv + 1)];
                let mut gnum = vec![0.0; n * dv];
                for i in 0..n {
                    let gi = &gh[i * dv..(i + 1) * dv];
                    for b in 0..dv {
                        gnum[i * dv + b] = gi[b] / den[i];
                        gnd[i * (dv + 1) + b] = gnum[i * dv + b];
                    }
                    gnd[i * (dv + 1) + dv] = -linalg::dot(gi, &out[i * dv..(i + 1) * dv]) / den[i];
                }
                let v1 = with_ones(vh, n, dv);
                let dpq = causal_product(&gnd, &v1, pk, n, dv + 1, m, false);
                let dpk = causal_product(&v1, &gnd, pq, n, dv + 1, m, true);
                let dvh = causal_product(pk, pq, &gnum, n, m, dv, true);
                gv[h * n * dv..(h + 1) * n * dv].copy_from_slice(&dvh);
                let qs: Vec<f64> = tq.data()[h * n * d..(h + 1) * n * d].iter().map(|x| x * scale).collect();
                let ks: Vec<f64> = tk.data()[h * n * d..(h + 1) * n * d].iter().map(|x| x * scale).collect();
                let dqs = map.features_backward(&qs, pq, &dpq);
                let dks = map.features_backward(&ks, pk, &dpk);
                for (dst, src) in gq[h * n * d..(h + 1) * n * d].iter_mut().zip(&dqs) {
                    *dst = src * scale;
                }
                for (dst, src) in gk[h * n * d..(h + 1) * n * d].iter_mut().zip(&dks) {
                    *dst = src * scale;
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        },
    ))
}

/// Plain (tape-free) exact causal softmax attention for one head.
pub fn exact_head(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, dv: usize) -> Vec<f64> {
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * dv];
    let mut logits = vec![0.0; n];
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for j in 0..=i {
            logits[j] = linalg::dot(qi, &k[j * d..(j + 1) * d]) * inv_sqrt_d;
            max = max.max(logits[j]);
        }
        let mut total = 0.0;
        let oi = &mut out[i * dv..(i + 1) * dv];
        for j in 0..=i {
            let w = (logits[j] - max).exp();
            total += w;
            for (o, vb) in oi.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                *o += w * vb;
            }
        }
        oi.iter_mut().for_each(|o| *o /= total);
    }
    out
}

/// Reference `O(n²)` causal softmax attention over `[.., n, d]` inputs.
pub fn exact_causal_softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let HeadDims {
        heads,
        n,
        d,
        dv,
        out_shape,
    } = check_qkv(q, k, v, None)?;
    let mut out = Vec::with_capacity(heads * n * dv);
    for h in 0..heads {
        out.extend(exact_head(
            &q.data()[h * n * d..(h + 1) * n * d],
            &k.data()[h * n * d..(h + 1) * n * d],
            &v.data()[h * n * dv..(h + 1) * n * dv],
            n,
            d,
            dv,
        ));
    }
    Tensor::try_new(out, &out_shape)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Favor,
    Exact,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Favor => "favor",
            Kernel::Exact => "exact",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub method: String,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

const MIN_SAMPLE_MS: f64 = 20.0;

/// Times single-head forward passes of the selected kernels at each `n`.
/// Each sample is the per-call mean over a batch of calls lasting at least
/// `MIN_SAMPLE_MS`. Repeats cycle through every `(n, kernel)` pair so a slow
/// stretch of the host does not land on one size only.
pub fn bench_scaling(
    n_values: &[usize],
    kernels: &[Kernel],
    m: usize,
    d: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(invalid("bench needs at least 3 repeats"));
    }
    let map = RandomFeatureMap::new(m, d, seed, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let inputs: Vec<[Vec<f64>; 3]> = n_values
        .iter()
        .map(|&n| std::array::from_fn(|_| (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    let run = |i: usize, kernel: Kernel| {
        let [q, k, v] = &inputs[i];
        let n = n_values[i];
        match kernel {
            Kernel::Favor => favor_head(q, k, v, n, d, &map, DEFAULT_EPS),
            Kernel::Exact => exact_head(q, k, v, n, d, d),
        }
    };
    let cases: Vec<(usize, Kernel)> = (0..n_values.len())
        .flat_map(|i| kernels.iter().map(move |&kernel| (i, kernel)))
        .collect();
    let calls: Vec<usize> = cases
        .iter()
        .map(|&(i, kernel)| {
            let t0 = Instant::now();
            std::hint::black_box(run(i, kernel));
            let once = t0.elapsed().as_secs_f64() * 1e3;
            (MIN_SAMPLE_MS / once.max(1e-6)).ceil() as usize
        })
        .collect();
    let mut times = vec![Vec::with_capacity(repeats); cases.len()];
    for _ in 0..repeats {
        for (c, &(i, kernel)) in cases.iter().enumerate() {
            let t0 = Instant::now();
            for _ in 0..calls[c] {
                std::hint::black_box(run(i, kernel));
            }
            times[c].push(t0.elapsed().as_secs_f64() * 1e3 / calls[c] as f64);
        }
    }
    Ok(cases
        .iter()
        .zip(&mut times)
        .map(|(&(i, kernel), t)| {
            t.sort_by(f64::total_cmp);
            BenchRow {
                n: n_values[i],
                method: kernel.name().to_string(),
                median_ms: percentile(t, 0.5),
                p10_ms: percentile(t, 0.1),
                p90_ms: percentile(t, 0.9),
            }
        })
        .collect())
}

/// Linear-interpolated percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// CSV with columns `n, method, median_ms, p10_ms, p90_ms`.
pub fn write_bench_csv(rows: &[BenchRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_features() {
        let map = RandomFeatureMap::new(8, 4, 1, false).unwrap();
        let phi = map.features(&[0.0; 4]);
        for p in phi {
            assert!((p - 1.0 / 8f64.sqrt()).abs() < 1e-15);
        }
        assert!(RandomFeatureMap::new(0, 4, 1, false).is_err());
    }

    #[test]
    fn orthogonal_blocks_have_scaled_identity_gram() {
        let d = 6;
        let map = RandomFeatureMap::new(15, d, 3, true).unwrap();
        for block in (0..15).step_by(d) {
            let end = (block + d).min(15);
            for a in block..end {
                for b in block..end {
                    let g = linalg::dot(&map.omega[a * d..(a + 1) * d], &map.omega[b * d..(b + 1) * d]);
                    let expect = if a == b { d as f64 } else { 0.0 };
                    assert!((g - expect).abs() < 1e-10, "gram[{a},{b}] = {g}");
                }
            }
        }
    }

    #[test]
    fn single_position_returns_value() {
        let map = RandomFeatureMap::new(16, 4, 0, true).unwrap();
        let q = Tensor::new(vec![0.3, -0.1, 0.2, 0.5], &[1, 4]);
        let k = Tensor::new(vec![-0.4, 0.2, 0.1, 0.0], &[1, 4]);
        let v = Tensor::new(vec![1.0, 2.0, -3.0], &[1, 3]);
        let out = causal_linear_attention(&q, &k, &v, &map, 1e-12).unwrap();
        for (o, e) in out.data().iter().zip(v.data()) {
            assert!((o - e).abs() < 1e-9);
        }
        let exact = exact_causal_softmax_attention(&q, &k, &v).unwrap();
        assert_eq!(exact.data(), v.data());
    }

    #[test]
    fn exact_hand_case() {
        let q = Tensor::new(vec![1.0, 1.0, 1.0], &[3, 1]);
        let v = Tensor::new(vec![1.0, 2.0, 3.0], &[3, 1]);
        let out = exact_causal_softmax_attention(&q, &q, &v).unwrap();
        let expect = [1.0, 1.5, 2.0];
        for (o, e) in out.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_running_mean() {
        let (n, d) = (6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let key: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..n).flat_map(|_| key.clone()).collect();
        let v: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (q, k, v) = (
            Tensor::new(q, &[n, d]),
            Tensor::new(k, &[n, d]),
            Tensor::new(v, &[n, 2]),
        );
        let map = RandomFeatureMap::new(32, d, 2, true).unwrap();
        let approx = causal_linear_attention(&q, &k, &v, &map, 1e-12).unwrap();
        let exact = exact_causal_softmax_attention(&q, &k, &v).unwrap();
        for i in 0..n {
            for b in 0..2 {
                let mean: f64 = (0..=i).map(|j| v.data()[j * 2 + b]).sum::<f64>() / (i + 1) as f64;
                let e = exact.data()[i * 2 + b];
                assert!((e - mean).abs() < 1e-12);
                let a = approx.data()[i * 2 + b];
                assert!((a - e).abs() <= 1e-6 * e.abs().max(1e-3), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn bench_smoke_and_csv() {
        let rows = bench_scaling(&[1, 8], &[Kernel::Favor, Kernel::Exact], 8, 4, 3, 0).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.median_ms >= 0.0 && r.p10_ms <= r.p90_ms));
        let mut buf = Vec::new();
        write_bench_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,method,median_ms,p10_ms,p90_ms\n"));
        assert!(bench_scaling(&[4], &[Kernel::Favor], 8, 4, 2, 0).is_err());
    }
}
