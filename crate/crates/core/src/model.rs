//! Causal FAVOR+ transformer over the unified token stream.
//!
//! One embedding table covers every id (words, image codes, temporal
//! buckets, framing, pad, cls). Blocks are pre-norm:
//!
//! ```text
//! x ← x + Wo · FAVOR(LN(x))
//! x ← x + W2 · relu(W1 · LN(x))
//! ```
//!
//! A final LayerNorm feeds the next-token head at every position and the
//! pathology head at the cls position.
//!
//! Two forward paths exist: [`Model::forward`] records onto the autodiff tape
//! for training, and [`Decoder`] runs tape-free with per-head prefix states
//! so generation can extend a sequence one token at a time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{causal_linear_attention, PrefixState, RandomFeatureMap};
use crate::error::{invalid, Error, Result};
use crate::layout::{self, AssembledSequence, EmbedSource, Geometry, PositionalTables, Vocab};
use crate::linalg;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub m_features: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    /// Weight of the pathology loss.
    pub lambda: f64,
    pub vocab: Vocab,
    pub geometry: Geometry,
    pub pathologies: usize,
    pub orthogonal_features: bool,
    /// Redraw every layer's feature map at each optimizer step.
    pub redraw_features: bool,
    pub attn_eps: f64,
    pub ln_eps: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Default toy configuration for a vocabulary and geometry.
    pub fn toy(vocab: Vocab, geometry: Geometry, pathologies: usize) -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            m_features: 64,
            mlp_hidden: 256,
            dropout: 0.1,
            lambda: 1.0,
            vocab,
            geometry,
            pathologies,
            orthogonal_features: true,
            redraw_features: false,
            attn_eps: crate::attention::DEFAULT_EPS,
            ln_eps: 1e-5,
            init_seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.total()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(invalid("lambda must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout must be in [0, 1)"));
        }
        if self.m_features == 0 || self.n_layers == 0 || self.mlp_hidden == 0 || self.pathologies == 0 {
            return Err(invalid("layer, feature, hidden and pathology counts must be positive"));
        }
        self.geometry.grid_side()?;
        Ok(())
    }

    /// Total trainable scalars:
    ///
    /// ```text
    /// V·d + 4·√N_x·d + (N_x+2)·d                       embeddings
    /// + layers · (4d + 4d² + d + 2dh + h + d)          per block
    /// + 2d + d·V + V + d·c + c                         final norm and heads
    /// ```
    /// with `V` the unified vocabulary, `h` the MLP width, `c` pathologies.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size();
        let side = (self.geometry.n_x as f64).sqrt() as usize;
        let h = self.mlp_hidden;
        let c = self.pathologies;
        let embed = v * d + 4 * side * d + (self.geometry.n_x + 2) * d;
        let block = 4 * d + 4 * d * d + d + 2 * d * h + h + d;
        embed + self.n_layers * block + 2 * d + d * v + v + d * c + c
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A named trainable buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn ones(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![1.0; shape.iter().product()],
        }
    }

    fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(|_| dist.sample(rng)).collect(),
        }
    }

    /// `[fan_in, fan_out]` weight drawn from `U(±1/√fan_in)`.
    fn linear(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            shape: vec![fan_in, fan_out],
            data: (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Every trainable tensor of the model, generic over storage so the same
/// layout serves plain buffers ([`Param`]) and tape leaves ([`Tensor`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    /// Unified token table; the cls row is the learnable cls embedding.
    pub tok_emb: T,
    pub axial_row: T,
    pub axial_col: T,
    pub pad_pos: T,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_g: T,
    pub lnf_b: T,
    pub w_out: T,
    pub b_out: T,
    pub w_cls: T,
    pub b_cls: T,
}

impl<T> LayerWeights<T> {
    fn fields(&self) -> [(&'static str, &T); 13] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 13] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn try_map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U>) -> Result<LayerWeights<U>> {
        let mut g = |name: &str, t: &T| f(&format!("{prefix}.{name}"), t);
        Ok(LayerWeights {
            ln1_g: g("ln1_g", &self.ln1_g)?,
            ln1_b: g("ln1_b", &self.ln1_b)?,
            wq: g("wq", &self.wq)?,
            wk: g("wk", &self.wk)?,
            wv: g("wv", &self.wv)?,
            wo: g("wo", &self.wo)?,
            bo: g("bo", &self.bo)?,
            ln2_g: g("ln2_g", &self.ln2_g)?,
            ln2_b: g("ln2_b", &self.ln2_b)?,
            w1: g("w1", &self.w1)?,
            b1: g("b1", &self.b1)?,
            w2: g("w2", &self.w2)?,
            b2: g("b2", &self.b2)?,
        })
    }
}

impl<T> Weights<T> {
    /// `(name, tensor)` pairs in a fixed canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out: Vec<(String, &T)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("axial_row".into(), &self.axial_row),
            ("axial_col".into(), &self.axial_col),
            ("pad_pos".into(), &self.pad_pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.fields().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.extend([
            ("lnf_g".into(), &self.lnf_g),
            ("lnf_b".into(), &self.lnf_b),
            ("w_out".into(), &self.w_out),
            ("b_out".into(), &self.b_out),
            ("w_cls".into(), &self.w_cls),
            ("b_cls".into(), &self.b_cls),
        ]);
        out
    }

    /// Mutable references in the same order as [`Weights::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = vec![
            &mut self.tok_emb,
            &mut self.axial_row,
            &mut self.axial_col,
            &mut self.pad_pos,
        ];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.extend([
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.w_cls,
            &mut self.b_cls,
        ]);
        out
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<Weights<U>> {
        Ok(Weights {
            tok_emb: f("tok_emb", &self.tok_emb)?,
            axial_row: f("axial_row", &self.axial_row)?,
            axial_col: f("axial_col", &self.axial_col)?,
            pad_pos: f("pad_pos", &self.pad_pos)?,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.try_map(&format!("layers.{i}"), &mut f))
                .collect::<Result<_>>()?,
            lnf_g: f("lnf_g", &self.lnf_g)?,
            lnf_b: f("lnf_b", &self.lnf_b)?,
            w_out: f("w_out", &self.w_out)?,
            b_out: f("b_out", &self.b_out)?,
            w_cls: f("w_cls", &self.w_cls)?,
            b_cls: f("b_cls", &self.b_cls)?,
        })
    }
}

pub type ModelParams = Weights<Param>;

const EMBED_STD: f64 = 1.0;

impl ModelParams {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let (d, h, v, c) = (cfg.d_model, cfg.mlp_hidden, cfg.vocab_size(), cfg.pathologies);
        let side = cfg.geometry.grid_side()?;
        // Embeddings start at the scale of the fixed sinusoids.
        let tok_emb = Param::normal(&[v, d], EMBED_STD, &mut rng);
        let axial_row = Param::normal(&[2 * side, d], EMBED_STD, &mut rng);
        let axial_col = Param::normal(&[2 * side, d], EMBED_STD, &mut rng);
        let pad_pos = Param::normal(&[cfg.geometry.n_x + 2, d], EMBED_STD, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                ln1_g: Param::ones(&[d]),
                ln1_b: Param::zeros(&[d]),
                wq: Param::linear(d, d, &mut rng),
                wk: Param::linear(d, d, &mut rng),
                wv: Param::linear(d, d, &mut rng),
                wo: Param::linear(d, d, &mut rng),
                bo: Param::zeros(&[d]),
                ln2_g: Param::ones(&[d]),
                ln2_b: Param::zeros(&[d]),
                w1: Param::linear(d, h, &mut rng),
                b1: Param::zeros(&[h]),
                w2: Param::linear(h, d, &mut rng),
                b2: Param::zeros(&[d]),
            })
            .collect();
        Ok(Weights {
            tok_emb,
            axial_row,
            axial_col,
            pad_pos,
            layers,
            lnf_g: Param::ones(&[d]),
            lnf_b: Param::zeros(&[d]),
            w_out: Param::linear(d, v, &mut rng),
            b_out: Param::zeros(&[v]),
            w_cls: Param::linear(d, c, &mut rng),
            b_cls: Param::zeros(&[c]),
        })
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, p)| p.data.len()).sum()
    }

    /// Checks every buffer against the shapes `cfg` implies.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = ModelParams::init(&ModelConfig {
            init_seed: 0,
            ..cfg.clone()
        })?;
        let ours = self.named();
        let theirs = reference.named();
        if ours.len() != theirs.len() {
            return Err(invalid(format!(
                "parameter set has {} tensors, config implies {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, p), (_, r)) in ours.iter().zip(&theirs) {
            if p.shape != r.shape || p.data.len() != r.data.len() {
                return Err(Error::ShapeMismatch {
                    op: "params vs config",
                    lhs: p.shape.clone(),
                    rhs: r.shape.clone(),
                })
                .map_err(|e| invalid(format!("{name}: {e}")));
            }
        }
        Ok(())
    }
}

/// Draws the per-layer random feature maps.
pub fn feature_maps(cfg: &ModelConfig, seed: u64) -> Result<Vec<RandomFeatureMap>> {
    (0..cfg.n_layers)
        .map(|l| {
            RandomFeatureMap::new(
                cfg.m_features,
                cfg.head_dim(),
                seed.wrapping_mul(1_000_003).wrapping_add(l as u64 + 1),
                cfg.orthogonal_features,
            )
        })
        .collect()
}

/// Configuration, trainable parameters and the fixed feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub feature_maps: Vec<RandomFeatureMap>,
}

/// Training-time stochasticity for one forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        if self.rate <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        x.mul(&Tensor::new(mask, x.shape()))
    }
}

/// Scalar loss pieces of one sample.
pub struct LossParts {
    pub total: Tensor,
    pub gen_ce: f64,
    pub cls_bce: f64,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        let feature_maps = feature_maps(&config, config.init_seed)?;
        Ok(Self {
            config,
            params,
            feature_maps,
        })
    }

    /// Wraps each parameter as a gradient-tracking tape leaf.
    pub fn leaves(&self) -> Weights<Tensor> {
        self.params
            .try_map(|_, p| Ok(Tensor::param(p.data.clone(), &p.shape)))
            .expect("infallible")
    }

    fn check_sequence(&self, seq: &AssembledSequence) -> Result<()> {
        if seq.geometry != self.config.geometry {
            return Err(invalid("sequence geometry does not match the model"));
        }
        let v = self.config.vocab_size();
        if let Some(&bad) = seq.ids.iter().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfRange { id: bad, limit: v });
        }
        Ok(())
    }

    /// Tape forward: next-token logits `[L, V]` and pathology logits `[c]`.
    pub fn forward(
        &self,
        w: &Weights<Tensor>,
        seq: &AssembledSequence,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<(Tensor, Tensor)> {
        self.check_sequence(seq)?;
        let cfg = &self.config;
        let (l, d, heads) = (seq.len(), cfg.d_model, cfg.n_heads);
        let dh = cfg.head_dim();
        let ids: Vec<Option<usize>> = seq.ids.iter().map(|&i| Some(i)).collect();
        let tables = PositionalTables {
            axial_row: &w.axial_row,
            axial_col: &w.axial_col,
            pad: &w.pad_pos,
        };
        let mut x = w
            .tok_emb
            .gather_rows(&ids)?
            .add(&layout::positional_embed(seq, &tables, d)?)?;
        if let Some(dr) = dropout.as_mut() {
            x = dr.apply(&x)?;
        }
        for (lw, map) in w.layers.iter().zip(&self.feature_maps) {
            let a = x.layer_norm(&lw.ln1_g, &lw.ln1_b, cfg.ln_eps)?;
            let split = |t: Tensor| t.reshape(&[l, heads, dh])?.permute(&[1, 0, 2]);
            let q = split(a.matmul(&lw.wq)?)?;
            let k = split(a.matmul(&lw.wk)?)?;
            let v = split(a.matmul(&lw.wv)?)?;
            let att = causal_linear_attention(&q, &k, &v, map, cfg.attn_eps)?
                .permute(&[1, 0, 2])?
                .reshape(&[l, d])?;
            let mut o = att.matmul(&lw.wo)?.add(&lw.bo)?;
            if let Some(dr) = dropout.as_mut() {
                o = dr.apply(&o)?;
            }
            x = x.add(&o)?;
            let b = x.layer_norm(&lw.ln2_g, &lw.ln2_b, cfg.ln_eps)?;
            let mut m = b
                .matmul(&lw.w1)?
                .add(&lw.b1)?
                .relu()
                .matmul(&lw.w2)?
                .add(&lw.b2)?;
            if let Some(dr) = dropout.as_mut() {
                m = dr.apply(&m)?;
            }
            x = x.add(&m)?;
        }
        let h = x.layer_norm(&w.lnf_g, &w.lnf_b, cfg.ln_eps)?;
        let logits = h.matmul(&w.w_out)?.add(&w.b_out)?;
        let cls = h
            .row(seq.cls_position())?
            .reshape(&[1, d])?
            .matmul(&w.w_cls)?
            .add(&w.b_cls)?
            .reshape(&[cfg.pathologies])?;
        Ok((logits, cls))
    }

    /// `L_gen + λ·L_cls` for one assembled sample.
    pub fn loss(
        &self,
        w: &Weights<Tensor>,
        seq: &AssembledSequence,
        labels: &[f64],
        dropout: Option<Dropout<'_>>,
    ) -> Result<LossParts> {
        let (logits, cls) = self.forward(w, seq, dropout)?;
        let (targets, mask) = next_token_targets(seq);
        let gen = logits.cross_entropy_logits(&targets, &mask)?;
        let bce = cls.binary_cross_entropy_logits(labels)?;
        let total = gen.add(&bce.scale(self.config.lambda))?;
        Ok(LossParts {
            gen_ce: gen.item(),
            cls_bce: bce.item(),
            total,
        })
    }

    /// Tape-free forward over the whole sequence.
    pub fn forward_plain(&self, seq: &AssembledSequence) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_sequence(seq)?;
        let mut dec = Decoder::new(self);
        let logits = dec.feed(seq, 0..seq.len())?;
        let cls = dec.cls_logits();
        Ok((logits, cls))
    }
}

/// Row `p` predicts token `p+1`; only scored targets count.
pub fn next_token_targets(seq: &AssembledSequence) -> (Vec<usize>, Vec<bool>) {
    let n = seq.len();
    let mut targets = vec![0; n];
    let mut mask = vec![false; n];
    for p in 0..n - 1 {
        targets[p] = seq.ids[p + 1];
        mask[p] = seq.loss_mask[p + 1];
    }
    (targets, mask)
}

/// Incremental tape-free evaluation: positions are fed strictly left to
/// right and each head keeps its FAVOR+ prefix sums.
pub struct Decoder<'m> {
    model: &'m Model,
    states: Vec<Vec<PrefixState>>,
    next_pos: usize,
    last_hidden: Vec<f64>,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Model) -> Self {
        let cfg = &model.config;
        let states = (0..cfg.n_layers)
            .map(|_| {
                (0..cfg.n_heads)
                    .map(|_| PrefixState::new(cfg.m_features, cfg.head_dim()))
                    .collect()
            })
            .collect();
        Self {
            model,
            states,
            next_pos: 0,
            last_hidden: Vec::new(),
        }
    }

    pub fn position(&self) -> usize {
        self.next_pos
    }

    /// Input embedding of position `p` (token row plus positional signal).
    fn embed(&self, seq: &AssembledSequence, p: usize) -> Vec<f64> {
        let cfg = &self.model.config;
        let w = &self.model.params;
        let d = cfg.d_model;
        let id = seq.ids[p];
        let mut row: Vec<f64> = w.tok_emb.data[id * d..(id + 1) * d].to_vec();
        let mut add = |src: &[f64]| row.iter_mut().zip(src).for_each(|(r, s)| *r += s);
        add(&layout::sinusoid(p, d));
        match seq.sources[p] {
            EmbedSource::Text(i) => add(&layout::sinusoid(i, d)),
            src @ EmbedSource::Image { .. } => {
                let side = cfg.geometry.grid_side().expect("geometry validated with the config");
                let (r, c) = src.axial_rows(side).expect("image source");
                add(&w.axial_row.data[r * d..(r + 1) * d]);
                add(&w.axial_col.data[c * d..(c + 1) * d]);
            }
            EmbedSource::Pad(i) => add(&w.pad_pos.data[i * d..(i + 1) * d]),
            EmbedSource::Temporal | EmbedSource::Cls | EmbedSource::Framing => {}
        }
        row
    }

    /// Feeds `positions` (which must start at the current position) and
    /// returns their next-token logits, `positions.len() × V`.
    pub fn feed(&mut self, seq: &AssembledSequence, positions: std::ops::Range<usize>) -> Result<Vec<f64>> {
        if positions.start != self.next_pos || positions.end > seq.len() {
            return Err(invalid(format!(
                "decoder at position {} cannot feed {:?}",
                self.next_pos, positions
            )));
        }
        let rows = positions.len();
        if rows == 0 {
            return Ok(Vec::new());
        }
        let cfg = &self.model.config;
        let w = &self.model.params;
        let (d, heads, dh, hid) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.mlp_hidden);
        let mut x: Vec<f64> = positions.clone().flat_map(|p| self.embed(seq, p)).collect();
        let mut a = vec![0.0; rows * d];
        for (li, lw) in w.layers.iter().enumerate() {
            let map = &self.model.feature_maps[li];
            linalg::layer_norm_rows(&x, d, &lw.ln1_g.data, &lw.ln1_b.data, cfg.ln_eps, &mut a);
            let q = linalg::matmul(&a, &lw.wq.data, rows, d, d);
            let k = linalg::matmul(&a, &lw.wk.data, rows, d, d);
            let v = linalg::matmul(&a, &lw.wv.data, rows, d, d);
            let mut att = vec![0.0; rows * d];
            let scale = (dh as f64).powf(-0.25);
            for h in 0..heads {
                let gather = |src: &[f64]| -> Vec<f64> {
                    (0..rows)
                        .flat_map(|r| src[r * d + h * dh..r * d + (h + 1) * dh].iter().copied())
                        .collect()
                };
                let qs: Vec<f64> = gather(&q).iter().map(|x| x * scale).collect();
                let ks: Vec<f64> = gather(&k).iter().map(|x| x * scale).collect();
                let vh = gather(&v);
                let pq = map.features(&qs);
                let pk = map.features(&ks);
                let state = &mut self.states[li][h];
                let mut out = vec![0.0; dh];
                for r in 0..rows {
                    state.push(&pk[r * map.m..(r + 1) * map.m], &vh[r * dh..(r + 1) * dh]);
                    state.read(&pq[r * map.m..(r + 1) * map.m], cfg.attn_eps, &mut out);
                    att[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&out);
                }
            }
            let o = linalg::matmul(&att, &lw.wo.data, rows, d, d);
            for r in 0..rows {
                for j in 0..d {
                    x[r * d + j] += o[r * d + j] + lw.bo.data[j];
                }
            }
            linalg::layer_norm_rows(&x, d, &lw.ln2_g.data, &lw.ln2_b.data, cfg.ln_eps, &mut a);
            let mut hdn = linalg::matmul(&a, &lw.w1.data, rows, d, hid);
            for r in 0..rows {
                for j in 0..hid {
                    hdn[r * hid + j] = (hdn[r * hid + j] + lw.b1.data[j]).max(0.0);
                }
            }
            let m = linalg::matmul(&hdn, &lw.w2.data, rows, hid, d);
            for r in 0..rows {
                for j in 0..d {
                    x[r * d + j] += m[r * d + j] + lw.b2.data[j];
                }
            }
        }
        let mut hfin = vec![0.0; rows * d];
        linalg::layer_norm_rows(&x, d, &w.lnf_g.data, &w.lnf_b.data, cfg.ln_eps, &mut hfin);
        let vsz = cfg.vocab_size();
        let mut logits = linalg::matmul(&hfin, &w.w_out.data, rows, d, vsz);
        for r in 0..rows {
            for j in 0..vsz {
                logits[r * vsz + j] += w.b_out.data[j];
            }
        }
        self.last_hidden = hfin[(rows - 1) * d..].to_vec();
        self.next_pos = positions.end;
        Ok(logits)
    }

    /// Pathology logits from the most recently fed position's final state
    /// (meaningful once the cls position has been fed).
    pub fn cls_logits(&self) -> Vec<f64> {
        let cfg = &self.model.config;
        let w = &self.model.params;
        let c = cfg.pathologies;
        let mut out = linalg::matmul(&self.last_hidden, &w.w_cls.data, 1, cfg.d_model, c);
        out.iter_mut().zip(&w.b_cls.data).for_each(|(o, b)| *o += b);
        out
    }
}
