//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Every op that has at
//! least one gradient-tracking input records its parents and a closure that
//! maps the output gradient to parent gradients; [`Tensor::backward`] walks
//! the resulting DAG once in reverse topological order.
//!
//! Broadcasting is limited to leading dimensions: in elementwise ops one
//! operand's shape must be a suffix of the other's, and matmul broadcasts
//! its batch dimensions numpy-style.
//!
//! ```
//! use temporal_bigen::tensor::Tensor;
//!
//! let x = Tensor::param(vec![3.0], &[1]);
//! let loss = x.mul(&x).unwrap().sum();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![6.0]);
//! ```

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{invalid, Error, Result};
use crate::linalg;

/// Maps the output gradient to one optional gradient per parent.
pub type GradFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    grad_fn: RefCell<Option<GradFn>>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            data,
            shape,
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            grad_fn: RefCell::new(None),
        }))
    }

    /// Constant tensor. Panics if `data.len() != product(shape)`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "data length does not match shape {shape:?}"
        );
        Self::build(data, shape.to_vec(), false)
    }

    pub fn try_new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::build(data, shape.to_vec(), false))
    }

    /// Gradient-tracking leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), data.len());
        Self::build(data, shape.to_vec(), true)
    }

    pub fn scalar(v: f64) -> Self {
        Self::build(vec![v], vec![], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![0.0; numel(shape)], shape)
    }

    /// Records a custom op. If no parent tracks gradients the closure is
    /// dropped and the result is a constant.
    pub fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        grad_fn: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        if !parents.iter().any(Tensor::requires_grad) {
            return Self::build(data, shape, false);
        }
        Tensor(Rc::new(Node {
            data,
            shape,
            requires_grad: true,
            grad: RefCell::new(None),
            parents,
            grad_fn: RefCell::new(Some(Box::new(grad_fn))),
        }))
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data[0]
    }

    pub fn detach(&self) -> Tensor {
        Tensor::new(self.0.data.clone(), &self.0.shape)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Populates `grad` on every gradient-tracking leaf reachable from this
    /// scalar. Consumes the recorded graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Backward("loss is not on an active tape".into()));
        }
        let order = self.topo_order();
        if order
            .iter()
            .any(|t| !t.0.parents.is_empty() && t.0.grad_fn.borrow().is_none())
        {
            return Err(Error::Backward("tape already consumed".into()));
        }

        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            let grad_fn = node.0.grad_fn.borrow_mut().take();
            match grad_fn {
                Some(f) => {
                    let parent_grads = f(&g);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.key(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order DFS over gradient-tracking nodes (parents before children).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.requires_grad() && !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        grads: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        let a_is_big = if a.len() >= b.len() {
            a.ends_with(b)
        } else {
            false
        };
        let b_is_big = !a_is_big && b.ends_with(a);
        if !a_is_big && !b_is_big {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let out_shape = if a_is_big { a.to_vec() } else { b.to_vec() };
        let n = numel(&out_shape);
        let (na, nb) = (self.numel(), other.numel());
        let (ad, bd) = (self.data(), other.data());
        let mut data = Vec::with_capacity(n);
        // The smaller operand repeats every `min(na, nb)` elements.
        let period = na.min(nb).max(1);
        for block in 0..n / period {
            let off = block * period;
            let xa = if na == n { &ad[off..off + period] } else { ad };
            let xb = if nb == n { &bd[off..off + period] } else { bd };
            data.extend(xa.iter().zip(xb).map(|(&x, &y)| f(x, y)));
        }
        let (sa, sb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            move |g| {
                let (ad, bd) = (sa.data(), sb.data());
                let (na, nb) = (ad.len(), bd.len());
                let mut ga = sa.requires_grad().then(|| vec![0.0; na]);
                let mut gb = sb.requires_grad().then(|| vec![0.0; nb]);
                let n = g.len();
                let period = na.min(nb).max(1);
                for block in 0..n / period {
                    let off = block * period;
                    let (oa, ob) = (if na == n { off } else { 0 }, if nb == n { off } else { 0 });
                    for j in 0..period {
                        let (da, db) = grads(ad[oa + j], bd[ob + j], g[off + j]);
                        if let Some(ga) = ga.as_mut() {
                            ga[oa + j] += da;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ob + j] += db;
                        }
                    }
                }
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let out = data.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            let x = input.data();
            vec![Some(
                g.iter()
                    .enumerate()
                    .map(|(i, gi)| gi * df(x[i], out[i]))
                    .collect(),
            )]
        })
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.unary(move |x| x * s, move |_, _| s)
    }

    // ---- reductions & structure ---------------------------------------

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut check = axes.to_vec();
        check.sort_unstable();
        if axes.len() != rank || check.iter().enumerate().any(|(i, &a)| i != a) {
            return Err(invalid(format!(
                "permute axes {axes:?} invalid for rank {rank}"
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides(&in_shape);
        // Source offset for every destination index, in destination order.
        let n = self.numel();
        let mut src = vec![0usize; n];
        let mut idx = vec![0usize; rank];
        for s in src.iter_mut() {
            *s = idx
                .iter()
                .zip(axes)
                .map(|(&i, &a)| i * in_strides[a])
                .sum();
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let x = self.data();
        let data: Vec<f64> = src.iter().map(|&s| x[s]).collect();
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; n];
            for (gi, &s) in g.iter().zip(&src) {
                gx[s] = *gi;
            }
            vec![Some(gx)]
        }))
    }

    /// Row gather from a `[V, d]` table; `None` yields a zero row.
    pub fn gather_rows(&self, ids: &[Option<usize>]) -> Result<Tensor> {
        let [v, d] = self.shape() else {
            return Err(invalid(format!(
                "gather_rows expects a 2-d table, got {:?}",
                self.shape()
            )));
        };
        let (v, d) = (*v, *d);
        if let Some(&bad) = ids.iter().flatten().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange { id: bad, limit: v });
        }
        let table = self.data();
        let mut data = vec![0.0; ids.len() * d];
        for (r, id) in ids.iter().enumerate() {
            if let Some(i) = id {
                data[r * d..(r + 1) * d].copy_from_slice(&table[i * d..(i + 1) * d]);
            }
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![ids.len(), d],
            vec![self.clone()],
            move |g| {
                let mut gt = vec![0.0; v * d];
                for (r, id) in ids.iter().enumerate() {
                    if let Some(i) = id {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                }
                vec![Some(gt)]
            },
        ))
    }

    pub fn row(&self, i: usize) -> Result<Tensor> {
        let t = self.gather_rows(&[Some(i)])?;
        let d = t.shape()[1];
        t.reshape(&[d])
    }

    // ---- linear algebra ------------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n]`; batch dims broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch = broadcast_batch(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(mismatch)?;
        let mut out_shape = batch.shape.clone();
        out_shape.extend([m, n]);

        let (ad, bd) = (self.data(), other.data());
        let mut data = vec![0.0; batch.len() * m * n];
        for (bi, (oa, ob)) in batch.offsets.iter().enumerate() {
            linalg::gemm(
                m,
                k,
                n,
                &ad[oa * m * k..(oa + 1) * m * k],
                (k, 1),
                &bd[ob * k * n..(ob + 1) * k * n],
                (n, 1),
                &mut data[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let (ta, tb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            move |g| {
                let (ad, bd) = (ta.data(), tb.data());
                let mut ga = ta.requires_grad().then(|| vec![0.0; ad.len()]);
                let mut gb = tb.requires_grad().then(|| vec![0.0; bd.len()]);
                for (bi, (oa, ob)) in batch.offsets.iter().enumerate() {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        // dA = dC · Bᵀ
                        linalg::gemm(
                            m,
                            n,
                            k,
                            gc,
                            (n, 1),
                            &bd[ob * k * n..(ob + 1) * k * n],
                            (1, n),
                            &mut ga[oa * m * k..(oa + 1) * m * k],
                            true,
                        );
                    }
                    if let Some(gb) = gb.as_mut() {
                        // dB = Aᵀ · dC
                        linalg::gemm(
                            k,
                            m,
                            n,
                            &ad[oa * m * k..(oa + 1) * m * k],
                            (1, k),
                            gc,
                            (n, 1),
                            &mut gb[ob * k * n..(ob + 1) * k * n],
                            true,
                        );
                    }
                }
                vec![ga, gb]
            },
        ))
    }

    /// Normalises the last axis to zero mean / unit variance, then applies
    /// the affine `γ, β`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| invalid("layer_norm on a scalar"))?;
        if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(invalid("layer_norm eps must be positive"));
        }
        let mut data = vec![0.0; self.numel()];
        let (xhat, inv_std) =
            linalg::layer_norm_rows(self.data(), d, gamma.data(), beta.data(), eps, &mut data);
        let (tg, tx, tb) = (gamma.clone(), self.clone(), beta.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let gam = tg.data();
                let rows = inv_std.len();
                let mut gx = tx.requires_grad().then(|| vec![0.0; rows * d]);
                let mut gg = tg.requires_grad().then(|| vec![0.0; d]);
                let mut gbeta = tb.requires_grad().then(|| vec![0.0; d]);
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    if let Some(gg) = gg.as_mut() {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                    if let Some(gb) = gbeta.as_mut() {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = linalg::dot(&dxhat, xr) / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
                vec![gx, gg, gbeta]
            },
        ))
    }

    // ---- losses -------------------------------------------------------

    /// Mean of `-log softmax(logits)[target]` over rows where `mask` is set.
    /// An all-masked input yields 0 with zero gradient.
    pub fn cross_entropy_logits(&self, targets: &[usize], mask: &[bool]) -> Result<Tensor> {
        let [n, v] = self.shape() else {
            return Err(invalid(format!(
                "cross_entropy_logits expects [n, V], got {:?}",
                self.shape()
            )));
        };
        let (n, v) = (*n, *v);
        if targets.len() != n || mask.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_logits",
                lhs: vec![n, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m && t >= v {
                return Err(invalid(format!("target {t} at row {i} outside [0, {v})")));
            }
        }
        let count = mask.iter().filter(|&&m| m).count();
        let x = self.data();
        let mut total = 0.0;
        let mut lse = vec![0.0; n];
        for i in 0..n {
            if mask[i] {
                let row = &x[i * v..(i + 1) * v];
                lse[i] = linalg::log_sum_exp(row);
                total += lse[i] - row[targets[i]];
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let (tx, targets, mask) = (self.clone(), targets.to_vec(), mask.to_vec());
        Ok(Tensor::from_op(vec![loss], vec![], vec![self.clone()], move |g| {
            let x = tx.data();
            let mut gx = vec![0.0; n * v];
            if count > 0 {
                let scale = g[0] / count as f64;
                for i in 0..n {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..v {
                        gx[i * v + j] = (x[i * v + j] - lse[i]).exp() * scale;
                    }
                    gx[i * v + targets[i]] -= scale;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Mean binary cross-entropy with logits over a label vector.
    pub fn binary_cross_entropy_logits(&self, labels: &[f64]) -> Result<Tensor> {
        if labels.len() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "binary_cross_entropy_logits",
                lhs: self.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(invalid("labels must be 0 or 1"));
        }
        let c = labels.len().max(1) as f64;
        let loss = self
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / c;
        let (tx, labels) = (self.clone(), labels.to_vec());
        Ok(Tensor::from_op(vec![loss], vec![], vec![self.clone()], move |g| {
            let gx = tx
                .data()
                .iter()
                .zip(&labels)
                .map(|(&x, &y)| (sigmoid(x) - y) * g[0] / c)
                .collect();
            vec![Some(gx)]
        }))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

struct BatchPlan {
    shape: Vec<usize>,
    /// (lhs matrix index, rhs matrix index) per output matrix.
    offsets: Vec<(usize, usize)>,
}

impl BatchPlan {
    fn len(&self) -> usize {
        self.offsets.len()
    }
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<BatchPlan> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut shape = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        shape.push(match (x, y) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        });
    }
    let (sa, sb) = (strides(&pa), strides(&pb));
    let total = numel(&shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let mut oa = 0;
        let mut ob = 0;
        for ax in 0..rank {
            if pa[ax] != 1 {
                oa += idx[ax] * sa[ax];
            }
            if pb[ax] != 1 {
                ob += idx[ax] * sb[ax];
            }
        }
        offsets.push((oa, ob));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Some(BatchPlan { shape, offsets })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let i = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = Tensor::new(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(i.matmul(&b).unwrap().data(), &[5.0, 6.0, 7.0, 8.0]);
        let s = Tensor::new(vec![2.0], &[1, 1])
            .matmul(&Tensor::new(vec![3.0], &[1, 1]))
            .unwrap();
        assert_eq!(s.data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let a = Tensor::new((0..12).map(f64::from).collect(), &[2, 2, 3]);
        let w = Tensor::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]);
        let c = a.matmul(&w).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(c.data(), &[2.0, 3.0, 8.0, 9.0, 14.0, 15.0, 20.0, 21.0]);
    }

    #[test]
    fn elementwise_basics() {
        let z = Tensor::zeros(&[2]);
        assert_eq!(z.exp().data(), &[1.0, 1.0]);
        let x = Tensor::new(vec![1.5, -2.0, 3.0], &[3]);
        assert_eq!(x.add(&Tensor::scalar(0.0)).unwrap().data(), x.data());
        assert_eq!(x.relu().data(), &[1.5, 0.0, 3.0]);
        assert!(x.add(&Tensor::zeros(&[2])).is_err());
        // bias broadcast over leading dims only
        let m = Tensor::zeros(&[2, 3]);
        assert_eq!(m.add(&x).unwrap().data()[3..], [1.5, -2.0, 3.0]);
        assert!(m.add(&Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::new(vec![1.0; 4], &[4]);
        let zero = Tensor::zeros(&[4]);
        let c = Tensor::new(vec![3.0; 4], &[1, 4]);
        assert!(close(c.layer_norm(&one, &zero, 1e-5).unwrap().data(), &[0.0; 4], 1e-12));
        let g = Tensor::new(vec![1.0; 2], &[2]);
        let b = Tensor::zeros(&[2]);
        let x = Tensor::new(vec![1.0, -1.0], &[1, 2]);
        assert!(close(x.layer_norm(&g, &b, 1e-12).unwrap().data(), &[1.0, -1.0], 1e-9));
    }

    #[test]
    fn cross_entropy_cases() {
        let l = Tensor::new(vec![0.0, 0.0], &[1, 2]);
        let ce = l.cross_entropy_logits(&[0], &[true]).unwrap().item();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
        let sat = Tensor::new(vec![1e9, 0.0], &[1, 2]);
        assert_eq!(sat.cross_entropy_logits(&[0], &[true]).unwrap().item(), 0.0);

        let p = Tensor::param(vec![0.3, -0.2], &[1, 2]);
        let masked = p.cross_entropy_logits(&[7], &[false]).unwrap();
        assert_eq!(masked.item(), 0.0);
        masked.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![0.0, 0.0]);
        assert!(p.cross_entropy_logits(&[7], &[true]).is_err());
    }

    #[test]
    fn bce_cases() {
        let z = Tensor::new(vec![0.0], &[1]);
        assert!((z.binary_cross_entropy_logits(&[1.0]).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-12);
        let s = Tensor::new(vec![40.0], &[1]);
        assert!(s.binary_cross_entropy_logits(&[1.0]).unwrap().item() < 1e-15);
    }

    #[test]
    fn backward_simple() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);

        let y = Tensor::param(vec![3.0], &[1]);
        y.mul(&y).unwrap().sum().backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn reused_tensor_accumulates() {
        let x = Tensor::param(vec![0.5; 4], &[2, 2]);
        let loss = x.sum().add(&x.sum()).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]);
        assert!(x.exp().backward().is_err());
        let loss = x.exp().sum();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::Backward(_))));
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::new((0..24).map(f64::from).collect(), &[2, 3, 4]);
        let p = x.permute(&[1, 0, 2]).unwrap();
        assert_eq!(p.shape(), &[3, 2, 4]);
        assert_eq!(p.data()[4..8], [12.0, 13.0, 14.0, 15.0]);
        let back = p.permute(&[1, 0, 2]).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn gather_none_is_zero_and_no_grad() {
        let t = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let g = t.gather_rows(&[Some(1), None, Some(1)]).unwrap();
        assert_eq!(g.data(), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
        g.sum().backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![0.0, 0.0, 2.0, 2.0]);
        assert!(t.gather_rows(&[Some(2)]).is_err());
    }
}
