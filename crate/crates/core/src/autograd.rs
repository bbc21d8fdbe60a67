//! Reverse-mode differentiation over a flat recording tape.
//!
//! Every primitive is evaluated eagerly and appended to the tape together
//! with whatever its vector-Jacobian product needs. [`Tape::backward`] walks
//! the entries in reverse order exactly once and accumulates gradients
//! additively where a value fans out.
//!
//! Tapes are single-threaded; build one per training step or per
//! evaluation shard.

use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{
    dot, gelu, matmul_into, matmul_nt_into, matmul_tn_into, moments, softmax_in_place,
    Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user supplied vector-Jacobian product for [`Tape::custom`].
pub trait BackwardRule {
    /// Returns one gradient per input, shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    SliceCols(Var),
    PadCols(Var),
    SlicedIn { x: Var, w: Var, dims: Rc<[usize]> },
    SlicedOut { h: Var, w: Var, dims: Rc<[usize]> },
    LayerNorm { x: Var, gamma: Var, xhat: Vec<f64>, inv_std: Vec<f64>, beta: Var },
    /// Saves `gelu'(x)`; empty on an inference tape.
    Gelu(Var, Vec<f64>),
    RowSoftmax(Var),
    Attention { q: Var, k: Var, v: Var, group: usize, heads: usize, probs: Vec<f64> },
    Pick { x: Var, index: Vec<usize> },
    Gate { alpha: Var, r: Var },
    RowScale { x: Var, s: Var },
    MeanPool { x: Var, group: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Custom { inputs: Vec<Var>, rule: Box<dyn BackwardRule> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inference: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape for forward passes only: ops skip caches that only backward
    /// needs, and [`backward`](Self::backward) is rejected.
    pub fn inference() -> Self {
        Self { inference: true, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err!("mul: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// `x + b` with `b` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.numel() != xv.cols() {
            return Err(dim_err!("add_row: width {} vs bias {}", xv.cols(), bv.numel()));
        }
        let mut out = xv.clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    /// `x + p` where `x` stacks groups of `p.rows()` rows; `p` repeats per group.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(p));
        if xv.cols() != pv.cols() || xv.rows() % pv.rows() != 0 {
            return Err(dim_err!("add_tiled: {:?} vs {:?}", xv.shape(), pv.shape()));
        }
        let mut out = xv.clone();
        let block = pv.numel();
        for chunk in out.data_mut().chunks_mut(block) {
            for (o, pp) in chunk.iter_mut().zip(pv.data()) {
                *o += pp;
            }
        }
        Ok(self.push(out, Op::AddTiled(x, p)))
    }

    /// Keeps the first `d` columns.
    pub fn slice_cols(&mut self, x: Var, d: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if d == 0 || d > c {
            return Err(dim_err!("slice_cols: {d} of {c}"));
        }
        let mut data = Vec::with_capacity(r * d);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[..d]);
        }
        let out = Tensor::new(&[r, d], data)?;
        Ok(self.push(out, Op::SliceCols(x)))
    }

    /// Zero-pads every row to width `width`.
    pub fn pad_cols(&mut self, x: Var, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if width < c {
            return Err(dim_err!("pad_cols: {c} to {width}"));
        }
        let mut data = vec![0.0; r * width];
        for i in 0..r {
            data[i * width..i * width + c].copy_from_slice(xv.row(i));
        }
        let out = Tensor::new(&[r, width], data)?;
        Ok(self.push(out, Op::PadCols(x)))
    }

    /// Row `j` of the result is `x[j, :dims[j]] · w[:dims[j], :]`.
    pub fn sliced_in(&mut self, x: Var, w: Var, dims: Rc<[usize]>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, d) = (xv.rows(), xv.cols());
        if wv.rows() != d || dims.len() != r || dims.iter().any(|&k| k == 0 || k > d) {
            return Err(dim_err!(
                "sliced_in: x {:?}, w {:?}, {} dims",
                xv.shape(),
                wv.shape(),
                dims.len()
            ));
        }
        let o = wv.cols();
        let mut out = vec![0.0; r * o];
        for (dj, rows) in width_groups(&dims) {
            let xs = gather_prefix(xv.data(), d, &rows, dj);
            let mut ys = vec![0.0; rows.len() * o];
            matmul_into(&xs, &wv.data()[..dj * o], rows.len(), dj, o, &mut ys);
            scatter_prefix(&ys, o, &rows, o, &mut out);
        }
        let out = Tensor::new(&[r, o], out)?;
        Ok(self.push(out, Op::SlicedIn { x, w, dims }))
    }

    /// Row `j` of the result is `h[j] · w[:dims[j], :]ᵀ`, zero-padded to `w.rows()`.
    pub fn sliced_out(&mut self, h: Var, w: Var, dims: Rc<[usize]>) -> Result<Var> {
        let (hv, wv) = (self.value(h), self.value(w));
        let (r, i) = (hv.rows(), hv.cols());
        let d = wv.rows();
        if wv.cols() != i || dims.len() != r || dims.iter().any(|&k| k == 0 || k > d) {
            return Err(dim_err!(
                "sliced_out: h {:?}, w {:?}, {} dims",
                hv.shape(),
                wv.shape(),
                dims.len()
            ));
        }
        let mut out = vec![0.0; r * d];
        for (dj, rows) in width_groups(&dims) {
            let hs = gather_prefix(hv.data(), i, &rows, i);
            let mut ys = vec![0.0; rows.len() * dj];
            matmul_nt_into(&hs, &wv.data()[..dj * i], rows.len(), i, dj, &mut ys);
            scatter_prefix(&ys, dj, &rows, d, &mut out);
        }
        let out = Tensor::new(&[r, d], out)?;
        Ok(self.push(out, Op::SlicedOut { h, w, dims }))
    }

    /// Row-wise LayerNorm, biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.numel() != c || bv.numel() != c {
            return Err(dim_err!("layer_norm: width {c}, gamma {}, beta {}", gv.numel(), bv.numel()));
        }
        let mut out = xv.clone();
        let mut xhat = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for (row, hat) in out.data_mut().chunks_mut(c).zip(xhat.chunks_mut(c)) {
            let (mean, is) = moments(row, eps);
            inv_std.push(is);
            for j in 0..c {
                hat[j] = (hat[j] - mean) * is;
                row[j] = gv.data()[j] * hat[j] + bv.data()[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, xhat, inv_std, beta }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        if self.inference {
            let out = xv.map(gelu);
            return self.push(out, Op::Gelu(x, Vec::new()));
        }
        let mut out = xv.clone();
        let mut deriv = Vec::with_capacity(xv.numel());
        for v in out.data_mut() {
            // Same expressions as `gelu` and `gelu_grad`, sharing one erf.
            let e = libm::erf(*v * std::f64::consts::FRAC_1_SQRT_2);
            let pdf = (-0.5 * *v * *v).exp() / (2.0 * std::f64::consts::PI).sqrt();
            deriv.push(0.5 * (1.0 + e) + *v * pdf);
            *v = 0.5 * *v * (1.0 + e);
        }
        self.push(out, Op::Gelu(x, deriv))
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).row_softmax()?;
        Ok(self.push(out, Op::RowSoftmax(x)))
    }

    /// Multi-head softmax attention inside consecutive groups of `group` rows.
    ///
    /// `q`, `k`, `v` share shape `(g·group)×D`; the head width is `D/heads`
    /// and scores are scaled by `1/sqrt(D/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, group: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (r, d) = (qv.rows(), qv.cols());
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(dim_err!("attention: q/k/v shapes differ"));
        }
        if group == 0 || r % group != 0 || heads == 0 || d % heads != 0 {
            return Err(dim_err!("attention: {r} rows, group {group}, width {d}, {heads} heads"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = r / group;
        let mut probs = vec![0.0; groups * heads * group * group];
        let mut out = vec![0.0; r * d];
        let mut qh = vec![0.0; group * dh];
        let mut kh = vec![0.0; group * dh];
        let mut vh = vec![0.0; group * dh];
        let mut oh = vec![0.0; group * dh];
        for g in 0..groups {
            for h in 0..heads {
                gather_head(qv.data(), g * group, group, d, h * dh, dh, &mut qh);
                gather_head(kv.data(), g * group, group, d, h * dh, dh, &mut kh);
                gather_head(vv.data(), g * group, group, d, h * dh, dh, &mut vh);
                let p = &mut probs[(g * heads + h) * group * group..][..group * group];
                matmul_nt_into(&qh, &kh, group, dh, group, p);
                for row in p.chunks_mut(group) {
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_in_place(row);
                }
                oh.iter_mut().for_each(|x| *x = 0.0);
                matmul_into(p, &vh, group, group, dh, &mut oh);
                scatter_head(&oh, g * group, group, d, h * dh, dh, &mut out);
            }
        }
        let out = Tensor::new(&[r, d], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, group, heads, probs }))
    }

    /// Picks `x[j, index[j]]` from every row, giving a column.
    pub fn pick(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if index.len() != xv.rows() || index.iter().any(|&i| i >= c) {
            return Err(dim_err!("pick: {} indices for {:?}", index.len(), xv.shape()));
        }
        let data = index.iter().enumerate().map(|(j, &i)| xv.row(j)[i]).collect();
        let out = Tensor::new(&[index.len(), 1], data)?;
        Ok(self.push(out, Op::Pick { x, index }))
    }

    /// `alpha·r + 1` for a scalar `alpha` and a column `r`.
    pub fn gate(&mut self, alpha: Var, r: Var) -> Result<Var> {
        let (av, rv) = (self.value(alpha), self.value(r));
        if av.numel() != 1 || rv.cols() != 1 {
            return Err(dim_err!("gate: alpha {:?}, r {:?}", av.shape(), rv.shape()));
        }
        let a = av.item();
        let out = rv.map(|x| a * x + 1.0);
        Ok(self.push(out, Op::Gate { alpha, r }))
    }

    /// Scales row `j` of `x` by `s[j]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.numel() != xv.rows() {
            return Err(dim_err!("row_scale: {} rows, {} scales", xv.rows(), sv.numel()));
        }
        let mut out = xv.clone();
        let c = out.cols();
        for (row, &f) in out.data_mut().chunks_mut(c).zip(sv.data()) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        Ok(self.push(out, Op::RowScale { x, s }))
    }

    /// Mean over each consecutive group of `group` rows.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if group == 0 || r % group != 0 {
            return Err(dim_err!("mean_pool: {r} rows in groups of {group}"));
        }
        let mut out = vec![0.0; (r / group) * c];
        for i in 0..r {
            let o = &mut out[(i / group) * c..(i / group + 1) * c];
            for (acc, x) in o.iter_mut().zip(xv.row(i)) {
                *acc += x;
            }
        }
        out.iter_mut().for_each(|x| *x /= group as f64);
        let out = Tensor::new(&[r / group, c], out)?;
        Ok(self.push(out, Op::MeanPool { x, group }))
    }

    /// Mean softmax cross-entropy of `logits` (one row per example).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = (lv.rows(), lv.cols());
        if labels.len() != b || labels.iter().any(|&y| y >= k) {
            return Err(dim_err!("cross_entropy: {} labels for {b}x{k} logits", labels.len()));
        }
        if !lv.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            softmax_in_place(row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        let out = Tensor::scalar(loss / b as f64);
        Ok(self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Records an externally computed primitive with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn BackwardRule>) -> Var {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), rule })
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.inference {
            return Err(Error::Numeric("backward on an inference tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(dim_err!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut da = vec![0.0; m * k];
                matmul_nt_into(g.data(), bv.data(), m, n, k, &mut da);
                let mut db = vec![0.0; k * n];
                matmul_tn_into(av.data(), g.data(), m, k, n, &mut db);
                accumulate(grads, *a, Tensor::new(av.shape(), da)?);
                accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, *a, Tensor::new(av.shape(), da)?);
                accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Sum(a) => {
                let av = val(*a);
                accumulate(grads, *a, Tensor::full(av.shape(), g.item()));
            }
            Op::AddRow(x, b) => {
                let bv = val(*b);
                let c = g.cols();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
            }
            Op::AddTiled(x, p) => {
                let pv = val(*p);
                let mut dp = vec![0.0; pv.numel()];
                for chunk in g.data().chunks(pv.numel()) {
                    dp.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *p, Tensor::new(pv.shape(), dp)?);
            }
            Op::SliceCols(x) => {
                let xv = val(*x);
                let (r, c, d) = (xv.rows(), xv.cols(), g.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c..i * c + d].copy_from_slice(g.row(i));
                }
                accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
            }
            Op::PadCols(x) => {
                let xv = val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    dx.extend_from_slice(&g.row(i)[..c]);
                }
                accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
            }
            Op::SlicedIn { x, w, dims } => {
                let (xv, wv) = (val(*x), val(*w));
                let (d, o) = (xv.cols(), wv.cols());
                let mut dx = vec![0.0; xv.numel()];
                let mut dw = vec![0.0; wv.numel()];
                for (dj, rows) in width_groups(dims) {
                    let m = rows.len();
                    let gs = gather_prefix(g.data(), o, &rows, o);
                    let xs = gather_prefix(xv.data(), d, &rows, dj);
                    let mut dxs = vec![0.0; m * dj];
                    matmul_nt_into(&gs, &wv.data()[..dj * o], m, o, dj, &mut dxs);
                    scatter_prefix(&dxs, dj, &rows, d, &mut dx);
                    matmul_tn_into(&xs, &gs, m, dj, o, &mut dw[..dj * o]);
                }
                accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
                accumulate(grads, *w, Tensor::new(wv.shape(), dw)?);
            }
            Op::SlicedOut { h, w, dims } => {
                let (hv, wv) = (val(*h), val(*w));
                let (i, d) = (hv.cols(), wv.rows());
                let mut dh = vec![0.0; hv.numel()];
                let mut dw = vec![0.0; wv.numel()];
                for (dj, rows) in width_groups(dims) {
                    let m = rows.len();
                    let gs = gather_prefix(g.data(), d, &rows, dj);
                    let hs = gather_prefix(hv.data(), i, &rows, i);
                    let mut dhs = vec![0.0; m * i];
                    matmul_into(&gs, &wv.data()[..dj * i], m, dj, i, &mut dhs);
                    scatter_prefix(&dhs, i, &rows, i, &mut dh);
                    matmul_tn_into(&gs, &hs, m, dj, i, &mut dw[..dj * i]);
                }
                debug_assert_eq!(g.cols(), d);
                accumulate(grads, *h, Tensor::new(hv.shape(), dh)?);
                accumulate(grads, *w, Tensor::new(wv.shape(), dw)?);
            }
            Op::LayerNorm { x, gamma, xhat, inv_std, beta } => {
                let gv = val(*gamma);
                let c = g.cols();
                let mut dx = vec![0.0; g.numel()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for (r, (grow, hat)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        dgamma[j] += grow[j] * hat[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gv.data()[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hat[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    let out = &mut dx[r * c..(r + 1) * c];
                    for j in 0..c {
                        out[j] = inv_std[r] * (dxhat[j] - m1 - hat[j] * m2);
                    }
                }
                accumulate(grads, *x, Tensor::new(g.shape(), dx)?);
                accumulate(grads, *gamma, Tensor::new(gv.shape(), dgamma)?);
                accumulate(grads, *beta, Tensor::new(val(*beta).shape(), dbeta)?);
            }
            Op::Gelu(x, deriv) => {
                let dx = g.data().iter().zip(deriv).map(|(gg, d)| gg * d).collect();
                accumulate(grads, *x, Tensor::new(g.shape(), dx)?);
            }
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for ((out, yr), gr) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape(), dx)?);
            }
            Op::Attention { q, k, v, group, heads, probs } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (r, d) = (qv.rows(), qv.cols());
                let (n, dh) = (*group, d / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; r * d];
                let mut dk = vec![0.0; r * d];
                let mut dv = vec![0.0; r * d];
                let mut qh = vec![0.0; n * dh];
                let mut kh = vec![0.0; n * dh];
                let mut vh = vec![0.0; n * dh];
                let mut goh = vec![0.0; n * dh];
                let mut dp = vec![0.0; n * n];
                let mut tmp = vec![0.0; n * dh];
                for gi in 0..r / n {
                    for h in 0..*heads {
                        let p = &probs[(gi * heads + h) * n * n..][..n * n];
                        gather_head(qv.data(), gi * n, n, d, h * dh, dh, &mut qh);
                        gather_head(kv.data(), gi * n, n, d, h * dh, dh, &mut kh);
                        gather_head(vv.data(), gi * n, n, d, h * dh, dh, &mut vh);
                        gather_head(g.data(), gi * n, n, d, h * dh, dh, &mut goh);
                        // dV = Pᵀ·dO
                        tmp.iter_mut().for_each(|x| *x = 0.0);
                        matmul_tn_into(p, &goh, n, n, dh, &mut tmp);
                        scatter_head(&tmp, gi * n, n, d, h * dh, dh, &mut dv);
                        // dP = dO·Vᵀ, then through the softmax and the scale
                        dp.iter_mut().for_each(|x| *x = 0.0);
                        matmul_nt_into(&goh, &vh, n, dh, n, &mut dp);
                        for (dr, pr) in dp.chunks_mut(n).zip(p.chunks(n)) {
                            let s: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                dr[j] = pr[j] * (dr[j] - s) * scale;
                            }
                        }
                        tmp.iter_mut().for_each(|x| *x = 0.0);
                        matmul_into(&dp, &kh, n, n, dh, &mut tmp);
                        scatter_head(&tmp, gi * n, n, d, h * dh, dh, &mut dq);
                        tmp.iter_mut().for_each(|x| *x = 0.0);
                        matmul_tn_into(&dp, &qh, n, n, dh, &mut tmp);
                        scatter_head(&tmp, gi * n, n, d, h * dh, dh, &mut dk);
                    }
                }
                accumulate(grads, *q, Tensor::new(qv.shape(), dq)?);
                accumulate(grads, *k, Tensor::new(kv.shape(), dk)?);
                accumulate(grads, *v, Tensor::new(vv.shape(), dv)?);
            }
            Op::Pick { x, index } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (j, &i) in index.iter().enumerate() {
                    dx[j * c + i] = g.data()[j];
                }
                accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
            }
            Op::Gate { alpha, r } => {
                let (av, rv) = (val(*alpha), val(*r));
                let da: f64 = g.data().iter().zip(rv.data()).map(|(a, b)| a * b).sum();
                accumulate(grads, *alpha, Tensor::new(av.shape(), vec![da])?);
                accumulate(grads, *r, g.scale(av.item()));
            }
            Op::RowScale { x, s } => {
                let (xv, sv) = (val(*x), val(*s));
                let c = xv.cols();
                let mut dx = g.clone();
                for (row, &f) in dx.data_mut().chunks_mut(c).zip(sv.data()) {
                    row.iter_mut().for_each(|x| *x *= f);
                }
                let ds = g.data().chunks(c).zip(xv.data().chunks(c)).map(|(a, b)| dot(a, b)).collect();
                accumulate(grads, *x, dx);
                accumulate(grads, *s, Tensor::new(sv.shape(), ds)?);
            }
            Op::MeanPool { x, group } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                let inv = 1.0 / *group as f64;
                for (i, row) in dx.chunks_mut(c).enumerate() {
                    for (d, gg) in row.iter_mut().zip(g.row(i / group)) {
                        *d = gg * inv;
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let lv = val(*logits);
                let k = lv.cols();
                let f = g.item() / labels.len() as f64;
                let mut dl = probs.clone();
                for (row, &y) in dl.chunks_mut(k).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= f);
                }
                accumulate(grads, *logits, Tensor::new(lv.shape(), dl)?);
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let outs = rule.backward(&ins, &node.value, g);
                if outs.len() != inputs.len() {
                    return Err(dim_err!("custom rule returned {} grads for {} inputs", outs.len(), inputs.len()));
                }
                for (&v, t) in inputs.iter().zip(outs) {
                    if t.shape() != val(v).shape() {
                        return Err(dim_err!("custom rule gradient shape {:?} vs {:?}", t.shape(), val(v).shape()));
                    }
                    accumulate(grads, v, t);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

/// Row indices sharing each distinct width, widths ascending.
fn width_groups(dims: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (j, &d) in dims.iter().enumerate() {
        match groups.iter_mut().find(|(w, _)| *w == d) {
            Some((_, rows)) => rows.push(j),
            None => groups.push((d, vec![j])),
        }
    }
    groups.sort_by_key(|(w, _)| *w);
    groups
}

/// The first `width` entries of each listed row of a `stride`-wide matrix.
fn gather_prefix(src: &[f64], stride: usize, rows: &[usize], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&src[r * stride..r * stride + width]);
    }
    out
}

/// Adds each `width`-wide row of `src` into the prefix of the listed rows.
fn scatter_prefix(src: &[f64], width: usize, rows: &[usize], stride: usize, dst: &mut [f64]) {
    for (s, &r) in src.chunks(width).zip(rows) {
        for (o, v) in dst[r * stride..r * stride + width].iter_mut().zip(s) {
            *o += v;
        }
    }
}

fn gather_head(src: &[f64], row0: usize, n: usize, d: usize, col0: usize, dh: usize, dst: &mut [f64]) {
    for i in 0..n {
        let s = (row0 + i) * d + col0;
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[s..s + dh]);
    }
}

fn scatter_head(src: &[f64], row0: usize, n: usize, d: usize, col0: usize, dh: usize, dst: &mut [f64]) {
    for i in 0..n {
        let s = (row0 + i) * d + col0;
        for (o, x) in dst[s..s + dh].iter_mut().zip(&src[i * dh..(i + 1) * dh]) {
            *o += x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let s = tape.sum(z);
        // s = 2·Σx², ds/dx = 4x
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0, 8.0]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[2], 3.0));
        let b = tape.leaf(Tensor::full(&[3], 1.0));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(b).data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[2], 3.0));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn attention_single_token_passes_values_through() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::new(&[1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let v = tape.leaf(Tensor::new(&[1, 4], vec![9.0, 8.0, 7.0, 6.0]).unwrap());
        let a = tape.attention(q, q, v, 1, 2).unwrap();
        assert_eq!(tape.value(a).data(), &[9.0, 8.0, 7.0, 6.0]);
    }
}
