//! A small reverse-mode tape over `f64` matrices.
//!
//! Every forward op appends a node holding its value and enough context to
//! run its adjoint. [`Graph::backward`] walks the nodes in reverse and
//! accumulates gradients only along paths that reach a parameter leaf.

use crate::numerics::{compensated_sum, matmul, matmul_nt, matmul_tn, sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-wise weighted gather: output row `r` is `Σ w · input[idx]` over `taps[r]`.
pub type GatherTaps = Vec<Vec<(usize, f64)>>;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Gather(Var, GatherTaps),
    MinMax {
        x: Var,
        argmin: usize,
        argmax: usize,
        range: f64,
    },
    Bce {
        p: Var,
        target: Tensor,
        eps: f64,
    },
    Dice {
        p: Var,
        target: Tensor,
        smooth: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes off every parameter path.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.as_matrix(), Op::Leaf, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.as_matrix(), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_nt(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y), "add: {:?} vs {:?}", x.dims(), y.dims());
        let mut v = x.clone();
        v.add_assign(y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, b) = (self.value(a), self.value(row));
        assert_eq!(b.rows(), 1);
        assert_eq!(x.cols(), b.cols());
        let cols = x.cols();
        let mut v = x.clone();
        for (i, val) in v.data_mut().iter_mut().enumerate() {
            *val += b.data()[i % cols];
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scaled(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// Row-wise layer normalization with `1 x n` gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let g = self.value(gain).data();
        let b = self.value(offset).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let xhat = Tensor::matrix(rows, cols, xhat).unwrap();
        let ng = self.ng(x) || self.ng(gain) || self.ng(offset);
        self.push(
            Tensor::matrix(rows, cols, out).unwrap(),
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row softmax; with `causal`, entries above the diagonal are exact zeros.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = x.row(r);
            let live = if causal { (r + 1).min(cols) } else { cols };
            let max = row[..live].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for c in 0..live {
                o[c] = (row[c] - max).exp();
                sum += o[c];
            }
            for v in &mut o[..live] {
                *v /= sum;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(rows, cols, out).unwrap(), Op::Softmax(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols());
        let v = Tensor::from_fn(x.rows(), len, |r, c| x.at(r, start + c));
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows());
        let cols = x.cols();
        let data = x.data()[start * cols..(start + len) * cols].to_vec();
        let ng = self.ng(a);
        self.push(
            Tensor::matrix(len, cols, data).unwrap(),
            Op::SliceRows(a, start),
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::matrix(rows, total, data).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::matrix(rows, cols, data).unwrap(),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let mut acc = vec![0.0; cols];
        for r in 0..rows {
            for (s, v) in acc.iter_mut().zip(x.row(r)) {
                *s += v;
            }
        }
        for s in &mut acc {
            *s /= rows as f64;
        }
        let ng = self.ng(a);
        self.push(Tensor::row_vector(acc), Op::MeanRows(a), ng)
    }

    pub fn gather(&mut self, a: Var, taps: GatherTaps) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = vec![0.0; taps.len() * cols];
        for (r, row_taps) in taps.iter().enumerate() {
            let o = &mut data[r * cols..(r + 1) * cols];
            for &(idx, w) in row_taps {
                if w == 0.0 {
                    continue;
                }
                for (ov, xv) in o.iter_mut().zip(x.row(idx)) {
                    *ov += w * xv;
                }
            }
        }
        let ng = self.ng(a);
        self.push(
            Tensor::matrix(taps.len(), cols, data).unwrap(),
            Op::Gather(a, taps),
            ng,
        )
    }

    /// Affine rescale of all entries to `[0, 1]`; constant input maps to zeros.
    pub fn minmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (mut argmin, mut argmax) = (0, 0);
        for (i, &v) in x.data().iter().enumerate() {
            if v < x.data()[argmin] {
                argmin = i;
            }
            if v > x.data()[argmax] {
                argmax = i;
            }
        }
        let lo = x.data()[argmin];
        let range = x.data()[argmax] - lo;
        let v = if range > 0.0 {
            x.map(|v| (v - lo) / range)
        } else {
            x.map(|_| 0.0)
        };
        let ng = self.ng(a);
        self.push(
            v,
            Op::MinMax {
                x: a,
                argmin,
                argmax,
                range,
            },
            ng,
        )
    }

    /// Mean binary cross-entropy of `p` (clamped to `[eps, 1 - eps]`) against
    /// a constant target of the same shape. Produces a `1 x 1` node.
    pub fn bce(&mut self, p: Var, target: &Tensor, eps: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), target.len(), "bce shape");
        let loss = bce_value(pv.data(), target.data(), eps);
        let ng = self.ng(p);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.clone(),
                eps,
            },
            ng,
        )
    }

    /// Smoothed soft Dice loss against a constant target. `1 x 1` node.
    pub fn dice(&mut self, p: Var, target: &Tensor, smooth: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), target.len(), "dice shape");
        let loss = dice_value(pv.data(), target.data(), smooth);
        let ng = self.ng(p);
        self.push(
            Tensor::scalar(loss),
            Op::Dice {
                p,
                target: target.clone(),
                smooth,
            },
            ng,
        )
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, root: Var) -> Gradients {
        self.backward_with_seed(root, 1.0)
    }

    pub fn backward_with_seed(&self, root: Var, seed: f64) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(seed));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, matmul(g, self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, matmul_tn(g, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    let cols = g.cols();
                    let mut sums = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (s, v) in sums.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::row_vector(sums));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scaled(*s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    let t = (GELU_C * (xv + GELU_K * xv * xv * xv)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * xv * xv);
                    *dv *= 0.5 * (1.0 + t) + 0.5 * xv * dt;
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *dv *= y * (1.0 - y);
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = (g.rows(), g.cols());
                let gv = self.value(*gain).data();
                if self.ng(*gain) || self.ng(*offset) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g.at(r, c) * xhat.at(r, c);
                            db[c] += g.at(r, c);
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::row_vector(dg));
                    self.accumulate(grads, *offset, Tensor::row_vector(db));
                }
                if self.ng(*x) {
                    let n = cols as f64;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = g.at(r, c) * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat.at(r, c);
                        }
                        for c in 0..cols {
                            let dh = g.at(r, c) * gv[c];
                            dx[r * cols + c] =
                                inv_std[r] / n * (n * dh - sum_dh - xhat.at(r, c) * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::matrix(rows, cols, dx).unwrap());
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(rows, cols, dx).unwrap());
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(&[x.rows(), x.cols()]);
                let (cols, len) = (x.cols(), g.cols());
                for r in 0..g.rows() {
                    d.data_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(&[x.rows(), x.cols()]);
                let cols = x.cols();
                d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let d = Tensor::from_fn(g.rows(), w, |r, c| g.at(r, offset + c));
                        self.accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.ng(p) {
                        let data = g.data()[offset * cols..(offset + h) * cols].to_vec();
                        self.accumulate(grads, p, Tensor::matrix(h, cols, data).unwrap());
                    }
                    offset += h;
                }
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let n = x.rows() as f64;
                let d = Tensor::from_fn(x.rows(), x.cols(), |_, c| g.data()[c] / n);
                self.accumulate(grads, *a, d);
            }
            Op::Gather(a, taps) => {
                let x = self.value(*a);
                let cols = x.cols();
                let mut d = Tensor::zeros(&[x.rows(), cols]);
                for (r, row_taps) in taps.iter().enumerate() {
                    for &(idx, w) in row_taps {
                        if w == 0.0 {
                            continue;
                        }
                        let dst = &mut d.data_mut()[idx * cols..(idx + 1) * cols];
                        for (dv, gv) in dst.iter_mut().zip(g.row(r)) {
                            *dv += w * gv;
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MinMax {
                x,
                argmin,
                argmax,
                range,
            } => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(&[xv.rows(), xv.cols()]);
                if *range > 0.0 {
                    let lo = xv.data()[*argmin];
                    let hi = xv.data()[*argmax];
                    let mut d_lo = 0.0;
                    let mut d_hi = 0.0;
                    for (k, (&xk, &gk)) in xv.data().iter().zip(g.data()).enumerate() {
                        d.data_mut()[k] += gk / range;
                        d_lo += gk * (xk - hi) / (range * range);
                        d_hi -= gk * (xk - lo) / (range * range);
                    }
                    d.data_mut()[*argmin] += d_lo;
                    d.data_mut()[*argmax] += d_hi;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Bce { p, target, eps } => {
                let pv = self.value(*p);
                let n = pv.len() as f64;
                let s = g.data()[0];
                let mut d = pv.map(|_| 0.0);
                for ((dv, &pk), &tk) in d.data_mut().iter_mut().zip(pv.data()).zip(target.data())
                {
                    if pk > *eps && pk < 1.0 - eps {
                        *dv = -s * (tk / pk - (1.0 - tk) / (1.0 - pk)) / n;
                    }
                }
                self.accumulate(grads, *p, d);
            }
            Op::Dice { p, target, smooth } => {
                let pv = self.value(*p);
                let s = g.data()[0];
                let inter: f64 = pv.data().iter().zip(target.data()).map(|(a, b)| a * b).sum();
                let denom: f64 =
                    pv.data().iter().sum::<f64>() + target.data().iter().sum::<f64>() + smooth;
                let num = 2.0 * inter + smooth;
                let mut d = pv.map(|_| 0.0);
                for (dv, &tk) in d.data_mut().iter_mut().zip(target.data()) {
                    *dv = -s * (2.0 * tk * denom - num) / (denom * denom);
                }
                self.accumulate(grads, *p, d);
            }
        }
    }
}

/// Mean clamped binary cross-entropy.
pub fn bce_value(p: &[f64], target: &[f64], eps: f64) -> f64 {
    let n = p.len() as f64;
    -compensated_sum(p.iter().zip(target).map(|(&pk, &tk)| {
        let c = pk.clamp(eps, 1.0 - eps);
        tk * c.ln() + (1.0 - tk) * (1.0 - c).ln()
    })) / n
}

/// `1 − (2 Σ p·t + s) / (Σ p + Σ t + s)`.
pub fn dice_value(p: &[f64], target: &[f64], smooth: f64) -> f64 {
    let inter = compensated_sum(p.iter().zip(target).map(|(a, b)| a * b));
    let denom = compensated_sum(p.iter().chain(target).copied()) + smooth;
    1.0 - (2.0 * inter + smooth) / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of every op against the tape.
    fn check(build: impl Fn(&mut Graph, &[Var]) -> Var, inputs: Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| t.map(|_| 0.0));
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[k].data_mut()[i] += delta;
                    let mut g = Graph::new();
                    let vars: Vec<Var> = perturbed.iter().map(|t| g.param(t.clone())).collect();
                    let o = build(&mut g, &vars);
                    g.value(o).data()[0]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + a.abs().max(fd.abs())),
                    "input {k} coord {i}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    fn rand(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[rows, cols], 1.0, &mut rng)
    }

    fn reduce(g: &mut Graph, v: Var) -> Var {
        // weighted sum so that every entry's gradient differs
        let n = g.value(v).len();
        let w = Tensor::from_fn(g.value(v).cols(), 1, |r, _| 0.3 + 0.1 * r as f64);
        let rows = g.value(v).rows();
        let c = g.constant(w);
        let col = g.matmul(v, c);
        let ones = g.constant(Tensor::filled(&[1, rows], 1.0 / n as f64));
        g.matmul(ones, col)
    }

    #[test]
    fn matmul_family() {
        check(
            |g, v| {
                let m = g.matmul(v[0], v[1]);
                let n = g.matmul_nt(m, v[2]);
                reduce(g, n)
            },
            vec![rand(3, 4, 1), rand(4, 5, 2), rand(2, 5, 3)],
        );
    }

    #[test]
    fn elementwise_and_norm() {
        check(
            |g, v| {
                let a = g.add_row(v[0], v[1]);
                let n = g.layer_norm(a, v[2], v[1]);
                let s = g.gelu(n);
                let t = g.sigmoid(s);
                let u = g.scale(t, 1.7);
                let w = g.add(u, v[0]);
                reduce(g, w)
            },
            vec![rand(3, 4, 4), rand(1, 4, 5), rand(1, 4, 6)],
        );
    }

    #[test]
    fn softmax_slices_concat() {
        for causal in [true, false] {
            check(
                move |g, v| {
                    let s = g.softmax(v[0], causal);
                    let a = g.slice_cols(s, 1, 2);
                    let b = g.slice_rows(s, 0, 2);
                    let b = g.slice_cols(b, 0, 2);
                    let c = g.concat_rows(&[a, b]);
                    let d = g.concat_cols(&[c, c]);
                    let m = g.mean_rows(d);
                    reduce(g, m)
                },
                vec![rand(4, 4, 7)],
            );
        }
    }

    #[test]
    fn gather_minmax_losses() {
        let target = Tensor::matrix(1, 6, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let t2 = target.clone();
        check(
            move |g, v| {
                let taps = vec![
                    vec![(0, 0.25), (2, 0.75)],
                    vec![(1, 1.0)],
                    vec![(2, 0.5), (0, 0.5)],
                ];
                let x = g.gather(v[0], taps);
                let x = g.minmax(x);
                let flat = g.concat_cols(&[x]);
                let flat = g.slice_rows(flat, 0, 1);
                let flat = g.concat_cols(&[flat, flat]);
                let p = g.sigmoid(flat);
                let b = g.bce(p, &t2, 1e-7);
                let d = g.dice(p, &t2, 1.0);
                let s = g.add(b, d);
                g.scale(s, 2.0)
            },
            vec![rand(3, 3, 8)],
        );
    }

    #[test]
    fn causal_softmax_zeros_upper_triangle() {
        let mut g = Graph::new();
        let x = g.constant(rand(5, 5, 9));
        let s = g.softmax(x, true);
        let v = g.value(s);
        for i in 0..5 {
            for j in 0..5 {
                if j > i {
                    assert_eq!(v.at(i, j), 0.0);
                }
            }
            assert!((v.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(rand(2, 2, 10));
        let p = g.param(rand(2, 2, 11));
        let m = g.matmul(c, p);
        let out = reduce(&mut g, m);
        let grads = g.backward(out);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
