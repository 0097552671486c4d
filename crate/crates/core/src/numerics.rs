//! Dense row-major tensors and the handful of kernels every pipeline stage
//! shares: masked softmax, align-corners bilinear sampling and min-max
//! rescaling. All arithmetic is `f64`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};

/// Additive mask value standing in for `-inf`.
pub const MASK_SENTINEL: f64 = -1e30;

/// Mask entries at or below this are treated as masked.
const MASKED_BELOW: f64 = -1e29;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(LensError::shape(format!("rank {} not in 1..=3", dims.len())));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(LensError::shape(format!("zero extent in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(LensError::shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), vec![value; n]).expect("valid dims")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![1, n], data).expect("non-empty row vector")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor::new(vec![rows, cols], data).expect("non-zero extents")
    }

    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = dims.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor::new(dims.to_vec(), data).expect("valid dims")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Leading extent; for a matrix, the row count.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Product of trailing extents; for a matrix, the column count.
    pub fn cols(&self) -> usize {
        self.dims[1..].iter().product::<usize>().max(1)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims.to_vec(), self.data.clone())
    }

    pub fn as_matrix(&self) -> Tensor {
        let cols = if self.rank() == 1 { self.len() } else { self.dims[self.rank() - 1] };
        Tensor {
            dims: vec![self.len() / cols, cols],
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows() == other.rows() && self.cols() == other.cols()
    }
}

/// `a · b` for matrices.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows(), "matmul inner dims");
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(n, m, out).expect("non-zero extents")
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    assert_eq!(k, b.cols(), "matmul_nt inner dims");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            out[i * m + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::matrix(n, m, out).expect("non-zero extents")
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n, m) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows(), "matmul_tn inner dims");
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(n, m, out).expect("non-zero extents")
}

fn is_masked(m: f64) -> bool {
    m <= MASKED_BELOW
}

/// Row-wise softmax of `logits + additive_mask`. Masked positions come out
/// as exact zeros.
pub fn softmax_masked(logits: &Tensor, additive_mask: &Tensor) -> Result<Tensor> {
    if !logits.same_shape(additive_mask) {
        return Err(LensError::shape(format!(
            "logits {:?} vs mask {:?}",
            logits.dims(),
            additive_mask.dims()
        )));
    }
    let cols = logits.cols();
    let mut out = vec![0.0; logits.len()];
    for r in 0..logits.rows() {
        let l = logits.row(r);
        let m = additive_mask.row(r);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for c in 0..cols {
            if !is_masked(m[c]) {
                max = max.max(l[c] + m[c]);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(LensError::DegenerateAttentionRow { row: r });
        }
        let mut sum = 0.0;
        for c in 0..cols {
            if !is_masked(m[c]) {
                o[c] = (l[c] + m[c] - max).exp();
                sum += o[c];
            }
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(logits.dims().to_vec(), out)
}

/// Lower-triangular additive mask: entry `(i, j)` is masked for `j > i`.
pub fn causal_mask(len: usize) -> Tensor {
    Tensor::from_fn(len, len, |i, j| if j > i { MASK_SENTINEL } else { 0.0 })
}

/// Interpolation taps for one continuous `(x, y)` on an `h x w` grid.
/// Coordinates are clamped to the border first. Returned indices are flat
/// row-major cell indices.
pub fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let (x0, fx) = axis_tap(w, x);
    let (y0, fy) = axis_tap(h, y);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

fn axis_tap(extent: usize, coord: f64) -> (usize, f64) {
    if extent < 2 {
        return (0, 0.0);
    }
    let hi = (extent - 1) as f64;
    let c = if coord.is_nan() { 0.0 } else { coord.clamp(0.0, hi) };
    let i0 = (c.floor() as usize).min(extent - 2);
    (i0, c - i0 as f64)
}

/// Samples an `H x W x C` (or `H x W`, treated as `C = 1`) field at
/// continuous pixel coordinates using the align-corners convention.
pub fn bilinear_sample(field: &Tensor, points: &[(f64, f64)]) -> Vec<Vec<f64>> {
    let (h, w, c) = grid_dims(field);
    points
        .iter()
        .map(|&(x, y)| {
            let mut acc = vec![0.0; c];
            for (idx, wt) in bilinear_taps(h, w, x, y) {
                if wt == 0.0 {
                    continue;
                }
                let cell = &field.data()[idx * c..(idx + 1) * c];
                for (a, v) in acc.iter_mut().zip(cell) {
                    *a += wt * v;
                }
            }
            acc
        })
        .collect()
}

pub(crate) fn grid_dims(field: &Tensor) -> (usize, usize, usize) {
    match field.dims() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        [n] => (1, *n, 1),
        _ => unreachable!("rank checked at construction"),
    }
}

/// Affine rescale to `[0, 1]`; a constant map becomes all zeros.
pub fn minmax_normalize(map: &Tensor) -> Tensor {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if range <= 0.0 {
        return map.map(|_| 0.0);
    }
    map.map(|v| (v - lo) / range)
}

/// Neumaier-compensated sum; loss reductions use it so finite-difference
/// probes see less summation noise.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
