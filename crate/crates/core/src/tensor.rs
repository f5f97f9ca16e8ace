//! Dense row-major `f64` tensors and the forward kernels shared by the
//! recording graph.
//!
//! Every kernel here is a pure function of its inputs. The graph in
//! [`crate::graph`] calls the same kernels, so a value computed through the
//! graph is bit-identical to the one computed directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor for the norm in [`l2_normalize`].
pub const L2_EPS: f64 = 1e-12;
/// Floor for the standard deviation in [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the data length matches the shape and
    /// that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("Tensor::new (element {i})"),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernel outputs whose length is correct by
    /// construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(Vec::new(), vec![value])
    }

    /// A rank-1 tensor.
    pub fn vector(values: &[f64]) -> Self {
        Tensor::from_parts(vec![values.len()], values.to_vec())
    }

    /// A rank-2 tensor from equal-length rows. Panics on ragged input.
    pub fn matrix<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged matrix rows");
            data.extend_from_slice(r.as_ref());
        }
        Tensor::from_parts(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows and columns of a rank-2 tensor; a rank-1 tensor counts as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            [] => (1, 1),
            s => panic!("dims2 on rank-{} tensor", s.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, n) = self.dims2();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        let (_, n) = self.dims2();
        self.data[i * n + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = self.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_parts(vec![n, m], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "elementwise",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Stacks rank-2 (or rank-1, as single rows) tensors vertically.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |t| t.dims2().1);
        let mut rows = 0;
        let mut data = Vec::new();
        for t in parts {
            let (m, n) = t.dims2();
            if n != cols {
                return Err(Error::dim("concat_rows", format!("{n} columns, expected {cols}")));
            }
            rows += m;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_parts(vec![rows, cols], data))
    }
}

fn check_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

/// `c += a · b` on raw row-major buffers (`a`: m×k, `b`: k×n).
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c += a · bᵀ` (`a`: m×k, `b`: n×k).
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c += aᵀ · b` (`a`: k×m, `b`: k×n).
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_rank2("matmul", a)?;
    let (k2, n) = check_rank2("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_rank2("matmul_nt", a)?;
    let (n, k2) = check_rank2("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
    }
    let mut out = vec![0.0; m * n];
    gemm_nt(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len().max(1) {
        return Err(Error::dim("axis", format!("axis {axis} for shape {shape:?}")));
    }
    if shape.is_empty() {
        return Ok((1, 1, 1));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (x.data[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[idx(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Divides every slice along `axis` by `max(‖slice‖₂, eps)`.
pub fn l2_normalize(x: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let norm = (0..n).map(|j| x.data[idx(j)].powi(2)).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            for j in 0..n {
                out[idx(j)] = x.data[idx(j)] / denom;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Mean and the clamped standard deviation `max(σ, LAYER_NORM_EPS)` of one
/// slice.
pub(crate) fn slice_moments(slice: &[f64]) -> (f64, f64) {
    let n = slice.len() as f64;
    let mean = slice.iter().sum::<f64>() / n;
    let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(LAYER_NORM_EPS))
}

/// Standardizes the last axis, then applies `gain ⊙ x̂ + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim(
            "layer_norm",
            format!("last axis {d}, gain {}, bias {}", gain.len(), bias.len()),
        ));
    }
    let mut out = Vec::with_capacity(x.len());
    for slice in x.data.chunks(d) {
        let (mean, std) = slice_moments(slice);
        for ((v, g), b) in slice.iter().zip(&gain.data).zip(&bias.data) {
            out.push(g * ((v - mean) / std) + b);
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
