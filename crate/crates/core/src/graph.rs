//! Recording reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it executes. Nodes are stored in
//! execution order, so the recording order is already a topological order;
//! [`Graph::backward`] walks it in reverse and accumulates gradients by
//! summation. Backward is single-threaded and deterministic.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, gemm_nn, gemm_nt, gemm_tn, slice_moments, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRows(Var, Var),
    Affine(Var, f64),
    Recip(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var, usize),
    L2Normalize(Var, usize, f64),
    LayerNorm(Var, Var, Var),
    SumAxis(Var, usize),
    SumAll(Var),
    ConcatRows(Vec<Var>),
    Gather(Var, Rc<[usize]>),
    Reshape(Var),
    GroupSumRows(Var, usize),
    CrossEntropy(Var, Rc<[usize]>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lower clamp applied to probabilities inside [`Graph::cross_entropy`].
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_nonfinite: Option<(usize, &'static str)>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when no path reaches `v`.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
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

    /// Fails if any recorded operation produced NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            None => Ok(()),
            Some((node, op)) => Err(Error::NonFinite {
                op: format!("{op} (node {node})"),
            }),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            op => inputs(op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((self.nodes.len(), name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf: gradients flow to it.
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, "param");
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// A detached leaf: treated as a constant by [`Graph::backward`].
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, "constant")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), "matmul"))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b), "matmul_nt"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), "sub"))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), "mul"))
    }

    /// Adds the vector `row` (length n) to every row of the m×n matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let r = self.value(row);
        if r.len() != n {
            return Err(Error::dim("add_row", format!("row of {} for {m}x{n}", r.len())));
        }
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), "add_row"))
    }

    /// Scales row i of the m×n matrix `a` by `scales[i]`.
    pub fn mul_rows(&mut self, a: Var, scales: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let s = self.value(scales);
        if s.len() != m {
            return Err(Error::dim("mul_rows", format!("{} scales for {m} rows", s.len())));
        }
        let mut out = self.value(a).clone();
        for (chunk, &k) in out.data_mut().chunks_mut(n.max(1)).zip(s.data()) {
            for o in chunk.iter_mut() {
                *o *= k;
            }
        }
        Ok(self.push(out, Op::MulRows(a, scales), "mul_rows"))
    }

    /// `alpha · a + beta`, elementwise.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let out = self.value(a).map(|x| alpha * x + beta);
        // beta does not affect the gradient, so only alpha is recorded.
        self.push(out, Op::Affine(a, alpha), "affine")
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / x);
        self.push(out, Op::Recip(a), "recip")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(a), axis)?;
        Ok(self.push(out, Op::Softmax(a, axis), "softmax"))
    }

    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let out = tensor::l2_normalize(self.value(a), axis, eps)?;
        Ok(self.push(out, Op::L2Normalize(a, axis, eps), "l2_normalize"))
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let out = tensor::layer_norm(self.value(a), self.value(gain), self.value(bias))?;
        Ok(self.push(out, Op::LayerNorm(a, gain, bias), "layer_norm"))
    }

    /// Sums a matrix over `axis`: 0 gives column sums (length n), 1 gives row
    /// sums (length m).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let out = match axis {
            0 => {
                let mut s = vec![0.0; n];
                for row in t.data().chunks(n.max(1)) {
                    for (acc, v) in s.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::from_parts(vec![n], s)
            }
            1 => Tensor::from_parts(
                vec![m],
                t.data().chunks(n.max(1)).map(|r| r.iter().sum()).collect(),
            ),
            _ => return Err(Error::dim("sum_axis", format!("axis {axis} on a matrix"))),
        };
        Ok(self.push(out, Op::SumAxis(a, axis), "sum_axis"))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), "sum_all")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows"))
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::dim("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim("gather", format!("index {bad} >= {}", src.len())));
        }
        let data = index.iter().map(|&i| src.data()[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(out, Op::Gather(a, index), "gather"))
    }

    /// Selects rows `[start, start + count)` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if start + count > m {
            return Err(Error::dim("slice_rows", format!("rows {start}..{} of {m}", start + count)));
        }
        let index: Rc<[usize]> = (start * n..(start + count) * n).collect();
        self.gather(a, index, &[count, n])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), "reshape"))
    }

    /// Sums consecutive groups of `group` rows: an (n·group)×q input gives an
    /// n×q output.
    pub fn group_sum_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let (m, q) = self.value(a).dims2();
        if group == 0 || m % group != 0 {
            return Err(Error::dim("group_sum_rows", format!("{m} rows in groups of {group}")));
        }
        let n = m / group;
        let src = self.value(a).data();
        let mut out = vec![0.0; n * q];
        for g in 0..n {
            for r in 0..group {
                let row = &src[(g * group + r) * q..(g * group + r + 1) * q];
                for (o, v) in out[g * q..(g + 1) * q].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let out = Tensor::from_parts(vec![n, q], out);
        Ok(self.push(out, Op::GroupSumRows(a, group), "group_sum_rows"))
    }

    /// Mean negative log-likelihood of column-wise probabilities `p`
    /// (classes × queries) at `labels`, with `log` clamped at [`LOG_CLAMP`].
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let (n, q) = self.value(p).dims2();
        if labels.len() != q {
            return Err(Error::dim("cross_entropy", format!("{} labels for {q} queries", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::usage(format!("label {bad} out of range for {n} classes")));
        }
        let probs = self.value(p);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(j, &l)| -probs.at(l, j).max(LOG_CLAMP).ln())
            .sum();
        let out = Tensor::scalar(total / q as f64);
        Ok(self.push(out, Op::CrossEntropy(p, labels.into()), "cross_entropy"))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        let mut acc = |v: Var, delta: Tensor| accumulate(grads, v, delta);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2();
                let n = bv.dims2().1;
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    acc(*a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), &mut db, m, k, n);
                    acc(*b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ, a: m×k, b: n×k
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2();
                let n = bv.dims2().0;
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(g.data(), bv.data(), &mut da, m, n, k);
                    acc(*a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(g.data(), av.data(), &mut db, m, n, k);
                    acc(*b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y).unwrap());
                }
                if self.needs(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y).unwrap());
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*row) {
                    let n = self.value(*row).len();
                    let mut s = vec![0.0; n];
                    for chunk in g.data().chunks(n.max(1)) {
                        for (acc_j, v) in s.iter_mut().zip(chunk) {
                            *acc_j += v;
                        }
                    }
                    acc(*row, Tensor::from_parts(self.value(*row).shape().to_vec(), s));
                }
            }
            Op::MulRows(a, scales) => {
                let (_, n) = self.value(*a).dims2();
                let sv = self.value(*scales);
                if self.needs(*a) {
                    let mut da = g.clone();
                    for (chunk, &k) in da.data_mut().chunks_mut(n.max(1)).zip(sv.data()) {
                        for x in chunk.iter_mut() {
                            *x *= k;
                        }
                    }
                    acc(*a, da);
                }
                if self.needs(*scales) {
                    let av = self.value(*a);
                    let ds = g
                        .data()
                        .chunks(n.max(1))
                        .zip(av.data().chunks(n.max(1)))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*scales, Tensor::from_parts(sv.shape().to_vec(), ds));
                }
            }
            Op::Affine(a, alpha) => acc(*a, g.map(|x| alpha * x)),
            Op::Recip(a) => acc(*a, g.zip_map(out, |x, y| -x * y * y).unwrap()),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |x, y| x * y * (1.0 - y)).unwrap()),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |x, y| x * (1.0 - y * y)).unwrap()),
            Op::Relu(a) => {
                let da = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                acc(*a, da.unwrap())
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = tensor::axis_split(out.shape(), *axis).unwrap();
                let (y, gd) = (out.data(), g.data());
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            da[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                acc(*a, Tensor::from_parts(out.shape().to_vec(), da));
            }
            Op::L2Normalize(a, axis, eps) => {
                let x = self.value(*a).data();
                let (outer, n, inner) = tensor::axis_split(out.shape(), *axis).unwrap();
                let (y, gd) = (out.data(), g.data());
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let norm = (0..n).map(|j| x[at(j)].powi(2)).sum::<f64>().sqrt();
                        if norm >= *eps {
                            let dot: f64 = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                da[at(j)] = (gd[at(j)] - y[at(j)] * dot) / norm;
                            }
                        } else {
                            for j in 0..n {
                                da[at(j)] = gd[at(j)] / eps;
                            }
                        }
                    }
                }
                acc(*a, Tensor::from_parts(out.shape().to_vec(), da));
            }
            Op::LayerNorm(a, gain, bias) => {
                let x = self.value(*a);
                let gv = self.value(*gain).data();
                let d = gv.len();
                let mut dx = vec![0.0; x.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for ((xs, gs), dxs) in x
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.chunks_mut(d))
                {
                    let (mean, std) = slice_moments(xs);
                    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    let clamped = var.sqrt() < tensor::LAYER_NORM_EPS;
                    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) / std).collect();
                    let dxhat: Vec<f64> = gs.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = if clamped {
                        // std is a constant floor here: only the mean shift remains
                        0.0
                    } else {
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64
                    };
                    for j in 0..d {
                        dxs[j] = (dxhat[j] - mean_d - xhat[j] * mean_dx) / std;
                        dgain[j] += gs[j] * xhat[j];
                        dbias[j] += gs[j];
                    }
                }
                if self.needs(*a) {
                    acc(*a, Tensor::from_parts(x.shape().to_vec(), dx));
                }
                if self.needs(*gain) {
                    acc(*gain, Tensor::from_parts(self.value(*gain).shape().to_vec(), dgain));
                }
                if self.needs(*bias) {
                    acc(*bias, Tensor::from_parts(self.value(*bias).shape().to_vec(), dbias));
                }
            }
            Op::SumAxis(a, axis) => {
                let av = self.value(*a);
                let (m, n) = av.dims2();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = if *axis == 0 { g.data()[j] } else { g.data()[i] };
                    }
                }
                acc(*a, Tensor::from_parts(av.shape().to_vec(), da));
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                acc(*a, Tensor::full(av.shape(), g.item()));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.len();
                    if self.needs(p) {
                        let slice = g.data()[offset..offset + len].to_vec();
                        acc(p, Tensor::from_parts(pv.shape().to_vec(), slice));
                    }
                    offset += len;
                }
            }
            Op::Gather(a, index) => {
                let av = self.value(*a);
                let mut da = vec![0.0; av.len()];
                for (&src, &gv) in index.iter().zip(g.data()) {
                    da[src] += gv;
                }
                acc(*a, Tensor::from_parts(av.shape().to_vec(), da));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::GroupSumRows(a, group) => {
                let av = self.value(*a);
                let (m, q) = av.dims2();
                let mut da = vec![0.0; m * q];
                for r in 0..m {
                    let gi = r / group;
                    da[r * q..(r + 1) * q].copy_from_slice(&g.data()[gi * q..(gi + 1) * q]);
                }
                acc(*a, Tensor::from_parts(av.shape().to_vec(), da));
            }
            Op::CrossEntropy(p, labels) => {
                let pv = self.value(*p);
                let (_, q) = pv.dims2();
                let mut dp = vec![0.0; pv.len()];
                for (j, &l) in labels.iter().enumerate() {
                    let prob = pv.at(l, j);
                    if prob > LOG_CLAMP {
                        dp[l * q + j] = -g.item() / (q as f64 * prob);
                    }
                }
                acc(*p, Tensor::from_parts(pv.shape().to_vec(), dp));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::MatMulNt(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::MulRows(a, b) => vec![*a, *b],
        Op::LayerNorm(a, b, c) => vec![*a, *b, *c],
        Op::ConcatRows(parts) => parts.clone(),
        Op::Affine(a, _)
        | Op::Recip(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Relu(a)
        | Op::Softmax(a, _)
        | Op::L2Normalize(a, _, _)
        | Op::SumAxis(a, _)
        | Op::SumAll(a)
        | Op::Gather(a, _)
        | Op::Reshape(a)
        | Op::GroupSumRows(a, _)
        | Op::CrossEntropy(a, _) => vec![*a],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, relative_error};
    use crate::rng::SaffRng;
    use proptest::prelude::*;

    fn random(shape: &[usize], rng: &mut SaffRng) -> Tensor {
        let data = (0..shape.iter().product()).map(|_| rng.normal()).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Checks `d/dx Σ (op(x, others) ⊙ R)` against central differences for
    /// every input of a unary or n-ary op.
    fn check<F>(inputs: &[Tensor], build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = SaffRng::new(99);
        let probe = {
            let mut g = Graph::new();
            let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vs);
            g.value(out).shape().to_vec()
        };
        let weights = random(&probe, &mut rng);
        let loss_of = |ts: &[Tensor]| -> (Graph, Var, Vec<Var>) {
            let mut g = Graph::new();
            let vs: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vs);
            let w = g.constant(weights.clone());
            let prod = g.mul(out, w).unwrap();
            let loss = g.sum_all(prod);
            (g, loss, vs)
        };
        let (g, loss, vs) = loss_of(inputs);
        let grads = g.backward(loss).unwrap();
        for (i, v) in vs.iter().enumerate() {
            let numeric = finite_diff_grad(
                |x| {
                    let mut ts = inputs.to_vec();
                    ts[i] = x.clone();
                    let (g, loss, _) = loss_of(&ts);
                    g.value(loss).item()
                },
                &inputs[i],
                1e-6,
            );
            let err = relative_error(&grads.get(*v), &numeric);
            assert!(err < 1e-6, "input {i}: relative error {err:e}");
        }
    }

    #[test]
    fn elementwise_and_matrix_ops() {
        let mut rng = SaffRng::new(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[3, 4], &mut rng);
        let w = random(&[4, 2], &mut rng);
        let row = random(&[4], &mut rng);
        let col = random(&[3], &mut rng);
        check(&[a.clone(), w.clone()], |g, v| g.matmul(v[0], v[1]).unwrap());
        check(&[a.clone(), b.clone()], |g, v| g.matmul_nt(v[0], v[1]).unwrap());
        check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
        check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
        check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
        check(&[a.clone(), row], |g, v| g.add_row(v[0], v[1]).unwrap());
        check(&[a.clone(), col], |g, v| g.mul_rows(v[0], v[1]).unwrap());
        check(&[a.clone()], |g, v| g.affine(v[0], -1.5, 0.25));
        check(&[a.map(|x| x.abs() + 0.5)], |g, v| g.recip(v[0]));
        check(&[a.clone()], |g, v| g.sigmoid(v[0]));
        check(&[a.clone()], |g, v| g.tanh(v[0]));
        // keep entries away from the kink
        check(&[a.map(|x| if x.abs() < 0.05 { 0.3 } else { x })], |g, v| g.relu(v[0]));
    }

    #[test]
    fn normalizations() {
        let mut rng = SaffRng::new(2);
        let a = random(&[4, 5], &mut rng);
        let gain = random(&[5], &mut rng);
        let bias = random(&[5], &mut rng);
        check(&[a.clone()], |g, v| g.softmax(v[0], 0).unwrap());
        check(&[a.clone()], |g, v| g.softmax(v[0], 1).unwrap());
        check(&[a.clone()], |g, v| g.l2_normalize(v[0], 0, 1e-12).unwrap());
        check(&[a.clone()], |g, v| g.l2_normalize(v[0], 1, 1e-12).unwrap());
        check(&[a, gain, bias], |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap());
    }

    #[test]
    fn layer_norm_with_clamped_spread() {
        // rows with spread below the floor take the constant-σ branch
        let a = Tensor::matrix(&[[1.0, 1.000001, 0.999999], [0.2, -0.7, 1.1]]);
        let gain = Tensor::vector(&[0.5, -1.0, 2.0]);
        let bias = Tensor::vector(&[0.1, 0.0, -0.3]);
        check(&[a, gain, bias], |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap());
    }

    #[test]
    fn reductions_and_reshaping() {
        let mut rng = SaffRng::new(3);
        let a = random(&[6, 3], &mut rng);
        let b = random(&[2, 3], &mut rng);
        check(&[a.clone()], |g, v| g.sum_axis(v[0], 0).unwrap());
        check(&[a.clone()], |g, v| g.sum_axis(v[0], 1).unwrap());
        check(&[a.clone()], |g, v| g.sum_all(v[0]));
        check(&[a.clone(), b], |g, v| g.concat_rows(&[v[0], v[1], v[0]]).unwrap());
        let idx: Rc<[usize]> = vec![5, 0, 5, 17, 2, 2].into();
        check(&[a.clone()], move |g, v| g.gather(v[0], idx.clone(), &[2, 3]).unwrap());
        check(&[a.clone()], |g, v| g.slice_rows(v[0], 2, 3).unwrap());
        check(&[a.clone()], |g, v| g.reshape(v[0], &[3, 6]).unwrap());
        check(&[a], |g, v| g.group_sum_rows(v[0], 3).unwrap());
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = SaffRng::new(4);
        let logits = random(&[3, 4], &mut rng);
        check(&[logits], |g, v| {
            let p = g.softmax(v[0], 0).unwrap();
            g.cross_entropy(p, &[0, 2, 1, 2]).unwrap()
        });
    }

    #[test]
    fn cross_entropy_value() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::matrix(&[[0.5, 0.0], [0.5, 1.0]]));
        let loss = g.cross_entropy(p, &[0, 0]).unwrap();
        let expected = (-(0.5f64).ln() - LOG_CLAMP.ln()) / 2.0;
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
        assert!(g.cross_entropy(p, &[0, 2]).is_err());
    }

    #[test]
    fn constants_get_no_gradient_and_unreached_params_get_zeros() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(&[1.0, 2.0]));
        let p = g.param(Tensor::vector(&[3.0, 4.0]));
        let unused = g.param(Tensor::vector(&[5.0]));
        let prod = g.mul(c, p).unwrap();
        let loss = g.sum_all(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).data(), &[1.0, 2.0]);
        assert_eq!(grads.get(unused).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut g = Graph::new();
        let z = g.param(Tensor::vector(&[0.0]));
        let r = g.recip(z);
        let _ = g.sum_all(r);
        assert!(matches!(g.check_finite(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.matmul(a, a), Err(Error::Dimension { .. })));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
        assert!(g.group_sum_rows(a, 4).is_err());
        assert!(g.slice_rows(a, 1, 2).is_err());
    }

    proptest! {
        #[test]
        fn matmul_gradient_is_exact_for_linear_loss(
            m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in any::<u64>()
        ) {
            // d/dA Σ(A·B) = 1·Bᵀ, summed exactly
            let mut rng = SaffRng::new(seed);
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            let mut g = Graph::new();
            let (va, vb) = (g.param(a), g.param(b.clone()));
            let c = g.matmul(va, vb).unwrap();
            let loss = g.sum_all(c);
            let grads = g.backward(loss).unwrap();
            let da = grads.get(va);
            for i in 0..m {
                for p in 0..k {
                    let expected: f64 = (0..n).map(|j| b.at(p, j)).sum();
                    prop_assert!((da.at(i, p) - expected).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn softmax_gradient_rows_sum_to_zero(seed in any::<u64>(), axis in 0usize..2) {
            // softmax outputs along the axis sum to one, so a loss that is
            // constant along it has zero gradient
            let mut rng = SaffRng::new(seed);
            let x = random(&[3, 4], &mut rng);
            let mut g = Graph::new();
            let v = g.param(x);
            let s = g.softmax(v, axis).unwrap();
            let loss = g.sum_all(s);
            let grads = g.backward(loss).unwrap();
            prop_assert!(grads.get(v).data().iter().all(|d| d.abs() < 1e-12));
        }
    }
}
