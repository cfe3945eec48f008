//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive operations as they are applied. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates `dLoss/dParam` into the owning [`ParamStore`].
//!
//! Tensors are rank 1 or rank 2 and stored row-major. A rank-1 tensor of
//! length `n` behaves as a `1 x n` row wherever a matrix is expected. The
//! only broadcast is a bias row added to every row of a matrix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape must be rank 1 or 2 with positive extents, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::matrix(rows.len(), cols, data)
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

    /// `(rows, cols)`, with rank-1 tensors read as a single row.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims();
        let (k2, n) = other.dims();
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = self.dims();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Numerically stable softmax of one row of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln p + (1-y) ln(1-p)]` with `p = sigmoid(z)`, evaluated without forming `p`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every trainable tensor of a model, addressable by id or by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    names: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            id,
            name: name.clone(),
            value,
            grad,
        });
        self.names.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    SumCols(Var),
    Sum(Var),
    Columns { x: Var, start: usize },
    ScaleRows(Var, Var),
    Concat(Var, Var),
    PairProducts(Var, Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations. Single-threaded; build one per
/// forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a bias row (length = cols) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (m, n) = xv.dims();
        if bv.len() != n {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.data.clone();
        for r in 0..m {
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape.clone(), out)?;
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape.clone(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| x * factor).collect(),
        };
        self.push(value, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        };
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| sigmoid(x)).collect(),
        };
        self.push(value, Op::Sigmoid(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            data.extend(softmax(&av.data[r * n..(r + 1) * n]));
        }
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        self.push(value, Op::Softmax(a))
    }

    /// Per-row sum, producing an `m x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims();
        let data = (0..m).map(|r| av.data[r * n..(r + 1) * n].iter().sum()).collect();
        let value = Tensor {
            shape: vec![m, 1],
            data,
        };
        self.push(value, Op::SumCols(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims();
        if len == 0 || start + len > n {
            return Err(Error::shape("columns", xv.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.data[r * n + start..r * n + start + len]);
        }
        let value = Tensor::matrix(m, len, data)?;
        Ok(self.push(value, Op::Columns { x, start }))
    }

    /// Multiplies row `r` of `x` by `s[r]`, where `s` is an `m x 1` column.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (m, n) = xv.dims();
        if sv.len() != m || sv.cols() != 1 && sv.rows() != 1 {
            return Err(Error::shape("scale_rows", xv.shape(), sv.shape()));
        }
        let mut data = xv.data.clone();
        for r in 0..m {
            let f = sv.data[r];
            data[r * n..(r + 1) * n].iter_mut().for_each(|v| *v *= f);
        }
        let value = Tensor::new(xv.shape.clone(), data)?;
        Ok(self.push(value, Op::ScaleRows(x, s)))
    }

    /// Column-wise concatenation of two matrices with the same row count.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, na), (mb, nb)) = (av.dims(), bv.dims());
        if m != mb {
            return Err(Error::shape("concat", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(m * (na + nb));
        for r in 0..m {
            data.extend_from_slice(&av.data[r * na..(r + 1) * na]);
            data.extend_from_slice(&bv.data[r * nb..(r + 1) * nb]);
        }
        let value = Tensor::matrix(m, na + nb, data)?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    /// For inputs `x: m x n` and latent vectors `v: n x k`, produces the
    /// `m x n(n-1)/2` matrix of `<v_i, v_j> x_i x_j` over pairs `i < j`
    /// in lexicographic order.
    pub fn pair_products(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        let (m, n) = xv.dims();
        let (nv, k) = vv.dims();
        if n != nv || n < 2 {
            return Err(Error::shape("pair_products", xv.shape(), vv.shape()));
        }
        let pairs = n * (n - 1) / 2;
        let gram = gram_upper(&vv.data, n, k);
        let mut data = Vec::with_capacity(m * pairs);
        for r in 0..m {
            let row = &xv.data[r * n..(r + 1) * n];
            let mut p = 0;
            for i in 0..n {
                for j in (i + 1)..n {
                    data.push(gram[p] * row[i] * row[j]);
                    p += 1;
                }
            }
        }
        let value = Tensor::matrix(m, pairs, data)?;
        Ok(self.push(value, Op::PairProducts(x, v)))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, n) = lv.dims();
        if labels.len() != m {
            return Err(Error::shape("softmax_cross_entropy", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Contract(format!("label {bad} out of range for {n} classes")));
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| {
                let row = &lv.data[r * n..(r + 1) * n];
                log_sum_exp(row) - row[l]
            })
            .sum();
        let value = Tensor::scalar(total / m as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean over rows of binary cross-entropy, from an `m x 1` column of logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", lv.shape(), &[targets.len()]));
        }
        let total: f64 = lv
            .data
            .iter()
            .zip(targets)
            .map(|(&z, &y)| bce_with_logit(z, y))
            .sum();
        let value = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Back-propagates from a scalar node, accumulating into `store` grads.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lv.shape.clone(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    p.grad.add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.matmul(&bv.transpose())?;
                    let gb = av.transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, reshape_like(ga, av));
                    accumulate(&mut grads, *b, reshape_like(gb, bv));
                }
                Op::AddBias(x, b) => {
                    let bv = self.value(*b);
                    let (m, n) = g.dims();
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for (acc, v) in gb.iter_mut().zip(&g.data[r * n..(r + 1) * n]) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::new(bv.shape.clone(), gb)?);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = map(&g, |v| -v);
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = zip(&g, bv, |gv, y| gv * y);
                    let gb = zip(&g, av, |gv, x| gv * x);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    accumulate(&mut grads, *a, map(&g, |v| v * f));
                }
                Op::Relu(a) => {
                    let ga = zip(&g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip(&g, &node.value, |gv, y| gv * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let (m, n) = y.dims();
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        let yr = &y.data[r * n..(r + 1) * n];
                        let gr = &g.data[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            ga[r * n + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(y.shape.clone(), ga)?);
                }
                Op::SumCols(a) => {
                    let av = self.value(*a);
                    let (m, n) = av.dims();
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        ga[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = g.data[r]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(av.shape.clone(), ga)?);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let ga = Tensor::new(av.shape.clone(), vec![g.data[0]; av.len()])?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Columns { x, start } => {
                    let xv = self.value(*x);
                    let (m, n) = xv.dims();
                    let len = g.cols();
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        gx[r * n + start..r * n + start + len]
                            .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape.clone(), gx)?);
                }
                Op::ScaleRows(x, s) => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let (m, n) = xv.dims();
                    let mut gx = vec![0.0; m * n];
                    let mut gs = vec![0.0; m];
                    for r in 0..m {
                        let f = sv.data[r];
                        for c in 0..n {
                            let gv = g.data[r * n + c];
                            gx[r * n + c] = gv * f;
                            gs[r] += gv * xv.data[r * n + c];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape.clone(), gx)?);
                    accumulate(&mut grads, *s, Tensor::new(sv.shape.clone(), gs)?);
                }
                Op::Concat(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, na) = av.dims();
                    let nb = bv.cols();
                    let (mut ga, mut gb) = (Vec::with_capacity(m * na), Vec::with_capacity(m * nb));
                    for r in 0..m {
                        let row = &g.data[r * (na + nb)..(r + 1) * (na + nb)];
                        ga.extend_from_slice(&row[..na]);
                        gb.extend_from_slice(&row[na..]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(av.shape.clone(), ga)?);
                    accumulate(&mut grads, *b, Tensor::new(bv.shape.clone(), gb)?);
                }
                Op::PairProducts(x, v) => {
                    let (xv, vv) = (self.value(*x), self.value(*v));
                    let (m, n) = xv.dims();
                    let k = vv.cols();
                    let pairs = g.cols();
                    let gram = gram_upper(&vv.data, n, k);
                    let mut gx = vec![0.0; m * n];
                    let mut ggram = vec![0.0; pairs];
                    for r in 0..m {
                        let row = &xv.data[r * n..(r + 1) * n];
                        let grow = &g.data[r * pairs..(r + 1) * pairs];
                        let gxr = &mut gx[r * n..(r + 1) * n];
                        let mut p = 0;
                        for i in 0..n {
                            for j in (i + 1)..n {
                                let gv = grow[p];
                                gxr[i] += gv * gram[p] * row[j];
                                gxr[j] += gv * gram[p] * row[i];
                                ggram[p] += gv * row[i] * row[j];
                                p += 1;
                            }
                        }
                    }
                    let mut gv = vec![0.0; n * k];
                    let mut p = 0;
                    for i in 0..n {
                        for j in (i + 1)..n {
                            for l in 0..k {
                                gv[i * k + l] += ggram[p] * vv.data[j * k + l];
                                gv[j * k + l] += ggram[p] * vv.data[i * k + l];
                            }
                            p += 1;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape.clone(), gx)?);
                    accumulate(&mut grads, *v, Tensor::new(vv.shape.clone(), gv)?);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let lv = self.value(*logits);
                    let (m, n) = lv.dims();
                    let scale = g.data[0] / m as f64;
                    let mut gl = Vec::with_capacity(m * n);
                    for (r, &label) in labels.iter().enumerate() {
                        let probs = softmax(&lv.data[r * n..(r + 1) * n]);
                        for (c, p) in probs.into_iter().enumerate() {
                            let target = if c == label { 1.0 } else { 0.0 };
                            gl.push((p - target) * scale);
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(lv.shape.clone(), gl)?);
                }
                Op::BceWithLogits { logits, targets } => {
                    let lv = self.value(*logits);
                    let scale = g.data[0] / targets.len() as f64;
                    let gl = lv
                        .data
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::new(lv.shape.clone(), gl)?);
                }
            }
        }
        Ok(())
    }
}

/// Upper-triangle Gram entries `<v_i, v_j>` for `i < j`, lexicographic.
fn gram_upper(v: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push((0..k).map(|l| v[i * k + l] * v[j * k + l]).sum());
        }
    }
    out
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: other.shape.clone(),
        data: g.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
    }
}

fn reshape_like(t: Tensor, like: &Tensor) -> Tensor {
    Tensor {
        shape: like.shape.clone(),
        data: t.data,
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_expansion() {
        let b = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Tensor::identity(2).matmul(&b).unwrap(), b);

        let a = t2(1, 2, &[1.0, 2.0]);
        let c = t2(2, 1, &[3.0, 4.0]);
        assert_eq!(a.matmul(&c).unwrap().data(), &[11.0]);

        let z = Tensor::zeros(&[2, 3]);
        let any = t2(3, 2, &[1.5, -2.0, 3.0, 0.5, 7.0, -1.0]);
        assert_eq!(z.matmul(&any).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        match err {
            Error::Shape { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut store = ParamStore::new();
        let id = store
            .insert("x", Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_is_identity_on_positive_input() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.5, 3.0, 9.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.5, 3.0, 9.0]);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300 + 1e-12);
        let p = softmax(&[2f64.ln(), 1f64.ln()]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn backward_linear_and_power_rule() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(0.7)).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let x = tape.input(Tensor::scalar(3.0));
        let loss = tape.mul(wv, x).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[3.0]);

        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.mul(wv, wv).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_params_keep_zero_grad() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::scalar(1.5)).unwrap();
        let b = store.insert("b", Tensor::scalar(-2.0)).unwrap();
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let _bv = tape.param(&store, b);
        let loss = tape.mul(av, av).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(b).grad.data(), &[0.0]);
        store.zero_grad();
        assert!(store.iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(store.insert("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce_with_logit(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_with_logit(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_with_logit(40.0, 1.0) < 1e-15);
        assert!(bce_with_logit(-800.0, 0.0).abs() < 1e-15);
        assert!((bce_with_logit(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }
}
