//! Dense `f64` tensors and the differentiable operations the model is built from.
//!
//! Every forward operation has a matching `*_backward` that maps an upstream
//! gradient to gradients of the operation's inputs (a vector-Jacobian product).
//! Callers compose these in reverse order; there is no tape.
//!
//! Matrices multiply row vectors from the left: a layer with `n_in` inputs and
//! `n_out` outputs stores its weight as `[n_in × n_out]` and computes `x·W`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::pre("Tensor::new", format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || cols == 0 {
            return Err(Error::pre("Tensor::from_rows", "empty matrix"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("Tensor::from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
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

    /// Number of rows when viewed as a matrix; a vector is one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// `self += scale * other`, elementwise.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("axpy", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::pre(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)?.checked("matmul")
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_matrix("transpose", a)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Returns `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, _) = require_matrix("matmul_backward", a)?;
    let (_, n) = require_matrix("matmul_backward", b)?;
    if g.shape() != [m, n] {
        return Err(Error::dim("matmul_backward", &[m, n], g.shape()));
    }
    let ga = matmul(g, &transpose(b)?)?;
    let gb = matmul(&transpose(a)?, g)?;
    Ok((ga, gb))
}

/// Row vector times matrix: `x[n_in] · w[n_in × n_out]`.
pub fn vecmat(x: &[f64], w: &Tensor) -> Result<Vec<f64>> {
    let (n_in, n_out) = require_matrix("vecmat", w)?;
    if x.len() != n_in {
        return Err(Error::dim("vecmat", &[x.len()], w.shape()));
    }
    let mut out = vec![0.0; n_out];
    vecmat_into(x, w.data(), n_out, &mut out);
    Ok(out)
}

/// Accumulates `x · w` into `out` without shape checks.
pub(crate) fn vecmat_into(x: &[f64], w: &[f64], n_out: usize, out: &mut [f64]) {
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let w_row = &w[i * n_out..(i + 1) * n_out];
        for (o, &wv) in out.iter_mut().zip(w_row) {
            *o += xi * wv;
        }
    }
}

/// Backward of `vecmat`: accumulates `xᵀ·g` into `dw` and `g·wᵀ` into `dx`.
pub(crate) fn vecmat_backward_into(
    x: &[f64],
    w: &[f64],
    n_out: usize,
    g: &[f64],
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
) {
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let dw_row = &mut dw[i * n_out..(i + 1) * n_out];
        for (d, &gv) in dw_row.iter_mut().zip(g) {
            *d += xi * gv;
        }
    }
    if let Some(dx) = dx {
        for (i, d) in dx.iter_mut().enumerate() {
            let w_row = &w[i * n_out..(i + 1) * n_out];
            *d += w_row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Subgradient 0 at `x == 0`.
pub fn relu_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    same_shape("relu_backward", x, g)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&g.data)
            .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
            .collect(),
    })
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
    }
}

/// Takes the forward output `y = sigmoid(x)`.
pub fn sigmoid_backward(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    same_shape("sigmoid_backward", y, g)?;
    Ok(Tensor {
        shape: y.shape.clone(),
        data: y.data.iter().zip(&g.data).map(|(&s, &gv)| gv * s * (1.0 - s)).collect(),
    })
}

pub fn tanh(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v.tanh()).collect(),
    }
}

/// Takes the forward output `y = tanh(x)`.
pub fn tanh_backward(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    same_shape("tanh_backward", y, g)?;
    Ok(Tensor {
        shape: y.shape.clone(),
        data: y.data.iter().zip(&g.data).map(|(&t, &gv)| gv * (1.0 - t * t)).collect(),
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
    .checked("add")
}

pub fn add_backward(g: &Tensor) -> (Tensor, Tensor) {
    (g.clone(), g.clone())
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
    .checked("mul")
}

pub fn mul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    same_shape("mul_backward", a, g)?;
    Ok((mul(g, b)?, mul(g, a)?))
}

/// Adds `bias[n]` to every row of `x[.. × n]`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.len() != x.cols() {
        return Err(Error::dim("add_bias", x.shape(), bias.shape()));
    }
    let n = x.cols();
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| v + bias.data[i % n])
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
    .checked("add_bias")
}

/// Returns `(dx, dbias)`; `dbias` sums the upstream gradient over rows.
pub fn add_bias_backward(g: &Tensor) -> (Tensor, Tensor) {
    let n = g.cols();
    let mut db = vec![0.0; n];
    for r in 0..g.rows() {
        for (d, v) in db.iter_mut().zip(g.row(r)) {
            *d += v;
        }
    }
    (g.clone(), Tensor::vector(db))
}

/// Concatenates two vectors.
pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 1 || b.shape().len() != 1 {
        return Err(Error::dim("concat", a.shape(), b.shape()));
    }
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Ok(Tensor::vector(data))
}

pub fn concat_backward(g: &Tensor, split: usize) -> Result<(Tensor, Tensor)> {
    if split == 0 || split >= g.len() {
        return Err(Error::pre("concat_backward", format!("split {split} of length {}", g.len())));
    }
    Ok((
        Tensor::vector(g.data[..split].to_vec()),
        Tensor::vector(g.data[split..].to_vec()),
    ))
}

pub fn sum(x: &Tensor) -> f64 {
    x.data.iter().sum()
}

pub fn sum_backward(x: &Tensor, g: f64) -> Tensor {
    Tensor::full(x.shape(), g)
}

pub fn mean(x: &Tensor) -> f64 {
    sum(x) / x.len() as f64
}

pub fn mean_backward(x: &Tensor, g: f64) -> Tensor {
    Tensor::full(x.shape(), g / x.len() as f64)
}

fn max_of(x: &[f64]) -> f64 {
    x.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn log_sum_exp(x: &[f64]) -> Result<f64> {
    let (m, tail) = lse_split(x, "log_sum_exp")?;
    Ok(m + tail)
}

/// `(max, ln(Σ exp(x − max)))`. The max term contributes exactly 1, so
/// `ln_1p` over the rest keeps precision when they are tiny.
fn lse_split(x: &[f64], op: &'static str) -> Result<(f64, f64)> {
    if x.is_empty() {
        return Err(Error::pre(op, "empty input"));
    }
    let top = argmax(x).unwrap_or(0);
    let m = x[top];
    if !m.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    let rest: f64 = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, v)| (v - m).exp())
        .sum();
    Ok((m, rest.ln_1p()))
}

pub fn softmax_stable(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::pre("softmax_stable", "empty input"));
    }
    let m = max_of(logits);
    if !m.is_finite() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax_stable" });
    }
    let mut out: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

/// Given `y = softmax(x)` and `g = dL/dy`, returns `dL/dx = y ⊙ (g − ⟨g, y⟩)`.
pub fn softmax_backward(y: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if y.len() != g.len() {
        return Err(Error::dim("softmax_backward", &[y.len()], &[g.len()]));
    }
    let inner = dot(y, g);
    Ok(y.iter().zip(g).map(|(yi, gi)| yi * (gi - inner)).collect())
}

/// `−log softmax(logits)[target]` evaluated as `logsumexp(logits) − logits[target]`.
pub fn log_likelihood_from_logits(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Index {
            op: "log_likelihood_from_logits",
            index: target,
            len: logits.len(),
        });
    }
    let (m, tail) = lse_split(logits, "log_likelihood_from_logits")?;
    Ok((m - logits[target]) + tail)
}

/// Gradient of [`log_likelihood_from_logits`]: `softmax(logits) − onehot(target)`.
pub fn log_likelihood_backward(logits: &[f64], target: usize) -> Result<Vec<f64>> {
    if target >= logits.len() {
        return Err(Error::Index {
            op: "log_likelihood_backward",
            index: target,
            len: logits.len(),
        });
    }
    let mut g = softmax_stable(logits)?;
    g[target] -= 1.0;
    Ok(g)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in x.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}
