//! Parameterized building blocks: embeddings, affine layers, the LSTM cell,
//! batch normalization and weight initialization.
//!
//! Gradient buffers have the same type as the parameters they belong to
//! (created with `zeros_like`), and every `*_backward` accumulates into them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid_scalar, vecmat_backward_into, vecmat_into, Tensor};

/// Reserved token ids shared by every vocabulary.
pub const UNK_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const NUM_RESERVED: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "scheme")]
pub enum InitScheme {
    /// U(−scale, scale).
    Uniform { scale: f64 },
    /// Glorot uniform, variance 2/(fan_in+fan_out).
    Xavier,
    /// He Gaussian, variance 2/fan_in.
    Msra,
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [fan_in, rest @ ..] => (*fan_in, rest.iter().product()),
    }
}

/// Draws a tensor of `shape` from `scheme`. For matrices the first extent is
/// the fan-in (weights are stored `[n_in × n_out]`).
pub fn init_params_with(shape: &[usize], scheme: InitScheme, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let (fan_in, fan_out) = fans(shape);
    let data: Vec<f64> = match scheme {
        InitScheme::Uniform { scale } => (0..n).map(|_| rng.random_range(-scale..=scale)).collect(),
        InitScheme::Xavier => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..=a)).collect()
        }
        InitScheme::Msra => {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| normal.sample(rng)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

pub fn init_params(shape: &[usize], scheme: InitScheme, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params_with(shape, scheme, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub weights: Tensor,
}

impl EmbeddingTable {
    pub fn new(vocab_size: usize, dim: usize, scheme: InitScheme, rng: &mut impl Rng) -> Result<Self> {
        if vocab_size < NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocabulary of {vocab_size} cannot hold the {NUM_RESERVED} reserved tokens"
            )));
        }
        Ok(EmbeddingTable {
            weights: init_params_with(&[vocab_size, dim], scheme, rng),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn lookup(&self, id: usize) -> Result<&[f64]> {
        if id >= self.vocab_size() {
            return Err(Error::Index {
                op: "embedding lookup",
                index: id,
                len: self.vocab_size(),
            });
        }
        Ok(self.weights.row(id))
    }

    pub fn backward(&self, id: usize, g: &[f64], grads: &mut EmbeddingTable) {
        for (d, v) in grads.weights.row_mut(id).iter_mut().zip(g) {
            *d += v;
        }
    }

    pub fn zeros_like(&self) -> Self {
        EmbeddingTable {
            weights: self.weights.zeros_like(),
        }
    }
}

/// Affine map `y = x·W + b` with `W: [n_in × n_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(n_in: usize, n_out: usize, scheme: InitScheme, rng: &mut impl Rng) -> Self {
        Linear {
            weight: init_params_with(&[n_in, n_out], scheme, rng),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn n_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_in() {
            return Err(Error::dim("linear", &[x.len()], self.weight.shape()));
        }
        let mut out = self.bias.data().to_vec();
        vecmat_into(x, self.weight.data(), self.n_out(), &mut out);
        Ok(out)
    }

    /// Accumulates parameter gradients; returns `dx` when requested.
    pub fn backward(&self, x: &[f64], g: &[f64], grads: &mut Linear, want_dx: bool) -> Option<Vec<f64>> {
        for (d, v) in grads.bias.data_mut().iter_mut().zip(g) {
            *d += v;
        }
        let mut dx = want_dx.then(|| vec![0.0; x.len()]);
        vecmat_backward_into(
            x,
            self.weight.data(),
            self.n_out(),
            g,
            dx.as_deref_mut(),
            grads.weight.data_mut(),
        );
        dx
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

/// Single-layer LSTM cell. Gate columns are laid out as
/// `[input | forget | output | candidate]`, each `hidden` wide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct LstmStepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gates, `[i | f | o | g]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl LstmCell {
    /// Uniform init for all weights, forget-gate bias 1.
    pub fn new(input_dim: usize, hidden: usize, uniform_scale: f64, rng: &mut impl Rng) -> Self {
        let scheme = InitScheme::Uniform { scale: uniform_scale };
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmCell {
            w_x: init_params_with(&[input_dim, 4 * hidden], scheme, rng),
            w_h: init_params_with(&[hidden, 4 * hidden], scheme, rng),
            bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_h.rows()
    }

    pub fn zeros_like(&self) -> Self {
        LstmCell {
            w_x: self.w_x.zeros_like(),
            w_h: self.w_h.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>, LstmStepCache)> {
        let hd = self.hidden();
        if x.len() != self.input_dim() {
            return Err(Error::dim("lstm_step input", &[x.len()], self.w_x.shape()));
        }
        if h_prev.len() != hd || c_prev.len() != hd {
            return Err(Error::dim("lstm_step state", &[h_prev.len(), c_prev.len()], &[hd, hd]));
        }
        let mut gates = self.bias.data().to_vec();
        vecmat_into(x, self.w_x.data(), 4 * hd, &mut gates);
        vecmat_into(h_prev, self.w_h.data(), 4 * hd, &mut gates);
        for v in &mut gates[..3 * hd] {
            *v = sigmoid_scalar(*v);
        }
        for v in &mut gates[3 * hd..] {
            *v = v.tanh();
        }
        let mut c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        for j in 0..hd {
            let (i, f, o, g) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
            c[j] = f * c_prev[j] + i * g;
            tanh_c[j] = c[j].tanh();
            h[j] = o * tanh_c[j];
        }
        let cache = LstmStepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates,
            tanh_c,
        };
        Ok((h, c, cache))
    }

    /// Backward through one step given `dL/dh` and `dL/dc` at its outputs.
    /// Returns `(dx, dh_prev, dc_prev)`.
    pub fn step_backward(
        &self,
        cache: &LstmStepCache,
        dh: &[f64],
        dc: &[f64],
        grads: &mut LstmCell,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.hidden();
        let gates = &cache.gates;
        let mut dpre = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for j in 0..hd {
            let (i, f, o, g) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
            let tc = cache.tanh_c[j];
            let dc_total = dc[j] + dh[j] * o * (1.0 - tc * tc);
            let d_o = dh[j] * tc;
            let d_i = dc_total * g;
            let d_f = dc_total * cache.c_prev[j];
            let d_g = dc_total * i;
            dc_prev[j] = dc_total * f;
            dpre[j] = d_i * i * (1.0 - i);
            dpre[hd + j] = d_f * f * (1.0 - f);
            dpre[2 * hd + j] = d_o * o * (1.0 - o);
            dpre[3 * hd + j] = d_g * (1.0 - g * g);
        }
        for (d, v) in grads.bias.data_mut().iter_mut().zip(&dpre) {
            *d += v;
        }
        let mut dx = vec![0.0; cache.x.len()];
        let mut dh_prev = vec![0.0; hd];
        vecmat_backward_into(&cache.x, self.w_x.data(), 4 * hd, &dpre, Some(&mut dx), grads.w_x.data_mut());
        vecmat_backward_into(
            &cache.h_prev,
            self.w_h.data(),
            4 * hd,
            &dpre,
            Some(&mut dh_prev),
            grads.w_h.data_mut(),
        );
        (dx, dh_prev, dc_prev)
    }

    /// Runs the cell left to right from a zero state. Returns every hidden
    /// state and the per-step caches.
    pub fn run(&self, inputs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<LstmStepCache>)> {
        if inputs.is_empty() {
            return Err(Error::pre("lstm sequence", "empty sequence"));
        }
        let hd = self.hidden();
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut hs = Vec::with_capacity(inputs.len());
        let mut caches = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (h_next, c_next, cache) = self.step(x, &h, &c)?;
            h = h_next;
            c = c_next;
            hs.push(h.clone());
            caches.push(cache);
        }
        Ok((hs, caches))
    }

    /// Backpropagation through time. `dhs[t]` is the gradient arriving at the
    /// hidden state of step `t`; returns the gradient for each input.
    pub fn run_backward(&self, caches: &[LstmStepCache], dhs: &[Vec<f64>], grads: &mut LstmCell) -> Vec<Vec<f64>> {
        let hd = self.hidden();
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        let mut dxs = vec![Vec::new(); caches.len()];
        for t in (0..caches.len()).rev() {
            let dh: Vec<f64> = dhs[t].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
            let (dx, dh_prev, dc_prev) = self.step_backward(&caches[t], &dh, &dc_next, grads);
            dxs[t] = dx;
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        dxs
    }
}

/// Single LSTM step from the given state; returns `(h, c)`.
pub fn lstm_step(params: &LstmCell, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, c, _) = params.step(x, h_prev, c_prev)?;
    Ok((h, c))
}

/// Final hidden state after encoding `embeddings` from a zero state.
pub fn encode_sequence(params: &LstmCell, embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (mut hs, _) = params.run(embeddings)?;
    Ok(hs.pop().expect("non-empty sequence"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    /// Unbiased batch variance, used for the running estimate.
    var_unbiased: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm {
            scale: Tensor::full(&[dim], 1.0),
            shift: Tensor::zeros(&[dim]),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::full(&[dim], 1.0),
            momentum,
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn zeros_like(&self) -> Self {
        BatchNorm {
            scale: self.scale.zeros_like(),
            shift: self.shift.zeros_like(),
            running_mean: self.running_mean.zeros_like(),
            running_var: self.running_var.zeros_like(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }

    fn check(&self, batch: &Tensor) -> Result<(usize, usize)> {
        match batch.shape() {
            [b, d] if *d == self.dim() => Ok((*b, *d)),
            s => Err(Error::dim("batchnorm", s, &[0, self.dim()])),
        }
    }

    /// Normalizes with batch statistics. Running statistics are not touched;
    /// apply [`BatchNorm::update_running`] with the returned cache.
    pub fn forward_train(&self, batch: &Tensor) -> Result<(Tensor, BnCache)> {
        let (b, d) = self.check(batch)?;
        if b < 2 {
            return Err(Error::pre("batchnorm", format!("train mode needs at least 2 rows, got {b}")));
        }
        let mut mean = vec![0.0; d];
        for r in 0..b {
            for (m, v) in mean.iter_mut().zip(batch.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut sq = vec![0.0; d];
        for r in 0..b {
            for ((s, v), m) in sq.iter_mut().zip(batch.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = sq.iter().map(|s| 1.0 / (s / b as f64 + self.eps).sqrt()).collect();
        let var_unbiased = sq.iter().map(|s| s / (b - 1) as f64).collect();
        let mut normalized = batch.clone();
        let mut out = batch.clone();
        for r in 0..b {
            let nrow = normalized.row_mut(r);
            for j in 0..d {
                nrow[j] = (nrow[j] - mean[j]) * inv_std[j];
            }
            let nrow = normalized.row(r).to_vec();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = nrow[j] * self.scale.data()[j] + self.shift.data()[j];
            }
        }
        Ok((
            out,
            BnCache {
                normalized,
                inv_std,
                mean,
                var_unbiased,
            },
        ))
    }

    pub fn update_running(&mut self, cache: &BnCache) {
        let m = self.momentum;
        for (r, v) in self.running_mean.data_mut().iter_mut().zip(&cache.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&cache.var_unbiased) {
            *r = (1.0 - m) * *r + m * v;
        }
    }

    pub fn forward_infer(&self, batch: &Tensor) -> Result<Tensor> {
        let (b, _) = self.check(batch)?;
        let mut out = batch.clone();
        for r in 0..b {
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                let inv = 1.0 / (self.running_var.data()[j] + self.eps).sqrt();
                *o = (*o - self.running_mean.data()[j]) * inv * self.scale.data()[j] + self.shift.data()[j];
            }
        }
        Ok(out)
    }

    /// Same map as [`BatchNorm::forward_infer`] applied to one row.
    pub fn infer_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, v)| {
                let inv = 1.0 / (self.running_var.data()[j] + self.eps).sqrt();
                (v - self.running_mean.data()[j]) * inv * self.scale.data()[j] + self.shift.data()[j]
            })
            .collect()
    }

    /// Backward of [`BatchNorm::forward_train`]; accumulates scale/shift
    /// gradients and returns `dL/dbatch`.
    pub fn backward_train(&self, cache: &BnCache, dy: &Tensor, grads: &mut BatchNorm) -> Tensor {
        let (b, d) = (dy.rows(), dy.cols());
        let mut sum_dxhat = vec![0.0; d];
        let mut sum_dxhat_xhat = vec![0.0; d];
        for r in 0..b {
            let xhat = cache.normalized.row(r);
            let g = dy.row(r);
            for j in 0..d {
                grads.scale.data_mut()[j] += g[j] * xhat[j];
                grads.shift.data_mut()[j] += g[j];
                let dxhat = g[j] * self.scale.data()[j];
                sum_dxhat[j] += dxhat;
                sum_dxhat_xhat[j] += dxhat * xhat[j];
            }
        }
        let mut dx = dy.clone();
        let bf = b as f64;
        for r in 0..b {
            let xhat = cache.normalized.row(r).to_vec();
            for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                let dxhat = *o * self.scale.data()[j];
                *o = cache.inv_std[j] / bf * (bf * dxhat - sum_dxhat[j] - xhat[j] * sum_dxhat_xhat[j]);
            }
        }
        dx
    }
}

/// Mode-dispatching batch normalization; train mode also advances the
/// running statistics.
pub fn batchnorm_forward(params: &mut BatchNorm, batch: &Tensor, mode: BnMode) -> Result<Tensor> {
    match mode {
        BnMode::Train => {
            let (out, cache) = params.forward_train(batch)?;
            params.update_running(&cache);
            Ok(out)
        }
        BnMode::Infer => params.forward_infer(batch),
    }
}
