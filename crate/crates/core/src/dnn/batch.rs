//! Batched forward/backward passes for training.
//!
//! Complex quantities are carried as separate real/imaginary f64 arrays so
//! the heavy lifting is plain real GEMMs. Gradients are exact: the sensing
//! phases are differentiated through both the signal and the combined noise
//! path (the noise enters as W * n), batch normalization through its batch
//! statistics, and the x/|x| output layer through the real-pair quotient
//! rule. The minibatch objective is the mean over single-user samples of
//! -log2(1 + c |h^H v|^2), c = P_D/(M K sigma2), summed over subcarriers in
//! the multicarrier mode.

use super::{DnnMode, SuDnnModel, BN_EPS};
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::rng::sample_cn;
use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::LN_2;

/// Whether batch normalization uses minibatch statistics (training) or the
/// stored running statistics (inference / frozen-statistics gradients).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Batch,
    Frozen,
}

/// Constants of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossConsts {
    /// P_D / (M * K * sigma2).
    pub c: f64,
    pub sqrt_pu: f64,
}

impl LossConsts {
    pub fn from_config(cfg: &SystemConfig) -> Result<Self> {
        if !(cfg.sigma2 > 0.0) {
            return Err(Error::Invalid(
                "training loss requires sigma2 > 0 (the per-term SNR divides by it)".into(),
            ));
        }
        Ok(LossConsts {
            c: cfg.p_d / (cfg.m() as f64 * cfg.k as f64 * cfg.sigma2),
            sqrt_pu: cfg.p_u.sqrt(),
        })
    }
}

/// One minibatch of single-user samples with pre-drawn antenna noise.
#[derive(Debug, Clone)]
pub enum BatchInputs {
    Flat {
        /// (B, M)
        h_re: Array2<f64>,
        h_im: Array2<f64>,
        /// (B, L_a, M)
        n_re: Array3<f64>,
        n_im: Array3<f64>,
    },
    Ofdm {
        /// (B, M, N_c)
        h_re: Array3<f64>,
        h_im: Array3<f64>,
        /// (B, L_a, M, N_c)
        n_re: Array4<f64>,
        n_im: Array4<f64>,
    },
}

impl BatchInputs {
    pub fn batch_size(&self) -> usize {
        match self {
            BatchInputs::Flat { h_re, .. } => h_re.nrows(),
            BatchInputs::Ofdm { h_re, .. } => h_re.dim().0,
        }
    }

    /// Flat-mode batch from per-sample channel vectors; noise is drawn here
    /// in (sample, frame, antenna) order.
    pub fn flat(samples: &[&Array2<Complex64>], l_a: usize, sigma2: f64, rng: &mut ChaCha8Rng) -> Self {
        let b = samples.len();
        let m = samples[0].nrows();
        let mut h_re = Array2::zeros((b, m));
        let mut h_im = Array2::zeros((b, m));
        for (i, h) in samples.iter().enumerate() {
            for mm in 0..m {
                h_re[[i, mm]] = h[[mm, 0]].re;
                h_im[[i, mm]] = h[[mm, 0]].im;
            }
        }
        let mut n_re = Array3::zeros((b, l_a, m));
        let mut n_im = Array3::zeros((b, l_a, m));
        if sigma2 > 0.0 {
            for i in 0..b {
                for l in 0..l_a {
                    for mm in 0..m {
                        let z = sample_cn(rng, sigma2);
                        n_re[[i, l, mm]] = z.re;
                        n_im[[i, l, mm]] = z.im;
                    }
                }
            }
        }
        BatchInputs::Flat { h_re, h_im, n_re, n_im }
    }

    /// Multicarrier batch; noise order is (sample, frame, antenna, subcarrier).
    pub fn ofdm(samples: &[&Array2<Complex64>], l_a: usize, sigma2: f64, rng: &mut ChaCha8Rng) -> Self {
        let b = samples.len();
        let (m, n_c) = samples[0].dim();
        let mut h_re = Array3::zeros((b, m, n_c));
        let mut h_im = Array3::zeros((b, m, n_c));
        for (i, h) in samples.iter().enumerate() {
            for mm in 0..m {
                for j in 0..n_c {
                    h_re[[i, mm, j]] = h[[mm, j]].re;
                    h_im[[i, mm, j]] = h[[mm, j]].im;
                }
            }
        }
        let mut n_re = Array4::zeros((b, l_a, m, n_c));
        let mut n_im = Array4::zeros((b, l_a, m, n_c));
        if sigma2 > 0.0 {
            for i in 0..b {
                for l in 0..l_a {
                    for mm in 0..m {
                        for j in 0..n_c {
                            let z = sample_cn(rng, sigma2);
                            n_re[[i, l, mm, j]] = z.re;
                            n_im[[i, l, mm, j]] = z.im;
                        }
                    }
                }
            }
        }
        BatchInputs::Ofdm { h_re, h_im, n_re, n_im }
    }
}

/// Gradients for every trainable parameter group, shaped like the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub sensing: Array3<f64>,
    pub conv: Option<Array2<f64>>,
    /// (dW, db) per dense layer.
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
    /// (dgamma, dbeta) per batch-norm.
    pub bns: Vec<(Array1<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(model: &SuDnnModel) -> Self {
        Gradients {
            sensing: Array3::zeros(model.sensing_phases.dim()),
            conv: model.conv.as_ref().map(|c| Array2::zeros(c.dim())),
            layers: model
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.w.dim()), Array1::zeros(l.b.len())))
                .collect(),
            bns: model
                .bns
                .iter()
                .map(|bn| (Array1::zeros(bn.gamma.len()), Array1::zeros(bn.beta.len())))
                .collect(),
        }
    }

    /// Fails with the offending parameter-group name on any non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        if self.sensing.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient("sensing_phases".into()));
        }
        if let Some(c) = &self.conv {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient("conv_filters".into()));
            }
        }
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("layer{i}_weights")));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("layer{i}_bias")));
            }
        }
        for (i, (g, b)) in self.bns.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("bn{i}_gamma")));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("bn{i}_beta")));
            }
        }
        Ok(())
    }

    /// Canonical flattening; order matches `SuDnnModel::flatten_params`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.sensing.iter());
        if let Some(c) = &self.conv {
            out.extend(c.iter());
        }
        for ((w, b), (g, be)) in self.layers.iter().zip(self.bns.iter()) {
            out.extend(w.iter());
            out.extend(b.iter());
            out.extend(g.iter());
            out.extend(be.iter());
        }
        out
    }
}

impl SuDnnModel {
    /// Trainable parameters in canonical order: sensing phases, conv filters,
    /// then per layer (W, b, bn gamma, bn beta). Running statistics are state,
    /// not parameters.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.sensing_phases.iter());
        if let Some(c) = &self.conv {
            out.extend(c.iter());
        }
        for (layer, bn) in self.layers.iter().zip(self.bns.iter()) {
            out.extend(layer.w.iter());
            out.extend(layer.b.iter());
            out.extend(bn.gamma.iter());
            out.extend(bn.beta.iter());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.sensing_phases.len();
        if let Some(c) = &self.conv {
            n += c.len();
        }
        for (layer, bn) in self.layers.iter().zip(self.bns.iter()) {
            n += layer.w.len() + layer.b.len() + bn.gamma.len() + bn.beta.len();
        }
        n
    }

    pub fn assign_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter vector length");
        let mut it = flat.iter();
        for v in self.sensing_phases.iter_mut() {
            *v = *it.next().unwrap();
        }
        if let Some(c) = &mut self.conv {
            for v in c.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        for (layer, bn) in self.layers.iter_mut().zip(self.bns.iter_mut()) {
            for v in layer.w.iter_mut() {
                *v = *it.next().unwrap();
            }
            for v in layer.b.iter_mut() {
                *v = *it.next().unwrap();
            }
            for v in bn.gamma.iter_mut() {
                *v = *it.next().unwrap();
            }
            for v in bn.beta.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
    }
}

/// ReLU sign pattern and kink distances from one forward pass, used by the
/// finite-difference oracle to discard coordinates that straddle a kink.
#[derive(Debug, Clone)]
pub struct SignProbe {
    pub relu_signs: Vec<bool>,
    pub min_abs_relu_preact: f64,
    pub min_abs_pre_norm: f64,
}

struct BnCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

struct FcCache {
    bn: Vec<BnCache>,
    bn_out: Vec<Array2<f64>>,
    preact: Vec<Array2<f64>>,
}

fn bn_forward(x: &Array2<f64>, bn: &super::BatchNorm, mode: BnMode) -> (Array2<f64>, BnCache) {
    let (mean, var) = match mode {
        BnMode::Batch => {
            let mean = x.mean_axis(Axis(0)).unwrap();
            let centered = x - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
            (mean, var)
        }
        BnMode::Frozen => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let x_hat = (x - &mean) * &inv_std;
    let out = &x_hat * &bn.gamma + &bn.beta;
    (
        out,
        BnCache {
            x_hat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    )
}

/// Returns (dx, dgamma, dbeta).
fn bn_backward(
    dy: &Array2<f64>,
    cache: &BnCache,
    bn: &super::BatchNorm,
    mode: BnMode,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgamma = (dy * &cache.x_hat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = dy * &bn.gamma;
    let dx = match mode {
        BnMode::Frozen => &dxhat * &cache.inv_std,
        BnMode::Batch => {
            let mean_dxhat = dxhat.mean_axis(Axis(0)).unwrap();
            let mean_dxhat_xhat = (&dxhat * &cache.x_hat).mean_axis(Axis(0)).unwrap();
            ((&dxhat - &mean_dxhat) - &(&cache.x_hat * &mean_dxhat_xhat)) * &cache.inv_std
        }
    };
    (dx, dgamma, dbeta)
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn fc_forward(
    model: &SuDnnModel,
    x0: Array2<f64>,
    mode: BnMode,
    probe: Option<&mut SignProbe>,
) -> (Array2<f64>, FcCache) {
    let last = model.layers.len() - 1;
    let mut cache = FcCache {
        bn: Vec::with_capacity(model.layers.len()),
        bn_out: Vec::with_capacity(model.layers.len()),
        preact: Vec::with_capacity(model.layers.len()),
    };
    let mut probe = probe;
    let mut x = x0;
    for (i, (layer, bn)) in model.layers.iter().zip(model.bns.iter()).enumerate() {
        let (z, bn_cache) = bn_forward(&x, bn, mode);
        let a = z.dot(&layer.w) + &layer.b;
        if i < last {
            if let Some(p) = probe.as_deref_mut() {
                for v in a.iter() {
                    p.relu_signs.push(*v > 0.0);
                    p.min_abs_relu_preact = p.min_abs_relu_preact.min(v.abs());
                }
            }
            x = relu(&a);
        } else {
            x = a.clone();
        }
        cache.bn.push(bn_cache);
        cache.bn_out.push(z);
        cache.preact.push(a);
    }
    (x, cache)
}

/// Returns (d_x0, per-layer grads, per-bn grads).
fn fc_backward(
    model: &SuDnnModel,
    cache: &FcCache,
    d_out: Array2<f64>,
    mode: BnMode,
) -> (Array2<f64>, Vec<(Array2<f64>, Array1<f64>)>, Vec<(Array1<f64>, Array1<f64>)>) {
    let l = model.layers.len();
    let mut layer_grads = vec![(Array2::zeros((0, 0)), Array1::zeros(0)); l];
    let mut bn_grads = vec![(Array1::zeros(0), Array1::zeros(0)); l];
    let mut d = d_out;
    for i in (0..l).rev() {
        if i < l - 1 {
            // gradient through the ReLU applied to preact[i]
            d = &d * &cache.preact[i].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        }
        let dw = cache.bn_out[i].t().dot(&d);
        let db = d.sum_axis(Axis(0));
        let dz = d.dot(&model.layers[i].w.t());
        let (dx, dgamma, dbeta) = bn_backward(&dz, &cache.bn[i], &model.bns[i], mode);
        layer_grads[i] = (dw, db);
        bn_grads[i] = (dgamma, dbeta);
        d = dx;
    }
    (d, layer_grads, bn_grads)
}

/// Per-frame complex combiner split into (cos, sin) parts.
fn frame_parts(model: &SuDnnModel, l: usize) -> (Array2<f64>, Array2<f64>) {
    let (_, n_rf, m) = model.sensing_phases.dim();
    let mut w_re = Array2::zeros((n_rf, m));
    let mut w_im = Array2::zeros((n_rf, m));
    for n in 0..n_rf {
        for mm in 0..m {
            let p = model.sensing_phases[[l, n, mm]];
            w_re[[n, mm]] = p.cos();
            w_im[[n, mm]] = p.sin();
        }
    }
    (w_re, w_im)
}

struct SensingCache {
    /// Per frame: received (B', N_RF) real and imaginary parts, where B' is
    /// B for flat mode and B*N_c for multicarrier.
    u_re: Vec<Array2<f64>>,
    u_im: Vec<Array2<f64>>,
    w_re: Vec<Array2<f64>>,
    w_im: Vec<Array2<f64>>,
}

/// y^(l) = W^(l) (sqrt(P_U) h + n) for every frame; rows of `u_*` are the
/// combined batch dimension.
fn sensing_forward(
    model: &SuDnnModel,
    u_re: Vec<Array2<f64>>,
    u_im: Vec<Array2<f64>>,
) -> (Vec<Array2<f64>>, Vec<Array2<f64>>, SensingCache) {
    let l_a = model.l_a();
    let mut y_re = Vec::with_capacity(l_a);
    let mut y_im = Vec::with_capacity(l_a);
    let mut w_res = Vec::with_capacity(l_a);
    let mut w_ims = Vec::with_capacity(l_a);
    for l in 0..l_a {
        let (w_re, w_im) = frame_parts(model, l);
        let wre_t = w_re.t();
        let wim_t = w_im.t();
        y_re.push(u_re[l].dot(&wre_t) - u_im[l].dot(&wim_t));
        y_im.push(u_re[l].dot(&wim_t) + u_im[l].dot(&wre_t));
        w_res.push(w_re);
        w_ims.push(w_im);
    }
    (
        y_re,
        y_im,
        SensingCache {
            u_re,
            u_im,
            w_re: w_res,
            w_im: w_ims,
        },
    )
}

/// Phase gradient for one frame given upstream complex gradients g on y:
/// d psi[n,m] = Im( conj(W[n,m]) * (G^T conj(U))[n,m] ).
fn sensing_phase_grad(
    g_re: &Array2<f64>,
    g_im: &Array2<f64>,
    cache: &SensingCache,
    l: usize,
) -> Array2<f64> {
    let s_re = g_re.t().dot(&cache.u_re[l]) + g_im.t().dot(&cache.u_im[l]);
    let s_im = g_im.t().dot(&cache.u_re[l]) - g_re.t().dot(&cache.u_im[l]);
    &cache.w_re[l] * &s_im - &cache.w_im[l] * &s_re
}

struct NormCache {
    pre_re: Array2<f64>,
    pre_im: Array2<f64>,
    rho: Array2<f64>,
    v_re: Array2<f64>,
    v_im: Array2<f64>,
}

fn norm_forward(out: &Array2<f64>, m: usize, probe: Option<&mut SignProbe>) -> NormCache {
    let pre_re = out.slice(s![.., 0..m]).to_owned();
    let pre_im = out.slice(s![.., m..2 * m]).to_owned();
    let rho = (&pre_re * &pre_re + &pre_im * &pre_im).mapv(f64::sqrt);
    if let Some(p) = probe {
        for r in rho.iter() {
            p.min_abs_pre_norm = p.min_abs_pre_norm.min(*r);
        }
    }
    let mut v_re = Array2::zeros(rho.dim());
    let mut v_im = Array2::zeros(rho.dim());
    for ((idx, &r), (&a, &b)) in rho.indexed_iter().zip(pre_re.iter().zip(pre_im.iter())) {
        if r == 0.0 {
            v_re[idx] = 1.0;
            v_im[idx] = 0.0;
        } else {
            v_re[idx] = a / r;
            v_im[idx] = b / r;
        }
    }
    NormCache {
        pre_re,
        pre_im,
        rho,
        v_re,
        v_im,
    }
}

/// Quotient-rule backward of v = x/|x| on real pairs; zero entries have zero
/// gradient by convention.
fn norm_backward(cache: &NormCache, dv_re: &Array2<f64>, dv_im: &Array2<f64>) -> Array2<f64> {
    let (b, m) = cache.rho.dim();
    let mut d_out = Array2::zeros((b, 2 * m));
    for i in 0..b {
        for j in 0..m {
            let r = cache.rho[[i, j]];
            if r == 0.0 {
                continue;
            }
            let a = cache.pre_re[[i, j]];
            let bb = cache.pre_im[[i, j]];
            let sfac = (dv_re[[i, j]] * bb - dv_im[[i, j]] * a) / (r * r * r);
            d_out[[i, j]] = sfac * bb;
            d_out[[i, j + m]] = -sfac * a;
        }
    }
    d_out
}

struct LossGrad {
    loss: f64,
    dv_re: Array2<f64>,
    dv_im: Array2<f64>,
}

/// Flat objective: mean_b -log2(1 + c |t_b|^2), t_b = h_b^H v_b.
fn loss_flat_batch(h_re: &Array2<f64>, h_im: &Array2<f64>, norm: &NormCache, c: f64) -> LossGrad {
    let b = h_re.nrows();
    let t_re = (&(h_re * &norm.v_re) + &(h_im * &norm.v_im)).sum_axis(Axis(1));
    let t_im = (&(h_re * &norm.v_im) - &(h_im * &norm.v_re)).sum_axis(Axis(1));
    let mut loss = 0.0;
    let mut dv_re = Array2::zeros(norm.v_re.dim());
    let mut dv_im = Array2::zeros(norm.v_im.dim());
    for i in 0..b {
        let g = t_re[i] * t_re[i] + t_im[i] * t_im[i];
        loss -= (1.0 + c * g).ln() / LN_2;
        let dg = -c / ((1.0 + c * g) * LN_2 * b as f64);
        let dt_re = 2.0 * t_re[i] * dg;
        let dt_im = 2.0 * t_im[i] * dg;
        for j in 0..h_re.ncols() {
            dv_re[[i, j]] = dt_re * h_re[[i, j]] - dt_im * h_im[[i, j]];
            dv_im[[i, j]] = dt_re * h_im[[i, j]] + dt_im * h_re[[i, j]];
        }
    }
    LossGrad {
        loss: loss / b as f64,
        dv_re,
        dv_im,
    }
}

/// Multicarrier objective: mean_b -sum_j log2(1 + c |t_bj|^2).
fn loss_ofdm_batch(h_re: &Array3<f64>, h_im: &Array3<f64>, norm: &NormCache, c: f64) -> LossGrad {
    let (b, m, n_c) = h_re.dim();
    let mut loss = 0.0;
    let mut dv_re = Array2::zeros((b, m));
    let mut dv_im = Array2::zeros((b, m));
    for j in 0..n_c {
        let hr = h_re.index_axis(Axis(2), j);
        let hi = h_im.index_axis(Axis(2), j);
        let t_re = (&(&hr * &norm.v_re) + &(&hi * &norm.v_im)).sum_axis(Axis(1));
        let t_im = (&(&hr * &norm.v_im) - &(&hi * &norm.v_re)).sum_axis(Axis(1));
        for i in 0..b {
            let g = t_re[i] * t_re[i] + t_im[i] * t_im[i];
            loss -= (1.0 + c * g).ln() / LN_2;
            let dg = -c / ((1.0 + c * g) * LN_2 * b as f64);
            let dt_re = 2.0 * t_re[i] * dg;
            let dt_im = 2.0 * t_im[i] * dg;
            for mm in 0..m {
                dv_re[[i, mm]] += dt_re * hr[[i, mm]] - dt_im * hi[[i, mm]];
                dv_im[[i, mm]] += dt_re * hi[[i, mm]] + dt_im * hr[[i, mm]];
            }
        }
    }
    LossGrad {
        loss: loss / b as f64,
        dv_re,
        dv_im,
    }
}

/// Everything the trainer needs from one batch: objective value, exact
/// gradients, and the per-layer batch statistics for the running averages.
pub struct BatchEval {
    pub loss: f64,
    pub grads: Gradients,
    pub bn_batch_stats: Vec<(Array1<f64>, Array1<f64>)>,
}

pub fn batch_loss_and_grad(
    model: &SuDnnModel,
    inputs: &BatchInputs,
    consts: &LossConsts,
    mode: BnMode,
) -> Result<BatchEval> {
    run_batch(model, inputs, consts, mode, None, true).map(|(eval, _)| eval)
}

/// Forward-only objective value (used by the finite-difference oracle).
pub fn batch_loss(
    model: &SuDnnModel,
    inputs: &BatchInputs,
    consts: &LossConsts,
    mode: BnMode,
) -> Result<f64> {
    run_batch(model, inputs, consts, mode, None, false).map(|(eval, _)| eval.loss)
}

/// Forward-only objective with the ReLU/normalization kink probe.
pub fn batch_loss_probed(
    model: &SuDnnModel,
    inputs: &BatchInputs,
    consts: &LossConsts,
    mode: BnMode,
) -> Result<(f64, SignProbe)> {
    let probe = SignProbe {
        relu_signs: Vec::new(),
        min_abs_relu_preact: f64::INFINITY,
        min_abs_pre_norm: f64::INFINITY,
    };
    let (eval, probe) = run_batch(model, inputs, consts, mode, Some(probe), false)?;
    Ok((eval.loss, probe.expect("probe requested")))
}

fn run_batch(
    model: &SuDnnModel,
    inputs: &BatchInputs,
    consts: &LossConsts,
    mode: BnMode,
    mut probe: Option<SignProbe>,
    want_grads: bool,
) -> Result<(BatchEval, Option<SignProbe>)> {
    match (model.mode, inputs) {
        (DnnMode::Flat, BatchInputs::Flat { h_re, h_im, n_re, n_im }) => {
            let b = h_re.nrows();
            let m = model.m();
            let l_a = model.l_a();
            let n_rf = model.n_rf();
            if h_re.ncols() != m || n_re.dim().1 != l_a {
                return Err(Error::DimMismatch("flat batch does not match model geometry".into()));
            }
            // sensing inputs u^(l) = sqrt(P_U) h + n^(l)
            let mut u_re = Vec::with_capacity(l_a);
            let mut u_im = Vec::with_capacity(l_a);
            for l in 0..l_a {
                u_re.push(h_re.mapv(|v| v * consts.sqrt_pu) + &n_re.index_axis(Axis(1), l));
                u_im.push(h_im.mapv(|v| v * consts.sqrt_pu) + &n_im.index_axis(Axis(1), l));
            }
            let (y_re, y_im, sensing) = sensing_forward(model, u_re, u_im);
            // x0 = [Re frames | Im frames]
            let rows = l_a * n_rf;
            let mut x0 = Array2::zeros((b, 2 * rows));
            for l in 0..l_a {
                x0.slice_mut(s![.., l * n_rf..(l + 1) * n_rf]).assign(&y_re[l]);
                x0.slice_mut(s![.., rows + l * n_rf..rows + (l + 1) * n_rf])
                    .assign(&y_im[l]);
            }
            let (out, fc_cache) = fc_forward(model, x0, mode, probe.as_mut());
            let norm = norm_forward(&out, m, probe.as_mut());
            let lg = loss_flat_batch(h_re, h_im, &norm, consts.c);
            if !want_grads {
                return Ok((
                    BatchEval {
                        loss: lg.loss,
                        grads: Gradients::zeros_like(model),
                        bn_batch_stats: Vec::new(),
                    },
                    probe,
                ));
            }
            let d_out = norm_backward(&norm, &lg.dv_re, &lg.dv_im);
            let (d_x0, layer_grads, bn_grads) = fc_backward(model, &fc_cache, d_out, mode);
            let mut sensing_grad = Array3::zeros(model.sensing_phases.dim());
            for l in 0..l_a {
                let g_re = d_x0.slice(s![.., l * n_rf..(l + 1) * n_rf]).to_owned();
                let g_im = d_x0
                    .slice(s![.., rows + l * n_rf..rows + (l + 1) * n_rf])
                    .to_owned();
                sensing_grad
                    .index_axis_mut(Axis(0), l)
                    .assign(&sensing_phase_grad(&g_re, &g_im, &sensing, l));
            }
            let grads = Gradients {
                sensing: sensing_grad,
                conv: None,
                layers: layer_grads,
                bns: bn_grads,
            };
            grads.check_finite()?;
            if !lg.loss.is_finite() {
                return Err(Error::NonFiniteGradient("loss".into()));
            }
            let bn_batch_stats = fc_cache
                .bn
                .iter()
                .map(|c| (c.batch_mean.clone(), c.batch_var.clone()))
                .collect();
            Ok((
                BatchEval {
                    loss: lg.loss,
                    grads,
                    bn_batch_stats,
                },
                probe,
            ))
        }
        (DnnMode::Ofdm, BatchInputs::Ofdm { h_re, h_im, n_re, n_im }) => {
            let (b, m, n_c) = h_re.dim();
            let l_a = model.l_a();
            let n_rf = model.n_rf();
            let filters = model.conv.as_ref().expect("multicarrier model has filters");
            let n_f = filters.nrows();
            if m != model.m() || n_c != model.n_c() || n_re.dim().1 != l_a {
                return Err(Error::DimMismatch("multicarrier batch does not match model geometry".into()));
            }
            // flatten (sample, subcarrier) into one combined batch dimension
            let bj = b * n_c;
            let mut u_re = Vec::with_capacity(l_a);
            let mut u_im = Vec::with_capacity(l_a);
            for l in 0..l_a {
                let mut ur = Array2::zeros((bj, m));
                let mut ui = Array2::zeros((bj, m));
                for i in 0..b {
                    for j in 0..n_c {
                        let row = i * n_c + j;
                        for mm in 0..m {
                            ur[[row, mm]] = consts.sqrt_pu * h_re[[i, mm, j]] + n_re[[i, l, mm, j]];
                            ui[[row, mm]] = consts.sqrt_pu * h_im[[i, mm, j]] + n_im[[i, l, mm, j]];
                        }
                    }
                }
                u_re.push(ur);
                u_im.push(ui);
            }
            let (y_re, y_im, sensing) = sensing_forward(model, u_re, u_im);
            // real representation rows: Re frames then Im frames
            let rows = l_a * n_rf;
            let r2 = 2 * rows;
            let mut rr_flat = Array2::zeros((b * r2, n_c));
            for l in 0..l_a {
                for i in 0..b {
                    for j in 0..n_c {
                        let src = i * n_c + j;
                        for n in 0..n_rf {
                            rr_flat[[i * r2 + l * n_rf + n, j]] = y_re[l][[src, n]];
                            rr_flat[[i * r2 + rows + l * n_rf + n, j]] = y_im[l][[src, n]];
                        }
                    }
                }
            }
            // conv: every filter dotted against every real-representation row
            let pre = rr_flat.dot(&filters.t());
            if let Some(p) = probe.as_mut() {
                for v in pre.iter() {
                    p.relu_signs.push(*v > 0.0);
                    p.min_abs_relu_preact = p.min_abs_relu_preact.min(v.abs());
                }
            }
            let feat = relu(&pre);
            let mut x0 = Array2::zeros((b, n_f * r2));
            for i in 0..b {
                for f in 0..n_f {
                    for r in 0..r2 {
                        x0[[i, f * r2 + r]] = feat[[i * r2 + r, f]];
                    }
                }
            }
            let (out, fc_cache) = fc_forward(model, x0, mode, probe.as_mut());
            let norm = norm_forward(&out, m, probe.as_mut());
            let lg = loss_ofdm_batch(h_re, h_im, &norm, consts.c);
            if !want_grads {
                return Ok((
                    BatchEval {
                        loss: lg.loss,
                        grads: Gradients::zeros_like(model),
                        bn_batch_stats: Vec::new(),
                    },
                    probe,
                ));
            }
            let d_out = norm_backward(&norm, &lg.dv_re, &lg.dv_im);
            let (d_x0, layer_grads, bn_grads) = fc_backward(model, &fc_cache, d_out, mode);
            // back through the feature concatenation and the conv ReLU
            let mut d_feat = Array2::zeros((b * r2, n_f));
            for i in 0..b {
                for f in 0..n_f {
                    for r in 0..r2 {
                        d_feat[[i * r2 + r, f]] = d_x0[[i, f * r2 + r]];
                    }
                }
            }
            let d_pre = &d_feat * &pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let d_filters = d_pre.t().dot(&rr_flat);
            let d_rr = d_pre.dot(filters);
            // back to complex per-frame gradients over the (sample, subcarrier) batch
            let mut sensing_grad = Array3::zeros(model.sensing_phases.dim());
            for l in 0..l_a {
                let mut g_re = Array2::zeros((bj, n_rf));
                let mut g_im = Array2::zeros((bj, n_rf));
                for i in 0..b {
                    for j in 0..n_c {
                        let dst = i * n_c + j;
                        for n in 0..n_rf {
                            g_re[[dst, n]] = d_rr[[i * r2 + l * n_rf + n, j]];
                            g_im[[dst, n]] = d_rr[[i * r2 + rows + l * n_rf + n, j]];
                        }
                    }
                }
                sensing_grad
                    .index_axis_mut(Axis(0), l)
                    .assign(&sensing_phase_grad(&g_re, &g_im, &sensing, l));
            }
            let grads = Gradients {
                sensing: sensing_grad,
                conv: Some(d_filters),
                layers: layer_grads,
                bns: bn_grads,
            };
            grads.check_finite()?;
            if !lg.loss.is_finite() {
                return Err(Error::NonFiniteGradient("loss".into()));
            }
            let bn_batch_stats = fc_cache
                .bn
                .iter()
                .map(|c| (c.batch_mean.clone(), c.batch_var.clone()))
                .collect();
            Ok((
                BatchEval {
                    loss: lg.loss,
                    grads,
                    bn_batch_stats,
                },
                probe,
            ))
        }
        _ => Err(Error::Invalid("batch mode does not match model mode".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny_flat() -> (SystemConfig, SuDnnModel) {
        let cfg = SystemConfig {
            m_h: 2,
            m_v: 2,
            n_rf: 2,
            k: 2,
            l: 3,
            l_a: 2,
            l_d: 1,
            ..SystemConfig::desk_flat()
        };
        let mut rng = stream(200, 1);
        let model = SuDnnModel::new_flat(&cfg, &[7, 5], &mut rng);
        (cfg, model)
    }

    fn random_flat_batch(cfg: &SystemConfig, b: usize, seed: u64) -> BatchInputs {
        let mut rng = stream(seed, 2);
        let samples: Vec<Array2<Complex64>> = (0..b)
            .map(|_| Array2::from_shape_fn((cfg.m(), 1), |_| crate::rng::sample_cn(&mut rng, 1.0)))
            .collect();
        let refs: Vec<&Array2<Complex64>> = samples.iter().collect();
        BatchInputs::flat(&refs, cfg.l_a, cfg.sigma2, &mut rng)
    }

    #[test]
    fn flat_batch_loss_matches_per_sample_forward() {
        // The batched frozen-BN forward must agree with the single-sample
        // inference path plus the public loss function.
        let (cfg, model) = tiny_flat();
        let consts = LossConsts::from_config(&cfg).unwrap();
        let b = 5;
        let inputs = random_flat_batch(&cfg, b, 201);
        let loss = batch_loss(&model, &inputs, &consts, BnMode::Frozen).unwrap();
        let (h_re, h_im, n_re, n_im) = match &inputs {
            BatchInputs::Flat { h_re, h_im, n_re, n_im } => (h_re, h_im, n_re, n_im),
            _ => unreachable!(),
        };
        let mut acc = 0.0;
        for i in 0..b {
            let rows = cfg.l_a * cfg.n_rf;
            let mut y = Array2::zeros((rows, 1));
            for l in 0..cfg.l_a {
                for n in 0..cfg.n_rf {
                    let mut s = Complex64::new(0.0, 0.0);
                    for mm in 0..cfg.m() {
                        let p = model.sensing_phases[[l, n, mm]];
                        let w = Complex64::new(p.cos(), p.sin());
                        let u = Complex64::new(
                            consts.sqrt_pu * h_re[[i, mm]] + n_re[[i, l, mm]],
                            consts.sqrt_pu * h_im[[i, mm]] + n_im[[i, l, mm]],
                        );
                        s += w * u;
                    }
                    y[[l * cfg.n_rf + n, 0]] = s;
                }
            }
            let v = model
                .precode_from_pilots(&crate::pilots::PilotObservation {
                    y,
                    phase: crate::pilots::PilotPhase::Analog,
                })
                .unwrap();
            let hk = Array1::from_shape_fn(cfg.m(), |mm| Complex64::new(h_re[[i, mm]], h_im[[i, mm]]));
            let mut one_user_cfg = cfg.clone();
            one_user_cfg.k = cfg.k; // same c constant as the batch objective
            acc += super::super::loss_flat(&[v], &[hk], &one_user_cfg).unwrap();
        }
        let want = acc / b as f64;
        assert!((loss - want).abs() < 1e-10, "batch {loss} vs per-sample {want}");
    }

    #[test]
    fn zero_channel_batch_has_zero_gradients() {
        let (cfg, model) = tiny_flat();
        let consts = LossConsts::from_config(&cfg).unwrap();
        let b = 4;
        let mut rng = stream(202, 1);
        let zeros: Vec<Array2<Complex64>> = (0..b).map(|_| Array2::zeros((cfg.m(), 1))).collect();
        let refs: Vec<&Array2<Complex64>> = zeros.iter().collect();
        let inputs = BatchInputs::flat(&refs, cfg.l_a, cfg.sigma2, &mut rng);
        let eval = batch_loss_and_grad(&model, &inputs, &consts, BnMode::Batch).unwrap();
        assert_eq!(eval.loss, 0.0);
        let (_, db_last) = &eval.grads.layers[model.layers.len() - 1];
        assert!(db_last.iter().all(|&v| v == 0.0), "output bias gradient must vanish");
        assert!(eval.grads.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sample_gradients_add_with_frozen_statistics() {
        let (cfg, model) = tiny_flat();
        let consts = LossConsts::from_config(&cfg).unwrap();
        let mut rng = stream(203, 1);
        let a = Array2::from_shape_fn((cfg.m(), 1), |_| crate::rng::sample_cn(&mut rng, 1.0));
        let noise_seed = 204;
        // batch {s, s} with the same per-sample noise realization
        let single = {
            let refs = vec![&a];
            let mut nrng = stream(noise_seed, 1);
            BatchInputs::flat(&refs, cfg.l_a, cfg.sigma2, &mut nrng)
        };
        let dup = match &single {
            BatchInputs::Flat { h_re, h_im, n_re, n_im } => {
                let stack2 = |x: &Array2<f64>| {
                    let mut out = Array2::zeros((2, x.ncols()));
                    out.row_mut(0).assign(&x.row(0));
                    out.row_mut(1).assign(&x.row(0));
                    out
                };
                let stack3 = |x: &Array3<f64>| {
                    let (_, l, m) = x.dim();
                    let mut out = Array3::zeros((2, l, m));
                    out.index_axis_mut(Axis(0), 0).assign(&x.index_axis(Axis(0), 0));
                    out.index_axis_mut(Axis(0), 1).assign(&x.index_axis(Axis(0), 0));
                    out
                };
                BatchInputs::Flat {
                    h_re: stack2(h_re),
                    h_im: stack2(h_im),
                    n_re: stack3(n_re),
                    n_im: stack3(n_im),
                }
            }
            _ => unreachable!(),
        };
        let g1 = batch_loss_and_grad(&model, &single, &consts, BnMode::Frozen).unwrap();
        let g2 = batch_loss_and_grad(&model, &dup, &consts, BnMode::Frozen).unwrap();
        // batch means: sum-gradient of the duplicate batch is 2x the single
        // sample, i.e. 2 * grad_mean(dup) == 2 * grad_mean(single)
        let f1 = g1.grads.flatten();
        let f2 = g2.grads.flatten();
        for (a1, a2) in f1.iter().zip(f2.iter()) {
            let sum_dup = 2.0 * a2; // B * grad_mean, B = 2
            let sum_single = 2.0 * a1; // 2 * (1 * grad_mean)
            assert!(
                (sum_dup - sum_single).abs() <= 1e-12 * sum_single.abs().max(1e-12),
                "duplicated-sample gradient is not twice the single-sample one"
            );
        }
        assert!((g2.loss - g1.loss).abs() < 1e-12);
    }
}
