//! Adam trainer with validation snapshotting.
//!
//! K-user channel realizations are reshaped into single-user samples and
//! shuffled each epoch; antenna noise is redrawn per minibatch so the network
//! learns the map from noisy pilots, not from one noise draw. The learning
//! rate starts at `lr0` and halves every `lr_halve_every` epochs. Validation
//! noise is drawn once, so the per-epoch validation losses are comparable and
//! the best-validation snapshot is well defined. A non-finite loss or
//! gradient aborts training and returns the last good snapshot.

use super::batch::{batch_loss, batch_loss_and_grad, BatchInputs, BnMode, LossConsts};
use super::{DnnMode, SuDnnModel};
use crate::channel::MultiUserChannel;
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::rng::{purpose, substream};
use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Hidden dense widths (the 2M output head is implied).
    pub widths: Vec<usize>,
    /// Convolution filters for multicarrier models.
    pub n_f: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_halve_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
}

impl TrainConfig {
    /// Full-scale profile: widths 1024/512/256, 16 filters, batches of 500,
    /// 1e-3 learning rate halved every 100 epochs.
    pub fn paper() -> Self {
        TrainConfig {
            widths: vec![1024, 512, 256],
            n_f: 16,
            batch_size: 500,
            epochs: 1000,
            lr0: 1e-3,
            lr_halve_every: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: 0.99,
        }
    }

    /// Desk-scale profile: widths scaled to a 16-antenna array, 100 epochs.
    pub fn desk() -> Self {
        TrainConfig {
            widths: vec![256, 128, 64],
            epochs: 100,
            ..Self::paper()
        }
    }

    /// Learning rate in effect at a (0-indexed) epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr0 / f64::powi(2.0, (epoch / self.lr_halve_every) as i32)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation snapshot.
    pub model: SuDnnModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation loss of the untrained network on the same validation set.
    pub initial_val_loss: f64,
    /// True when training aborted on a non-finite loss/gradient and the
    /// returned model is the last good checkpoint.
    pub diverged: bool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, tc: &TrainConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: tc.adam_beta1,
            beta2: tc.adam_beta2,
            eps: tc.adam_eps,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Single-user views into a set of K-user realizations.
fn flatten_users(set: &[MultiUserChannel]) -> Vec<&Array2<Complex64>> {
    set.iter().flat_map(|users| users.iter()).collect()
}

fn build_inputs(
    mode: DnnMode,
    samples: &[&Array2<Complex64>],
    l_a: usize,
    sigma2: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> BatchInputs {
    match mode {
        DnnMode::Flat => BatchInputs::flat(samples, l_a, sigma2, rng),
        DnnMode::Ofdm => BatchInputs::ofdm(samples, l_a, sigma2, rng),
    }
}

/// Train one tied single-user network on `train_set`, snapshotting the best
/// validation loss. The two sets must be disjoint; the mode (flat vs
/// multicarrier) follows `cfg.n_c`.
pub fn train(
    cfg: &SystemConfig,
    tc: &TrainConfig,
    train_set: &[MultiUserChannel],
    val_set: &[MultiUserChannel],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let consts = LossConsts::from_config(cfg)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Invalid("training and validation sets must be non-empty".into()));
    }
    let mode = if cfg.is_flat() { DnnMode::Flat } else { DnnMode::Ofdm };
    let mut init_rng = substream(cfg.seed, purpose::INIT, 0);
    let mut model = match mode {
        DnnMode::Flat => SuDnnModel::new_flat(cfg, &tc.widths, &mut init_rng),
        DnnMode::Ofdm => SuDnnModel::new_ofdm(cfg, &tc.widths, tc.n_f, &mut init_rng),
    };

    let train_samples = flatten_users(train_set);
    let val_samples = flatten_users(val_set);
    let mut val_noise_rng = substream(cfg.seed, purpose::VAL_NOISE, 0);
    let val_inputs = build_inputs(mode, &val_samples, cfg.l_a, cfg.sigma2, &mut val_noise_rng);

    let initial_val_loss = batch_loss(&model, &val_inputs, &consts, BnMode::Frozen)?;

    let mut params = model.flatten_params();
    let mut adam = Adam::new(params.len(), tc);
    let mut shuffle_rng = substream(cfg.seed, purpose::SHUFFLE, 0);
    let mut noise_rng = substream(cfg.seed, purpose::TRAIN_NOISE, 0);

    let mut log = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64, SuDnnModel)> = None;
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    for epoch in 0..tc.epochs {
        let lr = tc.lr_at_epoch(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&Array2<Complex64>> = chunk.iter().map(|&i| train_samples[i]).collect();
            let inputs = build_inputs(mode, &batch, cfg.l_a, cfg.sigma2, &mut noise_rng);
            let eval = match batch_loss_and_grad(&model, &inputs, &consts, BnMode::Batch) {
                Ok(e) => e,
                Err(Error::NonFiniteGradient(_)) => {
                    return finish_diverged(best, log, initial_val_loss, epoch);
                }
                Err(e) => return Err(e),
            };
            // running statistics, exponential moving average
            for (bn, (mean, var)) in model.bns.iter_mut().zip(eval.bn_batch_stats.iter()) {
                for d in 0..bn.running_mean.len() {
                    bn.running_mean[d] = tc.bn_momentum * bn.running_mean[d] + (1.0 - tc.bn_momentum) * mean[d];
                    bn.running_var[d] = tc.bn_momentum * bn.running_var[d] + (1.0 - tc.bn_momentum) * var[d];
                }
            }
            adam.step(&mut params, &eval.grads.flatten(), lr);
            model.assign_params(&params);
            epoch_loss += eval.loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = epoch_loss / seen as f64;
        let val_loss = batch_loss(&model, &val_inputs, &consts, BnMode::Frozen)?;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return finish_diverged(best, log, initial_val_loss, epoch);
        }
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if best.as_ref().map_or(true, |(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, model.clone()));
        }
    }

    let (best_epoch, best_val_loss, best_model) =
        best.ok_or(Error::Diverged(0))?;
    Ok(TrainOutcome {
        model: best_model,
        log,
        best_epoch,
        best_val_loss,
        initial_val_loss,
        diverged: false,
    })
}

fn finish_diverged(
    best: Option<(usize, f64, SuDnnModel)>,
    log: Vec<EpochRecord>,
    initial_val_loss: f64,
    epoch: usize,
) -> Result<TrainOutcome> {
    match best {
        Some((best_epoch, best_val_loss, model)) => Ok(TrainOutcome {
            model,
            log,
            best_epoch,
            best_val_loss,
            initial_val_loss,
            diverged: true,
        }),
        None => Err(Error::Diverged(epoch)),
    }
}
