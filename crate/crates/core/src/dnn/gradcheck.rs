//! Central finite-difference verification of the analytic gradients.
//!
//! The oracle re-evaluates the batch objective at p +- step for every
//! parameter, independent of the backward pass it checks. Coordinates whose
//! perturbation flips any ReLU sign (or that sit within 1e-6 of a ReLU or
//! normalization kink at the base point) are excluded: a central difference
//! across a kink measures the wrong one-sided slope.

use super::batch::{batch_loss_and_grad, batch_loss_probed, BatchInputs, BnMode, LossConsts};
use super::SuDnnModel;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub checked: usize,
    pub skipped: usize,
}

const KINK_MARGIN: f64 = 1e-6;

/// Compare analytic gradients against central differences with the given
/// step. Relative error uses max(|analytic|, |numeric|, 1) as denominator so
/// near-zero gradients are judged absolutely.
pub fn finite_difference_check(
    model: &SuDnnModel,
    inputs: &BatchInputs,
    consts: &LossConsts,
    mode: BnMode,
    step: f64,
) -> Result<GradCheckReport> {
    let eval = batch_loss_and_grad(model, inputs, consts, mode)?;
    let analytic = eval.grads.flatten();
    let (_, base_probe) = batch_loss_probed(model, inputs, consts, mode)?;
    let base_params = model.flatten_params();
    assert_eq!(analytic.len(), base_params.len());

    let mut work = model.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        checked: 0,
        skipped: 0,
    };
    let base_near_kink =
        base_probe.min_abs_relu_preact < KINK_MARGIN || base_probe.min_abs_pre_norm < KINK_MARGIN;
    let mut params = base_params.clone();
    for i in 0..params.len() {
        params[i] = base_params[i] + step;
        work.assign_params(&params);
        let (loss_plus, probe_plus) = batch_loss_probed(&work, inputs, consts, mode)?;
        params[i] = base_params[i] - step;
        work.assign_params(&params);
        let (loss_minus, probe_minus) = batch_loss_probed(&work, inputs, consts, mode)?;
        params[i] = base_params[i];

        let crossed = probe_plus.relu_signs != base_probe.relu_signs
            || probe_minus.relu_signs != base_probe.relu_signs;
        if crossed || base_near_kink {
            report.skipped += 1;
            continue;
        }
        let numeric = (loss_plus - loss_minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = i;
        }
        report.checked += 1;
    }
    work.assign_params(&base_params);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SystemConfig;
    use crate::dnn::SuDnnModel;
    use crate::rng::{sample_cn, stream};
    use ndarray::Array2;
    use num_complex::Complex64;

    fn tiny_flat_cfg() -> SystemConfig {
        SystemConfig {
            m_h: 2,
            m_v: 2,
            n_rf: 2,
            k: 2,
            l: 3,
            l_a: 2,
            l_d: 1,
            ..SystemConfig::desk_flat()
        }
    }

    fn tiny_ofdm_cfg() -> SystemConfig {
        SystemConfig {
            m_h: 2,
            m_v: 2,
            n_rf: 2,
            k: 2,
            l: 3,
            l_a: 2,
            l_d: 1,
            n_c: 4,
            d_max: 2,
            ..SystemConfig::desk_ofdm()
        }
    }

    fn channels(cfg: &SystemConfig, n: usize, seed: u64) -> Vec<Array2<Complex64>> {
        let mut rng = stream(seed, 1);
        (0..n)
            .map(|_| Array2::from_shape_fn((cfg.m(), cfg.n_c), |_| sample_cn(&mut rng, 1.0)))
            .collect()
    }

    #[test]
    fn flat_gradients_match_finite_differences() {
        let cfg = tiny_flat_cfg();
        let consts = LossConsts::from_config(&cfg).unwrap();
        for seed in 0..2u64 {
            let mut rng = stream(300 + seed, 1);
            let model = SuDnnModel::new_flat(&cfg, &[7, 5], &mut rng);
            let samples = channels(&cfg, 3, 310 + seed);
            let refs: Vec<&Array2<Complex64>> = samples.iter().collect();
            let inputs = BatchInputs::flat(&refs, cfg.l_a, cfg.sigma2, &mut rng);
            for mode in [BnMode::Batch, BnMode::Frozen] {
                let rep = finite_difference_check(&model, &inputs, &consts, mode, 1e-5).unwrap();
                assert!(rep.checked > rep.skipped, "too many skipped: {rep:?}");
                assert!(
                    rep.max_rel_err < 1e-4,
                    "mode {mode:?}: max rel err {} at param {}",
                    rep.max_rel_err,
                    rep.worst_param
                );
            }
        }
    }

    #[test]
    fn ofdm_gradients_match_finite_differences() {
        let cfg = tiny_ofdm_cfg();
        let consts = LossConsts::from_config(&cfg).unwrap();
        let mut rng = stream(320, 1);
        let model = SuDnnModel::new_ofdm(&cfg, &[7, 5], 2, &mut rng);
        let samples = channels(&cfg, 3, 321);
        let refs: Vec<&Array2<Complex64>> = samples.iter().collect();
        let inputs = BatchInputs::ofdm(&refs, cfg.l_a, cfg.sigma2, &mut rng);
        let rep = finite_difference_check(&model, &inputs, &consts, BnMode::Batch, 1e-5).unwrap();
        assert!(rep.checked > rep.skipped, "too many skipped: {rep:?}");
        assert!(
            rep.max_rel_err < 1e-4,
            "max rel err {} at param {}",
            rep.max_rel_err,
            rep.worst_param
        );
    }
}
