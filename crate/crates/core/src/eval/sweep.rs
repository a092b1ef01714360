//! Pilot-allocation search: one model per analog budget, mean rate per split.

use super::{evaluate_scheme, mean_sum_rate, EvalOptions, Scheme};
use crate::config::SystemConfig;
use crate::digital::DigitalScheme;
use crate::dnn::SuDnnModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    pub l_a: usize,
    pub l_d: usize,
    pub mean_sum_rate: f64,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Index into `rows` of the best split.
    pub best: usize,
}

impl SweepTable {
    pub fn best_row(&self) -> SweepRow {
        self.rows[self.best]
    }
}

/// Search every split L = L_a + L_d with L_d >= 1, training one model per
/// analog budget via the supplied hook and scoring it by mean sum rate over
/// `opts.trials` evaluation trials.
pub fn sweep_pilot_allocation(
    cfg: &SystemConfig,
    trainer: &mut dyn FnMut(&SystemConfig) -> Result<SuDnnModel>,
    opts: &EvalOptions,
    digital: DigitalScheme,
) -> Result<SweepTable> {
    if cfg.l < 2 {
        return Err(Error::Invalid("pilot sweep needs L >= 2".into()));
    }
    let mut rows = Vec::with_capacity(cfg.l - 1);
    for l_a in 1..cfg.l {
        let split_cfg = cfg.clone().with_split(l_a, cfg.l - l_a);
        split_cfg.validate()?;
        let model = trainer(&split_cfg)?;
        let eval_opts = EvalOptions { digital, ..*opts };
        let reports = evaluate_scheme(&split_cfg, Scheme::Proposed, Some(&model), &eval_opts)?;
        rows.push(SweepRow {
            l_a,
            l_d: cfg.l - l_a,
            mean_sum_rate: mean_sum_rate(&reports),
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.mean_sum_rate.partial_cmp(&b.1.mean_sum_rate).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok(SweepTable { rows, best })
}
