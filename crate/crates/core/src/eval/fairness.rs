//! Multi-round fairness simulation with proportional-fair style weights.
//!
//! Each slot schedules K users uniformly at random from the population,
//! draws fresh small-scale channels scaled by a pluggable per-user path
//! gain, runs the full pipeline, and accumulates rates. The reported weight
//! of a user is the reciprocal of its long-run average rate (over all slots,
//! counting unscheduled slots as zero rate).

use super::{run_pipeline, sum_rate};
use crate::channel::generate_realization;
use crate::config::SystemConfig;
use crate::digital::DigitalScheme;
use crate::dnn::SuDnnModel;
use crate::error::{Error, Result};
use crate::rng::{purpose, substream, TrialRng};
use rand::seq::index::sample;

/// Long-term per-user power gain applied to the small-scale channel.
pub trait PathGainModel {
    fn gain(&self, user: usize) -> f64;
}

/// Default hook: every user at unit gain.
pub struct UnitGain;

impl PathGainModel for UnitGain {
    fn gain(&self, _user: usize) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FairnessUser {
    pub user: usize,
    pub times_scheduled: usize,
    /// Cumulative rate divided by the number of rounds.
    pub average_rate: f64,
    /// 1 / average_rate, infinite if the user never earned rate.
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct FairnessReport {
    pub rounds: usize,
    pub per_user: Vec<FairnessUser>,
    /// Weighted sum rate of each round under the weights in force before it.
    pub weighted_sums: Vec<f64>,
}

impl FairnessReport {
    /// Sorted per-user average rates: the empirical CDF sample points.
    pub fn cdf_samples(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.per_user.iter().map(|u| u.average_rate).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }
}

/// Run `rounds` scheduling slots over a `population` of users.
pub fn weighted_round_sim(
    cfg: &SystemConfig,
    model: &SuDnnModel,
    population: usize,
    rounds: usize,
    gains: &dyn PathGainModel,
    digital: DigitalScheme,
) -> Result<FairnessReport> {
    if population < cfg.k {
        return Err(Error::Invalid(format!(
            "population {population} smaller than K = {}",
            cfg.k
        )));
    }
    if rounds == 0 {
        return Err(Error::Invalid("fairness simulation needs rounds >= 1".into()));
    }
    let mut cumulative = vec![0.0f64; population];
    let mut scheduled = vec![0usize; population];
    let mut weighted_sums = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let mut srng = substream(cfg.seed, purpose::SCHEDULER, t as u64);
        let picks: Vec<usize> = sample(&mut srng, population, cfg.k).into_iter().collect();
        let mut crng = substream(cfg.seed, purpose::EVAL_CHANNEL, t as u64);
        let mut h = generate_realization(cfg, &mut crng).h;
        for (slot, &user) in picks.iter().enumerate() {
            let g = gains.gain(user).sqrt();
            h[slot].mapv_inplace(|z| z * g);
        }
        let trial = TrialRng::new(cfg.seed, t as u64);
        let out = run_pipeline(cfg, model, &h, &trial, digital)?;
        // weights in force before this round: 1 / average rate so far
        let weights: Vec<f64> = picks
            .iter()
            .map(|&u| {
                if t == 0 || cumulative[u] == 0.0 {
                    1.0
                } else {
                    t as f64 / cumulative[u]
                }
            })
            .collect();
        let weighted = sum_rate(&h, &out.v_rf, &out.v_d.per_subcarrier, cfg, Some(&weights))?;
        weighted_sums.push(weighted.weighted_sum.unwrap());
        for (slot, &user) in picks.iter().enumerate() {
            cumulative[user] += out.report.per_user[slot];
            scheduled[user] += 1;
        }
    }
    let per_user = (0..population)
        .map(|u| {
            let average_rate = cumulative[u] / rounds as f64;
            FairnessUser {
                user: u,
                times_scheduled: scheduled[u],
                average_rate,
                weight: if average_rate > 0.0 {
                    1.0 / average_rate
                } else {
                    f64::INFINITY
                },
            }
        })
        .collect();
    Ok(FairnessReport {
        rounds,
        per_user,
        weighted_sums,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sim_cfg() -> SystemConfig {
        SystemConfig {
            l: 3,
            l_a: 2,
            l_d: 1,
            seed: 17,
            ..SystemConfig::desk_flat()
        }
    }

    fn untrained(cfg: &SystemConfig) -> SuDnnModel {
        let mut rng = stream(cfg.seed, 900);
        SuDnnModel::new_flat(cfg, &[16, 12], &mut rng)
    }

    #[test]
    fn single_user_population_gets_every_slot() {
        let mut cfg = sim_cfg();
        cfg.k = 1;
        let model = untrained(&cfg);
        let rep = weighted_round_sim(&cfg, &model, 1, 50, &UnitGain, DigitalScheme::Zf).unwrap();
        assert_eq!(rep.per_user.len(), 1);
        assert_eq!(rep.per_user[0].times_scheduled, 50);
        let cdf = rep.cdf_samples();
        assert_eq!(cdf.len(), 1);
        assert!((cdf[0] - rep.per_user[0].average_rate).abs() < 1e-15);
    }

    #[test]
    fn identical_users_end_up_with_similar_averages() {
        let cfg = sim_cfg();
        let model = untrained(&cfg);
        let rep = weighted_round_sim(&cfg, &model, 8, 10_000, &UnitGain, DigitalScheme::Zf).unwrap();
        let rates: Vec<f64> = rep.per_user.iter().map(|u| u.average_rate).collect();
        let max = rates.iter().cloned().fold(f64::MIN, f64::max);
        let min = rates.iter().cloned().fold(f64::MAX, f64::min);
        assert!(min > 0.0);
        assert!(max / min < 1.2, "max/min = {}", max / min);
    }

    #[test]
    fn weights_are_reciprocal_average_rates() {
        let cfg = sim_cfg();
        let model = untrained(&cfg);
        let rep = weighted_round_sim(&cfg, &model, 6, 40, &UnitGain, DigitalScheme::Zf).unwrap();
        for u in &rep.per_user {
            if u.average_rate > 0.0 {
                assert!((u.weight - 1.0 / u.average_rate).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn path_gain_hook_shifts_rates() {
        struct Lopsided;
        impl PathGainModel for Lopsided {
            fn gain(&self, user: usize) -> f64 {
                if user == 0 {
                    4.0
                } else {
                    0.25
                }
            }
        }
        let cfg = sim_cfg();
        let model = untrained(&cfg);
        let rep = weighted_round_sim(&cfg, &model, 6, 2000, &Lopsided, DigitalScheme::Zf).unwrap();
        let strong = rep.per_user[0].average_rate;
        let weak_mean: f64 = rep.per_user[1..].iter().map(|u| u.average_rate).sum::<f64>() / 5.0;
        assert!(strong > weak_mean, "strong {strong} vs weak {weak_mean}");
    }

    #[test]
    fn population_below_k_is_rejected() {
        let cfg = sim_cfg();
        let model = untrained(&cfg);
        assert!(weighted_round_sim(&cfg, &model, 2, 5, &UnitGain, DigitalScheme::Zf).is_err());
    }
}
