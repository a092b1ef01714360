//! Shared fixtures for the acceptance suite: desk-scale configs and a
//! process-wide cache of trained models so criteria can share them.

use beamlab::channel::generate_channel_set;
use beamlab::dnn::{train, TrainConfig, TrainOutcome};
use beamlab::SystemConfig;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Seed for model training (dataset + init); evaluation seeds are disjoint.
pub const TRAIN_SEED: u64 = 42;

/// Desk profile: 4x4 UPA, 4 RF chains and users, frequency-flat.
pub fn desk_flat(l_a: usize, l_d: usize) -> SystemConfig {
    SystemConfig {
        seed: TRAIN_SEED,
        ..SystemConfig::desk_flat()
    }
    .with_split(l_a, l_d)
}

/// Desk multicarrier profile: 16 subcarriers, delay spread 4.
pub fn desk_ofdm(l_a: usize, l_d: usize) -> SystemConfig {
    SystemConfig {
        seed: TRAIN_SEED,
        ..SystemConfig::desk_ofdm()
    }
    .with_split(l_a, l_d)
}

/// Desk training profile: widths 256/128/64, minibatches of 500, 100 epochs.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig::desk()
}

/// Single-user training samples at desk scale.
pub const TRAIN_SAMPLES: usize = 20_000;
pub const VAL_SAMPLES: usize = 1_000;

fn cache_key(cfg: &SystemConfig) -> String {
    // every field that influences training
    format!(
        "m{}x{} nrf{} k{} nc{} la{} lp{} dmax{} pu{:.6e} pd{:.6e} s2{:.6e} seed{}",
        cfg.m_h, cfg.m_v, cfg.n_rf, cfg.k, cfg.n_c, cfg.l_a, cfg.l_p, cfg.d_max, cfg.p_u, cfg.p_d,
        cfg.sigma2, cfg.seed
    )
}

type Cell = Arc<Mutex<Option<Arc<TrainOutcome>>>>;

fn cache() -> &'static Mutex<HashMap<String, Cell>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Cell>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Train (or fetch) the desk model for this config. Training is deterministic
/// in the config seed, so the cache never changes results, only wall time.
pub fn trained(cfg: &SystemConfig) -> Arc<TrainOutcome> {
    let key = cache_key(cfg);
    let cell = {
        let mut map = cache().lock().unwrap();
        map.entry(key).or_insert_with(|| Arc::new(Mutex::new(None))).clone()
    };
    let mut slot = cell.lock().unwrap();
    if let Some(outcome) = slot.as_ref() {
        return outcome.clone();
    }
    let train_r = TRAIN_SAMPLES.div_ceil(cfg.k);
    let val_r = VAL_SAMPLES.div_ceil(cfg.k);
    let set = generate_channel_set(cfg, train_r + val_r, cfg.seed);
    let (train_set, val_set) = set.split_at(train_r);
    let outcome = Arc::new(
        train(cfg, &desk_train_config(), train_set, val_set).expect("desk training succeeds"),
    );
    *slot = Some(outcome.clone());
    outcome
}

/// Print the per-criterion verdict line before asserting, so a failing run
/// still reports every criterion it reached.
pub fn verdict(criterion: &str, pass: bool, details: &str) {
    println!(
        "ACCEPTANCE {criterion}: {} — {details}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {details}");
}
