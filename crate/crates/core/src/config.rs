//! Scenario configuration.
//!
//! A [`SystemConfig`] holds every constant that defines one simulation
//! scenario: array geometry, RF chains, users, subcarriers, pilot budget,
//! powers, noise, and phase-shifter resolution. Configs load from flat JSON
//! documents whose keys are exactly the field names below; missing keys fall
//! back to the full-scale defaults (64-antenna UPA, 128 subcarriers).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// All scenario constants shared by every module.
///
/// `M = M_h * M_v` is derived via [`SystemConfig::m`]. `Q = 0` means
/// infinite-resolution phase shifters; `Q >= 2` selects the discrete grid
/// `{2*pi*q/Q}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// Antennas per horizontal UPA axis.
    #[serde(rename = "M_h")]
    pub m_h: usize,
    /// Antennas per vertical UPA axis.
    #[serde(rename = "M_v")]
    pub m_v: usize,
    /// RF chains at the base station.
    #[serde(rename = "N_RF")]
    pub n_rf: usize,
    /// Single-antenna users served per slot (K <= N_RF).
    #[serde(rename = "K")]
    pub k: usize,
    /// OFDM subcarriers; 1 selects the frequency-flat special case.
    #[serde(rename = "N_c")]
    pub n_c: usize,
    /// Total uplink pilot frames, L = L_a + L_d.
    #[serde(rename = "L")]
    pub l: usize,
    /// Pilot frames allocated to analog precoder sensing.
    #[serde(rename = "L_a")]
    pub l_a: usize,
    /// Pilot frames allocated to equivalent-channel estimation.
    #[serde(rename = "L_d")]
    pub l_d: usize,
    /// Propagation paths per user.
    #[serde(rename = "L_p")]
    pub l_p: usize,
    /// Maximum delay spread in samples (taps run 0..=d_max).
    pub d_max: usize,
    /// Sampling period in microseconds.
    #[serde(rename = "T_s")]
    pub t_s: f64,
    /// Raised-cosine roll-off factor.
    pub roll_off: f64,
    /// Uplink per-frame transmit power (linear).
    #[serde(rename = "P_U")]
    pub p_u: f64,
    /// Downlink per-subcarrier power budget (linear).
    #[serde(rename = "P_D")]
    pub p_d: f64,
    /// Noise variance (linear). Zero is allowed for noiseless diagnostics.
    pub sigma2: f64,
    /// Antenna spacing in wavelengths.
    pub delta_over_lambda: f64,
    /// Phase-shifter levels; 0 = infinite resolution.
    #[serde(rename = "Q")]
    pub q: u32,
    /// RNG seed for every derived stream.
    pub seed: u64,
}

impl Default for SystemConfig {
    /// Full-scale multicarrier defaults: 8x8 UPA, 4 RF chains and users,
    /// 128 subcarriers, raised cosine with roll-off 0.8, 10 dB uplink and
    /// downlink SNR.
    fn default() -> Self {
        SystemConfig {
            m_h: 8,
            m_v: 8,
            n_rf: 4,
            k: 4,
            n_c: 128,
            l: 8,
            l_a: 6,
            l_d: 2,
            l_p: 4,
            d_max: 4,
            t_s: 1.0 / 1760.0,
            roll_off: 0.8,
            p_u: 10.0,
            p_d: 10.0,
            sigma2: 1.0,
            delta_over_lambda: 0.5,
            q: 0,
            seed: 0,
        }
    }
}

impl SystemConfig {
    /// Full-scale frequency-flat variant (d_max = 0, single subcarrier).
    pub fn paper_flat() -> Self {
        SystemConfig {
            n_c: 1,
            d_max: 0,
            ..Self::default()
        }
    }

    /// Desk-scale flat profile: 4x4 UPA, single subcarrier.
    pub fn desk_flat() -> Self {
        SystemConfig {
            m_h: 4,
            m_v: 4,
            n_c: 1,
            d_max: 0,
            ..Self::default()
        }
    }

    /// Desk-scale multicarrier profile: 4x4 UPA, 16 subcarriers.
    pub fn desk_ofdm() -> Self {
        SystemConfig {
            m_h: 4,
            m_v: 4,
            n_c: 16,
            d_max: 4,
            ..Self::default()
        }
    }

    /// Total antenna count M = M_h * M_v.
    pub fn m(&self) -> usize {
        self.m_h * self.m_v
    }

    pub fn is_flat(&self) -> bool {
        self.n_c == 1
    }

    /// Uplink SNR in dB, 10*log10(P_U / sigma2).
    pub fn snr_ul_db(&self) -> f64 {
        10.0 * (self.p_u / self.sigma2).log10()
    }

    /// Downlink SNR in dB, 10*log10(P_D / sigma2).
    pub fn snr_dl_db(&self) -> f64 {
        10.0 * (self.p_d / self.sigma2).log10()
    }

    /// Set P_U so the uplink SNR equals `db` at the current sigma2.
    pub fn set_snr_ul_db(&mut self, db: f64) {
        self.p_u = self.sigma2 * 10f64.powf(db / 10.0);
    }

    /// Set P_D so the downlink SNR equals `db` at the current sigma2.
    pub fn set_snr_dl_db(&mut self, db: f64) {
        self.p_d = self.sigma2 * 10f64.powf(db / 10.0);
    }

    /// Change the pilot split, keeping L = L_a + L_d.
    pub fn with_split(mut self, l_a: usize, l_d: usize) -> Self {
        self.l_a = l_a;
        self.l_d = l_d;
        self.l = l_a + l_d;
        self
    }

    /// Validate every structural invariant, reporting the violated relation.
    ///
    /// sigma2 = 0 is accepted so that noiseless end-to-end checks can run;
    /// operations that divide by sigma2 (the training losses) reject it at
    /// their own boundary.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.m_h == 0 || self.m_v == 0 {
            return fail("M_h >= 1 and M_v >= 1 violated");
        }
        if self.l_a < 1 {
            return fail("L_a >= 1 violated");
        }
        if self.l_d < 1 {
            return fail("L_d >= 1 violated");
        }
        if self.l_a + self.l_d != self.l {
            return fail("L_a + L_d = L violated");
        }
        if self.k == 0 || self.k > self.n_rf {
            return fail("K <= N_RF violated");
        }
        if self.n_c == 0 {
            return fail("N_c >= 1 violated");
        }
        if self.d_max >= self.n_c {
            return fail("d_max < N_c violated");
        }
        if self.l_p == 0 {
            return fail("L_p >= 1 violated");
        }
        if !(self.p_u > 0.0) || !(self.p_d > 0.0) {
            return fail("P_U > 0 and P_D > 0 violated");
        }
        if !(self.sigma2 >= 0.0) {
            return fail("sigma2 >= 0 violated");
        }
        if !(self.t_s > 0.0) {
            return fail("T_s > 0 violated");
        }
        if !(self.roll_off > 0.0 && self.roll_off <= 1.0) {
            return fail("0 < roll_off <= 1 violated");
        }
        if !(self.delta_over_lambda > 0.0) {
            return fail("delta_over_lambda > 0 violated");
        }
        if self.q == 1 {
            return fail("Q = 0 or Q >= 2 violated");
        }
        Ok(())
    }
}

/// Load and validate a config from a flat JSON file.
///
/// An empty file yields the full-scale defaults. Missing keys fill from the
/// defaults; unknown keys are rejected.
pub fn load_config(path: impl AsRef<Path>) -> Result<SystemConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: SystemConfig = if text.trim().is_empty() {
        SystemConfig::default()
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_follow_full_scale_profile() {
        let cfg = SystemConfig::default();
        assert_eq!(cfg.m(), 64);
        assert_eq!((cfg.n_rf, cfg.k, cfg.l_p, cfg.n_c, cfg.d_max), (4, 4, 4, 128, 4));
        assert!((cfg.roll_off - 0.8).abs() < 1e-15);
        cfg.validate().unwrap();
    }

    #[test]
    fn load_partial_json_fills_defaults() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "{{\"M_h\": 8, \"M_v\": 8}}").unwrap();
        let cfg = load_config(f.path()).unwrap();
        assert_eq!(cfg.m(), 64);
        assert_eq!(cfg.n_c, 128);
    }

    #[test]
    fn load_empty_file_gives_defaults() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let cfg = load_config(f.path()).unwrap();
        assert_eq!(cfg, SystemConfig::default());
    }

    #[test]
    fn split_invariant_violation_is_reported() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "{{\"L\": 8, \"L_a\": 9, \"L_d\": 1}}").unwrap();
        let err = load_config(f.path()).unwrap_err();
        assert!(err.to_string().contains("L_a + L_d = L violated"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "{{\"M_hh\": 8}}").unwrap();
        assert!(load_config(f.path()).is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_config("/nonexistent/cfg.json").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cfg.json"));
    }

    #[test]
    fn snr_helpers_round_trip() {
        let mut cfg = SystemConfig::desk_flat();
        cfg.set_snr_ul_db(15.0);
        assert!((cfg.snr_ul_db() - 15.0).abs() < 1e-12);
        assert!((cfg.p_u - 10f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma2_is_accepted_for_noiseless_runs() {
        let cfg = SystemConfig {
            sigma2: 0.0,
            ..SystemConfig::desk_flat()
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn desk_profiles_validate() {
        SystemConfig::desk_flat().validate().unwrap();
        SystemConfig::desk_ofdm().validate().unwrap();
        SystemConfig::paper_flat().validate().unwrap();
    }
}
