//! Sparse mmWave channel synthesis.
//!
//! Each user's channel is a sum of `L_p` specular paths with CN(0,1) gains,
//! uniform delays over `[0, d_max*T_s]`, and uniform elevation/azimuth
//! departure angles on `[-pi/2, pi/2]`. Pulse shaping is a normalized raised
//! cosine. Time-domain taps `r[n]`, n = 0..=d_max, turn into per-subcarrier
//! channels by an N_c-point DFT; `N_c = 1, d_max = 0` recovers the
//! frequency-flat special case.

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::rng::{purpose, sample_cn, substream};
use crate::tensor_file::{self, DatasetHeader, Layout};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;

/// Frequency-domain channels for the K users of one realization, each M x N_c.
pub type MultiUserChannel = Vec<Array2<Complex64>>;

/// Per-path parameters for all K users: row k, column path index.
#[derive(Debug, Clone)]
pub struct PathSet {
    pub alpha: Array2<Complex64>,
    /// Delays in microseconds.
    pub tau: Array2<f64>,
    /// Elevation angles of departure, radians.
    pub theta: Array2<f64>,
    /// Azimuth angles of departure, radians.
    pub phi: Array2<f64>,
}

/// One channel realization: time-domain taps and frequency-domain channels
/// per user. Taps have shape (d_max+1, M); channels are M x N_c.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub taps: Vec<Array2<Complex64>>,
    pub h: MultiUserChannel,
}

/// UPA response, Kronecker of horizontal and vertical ULA responses with the
/// vertical index varying fastest. Every entry has unit modulus.
pub fn array_response(theta: f64, phi: f64, cfg: &SystemConfig) -> Array1<Complex64> {
    let c = TAU * cfg.delta_over_lambda;
    let h_step = c * phi.cos() * theta.sin();
    let v_step = c * phi.sin();
    let mut out = Array1::zeros(cfg.m());
    let mut idx = 0;
    for mh in 0..cfg.m_h {
        for mv in 0..cfg.m_v {
            let ph = h_step * mh as f64 + v_step * mv as f64;
            out[idx] = Complex64::new(ph.cos(), ph.sin());
            idx += 1;
        }
    }
    out
}

fn sinc(x: f64) -> f64 {
    let px = PI * x;
    if px.abs() < 1e-8 {
        1.0 - px * px / 6.0
    } else {
        px.sin() / px
    }
}

/// Normalized raised-cosine pulse, p(0) = 1. The removable singularity at
/// t = +-T_s/(2*beta) is evaluated by its analytic limit, pi/4 * sinc(t/T_s).
pub fn raised_cosine(t: f64, cfg: &SystemConfig) -> f64 {
    let beta = cfg.roll_off;
    let x = t / cfg.t_s;
    let u = 2.0 * beta * x;
    let denom = 1.0 - u * u;
    if denom.abs() < 1e-9 {
        return FRAC_PI_2 / 2.0 * sinc(x);
    }
    sinc(x) * (PI * beta * x).cos() / denom
}

/// Draw i.i.d. path parameters for all users.
pub fn draw_paths(cfg: &SystemConfig, rng: &mut ChaCha8Rng) -> PathSet {
    let (k, lp) = (cfg.k, cfg.l_p);
    let tau_max = cfg.d_max as f64 * cfg.t_s;
    let mut alpha = Array2::zeros((k, lp));
    let mut tau = Array2::zeros((k, lp));
    let mut theta = Array2::zeros((k, lp));
    let mut phi = Array2::zeros((k, lp));
    for u in 0..k {
        for p in 0..lp {
            alpha[[u, p]] = sample_cn(rng, 1.0);
            tau[[u, p]] = rng.random::<f64>() * tau_max;
            theta[[u, p]] = (rng.random::<f64>() - 0.5) * PI;
            phi[[u, p]] = (rng.random::<f64>() - 0.5) * PI;
        }
    }
    PathSet { alpha, tau, theta, phi }
}

/// Pulse-shaped time-domain taps per user:
/// r[n] = (1/sqrt(L_p)) * sum_l alpha_l * p_rc(n*T_s - tau_l) * a_t(theta_l, phi_l).
pub fn taps_from_paths(paths: &PathSet, cfg: &SystemConfig) -> Vec<Array2<Complex64>> {
    let scale = 1.0 / (cfg.l_p as f64).sqrt();
    (0..cfg.k)
        .map(|u| {
            let mut taps = Array2::zeros((cfg.d_max + 1, cfg.m()));
            for p in 0..cfg.l_p {
                let steer = array_response(paths.theta[[u, p]], paths.phi[[u, p]], cfg);
                let gain = paths.alpha[[u, p]] * scale;
                for n in 0..=cfg.d_max {
                    let pulse = raised_cosine(n as f64 * cfg.t_s - paths.tau[[u, p]], cfg);
                    if pulse == 0.0 {
                        continue;
                    }
                    let w = gain * pulse;
                    for m in 0..cfg.m() {
                        taps[[n, m]] += w * steer[m];
                    }
                }
            }
            taps
        })
        .collect()
}

/// Per-subcarrier channels as the DFT of the taps:
/// h[j] = sum_n r[n] * exp(-i*2*pi*j*n/N_c).
pub fn freq_channel(taps: &[Array2<Complex64>], cfg: &SystemConfig) -> MultiUserChannel {
    taps.iter()
        .map(|user_taps| {
            let mut h = Array2::zeros((cfg.m(), cfg.n_c));
            for j in 0..cfg.n_c {
                for n in 0..=cfg.d_max {
                    let ang = -TAU * (j * n) as f64 / cfg.n_c as f64;
                    let tw = Complex64::new(ang.cos(), ang.sin());
                    for m in 0..cfg.m() {
                        h[[m, j]] += user_taps[[n, m]] * tw;
                    }
                }
            }
            h
        })
        .collect()
}

/// One full realization for all users.
pub fn generate_realization(cfg: &SystemConfig, rng: &mut ChaCha8Rng) -> ChannelRealization {
    let paths = draw_paths(cfg, rng);
    let taps = taps_from_paths(&paths, cfg);
    let h = freq_channel(&taps, cfg);
    ChannelRealization { taps, h }
}

/// Generate `count` realizations, one RNG stream per realization index so the
/// result is independent of worker count.
pub fn generate_channel_set(cfg: &SystemConfig, count: usize, seed: u64) -> Vec<MultiUserChannel> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, purpose::CHANNEL, i as u64);
            generate_realization(cfg, &mut rng).h
        })
        .collect()
}

fn dataset_layout(cfg: &SystemConfig, count: usize) -> Layout {
    Layout::new(
        &["sample", "user", "antenna", "subcarrier"],
        &[count, cfg.k, cfg.m(), cfg.n_c],
        tensor_file::DTYPE_C64_F32,
    )
}

/// Generate a channel dataset file of `count` realizations.
pub fn generate_dataset(cfg: &SystemConfig, count: usize, path: impl AsRef<Path>) -> Result<DatasetHeader> {
    if count == 0 {
        return Err(Error::Invalid("dataset count must be >= 1".into()));
    }
    let set = generate_channel_set(cfg, count, cfg.seed);
    let mut payload = Vec::with_capacity(count * cfg.k * cfg.m() * cfg.n_c);
    for users in &set {
        for h in users {
            payload.extend(h.iter().copied());
        }
    }
    let header = DatasetHeader {
        config: cfg.clone(),
        sample_count: count,
        layout: dataset_layout(cfg, count),
    };
    tensor_file::save_dataset(path, &header, &payload)?;
    Ok(header)
}

/// Load a channel dataset produced by [`generate_dataset`].
pub fn load_channel_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<MultiUserChannel>)> {
    let (header, payload) = tensor_file::load_dataset(path)?;
    let shape = &header.layout.shape;
    if shape.len() != 4 {
        return Err(Error::Format("channel dataset must have 4 dims".into()));
    }
    let (count, k, m, n_c) = (shape[0], shape[1], shape[2], shape[3]);
    let per_user = m * n_c;
    let mut out = Vec::with_capacity(count);
    let mut off = 0;
    for _ in 0..count {
        let mut users = Vec::with_capacity(k);
        for _ in 0..k {
            let h = Array2::from_shape_vec((m, n_c), payload[off..off + per_user].to_vec())
                .map_err(|e| Error::Format(e.to_string()))?;
            users.push(h);
            off += per_user;
        }
        out.push(users);
    }
    Ok((header, out))
}
