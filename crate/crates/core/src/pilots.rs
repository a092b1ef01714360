//! Uplink pilot protocol: analog combining, pilot decorrelation, phase
//! quantization.
//!
//! Users send orthogonal pilots over K OFDM symbols per frame; the base
//! station combines them through a unit-modulus sensing matrix per frame and
//! right-multiplies by the pilot matrix Hermitian to separate users. Noise is
//! injected in the antenna domain and passes through the combiner, so the
//! combined noise covariance per frame is sigma2 * W * W^H.

use crate::channel::MultiUserChannel;
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::linalg::hermitian;
use crate::rng::{sample_cn, sample_phase};
use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

/// Which pilot phase an observation block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PilotPhase {
    Analog,
    Digital,
}

/// Unit-modulus analog combiner, stored as phases (frames x rows x M).
/// Entries of the derived complex matrices are `exp(i*psi)`, so the
/// unit-modulus invariant holds by construction.
#[derive(Debug, Clone)]
pub struct SensingMatrix {
    pub phases: Array3<f64>,
}

impl SensingMatrix {
    pub fn from_phases(phases: Array3<f64>) -> Self {
        SensingMatrix { phases }
    }

    /// I.i.d. uniform phases on [0, 2*pi): the untrained default.
    pub fn random(frames: usize, rows: usize, m: usize, rng: &mut ChaCha8Rng) -> Self {
        let phases = Array3::from_shape_fn((frames, rows, m), |_| sample_phase(rng));
        SensingMatrix { phases }
    }

    pub fn frames(&self) -> usize {
        self.phases.dim().0
    }

    pub fn rows(&self) -> usize {
        self.phases.dim().1
    }

    pub fn antennas(&self) -> usize {
        self.phases.dim().2
    }

    /// Complex combiner for frame `l`.
    pub fn frame(&self, l: usize) -> Array2<Complex64> {
        let (_, rows, m) = self.phases.dim();
        Array2::from_shape_fn((rows, m), |(r, c)| {
            let p = self.phases[[l, r, c]];
            Complex64::new(p.cos(), p.sin())
        })
    }

    /// All frames stacked row-wise: (frames*rows) x M.
    pub fn stacked(&self) -> Array2<Complex64> {
        let (frames, rows, m) = self.phases.dim();
        let mut out = Array2::zeros((frames * rows, m));
        for l in 0..frames {
            let w = self.frame(l);
            for r in 0..rows {
                for c in 0..m {
                    out[[l * rows + r, c]] = w[[r, c]];
                }
            }
        }
        out
    }

    /// Snap every phase to the Q-level grid.
    pub fn quantized(&self, q: u32) -> Self {
        SensingMatrix {
            phases: self.phases.mapv(|p| quantize_phase(p, q)),
        }
    }
}

/// Received pilot block for one user: (frames*rows) x N_c, rows grouped by
/// frame in ascending order.
#[derive(Debug, Clone)]
pub struct PilotObservation {
    pub y: Array2<Complex64>,
    pub phase: PilotPhase,
}

/// Orthogonal pilot matrices: a K x K unitary DFT base rotated per subcarrier
/// by a fixed random phase. X[j] = exp(i*phi_j) * X, so X[j] X[j]^H = I.
#[derive(Debug, Clone)]
pub struct PilotMatrixSet {
    pub base: Array2<Complex64>,
    pub rotations: Vec<f64>,
}

impl PilotMatrixSet {
    /// DFT base with per-subcarrier rotation phases drawn once from `rng`.
    pub fn new_dft(k: usize, n_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (k as f64).sqrt();
        let base = Array2::from_shape_fn((k, k), |(r, c)| {
            let ang = -TAU * (r * c) as f64 / k as f64;
            Complex64::new(ang.cos(), ang.sin()) * scale
        });
        let rotations = (0..n_c).map(|_| sample_phase(rng)).collect();
        PilotMatrixSet { base, rotations }
    }

    pub fn matrix_for(&self, j: usize) -> Array2<Complex64> {
        let rot = Complex64::from_polar(1.0, self.rotations[j]);
        self.base.mapv(|z| z * rot)
    }

    fn check_unitary(&self) -> Result<()> {
        let k = self.base.nrows();
        let prod = self.base.dot(&hermitian(&self.base));
        for i in 0..k {
            for j in 0..k {
                let want = if i == j { 1.0 } else { 0.0 };
                if (prod[[i, j]] - Complex64::new(want, 0.0)).norm() > 1e-9 {
                    return Err(Error::Invalid("pilot matrix is not unitary".into()));
                }
            }
        }
        Ok(())
    }
}

/// Simulate the decorrelated pilot observation for every user:
/// y_k^(l)[j] = sqrt(P_U) * W^(l) * h_k[j] + W^(l) * n, n ~ CN(0, sigma2*I_M).
///
/// Antenna noise is drawn in canonical (frame, user, subcarrier) order so two
/// schemes sharing an RNG stream see identical noise realizations.
pub fn observe_pilots(
    h: &MultiUserChannel,
    w: &SensingMatrix,
    cfg: &SystemConfig,
    rng: &mut ChaCha8Rng,
    phase: PilotPhase,
) -> Result<Vec<PilotObservation>> {
    let m = w.antennas();
    let rows = w.rows();
    let k = h.len();
    let n_c = h.first().map(|u| u.ncols()).unwrap_or(0);
    for (idx, user) in h.iter().enumerate() {
        if user.nrows() != m || user.ncols() != n_c {
            return Err(Error::DimMismatch(format!(
                "user {idx} channel is {}x{}, expected {}x{}",
                user.nrows(),
                user.ncols(),
                m,
                n_c
            )));
        }
    }
    let sqrt_pu = cfg.p_u.sqrt();
    let mut obs: Vec<Array2<Complex64>> = (0..k).map(|_| Array2::zeros((w.frames() * rows, n_c))).collect();
    for l in 0..w.frames() {
        let wl = w.frame(l);
        for (uk, user) in h.iter().enumerate() {
            for j in 0..n_c {
                let mut x = Array1::<Complex64>::zeros(m);
                for mm in 0..m {
                    let noise = if cfg.sigma2 > 0.0 {
                        sample_cn(rng, cfg.sigma2)
                    } else {
                        Complex64::new(0.0, 0.0)
                    };
                    x[mm] = sqrt_pu * user[[mm, j]] + noise;
                }
                let y = wl.dot(&x);
                for r in 0..rows {
                    obs[uk][[l * rows + r, j]] = y[r];
                }
            }
        }
    }
    Ok(obs
        .into_iter()
        .map(|y| PilotObservation { y, phase })
        .collect())
}

/// Raw (pre-decorrelation) pilot block: frames[l][j] is rows x K, one column
/// per OFDM symbol in the frame.
#[derive(Debug, Clone)]
pub struct RawPilotBlock {
    pub frames: Vec<Vec<Array2<Complex64>>>,
}

/// Simulate raw reception of the orthogonal pilots over K symbols per frame.
pub fn transmit_pilots(
    h: &MultiUserChannel,
    w: &SensingMatrix,
    pilots: &PilotMatrixSet,
    cfg: &SystemConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RawPilotBlock> {
    let m = w.antennas();
    let k = h.len();
    let n_c = h.first().map(|u| u.ncols()).unwrap_or(0);
    let sqrt_pu = cfg.p_u.sqrt();
    let mut frames = Vec::with_capacity(w.frames());
    for l in 0..w.frames() {
        let wl = w.frame(l);
        let mut per_sub = Vec::with_capacity(n_c);
        for j in 0..n_c {
            // H[j]: M x K with user channels as columns.
            let hj = Array2::from_shape_fn((m, k), |(mm, uk)| h[uk][[mm, j]]);
            let xj = pilots.matrix_for(j);
            let mut signal = wl.dot(&hj).dot(&xj);
            signal.mapv_inplace(|z| z * sqrt_pu);
            if cfg.sigma2 > 0.0 {
                let noise = Array2::from_shape_fn((m, k), |_| sample_cn(rng, cfg.sigma2));
                signal += &wl.dot(&noise);
            }
            per_sub.push(signal);
        }
        frames.push(per_sub);
    }
    Ok(RawPilotBlock { frames })
}

/// Separate users from a raw block by right-multiplying with X[j]^H.
/// The per-subcarrier rotation phases cancel exactly.
pub fn decorrelate_pilots(
    raw: &RawPilotBlock,
    pilots: &PilotMatrixSet,
    phase: PilotPhase,
) -> Result<Vec<PilotObservation>> {
    pilots.check_unitary()?;
    let frames = raw.frames.len();
    let n_c = raw.frames.first().map(|f| f.len()).unwrap_or(0);
    if n_c != pilots.rotations.len() {
        return Err(Error::DimMismatch(format!(
            "raw block has {n_c} subcarriers, pilot set has {}",
            pilots.rotations.len()
        )));
    }
    let k = pilots.base.nrows();
    let rows = raw.frames[0][0].nrows();
    let mut obs: Vec<Array2<Complex64>> = (0..k).map(|_| Array2::zeros((frames * rows, n_c))).collect();
    for l in 0..frames {
        for j in 0..n_c {
            let block = &raw.frames[l][j];
            if block.ncols() != k {
                return Err(Error::DimMismatch(format!(
                    "raw block spans {} symbols, expected {k}",
                    block.ncols()
                )));
            }
            let sep = block.dot(&hermitian(&pilots.matrix_for(j)));
            for uk in 0..k {
                for r in 0..rows {
                    obs[uk][[l * rows + r, j]] = sep[[r, uk]];
                }
            }
        }
    }
    Ok(obs
        .into_iter()
        .map(|y| PilotObservation { y, phase })
        .collect())
}

/// Round a phase to the nearest point of the Q-level grid {2*pi*q/Q}, ties
/// breaking toward the smaller q. Input is wrapped to [0, 2*pi) first.
pub fn quantize_phase(phase: f64, q: u32) -> f64 {
    debug_assert!(q >= 2, "quantize_phase requires Q >= 2");
    let qf = q as f64;
    let wrapped = phase.rem_euclid(TAU);
    let x = wrapped * qf / TAU;
    let f = x.floor();
    let r = x - f;
    let idx = if r < 0.5 {
        f as u32 % q
    } else if r > 0.5 {
        (f as u32 + 1) % q
    } else {
        // tie: the two candidates are f and (f+1) mod q; pick the smaller index
        (f as u32).min((f as u32 + 1) % q) % q
    };
    TAU * idx as f64 / qf
}

/// Regroup per-user digital-phase observations into per-frame matrices
/// Upsilon^(l)[j] of shape (rows, K): column k is user k's received vector.
pub fn assemble_digital_frames(obs: &[PilotObservation], rows: usize) -> Vec<Vec<Array2<Complex64>>> {
    let k = obs.len();
    let n_c = obs[0].y.ncols();
    let l_d = obs[0].y.nrows() / rows;
    (0..l_d)
        .map(|l| {
            (0..n_c)
                .map(|j| Array2::from_shape_fn((rows, k), |(n, uk)| obs[uk].y[[l * rows + n, j]]))
                .collect()
        })
        .collect()
}

/// Second-phase sensing: every digital frame equals V_RF^H.
pub fn digital_phase_sensing(v_rf: &Array2<Complex64>, l_d: usize) -> Result<SensingMatrix> {
    let (m, k) = v_rf.dim();
    for z in v_rf.iter() {
        if (z.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "analog precoder entry has modulus {}, expected 1",
                z.norm()
            )));
        }
    }
    let mut phases = Array3::zeros((l_d, k, m));
    for l in 0..l_d {
        for n in 0..k {
            for mm in 0..m {
                // W = V^H: entry (n, m) = conj(V[m, n])
                phases[[l, n, mm]] = (-v_rf[[mm, n]].arg()).rem_euclid(TAU);
            }
        }
    }
    Ok(SensingMatrix { phases })
}
