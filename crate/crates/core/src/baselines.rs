//! Classical comparison pipeline: compressed-sensing channel recovery via
//! orthogonal matching pursuit, phase-matching analog beams, and a
//! perfect-CSI genie path.
//!
//! The recovery baseline spends the analog pilot budget on estimating each
//! user's high-dimensional channel over an angular dictionary, phase-matches
//! the estimate for the analog precoder, and then runs the same digital phase
//! as the proposed scheme (sensing = V_RF^H, LMMSE, ZF/WMMSE). The multicarrier
//! variant runs OMP on a decimated subcarrier subset and pools angle
//! estimates; it stands in for joint-sparse recovery and is compared on
//! ordering only.

use crate::channel::{array_response, raised_cosine, MultiUserChannel};
use crate::config::SystemConfig;
use crate::digital::{
    lmmse_equivalent, true_equivalent, wmmse_precoder, zf_precoder, DigitalPrecoder, DigitalScheme,
    WmmseOptions,
};
use crate::error::{Error, Result};
use crate::pilots::{
    assemble_digital_frames, digital_phase_sensing, observe_pilots, quantize_phase, PilotPhase,
    SensingMatrix,
};
use crate::rng::TrialRng;
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use std::f64::consts::{PI, TAU};

/// Subcarrier decimation step for the multicarrier recovery baseline.
pub const OMP_SUBCARRIER_STEP: usize = 8;

/// Angular (and, for OFDM, delay) dictionary for sparse recovery.
///
/// Atoms are steering vectors on a G_el x G_az grid spanning
/// [-pi/2, pi/2]^2. For multicarrier use, a delay grid carries the
/// pulse-shaped frequency signature of each candidate delay.
#[derive(Debug, Clone)]
pub struct AngleDictionary {
    pub thetas: Vec<f64>,
    pub phis: Vec<f64>,
    /// M x (G_el * G_az); column g = steering at (theta, phi) pair g.
    pub atoms: Array2<Complex64>,
    /// Candidate delays in microseconds (empty in the flat case).
    pub delays: Vec<f64>,
    /// G_d x N_c frequency signatures of the delay grid.
    pub tap_signatures: Array2<Complex64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl AngleDictionary {
    pub fn build(cfg: &SystemConfig, g_el: usize, g_az: usize, g_d: usize) -> Self {
        let thetas = linspace(-PI / 2.0, PI / 2.0, g_el);
        let phis = linspace(-PI / 2.0, PI / 2.0, g_az);
        let m = cfg.m();
        let mut atoms = Array2::zeros((m, g_el * g_az));
        for (ti, &theta) in thetas.iter().enumerate() {
            for (pi_idx, &phi) in phis.iter().enumerate() {
                let a = array_response(theta, phi, cfg);
                let col = ti * g_az + pi_idx;
                for r in 0..m {
                    atoms[[r, col]] = a[r];
                }
            }
        }
        let (delays, tap_signatures) = if cfg.n_c > 1 {
            let delays = linspace(0.0, cfg.d_max as f64 * cfg.t_s, g_d.max(1));
            let mut sig = Array2::zeros((delays.len(), cfg.n_c));
            for (d, &tau) in delays.iter().enumerate() {
                for j in 0..cfg.n_c {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for n in 0..=cfg.d_max {
                        let pulse = raised_cosine(n as f64 * cfg.t_s - tau, cfg);
                        let ang = -TAU * (j * n) as f64 / cfg.n_c as f64;
                        acc += pulse * Complex64::new(ang.cos(), ang.sin());
                    }
                    sig[[d, j]] = acc;
                }
            }
            (delays, sig)
        } else {
            (Vec::new(), Array2::zeros((0, 0)))
        };
        AngleDictionary {
            thetas,
            phis,
            atoms,
            delays,
            tap_signatures,
        }
    }

    /// Standard 2x-overcomplete default: 2*ceil(sqrt(M)) points per angular
    /// axis (4M atoms total), 4*(d_max+1) delay points for OFDM.
    pub fn default_for(cfg: &SystemConfig) -> Self {
        let per_axis = 2 * (cfg.m() as f64).sqrt().ceil() as usize;
        Self::build(cfg, per_axis, per_axis, 4 * (cfg.d_max + 1))
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.ncols()
    }
}

/// Greedy selection/refit diagnostics from one OMP run.
#[derive(Debug, Clone)]
pub struct OmpReport {
    pub support: Vec<usize>,
    pub coefficients: Vec<Complex64>,
    /// Residual norm after each iteration (starting from ||y||).
    pub residual_norms: Vec<f64>,
}

fn ls_on_support(
    phi: &Array2<Complex64>,
    support: &[usize],
    y: &Array1<Complex64>,
) -> Result<Array1<Complex64>> {
    let s = support.len();
    let mut gram = Array2::zeros((s, s));
    let mut rhs = Array2::zeros((s, 1));
    for (a, &ga) in support.iter().enumerate() {
        for (b, &gb) in support.iter().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for r in 0..phi.nrows() {
                acc += phi[[r, ga]].conj() * phi[[r, gb]];
            }
            gram[[a, b]] = acc;
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for r in 0..phi.nrows() {
            acc += phi[[r, ga]].conj() * y[r];
        }
        rhs[[a, 0]] = acc;
    }
    let c = crate::linalg::solve(&gram, &rhs)?;
    Ok(c.column(0).to_owned())
}

/// Orthogonal matching pursuit against the angular dictionary.
///
/// The measurement matrix is sqrt(P_U) * W_a * A where W_a stacks the analog
/// sensing frames and A holds the dictionary steering vectors. Atoms are
/// selected greedily by normalized residual correlation with a least-squares
/// refit on the growing support; the reconstruction is A_S * c.
pub fn omp_estimate(
    y: &Array1<Complex64>,
    w_a: &SensingMatrix,
    dict: &AngleDictionary,
    sparsity: usize,
    cfg: &SystemConfig,
) -> Result<(Array1<Complex64>, OmpReport)> {
    let meas = w_a.frames() * w_a.rows();
    if y.len() != meas {
        return Err(Error::DimMismatch(format!(
            "measurement has {} entries, sensing provides {meas}",
            y.len()
        )));
    }
    if sparsity > meas {
        return Err(Error::Invalid(format!(
            "sparsity {sparsity} exceeds measurement count {meas}"
        )));
    }
    if sparsity > dict.atom_count() {
        return Err(Error::Invalid(format!(
            "sparsity {sparsity} exceeds dictionary size {}",
            dict.atom_count()
        )));
    }
    let phi = w_a.stacked().dot(&dict.atoms).mapv(|z| z * cfg.p_u.sqrt());
    let atom_norms: Vec<f64> = (0..phi.ncols())
        .map(|g| phi.column(g).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
        .collect();

    let y_norm = y.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let m = dict.atoms.nrows();
    let mut report = OmpReport {
        support: Vec::new(),
        coefficients: Vec::new(),
        residual_norms: vec![y_norm],
    };
    if y_norm == 0.0 {
        return Ok((Array1::zeros(m), report));
    }

    let mut residual = y.clone();
    let mut coeffs = Array1::zeros(0);
    for _ in 0..sparsity {
        let mut best = (0usize, -1.0f64);
        for g in 0..phi.ncols() {
            if report.support.contains(&g) || atom_norms[g] == 0.0 {
                continue;
            }
            let mut corr = Complex64::new(0.0, 0.0);
            for r in 0..phi.nrows() {
                corr += phi[[r, g]].conj() * residual[r];
            }
            let score = corr.norm() / atom_norms[g];
            if score > best.1 {
                best = (g, score);
            }
        }
        report.support.push(best.0);
        coeffs = ls_on_support(&phi, &report.support, y)?;
        residual = y.clone();
        for (s, &g) in report.support.iter().enumerate() {
            for r in 0..phi.nrows() {
                residual[r] -= phi[[r, g]] * coeffs[s];
            }
        }
        report
            .residual_norms
            .push(residual.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt());
    }
    report.coefficients = coeffs.to_vec();
    let mut h_hat = Array1::zeros(m);
    for (s, &g) in report.support.iter().enumerate() {
        for r in 0..m {
            h_hat[r] += dict.atoms[[r, g]] * coeffs[s];
        }
    }
    Ok((h_hat, report))
}

/// Unit-modulus beam carrying the conjugate phases of the channel entries.
/// Zero entries map to phase 0.
pub fn phase_match(h: &Array1<Complex64>) -> Array1<Complex64> {
    h.mapv(|z| {
        if z == Complex64::new(0.0, 0.0) {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::from_polar(1.0, z.arg())
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    PerfectCsi,
    Omp,
}

#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub v_rf: Array2<Complex64>,
    pub v_d: DigitalPrecoder,
}

/// Multicarrier OMP stand-in: per-subcarrier OMP on every `OMP_SUBCARRIER_STEP`-th
/// subcarrier, support pooling by accumulated coefficient energy, per-atom
/// delay fitting on the dictionary's tap signatures, full-band reconstruction,
/// and finally the subcarrier-averaged channel estimate.
fn omp_subcarrier_average(
    y: &Array2<Complex64>,
    w_a: &SensingMatrix,
    dict: &AngleDictionary,
    sparsity: usize,
    cfg: &SystemConfig,
) -> Result<Array1<Complex64>> {
    let n_c = y.ncols();
    let picked: Vec<usize> = (0..n_c).step_by(OMP_SUBCARRIER_STEP).collect();
    let phi = w_a.stacked().dot(&dict.atoms).mapv(|z| z * cfg.p_u.sqrt());

    // Vote on atoms across the decimated subcarriers.
    let mut weight = vec![0.0f64; dict.atom_count()];
    let mut any_signal = false;
    for &j in &picked {
        let col = y.column(j).to_owned();
        if col.iter().map(|z| z.norm_sqr()).sum::<f64>() == 0.0 {
            continue;
        }
        any_signal = true;
        let (_, rep) = omp_estimate(&col, w_a, dict, sparsity, cfg)?;
        for (s, &g) in rep.support.iter().enumerate() {
            weight[g] += rep.coefficients[s].norm_sqr();
        }
    }
    if !any_signal {
        return Ok(Array1::zeros(dict.atoms.nrows()));
    }
    let mut order: Vec<usize> = (0..dict.atom_count()).collect();
    order.sort_by(|&a, &b| weight[b].partial_cmp(&weight[a]).unwrap().then(a.cmp(&b)));
    let support: Vec<usize> = order.into_iter().take(sparsity).filter(|&g| weight[g] > 0.0).collect();
    if support.is_empty() {
        return Ok(Array1::zeros(dict.atoms.nrows()));
    }

    // Refit coefficients per decimated subcarrier on the pooled support.
    let mut coeff_profiles: Vec<Vec<Complex64>> = vec![Vec::with_capacity(picked.len()); support.len()];
    for &j in &picked {
        let col = y.column(j).to_owned();
        let c = ls_on_support(&phi, &support, &col)?;
        for (s, v) in c.iter().enumerate() {
            coeff_profiles[s].push(*v);
        }
    }

    // Per atom: fit one (delay, gain) pair to the coefficient profile, then
    // reconstruct across the whole band.
    let m = dict.atoms.nrows();
    let mut h_full = Array2::<Complex64>::zeros((m, n_c));
    for (s, &g) in support.iter().enumerate() {
        let profile = &coeff_profiles[s];
        let mut best: Option<(usize, Complex64, f64)> = None;
        for d in 0..dict.delays.len() {
            let mut num = Complex64::new(0.0, 0.0);
            let mut den = 0.0;
            for (pi_idx, &j) in picked.iter().enumerate() {
                let gsig = dict.tap_signatures[[d, j]];
                num += gsig.conj() * profile[pi_idx];
                den += gsig.norm_sqr();
            }
            if den == 0.0 {
                continue;
            }
            let alpha = num / den;
            let fit = alpha.norm_sqr() * den;
            if best.map_or(true, |(_, _, f)| fit > f) {
                best = Some((d, alpha, fit));
            }
        }
        if let Some((d, alpha, _)) = best {
            for j in 0..n_c {
                let sig = alpha * dict.tap_signatures[[d, j]];
                for r in 0..m {
                    h_full[[r, j]] += sig * dict.atoms[[r, g]];
                }
            }
        }
    }
    let mut avg = Array1::zeros(m);
    for j in 0..n_c {
        for r in 0..m {
            avg[r] += h_full[[r, j]];
        }
    }
    avg.mapv_inplace(|z| z / n_c as f64);
    Ok(avg)
}

/// Classical end-to-end baseline.
///
/// Analog beams are phase-matched per-user channels: the true subcarrier
/// average for `PerfectCsi`, the OMP reconstruction for `Omp` (sensing the
/// same `L_a`-frame pilot budget through random combiner phases). The digital
/// phase mirrors the proposed scheme, except that the genie skips estimation
/// and uses the exact equivalent channel.
pub fn baseline_pipeline(
    h: &MultiUserChannel,
    cfg: &SystemConfig,
    mode: BaselineMode,
    digital: DigitalScheme,
    dict: &AngleDictionary,
    trial: &TrialRng,
) -> Result<BaselineOutput> {
    let k = h.len();
    if k > cfg.n_rf {
        return Err(Error::Invalid(format!("K = {k} exceeds N_RF = {}", cfg.n_rf)));
    }
    let m = cfg.m();
    let sparsity = cfg.l_p.min(cfg.l_a * cfg.n_rf);

    let mut v_rf = Array2::zeros((m, k));
    match mode {
        BaselineMode::PerfectCsi => {
            for (uk, user) in h.iter().enumerate() {
                let mut avg = Array1::zeros(m);
                for j in 0..user.ncols() {
                    for r in 0..m {
                        avg[r] += user[[r, j]];
                    }
                }
                avg.mapv_inplace(|z| z / user.ncols() as f64);
                let v = phase_match(&avg);
                for r in 0..m {
                    v_rf[[r, uk]] = v[r];
                }
            }
        }
        BaselineMode::Omp => {
            let mut sensing_rng = trial.baseline_sensing();
            let w_a = SensingMatrix::random(cfg.l_a, cfg.n_rf, m, &mut sensing_rng);
            let w_a = if cfg.q >= 2 { w_a.quantized(cfg.q) } else { w_a };
            let mut noise_rng = trial.analog_noise();
            let obs = observe_pilots(h, &w_a, cfg, &mut noise_rng, PilotPhase::Analog)?;
            for (uk, o) in obs.iter().enumerate() {
                let h_hat = if cfg.is_flat() {
                    let col = o.y.column(0).to_owned();
                    omp_estimate(&col, &w_a, dict, sparsity, cfg)?.0
                } else {
                    omp_subcarrier_average(&o.y, &w_a, dict, sparsity, cfg)?
                };
                let v = phase_match(&h_hat);
                for r in 0..m {
                    v_rf[[r, uk]] = v[r];
                }
            }
        }
    }
    if cfg.q >= 2 {
        v_rf.mapv_inplace(|z| Complex64::from_polar(1.0, quantize_phase(z.arg(), cfg.q)));
    }

    let est = match mode {
        BaselineMode::PerfectCsi => true_equivalent(&v_rf, h),
        BaselineMode::Omp => {
            let w_d = digital_phase_sensing(&v_rf, cfg.l_d)?;
            let mut noise_rng = trial.digital_noise();
            let obs = observe_pilots(h, &w_d, cfg, &mut noise_rng, PilotPhase::Digital)?;
            let frames = assemble_digital_frames(&obs, k);
            lmmse_equivalent(&frames, cfg)?
        }
    };
    let v_d = match digital {
        DigitalScheme::Zf => zf_precoder(&est, &v_rf, cfg)?,
        DigitalScheme::Wmmse => wmmse_precoder(&est, &v_rf, cfg, &WmmseOptions::default())?,
    };
    Ok(BaselineOutput { v_rf, v_d })
}
