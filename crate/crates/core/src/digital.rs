//! Second pilot phase and digital precoding.
//!
//! With the analog precoder fixed and the digital-phase sensing set to
//! V_RF^H, each received frame is a noisy copy of the K x K equivalent
//! channel. A closed-form LMMSE average-and-scale estimates it, then either
//! zero-forcing or an iterative WMMSE builds the per-subcarrier digital
//! precoder under the hybrid power constraint
//! Tr(V_D^H V_RF^H V_RF V_D) <= P_D.

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::linalg::{cond_1, hermitian, solve};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use std::f64::consts::LN_2;

/// Which digital precoder closes the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DigitalScheme {
    Zf,
    Wmmse,
}

/// Estimated (or true) equivalent channel per subcarrier. Entry (n, k) is
/// v_RF^(n)H h_k[j]: row = analog-precoder column, column = user.
#[derive(Debug, Clone)]
pub struct EquivalentChannelEstimate {
    pub per_subcarrier: Vec<Array2<Complex64>>,
}

/// Per-subcarrier digital precoder. `converged` is false when WMMSE hit its
/// iteration cap before the tolerance; `surrogate_traces` holds the WMMSE
/// surrogate objective per iteration and subcarrier (empty for ZF).
#[derive(Debug, Clone)]
pub struct DigitalPrecoder {
    pub per_subcarrier: Vec<Array2<Complex64>>,
    pub converged: bool,
    pub surrogate_traces: Vec<Vec<f64>>,
}

/// Exact equivalent channel V_RF^H H per subcarrier (genie path).
pub fn true_equivalent(v_rf: &Array2<Complex64>, h: &[Array2<Complex64>]) -> EquivalentChannelEstimate {
    let n_c = h.first().map(|u| u.ncols()).unwrap_or(0);
    let k = h.len();
    let vh = hermitian(v_rf);
    let per_subcarrier = (0..n_c)
        .map(|j| {
            let hj = Array2::from_shape_fn((v_rf.nrows(), k), |(m, u)| h[u][[m, j]]);
            vh.dot(&hj)
        })
        .collect();
    EquivalentChannelEstimate { per_subcarrier }
}

/// Closed-form LMMSE estimate from the digital-phase observations:
/// H_eq_hat[j] = sqrt(P_U) / (P_U * L_d + sigma2) * sum_l Upsilon^(l)[j].
///
/// Assumes the uncorrelated-antenna prior E[h h^H] = I_M, under which the
/// signal and combined-noise variances carry the same ||v||^2 factor and
/// cancel from the LMMSE coefficient.
pub fn lmmse_equivalent(
    frames: &[Vec<Array2<Complex64>>],
    cfg: &SystemConfig,
) -> Result<EquivalentChannelEstimate> {
    if frames.is_empty() {
        return Err(Error::Invalid(
            "LMMSE needs at least one digital pilot frame (L_d >= 1)".into(),
        ));
    }
    let l_d = frames.len();
    let n_c = frames[0].len();
    for f in frames {
        if f.len() != n_c {
            return Err(Error::DimMismatch("digital frames disagree on subcarrier count".into()));
        }
    }
    let coef = cfg.p_u.sqrt() / (cfg.p_u * l_d as f64 + cfg.sigma2);
    let per_subcarrier = (0..n_c)
        .map(|j| {
            let mut acc = frames[0][j].clone();
            for f in frames.iter().skip(1) {
                acc += &f[j];
            }
            acc.mapv_inplace(|z| z * coef);
            acc
        })
        .collect();
    Ok(EquivalentChannelEstimate { per_subcarrier })
}

/// Gram matrix of the analog precoder, V_RF^H V_RF.
fn analog_gram(v_rf: &Array2<Complex64>) -> Array2<Complex64> {
    hermitian(v_rf).dot(v_rf)
}

/// Hybrid transmit power Tr(V_D^H A V_D) with A = V_RF^H V_RF.
pub fn hybrid_power(v_d: &Array2<Complex64>, v_rf: &Array2<Complex64>) -> f64 {
    let a = analog_gram(v_rf);
    let av = a.dot(v_d);
    v_d.iter().zip(av.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

/// Scale V_D so the hybrid power constraint holds with equality. Returns the
/// applied factor.
pub fn power_scale(v_d: &mut Array2<Complex64>, v_rf: &Array2<Complex64>, p_d: f64) -> Result<f64> {
    let p = hybrid_power(v_d, v_rf);
    if !(p > 0.0) {
        return Err(Error::Invalid("cannot power-scale a zero precoder".into()));
    }
    let c = (p_d / p).sqrt();
    v_d.mapv_inplace(|z| z * c);
    Ok(c)
}

const ZF_RIDGE_REL: f64 = 1e-10;
const ZF_COND_LIMIT: f64 = 1e12;
const ZF_RIDGE_BAND: f64 = 1e9;

/// Zero-forcing digital precoder: V_D = H_hat (H_hat^H H_hat)^-1, scaled to
/// the power budget. The identity allocation gives every user the same
/// received amplitude.
///
/// A Gram condition number beyond 1e12 (or a singular Gram) is declared
/// degenerate. In the 1e9..1e12 band a relative ridge of 1e-10*trace/K
/// stabilizes the inversion; below it the plain inverse keeps interference
/// nulling at working precision.
pub fn zf_precoder(
    est: &EquivalentChannelEstimate,
    v_rf: &Array2<Complex64>,
    cfg: &SystemConfig,
) -> Result<DigitalPrecoder> {
    let mut out = Vec::with_capacity(est.per_subcarrier.len());
    for (j, h_hat) in est.per_subcarrier.iter().enumerate() {
        let k = h_hat.ncols();
        let mut gram = hermitian(h_hat).dot(h_hat);
        let trace: f64 = (0..k).map(|i| gram[[i, i]].re).sum();
        if !(trace > 0.0) {
            return Err(Error::DegenerateChannel(format!("subcarrier {j}: zero equivalent channel")));
        }
        let cond = cond_1(&gram).map_err(|_| {
            Error::DegenerateChannel(format!("subcarrier {j}: equivalent-channel Gram is singular"))
        })?;
        if cond > ZF_COND_LIMIT {
            return Err(Error::DegenerateChannel(format!(
                "subcarrier {j}: equivalent-channel Gram condition {cond:.3e} exceeds 1e12"
            )));
        }
        if cond > ZF_RIDGE_BAND {
            let ridge = ZF_RIDGE_REL * trace / k as f64;
            for i in 0..k {
                gram[[i, i]] += Complex64::new(ridge, 0.0);
            }
        }
        let inv_gram = solve(&gram, &Array2::eye(k))?;
        let mut v_d = h_hat.dot(&inv_gram);
        power_scale(&mut v_d, v_rf, cfg.p_d)?;
        out.push(v_d);
    }
    Ok(DigitalPrecoder {
        per_subcarrier: out,
        converged: true,
        surrogate_traces: Vec::new(),
    })
}

/// Options for the iterative WMMSE precoder.
#[derive(Debug, Clone)]
pub struct WmmseOptions {
    pub max_iters: usize,
    pub tol: f64,
    /// Per-user rate weights; None means equal weights.
    pub rate_weights: Option<Vec<f64>>,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        WmmseOptions {
            max_iters: 100,
            tol: 1e-5,
            rate_weights: None,
        }
    }
}

/// Iterative WMMSE on the K x K equivalent channel.
///
/// The analog stage enters only through the power budget: internally the
/// constraint is Tr(V^H V) <= P_D / mean_diag(V_RF^H V_RF) (the Gram of a
/// unit-modulus precoder has M on the diagonal); afterwards the exact hybrid
/// constraint is enforced with equality by `power_scale`. Each transmit
/// update solves its quadratic subproblem exactly, with the multiplier found
/// by bisection, so the weighted-MMSE surrogate never increases.
pub fn wmmse_precoder(
    est: &EquivalentChannelEstimate,
    v_rf: &Array2<Complex64>,
    cfg: &SystemConfig,
    opts: &WmmseOptions,
) -> Result<DigitalPrecoder> {
    let gram = analog_gram(v_rf);
    let k_used = v_rf.ncols();
    let mean_diag: f64 = (0..k_used).map(|i| gram[[i, i]].re).sum::<f64>() / k_used as f64;
    let mut per_subcarrier = Vec::with_capacity(est.per_subcarrier.len());
    let mut surrogate_traces = Vec::with_capacity(est.per_subcarrier.len());
    let mut all_converged = true;
    for h_hat in &est.per_subcarrier {
        let (mut v, converged, trace) = wmmse_single(h_hat, cfg.sigma2, cfg.p_d / mean_diag, opts)?;
        power_scale(&mut v, v_rf, cfg.p_d)?;
        all_converged &= converged;
        per_subcarrier.push(v);
        surrogate_traces.push(trace);
    }
    Ok(DigitalPrecoder {
        per_subcarrier,
        converged: all_converged,
        surrogate_traces,
    })
}

/// Surrogate value sum_k alpha_k (w_k e_k - ln w_k - 1) / ln 2 at precoder V
/// for fixed receivers u and weights w. At the fixed point this equals the
/// negative weighted sum rate.
fn wmmse_surrogate(
    h: &Array2<Complex64>,
    v: &Array2<Complex64>,
    u: &Array1<Complex64>,
    w: &Array1<f64>,
    alpha: &[f64],
    sigma2: f64,
) -> f64 {
    let k = h.ncols();
    let t = hermitian(h).dot(v);
    let mut total = 0.0;
    for kk in 0..k {
        let recv_power: f64 = (0..k).map(|i| t[[kk, i]].norm_sqr()).sum::<f64>() + sigma2;
        let e = u[kk].norm_sqr() * recv_power - 2.0 * (u[kk].conj() * t[[kk, kk]]).re + 1.0;
        total += alpha[kk] * (w[kk] * e - w[kk].ln() - 1.0);
    }
    total / LN_2
}

fn wmmse_single(
    h_hat: &Array2<Complex64>,
    sigma2: f64,
    budget: f64,
    opts: &WmmseOptions,
) -> Result<(Array2<Complex64>, bool, Vec<f64>)> {
    let dim = h_hat.nrows();
    let k = h_hat.ncols();
    let alpha: Vec<f64> = match &opts.rate_weights {
        Some(w) => {
            if w.len() != k {
                return Err(Error::DimMismatch(format!("{} rate weights for {k} users", w.len())));
            }
            w.clone()
        }
        None => vec![1.0; k],
    };

    // MRT initialization at full budget, equal power split.
    let mut v = Array2::<Complex64>::zeros((dim, k));
    for kk in 0..k {
        let col = h_hat.column(kk);
        let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.0 {
            let s = (budget / k as f64).sqrt() / norm;
            for d in 0..dim {
                v[[d, kk]] = col[d] * s;
            }
        }
    }

    let mut u = Array1::<Complex64>::zeros(k);
    let mut w = Array1::<f64>::from_elem(k, 1.0);
    let mut prev_obj = f64::INFINITY;
    let mut best_obj = f64::INFINITY;
    let mut best_v = v.clone();
    let mut converged = false;
    let mut trace = Vec::new();

    for _ in 0..opts.max_iters {
        // Receiver and weight updates (closed-form minimizers).
        let t = hermitian(h_hat).dot(&v);
        for kk in 0..k {
            let recv_power: f64 = (0..k).map(|i| t[[kk, i]].norm_sqr()).sum::<f64>() + sigma2;
            u[kk] = if recv_power > 0.0 {
                t[[kk, kk]] / recv_power
            } else {
                Complex64::new(0.0, 0.0)
            };
            let e = (1.0 - (u[kk].conj() * t[[kk, kk]]).re).max(1e-300);
            w[kk] = alpha[kk] / e;
        }

        // Transmit update: v_i = (sum_k w_k |u_k|^2 h_k h_k^H + mu I)^-1 w_i u_i h_i,
        // with mu >= 0 picked so the budget holds.
        let mut a = Array2::<Complex64>::zeros((dim, dim));
        let mut rhs = Array2::<Complex64>::zeros((dim, k));
        for kk in 0..k {
            let hk = h_hat.column(kk);
            let c = w[kk] * u[kk].norm_sqr();
            for r in 0..dim {
                for cidx in 0..dim {
                    a[[r, cidx]] += hk[r] * hk[cidx].conj() * c;
                }
                rhs[[r, kk]] = hk[r] * w[kk] * u[kk];
            }
        }
        let solve_with_mu = |mu: f64| -> Result<Array2<Complex64>> {
            let mut am = a.clone();
            for d in 0..dim {
                am[[d, d]] += Complex64::new(mu, 0.0);
            }
            solve(&am, &rhs)
        };
        let power_of = |vv: &Array2<Complex64>| -> f64 { vv.iter().map(|z| z.norm_sqr()).sum() };

        let feasible_unconstrained = match solve_with_mu(0.0) {
            Ok(v0) if power_of(&v0) <= budget => Some(v0),
            _ => None,
        };
        v = match feasible_unconstrained {
            Some(v0) => v0,
            None => {
                let rhs_energy = power_of(&rhs);
                let mut hi = (rhs_energy / budget).sqrt().max(1e-12);
                while power_of(&solve_with_mu(hi)?) > budget {
                    hi *= 2.0;
                }
                let mut lo = 0.0;
                let mut vmu = solve_with_mu(hi)?;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let cand = solve_with_mu(mid)?;
                    if power_of(&cand) > budget {
                        lo = mid;
                    } else {
                        hi = mid;
                        vmu = cand;
                    }
                    if (hi - lo) <= 1e-14 * hi.max(1.0) {
                        break;
                    }
                }
                vmu
            }
        };

        let obj = wmmse_surrogate(h_hat, &v, &u, &w, &alpha, sigma2);
        trace.push(obj);
        if obj < best_obj {
            best_obj = obj;
            best_v = v.clone();
        }
        if prev_obj.is_finite() && (prev_obj - obj).abs() <= opts.tol * prev_obj.abs().max(1.0) {
            converged = true;
            break;
        }
        prev_obj = obj;
    }
    Ok((best_v, converged, trace))
}
