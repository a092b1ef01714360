//! Per-user analog-precoding network.
//!
//! One network maps a user's received analog-phase pilots straight to that
//! user's unit-modulus analog precoder column; the trained weights are shared
//! by every user branch, so a single trained model serves any number of
//! users. Layout:
//!
//! * sensing stage: `L_a` trainable unit-modulus combiner frames, applied to
//!   `sqrt(P_U) * h + n` per frame (the uplink reception itself);
//! * multicarrier only: a bank of `N_f` real convolution filters, each a
//!   length-`N_c` stripe dotted against every row of the real-valued pilot
//!   block, ReLU, features concatenated;
//! * a cascade of dense layers (ReLU, each preceded by batch normalization)
//!   closing with a linear 2M-wide head;
//! * entry-wise complex normalization x/|x| onto the unit-modulus constraint
//!   set (0 maps to 1, with zero gradient).
//!
//! Training minimizes the negative sum of per-user spectral-efficiency terms
//! `-log2(1 + P_D/(M K sigma2) |h^H v|^2)`, summed over subcarriers in the
//! multicarrier case.

mod batch;
mod checkpoint;
mod gradcheck;
mod train;

pub use batch::{
    batch_loss, batch_loss_and_grad, batch_loss_probed, BatchEval, BatchInputs, BnMode, Gradients,
    LossConsts, SignProbe,
};
pub use checkpoint::{load_checkpoint, meta_for, save_checkpoint, CheckpointMeta};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};

use crate::channel::MultiUserChannel;
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::pilots::{PilotObservation, SensingMatrix};
use crate::rng::{sample_cn, sample_phase};
use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub(crate) const BN_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DnnMode {
    Flat,
    Ofdm,
}

/// Dense layer; weights are (input, output) so activations multiply from the
/// left as (batch, input) . (input, output).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Batch normalization with running statistics for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn identity(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }
}

/// All trainable state of one single-user network.
#[derive(Debug, Clone, PartialEq)]
pub struct SuDnnModel {
    pub mode: DnnMode,
    /// Sensing phases, (L_a, N_RF, M).
    pub sensing_phases: Array3<f64>,
    /// Convolution filter bank (N_f, N_c); multicarrier mode only.
    pub conv: Option<Array2<f64>>,
    /// One batch-norm per dense layer, applied to that layer's input.
    pub bns: Vec<BatchNorm>,
    pub layers: Vec<Dense>,
    /// Antenna count implied by the 2M-wide output head.
    m: usize,
    n_c: usize,
}

impl SuDnnModel {
    /// Fresh single-carrier model. Hidden widths follow `widths`; the output
    /// head is 2M wide. Weights are zero-mean Gaussian with variance
    /// 2/fan-in, biases zero, sensing phases uniform on [0, 2*pi).
    pub fn new_flat(cfg: &SystemConfig, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        Self::build(cfg, widths, None, rng)
    }

    /// Fresh multicarrier model with `n_f` convolution filters of length N_c
    /// (Gaussian init, variance 1/N_c).
    pub fn new_ofdm(cfg: &SystemConfig, widths: &[usize], n_f: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::build(cfg, widths, Some(n_f), rng)
    }

    fn build(cfg: &SystemConfig, widths: &[usize], n_f: Option<usize>, rng: &mut ChaCha8Rng) -> Self {
        let m = cfg.m();
        let sensing_phases =
            Array3::from_shape_fn((cfg.l_a, cfg.n_rf, m), |_| sample_phase(rng));
        let conv = n_f.map(|nf| {
            let std = (1.0 / cfg.n_c as f64).sqrt();
            Array2::from_shape_fn((nf, cfg.n_c), |_| std * rng.sample::<f64, _>(StandardNormal))
        });
        let input_dim = match n_f {
            None => 2 * cfg.l_a * cfg.n_rf,
            Some(nf) => nf * 2 * cfg.l_a * cfg.n_rf,
        };
        let mut dims = vec![input_dim];
        dims.extend_from_slice(widths);
        dims.push(2 * m);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut bns = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| std * rng.sample::<f64, _>(StandardNormal));
            layers.push(Dense {
                w,
                b: Array1::zeros(fan_out),
            });
            bns.push(BatchNorm::identity(fan_in));
        }
        SuDnnModel {
            mode: if n_f.is_some() { DnnMode::Ofdm } else { DnnMode::Flat },
            sensing_phases,
            conv,
            bns,
            layers,
            m,
            n_c: cfg.n_c,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    pub fn l_a(&self) -> usize {
        self.sensing_phases.dim().0
    }

    pub fn n_rf(&self) -> usize {
        self.sensing_phases.dim().1
    }

    pub fn n_f(&self) -> usize {
        self.conv.as_ref().map_or(0, |c| c.nrows())
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.w.ncols()).collect()
    }

    /// The trained sensing stage as an analog combiner for the uplink.
    pub fn analog_sensing(&self) -> SensingMatrix {
        SensingMatrix::from_phases(self.sensing_phases.clone())
    }

    fn fc_input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    /// Intermediate layers + normalization on an already-received pilot
    /// block (inference-mode batch norm). Output entries all have unit
    /// modulus.
    pub fn precode_from_pilots(&self, obs: &PilotObservation) -> Result<Array1<Complex64>> {
        let rows = self.l_a() * self.n_rf();
        if obs.y.nrows() != rows || obs.y.ncols() != self.n_c {
            return Err(Error::DimMismatch(format!(
                "pilot block is {}x{}, model expects {}x{}",
                obs.y.nrows(),
                obs.y.ncols(),
                rows,
                self.n_c
            )));
        }
        let x0 = match self.mode {
            DnnMode::Flat => {
                let mut x = Array1::zeros(2 * rows);
                for r in 0..rows {
                    x[r] = obs.y[[r, 0]].re;
                    x[rows + r] = obs.y[[r, 0]].im;
                }
                x
            }
            DnnMode::Ofdm => {
                let filters = self.conv.as_ref().expect("ofdm model has filters");
                let nf = filters.nrows();
                // real representation: Re rows then Im rows, each length N_c
                let mut x = Array1::zeros(nf * 2 * rows);
                for f in 0..nf {
                    for r in 0..2 * rows {
                        let mut acc = 0.0;
                        for j in 0..self.n_c {
                            let v = if r < rows {
                                obs.y[[r, j]].re
                            } else {
                                obs.y[[r - rows, j]].im
                            };
                            acc += filters[[f, j]] * v;
                        }
                        x[f * 2 * rows + r] = acc.max(0.0);
                    }
                }
                x
            }
        };
        Ok(self.head_from_features(&x0))
    }

    /// Dense cascade (inference batch norm) + complex normalization.
    fn head_from_features(&self, x0: &Array1<f64>) -> Array1<Complex64> {
        debug_assert_eq!(x0.len(), self.fc_input_dim());
        let last = self.layers.len() - 1;
        let mut x = x0.clone();
        for (i, (layer, bn)) in self.layers.iter().zip(self.bns.iter()).enumerate() {
            let mut z = Array1::zeros(x.len());
            for d in 0..x.len() {
                let inv = 1.0 / (bn.running_var[d] + BN_EPS).sqrt();
                z[d] = bn.gamma[d] * (x[d] - bn.running_mean[d]) * inv + bn.beta[d];
            }
            let mut a = z.dot(&layer.w) + &layer.b;
            if i < last {
                a.mapv_inplace(|v| v.max(0.0));
            }
            x = a;
        }
        normalize_to_unit_modulus(&x, self.m)
    }

    /// Full single-carrier forward: simulate the sensing stage on a channel
    /// with fresh antenna noise from `rng`, then run the network.
    /// P_U and sigma2 come from `cfg`, so one model can be probed at any SNR.
    pub fn forward_flat(
        &self,
        h: &Array1<Complex64>,
        rng: &mut ChaCha8Rng,
        cfg: &SystemConfig,
    ) -> Result<Array1<Complex64>> {
        if self.mode != DnnMode::Flat {
            return Err(Error::Invalid("forward_flat called on a multicarrier model".into()));
        }
        if h.len() != self.m {
            return Err(Error::DimMismatch(format!(
                "channel has {} antennas, model expects {}",
                h.len(),
                self.m
            )));
        }
        let rows = self.l_a() * self.n_rf();
        let sqrt_pu = cfg.p_u.sqrt();
        let mut y = Array2::zeros((rows, 1));
        for l in 0..self.l_a() {
            let mut u = Array1::zeros(self.m);
            for mm in 0..self.m {
                let noise = if cfg.sigma2 > 0.0 {
                    sample_cn(rng, cfg.sigma2)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                u[mm] = sqrt_pu * h[mm] + noise;
            }
            for n in 0..self.n_rf() {
                let mut acc = Complex64::new(0.0, 0.0);
                for mm in 0..self.m {
                    let p = self.sensing_phases[[l, n, mm]];
                    acc += Complex64::new(p.cos(), p.sin()) * u[mm];
                }
                y[[l * self.n_rf() + n, 0]] = acc;
            }
        }
        self.precode_from_pilots(&PilotObservation {
            y,
            phase: crate::pilots::PilotPhase::Analog,
        })
    }
}

/// Entry-wise x/|x| onto the unit circle; a zero entry maps to 1.
pub(crate) fn normalize_to_unit_modulus(out: &Array1<f64>, m: usize) -> Array1<Complex64> {
    debug_assert_eq!(out.len(), 2 * m);
    Array1::from_shape_fn(m, |i| {
        let z = Complex64::new(out[i], out[m + i]);
        let r = z.norm();
        if r == 0.0 {
            Complex64::new(1.0, 0.0)
        } else {
            z / r
        }
    })
}

/// Negative per-realization spectral-efficiency proxy for the flat case:
/// -sum_k log2(1 + P_D/(M K sigma2) |h_k^H v_k|^2). Nonpositive; zero
/// channels contribute zero.
pub fn loss_flat(
    v_cols: &[Array1<Complex64>],
    h: &[Array1<Complex64>],
    cfg: &SystemConfig,
) -> Result<f64> {
    if v_cols.len() != h.len() {
        return Err(Error::DimMismatch(format!(
            "{} precoder columns vs {} channels",
            v_cols.len(),
            h.len()
        )));
    }
    let c = LossConsts::from_config(cfg)?.c;
    let mut total = 0.0;
    for (v, hk) in v_cols.iter().zip(h.iter()) {
        let t: Complex64 = hk.iter().zip(v.iter()).map(|(hi, vi)| hi.conj() * vi).sum();
        total -= (1.0 + c * t.norm_sqr()).log2();
    }
    Ok(total)
}

/// Multicarrier loss: the flat per-term expression summed over users and
/// subcarriers.
pub fn loss_ofdm(
    v_cols: &[Array1<Complex64>],
    h: &[Array2<Complex64>],
    cfg: &SystemConfig,
) -> Result<f64> {
    if v_cols.len() != h.len() {
        return Err(Error::DimMismatch(format!(
            "{} precoder columns vs {} channels",
            v_cols.len(),
            h.len()
        )));
    }
    let c = LossConsts::from_config(cfg)?.c;
    let mut total = 0.0;
    for (v, hk) in v_cols.iter().zip(h.iter()) {
        for j in 0..hk.ncols() {
            let t: Complex64 = hk
                .column(j)
                .iter()
                .zip(v.iter())
                .map(|(hi, vi)| hi.conj() * vi)
                .sum();
            total -= (1.0 + c * t.norm_sqr()).log2();
        }
    }
    Ok(total)
}

/// Stack per-user precoder columns from one tied model: column k is the
/// model applied to user k's pilots. Fails when more users than RF chains
/// are requested.
pub fn build_analog_precoder(
    model: &SuDnnModel,
    obs: &[PilotObservation],
    n_rf: usize,
) -> Result<Array2<Complex64>> {
    let k = obs.len();
    if k > n_rf {
        return Err(Error::Invalid(format!("K = {k} exceeds N_RF = {n_rf}")));
    }
    if k == 0 {
        return Err(Error::Invalid("no users to precode".into()));
    }
    let m = model.m();
    let mut v_rf = Array2::zeros((m, k));
    for (uk, o) in obs.iter().enumerate() {
        let col = model.precode_from_pilots(o)?;
        for r in 0..m {
            v_rf[[r, uk]] = col[r];
        }
    }
    Ok(v_rf)
}

/// Convenience: one channel realization evaluated through the tied model,
/// reusing `observe_pilots` for the sensing stage.
pub fn analog_precoder_from_channels(
    model: &SuDnnModel,
    h: &MultiUserChannel,
    cfg: &SystemConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<Complex64>> {
    let sensing = if cfg.q >= 2 {
        model.analog_sensing().quantized(cfg.q)
    } else {
        model.analog_sensing()
    };
    let obs = crate::pilots::observe_pilots(h, &sensing, cfg, rng, crate::pilots::PilotPhase::Analog)?;
    let mut v_rf = build_analog_precoder(model, &obs, cfg.n_rf)?;
    if cfg.q >= 2 {
        v_rf.mapv_inplace(|z| Complex64::from_polar(1.0, crate::pilots::quantize_phase(z.arg(), cfg.q)));
    }
    Ok(v_rf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilots::PilotPhase;
    use crate::rng::stream;

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

    #[test]
    fn output_is_always_unit_modulus() {
        let cfg = tiny_flat_cfg();
        let mut rng = stream(100, 1);
        let model = SuDnnModel::new_flat(&cfg, &[12, 8], &mut rng);
        for t in 0..20 {
            let mut crng = stream(101, t);
            let h = Array1::from_shape_fn(cfg.m(), |_| sample_cn(&mut crng, 1.0));
            let v = model.forward_flat(&h, &mut crng, &cfg).unwrap();
            for z in v.iter() {
                assert!((z.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalization_matches_hand_arithmetic() {
        // pre-normalization [3+4i, -2] -> [0.6+0.8i, -1]
        let out = Array1::from_vec(vec![3.0, -2.0, 4.0, 0.0]);
        let v = normalize_to_unit_modulus(&out, 2);
        assert!((v[0] - Complex64::new(0.6, 0.8)).norm() < 1e-15);
        assert!((v[1] - Complex64::new(-1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_entry_normalizes_to_one() {
        let out = Array1::from_vec(vec![0.0, 1.0, 0.0, 1.0]);
        let v = normalize_to_unit_modulus(&out, 2);
        assert_eq!(v[0], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn forward_is_deterministic_given_stream() {
        let cfg = tiny_flat_cfg();
        let mut rng = stream(102, 1);
        let model = SuDnnModel::new_flat(&cfg, &[12, 8], &mut rng);
        let h = Array1::from_shape_fn(cfg.m(), |_| sample_cn(&mut rng, 1.0));
        let va = model.forward_flat(&h, &mut stream(103, 5), &cfg).unwrap();
        let vb = model.forward_flat(&h, &mut stream(103, 5), &cfg).unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn delta_filter_extracts_first_subcarrier_column() {
        let cfg = tiny_ofdm_cfg();
        let mut rng = stream(104, 1);
        let mut model = SuDnnModel::new_ofdm(&cfg, &[10, 6], 1, &mut rng);
        let rows = cfg.l_a * cfg.n_rf;
        // delta filter selects subcarrier 0 of every real-representation row
        model.conv = Some(Array2::from_shape_fn((1, cfg.n_c), |(_, j)| if j == 0 { 1.0 } else { 0.0 }));
        let y = Array2::from_shape_fn((rows, cfg.n_c), |_| sample_cn(&mut rng, 1.0));
        let obs = PilotObservation {
            y: y.clone(),
            phase: PilotPhase::Analog,
        };
        // recompute the conv features exactly as the contract states
        let mut want = Vec::new();
        for r in 0..rows {
            want.push(y[[r, 0]].re.max(0.0));
        }
        for r in 0..rows {
            want.push(y[[r, 0]].im.max(0.0));
        }
        // reach into the forward path: identical fc input means identical output
        let v_direct = model.precode_from_pilots(&obs).unwrap();
        let v_manual = model.head_from_features(&Array1::from_vec(want));
        assert_eq!(v_direct, v_manual);
    }

    #[test]
    fn ofdm_output_is_unit_modulus() {
        let cfg = tiny_ofdm_cfg();
        let mut rng = stream(105, 1);
        let model = SuDnnModel::new_ofdm(&cfg, &[10, 6], 3, &mut rng);
        let y = Array2::from_shape_fn((cfg.l_a * cfg.n_rf, cfg.n_c), |_| sample_cn(&mut rng, 1.0));
        let v = model
            .precode_from_pilots(&PilotObservation {
                y,
                phase: PilotPhase::Analog,
            })
            .unwrap();
        assert_eq!(v.len(), cfg.m());
        for z in v.iter() {
            assert!((z.norm() - 1.0).abs() < 1e-9);
        }
    }

    // Straight-line re-implementation of the whole multicarrier forward.
    #[test]
    fn ofdm_forward_matches_scalar_oracle() {
        let cfg = tiny_ofdm_cfg();
        let mut rng = stream(106, 1);
        let model = SuDnnModel::new_ofdm(&cfg, &[10, 6], 3, &mut rng);
        let rows = cfg.l_a * cfg.n_rf;
        let y = Array2::from_shape_fn((rows, cfg.n_c), |_| sample_cn(&mut rng, 1.0));
        let v = model
            .precode_from_pilots(&PilotObservation {
                y: y.clone(),
                phase: PilotPhase::Analog,
            })
            .unwrap();

        // oracle: conv stage
        let filters = model.conv.as_ref().unwrap();
        let nf = filters.nrows();
        let mut feats = vec![0.0; nf * 2 * rows];
        for f in 0..nf {
            for r in 0..2 * rows {
                let mut acc = 0.0;
                for j in 0..cfg.n_c {
                    let val = if r < rows { y[[r, j]].re } else { y[[r - rows, j]].im };
                    acc += filters[[f, j]] * val;
                }
                feats[f * 2 * rows + r] = acc.max(0.0);
            }
        }
        // oracle: dense cascade with inference batch norm
        let mut x = feats;
        for (i, (layer, bn)) in model.layers.iter().zip(model.bns.iter()).enumerate() {
            let mut z = vec![0.0; x.len()];
            for d in 0..x.len() {
                z[d] = bn.gamma[d] * (x[d] - bn.running_mean[d]) / (bn.running_var[d] + BN_EPS).sqrt()
                    + bn.beta[d];
            }
            let out_dim = layer.w.ncols();
            let mut a = vec![0.0; out_dim];
            for o in 0..out_dim {
                let mut acc = layer.b[o];
                for d in 0..z.len() {
                    acc += z[d] * layer.w[[d, o]];
                }
                a[o] = if i < model.layers.len() - 1 { acc.max(0.0) } else { acc };
            }
            x = a;
        }
        for i in 0..cfg.m() {
            let zi = Complex64::new(x[i], x[cfg.m() + i]);
            let want = if zi.norm() == 0.0 {
                Complex64::new(1.0, 0.0)
            } else {
                zi / zi.norm()
            };
            assert!((v[i] - want).norm() < 1e-10, "entry {i}");
        }
    }

    #[test]
    fn loss_flat_examples() {
        let mut cfg = tiny_flat_cfg();
        cfg.p_d = 1.0;
        cfg.sigma2 = 1.0;
        cfg.k = 1;
        // zero channel contributes zero loss
        let z = Array1::zeros(cfg.m());
        let v = Array1::from_elem(cfg.m(), Complex64::new(1.0, 0.0));
        assert_eq!(loss_flat(&[v.clone()], &[z], &cfg).unwrap(), 0.0);
        // orthogonal v and h: M=2 via a 2-antenna config
        let cfg2 = SystemConfig {
            m_h: 2,
            m_v: 1,
            n_rf: 1,
            k: 1,
            p_d: 1.0,
            sigma2: 1.0,
            ..SystemConfig::desk_flat()
        };
        let h = Array1::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)]);
        let v2 = Array1::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)]);
        assert_eq!(loss_flat(&[v2], &[h], &cfg2).unwrap(), 0.0);
    }

    #[test]
    fn phase_matching_minimizes_flat_loss() {
        let mut cfg = tiny_flat_cfg();
        cfg.k = 1;
        let mut rng = stream(107, 1);
        let h = Array1::from_shape_fn(cfg.m(), |_| sample_cn(&mut rng, 1.0));
        let v_pm = crate::baselines::phase_match(&h);
        let best = loss_flat(&[v_pm], &[h.clone()], &cfg).unwrap();
        // closed form: -log2(1 + c * (sum |h_i|)^2)
        let c = cfg.p_d / (cfg.m() as f64 * cfg.k as f64 * cfg.sigma2);
        let amp: f64 = h.iter().map(|z| z.norm()).sum();
        assert!((best + (1.0 + c * amp * amp).log2()).abs() < 1e-12);
        for t in 0..10_000 {
            let mut urng = stream(108, t);
            let u = Array1::from_shape_fn(cfg.m(), |_| {
                Complex64::from_polar(1.0, sample_phase(&mut urng))
            });
            let l = loss_flat(&[u], &[h.clone()], &cfg).unwrap();
            assert!(l >= best - 1e-12, "random beam beat phase matching: {l} < {best}");
        }
    }

    #[test]
    fn ofdm_loss_reduces_to_flat_on_one_subcarrier() {
        let cfg = tiny_flat_cfg();
        let mut rng = stream(109, 1);
        let h1: Vec<Array1<Complex64>> = (0..cfg.k)
            .map(|_| Array1::from_shape_fn(cfg.m(), |_| sample_cn(&mut rng, 1.0)))
            .collect();
        let h2: Vec<Array2<Complex64>> = h1
            .iter()
            .map(|h| Array2::from_shape_fn((cfg.m(), 1), |(r, _)| h[r]))
            .collect();
        let v: Vec<Array1<Complex64>> = (0..cfg.k)
            .map(|_| {
                Array1::from_shape_fn(cfg.m(), |_| Complex64::from_polar(1.0, sample_phase(&mut rng)))
            })
            .collect();
        let a = loss_flat(&v, &h1, &cfg).unwrap();
        let b = loss_ofdm(&v, &h2, &cfg).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn ofdm_loss_matches_term_by_term_oracle() {
        let cfg = tiny_ofdm_cfg();
        let mut rng = stream(110, 1);
        let h: Vec<Array2<Complex64>> = (0..cfg.k)
            .map(|_| Array2::from_shape_fn((cfg.m(), cfg.n_c), |_| sample_cn(&mut rng, 1.0)))
            .collect();
        let v: Vec<Array1<Complex64>> = (0..cfg.k)
            .map(|_| {
                Array1::from_shape_fn(cfg.m(), |_| Complex64::from_polar(1.0, sample_phase(&mut rng)))
            })
            .collect();
        let got = loss_ofdm(&v, &h, &cfg).unwrap();
        let c = cfg.p_d / (cfg.m() as f64 * cfg.k as f64 * cfg.sigma2);
        let mut want = 0.0;
        for k in 0..cfg.k {
            for j in 0..cfg.n_c {
                let mut t = Complex64::new(0.0, 0.0);
                for m in 0..cfg.m() {
                    t += h[k][[m, j]].conj() * v[k][m];
                }
                want -= (1.0 + c * t.norm_sqr()).log2();
            }
        }
        assert!((got - want).abs() / want.abs() < 1e-12);
    }

    #[test]
    fn losses_are_nonpositive_and_finite() {
        let cfg = tiny_flat_cfg();
        let mut rng = stream(111, 1);
        for _ in 0..50 {
            let h: Vec<Array1<Complex64>> = (0..cfg.k)
                .map(|_| Array1::from_shape_fn(cfg.m(), |_| sample_cn(&mut rng, 1.0)))
                .collect();
            let v: Vec<Array1<Complex64>> = (0..cfg.k)
                .map(|_| {
                    Array1::from_shape_fn(cfg.m(), |_| Complex64::from_polar(1.0, sample_phase(&mut rng)))
                })
                .collect();
            let l = loss_flat(&v, &h, &cfg).unwrap();
            assert!(l <= 0.0 && l.is_finite());
        }
    }

    #[test]
    fn replication_is_permutation_equivariant() {
        let cfg = tiny_flat_cfg();
        let mut rng = stream(112, 1);
        let model = SuDnnModel::new_flat(&cfg, &[12, 8], &mut rng);
        let rows = cfg.l_a * cfg.n_rf;
        let mk_obs = |seed: u64| -> PilotObservation {
            let mut r = stream(113, seed);
            PilotObservation {
                y: Array2::from_shape_fn((rows, 1), |_| sample_cn(&mut r, 1.0)),
                phase: PilotPhase::Analog,
            }
        };
        let obs: Vec<PilotObservation> = (0..2).map(mk_obs).collect();
        let fwd = build_analog_precoder(&model, &obs, cfg.n_rf).unwrap();
        let rev: Vec<PilotObservation> = obs.iter().rev().cloned().collect();
        let bwd = build_analog_precoder(&model, &rev, cfg.n_rf).unwrap();
        for r in 0..cfg.m() {
            assert_eq!(fwd[[r, 0]], bwd[[r, 1]]);
            assert_eq!(fwd[[r, 1]], bwd[[r, 0]]);
        }
    }

    #[test]
    fn too_many_users_is_rejected() {
        let cfg = tiny_flat_cfg();
        let mut rng = stream(114, 1);
        let model = SuDnnModel::new_flat(&cfg, &[12, 8], &mut rng);
        let rows = cfg.l_a * cfg.n_rf;
        let obs: Vec<PilotObservation> = (0..3)
            .map(|_| PilotObservation {
                y: Array2::zeros((rows, 1)),
                phase: PilotPhase::Analog,
            })
            .collect();
        assert!(build_analog_precoder(&model, &obs, 2).is_err());
    }

    #[test]
    fn split_calls_match_joint_call() {
        let cfg = tiny_flat_cfg();
        let mut rng = stream(115, 1);
        let model = SuDnnModel::new_flat(&cfg, &[12, 8], &mut rng);
        let rows = cfg.l_a * cfg.n_rf;
        let obs: Vec<PilotObservation> = (0..2)
            .map(|i| {
                let mut r = stream(116, i);
                PilotObservation {
                    y: Array2::from_shape_fn((rows, 1), |_| sample_cn(&mut r, 1.0)),
                    phase: PilotPhase::Analog,
                }
            })
            .collect();
        let joint = build_analog_precoder(&model, &obs, cfg.n_rf).unwrap();
        let a = build_analog_precoder(&model, &obs[..1], cfg.n_rf).unwrap();
        let b = build_analog_precoder(&model, &obs[1..], cfg.n_rf).unwrap();
        for r in 0..cfg.m() {
            assert_eq!(joint[[r, 0]], a[[r, 0]]);
            assert_eq!(joint[[r, 1]], b[[r, 0]]);
        }
    }

    #[test]
    fn quantized_precoder_lies_on_grid() {
        let mut cfg = tiny_flat_cfg();
        cfg.q = 8;
        let mut rng = stream(117, 1);
        let model = SuDnnModel::new_flat(&cfg, &[12, 8], &mut rng);
        let h: MultiUserChannel = (0..cfg.k)
            .map(|_| Array2::from_shape_fn((cfg.m(), 1), |_| sample_cn(&mut rng, 1.0)))
            .collect();
        let v = analog_precoder_from_channels(&model, &h, &cfg, &mut stream(118, 1)).unwrap();
        for z in v.iter() {
            let steps = z.arg().rem_euclid(std::f64::consts::TAU) * 8.0 / std::f64::consts::TAU;
            assert!((steps - steps.round()).abs() < 1e-9, "phase off grid: {}", z.arg());
        }
    }
}
