//! Checkpoint persistence: one tensor file per parameter group plus a JSON
//! manifest. Tensors are stored at full 64-bit precision so a reloaded model
//! is bit-identical to the saved one.

use super::{BatchNorm, Dense, DnnMode, SuDnnModel};
use crate::error::{Error, Result};
use crate::tensor_file::{load_f64_tensor, save_f64_tensor};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: String,
    pub m: usize,
    pub n_rf: usize,
    pub l_a: usize,
    pub n_c: usize,
    pub n_f: usize,
    pub widths: Vec<usize>,
    pub epoch: usize,
    pub val_loss: f64,
    /// Optimizer betas used during training, recorded for provenance.
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

fn tensor_path(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.bin"))
}

pub fn save_checkpoint(dir: impl AsRef<Path>, model: &SuDnnModel, meta: &CheckpointMeta) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(meta).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), manifest).map_err(|e| Error::io(dir, e))?;

    let (l_a, n_rf, m) = model.sensing_phases.dim();
    save_f64_tensor(
        tensor_path(dir, "sensing_phases"),
        &["frame", "rf_chain", "antenna"],
        &[l_a, n_rf, m],
        model.sensing_phases.as_slice().unwrap(),
    )?;
    if let Some(conv) = &model.conv {
        save_f64_tensor(
            tensor_path(dir, "conv_filters"),
            &["filter", "subcarrier"],
            &[conv.nrows(), conv.ncols()],
            conv.as_slice().unwrap(),
        )?;
    }
    for (i, (layer, bn)) in model.layers.iter().zip(model.bns.iter()).enumerate() {
        save_f64_tensor(
            tensor_path(dir, &format!("layer{i}_weight")),
            &["in", "out"],
            &[layer.w.nrows(), layer.w.ncols()],
            layer.w.as_slice().unwrap(),
        )?;
        save_f64_tensor(
            tensor_path(dir, &format!("layer{i}_bias")),
            &["out"],
            &[layer.b.len()],
            layer.b.as_slice().unwrap(),
        )?;
        for (name, arr) in [
            ("gamma", &bn.gamma),
            ("beta", &bn.beta),
            ("running_mean", &bn.running_mean),
            ("running_var", &bn.running_var),
        ] {
            save_f64_tensor(
                tensor_path(dir, &format!("bn{i}_{name}")),
                &["feature"],
                &[arr.len()],
                arr.as_slice().unwrap(),
            )?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(SuDnnModel, CheckpointMeta)> {
    let dir = dir.as_ref();
    let manifest = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::io(dir.join("manifest.json"), e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let mode = match meta.mode.as_str() {
        "flat" => DnnMode::Flat,
        "ofdm" => DnnMode::Ofdm,
        other => return Err(Error::Format(format!("unknown checkpoint mode {other:?}"))),
    };

    let (h, data) = load_f64_tensor(tensor_path(dir, "sensing_phases"))?;
    let shape = (h.layout.shape[0], h.layout.shape[1], h.layout.shape[2]);
    let sensing_phases =
        Array3::from_shape_vec(shape, data).map_err(|e| Error::Format(e.to_string()))?;

    let conv = if mode == DnnMode::Ofdm {
        let (h, data) = load_f64_tensor(tensor_path(dir, "conv_filters"))?;
        Some(
            Array2::from_shape_vec((h.layout.shape[0], h.layout.shape[1]), data)
                .map_err(|e| Error::Format(e.to_string()))?,
        )
    } else {
        None
    };

    let layer_count = meta.widths.len() + 1;
    let mut layers = Vec::with_capacity(layer_count);
    let mut bns = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let (h, data) = load_f64_tensor(tensor_path(dir, &format!("layer{i}_weight")))?;
        let w = Array2::from_shape_vec((h.layout.shape[0], h.layout.shape[1]), data)
            .map_err(|e| Error::Format(e.to_string()))?;
        let (_, b) = load_f64_tensor(tensor_path(dir, &format!("layer{i}_bias")))?;
        layers.push(Dense {
            w,
            b: Array1::from_vec(b),
        });
        let mut parts = Vec::new();
        for name in ["gamma", "beta", "running_mean", "running_var"] {
            let (_, v) = load_f64_tensor(tensor_path(dir, &format!("bn{i}_{name}")))?;
            parts.push(Array1::from_vec(v));
        }
        let running_var = parts.pop().unwrap();
        let running_mean = parts.pop().unwrap();
        let beta = parts.pop().unwrap();
        let gamma = parts.pop().unwrap();
        bns.push(BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        });
    }

    let model = SuDnnModel {
        mode,
        sensing_phases,
        conv,
        bns,
        layers,
        m: meta.m,
        n_c: meta.n_c,
    };
    Ok((model, meta))
}

/// Manifest for a trained model produced by the trainer.
pub fn meta_for(model: &SuDnnModel, epoch: usize, val_loss: f64) -> CheckpointMeta {
    CheckpointMeta {
        mode: match model.mode {
            DnnMode::Flat => "flat".into(),
            DnnMode::Ofdm => "ofdm".into(),
        },
        m: model.m(),
        n_rf: model.n_rf(),
        l_a: model.l_a(),
        n_c: model.n_c(),
        n_f: model.n_f(),
        widths: model.hidden_widths(),
        epoch,
        val_loss,
        adam_beta1: 0.9,
        adam_beta2: 0.999,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SystemConfig;
    use crate::rng::stream;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let cfg = SystemConfig {
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
        };
        let mut rng = stream(400, 1);
        let mut model = SuDnnModel::new_ofdm(&cfg, &[9, 6], 3, &mut rng);
        // make running stats non-trivial so they are exercised too
        for bn in &mut model.bns {
            bn.running_mean.mapv_inplace(|_| 0.123);
            bn.running_var.mapv_inplace(|_| 2.5);
        }
        let dir = tempfile::tempdir().unwrap();
        let meta = meta_for(&model, 17, -3.25);
        save_checkpoint(dir.path(), &model, &meta).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(loaded, model);
    }

    #[test]
    fn flat_checkpoint_round_trips() {
        let cfg = SystemConfig {
            m_h: 2,
            m_v: 2,
            n_rf: 2,
            k: 2,
            l: 3,
            l_a: 2,
            l_d: 1,
            ..SystemConfig::desk_flat()
        };
        let mut rng = stream(401, 1);
        let model = SuDnnModel::new_flat(&cfg, &[8, 5], &mut rng);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &meta_for(&model, 0, -1.0)).unwrap();
        let (loaded, _) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
