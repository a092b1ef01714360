//! Tensor persistence: one JSON header line, then a raw binary payload.
//!
//! Channel datasets store complex tensors as little-endian 32-bit floats with
//! interleaved real/imaginary parts (halves file size; plenty for rate
//! curves). Checkpoints use the same container with a 64-bit real payload so
//! parameters round-trip bit-exactly. The header documents the dimension
//! order, so a file is self-describing.

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const DTYPE_C64_F32: &str = "c64-interleaved-f32-le";
pub const DTYPE_F64: &str = "f64-le";

/// Payload layout descriptor stored in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    /// Dimension names, outermost first (e.g. sample, user, antenna, subcarrier).
    pub dims: Vec<String>,
    pub shape: Vec<usize>,
    pub dtype: String,
}

impl Layout {
    pub fn new(dims: &[&str], shape: &[usize], dtype: &str) -> Self {
        Layout {
            dims: dims.iter().map(|s| s.to_string()).collect(),
            shape: shape.to_vec(),
            dtype: dtype.to_string(),
        }
    }

    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Header of a channel-dataset file: config snapshot plus payload layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub config: SystemConfig,
    pub sample_count: usize,
    pub layout: Layout,
}

fn write_container(path: &Path, header_json: &str, payload: &[u8]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(header_json.as_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    file.write_all(payload).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(String, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("{}: missing header line", path.display())))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Format(format!("{}: header is not UTF-8", path.display())))?
        .to_string();
    Ok((header, bytes[split + 1..].to_vec()))
}

/// Write a complex tensor with its header. The payload must match the
/// header's layout exactly.
pub fn save_dataset(path: impl AsRef<Path>, header: &DatasetHeader, payload: &[Complex64]) -> Result<()> {
    let path = path.as_ref();
    if header.layout.dtype != DTYPE_C64_F32 {
        return Err(Error::Format(format!("dataset dtype must be {DTYPE_C64_F32}")));
    }
    if header.layout.elements() != payload.len() {
        return Err(Error::DimMismatch(format!(
            "payload has {} elements, header claims {}",
            payload.len(),
            header.layout.elements()
        )));
    }
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for z in payload {
        bytes.extend_from_slice(&(z.re as f32).to_le_bytes());
        bytes.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    let header_json = serde_json::to_string(header).map_err(|e| Error::Format(e.to_string()))?;
    write_container(path, &header_json, &bytes)
}

/// Read back a complex tensor. Fails if the payload size disagrees with the
/// header (truncated or padded file).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<Complex64>)> {
    let path = path.as_ref();
    let (header_json, payload) = read_container(path)?;
    let header: DatasetHeader =
        serde_json::from_str(&header_json).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if header.layout.dtype != DTYPE_C64_F32 {
        return Err(Error::Format(format!("{}: unexpected dtype {}", path.display(), header.layout.dtype)));
    }
    let expected = header.layout.elements() * 8;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, header claims {} (truncated?)",
            path.display(),
            payload.len(),
            expected
        )));
    }
    let mut out = Vec::with_capacity(header.layout.elements());
    for chunk in payload.chunks_exact(8) {
        let re = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
        let im = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        out.push(Complex64::new(re as f64, im as f64));
    }
    Ok((header, out))
}

/// Minimal header for real-valued tensors (checkpoint parameter groups).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub layout: Layout,
}

/// Write a real tensor at full precision (checkpoints must round-trip
/// bit-exactly).
pub fn save_f64_tensor(path: impl AsRef<Path>, dims: &[&str], shape: &[usize], data: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let layout = Layout::new(dims, shape, DTYPE_F64);
    if layout.elements() != data.len() {
        return Err(Error::DimMismatch(format!(
            "tensor has {} elements, shape claims {}",
            data.len(),
            layout.elements()
        )));
    }
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let header = TensorHeader { layout };
    let header_json = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    write_container(path, &header_json, &bytes)
}

pub fn load_f64_tensor(path: impl AsRef<Path>) -> Result<(TensorHeader, Vec<f64>)> {
    let path = path.as_ref();
    let (header_json, payload) = read_container(path)?;
    let header: TensorHeader =
        serde_json::from_str(&header_json).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if header.layout.dtype != DTYPE_F64 {
        return Err(Error::Format(format!("{}: unexpected dtype {}", path.display(), header.layout.dtype)));
    }
    let expected = header.layout.elements() * 8;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, header claims {} (truncated?)",
            path.display(),
            payload.len(),
            expected
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_header(shape: &[usize]) -> DatasetHeader {
        DatasetHeader {
            config: SystemConfig::desk_flat(),
            sample_count: shape[0],
            layout: Layout::new(&["sample", "user", "antenna", "subcarrier"], shape, DTYPE_C64_F32),
        }
    }

    #[test]
    fn identity_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("id.bin");
        let payload = vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0, 0.0),
        ];
        let header = small_header(&[1, 1, 2, 2]);
        save_dataset(&path, &header, &payload).unwrap();
        let (h2, p2) = load_dataset(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(p2, payload);
    }

    #[test]
    fn rewrite_of_loaded_data_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let mut rng = crate::rng::stream(9, 1);
        let payload: Vec<Complex64> = (0..64).map(|_| crate::rng::sample_cn(&mut rng, 1.0)).collect();
        let header = small_header(&[4, 1, 4, 4]);
        save_dataset(&a, &header, &payload).unwrap();
        let (h, p) = load_dataset(&a).unwrap();
        save_dataset(&b, &h, &p).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let header = small_header(&[1, 1, 1, 4]);
        let payload = vec![Complex64::new(0.5, -0.5); 4];
        save_dataset(&path, &header, &payload).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn payload_shape_mismatch_is_rejected_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let header = small_header(&[1, 1, 1, 4]);
        assert!(save_dataset(&path, &header, &[Complex64::default(); 3]).is_err());
    }

    #[test]
    fn f64_tensor_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let data: Vec<f64> = (0..12).map(|i| (i as f64).sin() * 1e-3 + 0.1).collect();
        save_f64_tensor(&path, &["rows", "cols"], &[3, 4], &data).unwrap();
        let (h, d) = load_f64_tensor(&path).unwrap();
        assert_eq!(h.layout.shape, vec![3, 4]);
        assert_eq!(d, data);
    }
}
