use std::path::Path;

use ndarray::Array3;

use super::CtVolume;
use crate::error::{Error, Result};

/// Voxel encoding of a headerless little-endian dump.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RawDType {
    I16,
    U16,
    U8,
    F32,
}

impl RawDType {
    pub fn bytes_per_voxel(self) -> usize {
        match self {
            RawDType::U8 => 1,
            RawDType::I16 | RawDType::U16 => 2,
            RawDType::F32 => 4,
        }
    }

    pub fn parse(code: &str) -> Result<Self> {
        match code {
            "i16" | "int16" => Ok(RawDType::I16),
            "u16" | "uint16" => Ok(RawDType::U16),
            "u8" | "uint8" => Ok(RawDType::U8),
            "f32" | "float32" => Ok(RawDType::F32),
            other => Err(Error::Config(format!("unknown raw dtype `{other}`"))),
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            RawDType::U8 => b[0] as f64,
            RawDType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            RawDType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            RawDType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        }
    }
}

/// Reads an `n × h × w` slice-major dump whose values are already Hounsfield units.
pub fn load_raw_volume(path: &Path, n: usize, h: usize, w: usize, dtype: RawDType) -> Result<CtVolume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bpv = dtype.bytes_per_voxel();
    let expected = (n * h * w * bpv) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut values = Vec::with_capacity(n * h * w);
    for chunk in bytes.chunks_exact(bpv) {
        let v = dtype.decode(chunk);
        if !v.is_finite() {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                message: "non-finite voxel".into(),
            });
        }
        values.push(v.round().clamp(super::HU_MIN, super::HU_MAX) as i16);
    }
    let voxels = Array3::from_shape_vec((n, h, w), values).expect("length checked above");
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "raw".into());
    CtVolume::new(voxels, None, id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_volume_and_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.raw");
        let mut bytes = Vec::new();
        for i in 0..64 * 64 {
            bytes.extend_from_slice(&((i % 200) as i16 - 100).to_le_bytes());
        }
        assert_eq!(bytes.len(), 8192);
        std::fs::write(&path, &bytes).unwrap();
        let v = load_raw_volume(&path, 1, 64, 64, RawDType::I16).unwrap();
        assert_eq!(v.dims(), (1, 64, 64));
        assert_eq!(v.voxels()[[0, 0, 1]], -99);

        std::fs::write(&path, &bytes[..8000]).unwrap();
        match load_raw_volume(&path, 1, 64, 64, RawDType::I16) {
            Err(Error::SizeMismatch { expected, actual }) => assert_eq!((expected, actual), (8192, 8000)),
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }
}
