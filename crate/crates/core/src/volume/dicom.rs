use std::path::{Path, PathBuf};

use dicom_core::{DataElement, PrimitiveValue, Tag, VR};
use dicom_dictionary_std::{tags, uids};
use dicom_object::{open_file, FileMetaTableBuilder, InMemDicomObject};
use ndarray::{Array3, ArrayView2};

use super::{CtVolume, HU_MAX, HU_MIN};
use crate::error::{Error, Result};

struct Slice {
    path: PathBuf,
    z: Option<f64>,
    instance: Option<i64>,
    rows: usize,
    cols: usize,
    spacing: Option<[f64; 2]>,
    thickness: Option<f64>,
    hu: Vec<i16>,
}

fn ingest_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_slice(path: &Path) -> Result<Slice> {
    let obj = open_file(path).map_err(|e| ingest_err(path, e.to_string()))?;
    let int = |tag: Tag, name: &str| -> Result<i64> {
        obj.element(tag)
            .map_err(|_| ingest_err(path, format!("missing {name}")))?
            .to_int::<i64>()
            .map_err(|e| ingest_err(path, format!("bad {name}: {e}")))
    };
    let float_opt = |tag: Tag| -> Option<f64> {
        obj.element_opt(tag)
            .ok()
            .flatten()
            .and_then(|e| e.to_float64().ok())
    };
    let multi_opt = |tag: Tag| -> Option<Vec<f64>> {
        obj.element_opt(tag)
            .ok()
            .flatten()
            .and_then(|e| e.to_multi_float64().ok())
    };

    let rows = int(tags::ROWS, "Rows")? as usize;
    let cols = int(tags::COLUMNS, "Columns")? as usize;
    let bits = int(tags::BITS_ALLOCATED, "BitsAllocated")?;
    let signed = obj
        .element_opt(tags::PIXEL_REPRESENTATION)
        .ok()
        .flatten()
        .and_then(|e| e.to_int::<i64>().ok())
        .unwrap_or(0)
        == 1;
    let slope = float_opt(tags::RESCALE_SLOPE).unwrap_or(1.0);
    let intercept = float_opt(tags::RESCALE_INTERCEPT).unwrap_or(0.0);

    let pixel = obj
        .element(tags::PIXEL_DATA)
        .map_err(|_| ingest_err(path, "missing PixelData"))?;
    if pixel.value().fragments().is_some() {
        return Err(ingest_err(path, "compressed pixel data is not supported"));
    }
    let bytes = pixel
        .to_bytes()
        .map_err(|e| ingest_err(path, format!("bad PixelData: {e}")))?;
    let n = rows * cols;
    let stored: Vec<f64> = match (bits, signed) {
        (16, _) if bytes.len() >= 2 * n => bytes
            .chunks_exact(2)
            .take(n)
            .map(|b| {
                if signed {
                    i16::from_le_bytes([b[0], b[1]]) as f64
                } else {
                    u16::from_le_bytes([b[0], b[1]]) as f64
                }
            })
            .collect(),
        (8, _) if bytes.len() >= n => bytes
            .iter()
            .take(n)
            .map(|&b| if signed { b as i8 as f64 } else { b as f64 })
            .collect(),
        (16 | 8, _) => {
            return Err(ingest_err(
                path,
                format!("PixelData holds {} bytes, expected {}", bytes.len(), n * bits as usize / 8),
            ))
        }
        _ => return Err(ingest_err(path, format!("unsupported BitsAllocated {bits}"))),
    };
    let hu = stored
        .into_iter()
        .map(|v| (v * slope + intercept).round().clamp(HU_MIN, HU_MAX) as i16)
        .collect();

    let z = multi_opt(tags::IMAGE_POSITION_PATIENT).and_then(|p| p.get(2).copied());
    let spacing = multi_opt(tags::PIXEL_SPACING).and_then(|p| (p.len() >= 2).then(|| [p[0], p[1]]));
    let instance = obj
        .element_opt(tags::INSTANCE_NUMBER)
        .ok()
        .flatten()
        .and_then(|e| e.to_int::<i64>().ok());
    Ok(Slice {
        path: path.to_path_buf(),
        z,
        instance,
        rows,
        cols,
        spacing,
        thickness: float_opt(tags::SLICE_THICKNESS),
        hu,
    })
}

/// Loads one DICOM series from a directory, ordered along the slice axis.
///
/// Every regular file in the directory is treated as part of the series.
pub fn load_dicom_series(dir: &Path) -> Result<CtVolume> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::NoSlices(dir.to_path_buf()));
    }
    let mut slices = paths.iter().map(|p| read_slice(p)).collect::<Result<Vec<_>>>()?;

    let (rows, cols) = (slices[0].rows, slices[0].cols);
    if let Some(bad) = slices.iter().find(|s| (s.rows, s.cols) != (rows, cols)) {
        return Err(Error::Geometry(format!(
            "{} is {}x{} but the series is {rows}x{cols}",
            bad.path.display(),
            bad.rows,
            bad.cols
        )));
    }
    slices.sort_by(|a, b| {
        let za = a.z.unwrap_or(f64::NAN);
        let zb = b.z.unwrap_or(f64::NAN);
        za.partial_cmp(&zb)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.instance.cmp(&b.instance))
    });

    let dz = match (slices.first().and_then(|s| s.z), slices.get(1).and_then(|s| s.z)) {
        (Some(a), Some(b)) if b != a => Some((b - a).abs()),
        _ => slices[0].thickness,
    };
    let spacing = match (dz, slices[0].spacing) {
        (Some(dz), Some([r, c])) => Some([dz, r, c]),
        _ => None,
    };

    let n = slices.len();
    let mut data = Vec::with_capacity(n * rows * cols);
    for s in &slices {
        data.extend_from_slice(&s.hu);
    }
    let voxels = Array3::from_shape_vec((n, rows, cols), data).expect("geometry checked above");
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    CtVolume::new(voxels, spacing, id)
}

/// Writes one slice of Hounsfield units as an uncompressed 16-bit signed CT image.
pub fn write_dicom_slice(path: &Path, hu: ArrayView2<i16>, z: f64, instance: i32, series_uid: &str) -> Result<()> {
    let (rows, cols) = hu.dim();
    let bytes: Vec<u8> = hu.iter().flat_map(|v| v.to_le_bytes()).collect();
    let sop_uid = format!("{series_uid}.{instance}");
    let obj = InMemDicomObject::from_element_iter([
        DataElement::new(tags::SOP_CLASS_UID, VR::UI, PrimitiveValue::from(uids::CT_IMAGE_STORAGE)),
        DataElement::new(tags::SOP_INSTANCE_UID, VR::UI, PrimitiveValue::from(sop_uid.as_str())),
        DataElement::new(tags::MODALITY, VR::CS, PrimitiveValue::from("CT")),
        DataElement::new(tags::SERIES_INSTANCE_UID, VR::UI, PrimitiveValue::from(series_uid)),
        DataElement::new(tags::INSTANCE_NUMBER, VR::IS, PrimitiveValue::from(instance.to_string())),
        DataElement::new(
            tags::IMAGE_POSITION_PATIENT,
            VR::DS,
            PrimitiveValue::Strs(["0".to_string(), "0".to_string(), format!("{z}")].into_iter().collect()),
        ),
        DataElement::new(tags::SAMPLES_PER_PIXEL, VR::US, PrimitiveValue::from(1u16)),
        DataElement::new(tags::PHOTOMETRIC_INTERPRETATION, VR::CS, PrimitiveValue::from("MONOCHROME2")),
        DataElement::new(tags::ROWS, VR::US, PrimitiveValue::from(rows as u16)),
        DataElement::new(tags::COLUMNS, VR::US, PrimitiveValue::from(cols as u16)),
        DataElement::new(tags::BITS_ALLOCATED, VR::US, PrimitiveValue::from(16u16)),
        DataElement::new(tags::BITS_STORED, VR::US, PrimitiveValue::from(16u16)),
        DataElement::new(tags::HIGH_BIT, VR::US, PrimitiveValue::from(15u16)),
        DataElement::new(tags::PIXEL_REPRESENTATION, VR::US, PrimitiveValue::from(1u16)),
        DataElement::new(tags::RESCALE_INTERCEPT, VR::DS, PrimitiveValue::from("0")),
        DataElement::new(tags::RESCALE_SLOPE, VR::DS, PrimitiveValue::from("1")),
        DataElement::new(tags::PIXEL_DATA, VR::OW, PrimitiveValue::from(bytes)),
    ]);
    let file = obj
        .with_meta(
            FileMetaTableBuilder::new()
                .transfer_syntax(uids::EXPLICIT_VR_LITTLE_ENDIAN)
                .media_storage_sop_class_uid(uids::CT_IMAGE_STORAGE)
                .media_storage_sop_instance_uid(sop_uid.as_str()),
        )
        .map_err(|e| ingest_err(path, e.to_string()))?;
    file.write_to_file(path)
        .map_err(|e| ingest_err(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn write_series(dir: &Path, n: usize, size: usize) {
        // Written in reverse z order so sorting is exercised.
        for i in 0..n {
            let hu = Array2::from_shape_fn((size, size), |(y, x)| (i * 10 + y + x) as i16 - 1000);
            let z = -(i as f64) * 2.5;
            write_dicom_slice(&dir.join(format!("f{i:03}.dcm")), hu.view(), z, (n - i) as i32, "1.2.3").unwrap();
        }
    }

    #[test]
    fn reads_and_orders_series() {
        let dir = tempfile::tempdir().unwrap();
        write_series(dir.path(), 3, 64);
        let v = load_dicom_series(dir.path()).unwrap();
        assert_eq!(v.dims(), (3, 64, 64));
        // Lowest z first: file f002 (i = 2).
        assert_eq!(v.voxels()[[0, 0, 0]], 20 - 1000);
        assert_eq!(v.voxels()[[2, 0, 0]], -1000);
    }

    #[test]
    fn empty_directory_and_geometry_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dicom_series(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no DICOM slices found"));

        write_series(dir.path(), 2, 64);
        let odd = Array2::<i16>::zeros((32, 32));
        write_dicom_slice(&dir.path().join("odd.dcm"), odd.view(), 10.0, 9, "1.2.3").unwrap();
        assert!(matches!(load_dicom_series(dir.path()), Err(Error::Geometry(_))));
    }

    #[test]
    fn unreadable_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_series(dir.path(), 1, 64);
        std::fs::write(dir.path().join("junk.dcm"), b"not dicom").unwrap();
        let err = load_dicom_series(dir.path()).unwrap_err();
        assert!(err.to_string().contains("junk.dcm"), "{err}");
    }
}
