//! CT volume ingestion, intensity normalization, dataset splits and phantoms.

mod cache;
mod dicom;
mod phantom;
mod raw;

pub use cache::{read_slice_cache, read_slice_file, write_slice_cache, write_slice_file, CacheEntry, SliceCache, INDEX_FILE};
pub use dicom::{load_dicom_series, write_dicom_slice};
pub use phantom::{generate_phantom, phantom_layout, Ellipse, PhantomSpec, SliceLayout, AIR_HU, BODY_HU, LUNG_HU, NODULE_HU};
pub use raw::{load_raw_volume, RawDType};

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Lower clamp of the calibrated intensity window (air).
pub const HU_MIN: f64 = -1024.0;
/// Upper clamp of the 12-bit intensity window.
pub const HU_MAX: f64 = 3071.0;
const HU_HALF_RANGE: f64 = (HU_MAX - HU_MIN) / 2.0;

/// Smallest accepted slice edge; one 32×32 tamper square must fit.
pub const MIN_SLICE_EDGE: usize = 32;

/// A stack of CT slices in Hounsfield units, clamped to `[HU_MIN, HU_MAX]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    voxels: Array3<i16>,
    pub spacing: Option<[f64; 3]>,
    pub source_id: String,
}

impl CtVolume {
    /// Validates geometry and clamps voxels into the calibrated window.
    pub fn new(mut voxels: Array3<i16>, spacing: Option<[f64; 3]>, source_id: impl Into<String>) -> Result<Self> {
        let (n, h, w) = voxels.dim();
        if n == 0 {
            return Err(Error::Geometry("volume has no slices".into()));
        }
        if h < MIN_SLICE_EDGE || w < MIN_SLICE_EDGE {
            return Err(Error::Geometry(format!(
                "slices are {h}x{w}; minimum is {MIN_SLICE_EDGE}x{MIN_SLICE_EDGE}"
            )));
        }
        voxels.mapv_inplace(|v| v.clamp(HU_MIN as i16, HU_MAX as i16));
        Ok(CtVolume {
            voxels,
            spacing,
            source_id: source_id.into(),
        })
    }

    pub fn voxels(&self) -> &Array3<i16> {
        &self.voxels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn n_slices(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn slice_hu(&self, i: usize) -> Array2<f64> {
        self.voxels
            .index_axis(ndarray::Axis(0), i)
            .mapv(f64::from)
    }

    /// Every slice normalized into `[-1, 1]`.
    pub fn slices(&self) -> Result<Vec<SliceRecord>> {
        (0..self.n_slices())
            .map(|i| {
                Ok(SliceRecord {
                    pixels: normalize_slice(self.slice_hu(i).view())?,
                    volume_id: self.source_id.clone(),
                    slice_index: i,
                })
            })
            .collect()
    }

    /// Rebuilds a volume from normalized slices, rounding to integer HU.
    pub fn from_normalized(slices: &[Array2<f64>], spacing: Option<[f64; 3]>, source_id: impl Into<String>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Geometry("volume has no slices".into()))?;
        let (h, w) = first.dim();
        let mut voxels = Array3::<i16>::zeros((slices.len(), h, w));
        for (i, s) in slices.iter().enumerate() {
            if s.dim() != (h, w) {
                return Err(Error::Geometry(format!("slice {i} is {:?}, expected {:?}", s.dim(), (h, w))));
            }
            let hu = denormalize_slice(s.view())?;
            voxels
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&hu.mapv(|v| v.round() as i16));
        }
        CtVolume::new(voxels, spacing, source_id)
    }
}

/// One normalized slice with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub pixels: Array2<f64>,
    pub volume_id: String,
    pub slice_index: usize,
}

/// Affine map of `[HU_MIN, HU_MAX]` onto `[-1, 1]`.
pub fn normalize_slice(hu: ArrayView2<f64>) -> Result<Array2<f64>> {
    for &v in hu.iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite("slice intensities".into()));
        }
        if !(HU_MIN..=HU_MAX).contains(&v) {
            return Err(Error::Invalid(format!(
                "intensity {v} outside the calibrated window [{HU_MIN}, {HU_MAX}]"
            )));
        }
    }
    Ok(hu.mapv(normalize_value))
}

pub fn normalize_value(hu: f64) -> f64 {
    (hu - HU_MIN) / HU_HALF_RANGE - 1.0
}

pub fn denormalize_value(p: f64) -> f64 {
    (p + 1.0) * HU_HALF_RANGE + HU_MIN
}

/// Inverse of [`normalize_slice`].
pub fn denormalize_slice(pixels: ArrayView2<f64>) -> Result<Array2<f64>> {
    for &v in pixels.iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite("normalized pixels".into()));
        }
        if !(-1.0..=1.0).contains(&v) {
            return Err(Error::Invalid(format!("normalized pixel {v} outside [-1, 1]")));
        }
    }
    Ok(pixels.mapv(denormalize_value))
}

/// Volume-level train/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

/// Seeded shuffle, then the first `floor(ratio · total)` ids train.
pub fn split_dataset(volume_ids: &[String], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if volume_ids.is_empty() {
        return Err(Error::Invalid("cannot split an empty id list".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut ids = volume_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // Nudge so that e.g. 0.29 · 100 floors to 29, not 28.
    let n_train = ((ratio * ids.len() as f64) + 1e-9).floor() as usize;
    let test_ids = ids.split_off(n_train);
    Ok(DatasetSplit {
        train_ids: ids,
        test_ids,
        seed,
    })
}
