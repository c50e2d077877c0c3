//! Image fidelity metrics: RMSE, PSNR, SSIM, LPIPS, square-restricted
//! variants and difference heatmaps.
//!
//! Metric inputs live on the 12-bit scale `HU + 1024`, i.e. `[0, 4095]`;
//! use [`to_metric_scale`] on normalized slices.

mod heatmap;
mod lpips;

pub use heatmap::{heatmap, heatmap_u8, write_heatmap_png};
pub use lpips::{lpips, LpipsBackbone, LpipsNet, LPIPS_CHANNELS, LPIPS_SEED};

use std::fmt;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::manipulator::TamperRegion;
use crate::volume::denormalize_value;

pub const MAX_INTENSITY: f64 = 4095.0;
pub const SSIM_WINDOW: usize = 11;
/// Window used on the 32×32 tamper square, where 11×11 leaves too few positions.
pub const ROI_SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricConfig {
    pub max_intensity: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub lpips_backbone: LpipsBackbone,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            max_intensity: MAX_INTENSITY,
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            lpips_backbone: LpipsBackbone::FixedRandom,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_intensity > 0.0 && self.max_intensity.is_finite()) {
            return Err(Error::Config(format!("max_intensity {} must be positive", self.max_intensity)));
        }
        if !(self.ssim_k1 > 0.0 && self.ssim_k2 > 0.0) {
            return Err(Error::Config("ssim constants must be positive".into()));
        }
        if self.ssim_window == 0 || self.ssim_window % 2 == 0 {
            return Err(Error::Config(format!("ssim window {} must be odd", self.ssim_window)));
        }
        Ok(())
    }

    /// Same settings with the smaller window used on tamper squares.
    pub fn for_roi(&self) -> Self {
        MetricConfig {
            ssim_window: self.ssim_window.min(ROI_SSIM_WINDOW),
            ..self.clone()
        }
    }
}

/// Normalized `[-1, 1]` pixels to the `[0, 4095]` metric scale.
pub fn to_metric_scale(pixels: ArrayView2<f64>) -> Array2<f64> {
    pixels.mapv(|p| denormalize_value(p) - crate::volume::HU_MIN)
}

fn same_shape(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(())
}

pub fn mse(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    same_shape(&a, &b)?;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn rmse(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

/// PSNR in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &MetricConfig) -> Result<f64> {
    let r = rmse(a, b)?;
    Ok(psnr_from_rmse(r, cfg.max_intensity))
}

/// `20·log10(MAX_I) − 20·log10(rmse)`, the same value [`psnr`] returns.
pub fn psnr_from_rmse(rmse: f64, max_intensity: f64) -> f64 {
    if rmse == 0.0 {
        return f64::INFINITY;
    }
    20.0 * max_intensity.log10() - 20.0 * rmse.log10()
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..n).map(|i| k[i] * img[[y, x + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..n).map(|i| k[i] * rows[[y + i, x]]).sum();
        }
    }
    out
}

/// Mean SSIM over every full Gaussian window position.
pub fn ssim(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &MetricConfig) -> Result<f64> {
    same_shape(&a, &b)?;
    cfg.validate()?;
    let n = cfg.ssim_window;
    let (h, w) = a.dim();
    if h < n || w < n {
        return Err(Error::Shape(format!("{h}×{w} image is smaller than the {n}×{n} SSIM window")));
    }
    let k = gaussian_kernel(n, cfg.ssim_sigma);
    let c1 = (cfg.ssim_k1 * cfg.max_intensity).powi(2);
    let c2 = (cfg.ssim_k2 * cfg.max_intensity).powi(2);
    let (a, b) = (a.to_owned(), b.to_owned());
    let mu_a = filter_valid(&a, &k);
    let mu_b = filter_valid(&b, &k);
    let aa = filter_valid(&(&a * &a), &k);
    let bb = filter_valid(&(&b * &b), &k);
    let ab = filter_valid(&(&a * &b), &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// All four metrics for one image pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValues {
    pub rmse: f64,
    pub psnr: f64,
    pub lpips: f64,
    pub ssim: f64,
}

impl MetricValues {
    pub fn compute(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &MetricConfig) -> Result<Self> {
        let r = rmse(a, b)?;
        Ok(MetricValues {
            rmse: r,
            psnr: psnr_from_rmse(r, cfg.max_intensity),
            lpips: lpips(a, b, cfg)?,
            ssim: ssim(a, b, cfg)?,
        })
    }

    /// Per-metric average over pairs (metric values, not MSEs, are averaged).
    pub fn mean(values: &[MetricValues]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("no metric values to average".into()));
        }
        let n = values.len() as f64;
        let avg = |f: fn(&MetricValues) -> f64| values.iter().map(f).sum::<f64>() / n;
        Ok(MetricValues {
            rmse: avg(|v| v.rmse),
            psnr: avg(|v| v.psnr),
            lpips: avg(|v| v.lpips),
            ssim: avg(|v| v.ssim),
        })
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Rmse => self.rmse,
            Metric::Psnr => self.psnr,
            Metric::Lpips => self.lpips,
            Metric::Ssim => self.ssim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Rmse,
    Psnr,
    Lpips,
    Ssim,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Rmse, Metric::Psnr, Metric::Lpips, Metric::Ssim];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Rmse => "RMSE",
            Metric::Psnr => "PSNR",
            Metric::Lpips => "LPIPS",
            Metric::Ssim => "SSIM",
        }
    }
}

/// Four metrics on the two tamper squares, with the 7×7 SSIM window.
pub fn roi_metrics(a: ArrayView2<f64>, b: ArrayView2<f64>, region: TamperRegion, cfg: &MetricConfig) -> Result<MetricValues> {
    let (h, w) = a.dim();
    region.validate(h, w)?;
    region.validate(b.nrows(), b.ncols())?;
    let sa = a.slice(ndarray::s![region.rows(), region.cols()]);
    let sb = b.slice(ndarray::s![region.rows(), region.cols()]);
    MetricValues::compute(sa, sb, &cfg.for_roi())
}

/// Formats a metric for a table cell; infinite PSNR prints as `inf`.
pub fn format_value(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    WholeImage,
    TamperSquare,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::WholeImage => "whole_image",
            Scope::TamperSquare => "tamper_square",
        })
    }
}

/// Named pair rows at one scope.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub scope: Scope,
    pub rows: Vec<(String, MetricValues)>,
}

impl MetricReport {
    pub fn new(scope: Scope) -> Self {
        MetricReport { scope, rows: Vec::new() }
    }

    pub fn push(&mut self, pair: impl Into<String>, v: MetricValues) {
        self.rows.push((pair.into(), v));
    }

    pub fn get(&self, pair: &str) -> Option<&MetricValues> {
        self.rows.iter().find(|(n, _)| n == pair).map(|(_, v)| v)
    }

    /// One row per pair: `pair,rmse,psnr,lpips,ssim`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,rmse,psnr,lpips,ssim\n");
        for (name, v) in &self.rows {
            s.push_str(&format!(
                "{name},{},{},{},{}\n",
                format_value(v.rmse),
                format_value(v.psnr),
                format_value(v.lpips),
                format_value(v.ssim)
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..4095.0))
    }

    #[test]
    fn rmse_values() {
        let a = array![[0.0, 0.0]];
        let b = array![[3.0, 4.0]];
        assert!((rmse(a.view(), b.view()).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rmse(a.view(), a.view()).unwrap(), 0.0);
        assert!(rmse(a.view(), array![[1.0]].view()).is_err());
    }

    #[test]
    fn psnr_values() {
        let cfg = MetricConfig {
            max_intensity: 255.0,
            ..MetricConfig::default()
        };
        let a = Array2::from_elem((8, 8), 100.0);
        let b = a.mapv(|v| v + 10.0);
        let expected = 10.0 * (65025.0f64 / 100.0).log10();
        assert!((psnr(a.view(), b.view(), &cfg).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 28.131).abs() < 1e-3);
        assert_eq!(psnr(a.view(), a.view(), &cfg).unwrap(), f64::INFINITY);
        let c = a.mapv(|v| v + 5.0);
        let gain = psnr(a.view(), c.view(), &cfg).unwrap() - psnr(a.view(), b.view(), &cfg).unwrap();
        assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert_eq!(format_value(f64::INFINITY), "inf");
    }

    #[test]
    fn twelve_bit_scale_matches_reported_pair() {
        // A reported RMSE of 169.481 is consistent with ~27.9 dB only on a 12-bit scale.
        let p = psnr_from_rmse(169.481, MAX_INTENSITY);
        assert!((p - 27.66).abs() < 0.01);
        assert!(psnr_from_rmse(169.481, 255.0) < 4.0);
    }

    #[test]
    fn ssim_identity_symmetry_and_anticorrelation() {
        let cfg = MetricConfig::default();
        let a = random_image(20, 24, 1);
        let b = random_image(20, 24, 2);
        assert!((ssim(a.view(), a.view(), &cfg).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(a.view(), b.view(), &cfg).unwrap();
        assert!((ab - ssim(b.view(), a.view(), &cfg).unwrap()).abs() < 1e-12);
        assert!(ssim(a.view(), a.slice(ndarray::s![..10, ..]).view(), &cfg).is_err());
        let small = Array2::<f64>::zeros((10, 10));
        assert!(ssim(small.view(), small.view(), &cfg).is_err());

        let unit = MetricConfig {
            max_intensity: 1.0,
            ..MetricConfig::default()
        };
        let board = Array2::from_shape_fn((16, 16), |(y, x)| ((y + x) % 2) as f64);
        let inv = board.mapv(|v| 1.0 - v);
        assert!(ssim(board.view(), inv.view(), &unit).unwrap() < 0.1);
    }

    #[test]
    fn roi_matches_extracted_squares() {
        let cfg = MetricConfig::default();
        let a = random_image(64, 64, 3);
        let mut b = a.clone();
        let r = TamperRegion::new(30, 34);
        for y in r.rows() {
            for x in r.cols() {
                b[[y, x]] += 50.0;
            }
        }
        let roi = roi_metrics(a.view(), b.view(), r, &cfg).unwrap();
        assert!((roi.rmse - 50.0).abs() < 1e-9);
        let whole = mse(a.view(), b.view()).unwrap();
        assert!((whole - roi.rmse.powi(2) * 1024.0 / 4096.0).abs() < 1e-9);
        let same = roi_metrics(a.view(), a.view(), r, &cfg).unwrap();
        assert_eq!((same.rmse, same.ssim, same.lpips), (0.0, 1.0, 0.0));
        assert!(roi_metrics(a.view(), b.view(), TamperRegion::new(5, 5), &cfg).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let mut r = MetricReport::new(Scope::WholeImage);
        let v = MetricValues {
            rmse: 0.0,
            psnr: f64::INFINITY,
            lpips: 0.0,
            ssim: 1.0,
        };
        r.push("real_vs_protected", v);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.contains("real_vs_protected,0.000000,inf,0.000000,1.000000"));
        assert_eq!(MetricValues::mean(&[v, v]).unwrap(), v);
    }

    proptest! {
        #[test]
        fn psnr_is_consistent_with_rmse(seed in 0u64..1000) {
            let cfg = MetricConfig::default();
            let a = random_image(12, 12, seed);
            let b = random_image(12, 12, seed + 7919);
            let r = rmse(a.view(), b.view()).unwrap();
            let p = psnr(a.view(), b.view(), &cfg).unwrap();
            prop_assert_eq!(p, 20.0 * MAX_INTENSITY.log10() - 20.0 * r.log10());
            prop_assert!(r >= 0.0);
            prop_assert!((rmse(b.view(), a.view()).unwrap() - r).abs() < 1e-12);
        }

        #[test]
        fn ssim_is_bounded(seed in 0u64..1000) {
            let cfg = MetricConfig::default();
            let a = random_image(16, 16, seed);
            let b = random_image(16, 16, seed + 1);
            let s = ssim(a.view(), b.view(), &cfg).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
