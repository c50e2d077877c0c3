use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::CtVolume;
use crate::error::{Error, Result};

pub const AIR_HU: f64 = -1000.0;
pub const BODY_HU: f64 = 40.0;
pub const LUNG_HU: f64 = -700.0;
pub const NODULE_HU: f64 = 60.0;
const NOISE_HU: f64 = 8.0;

/// Parameters of a synthetic chest-like volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    pub n_slices: usize,
    pub nodule_probability: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(size: usize, n_slices: usize, nodule_probability: f64, seed: u64) -> Self {
        PhantomSpec {
            size,
            n_slices,
            nodule_probability,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Invalid(format!("phantom size {} is below 32", self.size)));
        }
        if self.n_slices == 0 {
            return Err(Error::Invalid("phantom needs at least one slice".into()));
        }
        if !(0.0..=1.0).contains(&self.nodule_probability) {
            return Err(Error::Invalid(format!(
                "nodule probability {} outside [0, 1]",
                self.nodule_probability
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Geometry of one phantom slice. `nodule` is `(cx, cy, diameter)` in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceLayout {
    pub body: Ellipse,
    pub lungs: [Ellipse; 2],
    pub nodule: Option<(f64, f64, f64)>,
}

fn layout<R: Rng>(size: f64, p: f64, rng: &mut R) -> SliceLayout {
    let c = size / 2.0;
    let j = |rng: &mut R, s: f64| rng.random_range(-s..s);
    let body = Ellipse {
        cx: c + j(rng, 0.02 * size),
        cy: c + j(rng, 0.02 * size),
        rx: size * (0.42 + j(rng, 0.03)),
        ry: size * (0.33 + j(rng, 0.03)),
    };
    let lung = |side: f64, rng: &mut R| Ellipse {
        cx: body.cx + side * size * (0.18 + j(rng, 0.02)),
        cy: body.cy + j(rng, 0.02 * size),
        rx: size * (0.13 + j(rng, 0.015)),
        ry: size * (0.21 + j(rng, 0.02)),
    };
    let lungs = [lung(-1.0, rng), lung(1.0, rng)];
    let nodule = if rng.random_bool(p) {
        let l = lungs[rng.random_range(0..2)];
        let d = rng.random_range(6..=12) as f64;
        let r = d / 2.0;
        // Rejection-sample a center whose disc stays inside the lung.
        let inner = Ellipse {
            rx: (l.rx - r).max(0.5),
            ry: (l.ry - r).max(0.5),
            ..l
        };
        let mut centre = (l.cx, l.cy);
        for _ in 0..64 {
            let x = l.cx + rng.random_range(-inner.rx..inner.rx);
            let y = l.cy + rng.random_range(-inner.ry..inner.ry);
            if inner.contains(x, y) {
                centre = (x, y);
                break;
            }
        }
        Some((centre.0, centre.1, d))
    } else {
        None
    };
    SliceLayout { body, lungs, nodule }
}

/// Per-slice geometry, reproducing exactly what [`generate_phantom`] draws.
pub fn phantom_layout(spec: &PhantomSpec) -> Result<Vec<SliceLayout>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_slices)
        .map(|_| layout(spec.size as f64, spec.nodule_probability, &mut rng))
        .collect())
}

/// Synthetic volume: soft-tissue body on air, two lungs, optional nodules, mild noise.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<CtVolume> {
    let layouts = phantom_layout(spec)?;
    let s = spec.size;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, NOISE_HU).expect("positive std");
    let mut voxels = Array3::<i16>::zeros((spec.n_slices, s, s));
    for (k, lay) in layouts.iter().enumerate() {
        for y in 0..s {
            for x in 0..s {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut v = AIR_HU;
                if lay.body.contains(fx, fy) {
                    v = BODY_HU;
                    if lay.lungs.iter().any(|l| l.contains(fx, fy)) {
                        v = LUNG_HU;
                    }
                    if let Some((cx, cy, d)) = lay.nodule {
                        if (fx - cx).powi(2) + (fy - cy).powi(2) <= (d / 2.0).powi(2) {
                            v = NODULE_HU;
                        }
                    }
                }
                let n = noise.sample(&mut noise_rng);
                voxels[[k, y, x]] = (v + n).round() as i16;
            }
        }
    }
    CtVolume::new(voxels, Some([1.0, 1.0, 1.0]), format!("phantom-{}", spec.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let spec = PhantomSpec::new(64, 10, 0.5, 7);
        assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
        let other = PhantomSpec::new(64, 10, 0.5, 8);
        assert_ne!(generate_phantom(&spec).unwrap(), generate_phantom(&other).unwrap());
    }

    #[test]
    fn no_nodules_at_zero_probability() {
        let spec = PhantomSpec::new(64, 10, 0.0, 7);
        let v = generate_phantom(&spec).unwrap();
        let lays = phantom_layout(&spec).unwrap();
        assert!(lays.iter().all(|l| l.nodule.is_none()));
        // No bright pixel inside the lungs.
        for (k, lay) in lays.iter().enumerate() {
            for y in 0..64 {
                for x in 0..64 {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    if lay.body.contains(fx, fy) && lay.lungs.iter().any(|l| l.contains(fx, fy)) {
                        assert!(v.voxels()[[k, y, x]] < -500);
                    }
                }
            }
        }
    }

    #[test]
    fn nodule_count_in_central_range() {
        let spec = PhantomSpec::new(64, 200, 0.5, 7);
        let lays = phantom_layout(&spec).unwrap();
        let count = lays.iter().filter(|l| l.nodule.is_some()).count();
        assert!((60..=140).contains(&count), "{count}");
        let v = generate_phantom(&spec).unwrap();
        for (k, lay) in lays.iter().enumerate() {
            if let Some((cx, cy, d)) = lay.nodule {
                assert!((6.0..=12.0).contains(&d));
                let centre = v.voxels()[[k, cy as usize, cx as usize]];
                assert!(centre > -100, "nodule centre {centre}");
            }
        }
    }

    #[test]
    fn intensities_roughly_match_tissues() {
        let v = generate_phantom(&PhantomSpec::new(64, 1, 0.0, 3)).unwrap();
        assert!((v.voxels()[[0, 0, 0]] as f64 - AIR_HU).abs() < 50.0);
        assert!(PhantomSpec::new(16, 1, 0.0, 0).validate().is_err());
        assert!(PhantomSpec::new(64, 0, 0.0, 0).validate().is_err());
    }
}
