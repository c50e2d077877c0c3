//! Square tamper geometry and the frozen manipulation model.

mod blur;
mod external;
mod inpaint;

pub use blur::{blur_blend_manipulate, blur_blend_vjp, BLUR_SIGMA, BLUR_TAPS, BLUR_WEIGHT};
pub use external::{ConvStack, ConvStackCache};
pub use inpaint::{train_inpaint_net, InpaintCache, InpaintConfig, InpaintNet};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Module, Tensor};
use crate::store::NamedArrays;

pub const DEFAULT_REGION_SIZE: usize = 32;

/// Square `[cx − size/2, cx + size/2)` × `[cy − size/2, cy + size/2)`;
/// `cx` indexes columns and `cy` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TamperRegion {
    pub cx: usize,
    pub cy: usize,
    pub size: usize,
}

impl TamperRegion {
    pub fn new(cx: usize, cy: usize) -> Self {
        TamperRegion {
            cx,
            cy,
            size: DEFAULT_REGION_SIZE,
        }
    }

    pub fn with_size(mut self, size: usize) -> Self {
        self.size = size;
        self
    }

    pub fn rows(&self) -> std::ops::Range<usize> {
        self.cy - self.size / 2..self.cy - self.size / 2 + self.size
    }

    pub fn cols(&self) -> std::ops::Range<usize> {
        self.cx - self.size / 2..self.cx - self.size / 2 + self.size
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let half = self.size / 2;
        if self.size == 0 || self.size % 2 != 0 {
            return Err(Error::Region(format!("square size {} must be even and positive", self.size)));
        }
        if self.cx < half || self.cy < half || self.cx + half > w || self.cy + half > h {
            return Err(Error::Region(format!(
                "square of size {} at ({}, {}) crosses the border of a {h}x{w} image",
                self.size, self.cx, self.cy
            )));
        }
        Ok(())
    }
}

/// Uniformly random valid centre for a square of side `size`.
pub fn sample_region<R: Rng + ?Sized>(h: usize, w: usize, size: usize, rng: &mut R) -> Result<TamperRegion> {
    if size == 0 || size % 2 != 0 || size > h || size > w {
        return Err(Error::Region(format!("no valid {size}-pixel square in a {h}x{w} image")));
    }
    let half = size / 2;
    Ok(TamperRegion {
        cx: rng.random_range(half..=w - half),
        cy: rng.random_range(half..=h - half),
        size,
    })
}

pub fn extract_square(image: ArrayView2<f64>, region: TamperRegion) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    region.validate(h, w)?;
    Ok(image.slice(s![region.rows(), region.cols()]).to_owned())
}

pub fn paste_square(image: ArrayView2<f64>, patch: ArrayView2<f64>, region: TamperRegion) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    region.validate(h, w)?;
    if patch.dim() != (region.size, region.size) {
        return Err(Error::Shape(format!(
            "patch {:?} does not match a {}-pixel square",
            patch.dim(),
            region.size
        )));
    }
    let mut out = image.to_owned();
    out.slice_mut(s![region.rows(), region.cols()]).assign(&patch);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManipulatorKind {
    BlurBlend,
    InpaintSurrogate,
    External,
}

impl fmt::Display for ManipulatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ManipulatorKind::BlurBlend => "blur_blend",
            ManipulatorKind::InpaintSurrogate => "inpaint_surrogate",
            ManipulatorKind::External => "external",
        })
    }
}

impl FromStr for ManipulatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur_blend" => Ok(ManipulatorKind::BlurBlend),
            "inpaint_surrogate" => Ok(ManipulatorKind::InpaintSurrogate),
            "external" => Ok(ManipulatorKind::External),
            other => Err(Error::Config(format!("unknown manipulator kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Model {
    BlurBlend,
    Inpaint(InpaintNet),
    External(ConvStack),
}

/// Frozen manipulation model. No method takes `&mut self`, so weights never change
/// after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ManipulatorHandle {
    model: Model,
}

/// Intermediate values of a batched patch forward pass.
pub enum PatchCache {
    BlurBlend,
    Inpaint(InpaintCache),
    External(ConvStackCache),
}

impl ManipulatorHandle {
    pub fn blur_blend() -> Self {
        ManipulatorHandle { model: Model::BlurBlend }
    }

    pub fn inpaint(net: InpaintNet) -> Self {
        ManipulatorHandle {
            model: Model::Inpaint(net),
        }
    }

    pub fn external(stack: ConvStack) -> Self {
        ManipulatorHandle {
            model: Model::External(stack),
        }
    }

    pub fn identity() -> Self {
        Self::external(ConvStack::identity())
    }

    pub fn kind(&self) -> ManipulatorKind {
        match self.model {
            Model::BlurBlend => ManipulatorKind::BlurBlend,
            Model::Inpaint(_) => ManipulatorKind::InpaintSurrogate,
            Model::External(_) => ManipulatorKind::External,
        }
    }

    /// Applies `M` to a batch of single-channel patches `[n, 1, s, s]`.
    pub fn forward_patches(&self, patches: &Tensor) -> Result<(Tensor, PatchCache)> {
        match &self.model {
            Model::BlurBlend => {
                let mut out = patches.clone();
                for i in 0..patches.n() {
                    let q = patches.to_array2(i);
                    let m = blur_blend_manipulate(q.view());
                    out.plane_mut(i, 0).copy_from_slice(m.as_slice().expect("standard layout"));
                }
                Ok((out, PatchCache::BlurBlend))
            }
            Model::Inpaint(net) => {
                let (out, c) = net.forward(patches)?;
                Ok((out, PatchCache::Inpaint(c)))
            }
            Model::External(stack) => {
                let (out, c) = stack.forward(patches)?;
                Ok((out, PatchCache::External(c)))
            }
        }
    }

    /// `Jᵀ dy` for the Jacobian of `M` at the cached input.
    pub fn patch_vjp(&self, cache: &PatchCache, dy: &Tensor) -> Tensor {
        match (&self.model, cache) {
            (Model::BlurBlend, PatchCache::BlurBlend) => {
                let mut dq = dy.clone();
                for i in 0..dy.n() {
                    let g = blur_blend_vjp(dy.to_array2(i).view());
                    dq.plane_mut(i, 0).copy_from_slice(g.as_slice().expect("standard layout"));
                }
                dq
            }
            (Model::Inpaint(net), PatchCache::Inpaint(c)) => net.vjp(c, dy),
            (Model::External(stack), PatchCache::External(c)) => stack.vjp(c, dy),
            _ => panic!("patch cache does not belong to this manipulator"),
        }
    }

    pub fn manipulate(&self, patch: ArrayView2<f64>) -> Result<Array2<f64>> {
        let t = Tensor::from_planes([patch])?;
        Ok(self.forward_patches(&t)?.0.to_array2(0))
    }

    /// Weights in a flat named container (empty for blur-blend).
    pub fn export(&self, arrays: &mut NamedArrays, prefix: &str) {
        arrays.set_meta(format!("{prefix}kind"), self.kind().to_string());
        match &self.model {
            Model::BlurBlend => {}
            Model::Inpaint(net) => {
                arrays.set_meta(format!("{prefix}width"), net.width.to_string());
                for (name, p) in net.named_params(prefix.trim_end_matches('.')) {
                    arrays.insert(name, &p.shape, &p.value);
                }
            }
            Model::External(stack) => stack.export(arrays, prefix),
        }
    }

    /// Inverse of [`export`](Self::export). A container without a kind tag is
    /// read as an external convolution stack.
    pub fn import(arrays: &NamedArrays, prefix: &str) -> Result<Self> {
        let kind = match arrays.metadata.get(&format!("{prefix}kind")) {
            Some(k) => k.parse()?,
            None => ManipulatorKind::External,
        };
        match kind {
            ManipulatorKind::BlurBlend => Ok(Self::blur_blend()),
            ManipulatorKind::External => Ok(Self::external(ConvStack::from_named(arrays, prefix)?)),
            ManipulatorKind::InpaintSurrogate => {
                let width: usize = arrays.meta_parse("manipulator", &format!("{prefix}width"))?;
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
                let mut net = InpaintNet::new(width, &mut rng);
                for (name, p) in net.named_params_mut(prefix.trim_end_matches('.')) {
                    let v = arrays.get("manipulator", &name, &p.shape)?;
                    p.value.copy_from_slice(v);
                }
                Ok(Self::inpaint(net))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = NamedArrays::new();
        self.export(&mut a, "");
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::import(&NamedArrays::load(path)?, "")
    }

    /// Flattened weights, for frozenness checks.
    pub fn weights(&self) -> Vec<f64> {
        let mut a = NamedArrays::new();
        self.export(&mut a, "");
        a.arrays.into_values().flat_map(|(_, v)| v).collect()
    }
}

/// `x̂ = paste(x, M(extract(x, q)), q)`.
pub fn tamper(image: ArrayView2<f64>, region: TamperRegion, m: &ManipulatorHandle) -> Result<Array2<f64>> {
    let q = extract_square(image, region)?;
    let out = m.manipulate(q.view())?;
    paste_square(image, out.view(), region)
}

/// Trains the inpainting surrogate and freezes it in a handle.
pub fn train_inpaint_surrogate(slices: &[Array2<f64>], epochs: usize, seed: u64) -> Result<ManipulatorHandle> {
    let cfg = InpaintConfig {
        epochs,
        seed,
        ..InpaintConfig::default()
    };
    Ok(ManipulatorHandle::inpaint(train_inpaint_net(slices, &cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, PhantomSpec};
    use proptest::prelude::{prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(y, x)| ((y * w + x) % 97) as f64 / 97.0 + 0.01)
    }

    fn phantom_slices(n: usize, seed: u64) -> Vec<Array2<f64>> {
        generate_phantom(&PhantomSpec::new(64, n, 0.5, seed))
            .unwrap()
            .slices()
            .unwrap()
            .into_iter()
            .map(|r| r.pixels)
            .collect()
    }

    #[test]
    fn extract_uses_expected_rows_and_cols() {
        let img = Array2::from_shape_fn((512, 512), |(y, x)| (y * 1000 + x) as f64);
        let r = TamperRegion::new(256, 256);
        assert_eq!((r.rows(), r.cols()), (240..272, 240..272));
        let q = extract_square(img.view(), r).unwrap();
        assert_eq!(q[[0, 0]], 240_240.0);
        assert_eq!(q[[31, 31]], 271_271.0);
        assert!(matches!(extract_square(img.view(), TamperRegion::new(8, 8)), Err(Error::Region(_))));
    }

    #[test]
    fn paste_zero_patch_changes_exactly_the_square() {
        let img = ramp(512, 512);
        let r = TamperRegion::new(100, 300);
        let out = paste_square(img.view(), Array2::zeros((32, 32)).view(), r).unwrap();
        let changed = img.iter().zip(out.iter()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 1024);
        assert!(paste_square(img.view(), Array2::zeros((32, 32)).view(), TamperRegion::new(500, 10)).is_err());
    }

    proptest! {
        #[test]
        fn extract_paste_round_trip(cx in 16usize..=48, cy in 16usize..=48) {
            let img = ramp(64, 64);
            let r = TamperRegion::new(cx, cy);
            let q = extract_square(img.view(), r).unwrap();
            prop_assert_eq!(paste_square(img.view(), q.view(), r).unwrap(), img.clone());
            let other = img.mapv(|v| -v);
            let pasted = paste_square(other.view(), q.view(), r).unwrap();
            prop_assert_eq!(extract_square(pasted.view(), r).unwrap(), q);
        }

        #[test]
        fn tamper_is_local(cx in 16usize..=48, cy in 16usize..=48) {
            let img = ramp(64, 64);
            let r = TamperRegion::new(cx, cy);
            let out = tamper(img.view(), r, &ManipulatorHandle::blur_blend()).unwrap();
            for ((y, x), v) in out.indexed_iter() {
                if !(r.rows().contains(&y) && r.cols().contains(&x)) {
                    prop_assert_eq!(*v, img[[y, x]]);
                }
            }
        }
    }

    #[test]
    fn identity_manipulator_leaves_image() {
        let img = ramp(64, 64).mapv(|v| v - 0.5);
        let out = tamper(img.view(), TamperRegion::new(30, 30), &ManipulatorHandle::identity()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn region_sampling_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let r = sample_region(64, 48, 32, &mut rng).unwrap();
            r.validate(64, 48).unwrap();
        }
        assert!(sample_region(16, 16, 32, &mut rng).is_err());
    }

    #[test]
    fn inpaint_surrogate_beats_blur_and_is_frozen() {
        let train = phantom_slices(48, 11);
        let m = train_inpaint_surrogate(&train, 8, 3).unwrap();
        let held_out = phantom_slices(16, 99);
        let blur = ManipulatorHandle::blur_blend();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut e_inp, mut e_blur) = (0.0, 0.0);
        for s in &held_out {
            for _ in 0..4 {
                let r = sample_region(64, 64, 32, &mut rng).unwrap();
                let q = extract_square(s.view(), r).unwrap();
                let rmse = |p: &Array2<f64>| ((p - &q).mapv(|v| v * v).mean().unwrap()).sqrt();
                e_inp += rmse(&m.manipulate(q.view()).unwrap());
                e_blur += rmse(&blur.manipulate(q.view()).unwrap());
            }
        }
        assert!(e_inp < e_blur, "inpaint {e_inp} vs blur {e_blur}");
        let q = extract_square(held_out[0].view(), TamperRegion::new(32, 32)).unwrap();
        assert_eq!(m.manipulate(q.view()).unwrap(), m.manipulate(q.view()).unwrap());
    }

    #[test]
    fn untrained_surrogate_is_usable() {
        let m = train_inpaint_surrogate(&phantom_slices(2, 1), 0, 3).unwrap();
        let again = train_inpaint_surrogate(&phantom_slices(2, 1), 0, 3).unwrap();
        assert_eq!(m, again);
        let q = Array2::zeros((32, 32));
        assert_eq!(m.manipulate(q.view()).unwrap().dim(), (32, 32));
        assert!(train_inpaint_surrogate(&[], 1, 0).is_err());
    }

    fn check_vjp(m: &ManipulatorHandle, size: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Array2::from_shape_fn((size, size), |_| rng.random_range(-0.8..0.8));
        let d = Array2::from_shape_fn((size, size), |_| rng.random_range(-1.0..1.0));
        let qt = Tensor::from_planes([q.view()]).unwrap();
        let dt = Tensor::from_planes([d.view()]).unwrap();
        let (_, cache) = m.forward_patches(&qt).unwrap();
        let g = m.patch_vjp(&cache, &dt);
        let f = |p: &Array2<f64>| (&m.manipulate(p.view()).unwrap() * &d).sum();
        let eps = 1e-6;
        for (idx, _) in q.indexed_iter() {
            let mut plus = q.clone();
            plus[idx] += eps;
            let mut minus = q.clone();
            minus[idx] -= eps;
            let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
            let an = g.plane(0, 0)[idx.0 * size + idx.1];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{idx:?}: {fd} vs {an}");
        }
    }

    #[test]
    fn patch_gradients_match_finite_differences() {
        check_vjp(&ManipulatorHandle::blur_blend(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check_vjp(&ManipulatorHandle::inpaint(InpaintNet::new(3, &mut rng)), 8);
        let convs = vec![
            crate::nn::Conv2d::new(1, 3, 3, 1, 1, &mut rng),
            crate::nn::Conv2d::new(3, 1, 3, 1, 1, &mut rng),
        ];
        check_vjp(&ManipulatorHandle::external(ConvStack::from_convs(convs).unwrap()), 8);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for m in [
            ManipulatorHandle::blur_blend(),
            ManipulatorHandle::inpaint(InpaintNet::new(4, &mut rng)),
            ManipulatorHandle::identity(),
        ] {
            let p = dir.path().join(format!("{}.safetensors", m.kind()));
            m.save(&p).unwrap();
            assert_eq!(ManipulatorHandle::load(&p).unwrap(), m);
        }
    }
}

