//! Learned perceptual distance on a SqueezeNet-1.1 shaped feature stack.
//!
//! `FixedRandom` uses seeded weights so scores are deterministic and need no
//! download. `SqueezePretrained` reads converted weights from the file named by
//! `MITSGAN_LPIPS_WEIGHTS`.

use std::path::PathBuf;
use std::sync::OnceLock;

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MetricConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module, Param, Tensor};
use crate::store::NamedArrays;

pub const LPIPS_SEED: u64 = 0x1d1c;
pub const LPIPS_WEIGHTS_ENV: &str = "MITSGAN_LPIPS_WEIGHTS";
/// Channels at each of the seven feature taps.
pub const LPIPS_CHANNELS: [usize; 7] = [64, 128, 256, 384, 384, 512, 512];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpipsBackbone {
    SqueezePretrained,
    FixedRandom,
}

#[derive(Clone, Debug)]
struct Fire {
    squeeze: Conv2d,
    expand1: Conv2d,
    expand3: Conv2d,
}

impl Fire {
    fn new(cin: usize, s: usize, e: usize, rng: &mut ChaCha8Rng) -> Self {
        Fire {
            squeeze: Conv2d::new(cin, s, 1, 1, 0, rng),
            expand1: Conv2d::new(s, e, 1, 1, 0, rng),
            expand3: Conv2d::new(s, e, 3, 1, 1, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let s = relu(self.squeeze.forward(x));
        let a = relu(self.expand1.forward(&s));
        let b = relu(self.expand3.forward(&s));
        Tensor::concat_channels(&a, &b).expect("matching spatial dims")
    }
}

fn relu(x: Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// 3×3 stride-2 max pooling with ceil rounding.
fn max_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let out = |d: usize| if d <= 3 { 1 } else { (d - 3).div_ceil(2) + 1 };
    let (oh, ow) = (out(h), out(w));
    let mut y = Tensor::zeros(n, c, oh, ow);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = y.plane_mut(i, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for yy in oy * 2..(oy * 2 + 3).min(h) {
                        for xx in ox * 2..(ox * 2 + 3).min(w) {
                            m = m.max(src[yy * w + xx]);
                        }
                    }
                    dst[oy * ow + ox] = m;
                }
            }
        }
    }
    y
}

#[derive(Clone, Debug)]
pub struct LpipsNet {
    conv1: Conv2d,
    fires: Vec<Fire>,
}

impl Module for LpipsNet {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv1.params(&format!("{prefix}conv1."), out);
        for (i, f) in self.fires.iter().enumerate() {
            f.squeeze.params(&format!("{prefix}fire{i}.squeeze."), out);
            f.expand1.params(&format!("{prefix}fire{i}.expand1."), out);
            f.expand3.params(&format!("{prefix}fire{i}.expand3."), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv1.params_mut(&format!("{prefix}conv1."), out);
        for (i, f) in self.fires.iter_mut().enumerate() {
            f.squeeze.params_mut(&format!("{prefix}fire{i}.squeeze."), out);
            f.expand1.params_mut(&format!("{prefix}fire{i}.expand1."), out);
            f.expand3.params_mut(&format!("{prefix}fire{i}.expand3."), out);
        }
    }
}

impl LpipsNet {
    pub fn fixed_random() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(LPIPS_SEED);
        let conv1 = Conv2d::new(3, 64, 3, 2, 0, &mut rng);
        let cfg = [
            (64, 16, 64),
            (128, 16, 64),
            (128, 32, 128),
            (256, 32, 128),
            (256, 48, 192),
            (384, 48, 192),
            (384, 64, 256),
            (512, 64, 256),
        ];
        let fires = cfg.iter().map(|&(c, s, e)| Fire::new(c, s, e, &mut rng)).collect();
        LpipsNet { conv1, fires }
    }

    /// Topology of [`fixed_random`](Self::fixed_random) with every weight read from `path`.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let a = NamedArrays::load(path)?;
        let mut net = LpipsNet::fixed_random();
        for (name, p) in net.named_params_mut("") {
            let shape = p.shape.clone();
            p.value.copy_from_slice(a.get("lpips", &name, &shape)?);
        }
        Ok(net)
    }

    /// Activations at the seven taps.
    pub fn features(&self, x: &Tensor) -> Vec<Tensor> {
        let mut taps = Vec::with_capacity(7);
        let mut h = relu(self.conv1.forward(x));
        taps.push(h.clone());
        h = max_pool(&h);
        h = self.fires[1].forward(&self.fires[0].forward(&h));
        taps.push(h.clone());
        h = max_pool(&h);
        h = self.fires[3].forward(&self.fires[2].forward(&h));
        taps.push(h.clone());
        h = max_pool(&h);
        for f in &self.fires[4..] {
            h = f.forward(&h);
            taps.push(h.clone());
        }
        taps
    }

    /// Distance between two single-channel images already scaled to `[-1, 1]`.
    pub fn distance(&self, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
        let to_rgb = |img: ArrayView2<f64>| -> Result<Tensor> {
            let p = Tensor::from_planes([img])?;
            let pp = Tensor::concat_channels(&p, &p)?;
            Tensor::concat_channels(&pp, &p)
        };
        let fa = self.features(&to_rgb(a)?);
        let fb = self.features(&to_rgb(b)?);
        let mut total = 0.0;
        for (ta, tb) in fa.iter().zip(&fb) {
            let [_, c, h, w] = ta.shape();
            let hw = h * w;
            let mut layer = 0.0;
            for pos in 0..hw {
                let norm = |t: &Tensor| (0..c).map(|ch| t.plane(0, ch)[pos].powi(2)).sum::<f64>().sqrt() + 1e-10;
                let (na, nb) = (norm(ta), norm(tb));
                // Unit-weighted channel average stands in for the learned linear heads.
                let d: f64 = (0..c)
                    .map(|ch| (ta.plane(0, ch)[pos] / na - tb.plane(0, ch)[pos] / nb).powi(2))
                    .sum();
                layer += d / c as f64;
            }
            total += layer / hw as f64;
        }
        Ok(total)
    }
}

fn fixed_random_net() -> &'static LpipsNet {
    static NET: OnceLock<LpipsNet> = OnceLock::new();
    NET.get_or_init(LpipsNet::fixed_random)
}

fn pretrained_net() -> Result<&'static LpipsNet> {
    static NET: OnceLock<LpipsNet> = OnceLock::new();
    if let Some(n) = NET.get() {
        return Ok(n);
    }
    let path = std::env::var_os(LPIPS_WEIGHTS_ENV).map(PathBuf::from).ok_or_else(|| {
        Error::MissingWeights(format!(
            "set {LPIPS_WEIGHTS_ENV} to converted SqueezeNet weights, or use the fixed_random backbone"
        ))
    })?;
    if !path.exists() {
        return Err(Error::MissingWeights(format!("{} does not exist", path.display())));
    }
    let net = LpipsNet::load(&path)?;
    Ok(NET.get_or_init(|| net))
}

/// Perceptual distance between two images on the metric scale of `cfg`.
pub fn lpips(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &MetricConfig) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() < 3 || a.ncols() < 3 {
        return Err(Error::Shape(format!("{:?} is too small for the feature stack", a.dim())));
    }
    if a == b {
        return Ok(0.0);
    }
    let net = match cfg.lpips_backbone {
        LpipsBackbone::FixedRandom => fixed_random_net(),
        LpipsBackbone::SqueezePretrained => pretrained_net()?,
    };
    let scale = |v: f64| 2.0 * v / cfg.max_intensity - 1.0;
    net.distance(a.mapv(scale).view(), b.mapv(scale).view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, PhantomSpec};
    use ndarray::Array2;
    use rand_distr::{Distribution, Normal};

    fn phantom_slice() -> Array2<f64> {
        let v = generate_phantom(&PhantomSpec::new(64, 4, 0.0, 3)).unwrap();
        super::super::to_metric_scale(v.slices().unwrap()[2].pixels.view())
    }

    #[test]
    fn tap_channels_follow_topology() {
        let net = LpipsNet::fixed_random();
        let x = Tensor::zeros(1, 3, 64, 64);
        let taps = net.features(&x);
        let ch: Vec<usize> = taps.iter().map(|t| t.c()).collect();
        assert_eq!(ch, LPIPS_CHANNELS);
        assert_eq!(taps[0].h(), 31);
        assert_eq!(taps.last().unwrap().h(), 3);
    }

    #[test]
    fn identity_symmetry_and_monotone_in_noise() {
        let cfg = MetricConfig::default();
        let x = phantom_slice();
        assert_eq!(lpips(x.view(), x.view(), &cfg).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let unit = Array2::from_shape_fn(x.dim(), |_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng));
        let mut prev = 0.0;
        for std in [0.05, 0.1, 0.2] {
            // Noise std is given on the [-1, 1] scale.
            let noisy = &x + &unit.mapv(|n| n * std * cfg.max_intensity / 2.0);
            let d = lpips(x.view(), noisy.view(), &cfg).unwrap();
            assert!(d > prev, "std {std}: {d} <= {prev}");
            let back = lpips(noisy.view(), x.view(), &cfg).unwrap();
            assert!((d - back).abs() < 1e-12);
            prev = d;
        }
    }

    #[test]
    fn pretrained_backbone_without_weights_is_actionable() {
        if std::env::var_os(LPIPS_WEIGHTS_ENV).is_some() {
            return;
        }
        let cfg = MetricConfig {
            lpips_backbone: LpipsBackbone::SqueezePretrained,
            ..MetricConfig::default()
        };
        let a = Array2::<f64>::zeros((16, 16));
        let b = Array2::<f64>::ones((16, 16));
        let err = lpips(a.view(), b.view(), &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingWeights(_)));
        assert!(err.to_string().contains(LPIPS_WEIGHTS_ENV));
    }
}
