use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{extract_square, sample_region};
use crate::error::{Error, Result};
use crate::nn::{
    join, upsample2x, upsample2x_backward, Activation, Adam, Buffer, Conv2d, ConvBlock, ConvBlockCache, Module,
    Param, Tensor,
};

const SLOPE: f64 = 0.2;

/// Encoder-decoder that fills the central half-size square of a patch from its border.
///
/// Input channels are the masked patch and the mask; two stride-2 stages down,
/// two nearest-neighbour stages up, linear output. The prediction is clamped to
/// `[-1, 1]` and composited so pixels outside the mask pass through unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintNet {
    pub width: usize,
    pub layers: Vec<ConvBlock>,
}

pub struct InpaintCache {
    layers: Vec<ConvBlockCache>,
    mask: Vec<f64>,
}

/// Layers followed by a 2× upsample.
const UPSAMPLE_AFTER: [usize; 2] = [3, 4];

impl InpaintNet {
    pub fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let w = width;
        let lrelu = Activation::LeakyRelu(SLOPE);
        let spec = [
            (2, w, 1, lrelu),
            (w, 2 * w, 2, lrelu),
            (2 * w, 2 * w, 2, lrelu),
            (2 * w, 2 * w, 1, lrelu),
            (2 * w, w, 1, lrelu),
            (w, w, 1, lrelu),
            (w, 1, 1, Activation::Identity),
        ];
        let layers = spec
            .iter()
            .map(|&(i, o, s, a)| ConvBlock::new(Conv2d::new(i, o, 3, s, 1, rng), false, a))
            .collect();
        InpaintNet { width, layers }
    }

    /// Central square of side `size / 2`.
    pub fn mask(size: usize) -> Vec<f64> {
        let (lo, hi) = (size / 4, size / 4 + size / 2);
        let mut m = vec![0.0; size * size];
        for y in lo..hi {
            for x in lo..hi {
                m[y * size + x] = 1.0;
            }
        }
        m
    }

    fn check(patches: &Tensor) -> Result<()> {
        let s = patches.h();
        if patches.c() != 1 || patches.w() != s || s % 4 != 0 || s == 0 {
            return Err(Error::Shape(format!(
                "inpainting needs square single-channel patches with side divisible by 4, got {:?}",
                patches.shape()
            )));
        }
        Ok(())
    }

    fn input(patches: &Tensor, mask: &[f64]) -> Tensor {
        let (n, s) = (patches.n(), patches.h());
        let mut x = Tensor::zeros(n, 2, s, s);
        for i in 0..n {
            let q = patches.plane(i, 0);
            let masked: Vec<f64> = q.iter().zip(mask).map(|(v, m)| v * (1.0 - m)).collect();
            x.plane_mut(i, 0).copy_from_slice(&masked);
            x.plane_mut(i, 1).copy_from_slice(mask);
        }
        x
    }

    fn composite(patches: &Tensor, pred: &Tensor, mask: &[f64]) -> Tensor {
        let mut out = patches.clone();
        for i in 0..patches.n() {
            let p = pred.plane(i, 0);
            for ((o, &pv), &m) in out.plane_mut(i, 0).iter_mut().zip(p).zip(mask) {
                *o = m * pv.clamp(-1.0, 1.0) + (1.0 - m) * *o;
            }
        }
        out
    }

    fn raw_forward(&self, x: &Tensor) -> (Tensor, Vec<ConvBlockCache>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, c) = layer.forward_cached(&h);
            caches.push(c);
            h = if UPSAMPLE_AFTER.contains(&i) { upsample2x(&y) } else { y };
        }
        (h, caches)
    }

    pub fn forward(&self, patches: &Tensor) -> Result<(Tensor, InpaintCache)> {
        Self::check(patches)?;
        let mask = Self::mask(patches.h());
        let (pred, layers) = self.raw_forward(&Self::input(patches, &mask));
        let out = Self::composite(patches, &pred, &mask);
        Ok((out, InpaintCache { layers, mask }))
    }

    pub fn apply(&self, patches: &Tensor) -> Result<Tensor> {
        Self::check(patches)?;
        let mask = Self::mask(patches.h());
        let x = Self::input(patches, &mask);
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward_eval(&h);
            h = if UPSAMPLE_AFTER.contains(&i) { upsample2x(&y) } else { y };
        }
        Ok(Self::composite(patches, &h, &mask))
    }

    /// Gradient w.r.t. the prediction-net input given the gradient on its raw output.
    fn backprop(&self, cache: &InpaintCache, d_pred: Tensor, mut params: Option<&mut InpaintNet>) -> Tensor {
        let mut g = d_pred;
        for (i, lc) in cache.layers.iter().enumerate().rev() {
            if UPSAMPLE_AFTER.contains(&i) {
                g = upsample2x_backward(&g);
            }
            g = match params.as_deref_mut() {
                Some(net) => net.layers[i].backward(lc, &g, true),
                None => self.layers[i].backward_input(lc, &g),
            };
        }
        g
    }

    /// Gradient reaching the raw prediction: masked, and zero where the clamp is active.
    fn masked_grad(dy: &Tensor, pred: &Tensor, mask: &[f64]) -> Tensor {
        let mut d = dy.clone();
        for i in 0..d.n() {
            let p = pred.plane(i, 0);
            for ((v, &m), &pv) in d.plane_mut(i, 0).iter_mut().zip(mask).zip(p) {
                let pass = if (-1.0..=1.0).contains(&pv) { 1.0 } else { 0.0 };
                *v *= m * pass;
            }
        }
        d
    }

    /// Transposed Jacobian of the composited output w.r.t. the input patches.
    pub fn vjp(&self, cache: &InpaintCache, dy: &Tensor) -> Tensor {
        let mask = &cache.mask;
        let pred = cache.layers.last().expect("non-empty").output();
        let dx = self.backprop(cache, Self::masked_grad(dy, pred, mask), None);
        let mut dq = dy.clone();
        for i in 0..dq.n() {
            let through = dx.plane(i, 0);
            for ((v, &t), &m) in dq.plane_mut(i, 0).iter_mut().zip(through).zip(mask) {
                *v = (1.0 - m) * (*v + t);
            }
        }
        dq
    }
}

impl Module for InpaintNet {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&join(prefix, &format!("layer{i}")), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.params_mut(&join(prefix, &format!("layer{i}")), out);
        }
    }
    fn buffers<'a>(&'a self, _: &str, _: &mut Vec<(String, &'a Buffer)>) {}
    fn buffers_mut<'a>(&'a mut self, _: &str, _: &mut Vec<(String, &'a mut Buffer)>) {}
}

/// Training settings for the inpainting surrogate.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintConfig {
    pub epochs: usize,
    pub seed: u64,
    pub width: usize,
    pub patch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Random squares drawn per slice per epoch.
    pub patches_per_slice: usize,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        InpaintConfig {
            epochs: 10,
            seed: 0,
            width: 16,
            patch: 32,
            batch_size: 16,
            learning_rate: 2e-3,
            patches_per_slice: 4,
        }
    }
}

/// Fits the network to reconstruct the masked centre of random squares.
pub fn train_inpaint_net(slices: &[Array2<f64>], cfg: &InpaintConfig) -> Result<InpaintNet> {
    if slices.is_empty() {
        return Err(Error::Invalid("inpainting surrogate needs at least one slice".into()));
    }
    if cfg.batch_size == 0 || cfg.patch % 4 != 0 || cfg.patch == 0 {
        return Err(Error::Config(format!(
            "invalid surrogate settings: batch {} patch {}",
            cfg.batch_size, cfg.patch
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = InpaintNet::new(cfg.width, &mut rng);
    let mut adam = Adam::new(cfg.learning_rate, 0.9, 0.999);
    let mask = InpaintNet::mask(cfg.patch);
    let masked_count = mask.iter().sum::<f64>();
    let mut order: Vec<usize> = (0..slices.len())
        .flat_map(|i| std::iter::repeat_n(i, cfg.patches_per_slice))
        .collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let patches: Vec<Array2<f64>> = chunk
                .iter()
                .map(|&i| {
                    let (h, w) = slices[i].dim();
                    let r = sample_region(h, w, cfg.patch, &mut rng)?;
                    extract_square(slices[i].view(), r)
                })
                .collect::<Result<_>>()?;
            let q = Tensor::from_planes(patches.iter().map(|p| p.view()))?;
            let (pred, cache) = {
                let x = InpaintNet::input(&q, &mask);
                let (pred, layers) = net.raw_forward(&x);
                (pred, InpaintCache { layers, mask: mask.clone() })
            };
            let norm = 2.0 / (masked_count * q.n() as f64);
            let mut d_pred = Tensor::zeros(q.n(), 1, cfg.patch, cfg.patch);
            for i in 0..q.n() {
                let (p, t) = (pred.plane(i, 0), q.plane(i, 0));
                for (k, d) in d_pred.plane_mut(i, 0).iter_mut().enumerate() {
                    *d = norm * mask[k] * (p[k] - t[k]);
                }
            }
            net.zero_grad();
            let frozen = net.clone();
            frozen.backprop(&cache, d_pred, Some(&mut net));
            adam.update(net.named_params_mut("").into_iter().map(|(_, p)| p));
        }
    }
    Ok(net)
}
