use ndarray::ArrayView2;
use rand::Rng;

use super::spec::DiscriminatorSpec;
use crate::error::{Error, Result};
use crate::nn::{join, sigmoid, Activation, Buffer, Conv2d, ConvBlock, ConvBlockCache, Module, Param, Tensor};

/// Eight conv-BN-LeakyReLU layers, global average pooling, a linear unit and a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub layers: Vec<ConvBlock>,
    pub head_weight: Param,
    pub head_bias: Param,
}

pub struct DiscriminatorCache {
    layers: Vec<ConvBlockCache>,
    pooled: Vec<f64>,
    probs: Vec<f64>,
    last_shape: [usize; 4],
}

impl DiscriminatorCache {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(spec: &DiscriminatorSpec, rng: &mut R) -> Self {
        let layers = spec
            .channels
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let conv = Conv2d::new(w[0], w[1], 3, DiscriminatorSpec::stride_of(i), 1, rng);
                ConvBlock::new(conv, true, Activation::LeakyRelu(spec.leaky_slope))
            })
            .collect();
        let c = *spec.channels.last().unwrap_or(&1);
        let bound = 1.0 / (c as f64).sqrt();
        Discriminator {
            spec: spec.clone(),
            layers,
            head_weight: Param::uniform(&[1, c], bound, rng),
            head_bias: Param::uniform(&[1], bound, rng),
        }
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c() != 1 {
            return Err(Error::Shape("discriminator input must have one channel".into()));
        }
        let m = self.spec.min_input;
        if x.h() < m || x.w() < m {
            return Err(Error::Shape(format!(
                "discriminator input {}x{} is below the minimum {m}x{m}",
                x.h(),
                x.w()
            )));
        }
        Ok(())
    }

    fn head(&self, h: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (n, c, p) = (h.n(), h.c(), h.plane_len() as f64);
        let mut pooled = vec![0.0; n * c];
        let mut probs = vec![0.0; n];
        for i in 0..n {
            let mut z = self.head_bias.value[0];
            for ch in 0..c {
                let m = h.plane(i, ch).iter().sum::<f64>() / p;
                pooled[i * c + ch] = m;
                z += self.head_weight.value[ch] * m;
            }
            probs[i] = sigmoid(z);
        }
        (pooled, probs)
    }

    /// Training-mode likelihoods that each sample is an original slice.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Vec<f64>, DiscriminatorCache)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (y, c) = layer.forward_train(&h);
            caches.push(c);
            h = y;
        }
        let (pooled, probs) = self.head(&h);
        Ok((
            probs.clone(),
            DiscriminatorCache {
                layers: caches,
                pooled,
                probs,
                last_shape: h.shape(),
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let h = self
            .layers
            .iter()
            .fold(x.clone(), |h, layer| layer.forward_eval(&h));
        Ok(self.head(&h).1)
    }

    /// Eval-mode likelihood for one image, strictly inside (0, 1) for finite logits.
    pub fn likelihood(&self, image: ArrayView2<f64>) -> Result<f64> {
        let x = Tensor::from_planes([image])?;
        Ok(self.forward_eval(&x)?[0])
    }

    /// Backpropagates `d_prob` (gradient of a loss w.r.t. each likelihood).
    /// With `param_grads = false` only the input gradient is produced.
    pub fn backward(&mut self, cache: &DiscriminatorCache, d_prob: &[f64], param_grads: bool) -> Tensor {
        let [n, c, h, w] = cache.last_shape;
        let p = (h * w) as f64;
        let mut dh = Tensor::zeros(n, c, h, w);
        for i in 0..n {
            let pr = cache.probs[i];
            let dz = d_prob[i] * pr * (1.0 - pr);
            if param_grads {
                self.head_bias.grad[0] += dz;
                for ch in 0..c {
                    self.head_weight.grad[ch] += dz * cache.pooled[i * c + ch];
                }
            }
            for ch in 0..c {
                let g = dz * self.head_weight.value[ch] / p;
                dh.plane_mut(i, ch).iter_mut().for_each(|v| *v = g);
            }
        }
        let mut g = dh;
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers).rev() {
            g = layer.backward(lc, &g, param_grads);
        }
        g
    }
}

impl Module for Discriminator {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        let base = join(prefix, "d");
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&join(&base, &format!("layer{i}")), out);
        }
        out.push((join(&base, "head.weight"), &self.head_weight));
        out.push((join(&base, "head.bias"), &self.head_bias));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        let base = join(prefix, "d");
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.params_mut(&join(&base, &format!("layer{i}")), out);
        }
        out.push((join(&base, "head.weight"), &mut self.head_weight));
        out.push((join(&base, "head.bias"), &mut self.head_bias));
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        let base = join(prefix, "d");
        for (i, l) in self.layers.iter().enumerate() {
            l.buffers(&join(&base, &format!("layer{i}")), out);
        }
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Buffer)>) {
        let base = join(prefix, "d");
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.buffers_mut(&join(&base, &format!("layer{i}")), out);
        }
    }
}
