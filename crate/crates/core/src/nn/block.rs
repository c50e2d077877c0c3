use super::activation::Activation;
use super::conv::Conv2d;
use super::norm::{BatchNorm2d, BnCache};
use super::param::{join, Buffer, Module, Param};
use super::tensor::Tensor;

/// Convolution, optional batch normalization, then an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
    pub act: Activation,
}

#[derive(Clone, Debug)]
pub struct ConvBlockCache {
    input: Tensor,
    bn: Option<BnCache>,
    output: Tensor,
}

impl ConvBlockCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl ConvBlock {
    pub fn new(conv: Conv2d, batch_norm: bool, act: Activation) -> Self {
        let bn = batch_norm.then(|| BatchNorm2d::new(conv.out_channels));
        ConvBlock { conv, bn, act }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, ConvBlockCache) {
        let z = self.conv.forward(x);
        let (z, bn) = match self.bn.as_mut() {
            Some(bn) => {
                let (y, c) = bn.forward_train(&z);
                (y, Some(c))
            }
            None => (z, None),
        };
        let y = self.act.forward(&z);
        let cache = ConvBlockCache {
            input: x.clone(),
            bn,
            output: y.clone(),
        };
        (y, cache)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let z = self.conv.forward(x);
        let z = match &self.bn {
            Some(bn) => bn.forward_eval(&z),
            None => z,
        };
        self.act.forward(&z)
    }

    pub fn backward(&mut self, cache: &ConvBlockCache, dy: &Tensor, param_grads: bool) -> Tensor {
        let dz = self.act.backward(&cache.output, dy);
        let dz = match (self.bn.as_mut(), cache.bn.as_ref()) {
            (Some(bn), Some(c)) => bn.backward(c, &dz, param_grads),
            _ => dz,
        };
        self.conv.backward(&cache.input, &dz, param_grads)
    }

    /// Cached forward pass for blocks without batch norm, leaving `self` untouched.
    pub fn forward_cached(&self, x: &Tensor) -> (Tensor, ConvBlockCache) {
        assert!(self.bn.is_none(), "forward_cached requires a block without batch norm");
        let y = self.act.forward(&self.conv.forward(x));
        let cache = ConvBlockCache {
            input: x.clone(),
            bn: None,
            output: y.clone(),
        };
        (y, cache)
    }

    /// Input gradient only, for blocks without batch norm; parameters are untouched.
    pub fn backward_input(&self, cache: &ConvBlockCache, dy: &Tensor) -> Tensor {
        assert!(self.bn.is_none(), "backward_input requires a block without batch norm");
        let dz = self.act.backward(&cache.output, dy);
        self.conv.input_grad(&cache.input, &dz)
    }
}

impl Module for ConvBlock {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv.params(&join(prefix, "conv"), out);
        if let Some(bn) = &self.bn {
            bn.params(&join(prefix, "bn"), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        if let Some(bn) = &mut self.bn {
            bn.params_mut(&join(prefix, "bn"), out);
        }
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        if let Some(bn) = &self.bn {
            bn.buffers(&join(prefix, "bn"), out);
        }
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Buffer)>) {
        if let Some(bn) = &mut self.bn {
            bn.buffers_mut(&join(prefix, "bn"), out);
        }
    }
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2x(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    let mut out = Tensor::zeros(n, c, 2 * h, 2 * w);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward(dy: &Tensor) -> Tensor {
    let (n, c, h, w) = (dy.n(), dy.c(), dy.h() / 2, dy.w() / 2);
    let mut dx = Tensor::zeros(n, c, h, w);
    for i in 0..n {
        for ch in 0..c {
            let src = dy.plane(i, ch);
            let dst = dx.plane_mut(i, ch);
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                }
            }
        }
    }
    dx
}
