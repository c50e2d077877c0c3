use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, ConvBlock, ConvBlockCache, Param, Tensor};
use crate::store::NamedArrays;

/// User-supplied patch model: same-size convolutions with ReLU between them,
/// output clamped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<ConvBlock>,
}

pub struct ConvStackCache {
    layers: Vec<ConvBlockCache>,
    pre_clamp: Tensor,
}

impl ConvStack {
    /// A single 1×1 convolution with unit weight: the identity on `[-1, 1]`.
    pub fn identity() -> Self {
        let mut conv = Conv2d::zeros(1, 1, 1, 1, 0);
        conv.weight.value[0] = 1.0;
        ConvStack {
            layers: vec![ConvBlock::new(conv, false, Activation::Identity)],
        }
    }

    pub fn from_convs(convs: Vec<Conv2d>) -> Result<Self> {
        if convs.is_empty() {
            return Err(Error::Invalid("external manipulator has no layers".into()));
        }
        let mut prev = 1;
        for (i, c) in convs.iter().enumerate() {
            if c.in_channels != prev || c.kernel % 2 == 0 || c.stride != 1 {
                return Err(Error::Invalid(format!(
                    "external layer {i}: expected odd kernel, stride 1 and {prev} input channels"
                )));
            }
            prev = c.out_channels;
        }
        if prev != 1 {
            return Err(Error::Invalid("external manipulator must end with one channel".into()));
        }
        let n = convs.len();
        let layers = convs
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let act = if i + 1 == n { Activation::Identity } else { Activation::Relu };
                ConvBlock::new(c, false, act)
            })
            .collect();
        Ok(ConvStack { layers })
    }

    /// Reads `{prefix}layer{i}.weight` `[out, in, k, k]` and `{prefix}layer{i}.bias` `[out]`.
    pub fn from_named(arrays: &NamedArrays, prefix: &str) -> Result<Self> {
        let mut convs = Vec::new();
        loop {
            let wname = format!("{prefix}layer{}.weight", convs.len());
            let Some((shape, w)) = arrays.arrays.get(&wname) else {
                break;
            };
            if shape.len() != 4 || shape[2] != shape[3] {
                return Err(Error::Checkpoint {
                    section: "manipulator".into(),
                    message: format!("`{wname}` has shape {shape:?}, expected [out, in, k, k]"),
                });
            }
            let (o, i, k) = (shape[0], shape[1], shape[2]);
            let b = arrays.get("manipulator", &format!("{prefix}layer{}.bias", convs.len()), &[o])?;
            let mut conv = Conv2d::zeros(i, o, k, 1, k / 2);
            conv.weight = Param::new(shape, w.clone());
            conv.bias = Param::new(&[o], b.to_vec());
            convs.push(conv);
        }
        Self::from_convs(convs)
    }

    pub fn export(&self, arrays: &mut NamedArrays, prefix: &str) {
        for (i, l) in self.layers.iter().enumerate() {
            let c = &l.conv;
            arrays.insert(format!("{prefix}layer{i}.weight"), &c.weight.shape, &c.weight.value);
            arrays.insert(format!("{prefix}layer{i}.bias"), &c.bias.shape, &c.bias.value);
        }
    }

    pub fn forward(&self, patches: &Tensor) -> Result<(Tensor, ConvStackCache)> {
        if patches.c() != 1 {
            return Err(Error::Shape("external manipulator expects one channel".into()));
        }
        let mut h = patches.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, c) = l.forward_cached(&h);
            caches.push(c);
            h = y;
        }
        let out = h.map(|v| v.clamp(-1.0, 1.0));
        Ok((
            out,
            ConvStackCache {
                layers: caches,
                pre_clamp: h,
            },
        ))
    }

    pub fn vjp(&self, cache: &ConvStackCache, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        for (v, &z) in g.data_mut().iter_mut().zip(cache.pre_clamp.data()) {
            if !(-1.0..=1.0).contains(&z) {
                *v = 0.0;
            }
        }
        for (l, c) in self.layers.iter().zip(&cache.layers).rev() {
            g = l.backward_input(c, &g);
        }
        g
    }
}
