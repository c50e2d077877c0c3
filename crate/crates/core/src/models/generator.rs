use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::spec::{GeneratorSpec, NoiseNetSpec};
use crate::error::{Error, Result};
use crate::nn::{
    join, Activation, BatchNorm2d, BnCache, Buffer, Conv2d, ConvBlock, ConvBlockCache, Module,
    Param, Tensor,
};

/// Smallest spatial edge the Noise Net accepts.
pub const MIN_NOISE_EDGE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseNet {
    pub layers: Vec<ConvBlock>,
}

pub struct NoiseNetCache {
    layers: Vec<ConvBlockCache>,
}

impl NoiseNet {
    pub fn new<R: Rng + ?Sized>(spec: &NoiseNetSpec, rng: &mut R) -> Self {
        let layers = spec
            .layer_channels
            .windows(2)
            .map(|w| ConvBlock::new(Conv2d::same3(w[0], w[1], rng), true, Activation::Relu))
            .collect();
        NoiseNet { layers }
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn forward_train(&mut self, delta: &Tensor) -> (Tensor, NoiseNetCache) {
        let mut h = delta.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (y, c) = layer.forward_train(&h);
            caches.push(c);
            h = y;
        }
        (h, NoiseNetCache { layers: caches })
    }

    pub fn forward_eval(&self, delta: &Tensor) -> Tensor {
        self.layers
            .iter()
            .fold(delta.clone(), |h, layer| layer.forward_eval(&h))
    }

    pub fn backward(&mut self, cache: &NoiseNetCache, dy: &Tensor) {
        let mut g = dy.clone();
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            g = layer.backward(c, &g, true);
        }
    }

    /// Eval-mode forward on a single field with shape checks.
    pub fn apply(&self, delta: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (h, w) = delta.dim();
        if h < MIN_NOISE_EDGE || w < MIN_NOISE_EDGE {
            return Err(Error::Shape(format!(
                "noise field {h}x{w} is below the minimum {MIN_NOISE_EDGE}x{MIN_NOISE_EDGE}"
            )));
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("perturbation field".into()));
        }
        let t = Tensor::from_planes([delta])?;
        Ok(self.forward_eval(&t).to_array2(0))
    }
}

impl Module for NoiseNet {
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
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.buffers(&join(prefix, &format!("layer{i}")), out);
        }
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Buffer)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.buffers_mut(&join(prefix, &format!("layer{i}")), out);
        }
    }
}

/// conv-BN-ReLU, conv-BN, add the input, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub first: ConvBlock,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

pub struct ResidualCache {
    first: ConvBlockCache,
    bn2: BnCache,
    output: Tensor,
}

impl ResidualBlock {
    /// The second norm starts with zero scale, so a fresh block is the identity on
    /// non-negative inputs.
    pub fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let mut bn2 = BatchNorm2d::new(width);
        bn2.gamma.value.iter_mut().for_each(|g| *g = 0.0);
        ResidualBlock {
            first: ConvBlock::new(Conv2d::same3(width, width, rng), true, Activation::Relu),
            conv2: Conv2d::same3(width, width, rng),
            bn2,
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, ResidualCache) {
        let (h, first) = self.first.forward_train(x);
        let (mut z, bn2) = self.bn2.forward_train(&self.conv2.forward(&h));
        z.add_assign(x);
        let y = Activation::Relu.forward(&z);
        (
            y.clone(),
            ResidualCache {
                first,
                bn2,
                output: y,
            },
        )
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let h = self.first.forward_eval(x);
        let mut z = self.bn2.forward_eval(&self.conv2.forward(&h));
        z.add_assign(x);
        Activation::Relu.forward(&z)
    }

    pub fn backward(&mut self, cache: &ResidualCache, dy: &Tensor) -> Tensor {
        let dz = Activation::Relu.backward(&cache.output, dy);
        let dc = self.bn2.backward(&cache.bn2, &dz, true);
        let dh = self.conv2.backward(cache.first.output(), &dc, true);
        let mut dx = self.first.backward(&cache.first, &dh, true);
        dx.add_assign(&dz);
        dx
    }
}

impl Module for ResidualBlock {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.first.params(&join(prefix, "conv1"), out);
        self.conv2.params(&join(prefix, "conv2"), out);
        self.bn2.params(&join(prefix, "bn2"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.first.params_mut(&join(prefix, "conv1"), out);
        self.conv2.params_mut(&join(prefix, "conv2"), out);
        self.bn2.params_mut(&join(prefix, "bn2"), out);
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        self.first.buffers(&join(prefix, "conv1"), out);
        self.bn2.buffers(&join(prefix, "bn2"), out);
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Buffer)>) {
        self.first.buffers_mut(&join(prefix, "conv1"), out);
        self.bn2.buffers_mut(&join(prefix, "bn2"), out);
    }
}

/// `G(x, δ) = trunk(concat(x, N(δ)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub noise: NoiseNet,
    pub head: ConvBlock,
    pub blocks: Vec<ResidualBlock>,
    pub tail: ConvBlock,
}

pub struct GeneratorCache {
    noise: NoiseNetCache,
    shared_noise: bool,
    head: ConvBlockCache,
    blocks: Vec<ResidualCache>,
    tail: ConvBlockCache,
    trunk_input_channels: usize,
}

impl GeneratorCache {
    /// Channel count of the tensor that entered the trunk.
    pub fn trunk_input_channels(&self) -> usize {
        self.trunk_input_channels
    }
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(spec: &GeneratorSpec, rng: &mut R) -> Self {
        let w = spec.trunk_width;
        let noise = NoiseNet::new(&spec.noise, rng);
        let head = ConvBlock::new(
            Conv2d::same3(GeneratorSpec::TRUNK_INPUT_CHANNELS, w, rng),
            true,
            Activation::Relu,
        );
        let blocks = (0..spec.residual_blocks)
            .map(|_| ResidualBlock::new(w, rng))
            .collect();
        let tail = ConvBlock::new(Conv2d::same3(w, 1, rng), false, Activation::Tanh);
        Generator {
            spec: spec.clone(),
            noise,
            head,
            blocks,
            tail,
        }
    }

    /// Top-level trunk stages: head conv, residual blocks, tail conv.
    pub fn trunk_stage_count(&self) -> usize {
        2 + self.blocks.len()
    }

    fn check_inputs(x: &Tensor, delta: &Tensor) -> Result<()> {
        if x.c() != 1 || delta.c() != 1 {
            return Err(Error::Shape("generator inputs must have one channel".into()));
        }
        if x.h() != delta.h() || x.w() != delta.w() {
            return Err(Error::Shape(format!(
                "slice is {}x{} but perturbation is {}x{}",
                x.h(),
                x.w(),
                delta.h(),
                delta.w()
            )));
        }
        if delta.n() != 1 && delta.n() != x.n() {
            return Err(Error::Shape(format!(
                "{} perturbation fields for a batch of {}",
                delta.n(),
                x.n()
            )));
        }
        if x.h() < MIN_NOISE_EDGE || x.w() < MIN_NOISE_EDGE {
            return Err(Error::Shape(format!(
                "input {}x{} is below the minimum {MIN_NOISE_EDGE}x{MIN_NOISE_EDGE}",
                x.h(),
                x.w()
            )));
        }
        Ok(())
    }

    /// Training-mode forward. A single-sample `delta` is shared across the batch;
    /// the Noise Net then runs once, which is exact because batch statistics of
    /// identical copies equal those of one copy.
    pub fn forward_train(&mut self, x: &Tensor, delta: &Tensor) -> Result<(Tensor, GeneratorCache)> {
        Self::check_inputs(x, delta)?;
        let (n_delta, noise) = self.noise.forward_train(delta);
        let input = Tensor::concat_channels(x, &n_delta)?;
        let trunk_input_channels = input.c();
        let (mut h, head) = self.head.forward_train(&input);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (y, c) = b.forward_train(&h);
            blocks.push(c);
            h = y;
        }
        let (out, tail) = self.tail.forward_train(&h);
        Ok((
            out,
            GeneratorCache {
                noise,
                shared_noise: delta.n() == 1 && x.n() != 1,
                head,
                blocks,
                tail,
                trunk_input_channels,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor, delta: &Tensor) -> Result<Tensor> {
        Self::check_inputs(x, delta)?;
        let n_delta = self.noise.forward_eval(delta);
        let input = Tensor::concat_channels(x, &n_delta)?;
        let mut h = self.head.forward_eval(&input);
        for b in &self.blocks {
            h = b.forward_eval(&h);
        }
        Ok(self.tail.forward_eval(&h))
    }

    /// Accumulates parameter gradients for upstream `dy` on the protected output.
    pub fn backward(&mut self, cache: &GeneratorCache, dy: &Tensor) {
        let mut g = self.tail.backward(&cache.tail, dy, true);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = b.backward(c, &g);
        }
        let d_input = self.head.backward(&cache.head, &g, true);
        let (_, d_noise) = d_input.split_channels(1);
        let d_noise = if cache.shared_noise {
            d_noise.sum_batch()
        } else {
            d_noise
        };
        self.noise.backward(&cache.noise, &d_noise);
    }

    /// Protects one slice in eval mode.
    pub fn protect_slice(&self, x: ArrayView2<f64>, delta: ArrayView2<f64>) -> Result<Array2<f64>> {
        let xt = Tensor::from_planes([x])?;
        let dt = Tensor::from_planes([delta])?;
        Ok(self.forward_eval(&xt, &dt)?.to_array2(0))
    }

    /// Initializes the trunk so that `G(x, δ) ≈ x` on data resembling `x`.
    ///
    /// The head splits the image into ramp features `relu(±u − t)` of the
    /// batch-standardized intensity `u`, residual blocks start as identities, and
    /// the tail's centre taps are a ridge least-squares fit of `atanh(x)` on those
    /// ramps. The noise channel starts disconnected (zero head weights) and is
    /// picked up by the first gradient step. Running statistics are reset to the
    /// calibration batch so eval mode matches training mode.
    pub fn calibrate_passthrough(&mut self, x: &Tensor, delta: &Tensor) -> Result<()> {
        Self::check_inputs(x, delta)?;
        let w = self.spec.trunk_width;
        if w < 2 {
            return Err(Error::Invalid("passthrough needs a trunk width of at least 2".into()));
        }
        let half = w / 2;
        let sign = |k: usize| if k < half { 1.0 } else { -1.0 };
        let centre = 4; // index of the centre tap in a 3×3 kernel

        let head = &mut self.head.conv;
        for k in 0..w {
            for tap in 0..9 {
                let wx = ((k * 2) * 9) + tap;
                let wn = ((k * 2 + 1) * 9) + tap;
                head.weight.value[wx] = if tap == centre { sign(k) } else { 0.0 };
                head.weight.value[wn] = 0.0;
            }
            head.bias.value[k] = 0.0;
        }

        let (mean, var) = BatchNorm2d::batch_stats(x);
        let u: Vec<f64> = x
            .data()
            .iter()
            .map(|v| (v - mean[0]) / (var[0] + crate::nn::BN_EPS).sqrt())
            .collect();
        let mut sorted = u.clone();
        sorted.sort_by(f64::total_cmp);
        let quantile = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
        let npos = half;
        let nneg = w - half;
        let mut thresholds = vec![0.0; w];
        for (j, t) in thresholds.iter_mut().take(npos).enumerate() {
            *t = quantile(j as f64 / npos as f64) - 1e-3;
        }
        for j in 0..nneg {
            thresholds[half + j] = -quantile(1.0 - j as f64 / nneg as f64) - 1e-3;
        }
        let bn = self.head.bn.as_mut().expect("trunk head has batch norm");
        for k in 0..w {
            bn.gamma.value[k] = 1.0;
            bn.beta.value[k] = -thresholds[k];
        }
        for b in &mut self.blocks {
            b.bn2.gamma.value.iter_mut().for_each(|g| *g = 0.0);
            b.bn2.beta.value.iter_mut().for_each(|g| *g = 0.0);
        }

        // Ridge fit of atanh(x) on the ramp features plus intercept.
        let dim = w + 1;
        let mut ata = vec![0.0; dim * dim];
        let mut aty = vec![0.0; dim];
        let mut feat = vec![0.0; dim];
        for (&ui, &xi) in u.iter().zip(x.data()) {
            for k in 0..w {
                feat[k] = (sign(k) * ui - thresholds[k]).max(0.0);
            }
            feat[w] = 1.0;
            let target = xi.clamp(-0.999, 0.999).atanh();
            for r in 0..dim {
                aty[r] += feat[r] * target;
                for c in 0..dim {
                    ata[r * dim + c] += feat[r] * feat[c];
                }
            }
        }
        let ridge = 1e-6 * u.len() as f64;
        for r in 0..w {
            ata[r * dim + r] += ridge;
        }
        let coef = solve_dense(&mut ata, &mut aty, dim)?;
        let tail = &mut self.tail.conv;
        tail.weight.value.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..w {
            tail.weight.value[k * 9 + centre] = coef[k];
        }
        tail.bias.value[0] = coef[w];

        self.reset_running_stats(x, delta)
    }

    /// Sets every running statistic to the exact batch statistics of `x`.
    pub fn reset_running_stats(&mut self, x: &Tensor, delta: &Tensor) -> Result<()> {
        Self::check_inputs(x, delta)?;
        let stats = self.clone().batch_statistics(x, delta)?;
        for ((_, b), s) in self.named_buffers_mut("").into_iter().zip(stats) {
            b.value = s;
        }
        Ok(())
    }

    /// Running-statistic targets (mean, unbiased var) for every norm, in buffer order.
    fn batch_statistics(&mut self, x: &Tensor, delta: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        let unbiased = |v: Vec<f64>, count: usize| -> Vec<f64> {
            let k = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
            v.into_iter().map(|s| s * k).collect()
        };
        let push = |z: &Tensor, out: &mut Vec<Vec<f64>>| {
            let (m, v) = BatchNorm2d::batch_stats(z);
            out.push(m);
            out.push(unbiased(v, z.n() * z.plane_len()));
        };
        let mut h = delta.clone();
        for layer in &mut self.noise.layers {
            push(&layer.conv.forward(&h), &mut out);
            h = layer.forward_train(&h).0;
        }
        let input = Tensor::concat_channels(x, &h)?;
        push(&self.head.conv.forward(&input), &mut out);
        let mut h = self.head.forward_train(&input).0;
        for b in &mut self.blocks {
            push(&b.first.conv.forward(&h), &mut out);
            let mid = b.first.forward_train(&h).0;
            push(&b.conv2.forward(&mid), &mut out);
            h = b.forward_train(&h).0;
        }
        Ok(out)
    }
}

impl Module for Generator {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.noise.params(&join(prefix, "g_noise"), out);
        let trunk = join(prefix, "g_trunk");
        self.head.params(&join(&trunk, "head"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&join(&trunk, &format!("res{i}")), out);
        }
        self.tail.params(&join(&trunk, "tail"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.noise.params_mut(&join(prefix, "g_noise"), out);
        let trunk = join(prefix, "g_trunk");
        self.head.params_mut(&join(&trunk, "head"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&join(&trunk, &format!("res{i}")), out);
        }
        self.tail.params_mut(&join(&trunk, "tail"), out);
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        self.noise.buffers(&join(prefix, "g_noise"), out);
        let trunk = join(prefix, "g_trunk");
        self.head.buffers(&join(&trunk, "head"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.buffers(&join(&trunk, &format!("res{i}")), out);
        }
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Buffer)>) {
        self.noise.buffers_mut(&join(prefix, "g_noise"), out);
        let trunk = join(prefix, "g_trunk");
        self.head.buffers_mut(&join(&trunk, "head"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.buffers_mut(&join(&trunk, &format!("res{i}")), out);
        }
    }
}

/// Gaussian elimination with partial pivoting on a dense `n×n` system.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("non-empty range");
        if a[pivot * n + col].abs() < 1e-300 {
            return Err(Error::Invalid("singular calibration system".into()));
        }
        if pivot != col {
            for c in 0..n {
                a.swap(pivot * n + c, col * n + c);
            }
            b.swap(pivot, col);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r * n + c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Ok(x)
}
