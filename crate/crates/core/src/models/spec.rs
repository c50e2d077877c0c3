//! Structural descriptions of the networks and their closed-form parameter counts.

/// Five 3×3 same-size conv layers, each followed by batch norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseNetSpec {
    pub layer_channels: Vec<usize>,
}

impl Default for NoiseNetSpec {
    fn default() -> Self {
        NoiseNetSpec {
            layer_channels: vec![1, 16, 32, 32, 16, 1],
        }
    }
}

impl NoiseNetSpec {
    pub fn num_layers(&self) -> usize {
        self.layer_channels.len().saturating_sub(1)
    }
}

/// Two 3×3 convolutions at constant width with an identity skip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualBlockSpec {
    pub width: usize,
}

/// Noise Net plus trunk: conv(2→W), residual blocks at width W, conv(W→1) + tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub noise: NoiseNetSpec,
    pub trunk_width: usize,
    pub residual_blocks: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            noise: NoiseNetSpec::default(),
            trunk_width: 64,
            residual_blocks: 3,
        }
    }
}

impl GeneratorSpec {
    /// Channels entering the trunk: the image plus the transformed noise.
    pub const TRUNK_INPUT_CHANNELS: usize = 2;

    pub fn with_trunk_width(trunk_width: usize) -> Self {
        GeneratorSpec {
            trunk_width,
            ..Default::default()
        }
    }
}

/// Eight conv layers with batch norm and LeakyReLU; stride 2 on every second layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorSpec {
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
    /// Smallest accepted input edge.
    pub min_input: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec::with_base_width(32)
    }
}

impl DiscriminatorSpec {
    /// Channel ladder `[1, b, 2b, 2b, 4b, 4b, 8b, 8b, 16b]`.
    pub fn with_base_width(b: usize) -> Self {
        DiscriminatorSpec {
            channels: vec![1, b, 2 * b, 2 * b, 4 * b, 4 * b, 8 * b, 8 * b, 16 * b],
            leaky_slope: 0.2,
            min_input: 64,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    /// Stride of the 0-based `layer`; layers 2, 4, 6, 8 (1-based) downsample.
    pub fn stride_of(layer: usize) -> usize {
        if layer % 2 == 1 {
            2
        } else {
            1
        }
    }
}

fn conv_count(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout + cout
}

fn bn_count(c: usize) -> usize {
    2 * c
}

/// Exact number of trainable scalars a spec instantiates.
pub trait ParamCount {
    fn parameter_count(&self) -> usize;
}

impl ParamCount for NoiseNetSpec {
    fn parameter_count(&self) -> usize {
        self.layer_channels
            .windows(2)
            .map(|w| conv_count(3, w[0], w[1]) + bn_count(w[1]))
            .sum()
    }
}

impl ParamCount for ResidualBlockSpec {
    fn parameter_count(&self) -> usize {
        2 * conv_count(3, self.width, self.width) + 2 * bn_count(self.width)
    }
}

impl ParamCount for GeneratorSpec {
    fn parameter_count(&self) -> usize {
        let w = self.trunk_width;
        self.noise.parameter_count()
            + conv_count(3, Self::TRUNK_INPUT_CHANNELS, w)
            + bn_count(w)
            + self.residual_blocks * ResidualBlockSpec { width: w }.parameter_count()
            + conv_count(3, w, 1)
    }
}

impl ParamCount for DiscriminatorSpec {
    fn parameter_count(&self) -> usize {
        let convs: usize = self
            .channels
            .windows(2)
            .map(|w| conv_count(3, w[0], w[1]) + bn_count(w[1]))
            .sum();
        let head = match self.channels.last() {
            Some(&c) if self.channels.len() > 1 => c + 1,
            _ => 0,
        };
        convs + head
    }
}

pub fn count_parameters(spec: &dyn ParamCount) -> usize {
    spec.parameter_count()
}
