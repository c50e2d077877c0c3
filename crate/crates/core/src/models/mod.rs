//! Noise Net, generator trunk and discriminator.

mod discriminator;
mod generator;
mod spec;

pub use discriminator::{Discriminator, DiscriminatorCache};
pub use generator::{Generator, GeneratorCache, NoiseNet, NoiseNetCache, ResidualBlock, ResidualCache, MIN_NOISE_EDGE};
pub use spec::{
    count_parameters, DiscriminatorSpec, GeneratorSpec, NoiseNetSpec, ParamCount, ResidualBlockSpec,
};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::Module;

/// `N(δ)` for a single field, eval mode.
pub fn noise_net_forward(delta: ArrayView2<f64>, net: &NoiseNet) -> Result<Array2<f64>> {
    net.apply(delta)
}

/// Protected pixels `x^p = G(x, δ)`, eval mode.
pub fn generator_forward(x: ArrayView2<f64>, delta: ArrayView2<f64>, g: &Generator) -> Result<Array2<f64>> {
    if x.dim() != delta.dim() {
        return Err(Error::Shape(format!(
            "slice {:?} and perturbation {:?} differ",
            x.dim(),
            delta.dim()
        )));
    }
    g.protect_slice(x, delta)
}

/// Likelihood that `image` is an original slice, eval mode.
pub fn discriminator_forward(image: ArrayView2<f64>, d: &Discriminator) -> Result<f64> {
    d.likelihood(image)
}

/// Sets every trainable parameter of `m` to zero.
pub fn zero_parameters<M: Module>(m: &mut M) {
    for (_, p) in m.named_params_mut("") {
        p.value.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, Tensor};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn field(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut r = rng(seed);
        Array2::from_shape_fn((h, w), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn noise_net_preserves_shape() {
        let net = NoiseNet::new(&NoiseNetSpec::default(), &mut rng(1));
        assert_eq!(net.conv_layer_count(), 5);
        for &s in &[64usize, 17] {
            let out = noise_net_forward(field(s, s, 2).view(), &net).unwrap();
            assert_eq!(out.dim(), (s, s));
        }
        assert!(noise_net_forward(field(7, 16, 2).view(), &net).is_err());
    }

    #[test]
    fn noise_net_matches_layerwise_reference() {
        // Independent reference: explicit 3x3 loops, batch norm with eval statistics, ReLU.
        let mut net = NoiseNet::new(&NoiseNetSpec::default(), &mut rng(3));
        let mut r = rng(4);
        for (_, b) in net.named_buffers_mut("") {
            for v in &mut b.value {
                *v = r.random_range(0.5..1.5);
            }
        }
        let delta = field(8, 8, 5);
        let mut h: Vec<Array2<f64>> = vec![delta.clone()];
        for layer in &net.layers {
            let conv: &Conv2d = &layer.conv;
            let bn = layer.bn.as_ref().unwrap();
            let mut next = Vec::new();
            for o in 0..conv.out_channels {
                let mut out = Array2::<f64>::zeros((8, 8));
                for y in 0..8isize {
                    for x in 0..8isize {
                        let mut acc = conv.bias.value[o];
                        for (c, plane) in h.iter().enumerate() {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (iy, ix) = (y + ky - 1, x + kx - 1);
                                    if (0..8).contains(&iy) && (0..8).contains(&ix) {
                                        let wi = ((o * conv.in_channels + c) * 3 + ky as usize) * 3 + kx as usize;
                                        acc += conv.weight.value[wi] * plane[[iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        let z = (acc - bn.running_mean.value[o]) / (bn.running_var.value[o] + 1e-5).sqrt()
                            * bn.gamma.value[o]
                            + bn.beta.value[o];
                        out[[y as usize, x as usize]] = z.max(0.0);
                    }
                }
                next.push(out);
            }
            h = next;
        }
        let got = noise_net_forward(delta.view(), &net).unwrap();
        for (a, b) in got.iter().zip(h[0].iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn generator_output_range_and_shape() {
        let g = Generator::new(&GeneratorSpec::with_trunk_width(8), &mut rng(7));
        let x = field(64, 64, 8);
        let d = field(64, 64, 9).mapv(|v| v * 3.0);
        let out = generator_forward(x.view(), d.view(), &g).unwrap();
        assert_eq!(out.dim(), (64, 64));
        assert!(out.iter().all(|v| v.abs() <= 1.0));
        assert!(generator_forward(x.view(), field(32, 64, 1).view(), &g).is_err());
    }

    #[test]
    fn zero_generator_outputs_zero() {
        let mut g = Generator::new(&GeneratorSpec::with_trunk_width(4), &mut rng(7));
        zero_parameters(&mut g);
        let out = generator_forward(field(16, 16, 1).view(), field(16, 16, 2).view(), &g).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_noise_tail_makes_delta_irrelevant() {
        let mut g = Generator::new(&GeneratorSpec::with_trunk_width(4), &mut rng(17));
        let last = g.noise.layers.last_mut().unwrap();
        last.conv.weight.value.iter_mut().for_each(|v| *v = 0.0);
        let x = field(16, 16, 1);
        let a = generator_forward(x.view(), field(16, 16, 2).view(), &g).unwrap();
        let b = generator_forward(x.view(), field(16, 16, 3).view(), &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trunk_receives_two_channels() {
        let mut g = Generator::new(&GeneratorSpec::with_trunk_width(4), &mut rng(2));
        let x = Tensor::from_planes([field(16, 16, 1).view(), field(16, 16, 2).view()]).unwrap();
        let d = Tensor::from_planes([field(16, 16, 3).view()]).unwrap();
        let (out, cache) = g.forward_train(&x, &d).unwrap();
        assert_eq!(cache.trunk_input_channels(), 2);
        assert_eq!(g.head.conv.in_channels, 2);
        assert_eq!(out.shape(), [2, 1, 16, 16]);
        assert_eq!(g.trunk_stage_count(), 5);
    }

    #[test]
    fn discriminator_range_and_zero_params() {
        let spec = DiscriminatorSpec::with_base_width(4);
        let mut d = Discriminator::new(&spec, &mut rng(3));
        assert_eq!(d.conv_layer_count(), 8);
        let p = discriminator_forward(field(64, 64, 1).view(), &d).unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert!(discriminator_forward(field(32, 64, 1).view(), &d).is_err());
        let again = discriminator_forward(field(64, 64, 1).view(), &d).unwrap();
        assert_eq!(p, again);
        zero_parameters(&mut d);
        assert_eq!(discriminator_forward(field(64, 64, 1).view(), &d).unwrap(), 0.5);
    }

    #[test]
    fn parameter_counts_match_instantiated_models() {
        let noise = NoiseNetSpec::default();
        let expected: usize = [(1, 16), (16, 32), (32, 32), (32, 16), (16, 1)]
            .iter()
            .map(|&(i, o)| 9 * i * o + o + 2 * o)
            .sum();
        assert_eq!(count_parameters(&noise), expected);
        assert_eq!(NoiseNet::new(&noise, &mut rng(0)).num_params(), expected);

        let res = ResidualBlockSpec { width: 64 };
        assert_eq!(count_parameters(&res), 2 * (3 * 3 * 64 * 64 + 64) + 2 * (2 * 64));
        assert_eq!(ResidualBlock::new(64, &mut rng(0)).num_params(), count_parameters(&res));

        let g = GeneratorSpec::with_trunk_width(8);
        assert_eq!(Generator::new(&g, &mut rng(0)).num_params(), count_parameters(&g));
        let d = DiscriminatorSpec::with_base_width(4);
        assert_eq!(Discriminator::new(&d, &mut rng(0)).num_params(), count_parameters(&d));

        assert_eq!(count_parameters(&NoiseNetSpec { layer_channels: vec![] }), 0);
        assert_eq!(
            count_parameters(&DiscriminatorSpec {
                channels: vec![],
                leaky_slope: 0.2,
                min_input: 64
            }),
            0
        );
    }

    #[test]
    fn passthrough_calibration_reproduces_input() {
        let spec = GeneratorSpec::with_trunk_width(16);
        let mut g = Generator::new(&spec, &mut rng(5));
        // Piecewise-constant slices resembling body/lung/air regions.
        let planes: Vec<Array2<f64>> = (0..4)
            .map(|k| {
                Array2::from_shape_fn((32, 32), |(y, x)| {
                    let r = ((y as f64 - 16.0).powi(2) + (x as f64 - 16.0).powi(2)).sqrt();
                    if r < 6.0 + k as f64 {
                        -0.84
                    } else if r < 13.0 {
                        -0.48
                    } else {
                        -0.988
                    }
                })
            })
            .collect();
        let x = Tensor::from_planes(planes.iter().map(|p| p.view())).unwrap();
        let delta = Tensor::from_planes([field(32, 32, 6).view()]).unwrap();
        g.calibrate_passthrough(&x, &delta).unwrap();
        let (out, _) = g.forward_train(&x, &delta).unwrap();
        let max_err = out.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err < 0.02, "train-mode passthrough error {max_err}");
        let eval = g.forward_eval(&x, &delta).unwrap();
        let max_err = eval.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err < 0.02, "eval-mode passthrough error {max_err}");
    }
}
