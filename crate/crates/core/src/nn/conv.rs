use rand::Rng;

use super::param::{join, Module, Param};
use super::tensor::Tensor;

/// `C = A·B (+ C if accumulate)` with explicit strides, `A: m×k`, `B: k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the debug assertions above describe the extents that dgemm reads;
    // every call site passes buffers sized exactly for the given m, k, n and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2D convolution with square kernels and zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Uniform init with bound `1/sqrt(fan_in)` on weights and bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Conv2d {
            weight: Param::uniform(&[out_channels, in_channels, kernel, kernel], bound, rng),
            bias: Param::uniform(&[out_channels], bound, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Same-size 3×3 convolution.
    pub fn same3<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Conv2d::new(in_channels, out_channels, 3, 1, 1, rng)
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Param::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |d: usize| (d + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn k_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, ho: usize, wo: usize, col: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plen = ho * wo;
        for ci in 0..self.in_channels {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * plen..(row + 1) * plen];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            drow.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plen = ho * wo;
        for ci in 0..self.in_channels {
            let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * plen..(row + 1) * plen];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.in_channels, "conv input channels");
        let (n, h, w) = (x.n(), x.h(), x.w());
        let (ho, wo) = self.out_hw(h, w);
        let (kl, plen, co) = (self.k_len(), ho * wo, self.out_channels);
        let mut out = Tensor::zeros(n, co, ho, wo);
        let mut col = vec![0.0; if self.is_pointwise() { 0 } else { kl * plen }];
        for i in 0..n {
            let cols: &[f64] = if self.is_pointwise() {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), h, w, ho, wo, &mut col);
                &col
            };
            let dst = out.sample_mut(i);
            gemm(co, kl, plen, &self.weight.value, (kl, 1), cols, (plen, 1), dst, false);
            for (o, b) in self.bias.value.iter().enumerate() {
                dst[o * plen..(o + 1) * plen].iter_mut().for_each(|v| *v += b);
            }
        }
        out
    }

    /// Gradient with respect to the input; parameters are only read.
    pub fn input_grad(&self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (n, h, w) = (x.n(), x.h(), x.w());
        let (ho, wo) = (dy.h(), dy.w());
        let (kl, plen, co) = (self.k_len(), ho * wo, self.out_channels);
        let mut dx = Tensor::zeros(n, self.in_channels, h, w);
        if self.is_pointwise() {
            for i in 0..n {
                gemm(kl, co, plen, &self.weight.value, (1, kl), dy.sample(i), (plen, 1), dx.sample_mut(i), false);
            }
            return dx;
        }
        let mut dcol = vec![0.0; kl * plen];
        for i in 0..n {
            gemm(kl, co, plen, &self.weight.value, (1, kl), dy.sample(i), (plen, 1), &mut dcol, false);
            self.col2im(&dcol, h, w, ho, wo, dx.sample_mut(i));
        }
        dx
    }

    /// Adds weight and bias gradients for upstream gradient `dy` at input `x`.
    pub fn accumulate_param_grads(&mut self, x: &Tensor, dy: &Tensor) {
        let (n, h, w) = (x.n(), x.h(), x.w());
        let (ho, wo) = (dy.h(), dy.w());
        let (kl, plen, co) = (self.k_len(), ho * wo, self.out_channels);
        let mut col = vec![0.0; if self.is_pointwise() { 0 } else { kl * plen }];
        for i in 0..n {
            let g = dy.sample(i);
            let cols: &[f64] = if self.is_pointwise() {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), h, w, ho, wo, &mut col);
                &col
            };
            gemm(co, plen, kl, g, (plen, 1), cols, (1, plen), &mut self.weight.grad, true);
            for o in 0..co {
                self.bias.grad[o] += g[o * plen..(o + 1) * plen].iter().sum::<f64>();
            }
        }
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, param_grads: bool) -> Tensor {
        if param_grads {
            self.accumulate_param_grads(x, dy);
        }
        self.input_grad(x, dy)
    }
}

impl Module for Conv2d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (ho, wo) = conv.out_hw(x.h(), x.w());
        let k = conv.kernel;
        let mut out = Tensor::zeros(x.n(), conv.out_channels, ho, wo);
        for i in 0..x.n() {
            for o in 0..conv.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.value[o];
                        for c in 0..conv.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h() as isize || ix >= x.w() as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((o * conv.in_channels + c) * k + ky) * k + kx];
                                    acc += wv * x.plane(i, c)[iy as usize * x.w() + ix as usize];
                                }
                            }
                        }
                        out.plane_mut(i, o)[oy * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matches_naive_for_strides_and_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 2, 0)] {
            let conv = Conv2d::new(3, 4, k, s, p, &mut rng);
            let x = random_tensor([2, 3, 9, 8], &mut rng);
            let a = conv.forward(&x);
            let b = naive(&conv, &x);
            assert_eq!(a.shape(), b.shape());
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = random_tensor([2, 2, 7, 6], &mut rng);
        let y = conv.forward(&x);
        let r = random_tensor(y.shape(), &mut rng);
        let loss = |c: &Conv2d, x: &Tensor| -> f64 {
            c.forward(x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let dx = conv.backward(&x, &r, true);
        let h = 1e-6;
        for idx in [0, 7, 30, 55] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((num - dx.data()[idx]).abs() < 1e-7, "dx[{idx}]");
        }
        for idx in [0, 13, 40] {
            let mut cp = conv.clone();
            cp.weight.value[idx] += h;
            let mut cm = conv.clone();
            cm.weight.value[idx] -= h;
            let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((num - conv.weight.grad[idx]).abs() < 1e-7, "dw[{idx}]");
        }
        let mut cp = conv.clone();
        cp.bias.value[1] += h;
        let mut cm = conv.clone();
        cm.bias.value[1] -= h;
        let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
        assert!((num - conv.bias.grad[1]).abs() < 1e-7);
    }
}
