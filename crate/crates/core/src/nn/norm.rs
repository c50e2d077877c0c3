use super::param::{join, Buffer, Module, Param};
use super::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `(N, H, W)`.
///
/// Training mode normalizes with batch statistics and updates running
/// estimates (unbiased variance); eval mode uses the running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: Buffer {
                value: vec![0.0; channels],
                shape: vec![channels],
            },
            running_var: Buffer {
                value: vec![1.0; channels],
                shape: vec![channels],
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel batch mean and biased variance.
    pub fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (n, c) = (x.n(), x.c());
        let count = (n * x.plane_len()) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                s += x.plane(i, ch).iter().sum::<f64>();
            }
            let m = s / count;
            let mut ss = 0.0;
            for i in 0..n {
                ss += x.plane(i, ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = ss / count;
        }
        (mean, var)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BnCache) {
        let (mean, var) = Self::batch_stats(x);
        let count = (x.n() * x.plane_len()) as f64;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..x.n() {
            for ch in 0..x.c() {
                let (m, s) = (mean[ch], inv_std[ch]);
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for (xh, yv) in xhat.plane_mut(i, ch).iter_mut().zip(y.plane_mut(i, ch)) {
                    *xh = (*xh - m) * s;
                    *yv = g * *xh + b;
                }
            }
        }
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..x.c() {
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch];
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ch] * unbias;
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        for i in 0..x.n() {
            for ch in 0..x.c() {
                let s = 1.0 / (self.running_var.value[ch] + BN_EPS).sqrt();
                let m = self.running_mean.value[ch];
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for v in y.plane_mut(i, ch) {
                    *v = g * (*v - m) * s + b;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor, param_grads: bool) -> Tensor {
        let (n, c) = (dy.n(), dy.c());
        let count = (n * dy.plane_len()) as f64;
        let mut dx = dy.clone();
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..n {
                for (g, xh) in dy.plane(i, ch).iter().zip(cache.xhat.plane(i, ch)) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            if param_grads {
                self.gamma.grad[ch] += sum_dy_xhat;
                self.beta.grad[ch] += sum_dy;
            }
            let k = self.gamma.value[ch] * cache.inv_std[ch];
            let (mdy, mdyx) = (sum_dy / count, sum_dy_xhat / count);
            for i in 0..n {
                for (d, xh) in dx.plane_mut(i, ch).iter_mut().zip(cache.xhat.plane(i, ch)) {
                    *d = k * (*d - mdy - xh * mdyx);
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.gamma));
        out.push((join(prefix, "bias"), &self.beta));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.gamma));
        out.push((join(prefix, "bias"), &mut self.beta));
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Buffer)>) {
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| ((i * 37 % 11) as f64) * 0.3 - 1.0).collect();
        Tensor::from_vec([2, 2, 3, 3], data).unwrap()
    }

    #[test]
    fn train_output_is_standardized() {
        let mut bn = BatchNorm2d::new(2);
        let (y, _) = bn.forward_train(&sample());
        let (m, v) = BatchNorm2d::batch_stats(&y);
        for ch in 0..2 {
            assert!(m[ch].abs() < 1e-12);
            assert!((v[ch] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.2];
        let x = sample();
        let r: Vec<f64> = (0..x.len()).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let loss = |bn: &mut BatchNorm2d, x: &Tensor| -> f64 {
            let (y, _) = bn.forward_train(x);
            y.data().iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = bn.forward_train(&x);
        let dy = Tensor::from_vec(x.shape(), r.clone()).unwrap();
        let dx = bn.backward(&cache, &dy, true);
        let h = 1e-6;
        for idx in [0, 5, 17, 30] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (loss(&mut bn.clone(), &xp) - loss(&mut bn.clone(), &xm)) / (2.0 * h);
            assert!((num - dx.data()[idx]).abs() < 1e-6, "dx[{idx}] {num} vs {}", dx.data()[idx]);
        }
        let mut bp = bn.clone();
        bp.gamma.value[1] += h;
        let mut bm = bn.clone();
        bm.gamma.value[1] -= h;
        let num = (loss(&mut bp, &x) - loss(&mut bm, &x)) / (2.0 * h);
        assert!((num - bn.gamma.grad[1]).abs() < 1e-6);
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean.value = vec![2.0];
        bn.running_var.value = vec![4.0 - BN_EPS];
        let x = Tensor::from_vec([1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        let y = bn.forward_eval(&x);
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }
}
