use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Dense NCHW activation tensor in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            shape: [n, c, h, w],
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "tensor {:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Stacks single-channel planes into an `[N, 1, H, W]` tensor.
    pub fn from_planes<'a, I>(planes: I) -> Result<Self>
    where
        I: IntoIterator<Item = ArrayView2<'a, f64>>,
    {
        let mut data = Vec::new();
        let mut hw: Option<(usize, usize)> = None;
        let mut n = 0;
        for p in planes {
            let dims = p.dim();
            match hw {
                None => hw = Some(dims),
                Some(prev) if prev != dims => {
                    return Err(Error::Shape(format!(
                        "plane {n} is {dims:?}, expected {prev:?}"
                    )))
                }
                _ => {}
            }
            data.extend(p.iter().copied());
            n += 1;
        }
        let (h, w) = hw.ok_or_else(|| Error::Invalid("no planes supplied".into()))?;
        Ok(Tensor {
            shape: [n, 1, h, w],
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane_len()
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    /// Channel `c` of sample `i` as a flat plane.
    pub fn plane(&self, i: usize, c: usize) -> &[f64] {
        let p = self.plane_len();
        let off = (i * self.c() + c) * p;
        &self.data[off..off + p]
    }

    pub fn plane_mut(&mut self, i: usize, c: usize) -> &mut [f64] {
        let p = self.plane_len();
        let off = (i * self.c() + c) * p;
        &mut self.data[off..off + p]
    }

    /// Channel 0 of sample `i` as an owned 2D array.
    pub fn to_array2(&self, i: usize) -> Array2<f64> {
        Array2::from_shape_vec((self.h(), self.w()), self.plane(i, 0).to_vec())
            .expect("plane length matches h*w")
    }

    /// Concatenates two tensors along the channel axis.
    ///
    /// A single-sample `b` is broadcast over the batch of `a`.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.h() != b.h() || a.w() != b.w() || (b.n() != a.n() && b.n() != 1) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                a.shape, b.shape
            )));
        }
        let n = a.n();
        let mut out = Tensor::zeros(n, a.c() + b.c(), a.h(), a.w());
        let (la, lb) = (a.sample_len(), b.sample_len());
        for i in 0..n {
            let bi = if b.n() == 1 { 0 } else { i };
            let dst = out.sample_mut(i);
            dst[..la].copy_from_slice(a.sample(i));
            dst[la..la + lb].copy_from_slice(b.sample(bi));
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::concat_channels`]: splits after the first `c0` channels.
    pub fn split_channels(&self, c0: usize) -> (Tensor, Tensor) {
        let (n, c, h, w) = (self.n(), self.c(), self.h(), self.w());
        let mut a = Tensor::zeros(n, c0, h, w);
        let mut b = Tensor::zeros(n, c - c0, h, w);
        let la = a.sample_len();
        for i in 0..n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..la]);
            b.sample_mut(i).copy_from_slice(&src[la..]);
        }
        (a, b)
    }

    /// Stacks two tensors of equal sample shape along the batch axis.
    pub fn concat_batch(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.c() != b.c() || a.h() != b.h() || a.w() != b.w() {
            return Err(Error::Shape(format!("cannot stack {:?} with {:?}", a.shape, b.shape)));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        Tensor::from_vec([a.n() + b.n(), a.c(), a.h(), a.w()], data)
    }

    /// Inverse of [`Tensor::concat_batch`]: splits after the first `n0` samples.
    pub fn split_batch(&self, n0: usize) -> (Tensor, Tensor) {
        let (c, h, w) = (self.c(), self.h(), self.w());
        let cut = n0 * self.sample_len();
        let a = Tensor::from_vec([n0, c, h, w], self.data()[..cut].to_vec()).expect("sizes match");
        let b = Tensor::from_vec([self.n() - n0, c, h, w], self.data()[cut..].to_vec()).expect("sizes match");
        (a, b)
    }

    /// Sums over the batch axis, keeping a batch of one.
    pub fn sum_batch(&self) -> Tensor {
        let mut out = Tensor::zeros(1, self.c(), self.h(), self.w());
        for i in 0..self.n() {
            for (o, v) in out.data.iter_mut().zip(self.sample(i)) {
                *o += v;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_stacking_round_trips() {
        let a = Tensor::from_vec([2, 1, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let b = Tensor::from_vec([1, 1, 2, 2], vec![9.0; 4]).unwrap();
        let ab = Tensor::concat_batch(&a, &b).unwrap();
        assert_eq!(ab.shape(), [3, 1, 2, 2]);
        assert_eq!(ab.sample(2), b.sample(0));
        let (a2, b2) = ab.split_batch(2);
        assert_eq!((a2, b2), (a, b));
        assert!(Tensor::concat_batch(&ab, &Tensor::zeros(1, 2, 2, 2)).is_err());
    }
}
