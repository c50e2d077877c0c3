use ndarray::{Array2, ArrayView2};

pub const BLUR_SIGMA: f64 = 2.0;
pub const BLUR_TAPS: usize = 9;
pub const BLUR_WEIGHT: f64 = 0.7;

fn kernel() -> [f64; BLUR_TAPS] {
    let r = (BLUR_TAPS / 2) as f64;
    let mut k = [0.0; BLUR_TAPS];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mirror index including the edge sample: `d c b a | a b c d | d c b a`.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn blur_axis(x: &Array2<f64>, axis: usize, adjoint: bool) -> Array2<f64> {
    let k = kernel();
    let r = (BLUR_TAPS / 2) as isize;
    let (h, w) = x.dim();
    let n = if axis == 0 { h } else { w };
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for xx in 0..w {
            let pos = if axis == 0 { y } else { xx } as isize;
            for (t, &kv) in k.iter().enumerate() {
                let j = reflect(pos + t as isize - r, n);
                let (sy, sx) = if axis == 0 { (j, xx) } else { (y, j) };
                if adjoint {
                    out[[sy, sx]] += kv * x[[y, xx]];
                } else {
                    out[[y, xx]] += kv * x[[sy, sx]];
                }
            }
        }
    }
    out
}

/// 9×9 Gaussian blur (σ 2, mirrored edges) blended 0.7/0.3 with the patch mean.
pub fn blur_blend_manipulate(patch: ArrayView2<f64>) -> Array2<f64> {
    let p = patch.to_owned();
    let blurred = blur_axis(&blur_axis(&p, 0, false), 1, false);
    let mean = p.mean().unwrap_or(0.0);
    blurred.mapv(|v| BLUR_WEIGHT * v + (1.0 - BLUR_WEIGHT) * mean)
}

/// Transposed Jacobian of [`blur_blend_manipulate`] applied to `dy`.
pub fn blur_blend_vjp(dy: ArrayView2<f64>) -> Array2<f64> {
    let d = dy.to_owned();
    let back = blur_axis(&blur_axis(&d, 1, true), 0, true);
    let g_mean = (1.0 - BLUR_WEIGHT) * d.sum() / d.len() as f64;
    back.mapv(|v| BLUR_WEIGHT * v + g_mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 2D convolution with the outer-product kernel.
    fn direct(p: &Array2<f64>) -> Array2<f64> {
        let k = kernel();
        let (h, w) = p.dim();
        let mean = p.mean().unwrap();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut acc = 0.0;
            for dy in 0..9 {
                for dx in 0..9 {
                    let sy = reflect(y as isize + dy as isize - 4, h);
                    let sx = reflect(x as isize + dx as isize - 4, w);
                    acc += k[dy] * k[dx] * p[[sy, sx]];
                }
            }
            0.7 * acc + 0.3 * mean
        })
    }

    #[test]
    fn constant_patch_is_fixed_point() {
        let p = Array2::from_elem((32, 32), -0.3);
        let out = blur_blend_manipulate(p.view());
        assert!(out.iter().all(|v| (v + 0.3).abs() < 1e-12));
    }

    #[test]
    fn bright_pixel_spreads() {
        let mut p = Array2::from_elem((32, 32), -1.0);
        p[[10, 20]] = 1.0;
        let out = blur_blend_manipulate(p.view());
        let expected = direct(&p);
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let max = out.iter().cloned().fold(f64::MIN, f64::max);
        assert!(max < 1.0);
        assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
        // Centre tap of the 2D kernel carries less than all of the mass.
        assert!(kernel()[4] * kernel()[4] < 1.0);
    }

    #[test]
    fn vjp_is_adjoint() {
        let p = Array2::from_shape_fn((8, 8), |(y, x)| ((y * 7 + x * 3) % 11) as f64 / 11.0 - 0.5);
        let d = Array2::from_shape_fn((8, 8), |(y, x)| ((y * 5 + x * 2) % 7) as f64 / 7.0 - 0.4);
        let lhs: f64 = (&blur_blend_manipulate(p.view()) * &d).sum();
        let rhs: f64 = (&p * &blur_blend_vjp(d.view())).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
