//! Average pooling, bilinear resizing and fixed separable blurs.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;
use crate::tensor::Tensor;

pub fn pooled_size(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Non-overlapping `stride × stride` average pooling. Edge windows that run
/// past the border average only the pixels they cover.
pub fn avg_pool_forward<T: Real>(x: &Tensor<T>, stride: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    if stride == 1 {
        return x.clone();
    }
    let (oh, ow) = (pooled_size(h, stride), pooled_size(w, stride));
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for nc in 0..n * c {
        let src = &x.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out.data_mut()[nc * oh * ow..(nc + 1) * oh * ow];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let drow = &mut dst[(y / stride) * ow..(y / stride + 1) * ow];
            for (xx, &v) in row.iter().enumerate() {
                drow[xx / stride] += v;
            }
        }
        for oy in 0..oh {
            let wy = (h - oy * stride).min(stride);
            for ox in 0..ow {
                let wx = (w - ox * stride).min(stride);
                dst[oy * ow + ox] /= T::from_usize(wy * wx);
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Real>(grad_out: &Tensor<T>, in_shape: [usize; 4], stride: usize) -> Tensor<T> {
    if stride == 1 {
        return grad_out.clone();
    }
    let [n, c, h, w] = in_shape;
    let (oh, ow) = (grad_out.height(), grad_out.width());
    let mut gx = Tensor::zeros(in_shape);
    for nc in 0..n * c {
        let g = &grad_out.data()[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut gx.data_mut()[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            let oy = y / stride;
            let wy = (h - oy * stride).min(stride);
            for xx in 0..w {
                let ox = xx / stride;
                let wx = (w - ox * stride).min(stride);
                dst[y * w + xx] = g[oy * ow + ox] / T::from_usize(wy * wx);
            }
        }
    }
    gx
}

/// Source taps `(i0, i1, frac)` for resizing an axis of length `inp` to `out`
/// with half-pixel centres and edge clamping.
fn axis_taps(inp: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear_forward<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    if (oh, ow) == (h, w) {
        return x.clone();
    }
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for nc in 0..n * c {
        let src = &x.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out.data_mut()[nc * oh * ow..(nc + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let top = src[y0 * w + x0] * (T::ONE - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::ONE - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (T::ONE - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Real>(grad_out: &Tensor<T>, in_shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let (oh, ow) = (grad_out.height(), grad_out.width());
    if (oh, ow) == (h, w) {
        return grad_out.clone();
    }
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut gx = Tensor::zeros(in_shape);
    for nc in 0..n * c {
        let g = &grad_out.data()[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut gx.data_mut()[nc * h * w..(nc + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let v = g[oy * ow + ox];
                let top = v * (T::ONE - fy);
                let bot = v * fy;
                dst[y0 * w + x0] += top * (T::ONE - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bot * (T::ONE - fx);
                dst[y1 * w + x1] += bot * fx;
            }
        }
    }
    gx
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Depthwise separable filtering without padding: output is
/// `(h - k + 1) × (w - k + 1)`.
pub fn blur_valid_forward<T: Real>(x: &Tensor<T>, taps: &[f64]) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let taps: Vec<T> = taps.iter().map(|&t| T::from_f64(t)).collect();
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut tmp = vec![T::ZERO; h * ow];
    for nc in 0..n * c {
        let src = &x.data()[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            for ox in 0..ow {
                let mut acc = T::ZERO;
                for (t, &wt) in taps.iter().enumerate() {
                    acc += src[y * w + ox + t] * wt;
                }
                tmp[y * ow + ox] = acc;
            }
        }
        let dst = &mut out.data_mut()[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for (t, &wt) in taps.iter().enumerate() {
                let srow = &tmp[(oy + t) * ow..(oy + t + 1) * ow];
                for (d, &s) in dst[oy * ow..(oy + 1) * ow].iter_mut().zip(srow) {
                    *d += s * wt;
                }
            }
        }
    }
    out
}

pub fn blur_valid_backward<T: Real>(grad_out: &Tensor<T>, in_shape: [usize; 4], taps: &[f64]) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let taps: Vec<T> = taps.iter().map(|&t| T::from_f64(t)).collect();
    let mut gx = Tensor::zeros(in_shape);
    let mut tmp = vec![T::ZERO; h * ow];
    for nc in 0..n * c {
        let g = &grad_out.data()[nc * oh * ow..(nc + 1) * oh * ow];
        tmp.fill(T::ZERO);
        for oy in 0..oh {
            for (t, &wt) in taps.iter().enumerate() {
                let trow = &mut tmp[(oy + t) * ow..(oy + t + 1) * ow];
                for (d, &s) in trow.iter_mut().zip(&g[oy * ow..(oy + 1) * ow]) {
                    *d += s * wt;
                }
            }
        }
        let dst = &mut gx.data_mut()[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            for ox in 0..ow {
                let v = tmp[y * ow + ox];
                for (t, &wt) in taps.iter().enumerate() {
                    dst[y * w + ox + t] += v * wt;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn pool_handles_partial_windows() {
        let x = Tensor::<f64>::from_vec([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let p = avg_pool_forward(&x, 2);
        assert_eq!(p.shape(), [1, 1, 2, 2]);
        assert_eq!(p.data(), &[3.0, 4.5, 7.5, 9.0]);
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = Tensor::<f64>::full([1, 2, 4, 4], 0.25);
        let y = upsample_bilinear_forward(&x, 16, 16);
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn backward_passes_are_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::uniform([2, 2, 7, 6], -1.0, 1.0, &mut rng);

        let p = avg_pool_forward(&x, 2);
        let g = Tensor::<f64>::uniform(p.shape(), -1.0, 1.0, &mut rng);
        assert!((dot(&p, &g) - dot(&x, &avg_pool_backward(&g, x.shape(), 2))).abs() < 1e-12);

        let u = upsample_bilinear_forward(&x, 14, 12);
        let g = Tensor::<f64>::uniform(u.shape(), -1.0, 1.0, &mut rng);
        assert!((dot(&u, &g) - dot(&x, &upsample_bilinear_backward(&g, x.shape()))).abs() < 1e-12);

        let taps = gaussian_taps(3, 1.0);
        let b = blur_valid_forward(&x, &taps);
        assert_eq!(b.shape(), [2, 2, 5, 4]);
        let g = Tensor::<f64>::uniform(b.shape(), -1.0, 1.0, &mut rng);
        assert!((dot(&b, &g) - dot(&x, &blur_valid_backward(&g, x.shape(), &taps))).abs() < 1e-12);
    }
}
