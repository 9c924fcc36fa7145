//! Fidelity metrics: PSNR, SSIM and RMSE in CIELAB.
//!
//! Computed in `f64` per image on inputs clamped to `[0, 1]`. This code path
//! is separate from the differentiable SSIM in [`crate::losses`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::imaging::{srgb_pixel_to_lab, ImageTensor};
use crate::losses::{SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use crate::real::Real;
use crate::tensor::{check_same, Tensor};

fn check(a: &ImageTensor, b: &ImageTensor, op: &'static str) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape {
            op,
            detail: alloc::format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        });
    }
    Ok(())
}

fn clamped(v: f32) -> f64 {
    (v as f64).clamp(0.0, 1.0)
}

/// Peak signal-to-noise ratio over all channels jointly, in dB. Identical
/// images give `f64::INFINITY`.
pub fn psnr(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    check(pred, gt, "psnr")?;
    Ok(psnr_slices(pred.data(), gt.data()))
}

/// PSNR of two tensors in their own precision.
pub fn psnr_tensor<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_same("psnr", pred.shape(), gt.shape())?;
    Ok(psnr_slices(pred.data(), gt.data()))
}

/// PSNR of two equally long value slices with peak 1.
pub fn psnr_slices<T: Real>(a: &[T], b: &[T]) -> f64 {
    let se: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64().clamp(0.0, 1.0) - y.to_f64().clamp(0.0, 1.0);
            d * d
        })
        .sum();
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * libm::log10(mse)
    }
}

fn window() -> Vec<f64> {
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| libm::exp(-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)))
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-window separable Gaussian filter of an `h × w` plane.
fn filter(p: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM of one pair of planes.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min: SSIM_WINDOW,
        });
    }
    let k = window();
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let (ma, oh, ow) = filter(a, h, w, &k);
    let (mb, _, _) = filter(b, h, w, &k);
    let (eaa, _, _) = filter(&prod(|x, _| x * x), h, w, &k);
    let (ebb, _, _) = filter(&prod(|_, y| y * y), h, w, &k);
    let (eab, _, _) = filter(&prod(|x, y| x * y), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut acc = 0.0;
    for i in 0..oh * ow {
        let (mx, my) = (ma[i], mb[i]);
        let sxx = eaa[i] - mx * mx;
        let syy = ebb[i] - my * my;
        let sxy = eab[i] - mx * my;
        acc += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    }
    Ok(acc / (oh * ow) as f64)
}

/// Channel-averaged SSIM with an 11×11 Gaussian window (σ = 1.5).
pub fn ssim(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    check(pred, gt, "ssim")?;
    let (h, w) = (pred.height(), pred.width());
    let mut total = 0.0;
    for c in 0..3 {
        let a: Vec<f64> = pred.plane(c).iter().map(|&v| clamped(v)).collect();
        let b: Vec<f64> = gt.plane(c).iter().map(|&v| clamped(v)).collect();
        total += ssim_plane(&a, &b, h, w)?;
    }
    Ok(total / 3.0)
}

/// Root mean squared CIELAB difference over all channels and pixels.
pub fn rmse_lab(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    check(pred, gt, "rmse_lab")?;
    let hw = pred.height() * pred.width();
    let mut se = 0.0;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            let p = pred.pixel(y, x).map(clamped);
            let q = gt.pixel(y, x).map(clamped);
            let (lp, lq) = (srgb_pixel_to_lab(p), srgb_pixel_to_lab(q));
            se += (0..3).map(|c| (lp[c] - lq[c]) * (lp[c] - lq[c])).sum::<f64>();
        }
    }
    Ok(libm::sqrt(se / (3 * hw) as f64))
}

/// Metrics of one image pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse_lab: f64,
}

pub fn evaluate_pair(pred: &ImageTensor, gt: &ImageTensor) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        psnr: psnr(pred, gt)?,
        ssim: ssim(pred, gt)?,
        rmse_lab: rmse_lab(pred, gt)?,
    })
}

/// Per-image average; an infinite PSNR keeps the mean infinite.
pub fn mean_metrics(rows: &[ImageMetrics]) -> ImageMetrics {
    let n = rows.len().max(1) as f64;
    ImageMetrics {
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rmse_lab: rows.iter().map(|r| r.rmse_lab).sum::<f64>() / n,
    }
}
