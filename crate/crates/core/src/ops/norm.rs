//! Per-channel batch normalisation over batch and spatial axes.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;
use crate::tensor::Tensor;

/// Per-channel statistics of one normalisation call.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (what the forward pass divides by).
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

pub fn channel_stats<T: Real>(x: &Tensor<T>) -> ChannelStats<T> {
    let [n, c, _, _] = x.shape();
    let hw = x.plane();
    let count = n * hw;
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ch in 0..c {
        let mut s = T::ZERO;
        for b in 0..n {
            s += x.sample(b)[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
        }
        let mu = s / T::from_usize(count);
        let mut v = T::ZERO;
        for b in 0..n {
            for &val in &x.sample(b)[ch * hw..(ch + 1) * hw] {
                v += (val - mu) * (val - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / T::from_usize(count);
    }
    ChannelStats { mean, var, count }
}

/// Normalises with the given statistics: `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn normalize_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    let hw = x.plane();
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        let xs = x.sample(b);
        let ys = out.sample_mut(b);
        for ch in 0..c {
            let inv = T::ONE / (var[ch] + eps).sqrt();
            let (g, be, mu) = (gamma.data()[ch], beta.data()[ch], mean[ch]);
            for (y, &v) in ys[ch * hw..(ch + 1) * hw].iter_mut().zip(&xs[ch * hw..(ch + 1) * hw]) {
                *y = g * (v - mu) * inv + be;
            }
        }
    }
    out
}

pub struct NormGrads<T> {
    pub x: Option<Tensor<T>>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Backward pass. With `batch_stats` the mean and variance are treated as
/// functions of `x`; otherwise they are constants (evaluation mode).
#[allow(clippy::too_many_arguments)]
pub fn normalize_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
    grad_out: &Tensor<T>,
    batch_stats: bool,
    need_x: bool,
) -> NormGrads<T> {
    let [n, c, _, _] = x.shape();
    let hw = x.plane();
    let count = T::from_usize(n * hw);
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut ggamma = Tensor::zeros([1, c, 1, 1]);
    let mut gbeta = Tensor::zeros([1, c, 1, 1]);
    for ch in 0..c {
        let inv = T::ONE / (var[ch] + eps).sqrt();
        let mu = mean[ch];
        let mut sum_g = T::ZERO;
        let mut sum_gx = T::ZERO;
        for b in 0..n {
            let xs = &x.sample(b)[ch * hw..(ch + 1) * hw];
            let gs = &grad_out.sample(b)[ch * hw..(ch + 1) * hw];
            for (&v, &g) in xs.iter().zip(gs) {
                sum_g += g;
                sum_gx += g * (v - mu) * inv;
            }
        }
        ggamma.data_mut()[ch] = sum_gx;
        gbeta.data_mut()[ch] = sum_g;
        let Some(gx) = gx.as_mut() else { continue };
        let gm = gamma.data()[ch];
        for b in 0..n {
            let xs = &x.sample(b)[ch * hw..(ch + 1) * hw];
            let gs = &grad_out.sample(b)[ch * hw..(ch + 1) * hw];
            let out = &mut gx.sample_mut(b)[ch * hw..(ch + 1) * hw];
            for ((o, &v), &g) in out.iter_mut().zip(xs).zip(gs) {
                *o = if batch_stats {
                    let xhat = (v - mu) * inv;
                    gm * inv * (g - sum_g / count - xhat * sum_gx / count)
                } else {
                    gm * inv * g
                };
            }
        }
    }
    NormGrads {
        x: gx,
        gamma: ggamma,
        beta: gbeta,
    }
}
