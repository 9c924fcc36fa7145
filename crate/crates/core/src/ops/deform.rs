//! Deformable convolution extended with per-tap additive color offsets.
//!
//! For an output pixel `p0` and kernel taps `p_n` the operator computes
//!
//! ```text
//! y(p0) = sum_n dm_n(p0) * ( W_n · x(p0 + p_n + dp_n(p0)) + dc_n(p0) )
//! ```
//!
//! where `x(·)` is a zero-padded bilinear sample of every input channel,
//! `W_n` is the `c × c` channel-mixing matrix of tap `n`, `dp` holds `(dy, dx)`
//! pairs per tap, `dc` holds a `c`-vector per tap and `dm` one scalar per tap.
//! Missing `dp`/`dc` act as zeros and a missing `dm` acts as ones.

use alloc::vec;

use crate::real::Real;
use crate::tensor::Tensor;

/// Bilinear sample of a `(c, h, w)` plane stack at fractional `(y, x)`.
/// Corners that fall outside the image contribute zero.
pub fn bilinear_sample<T: Real>(planes: &[T], c: usize, h: usize, w: usize, y: T, x: T, out: &mut [T]) {
    out[..c].fill(T::ZERO);
    for (yy, xx, wt) in corners(h, w, y, x) {
        if wt == T::ZERO {
            continue;
        }
        for (ch, o) in out[..c].iter_mut().enumerate() {
            *o += wt * planes[(ch * h + yy) * w + xx];
        }
    }
}

/// In-bounds corners with their interpolation weights.
#[inline]
fn corners<T: Real>(h: usize, w: usize, y: T, x: T) -> impl Iterator<Item = (usize, usize, T)> {
    let y0f = y.floor();
    let x0f = x.floor();
    let ly = y - y0f;
    let lx = x - x0f;
    let y0 = y0f.to_f64() as i64;
    let x0 = x0f.to_f64() as i64;
    let cand = [
        (y0, x0, (T::ONE - ly) * (T::ONE - lx)),
        (y0, x0 + 1, (T::ONE - ly) * lx),
        (y0 + 1, x0, ly * (T::ONE - lx)),
        (y0 + 1, x0 + 1, ly * lx),
    ];
    cand.into_iter().filter_map(move |(yy, xx, wt)| {
        (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then_some((yy as usize, xx as usize, wt))
    })
}

/// Optional per-tap inputs of the operator.
#[derive(Clone, Copy)]
pub struct Offsets<'a, T> {
    pub dp: Option<&'a Tensor<T>>,
    pub dc: Option<&'a Tensor<T>>,
    pub dm: Option<&'a Tensor<T>>,
}

/// `x: (n, c, h, w)`, `weight: (c, c, k, k)`, `dp: (n, 2K, h, w)`,
/// `dc: (n, cK, h, w)`, `dm: (n, K, h, w)` with `K = k*k`.
pub fn color_deform_forward<T: Real>(x: &Tensor<T>, off: Offsets<'_, T>, weight: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let k = weight.height();
    let taps = k * k;
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut out = Tensor::zeros([n, c, h, w]);
    let mut s = vec![T::ZERO; c];
    let mut u = vec![T::ZERO; c];
    let wmat = tap_matrices(weight);
    for b in 0..n {
        let xs = x.sample(b);
        let dp = off.dp.map(|t| t.sample(b));
        let dc = off.dc.map(|t| t.sample(b));
        let dm = off.dm.map(|t| t.sample(b));
        let ys = out.sample_mut(b);
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                for tap in 0..taps {
                    let (ky, kx) = ((tap / k) as isize - r, (tap % k) as isize - r);
                    let (mut sy, mut sx) = (
                        T::from_f64((py as isize + ky) as f64),
                        T::from_f64((px as isize + kx) as f64),
                    );
                    if let Some(dp) = dp {
                        sy += dp[(2 * tap) * hw + p];
                        sx += dp[(2 * tap + 1) * hw + p];
                    }
                    bilinear_sample(xs, c, h, w, sy, sx, &mut s);
                    let wn = &wmat[tap * c * c..(tap + 1) * c * c];
                    for o in 0..c {
                        let mut acc = T::ZERO;
                        for i in 0..c {
                            acc += wn[o * c + i] * s[i];
                        }
                        if let Some(dc) = dc {
                            acc += dc[(c * tap + o) * hw + p];
                        }
                        u[o] = acc;
                    }
                    let m = dm.map_or(T::ONE, |dm| dm[tap * hw + p]);
                    for o in 0..c {
                        ys[o * hw + p] += m * u[o];
                    }
                }
            }
        }
    }
    out
}

/// Rearranges `(cout, cin, k, k)` into per-tap `cout × cin` row-major blocks.
fn tap_matrices<T: Real>(weight: &crate::tensor::Tensor<T>) -> alloc::vec::Vec<T> {
    let [co, ci, k, _] = weight.shape();
    let mut m = vec![T::ZERO; k * k * co * ci];
    for o in 0..co {
        for i in 0..ci {
            for t in 0..k * k {
                m[(t * co + o) * ci + i] = weight.data()[(o * ci + i) * k * k + t];
            }
        }
    }
    m
}

#[derive(Default)]
pub struct DeformGrads<T> {
    pub x: Option<Tensor<T>>,
    pub dp: Option<Tensor<T>>,
    pub dc: Option<Tensor<T>>,
    pub dm: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
}

/// Which gradients to materialise: `[x, dp, dc, dm, weight]`.
pub type DeformNeeds = [bool; 5];

pub fn color_deform_backward<T: Real>(
    x: &Tensor<T>,
    off: Offsets<'_, T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: DeformNeeds,
) -> DeformGrads<T> {
    let [n, c, h, w] = x.shape();
    let k = weight.height();
    let taps = k * k;
    let r = (k / 2) as isize;
    let hw = h * w;
    let wmat = tap_matrices(weight);
    let mut gx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut gdp = (need[1] && off.dp.is_some()).then(|| Tensor::zeros([n, 2 * taps, h, w]));
    let mut gdc = (need[2] && off.dc.is_some()).then(|| Tensor::zeros([n, c * taps, h, w]));
    let mut gdm = (need[3] && off.dm.is_some()).then(|| Tensor::zeros([n, taps, h, w]));
    // accumulated in tap-matrix layout, rearranged at the end
    let mut gw_taps = need[4].then(|| vec![T::ZERO; taps * c * c]);
    let mut s = vec![T::ZERO; c];
    let mut gu = vec![T::ZERO; c];
    let mut ds = vec![T::ZERO; c];
    for b in 0..n {
        let xs = x.sample(b);
        let dp = off.dp.map(|t| t.sample(b));
        let dc = off.dc.map(|t| t.sample(b));
        let dm = off.dm.map(|t| t.sample(b));
        let gy = grad_out.sample(b);
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                for tap in 0..taps {
                    let (ky, kx) = ((tap / k) as isize - r, (tap % k) as isize - r);
                    let (mut sy, mut sx) = (
                        T::from_f64((py as isize + ky) as f64),
                        T::from_f64((px as isize + kx) as f64),
                    );
                    if let Some(dp) = dp {
                        sy += dp[(2 * tap) * hw + p];
                        sx += dp[(2 * tap + 1) * hw + p];
                    }
                    bilinear_sample(xs, c, h, w, sy, sx, &mut s);
                    let wn = &wmat[tap * c * c..(tap + 1) * c * c];
                    let m = dm.map_or(T::ONE, |dm| dm[tap * hw + p]);

                    if let Some(gdm) = gdm.as_mut() {
                        let mut acc = T::ZERO;
                        for o in 0..c {
                            let mut uo = T::ZERO;
                            for i in 0..c {
                                uo += wn[o * c + i] * s[i];
                            }
                            if let Some(dc) = dc {
                                uo += dc[(c * tap + o) * hw + p];
                            }
                            acc += gy[o * hw + p] * uo;
                        }
                        gdm.sample_mut(b)[tap * hw + p] = acc;
                    }
                    for o in 0..c {
                        gu[o] = m * gy[o * hw + p];
                    }
                    if let Some(gdc) = gdc.as_mut() {
                        let g = gdc.sample_mut(b);
                        for o in 0..c {
                            g[(c * tap + o) * hw + p] = gu[o];
                        }
                    }
                    if let Some(gw) = gw_taps.as_mut() {
                        let gwn = &mut gw[tap * c * c..(tap + 1) * c * c];
                        for o in 0..c {
                            for i in 0..c {
                                gwn[o * c + i] += gu[o] * s[i];
                            }
                        }
                    }
                    let want_ds = gx.is_some() || gdp.is_some();
                    if !want_ds {
                        continue;
                    }
                    for i in 0..c {
                        let mut acc = T::ZERO;
                        for o in 0..c {
                            acc += wn[o * c + i] * gu[o];
                        }
                        ds[i] = acc;
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxs = gx.sample_mut(b);
                        for (yy, xx, wt) in corners(h, w, sy, sx) {
                            for i in 0..c {
                                gxs[(i * h + yy) * w + xx] += wt * ds[i];
                            }
                        }
                    }
                    if let Some(gdp) = gdp.as_mut() {
                        let (gdy, gdx) = sample_coord_grad(xs, c, h, w, sy, sx, &ds);
                        let g = gdp.sample_mut(b);
                        g[(2 * tap) * hw + p] = gdy;
                        g[(2 * tap + 1) * hw + p] = gdx;
                    }
                }
            }
        }
    }
    let weight_grad = gw_taps.map(|gw| {
        let mut out = Tensor::zeros(weight.shape());
        for o in 0..c {
            for i in 0..c {
                for t in 0..taps {
                    out.data_mut()[(o * c + i) * taps + t] = gw[(t * c + o) * c + i];
                }
            }
        }
        out
    });
    DeformGrads {
        x: gx,
        dp: gdp,
        dc: gdc,
        dm: gdm,
        weight: weight_grad,
    }
}

/// `(d/dy, d/dx)` of `sum_c g_c * sample_c(y, x)`.
fn sample_coord_grad<T: Real>(planes: &[T], c: usize, h: usize, w: usize, y: T, x: T, g: &[T]) -> (T, T) {
    let y0f = y.floor();
    let x0f = x.floor();
    let ly = y - y0f;
    let lx = x - x0f;
    let y0 = y0f.to_f64() as i64;
    let x0 = x0f.to_f64() as i64;
    let val = |yy: i64, xx: i64| -> T {
        if yy < 0 || xx < 0 || yy as usize >= h || xx as usize >= w {
            return T::ZERO;
        }
        let mut acc = T::ZERO;
        for (ch, &gc) in g[..c].iter().enumerate() {
            acc += gc * planes[(ch * h + yy as usize) * w + xx as usize];
        }
        acc
    };
    let v00 = val(y0, x0);
    let v01 = val(y0, x0 + 1);
    let v10 = val(y0 + 1, x0);
    let v11 = val(y0 + 1, x0 + 1);
    let gy = (v10 - v00) * (T::ONE - lx) + (v11 - v01) * lx;
    let gx = (v01 - v00) * (T::ONE - ly) + (v11 - v10) * ly;
    (gy, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_at_integer_coordinates() {
        let planes = [1.0f64, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0];
        let mut out = [0.0; 2];
        bilinear_sample(&planes, 2, 2, 2, 1.0, 0.0, &mut out);
        assert_eq!(out, [3.0, 30.0]);
    }

    #[test]
    fn equal_weights_at_patch_centre() {
        let planes = [0.0f64, 1.0, 1.0, 0.0];
        let mut out = [0.0; 1];
        bilinear_sample(&planes, 1, 2, 2, 0.5, 0.5, &mut out);
        assert_eq!(out[0], 0.5);
    }

    #[test]
    fn far_outside_is_zero() {
        let planes = [1.0f64; 12];
        let mut out = [9.0; 3];
        bilinear_sample(&planes, 3, 2, 2, -5.0, -5.0, &mut out);
        assert_eq!(out, [0.0; 3]);
    }

    #[test]
    fn border_blends_with_zero_padding() {
        let planes = [1.0f64; 4];
        let mut out = [0.0; 1];
        bilinear_sample(&planes, 1, 2, 2, -0.25, 0.0, &mut out);
        assert!((out[0] - 0.75).abs() < 1e-15);
    }
}
