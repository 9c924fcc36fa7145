//! Slow scalar-loop versions of the main operators.
//!
//! Nothing here shares code with the fast kernels; these loops serve as
//! oracles in tests and in the self-test suite. All inputs are single
//! samples unless stated otherwise.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Zero-padded "same" convolution, `w: (cout, cin, k, k)`, odd `k`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros([n, cout, h, wd]);
    for s in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.map_or(T::ZERO, |b| b.data()[o]);
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - r;
                                let sx = xx as isize + kx as isize - r;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.at(o, i, ky, kx) * x.at(s, i, sy as usize, sx as usize);
                            }
                        }
                    }
                    *out.at_mut(s, o, y, xx) = acc;
                }
            }
        }
    }
    out
}

/// Bilinear read of one plane at `(y, x)`; pixels outside the plane read 0.
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let px = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let y0 = libm::floor(y);
    let x0 = libm::floor(x);
    let (ay, ax) = (y - y0, x - x0);
    px(y0, x0) * (1.0 - ay) * (1.0 - ax)
        + px(y0, x0 + 1.0) * (1.0 - ay) * ax
        + px(y0 + 1.0, x0) * ay * (1.0 - ax)
        + px(y0 + 1.0, x0 + 1.0) * ay * ax
}

/// Colour-space deformable convolution evaluated term by term:
/// `y(p0) = Σ_n (W_n · x(p0 + p_n + dp_n) + dc_n) · dm_n`.
/// Tap `n = ky*k + kx` sits at `p_n = (ky - k/2, kx - k/2)`; `dp` holds
/// `(dy, dx)` at channels `2n, 2n+1`, `dc` holds channel `i` at `c*n + i`.
pub fn color_deform(
    x: &Tensor<f64>,
    dp: Option<&Tensor<f64>>,
    dc: Option<&Tensor<f64>>,
    dm: Option<&Tensor<f64>>,
    w: &Tensor<f64>,
) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape();
    let k = w.height();
    let r = (k / 2) as f64;
    let mut out = Tensor::zeros([n, c, h, wd]);
    for s in 0..n {
        for y in 0..h {
            for xx in 0..wd {
                for ky in 0..k {
                    for kx in 0..k {
                        let t = ky * k + kx;
                        let (oy, ox) = match dp {
                            Some(d) => (d.at(s, 2 * t, y, xx), d.at(s, 2 * t + 1, y, xx)),
                            None => (0.0, 0.0),
                        };
                        let sy = y as f64 + ky as f64 - r + oy;
                        let sx = xx as f64 + kx as f64 - r + ox;
                        let m = dm.map_or(1.0, |d| d.at(s, t, y, xx));
                        let sampled: Vec<f64> = (0..c)
                            .map(|i| {
                                let plane = &x.sample(s)[i * h * wd..(i + 1) * h * wd];
                                bilinear(plane, h, wd, sy, sx)
                            })
                            .collect();
                        for o in 0..c {
                            let mut v = 0.0;
                            for (i, sv) in sampled.iter().enumerate() {
                                v += w.at(o, i, ky, kx) * sv;
                            }
                            v += dc.map_or(0.0, |d| d.at(s, c * t + o, y, xx));
                            *out.at_mut(s, o, y, xx) += v * m;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `A[p][q] = Σ_k psi[k][p] · phi[k][q]` for `(d, m)` row-major token
/// matrices, then `(A + Aᵀ) / 2` when `symmetric`.
pub fn affinity_logits(psi: &[f64], phi: &[f64], d: usize, m: usize, symmetric: bool) -> Vec<f64> {
    let mut a = vec![0.0; m * m];
    for p in 0..m {
        for q in 0..m {
            let mut s = 0.0;
            for k in 0..d {
                s += psi[k * m + p] * phi[k * m + q];
            }
            a[p * m + q] = s;
        }
    }
    if symmetric {
        let raw = a.clone();
        for p in 0..m {
            for q in 0..m {
                a[p * m + q] = 0.5 * (raw[p * m + q] + raw[q * m + p]);
            }
        }
    }
    a
}

pub fn softmax_rows(a: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    for p in 0..m {
        let row = &a[p * m..(p + 1) * m];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| libm::exp(v - mx)).sum();
        for q in 0..m {
            out[p * m + q] = libm::exp(row[q] - mx) / z;
        }
    }
    out
}

/// `Z · Aᵀ` for a `(d, m)` token matrix.
pub fn attend(z: &[f64], a: &[f64], d: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * m];
    for k in 0..d {
        for p in 0..m {
            let mut s = 0.0;
            for q in 0..m {
                s += z[k * m + q] * a[p * m + q];
            }
            out[k * m + p] = s;
        }
    }
    out
}

/// `W · Z (+ b)` for a `(cout, cin)` matrix acting on `(cin, m)` tokens.
pub fn project(w: &[f64], b: Option<&[f64]>, z: &[f64], cout: usize, cin: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * m];
    for o in 0..cout {
        for p in 0..m {
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..cin {
                s += w[o * cin + i] * z[i * m + p];
            }
            out[o * m + p] = s;
        }
    }
    out
}

/// `f_j = w1 · (Z_j Aᵀ) + w2 · (Z_I Aᵀ)`, both weights bias-free `(d, d)`.
pub fn cross_modulate(a: &[f64], zj: &[f64], zi: &[f64], w1: &[f64], w2: &[f64], d: usize, m: usize) -> Vec<f64> {
    let t1 = project(w1, None, &attend(zj, a, d, m), d, d, m);
    let t2 = project(w2, None, &attend(zi, a, d, m), d, d, m);
    t1.iter().zip(&t2).map(|(a, b)| a + b).collect()
}

/// Average pooling of one `(c, h, w)` sample; partial edge windows average
/// the pixels they cover.
pub fn avg_pool(x: &[f64], c: usize, h: usize, w: usize, s: usize) -> (Vec<f64>, usize, usize) {
    let oh = h.div_ceil(s);
    let ow = w.div_ceil(s);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0;
                let mut cnt = 0;
                for y in oy * s..((oy + 1) * s).min(h) {
                    for xx in ox * s..((ox + 1) * s).min(w) {
                        sum += x[(ch * h + y) * w + xx];
                        cnt += 1;
                    }
                }
                out[(ch * oh + oy) * ow + ox] = sum / cnt as f64;
            }
        }
    }
    (out, oh, ow)
}

/// Bilinear resize with half-pixel centres and clamped borders.
pub fn resize(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let src = |o: usize, inp: usize, out: usize| -> (usize, usize, f64) {
        let mut v = (o as f64 + 0.5) * inp as f64 / out as f64 - 0.5;
        if v < 0.0 {
            v = 0.0;
        }
        let mut i0 = libm::floor(v) as usize;
        if i0 > inp - 1 {
            i0 = inp - 1;
        }
        let i1 = if i0 + 1 < inp { i0 + 1 } else { inp - 1 };
        (i0, i1, v - i0 as f64)
    };
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1, fy) = src(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = src(ox, w, ow);
                let at = |yy: usize, xx: usize| x[(ch * h + yy) * w + xx];
                out[(ch * oh + oy) * ow + ox] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            }
        }
    }
    out
}

/// Per-row normalisation of a `(d, m)` matrix with its own mean and biased
/// variance.
pub fn batch_norm(x: &[f64], gamma: &[f64], beta: &[f64], d: usize, m: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; d * m];
    for k in 0..d {
        let row = &x[k * m..(k + 1) * m];
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        for p in 0..m {
            out[k * m + p] = gamma[k] * (row[p] - mean) / libm::sqrt(var + eps) + beta[k];
        }
    }
    out
}

fn fetch<'a>(store: &'a ParamStore<f64>, name: &str) -> Result<&'a [f64]> {
    store
        .get(name)
        .map(|t| t.data())
        .ok_or_else(|| Error::Invalid(alloc::format!("oracle: missing parameter {name}")))
}

/// Full modulation block for one sample with batch statistics:
///
/// ```text
/// A_j = softmax_rows(sym(psi_jᵀ phi_j))          j ∈ {I, B, D}
/// f_j = w1 A_j ⊗ Z_j + w2 A_j ⊗ Z_I              j ∈ {B, D}
/// I_y = up(w4 · (BN_B(f_B) + BN_D(f_D) + w3 A_I ⊗ Z_I)) + I_x
/// ```
///
/// Parameters are read from `store` under the layer names used by
/// [`crate::como::Como`].
pub fn como(
    store: &ParamStore<f64>,
    prefix: &str,
    img: &Tensor<f64>,
    ob: &Tensor<f64>,
    od: &Tensor<f64>,
    stride: usize,
    eps: f64,
) -> Result<Tensor<f64>> {
    let [_, _, h, w] = img.shape();
    let p = |s: &str| alloc::format!("{prefix}.{s}");
    let d = store
        .get(&p("i.psi.weight"))
        .ok_or_else(|| Error::Invalid("oracle: missing i.psi".into()))?
        .batch();
    let (xi, th, tw) = avg_pool(img.sample(0), 3, h, w, stride);
    let (xb, _, _) = avg_pool(ob.sample(0), 3, h, w, stride);
    let (xd, _, _) = avg_pool(od.sample(0), 3, h, w, stride);
    let m = th * tw;
    let branch = |tag: &str, x: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let get = |what: &str| -> Result<Vec<f64>> {
            let wt = fetch(store, &p(&alloc::format!("{tag}.{what}.weight")))?;
            let bs = fetch(store, &p(&alloc::format!("{tag}.{what}.bias")))?;
            Ok(project(wt, Some(bs), x, d, 3, m))
        };
        let psi = get("psi")?;
        let phi = get("phi")?;
        let z = get("z")?;
        let a = softmax_rows(&affinity_logits(&psi, &phi, d, m, true), m);
        Ok((a, z))
    };
    let (ai, zi) = branch("i", &xi)?;
    let (ab, zb) = branch("b", &xb)?;
    let (ad, zd) = branch("d", &xd)?;
    let w1 = fetch(store, &p("w1.weight"))?;
    let w2 = fetch(store, &p("w2.weight"))?;
    let w3 = fetch(store, &p("w3.weight"))?;
    let fb = cross_modulate(&ab, &zb, &zi, w1, w2, d, m);
    let fd = cross_modulate(&ad, &zd, &zi, w1, w2, d, m);
    let nb = batch_norm(
        &fb,
        fetch(store, &p("bn_b.gamma"))?,
        fetch(store, &p("bn_b.beta"))?,
        d,
        m,
        eps,
    );
    let nd = batch_norm(
        &fd,
        fetch(store, &p("bn_d.gamma"))?,
        fetch(store, &p("bn_d.beta"))?,
        d,
        m,
        eps,
    );
    let si = project(w3, None, &attend(&zi, &ai, d, m), d, d, m);
    let mix: Vec<f64> = (0..d * m).map(|i| nb[i] + nd[i] + si[i]).collect();
    let tok = project(
        fetch(store, &p("w4.weight"))?,
        Some(fetch(store, &p("w4.bias"))?),
        &mix,
        3,
        d,
        m,
    );
    let up = resize(&tok, 3, th, tw, h, w);
    let data = up.iter().zip(img.data()).map(|(a, b)| a + b).collect();
    Tensor::from_vec([1, 3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_spot_values() {
        let p = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(bilinear(&p, 2, 2, 0.5, 0.5), 0.5);
        assert_eq!(bilinear(&p, 2, 2, 1.0, 0.0), 1.0);
        assert_eq!(bilinear(&p, 2, 2, -5.0, -5.0), 0.0);
    }

    #[test]
    fn pooling_and_resize_of_constants() {
        let x = vec![2.0; 3 * 5 * 7];
        let (p, oh, ow) = avg_pool(&x, 3, 5, 7, 2);
        assert_eq!((oh, ow), (3, 4));
        assert!(p.iter().all(|&v| v == 2.0));
        assert!(resize(&p, 3, oh, ow, 5, 7).iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }
}
