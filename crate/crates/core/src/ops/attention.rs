//! Token affinity matrices and attention-weighted aggregation.
//!
//! Token maps are stored as `(n, d, h, w)` with `M = h*w` tokens per sample;
//! affinity matrices as `(n, 1, M, M)`.

use alloc::vec;

use crate::real::Real;
use crate::tensor::Tensor;

/// Raw `psiᵀ·phi` products, optionally symmetrised as `(P + Pᵀ) / 2`.
/// Symmetrisation writes both mirrored entries from one sum, so the result is
/// symmetric bit for bit.
pub fn affinity_logits<T: Real>(psi: &Tensor<T>, phi: &Tensor<T>, symmetric: bool) -> Tensor<T> {
    let [n, d, _, _] = psi.shape();
    let m = psi.plane();
    let mut out = Tensor::zeros([n, 1, m, m]);
    for b in 0..n {
        let a = out.sample_mut(b);
        T::gemm(
            m,
            d,
            m,
            T::ONE,
            psi.sample(b),
            1,
            m as isize,
            phi.sample(b),
            m as isize,
            1,
            T::ZERO,
            a,
            m as isize,
            1,
        );
        if symmetric {
            symmetrize_in_place(a, m);
        }
    }
    out
}

fn symmetrize_in_place<T: Real>(a: &mut [T], m: usize) {
    const TILE: usize = 32;
    let half = T::from_f64(0.5);
    for bi in (0..m).step_by(TILE) {
        for bj in (bi..m).step_by(TILE) {
            for i in bi..(bi + TILE).min(m) {
                for j in bj.max(i + 1)..(bj + TILE).min(m) {
                    let v = (a[i * m + j] + a[j * m + i]) * half;
                    a[i * m + j] = v;
                    a[j * m + i] = v;
                }
            }
        }
    }
}

/// Largest element, reduced over eight lanes so it vectorises.
#[inline(always)]
fn row_max<T: Real>(xs: &[T]) -> T {
    let mut acc = [xs[0]; 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for l in 0..8 {
            if c[l] > acc[l] {
                acc[l] = c[l];
            }
        }
    }
    chunks.remainder().iter().chain(acc.iter()).copied().fold(xs[0], T::max)
}

#[inline(always)]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::ZERO, |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Row-wise softmax of every `M × M` matrix, in place.
pub fn softmax_rows_in_place<T: Real>(a: &mut Tensor<T>) {
    let m = a.width();
    for row in a.data_mut().chunks_mut(m) {
        let s = T::exp_shifted_sum(row, row_max(row));
        let inv = T::ONE / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Row-normalised affinity used by the attention branches.
pub fn affinity_forward<T: Real>(psi: &Tensor<T>, phi: &Tensor<T>, symmetric: bool) -> Tensor<T> {
    let mut a = affinity_logits(psi, phi, symmetric);
    softmax_rows_in_place(&mut a);
    a
}

/// Gradients for `psi` and `phi` given the normalised output `a`.
pub fn affinity_backward<T: Real>(
    psi: &Tensor<T>,
    phi: &Tensor<T>,
    a: &Tensor<T>,
    grad_a: &Tensor<T>,
    symmetric: bool,
) -> (Tensor<T>, Tensor<T>) {
    let [n, d, _, _] = psi.shape();
    let m = psi.plane();
    let mut gpsi = Tensor::zeros(psi.shape());
    let mut gphi = Tensor::zeros(phi.shape());
    let mut gp = vec![T::ZERO; m * m];
    for b in 0..n {
        let av = a.sample(b);
        let ga = grad_a.sample(b);
        for i in 0..m {
            let ar = &av[i * m..(i + 1) * m];
            let gr = &ga[i * m..(i + 1) * m];
            let dotp: T = ar.iter().zip(gr).map(|(&x, &y)| x * y).sum();
            for j in 0..m {
                gp[i * m + j] = ar[j] * (gr[j] - dotp);
            }
        }
        if symmetric {
            symmetrize_in_place(&mut gp, m);
        }
        // gpsi[k, i] = sum_j gP[i, j] * phi[k, j]
        T::gemm(
            d,
            m,
            m,
            T::ONE,
            phi.sample(b),
            m as isize,
            1,
            &gp,
            1,
            m as isize,
            T::ZERO,
            gpsi.sample_mut(b),
            m as isize,
            1,
        );
        // gphi[k, j] = sum_i psi[k, i] * gP[i, j]
        T::gemm(
            d,
            m,
            m,
            T::ONE,
            psi.sample(b),
            m as isize,
            1,
            &gp,
            m as isize,
            1,
            T::ZERO,
            gphi.sample_mut(b),
            m as isize,
            1,
        );
    }
    (gpsi, gphi)
}

/// `out[k, p] = sum_q v[k, q] * a[p, q]`, i.e. each output token is the
/// attention-weighted mix of value tokens.
pub fn attend_forward<T: Real>(v: &Tensor<T>, a: &Tensor<T>) -> Tensor<T> {
    let [n, d, _, _] = v.shape();
    let m = v.plane();
    let mut out = Tensor::zeros(v.shape());
    for b in 0..n {
        T::gemm(
            d,
            m,
            m,
            T::ONE,
            v.sample(b),
            m as isize,
            1,
            a.sample(b),
            1,
            m as isize,
            T::ZERO,
            out.sample_mut(b),
            m as isize,
            1,
        );
    }
    out
}

pub fn attend_backward<T: Real>(
    v: &Tensor<T>,
    a: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_v: bool,
    need_a: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, d, _, _] = v.shape();
    let m = v.plane();
    let mut gv = need_v.then(|| Tensor::zeros(v.shape()));
    let mut ga = need_a.then(|| Tensor::zeros(a.shape()));
    for b in 0..n {
        let g = grad_out.sample(b);
        if let Some(gv) = gv.as_mut() {
            T::gemm(
                d,
                m,
                m,
                T::ONE,
                g,
                m as isize,
                1,
                a.sample(b),
                m as isize,
                1,
                T::ZERO,
                gv.sample_mut(b),
                m as isize,
                1,
            );
        }
        if let Some(ga) = ga.as_mut() {
            T::gemm(
                m,
                d,
                m,
                T::ONE,
                g,
                1,
                m as isize,
                v.sample(b),
                m as isize,
                1,
                T::ZERO,
                ga.sample_mut(b),
                m as isize,
                1,
            );
        }
    }
    (gv, ga)
}

/// Query rows processed per block by the fused kernels.
const ROWS: usize = 64;

/// Logits of query rows `i0..i0 + r` into `buf` (`r × m`).
#[allow(clippy::too_many_arguments)]
fn logits_block<T: Real>(
    psi: &[T],
    phi: &[T],
    d: usize,
    m: usize,
    i0: usize,
    r: usize,
    symmetric: bool,
    buf: &mut [T],
) {
    let mi = m as isize;
    let alpha = if symmetric { T::from_f64(0.5) } else { T::ONE };
    // buf[r, j] = psi[:, i0 + r] . phi[:, j]
    T::gemm(r, d, m, alpha, &psi[i0..], 1, mi, phi, mi, 1, T::ZERO, buf, mi, 1);
    if symmetric {
        // plus the mirrored entry psi[:, j] . phi[:, i0 + r]
        T::gemm(r, d, m, alpha, &phi[i0..], 1, mi, psi, mi, 1, T::ONE, buf, mi, 1);
    }
}

/// Unnormalised row exponentials; returns each row's reciprocal sum.
#[inline(always)]
fn exp_rows<T: Real>(buf: &mut [T], m: usize, inv: &mut [T]) {
    for (row, inv) in buf.chunks_mut(m).zip(inv.iter_mut()) {
        let mx = row_max(row);
        *inv = T::ONE / T::exp_shifted_sum(row, mx);
    }
}

/// Turns `g` into the logit gradient of each row given its unnormalised
/// exponentials `e`: `g ← e · (g − ⟨e, g⟩ · inv) · inv · scale`.
#[inline(always)]
fn softmax_grad_rows<T: Real>(e: &[T], g: &mut [T], m: usize, inv: &[T], scale: T) {
    for ((er, gr), &s) in e.chunks(m).zip(g.chunks_mut(m)).zip(inv) {
        let mean = dot(er, gr) * s;
        let k = s * scale;
        for (x, &ev) in gr.iter_mut().zip(er) {
            *x = ev * (*x - mean) * k;
        }
    }
}

/// Copies of the row kernels compiled for AVX2 + FMA, used when the running
/// CPU has them.
#[cfg(all(feature = "std", target_arch = "x86_64"))]
mod wide {
    use super::*;

    pub(super) fn available() -> bool {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) fn exp_rows<T: Real>(buf: &mut [T], m: usize, inv: &mut [T]) {
        super::exp_rows(buf, m, inv)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) fn softmax_grad_rows<T: Real>(e: &[T], g: &mut [T], m: usize, inv: &[T], scale: T) {
        super::softmax_grad_rows(e, g, m, inv, scale)
    }
}

fn exp_block<T: Real>(buf: &mut [T], m: usize, inv: &mut [T]) {
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    if wide::available() {
        // SAFETY: the features were detected on this CPU
        return unsafe { wide::exp_rows(buf, m, inv) };
    }
    exp_rows(buf, m, inv)
}

fn softmax_grad_block<T: Real>(e: &[T], g: &mut [T], m: usize, inv: &[T], scale: T) {
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    if wide::available() {
        // SAFETY: the features were detected on this CPU
        return unsafe { wide::softmax_grad_rows(e, g, m, inv, scale) };
    }
    softmax_grad_rows(e, g, m, inv, scale)
}

/// `attend_forward(v, affinity_forward(psi, phi, symmetric))` without
/// materialising the `M × M` matrix.
pub fn fused_forward<T: Real>(psi: &Tensor<T>, phi: &Tensor<T>, v: &Tensor<T>, symmetric: bool) -> Tensor<T> {
    let [n, d, _, _] = psi.shape();
    let dv = v.channels();
    let m = psi.plane();
    let mi = m as isize;
    let rows = ROWS.min(m);
    let mut buf = vec![T::ZERO; rows * m];
    let mut inv = vec![T::ZERO; rows];
    let mut out = Tensor::zeros(v.shape());
    for b in 0..n {
        let (ps, ph, vs) = (psi.sample(b), phi.sample(b), v.sample(b));
        let o = out.sample_mut(b);
        for i0 in (0..m).step_by(rows) {
            let r = rows.min(m - i0);
            let e = &mut buf[..r * m];
            logits_block(ps, ph, d, m, i0, r, symmetric, e);
            exp_block(e, m, &mut inv);
            // out[c, i0 + r] = sum_j v[c, j] * e[r, j] / sum_j e[r, j]
            T::gemm(dv, m, r, T::ONE, vs, mi, 1, e, 1, mi, T::ZERO, &mut o[i0..], mi, 1);
            for c in 0..dv {
                for (x, &s) in o[c * m + i0..c * m + i0 + r].iter_mut().zip(&inv) {
                    *x *= s;
                }
            }
        }
    }
    out
}

/// Gradients of [`fused_forward`] for `(psi, phi, v)`; the affinity is
/// recomputed block by block.
pub fn fused_backward<T: Real>(
    psi: &Tensor<T>,
    phi: &Tensor<T>,
    v: &Tensor<T>,
    grad_out: &Tensor<T>,
    symmetric: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, d, _, _] = psi.shape();
    let dv = v.channels();
    let m = psi.plane();
    let mi = m as isize;
    let rows = ROWS.min(m);
    let mut buf = vec![T::ZERO; rows * m];
    let mut ga = vec![T::ZERO; rows * m];
    let mut inv = vec![T::ZERO; rows];
    let mut gos = vec![T::ZERO; dv * rows];
    let mut gpsi = Tensor::zeros(psi.shape());
    let mut gphi = Tensor::zeros(phi.shape());
    let mut gv = Tensor::zeros(v.shape());
    let half = if symmetric { T::from_f64(0.5) } else { T::ONE };
    for b in 0..n {
        let (ps, ph, vs, go) = (psi.sample(b), phi.sample(b), v.sample(b), grad_out.sample(b));
        let gps = gpsi.sample_mut(b);
        let gph = gphi.sample_mut(b);
        let gvs = gv.sample_mut(b);
        for i0 in (0..m).step_by(rows) {
            let r = rows.min(m - i0);
            let e = &mut buf[..r * m];
            let g = &mut ga[..r * m];
            logits_block(ps, ph, d, m, i0, r, symmetric, e);
            exp_block(e, m, &mut inv);
            // gv[c, j] += sum_r go[c, i0 + r] * a[r, j]
            for c in 0..dv {
                for k in 0..r {
                    gos[c * r + k] = go[c * m + i0 + k] * inv[k];
                }
            }
            T::gemm(dv, r, m, T::ONE, &gos, r as isize, 1, e, mi, 1, T::ONE, gvs, mi, 1);
            // g[r, j] = sum_c go[c, i0 + r] * v[c, j]
            T::gemm(r, dv, m, T::ONE, &go[i0..], 1, mi, vs, mi, 1, T::ZERO, g, mi, 1);
            softmax_grad_block(e, g, m, &inv[..r], half);
            // logits[r, j] = psi[:, i0 + r] . phi[:, j]
            T::gemm(d, m, r, T::ONE, ph, mi, 1, g, 1, mi, T::ONE, &mut gps[i0..], mi, 1);
            T::gemm(d, r, m, T::ONE, &ps[i0..], mi, 1, g, mi, 1, T::ONE, gph, mi, 1);
            if symmetric {
                // mirrored term psi[:, j] . phi[:, i0 + r]
                T::gemm(d, m, r, T::ONE, ps, mi, 1, g, 1, mi, T::ONE, &mut gph[i0..], mi, 1);
                T::gemm(d, r, m, T::ONE, &ph[i0..], mi, 1, g, mi, 1, T::ONE, gps, mi, 1);
            }
        }
    }
    (gpsi, gphi, gv)
}
