//! Stride-1 "same" convolution through im2col + GEMM.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;
use crate::tensor::Tensor;

/// Lowers one sample `(cin, h, w)` into a `(cin*k*k, h*w)` patch matrix with
/// zero padding `k/2`.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(T::ZERO);
                    out[x_hi..].fill(T::ZERO);
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s0 = (x_lo as isize + dx) as usize;
                    for (d, &g) in dst[s0..s0 + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&row[y * w + x_lo..y * w + x_hi])
                    {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// `x: (n, cin, h, w)`, `weight: (cout, cin, k, k)`, `bias: (1, cout, 1, 1)`.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let [n, cin, h, w] = x.shape();
    let [cout, wcin, k, _] = weight.shape();
    assert_eq!(cin, wcin, "conv2d input channels");
    let hw = h * w;
    let ckk = cin * k * k;
    let mut out = Tensor::zeros([n, cout, h, w]);
    let mut col = if k == 1 { Vec::new() } else { vec![T::ZERO; ckk * hw] };
    for s in 0..n {
        let xs = x.sample(s);
        let patches: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, cin, h, w, k, &mut col);
            &col
        };
        let ys = out.sample_mut(s);
        if let Some(b) = bias {
            for (co, row) in ys.chunks_mut(hw).enumerate() {
                row.fill(b.data()[co]);
            }
        }
        T::gemm(
            cout,
            ckk,
            hw,
            T::ONE,
            weight.data(),
            ckk as isize,
            1,
            patches,
            hw as isize,
            1,
            if bias.is_some() { T::ONE } else { T::ZERO },
            ys,
            hw as isize,
            1,
        );
    }
    out
}

pub struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<T> {
    let [n, cin, h, w] = x.shape();
    let [cout, _, k, _] = weight.shape();
    let hw = h * w;
    let ckk = cin * k * k;
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_w.then(|| Tensor::zeros(weight.shape()));
    let mut gb = need_b.then(|| Tensor::zeros([1, cout, 1, 1]));
    let mut col = if k == 1 || !need_w {
        Vec::new()
    } else {
        vec![T::ZERO; ckk * hw]
    };
    let mut dcol = if k == 1 || !need_x {
        Vec::new()
    } else {
        vec![T::ZERO; ckk * hw]
    };
    for s in 0..n {
        let gy = grad_out.sample(s);
        if let Some(gb) = gb.as_mut() {
            for (co, row) in gy.chunks(hw).enumerate() {
                gb.data_mut()[co] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let patches: &[T] = if k == 1 {
                x.sample(s)
            } else {
                im2col(x.sample(s), cin, h, w, k, &mut col);
                &col
            };
            // dW[co, r] += sum_p dY[co, p] * col[r, p]
            T::gemm(
                cout,
                hw,
                ckk,
                T::ONE,
                gy,
                hw as isize,
                1,
                patches,
                1,
                hw as isize,
                T::ONE,
                gw.data_mut(),
                ckk as isize,
                1,
            );
        }
        if let Some(gx) = gx.as_mut() {
            let target: &mut [T] = if k == 1 { gx.sample_mut(s) } else { &mut dcol };
            // dcol[r, p] = sum_co W[co, r] * dY[co, p]
            T::gemm(
                ckk,
                cout,
                hw,
                T::ONE,
                weight.data(),
                1,
                ckk as isize,
                gy,
                hw as isize,
                1,
                T::ZERO,
                target,
                hw as isize,
                1,
            );
            if k != 1 {
                col2im(&dcol, cin, h, w, k, gx.sample_mut(s));
            }
        }
    }
    ConvGrads {
        x: gx,
        weight: gw,
        bias: gb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1usize, 3, 5] {
            let x = Tensor::<f64>::uniform([2, 3, 6, 7], -1.0, 1.0, &mut rng);
            let w = Tensor::<f64>::uniform([4, 3, k, k], -1.0, 1.0, &mut rng);
            let b = Tensor::<f64>::uniform([1, 4, 1, 1], -1.0, 1.0, &mut rng);
            let fast = conv2d_forward(&x, &w, Some(&b));
            let slow = reference::conv2d(&x, &w, Some(&b));
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> == <x, conv^T(g)> and the weight gradient identity.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform([2, 2, 5, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform([3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let g = Tensor::<f64>::uniform([2, 3, 5, 4], -1.0, 1.0, &mut rng);
        let y = conv2d_forward(&x, &w, None);
        let grads = conv2d_backward(&x, &w, &g, true, true, true);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let gx = grads.x.unwrap();
        let rhs_x: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        let gw = grads.weight.unwrap();
        let rhs_w: f64 = w.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
        assert!((grads.bias.unwrap().sum() - g.sum()).abs() < 1e-10);
    }
}
