//! Operator-oracle, identity, metric and gradient checks run by the
//! `selftest` command and the acceptance tests.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::como::{affinity, cross_modulate, token_stride, Como, Modulator, BN_EPS};
use crate::cose::{color_deformable_conv, Cose, DeformMode, OffsetBundle};
use crate::error::Result;
use crate::gradcheck;
use crate::graph::Graph;
use crate::illumination::{brighten, darken, FeatureMap, IlluminationMap};
use crate::imaging::{invert, ImageTensor};
use crate::metrics::{psnr_tensor, rmse_lab, ssim};
use crate::params::ParamStore;
use crate::reference;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Degeneracy,
    Oracles,
    Gradients,
    Identities,
    Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub group: Group,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Debug hooks that corrupt the fast path so negative controls can be run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Hooks {
    /// Added to one kernel tap of the deformable convolution, not the oracle.
    pub kernel_perturbation: f32,
}

fn outcome(group: Group, name: &str, err: f64, tol: f64) -> Outcome {
    Outcome {
        group,
        name: name.into(),
        passed: err <= tol,
        detail: format!("max error {err:.3e} (tolerance {tol:.0e})"),
    }
}

fn max_diff<A: crate::real::Real, B: crate::real::Real>(a: &[A], b: &[B]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

/// Zero offsets and unit modulation against a plain convolution, 100 inputs.
pub fn conv_equivalence(hooks: &Hooks) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut store = ParamStore::<f32>::new();
    let cose = Cose::register(&mut store, "cose", 3, DeformMode::Full, &mut rng)?;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let kernel = Tensor::<f32>::uniform([3, 3, 3, 3], -0.5, 0.5, &mut rng);
        let mut fast_kernel = kernel.clone();
        fast_kernel.data_mut()[13] += hooks.kernel_perturbation;
        store.set(cose.kernel_name(), fast_kernel)?;
        let x = Tensor::<f32>::uniform([1, 3, 16, 16], -1.0, 1.0, &mut rng);
        let bundle = OffsetBundle {
            dp: Some(Tensor::zeros([1, 18, 16, 16])),
            dc: Some(Tensor::zeros([1, 27, 16, 16])),
            dm: Some(Tensor::full([1, 9, 16, 16], 1.0)),
        };
        let got = color_deformable_conv(&FeatureMap(x.clone()), &bundle, &store, &cose)?;
        let want = reference::conv2d(&x, &kernel, None);
        worst = worst.max(got.0.max_abs_diff(&want));
    }
    Ok(outcome(Group::Degeneracy, "deform/zero-offsets = conv3x3", worst, 1e-5))
}

/// Vectorised kernels against the scalar loops on 20 small instances each.
pub fn oracle_checks() -> Result<Vec<Outcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut out = Vec::new();

    let mut store = ParamStore::<f32>::new();
    let cose = Cose::register(&mut store, "cose", 3, DeformMode::Full, &mut rng)?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(3..=8), rng.random_range(3..=8));
        store.set(cose.kernel_name(), Tensor::uniform([3, 3, 3, 3], -0.5, 0.5, &mut rng))?;
        let x = Tensor::<f32>::uniform([1, 3, h, w], 0.0, 1.0, &mut rng);
        let bundle = OffsetBundle {
            dp: Some(Tensor::uniform([1, 18, h, w], -3.0, 3.0, &mut rng)),
            dc: Some(Tensor::uniform([1, 27, h, w], -0.5, 0.5, &mut rng)),
            dm: Some(Tensor::uniform([1, 9, h, w], 0.0, 1.0, &mut rng)),
        };
        let got = color_deformable_conv(&FeatureMap(x.clone()), &bundle, &store, &cose)?;
        let c = |t: &Option<Tensor<f32>>| t.as_ref().map(|t| t.cast::<f64>());
        let (dp, dc, dm) = (c(&bundle.dp), c(&bundle.dc), c(&bundle.dm));
        let kernel = store.get(cose.kernel_name()).expect("registered").cast::<f64>();
        let want = reference::color_deform(&x.cast(), dp.as_ref(), dc.as_ref(), dm.as_ref(), &kernel);
        worst = worst.max(max_diff(got.0.data(), want.data()));
    }
    out.push(outcome(
        Group::Oracles,
        "deform/colour offsets vs scalar loop",
        worst,
        1e-5,
    ));

    let (mut pre_err, mut post_err) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let (th, tw) = (rng.random_range(1..=4), rng.random_range(2..=4));
        let m = th * tw;
        let psi = Tensor::<f32>::uniform([1, 8, th, tw], -1.0, 1.0, &mut rng);
        let phi = Tensor::<f32>::uniform([1, 8, th, tw], -1.0, 1.0, &mut rng);
        let (pre, post) = affinity(&psi, &phi)?;
        let logits = reference::affinity_logits(
            &psi.cast::<f64>().into_data(),
            &phi.cast::<f64>().into_data(),
            8,
            m,
            true,
        );
        pre_err = pre_err.max(max_diff(pre.data(), &logits));
        post_err = post_err.max(max_diff(post.data(), &reference::softmax_rows(&logits, m)));
    }
    out.push(outcome(
        Group::Oracles,
        "affinity/symmetric logits vs scalar loop",
        pre_err,
        1e-5,
    ));
    out.push(outcome(
        Group::Oracles,
        "affinity/row softmax vs scalar loop",
        post_err,
        1e-5,
    ));

    let mut store = ParamStore::<f32>::new();
    let como = Como::register(&mut store, "como", 8, 16, &mut rng)?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let psi = Tensor::<f32>::uniform([1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let phi = Tensor::<f32>::uniform([1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let (_, a) = affinity(&psi, &phi)?;
        let zj = Tensor::<f32>::uniform([1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let zi = Tensor::<f32>::uniform([1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let got = cross_modulate(&a, &zj, &zi, &store, &como)?;
        let f = |t: &Tensor<f32>| t.cast::<f64>().into_data();
        let w = |n: &str| f(store.get(n).expect("registered"));
        let a64: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
        let want = reference::cross_modulate(
            &a64,
            &f(&zj),
            &f(&zi),
            &w("como.w1.weight"),
            &w("como.w2.weight"),
            8,
            16,
        );
        worst = worst.max(max_diff(got.data(), &want));
    }
    out.push(outcome(Group::Oracles, "cross-modulation vs scalar loop", worst, 1e-5));

    // f64: normalising 16 tokens divides by a small deviation, which
    // amplifies f32 rounding past the tolerance
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut store = ParamStore::<f64>::new();
        let como = Como::register(&mut store, "como", 8, 16, &mut rng)?;
        let w4 = como.output_layer().weight.clone();
        store.set(&w4, Tensor::uniform([3, 8, 1, 1], -0.5, 0.5, &mut rng))?;
        let (h, w) = (rng.random_range(4..=8), rng.random_range(4..=8));
        let img = Tensor::<f64>::uniform([1, 3, h, w], 0.0, 1.0, &mut rng);
        let ob = Tensor::<f64>::uniform([1, 3, h, w], -1.0, 1.0, &mut rng);
        let od = Tensor::<f64>::uniform([1, 3, h, w], -1.0, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let (i, b, d) = (g.constant(img.clone()), g.constant(ob.clone()), g.constant(od.clone()));
        let got = Modulator::Como(como).forward(&mut g, i, b, d, true)?;
        let stride = token_stride(h, w, 16);
        let want = reference::como(&store, "como", &img, &ob, &od, stride, BN_EPS)?;
        worst = worst.max(max_diff(g.value(got.image).data(), want.data()));
    }
    out.push(outcome(Group::Oracles, "modulation block vs scalar loop", worst, 1e-5));
    Ok(out)
}

pub fn identity_checks() -> Result<Vec<Outcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut out = Vec::new();
    let img = ImageTensor::new(17, 23, (0..3 * 17 * 23).map(|_| rng.random::<f32>()).collect())?;
    let twice = invert(&invert(&img));
    out.push(Outcome {
        group: Group::Identities,
        name: "invert/involution".into(),
        passed: twice == img,
        detail: format!("max error {:.3e}", max_diff(twice.data(), img.data())),
    });

    let x = img.to_tensor::<f32>();
    let lum = IlluminationMap::new(Tensor::<f32>::uniform([1, 1, 17, 23], 0.05, 1.0, &mut rng), 1e-3)?;
    let dark = darken(&x, &lum);
    let dual = brighten(&x.map(|v| 1.0 - v), &lum).0.map(|v| 1.0 - v);
    out.push(outcome(
        Group::Identities,
        "darken = 1 - brighten(1 - x)",
        dark.0.max_abs_diff(&dual),
        1e-6,
    ));

    let mut store = ParamStore::<f32>::new();
    let como = Modulator::Como(Como::register(&mut store, "como", 8, 64, &mut rng)?);
    como.zero_output(&mut store)?;
    let t = Tensor::<f32>::uniform([2, 3, 16, 16], 0.0, 1.0, &mut rng);
    let o = Tensor::<f32>::uniform([2, 3, 16, 16], -1.0, 1.0, &mut rng);
    let mut g = Graph::new(&store);
    let (i, b) = (g.constant(t.clone()), g.constant(o));
    let y = como.forward(&mut g, i, b, b, true)?;
    out.push(Outcome {
        group: Group::Identities,
        name: "modulation/zero output = input".into(),
        passed: g.value(y.image) == &t,
        detail: format!("max error {:.3e}", g.value(y.image).max_abs_diff(&t)),
    });

    let psi = Tensor::<f32>::uniform([1, 8, 8, 8], -2.0, 2.0, &mut rng);
    let phi = Tensor::<f32>::uniform([1, 8, 8, 8], -2.0, 2.0, &mut rng);
    let (pre, post) = affinity(&psi, &phi)?;
    out.push(Outcome {
        group: Group::Identities,
        name: "affinity/exactly symmetric".into(),
        passed: pre.is_symmetric(),
        detail: String::new(),
    });
    let rows = post
        .row_sums()
        .iter()
        .map(|s| (s - 1.0).abs() as f64)
        .fold(0.0, f64::max);
    out.push(outcome(Group::Identities, "affinity/rows sum to one", rows, 1e-5));
    Ok(out)
}

pub fn metric_checks() -> Result<Vec<Outcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let mut out = Vec::new();
    let a = Tensor::<f64>::uniform([1, 3, 32, 32], 0.0, 0.8, &mut rng);
    let p = psnr_tensor(&a.map(|v| v + 0.1), &a)?;
    out.push(outcome(
        Group::Metrics,
        "psnr/+0.1 offset = 20 dB",
        (p - 20.0).abs(),
        1e-6,
    ));
    let img = ImageTensor::new(32, 32, (0..3 * 32 * 32).map(|_| rng.random::<f32>()).collect())?;
    out.push(outcome(
        Group::Metrics,
        "ssim/self = 1",
        (ssim(&img, &img)? - 1.0).abs(),
        1e-12,
    ));
    out.push(outcome(Group::Metrics, "rmse-lab/self = 0", rmse_lab(&img, &img)?, 0.0));
    let black = ImageTensor::filled(8, 8, [0.0; 3])?;
    let white = ImageTensor::filled(8, 8, [1.0; 3])?;
    let want = 100.0 / libm::sqrt(3.0);
    out.push(outcome(
        Group::Metrics,
        "rmse-lab/black vs white",
        (rmse_lab(&black, &white)? - want).abs(),
        0.1,
    ));
    Ok(out)
}

pub fn gradient_checks(mut report: impl FnMut(&Outcome)) -> Result<Vec<Outcome>> {
    let mut out = Vec::new();
    gradcheck::run_suite(|r| {
        let mut detail = format!("max relative error {:.3e} over {} coordinates", r.max_rel, r.coords);
        if r.skipped > 0 {
            detail += &format!(", {} at kinks skipped", r.skipped);
        }
        let o = Outcome {
            group: Group::Gradients,
            name: format!("grad/{}", r.name),
            passed: r.passed(),
            detail,
        };
        report(&o);
        out.push(o);
    })?;
    Ok(out)
}

/// Runs every check in order, reporting each as it finishes.
pub fn run(hooks: &Hooks, mut report: impl FnMut(&Outcome)) -> Result<Vec<Outcome>> {
    let mut all = Vec::new();
    let take = |batch: Vec<Outcome>, all: &mut Vec<Outcome>, report: &mut dyn FnMut(&Outcome)| {
        for o in batch {
            report(&o);
            all.push(o);
        }
    };
    take(alloc::vec![conv_equivalence(hooks)?], &mut all, &mut report);
    take(oracle_checks()?, &mut all, &mut report);
    take(identity_checks()?, &mut all, &mut report);
    take(metric_checks()?, &mut all, &mut report);
    all.extend(gradient_checks(&mut report)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_checks_pass() {
        let mut all = alloc::vec![conv_equivalence(&Hooks::default()).unwrap()];
        all.extend(oracle_checks().unwrap());
        all.extend(identity_checks().unwrap());
        all.extend(metric_checks().unwrap());
        for o in &all {
            assert!(o.passed, "{o:?}");
        }
    }

    #[test]
    fn perturbed_kernel_fails_equivalence() {
        let o = conv_equivalence(&Hooks {
            kernel_perturbation: 1e-3,
        })
        .unwrap();
        assert!(!o.passed, "{o:?}");
    }
}
