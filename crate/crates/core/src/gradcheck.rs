//! Central finite-difference checks of analytic gradients in `f64`.
//!
//! A graph output `y` is reduced to `s = mean(y ∘ R)` with a fixed random
//! `R`; every checked coordinate compares `∂s/∂x` from the tape against
//! `(s(x + h) − s(x − h)) / 2h`.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::como::Como;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::illumination::{brighten_graph, darken_graph};
use crate::losses::{cosine_graph, l1_graph, ssim_loss_graph, total_graph, LossWeights, PerceptualExtractor};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error; gradients below it are compared
/// on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel: f64,
    /// Coordinate with the largest error.
    pub worst: String,
    pub coords: usize,
    /// Coordinates skipped because the step straddled a kink.
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel <= TOLERANCE
    }
}

/// Options of one check.
pub struct Check<'a> {
    pub name: &'a str,
    pub params: &'a ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub wrt_params: bool,
    /// Coordinates checked per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    pub seed: u64,
    /// Skip coordinates whose one-sided slopes disagree (piecewise-linear
    /// graphs only).
    pub skip_kinks: bool,
}

fn reduce(y: &Tensor<f64>, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / r.len() as f64
}

impl Check<'_> {
    pub fn run<F>(&self, f: F) -> Result<CheckResult>
    where
        F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let eval = |params: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
            let mut g = Graph::new(params);
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let y = f(&mut g, &vars)?;
            Ok(g.value(y).clone())
        };
        let y0 = eval(self.params, &self.inputs)?;
        let r: Vec<f64> = (0..y0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut g = Graph::new(self.params);
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let y = f(&mut g, &vars)?;
        let rv = g.constant(Tensor::from_vec(y0.shape(), r.clone())?);
        let p = g.mul(y, rv)?;
        let s = g.mean(p);
        let grads = g.backward(s);

        let mut result = CheckResult {
            name: self.name.into(),
            max_rel: 0.0,
            worst: String::new(),
            coords: 0,
            skipped: 0,
        };
        let s0 = reduce(&y0, &r);
        let kink = |sp: f64, sm: f64| {
            let (up, down) = ((sp - s0) / STEP, (s0 - sm) / STEP);
            self.skip_kinks && relative_error(up, down) > TOLERANCE
        };
        let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            if len <= self.max_coords {
                (0..len).collect()
            } else {
                sample(rng, len, self.max_coords).into_vec()
            }
        };
        let mut record = |what: String, analytic: f64, sp: f64, sm: f64| {
            if kink(sp, sm) {
                result.skipped += 1;
                return;
            }
            let numeric = (sp - sm) / (2.0 * STEP);
            let e = relative_error(analytic, numeric);
            result.coords += 1;
            if e > result.max_rel || result.worst.is_empty() {
                result.max_rel = result.max_rel.max(e);
                result.worst = alloc::format!("{what}: analytic {analytic:.6e}, numeric {numeric:.6e}");
            }
        };

        let mut work = self.inputs.clone();
        for (k, v) in vars.iter().enumerate() {
            let zero = Tensor::zeros(self.inputs[k].shape());
            let ga = grads.wrt(*v).unwrap_or(&zero);
            for i in pick(work[k].len(), &mut rng) {
                let x = work[k].data()[i];
                work[k].data_mut()[i] = x + STEP;
                let sp = reduce(&eval(self.params, &work)?, &r);
                work[k].data_mut()[i] = x - STEP;
                let sm = reduce(&eval(self.params, &work)?, &r);
                work[k].data_mut()[i] = x;
                record(alloc::format!("input {k}[{i}]"), ga.data()[i], sp, sm);
            }
        }

        if self.wrt_params {
            let mut store = self.params.clone();
            for j in 0..store.len() {
                if !store.is_trainable(j) {
                    continue;
                }
                let zero = Tensor::zeros(store.tensor(j).shape());
                let ga = grads.params[j].as_ref().unwrap_or(&zero).clone();
                for i in pick(store.tensor(j).len(), &mut rng) {
                    let x = store.tensor(j).data()[i];
                    store.tensor_mut(j).data_mut()[i] = x + STEP;
                    let sp = reduce(&eval(&store, &self.inputs)?, &r);
                    store.tensor_mut(j).data_mut()[i] = x - STEP;
                    let sm = reduce(&eval(&store, &self.inputs)?, &r);
                    store.tensor_mut(j).data_mut()[i] = x;
                    let name = alloc::format!("{}[{i}]", store.name(j));
                    record(name, ga.data()[i], sp, sm);
                }
            }
        }
        Ok(result)
    }
}

fn uniform(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Positional offsets whose fractional part stays in `[0.1, 0.9]`, away from
/// the kinks of bilinear sampling.
fn smooth_offsets(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-2i32..2) as f64 + rng.random_range(0.1..0.9))
        .collect();
    Tensor::from_vec(shape, data).expect("sized")
}

/// Names of the checks run by [`run_suite`], in order.
pub const SUITE: [&str; 11] = [
    "brighten",
    "darken",
    "color_deform/x",
    "color_deform/dp",
    "color_deform/dc",
    "color_deform/dm",
    "color_deform/kernel",
    "como/all",
    "loss/l1+pseudo",
    "loss/cos+ssim",
    "loss/vgg+total",
];

/// Runs every gradient check, reporting each result as it finishes.
pub fn run_suite(mut report: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ead);
    let empty = ParamStore::<f64>::new();
    let mut out = Vec::new();
    let mut push = |r: CheckResult, out: &mut Vec<CheckResult>| {
        report(&r);
        out.push(r);
    };
    let floor = crate::illumination::DEFAULT_FLOOR;

    // illumination algebra; maps kept above the floor
    for (name, dark) in [("brighten", false), ("darken", true)] {
        let img = uniform([2, 3, 6, 6], 0.0, 1.0, &mut rng);
        let lum = uniform([2, 1, 6, 6], 0.2, 1.0, &mut rng);
        let check = Check {
            name,
            params: &empty,
            inputs: alloc::vec![img, lum],
            wrt_params: false,
            max_coords: 200,
            seed: 1,
            skip_kinks: false,
        };
        push(
            check.run(|g, v| {
                if dark {
                    darken_graph(g, v[0], v[1], floor)
                } else {
                    brighten_graph(g, v[0], v[1], floor)
                }
            })?,
            &mut out,
        );
    }

    // colour deformable convolution, one check per differentiated input
    let (n, h, w, k) = (1, 7, 6, 3);
    let taps = k * k;
    let x = uniform([n, 3, h, w], 0.0, 1.0, &mut rng);
    let dp = smooth_offsets([n, 2 * taps, h, w], &mut rng);
    let dc = uniform([n, 3 * taps, h, w], -0.2, 0.2, &mut rng);
    let dm = uniform([n, taps, h, w], 0.1, 0.9, &mut rng);
    let kernel = uniform([3, 3, k, k], -0.5, 0.5, &mut rng);
    let names = [
        "color_deform/x",
        "color_deform/dp",
        "color_deform/dc",
        "color_deform/dm",
        "color_deform/kernel",
    ];
    for (slot, name) in names.into_iter().enumerate() {
        let all = [&x, &dp, &dc, &dm, &kernel];
        // the checked tensor is the graph input; the rest are constants
        let check = Check {
            name,
            params: &empty,
            inputs: alloc::vec![all[slot].clone()],
            wrt_params: false,
            max_coords: 120,
            seed: 2 + slot as u64,
            skip_kinks: false,
        };
        push(
            check.run(|g, v| {
                let mut vars = [v[0]; 5];
                for (i, t) in all.iter().enumerate() {
                    if i != slot {
                        vars[i] = g.constant((*t).clone());
                    }
                }
                g.color_deform(vars[0], Some(vars[1]), Some(vars[2]), Some(vars[3]), vars[4])
            })?,
            &mut out,
        );
    }

    // modulation block: every parameter plus the three inputs, batch statistics
    let mut store = ParamStore::<f64>::new();
    let como = Como::register(&mut store, "como", 8, 256, &mut rng)?;
    // undo the small output initialisation so every path carries signal
    let w4 = como.output_layer().weight.clone();
    store.get_mut(&w4).expect("registered").scale(10.0);
    let check = Check {
        name: "como/all",
        params: &store,
        inputs: alloc::vec![
            uniform([2, 3, 16, 16], 0.0, 1.0, &mut rng),
            uniform([2, 3, 16, 16], -0.5, 0.5, &mut rng),
            uniform([2, 3, 16, 16], -0.5, 0.5, &mut rng),
        ],
        wrt_params: true,
        max_coords: 64,
        seed: 9,
        skip_kinks: false,
    };
    push(
        check.run(|g, v| Ok(como.forward(g, v[0], v[1], v[2], true)?.image))?,
        &mut out,
    );

    // losses; prediction and target differ everywhere to avoid the L1 kink
    let gt = uniform([2, 3, 12, 12], 0.2, 0.8, &mut rng);
    let shift: Tensor<f64> = {
        let s = uniform([2, 3, 12, 12], 0.02, 0.15, &mut rng);
        let sign = uniform([2, 3, 12, 12], -1.0, 1.0, &mut rng);
        s.zip_map(&sign, |a, b| if b < 0.0 { -a } else { a })
    };
    let pred = gt.zip_map(&shift, |a, b| a + b);
    let f_n = gt.zip_map(&shift, |a, b| a - 0.5 * b);
    let loss_check = |name: &'static str, seed: u64, skip_kinks: bool| Check {
        name,
        params: &empty,
        inputs: alloc::vec![pred.clone(), f_n.clone(), gt.clone()],
        wrt_params: false,
        max_coords: 100,
        seed,
        skip_kinks,
    };
    push(
        loss_check("loss/l1+pseudo", 11, false).run(|g, v| {
            let a = l1_graph(g, v[0], v[2])?;
            let b = l1_graph(g, v[1], v[2])?;
            let b = g.scale(b, 0.7);
            g.add(a, b)
        })?,
        &mut out,
    );
    push(
        loss_check("loss/cos+ssim", 12, false).run(|g, v| {
            let a = cosine_graph(g, v[0], v[2])?;
            let b = ssim_loss_graph(g, v[0], v[2])?;
            let b = g.scale(b, 0.3);
            g.add(a, b)
        })?,
        &mut out,
    );
    let feat = PerceptualExtractor::<f64>::fallback(3);
    let weights = LossWeights::default();
    push(
        loss_check("loss/vgg+total", 13, true).run(|g, v| {
            let a = feat.loss_graph(g, v[0], v[2])?;
            let t = total_graph(g, v[0], v[1], v[2], &weights, &feat)?.total;
            g.add(a, t)
        })?,
        &mut out,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, -1e-12) < 1e-5);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let empty = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = uniform([1, 1, 3, 3], 0.5, 1.0, &mut rng);
        let check = Check {
            name: "square",
            params: &empty,
            inputs: alloc::vec![x],
            wrt_params: false,
            max_coords: 9,
            seed: 0,
            skip_kinks: false,
        };
        assert!(check.run(|g, v| g.mul(v[0], v[0])).unwrap().passed());
        // one factor detached from the tape: the tape reports half the slope
        let bad = check
            .run(|g, v| {
                let c = g.constant(g.value(v[0]).clone());
                g.mul(v[0], c)
            })
            .unwrap();
        assert!(!bad.passed(), "{bad:?}");
    }

    #[test]
    fn full_suite_passes() {
        let results = run_suite(|_| {}).unwrap();
        assert_eq!(results.len(), SUITE.len());
        for (r, name) in results.iter().zip(SUITE) {
            assert_eq!(r.name, name);
            assert!(r.passed(), "{r:?}");
            assert!(r.skipped * 4 <= r.coords + r.skipped, "{r:?}");
        }
    }
}
