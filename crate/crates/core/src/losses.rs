//! Training objectives.
//!
//! Every loss comes as a graph builder (for training) and a plain function
//! evaluating it on tensors.

use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::resample::gaussian_taps;
use crate::params::{he_uniform, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const COSINE_EPS: f64 = 1e-8;

/// Balancing weights and term switches.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda_p: f64,
    pub lambda_o: f64,
    pub use_ssim: bool,
    pub use_vgg: bool,
    pub use_pseudo: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.2,
            lambda4: 0.04,
            lambda_p: 1.0,
            lambda_o: 1.0,
            use_ssim: true,
            use_vgg: true,
            use_pseudo: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda_p", self.lambda_p),
            ("lambda_o", self.lambda_o),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(alloc::format!(
                    "{name} must be a non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Effective multipliers `[pseudo, l1, cos, ssim, vgg]` after switches.
    pub fn effective(&self) -> [f64; 5] {
        let o = self.lambda_o;
        [
            if self.use_pseudo { self.lambda_p } else { 0.0 },
            o * self.lambda1,
            o * self.lambda2,
            if self.use_ssim { o * self.lambda3 } else { 0.0 },
            if self.use_vgg { o * self.lambda4 } else { 0.0 },
        ]
    }
}

/// Labelled loss values; `None` marks a term that was not evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub pseudo: Option<f64>,
    pub l1: Option<f64>,
    pub cos: Option<f64>,
    pub ssim: Option<f64>,
    pub vgg: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub const LABELS: [&'static str; 5] = ["pseudo", "l1", "cos", "ssim", "vgg"];

    pub fn terms(&self) -> [Option<f64>; 5] {
        [self.pseudo, self.l1, self.cos, self.ssim, self.vgg]
    }

    /// Weighted sum of the evaluated terms.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.terms()
            .iter()
            .zip(w.effective())
            .filter_map(|(t, m)| t.map(|t| t * m))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms().iter().all(|t| t.is_none_or(f64::is_finite))
    }
}

impl core::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "total={}", self.total)?;
        for (label, t) in Self::LABELS.iter().zip(self.terms()) {
            if let Some(t) = t {
                write!(f, " {label}={t}")?;
            }
        }
        Ok(())
    }
}

pub fn l1_graph<T: Real>(g: &mut Graph<'_, T>, pred: Var, gt: Var) -> Result<Var> {
    let d = g.sub(pred, gt)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

pub fn cosine_graph<T: Real>(g: &mut Graph<'_, T>, pred: Var, gt: Var) -> Result<Var> {
    let d = g.cosine_distance(pred, gt, T::from_f64(COSINE_EPS))?;
    let m = g.mean(d);
    Ok(non_negative(g, m))
}

/// Mean SSIM over channels and valid window positions, as a graph node.
pub fn ssim_graph<T: Real>(g: &mut Graph<'_, T>, x: Var, y: Var) -> Result<Var> {
    let taps = Rc::new(gaussian_taps(SSIM_WINDOW, SSIM_SIGMA));
    let c1 = T::from_f64(SSIM_K1 * SSIM_K1);
    let c2 = T::from_f64(SSIM_K2 * SSIM_K2);
    let two = T::from_f64(2.0);
    let mx = g.blur_valid(x, taps.clone())?;
    let my = g.blur_valid(y, taps.clone())?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let exx = g.blur_valid(xx, taps.clone())?;
    let eyy = g.blur_valid(yy, taps.clone())?;
    let exy = g.blur_valid(xy, taps)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let sxx = g.sub(exx, mx2)?;
    let syy = g.sub(eyy, my2)?;
    let sxy = g.sub(exy, mxy)?;
    let n1 = g.affine(mxy, two, c1);
    let n2 = g.affine(sxy, two, c2);
    let num = g.mul(n1, n2)?;
    let m = g.add(mx2, my2)?;
    let d1 = g.affine(m, T::ONE, c1);
    let s = g.add(sxx, syy)?;
    let d2 = g.affine(s, T::ONE, c2);
    let den = g.mul(d1, d2)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// `1 - SSIM` on inputs clamped to `[0, 1]`.
pub fn ssim_loss_graph<T: Real>(g: &mut Graph<'_, T>, pred: Var, gt: Var) -> Result<Var> {
    let p = g.clamp(pred, T::ZERO, T::ONE);
    let q = g.clamp(gt, T::ZERO, T::ONE);
    let s = ssim_graph(g, p, q)?;
    let l = g.affine(s, -T::ONE, T::ONE);
    Ok(non_negative(g, l))
}

/// Rounding can push a distance a few ulps below zero.
fn non_negative<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Var {
    g.clamp(x, T::ZERO, T::from_f64(f64::INFINITY))
}

/// One stage of a perceptual feature network.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStage<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// Average-pool by two before this stage.
    pub pool_before: bool,
    /// Compare features after this stage.
    pub tap: bool,
}

/// Fixed convolutional feature network used by the perceptual loss. Weights
/// may be loaded from a file; otherwise a seeded random network stands in.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor<T> {
    stages: Vec<FeatureStage<T>>,
}

impl<T: Real> PerceptualExtractor<T> {
    pub fn new(stages: Vec<FeatureStage<T>>) -> Result<Self> {
        let mut cin = 3;
        for (i, s) in stages.iter().enumerate() {
            let [cout, c, k, k2] = s.weight.shape();
            if c != cin || k != k2 || k % 2 == 0 || s.bias.shape() != [1, cout, 1, 1] {
                return Err(Error::Shape {
                    op: "perceptual stage",
                    detail: alloc::format!(
                        "stage {i}: weight {:?}, bias {:?}, {cin} inputs",
                        s.weight.shape(),
                        s.bias.shape()
                    ),
                });
            }
            cin = cout;
        }
        if !stages.iter().any(|s| s.tap) {
            return Err(Error::Config("perceptual extractor has no tapped stage".into()));
        }
        Ok(Self { stages })
    }

    /// conv3x3(3→8) · relu · [tap] · pool · conv3x3(8→16) · relu · [tap].
    pub fn fallback(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stage = |cin, cout, pool, rng: &mut ChaCha8Rng| FeatureStage {
            weight: he_uniform([cout, cin, 3, 3], rng),
            bias: Tensor::zeros([1, cout, 1, 1]),
            pool_before: pool,
            tap: true,
        };
        let a = stage(3, 8, false, &mut rng);
        let b = stage(8, 16, true, &mut rng);
        Self {
            stages: alloc::vec![a, b],
        }
    }

    pub fn stages(&self) -> &[FeatureStage<T>] {
        &self.stages
    }

    fn features(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Vec<Var>> {
        let mut taps = Vec::new();
        let mut cur = x;
        for s in &self.stages {
            if s.pool_before {
                cur = g.avg_pool(cur, 2);
            }
            let w = g.constant(s.weight.clone());
            let b = g.constant(s.bias.clone());
            let c = g.conv2d(cur, w, Some(b))?;
            cur = g.leaky_relu(c, T::ZERO);
            if s.tap {
                taps.push(cur);
            }
        }
        Ok(taps)
    }

    /// Mean over tapped stages of the mean absolute feature difference.
    pub fn loss_graph(&self, g: &mut Graph<'_, T>, pred: Var, gt: Var) -> Result<Var> {
        let fp = self.features(g, pred)?;
        let fg = self.features(g, gt)?;
        let mut acc: Option<Var> = None;
        for (a, b) in fp.into_iter().zip(fg) {
            let l = l1_graph(g, a, b)?;
            acc = Some(match acc {
                Some(s) => g.add(s, l)?,
                None => l,
            });
        }
        let n = self.stages.iter().filter(|s| s.tap).count();
        Ok(g.scale(acc.expect("at least one tap"), T::ONE / T::from_usize(n)))
    }

    pub fn cast<U: Real>(&self) -> PerceptualExtractor<U> {
        PerceptualExtractor {
            stages: self
                .stages
                .iter()
                .map(|s| FeatureStage {
                    weight: s.weight.cast(),
                    bias: s.bias.cast(),
                    pool_before: s.pool_before,
                    tap: s.tap,
                })
                .collect(),
        }
    }
}

/// Chooses the configured extractor, falling back to the seeded random one
/// only when allowed.
pub fn resolve_extractor<T: Real>(
    loaded: Option<PerceptualExtractor<T>>,
    allow_fallback: bool,
    seed: u64,
) -> Result<PerceptualExtractor<T>> {
    match (loaded, allow_fallback) {
        (Some(e), _) => Ok(e),
        (None, true) => Ok(PerceptualExtractor::fallback(seed)),
        (None, false) => Err(Error::Config(
            "no perceptual extractor configured and fallback disabled".into(),
        )),
    }
}

/// Nodes of every evaluated term of the objective.
pub struct LossNodes {
    pub total: Var,
    pub terms: [Option<Var>; 5],
}

/// `λp·pseudo + λo·(λ1·L1 + λ2·cos + λ3·ssim + λ4·vgg)`. Terms whose
/// effective weight is zero are not built.
pub fn total_graph<T: Real>(
    g: &mut Graph<'_, T>,
    pred: Var,
    f_n: Var,
    gt: Var,
    w: &LossWeights,
    feat: &PerceptualExtractor<T>,
) -> Result<LossNodes> {
    let eff = w.effective();
    let mut terms: [Option<Var>; 5] = [None; 5];
    if eff[0] > 0.0 {
        terms[0] = Some(l1_graph(g, f_n, gt)?);
    }
    if eff[1] > 0.0 {
        terms[1] = Some(l1_graph(g, pred, gt)?);
    }
    if eff[2] > 0.0 {
        terms[2] = Some(cosine_graph(g, pred, gt)?);
    }
    if eff[3] > 0.0 {
        terms[3] = Some(ssim_loss_graph(g, pred, gt)?);
    }
    if eff[4] > 0.0 {
        terms[4] = Some(feat.loss_graph(g, pred, gt)?);
    }
    let mut total: Option<Var> = None;
    for (t, m) in terms.iter().zip(eff) {
        if let Some(t) = t {
            let s = g.scale(*t, T::from_f64(m));
            total = Some(match total {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::ZERO)),
    };
    Ok(LossNodes { total, terms })
}

pub fn breakdown<T: Real>(g: &Graph<'_, T>, nodes: &LossNodes) -> LossBreakdown {
    let v = |o: Option<Var>| o.map(|v| g.value(v).data()[0].to_f64());
    LossBreakdown {
        pseudo: v(nodes.terms[0]),
        l1: v(nodes.terms[1]),
        cos: v(nodes.terms[2]),
        ssim: v(nodes.terms[3]),
        vgg: v(nodes.terms[4]),
        total: g.value(nodes.total).data()[0].to_f64(),
    }
}

fn eval2<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl FnOnce(&mut Graph<'_, T>, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = f(&mut g, x, y)?;
    Ok(g.value(out).data()[0].to_f64())
}

pub fn l1_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    eval2(pred, gt, l1_graph)
}

pub fn pseudo_loss<T: Real>(f_n: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    eval2(f_n, gt, l1_graph)
}

pub fn cosine_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    eval2(pred, gt, cosine_graph)
}

pub fn ssim_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    eval2(pred, gt, ssim_loss_graph)
}

pub fn perceptual_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, feat: &PerceptualExtractor<T>) -> Result<f64> {
    eval2(pred, gt, |g, a, b| feat.loss_graph(g, a, b))
}

pub fn total_loss<T: Real>(
    pred: &Tensor<T>,
    f_n: &Tensor<T>,
    gt: &Tensor<T>,
    w: &LossWeights,
    feat: &PerceptualExtractor<T>,
) -> Result<LossBreakdown> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let p = g.constant(pred.clone());
    let n = g.constant(f_n.clone());
    let t = g.constant(gt.clone());
    let nodes = total_graph(&mut g, p, n, t, w, feat)?;
    Ok(breakdown(&g, &nodes))
}
