//! Optimisation loop: batch sampling, Adam, cosine schedule, clipping.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_patch, Augment, Pair};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::imaging::ImageTensor;
use crate::losses::{breakdown, total_graph, LossBreakdown, LossWeights, PerceptualExtractor};
use crate::metrics::{evaluate_pair, ImageMetrics};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr: f64,
    /// Floor of the cosine decay.
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub augment: Augment,
    pub log_interval: usize,
    pub checkpoint_interval: usize,
    /// Informational; everything runs on the CPU.
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 4,
            patch_size: 128,
            lr: 1e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            loss: LossWeights::default(),
            augment: Augment {
                hflip: true,
                rot90: true,
            },
            log_interval: 10,
            checkpoint_interval: 500,
            device: String::from("cpu"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("need lr > 0 and 0 <= lr_min <= lr".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let m = model.size_multiple();
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(m) {
            return bad(format!("patch_size must be a positive multiple of {m}"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("need 0 <= beta < 1 and adam_eps > 0".into());
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative".into());
        }
        self.loss.validate()
    }

    /// Cosine decay from `lr` at iteration 0 to `lr_min` at the last one.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let span = self.iterations.saturating_sub(1).max(1) as f64;
        let t = (iteration as f64 / span).min(1.0);
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + libm::cos(core::f64::consts::PI * t))
    }
}

/// First and second moment estimates, indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            (0..params.len())
                .map(|i| Tensor::zeros(params.tensor(i).shape()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update with gradients already scaled by `scale`.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        scale: f64,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - libm::pow(b1, t as f64);
        let c2 = 1.0 - libm::pow(b2, t as f64);
        let step = T::from_f64(lr * libm::sqrt(c2) / c1);
        let eps = T::from_f64(cfg.adam_eps * libm::sqrt(c2));
        let (b1, b2, s) = (T::from_f64(b1), T::from_f64(b2), T::from_f64(scale));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !params.is_trainable(i) {
                continue;
            }
            let p = params.tensor_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k] * s;
                m[k] = b1 * m[k] + (T::ONE - b1) * gk;
                v[k] = b2 * v[k] + (T::ONE - b2) * gk * gk;
                p[k] -= step * m[k] / (v[k].sqrt() + eps);
            }
        }
    }
}

/// Serializable position of the training random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Outcome of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Iterations completed, counting this one.
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Norm before clipping.
    pub grad_norm: f64,
}

/// Pair visited as the `k`-th training sample. The order of each epoch is a
/// function of `(seed, epoch)`, so resuming needs only the iteration count.
pub fn epoch_index(seed: u64, n: usize, k: usize) -> usize {
    let epoch = (k / n) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x000e_90c4 ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order[k % n]
}

/// Everything that evolves during training.
pub struct Trainer {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    pub config: TrainConfig,
    pub perceptual: PerceptualExtractor<f32>,
}

fn stack(images: &[ImageTensor]) -> Result<Tensor<f32>> {
    let ts: Vec<Tensor<f32>> = images.iter().map(|i| i.to_tensor()).collect();
    Tensor::stack(&ts)
}

impl Trainer {
    /// Fresh model whose weights are drawn from `config.seed`.
    pub fn new(model: ModelConfig, config: TrainConfig, perceptual: PerceptualExtractor<f32>) -> Result<Self> {
        config.validate(&model)?;
        let (model, params) = Model::build::<f32>(model, config.seed)?;
        let adam = Adam::new(&params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xda7a);
        Ok(Self {
            model,
            params,
            adam,
            rng,
            iteration: 0,
            config,
            perceptual,
        })
    }

    /// Draws a batch of aligned patches. Pairs are visited in a shuffled
    /// order that is redrawn every epoch.
    pub fn sample_batch(&mut self, pairs: &[Pair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if pairs.is_empty() {
            return Err(Error::Invalid("empty training set".into()));
        }
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for b in 0..self.config.batch_size {
            let k = self.iteration * self.config.batch_size + b;
            let i = epoch_index(self.config.seed, pairs.len(), k);
            let p = sample_patch(&pairs[i], self.config.patch_size, self.config.augment, &mut self.rng)?;
            xs.push(p.input);
            ys.push(p.gt);
        }
        Ok((stack(&xs)?, stack(&ys)?))
    }

    /// Forward, backward and update on one batch.
    pub fn step_on(&mut self, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<StepReport> {
        let (grads, loss, stats) = {
            let mut g = Graph::new(&self.params);
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let out = self.model.forward(&mut g, xv, true)?;
            let nodes = total_graph(&mut g, out.output, out.pseudo, yv, &self.config.loss, &self.perceptual)?;
            let loss = breakdown(&g, &nodes);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: self.iteration,
                    breakdown: format!("{loss}"),
                });
            }
            let stats = self.model.modulator().batch_stats(&g, &out.bn_nodes);
            (g.backward(nodes.total), loss, stats)
        };
        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                breakdown: format!("{loss} grad_norm={grad_norm}"),
            });
        }
        let clip = self.config.clip_norm;
        let scale = if clip > 0.0 && grad_norm > clip {
            clip / grad_norm
        } else {
            1.0
        };
        let lr = self.config.lr_at(self.iteration);
        self.adam
            .update(&mut self.params, &grads.params, scale, lr, &self.config);
        self.model.modulator().update_running(&stats, &mut self.params)?;
        self.iteration += 1;
        Ok(StepReport {
            iteration: self.iteration,
            lr,
            loss,
            grad_norm,
        })
    }

    pub fn step(&mut self, pairs: &[Pair]) -> Result<StepReport> {
        let (x, y) = self.sample_batch(pairs)?;
        self.step_on(&x, &y)
    }

    /// Steps until `config.iterations`, handing each report to `observe`.
    pub fn run(&mut self, pairs: &[Pair], mut observe: impl FnMut(&Self, &StepReport) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            let r = self.step(pairs)?;
            observe(self, &r)?;
        }
        Ok(())
    }

    pub fn enhance(&self, img: &ImageTensor) -> Result<ImageTensor> {
        self.model.enhance(&self.params, img)
    }

    pub fn evaluate(&self, pairs: &[Pair]) -> Result<Vec<ImageMetrics>> {
        evaluate(&self.model, &self.params, pairs)
    }
}

/// Per-image metrics of the clamped model output against each reference.
pub fn evaluate(model: &Model, params: &ParamStore<f32>, pairs: &[Pair]) -> Result<Vec<ImageMetrics>> {
    pairs
        .iter()
        .map(|p| evaluate_pair(&model.enhance(params, &p.input)?, &p.gt))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_pairs, DegradationSpec};
    use rand::Rng;

    fn small() -> (ModelConfig, TrainConfig) {
        let m = ModelConfig {
            como_max_tokens: 64,
            ..ModelConfig::default()
        };
        let t = TrainConfig {
            iterations: 3,
            batch_size: 2,
            patch_size: 16,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        (m, t)
    }

    fn pairs() -> Vec<Pair> {
        synthetic_pairs(2, 24, &DegradationSpec::default())
            .unwrap()
            .into_iter()
            .map(|s| s.pair)
            .collect()
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), c.lr);
        assert!((c.lr_at(c.iterations - 1) - c.lr_min).abs() < 1e-15);
        assert!(c.lr_at(500) < c.lr && c.lr_at(500) > c.lr_min);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let (m, t) = small();
        assert!(t.validate(&m).is_ok());
        assert!(TrainConfig {
            iterations: 0,
            ..t.clone()
        }
        .validate(&m)
        .is_err());
        assert!(TrainConfig { lr: 0.0, ..t.clone() }.validate(&m).is_err());
        assert!(TrainConfig { patch_size: 12, ..t }.validate(&m).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert(
                "p",
                Tensor::from_vec([1, 1, 1, 2], alloc::vec![1.0, -1.0]).unwrap(),
                true,
            )
            .unwrap();
        let mut adam = Adam::new(&store);
        let g = Tensor::from_vec([1, 1, 1, 2], alloc::vec![0.3, -2.0]).unwrap();
        let cfg = TrainConfig::default();
        adam.update(&mut store, &[Some(g)], 1.0, 0.01, &cfg);
        let p = store.tensor(0).data();
        assert!((p[0] - 0.99).abs() < 1e-9 && (p[1] + 0.99).abs() < 1e-9, "{p:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let (m, t) = small();
        let data = pairs();
        let run = || {
            let mut tr = Trainer::new(m.clone(), t.clone(), PerceptualExtractor::fallback(0)).unwrap();
            let mut losses = Vec::new();
            tr.run(&data, |_, r| {
                losses.push(r.loss.total);
                Ok(())
            })
            .unwrap();
            (losses, tr.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn running_statistics_move() {
        let (m, t) = small();
        let mut tr = Trainer::new(m, t, PerceptualExtractor::fallback(0)).unwrap();
        let before = tr.params.get("como.bn_b.running_var").unwrap().clone();
        tr.step(&pairs()).unwrap();
        assert_ne!(tr.params.get("como.bn_b.running_var").unwrap(), &before);
    }

    #[test]
    fn every_epoch_visits_each_pair_once() {
        for n in [1, 4, 7] {
            for epoch in 0..5 {
                let mut seen: Vec<usize> = (0..n).map(|j| epoch_index(3, n, epoch * n + j)).collect();
                seen.sort();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
            }
        }
        let a: Vec<usize> = (0..7).map(|k| epoch_index(3, 7, k)).collect();
        let b: Vec<usize> = (7..14).map(|k| epoch_index(3, 7, k)).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.random();
        let s = RngState::capture(&rng);
        let mut back = s.restore();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }
}
