//! Full network: illumination maps, brighten/darken, pseudo-normal
//! generator, two shift estimators and the modulation block.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::como::{AttentionMode, Como, Modulator, NonLocal};
use crate::cose::{Cose, DeformMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::illumination::{brighten_graph, darken_graph, Extractor, Generator};
use crate::imaging::{pad_to_multiple, ImageTensor};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Architecture hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub extractor_depth: usize,
    pub extractor_width: usize,
    pub extractor_bottleneck: usize,
    pub illum_floor: f64,
    pub leaky_slope: f64,
    pub generator_width: usize,
    pub cose_kernel: usize,
    pub deform_mode: DeformMode,
    pub como_dim: usize,
    pub como_max_tokens: usize,
    pub attention_mode: AttentionMode,
    pub separate_extractors: bool,
    pub opposed_maps: bool,
    pub illum_channels: usize,
    pub share_generator: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            extractor_depth: 3,
            extractor_width: 16,
            extractor_bottleneck: 96,
            illum_floor: crate::illumination::DEFAULT_FLOOR,
            leaky_slope: 0.1,
            generator_width: 16,
            cose_kernel: 3,
            deform_mode: DeformMode::Full,
            como_dim: 8,
            como_max_tokens: 4096,
            attention_mode: AttentionMode::Como,
            separate_extractors: false,
            opposed_maps: false,
            illum_channels: 1,
            share_generator: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.extractor_depth == 0 || self.extractor_depth > 6 {
            return bad("extractor_depth must be in 1..=6");
        }
        if self.extractor_width == 0 || self.extractor_bottleneck == 0 || self.generator_width == 0 {
            return bad("layer widths must be positive");
        }
        if !(self.illum_floor > 0.0 && self.illum_floor < 1.0) {
            return bad("illum_floor must lie in (0, 1)");
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope must lie in [0, 1)");
        }
        if self.cose_kernel.is_multiple_of(2) {
            return bad("cose_kernel must be odd");
        }
        if self.como_dim == 0 || self.como_max_tokens == 0 {
            return bad("como_dim and como_max_tokens must be positive");
        }
        if self.illum_channels != 1 && self.illum_channels != 3 {
            return bad("illum_channels must be 1 or 3");
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.extractor_depth
    }

    /// Stable 64-bit digest of every field (FNV-1a over the debug form).
    pub fn fingerprint(&self) -> u64 {
        let text = alloc::format!("{self:?}");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Layer layout of a model; values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    extractor: Extractor,
    extractor_dark: Option<Extractor>,
    generator: Generator,
    cose_b: Cose,
    cose_d: Cose,
    modulator: Modulator,
}

/// Graph nodes of one forward pass.
pub struct ForwardNodes {
    pub output: Var,
    pub pseudo: Var,
    pub bright: Var,
    pub dark: Var,
    pub bn_nodes: Vec<Var>,
}

impl Model {
    /// Registers all layers with weights drawn from `seed`.
    pub fn build<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let extractor = Extractor::register(
            &mut store,
            "extractor",
            c.extractor_depth,
            c.extractor_width,
            c.extractor_bottleneck,
            c.illum_channels,
            c.illum_floor,
            c.leaky_slope,
            &mut rng,
        )?;
        let extractor_dark = match c.separate_extractors && !c.opposed_maps {
            true => Some(Extractor::register(
                &mut store,
                "extractor_dark",
                c.extractor_depth,
                c.extractor_width,
                c.extractor_bottleneck,
                c.illum_channels,
                c.illum_floor,
                c.leaky_slope,
                &mut rng,
            )?),
            false => None,
        };
        let modulator = match c.attention_mode {
            AttentionMode::Como => Modulator::Como(Como::register(
                &mut store,
                "como",
                c.como_dim,
                c.como_max_tokens,
                &mut rng,
            )?),
            AttentionMode::NonlocalConcat => Modulator::NonLocal(NonLocal::register(
                &mut store,
                "nonlocal",
                c.como_dim,
                c.como_max_tokens,
                &mut rng,
            )?),
        };
        let shared: Option<[String; 3]> = match (&modulator, c.share_generator) {
            (Modulator::Como(m), true) => Some(m.value_layer_names()),
            _ => None,
        };
        let generator = Generator::register(
            &mut store,
            "generator",
            c.como_dim,
            c.generator_width,
            shared,
            c.leaky_slope,
            &mut rng,
        )?;
        let cose_b = Cose::register(&mut store, "cose_b", c.cose_kernel, c.deform_mode, &mut rng)?;
        let cose_d = Cose::register(&mut store, "cose_d", c.cose_kernel, c.deform_mode, &mut rng)?;
        let model = Self {
            config,
            extractor,
            extractor_dark,
            generator,
            cose_b,
            cose_d,
            modulator,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn modulator(&self) -> &Modulator {
        &self.modulator
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn cose(&self) -> [&Cose; 2] {
        [&self.cose_b, &self.cose_d]
    }

    /// Forward pass on an `(n, 3, h, w)` node whose sides are multiples of
    /// [`ModelConfig::size_multiple`].
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, training: bool) -> Result<ForwardNodes> {
        let floor = self.config.illum_floor;
        let lum_u = self.extractor.forward(g, x)?;
        let lum_o = if self.config.opposed_maps {
            g.one_minus(lum_u)
        } else {
            let inv = g.one_minus(x);
            self.extractor_dark
                .as_ref()
                .unwrap_or(&self.extractor)
                .forward(g, inv)?
        };
        let fb = brighten_graph(g, x, lum_u, floor)?;
        let fd = darken_graph(g, x, lum_o, floor)?;
        let f_n = self.generator.forward(g, fb, fd, x)?;
        let ob = self.cose_b.forward(g, f_n, fb)?;
        let od = self.cose_d.forward(g, f_n, fd)?;
        let m = self.modulator.forward(g, x, ob, od, training)?;
        Ok(ForwardNodes {
            output: m.image,
            pseudo: f_n,
            bright: fb,
            dark: fd,
            bn_nodes: m.bn_nodes,
        })
    }

    /// Inference on a batch whose sides already fit the size multiple:
    /// `(I_y, F_N)`.
    pub fn infer<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new(params);
        let v = g.constant(x.clone());
        let out = self.forward(&mut g, v, false)?;
        Ok((g.value(out.output).clone(), g.value(out.pseudo).clone()))
    }

    /// Enhances an image of any size: reflect-pad, run, crop, clamp.
    pub fn enhance<T: Real>(&self, params: &ParamStore<T>, img: &ImageTensor) -> Result<ImageTensor> {
        let padded = pad_to_multiple(img, self.config.size_multiple());
        let (out, _) = self.infer(params, &padded.to_tensor::<T>())?;
        ImageTensor::from_tensor_clamped(&out)?.crop(0, 0, img.height(), img.width())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_budget() {
        let (_, store) = Model::build::<f32>(ModelConfig::default(), 0).unwrap();
        let n = store.trainable_count();
        assert!((200_000..=450_000).contains(&n), "{n}");
    }

    #[test]
    fn generator_ties_to_value_projections() {
        let (_, shared) = Model::build::<f32>(ModelConfig::default(), 0).unwrap();
        let cfg = ModelConfig {
            share_generator: false,
            ..ModelConfig::default()
        };
        let (_, own) = Model::build::<f32>(cfg, 0).unwrap();
        assert!(shared.get("generator.embed_b.weight").is_none());
        assert!(own.get("generator.embed_b.weight").is_some());
        assert_eq!(own.trainable_count() - shared.trainable_count(), 3 * (8 * 3 + 8));
    }

    #[test]
    fn enhance_preserves_size_and_range() {
        let cfg = ModelConfig {
            como_max_tokens: 64,
            ..ModelConfig::default()
        };
        let (model, store) = Model::build::<f32>(cfg, 1).unwrap();
        let img = ImageTensor::new(13, 21, (0..3 * 13 * 21).map(|i| (i % 29) as f32 / 28.0).collect()).unwrap();
        let a = model.enhance(&store, &img).unwrap();
        let b = model.enhance(&store, &img).unwrap();
        assert_eq!((a.height(), a.width()), (13, 21));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_output_returns_input() {
        let cfg = ModelConfig {
            como_max_tokens: 64,
            ..ModelConfig::default()
        };
        let (model, mut store) = Model::build::<f32>(cfg, 2).unwrap();
        model.modulator().zero_output(&mut store).unwrap();
        let img = ImageTensor::new(16, 16, (0..768).map(|i| (i % 31) as f32 / 30.0).collect()).unwrap();
        assert_eq!(model.enhance(&store, &img).unwrap(), img);
    }

    #[test]
    fn fingerprint_tracks_fields() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            opposed_maps: true,
            ..ModelConfig::default()
        };
        assert_eq!(a.fingerprint(), ModelConfig::default().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
