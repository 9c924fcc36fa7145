//! Run configuration file (TOML).
//!
//! ```toml
//! [model]
//! como_max_tokens = 4096
//! [train]
//! iterations = 500
//! [train.loss]
//! lambda1 = 1.0
//! [data.synthetic]
//! count = 4
//! [output]
//! dir = "runs/overfit"
//! ```

use std::path::{Path, PathBuf};

use chromashift_core::data::DegradationSpec;
use chromashift_core::losses::{resolve_extractor, FeatureStage, PerceptualExtractor};
use chromashift_core::model::ModelConfig;
use chromashift_core::tensor::Tensor;
use chromashift_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Consulted when `train` is given no `--config`.
pub const CONFIG_ENV: &str = "CHROMASHIFT_CONFIG";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub perceptual: PerceptualConfig,
    pub output: OutputConfig,
}

/// Training data: a folder layout or manifest when `root` is set, otherwise
/// generated pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub val_root: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub count: usize,
    /// Held-out pairs, drawn with `degradation.seed + 1`.
    pub val_count: usize,
    pub size: usize,
    pub degradation: DegradationSpec,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 64,
            val_count: 8,
            size: 128,
            degradation: DegradationSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualConfig {
    /// JSON file of feature-network stages.
    pub weights: Option<PathBuf>,
    pub allow_fallback: bool,
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            weights: None,
            allow_fallback: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "runs/default".into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config {
            path: origin.into(),
            message: e.message().to_string(),
        })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg = Self::parse(&text, path)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn validate(&self, origin: &Path) -> Result<()> {
        let wrap = |e: chromashift_core::error::Error| Error::Config {
            path: origin.into(),
            message: e.to_string(),
        };
        self.model.validate().map_err(wrap)?;
        self.train.validate(&self.model).map_err(wrap)?;
        self.data.synthetic.degradation.validate().map_err(wrap)?;
        if self.data.root.is_none() && self.data.synthetic.count == 0 {
            return Err(Error::Config {
                path: origin.into(),
                message: "no training data: set data.root or data.synthetic.count".into(),
            });
        }
        Ok(())
    }

    /// Relative paths in the file are taken from the file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.data.root);
        fix(&mut self.data.manifest);
        fix(&mut self.data.val_root);
        fix(&mut self.data.val_manifest);
        fix(&mut self.perceptual.weights);
        if self.output.dir.is_relative() {
            self.output.dir = base.join(&self.output.dir);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn perceptual_extractor(&self) -> Result<PerceptualExtractor<f32>> {
        let loaded = match &self.perceptual.weights {
            Some(p) => Some(load_feature_stages(p)?),
            None => None,
        };
        if loaded.is_none() && self.perceptual.allow_fallback {
            eprintln!("note: no perceptual weights given, using a random feature network");
        }
        Ok(resolve_extractor(
            loaded,
            self.perceptual.allow_fallback,
            self.perceptual.seed,
        )?)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StageFile {
    /// `[cout, cin, k, k]`.
    shape: [usize; 4],
    weight: Vec<f32>,
    bias: Vec<f32>,
    #[serde(default)]
    pool_before: bool,
    #[serde(default = "yes")]
    tap: bool,
}

fn yes() -> bool {
    true
}

/// Reads `{"stages": [{"shape": [..], "weight": [..], "bias": [..],
/// "pool_before": bool, "tap": bool}, ..]}`.
pub fn load_feature_stages(path: &Path) -> Result<PerceptualExtractor<f32>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct File {
        stages: Vec<StageFile>,
    }
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let file: File = serde_json::from_str(&text).map_err(|e| Error::Config {
        path: path.into(),
        message: e.to_string(),
    })?;
    let mut stages = Vec::new();
    for s in file.stages {
        let cout = s.shape[0];
        stages.push(FeatureStage {
            weight: Tensor::from_vec(s.shape, s.weight)?,
            bias: Tensor::from_vec([1, cout, 1, 1], s.bias)?,
            pool_before: s.pool_before,
            tap: s.tap,
        });
    }
    Ok(PerceptualExtractor::new(stages)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("", Path::new("x.toml")).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[train.loss]\nlamda1 = 2.0\n", Path::new("x.toml")).unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("lamda1"), "{err}");
    }

    #[test]
    fn nested_values_and_round_trip() {
        let text = "[model]\ndeform_mode = \"spatial\"\ncomo_max_tokens = 1024\n[train]\niterations = 7\npatch_size = 64\n[train.loss]\nuse_vgg = false\n";
        let cfg = RunConfig::parse(text, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert!(!cfg.train.loss.use_vgg);
        assert_eq!(cfg.model.como_max_tokens, 1024);
        let again = RunConfig::parse(&cfg.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = RunConfig::parse("[model]\ncose_kernel = 4\n", Path::new("x.toml")).unwrap_err();
        assert!(err.is_usage(), "{err}");
        let err = RunConfig::parse("[train]\npatch_size = 12\n", Path::new("x.toml")).unwrap_err();
        assert!(err.is_usage(), "{err}");
    }

    #[test]
    fn feature_stages_from_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.json");
        let w: Vec<f32> = (0..4 * 3 * 9).map(|i| i as f32 * 0.01).collect();
        let json = serde_json::json!({"stages": [{"shape": [4, 3, 3, 3], "weight": w, "bias": [0.0, 0.1, 0.2, 0.3]}]});
        std::fs::write(&p, json.to_string()).unwrap();
        let e = load_feature_stages(&p).unwrap();
        assert_eq!(e.stages().len(), 1);
        assert!(e.stages()[0].tap);
        std::fs::write(
            &p,
            r#"{"stages": [{"shape": [4, 3, 3, 3], "weight": [1.0], "bias": []}]}"#,
        )
        .unwrap();
        assert!(load_feature_stages(&p).is_err());
    }
}
