//! Versioned, checksummed checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "CHSHCKPT" | version u32 | config fingerprint u64
//! model config (u32 length + TOML)
//! iteration u64 | rng seed [u8; 32], stream u64, word position u128
//! adam step u64 | entry count u32
//! per entry: name (u16 length + UTF-8), trainable u8, shape 4 x u32,
//!            values, first moments, second moments (f32 each)
//! crc32 of everything above
//! ```

use std::path::Path;

use chromashift_core::model::{Model, ModelConfig};
use chromashift_core::params::ParamStore;
use chromashift_core::tensor::Tensor;
use chromashift_core::train::{Adam, RngState, Trainer};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"CHSHCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub iteration: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn of(trainer: &Trainer) -> Self {
        Self {
            model: trainer.model.config().clone(),
            params: trainer.params.clone(),
            adam: trainer.adam.clone(),
            iteration: trainer.iteration as u64,
            rng: RngState::capture(&trainer.rng),
        }
    }

    /// Weights only, with fresh optimiser state.
    pub fn from_weights(model: ModelConfig, params: ParamStore<f32>) -> Self {
        let adam = Adam::new(&params);
        Self {
            model,
            params,
            adam,
            iteration: 0,
            rng: RngState {
                seed: [0; 32],
                stream: 0,
                word_pos: 0,
            },
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.model.fingerprint().to_le_bytes());
        let cfg = toml::to_string(&self.model).expect("config serialises");
        b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        b.extend_from_slice(cfg.as_bytes());
        b.extend_from_slice(&self.iteration.to_le_bytes());
        b.extend_from_slice(&self.rng.seed);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        b.extend_from_slice(&self.adam.step.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let floats = |b: &mut Vec<u8>, t: &Tensor<f32>| {
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        };
        for i in 0..self.params.len() {
            let name = self.params.name(i);
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(self.params.is_trainable(i) as u8);
            for d in self.params.tensor(i).shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            floats(&mut b, self.params.tensor(i));
            floats(&mut b, &self.adam.m[i]);
            floats(&mut b, &self.adam.v[i]);
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    /// Parses a checkpoint; with `expected`, the stored model config must
    /// have the same fingerprint.
    pub fn from_bytes(bytes: &[u8], path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: path.into(),
            message,
        };
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::Checksum { path: path.into() });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(Error::Checksum { path: path.into() });
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                path: path.into(),
                found: version,
                expected: VERSION,
            });
        }
        let fingerprint = r.u64()?;
        if let Some(want) = expected {
            if want.fingerprint() != fingerprint {
                return Err(Error::ConfigMismatch {
                    path: path.into(),
                    found: fingerprint,
                    expected: want.fingerprint(),
                });
            }
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|e| bad(e.to_string()))?;
        let model: ModelConfig = toml::from_str(text).map_err(|e| bad(format!("model config: {}", e.message())))?;
        if model.fingerprint() != fingerprint {
            return Err(bad("stored model config does not match its fingerprint".into()));
        }
        let iteration = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| bad(e.to_string()))?
                .to_string();
            let trainable = r.take(1)?[0] != 0;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let numel: usize = shape.iter().product();
            params.insert(&name, r.tensor(shape, numel)?, trainable)?;
            m.push(r.tensor(shape, numel)?);
            v.push(r.tensor(shape, numel)?);
        }
        if r.pos != body.len() {
            return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            model,
            params,
            adam: Adam { m, v, step },
            iteration,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        // write then rename, so a crash never leaves a half-written file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(Error::io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path, expected)
    }

    /// Rebuilds the model and checks that the stored arrays cover exactly
    /// its parameters.
    pub fn model(&self) -> Result<Model> {
        let (model, fresh) = Model::build::<f32>(self.model.clone(), 0)?;
        let names = |s: &ParamStore<f32>| {
            (0..s.len())
                .map(|i| (s.name(i).to_string(), s.tensor(i).shape()))
                .collect::<Vec<_>>()
        };
        if names(&fresh) != names(&self.params) {
            return Err(Error::Checkpoint {
                path: Default::default(),
                message: "parameter arrays do not match the model layout".into(),
            });
        }
        Ok(model)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint {
            path: Default::default(),
            message: "unexpected end of data".into(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, shape: [usize; 4], numel: usize) -> Result<Tensor<f32>> {
        let raw = self.take(numel.saturating_mul(4))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::from_vec(shape, data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chromashift_core::losses::PerceptualExtractor;
    use chromashift_core::train::TrainConfig;

    fn trained() -> Trainer {
        let model = ModelConfig {
            como_max_tokens: 64,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            iterations: 2,
            batch_size: 1,
            patch_size: 16,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, train, PerceptualExtractor::fallback(0)).unwrap();
        let pairs: Vec<_> = chromashift_core::data::synthetic_pairs(2, 16, &Default::default())
            .unwrap()
            .into_iter()
            .map(|p| p.pair)
            .collect();
        t.run(&pairs, |_, _| Ok(())).unwrap();
        t
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let t = trained();
        let ck = Checkpoint::of(&t);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p, Some(t.model.config())).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), std::fs::read(&p).unwrap());
        assert_eq!(back.rng.restore(), t.rng);
        back.model().unwrap();
    }

    #[test]
    fn truncation_and_corruption_fail_the_checksum() {
        let bytes = Checkpoint::of(&trained()).to_bytes();
        let p = Path::new("x.ckpt");
        for cut in [bytes.len() - 1, bytes.len() / 2, 12] {
            let err = Checkpoint::from_bytes(&bytes[..cut], p, None).unwrap_err();
            assert!(matches!(err, Error::Checksum { .. }), "{err}");
        }
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped, p, None),
            Err(Error::Checksum { .. })
        ));
        assert!(Checkpoint::from_bytes(b"PNG", p, None).is_err());
    }

    #[test]
    fn version_and_config_mismatch() {
        let ck = Checkpoint::of(&trained());
        let p = Path::new("x.ckpt");
        let other = ModelConfig {
            opposed_maps: true,
            ..ck.model.clone()
        };
        let err = Checkpoint::from_bytes(&ck.to_bytes(), p, Some(&other)).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch { .. }), "{err}");

        let mut bytes = ck.to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes, p, None).unwrap_err();
        assert!(matches!(err, Error::Version { found: 7, .. }), "{err}");
    }
}
