//! Flat key/value run configuration.
//!
//! Every key is optional. Values resolve as command-line flags, then the
//! config file, then built-in defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiment::ToyTaskConfig;
use crate::model::{Mode, ModelConfig};
use crate::synthesis::{RenderConfig, ToyPairSpec};
use crate::trainer::{TaskWeights, TrainConfig};
use crate::transformer::SeqEncoderKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
    Tiny,
}

macro_rules! flat_config {
    ($($(#[$doc:meta])* $field:ident: $ty:ty,)*) => {
        #[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct FlatConfig {
            $($(#[$doc])* #[serde(default, skip_serializing_if = "Option::is_none")] pub $field: Option<$ty>,)*
        }

        impl FlatConfig {
            /// Keys set in `higher` win over keys set here.
            pub fn overlay(&self, higher: &FlatConfig) -> FlatConfig {
                FlatConfig {
                    $($field: higher.$field.clone().or_else(|| self.$field.clone()),)*
                }
            }
        }
    };
}

flat_config! {
    // Rendering.
    image_height: usize,
    image_width: usize,
    min_font_px: f64,
    max_font_px: f64,
    max_rotation_deg: f64,
    min_contrast: f64,
    max_contrast: f64,
    backgrounds: Vec<u32>,
    supersample: usize,
    // Toy language pair.
    alphabet: String,
    cipher: String,
    /// Builds the cipher by rotating the alphabet; ignored when `cipher` is set.
    shift: usize,
    min_len: usize,
    max_len: usize,
    // Model.
    preset: Preset,
    tps: bool,
    seq_encoder: SeqEncoderKind,
    dropout: f64,
    max_src_len: usize,
    max_tgt_len: usize,
    // Training.
    mode: Mode,
    lambda_mt: f64,
    batch_tit: usize,
    batch_mt: usize,
    batch_ocr: usize,
    lr: f64,
    warmup: u64,
    rounds: u64,
    label_smoothing: f64,
    clip_norm: f64,
    checkpoint_every: u64,
    seed: u64,
    // Toy experiments.
    n_train: usize,
    n_test: usize,
    n_mt: usize,
    seeds: Vec<u64>,
}

impl FlatConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Parses one `key=value` override. Values are TOML; a bare word is read as a string.
    pub fn from_assignment(assignment: &str) -> Result<Self> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got {assignment:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        Self::from_toml(&format!("{key} = {value}")).or_else(|_| Self::from_toml(&format!("{key} = {value:?}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn render(&self) -> Result<RenderConfig> {
        let d = RenderConfig::default();
        let cfg = RenderConfig {
            image_height: self.image_height.unwrap_or(d.image_height),
            image_width: self.image_width.unwrap_or(d.image_width),
            min_font_px: self.min_font_px.unwrap_or(d.min_font_px),
            max_font_px: self.max_font_px.unwrap_or(d.max_font_px),
            max_rotation_deg: self.max_rotation_deg.unwrap_or(d.max_rotation_deg),
            min_contrast: self.min_contrast.unwrap_or(d.min_contrast),
            max_contrast: self.max_contrast.unwrap_or(d.max_contrast),
            backgrounds: self.backgrounds.clone().unwrap_or(d.backgrounds),
            supersample: self.supersample.unwrap_or(d.supersample),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn toy(&self) -> Result<ToyPairSpec> {
        let d = ToyPairSpec::default();
        let alphabet = self.alphabet.clone().unwrap_or(d.alphabet.clone());
        let min_len = self.min_len.unwrap_or(d.min_len);
        let max_len = self.max_len.unwrap_or(d.max_len);
        let spec = match (&self.cipher, self.shift) {
            (Some(c), _) => ToyPairSpec {
                alphabet,
                cipher: c.clone(),
                min_len,
                max_len,
            },
            (None, Some(shift)) => ToyPairSpec::shifted(&alphabet, shift, min_len, max_len),
            (None, None) if self.alphabet.is_none() => ToyPairSpec { min_len, max_len, ..d },
            (None, None) => {
                return Err(Error::Config("a custom alphabet needs either cipher or shift".into()));
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Preset with overrides. The image size follows the render settings
    /// when those are given.
    pub fn model(&self) -> Result<ModelConfig> {
        let width = self.image_width.unwrap_or(320);
        let mut cfg = match self.preset.unwrap_or(Preset::Desk) {
            Preset::Desk => ModelConfig::desk(),
            Preset::Paper => ModelConfig::paper(width),
            Preset::Tiny => ModelConfig::tiny(),
        };
        if let Some(h) = self.image_height {
            cfg.image.image_height = h;
        }
        if let Some(w) = self.image_width {
            cfg.image.image_width = w;
        }
        if self.tps == Some(false) {
            cfg.image.tps = None;
        }
        if let Some(k) = self.seq_encoder {
            cfg.seq_encoder = k;
        }
        if let Some(p) = self.dropout {
            cfg.transformer.dropout = p;
        }
        if let Some(n) = self.max_src_len {
            cfg.max_src_len = n;
        }
        if let Some(n) = self.max_tgt_len {
            cfg.max_tgt_len = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training settings, starting from the toy schedule.
    pub fn train(&self) -> Result<TrainConfig> {
        let d = TrainConfig::toy();
        let weights = match self.lambda_mt {
            Some(l) => TaskWeights::with_mt(l)?,
            None => d.weights,
        };
        let cfg = TrainConfig {
            mode: self.mode.unwrap_or(d.mode),
            weights,
            batch_tit: self.batch_tit.unwrap_or(d.batch_tit),
            batch_mt: self.batch_mt.unwrap_or(d.batch_mt),
            batch_ocr: self.batch_ocr.unwrap_or(d.batch_ocr),
            lr: self.lr.unwrap_or(d.lr),
            warmup: self.warmup.unwrap_or(d.warmup),
            rounds: self.rounds.unwrap_or(d.rounds),
            label_smoothing: self.label_smoothing.unwrap_or(d.label_smoothing),
            clip_norm: self.clip_norm.unwrap_or(d.clip_norm),
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
            seed: self.seed.unwrap_or(d.seed),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn toy_task(&self) -> Result<ToyTaskConfig> {
        let d = ToyTaskConfig::default();
        Ok(ToyTaskConfig {
            toy: self.toy()?,
            n_train: self.n_train.unwrap_or(d.n_train),
            n_test: self.n_test.unwrap_or(d.n_test),
            n_mt: self.n_mt.unwrap_or(d.n_mt),
            render: self.render()?,
            seed: self.seed.unwrap_or(d.seed),
        })
    }

    pub fn seed_list(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![0, 1, 2])
    }
}

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub titkit: String,
    pub checkpoint_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            titkit: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: crate::checkpoint::VERSION,
        }
    }
}

/// Written next to the outputs of every artifact-producing command.
/// `argv` plus `config` is enough to rerun it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// The resolved flat configuration (flags over file).
    pub config: FlatConfig,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub versions: Versions,
    /// Files written, relative to the manifest's directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, config: &FlatConfig) -> Self {
        Self {
            command: command.to_string(),
            argv,
            config: config.clone(),
            config_hash: config.hash(),
            seed: config.seed,
            versions: Versions::default(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_prefers_higher() {
        let file = FlatConfig::from_toml("lr = 0.01\nrounds = 7").unwrap();
        let flags = FlatConfig {
            lr: Some(0.5),
            ..FlatConfig::default()
        };
        let merged = file.overlay(&flags);
        assert_eq!(merged.lr, Some(0.5));
        assert_eq!(merged.rounds, Some(7));
        assert_eq!(merged.train().unwrap().warmup, TrainConfig::toy().warmup);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(FlatConfig::from_toml("learning_rate = 1").is_err());
    }

    #[test]
    fn assignments() {
        assert_eq!(FlatConfig::from_assignment("mode=tit+mt").unwrap().mode, Some(Mode::TitMt));
        assert_eq!(FlatConfig::from_assignment("rounds = 3").unwrap().rounds, Some(3));
        assert_eq!(
            FlatConfig::from_assignment("backgrounds=[0,2]").unwrap().backgrounds,
            Some(vec![0, 2])
        );
        assert!(FlatConfig::from_assignment("rounds").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = FlatConfig::from_toml("lr = 0.01").unwrap();
        assert_eq!(a.hash(), FlatConfig::from_toml("lr = 0.01").unwrap().hash());
        assert_ne!(a.hash(), FlatConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn render_sizes_flow_into_model() {
        let c = FlatConfig::from_toml("image_width = 128").unwrap();
        assert_eq!(c.model().unwrap().image.image_width, 128);
        assert_eq!(c.render().unwrap().image_width, 128);
    }
}
