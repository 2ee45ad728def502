//! The single JSON document describing a training run.

use std::fs;
use std::path::{Path, PathBuf};

use mtjr_core::decode::DecodeConfig;
use mtjr_core::losses::LossConfig;
use mtjr_core::model::{ModelConfig, SharingConfig};
use mtjr_core::train::{AugmentConfig, Mode, NoamSchedule, TagPosition, TrainerConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    MonoAsr,
    MonoAr,
    Stjr,
    #[default]
    Mtjr,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub factor: f64,
    pub warmup_steps: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { factor: 1.0, warmup_steps: 400 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub mode: ModeName,
    /// Accent tag placement for `stjr`.
    #[serde(default)]
    pub tag_position: TagPosition,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub loss: LossConfig,
    /// Encoder layer feeding the accent branch; the top layer when absent.
    #[serde(default)]
    pub tap_layer: Option<usize>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Decoding used by evaluation (and by dev decoding when enabled).
    #[serde(default)]
    pub decode: DecodeConfig,
    /// Decode the dev set after every epoch instead of reporting accuracy only.
    #[serde(default)]
    pub dev_decode: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub train_data: PathBuf,
    #[serde(default)]
    pub dev_data: Option<PathBuf>,
    /// Split evaluated at the end of `sweep`; the dev set when absent.
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    /// Pretrained checkpoint to fine-tune from.
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    pub out_dir: PathBuf,
}

fn default_epochs() -> usize {
    10
}

fn default_batch_size() -> usize {
    16
}

fn default_clip_norm() -> f64 {
    5.0
}

fn default_seed() -> u64 {
    1
}

impl RunConfig {
    /// Parses and validates a config file. Relative paths inside it are
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.train_data);
        resolve(&mut cfg.out_dir);
        for p in [&mut cfg.dev_data, &mut cfg.test_data, &mut cfg.init_from].into_iter().flatten() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mode(&self) -> Mode {
        match self.mode {
            ModeName::MonoAsr => Mode::MonoAsr,
            ModeName::MonoAr => Mode::MonoAr,
            ModeName::Stjr => Mode::Stjr(self.tag_position),
            ModeName::Mtjr => Mode::Mtjr,
        }
    }

    pub fn trainer_config(&self) -> Result<TrainerConfig> {
        let cfg = TrainerConfig {
            mode: self.mode(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            loss: self.loss,
            sharing: match self.tap_layer {
                Some(tap) => SharingConfig::new(tap, &self.model)?,
                None => SharingConfig::full(&self.model),
            },
            schedule: NoamSchedule {
                factor: self.schedule.factor,
                warmup_steps: self.schedule.warmup_steps,
                d_model: self.model.d_model,
            },
            clip_norm: self.clip_norm,
            augment: self.augment.clone(),
            dev_decode: self.dev_decode.then_some(self.decode),
            seed: self.seed,
        };
        cfg.validate(&self.model)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.decode.validate()?;
        self.trainer_config()?;
        if self.dev_decode && self.dev_data.is_none() {
            return Err(Error::Config("dev_decode needs dev_data".into()));
        }
        Ok(())
    }

    /// Settings the chosen mode does not use, for warning the operator.
    pub fn ignored_fields(&self) -> Vec<&'static str> {
        let defaults = LossConfig::default();
        let mut ignored = Vec::new();
        if !self.mode().trains_accent_head() {
            if self.loss.lambda != defaults.lambda {
                ignored.push("loss.lambda");
            }
            if self.tap_layer.is_some() {
                ignored.push("tap_layer");
            }
        }
        if !self.mode().trains_asr() {
            if self.loss.gamma != defaults.gamma {
                ignored.push("loss.gamma");
            }
            if self.loss.label_smoothing != defaults.label_smoothing {
                ignored.push("loss.label_smoothing");
            }
        }
        if !matches!(self.mode, ModeName::Stjr) && self.tag_position != TagPosition::default() {
            ignored.push("tag_position");
        }
        ignored
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("run.json");
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn minimal_config_takes_defaults_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(&write(dir.path(), r#"{"train_data": "data/train", "out_dir": "out"}"#)).unwrap();
        assert_eq!(cfg.mode(), Mode::Mtjr);
        assert_eq!(cfg.loss.lambda, 0.1);
        assert_eq!(cfg.train_data, dir.path().join("data/train"));
        let t = cfg.trainer_config().unwrap();
        assert_eq!(t.sharing.tap_layer, cfg.model.enc_layers);
        assert_eq!(t.schedule.d_model, cfg.model.d_model);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let dir = tempfile::tempdir().unwrap();
        for text in [
            r#"{"train_data": "t", "out_dir": "o", "lamda": 0.1}"#,
            r#"{"train_data": "t", "out_dir": "o", "loss": {"lamda": 0.1}}"#,
            r#"{"train_data": "t", "out_dir": "o", "model": {"layers": 3}}"#,
        ] {
            assert!(matches!(RunConfig::load(&write(dir.path(), text)), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        for text in [
            r#"{"train_data": "t", "out_dir": "o", "tap_layer": 9}"#,
            r#"{"train_data": "t", "out_dir": "o", "loss": {"gamma": 1.5}}"#,
            r#"{"train_data": "t", "out_dir": "o", "batch_size": 0}"#,
            r#"{"train_data": "t", "out_dir": "o", "dev_decode": true}"#,
        ] {
            let err = RunConfig::load(&write(dir.path(), text)).unwrap_err();
            assert_eq!(err.exit_code(), crate::ExitCode::Config, "{text}: {err}");
        }
    }

    #[test]
    fn mono_asr_reports_accent_settings_as_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let text =
            r#"{"train_data": "t", "out_dir": "o", "mode": "mono_asr", "loss": {"lambda": 0.5}, "tap_layer": 2}"#;
        let cfg = RunConfig::load(&write(dir.path(), text)).unwrap();
        assert_eq!(cfg.ignored_fields(), vec!["loss.lambda", "tap_layer"]);
    }
}
