//! Run configuration as flat `key = value` text. Lines starting with `#` are
//! comments. `preset` is applied first; every other key overrides it.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {key:?}")]
    UnknownKey { key: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{key} must be positive, got {value}")]
    NonPositive { key: String, value: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err("expected desk or paper".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Label embedding size `e`.
    pub embed_dim: usize,
    /// Unified node representation size `u`.
    pub unified_dim: usize,
    /// Bilinear pooling window `k`.
    pub mfb_k: usize,
    /// Recurrent hidden size `m`.
    pub hidden_dim: usize,
    pub word_dim: usize,
    /// Width of additive attention and region self-attention projections.
    pub att_dim: usize,
    /// Maximum generated sentence length in words.
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub n_heldout: usize,
    pub clips_per_video: usize,
    /// Sampled frames per clip `Q`.
    pub frames: usize,
    /// Region proposals per clip `N`.
    pub regions: usize,
    /// Region and frame feature size.
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub n_objects: usize,
    pub n_attributes: usize,
    pub n_relations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda_m: f64,
    pub lambda_l: f64,
    pub lambda_r: f64,
    pub clip_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

const KEYS: &[&str] = &[
    "preset",
    "seed",
    "embed_dim",
    "unified_dim",
    "mfb_k",
    "hidden_dim",
    "word_dim",
    "att_dim",
    "max_len",
    "n_videos",
    "n_heldout",
    "clips_per_video",
    "frames",
    "regions",
    "feature_dim",
    "noise_sigma",
    "n_objects",
    "n_attributes",
    "n_relations",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "pretrain_epochs",
    "max_epochs",
    "patience",
    "lambda_m",
    "lambda_l",
    "lambda_r",
    "clip_norm",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

/// Signed parse so that `-3` reports as non-positive rather than unparsable.
fn positive_usize(key: &str, value: &str) -> Result<usize, ConfigError> {
    let v: i64 = parse_num(key, value)?;
    if v <= 0 {
        return Err(ConfigError::NonPositive {
            key: key.into(),
            value: value.into(),
        });
    }
    Ok(v as usize)
}

fn positive_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse_num(key, value)?;
    if !(v > 0.0) || !v.is_finite() {
        return Err(ConfigError::NonPositive {
            key: key.into(),
            value: value.into(),
        });
    }
    Ok(v)
}

fn nonnegative_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse_num(key, value)?;
    if !(v >= 0.0) || !v.is_finite() {
        return Err(ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            reason: "must be a finite non-negative number".into(),
        });
    }
    Ok(v)
}

fn nonnegative_usize(key: &str, value: &str) -> Result<usize, ConfigError> {
    let v: i64 = parse_num(key, value)?;
    if v < 0 {
        return Err(ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            reason: "must be non-negative".into(),
        });
    }
    Ok(v as usize)
}

fn unit_interval(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse_num(key, value)?;
    if !(0.0..1.0).contains(&v) {
        return Err(ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            reason: "must lie in [0, 1)".into(),
        });
    }
    Ok(v)
}

impl Config {
    /// Single-core preset: sizes 32/64, batch 8, learning rate 1e-3, at most
    /// 300 epochs over both training phases.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            seed: 0,
            model: ModelConfig {
                embed_dim: 32,
                unified_dim: 32,
                mfb_k: 5,
                hidden_dim: 64,
                word_dim: 32,
                att_dim: 32,
                max_len: 20,
            },
            synth: SynthConfig {
                n_videos: 20,
                n_heldout: 20,
                clips_per_video: 3,
                frames: 2,
                regions: 8,
                feature_dim: 16,
                noise_sigma: 0.1,
                n_objects: 8,
                n_attributes: 6,
                n_relations: 6,
            },
            train: TrainConfig {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                batch_size: 8,
                pretrain_epochs: 100,
                max_epochs: 200,
                patience: 10,
                lambda_m: 1.0,
                lambda_l: 1.0,
                lambda_r: 1.0,
                clip_norm: 5.0,
            },
        }
    }

    /// Published full-scale settings.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = Preset::Paper;
        c.model.embed_dim = 1000;
        c.model.unified_dim = 1000;
        c.model.hidden_dim = 1024;
        c.model.word_dim = 512;
        c.model.att_dim = 512;
        c.train.lr = 1.25e-4;
        c.train.batch_size = 64;
        c.train.pretrain_epochs = 40;
        c.train.max_epochs = 40;
        c
    }

    pub fn for_preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((k, v)) => Self::for_preset(
                v.parse().map_err(|reason| ConfigError::InvalidValue {
                    key: k.clone(),
                    value: v.clone(),
                    reason,
                })?,
            ),
            None => Self::desk(),
        };
        for (k, v) in &pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let s = &mut self.synth;
        let t = &mut self.train;
        match key {
            "preset" => {
                let p: Preset = value.parse().map_err(|reason| ConfigError::InvalidValue {
                    key: key.into(),
                    value: value.into(),
                    reason,
                })?;
                let seed = self.seed;
                *self = Self::for_preset(p);
                self.seed = seed;
            }
            "seed" => self.seed = parse_num(key, value)?,
            "embed_dim" => m.embed_dim = positive_usize(key, value)?,
            "unified_dim" => m.unified_dim = positive_usize(key, value)?,
            "mfb_k" => m.mfb_k = positive_usize(key, value)?,
            "hidden_dim" => m.hidden_dim = positive_usize(key, value)?,
            "word_dim" => m.word_dim = positive_usize(key, value)?,
            "att_dim" => m.att_dim = positive_usize(key, value)?,
            "max_len" => m.max_len = positive_usize(key, value)?,
            "n_videos" => s.n_videos = positive_usize(key, value)?,
            "n_heldout" => s.n_heldout = nonnegative_usize(key, value)?,
            "clips_per_video" => s.clips_per_video = positive_usize(key, value)?,
            "frames" => s.frames = positive_usize(key, value)?,
            "regions" => s.regions = positive_usize(key, value)?,
            "feature_dim" => s.feature_dim = positive_usize(key, value)?,
            "noise_sigma" => s.noise_sigma = nonnegative_f64(key, value)?,
            "n_objects" => s.n_objects = positive_usize(key, value)?,
            "n_attributes" => s.n_attributes = positive_usize(key, value)?,
            "n_relations" => s.n_relations = positive_usize(key, value)?,
            "lr" => t.lr = nonnegative_f64(key, value)?,
            "beta1" => t.beta1 = unit_interval(key, value)?,
            "beta2" => t.beta2 = unit_interval(key, value)?,
            "adam_eps" => t.adam_eps = positive_f64(key, value)?,
            "batch_size" => t.batch_size = positive_usize(key, value)?,
            "pretrain_epochs" => t.pretrain_epochs = nonnegative_usize(key, value)?,
            "max_epochs" => t.max_epochs = nonnegative_usize(key, value)?,
            "patience" => t.patience = positive_usize(key, value)?,
            "lambda_m" => t.lambda_m = nonnegative_f64(key, value)?,
            "lambda_l" => t.lambda_l = nonnegative_f64(key, value)?,
            "lambda_r" => t.lambda_r = nonnegative_f64(key, value)?,
            "clip_norm" => t.clip_norm = positive_f64(key, value)?,
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    /// Cross-key checks that single-key parsing cannot catch.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.synth.regions < 4 {
            return Err(ConfigError::InvalidValue {
                key: "regions".into(),
                value: self.synth.regions.to_string(),
                reason: "synthetic clips need at least 4 region proposals".into(),
            });
        }
        if self.synth.n_objects < 4 {
            return Err(ConfigError::InvalidValue {
                key: "n_objects".into(),
                value: self.synth.n_objects.to_string(),
                reason: "synthetic clips need at least 4 object classes".into(),
            });
        }
        Ok(())
    }

    /// All keys, in a fixed order, with their current values.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("known key"));
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let s = &self.synth;
        let t = &self.train;
        Some(match key {
            "preset" => match self.preset {
                Preset::Desk => "desk".into(),
                Preset::Paper => "paper".into(),
            },
            "seed" => self.seed.to_string(),
            "embed_dim" => m.embed_dim.to_string(),
            "unified_dim" => m.unified_dim.to_string(),
            "mfb_k" => m.mfb_k.to_string(),
            "hidden_dim" => m.hidden_dim.to_string(),
            "word_dim" => m.word_dim.to_string(),
            "att_dim" => m.att_dim.to_string(),
            "max_len" => m.max_len.to_string(),
            "n_videos" => s.n_videos.to_string(),
            "n_heldout" => s.n_heldout.to_string(),
            "clips_per_video" => s.clips_per_video.to_string(),
            "frames" => s.frames.to_string(),
            "regions" => s.regions.to_string(),
            "feature_dim" => s.feature_dim.to_string(),
            "noise_sigma" => s.noise_sigma.to_string(),
            "n_objects" => s.n_objects.to_string(),
            "n_attributes" => s.n_attributes.to_string(),
            "n_relations" => s.n_relations.to_string(),
            "lr" => t.lr.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "pretrain_epochs" => t.pretrain_epochs.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "patience" => t.patience.to_string(),
            "lambda_m" => t.lambda_m.to_string(),
            "lambda_l" => t.lambda_l.to_string(),
            "lambda_r" => t.lambda_r.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            _ => return None,
        })
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }
}
