use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::{Combinator, Mode, TrainConfig};
use crate::rationale_lm::LmConfig;

/// Step size used by the runner unless overridden. Models here start from
/// random weights and train for a few thousand steps.
pub const DESK_LR: f64 = 1e-3;

/// Where records come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated in memory from a master seed.
    Synthetic {
        n_train: usize,
        n_val: usize,
        master_seed: u64,
    },
    /// A directory written by `gen-data`.
    Files { dir: PathBuf },
    /// VCR-style JSONL files; features from a sidecar directory or hashed.
    Vcr {
        train: PathBuf,
        val: PathBuf,
        #[serde(default)]
        features: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub d_lm: usize,
    #[serde(rename = "L_lm")]
    pub layers_lm: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d: 64,
            layers: 2,
            d_lm: 64,
            layers_lm: 2,
        }
    }
}

impl ModelDims {
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d,
            layers: self.layers,
            ffn_hidden: 2 * self.d,
            ..EncoderConfig::new(vocab_size)
        }
    }

    pub fn lm_config(&self, vocab_size: usize, d_in: usize) -> LmConfig {
        LmConfig {
            d_model: self.d_lm,
            layers: self.layers_lm,
            ffn_hidden: 2 * self.d_lm,
            ..LmConfig::new(vocab_size, d_in)
        }
    }
}

/// Everything a run needs. Serialized as the optional `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub combinator: Combinator,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub detach_answer_loss: bool,
    pub dataset: DatasetSpec,
    pub out_dir: PathBuf,
    pub model: ModelDims,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ExperimentConfig {
            mode: t.mode,
            combinator: t.combinator,
            batch_size: t.batch_size,
            lr: DESK_LR,
            epochs: t.epochs,
            seed: t.seed,
            clip_norm: t.clip_norm,
            detach_answer_loss: t.detach_answer_loss,
            dataset: DatasetSpec::Synthetic {
                n_train: 2000,
                n_val: 500,
                master_seed: 0,
            },
            out_dir: PathBuf::from("out"),
            model: ModelDims::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            combinator: self.combinator,
            batch_size: self.batch_size,
            lr: self.lr,
            epochs: self.epochs,
            seed: self.seed,
            clip_norm: self.clip_norm,
            detach_answer_loss: self.detach_answer_loss,
        }
    }

    pub fn render(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }
}

/// Parses `lambda=3`, `var`, `kldiv` or `kldiv=10` (β defaults to 1).
pub fn parse_loss(s: &str) -> std::result::Result<Combinator, String> {
    let c = match s.split_once('=') {
        None if s == "var" || s == "uncertainty" => Combinator::Uncertainty,
        None if s == "kldiv" => Combinator::Kldiv { beta: 1.0 },
        Some(("lambda", v)) => Combinator::Weighted {
            lambda: v.parse().map_err(|_| format!("bad lambda {v:?}"))?,
        },
        Some(("kldiv", v)) => Combinator::Kldiv {
            beta: v.parse().map_err(|_| format!("bad beta {v:?}"))?,
        },
        _ => {
            return Err(format!(
                "unknown loss {s:?}; expected lambda=<x>, var or kldiv[=<beta>]"
            ))
        }
    };
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}
