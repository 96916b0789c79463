//! Run configuration: one TOML file with sections per subsystem, CLI flags
//! overriding file values, and a resolved manifest emitted by every run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flowgen_tensor::OptimizerConfig;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::{FragmentSamplingConfig, LengthDist, NoiseConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub lowercase: bool,
    pub paths: PathsSection,
    pub model: ModelSection,
    pub fragments: FragmentsSection,
    pub noise: NoiseSection,
    pub optimizer: OptimizerSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            lowercase: true,
            paths: PathsSection::default(),
            model: ModelSection::default(),
            fragments: FragmentsSection::default(),
            noise: NoiseSection::default(),
            optimizer: OptimizerSection::default(),
            train: TrainSection::default(),
            decode: DecodeSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub span_vocab: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub lambda: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 2,
            hidden: 64,
            heads: 2,
            ffn: 256,
            max_positions: 64,
            dropout: 0.1,
            lambda: 0.5,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn: self.ffn,
            vocab_size,
            max_positions: self.max_positions,
            dropout: self.dropout,
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DistSection {
    pub low: usize,
    pub high: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FragmentsSection {
    pub gamma: f64,
    pub distributions: Vec<DistSection>,
}

impl Default for FragmentsSection {
    fn default() -> Self {
        FragmentsSection {
            gamma: 0.25,
            distributions: vec![
                DistSection { low: 1, high: 4, prob: 0.4 },
                DistSection { low: 4, high: 32, prob: 0.6 },
            ],
        }
    }
}

impl FragmentsSection {
    pub fn to_config(&self, seed: u64) -> FragmentSamplingConfig {
        FragmentSamplingConfig {
            gamma: self.gamma,
            distributions: self
                .distributions
                .iter()
                .map(|d| LengthDist {
                    low: d.low,
                    high: d.high,
                    prob: d.prob,
                })
                .collect(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub rate: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection { rate: 0.05 }
    }
}

impl NoiseSection {
    pub fn to_config(&self, seed: u64, vocab_size: u32) -> NoiseConfig {
        NoiseConfig {
            rate: self.rate,
            seed,
            vocab_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub peak_lr: f64,
    /// Exactly one of `warmup_steps` / `warmup_ratio` may be set; a ratio
    /// converts to `round(ratio * total_steps)`.
    pub warmup_steps: Option<u64>,
    pub warmup_ratio: Option<f64>,
    pub total_steps: u64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-9,
            peak_lr: 5e-5,
            warmup_steps: Some(4000),
            warmup_ratio: None,
            total_steps: 400_000,
        }
    }
}

impl OptimizerSection {
    pub fn to_config(&self) -> Result<OptimizerConfig> {
        let warmup_steps = match (self.warmup_steps, self.warmup_ratio) {
            (Some(_), Some(_)) => {
                return Err(Error::usage(
                    "set either optimizer.warmup_steps or optimizer.warmup_ratio, not both",
                ))
            }
            (Some(s), None) => s,
            (None, Some(r)) => {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::usage(format!("warmup_ratio {r} outside [0, 1]")));
                }
                (r * self.total_steps as f64).round() as u64
            }
            (None, None) => 0,
        };
        let config = OptimizerConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            peak_lr: self.peak_lr,
            warmup_steps,
            total_steps: self.total_steps,
        };
        config.validate().map_err(Error::Tensor)?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Random word replacement at `noise.rate`; loss at all target positions.
    Noising,
    /// `[MASK]` replacement at `train.mask_prob`; loss only at masked positions.
    Masking,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    /// Padded-token budget per batch.
    pub batch_tokens: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// 0 disables validation snapshots.
    pub eval_every: u64,
    pub eval_examples: usize,
    /// Corpus format: `source<TAB>target` pairs vs. one document per line.
    pub paired: bool,
    pub finetune_mode: FinetuneMode,
    pub mask_prob: f64,
    /// Token truncation applied when encoding corpus lines.
    pub max_len: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 1000,
            batch_tokens: 512,
            checkpoint_every: 500,
            log_every: 50,
            eval_every: 0,
            eval_examples: 64,
            paired: false,
            finetune_mode: FinetuneMode::Noising,
            mask_prob: 0.7,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub beam: usize,
    pub alpha: f64,
    pub max_len: usize,
    pub min_len: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            beam: 1,
            alpha: 0.0,
            max_len: 32,
            min_len: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn require_path(&self, field: &str) -> Result<&Path> {
        let slot = match field {
            "corpus" => &self.paths.corpus,
            "vocab" => &self.paths.vocab,
            "span_vocab" => &self.paths.span_vocab,
            "checkpoint_dir" => &self.paths.checkpoint_dir,
            "init_checkpoint" => &self.paths.init_checkpoint,
            "input" => &self.paths.input,
            "output" => &self.paths.output,
            "valid" => &self.paths.valid,
            _ => return Err(Error::usage(format!("unknown path field {field}"))),
        };
        slot.as_deref()
            .ok_or_else(|| Error::usage(format!("config is missing paths.{field}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn warmup_ratio_converts_to_steps() {
        let sec = OptimizerSection {
            warmup_steps: None,
            warmup_ratio: Some(0.1),
            total_steps: 2000,
            ..Default::default()
        };
        assert_eq!(sec.to_config().unwrap().warmup_steps, 200);
        let both = OptimizerSection {
            warmup_steps: Some(5),
            warmup_ratio: Some(0.1),
            ..Default::default()
        };
        assert!(both.to_config().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "seed = 1\n[modell]\nlayers = 2\n";
        assert!(toml::from_str::<RunConfig>(text).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let text = "seed = 7\n[model]\nlayers = 1\n";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.layers, 1);
        assert_eq!(cfg.model.hidden, 64);
        assert_eq!(cfg.noise.rate, 0.05);
        assert_eq!(cfg.fragments.gamma, 0.25);
    }
}
