//! The shared-parameter transformer with contextual, word-by-word, and
//! span-by-span attention flows.

pub mod forward;
pub mod masks;

use std::collections::HashMap;

use flowgen_tensor::graph::{Graph, NodeId};
use flowgen_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed::{derive_seed, stream};

pub use forward::{ForwardOptions, ForwardOutput, LossBreakdown, Model};
pub use masks::{build_masks, render_mask_grid, FlowMasks};

/// Transformer shape and training-mix hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    /// Loss mix: `total = lambda * word + (1 - lambda) * span`.
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale default; larger shapes stay expressible via config.
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 2,
            ffn: 256,
            vocab_size: 64,
            max_positions: 64,
            dropout: 0.1,
            lambda: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::usage(format!(
                "hidden size {} must be divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::usage(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::usage(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.vocab_size <= crate::vocab::NUM_RESERVED as usize {
            return Err(Error::usage("vocab size must exceed the reserved symbols"));
        }
        if self.max_positions == 0 {
            return Err(Error::usage("max positions must be positive"));
        }
        Ok(())
    }

    /// Expected parameter names and shapes, in canonical order.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden;
        let f = self.ffn;
        let mut specs = vec![
            ("embed.token".to_string(), vec![self.vocab_size, h]),
            ("embed.pos".to_string(), vec![self.max_positions, h]),
            ("embed.seg".to_string(), vec![2, h]),
        ];
        for l in 0..self.layers {
            for (suffix, shape) in [
                ("ln1.gain", vec![1, h]),
                ("ln1.bias", vec![1, h]),
                ("attn.wq", vec![h, h]),
                ("attn.bq", vec![1, h]),
                ("attn.wk", vec![h, h]),
                ("attn.bk", vec![1, h]),
                ("attn.wv", vec![h, h]),
                ("attn.bv", vec![1, h]),
                ("attn.wo", vec![h, h]),
                ("attn.bo", vec![1, h]),
                ("ln2.gain", vec![1, h]),
                ("ln2.bias", vec![1, h]),
                ("ffn.w1", vec![h, f]),
                ("ffn.b1", vec![1, f]),
                ("ffn.w2", vec![f, h]),
                ("ffn.b2", vec![1, h]),
            ] {
                specs.push((format!("layer{l}.{suffix}"), shape));
            }
        }
        specs.push(("final_ln.gain".to_string(), vec![1, h]));
        specs.push(("final_ln.bias".to_string(), vec![1, h]));
        specs
    }
}

/// Named parameter store with a stable iteration order. The output
/// projection is tied to `embed.token`, so every parameter is shared by all
/// flows.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Random initialization: N(0, 0.02) weights and embeddings, zero
    /// biases, unit layer-norm gains. Deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::INIT, 0, 0));
        let specs = config.parameter_specs();
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape) in &specs {
            let numel: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or(name);
            let data = if leaf == "gain" {
                vec![1.0; numel]
            } else if leaf.starts_with('b') {
                // bias / bq / bk / bv / bo / b1 / b2
                vec![0.0; numel]
            } else {
                (0..numel).map(|_| 0.02 * gaussian(&mut rng)).collect()
            };
            tensors.push(Tensor::from_vec(shape.clone(), data)?);
        }
        let names: Vec<String> = specs.into_iter().map(|(n, _)| n).collect();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(ModelParams {
            config,
            names,
            tensors,
            index,
        })
    }

    /// Rebuild from checkpoint entries, verifying names and shapes.
    pub fn from_entries(config: ModelConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = config.parameter_specs();
        let by_name: HashMap<String, Tensor> = entries.into_iter().collect();
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape) in &specs {
            let t = by_name
                .get(name)
                .ok_or_else(|| Error::data(format!("checkpoint missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::data(format!(
                    "parameter {name}: checkpoint shape {:?} != configured {:?}",
                    t.shape(),
                    shape
                )));
            }
            tensors.push(t.clone());
        }
        let names: Vec<String> = specs.into_iter().map(|(n, _)| n).collect();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(ModelParams {
            config,
            names,
            tensors,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Insert every parameter into a graph as a leaf.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> ParamBindings {
        let nodes = self
            .tensors
            .iter()
            .map(|t| graph.leaf(t.clone(), trainable))
            .collect();
        ParamBindings { nodes }
    }
}

/// Graph leaf ids for every parameter, ordered as in [`ModelParams`].
pub struct ParamBindings {
    pub nodes: Vec<NodeId>,
}

impl ParamBindings {
    pub fn node(&self, params: &ModelParams, name: &str) -> NodeId {
        self.nodes[params.position(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }
}

/// Standard normal via Box-Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_rules() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            hidden: 10,
            heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            lambda: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn: 16,
            vocab_size: 12,
            max_positions: 10,
            dropout: 0.0,
            lambda: 0.5,
        };
        let a = ModelParams::init(cfg.clone(), 7).unwrap();
        let b = ModelParams::init(cfg.clone(), 7).unwrap();
        for ((na, ta), (nb, tb)) in a.entries().zip(b.entries()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
        let c = ModelParams::init(cfg.clone(), 8).unwrap();
        assert_ne!(a.get("embed.token"), c.get("embed.token"));
        assert_eq!(a.get("embed.token").unwrap().shape(), &[12, 8]);
        assert_eq!(a.get("layer0.ffn.w1").unwrap().shape(), &[8, 16]);
        assert_eq!(a.get("layer0.ln1.gain").unwrap().data(), &[1.0; 8]);
        assert_eq!(a.get("layer0.attn.bq").unwrap().data(), &[0.0; 8]);
    }

    #[test]
    fn from_entries_round_trip_and_validation() {
        let cfg = ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn: 16,
            vocab_size: 12,
            max_positions: 10,
            dropout: 0.0,
            lambda: 0.5,
        };
        let params = ModelParams::init(cfg.clone(), 3).unwrap();
        let entries: Vec<(String, Tensor)> = params
            .entries()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let rebuilt = ModelParams::from_entries(cfg.clone(), entries.clone()).unwrap();
        assert_eq!(rebuilt.get("embed.pos"), params.get("embed.pos"));

        let mut missing = entries.clone();
        missing.pop();
        assert!(ModelParams::from_entries(cfg.clone(), missing).is_err());

        let mut wrong = entries;
        wrong[0].1 = Tensor::zeros(vec![3, 3]);
        assert!(ModelParams::from_entries(cfg, wrong).is_err());
    }
}
