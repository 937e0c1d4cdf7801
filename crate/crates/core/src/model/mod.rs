//! Small decoder-only language model used as both toy teacher and student.
//!
//! Everything runs in `f64` on the CPU so analytic gradients can be checked
//! against finite differences; checkpoints store `f32`.

mod adam;
mod checkpoint;
mod loss;
pub mod params;
mod transformer;

use std::io;
use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kdcore::KdError;

pub use adam::{adam_update, optimizer_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{ce_loss_and_grads, dataset_loss, kd_loss_and_grads, LossBreakdown};
pub use params::Params;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("sequence needs {needed} positions but context length is {context}")]
    ContextOverflow { needed: usize, context: usize },
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    InvalidToken { id: u32, vocab_size: usize },
    #[error("example {sample_id} has an empty input")]
    EmptyInput { sample_id: u64 },
    #[error("example {sample_id} has an empty target")]
    EmptyTarget { sample_id: u64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("gradient shapes do not match the model parameters")]
    ShapeMismatch,
    #[error("non-finite gradient in {tensor}; step rejected")]
    NonFiniteGradient { tensor: String },
    #[error("no teacher records for sample {sample_id}")]
    MissingTeacher { sample_id: u64 },
    #[error("sample {sample_id}: {found} teacher records for {expected} target positions")]
    TeacherLengthMismatch {
        sample_id: u64,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Kd(#[from] KdError),
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn student_default() -> Self {
        Self {
            vocab_size: 512,
            context_length: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            seed: 42,
        }
    }

    pub fn teacher_default() -> Self {
        Self {
            vocab_size: 512,
            context_length: 64,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            seed: 42,
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.to_string()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.context_length < 2 {
            return bad("context_length must be at least 2");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("d_model, n_heads and n_layers must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size > u32::MAX as usize {
            return bad("vocab_size must fit in 32 bits");
        }
        Ok(())
    }
}

/// Input `x` and target `y`; the model predicts `y[n]` from `x` and `y[..n]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrainingExample {
    pub sample_id: u64,
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

impl TrainingExample {
    pub fn new(sample_id: u64, input: Vec<u32>, target: Vec<u32>) -> Self {
        Self {
            sample_id,
            input,
            target,
        }
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    /// Tokens fed to the decoder: `x` followed by all but the last target.
    fn decoder_tokens(&self) -> Vec<u32> {
        let mut t = self.input.clone();
        t.extend_from_slice(&self.target[..self.target.len() - 1]);
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    config: ModelConfig,
    pub params: Params,
    step: u64,
}

impl StudentModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            params: Params::init(&config),
            config,
            step: 0,
        })
    }

    pub fn from_parts(config: ModelConfig, params: Params, step: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if !Params::zeros(&config).same_shapes(&params) {
            return Err(ModelError::ShapeMismatch);
        }
        Ok(Self { config, params, step })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn check_example(&self, ex: &TrainingExample) -> Result<(), ModelError> {
        if ex.input.is_empty() {
            return Err(ModelError::EmptyInput {
                sample_id: ex.sample_id,
            });
        }
        if ex.target.is_empty() {
            return Err(ModelError::EmptyTarget {
                sample_id: ex.sample_id,
            });
        }
        let needed = ex.input.len() + ex.target.len();
        if needed > self.config.context_length {
            return Err(ModelError::ContextOverflow {
                needed,
                context: self.config.context_length,
            });
        }
        let v = self.config.vocab_size;
        if let Some(&id) = ex.input.iter().chain(&ex.target).find(|&&id| id as usize >= v) {
            return Err(ModelError::InvalidToken { id, vocab_size: v });
        }
        Ok(())
    }

    /// Next-token logits for each of the `L` target positions, shape `[L, V]`.
    pub fn forward_logits(&self, ex: &TrainingExample) -> Result<Array2<f64>, ModelError> {
        self.check_example(ex)?;
        let tokens = ex.decoder_tokens();
        let (logits, _) = transformer::forward(&self.params, &self.config, &tokens, ex.input.len() - 1);
        Ok(logits)
    }

    /// Greedy continuation of `prompt`, stopping at `max_new` tokens or the context limit.
    pub fn generate_greedy(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyInput { sample_id: 0 });
        }
        let mut tokens = prompt.to_vec();
        for _ in 0..max_new {
            if tokens.len() >= self.config.context_length {
                break;
            }
            let (logits, _) = transformer::forward(&self.params, &self.config, &tokens, tokens.len() - 1);
            let row = logits.row(0);
            let next = row
                .iter()
                .enumerate()
                .fold(
                    (0usize, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0;
            tokens.push(next as u32);
        }
        Ok(tokens[prompt.len()..].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            context_length: 12,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::student_default().validate().is_ok());
        assert!(ModelConfig::teacher_default().validate().is_ok());
        let mut c = micro_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = micro_config();
        c.context_length = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let m = StudentModel::new(micro_config()).unwrap();
        let ex = TrainingExample::new(1, vec![1, 2, 3], vec![4, 5]);
        let a = m.forward_logits(&ex).unwrap();
        let b = m.forward_logits(&ex).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 8]);
        let one = TrainingExample::new(1, vec![1], vec![4]);
        assert_eq!(m.forward_logits(&one).unwrap().shape(), &[1, 8]);
    }

    #[test]
    fn causal_masking() {
        let m = StudentModel::new(micro_config()).unwrap();
        let ex = TrainingExample::new(1, vec![1, 2], vec![3, 4, 5, 6]);
        let base = m.forward_logits(&ex).unwrap();
        for n in 0..ex.target.len() {
            let mut p = ex.clone();
            p.target[n] = (p.target[n] + 1) % 8;
            let pert = m.forward_logits(&p).unwrap();
            for pos in 0..=n {
                assert_eq!(base.row(pos), pert.row(pos), "position {pos} moved when y[{n}] changed");
            }
            if n + 1 < ex.target.len() {
                assert_ne!(base.row(n + 1), pert.row(n + 1));
            }
        }
    }

    #[test]
    fn example_checks() {
        let m = StudentModel::new(micro_config()).unwrap();
        assert!(matches!(
            m.forward_logits(&TrainingExample::new(1, vec![1; 8], vec![1; 5])),
            Err(ModelError::ContextOverflow {
                needed: 13,
                context: 12
            })
        ));
        assert!(matches!(
            m.forward_logits(&TrainingExample::new(1, vec![9], vec![1])),
            Err(ModelError::InvalidToken { id: 9, .. })
        ));
        assert!(matches!(
            m.forward_logits(&TrainingExample::new(1, vec![1], vec![])),
            Err(ModelError::EmptyTarget { .. })
        ));
        assert!(matches!(
            m.forward_logits(&TrainingExample::new(1, vec![], vec![1])),
            Err(ModelError::EmptyInput { .. })
        ));
    }

    #[test]
    fn greedy_generation_respects_context() {
        let m = StudentModel::new(micro_config()).unwrap();
        let out = m.generate_greedy(&[1, 2], 100).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(out, m.generate_greedy(&[1, 2], 100).unwrap());
    }
}
