//! Black-box distillation data: a controller drives expansion, response
//! generation, rewriting, verification, scoring and selection agents over a
//! pluggable text-generation backend.

mod agents;
mod backend;
pub mod http;
pub mod mock;
mod pipeline;
pub mod prompts;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, TaskCategory};

pub use agents::{select, Agents, ExpandOutcome};
pub use backend::{backend_complete, Backend, BackendError, BackendRequest};
pub use http::{HttpBackend, RetryPolicy};
pub use mock::{MockBackend, MockConfig, MOCK_COT_MARKER};
pub use pipeline::{run_pipeline, PipelineReport, RecordIssue};

/// Reason attached to verdicts whose judge reply could not be parsed.
pub const JUDGE_PARSE_FAILURE: &str = "judge-parse-failure";

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("record {id}: backend call failed")]
    Backend {
        id: u64,
        #[source]
        source: BackendError,
    },
    #[error("record {id}: {message}")]
    Precondition { id: u64, message: String },
    #[error("record {id}: unusable {agent} reply: {message}")]
    BadReply {
        id: u64,
        agent: &'static str,
        message: String,
    },
    #[error("invalid pipeline plan: {0}")]
    BadPlan(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub reason: String,
}

impl Verdict {
    pub fn pass() -> Self {
        Self {
            pass: true,
            reason: String::new(),
        }
    }

    /// A failing verdict; an empty reason is replaced by a generic one.
    pub fn fail(reason: impl Into<String>) -> Self {
        let reason = reason.into();
        Self {
            pass: false,
            reason: if reason.trim().is_empty() {
                "rejected without reason".into()
            } else {
                reason
            },
        }
    }
}

fn default_cot() -> BTreeSet<TaskCategory> {
    [TaskCategory::Reasoning, TaskCategory::Mathematics, TaskCategory::Coding].into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelinePlan {
    pub expansions_per_seed: usize,
    pub rewrite_enabled: bool,
    pub cot_categories: BTreeSet<TaskCategory>,
    pub selection_threshold: f64,
    pub target_size: usize,
    pub per_category_cap: usize,
    /// Extra expansion attempts allowed beyond `expansions_per_seed` when variants collide.
    pub expansion_retry_budget: usize,
    pub parallelism: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl Default for PipelinePlan {
    fn default() -> Self {
        Self::with_target(1000)
    }
}

impl PipelinePlan {
    /// Defaults with the per-category cap set to `ceil(target / 9)`.
    pub fn with_target(target_size: usize) -> Self {
        Self {
            expansions_per_seed: 2,
            rewrite_enabled: true,
            cot_categories: default_cot(),
            selection_threshold: 6.0,
            target_size,
            per_category_cap: target_size.div_ceil(TaskCategory::ALL.len()).max(1),
            expansion_retry_budget: 4,
            parallelism: 4,
            temperature: 0.7,
            max_tokens: 1024,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::BadPlan(m));
        if self.target_size == 0 {
            return bad("target_size must be positive".into());
        }
        if self.per_category_cap == 0 {
            return bad("per_category_cap must be positive".into());
        }
        if self.per_category_cap * TaskCategory::ALL.len() < self.target_size {
            return bad(format!(
                "per_category_cap {} x {} categories cannot reach target_size {}",
                self.per_category_cap,
                TaskCategory::ALL.len(),
                self.target_size
            ));
        }
        if !(1.0..=10.0).contains(&self.selection_threshold) {
            return bad(format!(
                "selection_threshold {} outside [1, 10]",
                self.selection_threshold
            ));
        }
        if self.parallelism == 0 {
            return bad("parallelism must be positive".into());
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be non-negative", self.temperature));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_defaults_and_validation() {
        let p = PipelinePlan::with_target(20);
        assert_eq!(p.per_category_cap, 3);
        assert!(p.validate().is_ok());
        let mut q = p.clone();
        q.per_category_cap = 2;
        assert!(q.validate().is_err());
        let mut q = p.clone();
        q.selection_threshold = 0.5;
        assert!(q.validate().is_err());
    }

    #[test]
    fn failing_verdict_has_reason() {
        assert_eq!(Verdict::fail("").reason, "rejected without reason");
        assert!(Verdict::pass().pass);
    }
}
