//! Teacher top-K logits: extraction, the `.dqkd` shard format, and loading
//! shards back as per-sample distillation targets.

pub mod bench;
mod extraction;
pub mod format;
mod record;
mod targets;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::ModelError;
use crate::vocab::VocabError;

pub use extraction::{
    corpus_fingerprint, coverage_at, extract_sequences, load_shard_set, mass_coverage, run_extraction,
    ExtractionConfig, ExtractionOutput, ExtractionSummary, ShardPlan, ShardSet, SUMMARY_FILE,
};
pub use format::{
    decode_shard, encode_shard, encoded_len, read_shard, write_shard, ShardHeader, ShardSequence, TopKLogitShard,
};
pub use record::{extract_topk, TopKEntry, TopKLogitRecord};
pub use targets::TeacherTargets;

#[derive(Debug, Error)]
pub enum LogitStoreError {
    #[error("K={k} out of range for vocabulary of {vocab_size}")]
    KOutOfRange { k: usize, vocab_size: usize },
    #[error("non-finite logit at index {index}")]
    NonFiniteLogit { index: usize },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("sample ids must be strictly increasing: {previous} then {next}")]
    UnsortedSamples { previous: u64, next: u64 },
    #[error("sample {sample_id}: record of {len} entries exceeds K={k}")]
    RecordTooLong { sample_id: u64, len: usize, k: usize },
    #[error("sample {sample_id}: value {value} is not representable as f32")]
    LossyValue { sample_id: u64, value: f64 },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported shard version {0}")]
    UnsupportedVersion(u32),
    #[error("vocabulary hash mismatch: expected {expected:#018x}, found {found:#018x}")]
    HashMismatch { expected: u64, found: u64 },
    #[error("truncated shard: needed {needed} bytes at offset {offset}, file has {file_len}")]
    Truncated {
        offset: usize,
        needed: usize,
        file_len: usize,
    },
    #[error("corrupt shard at offset {offset}: {message}")]
    Corrupt { offset: usize, message: String },
    #[error("shard plan needs at least one shard")]
    BadPlan,
    #[error("sample {0} appears more than once")]
    DuplicateSample(u64),
    #[error("shards disagree: {0}")]
    InconsistentShards(String),
    #[error("no shard files in {0}")]
    NoShards(PathBuf),
    #[error(
        "teacher vocabulary {teacher:#018x} differs from student vocabulary {student:#018x}; an alignment map is required"
    )]
    AlignmentRequired { teacher: u64, student: u64 },
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad summary file: {0}")]
    Summary(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

impl LogitStoreError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
