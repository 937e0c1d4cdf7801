use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{extract_topk, read_shard, write_shard, LogitStoreError, ShardHeader, ShardSequence, TopKLogitShard};
use crate::model::{StudentModel, TrainingExample};

pub const SUMMARY_FILE: &str = "summary.json";

/// Assigns each sample to shard `sample_id % num_shards`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardPlan {
    num_shards: usize,
}

impl ShardPlan {
    pub fn new(num_shards: usize) -> Result<Self, LogitStoreError> {
        if num_shards == 0 {
            return Err(LogitStoreError::BadPlan);
        }
        Ok(Self { num_shards })
    }

    pub fn num_shards(&self) -> usize {
        self.num_shards
    }

    pub fn shard_of(&self, sample_id: u64) -> usize {
        (sample_id % self.num_shards as u64) as usize
    }

    pub fn file_name(index: usize) -> String {
        format!("logits-{index:05}.dqkd")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionConfig {
    pub k: usize,
    /// Hash of the teacher vocabulary, written into every shard header.
    pub vocab_hash: u64,
    /// Values of K at which to record mean mass coverage in the summary.
    pub coverage_ks: Vec<usize>,
}

impl ExtractionConfig {
    pub fn new(k: usize, vocab_hash: u64) -> Self {
        Self {
            k,
            vocab_hash,
            coverage_ks: vec![k],
        }
    }
}

/// Contents of `summary.json` written next to the shards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSummary {
    pub k: usize,
    pub num_shards: usize,
    pub vocab_size: usize,
    #[serde(with = "hex_u64")]
    pub vocab_hash: u64,
    pub sample_count: usize,
    pub position_count: usize,
    #[serde(with = "hex_u64")]
    pub corpus_fingerprint: u64,
    pub mass_coverage: BTreeMap<usize, f64>,
}

mod hex_u64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone)]
pub struct ExtractionOutput {
    pub shard_paths: Vec<PathBuf>,
    pub summary: ExtractionSummary,
}

/// FNV-1a digest of sample ids and their token sequences, in id order.
pub fn corpus_fingerprint(samples: &[TrainingExample]) -> u64 {
    let mut sorted: Vec<&TrainingExample> = samples.iter().collect();
    sorted.sort_by_key(|s| s.sample_id);
    let mut h = FnvHasher::default();
    for s in sorted {
        h.write_u64(s.sample_id);
        for part in [&s.input, &s.target] {
            h.write_u32(part.len() as u32);
            for &t in part {
                h.write_u32(t);
            }
        }
    }
    h.finish()
}

/// Full-softmax probability mass held by the top `k` logits, for each `k` in `ks`.
///
/// Exactly 1.0 when `k == V` and nondecreasing in `k`.
pub fn coverage_at(full_logits: &[f32], ks: &[usize]) -> Vec<f64> {
    let max = full_logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let mut ex: Vec<f64> = full_logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    ex.sort_by(|a, b| b.total_cmp(a));
    let mut prefix = Vec::with_capacity(ex.len());
    let mut acc = 0.0;
    for e in ex {
        acc += e;
        prefix.push(acc);
    }
    let total = acc;
    ks.iter()
        .map(|&k| prefix[k.clamp(1, prefix.len()) - 1] / total)
        .collect()
}

/// Mean top-`k` mass coverage recorded at extraction time, if `k` was requested.
pub fn mass_coverage(summary: &ExtractionSummary, k: usize) -> Option<f64> {
    summary.mass_coverage.get(&k).copied()
}

/// Top-K records for every sample, in sample-id order, without touching disk.
pub fn extract_sequences(
    teacher: &StudentModel,
    samples: &[TrainingExample],
    k: usize,
) -> Result<Vec<ShardSequence>, LogitStoreError> {
    let mut sorted: Vec<&TrainingExample> = samples.iter().collect();
    sorted.sort_by_key(|s| s.sample_id);
    let mut out = Vec::with_capacity(sorted.len());
    let mut row32 = Vec::new();
    for ex in sorted {
        let logits = teacher.forward_logits(ex)?;
        let mut records = Vec::with_capacity(logits.nrows());
        for row in logits.rows() {
            row32.clear();
            row32.extend(row.iter().map(|&z| z as f32));
            records.push(extract_topk(&row32, k)?);
        }
        out.push(ShardSequence {
            sample_id: ex.sample_id,
            records,
        });
    }
    Ok(out)
}

struct ShardResult {
    path: PathBuf,
    positions: usize,
    coverage: Vec<(u64, Vec<f64>)>,
}

fn extract_shard(
    teacher: &StudentModel,
    samples: &[&TrainingExample],
    cfg: &ExtractionConfig,
    header: ShardHeader,
    path: PathBuf,
) -> Result<ShardResult, LogitStoreError> {
    let mut sequences = Vec::with_capacity(samples.len());
    let mut coverage = Vec::with_capacity(samples.len());
    let mut positions = 0;
    for ex in samples {
        let logits = teacher.forward_logits(ex)?;
        let mut records = Vec::with_capacity(logits.nrows());
        let mut cov = vec![0.0; cfg.coverage_ks.len()];
        let mut row32 = vec![0f32; logits.ncols()];
        for row in logits.rows() {
            for (d, &z) in row32.iter_mut().zip(row) {
                *d = z as f32;
            }
            records.push(extract_topk(&row32, cfg.k)?);
            for (c, v) in cov.iter_mut().zip(coverage_at(&row32, &cfg.coverage_ks)) {
                *c += v;
            }
        }
        positions += records.len();
        coverage.push((ex.sample_id, cov));
        sequences.push(ShardSequence {
            sample_id: ex.sample_id,
            records,
        });
    }
    write_shard(&path, header, &sequences)?;
    Ok(ShardResult {
        path,
        positions,
        coverage,
    })
}

/// Runs the teacher over every sample and writes one shard per plan slot,
/// plus `summary.json`. Shards are produced by independent workers; the
/// result does not depend on their completion order.
pub fn run_extraction(
    teacher: &StudentModel,
    samples: &[TrainingExample],
    cfg: &ExtractionConfig,
    plan: &ShardPlan,
    out_dir: impl AsRef<Path>,
) -> Result<ExtractionOutput, LogitStoreError> {
    let out_dir = out_dir.as_ref();
    let v = teacher.config().vocab_size;
    if cfg.k == 0 || cfg.k > v || cfg.k > u16::MAX as usize {
        return Err(LogitStoreError::KOutOfRange {
            k: cfg.k,
            vocab_size: v,
        });
    }
    if let Some(&k) = cfg.coverage_ks.iter().find(|&&k| k == 0 || k > v) {
        return Err(LogitStoreError::KOutOfRange { k, vocab_size: v });
    }
    let mut sorted: Vec<&TrainingExample> = samples.iter().collect();
    sorted.sort_by_key(|s| s.sample_id);
    for w in sorted.windows(2) {
        if w[0].sample_id == w[1].sample_id {
            return Err(LogitStoreError::DuplicateSample(w[0].sample_id));
        }
    }
    for ex in &sorted {
        teacher.check_example(ex)?;
    }
    fs::create_dir_all(out_dir).map_err(|e| LogitStoreError::io(out_dir, e))?;

    let mut buckets: Vec<Vec<&TrainingExample>> = vec![Vec::new(); plan.num_shards()];
    for ex in sorted {
        buckets[plan.shard_of(ex.sample_id)].push(ex);
    }
    let header = ShardHeader {
        k: cfg.k as u16,
        vocab_size: v as u32,
        vocab_hash: cfg.vocab_hash,
    };
    let results: Vec<ShardResult> = buckets
        .par_iter()
        .enumerate()
        .map(|(i, bucket)| extract_shard(teacher, bucket, cfg, header, out_dir.join(ShardPlan::file_name(i))))
        .collect::<Result<_, _>>()?;

    let position_count: usize = results.iter().map(|r| r.positions).sum();
    let mut per_sample: Vec<&(u64, Vec<f64>)> = results.iter().flat_map(|r| &r.coverage).collect();
    per_sample.sort_by_key(|(id, _)| *id);
    let mut sums = vec![0.0; cfg.coverage_ks.len()];
    for (_, cov) in per_sample {
        for (s, c) in sums.iter_mut().zip(cov) {
            *s += c;
        }
    }
    let mass_coverage = if position_count == 0 {
        BTreeMap::new()
    } else {
        cfg.coverage_ks
            .iter()
            .zip(sums)
            .map(|(&k, s)| (k, s / position_count as f64))
            .collect()
    };
    let summary = ExtractionSummary {
        k: cfg.k,
        num_shards: plan.num_shards(),
        vocab_size: v,
        vocab_hash: cfg.vocab_hash,
        sample_count: samples.len(),
        position_count,
        corpus_fingerprint: corpus_fingerprint(samples),
        mass_coverage,
    };
    let summary_path = out_dir.join(SUMMARY_FILE);
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .map_err(|e| LogitStoreError::io(&summary_path, e))?;
    Ok(ExtractionOutput {
        shard_paths: results.into_iter().map(|r| r.path).collect(),
        summary,
    })
}

/// All shards found in a directory, plus the sidecar summary when present.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardSet {
    pub summary: Option<ExtractionSummary>,
    pub shards: Vec<TopKLogitShard>,
}

impl ShardSet {
    pub fn header(&self) -> Option<ShardHeader> {
        self.shards.first().map(|s| s.header)
    }

    /// Every sequence across shards, ordered by sample id.
    pub fn merged(&self) -> Vec<ShardSequence> {
        let mut all: Vec<ShardSequence> = self.shards.iter().flat_map(|s| s.sequences.iter().cloned()).collect();
        all.sort_by_key(|s| s.sample_id);
        all
    }
}

/// Reads every `logits-*.dqkd` file in `dir` in name order. All headers must agree.
pub fn load_shard_set(dir: impl AsRef<Path>, expected_hash: Option<u64>) -> Result<ShardSet, LogitStoreError> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| LogitStoreError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("logits-") && n.ends_with(".dqkd"))
        })
        .collect();
    if paths.is_empty() {
        return Err(LogitStoreError::NoShards(dir.to_path_buf()));
    }
    paths.sort();
    let shards = paths
        .iter()
        .map(|p| read_shard(p, expected_hash))
        .collect::<Result<Vec<_>, _>>()?;
    let h0 = shards[0].header;
    if let Some(s) = shards.iter().find(|s| s.header != h0) {
        return Err(LogitStoreError::InconsistentShards(format!(
            "headers {h0:?} and {:?}",
            s.header
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in shards.iter().flat_map(|s| &s.sequences) {
        if !seen.insert(s.sample_id) {
            return Err(LogitStoreError::DuplicateSample(s.sample_id));
        }
    }
    let summary_path = dir.join(SUMMARY_FILE);
    let summary = if summary_path.exists() {
        let text = fs::read_to_string(&summary_path).map_err(|e| LogitStoreError::io(&summary_path, e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    Ok(ShardSet { summary, shards })
}
