//! Throughput comparison between the top-K writer and a dense full-vocabulary writer.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian, WriteBytesExt};
use serde::Serialize;

use super::{encode_shard, extract_topk, LogitStoreError, ShardHeader, ShardSequence};
use crate::model::{StudentModel, TrainingExample};

/// Dense baseline layout: sample_id u64, length u32, then length x V f32 logits.
pub fn encode_dense(vocab_size: usize, sequences: &[(u64, Vec<Vec<f32>>)]) -> Vec<u8> {
    let positions: usize = sequences.iter().map(|(_, rows)| rows.len()).sum();
    let mut buf = Vec::with_capacity(16 + sequences.len() * 12 + positions * vocab_size * 4);
    buf.write_u64::<LittleEndian>(sequences.len() as u64).unwrap();
    buf.write_u32::<LittleEndian>(vocab_size as u32).unwrap();
    for (id, rows) in sequences {
        buf.write_u64::<LittleEndian>(*id).unwrap();
        buf.write_u32::<LittleEndian>(rows.len() as u32).unwrap();
        for row in rows {
            for &z in row {
                buf.write_f32::<LittleEndian>(z).unwrap();
            }
        }
    }
    buf
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputReport {
    pub vocab_size: usize,
    pub k: usize,
    pub positions: usize,
    pub inference_secs: f64,
    pub topk_write_secs: f64,
    pub dense_write_secs: f64,
    pub topk_bytes: u64,
    pub dense_bytes: u64,
    /// Dense over top-K time for serialization plus write.
    pub write_speedup: f64,
    /// Same ratio including the shared inference time.
    pub end_to_end_speedup: f64,
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<u64, LogitStoreError> {
    let mut f = fs::File::create(path).map_err(|e| LogitStoreError::io(path, e))?;
    f.write_all(bytes).map_err(|e| LogitStoreError::io(path, e))?;
    f.sync_all().map_err(|e| LogitStoreError::io(path, e))?;
    Ok(bytes.len() as u64)
}

/// Runs teacher inference once, then times the top-K path (selection,
/// encoding, write, fsync) against the dense path (encoding, write, fsync).
/// Each path is repeated `repeats` times and the fastest run is kept.
pub fn run_throughput_bench(
    teacher: &StudentModel,
    samples: &[TrainingExample],
    k: usize,
    vocab_hash: u64,
    out_dir: impl AsRef<Path>,
    repeats: usize,
) -> Result<ThroughputReport, LogitStoreError> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| LogitStoreError::io(out_dir, e))?;
    let v = teacher.config().vocab_size;
    let mut sorted: Vec<&TrainingExample> = samples.iter().collect();
    sorted.sort_by_key(|s| s.sample_id);

    let start = Instant::now();
    let mut dense: Vec<(u64, Vec<Vec<f32>>)> = Vec::with_capacity(sorted.len());
    for ex in &sorted {
        let logits = teacher.forward_logits(ex)?;
        let rows = logits
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&z| z as f32).collect())
            .collect();
        dense.push((ex.sample_id, rows));
    }
    let inference_secs = start.elapsed().as_secs_f64();
    let positions = dense.iter().map(|(_, r)| r.len()).sum();

    let header = ShardHeader {
        k: k as u16,
        vocab_size: v as u32,
        vocab_hash,
    };
    let topk_path = out_dir.join("bench-topk.dqkd");
    let dense_path = out_dir.join("bench-dense.bin");
    let mut topk_write_secs = f64::INFINITY;
    let mut dense_write_secs = f64::INFINITY;
    let mut topk_bytes = 0;
    let mut dense_bytes = 0;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let mut seqs = Vec::with_capacity(dense.len());
        for (id, rows) in &dense {
            let records = rows.iter().map(|r| extract_topk(r, k)).collect::<Result<Vec<_>, _>>()?;
            seqs.push(ShardSequence {
                sample_id: *id,
                records,
            });
        }
        topk_bytes = write_synced(&topk_path, &encode_shard(header, &seqs)?)?;
        topk_write_secs = topk_write_secs.min(t.elapsed().as_secs_f64());

        let t = Instant::now();
        dense_bytes = write_synced(&dense_path, &encode_dense(v, &dense))?;
        dense_write_secs = dense_write_secs.min(t.elapsed().as_secs_f64());
    }
    Ok(ThroughputReport {
        vocab_size: v,
        k,
        positions,
        inference_secs,
        topk_write_secs,
        dense_write_secs,
        topk_bytes,
        dense_bytes,
        write_speedup: dense_write_secs / topk_write_secs,
        end_to_end_speedup: (inference_secs + dense_write_secs) / (inference_secs + topk_write_secs),
    })
}
