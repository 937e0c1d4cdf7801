use std::cmp::Ordering;

use super::LogitStoreError;

/// One (token id, logit) pair of a top-K record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopKEntry {
    pub token_id: u32,
    pub value: f64,
}

/// Descending by value, ascending token id on ties.
pub(crate) fn entry_order(a: &TopKEntry, b: &TopKEntry) -> Ordering {
    b.value.total_cmp(&a.value).then_with(|| a.token_id.cmp(&b.token_id))
}

/// The retained entries of one next-token distribution.
///
/// Always non-empty, token ids distinct, sorted by [`entry_order`].
/// Values are stored as `f64` in memory; records produced by extraction or
/// read from disk hold values exactly representable as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKLogitRecord {
    entries: Vec<TopKEntry>,
}

impl TopKLogitRecord {
    pub fn new(entries: Vec<TopKEntry>) -> Result<Self, LogitStoreError> {
        if entries.is_empty() {
            return Err(LogitStoreError::InvalidRecord("record has no entries".into()));
        }
        if let Some(e) = entries.iter().find(|e| !e.value.is_finite()) {
            return Err(LogitStoreError::InvalidRecord(format!(
                "non-finite value for token {}",
                e.token_id
            )));
        }
        for w in entries.windows(2) {
            if entry_order(&w[0], &w[1]) != Ordering::Less {
                return Err(LogitStoreError::InvalidRecord(format!(
                    "entries out of order at token {} / {}",
                    w[0].token_id, w[1].token_id
                )));
            }
        }
        let mut ids: Vec<u32> = entries.iter().map(|e| e.token_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(LogitStoreError::InvalidRecord("duplicate token id".into()));
        }
        Ok(Self { entries })
    }

    pub fn from_unsorted(mut entries: Vec<TopKEntry>) -> Result<Self, LogitStoreError> {
        entries.sort_by(entry_order);
        Self::new(entries)
    }

    pub fn entries(&self) -> &[TopKEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.token_id).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }

    pub fn top1(&self) -> u32 {
        self.entries[0].token_id
    }
}

const BLOCK: usize = 64;
const LANES: usize = 16;

/// Block maximum, and a sum that is NaN exactly when the block holds a non-finite value.
fn block_stats(block: &[f32]) -> (f32, f32) {
    let mut max = [f32::NEG_INFINITY; LANES];
    let mut bad = [0f32; LANES];
    let mut parts = block.chunks_exact(LANES);
    for part in &mut parts {
        let part: &[f32; LANES] = part.try_into().unwrap();
        for l in 0..LANES {
            let x = part[l];
            max[l] = if x > max[l] { x } else { max[l] };
            bad[l] += x - x;
        }
    }
    let mut m = f32::NEG_INFINITY;
    let mut b = 0.0;
    for &x in parts.remainder().iter().chain(&max) {
        m = if x > m { x } else { m };
    }
    for &x in parts.remainder().iter() {
        b += x - x;
    }
    (m, bad.iter().fold(b, |acc, &x| acc + x))
}

/// The `k` largest logits with their ids, ties broken by ascending id.
pub fn extract_topk(full_logits: &[f32], k: usize) -> Result<TopKLogitRecord, LogitStoreError> {
    let v = full_logits.len();
    if k == 0 || k > v {
        return Err(LogitStoreError::KOutOfRange { k, vocab_size: v });
    }
    let mut maxima = Vec::with_capacity(v.div_ceil(BLOCK));
    for (b, block) in full_logits.chunks(BLOCK).enumerate() {
        let (max, bad) = block_stats(block);
        if bad != 0.0 {
            let j = block.iter().position(|x| !x.is_finite()).unwrap_or(0);
            return Err(LogitStoreError::NonFiniteLogit { index: b * BLOCK + j });
        }
        maxima.push(max);
    }
    // k block maxima are >= the k-th largest of them, so nothing in the top k falls below it
    let floor = if maxima.len() >= k {
        let mut m = maxima.clone();
        *m.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a)).1
    } else {
        f32::NEG_INFINITY
    };
    let mut best: Vec<(u32, f32)> = Vec::new();
    for (b, block) in full_logits.chunks(BLOCK).enumerate() {
        if maxima[b] < floor {
            continue;
        }
        for (j, &x) in block.iter().enumerate() {
            if x >= floor {
                best.push(((b * BLOCK + j) as u32, x));
            }
        }
    }
    best.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    best.truncate(k);
    let entries = best
        .into_iter()
        .map(|(token_id, x)| TopKEntry {
            token_id,
            value: x as f64,
        })
        .collect();
    TopKLogitRecord::new(entries)
}
