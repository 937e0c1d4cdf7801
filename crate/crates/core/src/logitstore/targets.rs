use std::collections::BTreeMap;

use super::{LogitStoreError, ShardSequence, TopKLogitRecord, TopKLogitShard};
use crate::vocab::{project_topk, AlignmentMap};

/// Per-sample teacher records in the student's id space, ready for the KD loss.
///
/// A position holds `None` when alignment dropped every entry of its record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TeacherTargets {
    vocab_hash: u64,
    samples: BTreeMap<u64, Vec<Option<TopKLogitRecord>>>,
}

impl TeacherTargets {
    /// Targets whose records are already in the student's id space.
    pub fn from_sequences(
        vocab_hash: u64,
        sequences: impl IntoIterator<Item = ShardSequence>,
    ) -> Result<Self, LogitStoreError> {
        let mut samples = BTreeMap::new();
        for s in sequences {
            let id = s.sample_id;
            if samples.insert(id, s.records.into_iter().map(Some).collect()).is_some() {
                return Err(LogitStoreError::DuplicateSample(id));
            }
        }
        Ok(Self { vocab_hash, samples })
    }

    /// Builds targets from teacher shards. `alignment` is required exactly when
    /// the shard vocabulary differs from the student's and must connect the two.
    pub fn from_shards(
        shards: &[TopKLogitShard],
        student_vocab_hash: u64,
        alignment: Option<&AlignmentMap>,
    ) -> Result<Self, LogitStoreError> {
        let Some(first) = shards.first() else {
            return Ok(Self {
                vocab_hash: student_vocab_hash,
                samples: BTreeMap::new(),
            });
        };
        let teacher_hash = first.header.vocab_hash;
        if let Some(s) = shards.iter().find(|s| s.header.vocab_hash != teacher_hash) {
            return Err(LogitStoreError::InconsistentShards(format!(
                "vocabulary hashes {teacher_hash:#018x} and {:#018x}",
                s.header.vocab_hash
            )));
        }
        let map = match alignment {
            None if teacher_hash == student_vocab_hash => None,
            None => {
                return Err(LogitStoreError::AlignmentRequired {
                    teacher: teacher_hash,
                    student: student_vocab_hash,
                })
            }
            Some(map) => {
                if map.student_vocab_hash != student_vocab_hash {
                    return Err(LogitStoreError::HashMismatch {
                        expected: student_vocab_hash,
                        found: map.student_vocab_hash,
                    });
                }
                Some(map)
            }
        };
        let mut samples = BTreeMap::new();
        for shard in shards {
            for seq in &shard.sequences {
                let records = match map {
                    None => seq.records.iter().cloned().map(Some).collect(),
                    Some(map) => seq
                        .records
                        .iter()
                        .map(|r| project_topk(r, teacher_hash, map))
                        .collect::<Result<Vec<_>, _>>()?,
                };
                if samples.insert(seq.sample_id, records).is_some() {
                    return Err(LogitStoreError::DuplicateSample(seq.sample_id));
                }
            }
        }
        Ok(Self {
            vocab_hash: student_vocab_hash,
            samples,
        })
    }

    /// Hash of the vocabulary the record ids refer to.
    pub fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    pub fn get(&self, sample_id: u64) -> Option<&[Option<TopKLogitRecord>]> {
        self.samples.get(&sample_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.samples.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logitstore::{ShardHeader, TopKEntry};
    use crate::vocab::{align_tokens, AlignPolicy, Vocabulary};

    fn rec(pairs: &[(u32, f64)]) -> TopKLogitRecord {
        TopKLogitRecord::from_unsorted(
            pairs
                .iter()
                .map(|&(token_id, value)| TopKEntry { token_id, value })
                .collect(),
        )
        .unwrap()
    }

    fn vocab(tokens: &[&str]) -> Vocabulary {
        let mut t = vec!["<unk>".to_string()];
        t.extend(tokens.iter().map(|s| s.to_string()));
        Vocabulary::new(t).unwrap()
    }

    fn shard(hash: u64, seqs: Vec<ShardSequence>) -> TopKLogitShard {
        TopKLogitShard {
            header: ShardHeader {
                k: 3,
                vocab_size: 4,
                vocab_hash: hash,
            },
            sequences: seqs,
        }
    }

    #[test]
    fn same_vocab_passes_through() {
        let r = rec(&[(1, 2.0), (2, 1.0)]);
        let s = shard(
            7,
            vec![ShardSequence {
                sample_id: 3,
                records: vec![r.clone()],
            }],
        );
        let t = TeacherTargets::from_shards(&[s], 7, None).unwrap();
        assert_eq!(t.get(3).unwrap(), &[Some(r)]);
        assert!(t.get(4).is_none());
    }

    #[test]
    fn mismatched_vocab_needs_alignment() {
        let teacher = vocab(&["a", "b", "cd"]);
        let student = vocab(&["a", "b", "c", "d"]);
        let r = rec(&[(3, 2.0), (1, 1.0)]);
        let s = shard(
            teacher.hash(),
            vec![ShardSequence {
                sample_id: 1,
                records: vec![r],
            }],
        );
        assert!(matches!(
            TeacherTargets::from_shards(std::slice::from_ref(&s), student.hash(), None),
            Err(LogitStoreError::AlignmentRequired { .. })
        ));
        let map = align_tokens(&teacher, &student, AlignPolicy::ExactThenPrefix);
        let t = TeacherTargets::from_shards(&[s.clone()], student.hash(), Some(&map)).unwrap();
        let got = t.get(1).unwrap()[0].as_ref().unwrap();
        assert_eq!(got.token_ids(), vec![3, 1]);
        // alignment built for a different student
        assert!(TeacherTargets::from_shards(&[s], teacher.hash(), Some(&map)).is_err());
    }

    #[test]
    fn duplicates_rejected() {
        let seq = ShardSequence {
            sample_id: 1,
            records: vec![rec(&[(0, 0.0)])],
        };
        let a = shard(1, vec![seq.clone()]);
        let b = shard(1, vec![seq]);
        assert!(matches!(
            TeacherTargets::from_shards(&[a, b], 1, None),
            Err(LogitStoreError::DuplicateSample(1))
        ));
    }
}
