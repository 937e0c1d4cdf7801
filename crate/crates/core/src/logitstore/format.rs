//! Byte layout of a `.dqkd` shard. All integers little-endian.
//!
//! ```text
//! header (32 bytes)
//!   magic          4  b"DQKD"
//!   version        u32 = 1
//!   k              u16
//!   pad            u16 = 0
//!   vocab_size     u32
//!   vocab_hash     u64
//!   sequence_count u64
//! per sequence
//!   sample_id      u64
//!   length         u32
//!   per position
//!     k'           u16
//!     k' x (token_id u32, logit f32)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use super::{LogitStoreError, TopKEntry, TopKLogitRecord};

pub const MAGIC: [u8; 4] = *b"DQKD";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 32;
pub const SEQUENCE_HEADER_BYTES: usize = 12;
pub const ENTRY_BYTES: usize = 8;
pub const POSITION_HEADER_BYTES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub k: u16,
    pub vocab_size: u32,
    pub vocab_hash: u64,
}

/// Teacher records for one sample: one record per output position.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardSequence {
    pub sample_id: u64,
    pub records: Vec<TopKLogitRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKLogitShard {
    pub header: ShardHeader,
    pub sequences: Vec<ShardSequence>,
}

/// Size in bytes of a shard holding the given sequences.
pub fn encoded_len(sequences: &[ShardSequence]) -> usize {
    HEADER_BYTES
        + sequences
            .iter()
            .map(|s| {
                SEQUENCE_HEADER_BYTES
                    + s.records
                        .iter()
                        .map(|r| POSITION_HEADER_BYTES + ENTRY_BYTES * r.len())
                        .sum::<usize>()
            })
            .sum::<usize>()
}

pub fn encode_shard(header: ShardHeader, sequences: &[ShardSequence]) -> Result<Vec<u8>, LogitStoreError> {
    if header.k == 0 {
        return Err(LogitStoreError::InvalidRecord("header K must be at least 1".into()));
    }
    for w in sequences.windows(2) {
        if w[1].sample_id <= w[0].sample_id {
            return Err(LogitStoreError::UnsortedSamples {
                previous: w[0].sample_id,
                next: w[1].sample_id,
            });
        }
    }
    let mut buf = Vec::with_capacity(encoded_len(sequences));
    buf.extend_from_slice(&MAGIC);
    buf.write_u32::<LittleEndian>(VERSION).unwrap();
    buf.write_u16::<LittleEndian>(header.k).unwrap();
    buf.write_u16::<LittleEndian>(0).unwrap();
    buf.write_u32::<LittleEndian>(header.vocab_size).unwrap();
    buf.write_u64::<LittleEndian>(header.vocab_hash).unwrap();
    buf.write_u64::<LittleEndian>(sequences.len() as u64).unwrap();
    for seq in sequences {
        let len =
            u32::try_from(seq.records.len()).map_err(|_| LogitStoreError::InvalidRecord("sequence too long".into()))?;
        buf.write_u64::<LittleEndian>(seq.sample_id).unwrap();
        buf.write_u32::<LittleEndian>(len).unwrap();
        for rec in &seq.records {
            if rec.len() > header.k as usize {
                return Err(LogitStoreError::RecordTooLong {
                    sample_id: seq.sample_id,
                    len: rec.len(),
                    k: header.k as usize,
                });
            }
            buf.write_u16::<LittleEndian>(rec.len() as u16).unwrap();
            for e in rec.entries() {
                if e.token_id >= header.vocab_size {
                    return Err(LogitStoreError::InvalidRecord(format!(
                        "token id {} outside vocabulary of {}",
                        e.token_id, header.vocab_size
                    )));
                }
                let v = e.value as f32;
                if v as f64 != e.value {
                    return Err(LogitStoreError::LossyValue {
                        sample_id: seq.sample_id,
                        value: e.value,
                    });
                }
                buf.write_u32::<LittleEndian>(e.token_id).unwrap();
                buf.write_f32::<LittleEndian>(v).unwrap();
            }
        }
    }
    Ok(buf)
}

pub fn write_shard(
    path: impl AsRef<Path>,
    header: ShardHeader,
    sequences: &[ShardSequence],
) -> Result<(), LogitStoreError> {
    let path = path.as_ref();
    let bytes = encode_shard(header, sequences)?;
    let mut f = fs::File::create(path).map_err(|e| LogitStoreError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| LogitStoreError::io(path, e))?;
    f.sync_all().map_err(|e| LogitStoreError::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LogitStoreError> {
        if self.bytes.len() - self.pos < n {
            return Err(LogitStoreError::Truncated {
                offset: self.pos,
                needed: n,
                file_len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, LogitStoreError> {
        self.take(2).map(LittleEndian::read_u16)
    }
    fn u32(&mut self) -> Result<u32, LogitStoreError> {
        self.take(4).map(LittleEndian::read_u32)
    }
    fn u64(&mut self) -> Result<u64, LogitStoreError> {
        self.take(8).map(LittleEndian::read_u64)
    }
    fn f32(&mut self) -> Result<f32, LogitStoreError> {
        self.take(4).map(LittleEndian::read_f32)
    }
}

pub fn decode_shard(bytes: &[u8], expected_hash: Option<u64>) -> Result<TopKLogitShard, LogitStoreError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4)?;
    if magic != MAGIC {
        return Err(LogitStoreError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(LogitStoreError::UnsupportedVersion(version));
    }
    let k = c.u16()?;
    let _pad = c.u16()?;
    let vocab_size = c.u32()?;
    let vocab_hash = c.u64()?;
    let count = c.u64()?;
    if let Some(expected) = expected_hash {
        if expected != vocab_hash {
            return Err(LogitStoreError::HashMismatch {
                expected,
                found: vocab_hash,
            });
        }
    }
    let header = ShardHeader {
        k,
        vocab_size,
        vocab_hash,
    };
    let mut sequences = Vec::new();
    let mut previous: Option<u64> = None;
    for _ in 0..count {
        let seq_offset = c.pos;
        let sample_id = c.u64()?;
        if let Some(p) = previous {
            if sample_id <= p {
                return Err(LogitStoreError::Corrupt {
                    offset: seq_offset,
                    message: format!("sample id {sample_id} does not increase after {p}"),
                });
            }
        }
        previous = Some(sample_id);
        let len = c.u32()? as usize;
        let mut records = Vec::with_capacity(len.min(1 << 16));
        for _ in 0..len {
            let rec_offset = c.pos;
            let kp = c.u16()? as usize;
            if kp == 0 || kp > k as usize {
                return Err(LogitStoreError::Corrupt {
                    offset: rec_offset,
                    message: format!("record length {kp} outside 1..={k}"),
                });
            }
            let mut entries = Vec::with_capacity(kp);
            for _ in 0..kp {
                let token_id = c.u32()?;
                let value = c.f32()? as f64;
                if token_id >= vocab_size {
                    return Err(LogitStoreError::Corrupt {
                        offset: c.pos - ENTRY_BYTES,
                        message: format!("token id {token_id} outside vocabulary of {vocab_size}"),
                    });
                }
                entries.push(TopKEntry { token_id, value });
            }
            let record = TopKLogitRecord::new(entries).map_err(|e| LogitStoreError::Corrupt {
                offset: rec_offset,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        sequences.push(ShardSequence { sample_id, records });
    }
    if c.pos != bytes.len() {
        return Err(LogitStoreError::Corrupt {
            offset: c.pos,
            message: format!("{} trailing bytes", bytes.len() - c.pos),
        });
    }
    Ok(TopKLogitShard { header, sequences })
}

pub fn read_shard(path: impl AsRef<Path>, expected_hash: Option<u64>) -> Result<TopKLogitShard, LogitStoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| LogitStoreError::io(path, e))?;
    decode_shard(&bytes, expected_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(pairs: &[(u32, f32)]) -> TopKLogitRecord {
        TopKLogitRecord::from_unsorted(
            pairs
                .iter()
                .map(|&(token_id, v)| TopKEntry {
                    token_id,
                    value: v as f64,
                })
                .collect(),
        )
        .unwrap()
    }

    const H: ShardHeader = ShardHeader {
        k: 2,
        vocab_size: 16,
        vocab_hash: 0xfeed_beef,
    };

    #[test]
    fn empty_shard_is_header_only() {
        let bytes = encode_shard(H, &[]).unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES);
        assert_eq!(&bytes[..4], b"DQKD");
        let back = decode_shard(&bytes, Some(H.vocab_hash)).unwrap();
        assert!(back.sequences.is_empty());
        assert_eq!(back.header, H);
    }

    #[test]
    fn one_sample_two_positions_layout() {
        let seq = ShardSequence {
            sample_id: 7,
            records: vec![rec(&[(1, 2.5), (3, -1.0)]), rec(&[(0, 0.25), (15, 0.125)])],
        };
        let bytes = encode_shard(H, std::slice::from_ref(&seq)).unwrap();
        // header + sequence header + 2 positions x (count + 2 entries)
        assert_eq!(bytes.len(), 32 + 12 + 2 * (2 + 2 * 8));
        assert_eq!(bytes.len(), encoded_len(std::slice::from_ref(&seq)));
        // spot-check little-endian fields
        assert_eq!(LittleEndian::read_u32(&bytes[4..8]), 1);
        assert_eq!(LittleEndian::read_u16(&bytes[8..10]), 2);
        assert_eq!(LittleEndian::read_u64(&bytes[32..40]), 7);
        assert_eq!(LittleEndian::read_u32(&bytes[40..44]), 2);
        assert_eq!(LittleEndian::read_u16(&bytes[44..46]), 2);
        assert_eq!(LittleEndian::read_u32(&bytes[46..50]), 1);
        assert_eq!(LittleEndian::read_f32(&bytes[50..54]), 2.5);
    }

    #[test]
    fn writer_rejects_bad_input() {
        let a = ShardSequence {
            sample_id: 3,
            records: vec![rec(&[(1, 1.0)])],
        };
        let b = ShardSequence {
            sample_id: 2,
            records: vec![rec(&[(1, 1.0)])],
        };
        assert!(matches!(
            encode_shard(H, &[a.clone(), b]),
            Err(LogitStoreError::UnsortedSamples { previous: 3, next: 2 })
        ));
        let long = ShardSequence {
            sample_id: 9,
            records: vec![rec(&[(1, 1.0), (2, 0.5), (3, 0.1)])],
        };
        assert!(matches!(
            encode_shard(H, &[long]),
            Err(LogitStoreError::RecordTooLong { .. })
        ));
        let lossy = ShardSequence {
            sample_id: 1,
            records: vec![TopKLogitRecord::new(vec![TopKEntry {
                token_id: 1,
                value: 0.1,
            }])
            .unwrap()],
        };
        assert!(matches!(
            encode_shard(H, &[lossy]),
            Err(LogitStoreError::LossyValue { .. })
        ));
        let _ = a;
    }

    #[test]
    fn reader_faults() {
        let seq = ShardSequence {
            sample_id: 1,
            records: vec![rec(&[(4, 1.0), (5, 0.5)]), rec(&[(6, 3.0)])],
        };
        let bytes = encode_shard(H, &[seq]).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_shard(&bad, None), Err(LogitStoreError::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_shard(&bad, None),
            Err(LogitStoreError::UnsupportedVersion(9))
        ));

        assert!(matches!(
            decode_shard(&bytes, Some(1)),
            Err(LogitStoreError::HashMismatch { expected: 1, .. })
        ));

        // cut inside the first entry of the second position
        let cut = 32 + 12 + (2 + 16) + 2 + 3;
        match decode_shard(&bytes[..cut], None) {
            Err(LogitStoreError::Truncated { offset, .. }) => assert_eq!(offset, 32 + 12 + 18 + 2),
            other => panic!("{other:?}"),
        }

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode_shard(&extra, None),
            Err(LogitStoreError::Corrupt { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.dqkd");
        let seqs = vec![
            ShardSequence {
                sample_id: 2,
                records: vec![rec(&[(1, 1.0)])],
            },
            ShardSequence {
                sample_id: 5,
                records: vec![],
            },
        ];
        write_shard(&p, H, &seqs).unwrap();
        let back = read_shard(&p, Some(H.vocab_hash)).unwrap();
        assert_eq!(back.sequences, seqs);
    }

    fn arb_record(vocab: u32, k: usize) -> impl Strategy<Value = TopKLogitRecord> {
        prop::collection::btree_map(0..vocab, any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..=k).prop_map(
            |m| {
                TopKLogitRecord::from_unsorted(
                    m.into_iter()
                        .map(|(token_id, v)| TopKEntry {
                            token_id,
                            value: v as f64,
                        })
                        .collect(),
                )
                .unwrap()
            },
        )
    }

    fn arb_shard() -> impl Strategy<Value = (ShardHeader, Vec<ShardSequence>)> {
        (1u16..12, 12u32..200, any::<u64>()).prop_flat_map(|(k, vocab_size, vocab_hash)| {
            let seqs = prop::collection::btree_map(
                any::<u64>(),
                prop::collection::vec(arb_record(vocab_size, k as usize), 0..6),
                0..6,
            )
            .prop_map(|m| {
                m.into_iter()
                    .map(|(sample_id, records)| ShardSequence { sample_id, records })
                    .collect::<Vec<_>>()
            });
            (
                Just(ShardHeader {
                    k,
                    vocab_size,
                    vocab_hash,
                }),
                seqs,
            )
        })
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip((header, seqs) in arb_shard()) {
            let bytes = encode_shard(header, &seqs).unwrap();
            prop_assert_eq!(bytes.len(), encoded_len(&seqs));
            let back = decode_shard(&bytes, Some(header.vocab_hash)).unwrap();
            prop_assert_eq!(&back.header, &header);
            for (a, b) in back.sequences.iter().zip(&seqs) {
                prop_assert_eq!(a.sample_id, b.sample_id);
                for (ra, rb) in a.records.iter().zip(&b.records) {
                    for (ea, eb) in ra.entries().iter().zip(rb.entries()) {
                        prop_assert_eq!(ea.token_id, eb.token_id);
                        prop_assert_eq!(ea.value.to_bits(), eb.value.to_bits());
                    }
                }
            }
            prop_assert_eq!(&back.sequences, &seqs);
            prop_assert_eq!(encode_shard(header, &back.sequences).unwrap(), bytes);
        }
    }
}
