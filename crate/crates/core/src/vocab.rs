//! Vocabularies, toy tokenizers, and teacher→student token alignment.

use std::collections::HashMap;
use std::fs;
use std::hash::Hasher;
use std::io;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logitstore::{TopKEntry, TopKLogitRecord};

pub const UNK_ID: u32 = 0;
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("vocabulary is empty")]
    Empty,
    #[error("token {token:?} appears twice (ids {first} and {second})")]
    DuplicateToken { token: String, first: u32, second: u32 },
    #[error("token at id {id} is empty or contains a line break")]
    BadToken { id: u32 },
    #[error("id 0 must be the reserved unknown token {UNK_TOKEN:?}")]
    MissingUnknown,
    #[error("vocabulary hash mismatch: expected {expected:016x}, found {found:016x}")]
    HashMismatch { expected: u64, found: u64 },
    #[error("malformed alignment map: {0}")]
    BadAlignment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Char,
    Bigram,
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "char" => Ok(Scheme::Char),
            "bigram" => Ok(Scheme::Bigram),
            _ => Err(format!("unknown tokenization scheme {s:?}")),
        }
    }
}

/// An ordered list of distinct tokens. Id 0 is always [`UNK_TOKEN`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
    hash: u64,
}

/// FNV-1a 64 over the tokens in id order, separated by a single 0x00 byte.
pub fn vocab_hash<S: AsRef<str>>(tokens: &[S]) -> u64 {
    let mut h = FnvHasher::default();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            h.write(&[0u8]);
        }
        h.write(t.as_ref().as_bytes());
    }
    h.finish()
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self, VocabError> {
        if tokens.is_empty() {
            return Err(VocabError::Empty);
        }
        if tokens[0] != UNK_TOKEN {
            return Err(VocabError::MissingUnknown);
        }
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let id = i as u32;
            if t.is_empty() || t.contains('\n') || t.contains('\r') {
                return Err(VocabError::BadToken { id });
            }
            if let Some(first) = id_of.insert(t.clone(), id) {
                return Err(VocabError::DuplicateToken {
                    token: t.clone(),
                    first,
                    second: id,
                });
            }
        }
        let hash = vocab_hash(&tokens);
        Ok(Self { tokens, id_of, hash })
    }

    /// `<unk>` followed by the distinct characters of `alphabet` in order.
    /// When `size` exceeds that, the tail is padded with reserved tokens.
    pub fn char_vocab(alphabet: &str, size: Option<usize>) -> Result<Self, VocabError> {
        let mut tokens = vec![UNK_TOKEN.to_string()];
        for c in alphabet.chars() {
            let s = c.to_string();
            if !tokens.contains(&s) {
                tokens.push(s);
            }
        }
        pad_reserved(&mut tokens, size);
        Self::new(tokens)
    }

    /// Characters of `alphabet` plus every listed bigram, padded like [`Self::char_vocab`].
    pub fn bigram_vocab<S: AsRef<str>>(alphabet: &str, bigrams: &[S], size: Option<usize>) -> Result<Self, VocabError> {
        let mut tokens = vec![UNK_TOKEN.to_string()];
        for c in alphabet.chars() {
            let s = c.to_string();
            if !tokens.contains(&s) {
                tokens.push(s);
            }
        }
        for b in bigrams {
            let b = b.as_ref().to_string();
            if !tokens.contains(&b) {
                tokens.push(b);
            }
        }
        pad_reserved(&mut tokens, size);
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let tokens = text
            .strip_suffix('\n')
            .unwrap_or(&text)
            .split('\n')
            .map(str::to_string)
            .collect();
        Self::new(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|source| VocabError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn tokenize(&self, text: &str, scheme: Scheme) -> Vec<u32> {
        let chars: Vec<char> = text.chars().collect();
        let width = match scheme {
            Scheme::Char => 1,
            Scheme::Bigram => 2,
        };
        let mut buf = String::new();
        chars
            .chunks(width)
            .map(|unit| {
                buf.clear();
                buf.extend(unit);
                self.id(&buf).unwrap_or(UNK_ID)
            })
            .collect()
    }

    /// Concatenates token strings. Unknown and out-of-range ids render as `<unk>`.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK_TOKEN)).collect()
    }
}

fn pad_reserved(tokens: &mut Vec<String>, size: Option<usize>) {
    if let Some(size) = size {
        let mut n = 0;
        while tokens.len() < size {
            tokens.push(format!("<r{n}>"));
            n += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignPolicy {
    Exact,
    ExactThenPrefix,
}

impl std::str::FromStr for AlignPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exact" => Ok(AlignPolicy::Exact),
            "exact_then_prefix" | "exact-then-prefix" | "prefix" => Ok(AlignPolicy::ExactThenPrefix),
            _ => Err(format!("unknown alignment policy {s:?}")),
        }
    }
}

/// Teacher id → optional student id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMap {
    pub teacher_vocab_hash: u64,
    pub student_vocab_hash: u64,
    pub policy: AlignPolicy,
    mapping: Vec<Option<u32>>,
    matched_count: usize,
    dropped_count: usize,
}

impl AlignmentMap {
    pub fn mapping(&self) -> &[Option<u32>] {
        &self.mapping
    }

    pub fn get(&self, teacher_id: u32) -> Option<u32> {
        self.mapping.get(teacher_id as usize).copied().flatten()
    }

    pub fn matched_count(&self) -> usize {
        self.matched_count
    }

    pub fn dropped_count(&self) -> usize {
        self.dropped_count
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        let path = path.as_ref();
        let file = AlignmentFile {
            teacher_vocab_hash: format!("{:016x}", self.teacher_vocab_hash),
            student_vocab_hash: format!("{:016x}", self.student_vocab_hash),
            policy: self.policy,
            matched_count: self.matched_count,
            dropped_count: self.dropped_count,
            mapping: self.mapping.clone(),
        };
        let text = serde_json::to_string_pretty(&file).expect("alignment map serializes");
        fs::write(path, text + "\n").map_err(|source| VocabError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: AlignmentFile = serde_json::from_str(&text).map_err(|e| VocabError::BadAlignment(e.to_string()))?;
        let parse_hash =
            |s: &str| u64::from_str_radix(s, 16).map_err(|e| VocabError::BadAlignment(format!("hash {s:?}: {e}")));
        let matched = file.mapping.iter().filter(|m| m.is_some()).count();
        if matched != file.matched_count || file.mapping.len() - matched != file.dropped_count {
            return Err(VocabError::BadAlignment("counts disagree with mapping".into()));
        }
        Ok(Self {
            teacher_vocab_hash: parse_hash(&file.teacher_vocab_hash)?,
            student_vocab_hash: parse_hash(&file.student_vocab_hash)?,
            policy: file.policy,
            mapping: file.mapping,
            matched_count: file.matched_count,
            dropped_count: file.dropped_count,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct AlignmentFile {
    teacher_vocab_hash: String,
    student_vocab_hash: String,
    policy: AlignPolicy,
    matched_count: usize,
    dropped_count: usize,
    mapping: Vec<Option<u32>>,
}

/// Maps each teacher token to the student token with the identical string;
/// under `ExactThenPrefix` an unmatched token falls back to its longest
/// strict prefix present in the student vocabulary.
pub fn align_tokens(teacher: &Vocabulary, student: &Vocabulary, policy: AlignPolicy) -> AlignmentMap {
    let mapping: Vec<Option<u32>> = teacher
        .tokens()
        .iter()
        .map(|t| {
            student.id(t).or_else(|| match policy {
                AlignPolicy::Exact => None,
                AlignPolicy::ExactThenPrefix => {
                    // strict prefixes, longest first, on char boundaries
                    let bounds: Vec<usize> = t.char_indices().map(|(i, _)| i).skip(1).collect();
                    bounds.iter().rev().find_map(|&end| student.id(&t[..end]))
                }
            })
        })
        .collect();
    let matched_count = mapping.iter().filter(|m| m.is_some()).count();
    AlignmentMap {
        teacher_vocab_hash: teacher.hash(),
        student_vocab_hash: student.hash(),
        policy,
        dropped_count: mapping.len() - matched_count,
        matched_count,
        mapping,
    }
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Moves a teacher record into student id space.
///
/// Dropped entries disappear. Entries that collide on a student id are merged
/// in probability space: the merged value is the log-sum-exp of the colliding
/// logits, i.e. the log of their summed softmax mass under the record's own
/// normalizer. Returns `None` when every entry was dropped.
pub fn project_topk(
    record: &TopKLogitRecord,
    record_vocab_hash: u64,
    map: &AlignmentMap,
) -> Result<Option<TopKLogitRecord>, VocabError> {
    if record_vocab_hash != map.teacher_vocab_hash {
        return Err(VocabError::HashMismatch {
            expected: map.teacher_vocab_hash,
            found: record_vocab_hash,
        });
    }
    let mut groups: Vec<(u32, Vec<f64>)> = Vec::new();
    for e in record.entries() {
        if let Some(sid) = map.get(e.token_id) {
            match groups.iter_mut().find(|(id, _)| *id == sid) {
                Some((_, vals)) => vals.push(e.value),
                None => groups.push((sid, vec![e.value])),
            }
        }
    }
    if groups.is_empty() {
        return Ok(None);
    }
    let entries = groups
        .into_iter()
        .map(|(token_id, vals)| TopKEntry {
            token_id,
            value: if vals.len() == 1 {
                vals[0]
            } else {
                logsumexp(vals.iter().copied())
            },
        })
        .collect();
    Ok(Some(
        TopKLogitRecord::from_unsorted(entries).expect("projected ids are distinct"),
    ))
}
