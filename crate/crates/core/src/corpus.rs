//! Instruction-response corpora shared by both distillation stages.
//!
//! On disk a corpus is JSONL: one canonical JSON object per line, keys sorted,
//! optional fields omitted. Records are validated on construction, so every
//! [`Corpus`] value in memory satisfies the id, lineage and category rules.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Task taxonomy used for balancing. The eight MT-Bench categories plus `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskCategory {
    Writing,
    Roleplay,
    Reasoning,
    Mathematics,
    Coding,
    Extraction,
    #[serde(rename = "STEM")]
    Stem,
    Humanity,
    Other,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 9] = [
        TaskCategory::Writing,
        TaskCategory::Roleplay,
        TaskCategory::Reasoning,
        TaskCategory::Mathematics,
        TaskCategory::Coding,
        TaskCategory::Extraction,
        TaskCategory::Stem,
        TaskCategory::Humanity,
        TaskCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskCategory::Writing => "Writing",
            TaskCategory::Roleplay => "Roleplay",
            TaskCategory::Reasoning => "Reasoning",
            TaskCategory::Mathematics => "Mathematics",
            TaskCategory::Coding => "Coding",
            TaskCategory::Extraction => "Extraction",
            TaskCategory::Stem => "STEM",
            TaskCategory::Humanity => "Humanity",
            TaskCategory::Other => "Other",
        }
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown task category {s:?}"))
    }
}

/// Where a record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Seed,
    Expanded,
    Rewritten,
}

/// Judge scores on a 1..=10 integer scale. The aggregate is always the mean
/// of the three criteria and is never stored independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct JudgeScores {
    informativeness: u8,
    helpfulness: u8,
    generalization: u8,
}

impl JudgeScores {
    pub fn new(informativeness: u8, helpfulness: u8, generalization: u8) -> Result<Self, String> {
        for (name, v) in [
            ("informativeness", informativeness),
            ("helpfulness", helpfulness),
            ("generalization", generalization),
        ] {
            if !(1..=10).contains(&v) {
                return Err(format!("{name} score {v} outside 1..=10"));
            }
        }
        Ok(Self {
            informativeness,
            helpfulness,
            generalization,
        })
    }

    pub fn informativeness(&self) -> u8 {
        self.informativeness
    }

    pub fn helpfulness(&self) -> u8 {
        self.helpfulness
    }

    pub fn generalization(&self) -> u8 {
        self.generalization
    }

    pub fn aggregate(&self) -> f64 {
        (self.informativeness as f64 + self.helpfulness as f64 + self.generalization as f64) / 3.0
    }

    /// Aggregate rounded to one decimal, the form written to disk.
    pub fn aggregate_one_decimal(&self) -> f64 {
        (self.aggregate() * 10.0).round() / 10.0
    }
}

/// One instruction/response pair with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionRecord {
    pub id: u64,
    pub instruction: String,
    pub response: String,
    pub task_category: TaskCategory,
    pub source: Source,
    pub parent_id: Option<u64>,
    pub scores: Option<JudgeScores>,
    pub verified: Option<bool>,
}

impl InstructionRecord {
    pub fn seed(id: u64, category: TaskCategory, instruction: impl Into<String>) -> Self {
        Self {
            id,
            instruction: instruction.into(),
            response: String::new(),
            task_category: category,
            source: Source::Seed,
            parent_id: None,
            scores: None,
            verified: None,
        }
    }

    pub fn with_response(mut self, response: impl Into<String>) -> Self {
        self.response = response.into();
        self
    }

    fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("id".into(), Value::from(self.id));
        obj.insert("instruction".into(), Value::from(self.instruction.as_str()));
        obj.insert("response".into(), Value::from(self.response.as_str()));
        obj.insert("task_category".into(), Value::from(self.task_category.as_str()));
        let source = match self.source {
            Source::Seed => "seed",
            Source::Expanded => "expanded",
            Source::Rewritten => "rewritten",
        };
        obj.insert("source".into(), Value::from(source));
        if let Some(p) = self.parent_id {
            obj.insert("parent_id".into(), Value::from(p));
        }
        if let Some(s) = &self.scores {
            let mut so = Map::new();
            so.insert("aggregate".into(), Value::from(s.aggregate_one_decimal()));
            so.insert("generalization".into(), Value::from(s.generalization));
            so.insert("helpfulness".into(), Value::from(s.helpfulness));
            so.insert("informativeness".into(), Value::from(s.informativeness));
            obj.insert("scores".into(), Value::Object(so));
        }
        if let Some(v) = self.verified {
            obj.insert("verified".into(), Value::from(v));
        }
        Value::Object(obj)
    }

    /// Canonical single-line JSON form (sorted keys, no trailing newline).
    pub fn to_canonical_line(&self) -> String {
        // serde_json's Map is a BTreeMap here, so keys come out sorted.
        self.to_json().to_string()
    }

    fn from_json_line(line: &str) -> Result<Self, String> {
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let task_category = raw.task_category.parse::<TaskCategory>()?;
        let scores = match raw.scores {
            None => None,
            Some(s) => {
                let js = JudgeScores::new(s.informativeness, s.helpfulness, s.generalization)?;
                if let Some(stored) = s.aggregate {
                    if (stored - js.aggregate()).abs() > 0.05 + 1e-9 {
                        return Err(format!(
                            "stored aggregate {stored} does not match mean {:.4} of the criteria",
                            js.aggregate()
                        ));
                    }
                }
                Some(js)
            }
        };
        Ok(Self {
            id: raw.id,
            instruction: raw.instruction,
            response: raw.response.unwrap_or_default(),
            task_category,
            source: raw.source,
            parent_id: raw.parent_id,
            scores,
            verified: raw.verified,
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScores {
    informativeness: u8,
    helpfulness: u8,
    generalization: u8,
    aggregate: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: u64,
    instruction: String,
    response: Option<String>,
    task_category: String,
    source: Source,
    parent_id: Option<u64>,
    scores: Option<RawScores>,
    verified: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusMetadata {
    pub name: String,
    pub created_unix: Option<u64>,
    pub stage: Option<String>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate record id {id}")]
    DuplicateId { id: u64 },
    #[error("record ids must be strictly increasing: id {id} follows {previous}")]
    NotIncreasing { id: u64, previous: u64 },
    #[error("record {id} has dangling parent_id {parent_id}")]
    DanglingParent { id: u64, parent_id: u64 },
    #[error("record {id} is derived but has no parent_id")]
    MissingParent { id: u64 },
    #[error("record {id} has category {child} but its parent {parent_id} has {parent}")]
    CategoryMismatch {
        id: u64,
        parent_id: u64,
        child: TaskCategory,
        parent: TaskCategory,
    },
    #[error("lineage cycle through record {id}")]
    LineageCycle { id: u64 },
    #[error("record {id} contains non-UTF-8 content (U+FFFD replacement character)")]
    NonUtf8 { id: u64 },
}

/// An ordered, validated collection of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<InstructionRecord>,
    pub metadata: CorpusMetadata,
}

impl Corpus {
    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            records: Vec::new(),
            metadata: CorpusMetadata {
                name: name.into(),
                ..Default::default()
            },
        }
    }

    /// Builds a corpus, checking every invariant. Records must already be in
    /// strictly increasing id order.
    pub fn new(records: Vec<InstructionRecord>, metadata: CorpusMetadata) -> Result<Self, CorpusError> {
        validate(&records)?;
        Ok(Self { records, metadata })
    }

    /// Sorts by id first, then validates.
    pub fn from_unsorted(mut records: Vec<InstructionRecord>, metadata: CorpusMetadata) -> Result<Self, CorpusError> {
        records.sort_by_key(|r| r.id);
        Self::new(records, metadata)
    }

    pub fn records(&self) -> &[InstructionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&InstructionRecord> {
        self.records
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn max_id(&self) -> Option<u64> {
        self.records.last().map(|r| r.id)
    }

    pub fn into_records(self) -> Vec<InstructionRecord> {
        self.records
    }

    /// Canonical JSONL bytes, one record per line with a trailing newline.
    pub fn to_jsonl(&self) -> Result<String, CorpusError> {
        let mut out = String::new();
        for r in &self.records {
            if r.instruction.contains('\u{FFFD}') || r.response.contains('\u{FFFD}') {
                return Err(CorpusError::NonUtf8 { id: r.id });
            }
            out.push_str(&r.to_canonical_line());
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, metadata: CorpusMetadata) -> Result<Self, CorpusError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec = InstructionRecord::from_json_line(line)
                .map_err(|message| CorpusError::Parse { line: i + 1, message })?;
            records.push(rec);
        }
        Self::new(records, metadata)
    }
}

fn validate(records: &[InstructionRecord]) -> Result<(), CorpusError> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id) {
            return Err(CorpusError::DuplicateId { id: r.id });
        }
    }
    for w in records.windows(2) {
        if w[1].id <= w[0].id {
            return Err(CorpusError::NotIncreasing {
                id: w[1].id,
                previous: w[0].id,
            });
        }
    }
    let by_id: HashMap<u64, &InstructionRecord> = records.iter().map(|r| (r.id, r)).collect();
    for r in records {
        if r.source != Source::Seed && r.parent_id.is_none() {
            return Err(CorpusError::MissingParent { id: r.id });
        }
        if let Some(pid) = r.parent_id {
            let parent = by_id.get(&pid).ok_or(CorpusError::DanglingParent {
                id: r.id,
                parent_id: pid,
            })?;
            if parent.task_category != r.task_category {
                return Err(CorpusError::CategoryMismatch {
                    id: r.id,
                    parent_id: pid,
                    child: r.task_category,
                    parent: parent.task_category,
                });
            }
        }
    }
    for r in records {
        let mut visited = HashSet::new();
        let mut cur = r;
        while let Some(pid) = cur.parent_id {
            if !visited.insert(cur.id) {
                return Err(CorpusError::LineageCycle { id: r.id });
            }
            cur = by_id[&pid];
        }
    }
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = match String::from_utf8(bytes) {
        Ok(t) => t,
        Err(e) => {
            let offset = e.utf8_error().valid_up_to();
            let line = e.as_bytes()[..offset].iter().filter(|&&b| b == b'\n').count() + 1;
            return Err(CorpusError::Parse {
                line,
                message: "invalid UTF-8".into(),
            });
        }
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Corpus::from_jsonl(
        &text,
        CorpusMetadata {
            name,
            ..Default::default()
        },
    )
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let text = corpus.to_jsonl()?;
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(text.as_bytes()).map_err(io_err)?;
    Ok(())
}

/// Count of records per category; every category is present, possibly zero.
pub fn category_histogram(corpus: &Corpus) -> BTreeMap<TaskCategory, usize> {
    let mut hist: BTreeMap<TaskCategory, usize> = TaskCategory::ALL.iter().map(|&c| (c, 0)).collect();
    for r in corpus.records() {
        *hist.entry(r.task_category).or_default() += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, cat: TaskCategory) -> InstructionRecord {
        InstructionRecord::seed(id, cat, format!("instruction {id}")).with_response("ok")
    }

    #[test]
    fn empty_text_gives_empty_corpus() {
        let c = Corpus::from_jsonl("", CorpusMetadata::default()).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.to_jsonl().unwrap(), "");
    }

    #[test]
    fn two_lines_in_file_order() {
        let text = "{\"id\":1,\"instruction\":\"a\",\"response\":\"\",\"source\":\"seed\",\"task_category\":\"Writing\"}\n\
                    {\"id\":2,\"instruction\":\"b\",\"response\":\"x\",\"source\":\"seed\",\"task_category\":\"Coding\"}\n";
        let c = Corpus::from_jsonl(text, CorpusMetadata::default()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.records()[0].instruction, "a");
        assert_eq!(c.records()[1].task_category, TaskCategory::Coding);
        // already canonical, so the bytes come back unchanged
        assert_eq!(c.to_jsonl().unwrap(), text);
    }

    /// Linear-scan validator, independent of `validate`.
    fn first_dangling(records: &[InstructionRecord]) -> Option<u64> {
        for r in records {
            if let Some(p) = r.parent_id {
                if !records.iter().any(|o| o.id == p) {
                    return Some(r.id);
                }
            }
        }
        None
    }

    #[test]
    fn dangling_parent_names_child() {
        let mut child = rec(2, TaskCategory::Writing);
        child.source = Source::Expanded;
        child.parent_id = Some(99);
        let records = vec![rec(1, TaskCategory::Writing), child];
        assert_eq!(first_dangling(&records), Some(2));
        match Corpus::new(records, CorpusMetadata::default()) {
            Err(CorpusError::DanglingParent { id, parent_id }) => {
                assert_eq!((id, parent_id), (2, 99));
            }
            other => panic!("expected dangling parent, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "{\"id\":1,\"instruction\":\"a\",\"source\":\"seed\",\"task_category\":\"Writing\"}\nnot json\n";
        match Corpus::from_jsonl(text, CorpusMetadata::default()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_and_order_errors() {
        let r = vec![rec(3, TaskCategory::Other), rec(3, TaskCategory::Other)];
        assert!(matches!(
            Corpus::new(r, CorpusMetadata::default()),
            Err(CorpusError::DuplicateId { id: 3 })
        ));
        let r = vec![rec(3, TaskCategory::Other), rec(2, TaskCategory::Other)];
        assert!(matches!(
            Corpus::new(r, CorpusMetadata::default()),
            Err(CorpusError::NotIncreasing { id: 2, previous: 3 })
        ));
    }

    #[test]
    fn derived_needs_parent_with_same_category() {
        let mut child = rec(2, TaskCategory::Coding);
        child.source = Source::Rewritten;
        assert!(matches!(
            Corpus::new(
                vec![rec(1, TaskCategory::Writing), child.clone()],
                CorpusMetadata::default()
            ),
            Err(CorpusError::MissingParent { id: 2 })
        ));
        child.parent_id = Some(1);
        assert!(matches!(
            Corpus::new(vec![rec(1, TaskCategory::Writing), child], CorpusMetadata::default()),
            Err(CorpusError::CategoryMismatch { id: 2, .. })
        ));
    }

    #[test]
    fn lineage_cycle_detected() {
        let mut a = rec(1, TaskCategory::Other);
        a.parent_id = Some(2);
        let mut b = rec(2, TaskCategory::Other);
        b.parent_id = Some(1);
        assert!(matches!(
            Corpus::new(vec![a, b], CorpusMetadata::default()),
            Err(CorpusError::LineageCycle { .. })
        ));
    }

    #[test]
    fn scores_serialized_with_one_decimal() {
        let mut r = rec(1, TaskCategory::Writing);
        r.scores = Some(JudgeScores::new(7, 8, 8).unwrap());
        r.verified = Some(true);
        let line = r.to_canonical_line();
        assert!(line.contains("\"aggregate\":7.7"), "{line}");
        let back = InstructionRecord::from_json_line(&line).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_canonical_line(), line);
    }

    #[test]
    fn aggregate_is_mean() {
        assert_eq!(JudgeScores::new(7, 8, 9).unwrap().aggregate(), 8.0);
        assert_eq!(JudgeScores::new(10, 10, 10).unwrap().aggregate(), 10.0);
        assert!(JudgeScores::new(0, 5, 5).is_err());
        assert!(JudgeScores::new(5, 11, 5).is_err());
    }

    #[test]
    fn replacement_char_rejected_on_save() {
        let r = InstructionRecord::seed(1, TaskCategory::Other, "bad \u{FFFD} bytes");
        let c = Corpus::new(vec![r], CorpusMetadata::default()).unwrap();
        assert!(matches!(c.to_jsonl(), Err(CorpusError::NonUtf8 { id: 1 })));
    }

    #[test]
    fn histogram_counts() {
        let c = Corpus::empty("e");
        let h = category_histogram(&c);
        assert_eq!(h.len(), 9);
        assert!(h.values().all(|&v| v == 0));

        let records = vec![
            rec(1, TaskCategory::Writing),
            rec(2, TaskCategory::Writing),
            rec(3, TaskCategory::Coding),
            rec(4, TaskCategory::Writing),
        ];
        let c = Corpus::new(records, CorpusMetadata::default()).unwrap();
        let h = category_histogram(&c);
        assert_eq!(h[&TaskCategory::Writing], 3);
        assert_eq!(h[&TaskCategory::Coding], 1);
        assert_eq!(h.values().sum::<usize>(), 4);
    }
}
