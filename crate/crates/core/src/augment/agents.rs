use std::collections::{BTreeMap, HashSet};

use serde_json::Value;

use super::backend::{backend_complete, Backend, BackendRequest};
use super::prompts::*;
use super::{AugmentError, PipelinePlan, Verdict, JUDGE_PARSE_FAILURE};
use crate::corpus::{InstructionRecord, JudgeScores, Source, TaskCategory};

/// Agent calls sharing one backend and sampling settings.
#[derive(Clone, Copy)]
pub struct Agents<'a> {
    pub backend: &'a dyn Backend,
    pub seed: u64,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandOutcome {
    pub records: Vec<InstructionRecord>,
    /// How many of the requested variants could not be produced distinctly.
    pub shortfall: usize,
}

/// The first `{...}` span of a reply, parsed as a JSON object.
fn json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    if end < start {
        return None;
    }
    match serde_json::from_str(&text[start..=end]).ok()? {
        Value::Object(m) => Some(m),
        _ => None,
    }
}

impl<'a> Agents<'a> {
    pub fn new(backend: &'a dyn Backend, plan: &PipelinePlan) -> Self {
        Self {
            backend,
            seed: plan.seed,
            temperature: plan.temperature,
            max_tokens: plan.max_tokens,
        }
    }

    fn call(&self, id: u64, system: &str, user: String) -> Result<String, AugmentError> {
        let req = BackendRequest {
            system_prompt: system.to_string(),
            user_prompt: user,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            seed: self.seed,
        };
        backend_complete(self.backend, &req).map_err(|source| AugmentError::Backend { id, source })
    }

    /// Up to `n` distinct variations of the record's instruction with ids
    /// `first_id..first_id + n`. Colliding variants are retried with fresh
    /// variant numbers until `retry_budget` extra attempts are spent.
    pub fn expand(
        &self,
        record: &InstructionRecord,
        n: usize,
        first_id: u64,
        retry_budget: usize,
    ) -> Result<ExpandOutcome, AugmentError> {
        if record.instruction.trim().is_empty() {
            return Err(AugmentError::Precondition {
                id: record.id,
                message: "cannot expand an empty instruction".into(),
            });
        }
        let mut seen: HashSet<String> = HashSet::from([record.instruction.trim().to_string()]);
        let mut records = Vec::with_capacity(n);
        let mut variant = 0;
        while records.len() < n && variant < n + retry_budget {
            variant += 1;
            let mut vars = record_vars(record);
            vars.insert("variant", variant.to_string());
            let text = self.call(record.id, EXPAND_SYSTEM, render(EXPAND_USER, &vars))?;
            let text = text.trim().to_string();
            if seen.insert(text.clone()) {
                records.push(InstructionRecord {
                    id: first_id + records.len() as u64,
                    instruction: text,
                    response: String::new(),
                    task_category: record.task_category,
                    source: Source::Expanded,
                    parent_id: Some(record.id),
                    scores: None,
                    verified: None,
                });
            }
        }
        let shortfall = n - records.len();
        if shortfall > 0 {
            log::warn!(
                "record {}: only {} of {n} distinct expansions",
                record.id,
                records.len()
            );
        }
        Ok(ExpandOutcome { records, shortfall })
    }

    /// Fills the empty response from the teacher.
    pub fn generate_response(&self, record: &InstructionRecord) -> Result<InstructionRecord, AugmentError> {
        if !record.response.is_empty() {
            return Err(AugmentError::Precondition {
                id: record.id,
                message: "record already has a response".into(),
            });
        }
        let text = self.call(record.id, RESPOND_SYSTEM, render(RESPOND_USER, &record_vars(record)))?;
        Ok(InstructionRecord {
            response: text.trim().to_string(),
            ..record.clone()
        })
    }

    /// A rewritten copy under `new_id`. Records in `cot_categories` get the
    /// step-by-step directive.
    pub fn rewrite(
        &self,
        record: &InstructionRecord,
        cot_categories: &std::collections::BTreeSet<TaskCategory>,
        new_id: u64,
    ) -> Result<InstructionRecord, AugmentError> {
        if record.instruction.trim().is_empty() || record.response.trim().is_empty() {
            return Err(AugmentError::Precondition {
                id: record.id,
                message: "rewrite needs an instruction and a response".into(),
            });
        }
        let mut vars = record_vars(record);
        let directive = if cot_categories.contains(&record.task_category) {
            REWRITE_COT
        } else {
            REWRITE_PLAIN
        };
        vars.insert("directive", directive.trim().to_string());
        let reply = self.call(record.id, REWRITE_SYSTEM, render(REWRITE_USER, &vars))?;
        let bad = |m: &str| AugmentError::BadReply {
            id: record.id,
            agent: "rewrite",
            message: m.to_string(),
        };
        let obj = json_object(&reply).ok_or_else(|| bad("no JSON object"))?;
        let field = |k: &str| {
            obj.get(k)
                .and_then(Value::as_str)
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| bad(&format!("missing or empty \"{k}\"")))
        };
        Ok(InstructionRecord {
            id: new_id,
            instruction: field("instruction")?,
            response: field("response")?,
            task_category: record.task_category,
            source: Source::Rewritten,
            parent_id: Some(record.id),
            scores: None,
            verified: None,
        })
    }

    /// Judge verdict on factual correctness. Unparseable replies fail with
    /// [`JUDGE_PARSE_FAILURE`].
    pub fn verify(&self, record: &InstructionRecord) -> Result<Verdict, AugmentError> {
        if record.instruction.trim().is_empty() || record.response.trim().is_empty() {
            return Err(AugmentError::Precondition {
                id: record.id,
                message: "verification needs an instruction and a response".into(),
            });
        }
        let reply = self.call(record.id, VERIFY_SYSTEM, render(VERIFY_USER, &record_vars(record)))?;
        let Some(obj) = json_object(&reply) else {
            return Ok(Verdict::fail(JUDGE_PARSE_FAILURE));
        };
        Ok(match obj.get("pass").and_then(Value::as_bool) {
            Some(true) => Verdict::pass(),
            Some(false) => Verdict::fail(obj.get("reason").and_then(Value::as_str).unwrap_or_default()),
            None => Verdict::fail(JUDGE_PARSE_FAILURE),
        })
    }

    /// Judge scores, with one reprompt when the first reply cannot be parsed.
    pub fn score(&self, record: &InstructionRecord) -> Result<JudgeScores, AugmentError> {
        let user = render(SCORE_USER, &record_vars(record));
        let first = self.call(record.id, SCORE_SYSTEM, user.clone())?;
        if let Some(s) = parse_scores(&first) {
            return Ok(s);
        }
        let second = self.call(record.id, SCORE_SYSTEM, format!("{user}{SCORE_REPROMPT}"))?;
        parse_scores(&second).ok_or_else(|| AugmentError::BadReply {
            id: record.id,
            agent: "score",
            message: format!(
                "unparseable after reprompt: {:?}",
                second.chars().take(80).collect::<String>()
            ),
        })
    }
}

fn parse_scores(reply: &str) -> Option<JudgeScores> {
    let obj = json_object(reply)?;
    let get = |k: &str| obj.get(k)?.as_u64().filter(|v| (1..=10).contains(v)).map(|v| v as u8);
    JudgeScores::new(get("informativeness")?, get("helpfulness")?, get("generalization")?).ok()
}

fn score_sum(r: &InstructionRecord) -> u32 {
    r.scores.map_or(0, |s| {
        s.informativeness() as u32 + s.helpfulness() as u32 + s.generalization() as u32
    })
}

/// Task-balanced selection.
///
/// Eligible records are scored, verified, and have aggregate at least the
/// threshold. Each category keeps its best `per_category_cap` records by
/// descending aggregate, then ascending id. If more than `target_size`
/// remain, records are taken rank by rank across categories (all firsts,
/// then all seconds, ...), each rank ordered the same way. Output is sorted by id.
pub fn select(records: &[InstructionRecord], plan: &PipelinePlan) -> Vec<InstructionRecord> {
    let by_quality =
        |a: &&InstructionRecord, b: &&InstructionRecord| score_sum(b).cmp(&score_sum(a)).then(a.id.cmp(&b.id));
    let mut groups: BTreeMap<TaskCategory, Vec<&InstructionRecord>> = BTreeMap::new();
    for r in records {
        let eligible = r.verified == Some(true) && r.scores.is_some_and(|s| s.aggregate() >= plan.selection_threshold);
        if eligible {
            groups.entry(r.task_category).or_default().push(r);
        }
    }
    for g in groups.values_mut() {
        g.sort_by(by_quality);
        g.truncate(plan.per_category_cap);
    }
    let depth = groups.values().map(Vec::len).max().unwrap_or(0);
    let mut chosen: Vec<&InstructionRecord> = Vec::new();
    'outer: for rank in 0..depth {
        let mut tier: Vec<&InstructionRecord> = groups.values().filter_map(|g| g.get(rank).copied()).collect();
        tier.sort_by(by_quality);
        for r in tier {
            if chosen.len() == plan.target_size {
                break 'outer;
            }
            chosen.push(r);
        }
    }
    chosen.sort_by_key(|r| r.id);
    chosen.into_iter().cloned().collect()
}
