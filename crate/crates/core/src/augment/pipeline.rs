use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::agents::{select, Agents};
use super::backend::Backend;
use super::{AugmentError, PipelinePlan};
use crate::corpus::{Corpus, CorpusMetadata, InstructionRecord};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordIssue {
    pub id: u64,
    pub stage: String,
    pub reason: String,
}

impl RecordIssue {
    fn new(id: u64, stage: &str, reason: impl ToString) -> Self {
        Self {
            id,
            stage: stage.to_string(),
            reason: reason.to_string(),
        }
    }

    /// Issue whose reason is the error message followed by all its causes.
    fn failed(id: u64, stage: &str, err: &AugmentError) -> Self {
        let mut reason = err.to_string();
        let mut cur = std::error::Error::source(err);
        while let Some(e) = cur {
            reason.push_str(": ");
            reason.push_str(&e.to_string());
            cur = e.source();
        }
        Self::new(id, stage, reason)
    }
}

/// Per-stage counts plus every record that was rejected by the verifier or
/// lost to a failure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stage_counts: BTreeMap<String, usize>,
    pub rejected: Vec<RecordIssue>,
    pub failures: Vec<RecordIssue>,
}

impl PipelineReport {
    /// True when some record was lost to a backend, parse or precondition failure.
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    fn count(&mut self, stage: &str, n: usize) {
        *self.stage_counts.entry(stage.to_string()).or_default() += n;
    }
}

fn ancestors_ok(id: u64, records: &BTreeMap<u64, InstructionRecord>) -> bool {
    let mut cur = Some(id);
    while let Some(i) = cur {
        match records.get(&i) {
            Some(r) if r.verified == Some(true) => cur = r.parent_id,
            _ => return false,
        }
    }
    true
}

/// Runs expand, respond, rewrite, verify, score and select over the seeds.
///
/// Every input record is a seed. Expansions take ids after the largest
/// input id, in blocks of `expansions_per_seed` per seed in id order;
/// rewrites follow in lineage order. Every generated pair is verified, and a
/// lineage is a selection candidate only if the candidate and all its
/// ancestors passed. The output holds the selected records plus their
/// ancestors so that every parent resolves. Agent calls run on up to
/// `plan.parallelism` threads; results are merged by id, so the output does
/// not depend on completion order.
pub fn run_pipeline(
    seed_corpus: &Corpus,
    plan: &PipelinePlan,
    backend: &dyn Backend,
) -> Result<(Corpus, PipelineReport), AugmentError> {
    plan.validate()?;
    let mut report = PipelineReport::default();
    let metadata = CorpusMetadata {
        name: format!("{}-augmented", seed_corpus.metadata.name),
        created_unix: seed_corpus.metadata.created_unix,
        stage: Some("augmented".into()),
    };
    let Some(max_id) = seed_corpus.max_id() else {
        return Ok((Corpus::new(Vec::new(), metadata)?, report));
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.parallelism)
        .build()
        .map_err(|e| AugmentError::BadPlan(format!("thread pool: {e}")))?;
    let agents = Agents::new(backend, plan);
    let seeds = seed_corpus.records();
    let n = plan.expansions_per_seed;
    report.count("seeds", seeds.len());

    // expand
    let expansions: Vec<_> = pool.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(i, s)| agents.expand(s, n, max_id + 1 + (i * n) as u64, plan.expansion_retry_budget))
            .collect()
    });
    let mut roots: Vec<InstructionRecord> = Vec::new();
    for (seed, outcome) in seeds.iter().zip(expansions) {
        roots.push(seed.clone());
        match outcome {
            Ok(o) => {
                if o.shortfall > 0 {
                    report.failures.push(RecordIssue::new(
                        seed.id,
                        "expand",
                        format!("{} of {n} variants were duplicates", o.shortfall),
                    ));
                }
                report.count("expanded", o.records.len());
                roots.extend(o.records);
            }
            Err(e) if n > 0 => report.failures.push(RecordIssue::failed(seed.id, "expand", &e)),
            Err(_) => {}
        }
    }
    roots.sort_by_key(|r| r.id);

    // respond
    let responded: Vec<_> = pool.install(|| {
        roots
            .par_iter()
            .map(|r| {
                if r.response.is_empty() {
                    agents.generate_response(r)
                } else {
                    Ok(r.clone())
                }
            })
            .collect()
    });
    let mut working: BTreeMap<u64, InstructionRecord> = BTreeMap::new();
    let mut finals: Vec<u64> = Vec::new();
    let mut answered: Vec<InstructionRecord> = Vec::new();
    for (root, res) in roots.iter().zip(responded) {
        match res {
            Ok(r) => {
                if root.response.is_empty() {
                    report.count("responded", 1);
                }
                answered.push(r);
            }
            Err(e) => report.failures.push(RecordIssue::failed(root.id, "respond", &e)),
        }
    }

    // rewrite
    let next_id = max_id + 1 + (seeds.len() * n) as u64;
    if plan.rewrite_enabled {
        let rewrites: Vec<_> = pool.install(|| {
            answered
                .par_iter()
                .enumerate()
                .map(|(i, r)| agents.rewrite(r, &plan.cot_categories, next_id + i as u64))
                .collect()
        });
        for (r, res) in answered.iter().zip(rewrites) {
            match res {
                Ok(rw) => {
                    report.count("rewritten", 1);
                    finals.push(rw.id);
                    working.insert(rw.id, rw);
                }
                Err(e) => report.failures.push(RecordIssue::failed(r.id, "rewrite", &e)),
            }
        }
    } else {
        finals.extend(answered.iter().map(|r| r.id));
    }
    for r in answered {
        working.insert(r.id, r);
    }

    // verify every generated pair
    let ids: Vec<u64> = working.keys().copied().collect();
    let verdicts: Vec<_> = pool.install(|| ids.par_iter().map(|id| agents.verify(&working[id])).collect());
    for (id, v) in ids.iter().zip(verdicts) {
        let rec = working.get_mut(id).expect("id from working set");
        match v {
            Ok(v) if v.pass => {
                rec.verified = Some(true);
                report.count("verified_pass", 1);
            }
            Ok(v) => {
                rec.verified = Some(false);
                report.count("verified_fail", 1);
                report.rejected.push(RecordIssue::new(*id, "verify", v.reason));
            }
            Err(e) => report.failures.push(RecordIssue::failed(*id, "verify", &e)),
        }
    }

    // score candidates whose whole lineage passed
    let candidates: Vec<u64> = finals.into_iter().filter(|&id| ancestors_ok(id, &working)).collect();
    report.count("candidates", candidates.len());
    let scores: Vec<_> = pool.install(|| candidates.par_iter().map(|id| agents.score(&working[id])).collect());
    let mut scored = Vec::new();
    for (id, s) in candidates.iter().zip(scores) {
        match s {
            Ok(s) => {
                let rec = working.get_mut(id).expect("candidate in working set");
                rec.scores = Some(s);
                scored.push(rec.clone());
                report.count("scored", 1);
            }
            Err(e) => report.failures.push(RecordIssue::failed(*id, "score", &e)),
        }
    }

    let selected = select(&scored, plan);
    report.count("selected", selected.len());
    let mut out: BTreeMap<u64, InstructionRecord> = BTreeMap::new();
    for r in selected {
        let mut parent = r.parent_id;
        out.insert(r.id, r);
        while let Some(p) = parent {
            if out.contains_key(&p) {
                break;
            }
            let rec = working[&p].clone();
            parent = rec.parent_id;
            out.insert(p, rec);
        }
    }
    report.count("emitted", out.len());
    report.rejected.sort();
    report.failures.sort();
    let corpus = Corpus::new(out.into_values().collect(), metadata)?;
    Ok((corpus, report))
}
