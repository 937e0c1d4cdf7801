use std::collections::BTreeMap;

use distilkd::augment::{run_pipeline, select, MockBackend, MockConfig, PipelinePlan, MOCK_COT_MARKER};
use distilkd::corpus::{Corpus, CorpusMetadata, InstructionRecord, JudgeScores, Source, TaskCategory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seeds(n: usize) -> Corpus {
    let records = (0..n)
        .map(|i| {
            let cat = TaskCategory::ALL[i % 9];
            InstructionRecord::seed(i as u64 + 1, cat, format!("Task {i}: describe topic number {}.", i * 7))
        })
        .collect();
    Corpus::new(records, CorpusMetadata::default()).unwrap()
}

fn plan(target: usize) -> PipelinePlan {
    PipelinePlan {
        parallelism: 3,
        ..PipelinePlan::with_target(target)
    }
}

#[test]
fn deterministic_across_runs_and_thread_counts() {
    let corpus = seeds(27);
    let backend = MockBackend::default();
    let (a, ra) = run_pipeline(&corpus, &plan(40), &backend).unwrap();
    let (b, rb) = run_pipeline(&corpus, &plan(40), &backend).unwrap();
    let single = PipelinePlan {
        parallelism: 1,
        ..plan(40)
    };
    let (c, _) = run_pipeline(&corpus, &single, &backend).unwrap();
    assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
    assert_eq!(a.to_jsonl().unwrap(), c.to_jsonl().unwrap());
    assert_eq!(ra, rb);
    let other_seed = PipelinePlan { seed: 7, ..plan(40) };
    let (d, _) = run_pipeline(&corpus, &other_seed, &backend).unwrap();
    assert_ne!(a.to_jsonl().unwrap(), d.to_jsonl().unwrap());
}

#[test]
fn lineage_and_category_invariants() {
    let (out, report) = run_pipeline(&seeds(18), &plan(30), &MockBackend::default()).unwrap();
    assert!(report.failures.is_empty());
    let by_id: BTreeMap<u64, &InstructionRecord> = out.records().iter().map(|r| (r.id, r)).collect();
    let mut selected = 0;
    for r in out.records() {
        assert!(!r.response.is_empty());
        assert_eq!(r.verified, Some(true));
        if let Some(p) = r.parent_id {
            assert_eq!(by_id[&p].task_category, r.task_category);
            assert_ne!(r.source, Source::Seed);
        }
        if r.scores.is_some() {
            selected += 1;
        }
        if r.source == Source::Rewritten {
            let cot = plan(30).cot_categories.contains(&r.task_category);
            assert_eq!(r.response.contains(MOCK_COT_MARKER), cot, "{r:?}");
        }
    }
    assert_eq!(selected, report.stage_counts["selected"]);
    assert!(selected <= 30);
    assert_eq!(report.stage_counts["seeds"], 18);
    assert_eq!(report.stage_counts["expanded"], 36);
    assert_eq!(report.stage_counts["rewritten"], 54);
}

#[test]
fn verifier_rejections_block_lineages() {
    let mut cfg = MockConfig::default();
    cfg.verify_fail_ids.extend([1, 2]);
    let (out, report) = run_pipeline(&seeds(9), &plan(50), &MockBackend::new(cfg)).unwrap();
    assert!(report.failures.is_empty());
    assert!(report
        .rejected
        .iter()
        .any(|r| r.id == 1 && r.stage == "verify" && !r.reason.is_empty()));
    for r in out.records() {
        let mut cur = Some(r.id);
        while let Some(id) = cur {
            assert!(id != 1 && id != 2, "record {} descends from a rejected record", r.id);
            cur = out.get(id).and_then(|x| x.parent_id);
        }
    }
}

#[test]
fn backend_failures_make_a_partial_report() {
    let mut cfg = MockConfig::default();
    cfg.transport_fail_ids.insert(4);
    cfg.score_malformed_ids.insert(3);
    let (out, report) = run_pipeline(&seeds(9), &plan(50), &MockBackend::new(cfg)).unwrap();
    assert!(report.is_partial());
    assert!(report.failures.iter().any(|f| f.id == 4 && f.stage == "expand"));
    assert!(out.get(4).is_none());
    assert!(!out.records().is_empty());
}

#[test]
fn empty_seed_corpus() {
    let (out, report) = run_pipeline(&seeds(0), &plan(10), &MockBackend::default()).unwrap();
    assert!(out.is_empty());
    assert!(!report.is_partial());
}

fn score_sum(r: &InstructionRecord) -> u32 {
    let s = r.scores.unwrap();
    u32::from(s.informativeness()) + u32::from(s.helpfulness()) + u32::from(s.generalization())
}

/// Brute-force selection: rank every eligible record within its category,
/// drop ranks beyond the cap, then take the `target` smallest
/// (rank, -score, id) triples.
fn reselect(records: &[InstructionRecord], plan: &PipelinePlan) -> Vec<u64> {
    let mut keyed: Vec<(usize, i64, u64)> = Vec::new();
    for r in records {
        if r.verified != Some(true) || r.scores.map_or(true, |s| s.aggregate() < plan.selection_threshold) {
            continue;
        }
        let rank = records
            .iter()
            .filter(|o| {
                o.task_category == r.task_category
                    && o.verified == Some(true)
                    && o.scores.is_some_and(|s| s.aggregate() >= plan.selection_threshold)
                    && (score_sum(o) > score_sum(r) || (score_sum(o) == score_sum(r) && o.id < r.id))
            })
            .count();
        if rank < plan.per_category_cap {
            keyed.push((rank, -i64::from(score_sum(r)), r.id));
        }
    }
    keyed.sort();
    let mut ids: Vec<u64> = keyed.into_iter().take(plan.target_size).map(|k| k.2).collect();
    ids.sort();
    ids
}

#[test]
fn selection_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // skewed category weights
    let weights = [30, 5, 12, 1, 20, 8, 3, 15, 6];
    let total: u32 = weights.iter().sum();
    let records: Vec<InstructionRecord> = (0..500u64)
        .map(|id| {
            let mut x = rng.random_range(0..total);
            let mut c = 0;
            while x >= weights[c] {
                x -= weights[c];
                c += 1;
            }
            let s = JudgeScores::new(
                rng.random_range(1..=10),
                rng.random_range(3..=10),
                rng.random_range(4..=10),
            )
            .unwrap();
            InstructionRecord {
                scores: Some(s),
                verified: Some(rng.random_bool(0.85)),
                ..InstructionRecord::seed(id * 3 + 1, TaskCategory::ALL[c], "q").with_response("a")
            }
        })
        .collect();
    for (target, cap, threshold) in [
        (100, 12, 6.0),
        (500, 60, 1.0),
        (60, 20, 7.0),
        (9, 1, 5.0),
        (90, 10, 6.0),
    ] {
        let p = PipelinePlan {
            per_category_cap: cap,
            selection_threshold: threshold,
            ..PipelinePlan::with_target(target)
        };
        p.validate().unwrap();
        let got: Vec<u64> = select(&records, &p).iter().map(|r| r.id).collect();
        assert_eq!(
            got,
            reselect(&records, &p),
            "target {target} cap {cap} threshold {threshold}"
        );
        let mut per_cat: BTreeMap<TaskCategory, usize> = BTreeMap::new();
        for r in select(&records, &p) {
            assert!(r.scores.unwrap().aggregate() >= threshold);
            *per_cat.entry(r.task_category).or_default() += 1;
        }
        assert!(per_cat.values().all(|&n| n <= cap));
        assert!(got.len() <= target);
    }
}
