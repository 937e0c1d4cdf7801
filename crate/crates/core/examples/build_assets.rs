//! Regenerates the bundled synthetic corpus, vocabulary and trained toy teacher.
//!
//! cargo run --release -p distilkd --example build_assets [-- OUT_DIR]

use std::path::PathBuf;
use std::time::Instant;

use distilkd::corpus::save_corpus;
use distilkd::kdcore::DivergenceConfig;
use distilkd::logitstore::coverage_at;
use distilkd::model::{save_checkpoint, ModelConfig, StudentModel};
use distilkd::synth::{synthetic_corpus, synthetic_vocab};
use distilkd::trainer::{
    evaluate, examples_from_corpus, run_stage, split_heldout, Preset, Stage, StageData, StagePlan,
};
use distilkd::vocab::Scheme;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data"));
    std::fs::create_dir_all(&out)?;
    let corpus = synthetic_corpus(1000, 42);
    let vocab = synthetic_vocab(512)?;
    save_corpus(&corpus, out.join("synthetic.jsonl"))?;
    vocab.save(out.join("vocab.txt"))?;

    let cfg = ModelConfig::teacher_default();
    let examples = examples_from_corpus(&corpus, &vocab, Scheme::Char, cfg.context_length);
    let (train, heldout) = split_heldout(&examples);
    let plan = StagePlan {
        epochs: 8,
        lr: 1e-3,
        eval_every: 0,
        ..StagePlan::preset(Stage::Sft, Preset::Desk)
    };
    let start = Instant::now();
    let outcome = run_stage(
        StudentModel::new(cfg)?,
        StageData {
            train: &train,
            heldout: &heldout,
            teacher: None,
        },
        &plan,
        None,
    )?;
    let report = evaluate(&outcome.model, &heldout, None, &DivergenceConfig::default())?;
    let mut cov = [0.0; 3];
    let mut n = 0usize;
    for ex in &examples {
        let logits = outcome.model.forward_logits(ex)?;
        for row in logits.rows() {
            let row: Vec<f32> = row.iter().map(|&v| v as f32).collect();
            for (c, v) in cov.iter_mut().zip(coverage_at(&row, &[1, 5, 10])) {
                *c += v;
            }
            n += 1;
        }
    }
    println!(
        "teacher: {} steps in {:.1}s, held-out ce {:.4}, coverage@1/5/10 {:.4} {:.4} {:.4}",
        outcome.model.step(),
        start.elapsed().as_secs_f64(),
        report.heldout_ce,
        cov[0] / n as f64,
        cov[1] / n as f64,
        cov[2] / n as f64
    );
    save_checkpoint(&outcome.model, out.join("teacher.dqcm"))?;
    Ok(())
}
