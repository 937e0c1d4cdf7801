//! Staged training: supervised fine-tuning on a corpus, then distillation
//! against stored teacher logits, with held-out evaluation.

use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::kdcore::{DivergenceConfig, DivergenceKind};
use crate::logitstore::{extract_sequences, LogitStoreError, TeacherTargets};
use crate::model::{
    ce_loss_and_grads, dataset_loss, kd_loss_and_grads, optimizer_step, save_checkpoint, AdamState, ModelConfig,
    ModelError, StudentModel, TrainingExample,
};
use crate::vocab::{AlignmentMap, Scheme, Vocabulary, UNK_ID};

pub const CHECKPOINT_FILE: &str = "checkpoint.dqcm";
pub const LAST_GOOD_FILE: &str = "last-good.dqcm";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid stage plan: {0}")]
    BadPlan(String),
    #[error("the kd stage needs teacher shards")]
    MissingShards,
    #[error("no training examples")]
    NoTrainingData,
    #[error("held-out set is empty")]
    EmptyHeldOut,
    #[error("non-finite loss at step {step}; last good model kept{}", checkpoint.as_ref().map(|p| format!(" at {}", p.display())).unwrap_or_default())]
    NonFiniteLoss { step: u64, checkpoint: Option<PathBuf> },
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    LogitStore(#[from] LogitStoreError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainerError + '_ {
    move |source| TrainerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sft,
    Kd,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Kd => "kd",
        }
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sft" => Ok(Stage::Sft),
            "kd" => Ok(Stage::Kd),
            _ => Err(format!("unknown stage {s:?}; expected sft or kd")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperDefaults,
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-defaults" => Ok(Preset::PaperDefaults),
            _ => Err(format!("unknown preset {s:?}; expected desk or paper-defaults")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub divergence: DivergenceConfig,
    /// Weight of the KD term; the rest goes to cross-entropy. Ignored for sft.
    pub alpha: f64,
    /// Evaluate every this many optimizer steps; 0 evaluates only at the end.
    pub eval_every: u64,
    pub seed: u64,
}

impl StagePlan {
    pub fn preset(stage: Stage, preset: Preset) -> Self {
        let lr = match preset {
            Preset::Desk => 3e-4,
            Preset::PaperDefaults => 1e-5,
        };
        Self {
            stage,
            epochs: 3,
            batch_size: 16,
            lr,
            divergence: DivergenceConfig::default(),
            alpha: 1.0,
            eval_every: 50,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: String| Err(TrainerError::BadPlan(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        self.divergence
            .validate()
            .map_err(|e| TrainerError::BadPlan(e.to_string()))?;
        Ok(())
    }

    pub fn steps_for(&self, n: usize) -> u64 {
        (self.epochs * n.div_ceil(self.batch_size)) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: Option<Stage>,
    pub step: u64,
    pub heldout_ce: f64,
    /// Mean forward KL from the teacher's top-K distribution to the student's.
    pub heldout_kl: Option<f64>,
    /// Fraction of positions where the student's argmax is the teacher's top-1 token.
    pub top1_agreement: Option<f64>,
    /// Seconds since the stage started; set only by [`run_stage`].
    pub wall_clock_secs: Option<f64>,
}

/// Deterministic 90/10 split: a sample is held out when the FNV-1a hash of its id is 0 mod 10.
pub fn is_heldout(sample_id: u64) -> bool {
    let mut h = FnvHasher::default();
    h.write_u64(sample_id);
    h.finish() % 10 == 0
}

pub fn split_heldout(examples: &[TrainingExample]) -> (Vec<TrainingExample>, Vec<TrainingExample>) {
    examples.iter().cloned().partition(|e| !is_heldout(e.sample_id))
}

/// Tokenizes instruction and response into an example that fits `context_length`.
/// The response keeps at least half the context; the instruction keeps its tail.
/// Returns `None` when either side tokenizes to nothing.
pub fn encode_pair(
    sample_id: u64,
    instruction: &str,
    response: &str,
    vocab: &Vocabulary,
    scheme: Scheme,
    context_length: usize,
) -> Option<TrainingExample> {
    let x = vocab.tokenize(instruction, scheme);
    let mut y = vocab.tokenize(response, scheme);
    if x.is_empty() || y.is_empty() || context_length < 2 {
        return None;
    }
    let y_max = context_length - x.len().min(context_length / 2);
    y.truncate(y_max);
    let x_keep = context_length - y.len();
    let x = x[x.len().saturating_sub(x_keep)..].to_vec();
    Some(TrainingExample::new(sample_id, x, y))
}

pub fn examples_from_corpus(
    corpus: &Corpus,
    vocab: &Vocabulary,
    scheme: Scheme,
    context_length: usize,
) -> Vec<TrainingExample> {
    corpus
        .records()
        .iter()
        .filter_map(|r| encode_pair(r.id, &r.instruction, &r.response, vocab, scheme, context_length))
        .collect()
}

/// Re-expresses a teacher-tokenized example in student ids, one token per
/// teacher token, so positions stay aligned with the teacher's records.
/// Dropped tokens become the unknown id.
pub fn map_example(example: &TrainingExample, map: &AlignmentMap) -> TrainingExample {
    let f = |ids: &[u32]| ids.iter().map(|&t| map.get(t).unwrap_or(UNK_ID)).collect();
    TrainingExample::new(example.sample_id, f(&example.input), f(&example.target))
}

fn argmax(row: ndarray::ArrayView1<f64>) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Held-out metrics for a model snapshot. Deterministic; `wall_clock_secs` is left unset.
pub fn evaluate(
    model: &StudentModel,
    heldout: &[TrainingExample],
    teacher: Option<&TeacherTargets>,
    config: &DivergenceConfig,
) -> Result<EvalReport, TrainerError> {
    if heldout.is_empty() {
        return Err(TrainerError::EmptyHeldOut);
    }
    let ce = mean_ce(model, heldout)?;
    let (kl, agreement) = match teacher {
        None => (None, None),
        Some(t) => {
            let fwd = DivergenceConfig {
                kind: DivergenceKind::ForwardKl,
                ..*config
            };
            let kl = dataset_loss(model, heldout, t, &fwd)?;
            let mut hits = 0usize;
            let mut total = 0usize;
            for ex in heldout {
                let logits = model.forward_logits(ex)?;
                let records = t.get(ex.sample_id).ok_or(ModelError::MissingTeacher {
                    sample_id: ex.sample_id,
                })?;
                for (n, r) in records.iter().enumerate() {
                    if let Some(r) = r {
                        total += 1;
                        hits += usize::from(argmax(logits.row(n)) == r.top1());
                    }
                }
            }
            let agreement = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
            (Some(kl), Some(agreement))
        }
    };
    Ok(EvalReport {
        stage: None,
        step: model.step(),
        heldout_ce: ce,
        heldout_kl: kl,
        top1_agreement: agreement,
        wall_clock_secs: None,
    })
}

fn mean_ce(model: &StudentModel, batch: &[TrainingExample]) -> Result<f64, TrainerError> {
    let mut total = 0.0;
    for ex in batch {
        let logits = model.forward_logits(ex)?;
        let mut s = 0.0;
        for (n, &y) in ex.target.iter().enumerate() {
            let row = logits.row(n);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            s += lse - row[y as usize];
        }
        total += s / ex.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Training data for one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageData<'a> {
    pub train: &'a [TrainingExample],
    pub heldout: &'a [TrainingExample],
    /// Required for kd; when present during sft it is used for evaluation only.
    pub teacher: Option<&'a TeacherTargets>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub model: StudentModel,
    pub reports: Vec<EvalReport>,
    /// Training loss of every optimizer step.
    pub train_losses: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains for `epochs x ceil(N / batch_size)` Adam steps. Each epoch visits
/// the training set in an order shuffled from `(seed, epoch)`. Reports are
/// taken every `eval_every` steps and after the last step. With `out_dir`,
/// appends to `metrics.jsonl` and writes the final checkpoint; a non-finite loss stops
/// training and saves the last good model instead.
pub fn run_stage(
    model: StudentModel,
    data: StageData<'_>,
    plan: &StagePlan,
    out_dir: Option<&Path>,
) -> Result<StageOutcome, TrainerError> {
    plan.validate()?;
    if plan.stage == Stage::Kd && data.teacher.is_none() {
        return Err(TrainerError::MissingShards);
    }
    if data.train.is_empty() {
        return Err(TrainerError::NoTrainingData);
    }
    for ex in data.train.iter().chain(data.heldout) {
        model.check_example(ex)?;
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut metrics = match out_dir {
        Some(dir) => {
            let p = dir.join(METRICS_FILE);
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(io_err(&p))?;
            Some((f, p))
        }
        None => None,
    };

    let start = Instant::now();
    let mut model = model;
    let mut adam = AdamState::new(&model);
    let mut reports = Vec::new();
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut emit = |model: &StudentModel, reports: &mut Vec<EvalReport>| -> Result<(), TrainerError> {
        if data.heldout.is_empty() {
            return Ok(());
        }
        let mut r = evaluate(model, data.heldout, data.teacher, &plan.divergence)?;
        r.stage = Some(plan.stage);
        r.wall_clock_secs = Some(start.elapsed().as_secs_f64());
        log::info!(
            "{} step {}: ce {:.4} kl {:?} agreement {:?}",
            plan.stage.as_str(),
            r.step,
            r.heldout_ce,
            r.heldout_kl,
            r.top1_agreement
        );
        if let Some((f, p)) = metrics.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&r)?).map_err(io_err(p))?;
        }
        reports.push(r);
        Ok(())
    };

    let mut step_in_stage = 0u64;
    for epoch in 0..plan.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        for chunk in order.chunks(plan.batch_size) {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let result = match (plan.stage, data.teacher) {
                (Stage::Kd, Some(t)) => kd_loss_and_grads(&model, &batch, t, &plan.divergence, plan.alpha),
                _ => ce_loss_and_grads(&model, &batch),
            };
            let (loss, grads) = result?;
            let stepped = if loss.total.is_finite() {
                optimizer_step(&mut model, &grads, plan.lr, &mut adam)
            } else {
                Err(ModelError::BadConfig("non-finite loss".into()))
            };
            if let Err(e) = stepped {
                match e {
                    ModelError::NonFiniteGradient { .. } | ModelError::BadConfig(_) => {
                        let checkpoint = match out_dir {
                            Some(dir) => {
                                let p = dir.join(LAST_GOOD_FILE);
                                save_checkpoint(&model, &p)?;
                                Some(p)
                            }
                            None => None,
                        };
                        return Err(TrainerError::NonFiniteLoss {
                            step: model.step(),
                            checkpoint,
                        });
                    }
                    other => return Err(other.into()),
                }
            }
            losses.push(loss.total);
            step_in_stage += 1;
            if plan.eval_every > 0 && step_in_stage % plan.eval_every == 0 {
                emit(&model, &mut reports)?;
            }
        }
    }
    if reports.last().is_none_or(|r| r.step != model.step()) {
        emit(&model, &mut reports)?;
    }
    let checkpoint = match out_dir {
        Some(dir) => {
            let p = dir.join(CHECKPOINT_FILE);
            save_checkpoint(&model, &p)?;
            Some(p)
        }
        None => None,
    };
    Ok(StageOutcome {
        model,
        reports,
        train_losses: losses,
        checkpoint,
    })
}

/// One finished stage as recorded in `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub preset: Option<Preset>,
    pub plan: StagePlan,
    pub model: ModelConfig,
    /// Model step counter when the stage finished.
    pub final_step: u64,
    pub final_train_loss: Option<f64>,
    pub final_eval: Option<EvalReport>,
    pub checkpoint: Option<PathBuf>,
}

/// Contents of `report.json`: every stage run into one output directory, in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub stages: Vec<StageSummary>,
}

impl TrainingReport {
    pub fn load(path: &Path) -> Result<Self, TrainerError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Appends `summary` to `dir/report.json`, creating it if needed.
pub fn append_stage_report(dir: &Path, summary: StageSummary) -> Result<TrainingReport, TrainerError> {
    let path = dir.join(REPORT_FILE);
    let mut report = if path.exists() {
        TrainingReport::load(&path)?
    } else {
        TrainingReport::default()
    };
    report.stages.push(summary);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(io_err(&path))?;
    Ok(report)
}

/// Trailing-window moving average; element `i` averages `losses[i+1-w..=i]`.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    losses.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

/// One row of a teacher-size sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub teacher: ModelConfig,
    pub teacher_params: usize,
    pub teacher_heldout_ce: f64,
    pub student: EvalReport,
}

/// Trains each teacher config with `teacher_plan`, distills a fresh student
/// from it with `student_plan`, and reports the distilled student. The
/// student always sees the same data and step budget.
pub fn teacher_sweep(
    teachers: &[ModelConfig],
    student: ModelConfig,
    train: &[TrainingExample],
    heldout: &[TrainingExample],
    teacher_plan: &StagePlan,
    student_plan: &StagePlan,
    k: usize,
) -> Result<Vec<SweepRow>, TrainerError> {
    let mut rows = Vec::new();
    let all: Vec<TrainingExample> = train.iter().chain(heldout).cloned().collect();
    for &cfg in teachers {
        let t = run_stage(
            StudentModel::new(cfg)?,
            StageData {
                train,
                heldout,
                teacher: None,
            },
            teacher_plan,
            None,
        )?;
        let teacher_heldout_ce = evaluate(&t.model, heldout, None, &student_plan.divergence)?.heldout_ce;
        let targets = TeacherTargets::from_sequences(0, extract_sequences(&t.model, &all, k)?)?;
        let s = run_stage(
            StudentModel::new(student)?,
            StageData {
                train,
                heldout,
                teacher: Some(&targets),
            },
            student_plan,
            None,
        )?;
        rows.push(SweepRow {
            teacher: cfg,
            teacher_params: t.model.params.num_scalars(),
            teacher_heldout_ce,
            student: s.reports.last().cloned().expect("final report"),
        });
    }
    Ok(rows)
}

/// Plain-text table of sweep rows.
pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::from("d_model layers heads   params  teacher_ce  student_ce  student_kl  agreement\n");
    for r in rows {
        s.push_str(&format!(
            "{:>7} {:>6} {:>5} {:>8} {:>11.4} {:>11.4} {:>11.4} {:>10.4}\n",
            r.teacher.d_model,
            r.teacher.n_layers,
            r.teacher.n_heads,
            r.teacher_params,
            r.teacher_heldout_ce,
            r.student.heldout_ce,
            r.student.heldout_kl.unwrap_or(f64::NAN),
            r.student.top1_agreement.unwrap_or(f64::NAN),
        ));
    }
    s
}
