//! Subcommands of the `distilkd` binary. Each `cmd_*` function is one
//! standalone step of the pipeline; all outputs go under `--out`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use distilkd::augment::{run_pipeline, Backend, HttpBackend, MockBackend, MockConfig, PipelinePlan};
use distilkd::corpus::{load_corpus, save_corpus, Corpus};
use distilkd::kdcore::DivergenceKind;
use distilkd::logitstore::{
    load_shard_set, run_extraction, ExtractionConfig, ExtractionSummary, ShardPlan, TeacherTargets,
};
use distilkd::model::{load_checkpoint, ModelConfig, StudentModel, TrainingExample};
use distilkd::trainer::{
    append_stage_report, evaluate, examples_from_corpus, map_example, run_stage, split_heldout, EvalReport, Preset,
    Stage, StageData, StagePlan, StageSummary, TrainingReport, REPORT_FILE,
};
use distilkd::vocab::{align_tokens, AlignPolicy, AlignmentMap, Scheme, Vocabulary};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const ALIGNMENT_FILE: &str = "alignment.json";

#[derive(Debug, Parser)]
#[command(name = "distilkd", version, about = "Two-stage knowledge distillation at desk scale")]
pub struct Cli {
    /// TOML file with optional [augment], [mock], [http], [model] and [distill] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Expand, answer, rewrite, verify, score and select instruction data.
    Augment(AugmentArgs),
    /// Write top-K teacher logits for a corpus into binary shards.
    ExtractLogits(ExtractArgs),
    /// Map teacher token ids onto a student vocabulary.
    AlignVocab(AlignArgs),
    /// Run one training stage (sft or kd).
    Distill(DistillArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Seed corpus (JSONL).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
    pub backend: BackendKind,
    /// Chat-completions endpoint for the http backend.
    #[arg(long, required_if_eq("backend", "http"))]
    pub backend_url: Option<String>,
}

#[derive(Debug, Args)]
pub struct TokenArgs {
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value = "char")]
    pub scheme: Scheme,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub tokens: TokenArgs,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub teacher_vocab: PathBuf,
    #[arg(long)]
    pub student_vocab: PathBuf,
    /// exact, or exact-then-prefix (longest student token that prefixes the teacher token).
    #[arg(long, default_value = "exact")]
    pub policy: AlignPolicy,
}

/// Teacher shards and, for mismatched vocabularies, the alignment to apply.
#[derive(Debug, Args)]
pub struct TeacherArgs {
    /// Directory holding shards from extract-logits.
    #[arg(long)]
    pub shards: Option<PathBuf>,
    /// Alignment map from align-vocab; sequences are then tokenized with the teacher vocabulary.
    #[arg(long, requires = "teacher_vocab")]
    pub alignment: Option<PathBuf>,
    #[arg(long)]
    pub teacher_vocab: Option<PathBuf>,
    #[arg(long, default_value = "char")]
    pub teacher_scheme: Scheme,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub stage: Stage,
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub tokens: TokenArgs,
    /// Starting checkpoint; a fresh student is built when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub teacher: TeacherArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub tokens: TokenArgs,
    #[command(flatten)]
    pub teacher: TeacherArgs,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpSettings {
    pub model: Option<String>,
    pub max_attempts: Option<u32>,
    pub timeout_secs: Option<u64>,
}

/// Overrides applied on top of a stage preset.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSettings {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub alpha: Option<f64>,
    pub eval_every: Option<u64>,
    pub divergence: Option<DivergenceKind>,
    pub mix_weight: Option<f64>,
    pub temperature: Option<f64>,
    pub k: Option<usize>,
}

/// Fresh-student architecture; the vocabulary size always comes from `--vocab`.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub context_length: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = ModelConfig::student_default();
        Self {
            context_length: c.context_length,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub augment: Option<PipelinePlan>,
    pub mock: MockConfig,
    pub http: HttpSettings,
    pub model: ModelSettings,
    pub distill: DistillSettings,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// How a successful command finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Output was written but some records were lost to failures.
    Partial,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::Partial => 2,
        }
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let config = ConfigFile::load(cli.config.as_deref())?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating output directory {}", cli.out.display()))?;
    match &cli.command {
        Command::Augment(a) => cmd_augment(a, &config, cli.seed, &cli.out),
        Command::ExtractLogits(a) => cmd_extract_logits(a, &cli.out).map(|_| Outcome::Success),
        Command::AlignVocab(a) => cmd_align_vocab(a, &cli.out).map(|_| Outcome::Success),
        Command::Distill(a) => cmd_distill(a, &config, cli.seed, &cli.out).map(|_| Outcome::Success),
        Command::Eval(a) => cmd_eval(a, &cli.out).map(|_| Outcome::Success),
    }
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn read_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn read_checkpoint(path: &Path) -> Result<StudentModel> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes `corpus.jsonl` and `report.json`. Partial when any record was lost to a failure.
pub fn cmd_augment(args: &AugmentArgs, config: &ConfigFile, seed: u64, out: &Path) -> Result<Outcome> {
    let corpus = read_corpus(&args.corpus)?;
    let mut plan = config.augment.clone().unwrap_or_default();
    plan.seed = seed;
    let backend: Box<dyn Backend> = match args.backend {
        BackendKind::Mock => Box::new(MockBackend::new(config.mock.clone())),
        BackendKind::Http => {
            let url = args
                .backend_url
                .clone()
                .context("--backend-url is required for the http backend")?;
            let mut b = HttpBackend::new(url, config.http.model.clone().unwrap_or_else(|| "default".into()));
            if let Some(n) = config.http.max_attempts {
                b.retry.max_attempts = n;
            }
            if let Some(s) = config.http.timeout_secs {
                b.timeout = std::time::Duration::from_secs(s);
            }
            Box::new(b)
        }
    };
    let (augmented, report) = run_pipeline(&corpus, &plan, backend.as_ref())?;
    save_corpus(&augmented, out.join(CORPUS_FILE)).context("writing augmented corpus")?;
    write_json(&out.join(REPORT_FILE), &report)?;
    for f in &report.failures {
        log::warn!("record {} lost at {}: {}", f.id, f.stage, f.reason);
    }
    log::info!("augment: {:?}", report.stage_counts);
    Ok(if report.is_partial() {
        Outcome::Partial
    } else {
        Outcome::Success
    })
}

/// Writes `logits-NNNNN.dqkd` shards and `summary.json`.
pub fn cmd_extract_logits(args: &ExtractArgs, out: &Path) -> Result<ExtractionSummary> {
    let teacher = read_checkpoint(&args.teacher)?;
    let corpus = read_corpus(&args.corpus)?;
    let vocab = read_vocab(&args.tokens.vocab)?;
    let cfg = teacher.config();
    if vocab.len() != cfg.vocab_size {
        bail!(
            "vocabulary {} has {} tokens but the teacher expects {}",
            args.tokens.vocab.display(),
            vocab.len(),
            cfg.vocab_size
        );
    }
    let examples = examples_from_corpus(&corpus, &vocab, args.tokens.scheme, cfg.context_length);
    let ks: BTreeSet<usize> = [1, 5, 10, args.k]
        .into_iter()
        .filter(|&k| k >= 1 && k <= cfg.vocab_size)
        .collect();
    let extraction = ExtractionConfig {
        coverage_ks: ks.into_iter().collect(),
        ..ExtractionConfig::new(args.k, vocab.hash())
    };
    let plan = ShardPlan::new(args.shards)?;
    let output = run_extraction(&teacher, &examples, &extraction, &plan, out)?;
    log::info!(
        "extracted {} positions of {} samples into {} shards",
        output.summary.position_count,
        output.summary.sample_count,
        output.shard_paths.len()
    );
    Ok(output.summary)
}

/// Writes `alignment.json`.
pub fn cmd_align_vocab(args: &AlignArgs, out: &Path) -> Result<AlignmentMap> {
    let teacher = read_vocab(&args.teacher_vocab)?;
    let student = read_vocab(&args.student_vocab)?;
    let map = align_tokens(&teacher, &student, args.policy);
    map.save_json(out.join(ALIGNMENT_FILE))?;
    log::info!(
        "aligned {} tokens, dropped {}",
        map.matched_count(),
        map.dropped_count()
    );
    Ok(map)
}

/// Examples and teacher targets in the student's id space.
fn prepare(
    corpus: &Corpus,
    student_vocab: &Vocabulary,
    tokens: &TokenArgs,
    teacher: &TeacherArgs,
    context_length: usize,
) -> Result<(Vec<TrainingExample>, Option<TeacherTargets>)> {
    let alignment = match &teacher.alignment {
        Some(p) => Some(AlignmentMap::load_json(p).with_context(|| format!("loading alignment {}", p.display()))?),
        None => None,
    };
    let examples = match (&alignment, &teacher.teacher_vocab) {
        (Some(map), Some(tv)) => {
            let tv = read_vocab(tv)?;
            if map.teacher_vocab_hash != tv.hash() || map.student_vocab_hash != student_vocab.hash() {
                bail!("alignment map was built for different vocabularies");
            }
            examples_from_corpus(corpus, &tv, teacher.teacher_scheme, context_length)
                .iter()
                .map(|e| map_example(e, map))
                .collect()
        }
        _ => examples_from_corpus(corpus, student_vocab, tokens.scheme, context_length),
    };
    let targets = match &teacher.shards {
        Some(dir) => {
            let set = load_shard_set(dir, None).with_context(|| format!("loading shards from {}", dir.display()))?;
            Some(TeacherTargets::from_shards(
                &set.shards,
                student_vocab.hash(),
                alignment.as_ref(),
            )?)
        }
        None => None,
    };
    Ok((examples, targets))
}

fn stage_plan(args: &DistillArgs, s: &DistillSettings, seed: u64) -> StagePlan {
    let mut p = StagePlan::preset(args.stage, args.preset);
    p.seed = seed;
    p.epochs = s.epochs.unwrap_or(p.epochs);
    p.batch_size = s.batch_size.unwrap_or(p.batch_size);
    p.lr = s.lr.unwrap_or(p.lr);
    p.alpha = s.alpha.unwrap_or(p.alpha);
    p.eval_every = s.eval_every.unwrap_or(p.eval_every);
    p.divergence.kind = s.divergence.unwrap_or(p.divergence.kind);
    p.divergence.mix_weight = s.mix_weight.unwrap_or(p.divergence.mix_weight);
    p.divergence.temperature = s.temperature.unwrap_or(p.divergence.temperature);
    p.divergence.k = s.k.unwrap_or(p.divergence.k);
    p
}

/// Trains one stage on the 90% split, evaluating on the rest. Writes
/// `checkpoint.dqcm`, appends to `metrics.jsonl` and `report.json`.
pub fn cmd_distill(args: &DistillArgs, config: &ConfigFile, seed: u64, out: &Path) -> Result<TrainingReport> {
    let corpus = read_corpus(&args.corpus)?;
    let vocab = read_vocab(&args.tokens.vocab)?;
    let model = match &args.checkpoint {
        Some(p) => read_checkpoint(p)?,
        None => StudentModel::new(ModelConfig {
            vocab_size: vocab.len(),
            context_length: config.model.context_length,
            d_model: config.model.d_model,
            n_layers: config.model.n_layers,
            n_heads: config.model.n_heads,
            seed,
        })?,
    };
    if model.config().vocab_size != vocab.len() {
        bail!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        );
    }
    if args.stage == Stage::Kd && args.teacher.shards.is_none() {
        bail!("the kd stage needs --shards");
    }
    let (examples, targets) = prepare(
        &corpus,
        &vocab,
        &args.tokens,
        &args.teacher,
        model.config().context_length,
    )?;
    let (train, heldout) = split_heldout(&examples);
    let plan = stage_plan(args, &config.distill, seed);
    let model_config = *model.config();
    let outcome = run_stage(
        model,
        StageData {
            train: &train,
            heldout: &heldout,
            teacher: targets.as_ref(),
        },
        &plan,
        Some(out),
    )?;
    let summary = StageSummary {
        stage: args.stage,
        preset: Some(args.preset),
        plan,
        model: model_config,
        final_step: outcome.model.step(),
        final_train_loss: outcome.train_losses.last().copied(),
        final_eval: outcome.reports.last().cloned(),
        checkpoint: outcome.checkpoint.clone(),
    };
    Ok(append_stage_report(out, summary)?)
}

/// Evaluates every record of the corpus; writes `report.json`.
pub fn cmd_eval(args: &EvalArgs, out: &Path) -> Result<EvalReport> {
    let model = read_checkpoint(&args.checkpoint)?;
    let corpus = read_corpus(&args.corpus)?;
    let vocab = read_vocab(&args.tokens.vocab)?;
    let (examples, targets) = prepare(
        &corpus,
        &vocab,
        &args.tokens,
        &args.teacher,
        model.config().context_length,
    )?;
    if examples.is_empty() {
        bail!("corpus {} has no usable records", args.corpus.display());
    }
    let cfg = distilkd::kdcore::DivergenceConfig::default();
    let report = evaluate(&model, &examples, targets.as_ref(), &cfg)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}
