use std::path::PathBuf;

use distilkd::corpus::load_corpus;
use distilkd::kdcore::DivergenceConfig;
use distilkd::logitstore::{extract_sequences, TeacherTargets};
use distilkd::model::{load_checkpoint, ModelConfig, StudentModel, TrainingExample};
use distilkd::trainer::{
    evaluate, examples_from_corpus, format_sweep, run_stage, smoothed, split_heldout, teacher_sweep, Preset, Stage,
    StageData, StagePlan, TrainerError, LAST_GOOD_FILE,
};
use distilkd::vocab::{Scheme, Vocabulary};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}

fn bundled_examples() -> Vec<TrainingExample> {
    let corpus = load_corpus(data_dir().join("synthetic.jsonl")).unwrap();
    let vocab = Vocabulary::load(data_dir().join("vocab.txt")).unwrap();
    examples_from_corpus(&corpus, &vocab, Scheme::Char, 64)
}

fn block_means(losses: &[f64], block: usize) -> Vec<f64> {
    losses
        .chunks(block)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

fn assert_progress(config: ModelConfig, batch_size: usize) {
    let examples = bundled_examples();
    assert_eq!(examples.len(), 1000);
    let plan = StagePlan {
        epochs: 1,
        batch_size,
        eval_every: 0,
        ..StagePlan::preset(Stage::Sft, Preset::Desk)
    };
    let steps = 200;
    let out = run_stage(
        StudentModel::new(config).unwrap(),
        StageData {
            train: &examples[..steps * batch_size],
            heldout: &[],
            teacher: None,
        },
        &plan,
        None,
    )
    .unwrap();
    assert_eq!(out.train_losses.len(), steps);
    let s = smoothed(&out.train_losses, 20);
    assert!(s.last().unwrap() < s.first().unwrap());
    let blocks = block_means(&out.train_losses, 20);
    for w in blocks.windows(2) {
        assert!(w[1] < w[0], "{blocks:?}");
    }
}

#[test]
fn student_loss_decreases_over_200_steps() {
    assert_progress(ModelConfig::student_default(), 5);
}

#[test]
fn teacher_loss_decreases_over_200_steps() {
    assert_progress(ModelConfig::teacher_default(), 5);
}

#[test]
fn untrained_student_is_near_chance_against_teacher() {
    let teacher = load_checkpoint(data_dir().join("teacher.dqcm")).unwrap();
    let (_, heldout) = split_heldout(&bundled_examples());
    let targets = TeacherTargets::from_sequences(0, extract_sequences(&teacher, &heldout, 10).unwrap()).unwrap();
    let student = StudentModel::new(ModelConfig::student_default()).unwrap();
    let r = evaluate(&student, &heldout, Some(&targets), &DivergenceConfig::default()).unwrap();
    let agreement = r.top1_agreement.unwrap();
    assert!(agreement < 0.05, "{agreement}");
    let own = evaluate(&teacher, &heldout, Some(&targets), &DivergenceConfig::default()).unwrap();
    assert_eq!(own.top1_agreement, Some(1.0));
}

#[test]
fn non_finite_loss_keeps_last_good_checkpoint() {
    let cfg = ModelConfig {
        vocab_size: 10,
        context_length: 8,
        d_model: 4,
        n_layers: 1,
        n_heads: 1,
        seed: 1,
    };
    let mut model = StudentModel::new(cfg).unwrap();
    model.params.for_each_mut(|t| {
        if t.name == "w_out" {
            t.data.iter_mut().for_each(|x| *x = f64::MAX);
        }
    });
    let examples = vec![TrainingExample::new(1, vec![1, 2], vec![3, 4])];
    let dir = tempfile::tempdir().unwrap();
    let err = run_stage(
        model,
        StageData {
            train: &examples,
            heldout: &[],
            teacher: None,
        },
        &StagePlan::preset(Stage::Sft, Preset::Desk),
        Some(dir.path()),
    )
    .unwrap_err();
    match err {
        TrainerError::NonFiniteLoss { step, checkpoint } => {
            assert_eq!(step, 0);
            assert_eq!(checkpoint.unwrap(), dir.path().join(LAST_GOOD_FILE));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn sweep_reports_one_row_per_teacher() {
    let examples: Vec<TrainingExample> = (0..30u64)
        .map(|i| {
            let a = (i % 6) as u32 + 1;
            TrainingExample::new(i, vec![a, a + 1], vec![a + 2, a + 3])
        })
        .collect();
    let (train, heldout) = examples.split_at(24);
    let base = ModelConfig {
        vocab_size: 12,
        context_length: 8,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        seed: 3,
    };
    let teachers = [
        base,
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            ..base
        },
    ];
    let plan = |stage| StagePlan {
        epochs: 2,
        batch_size: 8,
        lr: 1e-2,
        eval_every: 0,
        ..StagePlan::preset(stage, Preset::Desk)
    };
    let rows = teacher_sweep(&teachers, base, train, heldout, &plan(Stage::Sft), &plan(Stage::Kd), 4).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].teacher_params > rows[0].teacher_params);
    let table = format_sweep(&rows);
    assert_eq!(table.lines().count(), 3);
    assert!(rows.iter().all(|r| r.student.heldout_kl.unwrap().is_finite()));
}
