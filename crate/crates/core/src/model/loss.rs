use ndarray::Array2;

use super::{transformer, ModelError, Params, StudentModel, TrainingExample};
use crate::kdcore::{batch_mean, token_level_loss, token_level_loss_and_grad, DivergenceConfig};
use crate::logitstore::{TeacherTargets, TopKLogitRecord};

/// Components of a training loss. `total = alpha * kd + (1 - alpha) * ce`;
/// `kd` is `None` when the KD term was not evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub kd: Option<f64>,
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> (f64, f64) {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let s: f64 = row.iter().map(|&z| (z - m).exp()).sum();
    (m, s)
}

/// Mean token cross-entropy of one example; writes `scale * dCE/dlogits` into `dlogits`.
fn ce_example(logits: &Array2<f64>, target: &[u32], scale: f64, dlogits: &mut Array2<f64>) -> f64 {
    let l = target.len() as f64;
    let mut loss = 0.0;
    for (n, &y) in target.iter().enumerate() {
        let row = logits.row(n);
        let (m, s) = log_softmax_row(row);
        loss += m + s.ln() - row[y as usize];
        let mut d = dlogits.row_mut(n);
        for (j, (dv, &z)) in d.iter_mut().zip(row).enumerate() {
            let p = (z - m).exp() / s;
            let g = if j == y as usize { p - 1.0 } else { p };
            *dv += scale * g / l;
        }
    }
    loss / l
}

fn teacher_records<'a>(
    model: &StudentModel,
    ex: &TrainingExample,
    targets: &'a TeacherTargets,
) -> Result<&'a [Option<TopKLogitRecord>], ModelError> {
    let records = targets.get(ex.sample_id).ok_or(ModelError::MissingTeacher {
        sample_id: ex.sample_id,
    })?;
    if records.len() != ex.len() {
        return Err(ModelError::TeacherLengthMismatch {
            sample_id: ex.sample_id,
            expected: ex.len(),
            found: records.len(),
        });
    }
    let v = model.config().vocab_size;
    for r in records.iter().flatten() {
        if let Some(&id) = r.token_ids().iter().find(|&&id| id as usize >= v) {
            return Err(ModelError::InvalidToken { id, vocab_size: v });
        }
    }
    Ok(records)
}

/// Positions that kept at least one teacher entry, with the student logits
/// gathered at those entries' ids.
fn gather(
    logits: &Array2<f64>,
    records: &[Option<TopKLogitRecord>],
) -> (Vec<usize>, Vec<TopKLogitRecord>, Vec<Vec<f64>>) {
    let mut pos = Vec::new();
    let mut recs = Vec::new();
    let mut student = Vec::new();
    for (n, r) in records.iter().enumerate() {
        if let Some(r) = r {
            pos.push(n);
            student.push(r.entries().iter().map(|e| logits[[n, e.token_id as usize]]).collect());
            recs.push(r.clone());
        }
    }
    (pos, recs, student)
}

fn loss_and_grads(
    model: &StudentModel,
    batch: &[TrainingExample],
    kd: Option<(&TeacherTargets, &DivergenceConfig, f64)>,
) -> Result<(LossBreakdown, Params), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if let Some((_, cfg, _)) = kd {
        cfg.validate()?;
    }
    for ex in batch {
        model.check_example(ex)?;
    }
    let b = batch.len() as f64;
    let alpha = kd.map_or(0.0, |(_, _, a)| a);
    let mut grads = model.params.zeros_like();
    let mut ce_sum = 0.0;
    let mut kd_sum = 0.0;
    for ex in batch {
        let tokens = ex.decoder_tokens();
        let (logits, cache) = transformer::forward(&model.params, model.config(), &tokens, ex.input.len() - 1);
        let mut dlogits = Array2::zeros(logits.raw_dim());
        ce_sum += ce_example(&logits, &ex.target, (1.0 - alpha) / b, &mut dlogits);
        if let Some((targets, cfg, alpha)) = kd {
            let records = teacher_records(model, ex, targets)?;
            let (pos, recs, student) = gather(&logits, records);
            if !pos.is_empty() {
                let (loss, g) = token_level_loss_and_grad(&recs, &student, cfg)?;
                kd_sum += loss;
                for ((&n, r), gn) in pos.iter().zip(&recs).zip(g) {
                    for (e, gv) in r.entries().iter().zip(gn) {
                        dlogits[[n, e.token_id as usize]] += alpha * gv / b;
                    }
                }
            }
        }
        transformer::backward(&model.params, model.config(), &cache, &dlogits, &mut grads);
    }
    let ce = ce_sum / b;
    let breakdown = match kd {
        None => LossBreakdown {
            total: ce,
            ce,
            kd: None,
        },
        Some(_) => {
            let kd = kd_sum / b;
            LossBreakdown {
                total: alpha * kd + (1.0 - alpha) * ce,
                ce,
                kd: Some(kd),
            }
        }
    };
    Ok((breakdown, grads))
}

/// Mean over examples of the per-example mean token cross-entropy, and its
/// gradient with respect to every parameter.
pub fn ce_loss_and_grads(
    model: &StudentModel,
    batch: &[TrainingExample],
) -> Result<(LossBreakdown, Params), ModelError> {
    loss_and_grads(model, batch, None)
}

/// `alpha * KD + (1 - alpha) * CE` and its gradient. The KD term of an example
/// is the mean divergence over its positions that kept any teacher entry; an
/// example with none contributes zero. With `alpha == 0` the teacher is not
/// consulted and the result equals [`ce_loss_and_grads`].
pub fn kd_loss_and_grads(
    model: &StudentModel,
    batch: &[TrainingExample],
    targets: &TeacherTargets,
    config: &DivergenceConfig,
    alpha: f64,
) -> Result<(LossBreakdown, Params), ModelError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ModelError::BadConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return ce_loss_and_grads(model, batch);
    }
    loss_and_grads(model, batch, Some((targets, config, alpha)))
}

/// Batch mean of the per-example token-level KD loss.
pub fn dataset_loss(
    model: &StudentModel,
    batch: &[TrainingExample],
    targets: &TeacherTargets,
    config: &DivergenceConfig,
) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    config.validate()?;
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let logits = model.forward_logits(ex)?;
        let records = teacher_records(model, ex, targets)?;
        let (pos, recs, student) = gather(&logits, records);
        losses.push(if pos.is_empty() {
            0.0
        } else {
            token_level_loss(&recs, &student, config)?
        });
    }
    Ok(batch_mean(&losses)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logitstore::{extract_topk, ShardSequence};
    use crate::model::tests::micro_config;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch() -> Vec<TrainingExample> {
        vec![
            TrainingExample::new(1, vec![1, 2, 3], vec![4, 5, 6]),
            TrainingExample::new(2, vec![7], vec![0, 3]),
        ]
    }

    fn self_targets(model: &StudentModel, batch: &[TrainingExample], k: usize) -> TeacherTargets {
        let seqs = batch.iter().map(|ex| {
            let logits = model.forward_logits(ex).unwrap();
            let records = logits
                .rows()
                .into_iter()
                .map(|r| {
                    let r32: Vec<f32> = r.iter().map(|&z| z as f32).collect();
                    extract_topk(&r32, k).unwrap()
                })
                .collect();
            ShardSequence {
                sample_id: ex.sample_id,
                records,
            }
        });
        TeacherTargets::from_sequences(0, seqs).unwrap()
    }

    #[test]
    fn uniform_model_gives_ln_v() {
        let mut m = StudentModel::new(ModelConfig {
            vocab_size: 4,
            ..micro_config()
        })
        .unwrap();
        m.params.w_out.fill(0.0);
        let ex = TrainingExample::new(1, vec![1, 2], vec![3, 0, 1]);
        let (loss, _) = ce_loss_and_grads(&m, &[ex]).unwrap();
        assert!((loss.total - 4f64.ln()).abs() < 1e-12);
        assert!((loss.total - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn duplicate_example_keeps_loss() {
        let m = StudentModel::new(micro_config()).unwrap();
        let ex = batch().remove(0);
        let (a, ga) = ce_loss_and_grads(&m, std::slice::from_ref(&ex)).unwrap();
        let (b, gb) = ce_loss_and_grads(&m, &[ex.clone(), ex]).unwrap();
        assert!((a.total - b.total).abs() < 1e-15);
        let (fa, fb) = (ga.to_flat(), gb.to_flat());
        assert!(fa.iter().zip(&fb).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn empty_batch_rejected() {
        let m = StudentModel::new(micro_config()).unwrap();
        assert!(matches!(ce_loss_and_grads(&m, &[]), Err(ModelError::EmptyBatch)));
    }

    #[test]
    fn alpha_zero_is_cross_entropy() {
        let m = StudentModel::new(micro_config()).unwrap();
        let b = batch();
        let t = self_targets(&m, &b, 3);
        let ce = ce_loss_and_grads(&m, &b).unwrap();
        let kd = kd_loss_and_grads(&m, &b, &t, &DivergenceConfig::default(), 0.0).unwrap();
        assert_eq!(ce, kd);
    }

    #[test]
    fn self_distillation_is_fixed_point() {
        let m = StudentModel::new(micro_config()).unwrap();
        let b = batch();
        let t = self_targets(&m, &b, 4);
        let (loss, g) = kd_loss_and_grads(&m, &b, &t, &DivergenceConfig::default(), 1.0).unwrap();
        assert!(loss.total.abs() < 1e-12, "{loss:?}");
        assert!(g.to_flat().iter().all(|x| x.abs() < 1e-9));
        assert!(dataset_loss(&m, &b, &t, &DivergenceConfig::default()).unwrap() < 1e-12);
    }

    #[test]
    fn missing_teacher_reported() {
        let m = StudentModel::new(micro_config()).unwrap();
        let b = batch();
        let t = self_targets(&m, &b[..1], 3);
        assert!(matches!(
            kd_loss_and_grads(&m, &b, &t, &DivergenceConfig::default(), 1.0),
            Err(ModelError::MissingTeacher { sample_id: 2 })
        ));
    }

    fn finite_difference_check(f: impl Fn(&StudentModel) -> (f64, Params), seed: u64) {
        let base = StudentModel::new(micro_config()).unwrap();
        let (_, grads) = f(&base);
        let flat = grads.to_flat();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-4;
        let mut checked = 0;
        while checked < 5 {
            let idx = rng.random_range(0..flat.len());
            let perturbed = |delta: f64| {
                let mut m = base.clone();
                let mut i = 0;
                m.params.for_each_mut(|t| {
                    for x in t.data.iter_mut() {
                        if i == idx {
                            *x += delta;
                        }
                        i += 1;
                    }
                });
                f(&m).0
            };
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let an = flat[idx];
            if an.abs().max(fd.abs()) < 1e-6 {
                continue;
            }
            let rel = (an - fd).abs() / an.abs().max(fd.abs());
            assert!(rel < 1e-3, "param {idx}: analytic {an} vs fd {fd}");
            checked += 1;
        }
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let b = batch();
        finite_difference_check(
            |m| {
                let (l, g) = ce_loss_and_grads(m, &b).unwrap();
                (l.total, g)
            },
            11,
        );
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        let b = batch();
        let mut teacher = StudentModel::new(micro_config()).unwrap();
        teacher.params.scale(3.0);
        let t = self_targets(&teacher, &b, 3);
        for cfg in [
            DivergenceConfig::default(),
            DivergenceConfig {
                kind: crate::kdcore::DivergenceKind::Mixed,
                mix_weight: 0.3,
                temperature: 2.0,
                k: 3,
            },
        ] {
            finite_difference_check(
                |m| {
                    let (l, g) = kd_loss_and_grads(m, &b, &t, &cfg, 1.0).unwrap();
                    (l.total, g)
                },
                12,
            );
        }
    }
}
