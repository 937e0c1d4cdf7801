//! Top-K renormalized softmax, divergences between teacher and student
//! distributions, the per-sequence token-level loss, and its closed-form
//! gradient with respect to the student's gathered logits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logitstore::TopKLogitRecord;

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum KdError {
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("mix weight must lie in [0, 1], got {0}")]
    BadMixWeight(f64),
    #[error("K must be at least 1")]
    BadK,
    #[error("non-finite logit at index {0}")]
    NonFinite(usize),
    #[error("empty logit vector")]
    Empty,
    #[error("length mismatch: teacher {teacher} vs student {student}")]
    LengthMismatch { teacher: usize, student: usize },
    #[error("probability vector invalid: {0}")]
    BadProbabilities(String),
    #[error("sequence has no positions")]
    EmptySequence,
    #[error("position count mismatch: {teacher} teacher records vs {student} student slices")]
    PositionMismatch { teacher: usize, student: usize },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    ForwardKl,
    ReverseKl,
    Mixed,
}

impl std::str::FromStr for DivergenceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "forward_kl" | "forward" => Ok(Self::ForwardKl),
            "reverse_kl" | "reverse" => Ok(Self::ReverseKl),
            "mixed" => Ok(Self::Mixed),
            _ => Err(format!("unknown divergence {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceConfig {
    pub kind: DivergenceKind,
    /// Weight on the forward term for `Mixed`; ignored otherwise.
    pub mix_weight: f64,
    pub temperature: f64,
    pub k: usize,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            kind: DivergenceKind::ForwardKl,
            mix_weight: 0.5,
            temperature: 1.0,
            k: 10,
        }
    }
}

impl DivergenceConfig {
    pub fn validate(&self) -> Result<(), KdError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(KdError::BadTemperature(self.temperature));
        }
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return Err(KdError::BadMixWeight(self.mix_weight));
        }
        if self.k == 0 {
            return Err(KdError::BadK);
        }
        Ok(())
    }

    pub fn forward_kl(temperature: f64) -> Self {
        Self {
            temperature,
            ..Self::default()
        }
    }
}

/// Softmax over only the supplied entries, `exp(z/T) / sum exp(z/T)`,
/// with max-subtraction.
pub fn topk_renormalized_softmax(z: &[f64], temperature: f64) -> Result<Vec<f64>, KdError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(KdError::BadTemperature(temperature));
    }
    if z.is_empty() {
        return Err(KdError::Empty);
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(KdError::NonFinite(i));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = z.iter().map(|&v| ((v - m) / temperature).exp()).collect();
    let sum: f64 = ex.iter().sum();
    Ok(ex.into_iter().map(|e| e / sum).collect())
}

/// Teacher and student distributions over the same K′ token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbPair {
    teacher: Vec<f64>,
    student: Vec<f64>,
}

impl ProbPair {
    pub fn new(teacher: Vec<f64>, student: Vec<f64>) -> Result<Self, KdError> {
        if teacher.len() != student.len() {
            return Err(KdError::LengthMismatch {
                teacher: teacher.len(),
                student: student.len(),
            });
        }
        if teacher.is_empty() {
            return Err(KdError::Empty);
        }
        for (name, p) in [("teacher", &teacher), ("student", &student)] {
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(KdError::BadProbabilities(format!("{name} sums to {sum}")));
            }
        }
        Ok(Self { teacher, student })
    }

    pub fn from_logits(teacher: &[f64], student: &[f64], temperature: f64) -> Result<Self, KdError> {
        if teacher.len() != student.len() {
            return Err(KdError::LengthMismatch {
                teacher: teacher.len(),
                student: student.len(),
            });
        }
        Self::new(
            topk_renormalized_softmax(teacher, temperature)?,
            topk_renormalized_softmax(student, temperature)?,
        )
    }

    pub fn teacher(&self) -> &[f64] {
        &self.teacher
    }

    pub fn student(&self) -> &[f64] {
        &self.student
    }
}

fn ln_floor(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| a * (ln_floor(a) - ln_floor(b))).sum()
}

pub fn divergence(pair: &ProbPair, config: &DivergenceConfig) -> f64 {
    let fwd = || kl(&pair.teacher, &pair.student);
    let rev = || kl(&pair.student, &pair.teacher);
    match config.kind {
        DivergenceKind::ForwardKl => fwd(),
        DivergenceKind::ReverseKl => rev(),
        DivergenceKind::Mixed => config.mix_weight * fwd() + (1.0 - config.mix_weight) * rev(),
    }
}

/// Gradient of `divergence` with respect to the student logits that produced
/// `pair.student` at the given temperature (no 1/L factor).
pub fn divergence_grad(pair: &ProbPair, config: &DivergenceConfig) -> Vec<f64> {
    let t = config.temperature;
    let forward = || -> Vec<f64> {
        pair.student
            .iter()
            .zip(&pair.teacher)
            .map(|(s, p)| (s - p) / t)
            .collect()
    };
    let reverse = || -> Vec<f64> {
        let r = kl(&pair.student, &pair.teacher);
        pair.student
            .iter()
            .zip(&pair.teacher)
            .map(|(&s, &p)| s * (ln_floor(s) - ln_floor(p) - r) / t)
            .collect()
    };
    match config.kind {
        DivergenceKind::ForwardKl => forward(),
        DivergenceKind::ReverseKl => reverse(),
        DivergenceKind::Mixed => {
            let w = config.mix_weight;
            forward()
                .into_iter()
                .zip(reverse())
                .map(|(f, r)| w * f + (1.0 - w) * r)
                .collect()
        }
    }
}

fn check_positions(teacher: &[TopKLogitRecord], student: &[Vec<f64>]) -> Result<(), KdError> {
    if teacher.len() != student.len() {
        return Err(KdError::PositionMismatch {
            teacher: teacher.len(),
            student: student.len(),
        });
    }
    if teacher.is_empty() {
        return Err(KdError::EmptySequence);
    }
    for (r, s) in teacher.iter().zip(student) {
        if r.len() != s.len() {
            return Err(KdError::LengthMismatch {
                teacher: r.len(),
                student: s.len(),
            });
        }
    }
    Ok(())
}

/// Mean over positions of the divergence between the renormalized teacher
/// top-K distribution and the student's distribution over the same ids.
/// `student_logits[n]` holds the student logits gathered at the ids of
/// `teacher_records[n]`, in the same order.
pub fn token_level_loss(
    teacher_records: &[TopKLogitRecord],
    student_logits: &[Vec<f64>],
    config: &DivergenceConfig,
) -> Result<f64, KdError> {
    config.validate()?;
    check_positions(teacher_records, student_logits)?;
    let mut total = 0.0;
    for (r, s) in teacher_records.iter().zip(student_logits) {
        let pair = ProbPair::from_logits(&r.values(), s, config.temperature)?;
        total += divergence(&pair, config);
    }
    Ok(total / teacher_records.len() as f64)
}

/// Loss and per-position gradients of [`token_level_loss`] in one pass.
pub fn token_level_loss_and_grad(
    teacher_records: &[TopKLogitRecord],
    student_logits: &[Vec<f64>],
    config: &DivergenceConfig,
) -> Result<(f64, Vec<Vec<f64>>), KdError> {
    config.validate()?;
    check_positions(teacher_records, student_logits)?;
    let l = teacher_records.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(teacher_records.len());
    for (r, s) in teacher_records.iter().zip(student_logits) {
        let pair = ProbPair::from_logits(&r.values(), s, config.temperature)?;
        total += divergence(&pair, config);
        grads.push(divergence_grad(&pair, config).into_iter().map(|g| g / l).collect());
    }
    Ok((total / l, grads))
}

pub fn loss_gradient_wrt_student_logits(
    teacher_records: &[TopKLogitRecord],
    student_logits: &[Vec<f64>],
    config: &DivergenceConfig,
) -> Result<Vec<Vec<f64>>, KdError> {
    token_level_loss_and_grad(teacher_records, student_logits, config).map(|(_, g)| g)
}

/// Empirical expectation over a batch of per-sample losses, summed in order.
pub fn batch_mean(losses: &[f64]) -> Result<f64, KdError> {
    if losses.is_empty() {
        return Err(KdError::EmptyBatch);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logitstore::TopKEntry;

    fn record(values: &[f64]) -> TopKLogitRecord {
        TopKLogitRecord::from_unsorted(
            values
                .iter()
                .enumerate()
                .map(|(i, &value)| TopKEntry {
                    token_id: i as u32,
                    value,
                })
                .collect(),
        )
        .unwrap()
    }

    fn cfg(kind: DivergenceKind) -> DivergenceConfig {
        DivergenceConfig {
            kind,
            ..DivergenceConfig::default()
        }
    }

    #[test]
    fn softmax_examples() {
        let p = topk_renormalized_softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = topk_renormalized_softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let e = std::f64::consts::E;
        let p = topk_renormalized_softmax(&[2.0, 0.0], 2.0).unwrap();
        assert!((p[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_errors() {
        assert_eq!(
            topk_renormalized_softmax(&[1.0], 0.0),
            Err(KdError::BadTemperature(0.0))
        );
        assert_eq!(
            topk_renormalized_softmax(&[1.0], -1.0),
            Err(KdError::BadTemperature(-1.0))
        );
        assert_eq!(
            topk_renormalized_softmax(&[1.0, f64::INFINITY], 1.0),
            Err(KdError::NonFinite(1))
        );
        assert_eq!(topk_renormalized_softmax(&[], 1.0), Err(KdError::Empty));
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = topk_renormalized_softmax(&[1000.0, 999.0], 1.0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn high_temperature_is_near_uniform() {
        let p = topk_renormalized_softmax(&[5.0, -3.0, 0.5, 2.0], 1e6).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-5);
        }
    }

    #[test]
    fn divergence_examples() {
        let same = ProbPair::new(vec![0.2, 0.8], vec![0.2, 0.8]).unwrap();
        for kind in [
            DivergenceKind::ForwardKl,
            DivergenceKind::ReverseKl,
            DivergenceKind::Mixed,
        ] {
            assert_eq!(divergence(&same, &cfg(kind)), 0.0);
        }
        let pair = ProbPair::new(vec![0.5, 0.5], vec![0.75, 0.25]).unwrap();
        let fwd = divergence(&pair, &cfg(DivergenceKind::ForwardKl));
        assert!((fwd - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((fwd - 0.143841).abs() < 1e-6);
        let rev = divergence(&pair, &cfg(DivergenceKind::ReverseKl));
        assert!((rev - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-15);
        assert!((rev - 0.130812).abs() < 1e-6);
        let mut mixed = cfg(DivergenceKind::Mixed);
        mixed.mix_weight = 0.25;
        let m = divergence(&pair, &mixed);
        assert!((m - (0.25 * fwd + 0.75 * rev)).abs() < 1e-15);
    }

    #[test]
    fn pair_validation() {
        assert!(matches!(
            ProbPair::new(vec![1.0], vec![0.5, 0.5]),
            Err(KdError::LengthMismatch { .. })
        ));
        assert!(matches!(
            ProbPair::new(vec![0.6, 0.6], vec![0.5, 0.5]),
            Err(KdError::BadProbabilities(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = DivergenceConfig::default();
        assert!(c.validate().is_ok());
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        c.temperature = 1.0;
        c.mix_weight = 1.5;
        assert!(c.validate().is_err());
        c.mix_weight = 0.5;
        c.k = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn token_loss_is_mean_of_positions() {
        let c = cfg(DivergenceKind::ForwardKl);
        // identical distributions everywhere
        let recs = vec![record(&[1.0, 0.0]), record(&[0.3, 0.1, -2.0])];
        let stud: Vec<Vec<f64>> = recs.iter().map(|r| r.values()).collect();
        assert_eq!(token_level_loss(&recs, &stud, &c).unwrap(), 0.0);

        // two positions with known divergences
        let r1 = record(&[1.0, 0.0]);
        let r2 = record(&[2.0, 0.0, -1.0]);
        let s1 = vec![0.0, 1.0];
        let s2 = vec![-1.0, 0.5, 0.0];
        let d1 = token_level_loss(std::slice::from_ref(&r1), std::slice::from_ref(&s1), &c).unwrap();
        let d2 = token_level_loss(std::slice::from_ref(&r2), std::slice::from_ref(&s2), &c).unwrap();
        let both = token_level_loss(&[r1, r2], &[s1, s2], &c).unwrap();
        assert!((both - (d1 + d2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn token_loss_errors() {
        let c = DivergenceConfig::default();
        assert_eq!(token_level_loss(&[], &[], &c), Err(KdError::EmptySequence));
        assert!(matches!(
            token_level_loss(&[record(&[1.0, 0.0])], &[], &c),
            Err(KdError::PositionMismatch { .. })
        ));
        assert!(matches!(
            token_level_loss(&[record(&[1.0, 0.0])], &[vec![0.0]], &c),
            Err(KdError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn gradient_examples() {
        let c = cfg(DivergenceKind::ForwardKl);
        // teacher logits giving [0.5, 0.5]; student logits giving [0.75, 0.25]
        let r = record(&[0.0, 0.0]);
        let s = vec![3f64.ln(), 0.0];
        let g = loss_gradient_wrt_student_logits(&[r.clone()], &[s], &c).unwrap();
        assert!((g[0][0] - 0.25).abs() < 1e-15);
        assert!((g[0][1] + 0.25).abs() < 1e-15);

        let same = loss_gradient_wrt_student_logits(&[r.clone()], &[r.values()], &c).unwrap();
        assert!(same[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batch_mean_rules() {
        assert_eq!(batch_mean(&[]), Err(KdError::EmptyBatch));
        assert_eq!(batch_mean(&[0.2]).unwrap(), 0.2);
        assert!((batch_mean(&[0.2, 0.4]).unwrap() - 0.3).abs() < 1e-15);
    }
}
