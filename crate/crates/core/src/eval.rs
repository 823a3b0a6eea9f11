//! Detection metrics computed by exact counting: AUROC with half credit for
//! ties, the order-statistic threshold at a target true positive rate, and
//! the false positive rate there.
//!
//! Higher scores mean more ID-like; a sample is called ID iff `score >= tau`.

use std::cmp::Ordering;

use thiserror::Error;

pub const DEFAULT_TPR: f64 = 0.95;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{0} scores are empty")]
    EmptyScores(&'static str),
    #[error("non-finite {which} score at index {index}")]
    NonFinite { which: &'static str, index: usize },
    #[error("true positive rate must lie in (0, 1], got {0}")]
    InvalidTpr(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Id,
    Ood,
}

pub fn decide(score: f64, tau: f64) -> Decision {
    if score >= tau {
        Decision::Id
    } else {
        Decision::Ood
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub auroc: f64,
    pub fpr95: f64,
    pub tau: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

fn check(scores: &[f64], which: &'static str) -> Result<(), EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyScores(which));
    }
    match scores.iter().position(|s| !s.is_finite()) {
        Some(index) => Err(EvalError::NonFinite { which, index }),
        None => Ok(()),
    }
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    v
}

/// Counts `(greater, equal)` over all (id, ood) pairs in one merge pass.
pub fn pair_counts(id_scores: &[f64], ood_scores: &[f64]) -> (u64, u64) {
    let id = sorted(id_scores);
    let ood = sorted(ood_scores);
    let (mut below, mut through) = (0usize, 0usize);
    let (mut greater, mut equal) = (0u64, 0u64);
    for &s in &id {
        while below < ood.len() && ood[below] < s {
            below += 1;
        }
        through = through.max(below);
        while through < ood.len() && ood[through] <= s {
            through += 1;
        }
        greater += below as u64;
        equal += (through - below) as u64;
    }
    (greater, equal)
}

/// Probability that an ID score beats an OOD score, ties counting half.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64, EvalError> {
    check(id_scores, "id")?;
    check(ood_scores, "ood")?;
    let (greater, equal) = pair_counts(id_scores, ood_scores);
    let pairs = 2 * id_scores.len() as u64 * ood_scores.len() as u64;
    Ok((2 * greater + equal) as f64 / pairs as f64)
}

/// The `ceil(tpr * n_id)`-th largest ID score: the largest threshold that
/// keeps at least a `tpr` fraction of ID scores.
pub fn threshold_at_tpr(id_scores: &[f64], tpr: f64) -> Result<f64, EvalError> {
    check(id_scores, "id")?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(EvalError::InvalidTpr(tpr));
    }
    let n = id_scores.len();
    let rank = ((tpr * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let id = sorted(id_scores);
    Ok(id[n - rank])
}

/// Fraction of OOD scores accepted as ID at the threshold for `tpr`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<f64, EvalError> {
    check(ood_scores, "ood")?;
    let tau = threshold_at_tpr(id_scores, tpr)?;
    Ok(fpr_at_threshold(ood_scores, tau))
}

fn fpr_at_threshold(ood_scores: &[f64], tau: f64) -> f64 {
    let accepted = ood_scores.iter().filter(|&&s| decide(s, tau) == Decision::Id).count();
    accepted as f64 / ood_scores.len() as f64
}

pub fn evaluate(id_scores: &[f64], ood_scores: &[f64]) -> Result<EvalResult, EvalError> {
    let auroc = auroc(id_scores, ood_scores)?;
    let tau = threshold_at_tpr(id_scores, DEFAULT_TPR)?;
    Ok(EvalResult {
        auroc,
        fpr95: fpr_at_threshold(ood_scores, tau),
        tau,
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
    })
}

/// Unweighted mean of AUROC and FPR95 over member results.
pub fn group_mean(results: &[EvalResult]) -> Option<(f64, f64)> {
    if results.is_empty() {
        return None;
    }
    let n = results.len() as f64;
    let auroc = results.iter().map(|r| r.auroc).sum::<f64>() / n;
    let fpr = results.iter().map(|r| r.fpr95).sum::<f64>() / n;
    Some((auroc, fpr))
}
