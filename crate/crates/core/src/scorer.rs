//! Score formulas: the latent score against the ID dictionary, the
//! calibration term against the OOD dictionary, their sum, and the explicit
//! Euclidean k-NN baseline.
//!
//! Cosine values are clamped to `[-1, 1]` after selection, so stored `f32`
//! unit vectors whose norms are off by an ulp still yield in-range scores.

use thiserror::Error;

use crate::features::FeatureBatch;
use crate::id_dict::IdDictionary;
use crate::kernels::{self, Metric, PackedKeys};

/// Slack accepted by [`euclid_from_cos`] outside `[-1, 1]`.
pub const COSINE_SLACK: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("key set is empty")]
    EmptyKeys,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cosine {0} lies outside [-1, 1]")]
    OutOfRange(f64),
    #[error("query dimension {found} does not match key dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

/// Neighbor ranks for the two score terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopKParams {
    pub k_id: usize,
    pub k_ood: usize,
}

impl TopKParams {
    pub fn new(k_id: usize, k_ood: usize) -> Result<Self, ScoreError> {
        if k_id == 0 || k_ood == 0 {
            return Err(ScoreError::ZeroK);
        }
        Ok(Self { k_id, k_ood })
    }
}

/// One scored test sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub s_in: f64,
    pub s_out: f64,
    pub s: f64,
    pub batch_index: usize,
    pub stream_position: usize,
}

fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0, 1.0)
}

fn check_query(query: &[f32], keys: &FeatureBatch, k: usize) -> Result<(), ScoreError> {
    if k == 0 {
        return Err(ScoreError::ZeroK);
    }
    if query.len() != keys.dim() {
        return Err(ScoreError::DimensionMismatch { expected: keys.dim(), found: query.len() });
    }
    Ok(())
}

fn kth_of(metric: Metric, query: &[f32], keys: &FeatureBatch, k: usize) -> Result<f64, ScoreError> {
    check_query(query, keys, k)?;
    if keys.is_empty() {
        return Err(ScoreError::EmptyKeys);
    }
    let values: Vec<f64> = keys.rows().map(|key| kernels::pair_value(metric, query, key)).collect();
    Ok(kernels::kth_value(metric, &values, k).expect("keys are non-empty"))
}

/// The `k`-th largest cosine between `query` and the rows of `keys`. With
/// fewer than `k` keys the smallest similarity is returned.
pub fn kth_largest_cosine(query: &[f32], keys: &FeatureBatch, k: usize) -> Result<f64, ScoreError> {
    kth_of(Metric::Cosine, query, keys, k).map(clamp_cos)
}

/// Latent score: the `k_id`-th largest cosine against the ID dictionary.
pub fn s_in(query: &[f32], id_dict: &IdDictionary, k_id: usize) -> Result<f64, ScoreError> {
    kth_largest_cosine(query, id_dict.keys(), k_id)
}

/// Calibration term: minus the `k_ood`-th largest cosine against the OOD
/// keys. An empty key set gives `0.0`.
pub fn s_out(query: &[f32], ood_total: &FeatureBatch, k_ood: usize) -> Result<f64, ScoreError> {
    check_query(query, ood_total, k_ood)?;
    if ood_total.is_empty() {
        return Ok(0.0);
    }
    kth_largest_cosine(query, ood_total, k_ood).map(|c| -c)
}

pub fn integrated_score(s_in: f64, s_out: f64) -> f64 {
    s_in + s_out
}

/// Adds the calibration term to an externally computed score.
pub fn calibrate_external(base_score: f64, s_out: f64) -> f64 {
    base_score + s_out
}

/// Euclidean distance between unit vectors with cosine `c`.
pub fn euclid_from_cos(c: f64) -> Result<f64, ScoreError> {
    if !(c >= -1.0 - COSINE_SLACK && c <= 1.0 + COSINE_SLACK) {
        return Err(ScoreError::OutOfRange(c));
    }
    Ok((2.0 - 2.0 * clamp_cos(c)).sqrt())
}

/// Baseline k-NN score: minus the explicit Euclidean distance to the `k`-th
/// nearest key.
pub fn knn_euclidean_score(query: &[f32], keys: &FeatureBatch, k: usize) -> Result<f64, ScoreError> {
    kth_of(Metric::Euclidean, query, keys, k).map(|sq| -sq.sqrt())
}

fn check_batch(queries: &FeatureBatch, keys: &PackedKeys, k: usize) -> Result<(), ScoreError> {
    if k == 0 {
        return Err(ScoreError::ZeroK);
    }
    if !queries.is_empty() && queries.dim() != keys.dim() {
        return Err(ScoreError::DimensionMismatch { expected: keys.dim(), found: queries.dim() });
    }
    Ok(())
}

/// [`kth_largest_cosine`] for every query, through the batch kernel.
pub fn kth_cosine_batch(queries: &FeatureBatch, keys: &PackedKeys, k: usize) -> Result<Vec<f64>, ScoreError> {
    check_batch(queries, keys, k)?;
    if keys.is_empty() {
        return Err(ScoreError::EmptyKeys);
    }
    Ok(kernels::map_value_rows(Metric::Cosine, queries, keys, |_, row| {
        clamp_cos(kernels::kth_value(Metric::Cosine, row, k).expect("keys are non-empty"))
    }))
}

/// [`knn_euclidean_score`] for every query, through the batch kernel.
pub fn knn_euclidean_batch(queries: &FeatureBatch, keys: &PackedKeys, k: usize) -> Result<Vec<f64>, ScoreError> {
    check_batch(queries, keys, k)?;
    if keys.is_empty() {
        return Err(ScoreError::EmptyKeys);
    }
    Ok(kernels::map_value_rows(Metric::Euclidean, queries, keys, |_, row| {
        -kernels::kth_value(Metric::Euclidean, row, k).expect("keys are non-empty").sqrt()
    }))
}

/// Score columns for a batch of queries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchScores {
    pub s_in: Vec<f64>,
    pub s_out: Vec<f64>,
    pub s: Vec<f64>,
}

impl BatchScores {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// Scores every query against frozen ID and OOD key sets.
pub fn score_batch(
    queries: &FeatureBatch,
    id_keys: &PackedKeys,
    ood_keys: &PackedKeys,
    params: TopKParams,
) -> Result<BatchScores, ScoreError> {
    let s_in = kth_cosine_batch(queries, id_keys, params.k_id)?;
    if ood_keys.is_empty() {
        check_batch(queries, ood_keys, params.k_ood)?;
        let s = s_in.clone();
        return Ok(BatchScores { s_out: vec![0.0; s_in.len()], s_in, s });
    }
    let s_out: Vec<f64> = kth_cosine_batch(queries, ood_keys, params.k_ood)?.into_iter().map(|c| -c).collect();
    let s = s_in.iter().zip(&s_out).map(|(&a, &b)| integrated_score(a, b)).collect();
    Ok(BatchScores { s_in, s_out, s })
}

/// Element-wise [`calibrate_external`] over aligned columns.
pub fn calibrate_external_column(base: &[f64], s_out: &[f64]) -> Result<Vec<f64>, ScoreError> {
    if base.len() != s_out.len() {
        return Err(ScoreError::LengthMismatch { what: "external scores", expected: s_out.len(), found: base.len() });
    }
    Ok(base.iter().zip(s_out).map(|(&b, &o)| calibrate_external(b, o)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f32]]) -> FeatureBatch {
        FeatureBatch::from_rows(rows, rows[0].len()).unwrap()
    }

    #[test]
    fn two_key_examples() {
        let keys = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(kth_largest_cosine(&[1.0, 0.0], &keys, 1), Ok(1.0));
        assert_eq!(kth_largest_cosine(&[1.0, 0.0], &keys, 2), Ok(0.0));
        assert_eq!(kth_largest_cosine(&[1.0, 0.0], &keys, 9), Ok(0.0));
        assert_eq!(s_out(&[1.0, 0.0], &keys, 1), Ok(-1.0));
    }

    #[test]
    fn empty_and_degenerate_inputs() {
        let empty = FeatureBatch::empty(2);
        assert_eq!(kth_largest_cosine(&[1.0, 0.0], &empty, 1), Err(ScoreError::EmptyKeys));
        assert_eq!(knn_euclidean_score(&[1.0, 0.0], &empty, 1), Err(ScoreError::EmptyKeys));
        assert_eq!(s_out(&[1.0, 0.0], &empty, 5), Ok(0.0));
        let keys = batch(&[&[1.0, 0.0]]);
        assert_eq!(kth_largest_cosine(&[1.0, 0.0], &keys, 0), Err(ScoreError::ZeroK));
        assert_eq!(
            kth_largest_cosine(&[1.0, 0.0, 0.0], &keys, 1),
            Err(ScoreError::DimensionMismatch { expected: 2, found: 3 })
        );
        assert_eq!(TopKParams::new(0, 5), Err(ScoreError::ZeroK));
    }

    #[test]
    fn arithmetic_examples() {
        assert!((integrated_score(0.9, -0.1) - 0.8).abs() < 1e-15);
        assert_eq!(integrated_score(0.37, 0.0), 0.37);
        assert_eq!(calibrate_external(2.3, 0.0), 2.3);
        assert!((calibrate_external(2.3, -0.5) - 1.8).abs() < 1e-15);
        assert!(calibrate_external_column(&[1.0], &[]).is_err());
    }

    #[test]
    fn euclid_from_cos_examples() {
        assert_eq!(euclid_from_cos(1.0), Ok(0.0));
        assert_eq!(euclid_from_cos(0.0), Ok(2f64.sqrt()));
        assert_eq!(euclid_from_cos(-1.0), Ok(2.0));
        assert_eq!(euclid_from_cos(1.0 + 5e-10), Ok(0.0));
        assert_eq!(euclid_from_cos(1.0 + 1e-6), Err(ScoreError::OutOfRange(1.0 + 1e-6)));
        assert!(euclid_from_cos(f64::NAN).is_err());
    }

    #[test]
    fn knn_euclidean_examples() {
        let keys = batch(&[&[1.0, 0.0]]);
        assert_eq!(knn_euclidean_score(&[1.0, 0.0], &keys, 1), Ok(-0.0));
        assert_eq!(knn_euclidean_score(&[0.0, 1.0], &keys, 1), Ok(-(2f64.sqrt())));
    }

    #[test]
    fn empty_ood_keys_give_pure_latent_scores() {
        let id = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let q = batch(&[&[0.6, 0.8], &[1.0, 0.0]]);
        let scores = score_batch(
            &q,
            &PackedKeys::new(&id),
            &PackedKeys::new(&FeatureBatch::empty(2)),
            TopKParams::new(1, 5).unwrap(),
        )
        .unwrap();
        assert_eq!(scores.s_out, vec![0.0, 0.0]);
        assert_eq!(scores.s, scores.s_in);
    }
}
