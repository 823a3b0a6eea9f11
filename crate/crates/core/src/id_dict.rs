//! Informative inlier sampling (the ID dictionary) and low-confidence
//! cropping outliers, its reverse.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::features::{CropRecord, FeatureBatch};
use crate::kernels::PackedKeys;

/// Allowed deviation of a key's L2 norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Class label used when a dictionary is loaded without label metadata.
pub const UNKNOWN_CLASS: i32 = -1;

#[derive(Debug, Error, PartialEq)]
pub enum DictError {
    #[error("no crop records given")]
    EmptyInput,
    #[error("alpha must lie in (0, 100], got {0}")]
    InvalidAlpha(f64),
    #[error("beta must lie in (0, 100], got {0}")]
    InvalidBeta(f64),
    #[error("record {sample_id} has {found} crops of dimension {dim}, expected {expected}")]
    InconsistentRecords {
        sample_id: usize,
        expected: usize,
        found: usize,
        dim: usize,
    },
    #[error("key {row} has norm {norm}, expected unit norm")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("{what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

/// One crop per sample together with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSelection {
    pub features: FeatureBatch,
    pub sample_ids: Vec<usize>,
    pub crop_indices: Vec<usize>,
    pub labels: Vec<i32>,
    pub confidences: Vec<f32>,
}

impl CropSelection {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    fn subset(&self, keep: &[usize]) -> Self {
        Self {
            features: self.features.select(keep),
            sample_ids: keep.iter().map(|&i| self.sample_ids[i]).collect(),
            crop_indices: keep.iter().map(|&i| self.crop_indices[i]).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            confidences: keep.iter().map(|&i| self.confidences[i]).collect(),
        }
    }
}

#[derive(Clone, Copy)]
enum Pick {
    Highest,
    Lowest,
}

fn check_records(records: &[CropRecord<'_>]) -> Result<(usize, usize), DictError> {
    let first = records.first().ok_or(DictError::EmptyInput)?;
    let (m, d) = (first.crop_confidences.len(), first.dim);
    for r in records {
        let crops = r.crop_confidences.len();
        if crops != m || r.dim != d || r.crop_features.len() != m * d || m == 0 {
            return Err(DictError::InconsistentRecords {
                sample_id: r.sample_id,
                expected: m,
                found: crops,
                dim: r.dim,
            });
        }
    }
    Ok((m, d))
}

/// Index of the extreme confidence; ties go to the lowest crop index.
fn extreme_crop(confidences: &[f32], pick: Pick) -> usize {
    let mut best = 0;
    for (m, &c) in confidences.iter().enumerate().skip(1) {
        let better = match pick {
            Pick::Highest => c > confidences[best],
            Pick::Lowest => c < confidences[best],
        };
        if better {
            best = m;
        }
    }
    best
}

fn pick_crops(records: &[CropRecord<'_>], pick: Pick) -> Result<CropSelection, DictError> {
    let (_, d) = check_records(records)?;
    let mut data = Vec::with_capacity(records.len() * d);
    let mut sel = CropSelection {
        features: FeatureBatch::empty(d),
        sample_ids: Vec::with_capacity(records.len()),
        crop_indices: Vec::with_capacity(records.len()),
        labels: Vec::with_capacity(records.len()),
        confidences: Vec::with_capacity(records.len()),
    };
    for r in records {
        let m = extreme_crop(r.crop_confidences, pick);
        data.extend_from_slice(r.crop(m));
        sel.sample_ids.push(r.sample_id);
        sel.crop_indices.push(m);
        sel.labels.push(r.class_label);
        sel.confidences.push(r.crop_confidences[m]);
    }
    sel.features = FeatureBatch::new(data, d).expect("rows have the record dimension");
    Ok(sel)
}

/// Per-class `ceil(percent / 100 * n_c)`; never more than `n_c`.
pub fn per_class_quota(percent: f64, class_size: usize) -> usize {
    let exact = percent * class_size as f64 / 100.0;
    // Absorb representation error so that e.g. 10% of 30 stays 3.
    let quota = (exact - 1e-9).ceil().max(0.0) as usize;
    if class_size == 0 {
        0
    } else {
        quota.clamp(1, class_size)
    }
}

/// Keeps `per_class_quota(percent, n_c)` entries of each class, taking the
/// highest or lowest confidences first with ties by lowest sample id.
/// Returns positions into `sel`, grouped by class.
fn retain_per_class(sel: &CropSelection, percent: f64, pick: Pick) -> Vec<usize> {
    let mut classes: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &label) in sel.labels.iter().enumerate() {
        classes.entry(label).or_default().push(i);
    }
    let mut kept = Vec::new();
    for members in classes.values_mut() {
        members.sort_by(|&a, &b| {
            let (ca, cb) = (sel.confidences[a], sel.confidences[b]);
            let by_conf = match pick {
                Pick::Highest => cb.total_cmp(&ca),
                Pick::Lowest => ca.total_cmp(&cb),
            };
            by_conf.then(sel.sample_ids[a].cmp(&sel.sample_ids[b]))
        });
        kept.extend_from_slice(&members[..per_class_quota(percent, members.len())]);
    }
    kept
}

fn check_percent(p: f64) -> bool {
    p > 0.0 && p <= 100.0
}

/// For each sample, the crop with the highest confidence (ties by lowest
/// crop index).
pub fn select_best_crops(records: &[CropRecord<'_>]) -> Result<CropSelection, DictError> {
    pick_crops(records, Pick::Highest)
}

/// The informative inliers among `best`: the top `alpha_percent` of each
/// class by confidence, in input order.
pub fn select_informative(best: &CropSelection, alpha_percent: f64) -> Result<CropSelection, DictError> {
    if !check_percent(alpha_percent) {
        return Err(DictError::InvalidAlpha(alpha_percent));
    }
    if best.is_empty() {
        return Err(DictError::EmptyInput);
    }
    let mut kept = retain_per_class(best, alpha_percent, Pick::Highest);
    kept.sort_unstable();
    Ok(best.subset(&kept))
}

/// Builds the ID dictionary from best crops by keeping the top
/// `alpha_percent` of each class by confidence. Keys keep input order.
pub fn select_top_alpha_per_class(best: &CropSelection, alpha_percent: f64) -> Result<IdDictionary, DictError> {
    let sel = select_informative(best, alpha_percent)?;
    IdDictionary::new(sel.features, sel.sample_ids, sel.labels)
}

/// The lowest-confidence crop of every sample, then the bottom
/// `beta_percent` of each class, ordered by ascending confidence (ties by
/// sample id).
pub fn select_crop_outliers(records: &[CropRecord<'_>], beta_percent: f64) -> Result<CropSelection, DictError> {
    if !check_percent(beta_percent) {
        return Err(DictError::InvalidBeta(beta_percent));
    }
    let worst = pick_crops(records, Pick::Lowest)?;
    let mut kept = retain_per_class(&worst, beta_percent, Pick::Lowest);
    kept.sort_by(|&a, &b| {
        worst.confidences[a]
            .total_cmp(&worst.confidences[b])
            .then(worst.sample_ids[a].cmp(&worst.sample_ids[b]))
    });
    Ok(worst.subset(&kept))
}

/// Cropping outliers (see [`select_crop_outliers`]); the most outlying key
/// comes first.
pub fn gen_crop_outliers(records: &[CropRecord<'_>], beta_percent: f64) -> Result<OutlierSet, DictError> {
    let sel = select_crop_outliers(records, beta_percent)?;
    OutlierSet::new(sel.features, OutlierStrategy::COut)
}

fn check_unit_rows(keys: &FeatureBatch) -> Result<(), DictError> {
    for (row, v) in keys.rows().enumerate() {
        let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(DictError::NotUnitNorm { row, norm });
        }
    }
    Ok(())
}

/// Immutable matrix of informative inlier keys.
#[derive(Debug, Clone)]
pub struct IdDictionary {
    keys: FeatureBatch,
    source_ids: Vec<usize>,
    class_labels: Vec<i32>,
    packed: PackedKeys,
}

impl IdDictionary {
    pub fn new(keys: FeatureBatch, source_ids: Vec<usize>, class_labels: Vec<i32>) -> Result<Self, DictError> {
        for (what, found) in [("source_ids", source_ids.len()), ("class_labels", class_labels.len())] {
            if found != keys.len() {
                return Err(DictError::LengthMismatch { what, expected: keys.len(), found });
            }
        }
        check_unit_rows(&keys)?;
        let packed = PackedKeys::new(&keys);
        Ok(Self { keys, source_ids, class_labels, packed })
    }

    /// A dictionary loaded from a bare key file: source ids are row indices
    /// and classes are [`UNKNOWN_CLASS`].
    pub fn from_keys(keys: FeatureBatch) -> Result<Self, DictError> {
        let n = keys.len();
        Self::new(keys, (0..n).collect(), vec![UNKNOWN_CLASS; n])
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.keys.dim()
    }

    pub fn keys(&self) -> &FeatureBatch {
        &self.keys
    }

    pub fn source_ids(&self) -> &[usize] {
        &self.source_ids
    }

    pub fn class_labels(&self) -> &[i32] {
        &self.class_labels
    }

    pub fn packed(&self) -> &PackedKeys {
        &self.packed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutlierStrategy {
    /// Low-confidence crops of training data.
    COut,
    /// Samples resembling the test-time OOD distribution.
    TOut,
    /// Samples from an unrelated external distribution.
    DOut,
}

impl fmt::Display for OutlierStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutlierStrategy::COut => "c-out",
            OutlierStrategy::TOut => "t-out",
            OutlierStrategy::DOut => "d-out",
        })
    }
}

impl FromStr for OutlierStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "c-out" | "cout" => Ok(OutlierStrategy::COut),
            "t-out" | "tout" => Ok(OutlierStrategy::TOut),
            "d-out" | "dout" => Ok(OutlierStrategy::DOut),
            other => Err(format!("unknown outlier strategy `{other}` (expected c-out, t-out or d-out)")),
        }
    }
}

/// Unit-norm outlier keys used to initialize the OOD dictionary. Row order
/// decides which keys land in the memory bank.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierSet {
    keys: FeatureBatch,
    strategy: OutlierStrategy,
}

impl OutlierSet {
    pub fn new(keys: FeatureBatch, strategy: OutlierStrategy) -> Result<Self, DictError> {
        check_unit_rows(&keys)?;
        Ok(Self { keys, strategy })
    }

    pub fn keys(&self) -> &FeatureBatch {
        &self.keys
    }

    pub fn strategy(&self) -> OutlierStrategy {
        self.strategy
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record<'a>(id: usize, label: i32, feats: &'a [f32], confs: &'a [f32], dim: usize) -> CropRecord<'a> {
        CropRecord { sample_id: id, class_label: label, crop_features: feats, crop_confidences: confs, dim }
    }

    #[test]
    fn best_crop_ties_go_to_lowest_index() {
        let feats = [1.0, 0.0, 0.0, 1.0, 0.6, 0.8, -1.0, 0.0];
        let confs = [0.2, 0.9, 0.9, 0.1];
        let sel = select_best_crops(&[record(0, 0, &feats, &confs, 2)]).unwrap();
        assert_eq!(sel.crop_indices, vec![1]);
        assert_eq!(sel.features.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn single_crop_passes_through() {
        let feats = [0.6, 0.8];
        let sel = select_best_crops(&[record(3, 1, &feats, &[0.4], 2)]).unwrap();
        assert_eq!(sel.features.row(0), &feats);
        assert_eq!(sel.sample_ids, vec![3]);
    }

    #[test]
    fn lowest_confidence_crop_for_outliers() {
        let feats = [1.0, 0.0, 0.0, 1.0];
        let confs = [0.2, 0.9];
        let out = gen_crop_outliers(&[record(0, 0, &feats, &confs, 2)], 100.0).unwrap();
        assert_eq!(out.keys().row(0), &[1.0, 0.0]);
        assert_eq!(out.strategy(), OutlierStrategy::COut);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        assert_eq!(select_best_crops(&[]).unwrap_err(), DictError::EmptyInput);
        assert_eq!(gen_crop_outliers(&[], 10.0).unwrap_err(), DictError::EmptyInput);
        let feats = [1.0, 0.0];
        let recs = [record(0, 0, &feats, &[0.5], 2)];
        assert_eq!(gen_crop_outliers(&recs, 0.0).unwrap_err(), DictError::InvalidBeta(0.0));
        let best = select_best_crops(&recs).unwrap();
        assert_eq!(select_top_alpha_per_class(&best, 100.5).unwrap_err(), DictError::InvalidAlpha(100.5));
        assert_eq!(select_top_alpha_per_class(&best, -1.0).unwrap_err(), DictError::InvalidAlpha(-1.0));
    }

    #[test]
    fn mixed_crop_counts_are_rejected() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [1.0, 0.0];
        let recs = [record(0, 0, &a, &[0.1, 0.2], 2), record(1, 0, &b, &[0.3], 2)];
        assert!(matches!(select_best_crops(&recs), Err(DictError::InconsistentRecords { sample_id: 1, .. })));
    }

    #[test]
    fn quota_uses_per_class_ceiling() {
        assert_eq!(per_class_quota(50.0, 4), 2);
        assert_eq!(per_class_quota(50.0, 5), 3);
        assert_eq!(per_class_quota(10.0, 30), 3);
        assert_eq!(per_class_quota(1.0, 1), 1);
        assert_eq!(per_class_quota(100.0, 7), 7);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [OutlierStrategy::COut, OutlierStrategy::TOut, OutlierStrategy::DOut] {
            assert_eq!(s.to_string().parse::<OutlierStrategy>().unwrap(), s);
        }
        assert!("x-out".parse::<OutlierStrategy>().is_err());
    }

    #[test]
    fn non_unit_keys_are_rejected() {
        let keys = FeatureBatch::new(vec![1.0, 1.0], 2).unwrap();
        assert!(matches!(IdDictionary::from_keys(keys), Err(DictError::NotUnitNorm { row: 0, .. })));
    }
}
