//! Timing of the cosine top-k path against the explicit Euclidean path on
//! identical data, with an exact equivalence check between the two.
//!
//! Both paths share key packing, blocking, thread pool and selection code;
//! only the inner accumulation differs (`q * k` against `(q - k)^2`).

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::FeatureBatch;
use crate::kernels::{self, Metric, Neighbors, PackedKeys};
use crate::scorer;
use crate::synth::random_unit_batch;

/// Largest accepted gap between `-d_E` and `-sqrt(2 - 2c)`.
pub const VALUE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum BenchError {
    #[error("bench sizes must be positive")]
    EmptyProblem,
    #[error("at least 3 timed repeats are required, got {0}")]
    TooFewRepeats(usize),
    #[error("cosine and euclidean paths disagree: {disagreements} rank mismatches, max value error {max_value_error:e}")]
    EquivalenceViolation { disagreements: usize, max_value_error: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub n_keys: usize,
    pub d: usize,
    pub n_queries: usize,
    pub k: usize,
    pub repeats: usize,
    pub threads: usize,
    pub isa: &'static str,
    /// Median seconds per full pass over all queries.
    pub cosine_time: f64,
    pub euclid_time: f64,
    pub speedup: f64,
    /// Queries whose ranked top-k index lists differ between the paths.
    pub max_rank_disagreement: usize,
    pub max_value_error: f64,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str =
        "n_keys,d,n_queries,k,repeats,threads,isa,cosine_time,euclid_time,speedup,max_rank_disagreement,max_value_error";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6},{:.6},{:.4},{},{:e}",
            self.n_keys,
            self.d,
            self.n_queries,
            self.k,
            self.repeats,
            self.threads,
            self.isa,
            self.cosine_time,
            self.euclid_time,
            self.speedup,
            self.max_rank_disagreement,
            self.max_value_error
        )
    }
}

/// Top-k neighbors of every query under `metric`.
pub fn neighbors(metric: Metric, queries: &FeatureBatch, keys: &PackedKeys, k: usize) -> Vec<Neighbors> {
    kernels::map_value_rows(metric, queries, keys, |_, row| {
        kernels::top_k(metric, row, k).expect("keys are non-empty")
    })
}

/// Compares the two paths query by query: ranked index lists must match
/// and the k-th values must agree under `d_E = sqrt(2 - 2c)`. Returns the
/// number of mismatching queries and the largest value error.
pub fn compare_paths(cosine: &[Neighbors], euclid: &[Neighbors]) -> (usize, f64) {
    let mut disagreements = 0;
    let mut max_err = 0.0f64;
    for (c, e) in cosine.iter().zip(euclid) {
        if c.indices != e.indices {
            disagreements += 1;
        }
        let via_cos = match scorer::euclid_from_cos(c.kth_value().clamp(-1.0, 1.0)) {
            Ok(v) => v,
            Err(_) => f64::INFINITY,
        };
        let direct = e.kth_value().sqrt();
        max_err = max_err.max((via_cos - direct).abs());
    }
    (disagreements, max_err)
}

fn median(mut v: Vec<Duration>) -> f64 {
    v.sort();
    v[v.len() / 2].as_secs_f64()
}

/// Times both paths over seeded random unit vectors. One untimed warm-up
/// pass per path precedes `repeats` alternating timed passes.
pub fn run_bench(n_keys: usize, d: usize, n_queries: usize, k: usize, repeats: usize, seed: u64) -> Result<BenchReport, BenchError> {
    if n_keys == 0 || d == 0 || n_queries == 0 || k == 0 {
        return Err(BenchError::EmptyProblem);
    }
    if repeats < 3 {
        return Err(BenchError::TooFewRepeats(repeats));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = random_unit_batch(&mut rng, n_keys, d);
    let queries = random_unit_batch(&mut rng, n_queries, d);
    let packed = PackedKeys::new(&keys);
    drop(keys);

    let cosine = neighbors(Metric::Cosine, &queries, &packed, k);
    let euclid = neighbors(Metric::Euclidean, &queries, &packed, k);
    let (disagreements, max_value_error) = compare_paths(&cosine, &euclid);
    drop((cosine, euclid));

    let (mut cos_t, mut euc_t) = (Vec::new(), Vec::new());
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(neighbors(Metric::Cosine, &queries, &packed, k));
        cos_t.push(t.elapsed());
        let t = Instant::now();
        std::hint::black_box(neighbors(Metric::Euclidean, &queries, &packed, k));
        euc_t.push(t.elapsed());
    }
    if disagreements > 0 || !(max_value_error < VALUE_TOLERANCE) {
        return Err(BenchError::EquivalenceViolation { disagreements, max_value_error });
    }
    let (cosine_time, euclid_time) = (median(cos_t), median(euc_t));
    Ok(BenchReport {
        n_keys,
        d,
        n_queries,
        k,
        repeats,
        threads: rayon::current_num_threads(),
        isa: kernels::kernel_isa(),
        cosine_time,
        euclid_time,
        speedup: euclid_time / cosine_time,
        max_rank_disagreement: disagreements,
        max_value_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_bench() {
        let r = run_bench(1, 8, 4, 1, 3, 0).unwrap();
        assert_eq!(r.max_rank_disagreement, 0);
        assert!(r.speedup > 0.0);
        assert_eq!(r.csv_row().split(',').count(), BenchReport::CSV_HEADER.split(',').count());
    }

    #[test]
    fn invalid_parameters() {
        assert_eq!(run_bench(0, 8, 4, 1, 3, 0), Err(BenchError::EmptyProblem));
        assert_eq!(run_bench(4, 8, 4, 1, 2, 0), Err(BenchError::TooFewRepeats(2)));
    }

    #[test]
    fn equivalence_is_reproducible() {
        let a = run_bench(300, 16, 20, 7, 3, 5).unwrap();
        let b = run_bench(300, 16, 20, 7, 3, 5).unwrap();
        assert_eq!((a.max_rank_disagreement, a.max_value_error), (b.max_rank_disagreement, b.max_value_error));
    }
}
