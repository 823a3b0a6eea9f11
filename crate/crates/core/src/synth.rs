//! Seeded synthetic feature data: noisy clusters on the unit sphere around
//! random centers, with optional crop views and confidences.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::features::{l2_normalize, Confidences, FeatureBatch};

/// A uniformly random unit vector.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

pub fn random_unit_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> FeatureBatch {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend(random_unit(rng, d));
    }
    FeatureBatch::new(data, d).expect("rows have dimension d")
}

/// `normalize(center + spread * g / sqrt(d))` with standard normal `g`;
/// the expected cosine to the center is about `1 / sqrt(1 + spread^2)`.
pub fn perturb<R: Rng + ?Sized>(rng: &mut R, center: &[f32], spread: f64) -> Vec<f32> {
    let scale = spread / (center.len() as f64).sqrt();
    loop {
        let v: Vec<f32> = center
            .iter()
            .map(|&c| (f64::from(c) + scale * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

pub fn sample_cluster<R: Rng + ?Sized>(rng: &mut R, center: &[f32], n: usize, spread: f64) -> FeatureBatch {
    let mut data = Vec::with_capacity(n * center.len());
    for _ in 0..n {
        data.extend(perturb(rng, center, spread));
    }
    FeatureBatch::new(data, center.len()).expect("rows have the center dimension")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub id_clusters: usize,
    /// Training points, spread evenly over the ID clusters.
    pub id_train: usize,
    pub id_test: usize,
    pub ood_test: usize,
    pub id_spread: f64,
    pub ood_spread: f64,
    /// Crops per training point; crop views add `crop_spread` noise.
    pub crops: usize,
    pub crop_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            id_clusters: 5,
            id_train: 5000,
            id_test: 5000,
            ood_test: 500,
            id_spread: 2.75,
            ood_spread: 2.0,
            crops: 4,
            crop_spread: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub id_centers: FeatureBatch,
    pub ood_center: Vec<f32>,
    pub train: FeatureBatch,
    pub train_labels: Vec<i32>,
    pub id_test: FeatureBatch,
    pub id_test_labels: Vec<i32>,
    pub ood_test: FeatureBatch,
}

fn labeled_draw(rng: &mut ChaCha8Rng, centers: &FeatureBatch, n: usize, spread: f64) -> (FeatureBatch, Vec<i32>) {
    let d = centers.dim();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % centers.len();
        data.extend(perturb(rng, centers.row(c), spread));
        labels.push(c as i32);
    }
    (FeatureBatch::new(data, d).expect("rows have dimension d"), labels)
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_component(v: &mut [f64], u: &[f64]) {
    let p = dot64(v, u);
    v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
}

/// A random unit vector orthogonal to every row of `basis` (which must not
/// span the whole space).
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, basis: &FeatureBatch) -> Vec<f32> {
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for row in basis.rows() {
        let mut u: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
        for q in &ortho {
            remove_component(&mut u, q);
        }
        let n = dot64(&u, &u).sqrt();
        if n > 1e-9 {
            ortho.push(u.into_iter().map(|x| x / n).collect());
        }
    }
    loop {
        let mut v: Vec<f64> = random_unit(rng, basis.dim()).into_iter().map(f64::from).collect();
        for _ in 0..2 {
            for q in &ortho {
                remove_component(&mut v, q);
            }
        }
        let v: Vec<f32> = v.into_iter().map(|x| x as f32).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// ID clusters around random centers and one OOD cluster around a random
/// center orthogonal to all of them.
pub fn generate(cfg: &SyntheticConfig) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let id_centers = random_unit_batch(&mut rng, cfg.id_clusters, cfg.dim);
    let ood_center = random_orthogonal(&mut rng, &id_centers);
    let (train, train_labels) = labeled_draw(&mut rng, &id_centers, cfg.id_train, cfg.id_spread);
    let (id_test, id_test_labels) = labeled_draw(&mut rng, &id_centers, cfg.id_test, cfg.id_spread);
    let ood_test = sample_cluster(&mut rng, &ood_center, cfg.ood_test, cfg.ood_spread);
    SyntheticData { id_centers, ood_center, train, train_labels, id_test, id_test_labels, ood_test }
}

/// `crops` noisy views of every row, sample-major, with confidences given
/// by the view's cosine to its class center mapped from `[-1, 1]` to
/// `[0, 1]`.
pub fn crop_views(
    rows: &FeatureBatch,
    labels: &[i32],
    centers: &FeatureBatch,
    crops: usize,
    spread: f64,
    seed: u64,
) -> (FeatureBatch, Confidences) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rows.dim();
    let mut data = Vec::with_capacity(rows.len() * crops * d);
    let mut conf = Vec::with_capacity(rows.len() * crops);
    for (row, &label) in rows.rows().zip(labels) {
        let center = centers.row(label as usize);
        for _ in 0..crops {
            let view = perturb(&mut rng, row, spread);
            let cos: f64 = view.iter().zip(center).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            conf.push(((cos.clamp(-1.0, 1.0) + 1.0) / 2.0) as f32);
            data.extend(view);
        }
    }
    (
        FeatureBatch::new(data, d).expect("rows have dimension d"),
        Confidences::new(conf, crops).expect("confidences lie in [0, 1]"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let cfg = SyntheticConfig { id_train: 20, id_test: 10, ood_test: 5, ..SyntheticConfig::default() };
        assert_eq!(generate(&cfg), generate(&cfg));
        let other = generate(&SyntheticConfig { seed: 1, ..cfg.clone() });
        assert_ne!(generate(&cfg).train, other.train);
    }

    #[test]
    fn orthogonal_center_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let basis = random_unit_batch(&mut rng, 5, 16);
        let v = random_orthogonal(&mut rng, &basis);
        for b in basis.rows() {
            let c: f64 = v.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
            assert!(c.abs() < 1e-6, "{c}");
        }
    }

    #[test]
    fn perturbation_tracks_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = random_unit(&mut rng, 256);
        let pts = sample_cluster(&mut rng, &c, 200, 1.0);
        let mean: f64 = pts
            .rows()
            .map(|p| p.iter().zip(&c).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum::<f64>())
            .sum::<f64>()
            / 200.0;
        assert!((mean - 0.5f64.sqrt()).abs() < 0.02, "{mean}");
    }

    #[test]
    fn crop_views_have_valid_confidences() {
        let cfg = SyntheticConfig { id_train: 10, id_test: 0, ood_test: 0, ..SyntheticConfig::default() };
        let data = generate(&cfg);
        let (views, conf) = crop_views(&data.train, &data.train_labels, &data.id_centers, 3, 0.5, 1);
        assert_eq!(views.len(), 30);
        assert_eq!(conf.samples(), 10);
    }
}
