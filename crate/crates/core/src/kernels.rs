//! Similarity kernels over `f32` rows with `f64` accumulation.
//!
//! Every pair value is accumulated sequentially over the feature dimension
//! with fused multiply-add, starting from `0.0`:
//!
//! ```text
//! cosine     acc = fma(q[j], k[j], acc)
//! euclidean  t = q[j] - k[j]; acc = fma(t, t, acc)
//! ```
//!
//! The batch kernels are outer-product register tiles over packed key
//! panels (the dot-product path is a plain matrix multiplication). They keep
//! that exact accumulation order, so the scalar reference, the portable
//! kernel and the SIMD kernels return bit-identical values on any machine.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::features::FeatureBatch;

/// Queries per parallel work item.
const QUERY_CHUNK: usize = 128;
/// Packed key panels processed per pass over a query chunk; keeps the
/// working set of panels inside L2.
const PANELS_PER_BLOCK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Inner product of unit vectors; larger is closer.
    Cosine,
    /// Explicit squared distance `||q - k||^2`; smaller is closer. Ranking
    /// happens on squared values; callers take the root of what they keep.
    Euclidean,
}

impl Metric {
    /// Neighbor order: closest first, ties by lowest key index.
    #[inline]
    pub fn rank_cmp(self, a: (f64, u32), b: (f64, u32)) -> Ordering {
        let by_value = match self {
            Metric::Cosine => b.0.total_cmp(&a.0),
            Metric::Euclidean => a.0.total_cmp(&b.0),
        };
        by_value.then(a.1.cmp(&b.1))
    }
}

#[inline(always)]
fn step_scalar<const EUCLID: bool>(x: f64, y: f64, acc: f64) -> f64 {
    if EUCLID {
        let t = x - y;
        t.mul_add(t, acc)
    } else {
        x.mul_add(y, acc)
    }
}

/// Scalar reference for one pair; defines the accumulation order.
fn pair_scalar<const EUCLID: bool>(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (&x, &y)| step_scalar::<EUCLID>(f64::from(x), f64::from(y), acc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Isa {
    Portable,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

impl Isa {
    /// Keys per packed panel.
    fn panel_width(self) -> usize {
        match self {
            Isa::Portable => portable::NR,
            #[cfg(target_arch = "x86_64")]
            Isa::Avx2 => avx2::NR,
            #[cfg(target_arch = "x86_64")]
            Isa::Avx512 => avx512::NR,
        }
    }
}

fn detect_isa() -> Isa {
    let forced = std::env::var("OODD_KERNEL_ISA").ok();
    #[cfg(target_arch = "x86_64")]
    {
        let avx512 = is_x86_feature_detected!("avx512f");
        let avx2 = is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma");
        match forced.as_deref() {
            Some("portable") => return Isa::Portable,
            Some("avx2") if avx2 => return Isa::Avx2,
            _ => {}
        }
        if avx512 {
            return Isa::Avx512;
        }
        if avx2 {
            return Isa::Avx2;
        }
    }
    let _ = forced;
    Isa::Portable
}

fn isa() -> Isa {
    static ISA: std::sync::OnceLock<Isa> = std::sync::OnceLock::new();
    *ISA.get_or_init(detect_isa)
}

/// Name of the instruction set the batch kernels dispatch to. Set
/// `OODD_KERNEL_ISA=avx2` or `portable` to force a narrower path.
pub fn kernel_isa() -> &'static str {
    match isa() {
        Isa::Portable => "portable",
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => "avx2+fma",
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => "avx512f",
    }
}

/// Keys widened to `f64` and transposed into panels of `width` keys:
/// element `(panel, j, r)` lives at `(panel * dim + j) * width + r`.
/// The last panel is zero-padded.
#[derive(Debug, Clone)]
pub struct PackedKeys {
    data: Vec<f64>,
    len: usize,
    dim: usize,
    width: usize,
}

impl PackedKeys {
    pub fn new(keys: &FeatureBatch) -> Self {
        Self::with_width(keys, isa().panel_width())
    }

    fn with_width(keys: &FeatureBatch, width: usize) -> Self {
        let (len, dim) = (keys.len(), keys.dim());
        let panels = len.div_ceil(width);
        let mut data = vec![0.0f64; panels * dim * width];
        for (key, row) in keys.rows().enumerate() {
            let (p, r) = (key / width, key % width);
            let base = p * dim * width + r;
            for (j, &x) in row.iter().enumerate() {
                data[base + j * width] = f64::from(x);
            }
        }
        Self { data, len, dim, width }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn panels(&self) -> usize {
        self.len.div_ceil(self.width)
    }

    fn panel(&self, p: usize) -> &[f64] {
        let size = self.dim * self.width;
        &self.data[p * size..(p + 1) * size]
    }
}

/// Writes the `rows x valid` corner of a micro-tile into `out`.
#[inline(always)]
fn store_tile<const NR: usize>(tile: &[[f64; NR]], valid: usize, out: &mut [f64], stride: usize, col: usize) {
    for (i, row) in tile.iter().enumerate() {
        out[i * stride + col..i * stride + col + valid].copy_from_slice(&row[..valid]);
    }
}

mod portable {
    use super::step_scalar;

    pub const NR: usize = 8;
    pub const MR: usize = 4;

    pub fn micro<const ROWS: usize, const EUCLID: bool>(
        q: &[f64],
        d: usize,
        panel: &[f64],
    ) -> [[f64; NR]; ROWS] {
        let mut acc = [[0.0f64; NR]; ROWS];
        for j in 0..d {
            let y = &panel[j * NR..(j + 1) * NR];
            for (i, row) in acc.iter_mut().enumerate() {
                let x = q[i * d + j];
                for r in 0..NR {
                    row[r] = step_scalar::<EUCLID>(x, y[r], row[r]);
                }
            }
        }
        acc
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    pub const NR: usize = 8;
    pub const MR: usize = 4;

    #[inline(always)]
    unsafe fn step<const EUCLID: bool>(x: __m256d, y: __m256d, acc: __m256d) -> __m256d {
        if EUCLID {
            let t = _mm256_sub_pd(x, y);
            _mm256_fmadd_pd(t, t, acc)
        } else {
            _mm256_fmadd_pd(x, y, acc)
        }
    }

    /// `ROWS` queries x 8 keys; two accumulator registers per query.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn micro<const ROWS: usize, const EUCLID: bool>(
        q: &[f64],
        d: usize,
        panel: &[f64],
    ) -> [[f64; NR]; ROWS] {
        debug_assert!(q.len() >= ROWS * d && panel.len() >= d * NR);
        let (qp, pp) = (q.as_ptr(), panel.as_ptr());
        let mut acc = [[_mm256_setzero_pd(); 2]; ROWS];
        for j in 0..d {
            let y0 = _mm256_loadu_pd(pp.add(j * NR));
            let y1 = _mm256_loadu_pd(pp.add(j * NR + 4));
            for (i, a) in acc.iter_mut().enumerate() {
                let x = _mm256_broadcast_sd(&*qp.add(i * d + j));
                a[0] = step::<EUCLID>(x, y0, a[0]);
                a[1] = step::<EUCLID>(x, y1, a[1]);
            }
        }
        let mut out = [[0.0; NR]; ROWS];
        for (row, a) in out.iter_mut().zip(&acc) {
            _mm256_storeu_pd(row.as_mut_ptr(), a[0]);
            _mm256_storeu_pd(row.as_mut_ptr().add(4), a[1]);
        }
        out
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    pub const NR: usize = 24;
    pub const MR: usize = 8;

    #[inline(always)]
    unsafe fn step<const EUCLID: bool>(x: __m512d, y: __m512d, acc: __m512d) -> __m512d {
        if EUCLID {
            let t = _mm512_sub_pd(x, y);
            _mm512_fmadd_pd(t, t, acc)
        } else {
            _mm512_fmadd_pd(x, y, acc)
        }
    }

    /// `ROWS` queries x 24 keys; three accumulator registers per query.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn micro<const ROWS: usize, const EUCLID: bool>(
        q: &[f64],
        d: usize,
        panel: &[f64],
    ) -> [[f64; NR]; ROWS] {
        debug_assert!(q.len() >= ROWS * d && panel.len() >= d * NR);
        let (qp, pp) = (q.as_ptr(), panel.as_ptr());
        let mut acc = [[_mm512_setzero_pd(); 3]; ROWS];
        for j in 0..d {
            let y0 = _mm512_loadu_pd(pp.add(j * NR));
            let y1 = _mm512_loadu_pd(pp.add(j * NR + 8));
            let y2 = _mm512_loadu_pd(pp.add(j * NR + 16));
            for (i, a) in acc.iter_mut().enumerate() {
                let x = _mm512_set1_pd(*qp.add(i * d + j));
                a[0] = step::<EUCLID>(x, y0, a[0]);
                a[1] = step::<EUCLID>(x, y1, a[1]);
                a[2] = step::<EUCLID>(x, y2, a[2]);
            }
        }
        let mut out = [[0.0; NR]; ROWS];
        for (row, a) in out.iter_mut().zip(&acc) {
            _mm512_storeu_pd(row.as_mut_ptr(), a[0]);
            _mm512_storeu_pd(row.as_mut_ptr().add(8), a[1]);
            _mm512_storeu_pd(row.as_mut_ptr().add(16), a[2]);
        }
        out
    }
}

/// Expands to a block driver for one ISA: runs the `MR`-row micro-kernel
/// over every query group and panel, with monomorphized remainders.
macro_rules! block_driver {
    ($name:ident, $module:ident, $($feature:literal)?) => {
        $(#[target_feature(enable = $feature)])?
        unsafe fn $name<const EUCLID: bool>(
            queries: &[f64],
            keys: &PackedKeys,
            out: &mut [f64],
        ) {
            use $module::{micro, MR, NR};
            let d = keys.dim;
            let nq = queries.len() / d;
            let stride = keys.len;
            for block_start in (0..keys.panels()).step_by(PANELS_PER_BLOCK) {
                let block_end = (block_start + PANELS_PER_BLOCK).min(keys.panels());
                let mut i = 0;
                while i < nq {
                    let rows = (nq - i).min(MR);
                    let q = &queries[i * d..(i + rows) * d];
                    let out = &mut out[i * stride..];
                    for p in block_start..block_end {
                        let panel = keys.panel(p);
                        let col = p * NR;
                        let valid = (keys.len - col).min(NR);
                        #[allow(unused_unsafe, unreachable_patterns)]
                        let tile: &[[f64; NR]] = unsafe {
                            match rows {
                                MR => &micro::<MR, EUCLID>(q, d, panel),
                                1 => &micro::<1, EUCLID>(q, d, panel),
                                2 => &micro::<2, EUCLID>(q, d, panel),
                                3 => &micro::<3, EUCLID>(q, d, panel),
                                4 => &micro::<4, EUCLID>(q, d, panel),
                                5 => &micro::<5, EUCLID>(q, d, panel),
                                6 => &micro::<6, EUCLID>(q, d, panel),
                                _ => &micro::<7, EUCLID>(q, d, panel),
                            }
                        };
                        store_tile::<NR>(tile, valid, out, stride, col);
                    }
                    i += rows;
                }
            }
        }
    };
}

block_driver!(block_portable, portable,);
#[cfg(target_arch = "x86_64")]
block_driver!(block_avx2, avx2, "avx2,fma");
#[cfg(target_arch = "x86_64")]
block_driver!(block_avx512, avx512, "avx512f");

/// Fills `out[i * keys.len() + j]` with the raw accumulated value (inner
/// product or squared distance) of query row `i` against key `j`.
fn block_values<const EUCLID: bool>(queries: &[f64], keys: &PackedKeys, out: &mut [f64]) {
    let width = isa().panel_width();
    assert_eq!(keys.width, width, "keys were packed for a different kernel");
    // SAFETY: each SIMD driver is only selected after runtime detection of
    // its CPU features; slice bounds are checked by the drivers.
    unsafe {
        match isa() {
            #[cfg(target_arch = "x86_64")]
            Isa::Avx512 => block_avx512::<EUCLID>(queries, keys, out),
            #[cfg(target_arch = "x86_64")]
            Isa::Avx2 => block_avx2::<EUCLID>(queries, keys, out),
            Isa::Portable => block_portable::<EUCLID>(queries, keys, out),
        }
    }
}

/// Inner product with `f64` accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    pair_scalar::<false>(a, b)
}

/// Squared Euclidean distance computed from explicit differences.
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    pair_scalar::<true>(a, b)
}

/// Value the given metric assigns to a pair of rows (scalar reference).
pub fn pair_value(metric: Metric, a: &[f32], b: &[f32]) -> f64 {
    match metric {
        Metric::Cosine => dot(a, b),
        Metric::Euclidean => squared_distance(a, b),
    }
}

fn widen(rows: &[f32]) -> Vec<f64> {
    rows.iter().map(|&x| f64::from(x)).collect()
}

fn chunk_values(metric: Metric, queries: &[f32], keys: &PackedKeys, out: &mut [f64]) {
    let q = widen(queries);
    match metric {
        Metric::Cosine => block_values::<false>(&q, keys, out),
        Metric::Euclidean => block_values::<true>(&q, keys, out),
    }
}

/// Runs `f(query_index, values_row)` for every query, where `values_row`
/// holds the metric value against every key. Queries are processed in
/// parallel chunks; results come back in query order.
pub fn map_value_rows<T, F>(metric: Metric, queries: &FeatureBatch, keys: &PackedKeys, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut [f64]) -> T + Sync,
{
    assert_eq!(queries.dim(), keys.dim(), "query and key dimensions differ");
    let d = queries.dim();
    let nk = keys.len();
    let rows: Vec<Vec<T>> = queries
        .as_slice()
        .par_chunks(QUERY_CHUNK * d)
        .enumerate()
        .map_init(Vec::new, |values: &mut Vec<f64>, (ci, chunk)| {
            let nq = chunk.len() / d;
            // Every entry is overwritten by the kernel.
            values.resize(nq * nk, 0.0);
            if nk > 0 {
                chunk_values(metric, chunk, keys, &mut values[..nq * nk]);
            }
            (0..nq).map(|qi| f(ci * QUERY_CHUNK + qi, &mut values[qi * nk..(qi + 1) * nk])).collect()
        })
        .collect();
    rows.into_iter().flatten().collect()
}

/// All metric values of one query against `keys`, through the batch kernel.
pub fn values_against(metric: Metric, query: &[f32], keys: &PackedKeys) -> Vec<f64> {
    assert_eq!(query.len(), keys.dim(), "query and key dimensions differ");
    let mut out = vec![0.0; keys.len()];
    if !keys.is_empty() {
        chunk_values(metric, query, keys, &mut out);
    }
    out
}

/// Keeps the `k` closest entries seen so far; the root is the worst kept
/// entry. Entries are `(closeness, index)` where larger closeness is
/// closer and ties go to the lower index.
fn select_closest(metric: Metric, values: &[f64], k: usize) -> Vec<(f64, u32)> {
    let sign = match metric {
        Metric::Cosine => 1.0,
        Metric::Euclidean => -1.0,
    };
    let k = k.min(values.len());
    // `a` is kept in preference to `b`.
    let better = |a: &(f64, u32), b: &(f64, u32)| match a.0.total_cmp(&b.0) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.1 < b.1,
    };
    let sift_down = |heap: &mut [(f64, u32)], mut i: usize| loop {
        let (l, r) = (2 * i + 1, 2 * i + 2);
        let mut worst = i;
        if l < heap.len() && better(&heap[worst], &heap[l]) {
            worst = l;
        }
        if r < heap.len() && better(&heap[worst], &heap[r]) {
            worst = r;
        }
        if worst == i {
            break;
        }
        heap.swap(i, worst);
        i = worst;
    };
    let mut heap: Vec<(f64, u32)> =
        values[..k].iter().enumerate().map(|(i, &v)| (sign * v, i as u32)).collect();
    for i in (0..k / 2).rev() {
        sift_down(&mut heap, i);
    }
    for (i, &v) in values.iter().enumerate().skip(k) {
        let c = sign * v;
        // Later indices lose ties, so only strictly closer values enter.
        if c.total_cmp(&heap[0].0) == Ordering::Greater {
            heap[0] = (c, i as u32);
            sift_down(&mut heap, 0);
        }
    }
    for e in &mut heap {
        e.0 *= sign;
    }
    heap
}

/// Value of the `k`-th closest element of `values` under `metric`. When
/// `k` exceeds the length the farthest value is returned.
pub fn kth_value(metric: Metric, values: &[f64], k: usize) -> Option<f64> {
    if values.is_empty() || k == 0 {
        return None;
    }
    Some(select_closest(metric, values, k)[0].0)
}

/// The `k` closest keys in rank order (ties by lowest index).
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl Neighbors {
    pub fn kth_value(&self) -> f64 {
        *self.values.last().expect("neighbors are never empty")
    }

    pub fn kth_index(&self) -> u32 {
        *self.indices.last().expect("neighbors are never empty")
    }
}

/// Selects the `min(k, len)` closest entries of `values` under `metric`.
pub fn top_k(metric: Metric, values: &[f64], k: usize) -> Option<Neighbors> {
    if values.is_empty() || k == 0 {
        return None;
    }
    let mut kept = select_closest(metric, values, k);
    kept.sort_unstable_by(|&a, &b| metric.rank_cmp(a, b));
    Some(Neighbors {
        indices: kept.iter().map(|p| p.1).collect(),
        values: kept.iter().map(|p| p.0).collect(),
    })
}
