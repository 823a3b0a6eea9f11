//! The test-time loop: batches of the stream are scored against the
//! dictionaries as they stood at batch start, then offered to the OOD queue
//! in stream order.
//!
//! Ground truth travels in [`StreamLabels`], which [`run_stream`] never
//! sees. Streams are assembled with a seeded ChaCha8 generator.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::eval::{self, EvalError};
use crate::features::FeatureBatch;
use crate::id_dict::{IdDictionary, OutlierStrategy};
use crate::kernels::{self, Metric, PackedKeys};
use crate::ood_dict::{Admission, OodDictionary, OodError};
use crate::scorer::{self, ScoreError, ScoredSample, TopKParams};

/// Validation grid for the ID neighbor rank.
pub const DEFAULT_K_GRID: [usize; 9] = [1, 5, 10, 20, 50, 100, 200, 500, 1000];

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("stream is empty")]
    EmptyStream,
    #[error("candidate grid is empty")]
    EmptyGrid,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("stream dimension {found} does not match dictionary dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("source `{source_name}` has {available} rows, {requested} requested")]
    SourceTooSmall {
        source_name: String,
        requested: usize,
        available: usize,
    },
    #[error("labels cover {labels} samples, trace has {trace}")]
    LabelMismatch { labels: usize, trace: usize },
    #[error("source name `{0}` may not contain commas or line breaks")]
    InvalidSourceName(String),
    #[error("malformed trace line {line}: {reason}")]
    MalformedTrace { line: usize, reason: String },
    #[error("io failure: {0}")]
    Io(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Ood(#[from] OodError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl From<io::Error> for StreamError {
    fn from(e: io::Error) -> Self {
        StreamError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitStrategy {
    None,
    Outliers(OutlierStrategy),
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitStrategy::None => f.write_str("none"),
            InitStrategy::Outliers(s) => s.fmt(f),
        }
    }
}

impl FromStr for InitStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("none") {
            Ok(InitStrategy::None)
        } else {
            s.parse().map(InitStrategy::Outliers)
        }
    }
}

/// Benchmark scale presets for the neighbor rank and dictionary sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Cifar10,
    Cifar100,
    ImageNet,
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cifar10" | "cifar-10" => Ok(Scale::Cifar10),
            "cifar100" | "cifar-100" => Ok(Scale::Cifar100),
            "imagenet" | "imagenet200" | "imagenet-200" | "imagenet1k" | "imagenet-1k" => Ok(Scale::ImageNet),
            other => Err(format!("unknown scale `{other}` (expected cifar10, cifar100 or imagenet)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub batch_size: usize,
    /// Percent of each class kept in the ID dictionary.
    pub alpha: f64,
    /// Crops per training sample.
    pub crops: usize,
    pub k_id: usize,
    pub k_ood: usize,
    pub queue_capacity: usize,
    pub mb_size: usize,
    pub queue_seed_size: usize,
    /// Percent of each class kept as cropping outliers.
    pub beta: f64,
    pub init_strategy: InitStrategy,
    pub seed: u64,
}

impl RunConfig {
    pub fn for_scale(scale: Scale) -> Self {
        let (k_id, queue_capacity, mb_size) = match scale {
            Scale::Cifar10 => (5, 128, 5),
            Scale::Cifar100 => (10, 512, 5),
            Scale::ImageNet => (100, 2048, 128),
        };
        Self {
            batch_size: 512,
            alpha: 50.0,
            crops: 4,
            k_id,
            k_ood: 5,
            queue_capacity,
            mb_size,
            queue_seed_size: 0,
            beta: 10.0,
            init_strategy: InitStrategy::Outliers(OutlierStrategy::COut),
            seed: 0,
        }
    }

    pub fn top_k(&self) -> Result<TopKParams, ScoreError> {
        TopKParams::new(self.k_id, self.k_ood)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_scale(Scale::Cifar10)
    }
}

/// A named feature source.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSource {
    pub name: String,
    pub features: FeatureBatch,
}

/// Ordered OOD segments plus the ID source mixed through the whole stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftScenario {
    pub id_source: StreamSource,
    pub segments: Vec<(StreamSource, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    /// ID and OOD rows uniformly interleaved.
    Shuffled,
    /// ID rows uniformly placed, OOD sources strictly in segment order.
    Segmented,
}

impl fmt::Display for StreamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamMode::Shuffled => "shuffled",
            StreamMode::Segmented => "segmented",
        })
    }
}

impl FromStr for StreamMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "shuffled" => Ok(StreamMode::Shuffled),
            "segmented" => Ok(StreamMode::Segmented),
            other => Err(format!("unknown stream mode `{other}` (expected shuffled or segmented)")),
        }
    }
}

/// Ground truth for a stream, kept apart from its features.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamLabels {
    pub is_ood: Vec<bool>,
    /// Index into `source_names` per position.
    pub source: Vec<usize>,
    pub source_names: Vec<String>,
}

impl StreamLabels {
    pub fn len(&self) -> usize {
        self.is_ood.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_ood.is_empty()
    }

    pub fn source_name(&self, position: usize) -> &str {
        &self.source_names[self.source[position]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledStream {
    pub features: FeatureBatch,
    pub labels: StreamLabels,
}

fn draw(source: &StreamSource, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, StreamError> {
    let available = source.features.len();
    if count > available {
        return Err(StreamError::SourceTooSmall { source_name: source.name.clone(), requested: count, available });
    }
    Ok(index::sample(rng, available, count).into_vec())
}

/// Assembles a labeled stream of `id_count` ID rows and every segment's
/// rows. Rows are drawn without replacement from their sources.
pub fn build_stream(scenario: &DriftScenario, id_count: usize, seed: u64, mode: StreamMode) -> Result<LabeledStream, StreamError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = scenario.id_source.features.dim();
    for (src, _) in &scenario.segments {
        if src.features.dim() != d {
            return Err(StreamError::DimensionMismatch { expected: d, found: src.features.dim() });
        }
    }
    // (source index, row) in the order each part is emitted.
    let id_rows: Vec<(usize, usize)> = draw(&scenario.id_source, id_count, &mut rng)?.into_iter().map(|r| (0, r)).collect();
    let mut ood_rows = Vec::new();
    for (i, (src, count)) in scenario.segments.iter().enumerate() {
        ood_rows.extend(draw(src, *count, &mut rng)?.into_iter().map(|r| (i + 1, r)));
    }
    let total = id_rows.len() + ood_rows.len();
    if total == 0 {
        return Err(StreamError::EmptyStream);
    }
    let order: Vec<(usize, usize)> = match mode {
        StreamMode::Shuffled => {
            let mut all = id_rows;
            all.extend(ood_rows);
            all.shuffle(&mut rng);
            all
        }
        StreamMode::Segmented => {
            let mut is_id = vec![false; total];
            for p in index::sample(&mut rng, total, id_rows.len()) {
                is_id[p] = true;
            }
            let (mut id_it, mut ood_it) = (id_rows.into_iter(), ood_rows.into_iter());
            is_id.iter().map(|&id| if id { id_it.next() } else { ood_it.next() }.expect("counts match")).collect()
        }
    };
    let mut source_names = vec![scenario.id_source.name.clone()];
    source_names.extend(scenario.segments.iter().map(|(s, _)| s.name.clone()));
    let mut data = Vec::with_capacity(total * d);
    let mut labels = StreamLabels { is_ood: Vec::with_capacity(total), source: Vec::with_capacity(total), source_names };
    for (src, row) in order {
        let features = if src == 0 { &scenario.id_source.features } else { &scenario.segments[src - 1].0.features };
        data.extend_from_slice(features.row(row));
        labels.is_ood.push(src != 0);
        labels.source.push(src);
    }
    Ok(LabeledStream { features: FeatureBatch::new(data, d).expect("rows share the ID dimension"), labels })
}

/// Dictionary state after one batch update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSnapshot {
    pub batch_index: usize,
    pub start: usize,
    pub len: usize,
    pub entered: usize,
    pub queue_len: usize,
    pub front_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub samples: Vec<ScoredSample>,
    /// Queue decision per sample, in stream order.
    pub admissions: Vec<Admission>,
    pub batches: Vec<BatchSnapshot>,
}

impl RunTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn column(&self, f: impl Fn(&ScoredSample) -> f64) -> Vec<f64> {
        self.samples.iter().map(f).collect()
    }
}

/// Runs the stream through the dictionaries batch by batch. `ood_dict` is
/// left in its final state.
pub fn run_stream(
    config: &RunConfig,
    id_dict: &IdDictionary,
    ood_dict: &mut OodDictionary,
    stream: &FeatureBatch,
) -> Result<RunTrace, StreamError> {
    if stream.is_empty() {
        return Err(StreamError::EmptyStream);
    }
    if config.batch_size == 0 {
        return Err(StreamError::ZeroBatchSize);
    }
    for expected in [id_dict.dim(), ood_dict.dim()] {
        if stream.dim() != expected {
            return Err(StreamError::DimensionMismatch { expected, found: stream.dim() });
        }
    }
    let params = config.top_k()?;
    let d = stream.dim();
    let mut trace = RunTrace {
        samples: Vec::with_capacity(stream.len()),
        admissions: Vec::with_capacity(stream.len()),
        batches: Vec::new(),
    };
    for (batch_index, rows) in stream.as_slice().chunks(config.batch_size * d).enumerate() {
        let start = batch_index * config.batch_size;
        let batch = FeatureBatch::new(rows.to_vec(), d).expect("chunk holds whole rows");
        let total = PackedKeys::new(&ood_dict.keys_total());
        let scores = scorer::score_batch(&batch, id_dict.packed(), &total, params)?;
        let log = ood_dict.consider_batch(&batch, &scores.s_in)?;
        for i in 0..batch.len() {
            trace.samples.push(ScoredSample {
                s_in: scores.s_in[i],
                s_out: scores.s_out[i],
                s: scores.s[i],
                batch_index,
                stream_position: start + i,
            });
        }
        trace.batches.push(BatchSnapshot {
            batch_index,
            start,
            len: batch.len(),
            entered: log.iter().filter(|a| a.entered()).count(),
            queue_len: ood_dict.queue_len(),
            front_score: ood_dict.front_score(),
        });
        trace.admissions.extend(log);
    }
    Ok(trace)
}

/// AUROC of the integrated score per batch: over everything seen so far and
/// over that batch alone. `None` where a batch lacks one of the classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMetrics {
    pub batch_index: usize,
    pub cumulative_auroc: Option<f64>,
    pub batch_auroc: Option<f64>,
}

fn split_auroc(scores: &[f64], is_ood: &[bool]) -> Option<f64> {
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for (&s, &o) in scores.iter().zip(is_ood) {
        if o { ood.push(s) } else { id.push(s) }
    }
    eval::auroc(&id, &ood).ok()
}

pub fn batch_metrics(trace: &RunTrace, labels: &StreamLabels) -> Result<Vec<BatchMetrics>, StreamError> {
    if labels.len() != trace.len() {
        return Err(StreamError::LabelMismatch { labels: labels.len(), trace: trace.len() });
    }
    let s = trace.column(|x| x.s);
    Ok(trace
        .batches
        .iter()
        .map(|b| {
            let end = b.start + b.len;
            BatchMetrics {
                batch_index: b.batch_index,
                cumulative_auroc: split_auroc(&s[..end], &labels.is_ood[..end]),
                batch_auroc: split_auroc(&s[b.start..end], &labels.is_ood[b.start..end]),
            }
        })
        .collect())
}

/// Picks the grid value whose pure latent score separates the validation
/// sets best by AUROC; ties go to the smaller value. The validation sets
/// must be disjoint from the test stream.
pub fn select_k_id(
    val_id: &FeatureBatch,
    val_ood: &FeatureBatch,
    id_dict: &IdDictionary,
    grid: &[usize],
) -> Result<usize, StreamError> {
    let mut grid: Vec<usize> = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() {
        return Err(StreamError::EmptyGrid);
    }
    if grid[0] == 0 {
        return Err(ScoreError::ZeroK.into());
    }
    if id_dict.is_empty() {
        return Err(ScoreError::EmptyKeys.into());
    }
    let k_max = *grid.last().expect("grid is non-empty");
    let sweep = |queries: &FeatureBatch| -> Result<Vec<Vec<f64>>, StreamError> {
        if !queries.is_empty() && queries.dim() != id_dict.dim() {
            return Err(StreamError::DimensionMismatch { expected: id_dict.dim(), found: queries.dim() });
        }
        Ok(kernels::map_value_rows(Metric::Cosine, queries, id_dict.packed(), |_, row| {
            let top = kernels::top_k(Metric::Cosine, row, k_max).expect("keys are non-empty");
            grid.iter().map(|&k| top.values[k.min(top.values.len()) - 1].clamp(-1.0, 1.0)).collect()
        }))
    };
    let id_rows = sweep(val_id)?;
    let ood_rows = sweep(val_ood)?;
    let mut best: Option<(usize, f64)> = None;
    for (g, &k) in grid.iter().enumerate() {
        let id: Vec<f64> = id_rows.iter().map(|r| r[g]).collect();
        let ood: Vec<f64> = ood_rows.iter().map(|r| r[g]).collect();
        let a = eval::auroc(&id, &ood)?;
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((k, a));
        }
    }
    Ok(best.expect("grid is non-empty").0)
}

pub const TRACE_HEADER: &str = "position,is_ood,source,s_in,s_out,s";

/// Writes one row per sample. Floats use the shortest representation that
/// reads back to the same value.
pub fn write_trace_csv(mut w: impl Write, trace: &RunTrace, labels: &StreamLabels) -> Result<(), StreamError> {
    if labels.len() != trace.len() {
        return Err(StreamError::LabelMismatch { labels: labels.len(), trace: trace.len() });
    }
    if let Some(bad) = labels.source_names.iter().find(|n| n.contains([',', '\n', '\r'])) {
        return Err(StreamError::InvalidSourceName(bad.clone()));
    }
    writeln!(w, "{TRACE_HEADER}")?;
    for (i, x) in trace.samples.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{:?},{:?},{:?}",
            x.stream_position,
            u8::from(labels.is_ood[i]),
            labels.source_name(i),
            x.s_in,
            x.s_out,
            x.s
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One parsed trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub position: usize,
    pub is_ood: bool,
    pub source: String,
    pub s_in: f64,
    pub s_out: f64,
    pub s: f64,
}

pub fn read_trace_csv(r: impl BufRead) -> Result<Vec<TraceRow>, StreamError> {
    let mut rows = Vec::new();
    let mut lines = r.lines().enumerate();
    let header = lines.next().map(|(_, h)| h).transpose()?;
    if header.as_deref().map(str::trim) != Some(TRACE_HEADER) {
        return Err(StreamError::MalformedTrace { line: 1, reason: format!("expected header `{TRACE_HEADER}`") });
    }
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| StreamError::MalformedTrace { line: i + 1, reason: reason.to_string() };
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad("bad score"));
        rows.push(TraceRow {
            position: fields[0].parse().map_err(|_| bad("bad position"))?,
            is_ood: match fields[1] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("is_ood must be 0 or 1")),
            },
            source: fields[2].to_string(),
            s_in: num(fields[3])?,
            s_out: num(fields[4])?,
            s: num(fields[5])?,
        });
    }
    Ok(rows)
}
