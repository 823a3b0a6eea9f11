use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use oodd_core::bench::{self, BenchReport};
use oodd_core::features::{self, CropStore, FeatureBatch};
use oodd_core::id_dict::{self, IdDictionary, OutlierSet, OutlierStrategy};
use oodd_core::kernels::PackedKeys;
use oodd_core::ood_dict::{new_dictionary, Init, OodDictionary};
use oodd_core::scorer::{self, TopKParams};
use oodd_core::stream::{self, DriftScenario, InitStrategy, LabeledStream, RunTrace, StreamSource, TraceRow};
use oodd_core::synth::{self, SyntheticConfig};
use serde_json::json;

use crate::config::{self, Resolved, RunArgs};
use crate::error::{CliError, Context};
use crate::output::OutDir;
use crate::report;

fn load_keys(path: &Path, op: &'static str) -> Result<FeatureBatch, CliError> {
    features::load_normalized(path).map_err(|e| CliError::new(op, format!("{}: {e}", path.display())))
}

fn load_store(crops: &Path, confs: &Path, labels: &Path, op: &'static str) -> Result<CropStore, CliError> {
    CropStore::load(crops, confs, labels).op(op)
}

fn write_features(out: &OutDir, name: &Path, batch: &FeatureBatch, op: &'static str) -> Result<PathBuf, CliError> {
    let path = out.path(name)?;
    features::write_feature_file(batch, &path).op(op)?;
    Ok(path)
}

#[derive(Debug, Args)]
pub struct BuildIdDictArgs {
    /// Crop feature file (n * M rows, sample-major).
    #[arg(long)]
    pub crops: PathBuf,
    /// Crop confidence file.
    #[arg(long)]
    pub confs: PathBuf,
    /// Per-sample class label file.
    #[arg(long)]
    pub labels: PathBuf,
    /// Percent of each class kept.
    #[arg(long, default_value_t = 50.0)]
    pub alpha: f64,
    /// Output key file under --out-dir.
    #[arg(long, default_value = "id_dict.oodf")]
    pub out: PathBuf,
}

pub fn build_id_dict(a: &BuildIdDictArgs, out: &OutDir) -> Result<(), CliError> {
    const OP: &str = "build-id-dict";
    let store = load_store(&a.crops, &a.confs, &a.labels, OP)?;
    let records: Vec<_> = store.records().collect();
    let best = id_dict::select_best_crops(&records).op(OP)?;
    let dict = id_dict::select_top_alpha_per_class(&best, a.alpha).op(OP)?;
    let path = write_features(out, &a.out, dict.keys(), OP)?;
    println!("kept {} of {} samples (alpha {}%), dim {}", dict.len(), store.samples(), a.alpha, dict.dim());
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenOutliersArgs {
    /// c-out (low-confidence crops), t-out or d-out (rows of --source).
    #[arg(long, default_value = "c-out")]
    pub strategy: OutlierStrategy,
    /// Percent of each class kept as cropping outliers.
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    #[arg(long)]
    pub crops: Option<PathBuf>,
    #[arg(long)]
    pub confs: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Feature file of outlier samples for t-out and d-out.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Keep only the first COUNT outliers.
    #[arg(long)]
    pub count: Option<usize>,
    /// Output key file under --out-dir.
    #[arg(long, default_value = "outliers.oodf")]
    pub out: PathBuf,
}

pub fn gen_outliers(a: &GenOutliersArgs, out: &OutDir) -> Result<(), CliError> {
    const OP: &str = "gen-outliers";
    let set = match a.strategy {
        OutlierStrategy::COut => {
            let (Some(crops), Some(confs), Some(labels)) = (&a.crops, &a.confs, &a.labels) else {
                return Err(CliError::new(OP, "c-out needs --crops, --confs and --labels"));
            };
            let store = load_store(crops, confs, labels, OP)?;
            let records: Vec<_> = store.records().collect();
            id_dict::gen_crop_outliers(&records, a.beta).op(OP)?
        }
        s => {
            let source = a.source.as_ref().ok_or_else(|| CliError::new(OP, format!("{s} needs --source")))?;
            OutlierSet::new(load_keys(source, OP)?, s).op(OP)?
        }
    };
    let keys = match a.count {
        Some(n) if n < set.len() => set.keys().select(&(0..n).collect::<Vec<_>>()),
        _ => set.keys().clone(),
    };
    let path = write_features(out, &a.out, &keys, OP)?;
    println!("{} outliers ({}), dim {}", keys.len(), set.strategy(), keys.dim());
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Query feature file.
    #[arg(long)]
    pub queries: PathBuf,
    /// ID dictionary key file.
    #[arg(long)]
    pub id_dict: PathBuf,
    /// OOD dictionary key file (queue or bank); repeatable.
    #[arg(long = "ood-keys")]
    pub ood_keys: Vec<PathBuf>,
    /// Neighbor rank against the ID dictionary.
    #[arg(long, default_value_t = 5)]
    pub k_id: usize,
    /// Neighbor rank against the OOD keys.
    #[arg(long, default_value_t = 5)]
    pub k_ood: usize,
    /// One-column CSV of external base scores, replacing s_in in the sum.
    #[arg(long)]
    pub external: Option<PathBuf>,
    /// Output CSV under --out-dir.
    #[arg(long, default_value = "scores.csv")]
    pub out: PathBuf,
}

fn read_score_column(path: &Path) -> Result<Vec<f64>, CliError> {
    const OP: &str = "score";
    let text = fs::read_to_string(path).map_err(|e| CliError::new(OP, format!("{}: {e}", path.display())))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            Err(_) if i == 0 => continue,
            _ => return Err(CliError::new(OP, format!("{}:{}: bad score `{line}`", path.display(), i + 1))),
        }
    }
    Ok(values)
}

pub fn score(a: &ScoreArgs, out: &OutDir) -> Result<(), CliError> {
    const OP: &str = "score";
    let queries = load_keys(&a.queries, OP)?;
    let id = IdDictionary::from_keys(load_keys(&a.id_dict, OP)?).op(OP)?;
    let mut ood = FeatureBatch::empty(id.dim());
    for p in &a.ood_keys {
        ood = ood.concat(&load_keys(p, OP)?).op(OP)?;
    }
    let params = TopKParams::new(a.k_id, a.k_ood).op(OP)?;
    let mut scores = scorer::score_batch(&queries, id.packed(), &PackedKeys::new(&ood), params).op(OP)?;
    if let Some(ext) = &a.external {
        let base = read_score_column(ext)?;
        scores.s = scorer::calibrate_external_column(&base, &scores.s_out).op(OP)?;
    }
    let mut body = String::from("stream_position,s_in,s_out,s\n");
    for i in 0..scores.len() {
        body.push_str(&format!("{i},{:?},{:?},{:?}\n", scores.s_in[i], scores.s_out[i], scores.s[i]));
    }
    let path = out.write(&a.out, body.as_bytes())?;
    println!("scored {} queries against {} ID and {} OOD keys", queries.len(), id.len(), ood.len());
    println!("wrote {}", path.display());
    Ok(())
}

struct Prepared {
    resolved: Resolved,
    id: IdDictionary,
    ood: OodDictionary,
    stream: LabeledStream,
}

fn prepare(args: &RunArgs, op: &'static str) -> Result<Prepared, CliError> {
    let resolved = config::resolve(args)?;
    let r = &resolved;
    let store = match (&r.crops, &r.confs, &r.labels) {
        (Some(c), Some(f), Some(l)) => Some(load_store(c, f, l, op)?),
        (None, None, None) => None,
        _ => return Err(CliError::new(op, "crops, confs and labels must be given together")),
    };
    let records: Vec<_> = store.iter().flat_map(|s| s.records()).collect();
    let id = match (&r.id_dict, &store) {
        (Some(p), _) => IdDictionary::from_keys(load_keys(p, op)?).op(op)?,
        (None, Some(_)) => {
            let best = id_dict::select_best_crops(&records).op(op)?;
            id_dict::select_top_alpha_per_class(&best, r.config.alpha).op(op)?
        }
        (None, None) => return Err(CliError::new(op, "no ID dictionary (give id_dict or crops, confs and labels)")),
    };
    let outliers = match r.config.init_strategy {
        InitStrategy::None => None,
        InitStrategy::Outliers(s) => Some(match (&r.outliers, s) {
            (Some(p), _) => OutlierSet::new(load_keys(p, op)?, s).op(op)?,
            (None, OutlierStrategy::COut) if store.is_some() => id_dict::gen_crop_outliers(&records, r.config.beta).op(op)?,
            (None, s) => return Err(CliError::new(op, format!("init {s} needs outliers (or crops for c-out)"))),
        }),
    };
    let init = match &outliers {
        None => Init::None,
        Some(set) => Init::Outliers {
            set,
            id_dict: &id,
            k_id: r.config.k_id,
            mb_size: r.config.mb_size,
            queue_seed_size: r.config.queue_seed_size,
        },
    };
    let ood = new_dictionary(r.config.queue_capacity, id.dim(), init).op(op)?;

    let id_source = StreamSource { name: r.id_name.clone(), features: load_keys(&r.id_source, op)? };
    let mut segments = Vec::new();
    for s in &r.segments {
        let features = load_keys(&s.path, op)?;
        let count = s.count.unwrap_or(features.len());
        segments.push((StreamSource { name: s.name.clone(), features }, count));
    }
    let id_count = r.id_count.unwrap_or(id_source.features.len());
    let scenario = DriftScenario { id_source, segments };
    let stream = stream::build_stream(&scenario, id_count, r.config.seed, r.mode).op(op)?;
    Ok(Prepared { resolved, id, ood, stream })
}

fn run_prepared(p: &mut Prepared, op: &'static str) -> Result<RunTrace, CliError> {
    stream::run_stream(&p.resolved.config, &p.id, &mut p.ood, &p.stream.features).op(op)
}

fn trace_rows(trace: &RunTrace, s: &LabeledStream) -> Vec<TraceRow> {
    trace
        .samples
        .iter()
        .enumerate()
        .map(|(i, x)| TraceRow {
            position: x.stream_position,
            is_ood: s.labels.is_ood[i],
            source: s.labels.source_name(i).to_string(),
            s_in: x.s_in,
            s_out: x.s_out,
            s: x.s,
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn run(args: &RunArgs, out: &OutDir) -> Result<(), CliError> {
    const OP: &str = "run";
    let mut p = prepare(args, OP)?;
    let trace = run_prepared(&mut p, OP)?;

    let mut w = out.create(&args.trace)?;
    stream::write_trace_csv(&mut w, &trace, &p.stream.labels).op(OP)?;

    let metrics = stream::batch_metrics(&trace, &p.stream.labels).op(OP)?;
    let mut batches = String::from("batch_index,start,len,entered,queue_len,front_score,cumulative_auroc,batch_auroc\n");
    for (b, m) in trace.batches.iter().zip(&metrics) {
        batches.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            b.batch_index,
            b.start,
            b.len,
            b.entered,
            b.queue_len,
            opt(b.front_score),
            opt(m.cumulative_auroc),
            opt(m.batch_auroc)
        ));
    }
    out.write(&args.batches, batches.as_bytes())?;

    let groups: Vec<(String, Option<String>)> =
        p.resolved.segments.iter().map(|s| (s.name.clone(), s.group.clone())).collect();
    let rows = trace_rows(&trace, &p.stream);
    let report = report::build(&rows, |name| groups.iter().find(|g| g.0 == name).and_then(|g| g.1.clone())).op(OP)?;
    let c = &p.resolved.config;
    let summary = json!({
        "config": {
            "seed": c.seed,
            "batch_size": c.batch_size,
            "mode": p.resolved.mode.to_string(),
            "alpha": c.alpha,
            "k_id": c.k_id,
            "k_ood": c.k_ood,
            "queue_capacity": c.queue_capacity,
            "mb_size": c.mb_size,
            "queue_seed_size": c.queue_seed_size,
            "beta": c.beta,
            "init": c.init_strategy.to_string(),
        },
        "stream": { "length": trace.len(), "batches": trace.batches.len() },
        "dictionary": {
            "id_keys": p.id.len(),
            "queue_len": p.ood.queue_len(),
            "bank_len": p.ood.bank_len(),
            "front_score": p.ood.front_score(),
        },
        "report": report,
    });
    let mut text = serde_json::to_string_pretty(&summary).op(OP)?;
    text.push('\n');
    out.write(&args.summary, text.as_bytes())?;

    print!("{}", report::render(&report));
    for name in [&args.trace, &args.batches, &args.summary] {
        println!("wrote {}", out.path(name)?.display());
    }
    Ok(())
}

pub fn dump_dict(args: &RunArgs, out: &OutDir) -> Result<(), CliError> {
    const OP: &str = "dump-dict";
    let mut p = prepare(args, OP)?;
    run_prepared(&mut p, OP)?;
    let d = &p.ood;
    let mut queue = FeatureBatch::empty(d.dim());
    let mut scores = String::from("heap_index,seq,score\n");
    for (i, e) in d.queue().enumerate() {
        queue.push_row(e.key).op(OP)?;
        scores.push_str(&format!("{i},{},{:?}\n", e.seq, e.score));
    }
    let paths = [
        write_features(out, Path::new("queue.oodf"), &queue, OP)?,
        write_features(out, Path::new("bank.oodf"), d.bank(), OP)?,
        out.write(Path::new("queue_scores.csv"), scores.as_bytes())?,
    ];
    println!("queue {} of {}, bank {}, front {}", d.queue_len(), d.capacity(), d.bank_len(), opt(d.front_score()));
    for path in paths {
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// `NAME=SOURCE[,SOURCE...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub name: String,
    pub members: Vec<String>,
}

impl FromStr for GroupSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, members) = s.split_once('=').ok_or_else(|| format!("group `{s}` must look like NAME=SOURCE[,SOURCE...]"))?;
        let members: Vec<String> = members.split(',').filter(|m| !m.is_empty()).map(str::to_string).collect();
        if name.is_empty() || members.is_empty() {
            return Err(format!("group `{s}` needs a name and at least one source"));
        }
        Ok(GroupSpec { name: name.to_string(), members })
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trace CSV written by `run`.
    #[arg(long)]
    pub trace: PathBuf,
    /// Source group NAME=SOURCE[,SOURCE...] (e.g. far=mnist,svhn); repeatable.
    #[arg(long = "group")]
    pub groups: Vec<GroupSpec>,
    /// Also write the metrics as JSON under --out-dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(a: &EvalArgs, out: &OutDir) -> Result<(), CliError> {
    const OP: &str = "eval";
    let file = fs::File::open(&a.trace).map_err(|e| CliError::new(OP, format!("{}: {e}", a.trace.display())))?;
    let rows = stream::read_trace_csv(BufReader::new(file)).op(OP)?;
    let group_of = |name: &str| a.groups.iter().find(|g| g.members.iter().any(|m| m == name)).map(|g| g.name.clone());
    let report = report::build(&rows, group_of).op(OP)?;
    print!("{}", report::render(&report));
    if let Some(name) = &a.out {
        let mut text = serde_json::to_string_pretty(&report).op(OP)?;
        text.push('\n');
        println!("wrote {}", out.write(name, text.as_bytes())?.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 50_000)]
    pub n_keys: usize,
    #[arg(long, default_value_t = 512)]
    pub d: usize,
    #[arg(long, default_value_t = 1_000)]
    pub n_queries: usize,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    /// Timed repeats per path (median reported).
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the CSV row under --out-dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn bench(a: &BenchArgs, out: &OutDir) -> Result<(), CliError> {
    const OP: &str = "bench";
    let r = bench::run_bench(a.n_keys, a.d, a.n_queries, a.k, a.repeats, a.seed).op(OP)?;
    let csv = format!("{}\n{}\n", BenchReport::CSV_HEADER, r.csv_row());
    print!("{csv}");
    println!(
        "cosine {:.3}s, euclidean {:.3}s, speedup {:.2}x ({} threads, {}); rank disagreements {}, max value error {:.2e}",
        r.cosine_time, r.euclid_time, r.speedup, r.threads, r.isa, r.max_rank_disagreement, r.max_value_error
    );
    if let Some(name) = &a.out {
        println!("wrote {}", out.write(name, csv.as_bytes())?.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 5)]
    pub clusters: usize,
    #[arg(long, default_value_t = 5000)]
    pub id_train: usize,
    #[arg(long, default_value_t = 5000)]
    pub id_test: usize,
    #[arg(long, default_value_t = 500)]
    pub ood_test: usize,
    #[arg(long, default_value_t = 2.75)]
    pub id_spread: f64,
    #[arg(long, default_value_t = 2.0)]
    pub ood_spread: f64,
    /// Crops per training sample.
    #[arg(long, default_value_t = 4)]
    pub crops: usize,
    #[arg(long, default_value_t = 0.5)]
    pub crop_spread: f64,
}

const SYNTH_CONFIG: &str = r#"[run]
seed = 0
batch_size = 128

[dictionary]
alpha = 50.0
k_id = 10
k_ood = 5
queue_capacity = 128
mb_size = 5
init = "c-out"
crops = "train_crops.oodf"
confs = "train_confs.oodc"
labels = "train_labels.oodl"

[stream]
id = { name = "synthetic-id", path = "id_test.oodf" }

[[stream.segments]]
name = "synthetic-ood"
path = "ood_test.oodf"
group = "far"
"#;

pub fn synth(a: &SynthArgs, out: &OutDir) -> Result<(), CliError> {
    const OP: &str = "synth";
    if a.dim <= a.clusters {
        return Err(CliError::new(OP, "dim must exceed the number of clusters"));
    }
    let cfg = SyntheticConfig {
        dim: a.dim,
        id_clusters: a.clusters,
        id_train: a.id_train,
        id_test: a.id_test,
        ood_test: a.ood_test,
        id_spread: a.id_spread,
        ood_spread: a.ood_spread,
        crops: a.crops,
        crop_spread: a.crop_spread,
        seed: a.seed,
    };
    let data = synth::generate(&cfg);
    let (crops, confs) =
        synth::crop_views(&data.train, &data.train_labels, &data.id_centers, a.crops, a.crop_spread, a.seed.wrapping_add(1));
    let mut written = vec![
        write_features(out, Path::new("train_crops.oodf"), &crops, OP)?,
        write_features(out, Path::new("id_test.oodf"), &data.id_test, OP)?,
        write_features(out, Path::new("ood_test.oodf"), &data.ood_test, OP)?,
    ];
    let path = out.path(Path::new("train_confs.oodc"))?;
    features::write_confidence_file(&confs, &path).op(OP)?;
    written.push(path);
    let path = out.path(Path::new("train_labels.oodl"))?;
    features::write_label_file(&data.train_labels, &path).op(OP)?;
    written.push(path);
    written.push(out.write(Path::new("run.toml"), SYNTH_CONFIG.as_bytes())?);
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
