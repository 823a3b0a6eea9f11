//! Run configuration: defaults from a scale preset, then the TOML file,
//! then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use oodd_core::stream::{InitStrategy, RunConfig, Scale, StreamMode};
use serde::Deserialize;

use crate::error::CliError;

/// An OOD segment given on the command line as `NAME[:COUNT[:GROUP]]=PATH`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSpec {
    pub name: String,
    pub path: PathBuf,
    /// Rows drawn from the source; all rows when absent.
    pub count: Option<usize>,
    pub group: Option<String>,
}

impl FromStr for SegmentSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (head, path) = s.split_once('=').ok_or_else(|| format!("segment `{s}` must look like NAME[:COUNT[:GROUP]]=PATH"))?;
        let mut parts = head.split(':');
        let name = parts.next().unwrap_or_default().to_string();
        if name.is_empty() || path.is_empty() {
            return Err(format!("segment `{s}` needs a name and a path"));
        }
        let count = match parts.next() {
            Some("") | None => None,
            Some(c) => Some(c.parse().map_err(|_| format!("bad segment count `{c}`"))?),
        };
        let group = parts.next().filter(|g| !g.is_empty()).map(str::to_string);
        if parts.next().is_some() {
            return Err(format!("segment `{s}` has too many `:` fields"));
        }
        Ok(SegmentSpec { name, path: PathBuf::from(path), count, group })
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML file with [run], [dictionary] and [stream] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Preset for k-id, queue capacity and memory bank size: cifar10 (5, 128, 5), cifar100 (10, 512, 5), imagenet (100, 2048, 128) [default: cifar10]
    #[arg(long)]
    pub scale: Option<Scale>,
    /// Seed for stream assembly [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Test batch size [default: 512]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// shuffled or segmented [default: shuffled]
    #[arg(long)]
    pub mode: Option<StreamMode>,
    /// ID rows in the stream [default: every row of the ID source]
    #[arg(long)]
    pub id_count: Option<usize>,

    /// Percent of each class kept in the ID dictionary [default: 50]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Neighbor rank against the ID dictionary [default: from --scale]
    #[arg(long)]
    pub k_id: Option<usize>,
    /// Neighbor rank against the OOD dictionary [default: 5]
    #[arg(long)]
    pub k_ood: Option<usize>,
    /// OOD queue capacity [default: from --scale]
    #[arg(long)]
    pub queue_capacity: Option<usize>,
    /// Outliers placed in the memory bank [default: from --scale]
    #[arg(long)]
    pub mb_size: Option<usize>,
    /// Outliers offered to the queue at start [default: 0]
    #[arg(long)]
    pub queue_seed_size: Option<usize>,
    /// Percent of each class kept as cropping outliers [default: 10]
    #[arg(long)]
    pub beta: Option<f64>,
    /// none, c-out, t-out or d-out [default: c-out]
    #[arg(long)]
    pub init: Option<InitStrategy>,

    /// Prebuilt ID dictionary keys (skips building from crops).
    #[arg(long)]
    pub id_dict: Option<PathBuf>,
    /// Crop feature file of the training set.
    #[arg(long)]
    pub crops: Option<PathBuf>,
    /// Crop confidence file.
    #[arg(long)]
    pub confs: Option<PathBuf>,
    /// Training label file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Prebuilt outlier keys for initialization.
    #[arg(long)]
    pub outliers: Option<PathBuf>,

    /// ID test feature file.
    #[arg(long)]
    pub id_source: Option<PathBuf>,
    /// Name of the ID source in the trace [default: id]
    #[arg(long)]
    pub id_name: Option<String>,
    /// OOD segment NAME[:COUNT[:GROUP]]=PATH; repeatable, replaces the file's segments.
    #[arg(long = "segment")]
    pub segments: Vec<SegmentSpec>,

    /// Trace CSV name under --out-dir.
    #[arg(long, default_value = "trace.csv")]
    pub trace: PathBuf,
    /// JSON summary name under --out-dir.
    #[arg(long, default_value = "summary.json")]
    pub summary: PathBuf,
    /// Per-batch metrics CSV name under --out-dir.
    #[arg(long, default_value = "batches.csv")]
    pub batches: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    run: RunSection,
    dictionary: DictionarySection,
    stream: StreamSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunSection {
    seed: Option<u64>,
    batch_size: Option<usize>,
    mode: Option<String>,
    id_count: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DictionarySection {
    scale: Option<String>,
    alpha: Option<f64>,
    k_id: Option<usize>,
    k_ood: Option<usize>,
    queue_capacity: Option<usize>,
    mb_size: Option<usize>,
    queue_seed_size: Option<usize>,
    beta: Option<f64>,
    init: Option<String>,
    id_dict: Option<PathBuf>,
    crops: Option<PathBuf>,
    confs: Option<PathBuf>,
    labels: Option<PathBuf>,
    outliers: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct StreamSection {
    id: Option<IdEntry>,
    segments: Vec<SegmentEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdEntry {
    name: Option<String>,
    path: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentEntry {
    name: String,
    path: PathBuf,
    count: Option<usize>,
    group: Option<String>,
}

/// Everything a run needs, with paths resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub mode: StreamMode,
    pub id_count: Option<usize>,
    pub id_dict: Option<PathBuf>,
    pub crops: Option<PathBuf>,
    pub confs: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub outliers: Option<PathBuf>,
    pub id_name: String,
    pub id_source: PathBuf,
    pub segments: Vec<SegmentSpec>,
}

fn parse<T: FromStr<Err = String>>(value: Option<String>) -> Result<Option<T>, CliError> {
    value.map(|v| v.parse().map_err(|e| CliError::new("config", e))).transpose()
}

fn rebase(base: &Path, p: Option<PathBuf>) -> Option<PathBuf> {
    p.map(|p| if p.is_absolute() { p } else { base.join(p) })
}

pub fn resolve(args: &RunArgs) -> Result<Resolved, CliError> {
    let (file, base) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?;
            let file: FileConfig = toml::from_str(&text).map_err(|e| CliError::new("config", format!("{}: {}", path.display(), e.message())))?;
            (file, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (FileConfig::default(), PathBuf::new()),
    };
    let d = file.dictionary;
    let scale = match args.scale {
        Some(s) => s,
        None => parse(d.scale)?.unwrap_or(Scale::Cifar10),
    };
    let mut config = RunConfig::for_scale(scale);
    macro_rules! layer {
        ($field:ident, $file:expr) => {
            if let Some(v) = args.$field.or($file) {
                config.$field = v;
            }
        };
    }
    layer!(seed, file.run.seed);
    layer!(batch_size, file.run.batch_size);
    layer!(alpha, d.alpha);
    layer!(k_id, d.k_id);
    layer!(k_ood, d.k_ood);
    layer!(queue_capacity, d.queue_capacity);
    layer!(mb_size, d.mb_size);
    layer!(queue_seed_size, d.queue_seed_size);
    layer!(beta, d.beta);
    if let Some(init) = args.init.or(parse(d.init)?) {
        config.init_strategy = init;
    }
    let mode = args.mode.or(parse(file.run.mode)?).unwrap_or(StreamMode::Shuffled);

    let pick = |flag: &Option<PathBuf>, from_file: Option<PathBuf>| flag.clone().or(rebase(&base, from_file));
    let file_id = file.stream.id;
    let id_source = args
        .id_source
        .clone()
        .or_else(|| file_id.as_ref().map(|e| if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) }))
        .ok_or_else(|| CliError::new("config", "no ID source (set [stream] id or --id-source)"))?;
    let id_name = args
        .id_name
        .clone()
        .or_else(|| file_id.and_then(|e| e.name))
        .unwrap_or_else(|| "id".to_string());
    let segments = if args.segments.is_empty() {
        file.stream
            .segments
            .into_iter()
            .map(|s| SegmentSpec {
                path: rebase(&base, Some(s.path)).expect("path is present"),
                name: s.name,
                count: s.count,
                group: s.group,
            })
            .collect()
    } else {
        args.segments.clone()
    };
    Ok(Resolved {
        config,
        mode,
        id_count: args.id_count.or(file.run.id_count),
        id_dict: pick(&args.id_dict, d.id_dict),
        crops: pick(&args.crops, d.crops),
        confs: pick(&args.confs, d.confs),
        labels: pick(&args.labels, d.labels),
        outliers: pick(&args.outliers, d.outliers),
        id_name,
        id_source,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Wrapper {
        #[command(flatten)]
        run: RunArgs,
    }

    fn args(extra: &[&str]) -> RunArgs {
        Wrapper::parse_from(std::iter::once("t").chain(extra.iter().copied())).run
    }

    #[test]
    fn segment_specs() {
        assert_eq!(
            "textures:100:far=/data/t.oodf".parse::<SegmentSpec>(),
            Ok(SegmentSpec { name: "textures".into(), path: "/data/t.oodf".into(), count: Some(100), group: Some("far".into()) })
        );
        assert_eq!("svhn=s.oodf".parse::<SegmentSpec>().unwrap().count, None);
        assert!("svhn".parse::<SegmentSpec>().is_err());
        assert!("svhn:x=s.oodf".parse::<SegmentSpec>().is_err());
    }

    #[test]
    fn flags_override_file_over_presets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(
            &path,
            "[run]\nseed = 3\nbatch_size = 64\n[dictionary]\nscale = \"cifar100\"\nk_id = 7\ninit = \"none\"\n[stream]\nid = { path = \"id.oodf\" }\n[[stream.segments]]\nname = \"a\"\npath = \"a.oodf\"\ncount = 5\n",
        )
        .unwrap();
        let r = resolve(&args(&["--config", path.to_str().unwrap(), "--seed", "9"])).unwrap();
        assert_eq!(r.config.seed, 9);
        assert_eq!(r.config.batch_size, 64);
        assert_eq!(r.config.k_id, 7);
        assert_eq!(r.config.queue_capacity, 512);
        assert_eq!(r.config.init_strategy, InitStrategy::None);
        assert_eq!(r.id_source, dir.path().join("id.oodf"));
        assert_eq!(r.segments[0].path, dir.path().join("a.oodf"));
        assert_eq!(r.segments[0].count, Some(5));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[run]\nseeds = 3\n").unwrap();
        let err = resolve(&args(&["--config", path.to_str().unwrap()])).unwrap_err();
        assert_eq!(err.op, "config");
        assert!(err.message.contains("seeds"), "{}", err.message);
    }

    #[test]
    fn missing_id_source_is_reported() {
        assert_eq!(resolve(&args(&[])).unwrap_err().op, "config");
    }
}
