use oodd_core::eval;
use oodd_core::features::FeatureBatch;
use oodd_core::id_dict::IdDictionary;
use oodd_core::ood_dict::{new_dictionary, Init};
use oodd_core::scorer;
use oodd_core::stream::*;
use oodd_core::synth::{random_unit_batch, sample_cluster};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn source(name: &str, features: FeatureBatch) -> StreamSource {
    StreamSource { name: name.to_string(), features }
}

fn scenario(seed: u64, d: usize, id: usize, segments: &[(&str, usize)]) -> DriftScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DriftScenario {
        id_source: source("id", random_unit_batch(&mut rng, id, d)),
        segments: segments.iter().map(|&(n, c)| (source(n, random_unit_batch(&mut rng, c, d)), c)).collect(),
    }
}

fn config(batch_size: usize) -> RunConfig {
    RunConfig { batch_size, k_id: 3, k_ood: 2, queue_capacity: 16, init_strategy: InitStrategy::None, ..RunConfig::default() }
}

fn run_once(seed: u64) -> (RunTrace, LabeledStream, Vec<u8>) {
    let sc = scenario(1, 8, 300, &[("a", 40), ("b", 40)]);
    let stream = build_stream(&sc, 200, seed, StreamMode::Shuffled).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let id = IdDictionary::from_keys(random_unit_batch(&mut rng, 50, 8)).unwrap();
    let cfg = config(32);
    let mut ood = new_dictionary(cfg.queue_capacity, 8, Init::None).unwrap();
    let trace = run_stream(&cfg, &id, &mut ood, &stream.features).unwrap();
    let mut csv = Vec::new();
    write_trace_csv(&mut csv, &trace, &stream.labels).unwrap();
    (trace, stream, csv)
}

#[test]
fn runs_are_deterministic() {
    let (t1, s1, c1) = run_once(5);
    let (t2, s2, c2) = run_once(5);
    assert_eq!(t1, t2);
    assert_eq!(s1, s2);
    assert_eq!(c1, c2);
    let (_, _, c3) = run_once(6);
    assert_ne!(c1, c3);
}

#[test]
fn scores_precede_updates_within_a_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let id = IdDictionary::from_keys(random_unit_batch(&mut rng, 20, 6)).unwrap();
    let marker = random_unit_batch(&mut rng, 1, 6);
    let filler = random_unit_batch(&mut rng, 6, 6);
    let rows = [marker.row(0), filler.row(0), filler.row(1), marker.row(0), filler.row(2), marker.row(0), filler.row(3), filler.row(4)];
    let stream = FeatureBatch::from_rows(&rows, 6).unwrap();
    let cfg = RunConfig { batch_size: 4, k_id: 1, k_ood: 1, queue_capacity: 64, init_strategy: InitStrategy::None, ..RunConfig::default() };
    let mut ood = new_dictionary(64, 6, Init::None).unwrap();
    let trace = run_stream(&cfg, &id, &mut ood, &stream).unwrap();
    assert_eq!(trace.samples[0].s_out, 0.0);
    assert_eq!(trace.samples[3].s_out, 0.0);
    assert!((trace.samples[5].s_out + 1.0).abs() < 1e-6, "{}", trace.samples[5].s_out);
    assert_eq!(trace.batches[0].queue_len, 4);
}

#[test]
fn first_batch_is_uncalibrated_without_init() {
    let (trace, _, _) = run_once(9);
    for x in trace.samples.iter().filter(|x| x.batch_index == 0) {
        assert_eq!(x.s.to_bits(), x.s_in.to_bits());
        assert_eq!(x.s_out, 0.0);
    }
    assert!(trace.samples.iter().any(|x| x.batch_index == 1 && x.s_out != 0.0));
}

#[test]
fn trace_scores_match_direct_scoring() {
    let (trace, stream, _) = run_once(4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let id = IdDictionary::from_keys(random_unit_batch(&mut rng, 50, 8)).unwrap();
    let mut ood = new_dictionary(16, 8, Init::None).unwrap();
    for (b, chunk) in (0..stream.features.len()).collect::<Vec<_>>().chunks(32).enumerate() {
        let batch = stream.features.select(chunk);
        let total = ood.keys_total();
        let mut latent = Vec::new();
        for (i, q) in chunk.iter().zip(batch.rows()) {
            let s_in = scorer::s_in(q, &id, 3).unwrap();
            let s_out = scorer::s_out(q, &total, 2).unwrap();
            let x = trace.samples[*i];
            assert_eq!((x.batch_index, x.stream_position), (b, *i));
            assert_eq!(x.s_in.to_bits(), s_in.to_bits());
            assert_eq!(x.s_out.to_bits(), s_out.to_bits());
            latent.push(s_in);
        }
        ood.consider_batch(&batch, &latent).unwrap();
    }
}

#[test]
fn tail_batch_is_processed() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let id = IdDictionary::from_keys(random_unit_batch(&mut rng, 10, 4)).unwrap();
    let stream = random_unit_batch(&mut rng, 10, 4);
    let mut ood = new_dictionary(4, 4, Init::None).unwrap();
    let trace = run_stream(&config(4), &id, &mut ood, &stream).unwrap();
    let lens: Vec<usize> = trace.batches.iter().map(|b| b.len).collect();
    assert_eq!(lens, vec![4, 4, 2]);
    assert!(trace.samples.windows(2).all(|w| w[0].stream_position < w[1].stream_position));
}

#[test]
fn segmented_sources_keep_their_order() {
    let sc = scenario(6, 4, 100, &[("textures", 30), ("places", 30), ("svhn", 30)]);
    let s = build_stream(&sc, 100, 1, StreamMode::Segmented).unwrap();
    let last = |src: usize| s.labels.source.iter().rposition(|&x| x == src).unwrap();
    let first = |src: usize| s.labels.source.iter().position(|&x| x == src).unwrap();
    assert!(last(1) < first(2) && last(2) < first(3));
    assert_eq!(s.labels.source_name(first(3)), "svhn");
}

#[test]
fn batch_metrics_track_the_cumulative_auroc() {
    let (trace, stream, _) = run_once(7);
    let m = batch_metrics(&trace, &stream.labels).unwrap();
    assert_eq!(m.len(), trace.batches.len());
    let s = trace.column(|x| x.s);
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for (v, &o) in s.iter().zip(&stream.labels.is_ood) {
        if o { ood.push(*v) } else { id.push(*v) }
    }
    assert_eq!(m.last().unwrap().cumulative_auroc, Some(eval::auroc(&id, &ood).unwrap()));
}

#[test]
fn trace_csv_round_trips() {
    let (trace, stream, csv) = run_once(8);
    let rows = read_trace_csv(csv.as_slice()).unwrap();
    assert_eq!(rows.len(), trace.len());
    for (r, x) in rows.iter().zip(&trace.samples) {
        assert_eq!((r.position, r.s_in, r.s_out, r.s), (x.stream_position, x.s_in, x.s_out, x.s));
        assert_eq!(r.is_ood, stream.labels.is_ood[r.position]);
        assert_eq!(r.source, stream.labels.source_name(r.position));
    }
    assert!(read_trace_csv("position,wrong\n".as_bytes()).is_err());
    assert!(matches!(
        read_trace_csv(format!("{TRACE_HEADER}\n0,2,id,0.1,0.0,0.1\n").as_bytes()),
        Err(StreamError::MalformedTrace { line: 2, .. })
    ));
}

fn brute_force_k(val_id: &FeatureBatch, val_ood: &FeatureBatch, keys: &FeatureBatch, grid: &[usize]) -> usize {
    let score = |q: &[f32], k: usize| {
        let mut c: Vec<f64> = keys.rows().map(|r| q.iter().zip(r).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()).collect();
        c.sort_by(|a, b| b.total_cmp(a));
        c[k.min(c.len()) - 1].clamp(-1.0, 1.0)
    };
    let mut best = (0, f64::NEG_INFINITY);
    let mut sorted = grid.to_vec();
    sorted.sort_unstable();
    for k in sorted {
        let id: Vec<f64> = val_id.rows().map(|q| score(q, k)).collect();
        let ood: Vec<f64> = val_ood.rows().map(|q| score(q, k)).collect();
        let a = eval::auroc(&id, &ood).unwrap();
        if a > best.1 {
            best = (k, a);
        }
    }
    best.0
}

#[test]
fn k_selection_matches_brute_force_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let centers = random_unit_batch(&mut rng, 3, 16);
    let mut keys = FeatureBatch::empty(16);
    for c in centers.rows() {
        keys = keys.concat(&sample_cluster(&mut rng, c, 30, 1.0)).unwrap();
    }
    // Duplicated keys make neighboring ranks tie exactly.
    let keys = keys.concat(&keys.select(&[0, 0, 1, 2, 3])).unwrap();
    let dict = IdDictionary::from_keys(keys.clone()).unwrap();
    let val_id = sample_cluster(&mut rng, centers.row(0), 40, 1.0);
    let val_ood = random_unit_batch(&mut rng, 40, 16);
    for grid in [&DEFAULT_K_GRID[..], &[1, 2, 3], &[3, 2, 1, 2], &[200, 5000]] {
        assert_eq!(select_k_id(&val_id, &val_ood, &dict, grid).unwrap(), brute_force_k(&val_id, &val_ood, &keys, grid));
    }
    assert_eq!(select_k_id(&val_id, &val_ood, &dict, &[]), Err(StreamError::EmptyGrid));
}

#[test]
fn oversized_requests_fail() {
    let sc = scenario(11, 4, 10, &[("ood", 5)]);
    let err = build_stream(&DriftScenario { segments: vec![(sc.segments[0].0.clone(), 6)], ..sc.clone() }, 5, 0, StreamMode::Shuffled);
    assert_eq!(err.unwrap_err(), StreamError::SourceTooSmall { source_name: "ood".into(), requested: 6, available: 5 });
    assert!(matches!(build_stream(&sc, 11, 0, StreamMode::Segmented), Err(StreamError::SourceTooSmall { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stream_length_is_conserved(
        seed in any::<u64>(),
        id_count in 0usize..50,
        counts in prop::collection::vec(0usize..20, 0..4),
        segmented in any::<bool>(),
        batch_size in 1usize..40,
    ) {
        prop_assume!(id_count + counts.iter().sum::<usize>() > 0);
        let names: Vec<String> = (0..counts.len()).map(|i| format!("s{i}")).collect();
        let segs: Vec<(&str, usize)> = names.iter().map(String::as_str).zip(counts.iter().copied()).collect();
        let sc = scenario(seed, 4, 50, &segs);
        let mode = if segmented { StreamMode::Segmented } else { StreamMode::Shuffled };
        let s = build_stream(&sc, id_count, seed, mode).unwrap();
        let total = id_count + counts.iter().sum::<usize>();
        prop_assert_eq!(s.features.len(), total);
        prop_assert_eq!(s.labels.len(), total);
        prop_assert_eq!(s.labels.is_ood.iter().filter(|&&o| !o).count(), id_count);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = IdDictionary::from_keys(random_unit_batch(&mut rng, 5, 4)).unwrap();
        let mut ood = new_dictionary(8, 4, Init::None).unwrap();
        let trace = run_stream(&config(batch_size), &id, &mut ood, &s.features).unwrap();
        prop_assert_eq!(trace.len(), total);
        prop_assert_eq!(trace.admissions.len(), total);
        prop_assert_eq!(trace.batches.iter().map(|b| b.len).sum::<usize>(), total);
    }
}
