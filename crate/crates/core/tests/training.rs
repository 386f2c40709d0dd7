mod common;

use std::collections::HashSet;

use pcqa_core::config::{PipelineConfig, TrainingConfig};
use pcqa_core::graph::PcwGraph;
use pcqa_core::io::{load_manifest, DatasetManifest, ManifestEntry};
use pcqa_core::model::{ModelConfig, QualityModel};
use pcqa_core::pipeline::{cloud_to_graph, GraphCache};
use pcqa_core::training::{
    mse_loss, save_model, split_dataset, train, train_on_graphs, CheckpointMeta, Predictor, Sample,
};
use pcqa_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn manifest_from_counts(counts: &[usize]) -> DatasetManifest {
    let mut entries = Vec::new();
    for (r, &c) in counts.iter().enumerate() {
        for i in 0..c {
            entries.push(ManifestEntry {
                cloud_path: format!("r{r}_{i}.ply").into(),
                reference_id: format!("ref{r}"),
                mos: (r * 7 + i) as f64,
            });
        }
    }
    DatasetManifest::from_entries(entries, false).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn split_partitions_by_reference(
        counts in prop::collection::vec(1usize..6, 3..30),
        seed in any::<u64>(),
    ) {
        let m = manifest_from_counts(&counts);
        let plan = split_dataset(&m, seed).unwrap();
        let mut all: Vec<usize> = plan.train.iter().chain(&plan.val).chain(&plan.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..m.len()).collect::<Vec<_>>());
        let refs = |idx: &[usize]| idx.iter().map(|&i| m.entries[i].reference_id.clone()).collect::<HashSet<_>>();
        let (a, b, c) = (refs(&plan.train), refs(&plan.val), refs(&plan.test));
        prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        prop_assert!(!a.is_empty() && !b.is_empty() && !c.is_empty());
        prop_assert_eq!(&plan, &split_dataset(&m, seed).unwrap());
    }
}

#[test]
fn mse_matches_compensated_sum() {
    let mut r = common::rng(3);
    for _ in 0..100 {
        let p: Vec<f64> = (0..7).map(|_| r.gen_range(-10.0..10.0)).collect();
        let t: Vec<f64> = (0..7).map(|_| r.gen_range(-10.0..10.0)).collect();
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for (a, b) in p.iter().zip(&t) {
            let v = (a - b) * (a - b);
            let s = sum + v;
            comp += if sum.abs() >= v.abs() { (sum - s) + v } else { (v - s) + sum };
            sum = s;
        }
        let want = (sum + comp) / 7.0;
        assert!((mse_loss(&p, &t).unwrap() - want).abs() < 1e-12);
    }
    assert!(matches!(mse_loss(&[1.0, 2.0], &[1.0]), Err(Error::LengthMismatch(2, 1))));
}

fn tiny_set(n: usize, seed: u64) -> (Vec<PcwGraph>, Vec<f64>) {
    let graphs: Vec<PcwGraph> = (0..n as u64).map(|i| common::random_graph(6, seed + i)).collect();
    let targets = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    (graphs, targets)
}

fn samples<'a>(graphs: &'a [PcwGraph], targets: &[f64]) -> Vec<Sample<'a>> {
    graphs.iter().zip(targets).map(|(graph, &target)| Sample { graph, target }).collect()
}

fn quick_config(epochs: usize) -> TrainingConfig {
    TrainingConfig {
        lr: 1e-3,
        batch_size: 3,
        epochs,
        seed: 11,
        patience: 0,
    }
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let (g, t) = tiny_set(7, 50);
    let s = samples(&g, &t);
    let run_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train_on_graphs(&s[..5], &s[5..], &common::narrow_config(), &quick_config(6)).unwrap())
    };
    let a = run_with(1);
    let b = run_with(1);
    let c = run_with(4);
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.epochs, c.epochs);
    assert_eq!(a.model.params.values(), c.model.params.values());
}

#[test]
fn non_improving_validation_keeps_the_first_epoch() {
    let (g, t) = tiny_set(8, 60);
    let s = samples(&g, &t);
    // Constant validation targets make PLCC undefined (scored 0) every epoch.
    let val: Vec<Sample<'_>> = s[5..].iter().map(|x| Sample { target: 0.5, ..*x }).collect();
    let run = train_on_graphs(&s[..5], &val, &common::narrow_config(), &quick_config(5)).unwrap();
    assert_eq!(run.epochs.len(), 5);
    assert_eq!(run.best_epoch, 0);
    assert!(run.epochs.iter().all(|e| e.val_plcc == 0.0));
    let first = train_on_graphs(&s[..5], &val, &common::narrow_config(), &quick_config(1)).unwrap();
    assert_eq!(run.model.params.values(), first.model.params.values());

    let patient = TrainingConfig {
        patience: 2,
        ..quick_config(10)
    };
    let run = train_on_graphs(&s[..5], &val, &common::narrow_config(), &patient).unwrap();
    assert_eq!(run.epochs.len(), 3);
    assert!(run.stopped_early);
}

#[test]
fn best_epoch_has_the_highest_validation_plcc() {
    let (g, t) = tiny_set(9, 70);
    let s = samples(&g, &t);
    let run = train_on_graphs(&s[..6], &s[6..], &common::narrow_config(), &quick_config(8)).unwrap();
    let max = run.epochs.iter().map(|e| e.val_plcc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(run.epochs[run.best_epoch].val_plcc, max);
    assert_eq!(run.best_val_plcc, max);
    assert!(run.epochs[..run.best_epoch].iter().all(|e| e.val_plcc < max));
}

#[test]
fn overfit_loss_falls_block_by_block() {
    let (graphs, targets) = common::overfit_dataset();
    let s = samples(&graphs, &targets);
    let config = TrainingConfig {
        epochs: 200,
        patience: 0,
        ..TrainingConfig::default()
    };
    let run = train_on_graphs(&s, &[], &ModelConfig::default(), &config).unwrap();
    let mse: Vec<f64> = run.epochs.iter().map(|e| e.train_mse).collect();
    let means: Vec<f64> = mse.chunks(20).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(means.windows(2).all(|m| m[1] < m[0]), "{means:?}");
    let rising = mse.windows(10).filter(|w| w[9] > w[0]).count();
    let over_two = mse
        .windows(10)
        .filter(|w| w.windows(2).filter(|p| p[1] > p[0]).count() > 2)
        .count();
    println!(
        "10-epoch windows: {rising} end higher than they start, {over_two} have more than two upticks, of {}",
        mse.len() - 9
    );
}

fn small_pipeline() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.clustering.k = 8;
    c.model = common::narrow_config();
    c.training.epochs = 3;
    c.training.batch_size = 4;
    c
}

fn meta_for(config: &PipelineConfig) -> CheckpointMeta {
    CheckpointMeta {
        node_dim: pcqa_core::graph::NODE_DIM,
        config: config.clone(),
        mos_min: 1.0,
        mos_max: 5.0,
        best_epoch: 0,
    }
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_pipeline();
    let model = QualityModel::new(config.model.clone(), 9).unwrap();
    let path = dir.path().join("model.ckpt");
    save_model(&path, &model, None, &meta_for(&config)).unwrap();
    let loaded = Predictor::load(&path).unwrap();
    let fresh = Predictor::new(model, meta_for(&config));
    for seed in 0..5 {
        let g = common::random_graph(8, 300 + seed);
        assert_eq!(
            fresh.predict_graph(&g).unwrap().to_bits(),
            loaded.predict_graph(&g).unwrap().to_bits()
        );
    }
}

#[test]
fn prediction_ignores_rigid_translation() {
    let config = small_pipeline();
    let predictor = Predictor::new(QualityModel::new(config.model.clone(), 4).unwrap(), meta_for(&config));
    let cloud = common::synthetic_cloud(1500, 5, 0.4);
    let moved = cloud.map_positions(|p| [p[0] + 12.5, p[1] - 3.0, p[2] + 0.75]);
    let settings = config.graph_settings();
    let a = predictor.predict_graph(&cloud_to_graph(&cloud, &settings).unwrap()).unwrap();
    let b = predictor.predict_graph(&cloud_to_graph(&moved, &settings).unwrap()).unwrap();
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    let again = predictor.predict_graph(&cloud_to_graph(&cloud, &settings).unwrap()).unwrap();
    assert_eq!(a.to_bits(), again.to_bits());
}

#[test]
fn mismatched_settings_are_rejected() {
    let config = small_pipeline();
    let predictor = Predictor::new(QualityModel::new(config.model.clone(), 4).unwrap(), meta_for(&config));
    assert!(predictor.check_settings(&config.graph_settings()).is_ok());
    let mut other = config.clone();
    other.clustering.k = 16;
    other.feature.neighbor_radius_frac *= 2.0;
    match predictor.check_settings(&other.graph_settings()) {
        Err(Error::ConfigMismatch(msg)) => assert!(msg.contains("clustering") && msg.contains("feature")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn end_to_end_training_is_reproducible() {
    let data = tempfile::tempdir().unwrap();
    let manifest_path = common::write_dataset(data.path(), 4, 3, 600);
    let manifest = load_manifest(&manifest_path).unwrap();
    let config = small_pipeline();
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = GraphCache::new(cache_dir.path());
    let out = tempfile::tempdir().unwrap();
    let (p1, p2) = (out.path().join("a.ckpt"), out.path().join("b.ckpt"));
    let r1 = train(&manifest, &config, &p1, &cache).unwrap();
    let r2 = train(&manifest, &config, &p2, &GraphCache::disabled()).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(r1.to_json().replace("a.ckpt", "b.ckpt"), r2.to_json());
    assert!(r1.best_epoch < r1.epochs.len());
    assert!(std::fs::read_dir(cache_dir.path()).unwrap().count() >= manifest.len());

    let predictor = Predictor::load(&p1).unwrap();
    assert_eq!(predictor.meta.best_epoch, r1.best_epoch);
    let cloud = manifest.resolve(&manifest.entries[0]);
    let score = predictor.predict_cloud(&cloud, &cache).unwrap();
    assert!(score.is_finite());
}

#[test]
fn failing_cloud_is_named() {
    let data = tempfile::tempdir().unwrap();
    let manifest_path = common::write_dataset(data.path(), 3, 2, 300);
    std::fs::write(data.path().join("ref1_d0.ply"), b"ply\nformat nonsense\n").unwrap();
    let manifest = load_manifest(&manifest_path).unwrap();
    let err = train(&manifest, &small_pipeline(), &data.path().join("m.ckpt"), &GraphCache::disabled()).unwrap_err();
    assert!(err.to_string().contains("ref1_d0.ply"), "{err}");
}
