//! Reference-disjoint splits, the MSE training loop with Adam and
//! validation-PLCC model selection, checkpoints and prediction.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{GraphSettings, PipelineConfig, TrainingConfig};
use crate::error::{Error, Result};
use crate::evaluation::pearson;
use crate::graph::{PcwGraph, NODE_DIM};
use crate::io::DatasetManifest;
use crate::model::{Mode, ModelConfig, QualityModel};
use crate::nn::{adam_step, read_checkpoint, write_checkpoint, OptimizerState, Tensor2};
use crate::pipeline::GraphCache;

pub const SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
    All,
}

impl SplitPlan {
    pub fn part(&self, part: SplitPart, total: usize) -> Vec<usize> {
        match part {
            SplitPart::Train => self.train.clone(),
            SplitPart::Val => self.val.clone(),
            SplitPart::Test => self.test.clone(),
            SplitPart::All => (0..total).collect(),
        }
    }
}

/// Shuffles reference ids by `seed` and assigns each reference, with all its
/// entries, to the bucket furthest below its entry-count target.
pub fn split_dataset(manifest: &DatasetManifest, seed: u64) -> Result<SplitPlan> {
    let mut refs: Vec<&str> = manifest.entries.iter().map(|e| e.reference_id.as_str()).collect();
    refs.sort_unstable();
    refs.dedup();
    if refs.len() < 3 {
        return Err(Error::TooFewReferences(refs.len()));
    }
    refs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let count = |r: &str| manifest.entries.iter().filter(|e| e.reference_id == r).count();
    let total = manifest.len() as f64;
    let targets = SPLIT_RATIOS.map(|r| r * total);
    let mut buckets: [Vec<&str>; 3] = Default::default();
    let mut filled = [0usize; 3];
    for &r in &refs {
        let deficit = |b: usize| (targets[b] - filled[b] as f64) / targets[b];
        let mut best = 0;
        for b in 1..3 {
            if deficit(b) > deficit(best) {
                best = b;
            }
        }
        filled[best] += count(r);
        buckets[best].push(r);
    }
    // Every bucket gets at least one reference: take the smallest from the
    // bucket holding the most.
    for b in 0..3 {
        if buckets[b].is_empty() {
            let donor = (0..3).max_by_key(|&d| (buckets[d].len(), std::cmp::Reverse(d))).unwrap();
            let (pos, _) = buckets[donor]
                .iter()
                .enumerate()
                .min_by_key(|(i, r)| (count(r), *i))
                .unwrap();
            let r = buckets[donor].remove(pos);
            buckets[b].push(r);
        }
    }
    let indices = |b: usize| -> Vec<usize> {
        (0..manifest.len())
            .filter(|&i| buckets[b].contains(&manifest.entries[i].reference_id.as_str()))
            .collect()
    };
    Ok(SplitPlan {
        train: indices(0),
        val: indices(1),
        test: indices(2),
        seed,
        ratios: SPLIT_RATIOS,
    })
}

pub fn mse_loss(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::LengthMismatch(preds.len(), targets.len()));
    }
    let sum: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch's batches, dropout active.
    pub train_loss: f64,
    /// MSE on the training split in infer mode after the epoch.
    pub train_mse: f64,
    pub val_loss: f64,
    pub val_plcc: f64,
}

/// A graph with its normalized target.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub graph: &'a PcwGraph,
    pub target: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Parameters from the best epoch.
    pub model: QualityModel,
    pub optimizer: OptimizerState,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_plcc: f64,
    pub stopped_early: bool,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn dropout_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    mix(mix(mix(seed) ^ epoch as u64) ^ sample as u64)
}

fn predict_all(model: &QualityModel, samples: &[Sample<'_>]) -> Result<Vec<f64>> {
    samples.par_iter().map(|s| model.predict(s.graph)).collect()
}

/// PLCC and MSE of the model on `samples`.
fn score_split(model: &QualityModel, samples: &[Sample<'_>]) -> Result<(f64, f64)> {
    let preds = predict_all(model, samples)?;
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    Ok((pearson(&preds, &targets).unwrap_or(0.0), mse_loss(&preds, &targets)?))
}

/// Trains from a fresh initialization. Model selection uses validation PLCC,
/// or training PLCC when `val` is empty; the earliest best epoch wins ties.
pub fn train_on_graphs(
    train: &[Sample<'_>],
    val: &[Sample<'_>],
    model_config: &ModelConfig,
    config: &TrainingConfig,
) -> Result<TrainRun> {
    if train.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut model = QualityModel::new(model_config.clone(), config.seed)?;
    let mut optimizer = OptimizerState::new(&model.params, config.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(config.seed ^ 0x5EED));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, QualityModel, OptimizerState)> = None;
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<Tensor2>)> = batch
                .par_iter()
                .map(|&i| {
                    let mode = Mode::Train {
                        seed: dropout_seed(config.seed, epoch, i),
                    };
                    model.sample_gradients(train[i].graph, train[i].target, mode)
                })
                .collect::<Result<_>>()?;
            let mut grads = model.params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for (loss, sample_grads) in &results {
                loss_sum += loss;
                for (g, s) in grads.iter_mut().zip(sample_grads) {
                    for (a, b) in g.data.iter_mut().zip(&s.data) {
                        *a += scale * b;
                    }
                }
            }
            adam_step(&mut model.params, &grads, &mut optimizer)?;
        }

        let (train_plcc, train_mse) = score_split(&model, train)?;
        let (val_plcc, val_loss) = if val.is_empty() {
            (train_plcc, train_mse)
        } else {
            score_split(&model, val)?
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_mse,
            val_loss,
            val_plcc,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.6} train_mse {:.6} val_loss {:.6} val_plcc {:.4}",
            record.train_loss,
            record.train_mse,
            record.val_loss,
            record.val_plcc
        );
        epochs.push(record);
        if best.as_ref().map_or(true, |b| val_plcc > b.1) {
            best = Some((epoch, val_plcc, model.clone(), optimizer.clone()));
        }
        let best_epoch = best.as_ref().unwrap().0;
        if config.patience > 0 && epoch - best_epoch >= config.patience {
            stopped_early = epoch + 1 < config.epochs;
            break;
        }
    }
    let (best_epoch, best_val_plcc, model, optimizer) = best.expect("at least one epoch");
    Ok(TrainRun {
        model,
        optimizer,
        epochs,
        best_epoch,
        best_val_plcc,
        stopped_early,
    })
}

/// Hyperparameters and normalization stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub node_dim: usize,
    pub config: PipelineConfig,
    /// Targets were `(mos - mos_min) / (mos_max - mos_min)`.
    pub mos_min: f64,
    pub mos_max: f64,
    pub best_epoch: usize,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn save_model(path: &Path, model: &QualityModel, optimizer: Option<&OptimizerState>, meta: &CheckpointMeta) -> Result<()> {
    write_checkpoint(path, &model.params, optimizer)?;
    let side = sidecar_path(path);
    let mut json = serde_json::to_string_pretty(meta)?;
    json.push('\n');
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

/// A trained model ready to score graphs in MOS units.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub model: QualityModel,
    pub meta: CheckpointMeta,
}

impl Predictor {
    pub fn new(model: QualityModel, meta: CheckpointMeta) -> Self {
        Predictor { model, meta }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, _) = read_checkpoint(path)?;
        let side = sidecar_path(path);
        let text = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", side.display())))?;
        if meta.node_dim != NODE_DIM {
            return Err(Error::Checkpoint(format!("node dimension {} != {NODE_DIM}", meta.node_dim)));
        }
        let model = QualityModel::from_params(meta.config.model.clone(), &params)?;
        Ok(Predictor { model, meta })
    }

    /// Errors unless `settings` produce the same graphs as training did.
    pub fn check_settings(&self, settings: &GraphSettings) -> Result<()> {
        let trained = self.meta.config.graph_settings();
        let mut diffs = Vec::new();
        if trained.feature != settings.feature {
            diffs.push("feature");
        }
        if trained.clustering != settings.clustering {
            diffs.push("clustering");
        }
        if trained.graph != settings.graph {
            diffs.push("graph");
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(format!(
                "[{}] differ from the checkpoint's training config",
                diffs.join("], [")
            )))
        }
    }

    pub fn denormalize(&self, normalized: f64) -> f64 {
        self.meta.mos_min + normalized * (self.meta.mos_max - self.meta.mos_min)
    }

    /// Score in MOS units.
    pub fn predict_graph(&self, graph: &PcwGraph) -> Result<f64> {
        Ok(self.denormalize(self.model.predict(graph)?))
    }

    /// Full pipeline on a cloud file using the checkpoint's own settings.
    pub fn predict_cloud(&self, path: &Path, cache: &GraphCache) -> Result<f64> {
        let graph = cache.graph_for(path, &self.meta.config.graph_settings())?;
        self.predict_graph(&graph).map_err(|e| e.in_cloud(path))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_plcc: f64,
    pub stopped_early: bool,
    /// File name of the checkpoint, relative to the report.
    pub checkpoint: String,
    pub split: SplitPlan,
    pub mos_min: f64,
    pub mos_max: f64,
    pub config: PipelineConfig,
    /// Not serialized, so reports from identical runs are byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Graphs for every manifest entry, in manifest order; the first failing
/// entry (by position) is reported.
pub fn manifest_graphs(manifest: &DatasetManifest, settings: &GraphSettings, cache: &GraphCache) -> Result<Vec<PcwGraph>> {
    let results: Vec<Result<PcwGraph>> = manifest
        .entries
        .par_iter()
        .map(|e| cache.graph_for(&manifest.resolve(e), settings))
        .collect();
    results.into_iter().collect()
}

/// Precomputes graphs, splits by reference, trains, and writes the best
/// checkpoint with its sidecar to `checkpoint`.
pub fn train(manifest: &DatasetManifest, config: &PipelineConfig, checkpoint: &Path, cache: &GraphCache) -> Result<TrainReport> {
    let start = Instant::now();
    config.validate()?;
    let split = split_dataset(manifest, config.training.seed)?;
    let graphs = manifest_graphs(manifest, &config.graph_settings(), cache)?;
    let samples = |idx: &[usize]| -> Vec<Sample<'_>> {
        idx.iter()
            .map(|&i| Sample {
                graph: &graphs[i],
                target: manifest.normalize(manifest.entries[i].mos),
            })
            .collect()
    };
    let run = train_on_graphs(&samples(&split.train), &samples(&split.val), &config.model, &config.training)?;
    let meta = CheckpointMeta {
        node_dim: NODE_DIM,
        config: config.clone(),
        mos_min: manifest.mos_min,
        mos_max: manifest.mos_max,
        best_epoch: run.best_epoch,
    };
    save_model(checkpoint, &run.model, Some(&run.optimizer), &meta)?;
    Ok(TrainReport {
        epochs: run.epochs,
        best_epoch: run.best_epoch,
        best_val_plcc: run.best_val_plcc,
        stopped_early: run.stopped_early,
        checkpoint: checkpoint
            .file_name()
            .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        split,
        mos_min: manifest.mos_min,
        mos_max: manifest.mos_max,
        config: config.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::ManifestEntry;

    fn manifest(refs: usize, per_ref: usize) -> DatasetManifest {
        let entries = (0..refs * per_ref)
            .map(|i| ManifestEntry {
                cloud_path: format!("c{i}.ply").into(),
                reference_id: format!("r{}", i / per_ref),
                mos: i as f64,
            })
            .collect();
        DatasetManifest::from_entries(entries, false).unwrap()
    }

    #[test]
    fn ten_equal_references_split_8_1_1() {
        let m = manifest(10, 4);
        let plan = split_dataset(&m, 42).unwrap();
        assert_eq!((plan.train.len(), plan.val.len(), plan.test.len()), (32, 4, 4));
        assert_eq!(plan, split_dataset(&m, 42).unwrap());
    }

    #[test]
    fn three_references_split_1_1_1() {
        let plan = split_dataset(&manifest(3, 2), 0).unwrap();
        assert_eq!((plan.train.len(), plan.val.len(), plan.test.len()), (2, 2, 2));
        assert!(matches!(split_dataset(&manifest(2, 2), 0), Err(Error::TooFewReferences(2))));
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse_loss(&[0.5, 0.2], &[0.5, 0.2]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[1.0, 2.0], &[0.0, 3.0]).unwrap(), 1.0);
        assert!(mse_loss(&[1.0], &[]).is_err());
    }
}
