//! Minibatch training with validation-based model selection, the
//! sample-efficiency sweep and the inference-time benchmark.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::factor_graph::AugmentedFactorGraph;
use crate::gnn_model::{GnnConfig, GnnModel, GraphBatch};
use crate::grid_model::PowerSystem;
use crate::neural::{clip_gradients, Adam, ClipMode, Mode, Tape};
use crate::wls_se::{solve_exact, MeasurementModel, StateVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Stop after this many epochs without a new validation minimum.
    pub patience: usize,
    /// Plateau rule: `window` consecutive |Δ val| below `min_delta`.
    pub min_delta: f64,
    pub window: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            patience: 100,
            min_delta: 1e-5,
            window: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub clip_mode: ClipMode,
    pub max_epochs: usize,
    pub early_stop: EarlyStop,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-4,
            batch_size: 32,
            clip_norm: 0.5,
            clip_mode: ClipMode::Norm,
            max_epochs: 150,
            early_stop: EarlyStop::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.lr > 0.0 && self.clip_norm > 0.0 && self.early_stop.min_delta >= 0.0;
        if !positive || self.batch_size == 0 || self.max_epochs == 0 || self.early_stop.window == 0 {
            return Err(Error::Invalid(format!("trainer: invalid configuration {self:?}")));
        }
        Ok(())
    }
}

/// Graphs and labels ready for the model.
#[derive(Debug, Clone)]
pub struct GraphSet {
    pub graphs: Vec<AugmentedFactorGraph>,
    pub labels: Vec<StateVector>,
}

impl GraphSet {
    pub fn from_dataset(data: &Dataset, sys: &PowerSystem) -> Result<Self> {
        Ok(GraphSet {
            graphs: data.graphs(sys)?,
            labels: data.labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn truncated(&self, n: usize) -> GraphSet {
        GraphSet {
            graphs: self.graphs.iter().take(n).cloned().collect(),
            labels: self.labels.iter().take(n).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Plateau,
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            writeln!(out, "{},{:?},{:?}", e.epoch, e.train_loss, e.val_loss).expect("string write");
        }
        out
    }

    pub fn final_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }
}

pub struct TrainOutcome {
    /// Parameters at the validation minimum.
    pub best: GnnModel,
    /// Parameters after the last epoch.
    pub last: GnnModel,
    pub log: TrainLog,
}

fn stacked_labels(labels: &[&StateVector]) -> Array2<f64> {
    let values: Vec<f64> = labels.iter().flat_map(|l| l.iter().copied()).collect();
    let n = values.len();
    Array2::from_shape_vec((n, 1), values).expect("column shape")
}

/// One optimizer step on a minibatch. Returns the batch loss.
pub fn train_step(
    model: &mut GnnModel,
    adam: &Adam,
    graphs: &[&AugmentedFactorGraph],
    labels: &[&StateVector],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let batch = GraphBatch::new(graphs)?;
    let target = stacked_labels(labels);
    if target.nrows() != batch.n_var {
        return Err(Error::ShapeMismatch {
            context: "trainer::train_step",
            left: vec![batch.n_var],
            right: vec![target.nrows()],
        });
    }
    let mut tape = Tape::new();
    let (pred, means) = model.forward(&mut tape, &batch, Mode::Train)?;
    let loss_node = tape.mse(pred, Arc::new(target))?;
    let loss = tape.value(loss_node)[[0, 0]];
    if !loss.is_finite() {
        return Err(Error::Divergence { epoch });
    }
    model.params.zero_grad();
    tape.backward(loss_node, &mut model.params)?;
    clip_gradients(&mut model.params, cfg.clip_norm, cfg.clip_mode);
    adam.step(&mut model.params)?;
    model.update_running_means(&means);
    Ok(loss)
}

/// Mean over samples of the per-sample MSE, with Eval-mode batchnorm.
pub fn evaluate(model: &GnnModel, set: &GraphSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Invalid("trainer: cannot evaluate an empty set".into()));
    }
    let preds = model.predict_many(&set.graphs, 32)?;
    let mut total = 0.0;
    for (p, l) in preds.iter().zip(&set.labels) {
        total += p.mse(l)?;
    }
    Ok(total / set.len() as f64)
}

/// Train with seeded shuffling, keeping the parameters with the lowest
/// validation loss.
pub fn train(mut model: GnnModel, train_set: &GraphSet, val_set: &GraphSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Invalid("trainer: train and validation sets must be non-empty".into()));
    }
    let adam = Adam::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut best = model.clone();
    let (mut best_epoch, mut best_val) = (0, f64::INFINITY);
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let graphs: Vec<&AugmentedFactorGraph> = chunk.iter().map(|&i| &train_set.graphs[i]).collect();
            let labels: Vec<&StateVector> = chunk.iter().map(|&i| &train_set.labels[i]).collect();
            weighted += train_step(&mut model, &adam, &graphs, &labels, cfg, epoch)? * chunk.len() as f64;
        }
        let train_loss = weighted / train_set.len() as f64;
        let val_loss = evaluate(&model, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        log::info!("epoch {epoch}: train {train_loss:.6e}, val {val_loss:.6e}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = model.clone();
        }
        let es = &cfg.early_stop;
        if epochs.len() > es.window {
            let recent = &epochs[epochs.len() - es.window - 1..];
            if recent.windows(2).all(|w| (w[1].val_loss - w[0].val_loss).abs() < es.min_delta) {
                stop_reason = StopReason::Plateau;
                break;
            }
        }
        if epoch - best_epoch >= es.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        last: model,
        log: TrainLog {
            epochs,
            best_epoch,
            best_val_loss: best_val,
            stop_reason,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub test_mse: f64,
    pub baseline_mse: f64,
    pub best_epoch: usize,
    pub epochs: usize,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("size,test_mse,baseline_mse,best_epoch,epochs\n");
    for r in rows {
        writeln!(out, "{},{:?},{:?},{},{}", r.size, r.test_mse, r.baseline_mse, r.best_epoch, r.epochs).expect("string write");
    }
    out
}

/// One training per size on the first `size` training samples; the test
/// MSE uses the validation-selected parameters. The baseline is
/// approximative WLS against the exact-WLS labels of the same test set.
pub fn sample_efficiency_sweep(
    sys: &PowerSystem,
    train_data: &Dataset,
    val_data: &Dataset,
    test_data: &Dataset,
    sizes: &[usize],
    model_cfg: &GnnConfig,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if let Some(&too_big) = sizes.iter().find(|&&s| s > train_data.len() || s == 0) {
        return Err(Error::Invalid(format!(
            "trainer: sweep size {too_big} not in 1..={}",
            train_data.len()
        )));
    }
    let train_all = GraphSet::from_dataset(train_data, sys)?;
    let val = GraphSet::from_dataset(val_data, sys)?;
    let test = GraphSet::from_dataset(test_data, sys)?;
    let baseline_mse = test_data.baseline_mse(sys)?;
    let mut rows = Vec::new();
    for &size in sizes {
        let model = GnnModel::new(*model_cfg, cfg.seed)?;
        let outcome = train(model, &train_all.truncated(size), &val, cfg)?;
        let test_mse = evaluate(&outcome.best, &test)?;
        log::info!("size {size}: test {test_mse:.6e}, baseline {baseline_mse:.6e}");
        rows.push(SweepRow {
            size,
            test_mse,
            baseline_mse,
            best_epoch: outcome.log.best_epoch,
            epochs: outcome.log.final_epoch(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    /// Seconds for exact WLS over the whole test set (median of runs).
    pub wls_time: f64,
    /// Seconds for GNN inference over the whole test set (median of runs).
    pub gnn_time: f64,
    pub ratio: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("n,wls_time,gnn_time,ratio\n");
    for r in rows {
        writeln!(out, "{},{:e},{:e},{:?}", r.n, r.wls_time, r.gnn_time, r.ratio).expect("string write");
    }
    out
}

pub const BENCH_WARMUP: usize = 3;
pub const BENCH_RUNS: usize = 5;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

fn time_runs(warmup: usize, runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// A system to benchmark: its exact-WLS inputs and the GNN inputs for the
/// same test samples.
pub struct BenchCase<'a> {
    pub n: usize,
    pub models: &'a [MeasurementModel],
    pub graphs: &'a [AugmentedFactorGraph],
    pub gnn: &'a GnnModel,
}

/// Wall-clock medians of exact WLS and GNN inference over each test set.
pub fn bench_inference(cases: &[BenchCase<'_>], warmup: usize, runs: usize) -> Result<Vec<BenchRow>> {
    let (warmup, runs) = (warmup.max(BENCH_WARMUP), runs.max(BENCH_RUNS));
    cases
        .iter()
        .map(|c| {
            let wls_time = time_runs(warmup, runs, || {
                for m in c.models {
                    std::hint::black_box(solve_exact(m)?);
                }
                Ok(())
            })?;
            let gnn_time = time_runs(warmup, runs, || {
                std::hint::black_box(c.gnn.predict_many(c.graphs, 32)?);
                Ok(())
            })?;
            Ok(BenchRow {
                n: c.n,
                wls_time,
                gnn_time,
                ratio: wls_time / gnn_time,
            })
        })
        .collect()
}

/// Least-squares line `y = a·x + b` and its coefficient of determination.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(xi, yi)| (yi - a * xi - b).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|yi| (yi - my).powi(2)).sum();
    (a, b, 1.0 - ss_res / ss_tot)
}

/// Everything needed to rerun a training: configuration, seeds and the
/// digests of the datasets used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit: String,
    pub command: String,
    pub system: String,
    pub system_digest: String,
    pub model: GnnConfig,
    pub train: TrainConfig,
    pub datasets: Vec<DatasetRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub role: String,
    pub path: String,
    pub seed_base: u64,
    pub count: usize,
    pub samples_sha256: String,
}

impl DatasetRef {
    pub fn new(role: &str, path: &str, data: &Dataset) -> Self {
        DatasetRef {
            role: role.to_string(),
            path: path.to_string(),
            seed_base: data.manifest.seed_base,
            count: data.len(),
            samples_sha256: data.manifest.samples_sha256.clone(),
        }
    }
}

/// Datasets of one run must not share any sample seed.
pub fn check_disjoint(sets: &[&Dataset]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for d in sets {
        for seed in d.seeds() {
            if !seen.insert(seed) {
                return Err(Error::Invalid(format!("trainer: sample seed {seed} appears in more than one split")));
            }
        }
    }
    Ok(())
}
