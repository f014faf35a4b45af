//! Dataset generation and truncated-BPTT training of the surrogate.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{LstmState, ModelInput, ModelOutput, NetworkSpec, NetworkWeights, NnError, Normalization, N_HIDDEN, N_OUTPUTS};
use crate::plant::{excitation_sequence, plant_step, ActuatorBounds, PlantError, PlantParams, PlantState};

pub const MIN_DATASET_CYCLES: usize = 1000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset needs at least {MIN_DATASET_CYCLES} cycles, got {0}")]
    TooFewCycles(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged {
        epoch: usize,
        loss: f64,
        history: Vec<EpochRecord>,
    },
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Consecutive cycles of model inputs and measured outputs. `inputs[k]` carries
/// the measured load and phasing of cycle `k - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<ModelInput>,
    pub outputs: Vec<ModelOutput>,
    /// Leading fraction used for training; the tail is validation.
    pub train_fraction: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetRow {
    cycle: usize,
    imep_prev: f64,
    ca50_prev: f64,
    doi_fuel: f64,
    doi_water: f64,
    nvo: f64,
    imep: f64,
    ca50: f64,
    nox: f64,
    mprr: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn split_index(&self) -> usize {
        ((self.len() as f64) * self.train_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if self.inputs.len() != self.outputs.len() {
            return Err(TrainError::InvalidSplit("input/output length mismatch".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(TrainError::InvalidSplit(format!(
                "train fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        let s = self.split_index();
        if s == 0 || s >= self.len() {
            return Err(TrainError::InvalidSplit("empty train or validation part".into()));
        }
        Ok(())
    }

    /// Per-output `max - min` over the whole dataset.
    pub fn output_ranges(&self) -> [f64; N_OUTPUTS] {
        let mut lo = [f64::INFINITY; N_OUTPUTS];
        let mut hi = [f64::NEG_INFINITY; N_OUTPUTS];
        for y in &self.outputs {
            for (j, v) in y.to_array().into_iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        std::array::from_fn(|j| hi[j] - lo[j])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        let mut wtr = csv::Writer::from_writer(w);
        for (k, (u, y)) in self.inputs.iter().zip(&self.outputs).enumerate() {
            wtr.serialize(DatasetRow {
                cycle: k,
                imep_prev: u.imep_prev,
                ca50_prev: u.ca50_prev,
                doi_fuel: u.doi_fuel,
                doi_water: u.doi_water,
                nvo: u.nvo,
                imep: y.imep,
                ca50: y.ca50,
                nox: y.nox,
                mprr: y.mprr,
            })?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, train_fraction: f64) -> Result<Self, TrainError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for row in rdr.deserialize() {
            let row: DatasetRow = row?;
            inputs.push(ModelInput {
                imep_prev: row.imep_prev,
                ca50_prev: row.ca50_prev,
                doi_fuel: row.doi_fuel,
                doi_water: row.doi_water,
                nvo: row.nvo,
            });
            outputs.push(ModelOutput {
                imep: row.imep,
                ca50: row.ca50,
                nox: row.nox,
                mprr: row.mprr,
            });
        }
        let ds = Dataset {
            inputs,
            outputs,
            train_fraction,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Runs the plant under randomized excitation and records the closed chain of
/// measured feedback. Excitation and plant noise use independent streams
/// derived from `seed`.
pub fn generate_dataset(
    params: &PlantParams,
    bounds: &ActuatorBounds,
    n_cycles: usize,
    seed: u64,
    train_fraction: f64,
) -> Result<Dataset, TrainError> {
    if n_cycles < MIN_DATASET_CYCLES {
        return Err(TrainError::TooFewCycles(n_cycles));
    }
    params.validate()?;
    let mut excite_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let seq = excitation_sequence(n_cycles + 1, bounds, (1, 12), &mut excite_rng)?;

    // One unrecorded priming cycle provides the first feedback pair.
    let (mut state, mut prev) = plant_step(&PlantState::default(), &seq[0], params, &mut noise_rng);
    let mut inputs = Vec::with_capacity(n_cycles);
    let mut outputs = Vec::with_capacity(n_cycles);
    for a in &seq[1..] {
        inputs.push(ModelInput {
            imep_prev: prev.imep,
            ca50_prev: prev.ca50,
            doi_fuel: a.doi_fuel,
            doi_water: a.doi_water,
            nvo: a.nvo,
        });
        let (s, y) = plant_step(&state, a, params, &mut noise_rng);
        outputs.push(y);
        state = s;
        prev = y;
    }
    let ds = Dataset {
        inputs,
        outputs,
        train_fraction,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Truncated-BPTT window in cycles.
    pub window: usize,
    /// Number of parallel contiguous streams per update.
    pub batch: usize,
    pub learning_rate: f64,
    /// Floor of the cosine schedule.
    pub learning_rate_min: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 32,
            batch: 8,
            learning_rate: 5e-3,
            learning_rate_min: 5e-5,
            max_epochs: 150,
            patience: 40,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.window < 3 {
            return bad("window must span at least 3 cycles");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate_min >= 0.0 && self.learning_rate_min <= self.learning_rate) {
            return bad("learning rates must satisfy 0 <= min <= initial, initial > 0");
        }
        Ok(())
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.max_epochs.max(1) as f64;
        self.learning_rate_min
            + 0.5 * (self.learning_rate - self.learning_rate_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputMetrics {
    /// Physical units per output.
    pub rmse: [f64; N_OUTPUTS],
    /// Percent of the output's range over the dataset.
    pub nrmse: [f64; N_OUTPUTS],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean squared error on normalized outputs.
    pub train_loss: f64,
    pub validation_loss: f64,
    pub best_validation_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train: OutputMetrics,
    pub validation: OutputMetrics,
    pub ranges: [f64; N_OUTPUTS],
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

const OUTPUT_NAMES: [&str; N_OUTPUTS] = ["imep", "ca50", "nox", "mprr"];
const OUTPUT_UNITS: [&str; N_OUTPUTS] = ["bar", "CAD", "ppm", "bar/CAD"];

impl FitReport {
    pub fn summary(&self) -> String {
        let mut s = String::from("output   unit      train RMSE   train %   val RMSE   val %\n");
        for j in 0..N_OUTPUTS {
            s.push_str(&format!(
                "{:<8} {:<9} {:>10.4} {:>9.2} {:>10.4} {:>7.2}\n",
                OUTPUT_NAMES[j],
                OUTPUT_UNITS[j],
                self.train.rmse[j],
                self.train.nrmse[j],
                self.validation.rmse[j],
                self.validation.nrmse[j]
            ));
        }
        if let Some(e) = self.best_epoch {
            s.push_str(&format!("best epoch: {e} of {}\n", self.history.len()));
        }
        s
    }

    pub fn write_metrics_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["output", "unit", "train_rmse", "train_nrmse_pct", "val_rmse", "val_nrmse_pct", "range"])?;
        for j in 0..N_OUTPUTS {
            wtr.write_record([
                OUTPUT_NAMES[j].to_string(),
                OUTPUT_UNITS[j].to_string(),
                self.train.rmse[j].to_string(),
                self.train.nrmse[j].to_string(),
                self.validation.rmse[j].to_string(),
                self.validation.nrmse[j].to_string(),
                self.ranges[j].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_history_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.history {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `100 * rmse / range`; a zero range falls back to a unit normalizer.
pub fn nrmse_percent(rmse: f64, range: f64) -> f64 {
    let denom = if range > 0.0 { range } else { 1.0 };
    100.0 * rmse / denom
}

/// One-step-ahead predictions over the whole sequence, starting from a zero
/// state and teacher-forced by the recorded inputs.
pub fn predict_sequence(weights: &NetworkWeights, inputs: &[ModelInput]) -> Result<Vec<ModelOutput>, NnError> {
    let mut state = LstmState::default();
    inputs
        .iter()
        .map(|u| {
            let (s, y) = weights.step(&state, u)?;
            state = s;
            Ok(y)
        })
        .collect()
}

fn metrics(pred: &[ModelOutput], truth: &[ModelOutput], ranges: &[f64; N_OUTPUTS]) -> OutputMetrics {
    let mut sse = [0.0; N_OUTPUTS];
    for (p, t) in pred.iter().zip(truth) {
        let (p, t) = (p.to_array(), t.to_array());
        for j in 0..N_OUTPUTS {
            sse[j] += (p[j] - t[j]).powi(2);
        }
    }
    let n = pred.len().max(1) as f64;
    let rmse: [f64; N_OUTPUTS] = std::array::from_fn(|j| (sse[j] / n).sqrt());
    OutputMetrics {
        rmse,
        nrmse: std::array::from_fn(|j| nrmse_percent(rmse[j], ranges[j])),
    }
}

/// Train/validation RMSE and NRMSE of one-step-ahead predictions.
pub fn evaluate(weights: &NetworkWeights, dataset: &Dataset) -> Result<FitReport, TrainError> {
    dataset.validate()?;
    let pred = predict_sequence(weights, &dataset.inputs)?;
    let split = dataset.split_index();
    let ranges = dataset.output_ranges();
    Ok(FitReport {
        train: metrics(&pred[..split], &dataset.outputs[..split], &ranges),
        validation: metrics(&pred[split..], &dataset.outputs[split..], &ranges),
        ranges,
        history: Vec::new(),
        best_epoch: None,
    })
}

/// Normalized MSE of a window rolled out from `init`, its gradient w.r.t. all
/// parameters (accumulated into `grad`), and the carried-over final state.
/// Gradients do not flow into `init`.
pub fn window_loss_grad(
    weights: &NetworkWeights,
    inputs: &[[f64; crate::nn::N_INPUTS]],
    targets: &[[f64; N_OUTPUTS]],
    init: &LstmState,
    grad: &mut [f64],
) -> Result<(f64, LstmState), NnError> {
    let mut traces = Vec::with_capacity(inputs.len());
    let mut state = *init;
    let mut loss = 0.0;
    let scale = 1.0 / (inputs.len() * N_OUTPUTS) as f64;
    let mut gys = Vec::with_capacity(inputs.len());
    for (u, t) in inputs.iter().zip(targets) {
        let tr = weights.trace(&state, u)?;
        let y = tr.output_normalized();
        let mut gy = [0.0; N_OUTPUTS];
        for j in 0..N_OUTPUTS {
            let e = y[j] - t[j];
            loss += e * e * scale;
            gy[j] = 2.0 * e * scale;
        }
        state = tr.next_state();
        traces.push(tr);
        gys.push(gy);
    }
    let mut gc = [0.0; N_HIDDEN];
    let mut gh = [0.0; N_HIDDEN];
    for (tr, gy) in traces.iter().zip(&gys).rev() {
        (gc, gh) = weights.backward(tr, gy, &gc, &gh, grad);
    }
    Ok((loss, state))
}

fn sequence_loss(weights: &NetworkWeights, inputs: &[[f64; crate::nn::N_INPUTS]], targets: &[[f64; N_OUTPUTS]], from: usize) -> Result<f64, NnError> {
    let mut state = LstmState::default();
    let mut sse = 0.0;
    for (k, (u, t)) in inputs.iter().zip(targets).enumerate() {
        let tr = weights.trace(&state, u)?;
        state = tr.next_state();
        if k >= from {
            let y = tr.output_normalized();
            sse += (0..N_OUTPUTS).map(|j| (y[j] - t[j]).powi(2)).sum::<f64>();
        }
    }
    Ok(sse / ((inputs.len() - from).max(1) * N_OUTPUTS) as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// Fits a network to `dataset` with Adam, a cosine learning-rate schedule and
/// early stopping on validation loss. Normalization constants come from the
/// training part only. Returns the best-validation weights.
pub fn train(dataset: &Dataset, spec: &NetworkSpec, config: &TrainConfig) -> Result<(NetworkWeights, FitReport), TrainError> {
    train_with_progress(dataset, spec, config, |_| {})
}

pub fn train_with_progress(
    dataset: &Dataset,
    spec: &NetworkSpec,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(NetworkWeights, FitReport), TrainError> {
    dataset.validate()?;
    config.validate()?;
    let split = dataset.split_index();
    let norm = Normalization::fit(&dataset.inputs[..split], &dataset.outputs[..split]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = NetworkWeights::random(spec.clone(), norm, &mut rng)?;

    let inputs: Vec<_> = dataset.inputs.iter().map(|u| weights.norm.normalize_input(u)).collect();
    let targets: Vec<_> = dataset.outputs.iter().map(|y| weights.norm.normalize_output(y)).collect();

    let batch = config.batch.min(split / config.window).max(1);
    let stream_len = split / batch;
    let windows = stream_len.div_ceil(config.window);

    let mut adam = Adam::new(weights.param_count());
    let mut grad = vec![0.0; weights.param_count()];
    let mut best = (f64::INFINITY, weights.params.clone(), None);
    let mut history = Vec::new();
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        let lr = config.learning_rate_at(epoch);
        let mut states = vec![LstmState::default(); batch];
        let mut epoch_loss = 0.0;
        let mut epoch_terms = 0usize;
        for w in 0..windows {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut used = 0;
            let start = w * config.window;
            let len = config.window.min(stream_len - start);
            for (b, state) in states.iter_mut().enumerate() {
                let lo = b * stream_len + start;
                let (loss, next) = window_loss_grad(&weights, &inputs[lo..lo + len], &targets[lo..lo + len], state, &mut grad)?;
                *state = next;
                epoch_loss += loss * len as f64;
                epoch_terms += len;
                used += 1;
            }
            let inv = 1.0 / used as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if config.clip_norm > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > config.clip_norm {
                    let s = config.clip_norm / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            adam.step(&mut weights.params, &grad, lr, config);
        }
        let train_loss = epoch_loss / epoch_terms.max(1) as f64;
        let validation_loss = sequence_loss(&weights, &inputs, &targets, split)?;
        if !train_loss.is_finite() || !validation_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                loss: train_loss,
                history,
            });
        }
        if validation_loss < best.0 {
            best = (validation_loss, weights.params.clone(), Some(epoch));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let rec = EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            validation_loss,
            best_validation_loss: best.0,
        };
        on_epoch(&rec);
        history.push(rec);
        if config.patience > 0 && since_best >= config.patience {
            log::info!("early stop at epoch {epoch}, best {:?}", best.2);
            break;
        }
    }
    weights.params = best.1;
    let mut report = evaluate(&weights, dataset)?;
    report.history = history;
    report.best_epoch = best.2;
    Ok((weights, report))
}
