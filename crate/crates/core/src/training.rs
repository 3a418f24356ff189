//! One-step-prediction training: normalized loss, Adam with cosine
//! annealing, mini-batch sampling and checkpoints.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Var};
use crate::components::lagrange;
use crate::integrators::{rk4_step, IntegratorError};
use crate::models::{Model, ModelError};
use crate::systems::Dataset;

pub const CHECKPOINT_VERSION: u32 = 1;
/// Items per independently taped chunk; fixed so results do not depend on
/// the number of worker threads.
const CHUNK: usize = 25;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("observation `{name}` (column {index}) is constant in the training data")]
    ConstantDimension { index: usize, name: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at iteration {iteration}{}", last_good.as_ref().map(|p| format!("; last good checkpoint {}", p.display())).unwrap_or_default())]
    NonFinite { iteration: usize, last_good: Option<PathBuf> },
    #[error("fixed parameter {index} changed during training")]
    FrozenChanged { index: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// RK4 substeps per sampling interval.
    pub substeps: usize,
    pub seed: u64,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Iterations averaged into one history row.
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_size: 100,
            lr0: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            substeps: 4,
            seed: 0,
            checkpoint_interval: 1_000,
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.iterations == 0 || self.batch_size == 0 || self.substeps == 0 || self.log_interval == 0 {
            return bad("iterations, batch_size, substeps and log_interval must be positive");
        }
        if !(self.lr0 > 0.0 && self.epsilon > 0.0) {
            return bad("lr0 and epsilon must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate for 0-based iteration `k` of `total`,
/// equal to `lr0` at the first iteration and 0 at the last.
pub fn cosine_lr(lr0: f64, k: usize, total: usize) -> f64 {
    if total <= 1 {
        return 0.0;
    }
    let x = k.min(total - 1) as f64 / (total - 1) as f64;
    (0.5 * lr0 * (1.0 + (PI * x).cos())).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Bias-corrected Adam update of the trainable entries of `params`.
pub fn adam_step(params: &mut ParamSet, grads: &[f64], state: &mut AdamState, lr: f64, cfg: &TrainConfig) {
    assert_eq!(grads.len(), params.len(), "gradient length");
    assert_eq!(state.m.len(), params.len(), "optimizer state length");
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let trainable = params.trainable().to_vec();
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        if !trainable[i] {
            continue;
        }
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// One training pair: the state at step `n`, the state at `n + 1` and the
/// recorded externals around the interval.
#[derive(Clone, Debug)]
pub struct Sample {
    pub obs0: Vec<f64>,
    pub obs1: Vec<f64>,
    /// Sample times of the external window, relative to the step start.
    pub window_t: Vec<f64>,
    /// `window[c][k]`: column `c` at `window_t[k]`.
    pub window: Vec<Vec<f64>>,
}

impl Sample {
    fn ext_at(&self, tau: f64) -> Vec<f64> {
        self.window.iter().map(|col| lagrange(&self.window_t, col, tau)).collect()
    }
}

/// Training pairs and normalization of one dataset.
#[derive(Clone, Debug)]
pub struct OneStepData {
    pub samples: Vec<Sample>,
    pub stds: Vec<f64>,
    pub dt: f64,
    pub obs_dim: usize,
    pub ext_dim: usize,
}

impl OneStepData {
    /// Every consecutive pair of every trajectory, with σ per observation
    /// dimension over all training rows.
    pub fn from_dataset(data: &Dataset) -> Result<Self, TrainError> {
        let stds = data.obs_std();
        if let Some(index) = stds.iter().position(|s| !(*s > 0.0)) {
            return Err(TrainError::ConstantDimension { index, name: data.meta.obs_names[index].clone() });
        }
        let mut samples = Vec::new();
        for tr in &data.trajectories {
            let rows = tr.times.len();
            if rows < 2 {
                continue;
            }
            let width = rows.min(4);
            for n in 0..rows - 1 {
                let lo = n.saturating_sub(1).min(rows - width);
                let idx = lo..lo + width;
                let t0 = tr.times[n];
                samples.push(Sample {
                    obs0: tr.obs.row(n).to_vec(),
                    obs1: tr.obs.row(n + 1).to_vec(),
                    window_t: idx.clone().map(|k| tr.times[k] - t0).collect(),
                    window: (0..tr.ext.ncols()).map(|c| idx.clone().map(|k| tr.ext[[k, c]]).collect()).collect(),
                });
            }
        }
        if samples.is_empty() {
            return Err(TrainError::Config("dataset has no consecutive pairs".into()));
        }
        Ok(OneStepData { samples, stds, dt: data.meta.dt, obs_dim: data.meta.obs_names.len(), ext_dim: data.meta.ext_names.len() })
    }

    fn check(&self, model: &Model) -> Result<(), TrainError> {
        if model.obs_dim() != self.obs_dim || model.ext_dim() != self.ext_dim {
            return Err(TrainError::Config(format!(
                "model expects {}+{} columns, data has {}+{}",
                model.obs_dim(),
                model.ext_dim(),
                self.obs_dim,
                self.ext_dim
            )));
        }
        Ok(())
    }
}

/// Mean over items and dimensions of `((pred − target)/σ)²`.
pub fn normalized_mse(pred: &Array2<f64>, target: &Array2<f64>, stds: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (p, t) in pred.rows().into_iter().zip(target.rows()) {
        for ((a, b), s) in p.iter().zip(t.iter()).zip(stds) {
            acc += ((a - b) / s).powi(2);
        }
    }
    acc / pred.len() as f64
}

/// RK4 prediction of a chunk's next states, recorded on `tape`.
fn predict(tape: &mut Tape, model: &Model, items: &[&Sample], dt: f64, substeps: usize) -> Result<Var, TrainError> {
    let d = items[0].obs0.len();
    let u0 = Array2::from_shape_fn((items.len(), d), |(i, j)| items[i].obs0[j]);
    let u0 = tape.constant(u0);
    let ext_dim = items[0].window.len();
    let mut failure = None;
    let out = rk4_step(tape, u0, 0.0, dt, substeps, |tape, u, tau| {
        let ext = (ext_dim > 0).then(|| {
            let rows: Vec<Vec<f64>> = items.iter().map(|s| s.ext_at(tau)).collect();
            tape.constant(Array2::from_shape_fn((items.len(), ext_dim), |(i, j)| rows[i][j]))
        });
        model.field_expr(tape, u, ext).map_err(|e| {
            let message = e.to_string();
            failure = Some(e);
            IntegratorError::Field { t: tau, message }
        })
    });
    match out {
        Ok(v) => Ok(v),
        Err(_) if failure.is_some() => Err(failure.unwrap().into()),
        Err(IntegratorError::NonFinite { .. }) => Ok(tape.constant(Array2::from_elem((items.len(), d), f64::NAN))),
        Err(e) => Err(TrainError::Config(e.to_string())),
    }
}

/// Sum over the chunk of squared normalized residuals, divided by `denom`.
fn chunk_loss(tape: &mut Tape, model: &Model, items: &[&Sample], data: &OneStepData, substeps: usize, denom: f64) -> Result<Var, TrainError> {
    let pred = predict(tape, model, items, data.dt, substeps)?;
    let d = data.obs_dim;
    let target = tape.constant(Array2::from_shape_fn((items.len(), d), |(i, j)| items[i].obs1[j]));
    let inv = tape.row(&data.stds.iter().map(|s| 1.0 / s).collect::<Vec<_>>());
    let r = tape.sub(pred, target);
    let r = tape.mul(r, inv);
    let sq = tape.square(r);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / denom))
}

/// Normalized one-step loss of `batch` and its gradient over all parameters.
pub fn one_step_loss(model: &Model, data: &OneStepData, batch: &[usize], substeps: usize) -> Result<(f64, Vec<f64>), TrainError> {
    data.check(model)?;
    let denom = (batch.len() * data.obs_dim) as f64;
    let parts: Vec<Result<(f64, Vec<f64>), TrainError>> = batch
        .par_chunks(CHUNK)
        .map(|idx| {
            let items: Vec<&Sample> = idx.iter().map(|&k| &data.samples[k]).collect();
            let mut tape = Tape::new();
            let loss = chunk_loss(&mut tape, model, &items, data, substeps, denom)?;
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Ok((value, vec![0.0; model.params().len()]));
            }
            let adj = tape.backward(loss).map_err(ModelError::from)?;
            Ok((value, tape.param_gradient(&adj, model.params())))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params().len()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// Loss value only, over the given samples.
pub fn one_step_loss_value(model: &Model, data: &OneStepData, batch: &[usize], substeps: usize) -> Result<f64, TrainError> {
    data.check(model)?;
    let denom = (batch.len() * data.obs_dim) as f64;
    let parts: Vec<Result<f64, TrainError>> = batch
        .par_chunks(CHUNK)
        .map(|idx| {
            let items: Vec<&Sample> = idx.iter().map(|&k| &data.samples[k]).collect();
            let mut tape = Tape::new();
            let loss = chunk_loss(&mut tape, model, &items, data, substeps, denom)?;
            Ok(tape.scalar_value(loss))
        })
        .collect();
    parts.into_iter().sum()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub iteration: Vec<usize>,
    pub loss: Vec<f64>,
    pub lr: Vec<f64>,
    pub wall_ms: Vec<u128>,
}

impl TrainHistory {
    pub fn last_loss(&self) -> Option<f64> {
        self.loss.last().copied()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), std::io::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "loss", "lr", "wall_ms"])?;
        for k in 0..self.iteration.len() {
            w.write_record([
                self.iteration[k].to_string(),
                self.loss[k].to_string(),
                self.lr[k].to_string(),
                self.wall_ms[k].to_string(),
            ])?;
        }
        w.flush()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    /// Completed iterations.
    pub iteration: usize,
    pub model: Model,
    /// Full skew coupling matrix, for inspection.
    pub bivector: Option<Array2<f64>>,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub config_hash: Option<String>,
}

impl Checkpoint {
    pub fn new(model: Model, config: TrainConfig) -> Self {
        let n = model.params().len();
        Checkpoint { schema_version: CHECKPOINT_VERSION, iteration: 0, model, bivector: None, adam: AdamState::new(n), config, config_hash: None }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let err = |message: String| TrainError::Checkpoint { path: path.to_path_buf(), message };
        let mut out = self.clone();
        if let Model::Podinn(m) = &self.model {
            out.bivector = Some(m.bivector().matrix());
        }
        let json = serde_json::to_string_pretty(&out).map_err(|e| err(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json).map_err(|e| err(e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let err = |message: String| TrainError::Checkpoint { path: path.to_path_buf(), message };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if ck.schema_version != CHECKPOINT_VERSION {
            return Err(err(format!("schema version {} (expected {CHECKPOINT_VERSION})", ck.schema_version)));
        }
        if ck.adam.m.len() != ck.model.params().len() || ck.adam.v.len() != ck.model.params().len() {
            return Err(err("optimizer state does not match the parameters".into()));
        }
        Ok(ck)
    }
}

/// Mini-batch of `(trajectory, step)` pair indices for iteration `k`, drawn
/// uniformly with replacement from a stream keyed by the seed and `k`.
pub fn sample_batch(seed: u64, k: usize, n_samples: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    (0..batch).map(|_| rng.random_range(0..n_samples)).collect()
}

/// Where checkpoints go: `checkpoint_<iteration>.json` per interval, a
/// rolling `last_good.json` and `final.json`, all inside `dir`.
#[derive(Clone, Debug, Default)]
pub struct CheckpointSink {
    pub dir: Option<PathBuf>,
    pub config_hash: Option<String>,
}

impl CheckpointSink {
    pub fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

fn frozen_values(params: &ParamSet) -> Vec<(usize, f64)> {
    params.trainable().iter().enumerate().filter(|(_, t)| !**t).map(|(i, _)| (i, params.values()[i])).collect()
}

/// Trains a fresh model from iteration 0.
pub fn train(model: Model, data: &OneStepData, config: &TrainConfig, sink: &CheckpointSink) -> Result<(Model, TrainHistory), TrainError> {
    resume(Checkpoint::new(model, config.clone()), data, config, sink)
}

/// Continues training from `start` up to `config.iterations`.
pub fn resume(start: Checkpoint, data: &OneStepData, config: &TrainConfig, sink: &CheckpointSink) -> Result<(Model, TrainHistory), TrainError> {
    config.validate()?;
    data.check(&start.model)?;
    if start.iteration > config.iterations {
        return Err(TrainError::Config(format!(
            "checkpoint is at iteration {} beyond the configured {}",
            start.iteration, config.iterations
        )));
    }
    if let Some(dir) = &sink.dir {
        fs::create_dir_all(dir).map_err(|e| TrainError::Checkpoint { path: dir.clone(), message: e.to_string() })?;
    }
    let mut state = start;
    state.config = config.clone();
    state.config_hash = sink.config_hash.clone();
    let frozen = frozen_values(state.model.params());
    let mut last_good = None;
    let mut history = TrainHistory::default();
    let clock = Instant::now();
    let (mut acc, mut count) = (0.0, 0usize);

    while state.iteration < config.iterations {
        let k = state.iteration;
        let batch = sample_batch(config.seed, k, data.samples.len(), config.batch_size);
        let (loss, grad) = one_step_loss(&state.model, data, &batch, config.substeps)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { iteration: k, last_good });
        }
        let lr = cosine_lr(config.lr0, k, config.iterations);
        adam_step(state.model.params_mut(), &grad, &mut state.adam, lr, config);
        state.iteration += 1;
        acc += loss;
        count += 1;
        if count == config.log_interval || state.iteration == config.iterations {
            history.iteration.push(state.iteration);
            history.loss.push(acc / count as f64);
            history.lr.push(lr);
            history.wall_ms.push(clock.elapsed().as_millis());
            (acc, count) = (0.0, 0);
        }
        let due = config.checkpoint_interval > 0 && state.iteration.is_multiple_of(config.checkpoint_interval);
        if due || state.iteration == config.iterations {
            let params = state.model.params();
            if let Some(&(index, _)) = frozen.iter().find(|(i, v)| params.values()[*i].to_bits() != v.to_bits()) {
                return Err(TrainError::FrozenChanged { index });
            }
            if let (Some(path), Some(good)) = (sink.path(&format!("checkpoint_{}.json", state.iteration)), sink.path("last_good.json")) {
                state.save(&path)?;
                state.save(&good)?;
                last_good = Some(good);
            }
        }
    }
    if let Some(path) = sink.path("final.json") {
        state.save(&path)?;
    }
    Ok((state.model, history))
}
