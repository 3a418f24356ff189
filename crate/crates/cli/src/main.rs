//! `podinn`: generate datasets, train, evaluate and analyze models.
//!
//! Exit codes: 0 success, 2 usage, 3 data or schema, 4 numerical failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use podinn::components::ExternalSignal;
use podinn::evaluation::{
    aligned_layout, coupling_report, evaluate, kirchhoff_view, recorded_signals, robust_rollout, write_report, EvalError,
    DEFAULT_FACTOR,
};
use podinn::models::{ground_truth, learnable_podinn, neural_ode, Model, ModelError};
use podinn::systems::{generate, read_dataset, sample_inputs, write_dataset, Dataset, SystemError, SystemSpec};
use podinn::training::{resume, train, Checkpoint, CheckpointSink, OneStepData, TrainError};
use serde_json::json;

use config::{ExperimentConfig, ModelKind};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<SystemError> for CliError {
    fn from(e: SystemError) -> Self {
        match e {
            SystemError::UnknownSystem(_) | SystemError::Request(_) => CliError::Usage(e.to_string()),
            SystemError::Integration { .. } | SystemError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Integration(_) | ModelError::NonFinite(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::FrozenChanged { .. } => CliError::Numerical(e.to_string()),
            TrainError::Checkpoint { .. } | TrainError::ConstantDimension { .. } => CliError::Data(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Io { .. } | EvalError::ShapeMismatch { .. } | EvalError::Signals(..) => CliError::Data(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "podinn", version, about = "Poisson-Dirac neural network experiments")]
struct Cli {
    /// Experiment configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override: the data seed for `generate`, the single training seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a benchmark system and write a dataset directory.
    Generate {
        #[arg(long)]
        system: Option<String>,
        #[arg(long)]
        n_traj: Option<usize>,
        #[arg(long)]
        n_steps: Option<usize>,
        /// Use the test split sizes and seed from the configuration.
        #[arg(long)]
        test: bool,
    },
    /// Train a model on a dataset, once per configured seed.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Roll a checkpoint out on a dataset and report MSE and VPT.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Extract the coupling pattern of a PoDiNN checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Align resistive ports with this system's ground truth.
        #[arg(long)]
        system: Option<String>,
        #[arg(long, default_value_t = DEFAULT_FACTOR)]
        factor: f64,
    },
    /// Write truth and per-trial absolute error series as CSV.
    ExportPlots {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        checkpoint: Vec<PathBuf>,
        /// Only the first `max_traj` trajectories.
        #[arg(long)]
        max_traj: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    match cli.command {
        Command::Generate { system, n_traj, n_steps, test } => {
            if let Some(s) = system {
                cfg.system = s;
            }
            let (traj, steps, seed) = if test {
                (&mut cfg.data.test_traj, &mut cfg.data.test_steps, &mut cfg.data.test_seed)
            } else {
                (&mut cfg.data.n_traj, &mut cfg.data.n_steps, &mut cfg.data.seed)
            };
            *traj = n_traj.unwrap_or(*traj);
            *steps = n_steps.unwrap_or(*steps);
            *seed = cli.seed.unwrap_or(*seed);
            let (traj, steps, seed) = (*traj, *steps, *seed);
            cfg.validate()?;
            cmd_generate(&cfg, traj, steps, seed)
        }
        Command::Train { data, model, iterations, resume } => {
            if let Some(m) = model {
                cfg.model = m;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            cfg.validate()?;
            cmd_train(&cfg, &data, resume.as_deref())
        }
        Command::Eval { data, checkpoint, theta } => {
            if theta.is_some() {
                cfg.theta = theta;
            }
            cfg.validate()?;
            cmd_eval(&cfg, &data, &checkpoint)
        }
        Command::Analyze { checkpoint, system, factor } => {
            if !(factor > 1.0) {
                return Err(CliError::Usage(format!("factor must exceed 1, got {factor}")));
            }
            cmd_analyze(&cfg, &checkpoint, system.as_deref(), factor)
        }
        Command::ExportPlots { data, checkpoint, max_traj } => {
            cfg.validate()?;
            cmd_export_plots(&cfg, &data, &checkpoint, max_traj)
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_error(path, e))?;
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn cmd_generate(cfg: &ExperimentConfig, n_traj: usize, n_steps: usize, seed: u64) -> Result<(), CliError> {
    let spec = cfg.spec()?;
    let mut g = generate(&spec, n_traj, n_steps, seed, &cfg.integrator.dopri5())?;
    g.dataset.meta.config_hash = Some(cfg.hash());
    write_dataset(&cfg.out, &g.dataset)?;
    println!("wrote {} trajectories × {} steps of system {} to {}", n_traj, n_steps, spec.id.as_str(), cfg.out.display());
    Ok(())
}

/// Dataset plus the system it came from; errors if the configuration names
/// a different system.
fn load_data(cfg: &ExperimentConfig, dir: &Path) -> Result<(Dataset, SystemSpec), CliError> {
    let data = read_dataset(dir)?;
    let spec = SystemSpec::from_meta(&data.meta)?;
    let wanted = cfg.spec()?;
    if wanted.id != spec.id || wanted.obs_names != spec.obs_names {
        return Err(CliError::Data(format!(
            "dataset {} holds system `{}` but the configuration asks for `{}`",
            dir.display(),
            spec.id.as_str(),
            cfg.system
        )));
    }
    Ok((data, spec))
}

fn cmd_train(cfg: &ExperimentConfig, data_dir: &Path, resume_from: Option<&Path>) -> Result<(), CliError> {
    let (data, spec) = load_data(cfg, data_dir)?;
    let steps = OneStepData::from_dataset(&data)?;
    let hash = cfg.hash();
    for &seed in &cfg.seeds {
        let dir = cfg.out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let train_cfg = podinn::training::TrainConfig { seed, ..cfg.train.clone() };
        let sink = CheckpointSink { dir: Some(dir.clone()), config_hash: Some(hash.clone()) };
        let (model, history) = match resume_from {
            Some(path) => resume(Checkpoint::load(path)?, &steps, &train_cfg, &sink)?,
            None => {
                let opts = podinn::models::ModelOptions { seed, ..cfg.model_options.clone() };
                let model = match cfg.model {
                    ModelKind::Podinn => Model::Podinn(learnable_podinn(&spec, &opts)?),
                    ModelKind::NeuralOde => Model::NeuralOde(neural_ode(&spec, &opts)?),
                };
                train(model, &steps, &train_cfg, &sink)?
            }
        };
        let hist = dir.join("history.csv");
        history.write_csv(&hist).map_err(|e| io_error(&hist, e))?;
        let all: Vec<usize> = (0..steps.samples.len()).collect();
        let loss = podinn::training::one_step_loss_value(&model, &steps, &all, train_cfg.substeps)?;
        write_json(
            &dir.join("summary.json"),
            &json!({ "config_hash": hash, "seed": seed, "iterations": train_cfg.iterations, "final_loss": loss }),
        )?;
        println!("seed {seed}: final one-step loss {loss:.3e} ({})", dir.join("final.json").display());
    }
    Ok(())
}

/// True input signals, regenerated from the dataset seed when they
/// reproduce the recorded columns, otherwise interpolated from the record.
fn signals_for(spec: &SystemSpec, data: &Dataset) -> Result<Vec<Vec<ExternalSignal>>, CliError> {
    data.trajectories
        .iter()
        .enumerate()
        .map(|(k, tr)| {
            let inp = sample_inputs(spec, data.meta.seed, k, data.meta.n_traj);
            let matches = tr.times.iter().enumerate().step_by(tr.times.len().div_ceil(8).max(1)).all(|(row, &t)| {
                inp.signals.iter().enumerate().all(|(c, s)| s.value(t).is_ok_and(|v| (v - tr.ext[[row, c]]).abs() < 1e-12))
            });
            if matches {
                Ok(inp.signals)
            } else {
                Ok(recorded_signals(tr)?)
            }
        })
        .collect()
}

fn cmd_eval(cfg: &ExperimentConfig, data_dir: &Path, ckpt: &Path) -> Result<(), CliError> {
    let data = read_dataset(data_dir)?;
    let spec = SystemSpec::from_meta(&data.meta)?;
    let model = Checkpoint::load(ckpt)?.model;
    let theta = cfg.theta.unwrap_or(spec.theta);
    let signals = signals_for(&spec, &data)?;
    let mut report = evaluate(&model, &data, &signals, &cfg.integrator.dopri5(), theta)?;
    report.config_hash = Some(cfg.hash());
    write_report(&cfg.out, &report)?;
    println!("overall MSE {:.4e}, mean VPT {:.4} (θ = {theta:e})", report.overall_mse, report.mean_vpt);
    Ok(())
}

fn cmd_analyze(cfg: &ExperimentConfig, ckpt: &Path, system: Option<&str>, factor: f64) -> Result<(), CliError> {
    let Model::Podinn(model) = Checkpoint::load(ckpt)?.model else {
        return Err(CliError::Usage("coupling analysis needs a PoDiNN checkpoint".into()));
    };
    let layout = match system {
        Some(name) => {
            let reference = ground_truth(&SystemSpec::by_name(name)?)?;
            if reference.layout.storage != model.layout.storage {
                return Err(CliError::Usage(format!("checkpoint storage ports do not match system `{name}`")));
            }
            aligned_layout(&model, &reference)
        }
        None => model.layout.clone(),
    };
    let report = coupling_report(&model.bivector(), &layout, factor)?;
    let kirchhoff = kirchhoff_view(&report, &layout);
    fs::create_dir_all(&cfg.out).map_err(|e| io_error(&cfg.out, e))?;
    write_json(
        &cfg.out.join("coupling.json"),
        &json!({
            "config_hash": cfg.hash(),
            "report": report,
            "kirchhoff": kirchhoff.as_ref().ok(),
            "kirchhoff_note": kirchhoff.as_ref().err().map(|e| e.to_string()),
        }),
    )?;
    if let Some(w) = &report.warning {
        println!("warning: {w}");
    }
    for c in &report.detected {
        println!("{:>8} <- {:<8} {:+.4}", c.row, c.col, c.value);
    }
    println!("storage block rank {}", report.storage_rank);
    if let Ok(laws) = kirchhoff {
        for l in laws {
            println!("{l}");
        }
    }
    Ok(())
}

fn cmd_export_plots(cfg: &ExperimentConfig, data_dir: &Path, ckpts: &[PathBuf], max_traj: Option<usize>) -> Result<(), CliError> {
    let data = read_dataset(data_dir)?;
    let spec = SystemSpec::from_meta(&data.meta)?;
    let signals = signals_for(&spec, &data)?;
    let models = ckpts.iter().map(|p| Ok(Checkpoint::load(p)?.model)).collect::<Result<Vec<_>, CliError>>()?;
    fs::create_dir_all(&cfg.out).map_err(|e| io_error(&cfg.out, e))?;
    let n = max_traj.unwrap_or(data.trajectories.len()).min(data.trajectories.len());
    let names = &data.meta.obs_names;
    let write = |path: &Path, rows: &dyn Fn(&mut csv::Writer<fs::File>) -> Result<(), csv::Error>| -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
        rows(&mut w).map_err(|e| io_error(path, e))?;
        w.flush().map_err(|e| io_error(path, e))
    };
    for (k, tr) in data.trajectories.iter().take(n).enumerate() {
        let header: Vec<String> = ["step".to_string(), "t".into()].into_iter().chain(names.iter().cloned()).collect();
        write(&cfg.out.join(format!("traj_{k}_truth.csv")), &|w| {
            w.write_record(&header)?;
            for (s, row) in tr.obs.rows().into_iter().enumerate() {
                let vals = [s.to_string(), tr.times[s].to_string()].into_iter().chain(row.iter().map(|v| v.to_string()));
                w.write_record(vals)?;
            }
            Ok(())
        })?;
        for (trial, model) in models.iter().enumerate() {
            let (pred, _) = robust_rollout(model, &tr.obs.row(0).to_vec(), &tr.times, &signals[k], &cfg.integrator.dopri5())?;
            write(&cfg.out.join(format!("traj_{k}_error_trial{trial}.csv")), &|w| {
                w.write_record(&header)?;
                for s in 0..tr.times.len() {
                    let errs = (0..names.len()).map(|j| (pred[[s, j]] - tr.obs[[s, j]]).abs().to_string());
                    w.write_record([s.to_string(), tr.times[s].to_string()].into_iter().chain(errs))?;
                }
                Ok(())
            })?;
        }
    }
    write_json(
        &cfg.out.join("manifest.json"),
        &json!({
            "config_hash": cfg.hash(),
            "data": data_dir,
            "checkpoints": ckpts,
            "trajectories": n,
        }),
    )?;
    println!("wrote plot series for {n} trajectories and {} trials to {}", models.len(), cfg.out.display());
    Ok(())
}
