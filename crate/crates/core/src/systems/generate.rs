use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::io::{Dataset, DatasetMeta, Trajectory, SCHEMA_VERSION};
use super::{external_signals, system_field, Anchor, Boundary, CoordinateMode, InputDist, Physics, SystemError, SystemSpec};
use crate::components::{ExternalSignal, SineTerm};
use crate::integrators::{dopri5_integrate, Dopri5Options, IntegratorError};

/// Everything needed to reproduce one trajectory exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryInputs {
    pub x0: Vec<f64>,
    pub signals: Vec<ExternalSignal>,
}

#[derive(Clone, Debug)]
pub struct GeneratedData {
    pub dataset: Dataset,
    pub inputs: Vec<TrajectoryInputs>,
}

fn trajectory_rng(seed: u64, traj: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(traj as u64);
    rng
}

fn uniform(rng: &mut ChaCha20Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws the inputs and initial state of trajectory `traj`. The draws depend
/// only on `(seed, traj)`.
/// Initial state and input signals of trajectory `traj` out of `n_traj`,
/// reproducible from the seed alone.
pub fn sample_inputs(spec: &SystemSpec, seed: u64, traj: usize, n_traj: usize) -> TrajectoryInputs {
    let mut rng = trajectory_rng(seed, traj);
    let terms = match &spec.input {
        InputDist::Sines(d) | InputDist::BoundarySines(d) => (0..d.terms)
            .map(|_| SineTerm {
                amplitude: uniform(&mut rng, d.amplitude),
                omega: uniform(&mut rng, d.omega),
                phase: uniform(&mut rng, d.phase),
            })
            .collect(),
        _ => vec![],
    };
    let constant = match spec.input {
        InputDist::EvenlySpaced { lo, hi } if n_traj > 1 => lo + (hi - lo) * traj as f64 / (n_traj - 1) as f64,
        InputDist::EvenlySpaced { lo, .. } => lo,
        _ => 0.0,
    };
    let signals = external_signals(spec, terms, constant);
    let draws: Vec<f64> = spec.init.iter().map(|&r| uniform(&mut rng, r)).collect();
    let x0 = initial_state(spec, &draws, &signals);
    TrajectoryInputs { x0, signals }
}

/// Maps sampled quantities to an observation-coordinate state.
fn initial_state(spec: &SystemSpec, draws: &[f64], signals: &[ExternalSignal]) -> Vec<f64> {
    match &spec.physics {
        Physics::Chain(p) if spec.mode == CoordinateMode::Absolute => {
            let n = p.masses.len();
            let mut pos = match p.boundary {
                Boundary::MovingWall => signals[1].value(0.0).unwrap_or(0.0),
                Boundary::ForceOnLast => 0.0,
            };
            let mut x = Vec::with_capacity(2 * n);
            for dq in &draws[..n] {
                pos += dq;
                x.push(pos);
            }
            x.extend_from_slice(&draws[n..]);
            x
        }
        Physics::Planar(p) => {
            let nm = p.masses.len();
            let offset = &draws[..2 * nm];
            let mut x = Vec::with_capacity(2 * p.springs.len() + 2 * nm);
            for s in &p.springs {
                let (sx, sy) = match s.start {
                    Anchor::Wall(_) => (0.0, 0.0),
                    Anchor::Mass(m) => (offset[2 * m], offset[2 * m + 1]),
                };
                x.push(offset[2 * s.end] - sx);
                x.push(offset[2 * s.end + 1] - sy);
            }
            x.extend_from_slice(&draws[2 * nm..]);
            x
        }
        _ => draws.to_vec(),
    }
}

fn signal_values(signals: &[ExternalSignal], t: f64, out: &mut [f64]) -> Result<(), IntegratorError> {
    for (o, s) in out.iter_mut().zip(signals) {
        *o = s.value(t).map_err(|e| IntegratorError::Field { t, message: e.to_string() })?;
    }
    Ok(())
}

/// Integrates the true dynamics from `x0` and samples `n_steps + 1` rows.
pub fn simulate(
    spec: &SystemSpec,
    x0: &[f64],
    signals: &[ExternalSignal],
    n_steps: usize,
    opts: &Dopri5Options,
) -> Result<Trajectory, IntegratorError> {
    let times: Vec<f64> = (0..=n_steps).map(|k| k as f64 * spec.dt).collect();
    let mut ext_buf = vec![0.0; spec.ext_dim()];
    let field = |t: f64, x: &[f64], out: &mut [f64]| {
        signal_values(signals, t, &mut ext_buf)?;
        system_field(spec, x, &ext_buf, out);
        Ok(())
    };
    let (states, _) = dopri5_integrate(field, x0, &times, opts)?;
    let d = spec.obs_dim();
    let mut obs = Array2::zeros((times.len(), d));
    let mut ext = Array2::zeros((times.len(), spec.ext_dim()));
    for (k, (s, &t)) in states.iter().zip(&times).enumerate() {
        obs.row_mut(k).assign(&ndarray::ArrayView1::from(s.as_slice()));
        let mut row = vec![0.0; spec.ext_dim()];
        signal_values(signals, t, &mut row)?;
        ext.row_mut(k).assign(&ndarray::ArrayView1::from(row.as_slice()));
    }
    Ok(Trajectory { times, obs, ext })
}

/// Generates `n_traj` trajectories of `n_steps` steps. Trajectories are
/// integrated in parallel; the result does not depend on the thread count.
pub fn generate(
    spec: &SystemSpec,
    n_traj: usize,
    n_steps: usize,
    seed: u64,
    opts: &Dopri5Options,
) -> Result<GeneratedData, SystemError> {
    if n_traj == 0 || n_steps == 0 {
        return Err(SystemError::Request("n_traj and n_steps must be positive".into()));
    }
    let results: Vec<Result<(Trajectory, TrajectoryInputs), SystemError>> = (0..n_traj)
        .into_par_iter()
        .map(|traj| {
            let inputs = sample_inputs(spec, seed, traj, n_traj);
            let tr = simulate(spec, &inputs.x0, &inputs.signals, n_steps, opts)
                .map_err(|source| SystemError::Integration { traj, source })?;
            if let Some(step) = tr.obs.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
                return Err(SystemError::NonFinite { traj, step });
            }
            Ok((tr, inputs))
        })
        .collect();
    let mut trajectories = Vec::with_capacity(n_traj);
    let mut inputs = Vec::with_capacity(n_traj);
    for r in results {
        let (t, i) = r?;
        trajectories.push(t);
        inputs.push(i);
    }
    let meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        system: spec.id,
        dt: spec.dt,
        n_traj,
        n_steps,
        seed,
        theta: spec.theta,
        obs_names: spec.obs_names.clone(),
        ext_names: spec.ext_names.clone(),
        config_hash: None,
    };
    Ok(GeneratedData { dataset: Dataset { meta, trajectories }, inputs })
}
