//! Rollout metrics (overall MSE, valid prediction time), coupling-pattern
//! extraction and degeneracy reporting.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::components::{ExternalSignal, Interpolation, SampledSeries};
use crate::geometry::{numerical_rank, Bivector, EntryStatus, PortClass, PortLayout, Quantity};
use crate::integrators::Dopri5Options;
use crate::models::{rollout, Model, ModelError, PodinnModel};
use crate::systems::{Dataset, Trajectory};

pub const DEFAULT_FACTOR: f64 = 1000.0;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction has shape {pred:?} but the reference has {truth:?}")]
    ShapeMismatch { pred: (usize, usize), truth: (usize, usize) },
    #[error("empty error series")]
    Empty,
    #[error("threshold must be positive, got {0}")]
    Theta(f64),
    #[error("{0} external signal sets for {1} trajectories")]
    Signals(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Unsupported(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Per-step MSE over dimensions for steps `1..` (the initial row is the
/// given condition and is skipped), and its mean.
pub fn overall_mse(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<(f64, Vec<f64>), EvalError> {
    if pred.dim() != truth.dim() {
        return Err(EvalError::ShapeMismatch { pred: pred.dim(), truth: truth.dim() });
    }
    if pred.nrows() < 2 || pred.ncols() == 0 {
        return Err(EvalError::Empty);
    }
    let d = pred.ncols() as f64;
    let series: Vec<f64> = pred
        .rows()
        .into_iter()
        .zip(truth.rows())
        .skip(1)
        .map(|(p, t)| {
            let sq: f64 = p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if sq.is_nan() { f64::INFINITY } else { sq / d }
        })
        .collect();
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    Ok((mean, series))
}

/// Fraction of steps before the MSE first reaches `theta`.
pub fn vpt(series: &[f64], theta: f64) -> Result<f64, EvalError> {
    if series.is_empty() {
        return Err(EvalError::Empty);
    }
    if !(theta > 0.0) {
        return Err(EvalError::Theta(theta));
    }
    let valid = series.iter().position(|&m| !(m < theta)).unwrap_or(series.len());
    Ok(valid as f64 / series.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEval {
    pub index: usize,
    pub mse: Vec<f64>,
    pub overall_mse: f64,
    pub vpt: f64,
    /// Step at which the rollout failed, if it did.
    pub failed_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub theta: f64,
    pub trajectories: Vec<TrajectoryEval>,
    pub overall_mse: f64,
    pub mean_vpt: f64,
    pub config_hash: Option<String>,
}

/// Cubic interpolants of the recorded external columns.
pub fn recorded_signals(traj: &Trajectory) -> Result<Vec<ExternalSignal>, EvalError> {
    (0..traj.ext.ncols())
        .map(|c| {
            let series = SampledSeries::new(traj.times.clone(), traj.ext.column(c).to_vec(), Interpolation::Cubic)
                .map_err(ModelError::from)?;
            Ok(ExternalSignal::Sampled { series })
        })
        .collect()
}

/// Rollout that survives a blow-up: on failure it restarts interval by
/// interval from the last good sample and marks everything after the first
/// failing interval as non-finite.
pub fn robust_rollout(
    model: &Model,
    obs0: &[f64],
    times: &[f64],
    signals: &[ExternalSignal],
    opts: &Dopri5Options,
) -> Result<(Array2<f64>, Option<usize>), EvalError> {
    match rollout(model, obs0, times, signals, opts) {
        Ok(tr) => Ok((tr.obs, None)),
        Err(ModelError::Integration(_)) => {
            let mut obs = Array2::from_elem((times.len(), obs0.len()), f64::NAN);
            obs.row_mut(0).assign(&ndarray::ArrayView1::from(obs0));
            let mut x = obs0.to_vec();
            for k in 1..times.len() {
                match rollout(model, &x, &times[k - 1..=k], signals, opts) {
                    Ok(seg) => {
                        x = seg.obs.row(1).to_vec();
                        obs.row_mut(k).assign(&seg.obs.row(1));
                    }
                    Err(ModelError::Integration(_)) => return Ok((obs, Some(k))),
                    Err(e) => return Err(e.into()),
                }
            }
            Ok((obs, None))
        }
        Err(e) => Err(e.into()),
    }
}

/// Rolls the model out from every trajectory's first row and scores it.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    signals: &[Vec<ExternalSignal>],
    opts: &Dopri5Options,
    theta: f64,
) -> Result<EvalReport, EvalError> {
    if signals.len() != data.trajectories.len() {
        return Err(EvalError::Signals(signals.len(), data.trajectories.len()));
    }
    if !(theta > 0.0) {
        return Err(EvalError::Theta(theta));
    }
    let per: Vec<Result<TrajectoryEval, EvalError>> = data
        .trajectories
        .par_iter()
        .zip(signals.par_iter())
        .enumerate()
        .map(|(index, (tr, sig))| {
            let obs0 = tr.obs.row(0).to_vec();
            let (pred, failed_at) = robust_rollout(model, &obs0, &tr.times, sig, opts)?;
            let (overall, mse) = overall_mse(pred.view(), tr.obs.view())?;
            let v = vpt(&mse, theta)?;
            Ok(TrajectoryEval { index, mse, overall_mse: overall, vpt: v, failed_at })
        })
        .collect();
    let trajectories = per.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = trajectories.len().max(1) as f64;
    Ok(EvalReport {
        theta,
        overall_mse: trajectories.iter().map(|t| t.overall_mse).sum::<f64>() / n,
        mean_vpt: trajectories.iter().map(|t| t.vpt).sum::<f64>() / n,
        trajectories,
        config_hash: None,
    })
}

/// Writes `report.json` and one `mse_<k>.csv` (step, mse) per trajectory.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let io = |path: &Path, e: &dyn std::fmt::Display| EvalError::Io { path: path.to_path_buf(), message: e.to_string() };
    fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(report).map_err(|e| io(&json, &e))?).map_err(|e| io(&json, &e))?;
    for t in &report.trajectories {
        let path = dir.join(format!("mse_{}.csv", t.index));
        let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, &e))?;
        w.write_record(["step", "mse"]).map_err(|e| io(&path, &e))?;
        for (k, m) in t.mse.iter().enumerate() {
            w.write_record([(k + 1).to_string(), m.to_string()]).map_err(|e| io(&path, &e))?;
        }
        w.flush().map_err(|e| io(&path, &e))?;
    }
    Ok(())
}

/// One bivector entry `M[row][col]`: flow `row` receives `value·e_col`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub row: String,
    pub col: String,
    /// Divided by the largest magnitude, after the resistive sign convention.
    pub value: f64,
    pub raw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub factor: f64,
    pub detected: Vec<Coupling>,
    pub suppressed: Vec<Coupling>,
    pub note: String,
    pub warning: Option<String>,
    /// Resistive ports whose couplings were negated by the sign convention.
    pub flipped: Vec<String>,
    /// Rank of the storage block with suppressed entries zeroed.
    pub storage_rank: usize,
    pub storage_singular_values: Vec<f64>,
    /// Kernel of the storage block, one vector over the storage ports per row.
    pub constraint_basis: Vec<Vec<f64>>,
}

impl CouplingReport {
    /// Detected entries as `(row, col, sign)`, sorted.
    pub fn pattern(&self) -> Vec<(String, String, i8)> {
        let mut p: Vec<_> =
            self.detected.iter().map(|c| (c.row.clone(), c.col.clone(), if c.value > 0.0 { 1 } else { -1 })).collect();
        p.sort();
        p
    }
}

const NOTE: &str = "values are divided by the largest detected magnitude because the overall scale is not identifiable; \
each resistive port is oriented so its largest coupling is positive";

/// Splits the learnable entries (all non-fixed-zero entries when none is
/// learnable) into detected and suppressed by the factor rule.
pub fn coupling_report(b: &Bivector, layout: &PortLayout, factor: f64) -> Result<CouplingReport, EvalError> {
    let n = b.dim();
    if n != layout.dim() {
        return Err(EvalError::Unsupported(format!("bivector has {n} ports, layout has {}", layout.dim())));
    }
    let m = b.matrix();
    let any_learnable = b.entries().any(|e| e.status == EntryStatus::Learnable);
    let considered: Vec<(usize, usize)> = b
        .entries()
        .filter(|e| if any_learnable { e.status == EntryStatus::Learnable } else { true })
        .map(|e| (e.row, e.col))
        .collect();

    // orientation of each resistive port
    let mut sign = vec![1.0; n];
    let mut flipped = Vec::new();
    for r in layout.r_range() {
        let best = considered
            .iter()
            .filter(|(i, j)| *i == r || *j == r)
            .map(|&(i, j)| if i == r { m[[r, j]] } else { m[[r, i]] })
            .max_by(|a, b| a.abs().total_cmp(&b.abs()));
        if best.is_some_and(|v| v < 0.0) {
            sign[r] = -1.0;
            flipped.push(layout.name(r).to_string());
        }
    }
    let oriented = |i: usize, j: usize| m[[i, j]] * sign[i] * sign[j];
    let largest = considered.iter().map(|&(i, j)| oriented(i, j).abs()).fold(0.0, f64::max);

    let mut report = CouplingReport {
        factor,
        detected: vec![],
        suppressed: vec![],
        note: NOTE.into(),
        warning: None,
        flipped,
        storage_rank: 0,
        storage_singular_values: vec![],
        constraint_basis: vec![],
    };
    let s = layout.s_range();
    let mut ss = Array2::<f64>::zeros((s.len(), s.len()));
    if largest == 0.0 {
        report.warning = Some("all considered bivector entries are zero; nothing to detect".into());
    } else {
        for &(i, j) in &considered {
            let raw = oriented(i, j);
            let c = Coupling { row: layout.name(i).into(), col: layout.name(j).into(), value: raw / largest, raw };
            if raw.abs() > largest / factor {
                if s.contains(&i) && s.contains(&j) {
                    ss[[i, j]] = c.value;
                    ss[[j, i]] = -c.value;
                }
                report.detected.push(c);
            } else {
                report.suppressed.push(c);
            }
        }
    }
    // fixed storage couplings stay part of the structure
    if any_learnable {
        for e in b.entries().filter(|e| e.status == EntryStatus::Fixed && s.contains(&e.row) && s.contains(&e.col)) {
            let v = if largest > 0.0 { e.value / largest } else { e.value };
            ss[[e.row, e.col]] = v;
            ss[[e.col, e.row]] = -v;
        }
    }
    let deg = numerical_rank(ss.view());
    report.storage_rank = deg.rank;
    report.storage_singular_values = deg.singular_values;
    report.constraint_basis = deg.nullspace;
    Ok(report)
}

/// Power absorbed by resistive port `k` when its dominant storage effort
/// sweeps `grid`; invariant to the port's orientation and scale.
fn power_curve(model: &PodinnModel, k: usize, grid: &[f64]) -> Vec<f64> {
    let m = model.bivector().matrix();
    let r = model.layout.r_range().start + k;
    let c = model.layout.s_range().map(|j| m[[r, j]]).fold(0.0, |a: f64, v| if v.abs() > a.abs() { v } else { a });
    let mut tape = Tape::new();
    let flows: Vec<f64> = grid.iter().map(|x| c * x).collect();
    let f = tape.constant(Array2::from_shape_vec((grid.len(), 1), flows.clone()).unwrap());
    let e = model.resistors[k].port_effort(&mut tape, &model.params, f);
    tape.value(e).iter().zip(&flows).map(|(e, f)| e * f).collect()
}

/// Assigns each learned resistive port to a distinct reference port by
/// minimum total squared distance between power curves. Entry `k` is the
/// reference index for learned port `k`, or `None` when there are more
/// learned ports than reference ones.
pub fn match_resistive_ports(learned: &PodinnModel, reference: &PodinnModel) -> Vec<Option<usize>> {
    let grid: Vec<f64> = (0..41).map(|k| -2.0 + 0.1 * k as f64).collect();
    let (nl, nr) = (learned.layout.n_r(), reference.layout.n_r());
    let lc: Vec<Vec<f64>> = (0..nl).map(|k| power_curve(learned, k, &grid)).collect();
    let rc: Vec<Vec<f64>> = (0..nr).map(|k| power_curve(reference, k, &grid)).collect();
    let cost = |a: usize, b: usize| lc[a].iter().zip(&rc[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let none_cost = |a: usize| lc[a].iter().map(|x| x * x).sum::<f64>();

    // exhaustive search; resistive port counts are small
    #[allow(clippy::too_many_arguments)]
    fn search(
        k: usize,
        nl: usize,
        nr: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        acc: f64,
        best: &mut (f64, Vec<Option<usize>>),
        cost: &dyn Fn(usize, usize) -> f64,
        none_cost: &dyn Fn(usize) -> f64,
    ) {
        if acc >= best.0 {
            return;
        }
        if k == nl {
            *best = (acc, cur.clone());
            return;
        }
        let free = used.iter().filter(|u| !**u).count();
        for b in 0..nr {
            if !used[b] {
                used[b] = true;
                cur.push(Some(b));
                search(k + 1, nl, nr, used, cur, acc + cost(k, b), best, cost, none_cost);
                cur.pop();
                used[b] = false;
            }
        }
        // leave unmatched only when the remaining learned ports outnumber the free reference ports
        if nl - k > free {
            cur.push(None);
            search(k + 1, nl, nr, used, cur, acc + none_cost(k), best, cost, none_cost);
            cur.pop();
        }
    }
    let mut best = (f64::INFINITY, vec![None; nl]);
    search(0, nl, nr, &mut vec![false; nr], &mut Vec::new(), 0.0, &mut best, &cost, &none_cost);
    best.1
}

/// Renames learned resistive ports after their matched reference ports so
/// coupling reports of both models can be compared by name.
pub fn aligned_layout(learned: &PodinnModel, reference: &PodinnModel) -> PortLayout {
    let mut layout = learned.layout.clone();
    for (k, m) in match_resistive_ports(learned, reference).into_iter().enumerate() {
        layout.resistive[k].name = match m {
            Some(j) => reference.layout.resistive[j].name.clone(),
            None => format!("{}*", learned.layout.resistive[k].name),
        };
    }
    layout
}

fn symbol(q: Quantity, name: &str) -> Result<String, EvalError> {
    match q {
        Quantity::Current => Ok(format!("I_{name}")),
        Quantity::Voltage => Ok(format!("V_{name}")),
        other => Err(EvalError::Unsupported(format!("port `{name}` carries {other:?}; not an electrical layout"))),
    }
}

/// Current and voltage laws read off the detected couplings: one equation
/// per storage port, `flow = Σ coefficient·effort`.
pub fn kirchhoff_view(report: &CouplingReport, layout: &PortLayout) -> Result<Vec<String>, EvalError> {
    for i in 0..layout.dim() {
        symbol(layout.flow_kind(i), layout.name(i))?;
    }
    let index = |name: &str| layout.index_of(name).map_err(|e| EvalError::Unsupported(e.to_string()));
    let mut laws = Vec::new();
    for i in layout.s_range() {
        let mut terms = Vec::new();
        for c in &report.detected {
            let (r, col) = (index(&c.row)?, index(&c.col)?);
            let (other, coef) = if r == i {
                (col, c.value)
            } else if col == i {
                (r, -c.value)
            } else {
                continue;
            };
            terms.push((other, coef));
        }
        terms.sort_by_key(|t| t.0);
        let lhs = symbol(layout.flow_kind(i), layout.name(i))?;
        let mut rhs = String::new();
        for (k, (j, coef)) in terms.iter().enumerate() {
            let eff = symbol(layout.effort_kind(*j), layout.name(*j))?;
            let sign = if *coef < 0.0 { "-" } else if k > 0 { "+" } else { "" };
            let mag = coef.abs();
            let body = if (mag - 1.0).abs() < 5e-3 { eff } else { format!("{mag:.3} {eff}") };
            rhs.push_str(&if k == 0 { format!("{sign}{body}") } else { format!(" {sign} {body}") });
        }
        if rhs.is_empty() {
            rhs.push('0');
        }
        laws.push(format!("{lhs} = {rhs}"));
    }
    Ok(laws)
}

/// The storage block of a model's bivector.
pub fn storage_block(model: &PodinnModel) -> Array2<f64> {
    let s = model.layout.s_range();
    model.bivector().matrix().slice(s![s.clone(), s]).to_owned()
}

/// True if `layout` contains resistive ports.
pub fn has_resistive(layout: &PortLayout) -> bool {
    (0..layout.dim()).any(|i| layout.class(i) == PortClass::Resistive)
}
