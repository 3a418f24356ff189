//! Trainable dynamics models: the port-based PoDiNN and a Neural ODE baseline.

mod builders;
mod neural_ode;
mod podinn;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamSet, Tape, Var};
use crate::components::{ComponentError, ExternalSignal};
use crate::geometry::GeometryError;
use crate::integrators::{dopri5_integrate, Dopri5Options, IntegratorError};
use crate::systems::Trajectory;

pub use builders::{ground_truth, learnable_podinn, neural_ode, ModelOptions};
pub use neural_ode::NeuralOdeModel;
pub use podinn::{power_balance, FieldParts, PodinnModel, PowerBalance};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Component(#[from] ComponentError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("inconsistent model: {0}")]
    Layout(String),
    #[error("non-finite {0} in field evaluation")]
    NonFinite(&'static str),
    #[error("rollout failed: {0}")]
    Integration(#[from] IntegratorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Podinn(PodinnModel),
    NeuralOde(NeuralOdeModel),
}

impl Model {
    pub fn params(&self) -> &ParamSet {
        match self {
            Model::Podinn(m) => &m.params,
            Model::NeuralOde(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::Podinn(m) => &mut m.params,
            Model::NeuralOde(m) => &mut m.params,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Model::Podinn(m) => m.layout.n_s(),
            Model::NeuralOde(m) => m.obs_dim,
        }
    }

    /// Width of the external input row (efforts, then auxiliary inputs).
    pub fn ext_dim(&self) -> usize {
        match self {
            Model::Podinn(m) => m.layout.n_i() + m.n_aux,
            Model::NeuralOde(m) => m.ext_dim,
        }
    }

    /// Observation rate for a batch `obs: (b, d)` with external row `ext: (b, e)`.
    pub fn field_expr(&self, tape: &mut Tape, obs: Var, ext: Option<Var>) -> Result<Var, ModelError> {
        match self {
            Model::Podinn(m) => m.field_expr(tape, obs, ext),
            Model::NeuralOde(m) => m.field_expr(tape, obs, ext),
        }
    }

    /// Observation rate for a single state.
    pub fn field(&self, obs: &[f64], ext: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        self.field_on(&mut tape, obs, ext)
    }

    fn field_on(&self, tape: &mut Tape, obs: &[f64], ext: &[f64]) -> Result<Vec<f64>, ModelError> {
        tape.clear();
        let o = tape.row(obs);
        let e = (!ext.is_empty()).then(|| tape.row(ext));
        let r = self.field_expr(tape, o, e)?;
        Ok(tape.value(r).iter().copied().collect())
    }
}

/// Integrates the model from `obs0` with dopri5, evaluating the external
/// signals continuously in time, and samples it at `times`.
pub fn rollout(
    model: &Model,
    obs0: &[f64],
    times: &[f64],
    signals: &[ExternalSignal],
    opts: &Dopri5Options,
) -> Result<Trajectory, ModelError> {
    if obs0.len() != model.obs_dim() || signals.len() != model.ext_dim() {
        return Err(ModelError::Layout(format!(
            "rollout expects {} observations and {} external signals, got {} and {}",
            model.obs_dim(),
            model.ext_dim(),
            obs0.len(),
            signals.len()
        )));
    }
    let ext_at = |t: f64| -> Result<Vec<f64>, IntegratorError> {
        signals
            .iter()
            .map(|s| s.value(t).map_err(|e| IntegratorError::Field { t, message: e.to_string() }))
            .collect()
    };
    let mut tape = Tape::new();
    let field = |t: f64, x: &[f64], out: &mut [f64]| -> Result<(), IntegratorError> {
        let e = ext_at(t)?;
        let r = model.field_on(&mut tape, x, &e).map_err(|err| IntegratorError::Field { t, message: err.to_string() })?;
        out.copy_from_slice(&r);
        Ok(())
    };
    let (states, _) = dopri5_integrate(field, obs0, times, opts)?;
    let mut obs = Array2::zeros((times.len(), obs0.len()));
    let mut ext = Array2::zeros((times.len(), signals.len()));
    for (k, s) in states.iter().enumerate() {
        obs.row_mut(k).assign(&ArrayView1::from(s.as_slice()));
        ext.row_mut(k).assign(&ArrayView1::from(ext_at(times[k])?.as_slice()));
    }
    Ok(Trajectory { times: times.to_vec(), obs, ext })
}
