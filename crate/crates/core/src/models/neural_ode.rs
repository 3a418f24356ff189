use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{Mlp, ParamSet, Tape, Var};

/// A network mapping the observation and the external row directly to the
/// observation rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralOdeModel {
    pub params: ParamSet,
    pub net: Mlp,
    pub obs_dim: usize,
    pub ext_dim: usize,
}

impl NeuralOdeModel {
    pub fn new(params: ParamSet, net: Mlp, obs_dim: usize, ext_dim: usize) -> Result<Self, ModelError> {
        if net.inputs() != obs_dim + ext_dim || net.outputs() != obs_dim {
            return Err(ModelError::Layout(format!(
                "network is {}→{}, expected {}→{obs_dim}",
                net.inputs(),
                net.outputs(),
                obs_dim + ext_dim
            )));
        }
        Ok(NeuralOdeModel { params, net, obs_dim, ext_dim })
    }

    pub fn field_expr(&self, tape: &mut Tape, obs: Var, ext: Option<Var>) -> Result<Var, ModelError> {
        let width = tape.shape(obs).1;
        let ext_width = ext.map_or(0, |e| tape.shape(e).1);
        if width != self.obs_dim || ext_width != self.ext_dim {
            return Err(ModelError::Layout(format!(
                "expected {}+{} input columns, got {width}+{ext_width}",
                self.obs_dim, self.ext_dim
            )));
        }
        let x = match ext {
            Some(e) => tape.hcat(&[obs, e]),
            None => obs,
        };
        Ok(self.net.forward(tape, &self.params, x))
    }
}
