//! Fully connected networks whose parameters live in a [`ParamSet`].

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{BlockId, ParamSet};
use super::tape::{Tape, Var};
use super::AutodiffError;

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
    /// `z²/2`; mostly useful for building exact quadratic forms in tests.
    HalfSquare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: BlockId,
    pub bias: BlockId,
    pub inputs: usize,
    pub outputs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    /// Registers weights for layer widths `sizes` (input first, output last),
    /// drawn uniformly from `(-1/√fan_in, 1/√fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "a network needs at least input and output widths");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
                let bias = Array2::from_shape_fn((1, fan_out), |_| rng.random_range(-bound..bound));
                Dense {
                    weight: params.add_block(format!("{name}.w{l}"), weight),
                    bias: params.add_block(format!("{name}.b{l}"), bias),
                    inputs: fan_in,
                    outputs: fan_out,
                }
            })
            .collect();
        Mlp { layers, activation }
    }

    /// Builds a network from explicit weights and biases.
    pub fn from_weights(
        params: &mut ParamSet,
        name: &str,
        weights: Vec<(Array2<f64>, Array2<f64>)>,
        activation: Activation,
    ) -> Self {
        let layers = weights
            .into_iter()
            .enumerate()
            .map(|(l, (w, b))| {
                assert_eq!(b.dim(), (1, w.nrows()), "bias must be a row of width fan_out");
                let (outputs, inputs) = w.dim();
                Dense {
                    weight: params.add_block(format!("{name}.w{l}"), w),
                    bias: params.add_block(format!("{name}.b{l}"), b),
                    inputs,
                    outputs,
                }
            })
            .collect();
        Mlp { layers, activation }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    fn activate(&self, tape: &mut Tape, z: Var) -> Var {
        match self.activation {
            Activation::Tanh => tape.tanh(z),
            Activation::Identity => z,
            Activation::HalfSquare => {
                let sq = tape.square(z);
                tape.scale(sq, 0.5)
            }
        }
    }

    /// σ'(z) given the pre-activation `z` and activation `a`.
    fn activation_slope(&self, tape: &mut Tape, z: Var, a: Var) -> Option<Var> {
        match self.activation {
            Activation::Tanh => {
                let sq = tape.square(a);
                Some(tape.affine(sq, -1.0, 1.0))
            }
            Activation::Identity => None,
            Activation::HalfSquare => Some(z),
        }
    }

    fn hidden(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> (Vec<(Var, Var)>, Var) {
        let mut acts = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x;
        for layer in &self.layers[..self.layers.len() - 1] {
            let w = tape.param(params, layer.weight);
            let b = tape.param(params, layer.bias);
            let lin = tape.matmul_t(h, w);
            let z = tape.add(lin, b);
            let a = self.activate(tape, z);
            acts.push((z, a));
            h = a;
        }
        (acts, h)
    }

    fn output(&self, tape: &mut Tape, params: &ParamSet, h: Var) -> Var {
        let last = self.layers.last().unwrap();
        let w = tape.param(params, last.weight);
        let b = tape.param(params, last.bias);
        let lin = tape.matmul_t(h, w);
        tape.add(lin, b)
    }

    /// Forward pass on a batch `x: (batch, inputs)`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Var {
        assert_eq!(tape.shape(x).1, self.inputs(), "network input width");
        let (_, h) = self.hidden(tape, params, x);
        self.output(tape, params, h)
    }

    /// Value and input-gradient of a scalar-output network, both recorded on
    /// the tape as first-order expressions: the gradient is the layer-wise
    /// product `Wₗᵀ` chained with activation slopes, so a later backward pass
    /// yields parameter-gradients of anything built from it.
    pub fn value_and_input_gradient(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
    ) -> Result<(Var, Var), AutodiffError> {
        if self.outputs() != 1 {
            return Err(AutodiffError::NonScalarNetwork(self.outputs()));
        }
        assert_eq!(tape.shape(x).1, self.inputs(), "network input width");
        let (acts, h) = self.hidden(tape, params, x);
        let value = self.output(tape, params, h);

        let last = self.layers.last().unwrap();
        // row vector (1, hidden): d out / d a_L
        let mut g = tape.param(params, last.weight);
        for (layer, &(z, a)) in self.layers[..self.layers.len() - 1].iter().zip(&acts).rev() {
            if let Some(slope) = self.activation_slope(tape, z, a) {
                g = tape.mul(slope, g);
            }
            let w = tape.param(params, layer.weight);
            g = tape.matmul(g, w);
        }
        // With no hidden layers g is (1, inputs); broadcast it over the batch.
        let batch = tape.shape(x).0;
        if tape.shape(g).0 != batch {
            let ones = tape.constant(Array2::ones((batch, 1)));
            g = tape.mul(ones, g);
        }
        Ok((value, g))
    }

    /// Input-gradient expression only.
    pub fn input_gradient(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var, AutodiffError> {
        self.value_and_input_gradient(tape, params, x).map(|(_, g)| g)
    }
}
