//! Energy terms, resistive characteristics, external signals and observation
//! scalings. Every component can be evaluated on plain numbers or recorded on
//! a [`Tape`] over a batch.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, BlockId, Mlp, ParamSet, Tape, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ComponentError {
    #[error("state has {got} coordinates but the term reads coordinate {needed}")]
    MissingCoordinate { needed: usize, got: usize },
    #[error("observation scale {index} is {value}, expected a positive finite number")]
    NonPositiveScale { index: usize, value: f64 },
    #[error("time {t} is outside the sampled range [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("sample times must be strictly increasing (violated at index {0})")]
    NonIncreasingTimes(usize),
    #[error("sampled series needs matching times and values with at least two samples")]
    MalformedSeries,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Closed-form potentials used by ground-truth models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "potential", rename_all = "snake_case")]
pub enum AnalyticPotential {
    /// `k1·s²/2 + k3·s⁴/4`, the energy of a spring with force `k1·s + k3·s³`.
    Polynomial { coord: usize, k1: f64, k3: f64 },
    /// `−mgl·cos s`.
    Pendulum { coord: usize, mgl: f64 },
    /// Planar spring observed through the displacement `d` of its end-to-end
    /// vector from `rest`; elongation is `‖rest + d‖ − length`.
    PlanarSpring { coords: [usize; 2], rest: [f64; 2], length: f64, k1: f64, k3: f64 },
    /// Polynomial springs in series over absolute positions: spring `i` is
    /// stretched by `x_i − x_{i−1}`, and the first one by `x_0 − wall`, where
    /// the wall is an auxiliary input or the origin.
    Chain { coords: Vec<usize>, wall_aux: Option<usize>, springs: Vec<[f64; 2]> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnergyTerm {
    /// `s²/(2θ)` with `θ = exp(log_theta)`; `θ` is a mass, capacitance,
    /// inductance or tank compliance.
    Quadratic { coord: usize, log_theta: BlockId },
    /// Scalar network over the listed storage coordinates, followed by the
    /// listed auxiliary inputs (e.g. a boundary position).
    Neural { coords: Vec<usize>, aux: Vec<usize>, net: Mlp },
    Analytic(AnalyticPotential),
}

fn check_width(tape: &Tape, u: Var, coords: &[usize]) -> Result<(), ComponentError> {
    let got = tape.shape(u).1;
    match coords.iter().find(|&&c| c >= got) {
        Some(&needed) => Err(ComponentError::MissingCoordinate { needed, got }),
        None => Ok(()),
    }
}

impl EnergyTerm {
    /// Storage coordinates the term depends on, in gradient column order.
    pub fn coords(&self) -> Vec<usize> {
        match self {
            EnergyTerm::Quadratic { coord, .. } => vec![*coord],
            EnergyTerm::Neural { coords, .. } => coords.clone(),
            EnergyTerm::Analytic(a) => match a {
                AnalyticPotential::Polynomial { coord, .. } | AnalyticPotential::Pendulum { coord, .. } => {
                    vec![*coord]
                }
                AnalyticPotential::PlanarSpring { coords, .. } => coords.to_vec(),
                AnalyticPotential::Chain { coords, .. } => coords.clone(),
            },
        }
    }

    fn network_input(&self, tape: &mut Tape, u: Var, aux_in: Option<Var>) -> Var {
        let EnergyTerm::Neural { coords, aux, .. } = self else { unreachable!() };
        let mut cols: Vec<Var> = coords.iter().map(|&c| tape.col(u, c)).collect();
        if !aux.is_empty() {
            let a = aux_in.expect("auxiliary inputs required by this energy term");
            cols.extend(aux.iter().map(|&c| tape.col(a, c)));
        }
        tape.hcat(&cols)
    }

    fn chain_extensions(tape: &mut Tape, u: Var, aux: Option<Var>, coords: &[usize], wall_aux: Option<usize>) -> Vec<Var> {
        let mut out = Vec::with_capacity(coords.len());
        for (i, &c) in coords.iter().enumerate() {
            let x = tape.col(u, c);
            let prev = if i > 0 {
                Some(tape.col(u, coords[i - 1]))
            } else {
                wall_aux.map(|w| {
                    let a = aux.expect("wall position required by this energy term");
                    tape.col(a, w)
                })
            };
            out.push(match prev {
                Some(p) => tape.sub(x, p),
                None => x,
            });
        }
        out
    }

    fn planar(tape: &mut Tape, u: Var, coords: &[usize; 2], rest: &[f64; 2], length: f64) -> (Var, Var, Var, Var) {
        let dx = tape.col(u, coords[0]);
        let dy = tape.col(u, coords[1]);
        let rx = tape.affine(dx, 1.0, rest[0]);
        let ry = tape.affine(dy, 1.0, rest[1]);
        let rx2 = tape.square(rx);
        let ry2 = tape.square(ry);
        let r2 = tape.add(rx2, ry2);
        let rho = tape.sqrt(r2);
        let elong = tape.affine(rho, 1.0, -length);
        (rx, ry, rho, elong)
    }

    /// Energy per batch row, `(batch, 1)`.
    pub fn energy_expr(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        u: Var,
        aux: Option<Var>,
    ) -> Result<Var, ComponentError> {
        check_width(tape, u, &self.coords())?;
        Ok(match self {
            EnergyTerm::Quadratic { coord, log_theta } => {
                let s = tape.col(u, *coord);
                let lt = tape.param(params, *log_theta);
                let inv = tape.affine(lt, -1.0, 0.0);
                let inv = tape.exp(inv);
                let s2 = tape.square(s);
                let h = tape.mul(s2, inv);
                tape.scale(h, 0.5)
            }
            EnergyTerm::Neural { net, .. } => {
                let x = self.network_input(tape, u, aux);
                net.forward(tape, params, x)
            }
            EnergyTerm::Analytic(AnalyticPotential::Polynomial { coord, k1, k3 }) => {
                let s = tape.col(u, *coord);
                let s2 = tape.square(s);
                let s4 = tape.square(s2);
                let a = tape.scale(s2, 0.5 * k1);
                let b = tape.scale(s4, 0.25 * k3);
                tape.add(a, b)
            }
            EnergyTerm::Analytic(AnalyticPotential::Pendulum { coord, mgl }) => {
                let s = tape.col(u, *coord);
                let c = tape.cos(s);
                tape.scale(c, -mgl)
            }
            EnergyTerm::Analytic(AnalyticPotential::PlanarSpring { coords, rest, length, k1, k3 }) => {
                let (_, _, _, e) = Self::planar(tape, u, coords, rest, *length);
                let e2 = tape.square(e);
                let e4 = tape.square(e2);
                let a = tape.scale(e2, 0.5 * k1);
                let b = tape.scale(e4, 0.25 * k3);
                tape.add(a, b)
            }
            EnergyTerm::Analytic(AnalyticPotential::Chain { coords, wall_aux, springs }) => {
                let ext = Self::chain_extensions(tape, u, aux, coords, *wall_aux);
                let mut total: Option<Var> = None;
                for (d, [k1, k3]) in ext.into_iter().zip(springs) {
                    let d2 = tape.square(d);
                    let d4 = tape.square(d2);
                    let a = tape.scale(d2, 0.5 * k1);
                    let b = tape.scale(d4, 0.25 * k3);
                    let h = tape.add(a, b);
                    total = Some(match total {
                        Some(t) => tape.add(t, h),
                        None => h,
                    });
                }
                total.expect("chain potential needs at least one spring")
            }
        })
    }

    /// `∂H/∂u` over [`EnergyTerm::coords`], `(batch, coords)`, as a
    /// first-order expression.
    pub fn grad_expr(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        u: Var,
        aux: Option<Var>,
    ) -> Result<Var, ComponentError> {
        check_width(tape, u, &self.coords())?;
        Ok(match self {
            EnergyTerm::Quadratic { coord, log_theta } => {
                let s = tape.col(u, *coord);
                let lt = tape.param(params, *log_theta);
                let inv = tape.affine(lt, -1.0, 0.0);
                let inv = tape.exp(inv);
                tape.mul(s, inv)
            }
            EnergyTerm::Neural { coords, net, .. } => {
                let x = self.network_input(tape, u, aux);
                let g = net.input_gradient(tape, params, x)?;
                if tape.shape(g).1 == coords.len() {
                    g
                } else {
                    tape.slice_cols(g, 0..coords.len())
                }
            }
            EnergyTerm::Analytic(AnalyticPotential::Polynomial { coord, k1, k3 }) => {
                let s = tape.col(u, *coord);
                let lin = tape.scale(s, *k1);
                let cub = tape.cube(s);
                let cub = tape.scale(cub, *k3);
                tape.add(lin, cub)
            }
            EnergyTerm::Analytic(AnalyticPotential::Pendulum { coord, mgl }) => {
                let s = tape.col(u, *coord);
                let sn = tape.sin(s);
                tape.scale(sn, *mgl)
            }
            EnergyTerm::Analytic(AnalyticPotential::PlanarSpring { coords, rest, length, k1, k3 }) => {
                let (rx, ry, rho, e) = Self::planar(tape, u, coords, rest, *length);
                let lin = tape.scale(e, *k1);
                let cub = tape.cube(e);
                let cub = tape.scale(cub, *k3);
                let force = tape.add(lin, cub);
                let inv = tape.recip(rho);
                let per = tape.mul(force, inv);
                let gx = tape.mul(per, rx);
                let gy = tape.mul(per, ry);
                tape.hcat(&[gx, gy])
            }
            EnergyTerm::Analytic(AnalyticPotential::Chain { coords, wall_aux, springs }) => {
                let ext = Self::chain_extensions(tape, u, aux, coords, *wall_aux);
                let forces: Vec<Var> = ext
                    .into_iter()
                    .zip(springs)
                    .map(|(d, [k1, k3])| {
                        let lin = tape.scale(d, *k1);
                        let cub = tape.cube(d);
                        let cub = tape.scale(cub, *k3);
                        tape.add(lin, cub)
                    })
                    .collect();
                let cols: Vec<Var> = (0..forces.len())
                    .map(|i| if i + 1 < forces.len() { tape.sub(forces[i], forces[i + 1]) } else { forces[i] })
                    .collect();
                tape.hcat(&cols)
            }
        })
    }

    /// Energy of a single state.
    pub fn energy(&self, params: &ParamSet, u: &[f64], aux: &[f64]) -> Result<f64, ComponentError> {
        let mut tape = Tape::new();
        let uv = tape.row(u);
        let av = (!aux.is_empty()).then(|| tape.row(aux));
        let h = self.energy_expr(&mut tape, params, uv, av)?;
        Ok(tape.scalar_value(h))
    }

    /// Gradient of a single state over [`EnergyTerm::coords`].
    pub fn grad_energy(&self, params: &ParamSet, u: &[f64], aux: &[f64]) -> Result<Vec<f64>, ComponentError> {
        let mut tape = Tape::new();
        let uv = tape.row(u);
        let av = (!aux.is_empty()).then(|| tape.row(aux));
        let g = self.grad_expr(&mut tape, params, uv, av)?;
        Ok(tape.value(g).iter().copied().collect())
    }
}

/// Characteristic of a single resistive port.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResistiveMap {
    Neural { net: Mlp },
    /// `−d·sgn(f)|f|^{1/3}`
    SignedPowerDamper { d: f64 },
    /// `−d·f`
    LinearDamper { d: f64 },
    /// `−c·f³`
    CubicResistor { c: f64 },
    /// `m₁V + ½(m₀−m₁)(|V+1| − |V−1|)`
    ChuaDiode { m0: f64, m1: f64 },
    /// `V³/3 − V`
    TunnelDiode,
    /// `g·f + bias`
    LinearResistor { g: f64, bias: f64 },
}

impl ResistiveMap {
    /// Whether the characteristic is written as the effort opposing the flow,
    /// in which case the effort handed to the bivector is its negation.
    fn opposing(&self) -> bool {
        matches!(
            self,
            ResistiveMap::SignedPowerDamper { .. } | ResistiveMap::LinearDamper { .. } | ResistiveMap::CubicResistor { .. }
        )
    }

    /// The characteristic `f ↦ e` as conventionally written for the element.
    pub fn resist(&self, params: &ParamSet, f: f64) -> f64 {
        match self {
            ResistiveMap::SignedPowerDamper { d } => -d * f.signum() * f.abs().cbrt(),
            ResistiveMap::LinearDamper { d } => -d * f,
            ResistiveMap::CubicResistor { c } => -c * f * f * f,
            ResistiveMap::ChuaDiode { m0, m1 } => m1 * f + 0.5 * (m0 - m1) * ((f + 1.0).abs() - (f - 1.0).abs()),
            ResistiveMap::TunnelDiode => f * f * f / 3.0 - f,
            ResistiveMap::LinearResistor { g, bias } => g * f + bias,
            ResistiveMap::Neural { .. } => self.port_effort_value(params, f),
        }
    }

    /// Effort entering the Dirac structure for flow `f`.
    pub fn port_effort_value(&self, params: &ParamSet, f: f64) -> f64 {
        match self {
            ResistiveMap::Neural { net } => {
                let mut tape = Tape::new();
                let x = tape.scalar(f);
                let y = net.forward(&mut tape, params, x);
                tape.scalar_value(y)
            }
            other if other.opposing() => -other.resist(params, f),
            other => other.resist(params, f),
        }
    }

    /// Port effort for a `(batch, 1)` flow column.
    pub fn port_effort(&self, tape: &mut Tape, params: &ParamSet, f: Var) -> Var {
        match self {
            ResistiveMap::Neural { net } => net.forward(tape, params, f),
            ResistiveMap::SignedPowerDamper { d } => {
                let r = tape.signed_pow(f, 1.0 / 3.0);
                tape.scale(r, *d)
            }
            ResistiveMap::LinearDamper { d } => tape.scale(f, *d),
            ResistiveMap::CubicResistor { c } => {
                let r = tape.cube(f);
                tape.scale(r, *c)
            }
            ResistiveMap::ChuaDiode { m0, m1 } => {
                let lin = tape.scale(f, *m1);
                let up = tape.affine(f, 1.0, 1.0);
                let up = tape.abs(up);
                let dn = tape.affine(f, 1.0, -1.0);
                let dn = tape.abs(dn);
                let kink = tape.sub(up, dn);
                let kink = tape.scale(kink, 0.5 * (m0 - m1));
                tape.add(lin, kink)
            }
            ResistiveMap::TunnelDiode => {
                let c = tape.cube(f);
                let c = tape.scale(c, 1.0 / 3.0);
                tape.sub(c, f)
            }
            ResistiveMap::LinearResistor { g, bias } => tape.affine(f, *g, *bias),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineTerm {
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Linear,
    /// Four-point Lagrange interpolation.
    Cubic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledSeries {
    times: Vec<f64>,
    values: Vec<f64>,
    interpolation: Interpolation,
}

impl SampledSeries {
    pub fn new(times: Vec<f64>, values: Vec<f64>, interpolation: Interpolation) -> Result<Self, ComponentError> {
        if times.len() != values.len() || times.len() < 2 {
            return Err(ComponentError::MalformedSeries);
        }
        if let Some(k) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(ComponentError::NonIncreasingTimes(k + 1));
        }
        Ok(SampledSeries { times, values, interpolation })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, t: f64) -> Result<f64, ComponentError> {
        let (start, end) = (self.times[0], *self.times.last().unwrap());
        if !(start..=end).contains(&t) {
            return Err(ComponentError::OutOfRange { t, start, end });
        }
        // index of the interval [times[k], times[k+1]] containing t
        let k = self.times.partition_point(|&x| x <= t).saturating_sub(1).min(self.times.len() - 2);
        match self.interpolation {
            Interpolation::Linear => {
                let (t0, t1) = (self.times[k], self.times[k + 1]);
                let w = (t - t0) / (t1 - t0);
                Ok(self.values[k] * (1.0 - w) + self.values[k + 1] * w)
            }
            Interpolation::Cubic => {
                let n = self.times.len();
                if n < 4 {
                    let lo = 0;
                    return Ok(lagrange(&self.times[lo..n], &self.values[lo..n], t));
                }
                let lo = k.saturating_sub(1).min(n - 4);
                Ok(lagrange(&self.times[lo..lo + 4], &self.values[lo..lo + 4], t))
            }
        }
    }
}

/// Lagrange polynomial through `(xs, ys)` evaluated at `t`.
pub fn lagrange(xs: &[f64], ys: &[f64], t: f64) -> f64 {
    let mut acc = 0.0;
    for (i, (&xi, &yi)) in xs.iter().zip(ys).enumerate() {
        let mut w = 1.0;
        for (j, &xj) in xs.iter().enumerate() {
            if i != j {
                w *= (t - xj) / (xi - xj);
            }
        }
        acc += w * yi;
    }
    acc
}

/// Time-dependent external effort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExternalSignal {
    /// `Σ a·sin(ωt + φ)`
    SumOfSines { terms: Vec<SineTerm> },
    /// Time derivative of a sum of sines, `Σ aω·cos(ωt + φ)`.
    SumOfSinesRate { terms: Vec<SineTerm> },
    Constant { value: f64 },
    Sampled { series: SampledSeries },
}

impl ExternalSignal {
    pub fn value(&self, t: f64) -> Result<f64, ComponentError> {
        Ok(match self {
            ExternalSignal::SumOfSines { terms } => {
                terms.iter().map(|s| s.amplitude * (s.omega * t + s.phase).sin()).sum()
            }
            ExternalSignal::SumOfSinesRate { terms } => {
                terms.iter().map(|s| s.amplitude * s.omega * (s.omega * t + s.phase).cos()).sum()
            }
            ExternalSignal::Constant { value } => *value,
            ExternalSignal::Sampled { series } => series.value(t)?,
        })
    }
}

/// Per-coordinate relation between an observed quantity and the state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObsScale {
    Identity,
    /// `state = exp(log_scale)·observation`, e.g. `p = m·v`.
    Log { block: BlockId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationMap {
    pub scales: Vec<ObsScale>,
}

impl ObservationMap {
    pub fn identity(n: usize) -> Self {
        ObservationMap { scales: vec![ObsScale::Identity; n] }
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    /// Numeric scale factors, validated positive and finite.
    pub fn factors(&self, params: &ParamSet) -> Result<Vec<f64>, ComponentError> {
        self.scales
            .iter()
            .enumerate()
            .map(|(index, s)| {
                let value = match s {
                    ObsScale::Identity => 1.0,
                    ObsScale::Log { block } => params.scalar(*block).exp(),
                };
                if value > 0.0 && value.is_finite() {
                    Ok(value)
                } else {
                    Err(ComponentError::NonPositiveScale { index, value })
                }
            })
            .collect()
    }

    pub fn to_state(&self, params: &ParamSet, obs: &[f64]) -> Result<Vec<f64>, ComponentError> {
        self.check(obs.len())?;
        Ok(self.factors(params)?.iter().zip(obs).map(|(s, o)| s * o).collect())
    }

    pub fn from_state(&self, params: &ParamSet, u: &[f64]) -> Result<Vec<f64>, ComponentError> {
        self.check(u.len())?;
        Ok(self.factors(params)?.iter().zip(u).map(|(s, x)| x / s).collect())
    }

    fn check(&self, got: usize) -> Result<(), ComponentError> {
        if got != self.len() {
            return Err(ComponentError::MissingCoordinate { needed: self.len().saturating_sub(1), got });
        }
        Ok(())
    }

    /// `(1, n)` row of scale factors, or `None` when every coordinate is
    /// observed directly.
    pub fn scale_row(&self, tape: &mut Tape, params: &ParamSet) -> Option<Var> {
        if self.scales.iter().all(|s| matches!(s, ObsScale::Identity)) {
            return None;
        }
        let cols: Vec<Var> = self
            .scales
            .iter()
            .map(|s| match s {
                ObsScale::Identity => tape.constant(Array2::ones((1, 1))),
                ObsScale::Log { block } => {
                    let p = tape.param(params, *block);
                    tape.exp(p)
                }
            })
            .collect();
        Some(tape.hcat(&cols))
    }
}
