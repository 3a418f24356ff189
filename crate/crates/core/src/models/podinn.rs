use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{BlockId, ParamSet, Tape, Var};
use crate::components::{EnergyTerm, ObservationMap, ResistiveMap};
use crate::geometry::{Bivector, EntryStatus, PortClass, PortLayout};
use crate::systems::CoordinateMode;

/// Port-based model: storage ports with an energy, resistive ports with a
/// characteristic and external ports driven by known efforts, all coupled by
/// a (partially learnable) bivector.
///
/// The bivector's upper triangle `U` lives in the parameter block
/// `bivector`; the coupling matrix is `M = U − Uᵀ` and flows are `f = M e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PodinnModel {
    pub layout: PortLayout,
    pub params: ParamSet,
    pub bivector_block: BlockId,
    pub status: Array2<EntryStatus>,
    pub energy: Vec<EnergyTerm>,
    pub resistors: Vec<ResistiveMap>,
    pub observation: ObservationMap,
    pub mode: CoordinateMode,
    /// Auxiliary external columns after the `n_i` efforts (e.g. a boundary
    /// position fed to a potential).
    pub n_aux: usize,
}

/// Intermediate port quantities of one field evaluation, all `(batch, ·)`.
#[derive(Clone, Copy, Debug)]
pub struct FieldParts {
    pub u: Var,
    pub e_s: Var,
    pub f_s: Var,
    pub e_r: Option<Var>,
    pub f_r: Option<Var>,
    pub e_i: Option<Var>,
    pub aux: Option<Var>,
    pub m: Var,
}

impl PodinnModel {
    /// Validates the pieces and wraps them into a model.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: PortLayout,
        params: ParamSet,
        bivector_block: BlockId,
        status: Array2<EntryStatus>,
        energy: Vec<EnergyTerm>,
        resistors: Vec<ResistiveMap>,
        observation: ObservationMap,
        mode: CoordinateMode,
        n_aux: usize,
    ) -> Result<Self, ModelError> {
        let model = PodinnModel { layout, params, bivector_block, status, energy, resistors, observation, mode, n_aux };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ModelError> {
        let (n_s, n) = (self.layout.n_s(), self.layout.dim());
        if self.resistors.len() != self.layout.n_r() {
            return Err(ModelError::Layout(format!(
                "{} resistive ports but {} characteristics",
                self.layout.n_r(),
                self.resistors.len()
            )));
        }
        if self.observation.len() != n_s {
            return Err(ModelError::Layout(format!("{n_s} storage ports but {} observation scales", self.observation.len())));
        }
        let mut covered = vec![0usize; n_s];
        for term in &self.energy {
            for c in term.coords() {
                if c >= n_s {
                    return Err(ModelError::Layout(format!("energy term uses coordinate {c} beyond {n_s} storage ports")));
                }
                covered[c] += 1;
            }
        }
        if let Some(c) = covered.iter().position(|&k| k != 1) {
            return Err(ModelError::Layout(format!(
                "storage coordinate {} is covered by {} energy terms, expected exactly one",
                self.layout.name(c),
                covered[c]
            )));
        }
        let block = self.params.block(self.bivector_block);
        if block.dim() != (n, n) || self.status.dim() != (n, n) {
            return Err(ModelError::Layout(format!("bivector block must be {n}×{n}")));
        }
        let b = self.bivector();
        b.check_admissible(&self.layout)?;
        for i in 0..n {
            for j in i + 1..n {
                let rr = self.layout.class(i) == PortClass::Resistive && self.layout.class(j) == PortClass::Resistive;
                if rr && self.status[[i, j]] != EntryStatus::FixedZero {
                    return Err(ModelError::Layout("resistive–resistive couplings must be fixed at zero".into()));
                }
            }
        }
        Ok(())
    }

    /// Current bivector values with their statuses.
    pub fn bivector(&self) -> Bivector {
        Bivector::from_upper(self.params.block(self.bivector_block), self.status.clone())
    }

    pub fn n_s(&self) -> usize {
        self.layout.n_s()
    }

    /// Port quantities along the explicit causal order: storage efforts,
    /// resistive flows, resistive efforts, then storage flows.
    pub fn parts(&self, tape: &mut Tape, obs: Var, ext: Option<Var>) -> Result<FieldParts, ModelError> {
        let (n_s, n_r, n_i) = (self.layout.n_s(), self.layout.n_r(), self.layout.n_i());
        let (batch, width) = tape.shape(obs);
        if width != n_s {
            return Err(ModelError::Layout(format!("expected {n_s} observation columns, got {width}")));
        }
        let ext_width = ext.map_or(0, |e| tape.shape(e).1);
        if ext_width != n_i + self.n_aux {
            return Err(ModelError::Layout(format!("expected {} external columns, got {ext_width}", n_i + self.n_aux)));
        }

        // (1) observations to state coordinates
        let scale = self.observation.scale_row(tape, &self.params);
        let u = match scale {
            Some(s) => tape.mul(obs, s),
            None => obs,
        };
        let e_i = (n_i > 0).then(|| tape.slice_cols(ext.unwrap(), 0..n_i));
        let aux = (self.n_aux > 0).then(|| tape.slice_cols(ext.unwrap(), n_i..n_i + self.n_aux));

        // (2) storage efforts, assembled by coordinate
        let mut cols: Vec<Option<Var>> = vec![None; n_s];
        for term in &self.energy {
            let g = term.grad_expr(tape, &self.params, u, aux)?;
            for (k, c) in term.coords().into_iter().enumerate() {
                let col = tape.col(g, k);
                cols[c] = Some(match cols[c] {
                    Some(prev) => tape.add(prev, col),
                    None => col,
                });
            }
        }
        let cols: Vec<Var> =
            cols.into_iter().map(|c| c.unwrap_or_else(|| tape.constant(Array2::zeros((batch, 1))))).collect();
        let e_s = tape.hcat(&cols);

        let up = tape.param(&self.params, self.bivector_block);
        let low = tape.transpose(up);
        let m = tape.sub(up, low);
        let (s, r, i) = (self.layout.s_range(), self.layout.r_range(), self.layout.i_range());

        // (4) resistive flows and (5) efforts
        let (f_r, e_r) = if n_r > 0 {
            let m_rs = tape.slice(m, r.clone(), s.clone());
            let mut f = tape.matmul_t(e_s, m_rs);
            if let Some(ei) = e_i {
                let m_ri = tape.slice(m, r.clone(), i.clone());
                let t = tape.matmul_t(ei, m_ri);
                f = tape.add(f, t);
            }
            let efforts: Vec<Var> = self
                .resistors
                .iter()
                .enumerate()
                .map(|(k, res)| {
                    let fk = tape.col(f, k);
                    res.port_effort(tape, &self.params, fk)
                })
                .collect();
            (Some(f), Some(tape.hcat(&efforts)))
        } else {
            (None, None)
        };

        // (6) storage flows
        let m_ss = tape.slice(m, s.clone(), s.clone());
        let mut f_s = tape.matmul_t(e_s, m_ss);
        if let Some(er) = e_r {
            let m_sr = tape.slice(m, s.clone(), r);
            let t = tape.matmul_t(er, m_sr);
            f_s = tape.add(f_s, t);
        }
        if let Some(ei) = e_i {
            let m_si = tape.slice(m, s, i);
            let t = tape.matmul_t(ei, m_si);
            f_s = tape.add(f_s, t);
        }
        Ok(FieldParts { u, e_s, f_s, e_r, f_r, e_i, aux, m })
    }

    pub fn field_expr(&self, tape: &mut Tape, obs: Var, ext: Option<Var>) -> Result<Var, ModelError> {
        let parts = self.parts(tape, obs, ext)?;
        // (7) state rate back to observation rate
        Ok(match self.observation.scale_row(tape, &self.params) {
            Some(s) => {
                let inv = tape.recip(s);
                tape.mul(parts.f_s, inv)
            }
            None => parts.f_s,
        })
    }

    /// Total energy of one observed state.
    pub fn energy_value(&self, obs: &[f64], aux: &[f64]) -> Result<f64, ModelError> {
        let u = self.observation.to_state(&self.params, obs)?;
        let mut h = 0.0;
        for term in &self.energy {
            h += term.energy(&self.params, &u, aux)?;
        }
        Ok(h)
    }
}

/// Both sides of `e^S·f^S = −(e^R·f^R + e^I·f^I)` for one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerBalance {
    /// `dH/dt = e^S·f^S`
    pub storage: f64,
    /// `−(e^R·f^R + e^I·f^I)`
    pub supplied: f64,
    /// Largest magnitude among the summed products, for relative comparison.
    pub scale: f64,
}

pub fn power_balance(model: &PodinnModel, obs: &[f64], ext: &[f64]) -> Result<PowerBalance, ModelError> {
    let mut tape = Tape::new();
    let o = tape.row(obs);
    let e = (!ext.is_empty()).then(|| tape.row(ext));
    let p = model.parts(&mut tape, o, e)?;
    let row = |tape: &Tape, v: Var| -> Vec<f64> { tape.value(v).iter().copied().collect() };
    let es = row(&tape, p.e_s);
    let fs = row(&tape, p.f_s);
    let m = tape.value(p.m).clone();
    let mut terms: Vec<f64> = es.iter().zip(&fs).map(|(a, b)| a * b).collect();
    let storage: f64 = terms.iter().sum();
    let mut supplied = 0.0;
    if let (Some(er), Some(fr)) = (p.e_r, p.f_r) {
        for (a, b) in row(&tape, er).iter().zip(row(&tape, fr)) {
            supplied -= a * b;
            terms.push(a * b);
        }
    }
    if let Some(ei) = p.e_i {
        // reaction flows f^I = M_IS e^S + M_IR e^R; they never enter the dynamics
        let ei = row(&tape, ei);
        let er = p.e_r.map(|v| row(&tape, v)).unwrap_or_default();
        let (s, r) = (model.layout.s_range(), model.layout.r_range());
        for (k, gi) in model.layout.i_range().enumerate() {
            let mut fi = 0.0;
            for (a, j) in s.clone().enumerate() {
                fi += m[[gi, j]] * es[a];
            }
            for (a, j) in r.clone().enumerate() {
                fi += m[[gi, j]] * er[a];
            }
            supplied -= ei[k] * fi;
            terms.push(ei[k] * fi);
        }
    }
    let scale = terms.iter().fold(0.0f64, |acc, t| acc.max(t.abs()));
    Ok(PowerBalance { storage, supplied, scale })
}
