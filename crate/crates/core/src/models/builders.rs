use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelError, NeuralOdeModel, PodinnModel};
use crate::autodiff::{Activation, Mlp, ParamSet};
use crate::components::{AnalyticPotential, EnergyTerm, ObsScale, ObservationMap, ResistiveMap};
use crate::geometry::{Domain, EntryStatus, PortClass, PortLayout, Quantity};
use crate::systems::{Anchor, Boundary, CoordinateMode, DampingLaw, Physics, SystemSpec};

/// Architecture and structural assumptions of a learnable model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    /// Hidden layer widths of every network.
    pub hidden: Vec<usize>,
    /// Assumed number of resistive ports; the true count when unset.
    pub n_d: Option<usize>,
    /// Assumed number of voltage-flow resistive ports in circuits.
    pub n_g: Option<usize>,
    /// Learnable couplings that involve a resistive port start in
    /// `U(−init_range, init_range)`; all others start at zero.
    pub init_range: f64,
    pub seed: u64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions { hidden: vec![200, 200], n_d: None, n_g: None, init_range: 0.1, seed: 0 }
    }
}

/// Which bivector entries a learnable model may move.
enum Structure {
    /// Every admissible entry.
    Mask,
    /// Storage–storage block fixed to the true canonical pairs.
    CanonicalStorage,
    /// Every true entry fixed except the listed ones, which stay learnable.
    KnownExcept(Vec<(String, String)>),
}

/// Everything known about a system's port structure and true constitutive
/// laws.
struct Skeleton {
    storage: Vec<(String, Domain)>,
    resistive: Vec<(String, Quantity, ResistiveMap)>,
    external: Vec<(String, Quantity)>,
    n_aux: usize,
    /// `(row, col, value)`: the flow of `row` receives `value·e_col`.
    entries: Vec<(String, String, f64)>,
    potentials: Vec<AnalyticPotential>,
    /// Storage coordinates sharing a quadratic energy `s²/(2θ)`, observed as
    /// `s/θ`, with the true `θ`.
    quadratic: Vec<(Vec<usize>, f64)>,
    /// Coordinate groups (plus auxiliary columns) modelled by one network.
    neural: Vec<(Vec<usize>, Vec<usize>)>,
    structure: Structure,
}

fn s(x: &str) -> String {
    x.to_string()
}

fn entry(r: &str, c: &str, v: f64) -> (String, String, f64) {
    (s(r), s(c), v)
}

fn skeleton(spec: &SystemSpec) -> Skeleton {
    match &spec.physics {
        Physics::Chain(p) => {
            let n = p.masses.len();
            let abs = spec.mode == CoordinateMode::Absolute;
            let q = |i: usize| if abs { format!("x{}", i + 1) } else { format!("q{}", i + 1) };
            let pm = |i: usize| format!("p{}", i + 1);
            let mut storage: Vec<(String, Domain)> = (0..n).map(|i| (q(i), Domain::MechPotential)).collect();
            storage.extend((0..n).map(|i| (pm(i), Domain::MechKinetic)));
            let (external, n_aux, wall) = match p.boundary {
                Boundary::ForceOnLast => (vec![(s("F"), Quantity::Force)], 0, None),
                Boundary::MovingWall => (vec![(s("v_b"), Quantity::Velocity)], usize::from(abs), Some("v_b")),
            };
            let mut entries = vec![];
            let mut resistive = vec![];
            for i in 0..n {
                entries.push(entry(&q(i), &pm(i), 1.0));
                if !abs {
                    if i > 0 {
                        entries.push(entry(&q(i), &pm(i - 1), -1.0));
                    } else if let Some(w) = wall {
                        entries.push(entry(&q(i), w, -1.0));
                    }
                }
                if let Some(d) = p.dampers[i] {
                    let name = format!("d{}", i + 1);
                    let map = match p.damping {
                        DampingLaw::CubeRoot => ResistiveMap::SignedPowerDamper { d },
                        DampingLaw::Linear => ResistiveMap::LinearDamper { d },
                    };
                    resistive.push((name.clone(), Quantity::Velocity, map));
                    entries.push(entry(&name, &pm(i), 1.0));
                    if i > 0 {
                        entries.push(entry(&name, &pm(i - 1), -1.0));
                    } else if let Some(w) = wall {
                        entries.push(entry(&name, w, -1.0));
                    }
                }
            }
            if p.boundary == Boundary::ForceOnLast {
                entries.push(entry(&pm(n - 1), "F", 1.0));
            }
            let (potentials, neural, structure) = if abs {
                let wall_aux = (n_aux > 0).then_some(0);
                (
                    vec![AnalyticPotential::Chain {
                        coords: (0..n).collect(),
                        wall_aux,
                        springs: p.springs.iter().map(|k| [k.k1, k.k3]).collect(),
                    }],
                    vec![((0..n).collect(), (0..n_aux).collect())],
                    Structure::CanonicalStorage,
                )
            } else {
                (
                    p.springs
                        .iter()
                        .enumerate()
                        .map(|(i, k)| AnalyticPotential::Polynomial { coord: i, k1: k.k1, k3: k.k3 })
                        .collect(),
                    (0..n).map(|i| (vec![i], vec![])).collect(),
                    Structure::Mask,
                )
            };
            Skeleton {
                storage,
                resistive,
                external,
                n_aux,
                entries,
                potentials,
                quadratic: (0..n).map(|i| (vec![n + i], p.masses[i])).collect(),
                neural,
                structure,
            }
        }
        Physics::Planar(p) => {
            let ns = p.springs.len();
            let mut storage = vec![];
            for k in 0..ns {
                storage.push((format!("q{}x", k + 1), Domain::MechPotential));
                storage.push((format!("q{}y", k + 1), Domain::MechPotential));
            }
            for m in 0..p.masses.len() {
                storage.push((format!("p{}x", m + 1), Domain::MechKinetic));
                storage.push((format!("p{}y", m + 1), Domain::MechKinetic));
            }
            let mut entries = vec![];
            let mut potentials = vec![];
            for (k, sp) in p.springs.iter().enumerate() {
                for axis in ["x", "y"] {
                    let qk = format!("q{}{axis}", k + 1);
                    entries.push(entry(&qk, &format!("p{}{axis}", sp.end + 1), 1.0));
                    if let Anchor::Mass(m) = sp.start {
                        entries.push(entry(&qk, &format!("p{}{axis}", m + 1), -1.0));
                    }
                }
                potentials.push(AnalyticPotential::PlanarSpring {
                    coords: [2 * k, 2 * k + 1],
                    rest: p.rest_vector(k),
                    length: sp.length,
                    k1: sp.law.k1,
                    k3: sp.law.k3,
                });
            }
            Skeleton {
                storage,
                resistive: vec![],
                external: vec![],
                n_aux: 0,
                entries,
                potentials,
                quadratic: p.masses.iter().enumerate().map(|(m, &mass)| (vec![2 * ns + 2 * m, 2 * ns + 2 * m + 1], mass)).collect(),
                neural: (0..ns).map(|k| (vec![2 * k, 2 * k + 1], vec![])).collect(),
                structure: Structure::Mask,
            }
        }
        Physics::FitzHugh(p) => Skeleton {
            storage: vec![(s("Q"), Domain::Electric), (s("phi"), Domain::Magnetic)],
            resistive: vec![
                (s("R1"), Quantity::Voltage, ResistiveMap::TunnelDiode),
                (s("R2"), Quantity::Current, ResistiveMap::LinearResistor { g: p.r2, bias: p.source }),
            ],
            external: vec![(s("J"), Quantity::Current)],
            n_aux: 0,
            entries: vec![entry("R1", "Q", 1.0), entry("Q", "phi", -1.0), entry("Q", "J", 1.0), entry("R2", "phi", 1.0)],
            potentials: vec![],
            quadratic: vec![(vec![0], p.capacitance), (vec![1], p.inductance)],
            neural: vec![],
            structure: Structure::Mask,
        },
        Physics::Chua(p) => Skeleton {
            storage: vec![(s("Q1"), Domain::Electric), (s("Q2"), Domain::Electric), (s("phi"), Domain::Magnetic)],
            resistive: vec![
                (s("R1"), Quantity::Voltage, ResistiveMap::LinearResistor { g: 1.0 / p.r1, bias: 0.0 }),
                (s("R2"), Quantity::Voltage, ResistiveMap::ChuaDiode { m0: p.m0, m1: p.m1 }),
            ],
            external: vec![],
            n_aux: 0,
            entries: vec![entry("R1", "Q1", 1.0), entry("R1", "Q2", -1.0), entry("R2", "Q1", 1.0), entry("Q2", "phi", 1.0)],
            potentials: vec![],
            quadratic: vec![(vec![0], 1.0 / p.alpha), (vec![1], p.c2), (vec![2], 1.0 / p.beta)],
            neural: vec![],
            structure: Structure::Mask,
        },
        Physics::Motor(p) => Skeleton {
            storage: vec![(s("theta"), Domain::RotPotential), (s("p"), Domain::RotKinetic), (s("phi"), Domain::Magnetic)],
            resistive: vec![
                (s("d"), Quantity::AngularVelocity, ResistiveMap::SignedPowerDamper { d: p.friction }),
                (s("R"), Quantity::Current, ResistiveMap::CubicResistor { c: p.resistance }),
            ],
            external: vec![(s("E"), Quantity::Voltage)],
            n_aux: 0,
            entries: vec![
                entry("theta", "p", 1.0),
                entry("p", "phi", p.k),
                entry("d", "p", 1.0),
                entry("R", "phi", 1.0),
                entry("phi", "E", 1.0),
            ],
            potentials: vec![AnalyticPotential::Pendulum { coord: 0, mgl: p.mgl() }],
            quadratic: vec![(vec![1], p.inertia()), (vec![2], p.inductance)],
            neural: vec![(vec![0], vec![])],
            structure: Structure::KnownExcept(vec![(s("p"), s("phi"))]),
        },
        Physics::Tank(p) => Skeleton {
            storage: vec![
                (s("V"), Domain::Hydraulic),
                (s("q1"), Domain::MechPotential),
                (s("q2"), Domain::MechPotential),
                (s("p1"), Domain::MechKinetic),
                (s("p2"), Domain::MechKinetic),
            ],
            resistive: vec![
                (s("d1"), Quantity::Velocity, ResistiveMap::SignedPowerDamper { d: p.dampers[0] }),
                (s("d2"), Quantity::Velocity, ResistiveMap::SignedPowerDamper { d: p.dampers[1] }),
            ],
            external: vec![(s("F"), Quantity::Force)],
            n_aux: 0,
            entries: vec![
                entry("V", "p1", p.a1),
                entry("V", "p2", -p.a2),
                entry("q1", "p1", 1.0),
                entry("q2", "p2", 1.0),
                entry("d1", "p1", 1.0),
                entry("d2", "p2", 1.0),
                entry("p2", "F", 1.0),
            ],
            potentials: vec![
                AnalyticPotential::Polynomial { coord: 0, k1: 1.0 / p.compliance(), k3: 0.0 },
                AnalyticPotential::Polynomial { coord: 1, k1: p.spring.k1, k3: p.spring.k3 },
                AnalyticPotential::Polynomial { coord: 2, k1: p.spring.k1, k3: p.spring.k3 },
            ],
            quadratic: vec![(vec![3], p.masses[0]), (vec![4], p.masses[1])],
            neural: vec![(vec![0], vec![]), (vec![1], vec![]), (vec![2], vec![])],
            structure: Structure::Mask,
        },
    }
}

fn build_layout(storage: &[(String, Domain)], resistive: &[(String, Quantity)], external: &[(String, Quantity)]) -> PortLayout {
    let mut l = PortLayout::new();
    for (n, d) in storage {
        l = l.with_storage(n, *d);
    }
    for (n, q) in resistive {
        l = l.with_resistive(n, *q);
    }
    for (n, q) in external {
        l = l.with_external(n, *q);
    }
    l
}

/// Quadratic energy terms and observation scales for the kinetic-like
/// coordinates; `theta(k)` gives the initial value of group `k`.
fn quadratic_terms(
    sk: &Skeleton,
    params: &mut ParamSet,
    trainable: bool,
    theta: impl Fn(usize) -> f64,
) -> (Vec<EnergyTerm>, ObservationMap) {
    let mut obs = ObservationMap::identity(sk.storage.len());
    let mut terms = vec![];
    for (k, (coords, _)) in sk.quadratic.iter().enumerate() {
        let name = format!("log_theta_{}", sk.storage[coords[0]].0);
        let block = params.add_masked_block(name, Array2::from_elem((1, 1), theta(k).ln()), vec![trainable]);
        for &c in coords {
            obs.scales[c] = ObsScale::Log { block };
            terms.push(EnergyTerm::Quadratic { coord: c, log_theta: block });
        }
    }
    (terms, obs)
}

fn resolve(layout: &PortLayout, r: &str, c: &str) -> Result<(usize, usize), ModelError> {
    Ok((layout.index_of(r)?, layout.index_of(c)?))
}

/// Sets `M[r][c] = v` in upper-triangle storage.
fn put(upper: &mut Array2<f64>, status: &mut Array2<EntryStatus>, (r, c): (usize, usize), v: f64, st: EntryStatus) {
    let (i, j, v) = if r < c { (r, c, v) } else { (c, r, -v) };
    upper[[i, j]] = v;
    status[[i, j]] = st;
}

/// A PoDiNN with the true constitutive laws and the true bivector, all fixed.
pub fn ground_truth(spec: &SystemSpec) -> Result<PodinnModel, ModelError> {
    let sk = skeleton(spec);
    let res: Vec<(String, Quantity)> = sk.resistive.iter().map(|(n, q, _)| (n.clone(), *q)).collect();
    let layout = build_layout(&sk.storage, &res, &sk.external);
    let mut params = ParamSet::new();
    let (mut energy, observation) = quadratic_terms(&sk, &mut params, false, |k| sk.quadratic[k].1);
    energy.extend(sk.potentials.iter().cloned().map(EnergyTerm::Analytic));
    let n = layout.dim();
    let mut upper = Array2::zeros((n, n));
    let mut status = Array2::from_elem((n, n), EntryStatus::FixedZero);
    for (r, c, v) in &sk.entries {
        put(&mut upper, &mut status, resolve(&layout, r, c)?, *v, EntryStatus::Fixed);
    }
    let block = params.add_masked_block("bivector", upper, vec![false; n * n]);
    PodinnModel::new(
        layout,
        params,
        block,
        status,
        energy,
        sk.resistive.into_iter().map(|(_, _, m)| m).collect(),
        observation,
        spec.mode,
        sk.n_aux,
    )
}

fn network(params: &mut ParamSet, name: &str, inputs: usize, hidden: &[usize], outputs: usize, rng: &mut ChaCha8Rng) -> Mlp {
    let mut sizes = vec![inputs];
    sizes.extend_from_slice(hidden);
    sizes.push(outputs);
    Mlp::new(params, name, &sizes, Activation::Tanh, rng)
}

/// Resistive ports assumed by a learnable model.
fn assumed_resistive(spec: &SystemSpec, sk: &Skeleton, opts: &ModelOptions) -> Result<Vec<(String, Quantity)>, ModelError> {
    let truth: Vec<Quantity> = sk.resistive.iter().map(|(_, q, _)| *q).collect();
    if matches!(sk.structure, Structure::KnownExcept(_)) {
        if opts.n_d.is_some() || opts.n_g.is_some() {
            return Err(ModelError::Layout(format!("system {} has a fixed port structure; n_d/n_g cannot be set", spec.id)));
        }
        return Ok(sk.resistive.iter().map(|(n, q, _)| (n.clone(), *q)).collect());
    }
    let circuit = matches!(spec.physics, Physics::FitzHugh(_) | Physics::Chua(_));
    let n_d = opts.n_d.unwrap_or(truth.len());
    let flows: Vec<Quantity> = if circuit {
        let n_g = opts.n_g.unwrap_or_else(|| truth.iter().filter(|&&q| q == Quantity::Voltage).count());
        if n_g > n_d {
            return Err(ModelError::Layout(format!("n_g = {n_g} exceeds n_d = {n_d}")));
        }
        (0..n_d).map(|k| if k < n_g { Quantity::Voltage } else { Quantity::Current }).collect()
    } else {
        if opts.n_g.is_some() {
            return Err(ModelError::Layout("n_g only applies to circuits".into()));
        }
        let q = truth.first().copied().unwrap_or(Quantity::Velocity);
        vec![q; n_d]
    };
    Ok(flows.into_iter().enumerate().map(|(k, q)| (format!("r{}", k + 1), q)).collect())
}

/// A PoDiNN with neural potentials and resistors, learnable linear
/// capacities and a bivector restricted to admissible couplings.
pub fn learnable_podinn(spec: &SystemSpec, opts: &ModelOptions) -> Result<PodinnModel, ModelError> {
    let sk = skeleton(spec);
    let resistive = assumed_resistive(spec, &sk, opts)?;
    let layout = build_layout(&sk.storage, &resistive, &sk.external);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = ParamSet::new();
    let (mut energy, observation) = quadratic_terms(&sk, &mut params, true, |_| 1.0);
    for (coords, aux) in &sk.neural {
        let name = format!("U_{}", coords.iter().map(|&c| sk.storage[c].0.as_str()).collect::<Vec<_>>().join("_"));
        let net = network(&mut params, &name, coords.len() + aux.len(), &opts.hidden, 1, &mut rng);
        energy.push(EnergyTerm::Neural { coords: coords.clone(), aux: aux.clone(), net });
    }
    let resistors: Vec<ResistiveMap> = resistive
        .iter()
        .map(|(name, _)| ResistiveMap::Neural { net: network(&mut params, &format!("R_{name}"), 1, &opts.hidden, 1, &mut rng) })
        .collect();

    let n = layout.dim();
    let mask = layout.mask();
    let mut upper = Array2::zeros((n, n));
    let mut status = Array2::from_elem((n, n), EntryStatus::FixedZero);
    let truth: Vec<((usize, usize), f64)> = match sk.structure {
        Structure::Mask => vec![],
        Structure::CanonicalStorage => {
            let is_storage = |name: &str| sk.storage.iter().any(|(s, _)| s == name);
            sk.entries
                .iter()
                .filter(|(r, c, _)| is_storage(r) && is_storage(c))
                .map(|(r, c, v)| Ok((resolve(&layout, r, c)?, *v)))
                .collect::<Result<_, ModelError>>()?
        }
        Structure::KnownExcept(_) => sk
            .entries
            .iter()
            .map(|(r, c, v)| Ok((resolve(&layout, r, c)?, *v)))
            .collect::<Result<_, ModelError>>()?,
    };
    let storage = |i: usize| layout.class(i) == PortClass::Storage;
    for i in 0..n {
        for j in i + 1..n {
            let learnable = match &sk.structure {
                Structure::Mask => mask[[i, j]],
                Structure::CanonicalStorage => mask[[i, j]] && !(storage(i) && storage(j)),
                Structure::KnownExcept(_) => false,
            };
            if learnable {
                let touches_r = layout.class(i) == PortClass::Resistive || layout.class(j) == PortClass::Resistive;
                let init = if touches_r { rng.random_range(-opts.init_range..=opts.init_range) } else { 0.0 };
                put(&mut upper, &mut status, (i, j), init, EntryStatus::Learnable);
            }
        }
    }
    match &sk.structure {
        Structure::CanonicalStorage => {
            for &(rc, v) in &truth {
                put(&mut upper, &mut status, rc, v, EntryStatus::Fixed);
            }
        }
        Structure::KnownExcept(free) => {
            for &(rc, v) in &truth {
                put(&mut upper, &mut status, rc, v, EntryStatus::Fixed);
            }
            for (r, c) in free {
                put(&mut upper, &mut status, resolve(&layout, r, c)?, 0.0, EntryStatus::Learnable);
            }
        }
        Structure::Mask => {}
    }
    let trainable: Vec<bool> = status.iter().map(|&s| s == EntryStatus::Learnable).collect();
    let block = params.add_masked_block("bivector", upper, trainable);
    PodinnModel::new(layout, params, block, status, energy, resistors, observation, spec.mode, sk.n_aux)
}

/// Neural ODE over the observation and every recorded external column.
pub fn neural_ode(spec: &SystemSpec, opts: &ModelOptions) -> Result<NeuralOdeModel, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = ParamSet::new();
    let (d, e) = (spec.obs_dim(), spec.ext_dim());
    let net = network(&mut params, "F", d + e, &opts.hidden, d, &mut rng);
    NeuralOdeModel::new(params, net, d, e)
}
