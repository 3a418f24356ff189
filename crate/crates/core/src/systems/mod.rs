//! Ground-truth benchmark systems, trajectory generation and dataset files.
//!
//! Every system is simulated directly in its observation coordinates, so the
//! recorded trajectory is the integrated state itself.

mod generate;
mod io;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::components::ExternalSignal;
use crate::integrators::IntegratorError;

pub use generate::{generate, sample_inputs, simulate, GeneratedData, TrajectoryInputs};
pub use io::{read_dataset, write_dataset, Dataset, DatasetMeta, Trajectory, SCHEMA_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum SystemError {
    #[error("unknown system `{0}`; valid ids are a, a_abs, b, b_abs, c, d, e, f, g, toy1, toy2")]
    UnknownSystem(String),
    #[error("trajectory {traj}: {source}")]
    Integration { traj: usize, source: IntegratorError },
    #[error("trajectory {traj} has a non-finite observation at step {step}")]
    NonFinite { traj: usize, step: usize },
    #[error("dataset schema error: {0}")]
    Schema(String),
    #[error("invalid generation request: {0}")]
    Request(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemId {
    A,
    AAbs,
    B,
    BAbs,
    C,
    D,
    E,
    F,
    G,
    /// Linear mass-spring-damper chain used for structure-recovery studies;
    /// not one of the benchmark systems.
    Toy,
}

impl SystemId {
    pub const ALL: [SystemId; 9] = [
        SystemId::A,
        SystemId::AAbs,
        SystemId::B,
        SystemId::BAbs,
        SystemId::C,
        SystemId::D,
        SystemId::E,
        SystemId::F,
        SystemId::G,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemId::A => "a",
            SystemId::AAbs => "a_abs",
            SystemId::B => "b",
            SystemId::BAbs => "b_abs",
            SystemId::C => "c",
            SystemId::D => "d",
            SystemId::E => "e",
            SystemId::F => "f",
            SystemId::G => "g",
            SystemId::Toy => "toy",
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemId {
    type Err = SystemError;

    fn from_str(s: &str) -> Result<Self, SystemError> {
        SystemId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| SystemError::UnknownSystem(s.into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateMode {
    Relative,
    Absolute,
}

/// Spring force `k1·x + k3·x³`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spring {
    pub k1: f64,
    pub k3: f64,
}

impl Spring {
    pub fn force(&self, x: f64) -> f64 {
        self.k1 * x + self.k3 * x * x * x
    }

    pub fn energy(&self, x: f64) -> f64 {
        0.5 * self.k1 * x * x + 0.25 * self.k3 * x.powi(4)
    }
}

/// `d·sgn(v)|v|^{1/3}`
pub fn cube_root_damping(d: f64, v: f64) -> f64 {
    d * v.signum() * v.abs().cbrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Fixed wall, external force on the last mass.
    ForceOnLast,
    /// Wall moving with a prescribed position.
    MovingWall,
}

/// Masses in a line joined by springs, each spring optionally paired with a
/// parallel cube-root damper. Spring `i` joins mass `i−1` (or the wall) to
/// mass `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub masses: Vec<f64>,
    pub springs: Vec<Spring>,
    pub dampers: Vec<Option<f64>>,
    #[serde(default)]
    pub damping: DampingLaw,
    pub boundary: Boundary,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingLaw {
    /// `d·sgn(v)|v|^{1/3}`
    #[default]
    CubeRoot,
    /// `d·v`
    Linear,
}

impl DampingLaw {
    pub fn force(self, d: f64, v: f64) -> f64 {
        match self {
            DampingLaw::CubeRoot => cube_root_damping(d, v),
            DampingLaw::Linear => d * v,
        }
    }
}

/// Point masses in the plane joined to each other and to fixed anchors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarParams {
    pub masses: Vec<f64>,
    pub rest_positions: Vec<[f64; 2]>,
    pub springs: Vec<PlanarSpring>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Wall([f64; 2]),
    Mass(usize),
}

/// A spring whose end-to-end vector runs from `start` to the mass `end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarSpring {
    pub start: Anchor,
    pub end: usize,
    pub length: f64,
    pub law: Spring,
}

impl PlanarParams {
    fn anchor_rest(&self, a: Anchor) -> [f64; 2] {
        match a {
            Anchor::Wall(p) => p,
            Anchor::Mass(m) => self.rest_positions[m],
        }
    }

    /// End-to-end vector of spring `k` at rest.
    pub fn rest_vector(&self, k: usize) -> [f64; 2] {
        let s = &self.springs[k];
        let a = self.anchor_rest(s.start);
        let b = self.rest_positions[s.end];
        [b[0] - a[0], b[1] - a[1]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitzHughParams {
    pub capacitance: f64,
    pub inductance: f64,
    pub r2: f64,
    pub source: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChuaParams {
    pub alpha: f64,
    pub beta: f64,
    pub c2: f64,
    pub r1: f64,
    pub m0: f64,
    pub m1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotorParams {
    pub inductance: f64,
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub k: f64,
    pub friction: f64,
    pub resistance: f64,
}

impl MotorParams {
    pub fn inertia(&self) -> f64 {
        self.mass * self.length * self.length
    }

    pub fn mgl(&self) -> f64 {
        self.mass * self.gravity * self.length
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TankParams {
    pub area: f64,
    pub gravity: f64,
    pub density: f64,
    pub a1: f64,
    pub a2: f64,
    pub masses: [f64; 2],
    pub spring: Spring,
    pub dampers: [f64; 2],
}

impl TankParams {
    /// Hydraulic compliance `A/(ρg)`, so the tank energy is `V²/(2θ)`.
    pub fn compliance(&self) -> f64 {
        self.area / (self.density * self.gravity)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Physics {
    Chain(ChainParams),
    Planar(PlanarParams),
    FitzHugh(FitzHughParams),
    Chua(ChuaParams),
    Motor(MotorParams),
    Tank(TankParams),
}

/// Distribution of a sum of three sines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinesDist {
    pub amplitude: (f64, f64),
    pub omega: (f64, f64),
    pub phase: (f64, f64),
    pub terms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputDist {
    None,
    /// Sum-of-sines effort.
    Sines(SinesDist),
    /// Sum-of-sines boundary position; the effort is its rate, and absolute
    /// coordinates also record the position.
    BoundarySines(SinesDist),
    /// Constant per trajectory, evenly spaced over the range across
    /// trajectories.
    EvenlySpaced { lo: f64, hi: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub id: SystemId,
    pub dt: f64,
    /// VPT threshold.
    pub theta: f64,
    pub mode: CoordinateMode,
    pub obs_names: Vec<String>,
    pub ext_names: Vec<String>,
    pub physics: Physics,
    /// Uniform ranges for the sampled initial quantities (see [`generate`]).
    pub init: Vec<(f64, f64)>,
    pub input: InputDist,
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn sines(amplitude: (f64, f64), omega: (f64, f64)) -> SinesDist {
    SinesDist { amplitude, omega, phase: (0.0, 2.0 * std::f64::consts::PI), terms: 3 }
}

use std::f64::consts::PI;

impl SystemSpec {
    pub fn new(id: SystemId) -> SystemSpec {
        let chain_obs = |abs: bool| {
            if abs {
                names(&["x1", "x2", "x3", "v1", "v2", "v3"])
            } else {
                names(&["q1", "q2", "q3", "v1", "v2", "v3"])
            }
        };
        let chain_init = vec![(-0.5, 0.5); 3].into_iter().chain(vec![(-0.3, 0.3); 3]).collect::<Vec<_>>();
        let mode = if matches!(id, SystemId::AAbs | SystemId::BAbs) {
            CoordinateMode::Absolute
        } else {
            CoordinateMode::Relative
        };
        match id {
            SystemId::A | SystemId::AAbs => SystemSpec {
                id,
                dt: 0.1,
                theta: 1e-3,
                mode,
                obs_names: chain_obs(id == SystemId::AAbs),
                ext_names: names(&["F"]),
                physics: Physics::Chain(ChainParams {
                    // m_i = 0.8 + 0.2i, k_i = (0.1 + 0.1i)x + 0.1x³, d_i = 0.1 − 0.02i on springs 1 and 3
                    masses: vec![1.0, 1.2, 1.4],
                    springs: vec![
                        Spring { k1: 0.2, k3: 0.1 },
                        Spring { k1: 0.3, k3: 0.1 },
                        Spring { k1: 0.4, k3: 0.1 },
                    ],
                    dampers: vec![Some(0.08), None, Some(0.04)],
                    damping: DampingLaw::CubeRoot,
                    boundary: Boundary::ForceOnLast,
                }),
                init: chain_init,
                input: InputDist::Sines(sines((0.2, 0.5), (0.1 * PI, 0.2 * PI))),
            },
            SystemId::B | SystemId::BAbs => SystemSpec {
                id,
                dt: 0.1,
                theta: 1e-4,
                mode,
                obs_names: chain_obs(id == SystemId::BAbs),
                ext_names: if id == SystemId::BAbs { names(&["v_b", "q_b"]) } else { names(&["v_b"]) },
                physics: Physics::Chain(ChainParams {
                    // m_i = 1.6 − 0.2i, k_i = (0.6 − 0.1i)x + 0.1x³
                    masses: vec![1.4, 1.2, 1.0],
                    springs: vec![
                        Spring { k1: 0.5, k3: 0.1 },
                        Spring { k1: 0.4, k3: 0.1 },
                        Spring { k1: 0.3, k3: 0.1 },
                    ],
                    dampers: vec![Some(0.10), Some(0.05), Some(0.02)],
                    damping: DampingLaw::CubeRoot,
                    boundary: Boundary::MovingWall,
                }),
                init: chain_init,
                input: InputDist::BoundarySines(sines((0.2, 0.4), (0.05 * PI, 0.2 * PI))),
            },
            SystemId::C => {
                let spring = |start, end, length, k1, k3| PlanarSpring { start, end, length, law: Spring { k1, k3 } };
                let (wa, wb) = ([0.0, 3.0], [4.0, 3.0]);
                SystemSpec {
                    id,
                    dt: 0.1,
                    theta: 1e-3,
                    mode,
                    obs_names: names(&[
                        "q1x", "q1y", "q2x", "q2y", "q3x", "q3y", "q4x", "q4y", "q5x", "q5y", "v1x", "v1y", "v2x",
                        "v2y",
                    ]),
                    ext_names: vec![],
                    physics: Physics::Planar(PlanarParams {
                        masses: vec![5.0, 3.0],
                        rest_positions: vec![[0.0, 0.0], [4.0, 0.0]],
                        springs: vec![
                            spring(Anchor::Wall(wa), 0, 3.0, 2.5, 3.4),
                            spring(Anchor::Wall(wb), 1, 3.0, 3.0, 0.5),
                            spring(Anchor::Mass(0), 1, 4.0, 2.1, 4.1),
                            spring(Anchor::Wall(wa), 1, 5.0, 3.5, 2.4),
                            spring(Anchor::Wall(wb), 0, 5.0, 2.5, 1.6),
                        ],
                    }),
                    // position offsets of both masses, then velocities
                    init: vec![(-0.5, 0.5); 4].into_iter().chain(vec![(-0.1, 0.1); 4]).collect(),
                    input: InputDist::None,
                }
            }
            SystemId::D => SystemSpec {
                id,
                dt: 0.1,
                theta: 1e-3,
                mode,
                obs_names: names(&["V", "W"]),
                ext_names: names(&["J"]),
                physics: Physics::FitzHugh(FitzHughParams {
                    capacitance: 1.0,
                    inductance: 1.0 / 0.08,
                    r2: 0.8,
                    source: -0.7,
                }),
                init: vec![(-3.0, 3.0); 2],
                input: InputDist::EvenlySpaced { lo: 0.1, hi: 1.5 },
            },
            SystemId::E => SystemSpec {
                id,
                dt: 0.01,
                theta: 1e-3,
                mode,
                obs_names: names(&["V1", "V2", "I"]),
                ext_names: vec![],
                physics: Physics::Chua(ChuaParams {
                    alpha: 15.6,
                    beta: 28.0,
                    c2: 1.0,
                    r1: 1.0,
                    m0: -8.0 / 7.0,
                    m1: -5.0 / 7.0,
                }),
                init: vec![(-0.5, 0.5); 3],
                input: InputDist::None,
            },
            SystemId::F => SystemSpec {
                id,
                dt: 0.1,
                theta: 1e-4,
                mode,
                obs_names: names(&["theta", "omega", "I"]),
                ext_names: names(&["E"]),
                physics: Physics::Motor(MotorParams {
                    inductance: 2.5,
                    mass: 2.0,
                    length: 1.5,
                    gravity: 1.0,
                    k: 0.5,
                    friction: 0.02,
                    resistance: 0.05,
                }),
                init: vec![(-PI / 2.0, PI / 2.0), (-0.5, 0.5), (-0.5, 0.5)],
                input: InputDist::Sines(sines((0.2, 0.5), (0.1 * PI, 0.2 * PI))),
            },
            SystemId::Toy => SystemSpec::toy(2),
            SystemId::G => SystemSpec {
                id,
                dt: 0.1,
                theta: 1e-4,
                mode,
                obs_names: names(&["V", "q1", "q2", "v1", "v2"]),
                ext_names: names(&["F"]),
                physics: Physics::Tank(TankParams {
                    area: 5.0,
                    gravity: 1.0,
                    density: 10.0,
                    a1: 1.0,
                    a2: 0.3,
                    masses: [3.0, 1.0],
                    spring: Spring { k1: 0.1, k3: 0.01 },
                    // d_i = 0.1 − 0.04i
                    dampers: [0.06, 0.02],
                }),
                init: vec![(4.75, 5.25), (-10.3, -9.7), (5.7, 6.3), (-0.3, 0.3), (-0.3, 0.3)],
                input: InputDist::Sines(sines((0.05, 0.2), (0.1 * PI, 0.3 * PI))),
            },
        }
    }

    /// Linear chain of `n` masses (1 or 2) from a fixed wall with one linear
    /// damper parallel to the first spring and a sum-of-sines force on the
    /// last mass.
    pub fn toy(n: usize) -> SystemSpec {
        assert!((1..=2).contains(&n), "toy chain has one or two masses");
        let obs: Vec<String> =
            (1..=n).map(|i| format!("q{i}")).chain((1..=n).map(|i| format!("v{i}"))).collect();
        let mut dampers = vec![None; n];
        dampers[0] = Some(0.3);
        SystemSpec {
            id: SystemId::Toy,
            dt: 0.1,
            theta: 1e-3,
            mode: CoordinateMode::Relative,
            obs_names: obs,
            ext_names: names(&["F"]),
            physics: Physics::Chain(ChainParams {
                masses: [1.0, 1.5][..n].to_vec(),
                springs: [Spring { k1: 1.0, k3: 0.0 }, Spring { k1: 0.6, k3: 0.0 }][..n].to_vec(),
                dampers,
                damping: DampingLaw::Linear,
                boundary: Boundary::ForceOnLast,
            }),
            init: vec![(-1.0, 1.0); 2 * n],
            input: InputDist::Sines(sines((0.2, 0.5), (0.1 * PI, 0.3 * PI))),
        }
    }

    /// Looks up a benchmark id or `toy1` / `toy2`.
    pub fn by_name(name: &str) -> Result<SystemSpec, SystemError> {
        match name {
            "toy1" => Ok(SystemSpec::toy(1)),
            "toy2" => Ok(SystemSpec::toy(2)),
            _ => name.parse::<SystemId>().map(SystemSpec::new).map_err(|_| SystemError::UnknownSystem(name.to_string())),
        }
    }

    /// The specification a dataset was generated from.
    pub fn from_meta(meta: &DatasetMeta) -> Result<SystemSpec, SystemError> {
        let spec = match meta.system {
            SystemId::Toy => match meta.obs_names.len() {
                2 => SystemSpec::toy(1),
                4 => SystemSpec::toy(2),
                n => return Err(SystemError::Schema(format!("toy dataset with {n} observation columns"))),
            },
            id => SystemSpec::new(id),
        };
        if spec.obs_names != meta.obs_names || spec.ext_names != meta.ext_names {
            return Err(SystemError::Schema(format!("columns do not match system `{}`", meta.system.as_str())));
        }
        Ok(spec)
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_names.len()
    }

    pub fn ext_dim(&self) -> usize {
        self.ext_names.len()
    }
}

/// Right-hand side in observation coordinates. `ext` holds the current
/// values of the recorded external columns.
pub fn system_field(spec: &SystemSpec, x: &[f64], ext: &[f64], out: &mut [f64]) {
    assert_eq!(x.len(), spec.obs_dim(), "state dimension");
    assert_eq!(out.len(), x.len(), "output dimension");
    assert_eq!(ext.len(), spec.ext_dim(), "external dimension");
    match &spec.physics {
        Physics::Chain(p) => chain_field(p, spec.mode, x, ext, out),
        Physics::Planar(p) => planar_field(p, x, out),
        Physics::FitzHugh(p) => {
            let (v, w, j) = (x[0], x[1], ext[0]);
            let diode = v * v * v / 3.0 - v;
            out[0] = (-diode - w + j) / p.capacitance;
            out[1] = (v - p.r2 * w - p.source) / p.inductance;
        }
        Physics::Chua(p) => {
            let (v1, v2, i) = (x[0], x[1], x[2]);
            let diode = p.m1 * v1 + 0.5 * (p.m0 - p.m1) * ((v1 + 1.0).abs() - (v1 - 1.0).abs());
            out[0] = p.alpha * ((v2 - v1) / p.r1 - diode);
            out[1] = ((v1 - v2) / p.r1 + i) / p.c2;
            out[2] = -p.beta * v2;
        }
        Physics::Motor(p) => {
            let (th, om, i, e) = (x[0], x[1], x[2], ext[0]);
            out[0] = om;
            out[1] = (-p.mgl() * th.sin() + p.k * i - cube_root_damping(p.friction, om)) / p.inertia();
            out[2] = (-p.k * om + e - p.resistance * i * i * i) / p.inductance;
        }
        Physics::Tank(p) => {
            let (vol, q1, q2, v1, v2, f) = (x[0], x[1], x[2], x[3], x[4], ext[0]);
            let pressure = vol / p.compliance();
            out[0] = p.a1 * v1 - p.a2 * v2;
            out[1] = v1;
            out[2] = v2;
            out[3] = (-pressure * p.a1 - p.spring.force(q1) - cube_root_damping(p.dampers[0], v1)) / p.masses[0];
            out[4] = (pressure * p.a2 - p.spring.force(q2) - cube_root_damping(p.dampers[1], v2) + f) / p.masses[1];
        }
    }
}

/// Spring extensions of a chain state, given the wall position.
fn chain_extensions(n: usize, mode: CoordinateMode, x: &[f64], wall: f64) -> Vec<f64> {
    match mode {
        CoordinateMode::Relative => x[..n].to_vec(),
        CoordinateMode::Absolute => (0..n).map(|i| x[i] - if i == 0 { wall } else { x[i - 1] }).collect(),
    }
}

fn chain_field(p: &ChainParams, mode: CoordinateMode, x: &[f64], ext: &[f64], out: &mut [f64]) {
    let n = p.masses.len();
    let v = &x[n..2 * n];
    let (wall_v, wall_x, force) = match p.boundary {
        Boundary::ForceOnLast => (0.0, 0.0, ext[0]),
        Boundary::MovingWall => (ext[0], ext.get(1).copied().unwrap_or(0.0), 0.0),
    };
    let dq = chain_extensions(n, mode, x, wall_x);
    // extension rate and tension of each spring/damper pair
    let mut tension = vec![0.0; n];
    for i in 0..n {
        let prev_v = if i == 0 { wall_v } else { v[i - 1] };
        let rate = v[i] - prev_v;
        out[i] = match mode {
            CoordinateMode::Relative => rate,
            CoordinateMode::Absolute => v[i],
        };
        tension[i] = p.springs[i].force(dq[i]) + p.dampers[i].map_or(0.0, |d| p.damping.force(d, rate));
    }
    for i in 0..n {
        let next = if i + 1 < n { tension[i + 1] } else { 0.0 };
        let mut f = -tension[i] + next;
        if i == n - 1 {
            f += force;
        }
        out[n + i] = f / p.masses[i];
    }
}

fn planar_field(p: &PlanarParams, x: &[f64], out: &mut [f64]) {
    let ns = p.springs.len();
    let nm = p.masses.len();
    let v = &x[2 * ns..2 * ns + 2 * nm];
    let mut force = vec![0.0; 2 * nm];
    for (k, s) in p.springs.iter().enumerate() {
        let rest = p.rest_vector(k);
        let r = [rest[0] + x[2 * k], rest[1] + x[2 * k + 1]];
        let rho = (r[0] * r[0] + r[1] * r[1]).sqrt();
        let tension = s.law.force(rho - s.length) / rho;
        let (end_vx, end_vy) = (v[2 * s.end], v[2 * s.end + 1]);
        let (start_vx, start_vy) = match s.start {
            Anchor::Wall(_) => (0.0, 0.0),
            Anchor::Mass(m) => (v[2 * m], v[2 * m + 1]),
        };
        out[2 * k] = end_vx - start_vx;
        out[2 * k + 1] = end_vy - start_vy;
        force[2 * s.end] -= tension * r[0];
        force[2 * s.end + 1] -= tension * r[1];
        if let Anchor::Mass(m) = s.start {
            force[2 * m] += tension * r[0];
            force[2 * m + 1] += tension * r[1];
        }
    }
    for m in 0..nm {
        out[2 * ns + 2 * m] = force[2 * m] / p.masses[m];
        out[2 * ns + 2 * m + 1] = force[2 * m + 1] / p.masses[m];
    }
}

/// Total stored energy of a state in observation coordinates.
pub fn system_energy(spec: &SystemSpec, x: &[f64], ext: &[f64]) -> f64 {
    match &spec.physics {
        Physics::Chain(p) => {
            let n = p.masses.len();
            let wall = match p.boundary {
                Boundary::MovingWall => ext.get(1).copied().unwrap_or(0.0),
                Boundary::ForceOnLast => 0.0,
            };
            let dq = chain_extensions(n, spec.mode, x, wall);
            (0..n).map(|i| 0.5 * p.masses[i] * x[n + i].powi(2) + p.springs[i].energy(dq[i])).sum()
        }
        Physics::Planar(p) => {
            let ns = p.springs.len();
            let mut h = 0.0;
            for (k, s) in p.springs.iter().enumerate() {
                let rest = p.rest_vector(k);
                let r = [rest[0] + x[2 * k], rest[1] + x[2 * k + 1]];
                h += s.law.energy((r[0] * r[0] + r[1] * r[1]).sqrt() - s.length);
            }
            for (m, mass) in p.masses.iter().enumerate() {
                h += 0.5 * mass * (x[2 * ns + 2 * m].powi(2) + x[2 * ns + 2 * m + 1].powi(2));
            }
            h
        }
        Physics::FitzHugh(p) => 0.5 * p.capacitance * x[0].powi(2) + 0.5 * p.inductance * x[1].powi(2),
        Physics::Chua(p) => 0.5 / p.alpha * x[0].powi(2) + 0.5 * p.c2 * x[1].powi(2) + 0.5 / p.beta * x[2].powi(2),
        Physics::Motor(p) => {
            -p.mgl() * x[0].cos() + 0.5 * p.inertia() * x[1].powi(2) + 0.5 * p.inductance * x[2].powi(2)
        }
        Physics::Tank(p) => {
            0.5 * x[0].powi(2) / p.compliance()
                + p.spring.energy(x[1])
                + p.spring.energy(x[2])
                + 0.5 * p.masses[0] * x[3].powi(2)
                + 0.5 * p.masses[1] * x[4].powi(2)
        }
    }
}

/// Inputs for one trajectory drawn from the spec's input distribution.
pub(crate) fn external_signals(spec: &SystemSpec, terms: Vec<crate::components::SineTerm>, constant: f64) -> Vec<ExternalSignal> {
    match &spec.input {
        InputDist::None => vec![],
        InputDist::Sines(_) => vec![ExternalSignal::SumOfSines { terms }],
        InputDist::BoundarySines(_) => {
            let mut v = vec![ExternalSignal::SumOfSinesRate { terms: terms.clone() }];
            if spec.mode == CoordinateMode::Absolute {
                v.push(ExternalSignal::SumOfSines { terms });
            }
            v
        }
        InputDist::EvenlySpaced { .. } => vec![ExternalSignal::Constant { value: constant }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_table() {
        let Physics::Chain(a) = SystemSpec::new(SystemId::A).physics else { panic!() };
        for i in 1..=3 {
            let fi = i as f64;
            assert!((a.masses[i - 1] - (0.8 + 0.2 * fi)).abs() < 1e-15);
            assert!((a.springs[i - 1].k1 - (0.1 + 0.1 * fi)).abs() < 1e-15);
            assert_eq!(a.springs[i - 1].k3, 0.1);
        }
        assert_eq!(a.dampers, vec![Some(0.08), None, Some(0.04)]);

        let Physics::Chain(b) = SystemSpec::new(SystemId::B).physics else { panic!() };
        for i in 1..=3 {
            let fi = i as f64;
            assert!((b.masses[i - 1] - (1.6 - 0.2 * fi)).abs() < 1e-15);
            assert!((b.springs[i - 1].k1 - (0.6 - 0.1 * fi)).abs() < 1e-15);
        }
        assert_eq!(b.dampers, vec![Some(0.10), Some(0.05), Some(0.02)]);

        let Physics::Planar(c) = SystemSpec::new(SystemId::C).physics else { panic!() };
        assert_eq!(c.masses, vec![5.0, 3.0]);
        let laws: Vec<(f64, f64, f64)> = c.springs.iter().map(|s| (s.length, s.law.k1, s.law.k3)).collect();
        assert_eq!(laws, vec![(3.0, 2.5, 3.4), (3.0, 3.0, 0.5), (4.0, 2.1, 4.1), (5.0, 3.5, 2.4), (5.0, 2.5, 1.6)]);
        for k in 0..5 {
            let r = c.rest_vector(k);
            assert!(((r[0] * r[0] + r[1] * r[1]).sqrt() - c.springs[k].length).abs() < 1e-15);
        }

        let Physics::FitzHugh(d) = SystemSpec::new(SystemId::D).physics else { panic!() };
        assert_eq!((d.capacitance, d.inductance, d.r2, d.source), (1.0, 12.5, 0.8, -0.7));
        let Physics::Chua(e) = SystemSpec::new(SystemId::E).physics else { panic!() };
        assert_eq!((e.alpha, e.beta, e.m0, e.m1), (15.6, 28.0, -8.0 / 7.0, -5.0 / 7.0));
        assert_eq!(SystemSpec::new(SystemId::E).dt, 0.01);
        let Physics::Motor(f) = SystemSpec::new(SystemId::F).physics else { panic!() };
        assert_eq!((f.inductance, f.mass, f.length, f.gravity, f.k), (2.5, 2.0, 1.5, 1.0, 0.5));
        assert_eq!((f.friction, f.resistance), (0.02, 0.05));
        let Physics::Tank(g) = SystemSpec::new(SystemId::G).physics else { panic!() };
        assert_eq!((g.area, g.gravity, g.density, g.a1, g.a2), (5.0, 1.0, 10.0, 1.0, 0.3));
        assert_eq!(g.masses, [3.0, 1.0]);
        assert_eq!(g.dampers, [0.06, 0.02]);
        assert_eq!((g.spring.k1, g.spring.k3), (0.1, 0.01));

        let thetas: Vec<f64> = SystemId::ALL.iter().map(|&id| SystemSpec::new(id).theta).collect();
        assert_eq!(thetas, vec![1e-3, 1e-3, 1e-4, 1e-4, 1e-3, 1e-3, 1e-3, 1e-4, 1e-4]);
    }

    #[test]
    fn id_parsing() {
        for id in SystemId::ALL {
            assert_eq!(id.as_str().parse::<SystemId>().unwrap(), id);
        }
        let err = "h".parse::<SystemId>().unwrap_err().to_string();
        assert!(err.contains("a, a_abs, b, b_abs, c, d, e, f, g"));
    }

    #[test]
    fn motor_field_example() {
        let spec = SystemSpec::new(SystemId::F);
        let mut out = [0.0; 3];
        system_field(&spec, &[0.0, 0.0, 1.0], &[0.0], &mut out);
        assert!((out[1] - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn fitzhugh_field_example() {
        let spec = SystemSpec::new(SystemId::D);
        let mut out = [0.0; 2];
        system_field(&spec, &[0.0, 0.0], &[0.0], &mut out);
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.056).abs() < 1e-15);
    }

    #[test]
    fn tank_without_piston_motion_keeps_volume() {
        let spec = SystemSpec::new(SystemId::G);
        let mut out = [0.0; 5];
        system_field(&spec, &[5.0, -10.0, 6.0, 0.0, 0.0], &[0.3], &mut out);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn chain_modes_agree() {
        // the same physical state in relative and absolute coordinates
        let rel = SystemSpec::new(SystemId::B);
        let abs = SystemSpec::new(SystemId::BAbs);
        let (qb, vb) = (0.3, -0.2);
        let dq = [0.1, -0.2, 0.3];
        let v = [0.05, -0.1, 0.2];
        let x = [qb + dq[0], qb + dq[0] + dq[1], qb + dq[0] + dq[1] + dq[2]];
        let mut r = [0.0; 6];
        let mut a = [0.0; 6];
        system_field(&rel, &[dq[0], dq[1], dq[2], v[0], v[1], v[2]], &[vb], &mut r);
        system_field(&abs, &[x[0], x[1], x[2], v[0], v[1], v[2]], &[vb, qb], &mut a);
        assert!((r[0] - (v[0] - vb)).abs() < 1e-15);
        assert_eq!(&a[..3], &v);
        for i in 3..6 {
            assert!((r[i] - a[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn energy_rate_matches_dissipation_and_input_power() {
        // d/dt H = F·v3 − Σ damper power for system (a)
        let spec = SystemSpec::new(SystemId::A);
        let Physics::Chain(p) = &spec.physics else { panic!() };
        let x = [0.2, -0.1, 0.3, 0.4, -0.2, 0.1];
        let f = [0.7];
        let mut rate = [0.0; 6];
        system_field(&spec, &x, &f, &mut rate);
        let h = 1e-6;
        let plus: Vec<f64> = x.iter().zip(&rate).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = x.iter().zip(&rate).map(|(a, b)| a - h * b).collect();
        let dh = (system_energy(&spec, &plus, &f) - system_energy(&spec, &minus, &f)) / (2.0 * h);
        let damp = cube_root_damping(p.dampers[0].unwrap(), x[3]) * x[3]
            + cube_root_damping(p.dampers[2].unwrap(), x[5] - x[4]) * (x[5] - x[4]);
        assert!((dh - (f[0] * x[5] - damp)).abs() < 1e-8);
    }

    #[test]
    fn lookup_by_name_and_by_dataset_metadata() {
        assert_eq!(SystemSpec::by_name("g").unwrap().id, SystemId::G);
        assert_eq!(SystemSpec::by_name("toy1").unwrap().obs_dim(), 2);
        assert!(matches!(SystemSpec::by_name("h"), Err(SystemError::UnknownSystem(_))));

        let spec = SystemSpec::toy(2);
        let mut meta = DatasetMeta {
            schema_version: 1,
            system: spec.id,
            dt: spec.dt,
            n_traj: 1,
            n_steps: 1,
            seed: 0,
            theta: spec.theta,
            obs_names: spec.obs_names.clone(),
            ext_names: spec.ext_names.clone(),
            config_hash: None,
        };
        assert_eq!(SystemSpec::from_meta(&meta).unwrap().obs_names, spec.obs_names);
        meta.obs_names.swap(0, 1);
        assert!(matches!(SystemSpec::from_meta(&meta), Err(SystemError::Schema(_))));
        meta.obs_names.pop();
        assert!(matches!(SystemSpec::from_meta(&meta), Err(SystemError::Schema(_))));
    }
}
