//! Port layouts, the skew bivector and its bundle map.
//!
//! The combined flow basis is ordered storage, resistive, external. A bivector
//! entry `(i, j)` with value `c` means flow `i` receives `c·e_j` and flow `j`
//! receives `−c·e_i`. In wedge notation, `c ∂a∧∂b` is the entry `(b, a) = c`.

use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bivector has {bivector} ports but the layout has {layout}")]
    LayoutMismatch { bivector: usize, layout: usize },
    #[error("resistive ports {0} and {1} are coupled, which makes the dynamics implicit")]
    ResistiveLoop(String, String),
    #[error("unknown port `{0}`")]
    UnknownPort(String),
    #[error("coupling {0}–{1} is not admissible for this layout")]
    Incompatible(String, String),
}

/// Physical quantity carried by a flow or effort.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    Force,
    Velocity,
    Torque,
    AngularVelocity,
    Voltage,
    Current,
    Pressure,
    VolumeRate,
}

impl Quantity {
    /// The power-conjugate quantity.
    pub fn conjugate(self) -> Quantity {
        use Quantity::*;
        match self {
            Force => Velocity,
            Velocity => Force,
            Torque => AngularVelocity,
            AngularVelocity => Torque,
            Voltage => Current,
            Current => Voltage,
            Pressure => VolumeRate,
            VolumeRate => Pressure,
        }
    }
}

/// Energy-storage subdomain of a storage coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    MechPotential,
    MechKinetic,
    RotPotential,
    RotKinetic,
    Electric,
    Magnetic,
    Hydraulic,
}

impl Domain {
    pub fn flow(self) -> Quantity {
        use Domain::*;
        match self {
            MechPotential => Quantity::Velocity,
            MechKinetic => Quantity::Force,
            RotPotential => Quantity::AngularVelocity,
            RotKinetic => Quantity::Torque,
            Electric => Quantity::Current,
            Magnetic => Quantity::Voltage,
            Hydraulic => Quantity::VolumeRate,
        }
    }

    pub fn effort(self) -> Quantity {
        self.flow().conjugate()
    }

    pub fn is_kinetic(self) -> bool {
        matches!(self, Domain::MechKinetic | Domain::RotKinetic | Domain::Magnetic)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoragePort {
    pub name: String,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResistivePort {
    pub name: String,
    pub flow: Quantity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalPort {
    pub name: String,
    pub effort: Quantity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PortClass {
    Storage,
    Resistive,
    External,
}

/// Typed description of the storage, resistive and external port spaces.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PortLayout {
    pub storage: Vec<StoragePort>,
    pub resistive: Vec<ResistivePort>,
    pub external: Vec<ExternalPort>,
}

impl PortLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_storage(mut self, name: &str, domain: Domain) -> Self {
        self.storage.push(StoragePort { name: name.into(), domain });
        self
    }

    pub fn with_resistive(mut self, name: &str, flow: Quantity) -> Self {
        self.resistive.push(ResistivePort { name: name.into(), flow });
        self
    }

    pub fn with_external(mut self, name: &str, effort: Quantity) -> Self {
        self.external.push(ExternalPort { name: name.into(), effort });
        self
    }

    pub fn n_s(&self) -> usize {
        self.storage.len()
    }

    pub fn n_r(&self) -> usize {
        self.resistive.len()
    }

    pub fn n_i(&self) -> usize {
        self.external.len()
    }

    pub fn dim(&self) -> usize {
        self.n_s() + self.n_r() + self.n_i()
    }

    pub fn s_range(&self) -> Range<usize> {
        0..self.n_s()
    }

    pub fn r_range(&self) -> Range<usize> {
        self.n_s()..self.n_s() + self.n_r()
    }

    pub fn i_range(&self) -> Range<usize> {
        self.n_s() + self.n_r()..self.dim()
    }

    pub fn class(&self, i: usize) -> PortClass {
        assert!(i < self.dim(), "port index {i} out of range");
        if i < self.n_s() {
            PortClass::Storage
        } else if i < self.n_s() + self.n_r() {
            PortClass::Resistive
        } else {
            PortClass::External
        }
    }

    pub fn name(&self, i: usize) -> &str {
        match self.class(i) {
            PortClass::Storage => &self.storage[i].name,
            PortClass::Resistive => &self.resistive[i - self.n_s()].name,
            PortClass::External => &self.external[i - self.n_s() - self.n_r()].name,
        }
    }

    pub fn names(&self) -> Vec<&str> {
        (0..self.dim()).map(|i| self.name(i)).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize, GeometryError> {
        (0..self.dim())
            .find(|&i| self.name(i) == name)
            .ok_or_else(|| GeometryError::UnknownPort(name.into()))
    }

    pub fn flow_kind(&self, i: usize) -> Quantity {
        match self.class(i) {
            PortClass::Storage => self.storage[i].domain.flow(),
            PortClass::Resistive => self.resistive[i - self.n_s()].flow,
            PortClass::External => self.external[i - self.n_s() - self.n_r()].effort.conjugate(),
        }
    }

    pub fn effort_kind(&self, i: usize) -> Quantity {
        self.flow_kind(i).conjugate()
    }

    /// Whether ports `i` and `j` may share a non-zero bivector entry.
    ///
    /// A coupling routes the effort of one port into the flow of the other, so
    /// the quantities must agree. Gyrator (magnetic/rotational-kinetic) and
    /// transformer (mechanical-kinetic/hydraulic) storage pairs are admitted
    /// across domains. Resistive–resistive and external–external pairs are not.
    pub fn compatible(&self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        let (ci, cj) = (self.class(i), self.class(j));
        if ci == cj && ci != PortClass::Storage {
            return false;
        }
        if ci == PortClass::Storage && cj == PortClass::Storage {
            let (a, b) = (self.storage[i].domain, self.storage[j].domain);
            let cross = |x: Domain, y: Domain| (a == x && b == y) || (a == y && b == x);
            if cross(Domain::Magnetic, Domain::RotKinetic) || cross(Domain::MechKinetic, Domain::Hydraulic) {
                return true;
            }
        }
        self.flow_kind(i) == self.effort_kind(j)
    }

    /// Symmetric admissibility mask over the combined basis.
    pub fn mask(&self) -> Array2<bool> {
        let n = self.dim();
        Array2::from_shape_fn((n, n), |(i, j)| self.compatible(i, j))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryStatus {
    FixedZero,
    Fixed,
    Learnable,
}

/// One stored upper-triangle entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BivectorEntry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
    pub status: EntryStatus,
}

#[derive(Serialize, Deserialize)]
struct BivectorRepr {
    n: usize,
    entries: Vec<BivectorEntry>,
}

/// Constant skew bivector stored as its strict upper triangle.
///
/// Serialized form lists only entries that are not fixed-zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "BivectorRepr", try_from = "BivectorRepr")]
pub struct Bivector {
    upper: Array2<f64>,
    status: Array2<EntryStatus>,
}

impl From<Bivector> for BivectorRepr {
    fn from(b: Bivector) -> Self {
        BivectorRepr { n: b.dim(), entries: b.entries().collect() }
    }
}

impl TryFrom<BivectorRepr> for Bivector {
    type Error = String;

    fn try_from(r: BivectorRepr) -> Result<Self, String> {
        let mut b = Bivector::zeros(r.n);
        for e in r.entries {
            if e.row >= e.col || e.col >= r.n {
                return Err(format!("entry ({}, {}) is not in the strict upper triangle", e.row, e.col));
            }
            if e.status == EntryStatus::FixedZero && e.value != 0.0 {
                return Err(format!("fixed-zero entry ({}, {}) has value {}", e.row, e.col, e.value));
            }
            b.upper[[e.row, e.col]] = e.value;
            b.status[[e.row, e.col]] = e.status;
        }
        Ok(b)
    }
}

impl Bivector {
    pub fn zeros(n: usize) -> Self {
        Bivector { upper: Array2::zeros((n, n)), status: Array2::from_elem((n, n), EntryStatus::FixedZero) }
    }

    /// Builds a fully fixed bivector from an arbitrary matrix's skew part
    /// `(m − mᵀ)/2`.
    pub fn from_matrix(m: ArrayView2<f64>) -> Self {
        let n = m.nrows();
        assert_eq!(m.ncols(), n, "bivector matrix must be square");
        let mut b = Bivector::zeros(n);
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (m[[i, j]] - m[[j, i]]);
                if v != 0.0 {
                    b.upper[[i, j]] = v;
                    b.status[[i, j]] = EntryStatus::Fixed;
                }
            }
        }
        b
    }

    /// Rebuilds a bivector from a stored `n × n` upper block and statuses.
    pub fn from_upper(upper: ArrayView2<f64>, status: Array2<EntryStatus>) -> Self {
        let n = upper.nrows();
        assert_eq!(upper.dim(), (n, n));
        assert_eq!(status.dim(), (n, n));
        let mut u = Array2::zeros((n, n));
        for i in 0..n {
            for j in i + 1..n {
                u[[i, j]] = upper[[i, j]];
            }
        }
        Bivector { upper: u, status }
    }

    pub fn dim(&self) -> usize {
        self.upper.nrows()
    }

    fn key(i: usize, j: usize) -> (usize, usize, f64) {
        assert_ne!(i, j, "diagonal bivector entries are always zero");
        if i < j {
            (i, j, 1.0)
        } else {
            (j, i, -1.0)
        }
    }

    /// Matrix entry `B[i][j]`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let (a, b, sign) = Self::key(i, j);
        sign * self.upper[[a, b]]
    }

    pub fn status(&self, i: usize, j: usize) -> EntryStatus {
        if i == j {
            return EntryStatus::FixedZero;
        }
        let (a, b, _) = Self::key(i, j);
        self.status[[a, b]]
    }

    /// Sets `B[i][j] = value` (and `B[j][i] = −value`) with the given status.
    pub fn set(&mut self, i: usize, j: usize, value: f64, status: EntryStatus) {
        let (a, b, sign) = Self::key(i, j);
        assert!(
            status != EntryStatus::FixedZero || value == 0.0,
            "fixed-zero entries must hold 0"
        );
        self.upper[[a, b]] = sign * value;
        self.status[[a, b]] = status;
    }

    /// Overwrites the value of an existing entry, keeping its status.
    pub fn set_value(&mut self, i: usize, j: usize, value: f64) {
        let (a, b, sign) = Self::key(i, j);
        assert!(self.status[[a, b]] != EntryStatus::FixedZero, "cannot write a fixed-zero entry");
        self.upper[[a, b]] = sign * value;
    }

    /// Strict upper triangle as an `n × n` array (zeros elsewhere).
    pub fn upper(&self) -> &Array2<f64> {
        &self.upper
    }

    pub fn status_matrix(&self) -> &Array2<EntryStatus> {
        &self.status
    }

    /// Upper-triangle entries that are not fixed-zero.
    pub fn entries(&self) -> impl Iterator<Item = BivectorEntry> + '_ {
        let n = self.dim();
        (0..n)
            .flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.status[[i, j]] != EntryStatus::FixedZero)
            .map(|(i, j)| BivectorEntry { row: i, col: j, value: self.upper[[i, j]], status: self.status[[i, j]] })
    }

    /// The full skew matrix.
    pub fn matrix(&self) -> Array2<f64> {
        &self.upper - &self.upper.t()
    }

    pub fn scaled(&self, factor: f64) -> Bivector {
        Bivector { upper: &self.upper * factor, status: self.status.clone() }
    }

    /// Fails if any non-zero entry joins two ports `layout` declares
    /// incompatible.
    pub fn check_admissible(&self, layout: &PortLayout) -> Result<(), GeometryError> {
        check_layout(self, layout)?;
        for e in self.entries() {
            if e.value != 0.0 && !layout.compatible(e.row, e.col) {
                return Err(GeometryError::Incompatible(layout.name(e.row).into(), layout.name(e.col).into()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Bivector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.matrix();
        for row in m.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>9.4}")).collect();
            writeln!(f, "[{}]", cells.join(" "))?;
        }
        Ok(())
    }
}

fn check_layout(b: &Bivector, layout: &PortLayout) -> Result<(), GeometryError> {
    if b.dim() != layout.dim() {
        return Err(GeometryError::LayoutMismatch { bivector: b.dim(), layout: layout.dim() });
    }
    Ok(())
}

/// `f = B·e`.
pub fn bundle_map_apply(b: &Bivector, e: &[f64]) -> Result<Vec<f64>, GeometryError> {
    let n = b.dim();
    if e.len() != n {
        return Err(GeometryError::DimensionMismatch { expected: n, got: e.len() });
    }
    let u = b.upper();
    let mut f = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let c = u[[i, j]];
            if c != 0.0 {
                f[i] += c * e[j];
                f[j] -= c * e[i];
            }
        }
    }
    Ok(f)
}

/// `Σ eᵢ fᵢ`.
pub fn pairing(e: &[f64], f: &[f64]) -> Result<f64, GeometryError> {
    if e.len() != f.len() {
        return Err(GeometryError::DimensionMismatch { expected: e.len(), got: f.len() });
    }
    Ok(e.iter().zip(f).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Degeneracy {
    pub rank: usize,
    /// Descending.
    pub singular_values: Vec<f64>,
    /// Orthonormal basis of the kernel, one vector per row.
    pub nullspace: Vec<Vec<f64>>,
}

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Numerical rank and kernel of a square matrix via SVD.
pub fn numerical_rank(m: ArrayView2<f64>) -> Degeneracy {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return Degeneracy { rank: 0, singular_values: vec![], nullspace: vec![] };
    }
    let dm = DMatrix::from_fn(rows, cols, |i, j| m[[i, j]]);
    let svd = dm.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let largest = sv.first().copied().unwrap_or(0.0);
    let rank = if largest == 0.0 { 0 } else { sv.iter().filter(|&&s| s > RANK_TOLERANCE * largest).count() };

    // Kernel: right singular vectors with negligible singular values, plus
    // the complement when the matrix is wide.
    let mut nullspace: Vec<Vec<f64>> =
        order[rank..].iter().map(|&k| v_t.row(k).iter().copied().collect()).collect();
    if v_t.nrows() < cols {
        nullspace.extend(complement(&v_t, cols));
    }
    Degeneracy { rank, singular_values: sv, nullspace }
}

/// Orthonormal complement of the row space of `v` in `ℝ^cols`.
fn complement(v: &DMatrix<f64>, cols: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = v.row_iter().map(|r| r.iter().copied().collect()).collect();
    let mut out = Vec::new();
    for k in 0..cols {
        let mut x = vec![0.0; cols];
        x[k] = 1.0;
        for b in &basis {
            let d: f64 = x.iter().zip(b).map(|(a, c)| a * c).sum();
            x.iter_mut().zip(b).for_each(|(a, c)| *a -= d * c);
        }
        let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            x.iter_mut().for_each(|a| *a /= norm);
            basis.push(x.clone());
            out.push(x);
        }
    }
    out
}

/// Rank and kernel of the storage–storage block.
pub fn degeneracy_rank(b: &Bivector, layout: &PortLayout) -> Result<Degeneracy, GeometryError> {
    check_layout(b, layout)?;
    let m = b.matrix();
    let s = layout.s_range();
    Ok(numerical_rank(m.slice(s![s.clone(), s])))
}

/// Blocks used by the explicit evaluation order.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalBlocks {
    pub ss: Array2<f64>,
    pub sr: Array2<f64>,
    pub si: Array2<f64>,
    pub rs: Array2<f64>,
    pub ri: Array2<f64>,
    /// Reaction-flow blocks, only needed for power bookkeeping.
    pub is: Array2<f64>,
    pub ir: Array2<f64>,
}

pub fn causal_blocks(b: &Bivector, layout: &PortLayout) -> Result<CausalBlocks, GeometryError> {
    check_layout(b, layout)?;
    let r = layout.r_range();
    for i in r.clone() {
        for j in i + 1..r.end {
            if b.get(i, j) != 0.0 {
                return Err(GeometryError::ResistiveLoop(layout.name(i).into(), layout.name(j).into()));
            }
        }
    }
    let m = b.matrix();
    let (sr, rr, ir) = (layout.s_range(), layout.r_range(), layout.i_range());
    let blk = |a: &Range<usize>, c: &Range<usize>| m.slice(s![a.clone(), c.clone()]).to_owned();
    Ok(CausalBlocks {
        ss: blk(&sr, &sr),
        sr: blk(&sr, &rr),
        si: blk(&sr, &ir),
        rs: blk(&rr, &sr),
        ri: blk(&rr, &ir),
        is: blk(&ir, &sr),
        ir: blk(&ir, &rr),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn chain_layout() -> PortLayout {
        PortLayout::new()
            .with_storage("q1", Domain::MechPotential)
            .with_storage("q2", Domain::MechPotential)
            .with_storage("p1", Domain::MechKinetic)
            .with_storage("p2", Domain::MechKinetic)
    }

    /// B = ∂p₁∧∂q₁ − ∂p₁∧∂q₂ + ∂p₂∧∂q₂
    fn chain() -> Bivector {
        let mut b = Bivector::zeros(4);
        b.set(0, 2, 1.0, EntryStatus::Fixed);
        b.set(1, 2, -1.0, EntryStatus::Fixed);
        b.set(1, 3, 1.0, EntryStatus::Fixed);
        b
    }

    #[test]
    fn chain_matrix_matches_equations_of_motion() {
        let want = array![
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, -1.0, 1.0],
            [-1.0, 1.0, 0.0, 0.0],
            [0.0, -1.0, 0.0, 0.0]
        ];
        assert_eq!(chain().matrix(), want);
        assert_eq!(bundle_map_apply(&chain(), &[1.0, 0.0, 0.0, 0.0]).unwrap(), vec![0.0, 0.0, -1.0, 0.0]);
        assert_eq!(bundle_map_apply(&chain(), &[0.0; 4]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn canonical_pair() {
        let mut b = Bivector::zeros(2);
        b.set(0, 1, 1.0, EntryStatus::Fixed);
        let (a, c) = (0.7, -1.3);
        assert_eq!(bundle_map_apply(&b, &[a, c]).unwrap(), vec![c, -a]);
    }

    #[test]
    fn bundle_map_rejects_wrong_dimension() {
        assert_eq!(
            bundle_map_apply(&chain(), &[1.0]).unwrap_err(),
            GeometryError::DimensionMismatch { expected: 4, got: 1 }
        );
    }

    #[test]
    fn pairing_examples() {
        assert_eq!(pairing(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(pairing(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(pairing(&[1.0, 2.0], &[2.0, -1.0]).unwrap(), 0.0);
        assert!(pairing(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn constrained_pair_is_rank_two() {
        // ½(∂p₁+∂p₂)∧(∂q₁+∂q₂) written out entry by entry
        let m = array![
            [0.0, 0.0, 0.5, 0.5],
            [0.0, 0.0, 0.5, 0.5],
            [-0.5, -0.5, 0.0, 0.0],
            [-0.5, -0.5, 0.0, 0.0]
        ];
        let b = Bivector::from_matrix(m.view());
        assert_eq!(b.matrix(), m);
        let d = degeneracy_rank(&b, &chain_layout()).unwrap();
        assert_eq!(d.rank, 2);
        assert_eq!(d.nullspace.len(), 2);
        for v in &d.nullspace {
            let mv = bundle_map_apply(&b, v).unwrap();
            assert!(mv.iter().all(|x| x.abs() < 1e-12));
            // kernel is spanned by q₁−q₂ and p₁−p₂
            assert!((v[0] + v[1]).abs() < 1e-12);
            assert!((v[2] + v[3]).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_is_full_rank_and_zero_is_rank_zero() {
        let n = 3;
        let mut b = Bivector::zeros(2 * n);
        for i in 0..n {
            b.set(i, n + i, 1.0, EntryStatus::Fixed);
        }
        let d = numerical_rank(b.matrix().view());
        assert_eq!(d.rank, 2 * n);
        assert!(d.nullspace.is_empty());
        let z = numerical_rank(Bivector::zeros(4).matrix().view());
        assert_eq!(z.rank, 0);
        assert_eq!(z.nullspace.len(), 4);
    }

    #[test]
    fn rank_is_taken_over_the_storage_block_only() {
        let layout = chain_layout().with_resistive("d1", Quantity::Velocity);
        let mut b = Bivector::zeros(5);
        b.set(0, 2, 1.0, EntryStatus::Fixed);
        b.set(4, 2, 1.0, EntryStatus::Fixed);
        assert_eq!(degeneracy_rank(&b, &layout).unwrap().rank, 2);
        assert!(degeneracy_rank(&b, &chain_layout()).is_err());
    }

    fn spring_damper_layout() -> PortLayout {
        PortLayout::new()
            .with_storage("q", Domain::MechPotential)
            .with_storage("p", Domain::MechKinetic)
            .with_resistive("d", Quantity::Velocity)
    }

    #[test]
    fn causal_block_extraction() {
        let mut b = Bivector::zeros(3);
        b.set(0, 2, 0.5, EntryStatus::Learnable);
        let blocks = causal_blocks(&b, &spring_damper_layout()).unwrap();
        assert_eq!(blocks.sr, array![[0.5], [0.0]]);
        assert_eq!(blocks.rs, array![[-0.5, 0.0]]);
        assert_eq!(blocks.si.dim(), (2, 0));
        assert_eq!(blocks.ri.dim(), (1, 0));

        let z = causal_blocks(&Bivector::zeros(3), &spring_damper_layout()).unwrap();
        assert!(z.ss.iter().chain(z.sr.iter()).chain(z.rs.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn resistive_loops_are_rejected() {
        let layout = spring_damper_layout().with_resistive("d2", Quantity::Velocity);
        let mut b = Bivector::zeros(4);
        b.set(2, 3, 1.0, EntryStatus::Fixed);
        assert_eq!(
            causal_blocks(&b, &layout).unwrap_err(),
            GeometryError::ResistiveLoop("d".into(), "d2".into())
        );
        assert!(matches!(
            causal_blocks(&Bivector::zeros(2), &layout),
            Err(GeometryError::LayoutMismatch { bivector: 2, layout: 4 })
        ));
    }

    #[test]
    fn mechanical_mask() {
        let l = chain_layout()
            .with_resistive("d1", Quantity::Velocity)
            .with_resistive("d2", Quantity::Velocity)
            .with_external("F", Quantity::Force)
            .with_external("vb", Quantity::Velocity);
        let ix = |n: &str| l.index_of(n).unwrap();
        let ok = |a: &str, b: &str| l.compatible(ix(a), ix(b));
        assert!(ok("p1", "q1") && ok("p1", "q2") && ok("p2", "q1"));
        assert!(!ok("p1", "p2"), "masses never couple directly");
        assert!(!ok("q1", "q2"));
        assert!(ok("p1", "d1") && !ok("q1", "d1"));
        assert!(!ok("d1", "d2"));
        assert!(ok("p2", "F") && !ok("q1", "F"));
        assert!(ok("q1", "vb") && ok("d1", "vb") && !ok("p1", "vb"));
        assert!(!ok("F", "vb") && !ok("d1", "F"));
        let m = l.mask();
        assert_eq!(m, m.t());
        assert!((0..l.dim()).all(|i| !m[[i, i]]));
    }

    #[test]
    fn cross_domain_mask() {
        let motor = PortLayout::new()
            .with_storage("theta", Domain::RotPotential)
            .with_storage("p", Domain::RotKinetic)
            .with_storage("phi", Domain::Magnetic)
            .with_resistive("friction", Quantity::AngularVelocity)
            .with_resistive("R", Quantity::Current)
            .with_external("E", Quantity::Voltage);
        let ix = |n: &str| motor.index_of(n).unwrap();
        let ok = |a: &str, b: &str| motor.compatible(ix(a), ix(b));
        assert!(ok("phi", "p"), "gyrator");
        assert!(ok("theta", "p") && !ok("theta", "phi"));
        assert!(ok("friction", "p") && ok("R", "phi") && ok("E", "phi"));
        assert!(!ok("R", "p") && !ok("E", "p"));

        let tank = PortLayout::new()
            .with_storage("V", Domain::Hydraulic)
            .with_storage("q1", Domain::MechPotential)
            .with_storage("p1", Domain::MechKinetic);
        assert!(tank.compatible(0, 2), "transformer");
        assert!(!tank.compatible(0, 1));

        let circuit = PortLayout::new()
            .with_storage("Q1", Domain::Electric)
            .with_storage("Q2", Domain::Electric)
            .with_storage("phi", Domain::Magnetic)
            .with_resistive("R1", Quantity::Voltage)
            .with_resistive("R2", Quantity::Current);
        let ix = |n: &str| circuit.index_of(n).unwrap();
        let ok = |a: &str, b: &str| circuit.compatible(ix(a), ix(b));
        assert!(ok("Q1", "phi") && !ok("Q1", "Q2"));
        assert!(ok("R1", "Q1") && ok("R1", "Q2") && !ok("R1", "phi"));
        assert!(ok("R2", "phi") && !ok("R2", "Q1"));
    }

    #[test]
    fn admissibility_check() {
        let l = chain_layout();
        assert!(chain().check_admissible(&l).is_ok());
        let mut bad = chain();
        bad.set(2, 3, 0.1, EntryStatus::Learnable);
        assert_eq!(bad.check_admissible(&l).unwrap_err(), GeometryError::Incompatible("p1".into(), "p2".into()));
    }

    #[test]
    fn json_round_trip_keeps_status() {
        let mut b = chain();
        b.set(0, 3, 0.25, EntryStatus::Learnable);
        let text = serde_json::to_string(&b).unwrap();
        let back: Bivector = serde_json::from_str(&text).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.status(3, 0), EntryStatus::Learnable);
        assert_eq!(back.status(2, 3), EntryStatus::FixedZero);
        assert!(serde_json::from_str::<Bivector>(r#"{"n":2,"entries":[{"row":1,"col":0,"value":1.0,"status":"fixed"}]}"#).is_err());
    }

    fn random_bivector(n: usize, vals: &[f64]) -> Bivector {
        let mut b = Bivector::zeros(n);
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                b.set(i, j, vals[k % vals.len()], EntryStatus::Learnable);
                k += 1;
            }
        }
        b
    }

    proptest! {
        #[test]
        fn bundle_map_output_is_orthogonal_to_input(
            n in 2usize..12,
            vals in prop::collection::vec(-5.0f64..5.0, 66),
            e in prop::collection::vec(-5.0f64..5.0, 12),
        ) {
            let b = random_bivector(n, &vals);
            let e = &e[..n];
            let f = bundle_map_apply(&b, e).unwrap();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = (norm(e) * norm(&f)).max(f64::MIN_POSITIVE);
            prop_assert!(pairing(e, &f).unwrap().abs() <= 1e-12 * scale);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(b.get(i, j), -b.get(j, i));
                }
            }
        }

        #[test]
        fn bundle_map_is_linear(
            vals in prop::collection::vec(-5.0f64..5.0, 15),
            e1 in prop::collection::vec(-5.0f64..5.0, 6),
            e2 in prop::collection::vec(-5.0f64..5.0, 6),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let b = random_bivector(6, &vals);
            let mix: Vec<f64> = e1.iter().zip(&e2).map(|(x, y)| alpha * x + beta * y).collect();
            let lhs = bundle_map_apply(&b, &mix).unwrap();
            let f1 = bundle_map_apply(&b, &e1).unwrap();
            let f2 = bundle_map_apply(&b, &e2).unwrap();
            for k in 0..6 {
                let rhs = alpha * f1[k] + beta * f2[k];
                prop_assert!((lhs[k] - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
            }
        }
    }
}
