//! Grid case representation and bus admittance assembly.
//!
//! A [`NetworkCase`] is immutable once validated; topology edits such as
//! [`apply_outage`] and load changes such as [`scale_loads`] return new
//! values. Buses are kept sorted by [`BusId`], so bus index order and id
//! order coincide everywhere downstream.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_complex::Complex64;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(transparent))]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for BusId {
    fn from(v: u32) -> Self {
        BusId(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum BusKind {
    Slack,
    PV,
    PQ,
}

/// One bus. Injections are per unit on the case base, generation positive.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    pub p_inj: f64,
    pub q_inj: f64,
    /// Voltage magnitude setpoint; only meaningful for PV and slack buses.
    #[cfg_attr(feature = "serde", serde(default))]
    pub v_spec: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub shunt_g: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub shunt_b: f64,
    /// Generation share of the injection; the remainder is load.
    #[cfg_attr(feature = "serde", serde(default))]
    pub p_gen: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub q_gen: f64,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub q_min: Option<f64>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub q_max: Option<f64>,
}

impl Bus {
    pub fn pq(id: u32, p_inj: f64, q_inj: f64) -> Self {
        Bus {
            id: BusId(id),
            kind: BusKind::PQ,
            p_inj,
            q_inj,
            v_spec: 0.0,
            shunt_g: 0.0,
            shunt_b: 0.0,
            p_gen: 0.0,
            q_gen: 0.0,
            q_min: None,
            q_max: None,
        }
    }

    pub fn pv(id: u32, p_inj: f64, v_spec: f64) -> Self {
        Bus {
            kind: BusKind::PV,
            v_spec,
            p_gen: p_inj.max(0.0),
            ..Bus::pq(id, p_inj, 0.0)
        }
    }

    pub fn slack(id: u32, v_spec: f64) -> Self {
        Bus {
            kind: BusKind::Slack,
            v_spec,
            ..Bus::pq(id, 0.0, 0.0)
        }
    }

    pub fn with_shunt(mut self, g: f64, b: f64) -> Self {
        self.shunt_g = g;
        self.shunt_b = b;
        self
    }

    /// Consumption at this bus (positive for a load).
    pub fn load(&self) -> Complex64 {
        Complex64::new(self.p_gen - self.p_inj, self.q_gen - self.q_inj)
    }

    pub fn generation(&self) -> Complex64 {
        Complex64::new(self.p_gen, self.q_gen)
    }

    pub fn injection(&self) -> Complex64 {
        Complex64::new(self.p_inj, self.q_inj)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum BranchStatus {
    #[default]
    InService,
    Outaged,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub series_admittance: Complex64,
    /// Total line charging susceptance, split half to each end.
    #[cfg_attr(feature = "serde", serde(default))]
    pub charging_b: f64,
    /// Off-nominal turns ratio on the `from` side (1.0 for lines).
    #[cfg_attr(feature = "serde", serde(default = "unit_tap"))]
    pub tap: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub shift_deg: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub status: BranchStatus,
}

#[cfg(feature = "serde")]
fn unit_tap() -> f64 {
    1.0
}

impl Branch {
    pub fn new(from: u32, to: u32, series_admittance: Complex64) -> Self {
        Branch {
            from: BusId(from),
            to: BusId(to),
            series_admittance,
            charging_b: 0.0,
            tap: 1.0,
            shift_deg: 0.0,
            status: BranchStatus::InService,
        }
    }

    pub fn from_impedance(from: u32, to: u32, r: f64, x: f64) -> Self {
        Branch::new(from, to, Complex64::new(1.0, 0.0) / Complex64::new(r, x))
    }

    pub fn with_charging(mut self, b: f64) -> Self {
        self.charging_b = b;
        self
    }

    pub fn with_tap(mut self, tap: f64, shift_deg: f64) -> Self {
        self.tap = tap;
        self.shift_deg = shift_deg;
        self
    }

    pub fn in_service(&self) -> bool {
        self.status == BranchStatus::InService
    }

    pub fn connects(&self, a: BusId, b: BusId) -> bool {
        (self.from == a && self.to == b) || (self.from == b && self.to == a)
    }

    /// Two-port admittances `(y_ff, y_ft, y_tf, y_tt)` of the standard
    /// pi model with an ideal transformer on the `from` side.
    pub fn two_port(&self) -> (Complex64, Complex64, Complex64, Complex64) {
        let ys = self.series_admittance;
        let half_charging = Complex64::new(0.0, self.charging_b / 2.0);
        let ratio = if self.tap == 0.0 { 1.0 } else { self.tap };
        let shift = self.shift_deg.to_radians();
        let t = Complex64::from_polar(ratio, shift);
        let y_tt = ys + half_charging;
        let y_ff = y_tt / (ratio * ratio);
        let y_ft = -ys / t.conj();
        let y_tf = -ys / t;
        (y_ff, y_ft, y_tf, y_tt)
    }
}

/// Validated grid description. Buses are sorted by id.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(Serialize, Deserialize),
    serde(try_from = "RawCase", into = "RawCase")
)]
pub struct NetworkCase {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    base_mva: f64,
}

#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[derive(Debug, Clone)]
pub struct RawCase {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub base_mva: f64,
}

impl TryFrom<RawCase> for NetworkCase {
    type Error = Error;

    fn try_from(raw: RawCase) -> Result<Self> {
        NetworkCase::new(raw.buses, raw.branches, raw.base_mva)
    }
}

impl From<NetworkCase> for RawCase {
    fn from(case: NetworkCase) -> Self {
        RawCase {
            buses: case.buses,
            branches: case.branches,
            base_mva: case.base_mva,
        }
    }
}

impl NetworkCase {
    pub fn new(mut buses: Vec<Bus>, branches: Vec<Branch>, base_mva: f64) -> Result<Self> {
        buses.sort_by_key(|b| b.id);
        for pair in buses.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::DuplicateBus(pair[0].id));
            }
        }
        let slack_count = buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        if slack_count != 1 {
            return Err(Error::SlackCount(slack_count));
        }
        for bus in &buses {
            let finite = [bus.p_inj, bus.q_inj, bus.v_spec, bus.shunt_g, bus.shunt_b]
                .iter()
                .all(|x| x.is_finite());
            if !finite {
                return Err(Error::InvalidBus {
                    bus: bus.id,
                    reason: "non-finite value",
                });
            }
            if bus.kind != BusKind::PQ && bus.v_spec <= 0.0 {
                return Err(Error::InvalidBus {
                    bus: bus.id,
                    reason: "PV and slack buses need v_spec > 0",
                });
            }
        }
        let case = NetworkCase {
            buses,
            branches,
            base_mva,
        };
        for br in &case.branches {
            if br.from == br.to {
                return Err(Error::InvalidBranch {
                    from: br.from,
                    to: br.to,
                    reason: "from and to are the same bus",
                });
            }
            case.index_of(br.from)?;
            case.index_of(br.to)?;
        }
        Ok(case)
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn len(&self) -> usize {
        self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buses.is_empty()
    }

    pub fn bus_ids(&self) -> Vec<BusId> {
        self.buses.iter().map(|b| b.id).collect()
    }

    pub fn index_of(&self, id: BusId) -> Result<usize> {
        self.buses
            .binary_search_by_key(&id, |b| b.id)
            .map_err(|_| Error::UnknownBus(id))
    }

    pub fn bus(&self, id: BusId) -> Result<&Bus> {
        Ok(&self.buses[self.index_of(id)?])
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    pub(crate) fn buses_mut(&mut self) -> &mut [Bus] {
        &mut self.buses
    }

    /// Adjacency over in-service branches, by bus index.
    fn adjacency(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.buses.len()];
        for br in self.branches.iter().filter(|b| b.in_service()) {
            let f = self.index_of(br.from).expect("validated");
            let t = self.index_of(br.to).expect("validated");
            adj[f].insert(t);
            adj[t].insert(f);
        }
        adj
    }

    /// First bus not reachable from the slack, if any.
    pub fn unreachable_bus(&self) -> Option<BusId> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.buses.len()];
        let mut queue = VecDeque::new();
        let slack = self.slack_index();
        seen[slack] = true;
        queue.push_back(slack);
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.iter()
            .position(|s| !s)
            .map(|i| self.buses[i].id)
    }
}

/// Sparse bus admittance matrix with per-row neighbour lists.
///
/// Rows hold off-diagonal entries sorted by column; the diagonal is
/// stored separately. Index `i` is the position of the bus in the
/// (id-sorted) case.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    ids: Vec<BusId>,
    diag: Vec<Complex64>,
    rows: Vec<Vec<(usize, Complex64)>>,
}

impl AdmittanceMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn bus_ids(&self) -> &[BusId] {
        &self.ids
    }

    pub fn bus_id(&self, i: usize) -> BusId {
        self.ids[i]
    }

    pub fn index_of(&self, id: BusId) -> Result<usize> {
        self.ids.binary_search(&id).map_err(|_| Error::UnknownBus(id))
    }

    pub fn diag(&self, i: usize) -> Complex64 {
        self.diag[i]
    }

    /// Off-diagonal entries `(column, Y_ij)` of row `i`.
    pub fn row(&self, i: usize) -> &[(usize, Complex64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        if i == j {
            return self.diag[i];
        }
        match self.rows[i].binary_search_by_key(&j, |&(c, _)| c) {
            Ok(k) => self.rows[i][k].1,
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    pub fn neighbor_indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows[i].iter().map(|&(j, _)| j)
    }

    /// `I = Y v`.
    pub fn currents(&self, v: &[Complex64]) -> Vec<Complex64> {
        (0..self.len())
            .map(|i| self.current_at(i, v))
            .collect()
    }

    pub fn current_at(&self, i: usize, v: &[Complex64]) -> Complex64 {
        self.rows[i]
            .iter()
            .fold(self.diag[i] * v[i], |acc, &(j, y)| acc + y * v[j])
    }

    /// Complex power injections `S = v ∘ conj(Y v)`.
    pub fn power_injections(&self, v: &[Complex64]) -> Vec<Complex64> {
        (0..self.len())
            .map(|i| v[i] * self.current_at(i, v).conj())
            .collect()
    }
}

/// Assemble the bus admittance matrix from in-service branches and shunts.
pub fn build_admittance(case: &NetworkCase) -> Result<AdmittanceMatrix> {
    if let Some(bus) = case.unreachable_bus() {
        return Err(Error::Disconnected(bus));
    }
    let n = case.len();
    let mut diag: Vec<Complex64> = case
        .buses
        .iter()
        .map(|b| Complex64::new(b.shunt_g, b.shunt_b))
        .collect();
    let mut off: Vec<BTreeMap<usize, Complex64>> = vec![BTreeMap::new(); n];
    for br in case.branches.iter().filter(|b| b.in_service()) {
        let f = case.index_of(br.from)?;
        let t = case.index_of(br.to)?;
        let (y_ff, y_ft, y_tf, y_tt) = br.two_port();
        diag[f] += y_ff;
        diag[t] += y_tt;
        *off[f].entry(t).or_default() += y_ft;
        *off[t].entry(f).or_default() += y_tf;
    }
    Ok(AdmittanceMatrix {
        ids: case.bus_ids(),
        diag,
        rows: off.into_iter().map(|m| m.into_iter().collect()).collect(),
    })
}

/// Buses adjacent to `d` over in-service branches.
pub fn neighbors(case: &NetworkCase, d: BusId) -> Result<BTreeSet<BusId>> {
    case.index_of(d)?;
    Ok(case
        .branches
        .iter()
        .filter(|b| b.in_service())
        .filter_map(|b| {
            if b.from == d {
                Some(b.to)
            } else if b.to == d {
                Some(b.from)
            } else {
                None
            }
        })
        .collect())
}

/// Scale every injection (load and non-slack generation) by `lambda`
/// relative to the given case. `lambda = 0` is the no-load case.
pub fn scale_loads(case: &NetworkCase, lambda: f64) -> Result<NetworkCase> {
    if !(lambda >= 0.0) {
        return Err(Error::NegativeLambda(lambda));
    }
    let mut out = case.clone();
    for bus in out.buses_mut() {
        bus.p_inj *= lambda;
        bus.q_inj *= lambda;
        bus.p_gen *= lambda;
        bus.q_gen *= lambda;
    }
    Ok(out)
}

/// Take the first in-service branch between `from` and `to` out of service.
pub fn apply_outage(case: &NetworkCase, from: BusId, to: BusId) -> Result<NetworkCase> {
    case.index_of(from)?;
    case.index_of(to)?;
    let mut matching = case
        .branches
        .iter()
        .enumerate()
        .filter(|(_, b)| b.connects(from, to))
        .peekable();
    if matching.peek().is_none() {
        return Err(Error::NoSuchBranch(from, to));
    }
    let Some((k, _)) = matching.find(|(_, b)| b.in_service()) else {
        return Err(Error::AlreadyOutaged(from, to));
    };
    let mut out = case.clone();
    out.branches[k].status = BranchStatus::Outaged;
    Ok(out)
}

/// How loads outside a directional set behave as λ grows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtherLoads {
    HeldAtBase,
    Proportional,
}

/// Affine loading path `S(λ) = fixed + λ·direction` over all buses, with
/// the load component tracked separately for reactive-limit bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    fixed: Vec<Complex64>,
    direction: Vec<Complex64>,
    load_fixed: Vec<Complex64>,
    load_direction: Vec<Complex64>,
}

impl LoadProfile {
    /// All loads and generation proportional to their base values,
    /// starting from no load at λ = 0.
    pub fn proportional(case: &NetworkCase) -> Self {
        let n = case.len();
        LoadProfile {
            fixed: vec![Complex64::default(); n],
            direction: case.buses.iter().map(Bus::injection).collect(),
            load_fixed: vec![Complex64::default(); n],
            load_direction: case.buses.iter().map(Bus::load).collect(),
        }
    }

    /// Loads at `buses` grow at `rate`·λ, the rest follow `others`;
    /// generation is always proportional to λ.
    pub fn directional(
        case: &NetworkCase,
        buses: &BTreeSet<BusId>,
        rate: f64,
        others: OtherLoads,
    ) -> Result<Self> {
        if buses.is_empty() {
            return Err(Error::InvalidOption("nothing scaled: empty directional bus set"));
        }
        if !(rate > 0.0) {
            return Err(Error::InvalidOption("directional rate must be positive"));
        }
        for &b in buses {
            case.index_of(b)?;
        }
        let n = case.len();
        let mut profile = LoadProfile {
            fixed: vec![Complex64::default(); n],
            direction: vec![Complex64::default(); n],
            load_fixed: vec![Complex64::default(); n],
            load_direction: vec![Complex64::default(); n],
        };
        for (i, bus) in case.buses.iter().enumerate() {
            let load = bus.load();
            if buses.contains(&bus.id) {
                profile.load_direction[i] = load * rate;
            } else {
                match others {
                    OtherLoads::HeldAtBase => profile.load_fixed[i] = load,
                    OtherLoads::Proportional => profile.load_direction[i] = load,
                }
            }
            profile.fixed[i] = -profile.load_fixed[i];
            profile.direction[i] = bus.generation() - profile.load_direction[i];
        }
        Ok(profile)
    }

    pub fn len(&self) -> usize {
        self.fixed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixed.is_empty()
    }

    pub fn injection(&self, i: usize, lambda: f64) -> Complex64 {
        self.fixed[i] + self.direction[i] * lambda
    }

    pub fn injections(&self, lambda: f64) -> Vec<Complex64> {
        (0..self.len()).map(|i| self.injection(i, lambda)).collect()
    }

    /// d S / d λ.
    pub fn direction(&self) -> &[Complex64] {
        &self.direction
    }

    pub fn load(&self, i: usize, lambda: f64) -> Complex64 {
        self.load_fixed[i] + self.load_direction[i] * lambda
    }

    /// Case with its net injections replaced by those at `lambda`.
    pub fn apply(&self, case: &NetworkCase, lambda: f64) -> NetworkCase {
        let mut out = case.clone();
        for (i, bus) in out.buses_mut().iter_mut().enumerate() {
            let s = self.injection(i, lambda);
            bus.p_inj = s.re;
            bus.q_inj = s.im;
        }
        out
    }
}

#[cfg(test)]
pub(crate) use tests::three_bus;
