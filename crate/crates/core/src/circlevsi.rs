//! Power-flow circles and the determinant-based stability index.
//!
//! At bus `d` with all neighbour voltages fixed, the active and reactive
//! balance equations are circles in the (v_r, v_i) plane:
//!
//! ```text
//! p = t1 |v|² + t2 v_r + t3 v_i
//! q = t4 |v|² − t3 v_r + t2 v_i
//! ```
//!
//! with `t1 + j·(−t4) = Y_dd` and `t2 + j·t3 = Σ_k Y_dk v_k`. Each circle
//! is written as a 2×2 hermitian matrix; the pencil `λ1·Cp + λ2·Cq` has a
//! determinant that is a quadratic form in (λ1, λ2), and its discriminant
//! `Δ*` is positive while the circles cross, zero when they touch and
//! negative once they separate.

use alloc::collections::BTreeMap;

use libm::{fabs, sqrt};
use num_complex::Complex64;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{CircleKind, Error, Result};
use crate::netmodel::{AdmittanceMatrix, BusId, BusKind, NetworkCase};
use crate::powerflow::PhasorSnapshot;

/// Below this, `t1` or `t4` makes the corresponding circle degenerate.
pub const DEGENERATE_T: f64 = 1e-9;
/// Relative tolerance for tangency.
pub const TANGENCY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TParams {
    pub bus: BusId,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t4: f64,
}

impl TParams {
    /// Build from the local diagonal entry and the off-diagonal row
    /// entries paired with neighbour voltages. This is the single code
    /// path for both agent-side and centralized evaluation.
    pub fn from_local_row<I>(bus: BusId, diag: Complex64, row: I) -> Self
    where
        I: IntoIterator<Item = (Complex64, Complex64)>,
    {
        let w = row
            .into_iter()
            .fold(Complex64::new(0.0, 0.0), |acc, (y_dk, v_k)| acc + y_dk * v_k);
        TParams {
            bus,
            t1: diag.re,
            t2: w.re,
            t3: w.im,
            t4: -diag.im,
        }
    }

    fn check_p(&self) -> Result<()> {
        if fabs(self.t1) < DEGENERATE_T {
            return Err(self.degenerate());
        }
        Ok(())
    }

    fn check_q(&self) -> Result<()> {
        if fabs(self.t4) < DEGENERATE_T {
            return Err(self.degenerate());
        }
        Ok(())
    }

    fn degenerate(&self) -> Error {
        Error::DegenerateCircle {
            bus: self.bus,
            t1: self.t1,
            t4: self.t4,
        }
    }

    /// Active power injection implied at voltage `v`.
    pub fn p_at(&self, v: Complex64) -> f64 {
        self.t1 * v.norm_sqr() + self.t2 * v.re + self.t3 * v.im
    }

    /// Reactive power injection implied at voltage `v`.
    pub fn q_at(&self, v: Complex64) -> f64 {
        self.t4 * v.norm_sqr() - self.t3 * v.re + self.t2 * v.im
    }
}

/// Walk row `d` of `y`, pairing each entry with its neighbour's voltage.
fn local_row<'a>(
    y: &'a AdmittanceMatrix,
    i: usize,
    voltage_of: impl Fn(BusId) -> Option<Complex64> + 'a,
) -> Result<alloc::vec::Vec<(Complex64, Complex64)>> {
    let d = y.bus_id(i);
    y.row(i)
        .iter()
        .map(|&(k, y_dk)| {
            let neighbor = y.bus_id(k);
            voltage_of(neighbor)
                .map(|v| (y_dk, v))
                .ok_or(Error::MissingNeighborVoltage { bus: d, neighbor })
        })
        .collect()
}

/// t-parameters of bus `d` from the admittance matrix and neighbour
/// voltages. Voltages of non-neighbours, if present, are ignored.
pub fn compute_t_params(
    y: &AdmittanceMatrix,
    d: BusId,
    neighbor_voltages: &BTreeMap<BusId, Complex64>,
) -> Result<TParams> {
    let t = raw_t_params(y, d, neighbor_voltages)?;
    t.check_p()?;
    t.check_q()?;
    Ok(t)
}

fn raw_t_params(y: &AdmittanceMatrix, d: BusId, neighbor_voltages: &BTreeMap<BusId, Complex64>) -> Result<TParams> {
    let i = y.index_of(d)?;
    let row = local_row(y, i, |b| neighbor_voltages.get(&b).copied())?;
    Ok(TParams::from_local_row(d, y.diag(i), row))
}

/// Neighbour voltages of `d` taken from a full snapshot.
pub fn neighbor_voltages(y: &AdmittanceMatrix, d: BusId, snapshot: &PhasorSnapshot) -> Result<BTreeMap<BusId, Complex64>> {
    let i = y.index_of(d)?;
    y.neighbor_indices(i)
        .map(|k| {
            let b = y.bus_id(k);
            snapshot
                .voltage(b)
                .map(|v| (b, v))
                .ok_or(Error::MissingNeighborVoltage { bus: d, neighbor: b })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CircleGeometry {
    pub center: [f64; 2],
    pub radius: f64,
}

impl CircleGeometry {
    pub fn new(center: [f64; 2], radius: f64) -> Self {
        CircleGeometry { center, radius }
    }

    /// Circle of radius `v_spec` about the origin.
    pub fn voltage(v_spec: f64) -> Self {
        CircleGeometry::new([0.0, 0.0], fabs(v_spec))
    }

    pub fn center_distance(&self, other: &CircleGeometry) -> f64 {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        sqrt(dx * dx + dy * dy)
    }

    /// Signed distance of `v` from the circle.
    pub fn residual(&self, v: Complex64) -> f64 {
        let dx = v.re - self.center[0];
        let dy = v.im - self.center[1];
        sqrt(dx * dx + dy * dy) - self.radius
    }
}

fn circle(bus: BusId, kind: CircleKind, center: [f64; 2], radicand: f64) -> Result<CircleGeometry> {
    if !(radicand >= 0.0) {
        return Err(Error::InfeasibleLocalCircle {
            bus,
            circle: kind,
            radicand,
        });
    }
    Ok(CircleGeometry::new(center, sqrt(radicand)))
}

fn p_circle(t: &TParams, p_d: f64) -> Result<CircleGeometry> {
    t.check_p()?;
    let spread = (t.t2 * t.t2 + t.t3 * t.t3) / (4.0 * t.t1 * t.t1);
    circle(
        t.bus,
        CircleKind::RealPower,
        [-t.t2 / (2.0 * t.t1), -t.t3 / (2.0 * t.t1)],
        p_d / t.t1 + spread,
    )
}

fn q_circle(t: &TParams, q_d: f64) -> Result<CircleGeometry> {
    t.check_q()?;
    let spread = (t.t2 * t.t2 + t.t3 * t.t3) / (4.0 * t.t4 * t.t4);
    circle(
        t.bus,
        CircleKind::ReactivePower,
        [t.t3 / (2.0 * t.t4), -t.t2 / (2.0 * t.t4)],
        q_d / t.t4 + spread,
    )
}

/// Active- and reactive-power circles at the given injections.
pub fn circles_from_t(t: &TParams, p_d: f64, q_d: f64) -> Result<(CircleGeometry, CircleGeometry)> {
    Ok((p_circle(t, p_d)?, q_circle(t, q_d)?))
}

/// Hermitian form `A|z|² + B z + C z̄ + D = 0` of a circle.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CircleMatrix {
    pub a: f64,
    pub b: Complex64,
    pub c: Complex64,
    pub d: f64,
}

impl CircleMatrix {
    pub fn determinant(&self) -> f64 {
        self.a * self.d - (self.b * self.c).re
    }

    /// `l1·self + l2·other`.
    pub fn combine(&self, l1: f64, other: &CircleMatrix, l2: f64) -> CircleMatrix {
        CircleMatrix {
            a: l1 * self.a + l2 * other.a,
            b: self.b * l1 + other.b * l2,
            c: self.c * l1 + other.c * l2,
            d: l1 * self.d + l2 * other.d,
        }
    }

    /// Real 2-vector of linear coefficients, equal to −2·center.
    fn b_vector(&self) -> [f64; 2] {
        [2.0 * self.b.re, -2.0 * self.b.im]
    }
}

pub fn circle_matrix(geom: &CircleGeometry) -> CircleMatrix {
    let gamma = Complex64::new(geom.center[0], geom.center[1]);
    CircleMatrix {
        a: 1.0,
        b: -gamma.conj(),
        c: -gamma,
        d: gamma.norm_sqr() - geom.radius * geom.radius,
    }
}

/// Coefficients of `det(λ1·Cp + λ2·Cq) = Δp λ1² + 2Δpq λ1λ2 + Δq λ2²`
/// and its discriminant `Δ* = Δp Δq − Δpq²`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DeltaComponents {
    pub delta_p: f64,
    pub delta_q: f64,
    pub delta_pq: f64,
    pub delta_star: f64,
}

pub fn delta_components(cp: &CircleMatrix, cq: &CircleMatrix) -> DeltaComponents {
    debug_assert!(cp.a == 1.0 && cq.a == 1.0, "circle matrices must be normalized");
    let bp = cp.b_vector();
    let bq = cq.b_vector();
    let dot = |u: [f64; 2], v: [f64; 2]| u[0] * v[0] + u[1] * v[1];
    let delta_p = cp.d - dot(bp, bp) / 4.0;
    let delta_q = cq.d - dot(bq, bq) / 4.0;
    let delta_pq = (cp.d + cq.d) / 2.0 - dot(bp, bq) / 4.0;
    DeltaComponents {
        delta_p,
        delta_q,
        delta_pq,
        delta_star: delta_p * delta_q - delta_pq * delta_pq,
    }
}

/// Normalized index at one bus.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Vsi {
    pub bus: BusId,
    pub value: f64,
    pub raw: f64,
    pub reference: f64,
}

impl Vsi {
    /// Circles separated: no local solution exists.
    pub fn is_negative(&self) -> bool {
        self.value < 0.0
    }
}

fn normalize(bus: BusId, raw: f64, reference: f64) -> Result<Vsi> {
    if !(reference > 0.0) {
        return Err(Error::NonPositiveReference(reference));
    }
    Ok(Vsi {
        bus,
        value: raw / reference,
        raw,
        reference,
    })
}

/// `Δ*` for a PQ bus from its t-parameters.
pub fn pq_delta_star(t: &TParams, p_d: f64, q_d: f64) -> Result<f64> {
    let (cp, cq) = circles_from_t(t, p_d, q_d)?;
    Ok(delta_components(&circle_matrix(&cp), &circle_matrix(&cq)).delta_star)
}

/// `Δ*` for a PV bus: the reactive circle is replaced by `|v| = v_spec`.
pub fn pv_delta_star(t: &TParams, p_d: f64, v_spec: f64) -> Result<f64> {
    let cp = p_circle(t, p_d)?;
    let cv = CircleGeometry::voltage(v_spec);
    Ok(delta_components(&circle_matrix(&cp), &circle_matrix(&cv)).delta_star)
}

pub fn vsi_from_t(t: &TParams, p_d: f64, q_d: f64, reference: f64) -> Result<Vsi> {
    normalize(t.bus, pq_delta_star(t, p_d, q_d)?, reference)
}

pub fn pv_vsi_from_t(t: &TParams, p_d: f64, v_spec: f64, reference: f64) -> Result<Vsi> {
    normalize(t.bus, pv_delta_star(t, p_d, v_spec)?, reference)
}

/// Index of bus `d` from neighbour voltages and its own injections.
pub fn vsi(
    y: &AdmittanceMatrix,
    d: BusId,
    neighbor_voltages: &BTreeMap<BusId, Complex64>,
    p_d: f64,
    q_d: f64,
    reference: f64,
) -> Result<Vsi> {
    let t = compute_t_params(y, d, neighbor_voltages)?;
    vsi_from_t(&t, p_d, q_d, reference)
}

/// PV-bus variant using the voltage circle.
pub fn pv_bus_vsi(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    d: BusId,
    neighbor_voltages: &BTreeMap<BusId, Complex64>,
    p_d: f64,
    v_spec: f64,
    reference: f64,
) -> Result<Vsi> {
    if case.bus(d)?.kind != BusKind::PV {
        return Err(Error::NotPvBus(d));
    }
    let t = raw_t_params(y, d, neighbor_voltages)?;
    pv_vsi_from_t(&t, p_d, v_spec, reference)
}

fn flat_neighbors(y: &AdmittanceMatrix, d: BusId) -> Result<BTreeMap<BusId, Complex64>> {
    let i = y.index_of(d)?;
    Ok(y.neighbor_indices(i)
        .map(|k| (y.bus_id(k), Complex64::new(1.0, 0.0)))
        .collect())
}

/// `Δ*` with every neighbour at 1∠0 and zero injection at `d`.
pub fn no_load_reference(y: &AdmittanceMatrix, d: BusId) -> Result<f64> {
    let t = compute_t_params(y, d, &flat_neighbors(y, d)?)?;
    pq_delta_star(&t, 0.0, 0.0)
}

/// PV-bus counterpart of [`no_load_reference`] at setpoint `v_spec`.
pub fn pv_no_load_reference(y: &AdmittanceMatrix, d: BusId, v_spec: f64) -> Result<f64> {
    let t = raw_t_params(y, d, &flat_neighbors(y, d)?)?;
    pv_delta_star(&t, 0.0, v_spec)
}

/// `Δ*` of bus `d` at a solved operating point (normally the one with
/// every injection scaled to zero), using the voltages and the injections
/// they imply.
pub fn operating_point_reference(y: &AdmittanceMatrix, d: BusId, kind: BusKind, snapshot: &PhasorSnapshot) -> Result<f64> {
    let i = y.index_of(d)?;
    let t = raw_t_params(y, d, &neighbor_voltages(y, d, snapshot)?)?;
    let v = snapshot.voltages[i];
    let s = v * y.current_at(i, &snapshot.voltages).conj();
    match kind {
        BusKind::PV => pv_delta_star(&t, s.re, v.norm()),
        _ => {
            t.check_q()?;
            pq_delta_star(&t, s.re, s.im)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum Intersection {
    TwoPoints,
    OnePoint,
    None,
}

/// Count common points of two circles from their centre distance.
pub fn classify_intersection(a: &CircleGeometry, b: &CircleGeometry) -> Intersection {
    let d = a.center_distance(b);
    let outer = a.radius + b.radius;
    let inner = fabs(a.radius - b.radius);
    let tol = TANGENCY_TOL * (outer + d).max(f64::MIN_POSITIVE);
    if fabs(d - outer) <= tol || fabs(d - inner) <= tol {
        Intersection::OnePoint
    } else if inner < d && d < outer {
        Intersection::TwoPoints
    } else {
        Intersection::None
    }
}

/// `Δ*` from centre distance and radii alone.
pub fn delta_star_closed_form(a: &CircleGeometry, b: &CircleGeometry) -> f64 {
    let d = a.center_distance(b);
    let (ra2, rb2) = (a.radius * a.radius, b.radius * b.radius);
    let h = (d * d - ra2 - rb2) / 2.0;
    ra2 * rb2 - h * h
}
