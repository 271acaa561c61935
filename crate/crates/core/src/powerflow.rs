//! Newton-Raphson AC power flow and predictor-corrector continuation.
//!
//! Unknowns are polar: angles of every non-slack bus followed by
//! magnitudes of every PQ bus. The Jacobian is assembled densely from the
//! sparse admittance rows and factored with LU.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{build_admittance, AdmittanceMatrix, BusId, BusKind, LoadProfile, NetworkCase};

const J: Complex64 = Complex64::new(0.0, 1.0);

/// Complex bus voltages at one instant, ordered like the case buses.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PhasorSnapshot {
    pub buses: Vec<BusId>,
    pub voltages: Vec<Complex64>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub timestamp: Option<f64>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub lambda: Option<f64>,
}

impl PhasorSnapshot {
    pub fn new(buses: Vec<BusId>, voltages: Vec<Complex64>) -> Self {
        assert_eq!(buses.len(), voltages.len(), "one voltage per bus");
        PhasorSnapshot {
            buses,
            voltages,
            timestamp: None,
            lambda: None,
        }
    }

    /// 1∠0 everywhere.
    pub fn flat(case: &NetworkCase) -> Self {
        PhasorSnapshot::new(case.bus_ids(), vec![Complex64::new(1.0, 0.0); case.len()])
    }

    pub fn len(&self) -> usize {
        self.voltages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltages.is_empty()
    }

    pub fn index_of(&self, bus: BusId) -> Option<usize> {
        self.buses.binary_search(&bus).ok()
    }

    pub fn voltage(&self, bus: BusId) -> Option<Complex64> {
        self.index_of(bus).map(|i| self.voltages[i])
    }

    pub fn with_timestamp(mut self, t: f64) -> Self {
        self.timestamp = Some(t);
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }
}

/// Bus with the smallest voltage magnitude; ties go to the lowest id.
pub fn lowest_voltage_bus(snapshot: &PhasorSnapshot) -> Option<(BusId, f64)> {
    snapshot
        .buses
        .iter()
        .zip(&snapshot.voltages)
        .map(|(&b, v)| (b, v.norm()))
        .fold(None, |best, (b, m)| match best {
            Some((bb, bm)) if bm < m || (bm == m && bb < b) => Some((bb, bm)),
            _ => Some((b, m)),
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlowOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Convert PV buses to PQ when their generator reactive output leaves
    /// `[q_min, q_max]`.
    pub enforce_q_limits: bool,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        PowerFlowOptions {
            tol: 1e-8,
            max_iter: 30,
            enforce_q_limits: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub snapshot: PhasorSnapshot,
    pub iterations: usize,
    /// Bus kinds after any reactive-limit switching.
    pub kinds: Vec<BusKind>,
}

/// Solve the case as scheduled, starting from `initial`.
pub fn solve_power_flow(
    case: &NetworkCase,
    initial: &PhasorSnapshot,
    tol: f64,
    max_iter: usize,
) -> Result<PhasorSnapshot> {
    let y = build_admittance(case)?;
    let opts = PowerFlowOptions {
        tol,
        max_iter,
        ..PowerFlowOptions::default()
    };
    solve_case(case, &y, initial, &opts).map(|s| s.snapshot)
}

pub fn solve_case(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    initial: &PhasorSnapshot,
    opts: &PowerFlowOptions,
) -> Result<PowerFlowSolution> {
    let sched: Vec<Complex64> = case.buses().iter().map(|b| b.injection()).collect();
    let loads: Vec<Complex64> = case.buses().iter().map(|b| b.load()).collect();
    solve_scheduled(case, y, &sched, &loads, initial, opts)
}

/// Solve with injections taken from `profile` at `lambda`.
pub fn solve_loading(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    profile: &LoadProfile,
    lambda: f64,
    initial: &PhasorSnapshot,
    opts: &PowerFlowOptions,
) -> Result<PowerFlowSolution> {
    let sched = profile.injections(lambda);
    let loads: Vec<Complex64> = (0..case.len()).map(|i| profile.load(i, lambda)).collect();
    let mut sol = solve_scheduled(case, y, &sched, &loads, initial, opts)?;
    sol.snapshot.lambda = Some(lambda);
    Ok(sol)
}

fn solve_scheduled(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    sched: &[Complex64],
    loads: &[Complex64],
    initial: &PhasorSnapshot,
    opts: &PowerFlowOptions,
) -> Result<PowerFlowSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidOption("tolerance must be positive"));
    }
    if initial.len() != case.len() {
        return Err(Error::InvalidOption("initial snapshot does not match the case"));
    }
    let mut kinds: Vec<BusKind> = case.buses().iter().map(|b| b.kind).collect();
    let mut sched = sched.to_vec();
    let mut v = initial.voltages.clone();
    let mut total_iter = 0;
    loop {
        let problem = Problem::new(case, y, &kinds);
        let (vm, va) = problem.start(&v);
        let (vm, va, it) = problem.newton(&sched, vm, va, opts.tol, opts.max_iter)?;
        total_iter += it;
        v = polar(&vm, &va);
        if !opts.enforce_q_limits || !switch_violated_limits(case, y, &v, loads, &mut kinds, &mut sched) {
            break;
        }
    }
    let mut snapshot = PhasorSnapshot::new(case.bus_ids(), v);
    snapshot.timestamp = initial.timestamp;
    Ok(PowerFlowSolution {
        snapshot,
        iterations: total_iter,
        kinds,
    })
}

/// Convert reactive-limit violators to PQ at their limit. Returns whether
/// anything changed.
fn switch_violated_limits(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    v: &[Complex64],
    loads: &[Complex64],
    kinds: &mut [BusKind],
    sched: &mut [Complex64],
) -> bool {
    let mut changed = false;
    for (i, bus) in case.buses().iter().enumerate() {
        if kinds[i] != BusKind::PV {
            continue;
        }
        let q_gen = (v[i] * y.current_at(i, v).conj()).im + loads[i].im;
        let limit = match (bus.q_min, bus.q_max) {
            (_, Some(hi)) if q_gen > hi => hi,
            (Some(lo), _) if q_gen < lo => lo,
            _ => continue,
        };
        kinds[i] = BusKind::PQ;
        sched[i].im = limit - loads[i].im;
        changed = true;
    }
    changed
}

fn polar(vm: &[f64], va: &[f64]) -> Vec<Complex64> {
    vm.iter()
        .zip(va)
        .map(|(&m, &a)| Complex64::from_polar(m, a))
        .collect()
}

fn max_abs(x: &DVector<f64>) -> f64 {
    x.iter().fold(0.0, |m, v| if libm::fabs(*v) > m { libm::fabs(*v) } else { m })
}

/// Variable layout for one set of bus kinds.
struct Problem<'a> {
    y: &'a AdmittanceMatrix,
    case: &'a NetworkCase,
    ang: Vec<usize>,
    mag: Vec<usize>,
    pos_ang: Vec<Option<usize>>,
    pos_mag: Vec<Option<usize>>,
}

impl<'a> Problem<'a> {
    fn new(case: &'a NetworkCase, y: &'a AdmittanceMatrix, kinds: &[BusKind]) -> Self {
        let n = kinds.len();
        let ang: Vec<usize> = (0..n).filter(|&i| kinds[i] != BusKind::Slack).collect();
        let mag: Vec<usize> = (0..n).filter(|&i| kinds[i] == BusKind::PQ).collect();
        let mut pos_ang = vec![None; n];
        let mut pos_mag = vec![None; n];
        for (k, &i) in ang.iter().enumerate() {
            pos_ang[i] = Some(k);
        }
        for (k, &i) in mag.iter().enumerate() {
            pos_mag[i] = Some(k);
        }
        Problem {
            y,
            case,
            ang,
            mag,
            pos_ang,
            pos_mag,
        }
    }

    fn dim(&self) -> usize {
        self.ang.len() + self.mag.len()
    }

    /// Polar start with regulated magnitudes pinned to their setpoints.
    fn start(&self, v: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let mut vm: Vec<f64> = v.iter().map(|x| x.norm()).collect();
        let va: Vec<f64> = v.iter().map(|x| x.arg()).collect();
        for (i, bus) in self.case.buses().iter().enumerate() {
            if self.pos_mag[i].is_none() {
                vm[i] = bus.v_spec;
            }
        }
        (vm, va)
    }

    fn mismatch(&self, v: &[Complex64], sched: &[Complex64]) -> DVector<f64> {
        let mut f = DVector::zeros(self.dim());
        let na = self.ang.len();
        for (r, &i) in self.ang.iter().enumerate() {
            f[r] = (v[i] * self.y.current_at(i, v).conj() - sched[i]).re;
        }
        for (r, &i) in self.mag.iter().enumerate() {
            f[na + r] = (v[i] * self.y.current_at(i, v).conj() - sched[i]).im;
        }
        f
    }

    /// Jacobian of the mismatch with respect to (angles, magnitudes),
    /// with `extra` spare columns and rows left zero.
    fn jacobian(&self, v: &[Complex64], extra: usize) -> DMatrix<f64> {
        let m = self.dim();
        let na = self.ang.len();
        let mut jac = DMatrix::zeros(m + extra, m + extra);
        let current = self.y.currents(v);
        let unit: Vec<Complex64> = v.iter().map(|x| x / x.norm()).collect();
        for i in 0..v.len() {
            let (p_row, q_row) = (self.pos_ang[i], self.pos_mag[i].map(|r| na + r));
            if p_row.is_none() && q_row.is_none() {
                continue;
            }
            let yii = self.y.diag(i);
            let own_a = J * v[i] * (current[i] - yii * v[i]).conj();
            let own_m = v[i] * (yii * unit[i]).conj() + current[i].conj() * unit[i];
            let entries = core::iter::once((i, own_a, own_m)).chain(self.y.row(i).iter().map(|&(k, yik)| {
                (k, -J * v[i] * (yik * v[k]).conj(), v[i] * (yik * unit[k]).conj())
            }));
            for (k, ds_a, ds_m) in entries {
                for (row, part) in [(p_row, 0), (q_row, 1)] {
                    let Some(row) = row else { continue };
                    let pick = |s: Complex64| if part == 0 { s.re } else { s.im };
                    if let Some(c) = self.pos_ang[k] {
                        jac[(row, c)] = pick(ds_a);
                    }
                    if let Some(c) = self.pos_mag[k] {
                        jac[(row, na + c)] = pick(ds_m);
                    }
                }
            }
        }
        jac
    }

    fn apply_step(&self, vm: &mut [f64], va: &mut [f64], dx: &DVector<f64>) {
        let na = self.ang.len();
        for (k, &i) in self.ang.iter().enumerate() {
            va[i] += dx[k];
        }
        for (k, &i) in self.mag.iter().enumerate() {
            vm[i] += dx[na + k];
        }
    }

    fn newton(
        &self,
        sched: &[Complex64],
        mut vm: Vec<f64>,
        mut va: Vec<f64>,
        tol: f64,
        max_iter: usize,
    ) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let mut v = polar(&vm, &va);
        let mut f = self.mismatch(&v, sched);
        let mut it = 0;
        while max_abs(&f) >= tol {
            if it == max_iter {
                return Err(Error::NonConvergence {
                    iterations: it,
                    mismatch: max_abs(&f),
                });
            }
            let dx = solve(self.jacobian(&v, 0), -f)?;
            self.apply_step(&mut vm, &mut va, &dx);
            v = polar(&vm, &va);
            f = self.mismatch(&v, sched);
            it += 1;
            if !max_abs(&f).is_finite() {
                return Err(Error::NonConvergence {
                    iterations: it,
                    mismatch: f64::INFINITY,
                });
            }
        }
        Ok((vm, va, it))
    }
}

fn solve(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let x = a.lu().solve(&b).ok_or(Error::SingularJacobian)?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::SingularJacobian)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpfOptions {
    /// Arc-length step for adaptive tracing, Δλ for fixed stepping.
    pub initial_step: f64,
    pub adaptive: bool,
    pub min_step: f64,
    pub max_step: f64,
    pub tol: f64,
    pub max_corrector_iter: usize,
    pub max_points: usize,
    pub enforce_q_limits: bool,
    /// Stop once the trace reaches this loading level.
    pub lambda_limit: Option<f64>,
}

impl Default for CpfOptions {
    fn default() -> Self {
        CpfOptions {
            initial_step: 0.05,
            adaptive: true,
            min_step: 1e-4,
            max_step: 0.2,
            tol: 1e-8,
            max_corrector_iter: 12,
            max_points: 20_000,
            enforce_q_limits: false,
            lambda_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CpfPoint {
    pub lambda: f64,
    pub snapshot: PhasorSnapshot,
}

/// Upper-branch PV trajectory from λ = 0 to the nose.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CpfTrajectory {
    pub points: Vec<CpfPoint>,
    pub lambda_max: f64,
    pub critical_bus_hint: BusId,
}

impl CpfTrajectory {
    pub fn last(&self) -> &CpfPoint {
        self.points.last().expect("trajectory holds at least the base point")
    }
}

/// Proportional loading of every injection, traced from no load.
pub fn continuation_power_flow(
    case: &NetworkCase,
    lambda_step_initial: f64,
    adaptive: bool,
) -> Result<CpfTrajectory> {
    let opts = CpfOptions {
        initial_step: lambda_step_initial,
        adaptive,
        ..CpfOptions::default()
    };
    trace_continuation(case, &LoadProfile::proportional(case), &opts)
}

/// Trace `profile` from λ = 0 up to the fold.
pub fn trace_continuation(
    case: &NetworkCase,
    profile: &LoadProfile,
    opts: &CpfOptions,
) -> Result<CpfTrajectory> {
    if !(opts.initial_step > 0.0) || !(opts.min_step > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::InvalidOption("continuation steps and tolerance must be positive"));
    }
    let y = build_admittance(case)?;
    let pf_opts = PowerFlowOptions {
        tol: opts.tol,
        max_iter: 30,
        enforce_q_limits: opts.enforce_q_limits,
    };
    let base = solve_loading(case, &y, profile, 0.0, &PhasorSnapshot::flat(case), &pf_opts).map_err(|e| match e {
        Error::Disconnected(b) => Error::Disconnected(b),
        _ => Error::BaseCaseInfeasible("power flow at lambda = 0 does not converge"),
    })?;
    let mut tracer = Tracer {
        case,
        y: &y,
        profile,
        opts,
        kinds: base.kinds.clone(),
        pinned_q: pinned_at_base(case, &y, profile, &base),
        points: vec![CpfPoint {
            lambda: 0.0,
            snapshot: base.snapshot,
        }],
    };
    if opts.lambda_limit.is_some_and(|l| l <= 0.0) {
        // Only the base point was requested.
    } else if opts.adaptive {
        tracer.arc_length();
    } else {
        tracer.natural();
    }
    let last = tracer.points.last().expect("base point");
    let lambda_max = last.lambda;
    let (critical_bus_hint, _) = lowest_voltage_bus(&last.snapshot).expect("non-empty case");
    Ok(CpfTrajectory {
        points: tracer.points,
        lambda_max,
        critical_bus_hint,
    })
}

/// Generator reactive output of buses already switched to PQ at λ = 0.
fn pinned_at_base(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    profile: &LoadProfile,
    base: &PowerFlowSolution,
) -> Vec<Option<f64>> {
    let v = &base.snapshot.voltages;
    case.buses()
        .iter()
        .zip(&base.kinds)
        .enumerate()
        .map(|(i, (bus, &kind))| {
            (bus.kind != kind).then(|| (v[i] * y.current_at(i, v).conj()).im + profile.load(i, 0.0).im)
        })
        .collect()
}

struct Tracer<'a> {
    case: &'a NetworkCase,
    y: &'a AdmittanceMatrix,
    profile: &'a LoadProfile,
    opts: &'a CpfOptions,
    kinds: Vec<BusKind>,
    /// Generator reactive output of buses held at a reactive limit.
    pinned_q: Vec<Option<f64>>,
    points: Vec<CpfPoint>,
}

impl Tracer<'_> {
    fn push(&mut self, lambda: f64, v: Vec<Complex64>) {
        let snapshot = PhasorSnapshot::new(self.case.bus_ids(), v).with_lambda(lambda);
        self.points.push(CpfPoint { lambda, snapshot });
    }

    fn last(&self) -> &CpfPoint {
        self.points.last().expect("base point")
    }

    fn schedule(&self, lambda: f64) -> Vec<Complex64> {
        let mut s = self.profile.injections(lambda);
        for (i, pin) in self.pinned_q.iter().enumerate() {
            if let Some(q_gen) = pin {
                s[i].im = q_gen - self.profile.load(i, lambda).im;
            }
        }
        s
    }

    fn schedule_rate(&self) -> Vec<Complex64> {
        let mut d = self.profile.direction().to_vec();
        for (i, pin) in self.pinned_q.iter().enumerate() {
            if pin.is_some() {
                d[i].im = -(self.profile.load(i, 1.0) - self.profile.load(i, 0.0)).im;
            }
        }
        d
    }

    /// Fixed Δλ steps with a plain Newton corrector; stops at the first
    /// failure, so the nose is resolved to one step.
    fn natural(&mut self) {
        let pf_opts = PowerFlowOptions {
            tol: self.opts.tol,
            max_iter: self.opts.max_corrector_iter,
            enforce_q_limits: self.opts.enforce_q_limits,
        };
        let mut k = 1u64;
        while self.points.len() < self.opts.max_points {
            let mut lambda = self.opts.initial_step * k as f64;
            let capped = self.opts.lambda_limit.is_some_and(|l| lambda >= l);
            if let Some(limit) = self.opts.lambda_limit.filter(|_| capped) {
                lambda = limit;
            }
            let prev = &self.last().snapshot;
            let Ok(sol) = solve_loading(self.case, self.y, self.profile, lambda, prev, &pf_opts) else {
                break;
            };
            if !on_upper_branch(prev, &sol.snapshot) {
                break;
            }
            self.push(lambda, sol.snapshot.voltages);
            if capped {
                break;
            }
            k += 1;
        }
    }

    /// Pseudo arc-length continuation with local parameterization.
    fn arc_length(&mut self) {
        let mut step = self.opts.initial_step.min(self.opts.max_step);
        let mut tangent: Option<(DVector<f64>, usize)> = None;
        while self.points.len() < self.opts.max_points {
            let problem = Problem::new(self.case, self.y, &self.kinds);
            let m = problem.dim();
            let lambda0 = self.last().lambda;
            let (vm0, va0) = problem.start(&self.last().snapshot.voltages);
            let x0 = pack(&problem, &vm0, &va0, lambda0);
            let (z, k) = match tangent.take() {
                Some(t) => t,
                None => match self.tangent(&problem, &vm0, &va0, None) {
                    Some(t) => t,
                    None => return,
                },
            };
            let predicted = &x0 + &z * step;
            let accepted = self.correct(&problem, &vm0, &va0, &predicted, k).and_then(|(x, iters)| {
                let lambda = x[m];
                if lambda <= lambda0 {
                    return None;
                }
                let (vm, va) = unpack(&problem, &vm0, &va0, &x);
                let next = self.tangent(&problem, &vm, &va, Some(&z))?;
                // Past the fold the curve turns back in λ.
                if next.0[m] < 0.0 {
                    return None;
                }
                Some((polar(&vm, &va), lambda, next, iters))
            });
            match accepted {
                Some((v, lambda, next, iters)) => {
                    if let Some(limit) = self.opts.lambda_limit.filter(|&l| lambda >= l) {
                        self.finish_at(limit);
                        return;
                    }
                    self.push(lambda, v);
                    tangent = Some(next);
                    if self.opts.enforce_q_limits && self.apply_limits(lambda) {
                        tangent = None;
                        if !self.settle_limits(lambda) {
                            return;
                        }
                    }
                    if iters <= 3 {
                        step = (step * 2.0).min(self.opts.max_step);
                    }
                }
                None => {
                    tangent = Some((z, k));
                    step /= 2.0;
                    if step < self.opts.min_step {
                        return;
                    }
                }
            }
        }
    }

    /// Close the trace with a point solved exactly at `limit`.
    fn finish_at(&mut self, limit: f64) {
        if self.last().lambda >= limit {
            return;
        }
        let problem = Problem::new(self.case, self.y, &self.kinds);
        let (vm, va) = problem.start(&self.last().snapshot.voltages);
        if let Ok((vm, va, _)) = problem.newton(&self.schedule(limit), vm, va, self.opts.tol, 30) {
            self.push(limit, polar(&vm, &va));
        }
    }

    /// Pin PV buses whose generator leaves its reactive range at the last
    /// point. Returns whether anything was pinned.
    fn apply_limits(&mut self, lambda: f64) -> bool {
        let v = self.last().snapshot.voltages.clone();
        let v = &v;
        let mut changed = false;
        for (i, bus) in self.case.buses().iter().enumerate() {
            if self.kinds[i] != BusKind::PV {
                continue;
            }
            let q_gen = (v[i] * self.y.current_at(i, v).conj()).im + self.profile.load(i, lambda).im;
            let limit = match (bus.q_min, bus.q_max) {
                (_, Some(hi)) if q_gen > hi => hi,
                (Some(lo), _) if q_gen < lo => lo,
                _ => continue,
            };
            self.kinds[i] = BusKind::PQ;
            self.pinned_q[i] = Some(limit);
            changed = true;
        }
        changed
    }

    /// Re-solve the last point after pinning, repeating until no further
    /// limits are hit. Returns false if the pinned system has no solution
    /// at this λ, which ends the trace at the previous point.
    fn settle_limits(&mut self, lambda: f64) -> bool {
        loop {
            let problem = Problem::new(self.case, self.y, &self.kinds);
            let (vm, va) = problem.start(&self.last().snapshot.voltages);
            let sched = self.schedule(lambda);
            match problem.newton(&sched, vm, va, self.opts.tol, 30) {
                Ok((vm, va, _)) => {
                    let p = self.points.last_mut().expect("base point");
                    p.snapshot.voltages = polar(&vm, &va);
                }
                Err(_) => {
                    self.points.pop();
                    return false;
                }
            }
            if !self.apply_limits(lambda) {
                return true;
            }
        }
    }

    /// Unit tangent of the solution curve, oriented along `previous`
    /// (or toward increasing λ), and its largest component.
    fn tangent(
        &self,
        problem: &Problem<'_>,
        vm: &[f64],
        va: &[f64],
        previous: Option<&DVector<f64>>,
    ) -> Option<(DVector<f64>, usize)> {
        let m = problem.dim();
        let mut a = self.augmented_jacobian(problem, &polar(vm, va));
        let k = previous.map_or(m, argmax_abs);
        a[(m, k)] = 1.0;
        let mut rhs = DVector::zeros(m + 1);
        rhs[m] = 1.0;
        let mut z = solve(a, rhs).ok()?;
        let orient = previous.map_or(z[m], |p| p.dot(&z));
        if orient < 0.0 {
            z = -z;
        }
        let norm = z.norm();
        if !(norm > 0.0) {
            return None;
        }
        z /= norm;
        let k = argmax_abs(&z);
        Some((z, k))
    }

    fn augmented_jacobian(&self, problem: &Problem<'_>, v: &[Complex64]) -> DMatrix<f64> {
        let m = problem.dim();
        let mut a = problem.jacobian(v, 1);
        let rate = self.schedule_rate();
        let na = problem.ang.len();
        for (r, &i) in problem.ang.iter().enumerate() {
            a[(r, m)] = -rate[i].re;
        }
        for (r, &i) in problem.mag.iter().enumerate() {
            a[(na + r, m)] = -rate[i].im;
        }
        a
    }

    /// Newton on the mismatch augmented with `x_k = predicted_k`.
    fn correct(
        &self,
        problem: &Problem<'_>,
        vm0: &[f64],
        va0: &[f64],
        predicted: &DVector<f64>,
        k: usize,
    ) -> Option<(DVector<f64>, usize)> {
        let m = problem.dim();
        let mut x = predicted.clone();
        for it in 0..=self.opts.max_corrector_iter {
            let (vm, va) = unpack(problem, vm0, va0, &x);
            if vm.iter().any(|&m| !(m > 0.0)) {
                return None;
            }
            let v = polar(&vm, &va);
            let f = problem.mismatch(&v, &self.schedule(x[m]));
            let worst = max_abs(&f);
            if worst < self.opts.tol {
                return Some((x, it));
            }
            if it == self.opts.max_corrector_iter || !worst.is_finite() {
                return None;
            }
            let mut a = self.augmented_jacobian(problem, &v);
            a[(m, k)] = 1.0;
            let mut rhs = DVector::zeros(m + 1);
            rhs.rows_mut(0, m).copy_from(&(-f));
            rhs[m] = predicted[k] - x[k];
            x += solve(a, rhs).ok()?;
        }
        None
    }
}

/// Guard against a corrector that jumps to the lower branch: no bus may
/// lose half its magnitude in one step.
fn on_upper_branch(prev: &PhasorSnapshot, next: &PhasorSnapshot) -> bool {
    prev.voltages
        .iter()
        .zip(&next.voltages)
        .all(|(a, b)| b.norm() > 0.5 * a.norm())
}

fn argmax_abs(z: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..z.len() {
        if libm::fabs(z[i]) > libm::fabs(z[best]) {
            best = i;
        }
    }
    best
}

fn pack(problem: &Problem<'_>, vm: &[f64], va: &[f64], lambda: f64) -> DVector<f64> {
    let na = problem.ang.len();
    let mut x = DVector::zeros(problem.dim() + 1);
    for (k, &i) in problem.ang.iter().enumerate() {
        x[k] = va[i];
    }
    for (k, &i) in problem.mag.iter().enumerate() {
        x[na + k] = vm[i];
    }
    x[problem.dim()] = lambda;
    x
}

fn unpack(problem: &Problem<'_>, vm0: &[f64], va0: &[f64], x: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
    let na = problem.ang.len();
    let mut vm = vm0.to_vec();
    let mut va = va0.to_vec();
    for (k, &i) in problem.ang.iter().enumerate() {
        va[i] = x[k];
    }
    for (k, &i) in problem.mag.iter().enumerate() {
        vm[i] = x[na + k];
    }
    (vm, va)
}

/// Largest absolute active/reactive mismatch of `v` against the case
/// schedule, over the equations the solver enforces.
pub fn max_mismatch(case: &NetworkCase, y: &AdmittanceMatrix, v: &[Complex64], sched: &[Complex64]) -> f64 {
    let mut worst = 0.0f64;
    for (i, bus) in case.buses().iter().enumerate() {
        let s = v[i] * y.current_at(i, v).conj() - sched[i];
        if bus.kind != BusKind::Slack {
            worst = worst.max(libm::fabs(s.re));
        }
        if bus.kind == BusKind::PQ {
            worst = worst.max(libm::fabs(s.im));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{Branch, Bus};
    use libm::sqrt;

    fn two_bus(p: f64) -> NetworkCase {
        NetworkCase::new(
            vec![Bus::slack(1, 1.0), Bus::pq(2, p, 0.0)],
            vec![Branch::new(1, 2, Complex64::new(1.0, 0.0))],
            100.0,
        )
        .unwrap()
    }

    #[test]
    fn two_bus_high_root() {
        let case = two_bus(-0.2);
        let sol = solve_power_flow(&case, &PhasorSnapshot::flat(&case), 1e-10, 20).unwrap();
        let v = sol.voltages[1];
        // Resistive line, real load: V is real and solves V^2 - V + P = 0.
        let expected = (1.0 + sqrt(1.0 - 0.8)) / 2.0;
        assert!((v.re - expected).abs() < 1e-9, "{v}");
        assert!(v.im.abs() < 1e-9);
    }

    #[test]
    fn zero_load_is_flat() {
        let case = two_bus(0.0);
        let sol = solve_power_flow(&case, &PhasorSnapshot::flat(&case), 1e-10, 20).unwrap();
        assert!((sol.voltages[1] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn two_bus_nose() {
        // P_max = 0.25 for a unit resistive line; base load 0.2 gives 1.25.
        let case = two_bus(-0.2);
        let traj = continuation_power_flow(&case, 0.05, true).unwrap();
        assert!((traj.lambda_max - 1.25).abs() / 1.25 < 0.01, "{}", traj.lambda_max);
        assert_eq!(traj.critical_bus_hint, BusId(2));
        let fixed = continuation_power_flow(&case, 0.001, false).unwrap();
        assert!((fixed.lambda_max - 1.25).abs() / 1.25 < 0.01, "{}", fixed.lambda_max);
    }

    #[test]
    fn beyond_nose_does_not_converge() {
        let case = two_bus(-0.3);
        let err = solve_power_flow(&case, &PhasorSnapshot::flat(&case), 1e-10, 20).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. } | Error::SingularJacobian));
    }

    #[test]
    fn lowest_voltage_tie_break() {
        let flat = PhasorSnapshot::new(
            vec![BusId(1), BusId(2), BusId(3)],
            vec![Complex64::new(1.0, 0.0); 3],
        );
        assert_eq!(lowest_voltage_bus(&flat), Some((BusId(1), 1.0)));
        let single = PhasorSnapshot::new(vec![BusId(7)], vec![Complex64::new(0.9, 0.1)]);
        assert_eq!(lowest_voltage_bus(&single).unwrap().0, BusId(7));
        let empty = PhasorSnapshot::new(vec![], vec![]);
        assert_eq!(lowest_voltage_bus(&empty), None);
    }

    #[test]
    fn pv_bus_holds_setpoint() {
        let case = NetworkCase::new(
            vec![Bus::slack(1, 1.02), Bus::pv(2, 0.3, 1.01), Bus::pq(3, -0.5, -0.2)],
            vec![
                Branch::from_impedance(1, 2, 0.02, 0.1),
                Branch::from_impedance(2, 3, 0.03, 0.12).with_charging(0.04),
                Branch::from_impedance(1, 3, 0.02, 0.08).with_tap(0.97, 2.0),
            ],
            100.0,
        )
        .unwrap();
        let y = build_admittance(&case).unwrap();
        let sol = solve_case(&case, &y, &PhasorSnapshot::flat(&case), &PowerFlowOptions::default()).unwrap();
        let v = &sol.snapshot.voltages;
        assert!((v[1].norm() - 1.01).abs() < 1e-12);
        assert!((v[0] - Complex64::new(1.02, 0.0)).norm() < 1e-12);
        let sched: Vec<_> = case.buses().iter().map(|b| b.injection()).collect();
        assert!(max_mismatch(&case, &y, v, &sched) < 1e-8);
        let again = solve_case(&case, &y, &sol.snapshot, &PowerFlowOptions::default()).unwrap();
        assert!(again.iterations <= 2);
    }

    #[test]
    fn reactive_limit_switches_pv_to_pq() {
        let mut buses = vec![Bus::slack(1, 1.0), Bus::pv(2, 0.0, 1.05), Bus::pq(3, -0.4, -0.3)];
        buses[1].q_max = Some(0.05);
        buses[1].q_min = Some(-0.05);
        let case = NetworkCase::new(
            buses,
            vec![
                Branch::from_impedance(1, 2, 0.01, 0.1),
                Branch::from_impedance(2, 3, 0.01, 0.1),
            ],
            100.0,
        )
        .unwrap();
        let y = build_admittance(&case).unwrap();
        let opts = PowerFlowOptions {
            enforce_q_limits: true,
            ..PowerFlowOptions::default()
        };
        let sol = solve_case(&case, &y, &PhasorSnapshot::flat(&case), &opts).unwrap();
        assert_eq!(sol.kinds[1], BusKind::PQ);
        let v = &sol.snapshot.voltages;
        let q2 = (v[1] * y.current_at(1, v).conj()).im;
        assert!((q2 - 0.05).abs() < 1e-8);
    }
}
