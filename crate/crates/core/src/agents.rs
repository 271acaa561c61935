//! Per-bus agents computing the index from neighbour phasors only.
//!
//! A [`BusAgent`] owns a copy of its own admittance row and nothing else;
//! all remote information arrives as [`PmuMeasurement`] messages through
//! [`exchange`]. [`run_timeline`] drives a quasi-static simulation in
//! which the physical network and the agents' local data can diverge
//! after a line outage until an admittance refresh.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::baselines::{estimate_thevenin, lti_index};
use crate::circlevsi::{no_load_reference, pq_delta_star, pv_delta_star, TParams, Vsi};
use crate::error::{Error, Result};
use crate::netmodel::{apply_outage, build_admittance, AdmittanceMatrix, BusId, BusKind, LoadProfile, NetworkCase};
use crate::powerflow::{solve_loading, PhasorSnapshot, PowerFlowOptions};

/// Gaussian perturbation of phasor magnitude (p.u.) and angle (degrees).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct NoiseModel {
    pub sigma_v: f64,
    pub sigma_theta_deg: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma_v: f64, sigma_theta_deg: f64, seed: u64) -> Result<Self> {
        if !(sigma_v >= 0.0 && sigma_v.is_finite()) || !(sigma_theta_deg >= 0.0 && sigma_theta_deg.is_finite()) {
            return Err(Error::InvalidNoise("standard deviations must be finite and non-negative"));
        }
        Ok(NoiseModel {
            sigma_v,
            sigma_theta_deg,
            seed,
        })
    }

    pub fn none() -> Self {
        NoiseModel {
            sigma_v: 0.0,
            sigma_theta_deg: 0.0,
            seed: 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_v == 0.0 && self.sigma_theta_deg == 0.0
    }

    /// Independent stream for one (timestamp, bus) pair.
    fn rng(&self, timestamp: f64, bus: BusId) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.seed.to_le_bytes());
        seed[8..16].copy_from_slice(&timestamp.to_bits().to_le_bytes());
        seed[16..20].copy_from_slice(&bus.0.to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    /// Measured value of `truth` at bus `bus` and time `timestamp`.
    pub fn perturb(&self, truth: Complex64, bus: BusId, timestamp: f64) -> Complex64 {
        if self.is_zero() {
            return truth;
        }
        let mut rng = self.rng(timestamp, bus);
        let dv: f64 = StandardNormal.sample(&mut rng);
        let dth: f64 = StandardNormal.sample(&mut rng);
        Complex64::from_polar(
            truth.norm() + self.sigma_v * dv,
            truth.arg() + self.sigma_theta_deg * PI / 180.0 * dth,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PmuMeasurement {
    pub bus: BusId,
    pub voltage: Complex64,
    pub timestamp: f64,
}

/// One measurement per bus of `truth`, perturbed by `noise`.
pub fn synthesize_measurements(truth: &PhasorSnapshot, noise: &NoiseModel) -> Vec<PmuMeasurement> {
    let timestamp = truth.timestamp.unwrap_or(0.0);
    truth
        .buses
        .iter()
        .zip(&truth.voltages)
        .map(|(&bus, &v)| PmuMeasurement {
            bus,
            voltage: noise.perturb(v, bus, timestamp),
            timestamp,
        })
        .collect()
}

/// What an agent knows about its own bus.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum LocalSetpoint {
    Pq { p: f64, q: f64 },
    Pv { p: f64, v_spec: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusAgent {
    bus: BusId,
    diag: Complex64,
    /// Own admittance row, sorted by neighbour id.
    branches: Vec<(BusId, Complex64)>,
    setpoint: LocalSetpoint,
    reference: f64,
}

impl BusAgent {
    /// Copy bus `bus`'s row out of `y`.
    pub fn new(y: &AdmittanceMatrix, bus: BusId, setpoint: LocalSetpoint, reference: f64) -> Result<Self> {
        if !(reference > 0.0) {
            return Err(Error::NonPositiveReference(reference));
        }
        let (diag, branches) = local_row(y, bus)?;
        Ok(BusAgent {
            bus,
            diag,
            branches,
            setpoint,
            reference,
        })
    }

    pub fn bus(&self) -> BusId {
        self.bus
    }

    pub fn neighbors(&self) -> impl Iterator<Item = BusId> + '_ {
        self.branches.iter().map(|&(b, _)| b)
    }

    pub fn setpoint(&self) -> LocalSetpoint {
        self.setpoint
    }

    pub fn reference(&self) -> f64 {
        self.reference
    }

    pub fn set_setpoint(&mut self, setpoint: LocalSetpoint) {
        self.setpoint = setpoint;
    }

    /// Replace local admittance data and normalisation after a topology
    /// change.
    pub fn refresh(&mut self, y: &AdmittanceMatrix, reference: f64) -> Result<()> {
        if !(reference > 0.0) {
            return Err(Error::NonPositiveReference(reference));
        }
        let (diag, branches) = local_row(y, self.bus)?;
        self.diag = diag;
        self.branches = branches;
        self.reference = reference;
        Ok(())
    }

    /// Net current injection from own and neighbour voltages.
    pub fn injected_current(&self, own: Complex64, inbox: &Inbox) -> Option<Complex64> {
        self.branches.iter().try_fold(self.diag * own, |acc, (b, y)| {
            inbox.messages.get(b).map(|m| acc + y * m.voltage)
        })
    }
}

fn local_row(y: &AdmittanceMatrix, bus: BusId) -> Result<(Complex64, Vec<(BusId, Complex64)>)> {
    let i = y.index_of(bus)?;
    let branches = y.row(i).iter().map(|&(k, y_dk)| (y.bus_id(k), y_dk)).collect();
    Ok((y.diag(i), branches))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Message {
    pub sender: BusId,
    pub receiver: BusId,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Inbox {
    pub messages: BTreeMap<BusId, PmuMeasurement>,
    /// Neighbours whose measurement did not arrive.
    pub missing: Vec<BusId>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Exchange {
    /// One inbox per agent, in agent order.
    pub inboxes: Vec<Inbox>,
    pub log: Vec<Message>,
}

/// Deliver to each agent exactly the measurements of its neighbours.
pub fn exchange(agents: &[BusAgent], measurements: &[PmuMeasurement]) -> Exchange {
    let by_bus: BTreeMap<BusId, &PmuMeasurement> = measurements.iter().map(|m| (m.bus, m)).collect();
    let mut out = Exchange::default();
    for agent in agents {
        let mut inbox = Inbox::default();
        for sender in agent.neighbors() {
            match by_bus.get(&sender) {
                Some(m) => {
                    inbox.messages.insert(sender, **m);
                    out.log.push(Message {
                        sender,
                        receiver: agent.bus,
                        timestamp: m.timestamp,
                    });
                }
                None => inbox.missing.push(sender),
            }
        }
        out.inboxes.push(inbox);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum ReadingFlag {
    Ok,
    /// Circles separated.
    Negative,
    /// Missing neighbour data, or local admittance known to be out of date.
    Stale,
    /// `t1` or `t4` vanishes on this bus.
    Degenerate,
    /// A local circle has a negative squared radius.
    Infeasible,
}

impl ReadingFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReadingFlag::Ok => "ok",
            ReadingFlag::Negative => "negative",
            ReadingFlag::Stale => "stale",
            ReadingFlag::Degenerate => "degenerate",
            ReadingFlag::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentReading {
    pub bus: BusId,
    pub vsi: Option<Vsi>,
    pub flag: ReadingFlag,
}

impl AgentReading {
    pub fn value(&self) -> Option<f64> {
        self.vsi.map(|v| v.value)
    }
}

/// Evaluate the index from agent-local data and the inbox.
pub fn agent_step(agent: &BusAgent, inbox: &Inbox) -> AgentReading {
    let reading = |vsi, flag| AgentReading {
        bus: agent.bus,
        vsi,
        flag,
    };
    let row: Option<Vec<(Complex64, Complex64)>> = agent
        .branches
        .iter()
        .map(|(b, y)| inbox.messages.get(b).map(|m| (*y, m.voltage)))
        .collect();
    let Some(row) = row else {
        return reading(None, ReadingFlag::Stale);
    };
    let t = TParams::from_local_row(agent.bus, agent.diag, row);
    let raw = match agent.setpoint {
        LocalSetpoint::Pq { p, q } => pq_delta_star(&t, p, q),
        LocalSetpoint::Pv { p, v_spec } => pv_delta_star(&t, p, v_spec),
    };
    match raw {
        Ok(raw) => {
            let vsi = Vsi {
                bus: agent.bus,
                value: raw / agent.reference,
                raw,
                reference: agent.reference,
            };
            let flag = if vsi.is_negative() {
                ReadingFlag::Negative
            } else {
                ReadingFlag::Ok
            };
            reading(Some(vsi), flag)
        }
        Err(Error::DegenerateCircle { .. }) => reading(None, ReadingFlag::Degenerate),
        Err(_) => reading(None, ReadingFlag::Infeasible),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum TimelineEvent {
    /// From `time` on, λ(t) = `lambda_start` + `rate`·(t − `time`).
    LoadRamp { time: f64, lambda_start: f64, rate: f64 },
    LineOutage { time: f64, from: BusId, to: BusId },
    AdmittanceRefresh { time: f64 },
}

impl TimelineEvent {
    pub fn time(&self) -> f64 {
        match *self {
            TimelineEvent::LoadRamp { time, .. }
            | TimelineEvent::LineOutage { time, .. }
            | TimelineEvent::AdmittanceRefresh { time } => time,
        }
    }
}

/// Sampling window and ordered events.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct EventTimeline {
    pub start: f64,
    pub end: f64,
    events: Vec<TimelineEvent>,
}

impl EventTimeline {
    pub fn new(start: f64, end: f64, events: Vec<TimelineEvent>) -> Result<Self> {
        if !(end >= start) {
            return Err(Error::InvalidTimeline("end precedes start"));
        }
        if events.windows(2).any(|w| !(w[0].time() <= w[1].time())) {
            return Err(Error::InvalidTimeline("event times must be nondecreasing"));
        }
        if !events.iter().any(|e| matches!(e, TimelineEvent::LoadRamp { time, .. } if *time <= start)) {
            return Err(Error::InvalidTimeline("a load ramp must be active at the start"));
        }
        Ok(EventTimeline { start, end, events })
    }

    pub fn events(&self) -> &[TimelineEvent] {
        &self.events
    }

    /// Loading level at time `t` from the latest ramp started by then.
    pub fn lambda_at(&self, t: f64) -> f64 {
        self.events
            .iter()
            .rev()
            .find_map(|e| match *e {
                TimelineEvent::LoadRamp {
                    time,
                    lambda_start,
                    rate,
                } if time <= t => Some(lambda_start + rate * (t - time)),
                _ => None,
            })
            .unwrap_or(0.0)
    }
}

/// Which scalar normalises the index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum ReferenceMode {
    /// Flat 1∠0 neighbours with zero injection.
    FlatNoLoad,
    /// Solved operating point with every injection scaled to zero.
    #[default]
    OperatingPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineOptions {
    /// Loading path; proportional when absent.
    pub profile: Option<LoadProfile>,
    pub reference: ReferenceMode,
    pub power_flow: PowerFlowOptions,
    /// Samples per Thevenin fit; no baseline when absent.
    pub lti_window: Option<usize>,
}

impl Default for TimelineOptions {
    fn default() -> Self {
        TimelineOptions {
            profile: None,
            reference: ReferenceMode::default(),
            power_flow: PowerFlowOptions::default(),
            lti_window: Some(10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum RecordedEvent {
    LineOutage { from: BusId, to: BusId },
    AdmittanceRefresh,
    /// Power flow had no solution at this sample.
    Collapse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineSample {
    pub time: f64,
    pub lambda: f64,
    pub readings: Vec<AgentReading>,
    /// Baseline index per reading, when available.
    pub lti: Vec<Option<f64>>,
    pub events: Vec<RecordedEvent>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimelineResult {
    pub samples: Vec<TimelineSample>,
}

impl TimelineResult {
    /// Index series of one bus as `(time, value)`.
    pub fn series(&self, bus: BusId) -> Vec<(f64, Option<f64>)> {
        self.samples
            .iter()
            .map(|s| {
                let v = s.readings.iter().find(|r| r.bus == bus).and_then(|r| r.value());
                (s.time, v)
            })
            .collect()
    }
}

/// `Δ*` an agent with `setpoint` would report at the solved `snapshot`.
fn scheduled_delta_star(y: &AdmittanceMatrix, bus: BusId, setpoint: LocalSetpoint, snapshot: &PhasorSnapshot) -> Result<f64> {
    let (diag, branches) = local_row(y, bus)?;
    let row = branches
        .iter()
        .map(|&(b, y_dk)| {
            snapshot
                .voltage(b)
                .map(|v| (y_dk, v))
                .ok_or(Error::MissingNeighborVoltage { bus, neighbor: b })
        })
        .collect::<Result<Vec<_>>>()?;
    let t = TParams::from_local_row(bus, diag, row);
    match setpoint {
        LocalSetpoint::Pq { p, q } => pq_delta_star(&t, p, q),
        LocalSetpoint::Pv { p, v_spec } => pv_delta_star(&t, p, v_spec),
    }
}

/// Normalisation scalar for every bus of the network. In operating-point
/// mode this is exactly the reading an agent produces at λ = 0.
fn references(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    profile: &LoadProfile,
    mode: ReferenceMode,
    pf: &PowerFlowOptions,
) -> Result<Vec<Option<f64>>> {
    let base = match mode {
        ReferenceMode::FlatNoLoad => None,
        ReferenceMode::OperatingPoint => Some(
            solve_loading(case, y, profile, 0.0, &PhasorSnapshot::flat(case), pf)
                .map_err(|_| Error::BaseCaseInfeasible("no-load operating point does not converge"))?
                .snapshot,
        ),
    };
    Ok(case
        .buses()
        .iter()
        .enumerate()
        .map(|(i, bus)| {
            let r = match (&base, bus.kind) {
                (_, BusKind::Slack) => return None,
                (None, BusKind::PV) => crate::circlevsi::pv_no_load_reference(y, bus.id, bus.v_spec),
                (None, _) => no_load_reference(y, bus.id),
                (Some(snap), _) => scheduled_delta_star(y, bus.id, local_setpoint(case, profile, i, 0.0), snap),
            };
            r.ok().filter(|r| *r > 0.0)
        })
        .collect())
}

/// Agents for every non-slack bus with a usable reference. Buses whose
/// circles are degenerate get a placeholder reference of 1 so that their
/// readings surface the degeneracy instead of disappearing.
pub fn build_agents(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    profile: &LoadProfile,
    lambda: f64,
    mode: ReferenceMode,
    pf: &PowerFlowOptions,
) -> Result<Vec<BusAgent>> {
    let refs = references(case, y, profile, mode, pf)?;
    case.buses()
        .iter()
        .enumerate()
        .filter(|(_, b)| b.kind != BusKind::Slack)
        .map(|(i, bus)| BusAgent::new(y, bus.id, local_setpoint(case, profile, i, lambda), refs[i].unwrap_or(1.0)))
        .collect()
}

/// Local setpoint of bus index `i` at loading `lambda`.
pub fn local_setpoint(case: &NetworkCase, profile: &LoadProfile, i: usize, lambda: f64) -> LocalSetpoint {
    let s = profile.injection(i, lambda);
    let bus = &case.buses()[i];
    match bus.kind {
        BusKind::PV => LocalSetpoint::Pv {
            p: s.re,
            v_spec: bus.v_spec,
        },
        _ => LocalSetpoint::Pq { p: s.re, q: s.im },
    }
}

/// Quasi-static simulation sampled at `sample_rate` Hz over the timeline.
pub fn run_timeline(
    case: &NetworkCase,
    timeline: &EventTimeline,
    noise: &NoiseModel,
    sample_rate: f64,
    opts: &TimelineOptions,
) -> Result<TimelineResult> {
    if !(sample_rate > 0.0) {
        return Err(Error::InvalidTimeline("sample rate must be positive"));
    }
    let profile = opts.profile.clone().unwrap_or_else(|| LoadProfile::proportional(case));
    let pf = opts.power_flow;
    let mut physical = case.clone();
    let mut y = build_admittance(&physical)?;
    let lambda0 = timeline.lambda_at(timeline.start);
    let mut agents = build_agents(&physical, &y, &profile, lambda0, opts.reference, &pf)?;
    let mut stale = false;
    let mut warm = PhasorSnapshot::flat(case);
    let mut history: Vec<Vec<(Complex64, Complex64)>> = alloc::vec![Vec::new(); agents.len()];
    let mut pending = timeline.events().iter().peekable();
    let mut result = TimelineResult::default();
    let count = libm::floor((timeline.end - timeline.start) * sample_rate + 1e-9) as usize;
    for k in 0..=count {
        let time = timeline.start + k as f64 / sample_rate;
        let lambda = timeline.lambda_at(time);
        let mut events = Vec::new();
        while let Some(e) = pending.next_if(|e| e.time() <= time + 1e-9) {
            match *e {
                TimelineEvent::LoadRamp { .. } => {}
                TimelineEvent::LineOutage { from, to, .. } => {
                    physical = apply_outage(&physical, from, to)?;
                    y = build_admittance(&physical)?;
                    stale = true;
                    events.push(RecordedEvent::LineOutage { from, to });
                }
                TimelineEvent::AdmittanceRefresh { .. } => {
                    let refs = references(&physical, &y, &profile, opts.reference, &pf)?;
                    for agent in &mut agents {
                        let i = physical.index_of(agent.bus)?;
                        agent.refresh(&y, refs[i].unwrap_or(1.0))?;
                    }
                    stale = false;
                    events.push(RecordedEvent::AdmittanceRefresh);
                }
            }
        }
        let solved = solve_loading(&physical, &y, &profile, lambda, &warm, &pf);
        let Ok(sol) = solved else {
            events.push(RecordedEvent::Collapse);
            result.samples.push(TimelineSample {
                time,
                lambda,
                readings: Vec::new(),
                lti: Vec::new(),
                events,
            });
            continue;
        };
        warm = sol.snapshot.clone();
        let truth = sol.snapshot.with_timestamp(time);
        let measurements = synthesize_measurements(&truth, noise);
        for (agent, i) in agents.iter_mut().map(|a| {
            let i = physical.index_of(a.bus).expect("agent bus in case");
            (a, i)
        }) {
            agent.set_setpoint(local_setpoint(&physical, &profile, i, lambda));
        }
        let ex = exchange(&agents, &measurements);
        let mut readings = Vec::with_capacity(agents.len());
        let mut lti = Vec::with_capacity(agents.len());
        for ((agent, inbox), hist) in agents.iter().zip(&ex.inboxes).zip(&mut history) {
            let mut reading = agent_step(agent, inbox);
            if stale && reading.flag == ReadingFlag::Ok {
                reading.flag = ReadingFlag::Stale;
            }
            readings.push(reading);
            let own = measurements[physical.index_of(agent.bus)?].voltage;
            lti.push(opts.lti_window.and_then(|w| {
                // Load current: the negative of the injected current.
                let current = -agent.injected_current(own, inbox)?;
                hist.push((own, current));
                if hist.len() > w {
                    hist.remove(0);
                }
                if hist.len() < w {
                    return None;
                }
                let est = estimate_thevenin(hist).ok()?;
                Some(lti_index(&est, own, current))
            }));
        }
        result.samples.push(TimelineSample {
            time,
            lambda,
            readings,
            lti,
            events,
        });
    }
    Ok(result)
}
