//! Scenario orchestration and report files.
//!
//! Each scenario produces a long-form [`ScenarioResult`] table plus a
//! [`Summary`]; [`write_outputs`] turns them into CSV and JSON files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use num_complex::Complex64;
use pmuvsi_core::agents::{
    agent_step, build_agents, exchange, local_setpoint, run_timeline, synthesize_measurements, AgentReading,
    EventTimeline, NoiseModel, ReadingFlag, RecordedEvent, ReferenceMode, TimelineEvent, TimelineOptions,
    TimelineResult,
};
use pmuvsi_core::baselines::{estimate_thevenin, lti_index};
use pmuvsi_core::circlevsi::{
    circles_from_t, classify_intersection, compute_t_params, neighbor_voltages, operating_point_reference, vsi_from_t,
    CircleGeometry, Intersection,
};
use pmuvsi_core::netmodel::{build_admittance, BusId, BusKind, LoadProfile, NetworkCase, OtherLoads};
use pmuvsi_core::powerflow::{
    lowest_voltage_bus, solve_case, solve_loading, trace_continuation, CpfOptions, CpfTrajectory, PhasorSnapshot,
    PowerFlowOptions,
};
use serde::Serialize;

use crate::error::{HarnessError, Result};

/// Load points at buses 2 and 3 of the three-bus illustration.
pub const THREE_BUS_LOADS: [(f64, f64); 5] = [(-0.01, 0.33), (-0.04, 0.40), (-0.13, 0.44), (-0.28, 0.45), (-0.49, 0.43)];

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioKind {
    Proportional,
    Directional {
        buses: BTreeSet<BusId>,
        rate: f64,
        others: OtherLoads,
    },
    NoiseStudy {
        bus: BusId,
        realizations: usize,
        lambda0: f64,
        ramp_per_sample: f64,
        window: usize,
    },
    LineOutage {
        from: BusId,
        to: BusId,
        time: f64,
        end: f64,
        ramp_rate: f64,
        refresh_at: Option<f64>,
        monitored: Vec<BusId>,
    },
    ThreeBusIllustration {
        loads: Vec<Complex64>,
        bus: BusId,
    },
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Proportional => "proportional",
            ScenarioKind::Directional { .. } => "directional",
            ScenarioKind::NoiseStudy { .. } => "noise",
            ScenarioKind::LineOutage { .. } => "line-outage",
            ScenarioKind::ThreeBusIllustration { .. } => "three-bus",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub case: NetworkCase,
    /// Where the case came from, echoed into the summary.
    pub case_label: String,
    pub kind: ScenarioKind,
    pub noise: NoiseModel,
    pub reference: ReferenceMode,
    pub cpf: CpfOptions,
    /// Step of the uniform λ grid used for the resampled CSV.
    pub grid_step: f64,
}

impl ScenarioConfig {
    fn with_kind(case: NetworkCase, case_label: &str, kind: ScenarioKind) -> Self {
        ScenarioConfig {
            case,
            case_label: case_label.to_string(),
            kind,
            noise: NoiseModel::none(),
            reference: ReferenceMode::default(),
            cpf: CpfOptions::default(),
            grid_step: 0.01,
        }
    }

    pub fn proportional(case: NetworkCase, case_label: &str) -> Self {
        Self::with_kind(case, case_label, ScenarioKind::Proportional)
    }

    /// Loads at buses 17-30 grow with λ, the rest stay at base.
    pub fn directional(case: NetworkCase, case_label: &str) -> Self {
        let buses = (17..=30).map(BusId).collect();
        Self::with_kind(
            case,
            case_label,
            ScenarioKind::Directional {
                buses,
                rate: 1.0,
                others: OtherLoads::HeldAtBase,
            },
        )
    }

    pub fn noise_study(case: NetworkCase, case_label: &str, seed: u64) -> Self {
        let mut cfg = Self::with_kind(
            case,
            case_label,
            ScenarioKind::NoiseStudy {
                bus: BusId(30),
                realizations: 1000,
                lambda0: 1.0,
                ramp_per_sample: 0.01,
                window: 10,
            },
        );
        cfg.noise = NoiseModel {
            sigma_v: 0.001,
            sigma_theta_deg: 0.01,
            seed,
        };
        cfg
    }

    /// Linear ramp λ = 0.01·t over 0..200 s with branch 15-23 lost at 138 s.
    pub fn line_outage(case: NetworkCase, case_label: &str) -> Self {
        Self::with_kind(
            case,
            case_label,
            ScenarioKind::LineOutage {
                from: BusId(15),
                to: BusId(23),
                time: 138.0,
                end: 200.0,
                ramp_rate: 0.01,
                refresh_at: None,
                monitored: vec![BusId(14), BusId(15), BusId(18), BusId(19)],
            },
        )
    }

    pub fn three_bus(case: NetworkCase, case_label: &str) -> Self {
        let loads = THREE_BUS_LOADS.iter().map(|&(p, q)| Complex64::new(p, q)).collect();
        Self::with_kind(
            case,
            case_label,
            ScenarioKind::ThreeBusIllustration { loads, bus: BusId(3) },
        )
    }
}

/// One line of the long-form results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub time_or_lambda: f64,
    pub bus: BusId,
    pub vsi: Option<f64>,
    pub lti: Option<f64>,
    pub flag: &'static str,
    pub event: String,
    pub bus_kind: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThreeBusPoint {
    pub point: usize,
    pub load_p: f64,
    pub load_q: f64,
    pub solved: bool,
    pub p_circle: Option<CircleGeometry>,
    pub q_circle: Option<CircleGeometry>,
    pub classification: Option<Intersection>,
    pub vsi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub case: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critical_bus: Option<BusId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critical_vsi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lowest_voltage_bus: Option<BusId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lowest_voltage: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub linear_fit_r2: BTreeMap<BusId, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_vsi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_lti: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outage_localized_bus: Option<BusId>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub outage_drops: BTreeMap<BusId, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stale_refreshed_max_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub collapse_time: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub three_bus: Vec<ThreeBusPoint>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioResult {
    pub rows: Vec<ResultRow>,
    pub summary: Summary,
    pub trajectory: Option<CpfTrajectory>,
    /// Index rows on a uniform λ grid, interpolated from the trajectory.
    pub grid: Vec<ResultRow>,
    /// Companion table for the outage scenario with refreshed admittance.
    pub refreshed: Vec<ResultRow>,
}

pub fn run(config: &ScenarioConfig) -> Result<ScenarioResult> {
    info!("running {} on {}", config.kind.name(), config.case_label);
    let mut result = match &config.kind {
        ScenarioKind::Proportional => run_proportional(config),
        ScenarioKind::Directional { .. } => run_directional(config),
        ScenarioKind::NoiseStudy { .. } => run_noise_study(config),
        ScenarioKind::LineOutage { .. } => run_line_outage(config),
        ScenarioKind::ThreeBusIllustration { .. } => run_three_bus(config),
    }?;
    result.summary.scenario = config.kind.name().to_string();
    result.summary.case = config.case_label.clone();
    result.summary.seed = config.noise.seed;
    Ok(result)
}

fn kind_label(kind: BusKind) -> &'static str {
    match kind {
        BusKind::Slack => "slack",
        BusKind::PV => "pv",
        BusKind::PQ => "pq",
    }
}

fn power_flow_options(cfg: &CpfOptions) -> PowerFlowOptions {
    PowerFlowOptions {
        tol: cfg.tol,
        max_iter: 30,
        enforce_q_limits: cfg.enforce_q_limits,
    }
}

/// Zero-noise agent readings at every trajectory point.
pub fn trajectory_readings(
    case: &NetworkCase,
    profile: &LoadProfile,
    trajectory: &CpfTrajectory,
    reference: ReferenceMode,
    pf: &PowerFlowOptions,
) -> Result<Vec<Vec<AgentReading>>> {
    let y = build_admittance(case)?;
    let mut agents = build_agents(case, &y, profile, 0.0, reference, pf)?;
    let noise = NoiseModel::none();
    let mut out = Vec::with_capacity(trajectory.points.len());
    for point in &trajectory.points {
        for agent in &mut agents {
            let i = case.index_of(agent.bus())?;
            agent.set_setpoint(local_setpoint(case, profile, i, point.lambda));
        }
        let measurements = synthesize_measurements(&point.snapshot, &noise);
        let ex = exchange(&agents, &measurements);
        out.push(agents.iter().zip(&ex.inboxes).map(|(a, inbox)| agent_step(a, inbox)).collect());
    }
    Ok(out)
}

/// Bus with the smallest PQ-bus index among `readings`; ties to lowest id.
pub fn argmin_vsi(case: &NetworkCase, readings: &[AgentReading]) -> Option<(BusId, f64)> {
    let mut best: Option<(BusId, f64)> = None;
    for r in readings {
        let pq = case.bus(r.bus).map(|b| b.kind == BusKind::PQ).unwrap_or(false);
        let Some(v) = r.value().filter(|_| pq) else { continue };
        if best.is_none_or(|(bb, bv)| v < bv || (v == bv && r.bus < bb)) {
            best = Some((r.bus, v));
        }
    }
    best
}

/// Coefficient of determination of the least-squares line through the
/// points.
pub fn linear_r2(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    if sxx == 0.0 {
        return 0.0;
    }
    let slope = sxy / sxx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (my + slope * (x - mx));
            e * e
        })
        .sum();
    1.0 - sse / syy
}

fn trace_scenario(config: &ScenarioConfig, profile: &LoadProfile) -> Result<ScenarioResult> {
    let case = &config.case;
    let trajectory = trace_continuation(case, profile, &config.cpf)?;
    info!(
        "trajectory: {} points, lambda_max {:.6}",
        trajectory.points.len(),
        trajectory.lambda_max
    );
    let pf = power_flow_options(&config.cpf);
    let readings = trajectory_readings(case, profile, &trajectory, config.reference, &pf)?;
    let mut rows = Vec::new();
    for (point, at_point) in trajectory.points.iter().zip(&readings) {
        for r in at_point {
            rows.push(ResultRow {
                time_or_lambda: point.lambda,
                bus: r.bus,
                vsi: r.value(),
                lti: None,
                flag: r.flag.as_str(),
                event: String::new(),
                bus_kind: kind_label(case.bus(r.bus)?.kind),
            });
        }
    }
    if let Some(last) = rows.last().map(|r| r.time_or_lambda) {
        for row in rows.iter_mut().filter(|r| r.time_or_lambda == last) {
            row.event = "nose".to_string();
        }
    }
    let last = readings.last().expect("trajectory has a base point");
    let (critical_bus, critical_vsi) = argmin_vsi(case, last).unzip();
    let (low_bus, low_v) = lowest_voltage_bus(&trajectory.last().snapshot).unzip();
    let grid = resample(&trajectory, &readings, config.grid_step, case)?;
    let linear_fit_r2 = grid_r2(&grid);
    Ok(ScenarioResult {
        rows,
        summary: Summary {
            lambda_max: Some(trajectory.lambda_max),
            critical_bus,
            critical_vsi,
            lowest_voltage_bus: low_bus,
            lowest_voltage: low_v,
            linear_fit_r2,
            ..Summary::default()
        },
        trajectory: Some(trajectory),
        grid,
        refreshed: Vec::new(),
    })
}

/// R² of a straight-line fit per PQ bus over the uniform λ grid, so the
/// step refinement near the nose does not weight the fit.
fn grid_r2(grid: &[ResultRow]) -> BTreeMap<BusId, f64> {
    let mut series: BTreeMap<BusId, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut broken = BTreeSet::new();
    for row in grid.iter().filter(|r| r.bus_kind == "pq") {
        match row.vsi {
            Some(v) => {
                let s = series.entry(row.bus).or_default();
                s.0.push(row.time_or_lambda);
                s.1.push(v);
            }
            None => {
                broken.insert(row.bus);
            }
        }
    }
    series
        .into_iter()
        .filter(|(b, (xs, _))| !broken.contains(b) && xs.len() >= 3)
        .map(|(b, (xs, ys))| (b, linear_r2(&xs, &ys)))
        .collect()
}

/// Linear interpolation of each bus's index onto λ = 0, h, 2h, … and λ_max.
fn resample(
    trajectory: &CpfTrajectory,
    readings: &[Vec<AgentReading>],
    step: f64,
    case: &NetworkCase,
) -> Result<Vec<ResultRow>> {
    if step.is_nan() || step <= 0.0 || trajectory.points.len() < 2 {
        return Ok(Vec::new());
    }
    let lambdas: Vec<f64> = trajectory.points.iter().map(|p| p.lambda).collect();
    let lmax = trajectory.lambda_max;
    let mut grid: Vec<f64> = (0..).map(|k| k as f64 * step).take_while(|&l| l < lmax).collect();
    grid.push(lmax);
    let mut rows = Vec::new();
    for &l in &grid {
        let j = lambdas.partition_point(|&x| x <= l).clamp(1, lambdas.len() - 1);
        let (l0, l1) = (lambdas[j - 1], lambdas[j]);
        let w = if l1 > l0 { (l - l0) / (l1 - l0) } else { 0.0 };
        for (k, r) in readings[j].iter().enumerate() {
            let a = readings[j - 1][k].value();
            let b = r.value();
            let vsi = a.zip(b).map(|(a, b)| a + w * (b - a));
            rows.push(ResultRow {
                time_or_lambda: l,
                bus: r.bus,
                vsi,
                lti: None,
                flag: if vsi.is_some() { r.flag.as_str() } else { ReadingFlag::Stale.as_str() },
                event: String::new(),
                bus_kind: kind_label(case.bus(r.bus)?.kind),
            });
        }
    }
    Ok(rows)
}

pub fn run_proportional(config: &ScenarioConfig) -> Result<ScenarioResult> {
    trace_scenario(config, &LoadProfile::proportional(&config.case))
}

pub fn run_directional(config: &ScenarioConfig) -> Result<ScenarioResult> {
    let ScenarioKind::Directional { buses, rate, others } = &config.kind else {
        return Err(HarnessError::Config("directional scenario expected".into()));
    };
    let profile = LoadProfile::directional(&config.case, buses, *rate, *others)?;
    trace_scenario(config, &profile)
}

fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Per-realization noise stream derived from the configured seed.
fn realization_noise(noise: &NoiseModel, r: usize) -> NoiseModel {
    NoiseModel {
        seed: noise.seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ..*noise
    }
}

pub fn run_noise_study(config: &ScenarioConfig) -> Result<ScenarioResult> {
    let ScenarioKind::NoiseStudy {
        bus,
        realizations,
        lambda0,
        ramp_per_sample,
        window,
    } = config.kind
    else {
        return Err(HarnessError::Config("noise study expected".into()));
    };
    if window < 2 {
        return Err(HarnessError::Config("noise study window must be at least 2".into()));
    }
    let case = &config.case;
    let profile = LoadProfile::proportional(case);
    let y = build_admittance(case)?;
    let pf = power_flow_options(&config.cpf);
    let mut agents = build_agents(case, &y, &profile, 0.0, config.reference, &pf)?;
    let pos = agents
        .iter()
        .position(|a| a.bus() == bus)
        .ok_or_else(|| HarnessError::Config(format!("bus {bus} has no agent (slack or unknown)")))?;
    let mut agent = agents.swap_remove(pos);
    let i = case.index_of(bus)?;

    // Truth for each sample of the window; the index is read at the last.
    let mut truths = Vec::with_capacity(window);
    let mut warm = PhasorSnapshot::flat(case);
    for k in 0..window {
        let lambda = lambda0 + ramp_per_sample * k as f64;
        let sol = solve_loading(case, &y, &profile, lambda, &warm, &pf)?;
        warm = sol.snapshot.clone();
        truths.push(sol.snapshot.with_timestamp(k as f64));
    }
    let last_lambda = lambda0 + ramp_per_sample * (window - 1) as f64;
    agent.set_setpoint(local_setpoint(case, &profile, i, last_lambda));

    let mut rows = Vec::with_capacity(realizations);
    let (mut vsis, mut ltis) = (Vec::new(), Vec::new());
    for r in 0..realizations {
        let noise = realization_noise(&config.noise, r);
        let mut history = Vec::with_capacity(window);
        let mut reading = None;
        for truth in &truths {
            let measurements = synthesize_measurements(truth, &noise);
            let ex = exchange(std::slice::from_ref(&agent), &measurements);
            let own = measurements[i].voltage;
            if let Some(current) = agent.injected_current(own, &ex.inboxes[0]) {
                history.push((own, -current));
            }
            reading = Some(agent_step(&agent, &ex.inboxes[0]));
        }
        let reading = reading.expect("window is non-empty");
        let lti = history
            .last()
            .copied()
            .and_then(|(v, i)| estimate_thevenin(&history).ok().map(|est| lti_index(&est, v, i)));
        if let Some(v) = reading.value() {
            vsis.push(v);
        }
        if let Some(l) = lti {
            ltis.push(l);
        }
        rows.push(ResultRow {
            time_or_lambda: r as f64,
            bus,
            vsi: reading.value(),
            lti,
            flag: reading.flag.as_str(),
            event: "realization".to_string(),
            bus_kind: kind_label(case.bus(bus)?.kind),
        });
    }
    let std_vsi = sample_std(&vsis);
    let std_lti = sample_std(&ltis);
    debug!("noise study: std vsi {std_vsi:e}, std lti {std_lti:e}");
    Ok(ScenarioResult {
        rows,
        summary: Summary {
            std_vsi: Some(std_vsi),
            std_lti: Some(std_lti),
            std_ratio: (std_lti > 0.0).then(|| std_vsi / std_lti),
            ..Summary::default()
        },
        ..ScenarioResult::default()
    })
}

fn timeline_rows(case: &NetworkCase, result: &TimelineResult) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for s in &result.samples {
        let event = s
            .events
            .iter()
            .map(|e| match e {
                RecordedEvent::LineOutage { from, to } => format!("outage {from}-{to}"),
                RecordedEvent::AdmittanceRefresh => "refresh".to_string(),
                RecordedEvent::Collapse => "collapse".to_string(),
            })
            .collect::<Vec<_>>()
            .join(";");
        for (r, lti) in s.readings.iter().zip(&s.lti) {
            rows.push(ResultRow {
                time_or_lambda: s.time,
                bus: r.bus,
                vsi: r.value(),
                lti: *lti,
                flag: r.flag.as_str(),
                event: event.clone(),
                bus_kind: kind_label(case.bus(r.bus)?.kind),
            });
        }
    }
    Ok(rows)
}

pub fn run_line_outage(config: &ScenarioConfig) -> Result<ScenarioResult> {
    let ScenarioKind::LineOutage {
        from,
        to,
        time,
        end,
        ramp_rate,
        refresh_at,
        ref monitored,
    } = config.kind
    else {
        return Err(HarnessError::Config("line outage scenario expected".into()));
    };
    let case = &config.case;
    let ramp = TimelineEvent::LoadRamp {
        time: 0.0,
        lambda_start: 0.0,
        rate: ramp_rate,
    };
    let outage = TimelineEvent::LineOutage { time, from, to };
    let mut stale_events = vec![ramp, outage];
    if let Some(t) = refresh_at {
        stale_events.push(TimelineEvent::AdmittanceRefresh { time: t });
        stale_events.sort_by(|a, b| a.time().total_cmp(&b.time()));
    }
    let opts = TimelineOptions {
        reference: config.reference,
        power_flow: power_flow_options(&config.cpf),
        ..TimelineOptions::default()
    };
    let stale_tl = EventTimeline::new(0.0, end, stale_events)?;
    let refreshed_tl = EventTimeline::new(
        0.0,
        end,
        vec![ramp, outage, TimelineEvent::AdmittanceRefresh { time }],
    )?;
    let stale = run_timeline(case, &stale_tl, &config.noise, 1.0, &opts)?;
    let refreshed = run_timeline(case, &refreshed_tl, &config.noise, 1.0, &opts)?;

    let k = stale
        .samples
        .iter()
        .position(|s| s.time >= time - 1e-9)
        .ok_or_else(|| HarnessError::Config("outage time lies outside the timeline".into()))?;
    let mut outage_drops = BTreeMap::new();
    let mut gap: f64 = 0.0;
    for &b in monitored {
        let s = stale.series(b);
        let r = refreshed.series(b);
        if k >= 2 {
            if let (Some(v2), Some(v1), Some(v0)) = (s[k - 2].1, s[k - 1].1, s[k].1) {
                // Change beyond the pre-outage trend.
                outage_drops.insert(b, (2.0 * v1 - v2) - v0);
            }
        }
        for ((_, sv), (_, rv)) in s.iter().zip(&r).skip(k) {
            if let (Some(sv), Some(rv)) = (sv, rv) {
                gap = gap.max((sv - rv).abs() / rv.abs());
            }
        }
    }
    let outage_localized_bus = outage_drops
        .iter()
        .fold(None, |best: Option<(BusId, f64)>, (&b, &d)| match best {
            Some((_, bd)) if bd >= d => best,
            _ => Some((b, d)),
        })
        .map(|(b, _)| b);
    let collapse_time = stale
        .samples
        .iter()
        .find(|s| s.events.contains(&RecordedEvent::Collapse))
        .map(|s| s.time);
    Ok(ScenarioResult {
        rows: timeline_rows(case, &stale)?,
        refreshed: timeline_rows(case, &refreshed)?,
        summary: Summary {
            outage_localized_bus,
            outage_drops,
            stale_refreshed_max_gap: Some(gap),
            collapse_time,
            ..Summary::default()
        },
        ..ScenarioResult::default()
    })
}

pub fn run_three_bus(config: &ScenarioConfig) -> Result<ScenarioResult> {
    let ScenarioKind::ThreeBusIllustration { ref loads, bus } = config.kind else {
        return Err(HarnessError::Config("three-bus scenario expected".into()));
    };
    let base = &config.case;
    let y = build_admittance(base)?;
    let pf = power_flow_options(&config.cpf);
    let d = base.index_of(bus)?;
    let zero = pmuvsi_core::netmodel::scale_loads(base, 0.0)?;
    let reference = match config.reference {
        ReferenceMode::FlatNoLoad => pmuvsi_core::circlevsi::no_load_reference(&y, bus)?,
        ReferenceMode::OperatingPoint => {
            let snap = solve_case(&zero, &y, &PhasorSnapshot::flat(&zero), &pf)?.snapshot;
            operating_point_reference(&y, bus, BusKind::PQ, &snap)?
        }
    };
    let mut points = Vec::new();
    let mut rows = Vec::new();
    let mut warm = PhasorSnapshot::flat(base);
    for (k, load) in loads.iter().enumerate() {
        let case = with_injections(base, load)?;
        let solved = solve_case(&case, &y, &warm, &pf).ok();
        let mut point = ThreeBusPoint {
            point: k + 1,
            load_p: load.re,
            load_q: load.im,
            solved: solved.is_some(),
            p_circle: None,
            q_circle: None,
            classification: None,
            vsi: None,
        };
        let mut flag = ReadingFlag::Infeasible;
        if let Some(sol) = solved {
            warm = sol.snapshot.clone();
            let t = compute_t_params(&y, bus, &neighbor_voltages(&y, bus, &sol.snapshot)?)?;
            let bus_data = &case.buses()[d];
            if let Ok((cp, cq)) = circles_from_t(&t, bus_data.p_inj, bus_data.q_inj) {
                point.p_circle = Some(cp);
                point.q_circle = Some(cq);
                point.classification = Some(classify_intersection(&cp, &cq));
                let v = vsi_from_t(&t, bus_data.p_inj, bus_data.q_inj, reference)?;
                point.vsi = Some(v.value);
                flag = if v.is_negative() { ReadingFlag::Negative } else { ReadingFlag::Ok };
            }
        } else {
            debug!("three-bus point {} has no power-flow solution", k + 1);
        }
        rows.push(ResultRow {
            time_or_lambda: (k + 1) as f64,
            bus,
            vsi: point.vsi,
            lti: None,
            flag: flag.as_str(),
            event: if point.solved {
                format!("load {}{:+}j", load.re, load.im)
            } else {
                "no power-flow solution".to_string()
            },
            bus_kind: "pq",
        });
        points.push(point);
    }
    Ok(ScenarioResult {
        rows,
        summary: Summary {
            three_bus: points,
            ..Summary::default()
        },
        ..ScenarioResult::default()
    })
}

/// Same injection at every PQ bus.
fn with_injections(case: &NetworkCase, s: &Complex64) -> Result<NetworkCase> {
    let mut raw = pmuvsi_core::netmodel::RawCase::from(case.clone());
    for bus in raw.buses.iter_mut().filter(|b| b.kind == BusKind::PQ) {
        bus.p_inj = s.re;
        bus.q_inj = s.im;
    }
    Ok(NetworkCase::try_from(raw)?)
}

fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(HarnessError::from)?;
    w.write_record(["time_or_lambda", "bus", "vsi", "lti", "flag", "event", "bus_kind"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.time_or_lambda.to_string(),
            r.bus.to_string(),
            opt(r.vsi),
            opt(r.lti),
            r.flag.to_string(),
            r.event.clone(),
            r.bus_kind.to_string(),
        ])?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_trajectory(path: &Path, trajectory: &CpfTrajectory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lambda", "bus", "v_re", "v_im", "v_mag"])?;
    for p in &trajectory.points {
        for (b, v) in p.snapshot.buses.iter().zip(&p.snapshot.voltages) {
            w.write_record([
                p.lambda.to_string(),
                b.to_string(),
                v.re.to_string(),
                v.im.to_string(),
                v.norm().to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn write_circles(path: &Path, points: &[ThreeBusPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "point", "load_p", "load_q", "solved", "cp_x", "cp_y", "r_p", "cq_x", "cq_y", "r_q", "classification", "vsi",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in points {
        let c = |g: Option<CircleGeometry>| {
            [
                opt(g.map(|g| g.center[0])),
                opt(g.map(|g| g.center[1])),
                opt(g.map(|g| g.radius)),
            ]
        };
        let mut rec = vec![p.point.to_string(), p.load_p.to_string(), p.load_q.to_string(), p.solved.to_string()];
        rec.extend(c(p.p_circle));
        rec.extend(c(p.q_circle));
        rec.push(p.classification.map(|c| format!("{c:?}")).unwrap_or_default());
        rec.push(opt(p.vsi));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Write every table of `result` into `dir`; returns the files written.
pub fn write_outputs(result: &ScenarioResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut written = Vec::new();
    let path = dir.join("results.csv");
    write_rows(&path, &result.rows)?;
    written.push(path);
    if !result.refreshed.is_empty() {
        let path = dir.join("results_refreshed.csv");
        write_rows(&path, &result.refreshed)?;
        written.push(path);
    }
    if !result.grid.is_empty() {
        let path = dir.join("results_grid.csv");
        write_rows(&path, &result.grid)?;
        written.push(path);
    }
    if let Some(t) = &result.trajectory {
        let path = dir.join("trajectory.csv");
        write_trajectory(&path, t)?;
        written.push(path);
    }
    if !result.summary.three_bus.is_empty() {
        let path = dir.join("circles.csv");
        write_circles(&path, &result.summary.three_bus)?;
        written.push(path);
    }
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&result.summary)?;
    fs::write(&path, text + "\n").map_err(|e| HarnessError::io(&path, e))?;
    written.push(path);
    Ok(written)
}
