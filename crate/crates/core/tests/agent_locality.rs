mod common;

use num_complex::Complex64;
use pmuvsi_core::agents::{agent_step, exchange, synthesize_measurements, BusAgent, LocalSetpoint, NoiseModel};
use pmuvsi_core::circlevsi::{neighbor_voltages, pv_bus_vsi, vsi};
use pmuvsi_core::netmodel::{build_admittance, neighbors, BusKind, NetworkCase};
use pmuvsi_core::powerflow::PhasorSnapshot;
use proptest::prelude::*;

fn agents_for(case: &NetworkCase, reference: f64) -> Vec<BusAgent> {
    let y = build_admittance(case).unwrap();
    case.buses()
        .iter()
        .filter(|b| b.kind != BusKind::Slack)
        .map(|b| {
            let sp = match b.kind {
                BusKind::PV => LocalSetpoint::Pv {
                    p: b.p_inj,
                    v_spec: b.v_spec,
                },
                _ => LocalSetpoint::Pq { p: b.p_inj, q: b.q_inj },
            };
            BusAgent::new(&y, b.id, sp, reference).unwrap()
        })
        .collect()
}

fn case_and_voltages() -> impl Strategy<Value = (NetworkCase, Vec<Complex64>)> {
    common::arb_case().prop_flat_map(|case| {
        let n = case.len();
        (Just(case), common::arb_voltages(n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]

    #[test]
    fn distributed_equals_centralized((case, v) in case_and_voltages(), reference in 0.1f64..3.0) {
        let y = build_admittance(&case).unwrap();
        let snap = PhasorSnapshot::new(case.bus_ids(), v);
        let agents = agents_for(&case, reference);
        let ex = exchange(&agents, &synthesize_measurements(&snap, &NoiseModel::none()));
        for (agent, inbox) in agents.iter().zip(&ex.inboxes) {
            let reading = agent_step(agent, inbox);
            let d = agent.bus();
            let bus = case.bus(d).unwrap();
            let nv = neighbor_voltages(&y, d, &snap).unwrap();
            let central = match bus.kind {
                BusKind::PV => pv_bus_vsi(&case, &y, d, &nv, bus.p_inj, bus.v_spec, reference),
                _ => vsi(&y, d, &nv, bus.p_inj, bus.q_inj, reference),
            };
            match central {
                Ok(c) => prop_assert_eq!(reading.value().map(f64::to_bits), Some(c.value.to_bits())),
                Err(_) => prop_assert!(reading.vsi.is_none()),
            }
        }
    }

    #[test]
    fn non_neighbor_corruption_is_invisible((case, v) in case_and_voltages(), junk in -50.0f64..50.0) {
        let snap = PhasorSnapshot::new(case.bus_ids(), v);
        let agents = agents_for(&case, 1.0);
        let clean = exchange(&agents, &synthesize_measurements(&snap, &NoiseModel::none()));
        for (agent, inbox) in agents.iter().zip(&clean.inboxes) {
            let keep = neighbors(&case, agent.bus()).unwrap();
            let mut corrupted = snap.clone();
            for (b, v) in corrupted.buses.iter().zip(corrupted.voltages.iter_mut()) {
                if !keep.contains(b) {
                    *v = Complex64::new(junk, -junk * 0.5);
                }
            }
            let ex = exchange(std::slice::from_ref(agent), &synthesize_measurements(&corrupted, &NoiseModel::none()));
            let a = agent_step(agent, inbox);
            let b = agent_step(agent, &ex.inboxes[0]);
            prop_assert_eq!(a.flag, b.flag);
            prop_assert_eq!(a.value().map(f64::to_bits), b.value().map(f64::to_bits));
        }
    }
}

#[test]
fn noise_standard_deviations() {
    let noise = NoiseModel::new(0.001, 0.01, 42).unwrap();
    let truth = Complex64::from_polar(0.97, -0.3);
    let n = 20_000;
    let (mut mags, mut angs) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for k in 0..n {
        let m = noise.perturb(truth, pmuvsi_core::netmodel::BusId(7), k as f64);
        mags.push(m.norm());
        angs.push(m.arg().to_degrees());
    }
    let std = |xs: &[f64]| {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    };
    let (sv, st) = (std(&mags), std(&angs));
    assert!((sv / 0.001 - 1.0).abs() < 0.05, "magnitude std {sv}");
    assert!((st / 0.01 - 1.0).abs() < 0.05, "angle std {st}");
    let mean_mag = mags.iter().sum::<f64>() / n as f64;
    assert!((mean_mag - 0.97).abs() < 5.0 * 0.001 / (n as f64).sqrt());
}

#[test]
fn noise_keyed_by_time_and_bus() {
    let noise = NoiseModel::new(0.01, 0.1, 3).unwrap();
    let v = Complex64::new(1.0, 0.1);
    let id = pmuvsi_core::netmodel::BusId;
    assert_eq!(noise.perturb(v, id(4), 2.0), noise.perturb(v, id(4), 2.0));
    assert_ne!(noise.perturb(v, id(4), 2.0), noise.perturb(v, id(5), 2.0));
    assert_ne!(noise.perturb(v, id(4), 2.0), noise.perturb(v, id(4), 3.0));
    let other_seed = NoiseModel { seed: 4, ..noise };
    assert_ne!(noise.perturb(v, id(4), 2.0), other_seed.perturb(v, id(4), 2.0));
}
