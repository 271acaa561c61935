use std::collections::BTreeSet;

use num_complex::Complex64;
use pmuvsi::io::ieee30;
use pmuvsi_core::circlevsi::{circles_from_t, compute_t_params, neighbor_voltages};
use pmuvsi_core::netmodel::{apply_outage, build_admittance, neighbors, BusId, BusKind, LoadProfile};
use pmuvsi_core::powerflow::{solve_power_flow, trace_continuation, CpfOptions, PhasorSnapshot};

/// Base-case voltages (re, im) from an independent Newton solver with a
/// finite-difference Jacobian, converged to 1e-13.
const ORACLE_BASE: [(u32, f64, f64); 30] = [
    (1, 1.06, 0.0),
    (2, 1.0403995219596274, -0.09794812252503267),
    (3, 1.0123745684066214, -0.13379684532658837),
    (4, 0.9990531267342256, -0.16323299569868643),
    (5, 0.9793609550207757, -0.24688483100586428),
    (6, 0.99187206208371, -0.19378910562066784),
    (7, 0.9774786623594087, -0.22301654029305626),
    (8, 0.9886654868533141, -0.20649589609747562),
    (9, 1.0194723081439048, -0.2560353270405868),
    (10, 1.0064360602010807, -0.2826722713514883),
    (11, 1.049410863474206, -0.2635542441743658),
    (12, 1.0216307292559375, -0.27246332876136764),
    (13, 1.0348304410163023, -0.2759836197059626),
    (14, 1.0029981907410246, -0.28428358193276276),
    (15, 0.9981253301821678, -0.2846316941195503),
    (16, 1.006558087201807, -0.27943509131500416),
    (17, 1.0006040177777058, -0.28408475697807256),
    (18, 0.9858926248020758, -0.2925998288693548),
    (19, 0.9826108788170359, -0.2948669754608147),
    (20, 0.9875348728860215, -0.2926560064701664),
    (21, 0.992314291671393, -0.2869922637469078),
    (22, 0.9928960877757709, -0.28689333479742146),
    (23, 0.9860984216609796, -0.28847915046761585),
    (24, 0.9798530356616794, -0.28992552377135206),
    (25, 0.977930254655186, -0.28142505219451586),
    (26, 0.9588972152708587, -0.28356469956495456),
    (27, 0.9861691414266897, -0.2740465418080854),
    (28, 0.9862571638641651, -0.20383651219147),
    (29, 0.9610728836027869, -0.2894204810231348),
    (30, 0.9455707993207533, -0.30070876138968716),
];

/// Vm (p.u.) and Va (degrees) stored in the case file, rounded to 1e-3 / 1e-2.
const STORED_BASE: [(u32, f64, f64); 30] = [
    (1, 1.06, 0.0),
    (2, 1.043, -5.48),
    (3, 1.021, -7.96),
    (4, 1.012, -9.62),
    (5, 1.01, -14.37),
    (6, 1.01, -11.34),
    (7, 1.002, -13.12),
    (8, 1.01, -12.1),
    (9, 1.051, -14.38),
    (10, 1.045, -15.97),
    (11, 1.082, -14.39),
    (12, 1.057, -15.24),
    (13, 1.071, -15.24),
    (14, 1.042, -16.13),
    (15, 1.038, -16.22),
    (16, 1.045, -15.83),
    (17, 1.04, -16.14),
    (18, 1.028, -16.82),
    (19, 1.026, -17.0),
    (20, 1.03, -16.8),
    (21, 1.033, -16.42),
    (22, 1.033, -16.41),
    (23, 1.027, -16.61),
    (24, 1.021, -16.78),
    (25, 1.017, -16.35),
    (26, 1.0, -16.77),
    (27, 1.023, -15.82),
    (28, 1.007, -11.97),
    (29, 1.003, -17.06),
    (30, 0.992, -17.94),
];

fn ids(xs: &[u32]) -> BTreeSet<BusId> {
    xs.iter().copied().map(BusId).collect()
}

#[test]
fn base_case_matches_independent_solver() {
    let case = ieee30();
    let snap = solve_power_flow(&case, &PhasorSnapshot::flat(&case), 1e-12, 30).unwrap();
    for &(id, re, im) in &ORACLE_BASE {
        let v = snap.voltage(BusId(id)).unwrap();
        assert!((v - Complex64::new(re, im)).norm() < 1e-8, "bus {id}: {v}");
    }
}

#[test]
fn base_case_matches_stored_solution() {
    let case = ieee30();
    let snap = solve_power_flow(&case, &PhasorSnapshot::flat(&case), 1e-10, 30).unwrap();
    for &(id, vm, va) in &STORED_BASE {
        let v = snap.voltage(BusId(id)).unwrap();
        assert!((v.norm() - vm).abs() < 5e-3, "bus {id}: |V| {}", v.norm());
        assert!((v.arg().to_degrees() - va).abs() < 0.5, "bus {id}: angle {}", v.arg().to_degrees());
    }
}

#[test]
fn neighborhoods_of_the_weak_area() {
    let case = ieee30();
    assert_eq!(neighbors(&case, BusId(14)).unwrap(), ids(&[12, 15]));
    assert_eq!(neighbors(&case, BusId(29)).unwrap(), ids(&[27, 30]));
    assert_eq!(neighbors(&case, BusId(30)).unwrap(), ids(&[27, 29]));
    assert_eq!(neighbors(&case, BusId(15)).unwrap(), ids(&[12, 14, 18, 23]));
    let out = apply_outage(&case, BusId(15), BusId(23)).unwrap();
    assert_eq!(neighbors(&out, BusId(15)).unwrap(), ids(&[12, 14, 18]));
    assert!(!neighbors(&out, BusId(23)).unwrap().contains(&BusId(15)));
}

#[test]
fn cpf_points_lie_on_both_circles() {
    let case = ieee30();
    let profile = LoadProfile::proportional(&case);
    let traj = trace_continuation(&case, &profile, &CpfOptions::default()).unwrap();
    let y = build_admittance(&case).unwrap();
    let mut checked = 0;
    for point in &traj.points {
        let sched = profile.injections(point.lambda);
        for (i, bus) in case.buses().iter().enumerate() {
            if bus.kind != BusKind::PQ {
                continue;
            }
            let nv = neighbor_voltages(&y, bus.id, &point.snapshot).unwrap();
            // Buses without a load or shunt path to ground can lose a circle.
            let Ok(t) = compute_t_params(&y, bus.id, &nv) else { continue };
            let (cp, cq) = circles_from_t(&t, sched[i].re, sched[i].im).unwrap();
            let v = point.snapshot.voltages[i];
            assert!(cp.residual(v).abs() < 1e-7, "bus {} λ {}", bus.id, point.lambda);
            assert!(cq.residual(v).abs() < 1e-7, "bus {} λ {}", bus.id, point.lambda);
            checked += 1;
        }
    }
    assert!(checked > 20 * traj.points.len());
}
