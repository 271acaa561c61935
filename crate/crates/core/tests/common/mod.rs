#![allow(dead_code)]

use num_complex::Complex64;
use pmuvsi_core::netmodel::{Branch, Bus, NetworkCase};
use proptest::prelude::*;

/// Ring of `n` buses with extra chords, slack at bus 1, a PV bus at 2.
pub fn meshed_case(n: u32, chords: &[(u32, u32)], loads: &[(f64, f64)], impedances: &[(f64, f64)]) -> NetworkCase {
    let mut buses = vec![Bus::slack(1, 1.02), Bus::pv(2, 0.3, 1.01)];
    for id in 3..=n {
        let (p, q) = loads[(id as usize) % loads.len()];
        buses.push(Bus::pq(id, -p, -q));
    }
    let mut branches = Vec::new();
    let mut k = 0;
    let mut z = || {
        k += 1;
        impedances[k % impedances.len()]
    };
    for id in 1..=n {
        let (r, x) = z();
        branches.push(Branch::from_impedance(id, id % n + 1, r, x).with_charging(0.02));
    }
    for &(a, b) in chords {
        let (a, b) = (a % n + 1, b % n + 1);
        if a != b && (a % n + 1) != b && (b % n + 1) != a {
            let (r, x) = z();
            branches.push(Branch::from_impedance(a, b, r, x));
        }
    }
    NetworkCase::new(buses, branches, 100.0).expect("generated case is valid")
}

pub fn arb_case() -> impl Strategy<Value = NetworkCase> {
    (
        5u32..12,
        prop::collection::vec((0u32..12, 0u32..12), 0..6),
        prop::collection::vec((0.0f64..0.3, -0.05f64..0.15), 1..6),
        prop::collection::vec((0.005f64..0.08, 0.05f64..0.4), 1..6),
    )
        .prop_map(|(n, chords, loads, z)| meshed_case(n, &chords, &loads, &z))
}

/// Voltages near nominal for every bus of `case`.
pub fn arb_voltages(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((0.85f64..1.1, -0.4f64..0.4), n)
        .prop_map(|v| v.into_iter().map(|(m, a)| Complex64::from_polar(m, a)).collect())
}
