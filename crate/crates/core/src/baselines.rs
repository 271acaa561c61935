//! Local Thevenin index baseline.
//!
//! A window of local phasor pairs `(V_k, I_k)` is fitted to the two-bus
//! equivalent `V_k = E − Z·I_k`; the index compares the apparent load
//! impedance with the fitted source impedance.

use libm::sqrt;
use num_complex::Complex64;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Condition numbers above this are treated as rank deficient.
pub const MAX_CONDITIONING: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TheveninEstimate {
    pub e_th: Complex64,
    pub z_th: Complex64,
    pub window: usize,
    /// 2-norm condition number of the least-squares design `[1, −I_k]`.
    pub conditioning: f64,
}

/// Least-squares fit of `E = V_k + Z·I_k` over the samples.
pub fn estimate_thevenin(samples: &[(Complex64, Complex64)]) -> Result<TheveninEstimate> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let nf = n as f64;
    let (v_sum, i_sum) = samples
        .iter()
        .fold((Complex64::default(), Complex64::default()), |(sv, si), &(v, i)| (sv + v, si + i));
    let (v_mean, i_mean) = (v_sum / nf, i_sum / nf);
    let mut spread = 0.0;
    let mut cross = Complex64::default();
    for &(v, i) in samples {
        let di = i - i_mean;
        spread += di.norm_sqr();
        cross += (v - v_mean) * di.conj();
    }
    let conditioning = design_conditioning(nf, i_sum, samples.iter().map(|s| s.1.norm_sqr()).sum());
    if !(spread > 0.0) || !(conditioning < MAX_CONDITIONING) {
        return Err(Error::RankDeficientWindow { conditioning });
    }
    let z_th = -cross / spread;
    Ok(TheveninEstimate {
        e_th: v_mean + z_th * i_mean,
        z_th,
        window: n,
        conditioning,
    })
}

/// Condition number of `A = [1, −I]` from the eigenvalues of the 2×2
/// hermitian `AᴴA = [[n, −ΣI], [−ΣĪ, Σ|I|²]]`.
fn design_conditioning(n: f64, i_sum: Complex64, i_sq: f64) -> f64 {
    let half_trace = (n + i_sq) / 2.0;
    let det = n * i_sq - i_sum.norm_sqr();
    let gap = sqrt((half_trace * half_trace - det).max(0.0));
    let (hi, lo) = (half_trace + gap, half_trace - gap);
    if lo <= 0.0 {
        return f64::INFINITY;
    }
    sqrt(hi / lo)
}

/// `(|Z_app| − |Z_th|) / |Z_app|` with `Z_app = V / I`; 1 when no current
/// flows.
pub fn lti_index(estimate: &TheveninEstimate, v: Complex64, i: Complex64) -> f64 {
    if i.norm() == 0.0 {
        return 1.0;
    }
    let z_app = (v / i).norm();
    (z_app - estimate.z_th.norm()) / z_app
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    /// Load current drawn from source `e` through `z` into `z_load`.
    fn sample(e: Complex64, z: Complex64, z_load: Complex64) -> (Complex64, Complex64) {
        let i = e / (z + z_load);
        (z_load * i, i)
    }

    #[test]
    fn recovers_two_bus_source() {
        let e = Complex64::new(1.0, 0.0);
        let z = Complex64::new(0.1, 0.4);
        let samples = [sample(e, z, Complex64::new(2.0, 0.5)), sample(e, z, Complex64::new(1.2, 0.3))];
        let est = estimate_thevenin(&samples).unwrap();
        assert!((est.e_th - e).norm() < 1e-10);
        assert!((est.z_th - z).norm() < 1e-10);
        assert_eq!(est.window, 2);
    }

    #[test]
    fn window_length_invariance() {
        let e = Complex64::from_polar(1.02, 0.1);
        let z = Complex64::new(0.05, 0.3);
        let samples: Vec<_> = (0..12)
            .map(|k| sample(e, z, Complex64::new(3.0 - 0.2 * k as f64, 0.8)))
            .collect();
        let (v, i) = samples[11];
        let reference = lti_index(&estimate_thevenin(&samples[10..]).unwrap(), v, i);
        for w in 3..=12 {
            let est = estimate_thevenin(&samples[12 - w..]).unwrap();
            assert!((lti_index(&est, v, i) - reference).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_window_is_rank_deficient() {
        let s = (Complex64::new(0.95, -0.1), Complex64::new(0.4, -0.2));
        assert!(matches!(estimate_thevenin(&[s, s, s]), Err(Error::RankDeficientWindow { .. })));
        assert_eq!(estimate_thevenin(&[s]), Err(Error::TooFewSamples { needed: 2, got: 1 }));
    }

    #[test]
    fn index_values() {
        let est = TheveninEstimate {
            e_th: Complex64::new(1.0, 0.0),
            z_th: Complex64::new(0.0, 0.5),
            window: 2,
            conditioning: 1.0,
        };
        let v = Complex64::new(0.5, 0.0);
        assert_eq!(lti_index(&est, v, Complex64::new(1.0, 0.0)), 0.0);
        let li = lti_index(&est, Complex64::new(5.0, 0.0), Complex64::new(1.0, 0.0));
        assert!((li - 0.9).abs() < 1e-15);
        assert_eq!(lti_index(&est, v, Complex64::new(0.0, 0.0)), 1.0);
    }

    #[test]
    fn upper_branch_index_in_unit_interval() {
        let e = Complex64::new(1.0, 0.0);
        let z = Complex64::new(0.02, 0.2);
        for k in 1..40 {
            // |Z_load| from 20·|Z| down to just above |Z|.
            let zl = z.norm() * (1.0 + 19.0 * (40 - k) as f64 / 39.0);
            let s1 = sample(e, z, Complex64::new(zl, 0.0));
            let s2 = sample(e, z, Complex64::new(zl * 1.01, 0.0));
            let est = estimate_thevenin(&[s1, s2]).unwrap();
            let li = lti_index(&est, s1.0, s1.1);
            assert!((0.0..=1.0).contains(&li), "{li}");
        }
    }
}
