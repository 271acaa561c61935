use num_complex::Complex64;
use pmuvsi_core::circlevsi::{
    circle_matrix, classify_intersection, delta_components, delta_star_closed_form, CircleGeometry, Intersection,
};
use proptest::prelude::*;

fn arb_circle() -> impl Strategy<Value = CircleGeometry> {
    ((-5.0f64..5.0, -5.0f64..5.0), 0.1f64..4.0).prop_map(|((x, y), r)| CircleGeometry::new([x, y], r))
}

/// Second circle at distance `d` from the first along direction `phi`.
fn placed(a: &CircleGeometry, d: f64, phi: f64, r: f64) -> CircleGeometry {
    CircleGeometry::new([a.center[0] + d * phi.cos(), a.center[1] + d * phi.sin()], r)
}

/// Magnitude of the terms cancelling in Δ*, for relative tolerances.
fn delta_scale(a: &CircleGeometry, b: &CircleGeometry) -> f64 {
    let d = a.center_distance(b);
    let (ra2, rb2) = (a.radius * a.radius, b.radius * b.radius);
    let h = (d * d - ra2 - rb2) / 2.0;
    ra2 * rb2 + h * h
}

/// Pairs biased towards tangency: a quarter external, a quarter internal,
/// the rest anywhere.
fn arb_pair() -> impl Strategy<Value = (CircleGeometry, CircleGeometry, Option<Intersection>)> {
    (arb_circle(), 0.1f64..4.0, 0.0f64..std::f64::consts::TAU, 0u8..4, 0.0f64..12.0).prop_map(
        |(a, rb, phi, mode, d)| match mode {
            0 => (a, placed(&a, a.radius + rb, phi, rb), Some(Intersection::OnePoint)),
            1 if (a.radius - rb).abs() > 1e-3 => (
                a,
                placed(&a, (a.radius - rb).abs(), phi, rb),
                Some(Intersection::OnePoint),
            ),
            _ => (a, placed(&a, d, phi, rb), None),
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12_000))]

    #[test]
    fn delta_star_sign_matches_geometry((a, b, expected) in arb_pair()) {
        let dc = delta_components(&circle_matrix(&a), &circle_matrix(&b));
        let class = classify_intersection(&a, &b);
        if let Some(e) = expected {
            prop_assert_eq!(class, e);
        }
        let scale = delta_scale(&a, &b);
        match class {
            Intersection::TwoPoints => prop_assert!(dc.delta_star > 0.0, "{:?}", dc),
            Intersection::None => prop_assert!(dc.delta_star < 0.0, "{:?}", dc),
            Intersection::OnePoint => prop_assert!(dc.delta_star.abs() <= 1e-8 * scale, "{:?}", dc),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4_000))]

    #[test]
    fn determinant_matches_quadratic_form(a in arb_circle(), b in arb_circle(), l1 in -3.0f64..3.0, l2 in -3.0f64..3.0) {
        // Explicit 2×2 hermitian matrices [[1, −γ̄], [−γ, |γ|² − ρ²]].
        let entries = |c: &CircleGeometry| {
            let g = Complex64::new(c.center[0], c.center[1]);
            (1.0, -g.conj(), -g, g.norm_sqr() - c.radius * c.radius)
        };
        let (a11, a12, a21, a22) = entries(&a);
        let (b11, b12, b21, b22) = entries(&b);
        let m11 = l1 * a11 + l2 * b11;
        let m12 = a12 * l1 + b12 * l2;
        let m21 = a21 * l1 + b21 * l2;
        let m22 = l1 * a22 + l2 * b22;
        let direct = (Complex64::new(m11 * m22, 0.0) - m12 * m21).re;

        let dc = delta_components(&circle_matrix(&a), &circle_matrix(&b));
        let form = dc.delta_p * l1 * l1 + 2.0 * dc.delta_pq * l1 * l2 + dc.delta_q * l2 * l2;
        let combined = circle_matrix(&a).combine(l1, &circle_matrix(&b), l2).determinant();
        let scale = (m11 * m22).abs() + (m12 * m21).norm() + 1e-300;
        prop_assert!((direct - form).abs() <= 1e-9 * scale, "{} vs {}", direct, form);
        prop_assert!((direct - combined).abs() <= 1e-9 * scale);
    }

    #[test]
    fn diagonal_identities_and_closed_form(a in arb_circle(), b in arb_circle()) {
        let dc = delta_components(&circle_matrix(&a), &circle_matrix(&b));
        let (ra2, rb2) = (a.radius * a.radius, b.radius * b.radius);
        let tol = |x: f64| 1e-9 * (x.abs() + 25.0);
        prop_assert!((dc.delta_p + ra2).abs() <= tol(ra2));
        prop_assert!((dc.delta_q + rb2).abs() <= tol(rb2));

        let d = a.center_distance(&b);
        let factored = 0.25
            * ((a.radius + b.radius).powi(2) - d * d)
            * (d * d - (a.radius - b.radius).powi(2));
        let scale = delta_scale(&a, &b);
        prop_assert!((dc.delta_star - factored).abs() <= 1e-9 * scale, "{} vs {}", dc.delta_star, factored);
        prop_assert!((delta_star_closed_form(&a, &b) - factored).abs() <= 1e-9 * scale);
    }
}
