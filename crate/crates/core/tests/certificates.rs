use proptest::prelude::*;
use vpy_core::certificates::{
    gronwall_bounds, lagrangian_w1_bound, ode_stability_bound, GronwallInput, LagrangianInput,
    OdeStabilityInput, StabilityCertificate,
};
use vpy_core::growth::{GrowthFunction, Modulus};

fn modulus(kind: u8) -> Modulus {
    let g = match kind {
        0 => GrowthFunction::constant(1.0).unwrap(),
        k => GrowthFunction::iterated_log(u32::from(k - 1)).unwrap(),
    };
    Modulus::new(g, 2).unwrap()
}

fn final_bound(m: &Modulus, l: f64, w1_0: f64, f_gap: f64, t: f64, delta: f64) -> Option<f64> {
    let cert = lagrangian_w1_bound(
        &LagrangianInput {
            lipschitz: l,
            w1_0,
            f_gap,
            t_end: t,
            delta: Some(delta),
        },
        m,
        &[t],
    )
    .ok()?;
    cert.w1_bound.first().copied()
}

fn ode(m: &Modulus, l: f64, delta: f64, t: f64, x: f64, v: f64) -> Option<f64> {
    let input = OdeStabilityInput {
        lipschitz: l,
        delta,
        t_end: t,
        x_gap: x,
        v_gap: v,
        e_gap: 0.0,
        f_gap: 0.0,
    };
    ode_stability_bound(&input, m).ok()
}

const BUMP: f64 = 1.25;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lagrangian_bound_is_monotone(
        kind in 0u8..3,
        l in 1.0f64..3.0,
        w in 1e-8f64..1e-3,
        f in 0.0f64..1e-3,
        t in 0.05f64..1.0,
        spare in 1.1f64..4.0,
        which in 0usize..5,
    ) {
        let m = modulus(kind);
        let delta = spare * (2.0 * l * w + f) + 1e-12;
        let base = final_bound(&m, l, w, f, t, delta);
        let bumped = match which {
            0 => final_bound(&m, l, w, f, t * BUMP, delta),
            1 => final_bound(&m, l, w, f, t, delta * BUMP),
            2 => final_bound(&m, l, w * BUMP, f, t, delta * BUMP * BUMP),
            3 => final_bound(&m, l, w, f * BUMP + 1e-9, t, delta * BUMP * BUMP),
            _ => final_bound(&m, l * BUMP, w, f, t, delta * BUMP * BUMP),
        };
        let fair = match which {
            2..=4 => {
                // the bumped variant also enlarged δ; compare at equal δ
                final_bound(&m, l, w, f, t, delta * BUMP * BUMP)
            }
            _ => base,
        };
        if let (Some(a), Some(b)) = (fair, bumped) {
            prop_assert!(b >= a, "variant {}: {} < {}", which, b, a);
        }
    }

    #[test]
    fn ode_bound_is_monotone(
        kind in 0u8..3,
        l in 0.5f64..3.0,
        x in 1e-8f64..1e-3,
        v in 1e-8f64..1e-3,
        t in 0.05f64..1.0,
        spare in 1.1f64..4.0,
        which in 0usize..4,
    ) {
        let m = modulus(kind);
        let delta = spare * (x + v);
        let base = ode(&m, l, delta, t, x, v);
        let bumped = match which {
            0 => ode(&m, l, delta, t * BUMP, x, v),
            1 => ode(&m, l, delta * BUMP, t, x, v),
            2 => ode(&m, l, delta * BUMP, t, x * BUMP, v),
            _ => ode(&m, l * BUMP, delta, t, x, v),
        };
        let fair = if which == 2 { ode(&m, l, delta * BUMP, t, x, v) } else { base };
        if let (Some(a), Some(b)) = (fair, bumped) {
            prop_assert!(b >= a * (1.0 - 1e-12), "variant {}: {} < {}", which, b, a);
        }
    }

    /// The Lagrangian certificate is the Grönwall bound for the modulus 2Lφ.
    #[test]
    fn lagrangian_matches_gronwall(kind in 0u8..3, l in 1.0f64..3.0, w in 1e-8f64..1e-2, t in 0.0f64..1.0) {
        let m = modulus(kind);
        let grid = [0.0, 0.5 * t, t];
        let cert: StabilityCertificate = lagrangian_w1_bound(
            &LagrangianInput { lipschitz: l, w1_0: w, f_gap: 0.0, t_end: 1.0, delta: None },
            &m,
            &grid,
        ).unwrap();
        let scaled = m.scaled(2.0 * l).unwrap();
        let g = GronwallInput { modulus: &scaled, c: l, delta: cert.delta, u0: w, t_end: 1.0 };
        for (k, &s) in cert.times.iter().enumerate() {
            let (u, du) = gronwall_bounds(&g, s).unwrap();
            prop_assert!((u - cert.position_bound[k]).abs() <= 1e-9 * u.max(1e-300));
            prop_assert!((du - cert.velocity_bound[k]).abs() <= 1e-9 * du);
        }
    }
}

#[test]
fn certificate_starts_at_the_data() {
    let m = modulus(1);
    let cert = lagrangian_w1_bound(
        &LagrangianInput {
            lipschitz: 1.0,
            w1_0: 1e-4,
            f_gap: 0.0,
            t_end: 1.0,
            delta: None,
        },
        &m,
        &[0.0, 1.0],
    )
    .unwrap();
    assert_eq!(cert.position_bound[0], 1e-4);
    assert!(cert.w1_bound[1] > cert.w1_bound[0]);
}

#[test]
fn delta_below_the_data_gap_is_rejected() {
    let m = modulus(0);
    let err = lagrangian_w1_bound(
        &LagrangianInput {
            lipschitz: 1.0,
            w1_0: 1e-3,
            f_gap: 0.0,
            t_end: 1.0,
            delta: Some(1e-4),
        },
        &m,
        &[0.5],
    )
    .unwrap_err();
    assert!(matches!(err, vpy_core::VpyError::Precondition(_)));
}
