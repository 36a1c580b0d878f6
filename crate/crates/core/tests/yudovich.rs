use proptest::prelude::*;
use vpy_core::parallel::Exec;
use vpy_core::yudovich::{GridDensity, RadialProfile};

fn profile(kind: u8, d: usize) -> RadialProfile {
    match kind {
        0 => RadialProfile::theta(0, d).unwrap(),
        1 => RadialProfile::theta(1, d).unwrap(),
        2 => RadialProfile::ell(2, d).unwrap(),
        3 => RadialProfile::log_power(1.5, 0.7, d).unwrap(),
        _ => RadialProfile::uniform_ball(0.4, d).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Hölder: ln‖f‖_p is convex in 1/p.
    #[test]
    fn lp_norms_are_log_convex_in_inverse_p(kind in 0u8..5, d in 2usize..4, p0 in 1.0f64..8.0, span in 1.5f64..40.0, s in 0.05f64..0.95) {
        let f = profile(kind, d);
        let p1 = p0 * span;
        let inv = (1.0 - s) / p0 + s / p1;
        let mid = f.ln_lp_norm(1.0 / inv).unwrap();
        let chord = (1.0 - s) * f.ln_lp_norm(p0).unwrap() + s * f.ln_lp_norm(p1).unwrap();
        prop_assert!(mid <= chord + 1e-9, "{} > {}", mid, chord);
    }

    #[test]
    fn uniformly_local_norm_never_exceeds_global(seed in 0u64..1000, p in 1.0f64..6.0) {
        let cells = 24;
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let values: Vec<f64> = (0..cells * cells)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (x >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        let g = GridDensity::new(2, cells, 2.5, values).unwrap();
        let ul = g.lp_ul_norm(p, Exec::Sequential).unwrap();
        prop_assert!(ul <= g.lp_norm(p).unwrap() * (1.0 + 1e-12));
    }
}

#[test]
fn uniformly_local_norm_converges_under_refinement() {
    let bump = |x: &[f64]| (-(x[0] * x[0] + 0.5 * x[1] * x[1]) / 0.3).exp();
    let vals: Vec<f64> = [16usize, 32, 64, 128]
        .iter()
        .map(|&n| {
            GridDensity::from_fn(2, n, 2.0, bump)
                .unwrap()
                .lp_ul_norm(2.0, Exec::Parallel)
                .unwrap()
        })
        .collect();
    let last = vals.len() - 1;
    assert!(((vals[last] - vals[last - 1]) / vals[last]).abs() < 0.02, "{vals:?}");
    for w in vals.windows(2) {
        assert!(w[1] >= w[0] * (1.0 - 1e-3), "{vals:?}");
    }
}

#[test]
fn fragments_round_trip() {
    for d in [2, 3] {
        for p in (0..5).map(|k| profile(k, d)) {
            let frag = p.to_fragment().unwrap();
            let back = RadialProfile::from_fragment(&frag, "density", d).unwrap();
            assert_eq!(back.to_fragment().unwrap(), frag);
            assert_eq!(back.ln_lp_norm(2.0).unwrap(), p.ln_lp_norm(2.0).unwrap());
        }
    }
    let frag: toml::Table = "kind = \"theta_m\"\nm = 1\nsupport_radius = 1.0".parse().unwrap();
    let err = RadialProfile::from_fragment(&frag, "density", 2).unwrap_err().to_string();
    assert!(err.contains("'density.support_radius'"), "{err}");
}
