use proptest::prelude::*;
use vpy_core::growth::{GrowthFunction, Modulus};

fn growth(kind: u8) -> GrowthFunction {
    match kind {
        0 => GrowthFunction::constant(1.0).unwrap(),
        1 => GrowthFunction::power(2.0).unwrap(),
        k => GrowthFunction::iterated_log(u32::from(k - 2)).unwrap(),
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plateau_is_exact_past_the_junction(kind in 0u8..6, d in 2usize..4, s in 0.0f64..3.0) {
        let m = Modulus::new(growth(kind), d).unwrap();
        let r = (-(d as f64) - 1.0).exp() * (1.0 + s);
        prop_assert_eq!(m.phi(r), m.plateau());
    }

    #[test]
    fn psi_is_an_increasing_bijection(kind in 2u8..6, ln_delta in -20.0f64..0.0, a in 1e-6f64..10.0, b in 1e-6f64..10.0) {
        let m = Modulus::new(growth(kind), 2).unwrap();
        let psi = m.psi(ln_delta.exp(), 1.0).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-9);
        let (pl, ph) = (psi.eval(lo).unwrap(), psi.eval(hi).unwrap());
        prop_assert!(pl < ph);
        let back = psi.invert(ph).unwrap();
        prop_assert!((back - hi).abs() <= 1e-8 * hi.max(1.0), "{} vs {}", back, hi);
    }

    #[test]
    fn primitive_is_dominated_on_the_concavity_range(kind in 2u8..6, d in 2usize..4, t in 0.0f64..1.0) {
        let m = Modulus::new(growth(kind), d).unwrap();
        let grid = log_grid(1e-300, 1.0, 400);
        let extent = m.concavity_extent(&grid, 1e-10).unwrap();
        let r = (1e-300f64.ln() * (1.0 - t) + extent.ln() * t).exp().min(extent);
        let big = m.big_phi(r).unwrap();
        prop_assert!(big <= r * m.phi(r) * (1.0 + 1e-10), "r={} Phi={} r*phi={}", r, big, r * m.phi(r));
    }
}

#[test]
fn phi_is_continuous_across_the_junction() {
    for kind in 0u8..6 {
        for d in [2usize, 3] {
            let m = Modulus::new(growth(kind), d).unwrap();
            let j = m.junction();
            let below = m.phi(j * (1.0 - 1e-13));
            assert!((m.phi(j) - below).abs() <= 1e-12 * m.plateau(), "kind {kind} d {d}");
        }
    }
}

#[test]
fn fragments_round_trip() {
    let all = [
        GrowthFunction::constant(2.5).unwrap(),
        GrowthFunction::power(3.0).unwrap(),
        GrowthFunction::iterated_log(2).unwrap(),
        GrowthFunction::tabulated(vec![(0.0, 1.0), (10.0, 4.0)]).unwrap(),
    ];
    for g in all {
        let frag = g.to_fragment();
        assert_eq!(frag["kind"].as_str(), Some(g.kind_name()));
        assert_eq!(GrowthFunction::from_fragment(&frag, "theta").unwrap(), g);
    }
}

#[test]
fn fragment_errors_name_the_key() {
    let frag: toml::Table = "kind = \"iterated_log\"".parse().unwrap();
    let err = GrowthFunction::from_fragment(&frag, "theta").unwrap_err().to_string();
    assert!(err.contains("'theta.m'"), "{err}");
    let frag: toml::Table = "kind = \"power\"\nalpha = 2.0\nm = 1".parse().unwrap();
    let err = GrowthFunction::from_fragment(&frag, "theta").unwrap_err().to_string();
    assert!(err.contains("'theta.m'"), "{err}");
    let frag: toml::Table = "kind = \"tabulated_power\"\nexponent = 2.0\ndecades = 3".parse().unwrap();
    assert!(matches!(
        GrowthFunction::from_fragment(&frag, "theta").unwrap(),
        GrowthFunction::Tabulated(_)
    ));
}
