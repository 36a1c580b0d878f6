use proptest::prelude::*;
use vpy_core::parallel::Exec;
use vpy_core::transport::{w1_coupled_bound, w1_exact, Atoms, Coupling};

#[derive(Debug, Clone)]
struct Measure {
    pos: Vec<f64>,
    vel: Vec<f64>,
    w: Vec<f64>,
}

impl Measure {
    fn atoms(&self, d: usize) -> Atoms<'_> {
        Atoms::new(d, &self.pos, &self.vel, &self.w).unwrap()
    }
}

fn measure(d: usize, n: usize) -> impl Strategy<Value = Measure> {
    (
        prop::collection::vec(-1.0f64..1.0, n * d),
        prop::collection::vec(-1.0f64..1.0, n * d),
        prop::collection::vec(0.1f64..1.0, n),
    )
        .prop_map(|(pos, vel, raw)| {
            let s: f64 = raw.iter().sum();
            Measure { pos, vel, w: raw.iter().map(|x| x / s).collect() }
        })
}

fn triple() -> impl Strategy<Value = (usize, Measure, Measure, Measure)> {
    (1usize..4, 1usize..7, 1usize..7, 1usize..7)
        .prop_flat_map(|(d, a, b, c)| (Just(d), measure(d, a), measure(d, b), measure(d, c)))
}

fn w1(d: usize, a: &Measure, b: &Measure) -> f64 {
    let r = w1_exact(&a.atoms(d), &b.atoms(d), Exec::Sequential).unwrap();
    assert!(r.duality_gap <= 1e-9, "duality gap {}", r.duality_gap);
    r.distance
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn w1_is_a_metric((d, a, b, c) in triple()) {
        let ab = w1(d, &a, &b);
        prop_assert_eq!(ab, w1(d, &b, &a));
        prop_assert_eq!(w1(d, &a, &a), 0.0);
        let (ac, cb) = (w1(d, &a, &c), w1(d, &c, &b));
        prop_assert!(ab <= ac + cb + 1e-9, "{} > {} + {}", ab, ac, cb);
    }

    #[test]
    fn coupled_bound_dominates_w1((d, a, b, _c) in triple()) {
        let moved = Measure { w: a.w.clone(), ..b.clone() };
        prop_assume!(moved.pos.len() == a.pos.len());
        let pi = Coupling::identity(&a.w);
        let cb = w1_coupled_bound(&pi, &a.atoms(d), 0.0, &moved.atoms(d), 0.0).unwrap();
        prop_assert!((cb.position + cb.velocity - cb.sum).abs() <= 1e-15 * cb.sum.max(1.0));
        prop_assert!(cb.sum >= w1(d, &a, &moved) - 1e-12);
    }
}

#[test]
fn parallel_solver_matches_sequential() {
    let n = 40;
    let grid = |k: usize, s: usize| ((k * s) % 97) as f64 / 97.0;
    let p1: Vec<f64> = (0..2 * n).map(|k| grid(k, 13)).collect();
    let p2: Vec<f64> = (0..2 * n).map(|k| grid(k, 31)).collect();
    let w = vec![1.0 / n as f64; n];
    let a = Atoms::new(2, &p1, &p2, &w).unwrap();
    let b = Atoms::new(2, &p2, &p1, &w).unwrap();
    let s = w1_exact(&a, &b, Exec::Sequential).unwrap();
    let p = w1_exact(&a, &b, Exec::Parallel).unwrap();
    assert_eq!(s.distance, p.distance);
}
