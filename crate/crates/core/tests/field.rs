use proptest::prelude::*;
use vpy_core::field::{field_from_particles, KernelSpec, Targets};
use vpy_core::parallel::Exec;

fn vec3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kernel_is_odd(d in 2usize..4, z in vec3()) {
        let z = &z[..d];
        prop_assume!(z.iter().any(|c| c.abs() > 1e-6));
        let k = KernelSpec::exact(d, 1.0).unwrap();
        let minus: Vec<f64> = z.iter().map(|c| -c).collect();
        let a = k.eval(z).unwrap();
        let b = k.eval(&minus).unwrap();
        for i in 0..d {
            prop_assert_eq!(a[i], -b[i]);
        }
    }

    #[test]
    fn kernel_scales_homogeneously(d in 2usize..4, z in vec3(), lambda in 0.01f64..100.0) {
        let z = &z[..d];
        let n: f64 = z.iter().map(|c| c * c).sum::<f64>().sqrt();
        prop_assume!(n > 1e-3);
        let k = KernelSpec::exact(d, 1.0).unwrap();
        let scaled: Vec<f64> = z.iter().map(|c| lambda * c).collect();
        let a = k.eval(z).unwrap();
        let b = k.eval(&scaled).unwrap();
        let ratio = lambda.powi(1 - d as i32);
        for i in 0..d {
            prop_assert!((b[i] - ratio * a[i]).abs() <= 1e-12 * ratio * a[i].abs().max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn field_is_translation_equivariant(
        d in 2usize..4,
        pts in prop::collection::vec(-1.0f64..1.0, 30),
        shift in vec3(),
        reg in prop::sample::select(vec![0.0, 0.05]),
    ) {
        let n = pts.len() / d;
        let pos = &pts[..n * d];
        let w: Vec<f64> = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
        let spec = KernelSpec::new(d, -1.0, reg).unwrap();
        let moved: Vec<f64> = pos.iter().enumerate().map(|(i, c)| c + shift[i % d]).collect();
        let a = field_from_particles(&spec, pos, &w, Targets::Sources, Exec::Sequential);
        let b = field_from_particles(&spec, &moved, &w, Targets::Sources, Exec::Sequential);
        if let (Ok(a), Ok(b)) = (a, b) {
            let scale = a.iter().fold(1.0f64, |m, c| m.max(c.abs()));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-8 * scale, "{} vs {}", x, y);
            }
        }
    }
}

#[test]
fn parallel_and_sequential_fields_agree_bitwise() {
    let n = 700;
    let pos: Vec<f64> = (0..n * 3).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
    let w = vec![1.0 / n as f64; n];
    let spec = KernelSpec::new(3, 1.0, 0.01).unwrap();
    let a = field_from_particles(&spec, &pos, &w, Targets::Sources, Exec::Sequential).unwrap();
    let b = field_from_particles(&spec, &pos, &w, Targets::Sources, Exec::Parallel).unwrap();
    assert_eq!(a, b);
}
