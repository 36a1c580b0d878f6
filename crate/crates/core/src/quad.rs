//! Adaptive Gauss–Kronrod quadrature.
//!
//! A 21-point Kronrod rule with its embedded 10-point Gauss rule supplies a
//! value and an error estimate on every subinterval; the interval with the
//! largest estimate is bisected until the global estimate meets the requested
//! tolerance. All tolerances are relative to the running integral, so scaling
//! the integrand by a power of two scales every intermediate exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Result, VpyError};

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_600_525_452_542,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];

// Gauss weights for XGK[1], XGK[3], ..., XGK[9].
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

/// Outcome of one adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub intervals: usize,
}

/// Tolerances and limits for [`integrate`].
#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    /// Relative tolerance on the integral.
    pub rel_tol: f64,
    /// Absolute tolerance floor; keep at zero when exact scaling matters.
    pub abs_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            abs_tol: 0.0,
            max_intervals: 2000,
        }
    }
}

impl QuadOptions {
    pub fn rel(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            ..Self::default()
        }
    }

    pub fn with_max(mut self, max_intervals: usize) -> Self {
        self.max_intervals = max_intervals;
        self
    }
}

/// One application of the 21-point rule on `[a, b]`: (Kronrod value, error estimate).
pub fn gk21<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[10];
    let mut gauss = 0.0;
    for (j, (&x, &w)) in XGK.iter().zip(WGK.iter()).take(10).enumerate() {
        let dx = half * x;
        let pair = f(center - dx) + f(center + dx);
        kronrod += w * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    let value = kronrod * half;
    let err = ((kronrod - gauss) * half).abs();
    (value, err)
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error
            .partial_cmp(&other.error)
            .unwrap_or(Ordering::Equal)
            // deterministic tie-break
            .then_with(|| other.a.partial_cmp(&self.a).unwrap_or(Ordering::Equal))
    }
}

/// Integrates `f` over the partition given by `breaks` (sorted, at least two
/// points). Break points let callers pin kinks and singular points.
pub fn integrate_breaks<F: FnMut(f64) -> f64>(
    mut f: F,
    breaks: &[f64],
    opts: QuadOptions,
) -> Result<QuadResult> {
    if breaks.len() < 2 {
        return Ok(QuadResult {
            value: 0.0,
            error: 0.0,
            intervals: 0,
        });
    }
    let mut heap = BinaryHeap::new();
    let mut total = 0.0;
    let mut total_err = 0.0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        if !(b > a) {
            continue;
        }
        let (value, error) = gk21(&mut f, a, b);
        total += value;
        total_err += error;
        heap.push(Piece { a, b, value, error });
    }
    loop {
        if !total.is_finite() || !total_err.is_finite() {
            return Err(VpyError::NumericFailure {
                what: "non-finite integrand".into(),
                estimate: total_err,
            });
        }
        let target = (opts.rel_tol * total.abs()).max(opts.abs_tol);
        if total_err <= target {
            break;
        }
        if heap.len() >= opts.max_intervals {
            return Err(VpyError::NumericFailure {
                what: format!("quadrature did not converge in {} intervals", heap.len()),
                estimate: total_err,
            });
        }
        let worst = match heap.pop() {
            Some(p) => p,
            None => break,
        };
        let mid = 0.5 * (worst.a + worst.b);
        if !(mid > worst.a && mid < worst.b) {
            // interval exhausted at machine resolution; accept what we have
            heap.push(Piece {
                error: 0.0,
                ..worst
            });
            total_err -= worst.error;
            continue;
        }
        let (v1, e1) = gk21(&mut f, worst.a, mid);
        let (v2, e2) = gk21(&mut f, mid, worst.b);
        total += v1 + v2 - worst.value;
        total_err += e1 + e2 - worst.error;
        heap.push(Piece {
            a: worst.a,
            b: mid,
            value: v1,
            error: e1,
        });
        heap.push(Piece {
            a: mid,
            b: worst.b,
            value: v2,
            error: e2,
        });
    }
    // Re-sum in interval order so the result does not depend on the
    // running-update rounding history.
    let mut pieces: Vec<Piece> = heap.into_vec();
    pieces.sort_by(|p, q| p.a.partial_cmp(&q.a).unwrap_or(Ordering::Equal));
    let value = pieces.iter().map(|p| p.value).sum();
    let error = pieces.iter().map(|p| p.error).sum();
    Ok(QuadResult {
        value,
        error,
        intervals: pieces.len(),
    })
}

/// Integrates `f` over `[a, b]`.
pub fn integrate<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, opts: QuadOptions) -> Result<QuadResult> {
    if a == b {
        return Ok(QuadResult {
            value: 0.0,
            error: 0.0,
            intervals: 0,
        });
    }
    if a > b {
        let r = integrate_breaks(f, &[b, a], opts)?;
        return Ok(QuadResult {
            value: -r.value,
            ..r
        });
    }
    integrate_breaks(f, &[a, b], opts)
}

/// Sorts, deduplicates and clips candidate break points to `[a, b]`.
pub fn breakpoints(a: f64, b: f64, extra: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut pts: Vec<f64> = std::iter::once(a)
        .chain(extra.into_iter().filter(|x| x.is_finite() && *x > a && *x < b))
        .chain(std::iter::once(b))
        .collect();
    pts.sort_by(|x, y| x.partial_cmp(y).unwrap_or(Ordering::Equal));
    pts.dedup();
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kronrod_rule_is_exact_for_degree_31() {
        // K21 integrates x^k exactly on [0,1] up to k = 31
        for k in 0..=31 {
            let (v, _) = gk21(&mut |x: f64| x.powi(k), 0.0, 1.0);
            let exact = 1.0 / (k as f64 + 1.0);
            assert!((v - exact).abs() < 1e-14, "k={k}: {v} vs {exact}");
        }
    }

    #[test]
    fn embedded_gauss_rule_is_exact_for_degree_19() {
        // the error estimate is the K21 - G10 gap, which vanishes for deg <= 19
        for k in 0..=19 {
            let (_, e) = gk21(&mut |x: f64| x.powi(k), -1.0, 1.0);
            assert!(e < 1e-14, "k={k}: gap {e}");
        }
        let (_, e) = gk21(&mut |x: f64| x.powi(20), -1.0, 1.0);
        assert!(e > 1e-10);
    }

    #[test]
    fn adaptive_handles_log_singularity() {
        // ∫_0^1 -ln x dx = 1
        let r = integrate(|x: f64| -x.ln(), 0.0, 1.0, QuadOptions::rel(1e-12)).unwrap();
        assert!((r.value - 1.0).abs() < 1e-11, "{}", r.value);
    }

    #[test]
    fn reversed_limits_flip_sign() {
        let r = integrate(|x: f64| x.exp(), 1.0, 0.0, QuadOptions::default()).unwrap();
        assert!((r.value + (1f64.exp() - 1.0)).abs() < 1e-13);
    }

    #[test]
    fn nan_integrand_is_reported() {
        let r = integrate(|_| f64::NAN, 0.0, 1.0, QuadOptions::default());
        assert!(matches!(r, Err(VpyError::NumericFailure { .. })));
    }

    #[test]
    fn scaling_by_two_is_exact() {
        let f = |x: f64| (x * 7.3).sin().abs() + x.sqrt();
        let a = integrate(f, 0.0, 3.0, QuadOptions::rel(1e-9)).unwrap().value;
        let b = integrate(|x| 2.0 * f(x), 0.0, 3.0, QuadOptions::rel(1e-9)).unwrap().value;
        assert_eq!(2.0 * a, b);
    }
}
