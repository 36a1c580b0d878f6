//! Stability certificates: the second-order Grönwall bound, trajectory
//! separation under perturbed fields, mollification convergence, and the
//! Lagrangian W₁ bound.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VpyError};
use crate::growth::{Primitive, Psi};

/// Smallest δ used when the data gap vanishes.
pub const DELTA_FLOOR: f64 = 1e-12;

/// ∫_0^t e^{cs} ds bounded by (e^{ct}-1)/min(c, 1).
///
/// For c ≥ 1 this is e^{ct} - 1; for c < 1 the factor 1/c keeps the
/// Grönwall bound valid (e^{ct} - 1 alone under-estimates the integral).
pub fn exponential_increment(c: f64, t: f64) -> f64 {
    (c * t).exp_m1() / c.min(1.0)
}

/// Inputs of the second-order Grönwall bound for u'' ≤ c u' + φ(u).
#[derive(Clone, Copy)]
pub struct GronwallInput<'a> {
    pub modulus: &'a dyn Primitive,
    pub c: f64,
    /// Bound on u'(0).
    pub delta: f64,
    pub u0: f64,
    pub t_end: f64,
}

impl GronwallInput<'_> {
    fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.delta > 0.0 && self.t_end > 0.0) {
            return invalid("Grönwall input needs c > 0, delta > 0, T > 0");
        }
        if !(self.u0 >= 0.0) {
            return invalid("Grönwall input needs u0 >= 0");
        }
        Ok(())
    }
}

/// (u_bound(t), u'_bound(t)) with Ψ = Ψ_{δ,1}.
pub fn gronwall_bounds(g: &GronwallInput<'_>, t: f64) -> Result<(f64, f64)> {
    g.validate()?;
    if !(0.0..=g.t_end).contains(&t) {
        return invalid(format!("t = {t} outside [0, {}]", g.t_end));
    }
    let psi = Psi::new(g.modulus, g.delta, 1.0)?;
    let u = advance(&psi, g.u0, exponential_increment(g.c, t))?;
    let du = (g.c * t).exp() * (g.delta + (2.0 * g.modulus.big_phi(u)?).sqrt());
    Ok((u, du))
}

/// Ψ^{-1}(Ψ(x) + inc), exact at inc = 0.
fn advance(psi: &Psi<'_>, x: f64, inc: f64) -> Result<f64> {
    if inc == 0.0 {
        return Ok(x);
    }
    psi.invert(psi.eval(x)? + inc)
}

/// Data of two trajectories driven by perturbed (F, E).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeStabilityInput {
    pub lipschitz: f64,
    pub delta: f64,
    pub t_end: f64,
    pub x_gap: f64,
    pub v_gap: f64,
    pub e_gap: f64,
    pub f_gap: f64,
}

impl OdeStabilityInput {
    /// L(x_gap + v_gap + e_gap) + f_gap, the quantity δ must dominate.
    pub fn data_gap(&self) -> f64 {
        self.lipschitz * (self.x_gap + self.v_gap + self.e_gap) + self.f_gap
    }
}

/// Sup-norm bound on the separation of the two trajectories over [0, T]:
/// v_gap + e_gap + P + Tφ(P), P = Ψ_{δ,L}^{-1}(Ψ_{δ,L}(x_gap) + e^{LT} - 1).
pub fn ode_stability_bound(input: &OdeStabilityInput, modulus: &dyn Primitive) -> Result<f64> {
    let OdeStabilityInput {
        lipschitz: l,
        delta,
        t_end,
        x_gap,
        v_gap,
        e_gap,
        f_gap,
    } = *input;
    if !(l > 0.0 && t_end > 0.0) {
        return invalid("ODE stability needs L > 0 and T > 0");
    }
    if [x_gap, v_gap, e_gap, f_gap].iter().any(|g| !(*g >= 0.0)) {
        return invalid("gaps must be non-negative");
    }
    let gap = input.data_gap();
    if gap > delta {
        return Err(VpyError::Precondition(format!(
            "data gap {gap:e} exceeds delta {delta:e}; enlarge delta"
        )));
    }
    let psi = Psi::new(modulus, delta, l)?;
    let p = advance(&psi, x_gap, exponential_increment(l, t_end))?;
    Ok(v_gap + e_gap + p + t_end * modulus.phi(p))
}

/// δ + P + Tφ(P) with P = Ψ_{δ,L}^{-1}(e^{LT} - 1), δ = `delta_mn`.
pub fn mollification_convergence_bound(delta_mn: f64, lipschitz: f64, t_end: f64, modulus: &dyn Primitive) -> Result<f64> {
    if delta_mn == 0.0 {
        return Ok(0.0);
    }
    if !(delta_mn > 0.0) {
        return invalid("discrepancy must be >= 0");
    }
    mollification_bound_log(-delta_mn.ln(), lipschitz, t_end, modulus)
}

/// The mollification bound at δ = e^{-ℓ}. Moduli whose Osgood integral
/// diverges slowly (iterated logs) only approach 0 for δ far below the f64
/// range, which this form reaches.
pub fn mollification_bound_log(ln_inv_delta: f64, lipschitz: f64, t_end: f64, modulus: &dyn Primitive) -> Result<f64> {
    if !(lipschitz > 0.0 && t_end > 0.0) {
        return invalid("mollification bound needs L > 0 and T > 0");
    }
    let psi = Psi::with_ln_delta(modulus, -ln_inv_delta, lipschitz)?;
    let p = psi.invert(exponential_increment(lipschitz, t_end))?;
    Ok((-ln_inv_delta).exp() + p + t_end * modulus.phi(p))
}

/// ln(1/δ) = 10^{2^j}, j = 0..=7.
pub fn default_log_delta_sweep() -> Vec<f64> {
    (0..8).map(|j| 10f64.powi(1 << j)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepVerdict {
    /// Non-increasing, and the last value is below 1e-3 of the first.
    Vanishes,
    /// The last value is still at least half the first.
    Persists,
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MollificationSweep {
    pub ln_inv_deltas: Vec<f64>,
    pub bounds: Vec<f64>,
    pub verdict: SweepVerdict,
}

/// Evaluates the mollification bound along a sweep δ → 0.
pub fn mollification_sweep(
    ln_inv_deltas: &[f64],
    lipschitz: f64,
    t_end: f64,
    modulus: &dyn Primitive,
) -> Result<MollificationSweep> {
    if ln_inv_deltas.len() < 2 || ln_inv_deltas.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("sweep needs at least two increasing ln(1/delta) values");
    }
    let bounds = ln_inv_deltas
        .iter()
        .map(|&l| mollification_bound_log(l, lipschitz, t_end, modulus))
        .collect::<Result<Vec<_>>>()?;
    let (first, last) = (bounds[0], bounds[bounds.len() - 1]);
    let monotone = bounds.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9));
    let verdict = if monotone && last <= 1e-3 * first {
        SweepVerdict::Vanishes
    } else if last >= 0.5 * first {
        SweepVerdict::Persists
    } else {
        SweepVerdict::Undecided
    };
    Ok(MollificationSweep {
        ln_inv_deltas: ln_inv_deltas.to_vec(),
        bounds,
        verdict,
    })
}

/// Inputs of the Lagrangian W₁ bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangianInput {
    pub lipschitz: f64,
    pub w1_0: f64,
    pub f_gap: f64,
    pub t_end: f64,
    /// Overrides the default δ = 2(2L·w1_0 + f_gap).
    pub delta: Option<f64>,
}

/// Bound curves on a time grid. If Ψ^{-1} leaves its bracket the curves stop
/// and `blow_up_at` records the first failing time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    /// L actually used (clamped to ≥ 1).
    pub lipschitz: f64,
    pub lipschitz_clamped: bool,
    pub delta: f64,
    pub w1_0: f64,
    pub f_gap: f64,
    pub t_end: f64,
    pub modulus: String,
    pub times: Vec<f64>,
    pub position_bound: Vec<f64>,
    pub velocity_bound: Vec<f64>,
    pub w1_bound: Vec<f64>,
    pub blow_up_at: Option<f64>,
}

/// `n` uniform points on [0, T] (default 256).
pub fn uniform_grid(t_end: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|i| t_end * i as f64 / (n - 1) as f64).collect()
}

pub fn lagrangian_w1_bound(
    input: &LagrangianInput,
    modulus: &dyn Primitive,
    time_grid: &[f64],
) -> Result<StabilityCertificate> {
    let LagrangianInput {
        lipschitz,
        w1_0,
        f_gap,
        t_end,
        delta,
    } = *input;
    if !(lipschitz >= 0.0 && w1_0 >= 0.0 && f_gap >= 0.0 && t_end > 0.0) {
        return invalid("Lagrangian bound needs L, w1_0, f_gap >= 0 and T > 0");
    }
    if time_grid.windows(2).any(|w| w[1] < w[0]) || time_grid.iter().any(|&t| !(0.0..=t_end).contains(&t)) {
        return invalid("time grid must be non-decreasing inside [0, T]");
    }
    let l = lipschitz.max(1.0);
    let gap = 2.0 * l * w1_0 + f_gap;
    let delta = match delta {
        Some(d) if d > gap => d,
        Some(d) => {
            return Err(VpyError::Precondition(format!(
                "delta {d:e} must exceed 2L·W1 + |F1-F2| = {gap:e}"
            )))
        }
        None => (2.0 * gap).max(DELTA_FLOOR),
    };
    let psi = Psi::new(modulus, delta, 2.0 * l)?;
    let base = psi.eval(w1_0)?;
    let mut cert = StabilityCertificate {
        lipschitz: l,
        lipschitz_clamped: l != lipschitz,
        delta,
        w1_0,
        f_gap,
        t_end,
        modulus: modulus.label(),
        times: Vec::with_capacity(time_grid.len()),
        position_bound: Vec::with_capacity(time_grid.len()),
        velocity_bound: Vec::with_capacity(time_grid.len()),
        w1_bound: Vec::with_capacity(time_grid.len()),
        blow_up_at: None,
    };
    for &t in time_grid {
        let inc = (l * t).exp_m1();
        let p = if inc == 0.0 {
            Ok(w1_0)
        } else {
            psi.invert(base + inc)
        };
        let p = match p {
            Ok(p) => p,
            Err(VpyError::RangeExceeded { .. }) => {
                cert.blow_up_at = Some(t);
                break;
            }
            Err(e) => return Err(e),
        };
        let v = (l * t).exp() * (delta + (4.0 * l * modulus.big_phi(p)?).sqrt());
        cert.times.push(t);
        cert.position_bound.push(p);
        cert.velocity_bound.push(v);
        cert.w1_bound.push(p + v);
    }
    Ok(cert)
}

impl StabilityCertificate {
    /// Linear interpolation of w1_bound at t (None past a blow-up).
    pub fn w1_at(&self, t: f64) -> Option<f64> {
        let i = self.times.partition_point(|&s| s < t);
        if i < self.times.len() && self.times[i] == t {
            return Some(self.w1_bound[i]);
        }
        if i == 0 || i >= self.times.len() {
            return None;
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let s = (t - t0) / (t1 - t0);
        Some(self.w1_bound[i - 1] * (1.0 - s) + self.w1_bound[i] * s)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(
            w,
            "# L={} delta={:e} w1_0={:e} f_gap={:e} T={} modulus={}{}",
            self.lipschitz,
            self.delta,
            self.w1_0,
            self.f_gap,
            self.t_end,
            self.modulus,
            match self.blow_up_at {
                Some(t) => format!(" blow_up_at={t}"),
                None => String::new(),
            }
        )?;
        writeln!(w, "t,position_bound,velocity_bound,w1_bound")?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{},{:e},{:e},{:e}",
                self.times[i], self.position_bound[i], self.velocity_bound[i], self.w1_bound[i]
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::growth::{GrowthFunction, LinearModulus, Modulus};

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs()
    }

    #[test]
    fn gronwall_at_time_zero() {
        let m = Modulus::new(GrowthFunction::iterated_log(0).unwrap(), 2).unwrap();
        let g = GronwallInput {
            modulus: &m,
            c: 1.0,
            delta: 0.3,
            u0: 0.0,
            t_end: 1.0,
        };
        assert_eq!(gronwall_bounds(&g, 0.0).unwrap(), (0.0, 0.3));
    }

    #[test]
    fn gronwall_linear_closed_form() {
        let g = GronwallInput {
            modulus: &LinearModulus,
            c: 1.0,
            delta: 0.1,
            u0: 0.0,
            t_end: 1.0,
        };
        let (u, du) = gronwall_bounds(&g, 1.0).unwrap();
        let want = 0.1 * ((std::f64::consts::E - 1.0).exp() - 1.0);
        assert!(close(u, want, 1e-9), "{u} vs {want}");
        assert!(close(du, std::f64::consts::E * (0.1 + u), 1e-9));
    }

    #[test]
    fn increment_is_plain_exponential_for_c_at_least_one() {
        assert_eq!(exponential_increment(1.0, 0.5), 0.5f64.exp_m1());
        assert_eq!(exponential_increment(2.0, 0.5), 1f64.exp_m1());
        assert!(exponential_increment(0.5, 1.0) > 0.5f64.exp_m1());
    }

    #[test]
    fn ode_bound_regression_constant_theta() {
        // frozen from an independent ODE integration of dP/dy = δ + √(2LΦ(P))
        let m = Modulus::new(GrowthFunction::constant(1.0).unwrap(), 2).unwrap();
        let input = OdeStabilityInput {
            lipschitz: 1.0,
            delta: 1e-5,
            t_end: 1.0,
            x_gap: 1e-6,
            v_gap: 0.0,
            e_gap: 0.0,
            f_gap: 0.0,
        };
        let b = ode_stability_bound(&input, &m).unwrap();
        assert!(close(b, 0.0073484380902024918, 1e-8), "{b}");
    }

    #[test]
    fn ode_bound_passes_field_gap_through() {
        let m = Modulus::new(GrowthFunction::iterated_log(0).unwrap(), 2).unwrap();
        let eps = 1e-3;
        let input = OdeStabilityInput {
            lipschitz: 1.0,
            delta: 2e-3,
            t_end: 1.0,
            x_gap: 0.0,
            v_gap: 0.0,
            e_gap: eps,
            f_gap: 0.0,
        };
        assert!(ode_stability_bound(&input, &m).unwrap() >= eps);
        let bad = OdeStabilityInput { delta: 1e-4, ..input };
        assert!(matches!(ode_stability_bound(&bad, &m), Err(VpyError::Precondition(_))));
    }

    #[test]
    fn ode_bound_vanishes_with_delta() {
        let m = Modulus::new(GrowthFunction::constant(1.0).unwrap(), 2).unwrap();
        let mut last = f64::INFINITY;
        for k in [2, 4, 6, 8, 10] {
            let input = OdeStabilityInput {
                lipschitz: 1.0,
                delta: 10f64.powi(-k),
                t_end: 1.0,
                x_gap: 0.0,
                v_gap: 0.0,
                e_gap: 0.0,
                f_gap: 0.0,
            };
            let b = ode_stability_bound(&input, &m).unwrap();
            assert!(b < last);
            last = b;
        }
        assert!(last < 1e-5, "{last}");
    }

    #[test]
    fn lagrangian_regression_theta0() {
        let m = Modulus::new(GrowthFunction::iterated_log(0).unwrap(), 2).unwrap();
        let input = LagrangianInput {
            lipschitz: 1.0,
            w1_0: 1e-4,
            f_gap: 0.0,
            t_end: 1.0,
            delta: None,
        };
        let cert = lagrangian_w1_bound(&input, &m, &[0.0, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(cert.delta, 4e-4);
        assert_eq!(cert.position_bound[0], 1e-4);
        let want = [
            (0.0030565855070009296, 0.035538353573005825),
            (0.039397348321392391, 0.34673357824145828),
            (0.77569992449341385, 3.1746710823585755),
        ];
        for (i, (p, v)) in want.iter().enumerate() {
            assert!(close(cert.position_bound[i + 1], *p, 1e-8), "{i}: {}", cert.position_bound[i + 1]);
            assert!(close(cert.velocity_bound[i + 1], *v, 1e-8), "{i}: {}", cert.velocity_bound[i + 1]);
        }
        let mut csv = Vec::new();
        cert.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.lines().nth(1).unwrap() == "t,position_bound,velocity_bound,w1_bound");
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn lagrangian_clamps_small_lipschitz() {
        let m = Modulus::new(GrowthFunction::iterated_log(0).unwrap(), 2).unwrap();
        let input = LagrangianInput {
            lipschitz: 0.5,
            w1_0: 1e-4,
            f_gap: 0.0,
            t_end: 1.0,
            delta: None,
        };
        let cert = lagrangian_w1_bound(&input, &m, &uniform_grid(1.0, 8)).unwrap();
        assert!(cert.lipschitz_clamped);
        assert_eq!(cert.lipschitz, 1.0);
        assert!(cert.w1_bound.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn lagrangian_reports_blow_up() {
        let m = Modulus::new(GrowthFunction::iterated_log(0).unwrap(), 2).unwrap();
        let input = LagrangianInput {
            lipschitz: 20.0,
            w1_0: 1e-2,
            f_gap: 0.0,
            t_end: 2.0,
            delta: None,
        };
        let cert = lagrangian_w1_bound(&input, &m, &uniform_grid(2.0, 64)).unwrap();
        assert!(cert.blow_up_at.is_some());
        assert!(cert.times.len() < 64);
        assert!(cert.w1_at(cert.times[cert.times.len() - 1]).is_some());
    }

    #[test]
    fn mollification_dichotomy() {
        let good = Modulus::new(GrowthFunction::iterated_log(0).unwrap(), 2).unwrap();
        let bad = Modulus::new(GrowthFunction::tabulated_power(2.0, 150, 1).unwrap(), 2).unwrap();
        let sweep = default_log_delta_sweep();
        let g = mollification_sweep(&sweep[..4], 1.0, 1.0, &good).unwrap();
        assert_eq!(g.verdict, SweepVerdict::Vanishes, "{:?}", g.bounds);
        let b = mollification_sweep(&sweep[..4], 1.0, 1.0, &bad).unwrap();
        assert_eq!(b.verdict, SweepVerdict::Persists, "{:?}", b.bounds);
        assert_eq!(mollification_convergence_bound(0.0, 1.0, 1.0, &good).unwrap(), 0.0);
        let direct = mollification_convergence_bound(1e-20, 1.0, 1.0, &good).unwrap();
        let logged = mollification_bound_log(20.0 * std::f64::consts::LN_10, 1.0, 1.0, &good).unwrap();
        assert!(close(direct, logged, 1e-12));
    }

}
