//! Characteristics Ẋ = F(t,X,V), V̇ = E(t,X): force laws, a Strang
//! kick-drift-kick integrator, flow maps, and their diagnostics.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VpyError};
use crate::growth::Modulus;
use crate::parallel::{map_indexed, Exec};

/// A user force F(t, x, v, out).
pub type ForceFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// A field E(t, x, out); fails on singular evaluations.
pub type FieldFn<'a> = &'a (dyn Fn(f64, &[f64], &mut [f64]) -> Result<()> + Sync);

#[derive(Clone)]
pub enum ForceKind {
    Classical,
    Relativistic,
    CustomLipschitz { lipschitz: f64, f: ForceFn },
}

impl fmt::Debug for ForceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForceKind::Classical => write!(f, "Classical"),
            ForceKind::Relativistic => write!(f, "Relativistic"),
            ForceKind::CustomLipschitz { lipschitz, .. } => write!(f, "CustomLipschitz(L={lipschitz})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForceLaw {
    pub kind: ForceKind,
    pub divergence_free_in_x: bool,
}

impl ForceLaw {
    /// F(t,x,v) = v.
    pub fn classical() -> Self {
        Self {
            kind: ForceKind::Classical,
            divergence_free_in_x: true,
        }
    }

    /// F(t,x,v) = v/√(1+|v|²).
    pub fn relativistic() -> Self {
        Self {
            kind: ForceKind::Relativistic,
            divergence_free_in_x: true,
        }
    }

    pub fn custom(lipschitz: f64, divergence_free_in_x: bool, f: ForceFn) -> Result<Self> {
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return invalid(format!("Lipschitz constant must be >= 0, got {lipschitz}"));
        }
        Ok(Self {
            kind: ForceKind::CustomLipschitz { lipschitz, f },
            divergence_free_in_x,
        })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ForceKind::Classical => "classical",
            ForceKind::Relativistic => "relativistic",
            ForceKind::CustomLipschitz { .. } => "custom",
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match &self.kind {
            ForceKind::Classical | ForceKind::Relativistic => 1.0,
            ForceKind::CustomLipschitz { lipschitz, .. } => *lipschitz,
        }
    }

    /// Whether F depends on v only, making the drift exact.
    fn velocity_only(&self) -> bool {
        !matches!(self.kind, ForceKind::CustomLipschitz { .. })
    }

    pub fn eval(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        match &self.kind {
            ForceKind::Classical => out.copy_from_slice(v),
            ForceKind::Relativistic => {
                let g = (1.0 + v.iter().map(|c| c * c).sum::<f64>()).sqrt();
                for (o, c) in out.iter_mut().zip(v) {
                    *o = c / g;
                }
            }
            ForceKind::CustomLipschitz { f, .. } => f(t, x, v, out),
        }
    }
}

/// X += dt·F with V fixed: exact for velocity-only F, midpoint otherwise.
pub fn drift(force: &ForceLaw, t: f64, dt: f64, x: &mut [f64], v: &[f64]) {
    let d = x.len();
    let mut f = [0.0; 3];
    let f = if d <= 3 { &mut f[..d] } else { return drift_any(force, t, dt, x, v) };
    if force.velocity_only() {
        force.eval(t, x, v, f);
    } else {
        force.eval(t, x, v, f);
        let mut mid = [0.0; 3];
        for a in 0..d {
            mid[a] = x[a] + 0.5 * dt * f[a];
        }
        force.eval(t + 0.5 * dt, &mid[..d], v, f);
    }
    for a in 0..d {
        x[a] += dt * f[a];
    }
}

fn drift_any(force: &ForceLaw, t: f64, dt: f64, x: &mut [f64], v: &[f64]) {
    let d = x.len();
    let mut f = vec![0.0; d];
    force.eval(t, x, v, &mut f);
    if !force.velocity_only() {
        let mid: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + 0.5 * dt * b).collect();
        force.eval(t + 0.5 * dt, &mid, v, &mut f);
    }
    for (a, b) in x.iter_mut().zip(&f) {
        *a += dt * b;
    }
}

/// Number of steps n with n·dt = T (up to rounding), and the exact step T/n.
pub fn step_count(t_end: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0 && t_end >= 0.0 && t_end.is_finite()) {
        return invalid(format!("need dt > 0 and T >= 0, got dt={dt}, T={t_end}"));
    }
    let n = (t_end / dt).round();
    if (n * dt - t_end).abs() > 1e-9 * t_end.max(dt) {
        return invalid(format!("T/dt = {} is not an integer", t_end / dt));
    }
    let n = n as usize;
    Ok((n, if n == 0 { dt } else { t_end / n as f64 }))
}

/// Sampled solution (X(t), V(t)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Flat (x, v) per time, 2·dim entries each.
    pub states: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
    pub fn position(&self, i: usize) -> &[f64] {
        &self.states[2 * self.dim * i..2 * self.dim * i + self.dim]
    }
    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.states[2 * self.dim * i + self.dim..2 * self.dim * (i + 1)]
    }

    /// CSV with columns t, x1..xd, v1..vd.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let d = self.dim;
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|a| format!("x{a}")));
        header.extend((1..=d).map(|a| format!("v{a}")));
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = std::iter::once(self.times[i])
                .chain(self.states[2 * d * i..2 * d * (i + 1)].iter().copied())
                .map(|c| format!("{c:e}"))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Velocity-Verlet (kick-drift-kick) from `(x0, v0)` over [0, T].
pub fn integrate(force: &ForceLaw, field: FieldFn<'_>, x0: &[f64], v0: &[f64], t_end: f64, dt: f64) -> Result<Trajectory> {
    let d = x0.len();
    if v0.len() != d || d == 0 {
        return invalid("start position and velocity must have equal, non-zero length");
    }
    let (n, h) = step_count(t_end, dt)?;
    let mut x = x0.to_vec();
    let mut v = v0.to_vec();
    let mut e = vec![0.0; d];
    let mut states = Vec::with_capacity((n + 1) * 2 * d);
    let mut times = Vec::with_capacity(n + 1);
    let singular = |t: f64, x: &[f64], err: VpyError| match err {
        VpyError::Singularity { detail, .. } => VpyError::Singularity {
            t,
            detail: format!("{detail} at X = {x:?}"),
        },
        other => other,
    };
    field(0.0, &x, &mut e).map_err(|err| singular(0.0, &x, err))?;
    times.push(0.0);
    states.extend_from_slice(&x);
    states.extend_from_slice(&v);
    for k in 0..n {
        let t = k as f64 * h;
        for a in 0..d {
            v[a] += 0.5 * h * e[a];
        }
        drift(force, t, h, &mut x, &v);
        let t1 = (k + 1) as f64 * h;
        field(t1, &x, &mut e).map_err(|err| singular(t1, &x, err))?;
        for a in 0..d {
            v[a] += 0.5 * h * e[a];
        }
        if x.iter().chain(&v).any(|c| !c.is_finite()) {
            return Err(VpyError::NumericFailure {
                what: "trajectory left the finite range".into(),
                estimate: t1,
            });
        }
        times.push(t1);
        states.extend_from_slice(&x);
        states.extend_from_slice(&v);
    }
    Ok(Trajectory { dim: d, times, states })
}

/// Result of [`energy_identity_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub eps: f64,
    pub dt: f64,
    pub t_end: f64,
    /// sup_t |V² - 2(Φ(X) - Φ(ε))| / max(V², 1e-12).
    pub residual: f64,
    pub final_x: f64,
}

/// 1-D check of V² = 2(Φ(X) - Φ(ε)) for Ẍ = φ(X), X(0) = ε, V(0) = 0.
/// `modulus = None` uses E ≡ 0.
pub fn energy_identity_check(modulus: Option<&Modulus>, eps: f64, t_end: f64, dt: f64) -> Result<EnergyReport> {
    if !(eps > 0.0) {
        return invalid("energy check needs eps > 0");
    }
    let field = |_t: f64, x: &[f64], out: &mut [f64]| -> Result<()> {
        out[0] = modulus.map_or(0.0, |m| m.phi(x[0]));
        Ok(())
    };
    let traj = integrate(&ForceLaw::classical(), &field, &[eps], &[0.0], t_end, dt)?;
    let phi0 = match modulus {
        Some(m) => m.big_phi(eps)?,
        None => 0.0,
    };
    let mut residual = 0.0f64;
    for i in 0..traj.len() {
        let (x, v) = (traj.position(i)[0], traj.velocity(i)[0]);
        let rhs = match modulus {
            Some(m) => 2.0 * (m.big_phi(x)? - phi0),
            None => 0.0,
        };
        residual = residual.max((v * v - rhs).abs() / (v * v).max(1e-12));
    }
    Ok(EnergyReport {
        eps,
        dt,
        t_end,
        residual,
        final_x: traj.position(traj.len() - 1)[0],
    })
}

/// Final states of a flow map applied to an ensemble of atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMapResult {
    pub dim: usize,
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    /// Indices whose trajectory failed (their states are NaN).
    pub failures: Vec<(usize, String)>,
}

/// Largest tolerated fraction of failing particles.
pub const FLOW_FAILURE_FRACTION: f64 = 1e-3;

/// Γ(T, ·) applied to every atom (flat positions/velocities, `dim` per atom).
pub fn flow_map(
    force: &ForceLaw,
    field: FieldFn<'_>,
    dim: usize,
    positions: &[f64],
    velocities: &[f64],
    t_end: f64,
    dt: f64,
    exec: Exec,
) -> Result<FlowMapResult> {
    if dim == 0 || positions.len() != velocities.len() || positions.len() % dim != 0 {
        return invalid("positions and velocities must be flat arrays of equal length");
    }
    let n = positions.len() / dim;
    step_count(t_end, dt)?;
    let out = map_indexed(exec, n, |i| {
        let x0 = &positions[i * dim..(i + 1) * dim];
        let v0 = &velocities[i * dim..(i + 1) * dim];
        integrate(force, field, x0, v0, t_end, dt).map(|tr| {
            let last = tr.len() - 1;
            (tr.position(last).to_vec(), tr.velocity(last).to_vec())
        })
    });
    let mut res = FlowMapResult {
        dim,
        positions: Vec::with_capacity(n * dim),
        velocities: Vec::with_capacity(n * dim),
        failures: Vec::new(),
    };
    for (i, r) in out.into_iter().enumerate() {
        match r {
            Ok((x, v)) => {
                res.positions.extend(x);
                res.velocities.extend(v);
            }
            Err(e) => {
                res.positions.extend(std::iter::repeat(f64::NAN).take(dim));
                res.velocities.extend(std::iter::repeat(f64::NAN).take(dim));
                res.failures.push((i, e.to_string()));
            }
        }
    }
    if res.failures.len() as f64 > FLOW_FAILURE_FRACTION * n as f64 {
        return Err(VpyError::NumericFailure {
            what: format!("{} of {n} trajectories failed: {}", res.failures.len(), res.failures[0].1),
            estimate: res.failures.len() as f64 / n as f64,
        });
    }
    Ok(res)
}

/// Result of [`measure_preservation_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub points: usize,
    pub step: f64,
    pub max_det_deviation: f64,
}

/// Estimates det DΓ(T, ·) by central differences at each phase-space point
/// (flat, 2·dim per point) and reports max |det - 1|.
pub fn measure_preservation_check(
    force: &ForceLaw,
    field: FieldFn<'_>,
    dim: usize,
    points: &[f64],
    t_end: f64,
    dt: f64,
    fd_step: f64,
    exec: Exec,
) -> Result<JacobianReport> {
    if !force.divergence_free_in_x {
        return invalid("measure preservation requires div_x F = 0");
    }
    let w = 2 * dim;
    if dim == 0 || points.len() % w != 0 {
        return invalid("points must be flat (x, v) tuples");
    }
    let m = points.len() / w;
    let flow = |z: &[f64]| -> Result<Vec<f64>> {
        let tr = integrate(force, field, &z[..dim], &z[dim..], t_end, dt)?;
        Ok(tr.states[tr.states.len() - w..].to_vec())
    };
    let dets = map_indexed(exec, m, |p| -> Result<f64> {
        let z = &points[p * w..(p + 1) * w];
        let mut jac = DMatrix::<f64>::zeros(w, w);
        for c in 0..w {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[c] += fd_step;
            zm[c] -= fd_step;
            let (fp, fm) = (flow(&zp)?, flow(&zm)?);
            for r in 0..w {
                jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * fd_step);
            }
        }
        Ok(jac.determinant())
    });
    let mut worst = 0.0f64;
    for d in dets {
        worst = worst.max((d? - 1.0).abs());
    }
    Ok(JacobianReport {
        points: m,
        step: fd_step,
        max_det_deviation: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::growth::GrowthFunction;

    fn zero(_t: f64, _x: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|o| *o = 0.0);
        Ok(())
    }

    fn spring(_t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, c) in out.iter_mut().zip(x) {
            *o = -c;
        }
        Ok(())
    }

    #[test]
    fn free_streaming_is_exact() {
        let tr = integrate(&ForceLaw::classical(), &zero, &[1.0, -2.0], &[0.5, 0.25], 2.0, 0.25).unwrap();
        let last = tr.len() - 1;
        assert_eq!(tr.position(last), &[2.0, -1.5]);
        assert_eq!(tr.velocity(last), &[0.5, 0.25]);
    }

    #[test]
    fn harmonic_oscillator() {
        let pi = std::f64::consts::PI;
        let tr = integrate(&ForceLaw::classical(), &spring, &[1.0, 0.0], &[0.0, 0.0], pi, pi / 3142.0).unwrap();
        let last = tr.len() - 1;
        assert!((tr.position(last)[0] + 1.0).abs() < 1e-6);
        assert!(tr.position(last)[1].abs() < 1e-15);
    }

    #[test]
    fn second_order_convergence() {
        let err = |dt: f64| {
            let tr = integrate(&ForceLaw::classical(), &spring, &[1.0], &[0.0], 1.0, dt).unwrap();
            (tr.position(tr.len() - 1)[0] - 1f64.cos()).abs()
        };
        let ratio = err(0.01) / err(0.005);
        assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn relativistic_speed_below_one() {
        let strong = |_t: f64, _x: &[f64], out: &mut [f64]| -> Result<()> {
            out[0] = 50.0;
            out[1] = -20.0;
            Ok(())
        };
        let f = ForceLaw::relativistic();
        let tr = integrate(&f, &strong, &[0.0, 0.0], &[3.0, 0.0], 1.0, 0.01).unwrap();
        for i in 1..tr.len() {
            let dx: f64 = tr
                .position(i)
                .iter()
                .zip(tr.position(i - 1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dx / 0.01 < 1.0);
        }
    }

    #[test]
    fn custom_force_uses_midpoint() {
        // Ẋ = -X: midpoint gives x·(1 - h + h²/2) per step
        let f = ForceLaw::custom(
            1.0,
            false,
            Arc::new(|_t: f64, x: &[f64], _v: &[f64], out: &mut [f64]| out[0] = -x[0]),
        )
        .unwrap();
        let tr = integrate(&f, &zero, &[1.0], &[0.0], 0.1, 0.1).unwrap();
        assert!((tr.position(1)[0] - (1.0 - 0.1 + 0.005)).abs() < 1e-15);
    }

    #[test]
    fn time_reversal() {
        let f = ForceLaw::classical();
        let fwd = integrate(&f, &spring, &[0.3, -0.7], &[0.2, 0.1], 1.0, 1e-3).unwrap();
        let last = fwd.len() - 1;
        let back_v: Vec<f64> = fwd.velocity(last).iter().map(|c| -c).collect();
        let back = integrate(&f, &spring, fwd.position(last), &back_v, 1.0, 1e-3).unwrap();
        let l = back.len() - 1;
        assert!((back.position(l)[0] - 0.3).abs() < 1e-8);
        assert!((back.position(l)[1] + 0.7).abs() < 1e-8);
        assert!((back.velocity(l)[0] + 0.2).abs() < 1e-8);
    }

    #[test]
    fn non_integer_step_count_rejected() {
        assert!(step_count(1.0, 0.3).is_err());
        assert_eq!(step_count(1.0, 0.25).unwrap(), (4, 0.25));
    }

    #[test]
    fn singularity_reports_time() {
        let bad = |t: f64, _x: &[f64], _o: &mut [f64]| -> Result<()> {
            if t > 0.5 {
                Err(VpyError::Singularity {
                    t: f64::NAN,
                    detail: "test".into(),
                })
            } else {
                Ok(())
            }
        };
        match integrate(&ForceLaw::classical(), &bad, &[0.0], &[1.0], 1.0, 0.25) {
            Err(VpyError::Singularity { t, .. }) => assert_eq!(t, 0.75),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn energy_identity_holds() {
        let m = Modulus::new(GrowthFunction::constant(1.0).unwrap(), 2).unwrap();
        let r = energy_identity_check(Some(&m), 1e-3, 1.0, 1e-4).unwrap();
        assert!(r.residual <= 1e-4, "{r:?}");
        let z = energy_identity_check(None, 1e-3, 1.0, 1e-2).unwrap();
        assert_eq!(z.residual, 0.0);
        assert_eq!(z.final_x, 1e-3);
    }

    #[test]
    fn flow_map_matches_single_trajectories_and_aborts_on_failures() {
        let f = ForceLaw::classical();
        let xs = [0.0, 1.0, 2.0, 3.0];
        let vs = [1.0, 1.0, -1.0, 0.0];
        let res = flow_map(&f, &zero, 1, &xs, &vs, 1.0, 0.5, Exec::Parallel).unwrap();
        assert_eq!(res.positions, vec![1.0, 2.0, 1.0, 3.0]);
        assert_eq!(res.velocities, vs.to_vec());
        let bad = |_t: f64, x: &[f64], _o: &mut [f64]| -> Result<()> {
            if x[0] > 2.5 {
                Err(VpyError::Singularity {
                    t: 0.0,
                    detail: "x".into(),
                })
            } else {
                Ok(())
            }
        };
        assert!(flow_map(&f, &bad, 1, &xs, &vs, 1.0, 0.5, Exec::Sequential).is_err());
    }

    #[test]
    fn shear_and_rotation_preserve_volume() {
        let pts = [0.1, -0.2, 0.3, 0.4, 1.0, 0.5, -0.5, 0.2];
        let f = ForceLaw::classical();
        let shear = measure_preservation_check(&f, &zero, 2, &pts, 1.0, 0.01, 1e-5, Exec::Sequential).unwrap();
        assert!(shear.max_det_deviation < 1e-6, "{shear:?}");
        let rot = measure_preservation_check(&f, &spring, 2, &pts, 1.0, 0.01, 1e-5, Exec::Sequential).unwrap();
        assert!(rot.max_det_deviation < 1e-6, "{rot:?}");
    }

    #[test]
    fn trajectory_csv_header() {
        let tr = integrate(&ForceLaw::classical(), &zero, &[0.0, 0.0], &[1.0, 0.0], 1.0, 0.5).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next().unwrap(), "t,x1,x2,v1,v2");
        assert_eq!(s.lines().count(), 4);
    }
}
