//! Two-run studies: certificate-vs-simulation stability and weak-form
//! refinement.

use serde::{Deserialize, Serialize};
use vpy_core::certificates::{lagrangian_w1_bound, LagrangianInput, StabilityCertificate};
use vpy_core::dynamics::ForceLaw;
use vpy_core::field::{morrey_continuity_check, MorreyOptions, Scaled};
use vpy_core::growth::{GrowthFunction, Modulus};
use vpy_core::parallel::Exec;
use vpy_core::transport::{w1_coupled_bound, w1_exact, Atoms, CoupledBound, Coupling};
use vpy_core::vlasov::{
    DatumSampler, ParticleEnsemble, SimParams, Simulation, TestFunction, WeakResidual,
};
use vpy_core::yudovich::RadialProfile;
use vpy_core::{Result, VpyError};

/// How W₁ is measured at diagnostic times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W1Mode {
    /// Exact transport LP (N² ≤ 4e6).
    Exact,
    /// 𝒳 + 𝒱 under the common-seed identity coupling only.
    Coupled,
}

#[derive(Debug, Clone)]
pub struct StabilityParams {
    pub profile: RadialProfile,
    pub n: usize,
    pub seed: u64,
    pub kappa: f64,
    pub force: ForceLaw,
    pub corrector: bool,
    pub regularization: Option<f64>,
    pub dt: f64,
    pub t_end: f64,
    /// Steps between diagnostic times.
    pub diag_every: usize,
    /// Sup-norm η of the position perturbation.
    pub perturb: f64,
    /// Growth function of the certificate modulus.
    pub theta: GrowthFunction,
    /// Continuity constant c with |E(x) - E(y)| ≤ c φ_Θ(|x-y|); `None`
    /// measures the Morrey ratio of the normalized initial density.
    pub field_constant: Option<f64>,
    pub morrey_pairs: usize,
    pub w1_mode: W1Mode,
    /// Rerun at dt/2 to size the discretization slack.
    pub refine: bool,
    pub exec: Exec,
}

/// One diagnostic time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub t: f64,
    pub w1_exact: Option<f64>,
    pub coupled_position: f64,
    pub coupled_velocity: f64,
    pub coupled_bound: f64,
    /// None past a certificate blow-up (the bound is then unbounded).
    pub certificate_bound: Option<f64>,
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
    pub w1_initial: f64,
    pub field_constant: f64,
    /// 3·|W₁(T; dt) - W₁(T; dt/2)|, 0 without refinement.
    pub slack: f64,
    pub refinement_delta: Option<f64>,
    pub sup_w1: f64,
    pub certificate: StabilityCertificate,
    pub regularization: f64,
    pub violations: usize,
}

/// x ↦ x + η u(x) with |u| ≡ 1, a smooth rotating unit field.
pub fn perturb_positions(e: &ParticleEnsemble, eta: f64) -> ParticleEnsemble {
    let d = e.dim;
    let mut out = e.clone();
    for x in out.positions.chunks_mut(d) {
        let phi = 3.0 * x[0] + 2.0 * x.get(1).copied().unwrap_or(0.0) + 1.0;
        let u: [f64; 3] = match d {
            1 => [1.0, 0.0, 0.0],
            2 => [phi.cos(), phi.sin(), 0.0],
            _ => {
                let psi = 2.0 * x[2] - x[0];
                [phi.cos(), phi.sin() * psi.cos(), phi.sin() * psi.sin()]
            }
        };
        for a in 0..d {
            x[a] += eta * u[a];
        }
    }
    out
}

struct PairSample {
    t: f64,
    w1: Option<f64>,
    coupled: CoupledBound,
}

fn atoms(e: &ParticleEnsemble) -> Result<Atoms<'_>> {
    Atoms::new(e.dim, &e.positions, &e.velocities, &e.weights)
}

fn measure(s1: &Simulation, s2: &Simulation, pi: &Coupling, mode: W1Mode, exec: Exec) -> Result<PairSample> {
    let (a, b) = (atoms(&s1.ensemble)?, atoms(&s2.ensemble)?);
    let coupled = w1_coupled_bound(pi, &a, s1.t, &b, s2.t)?;
    let w1 = match mode {
        W1Mode::Exact => Some(w1_exact(&a, &b, exec)?.distance),
        W1Mode::Coupled => None,
    };
    Ok(PairSample { t: s1.t, w1, coupled })
}

fn run_pair(p: &StabilityParams, e1: &ParticleEnsemble, e2: &ParticleEnsemble, dt: f64, every: usize) -> Result<Vec<PairSample>> {
    let params = SimParams {
        force: p.force.clone(),
        regularization: p.regularization,
        corrector: p.corrector,
        exec: p.exec,
    };
    let mut s1 = Simulation::new(e1.clone(), params.clone())?;
    let mut s2 = Simulation::new(e2.clone(), params)?;
    let pi = Coupling::identity(&e1.weights);
    let steps = (p.t_end / dt).round() as usize;
    let mut out = vec![measure(&s1, &s2, &pi, p.w1_mode, p.exec)?];
    for k in 1..=steps {
        s1.step(dt)?;
        s2.step(dt)?;
        if k % every == 0 || k == steps {
            out.push(measure(&s1, &s2, &pi, p.w1_mode, p.exec)?);
        }
    }
    Ok(out)
}

fn validate(p: &StabilityParams) -> Result<()> {
    let bad = |m: &str| Err(VpyError::InvalidInput(m.to_string()));
    if p.n == 0 {
        return bad("stability needs N >= 1");
    }
    if !(p.dt > 0.0 && p.t_end > 0.0) {
        return bad("stability needs dt > 0 and T > 0");
    }
    let steps = p.t_end / p.dt;
    if (steps - steps.round()).abs() > 1e-9 * steps {
        return bad("T/dt must be an integer");
    }
    if p.diag_every == 0 {
        return bad("diag_every must be >= 1");
    }
    if !(p.perturb >= 0.0 && p.perturb.is_finite()) {
        return bad("perturbation size must be >= 0");
    }
    Ok(())
}

/// Morrey sup ratio of θ/‖θ‖_{L¹} against φ_Θ.
pub fn initial_field_constant(profile: &RadialProfile, modulus: &Modulus, pairs: usize, exec: Exec) -> Result<f64> {
    let mass = DatumSampler::new(profile)?.mass();
    let rho = Scaled {
        factor: 1.0 / mass,
        inner: profile,
    };
    let opts = MorreyOptions {
        pairs,
        sample_radius: profile.support_radius().min(0.5),
        ..MorreyOptions::default()
    };
    Ok(morrey_continuity_check(&rho, modulus, &opts, exec)?.sup_ratio)
}

pub fn stability_experiment(p: &StabilityParams) -> Result<StabilityReport> {
    validate(p)?;
    let d = p.profile.dim();
    let base = Modulus::new(p.theta.clone(), d)?;
    let field_constant = match p.field_constant {
        Some(c) if c > 0.0 => c,
        Some(c) => return Err(VpyError::InvalidInput(format!("field constant must be positive, got {c}"))),
        None => initial_field_constant(&p.profile, &base, p.morrey_pairs, p.exec)?,
    };
    let modulus = base.scaled(field_constant)?;
    let e1 = DatumSampler::new(&p.profile)?.sample(p.n, p.seed, p.kappa)?;
    let e2 = perturb_positions(&e1, p.perturb);
    let samples = run_pair(p, &e1, &e2, p.dt, p.diag_every)?;
    let measured = |s: &PairSample| s.w1.unwrap_or(s.coupled.sum);
    let w1_initial = measured(&samples[0]);
    let (refinement_delta, slack) = if p.refine {
        let fine = run_pair(p, &e1, &e2, 0.5 * p.dt, 2 * p.diag_every)?;
        let delta = (measured(&samples[samples.len() - 1]) - measured(&fine[fine.len() - 1])).abs();
        (Some(delta), 3.0 * delta)
    } else {
        (None, 0.0)
    };
    let times: Vec<f64> = samples.iter().map(|s| s.t.min(p.t_end)).collect();
    let cert = lagrangian_w1_bound(
        &LagrangianInput {
            lipschitz: p.force.lipschitz(),
            w1_0: w1_initial,
            f_gap: 0.0,
            t_end: p.t_end,
            delta: None,
        },
        &modulus,
        &times,
    )?;
    let mut rows = Vec::with_capacity(samples.len());
    let mut violations = 0;
    for (k, s) in samples.iter().enumerate() {
        let bound = cert.w1_bound.get(k).copied();
        let ok = bound.map_or(true, |b| measured(s) <= b + slack);
        if !ok {
            violations += 1;
        }
        rows.push(StabilityRow {
            t: s.t,
            w1_exact: s.w1,
            coupled_position: s.coupled.position,
            coupled_velocity: s.coupled.velocity,
            coupled_bound: s.coupled.sum,
            certificate_bound: bound,
            within_bound: ok,
        });
    }
    let sup_w1 = samples.iter().map(measured).fold(0.0, f64::max);
    let regularization = p
        .regularization
        .unwrap_or_else(|| vpy_core::field::default_regularization(p.n, d));
    Ok(StabilityReport {
        rows,
        w1_initial,
        field_constant,
        slack,
        refinement_delta,
        sup_w1,
        certificate: cert,
        regularization,
        violations,
    })
}

/// The three test functions of the weak-form study, for dimension d.
pub fn default_test_functions(d: usize) -> Vec<TestFunction> {
    let mut x = vec![0.0; d];
    x[0] = 0.1;
    vec![
        TestFunction::Constant,
        TestFunction::Transported {
            center: x.clone(),
            width: 0.2,
        },
        TestFunction::Bump {
            x_center: x,
            v_center: vec![0.0; d],
            x_width: 0.15,
            v_width: 0.5,
        },
    ]
}

/// Weak-form residuals of one self-consistent run from θ.
pub fn weak_residual_run(
    profile: &RadialProfile,
    n: usize,
    seed: u64,
    kappa: f64,
    dt: f64,
    t_end: f64,
    tests: &[TestFunction],
    params: SimParams,
) -> Result<Vec<f64>> {
    let e = DatumSampler::new(profile)?.sample(n, seed, kappa)?;
    let d = e.dim;
    let w = e.weights.clone();
    let mut wr = WeakResidual::new(tests.to_vec(), params.force.clone(), t_end, dt)?;
    let mut sim = Simulation::new(e, params)?;
    wr.observe(&w, d, &sim.snapshot())?;
    let steps = (t_end / dt).round() as usize;
    for _ in 0..steps {
        sim.step(dt)?;
        wr.observe(&w, d, &sim.snapshot())?;
    }
    wr.residuals()
}
