//! Experiment drivers. Each one reads its knobs from a [`Config`], writes its
//! artifacts into the output directory, and returns a JSON summary for the
//! manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value as Json};
use vpy_core::certificates::{
    default_log_delta_sweep, lagrangian_w1_bound, mollification_sweep, uniform_grid, LagrangianInput,
};
use vpy_core::dynamics::ForceLaw;
use vpy_core::field::{
    field_from_particles, field_uniform_ball, morrey_continuity_check, oscillation_bound_check, KernelSpec,
    MorreyOptions, Targets,
};
use vpy_core::growth::{osgood_verdict, GrowthFunction, Modulus, OsgoodThresholds};
use vpy_core::parallel::Exec;
use vpy_core::transport::SIZE_CAP;
use vpy_core::vlasov::{
    first_moment_bound, sample_initial_datum, Diagnostics, DiagnosticsConfig, SimParams, Simulation, WeakResidual,
};
use vpy_core::yudovich::{default_p_grid, saturation_check, yudovich_report, DensitySource, RadialProfile};
use vpy_core::{Result, VpyError};

use crate::config::Config;
use crate::stability::{default_test_functions, stability_experiment, StabilityParams, W1Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    GrowthReport,
    Saturation,
    FieldCheck,
    Simulate,
    Stability,
    Certify,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::GrowthReport,
        Experiment::Saturation,
        Experiment::FieldCheck,
        Experiment::Simulate,
        Experiment::Stability,
        Experiment::Certify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::GrowthReport => "growth_report",
            Experiment::Saturation => "saturation",
            Experiment::FieldCheck => "field_check",
            Experiment::Simulate => "simulate",
            Experiment::Stability => "stability",
            Experiment::Certify => "certify",
        }
    }
}

impl FromStr for Experiment {
    type Err = VpyError;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s || e.name().replace('_', "-") == s)
            .ok_or_else(|| {
                let names: Vec<_> = Experiment::ALL.iter().map(|e| e.name()).collect();
                VpyError::InvalidInput(format!("unknown experiment '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// What an experiment produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub artifacts: Vec<String>,
    pub summary: Json,
    /// Set when a checked property failed; the run still wrote its artifacts.
    pub violation: Option<String>,
}

/// Process exit code for an error class.
pub fn exit_code(e: &VpyError) -> i32 {
    match e {
        VpyError::InvalidInput(_) | VpyError::Precondition(_) | VpyError::Domain(_) => 2,
        VpyError::PropertyViolation(_) => 4,
        VpyError::NumericFailure { .. }
        | VpyError::RangeExceeded { .. }
        | VpyError::Singularity { .. }
        | VpyError::Sampler(_)
        | VpyError::SizeCap { .. }
        | VpyError::Io(_) => 3,
    }
}

/// Result of [`run`]: the exit code and where the manifest went.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub exit_code: i32,
    pub output_dir: PathBuf,
    pub message: Option<String>,
}

struct Ctx {
    out: PathBuf,
    exec: Exec,
    seed: u64,
}

impl Ctx {
    fn create(&self, name: &str, artifacts: &mut Vec<String>) -> Result<BufWriter<File>> {
        artifacts.push(name.to_string());
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }
}

fn parse_exec(cfg: &Config) -> Result<Exec> {
    match cfg.str_or("exec", "parallel")?.as_str() {
        "parallel" => Ok(Exec::Parallel),
        "sequential" => Ok(Exec::Sequential),
        other => Err(VpyError::InvalidInput(format!(
            "unknown 'exec' = \"{other}\" (expected parallel or sequential)"
        ))),
    }
}

/// Runs one experiment and writes `manifest.json`, also on failure once the
/// output directory exists.
pub fn run(experiment: Experiment, cfg: &Config) -> RunSummary {
    let start = Instant::now();
    let out = match cfg.str_or("output_dir", "out") {
        Ok(s) => PathBuf::from(s),
        Err(e) => return failed(PathBuf::from("out"), &e),
    };
    if let Err(e) = fs::create_dir_all(&out) {
        return failed(out, &VpyError::from(e));
    }
    let threads = cfg.usize_or("threads", 0);
    let prepared = threads.and_then(|t| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| VpyError::InvalidInput(format!("cannot build a pool of {t} threads: {e}")))?;
        Ok((pool, parse_exec(cfg)?, cfg.u64_or("seed", 1)?))
    });
    let (result, pool_threads, seed) = match prepared {
        Ok((pool, exec, seed)) => {
            let ctx = Ctx {
                out: out.clone(),
                exec,
                seed,
            };
            let r = pool.install(|| dispatch(experiment, cfg, &ctx));
            (r, pool.current_num_threads(), seed)
        }
        Err(e) => (Err(e), 0, 0),
    };
    let (code, status, message, outcome) = match result {
        Ok(o) => match &o.violation {
            Some(v) => (4, "violation", Some(v.clone()), o),
            None => (0, "ok", None, o),
        },
        Err(e) => (exit_code(&e), "error", Some(e.to_string()), Outcome::default()),
    };
    let unused = cfg.unused();
    for k in &unused {
        eprintln!("warning: config key '{k}' was not used by {}", experiment.name());
    }
    let manifest = json!({
        "experiment": experiment.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "threads": pool_threads,
        "status": status,
        "exit_code": code,
        "message": message,
        "wall_time_s": start.elapsed().as_secs_f64(),
        "artifacts": outcome.artifacts,
        "summary": outcome.summary,
        "config": cfg.resolved(),
        "unused_keys": unused,
    });
    let written = serde_json::to_string_pretty(&manifest)
        .map_err(|e| VpyError::Io(e.to_string()))
        .and_then(|s| fs::write(out.join("manifest.json"), s + "\n").map_err(VpyError::from));
    match written {
        Ok(()) => RunSummary {
            exit_code: code,
            output_dir: out,
            message,
        },
        Err(e) => failed(out, &e),
    }
}

fn failed(out: PathBuf, e: &VpyError) -> RunSummary {
    RunSummary {
        exit_code: exit_code(e),
        output_dir: out,
        message: Some(e.to_string()),
    }
}

fn dispatch(experiment: Experiment, cfg: &Config, ctx: &Ctx) -> Result<Outcome> {
    match experiment {
        Experiment::GrowthReport => growth_report(cfg, ctx),
        Experiment::Saturation => saturation(cfg, ctx),
        Experiment::FieldCheck => field_check(cfg, ctx),
        Experiment::Simulate => simulate(cfg, ctx),
        Experiment::Stability => stability(cfg, ctx),
        Experiment::Certify => certify(cfg, ctx),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<Json> {
    serde_json::to_value(v).map_err(|e| VpyError::Io(e.to_string()))
}

fn write_jsonl<T: serde::Serialize>(w: &mut impl Write, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, v).map_err(|e| VpyError::Io(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

fn dim(cfg: &Config) -> Result<usize> {
    let d = cfg.usize_or("sim.d", 3)?;
    if d != 2 && d != 3 {
        return Err(VpyError::InvalidInput(format!("'sim.d' must be 2 or 3, got {d}")));
    }
    Ok(d)
}

fn force_law(cfg: &Config) -> Result<ForceLaw> {
    match cfg.str_or("dynamics.force", "classical")?.as_str() {
        "classical" => Ok(ForceLaw::classical()),
        "relativistic" => Ok(ForceLaw::relativistic()),
        other => Err(VpyError::InvalidInput(format!(
            "unknown 'dynamics.force' = \"{other}\" (expected classical or relativistic)"
        ))),
    }
}

fn sim_params(cfg: &Config, exec: Exec) -> Result<SimParams> {
    Ok(SimParams {
        force: force_law(cfg)?,
        regularization: auto_or_f64(cfg, "kernel.regularization")?,
        corrector: cfg.bool_or("dynamics.corrector", true)?,
        exec,
    })
}

/// "auto" (→ None) or a positive number.
fn auto_or_f64(cfg: &Config, key: &str) -> Result<Option<f64>> {
    if let Ok(Some(v)) = cfg.f64_opt(key) {
        return Ok(Some(v));
    }
    match cfg.str_or(key, "auto")?.as_str() {
        "auto" => Ok(None),
        other => Err(VpyError::InvalidInput(format!(
            "key '{key}' must be \"auto\" or a number, got \"{other}\""
        ))),
    }
}

fn fmt_e(v: f64) -> String {
    format!("{v:e}")
}

fn growth_report(cfg: &Config, ctx: &Ctx) -> Result<Outcome> {
    let theta = cfg.growth("theta")?;
    let d = dim(cfg)?;
    let modulus = Modulus::new(theta.clone(), d)?;
    let r0 = cfg.f64_or("growth.r0", (0.5 * modulus.junction()).min(1e-2))?;
    let osgood = osgood_verdict(&modulus, r0, &OsgoodThresholds::default())?;
    let lipschitz = cfg.f64_or("certify.L", 1.0)?;
    let t_end = cfg.f64_or("dynamics.T", 1.0)?;
    let sweep = mollification_sweep(&default_log_delta_sweep(), lipschitz, t_end, &modulus)?;

    let mut artifacts = Vec::new();
    let mut w = ctx.create("modulus.csv", &mut artifacts)?;
    writeln!(w, "r,phi,Phi")?;
    let step = cfg.usize_or("growth.decade_step", 1)?.max(1);
    for k in (0..=300).step_by(step) {
        let r = 10f64.powi(-(k as i32));
        let big = modulus.big_phi(r).map_or_else(|_| "nan".to_string(), fmt_e);
        writeln!(w, "{},{},{}", fmt_e(r), fmt_e(modulus.phi(r)), big)?;
    }
    w.flush()?;
    let mut w = ctx.create("theta.csv", &mut artifacts)?;
    writeln!(w, "p,theta")?;
    for p in default_p_grid() {
        writeln!(w, "{},{}", fmt_e(p), fmt_e(theta.eval(p)))?;
    }
    w.flush()?;
    Ok(Outcome {
        artifacts,
        summary: json!({
            "theta": theta.kind_name(),
            "dim": d,
            "junction": modulus.junction(),
            "plateau": modulus.plateau(),
            "osgood": to_json(&osgood)?,
            "mollification": to_json(&sweep)?,
        }),
        violation: None,
    })
}

fn saturation(cfg: &Config, ctx: &Ctx) -> Result<Outcome> {
    let m = cfg.u64_or("saturation.m", 1)? as u32;
    let d = dim(cfg)?;
    let p_grid = cfg.f64_list_or("saturation.p", &default_p_grid())?;
    let fit = saturation_check(m, d, &p_grid, None)?;
    let profile = RadialProfile::theta(m, d)?;
    let theta = GrowthFunction::iterated_log(m)?;
    let norms = yudovich_report(DensitySource::Radial(&profile), &theta, &p_grid, ctx.exec)?;
    let mut artifacts = Vec::new();
    let mut w = ctx.create("saturation.csv", &mut artifacts)?;
    writeln!(w, "p,ell_norm,ratio")?;
    for i in 0..fit.p.len() {
        writeln!(w, "{},{},{}", fmt_e(fit.p[i]), fmt_e(fit.norms[i]), fmt_e(fit.ratios[i]))?;
    }
    w.flush()?;
    Ok(Outcome {
        artifacts,
        summary: json!({ "fit": to_json(&fit)?, "theta_profile": to_json(&norms)? }),
        violation: None,
    })
}

/// Points on spheres of radius in [r_lo, r_hi], deterministic in `seed`.
fn shell_points(d: usize, count: usize, r_lo: f64, r_hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(count * d);
    while pts.len() < count * d {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(0.1..=1.0).contains(&n) {
            continue;
        }
        let r = rng.gen_range(r_lo..r_hi);
        pts.extend(v.iter().map(|c| c / n * r));
    }
    pts
}

fn field_check(cfg: &Config, ctx: &Ctx) -> Result<Outcome> {
    let d = dim(cfg)?;
    let kappa = cfg.f64_or("sim.kappa", 1.0)?;
    let trials = cfg.usize_or("field.trials", 100_000)?;
    let osc_limit = cfg.f64_or("field.oscillation_limit", 10.0)?;
    let osc = oscillation_bound_check(d, trials, ctx.seed, ctx.exec)?;

    let n = cfg.usize_or("field.N", 20_000)?;
    let n_points = cfg.usize_or("field.points", 32)?;
    let tol = cfg.f64_or("field.tolerance", 6.0 / (n.max(1) as f64).sqrt())?;
    let ball = sample_initial_datum(&RadialProfile::uniform_ball(1.0, d)?, n, ctx.seed, kappa)?;
    let spec = KernelSpec::exact(d, kappa)?;
    let pts = shell_points(d, n_points, 1.5, 3.0, ctx.seed ^ 0x5eed);
    let got = field_from_particles(&spec, &ball.positions, &ball.weights, Targets::Points(&pts), ctx.exec)?;
    let mass = ball.total_mass();
    let mut newton_err = 0.0f64;
    let mut artifacts = Vec::new();
    let mut w = ctx.create("newton.csv", &mut artifacts)?;
    writeln!(w, "r,particle_field,exact_field,rel_error")?;
    for (i, x) in pts.chunks(d).enumerate() {
        let exact = field_uniform_ball(&spec, 1.0, mass, x);
        let e_norm = exact.iter().map(|c| c * c).sum::<f64>().sqrt();
        let diff = (0..d).map(|a| (got[i * d + a] - exact[a]).powi(2)).sum::<f64>().sqrt();
        let g_norm = (0..d).map(|a| got[i * d + a].powi(2)).sum::<f64>().sqrt();
        let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
        newton_err = newton_err.max(diff / e_norm);
        writeln!(w, "{r},{},{},{}", fmt_e(g_norm), fmt_e(e_norm), fmt_e(diff / e_norm))?;
    }
    w.flush()?;

    let morrey = if cfg.contains("sim.theta.kind") && cfg.contains("theta.kind") {
        let profile = cfg.density("sim.theta", d)?;
        let modulus = Modulus::new(cfg.growth("theta")?, d)?;
        let opts = MorreyOptions {
            pairs: cfg.usize_or("field.morrey_pairs", 200)?,
            seed: ctx.seed,
            sample_radius: profile.support_radius().min(0.5),
            ..MorreyOptions::default()
        };
        let rep = morrey_continuity_check(&profile, &modulus, &opts, ctx.exec)?;
        Some(json!({ "sup_ratio": rep.sup_ratio, "sup_field": rep.sup_field, "pairs": opts.pairs }))
    } else {
        None
    };

    let mut problems = Vec::new();
    if osc.max_ratio > osc_limit {
        problems.push(format!("oscillation ratio {:e} exceeds {osc_limit}", osc.max_ratio));
    }
    if newton_err > tol {
        problems.push(format!("particle field misses Newton's theorem by {newton_err:e} (tolerance {tol:e})"));
    }
    Ok(Outcome {
        artifacts,
        summary: json!({
            "oscillation": to_json(&osc)?,
            "newton": { "N": n, "points": n_points, "max_rel_error": newton_err, "tolerance": tol },
            "morrey": morrey,
        }),
        violation: (!problems.is_empty()).then(|| problems.join("; ")),
    })
}

fn simulate(cfg: &Config, ctx: &Ctx) -> Result<Outcome> {
    let d = dim(cfg)?;
    let profile = cfg.density("sim.theta", d)?;
    let n = cfg.usize_or("sim.N", 2000)?;
    let kappa = cfg.f64_or("sim.kappa", 1.0)?;
    let params = sim_params(cfg, ctx.exec)?;
    let t_end = cfg.f64_or("dynamics.T", 0.5)?;
    let dt = cfg.f64_or("dynamics.dt", 0.01)?;
    let every = cfg.usize_or("sim.diag_every", 10)?.max(1);
    let weak = cfg.bool_or("sim.weak_residual", false)?;
    let theta = if cfg.contains("theta.kind") {
        Some(cfg.growth("theta")?)
    } else {
        None
    };
    let diag_cfg = DiagnosticsConfig {
        p_set: cfg.f64_list_or("diagnostics.p", &[1.0, 2.0, 4.0])?,
        moment_ps: cfg.f64_list_or("diagnostics.moments", &[1.0, 2.0, 4.0])?,
        cells: cfg.usize_or("diagnostics.cells", 64)?,
        margin: cfg.f64_or("diagnostics.margin", 1.2)?,
        theta,
        uniformly_local: cfg.bool_or("diagnostics.uniformly_local", false)?,
        exec: ctx.exec,
    };
    if !(dt > 0.0 && t_end > 0.0) {
        return Err(VpyError::InvalidInput("'dynamics.T' and 'dynamics.dt' must be positive".into()));
    }
    let steps = (t_end / dt).round();
    if (t_end / dt - steps).abs() > 1e-9 * steps.max(1.0) {
        return Err(VpyError::InvalidInput(format!("T/dt must be an integer, got {}", t_end / dt)));
    }
    let steps = steps as usize;

    let ensemble = sample_initial_datum(&profile, n, ctx.seed, kappa)?;
    let weights = ensemble.weights.clone();
    let lipschitz = params.force.lipschitz().max(1.0);
    let mut residual = if weak {
        Some(WeakResidual::new(default_test_functions(d), params.force.clone(), t_end, dt)?)
    } else {
        None
    };
    let mut sim = Simulation::new(ensemble, params)?;
    let mut diag = Diagnostics::new(diag_cfg);
    let mut artifacts = Vec::new();
    let mut w = ctx.create("diagnostics.jsonl", &mut artifacts)?;
    let first = diag.record(&sim)?;
    write_jsonl(&mut w, &first)?;
    let (m0, moment0) = (first.mass, first.first_moment);
    let mut field_sup = first.field_sup;
    let mut problems = Vec::new();
    let mut last = first.clone();
    if let Some(r) = residual.as_mut() {
        r.observe(&weights, d, &sim.snapshot())?;
    }
    for k in 1..=steps {
        sim.step(dt)?;
        if let Some(r) = residual.as_mut() {
            r.observe(&weights, d, &sim.snapshot())?;
        }
        if k % every != 0 && k != steps {
            continue;
        }
        let rec = diag.record(&sim)?;
        write_jsonl(&mut w, &rec)?;
        field_sup = field_sup.max(rec.field_sup);
        if (rec.mass - m0).abs() > 1e-12 * m0 || rec.min_weight < 0.0 {
            problems.push(format!("mass not conserved at t = {} ({} vs {m0})", rec.t, rec.mass));
        }
        let bound = first_moment_bound(moment0, field_sup, lipschitz, rec.t);
        if rec.first_moment > bound * (1.0 + 1e-9) {
            problems.push(format!("first moment {} above its bound {bound} at t = {}", rec.first_moment, rec.t));
        }
        last = rec;
    }
    w.flush()?;
    let mut w = ctx.create("ensemble_final.bin", &mut artifacts)?;
    sim.ensemble.write_binary(&mut w)?;
    w.flush()?;
    let residuals = residual.map(|r| r.residuals()).transpose()?;
    Ok(Outcome {
        artifacts,
        summary: json!({
            "steps": steps,
            "N": n,
            "regularization": sim.kernel().regularization,
            "final": to_json(&last)?,
            "weak_residuals": residuals,
        }),
        violation: (!problems.is_empty()).then(|| problems.join("; ")),
    })
}

fn stability(cfg: &Config, ctx: &Ctx) -> Result<Outcome> {
    let d = dim(cfg)?;
    let n = cfg.usize_or("sim.N", 2000)?;
    let w1_mode = match cfg.str_or("stability.w1", "auto")?.as_str() {
        "exact" => W1Mode::Exact,
        "coupled" => W1Mode::Coupled,
        "auto" if n.saturating_mul(n) <= SIZE_CAP => W1Mode::Exact,
        "auto" => W1Mode::Coupled,
        other => {
            return Err(VpyError::InvalidInput(format!(
                "unknown 'stability.w1' = \"{other}\" (expected auto, exact or coupled)"
            )))
        }
    };
    let base = sim_params(cfg, ctx.exec)?;
    let p = StabilityParams {
        profile: cfg.density("sim.theta", d)?,
        n,
        seed: ctx.seed,
        kappa: cfg.f64_or("sim.kappa", 1.0)?,
        force: base.force,
        corrector: base.corrector,
        regularization: base.regularization,
        dt: cfg.f64_or("dynamics.dt", 0.01)?,
        t_end: cfg.f64_or("dynamics.T", 0.5)?,
        diag_every: cfg.usize_or("sim.diag_every", 5)?,
        perturb: cfg.f64_or("stability.perturb", 1e-3)?,
        theta: cfg.growth("theta")?,
        field_constant: auto_or_f64(cfg, "stability.field_constant")?,
        morrey_pairs: cfg.usize_or("stability.morrey_pairs", 200)?,
        w1_mode,
        refine: cfg.bool_or("stability.refine", true)?,
        exec: ctx.exec,
    };
    let report = stability_experiment(&p)?;
    let mut artifacts = Vec::new();
    let mut w = ctx.create("stability.jsonl", &mut artifacts)?;
    for row in &report.rows {
        write_jsonl(&mut w, row)?;
    }
    w.flush()?;
    let mut w = ctx.create("certificate.csv", &mut artifacts)?;
    report.certificate.write_csv(&mut w)?;
    w.flush()?;
    let violation = (report.violations > 0).then(|| {
        format!(
            "measured W1 exceeds the certificate plus slack {:e} at {} diagnostic time(s)",
            report.slack, report.violations
        )
    });
    Ok(Outcome {
        artifacts,
        summary: json!({
            "w1_mode": w1_mode,
            "w1_initial": report.w1_initial,
            "sup_w1": report.sup_w1,
            "field_constant": report.field_constant,
            "slack": report.slack,
            "refinement_delta": report.refinement_delta,
            "regularization": report.regularization,
            "delta": report.certificate.delta,
            "lipschitz": report.certificate.lipschitz,
            "lipschitz_clamped": report.certificate.lipschitz_clamped,
            "blow_up_at": report.certificate.blow_up_at,
            "violations": report.violations,
        }),
        violation,
    })
}

fn certify(cfg: &Config, ctx: &Ctx) -> Result<Outcome> {
    let d = dim(cfg)?;
    let modulus = Modulus::new(cfg.growth("theta")?, d)?.scaled(cfg.f64_or("certify.field_constant", 1.0)?)?;
    let t_end = cfg.f64_or("dynamics.T", 1.0)?;
    let input = LagrangianInput {
        lipschitz: cfg.f64_or("certify.L", 1.0)?,
        w1_0: cfg.f64_req("certify.w1")?,
        f_gap: cfg.f64_or("certify.f_gap", 0.0)?,
        t_end,
        delta: cfg.f64_opt("certify.delta")?,
    };
    let grid = uniform_grid(t_end, cfg.usize_or("certify.points", 101)?);
    let cert = lagrangian_w1_bound(&input, &modulus, &grid)?;
    let mut artifacts = Vec::new();
    let mut w = ctx.create("certificate.csv", &mut artifacts)?;
    cert.write_csv(&mut w)?;
    w.flush()?;
    Ok(Outcome {
        artifacts,
        summary: json!({
            "delta": cert.delta,
            "lipschitz": cert.lipschitz,
            "lipschitz_clamped": cert.lipschitz_clamped,
            "final_w1_bound": cert.w1_bound.last(),
            "blow_up_at": cert.blow_up_at,
        }),
        violation: None,
    })
}

/// Loads `--config <file>` (if any) and applies the remaining `--key value`
/// overrides.
pub fn config_from_args(args: &[String]) -> Result<Config> {
    let mut rest = Vec::new();
    let mut file: Option<&Path> = None;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let p = it
                .next()
                .ok_or_else(|| VpyError::InvalidInput("missing value for --config".into()))?;
            file = Some(Path::new(p));
        } else {
            rest.push(a.clone());
        }
    }
    let mut cfg = match file {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&rest)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert_eq!("field-check".parse::<Experiment>().unwrap(), Experiment::FieldCheck);
        assert!("nope".parse::<Experiment>().is_err());
    }

    #[test]
    fn exit_codes_by_class() {
        assert_eq!(exit_code(&VpyError::InvalidInput(String::new())), 2);
        assert_eq!(exit_code(&VpyError::Precondition(String::new())), 2);
        assert_eq!(exit_code(&VpyError::Sampler(String::new())), 3);
        assert_eq!(exit_code(&VpyError::SizeCap { size: 1, cap: 0 }), 3);
        assert_eq!(exit_code(&VpyError::PropertyViolation(String::new())), 4);
    }

    #[test]
    fn auto_or_number() {
        let c = Config::from_toml_str("a = \"auto\"\nb = 2.5\nc = \"x\"").unwrap();
        assert_eq!(auto_or_f64(&c, "a").unwrap(), None);
        assert_eq!(auto_or_f64(&c, "b").unwrap(), Some(2.5));
        assert!(auto_or_f64(&c, "c").is_err());
        assert_eq!(auto_or_f64(&c, "missing").unwrap(), None);
    }

    #[test]
    fn shell_points_lie_in_the_shell() {
        let p = shell_points(3, 50, 1.5, 3.0, 7);
        for x in p.chunks(3) {
            let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!((1.5..3.0).contains(&r));
        }
    }
}
