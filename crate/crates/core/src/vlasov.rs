//! Self-consistent particle solver: datum sampling, time stepping, density
//! estimation and run diagnostics.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{drift, ForceLaw};
use crate::error::{invalid, Result, VpyError};
use crate::field::{default_regularization, field_from_particles, KernelSpec, Targets};
use crate::growth::GrowthFunction;
use crate::parallel::{for_each_chunk, pairwise_sum, Exec, PairwiseSum};
use crate::yudovich::{GridDensity, RadialProfile};

/// Weighted atoms in phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub dim: usize,
    /// Flat, `dim` per particle.
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub weights: Vec<f64>,
    pub kappa: f64,
    pub seed: u64,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, positions: Vec<f64>, velocities: Vec<f64>, weights: Vec<f64>, kappa: f64, seed: u64) -> Result<Self> {
        if dim == 0 || dim > 3 {
            return invalid(format!("ensemble dimension must be 1..=3, got {dim}"));
        }
        let n = weights.len();
        if positions.len() != n * dim || velocities.len() != n * dim {
            return invalid("positions, velocities and weights disagree in length");
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return invalid("weights must be positive");
        }
        if positions.iter().chain(&velocities).any(|c| !c.is_finite()) {
            return invalid("particle states must be finite");
        }
        Ok(Self {
            dim,
            positions,
            velocities,
            weights,
            kappa,
            seed,
        })
    }

    /// Equal weights 1/N.
    pub fn equal_weights(dim: usize, positions: Vec<f64>, velocities: Vec<f64>, kappa: f64, seed: u64) -> Result<Self> {
        let n = positions.len() / dim.max(1);
        Self::new(dim, positions, velocities, vec![1.0 / n as f64; n], kappa, seed)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }
    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocities[i * self.dim..(i + 1) * self.dim]
    }

    pub fn total_mass(&self) -> f64 {
        pairwise_sum(&self.weights)
    }

    /// Σ w_i (|x_i| + |v_i|).
    pub fn first_moment(&self) -> f64 {
        let mut s = PairwiseSum::new();
        for i in 0..self.len() {
            s.add(self.weights[i] * (norm(self.position(i)) + norm(self.velocity(i))));
        }
        s.total()
    }

    /// M_p = Σ w_i |v_i|^p.
    pub fn velocity_moment(&self, p: f64) -> f64 {
        let mut s = PairwiseSum::new();
        for i in 0..self.len() {
            s.add(self.weights[i] * norm(self.velocity(i)).powf(p));
        }
        s.total()
    }

    /// Σ w_i v_i.
    pub fn momentum(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|a| {
                let mut s = PairwiseSum::new();
                for i in 0..self.len() {
                    s.add(self.weights[i] * self.velocities[i * self.dim + a]);
                }
                s.total()
            })
            .collect()
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.velocity_moment(2.0)
    }

    /// Header u64 d, u64 N, u64 seed, then positions, velocities and weights
    /// as f64, all little-endian.
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        for h in [self.dim as u64, self.len() as u64, self.seed] {
            w.write_all(&h.to_le_bytes())?;
        }
        for v in self.positions.iter().chain(&self.velocities).chain(&self.weights) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump written by [`write_binary`](Self::write_binary); κ is not stored.
    pub fn read_binary(r: &mut impl Read, kappa: f64) -> Result<Self> {
        let mut b = [0u8; 8];
        let mut word = |r: &mut dyn Read| -> Result<[u8; 8]> {
            r.read_exact(&mut b)?;
            Ok(b)
        };
        let dim = u64::from_le_bytes(word(r)?) as usize;
        let n = u64::from_le_bytes(word(r)?) as usize;
        let seed = u64::from_le_bytes(word(r)?);
        if dim == 0 || dim > 3 || n > 1 << 32 {
            return invalid("corrupt ensemble header");
        }
        let mut read = |count: usize| -> Result<Vec<f64>> {
            (0..count).map(|_| Ok(f64::from_le_bytes(word(r)?))).collect()
        };
        let positions = read(n * dim)?;
        let velocities = read(n * dim)?;
        let weights = read(n)?;
        Self::new(dim, positions, velocities, weights, kappa, seed)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|c| c * c).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Datum sampling

/// Radial cells of the position sampler.
pub const SAMPLER_CELLS: usize = 4096;
/// Width in u = -ln r of the sampled range, divided by d; the mass beyond is
/// about e^{-80} of the total.
const SAMPLER_SPAN: f64 = 80.0;
const MIN_ACCEPTANCE: f64 = 1e-4;

/// Draws x ~ θ/‖θ‖_{L¹} and v uniform in the ball |v| ≤ θ(x)^{1/d}.
#[derive(Debug, Clone)]
pub struct DatumSampler {
    profile: RadialProfile,
    /// Cell edges in u, increasing (r decreasing).
    edges: Vec<f64>,
    cdf: Vec<f64>,
    /// ln of the per-cell majorant of θ(e^{-u}).
    ln_majorant: Vec<f64>,
    mass: f64,
}

impl DatumSampler {
    pub fn new(profile: &RadialProfile) -> Result<Self> {
        let d = profile.dim() as f64;
        let u_lo = profile.support_u();
        let u_hi = u_lo + SAMPLER_SPAN / d;
        if !(u_hi < 700.0) {
            return invalid(format!(
                "profile support radius e^-{u_lo:.3e} is below the representable range"
            ));
        }
        let du = (u_hi - u_lo) / SAMPLER_CELLS as f64;
        let edges: Vec<f64> = (0..=SAMPLER_CELLS).map(|k| u_lo + k as f64 * du).collect();
        let mut masses = Vec::with_capacity(SAMPLER_CELLS);
        let mut ln_majorant = Vec::with_capacity(SAMPLER_CELLS);
        for w in edges.windows(2) {
            masses.push(profile.shell_mass_u(w[0], w[1])?);
            let m = (0..=8)
                .map(|j| profile.ln_value_u(w[0] + (w[1] - w[0]) * j as f64 / 8.0))
                .fold(f64::NEG_INFINITY, f64::max);
            ln_majorant.push(m);
        }
        let mass = pairwise_sum(&masses);
        if !(mass > 0.0 && mass.is_finite()) {
            return invalid("theta has zero (or non-finite) mass");
        }
        let mut cdf = Vec::with_capacity(SAMPLER_CELLS);
        let mut acc = 0.0;
        for m in &masses {
            acc += m;
            cdf.push(acc / mass);
        }
        Ok(Self {
            profile: profile.clone(),
            edges,
            cdf,
            ln_majorant,
            mass,
        })
    }

    /// ‖θ‖_{L¹} as resolved by the sampler cells.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn profile(&self) -> &RadialProfile {
        &self.profile
    }

    /// Draws u = -ln|x| and returns (u, ln θ(e^{-u})).
    fn draw_u(&self, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let d = self.profile.dim() as f64;
        let pick: f64 = rng.gen();
        let k = self.cdf.partition_point(|&c| c < pick).min(SAMPLER_CELLS - 1);
        let (a, b) = (self.edges[k], self.edges[k + 1]);
        let span = -(-d * (b - a)).exp_m1();
        let limit = (1.0 / MIN_ACCEPTANCE) as usize;
        for _ in 0..limit {
            let w: f64 = rng.gen();
            // u has density ∝ e^{-du} on [a, b]
            let u = (a - (-w * span).ln_1p() / d).min(b);
            let ln_theta = self.profile.ln_value_u(u);
            let ratio = (ln_theta - self.ln_majorant[k]).exp();
            if ratio > 1.0 + 1e-12 {
                return Err(VpyError::Sampler(format!(
                    "profile exceeds its cell majorant at r = {:e}; the profile must be non-increasing",
                    (-u).exp()
                )));
            }
            let accept: f64 = rng.gen();
            if accept < ratio {
                return Ok((u, ln_theta));
            }
        }
        Err(VpyError::Sampler(format!(
            "acceptance below {MIN_ACCEPTANCE:e} in radial cell {k}; refine the profile or use a monotone one"
        )))
    }

    /// N equal-weight atoms from f₀ = 1{|v|^d ≤ θ(x)} / (|B_1| ‖θ‖_{L¹}).
    pub fn sample(&self, n: usize, seed: u64, kappa: f64) -> Result<ParticleEnsemble> {
        if n == 0 {
            return invalid("particle count must be positive");
        }
        let d = self.profile.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions = Vec::with_capacity(n * d);
        let mut velocities = Vec::with_capacity(n * d);
        let mut dir = [0.0f64; 3];
        for _ in 0..n {
            let (u, ln_theta) = self.draw_u(&mut rng)?;
            let r = (-u).exp();
            unit_direction(&mut rng, &mut dir[..d]);
            positions.extend(dir[..d].iter().map(|c| r * c));
            let vmax = (ln_theta / d as f64).exp();
            unit_direction(&mut rng, &mut dir[..d]);
            let s: f64 = rng.gen();
            let rv = vmax * s.powf(1.0 / d as f64);
            velocities.extend(dir[..d].iter().map(|c| rv * c));
        }
        ParticleEnsemble::new(d, positions, velocities, vec![1.0 / n as f64; n], kappa, seed)
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    loop {
        for c in out.iter_mut() {
            *c = rng.sample(StandardNormal);
        }
        let r = norm(out);
        if r > 1e-300 {
            out.iter_mut().for_each(|c| *c /= r);
            return;
        }
    }
}

/// Convenience wrapper around [`DatumSampler`].
pub fn sample_initial_datum(profile: &RadialProfile, n: usize, seed: u64, kappa: f64) -> Result<ParticleEnsemble> {
    DatumSampler::new(profile)?.sample(n, seed, kappa)
}

/// Pearson χ² test of the sampled |x| against the radial law r^{d-1}θ(r)
/// on `bins` equal-width bins in u = -ln r; bins with expected count below 5
/// are merged into their neighbour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareReport {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

pub fn radial_marginal_chi2(ensemble: &ParticleEnsemble, profile: &RadialProfile, bins: usize) -> Result<ChiSquareReport> {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    if bins < 2 {
        return invalid("chi-square test needs at least two bins");
    }
    let d = profile.dim() as f64;
    let u_lo = profile.support_u();
    // bins stop where the expected count per bin would fall below one
    let u_hi = u_lo + 30.0 / d;
    let du = (u_hi - u_lo) / bins as f64;
    let mut expected = Vec::with_capacity(bins + 1);
    for k in 0..bins {
        expected.push(profile.shell_mass_u(u_lo + k as f64 * du, u_lo + (k + 1) as f64 * du)?);
    }
    expected.push(profile.shell_mass_u(u_hi, u_hi + 700.0)?);
    let total: f64 = expected.iter().sum();
    let n = ensemble.len() as f64;
    expected.iter_mut().for_each(|e| *e *= n / total);
    let mut observed = vec![0.0; bins + 1];
    for i in 0..ensemble.len() {
        let u = -norm(ensemble.position(i)).ln();
        let k = (((u - u_lo) / du).floor().max(0.0) as usize).min(bins);
        observed[k] += 1.0;
    }
    let mut merged: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (o, e) in observed.iter().zip(&expected) {
        acc.0 += o;
        acc.1 += e;
        if acc.1 >= 5.0 {
            merged.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.1 > 0.0 || acc.0 > 0.0 {
        match merged.last_mut() {
            Some(last) => {
                last.0 += acc.0;
                last.1 += acc.1;
            }
            None => merged.push(acc),
        }
    }
    if merged.len() < 2 {
        return invalid("too few particles for a chi-square test");
    }
    let statistic: f64 = merged.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = merged.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| VpyError::NumericFailure {
        what: format!("chi-square distribution: {e}"),
        estimate: f64::NAN,
    })?;
    Ok(ChiSquareReport {
        statistic,
        dof,
        p_value: 1.0 - dist.cdf(statistic),
    })
}

// ---------------------------------------------------------------------------
// Time stepping

/// Solver knobs.
#[derive(Debug, Clone)]
pub struct SimParams {
    pub force: ForceLaw,
    /// Blob radius; `None` uses 0.3 N^{-1/d}.
    pub regularization: Option<f64>,
    /// Re-evaluate the field at the drifted positions for the second half-kick.
    pub corrector: bool,
    pub exec: Exec,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            force: ForceLaw::classical(),
            regularization: None,
            corrector: true,
            exec: Exec::default(),
        }
    }
}

/// The state of one self-consistent run.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub t: f64,
    pub steps: usize,
    pub ensemble: ParticleEnsemble,
    spec: KernelSpec,
    params: SimParams,
    /// E at the current positions (flat).
    field: Vec<f64>,
    field_sup: f64,
    field_enabled: bool,
}

impl Simulation {
    pub fn new(ensemble: ParticleEnsemble, params: SimParams) -> Result<Self> {
        let reg = params
            .regularization
            .unwrap_or_else(|| default_regularization(ensemble.len(), ensemble.dim));
        let spec = KernelSpec::new(ensemble.dim, ensemble.kappa, reg)?;
        let mut sim = Self {
            t: 0.0,
            steps: 0,
            ensemble,
            spec,
            params,
            field: Vec::new(),
            field_sup: 0.0,
            field_enabled: true,
        };
        sim.field = sim.compute_field()?;
        sim.track_sup();
        Ok(sim)
    }

    /// A run with E ≡ 0 (free streaming), for diagnostics checks.
    pub fn free_streaming(ensemble: ParticleEnsemble, params: SimParams) -> Result<Self> {
        let mut sim = Self::new(ensemble, params)?;
        sim.field_enabled = false;
        sim.field.iter_mut().for_each(|e| *e = 0.0);
        sim.field_sup = 0.0;
        Ok(sim)
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.spec
    }
    pub fn params(&self) -> &SimParams {
        &self.params
    }
    /// E at the current particle positions.
    pub fn field(&self) -> &[f64] {
        &self.field
    }
    /// Largest |E_i| seen so far.
    pub fn field_sup(&self) -> f64 {
        self.field_sup
    }

    fn compute_field(&self) -> Result<Vec<f64>> {
        let e = &self.ensemble;
        if !self.field_enabled {
            return Ok(vec![0.0; e.positions.len()]);
        }
        field_from_particles(&self.spec, &e.positions, &e.weights, Targets::Sources, self.params.exec).map_err(
            |err| match err {
                VpyError::Singularity { detail, .. } => VpyError::Singularity { t: self.t, detail },
                other => other,
            },
        )
    }

    fn track_sup(&mut self) {
        let d = self.ensemble.dim;
        for e in self.field.chunks(d) {
            self.field_sup = self.field_sup.max(norm(e));
        }
    }

    fn kick(&mut self, h: f64) {
        for (v, e) in self.ensemble.velocities.iter_mut().zip(&self.field) {
            *v += h * e;
        }
    }

    /// One kick-drift-kick step of length `dt`.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return invalid(format!("time step must be positive, got {dt}"));
        }
        let d = self.ensemble.dim;
        self.kick(0.5 * dt);
        let t = self.t;
        let force = &self.params.force;
        let velocities = &self.ensemble.velocities;
        for_each_chunk(self.params.exec, &mut self.ensemble.positions, d, |i, x| {
            drift(force, t, dt, x, &velocities[i * d..(i + 1) * d]);
        });
        if self.params.corrector {
            self.field = self.compute_field()?;
            self.kick(0.5 * dt);
        } else {
            self.kick(0.5 * dt);
            self.field = self.compute_field()?;
        }
        self.track_sup();
        self.steps += 1;
        self.t = self.steps as f64 * dt;
        if self
            .ensemble
            .positions
            .iter()
            .chain(&self.ensemble.velocities)
            .any(|c| !c.is_finite())
        {
            return Err(VpyError::NumericFailure {
                what: "particle state left the finite range".into(),
                estimate: self.t,
            });
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            t: self.t,
            positions: self.ensemble.positions.clone(),
            velocities: self.ensemble.velocities.clone(),
            field: self.field.clone(),
        }
    }
}

/// Particle states at one time; weights live in the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub field: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Density estimation

/// Cloud-in-cell deposit on [-half_width, half_width]^d.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub grid: GridDensity,
    /// Mass that landed on the grid.
    pub deposited: f64,
    /// deposited / total mass.
    pub coverage: f64,
}

/// Coverage below which a deposit is rejected.
pub const MIN_COVERAGE: f64 = 0.99;
/// Coverage below which a deposit is flagged.
pub const WARN_COVERAGE: f64 = 0.999;

pub fn deposit_cic(dim: usize, positions: &[f64], weights: &[f64], cells: usize, half_width: f64) -> Result<DensityEstimate> {
    if dim == 0 || dim > 3 || positions.len() != weights.len() * dim {
        return invalid("positions and weights disagree in length");
    }
    if cells == 0 || !(half_width > 0.0) {
        return invalid("grid needs cells >= 1 and a positive half width");
    }
    let h = 2.0 * half_width / cells as f64;
    let mut mass = vec![0.0; cells.pow(dim as u32)];
    let mut deposited = PairwiseSum::new();
    for (i, &w) in weights.iter().enumerate() {
        let x = &positions[i * dim..(i + 1) * dim];
        let mut base = [0i64; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..dim {
            let s = (x[a] + half_width) / h - 0.5;
            let f = s.floor();
            base[a] = f as i64;
            frac[a] = s - f;
        }
        let mut landed = 0.0;
        for corner in 0..(1usize << dim) {
            let mut flat = 0usize;
            let mut share = w;
            let mut inside = true;
            for a in 0..dim {
                let up = (corner >> a) & 1;
                let idx = base[a] + up as i64;
                share *= if up == 1 { frac[a] } else { 1.0 - frac[a] };
                if idx < 0 || idx >= cells as i64 {
                    inside = false;
                    break;
                }
                flat = flat * cells + idx as usize;
            }
            if inside && share > 0.0 {
                mass[flat] += share;
                landed += share;
            }
        }
        deposited.add(landed);
    }
    let vol = h.powi(dim as i32);
    let values = mass.into_iter().map(|m| m / vol).collect();
    let deposited = deposited.total();
    let total = pairwise_sum(weights);
    Ok(DensityEstimate {
        grid: GridDensity::new(dim, cells, half_width, values)?,
        deposited,
        coverage: deposited / total,
    })
}

/// ρ_f of an ensemble by cloud-in-cell deposition; fails below 99% coverage.
pub fn estimate_density(ensemble: &ParticleEnsemble, cells: usize, half_width: f64) -> Result<DensityEstimate> {
    let est = deposit_cic(ensemble.dim, &ensemble.positions, &ensemble.weights, cells, half_width)?;
    if est.coverage < MIN_COVERAGE {
        return Err(VpyError::Precondition(format!(
            "density box of half width {half_width} covers only {:.4} of the mass",
            est.coverage
        )));
    }
    Ok(est)
}

/// Half width of the cube containing every particle, enlarged by `margin`.
pub fn bounding_half_width(ensemble: &ParticleEnsemble, margin: f64) -> f64 {
    let m = ensemble.positions.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    (m * margin).max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// Diagnostics

/// What to record at diagnostic steps.
#[derive(Debug, Clone)]
pub struct DiagnosticsConfig {
    /// Exponents for ρ L^p and L^p_ul norms.
    pub p_set: Vec<f64>,
    /// Exponents for velocity moments M_p.
    pub moment_ps: Vec<f64>,
    pub cells: usize,
    /// Box margin over the t=0 particle extent.
    pub margin: f64,
    /// Growth function for the Yudovich ratio.
    pub theta: Option<GrowthFunction>,
    /// Also compute the (costly) L^p_ul norms.
    pub uniformly_local: bool,
    pub exec: Exec,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            p_set: vec![1.0, 2.0, 4.0],
            moment_ps: vec![1.0, 2.0, 4.0],
            cells: 64,
            margin: 1.2,
            theta: None,
            uniformly_local: true,
            exec: Exec::default(),
        }
    }
}

/// One diagnostics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub step: usize,
    pub t: f64,
    pub mass: f64,
    pub min_weight: f64,
    pub first_moment: f64,
    pub momentum: Vec<f64>,
    pub kinetic_energy: f64,
    pub field_sup: f64,
    /// (p, M_p).
    pub moments: Vec<(f64, f64)>,
    pub grid_half_width: f64,
    pub grid_cells: usize,
    pub coverage: f64,
    pub coverage_warning: bool,
    /// (p, ‖ρ‖_{L^p}).
    pub rho_lp: Vec<(f64, f64)>,
    /// (p, ‖ρ‖_{L^p_ul}).
    pub rho_lp_ul: Vec<(f64, f64)>,
    /// max_p ‖ρ‖_{L^p_ul} / Θ(p), when Θ is configured.
    pub yudovich_ratio: Option<f64>,
}

/// Diagnostics recorder; owns the density box, which only grows.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub config: DiagnosticsConfig,
    half_width: Option<f64>,
}

impl Diagnostics {
    pub fn new(config: DiagnosticsConfig) -> Self {
        Self {
            config,
            half_width: None,
        }
    }

    pub fn record(&mut self, sim: &Simulation) -> Result<DiagnosticsRecord> {
        let e = &sim.ensemble;
        let cfg = &self.config;
        let mut hw = *self
            .half_width
            .get_or_insert_with(|| bounding_half_width(e, cfg.margin));
        let mut est = deposit_cic(e.dim, &e.positions, &e.weights, cfg.cells, hw)?;
        if est.coverage < WARN_COVERAGE {
            hw = bounding_half_width(e, cfg.margin).max(hw);
            est = deposit_cic(e.dim, &e.positions, &e.weights, cfg.cells, hw)?;
            self.half_width = Some(hw);
        }
        let rho_lp = cfg
            .p_set
            .iter()
            .map(|&p| Ok((p, est.grid.lp_norm(p)?)))
            .collect::<Result<Vec<_>>>()?;
        let rho_lp_ul = if cfg.uniformly_local && est.grid.cell_size() <= 0.25 {
            cfg.p_set
                .iter()
                .map(|&p| Ok((p, est.grid.lp_ul_norm(p, cfg.exec)?)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let yudovich_ratio = cfg.theta.as_ref().and_then(|th| {
            rho_lp_ul
                .iter()
                .map(|&(p, v)| (v.ln() - th.ln_eval(p)).exp())
                .reduce(f64::max)
        });
        Ok(DiagnosticsRecord {
            step: sim.steps,
            t: sim.t,
            mass: e.total_mass(),
            min_weight: e.weights.iter().copied().fold(f64::INFINITY, f64::min),
            first_moment: e.first_moment(),
            momentum: e.momentum(),
            kinetic_energy: e.kinetic_energy(),
            field_sup: sim.field_sup(),
            moments: cfg.moment_ps.iter().map(|&p| (p, e.velocity_moment(p))).collect(),
            grid_half_width: hw,
            grid_cells: cfg.cells,
            coverage: est.coverage,
            coverage_warning: est.coverage < WARN_COVERAGE,
            rho_lp,
            rho_lp_ul,
            yudovich_ratio,
        })
    }
}

/// Bound (m₀ + sup|E|/L)·e^{Lt} on the first moment, valid when |F(v)| ≤ L|v|.
pub fn first_moment_bound(initial: f64, field_sup: f64, lipschitz: f64, t: f64) -> f64 {
    let l = lipschitz.max(f64::MIN_POSITIVE);
    (initial + field_sup / l) * (l * t).exp()
}

// ---------------------------------------------------------------------------
// Weak formulation

/// A test function ψ(t, x, v) = χ(t) g(t, x, v) with χ(t) = cos²(πt/2T),
/// which vanishes with its derivative at t = T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TestFunction {
    /// g ≡ 1.
    Constant,
    /// g = exp(-|x - a - tv|² / 2s²), constant along free streaming.
    Transported { center: Vec<f64>, width: f64 },
    /// g = exp(-|x - a|²/2s² - |v - b|²/2σ²).
    Bump {
        x_center: Vec<f64>,
        v_center: Vec<f64>,
        x_width: f64,
        v_width: f64,
    },
}

/// (ψ, ∂_tψ, ∇_xψ, ∇_vψ) at one point.
struct Jet {
    value: f64,
    dt: f64,
    grad_x: [f64; 3],
    grad_v: [f64; 3],
}

impl TestFunction {
    fn check(&self, dim: usize) -> Result<()> {
        let ok = match self {
            TestFunction::Constant => true,
            TestFunction::Transported { center, width } => center.len() == dim && *width > 0.0,
            TestFunction::Bump {
                x_center,
                v_center,
                x_width,
                v_width,
            } => x_center.len() == dim && v_center.len() == dim && *x_width > 0.0 && *v_width > 0.0,
        };
        if ok {
            Ok(())
        } else {
            invalid("test function centers must match the dimension and widths must be positive")
        }
    }

    fn jet(&self, t: f64, t_end: f64, x: &[f64], v: &[f64]) -> Jet {
        let d = x.len();
        let w = std::f64::consts::FRAC_PI_2 / t_end;
        let chi = (w * t).cos().powi(2);
        let chi_dot = -w * (2.0 * w * t).sin();
        let mut jet = Jet {
            value: 0.0,
            dt: 0.0,
            grad_x: [0.0; 3],
            grad_v: [0.0; 3],
        };
        match self {
            TestFunction::Constant => {
                jet.value = chi;
                jet.dt = chi_dot;
            }
            TestFunction::Transported { center, width } => {
                let mut z = [0.0; 3];
                let mut r2 = 0.0;
                for a in 0..d {
                    z[a] = x[a] - center[a] - t * v[a];
                    r2 += z[a] * z[a];
                }
                let s2 = width * width;
                let g = (-0.5 * r2 / s2).exp();
                jet.value = chi * g;
                let mut g_dt = 0.0;
                for a in 0..d {
                    let gx = -z[a] / s2 * g;
                    jet.grad_x[a] = chi * gx;
                    jet.grad_v[a] = -t * chi * gx;
                    g_dt -= v[a] * gx;
                }
                jet.dt = chi_dot * g + chi * g_dt;
            }
            TestFunction::Bump {
                x_center,
                v_center,
                x_width,
                v_width,
            } => {
                let (sx, sv) = (x_width * x_width, v_width * v_width);
                let mut q = 0.0;
                for a in 0..d {
                    q += (x[a] - x_center[a]).powi(2) / sx + (v[a] - v_center[a]).powi(2) / sv;
                }
                let g = (-0.5 * q).exp();
                jet.value = chi * g;
                jet.dt = chi_dot * g;
                for a in 0..d {
                    jet.grad_x[a] = -chi * g * (x[a] - x_center[a]) / sx;
                    jet.grad_v[a] = -chi * g * (v[a] - v_center[a]) / sv;
                }
            }
        }
        jet
    }
}

/// Streams the pairing ∫₀ᵀ Σ_i w_i (∂_tψ + F·∇_xψ + E·∇_vψ) dt + Σ_i w_i ψ(0)
/// over snapshots on a uniform grid, by the trapezoidal rule.
#[derive(Debug, Clone)]
pub struct WeakResidual {
    tests: Vec<TestFunction>,
    force: ForceLaw,
    t_end: f64,
    dt: f64,
    /// Per test function: (time integral, initial pairing).
    acc: Vec<(PairwiseSum, f64)>,
    last_t: Option<f64>,
}

impl WeakResidual {
    pub fn new(tests: Vec<TestFunction>, force: ForceLaw, t_end: f64, dt: f64) -> Result<Self> {
        if !(t_end > 0.0 && dt > 0.0) {
            return invalid("weak residual needs T > 0 and dt > 0");
        }
        let acc = tests.iter().map(|_| (PairwiseSum::new(), 0.0)).collect();
        Ok(Self {
            tests,
            force,
            t_end,
            dt,
            acc,
            last_t: None,
        })
    }

    /// Feeds the snapshot at step k (t = k·dt); call for every step in order.
    pub fn observe(&mut self, weights: &[f64], dim: usize, snap: &Snapshot) -> Result<()> {
        let expected = self.last_t.map_or(0.0, |t| t + self.dt);
        if (snap.t - expected).abs() > 1e-9 * self.dt.max(expected) {
            return invalid(format!("snapshot at t = {} breaks the uniform grid (expected {expected})", snap.t));
        }
        if snap.t > self.t_end * (1.0 + 1e-12) {
            return invalid("snapshot beyond the test-function horizon");
        }
        let first = self.last_t.is_none();
        let last = (snap.t - self.t_end).abs() <= 1e-9 * self.t_end;
        let quad_w = if first || last { 0.5 * self.dt } else { self.dt };
        let mut f = [0.0; 3];
        for (test, (integral, initial)) in self.tests.iter().zip(self.acc.iter_mut()) {
            test.check(dim)?;
            let mut pairing = PairwiseSum::new();
            let mut value = PairwiseSum::new();
            for (i, &w) in weights.iter().enumerate() {
                let x = &snap.positions[i * dim..(i + 1) * dim];
                let v = &snap.velocities[i * dim..(i + 1) * dim];
                let e = &snap.field[i * dim..(i + 1) * dim];
                let jet = test.jet(snap.t, self.t_end, x, v);
                self.force.eval(snap.t, x, v, &mut f[..dim]);
                let mut s = jet.dt;
                for a in 0..dim {
                    s += f[a] * jet.grad_x[a] + e[a] * jet.grad_v[a];
                }
                pairing.add(w * s);
                value.add(w * jet.value);
            }
            integral.add(quad_w * pairing.total());
            if first {
                *initial = value.total();
            }
        }
        self.last_t = Some(snap.t);
        Ok(())
    }

    /// |∫∫(∂_tψ + F·∇_xψ + E·∇_vψ) f + ∫ψ(0) f₀| per test function; requires
    /// the grid to have reached T.
    pub fn residuals(&self) -> Result<Vec<f64>> {
        match self.last_t {
            Some(t) if (t - self.t_end).abs() <= 1e-9 * self.t_end => {}
            _ => return invalid("weak residual needs snapshots up to T"),
        }
        Ok(self.acc.iter().map(|(i, v)| (i.total() + v).abs()).collect())
    }
}

/// Weak-form residuals over stored snapshots (uniform grid from 0 to T).
pub fn weak_residual(
    weights: &[f64],
    dim: usize,
    snapshots: &[Snapshot],
    tests: &[TestFunction],
    force: &ForceLaw,
) -> Result<Vec<f64>> {
    if snapshots.len() < 2 {
        return invalid("weak residual needs at least two snapshots");
    }
    let t_end = snapshots[snapshots.len() - 1].t;
    let dt = snapshots[1].t - snapshots[0].t;
    let mut wr = WeakResidual::new(tests.to_vec(), force.clone(), t_end, dt)?;
    for s in snapshots {
        wr.observe(weights, dim, s)?;
    }
    wr.residuals()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::yudovich::unit_ball_volume;

    fn two_body(kappa: f64, reg: f64) -> Simulation {
        let e = ParticleEnsemble::equal_weights(2, vec![-0.5, 0.0, 0.5, 0.0], vec![0.0; 4], kappa, 0).unwrap();
        Simulation::new(
            e,
            SimParams {
                regularization: Some(reg),
                exec: Exec::Sequential,
                ..SimParams::default()
            },
        )
        .unwrap()
    }

    // r'' = κ r / max(r, reg)^2 for the separation of two half-mass atoms in d = 2
    fn separation_oracle(kappa: f64, reg: f64, t_end: f64) -> f64 {
        let acc = |r: f64| kappa * r / r.max(reg).powi(2);
        let h = 1e-5;
        let (mut r, mut s) = (1.0f64, 0.0f64);
        for _ in 0..(t_end / h).round() as usize {
            let (k1r, k1s) = (s, acc(r));
            let (k2r, k2s) = (s + 0.5 * h * k1s, acc(r + 0.5 * h * k1r));
            let (k3r, k3s) = (s + 0.5 * h * k2s, acc(r + 0.5 * h * k2r));
            let (k4r, k4s) = (s + h * k3s, acc(r + h * k3r));
            r += h / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r);
            s += h / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s);
        }
        r
    }

    #[test]
    fn single_particle_streams_freely() {
        let e = ParticleEnsemble::equal_weights(2, vec![0.1, 0.2], vec![1.0, -1.0], 1.0, 0).unwrap();
        let mut sim = Simulation::new(e, SimParams::default()).unwrap();
        for _ in 0..10 {
            sim.step(0.1).unwrap();
        }
        assert_eq!(sim.field(), &[0.0, 0.0]);
        assert!((sim.ensemble.positions[0] - 1.1).abs() < 1e-14);
        assert!((sim.ensemble.positions[1] + 0.8).abs() < 1e-14);
    }

    #[test]
    fn two_bodies_repel_and_attract() {
        for kappa in [1.0, -1.0] {
            let reg = 0.05;
            let mut sim = two_body(kappa, reg);
            let mut prev = 1.0;
            for _ in 0..10_000 {
                sim.step(1e-4).unwrap();
                let p = &sim.ensemble.positions;
                let sep = p[2] - p[0];
                if kappa > 0.0 {
                    assert!(sep > prev);
                }
                prev = sep;
                assert!((p[0] + p[2]).abs() < 1e-12);
                assert_eq!(p[1], 0.0);
            }
            let oracle = separation_oracle(kappa, reg, 1.0);
            assert!((prev - oracle).abs() < 1e-6, "kappa {kappa}: {prev} vs {oracle}");
        }
    }

    #[test]
    fn momentum_and_mass_are_conserved() {
        let e = sample_initial_datum(&RadialProfile::theta(0, 2).unwrap(), 300, 3, 1.0).unwrap();
        let m0 = e.momentum();
        let mut sim = Simulation::new(e, SimParams::default()).unwrap();
        for k in 1..=20 {
            sim.step(0.01).unwrap();
            let m = sim.ensemble.momentum();
            for a in 0..2 {
                assert!((m[a] - m0[a]).abs() <= 1e-10 * k as f64, "{m:?} vs {m0:?}");
            }
            assert!((sim.ensemble.total_mass() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_respects_velocity_support_and_is_deterministic() {
        let prof = RadialProfile::theta(1, 2).unwrap();
        let a = sample_initial_datum(&prof, 2000, 11, 1.0).unwrap();
        let b = sample_initial_datum(&prof, 2000, 11, 1.0).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            let r = norm(a.position(i));
            assert!(r < prof.support_radius());
            assert!(norm(a.velocity(i)) <= prof.eval(r).sqrt() * (1.0 + 1e-12));
        }
        assert!((a.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_profile_rejected() {
        let f = RadialProfile::custom(std::sync::Arc::new(|_r: f64| 0.0), 1.0, 2).unwrap();
        assert!(matches!(DatumSampler::new(&f), Err(VpyError::InvalidInput(_))));
        assert!(DatumSampler::new(&RadialProfile::theta(3, 2).unwrap()).is_err());
    }

    #[test]
    fn uniform_ball_marginal_passes_chi_square() {
        let prof = RadialProfile::uniform_ball(1.0, 3).unwrap();
        let e = sample_initial_datum(&prof, 20_000, 5, 1.0).unwrap();
        let r = radial_marginal_chi2(&e, &prof, 40).unwrap();
        assert!(r.p_value > 0.01, "{r:?}");
        // velocities are uniform in the unit ball: E|v|^2 = 3/5
        assert!((e.velocity_moment(2.0) - 0.6).abs() < 0.02);
    }

    #[test]
    fn cic_is_mass_conservative() {
        let est = deposit_cic(2, &[0.013, -0.2, 0.5, 0.5], &[0.25, 0.75], 10, 1.0).unwrap();
        assert!((est.grid.mass() - 1.0).abs() < 1e-14);
        assert_eq!(est.coverage, 1.0);
        // a point at a cell center lands in one cell
        let est = deposit_cic(2, &[0.1, 0.1], &[1.0], 10, 1.0).unwrap();
        let nonzero: Vec<_> = est.grid.values().iter().filter(|v| **v > 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert!((nonzero[0] - 25.0).abs() < 1e-9);
        // half of the mass outside
        let est = deposit_cic(2, &[0.0, 0.0, 5.0, 0.0], &[0.5, 0.5], 8, 1.0).unwrap();
        assert_eq!(est.coverage, 0.5);
        let e = ParticleEnsemble::equal_weights(2, vec![0.0, 0.0, 5.0, 0.0], vec![0.0; 4], 1.0, 0).unwrap();
        assert!(matches!(estimate_density(&e, 8, 1.0), Err(VpyError::Precondition(_))));
    }

    #[test]
    fn uniform_ball_density_is_flat() {
        let prof = RadialProfile::uniform_ball(1.0, 2).unwrap();
        let e = sample_initial_datum(&prof, 200_000, 9, 1.0).unwrap();
        let est = estimate_density(&e, 20, 1.2).unwrap();
        let g = &est.grid;
        let h = g.cell_size();
        let level = 1.0 / unit_ball_volume(2);
        let cell_mass = level * g.cell_volume();
        let sigma = (cell_mass * (1.0 - cell_mass) / e.len() as f64).sqrt() / g.cell_volume();
        let mut checked = 0;
        for (k, v) in g.values().iter().enumerate() {
            let (ix, iy) = (k / 20, k % 20);
            let c = [-1.2 + (ix as f64 + 0.5) * h, -1.2 + (iy as f64 + 0.5) * h];
            if norm(&c) < 1.0 - 2.0 * h {
                assert!((v - level).abs() < 4.0 * sigma, "cell {k}: {v} vs {level} ± {sigma}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn diagnostics_on_free_streaming() {
        let prof = RadialProfile::theta(0, 2).unwrap();
        let e = sample_initial_datum(&prof, 500, 1, 1.0).unwrap();
        let mut sim = Simulation::free_streaming(e, SimParams::default()).unwrap();
        let mut diag = Diagnostics::new(DiagnosticsConfig {
            theta: Some(GrowthFunction::iterated_log(0).unwrap()),
            ..DiagnosticsConfig::default()
        });
        let r0 = diag.record(&sim).unwrap();
        for _ in 0..10 {
            sim.step(0.1).unwrap();
        }
        let r1 = diag.record(&sim).unwrap();
        assert_eq!(r0.moments, r1.moments);
        assert_eq!(r1.mass, r0.mass);
        assert!(r1.min_weight > 0.0);
        assert!(r0.yudovich_ratio.unwrap() > 0.0);
        assert!(r1.coverage > 0.999);
        assert!(r1.first_moment <= first_moment_bound(r0.first_moment, 0.0, 1.0, 1.0));
    }

    #[test]
    fn ensemble_binary_round_trip() {
        let e = sample_initial_datum(&RadialProfile::theta(0, 3).unwrap(), 50, 4, -1.0).unwrap();
        let mut buf = Vec::new();
        e.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 8 * 50 * 7);
        assert_eq!(&buf[..8], &3u64.to_le_bytes());
        let back = ParticleEnsemble::read_binary(&mut buf.as_slice(), -1.0).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn weak_residual_constant_and_transported() {
        let prof = RadialProfile::theta(0, 2).unwrap();
        let e = sample_initial_datum(&prof, 200, 2, 1.0).unwrap();
        let tests = vec![
            TestFunction::Constant,
            TestFunction::Transported {
                center: vec![0.1, 0.0],
                width: 0.3,
            },
        ];
        let mut sim = Simulation::free_streaming(e, SimParams::default()).unwrap();
        let w = sim.ensemble.weights.clone();
        let mut wr = WeakResidual::new(tests.clone(), ForceLaw::classical(), 1.0, 0.01).unwrap();
        wr.observe(&w, 2, &sim.snapshot()).unwrap();
        for _ in 0..100 {
            sim.step(0.01).unwrap();
            wr.observe(&w, 2, &sim.snapshot()).unwrap();
        }
        let res = wr.residuals().unwrap();
        // trapezoid error for χ(t) = cos²(πt/2) at h = 0.01
        assert!(res[0] < 1e-4 && res[1] < 1e-4, "{res:?}");
    }
}
