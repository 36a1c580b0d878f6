//! The Riesz kernel K(z) = z/|z|^d, particle fields E = κ K ∗ ρ, closed-form
//! reference fields, and empirical checks of the kernel's mapping
//! properties (oscillation estimate, Morrey-type continuity).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VpyError};
use crate::growth::Modulus;
use crate::parallel::{map_indexed, Exec, PairwiseSum};
use crate::quad::{breakpoints, integrate_breaks, QuadOptions};
use crate::yudovich::{GridDensity, RadialProfile};

/// Kernel dimension, sign and blob radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub dim: usize,
    /// +1 repulsive, -1 attractive.
    pub kappa: f64,
    /// |z| is replaced by max(|z|, regularization) in the denominator.
    pub regularization: f64,
}

/// 0.3 N^{-1/d}, the blob radius used by default in simulations.
pub fn default_regularization(n: usize, dim: usize) -> f64 {
    0.3 * (n.max(1) as f64).powf(-1.0 / dim as f64)
}

impl KernelSpec {
    pub fn new(dim: usize, kappa: f64, regularization: f64) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return invalid(format!("kernel dimension must be 2 or 3, got {dim}"));
        }
        if kappa != 1.0 && kappa != -1.0 {
            return invalid(format!("kappa must be +1 or -1, got {kappa}"));
        }
        if !(regularization >= 0.0 && regularization.is_finite()) {
            return invalid(format!("regularization must be >= 0, got {regularization}"));
        }
        Ok(Self {
            dim,
            kappa,
            regularization,
        })
    }

    /// Exact kernel (no blob).
    pub fn exact(dim: usize, kappa: f64) -> Result<Self> {
        Self::new(dim, kappa, 0.0)
    }

    /// 1/max(|z|, reg)^d, or `None` at an unregularized singularity.
    #[inline]
    fn inv_power(&self, r2: f64) -> Option<f64> {
        let reg2 = self.regularization * self.regularization;
        let q = r2.max(reg2);
        if q == 0.0 {
            return None;
        }
        Some(if self.dim == 2 { 1.0 / q } else { 1.0 / (q * q.sqrt()) })
    }

    /// K(z) (without κ).
    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return invalid(format!("kernel expects a {}-vector", self.dim));
        }
        let r2: f64 = z.iter().map(|c| c * c).sum();
        match self.inv_power(r2) {
            Some(k) => Ok(z.iter().map(|c| c * k).collect()),
            None => Err(VpyError::Singularity {
                t: f64::NAN,
                detail: "kernel evaluated at z = 0 without regularization".into(),
            }),
        }
    }
}

/// Where to evaluate a particle field.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// At the sources themselves, skipping each particle's self-term.
    Sources,
    /// At arbitrary points (flat, `dim` per point).
    Points(&'a [f64]),
}

/// Field values at sampled points, with a note on the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub dim: usize,
    pub points: Vec<f64>,
    pub values: Vec<f64>,
    pub source: String,
}

const BLOCK: usize = 32;

const LANES: usize = 4;

/// Σ_j w_j K(x - x_j) over sources `lo..hi` into four interleaved partial
/// sums. With `CHECK`, returns the offset of a source coinciding with x.
#[inline(always)]
fn lane_sum<const D: usize, const CHECK: bool>(
    reg2: f64,
    positions: &[f64],
    weights: &[f64],
    x: &[f64; D],
    lo: usize,
    hi: usize,
    lanes: &mut [[f64; LANES]; D],
) -> std::result::Result<(), usize> {
    let p = &positions[lo * D..hi * D];
    let w = &weights[lo..hi];
    let m = hi - lo;
    let mut term = |j: usize, l: usize| -> bool {
        let mut z = [0.0f64; D];
        let mut r2 = 0.0;
        for a in 0..D {
            z[a] = x[a] - p[j * D + a];
            r2 += z[a] * z[a];
        }
        let q = if r2 > reg2 { r2 } else { reg2 };
        if CHECK && q == 0.0 {
            return false;
        }
        let k = if D == 2 { w[j] / q } else { w[j] / (q * q.sqrt()) };
        for a in 0..D {
            lanes[a][l] += z[a] * k;
        }
        true
    };
    let full = m / LANES * LANES;
    for c in (0..full).step_by(LANES) {
        for l in 0..LANES {
            if !term(c + l, l) {
                return Err(lo + c + l);
            }
        }
    }
    for j in full..m {
        if !term(j, 0) {
            return Err(lo + j);
        }
    }
    Ok(())
}

/// Kernel sum over one block of sources, skipping `skip`; lanes are combined
/// as (s0+s1)+(s2+s3).
#[inline(always)]
fn block_sum<const D: usize>(
    reg2: f64,
    positions: &[f64],
    weights: &[f64],
    x: &[f64; D],
    lo: usize,
    hi: usize,
    skip: Option<usize>,
    out: &mut [f64; D],
) -> std::result::Result<(), usize> {
    let mut lanes = [[0.0f64; LANES]; D];
    let ranges = match skip {
        Some(s) if (lo..hi).contains(&s) => [(lo, s), (s + 1, hi)],
        _ => [(lo, hi), (hi, hi)],
    };
    for (a, b) in ranges {
        if reg2 > 0.0 {
            lane_sum::<D, false>(reg2, positions, weights, x, a, b, &mut lanes)?;
        } else {
            lane_sum::<D, true>(reg2, positions, weights, x, a, b, &mut lanes)?;
        }
    }
    for a in 0..D {
        let l = &lanes[a];
        out[a] = (l[0] + l[1]) + (l[2] + l[3]);
    }
    Ok(())
}

/// E(x) = κ Σ_j w_j K(x - x_j) at one target: blocks of 32 sources merged in
/// a fixed pairwise order.
fn field_at<const D: usize>(
    spec: &KernelSpec,
    positions: &[f64],
    weights: &[f64],
    x: &[f64],
    skip: Option<usize>,
    out: &mut [f64],
) -> std::result::Result<(), usize> {
    let n = weights.len();
    let reg2 = spec.regularization * spec.regularization;
    let mut xt = [0.0f64; D];
    xt.copy_from_slice(&x[..D]);
    let mut acc: [PairwiseSum; D] = std::array::from_fn(|_| PairwiseSum::new());
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        let mut block = [0.0f64; D];
        block_sum::<D>(reg2, positions, weights, &xt, start, end, skip, &mut block)?;
        for a in 0..D {
            acc[a].add(block[a]);
        }
        start = end;
    }
    for a in 0..D {
        out[a] = spec.kappa * acc[a].total();
    }
    Ok(())
}

/// Field of weighted point sources (flat `positions`, `dim` per particle).
/// Results are bitwise independent of `exec`.
pub fn field_from_particles(
    spec: &KernelSpec,
    positions: &[f64],
    weights: &[f64],
    targets: Targets<'_>,
    exec: Exec,
) -> Result<Vec<f64>> {
    let d = spec.dim;
    if positions.len() != weights.len() * d {
        return invalid("positions and weights disagree in length");
    }
    let (pts, self_targets) = match targets {
        Targets::Sources => (positions, true),
        Targets::Points(p) => {
            if p.len() % d != 0 {
                return invalid("target list length is not a multiple of the dimension");
            }
            (p, false)
        }
    };
    let m = pts.len() / d;
    let results = map_indexed(exec, m, |i| {
        let mut out = [0.0f64; 3];
        let skip = if self_targets { Some(i) } else { None };
        let x = &pts[i * d..i * d + d];
        let r = if d == 2 {
            field_at::<2>(spec, positions, weights, x, skip, &mut out)
        } else {
            field_at::<3>(spec, positions, weights, x, skip, &mut out)
        };
        r
            .map(|_| out)
            .map_err(|j| (i, j))
    });
    let mut values = Vec::with_capacity(m * d);
    for r in results {
        match r {
            Ok(v) => values.extend_from_slice(&v[..d]),
            Err((i, j)) => {
                return Err(VpyError::Singularity {
                    t: f64::NAN,
                    detail: format!("target {i} coincides with source {j}"),
                })
            }
        }
    }
    Ok(values)
}

/// Field of a uniform ball of radius R centered at 0 with the given mass:
/// κ·mass·x/R^d inside, κ·mass·x/|x|^d outside.
pub fn field_uniform_ball(spec: &KernelSpec, radius: f64, mass: f64, x: &[f64]) -> Vec<f64> {
    let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
    let denom = r.max(radius).powi(spec.dim as i32);
    x.iter().map(|c| spec.kappa * mass * c / denom).collect()
}

/// Worst ratio found by [`oscillation_bound_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationReport {
    pub dim: usize,
    pub trials: usize,
    pub max_ratio: f64,
    pub worst: [Vec<f64>; 3],
}

/// |K(x-z) - K(y-z)| / ((|x-z|^{-1}|y-z|^{1-d} + |y-z|^{-1}|x-z|^{1-d}) |x-y|).
pub fn oscillation_ratio(dim: usize, x: &[f64], y: &[f64], z: &[f64]) -> f64 {
    let sub = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p - q).collect() };
    let norm = |v: &[f64]| v.iter().map(|c| c * c).sum::<f64>().sqrt();
    let k = |v: &[f64]| -> Vec<f64> {
        let r = norm(v);
        v.iter().map(|c| c / r.powi(dim as i32)).collect()
    };
    let xz = sub(x, z);
    let yz = sub(y, z);
    let gap = norm(&sub(x, y));
    if gap == 0.0 {
        return 0.0;
    }
    let num = norm(&sub(&k(&xz), &k(&yz)));
    let (a, b) = (norm(&xz), norm(&yz));
    let e = (dim - 1) as i32;
    let den = (1.0 / (a * b.powi(e)) + 1.0 / (b * a.powi(e))) * gap;
    num / den
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|c: &f64| c * c).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|c| c / n).collect();
        }
    }
}

/// Samples random triples and reports the largest oscillation ratio. Half
/// the trials are uniform in a cube, half are targeted at |x-z| ≪ |y-z|.
pub fn oscillation_bound_check(dim: usize, trials: usize, seed: u64, exec: Exec) -> Result<OscillationReport> {
    if trials == 0 {
        return invalid("oscillation check needs at least one trial");
    }
    if dim != 2 && dim != 3 {
        return invalid(format!("dimension must be 2 or 3, got {dim}"));
    }
    const CHUNK: usize = 4096;
    let chunks = trials.div_ceil(CHUNK);
    let per_chunk = map_indexed(exec, chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let n = CHUNK.min(trials - c * CHUNK);
        let mut best = (0.0f64, [vec![], vec![], vec![]]);
        for t in 0..n {
            let (x, y, z) = if t % 2 == 0 {
                let mut pt = || -> Vec<f64> { (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect() };
                (pt(), pt(), pt())
            } else {
                let z = vec![0.0; dim];
                let near = 10f64.powf(-rng.gen_range(0.0..6.0));
                let far = rng.gen_range(0.5..2.0);
                let x: Vec<f64> = random_unit(&mut rng, dim).into_iter().map(|c| c * near).collect();
                let y: Vec<f64> = random_unit(&mut rng, dim).into_iter().map(|c| c * far).collect();
                (x, y, z)
            };
            let r = oscillation_ratio(dim, &x, &y, &z);
            if r.is_finite() && r > best.0 {
                best = (r, [x, y, z]);
            }
        }
        best
    });
    let (max_ratio, worst) = per_chunk
        .into_iter()
        .fold((0.0, [vec![], vec![], vec![]]), |a, b| if b.0 > a.0 { b } else { a });
    Ok(OscillationReport {
        dim,
        trials,
        max_ratio,
        worst,
    })
}

// ---------------------------------------------------------------------------
// Morrey-type continuity

/// A spatial density that can be integrated along rays.
pub trait SpatialDensity: Sync {
    fn dim(&self) -> usize;
    fn value(&self, z: &[f64]) -> f64;
    /// Ray parameters s > 0 on x + sω where the density is not smooth
    /// (pushed to `out`); returns the parameter beyond which it vanishes.
    fn ray_features(&self, x: &[f64], omega: &[f64], out: &mut Vec<f64>) -> f64;
    /// Points where the density is singular (angular break points).
    fn singular_points(&self) -> Vec<Vec<f64>>;
    /// A ball outside of which the density vanishes, if it has a sharp edge.
    fn support_ball(&self) -> Option<(Vec<f64>, f64)> {
        None
    }
}

impl SpatialDensity for RadialProfile {
    fn dim(&self) -> usize {
        RadialProfile::dim(self)
    }
    fn value(&self, z: &[f64]) -> f64 {
        let r = z.iter().map(|c| c * c).sum::<f64>().sqrt();
        self.eval(r)
    }
    fn ray_features(&self, x: &[f64], omega: &[f64], out: &mut Vec<f64>) -> f64 {
        let b: f64 = x.iter().zip(omega).map(|(p, q)| p * q).sum();
        let c: f64 = x.iter().map(|p| p * p).sum();
        if -b > 0.0 {
            out.push(-b);
        }
        let radius = self.support_radius();
        let disc = b * b - (c - radius * radius);
        if disc <= 0.0 {
            return 0.0;
        }
        let root = disc.sqrt();
        let (s0, s1) = (-b - root, -b + root);
        if s0 > 0.0 {
            out.push(s0);
        }
        s1.max(0.0)
    }
    fn singular_points(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; RadialProfile::dim(self)]]
    }
    fn support_ball(&self) -> Option<(Vec<f64>, f64)> {
        Some((vec![0.0; RadialProfile::dim(self)], self.support_radius()))
    }
}

impl SpatialDensity for GridDensity {
    fn dim(&self) -> usize {
        GridDensity::dim(self)
    }
    fn value(&self, z: &[f64]) -> f64 {
        let h = self.cell_size();
        let l = self.half_width();
        let c = self.cells();
        let mut flat = 0usize;
        for &za in z {
            let k = ((za + l) / h).floor();
            if !(k >= 0.0 && (k as usize) < c) {
                return 0.0;
            }
            flat = flat * c + k as usize;
        }
        self.values()[flat]
    }
    fn ray_features(&self, x: &[f64], omega: &[f64], out: &mut Vec<f64>) -> f64 {
        let h = self.cell_size();
        let l = self.half_width();
        let mut s_exit = f64::INFINITY;
        let mut s_enter = 0.0f64;
        for (a, (&xa, &oa)) in x.iter().zip(omega).enumerate() {
            let _ = a;
            if oa.abs() < 1e-300 {
                if xa.abs() >= l {
                    return 0.0;
                }
                continue;
            }
            let t0 = (-l - xa) / oa;
            let t1 = (l - xa) / oa;
            s_enter = s_enter.max(t0.min(t1));
            s_exit = s_exit.min(t0.max(t1));
        }
        if !(s_exit > s_enter) {
            return 0.0;
        }
        for (&xa, &oa) in x.iter().zip(omega) {
            if oa.abs() < 1e-300 {
                continue;
            }
            let za = xa + s_enter * oa;
            let zb = xa + s_exit * oa;
            let (lo, hi) = if za < zb { (za, zb) } else { (zb, za) };
            let k0 = ((lo + l) / h).ceil() as i64;
            let k1 = ((hi + l) / h).floor() as i64;
            for k in k0..=k1 {
                let plane = -l + k as f64 * h;
                let s = (plane - xa) / oa;
                if s > 0.0 {
                    out.push(s);
                }
            }
        }
        s_exit
    }
    fn singular_points(&self) -> Vec<Vec<f64>> {
        Vec::new()
    }
}

/// A density multiplied by a constant.
pub struct Scaled<'a, D: SpatialDensity + ?Sized> {
    pub factor: f64,
    pub inner: &'a D,
}

impl<D: SpatialDensity + ?Sized> SpatialDensity for Scaled<'_, D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, z: &[f64]) -> f64 {
        self.factor * self.inner.value(z)
    }
    fn ray_features(&self, x: &[f64], omega: &[f64], out: &mut Vec<f64>) -> f64 {
        self.inner.ray_features(x, omega, out)
    }
    fn singular_points(&self) -> Vec<Vec<f64>> {
        self.inner.singular_points()
    }
    fn support_ball(&self) -> Option<(Vec<f64>, f64)> {
        self.inner.support_ball()
    }
}

/// Knobs of the Morrey check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorreyOptions {
    pub pairs: usize,
    pub seed: u64,
    /// Gaps |x-y| are log-uniform in [min_gap, max_gap].
    pub min_gap: f64,
    pub max_gap: f64,
    /// x is uniform in the ball of this radius.
    pub sample_radius: f64,
    /// Relative tolerance of every quadrature.
    pub rel_tol: f64,
    /// How many of the sampled x also get a field evaluation.
    pub field_points: usize,
}

impl Default for MorreyOptions {
    fn default() -> Self {
        Self {
            pairs: 1000,
            seed: 1,
            min_gap: 1e-8,
            max_gap: 1e-1,
            sample_radius: 0.5,
            rel_tol: 1e-6,
            field_points: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorreyPair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub gap: f64,
    pub integral: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorreyReport {
    pub pairs: Vec<MorreyPair>,
    /// sup I(x,y)/φ_Θ(|x-y|).
    pub sup_ratio: f64,
    /// sup |K ∗ ρ| over the origin and the first `field_points` sampled x.
    pub sup_field: f64,
    pub rel_tol: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// An orthonormal frame (e, e1[, e2]) with e first.
fn frame(e: &[f64]) -> Vec<Vec<f64>> {
    let d = e.len();
    let mut basis = vec![e.to_vec()];
    for a in 0..d {
        let mut v = vec![0.0; d];
        v[a] = 1.0;
        for b in &basis {
            let p = dot(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= p * bi;
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|c| c / n).collect());
        }
        if basis.len() == d {
            break;
        }
    }
    basis
}

fn integrate_fallible(f: impl Fn(f64) -> Result<f64>, breaks: &[f64], rel: f64, abs: f64) -> Result<f64> {
    let mut failure = None;
    let g = |x: f64| match f(x) {
        Ok(v) => v,
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    };
    let opts = QuadOptions {
        abs_tol: abs,
        ..QuadOptions::rel(rel).with_max(4000)
    };
    let r = integrate_breaks(g, breaks, opts);
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(r?.value)
}

/// Integrates `g(ω)` over the unit sphere, with ω written in the frame of
/// `axis`; `axis_breaks` are polar angles where g has kinks.
fn sphere_integral(
    dim: usize,
    axis: &[f64],
    polar_breaks: &[f64],
    azimuth_breaks: &[f64],
    rel: f64,
    abs: f64,
    g: &dyn Fn(&[f64]) -> Result<f64>,
) -> Result<f64> {
    let fr = frame(axis);
    if dim == 2 {
        let br = breakpoints(-std::f64::consts::PI, std::f64::consts::PI, polar_breaks.iter().copied());
        integrate_fallible(
            |t| {
                let (s, c) = t.sin_cos();
                let w = [c * fr[0][0] + s * fr[1][0], c * fr[0][1] + s * fr[1][1]];
                g(&w)
            },
            &br,
            rel,
            abs,
        )
    } else {
        let br = breakpoints(0.0, std::f64::consts::PI, polar_breaks.iter().copied());
        let abr = breakpoints(-std::f64::consts::PI, std::f64::consts::PI, azimuth_breaks.iter().copied());
        integrate_fallible(
            |t| {
                let (st, ct) = t.sin_cos();
                if st == 0.0 {
                    return Ok(0.0);
                }
                let inner = integrate_fallible(
                    |p| {
                        let (sp, cp) = p.sin_cos();
                        let mut w = [0.0; 3];
                        for a in 0..3 {
                            w[a] = ct * fr[0][a] + st * (cp * fr[1][a] + sp * fr[2][a]);
                        }
                        g(&w)
                    },
                    &abr,
                    rel * 0.5,
                    abs * 0.5,
                )?;
                Ok(st * inner)
            },
            &br,
            rel,
            abs,
        )
    }
}

/// Polar/azimuthal angles of the direction from `x` to `p` in the frame of `axis`.
fn angles_to(x: &[f64], p: &[f64], axis: &[f64]) -> Option<(f64, f64)> {
    let v: Vec<f64> = p.iter().zip(x).map(|(a, b)| a - b).collect();
    let n = dot(&v, &v).sqrt();
    if n == 0.0 {
        return None;
    }
    let fr = frame(axis);
    let c: Vec<f64> = fr.iter().map(|b| dot(&v, b) / n).collect();
    if c.len() == 2 {
        Some((c[1].atan2(c[0]), 0.0))
    } else {
        Some((c[0].clamp(-1.0, 1.0).acos(), c[2].atan2(c[1])))
    }
}

/// Angular break points seen from `x` in the frame of `axis`: directions to
/// singular points and, where the frame allows, tangents to the support ball.
fn angular_breaks(rho: &dyn SpatialDensity, x: &[f64], axis: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut polar = Vec::new();
    let mut azimuth = Vec::new();
    for p in rho.singular_points() {
        if let Some((t, a)) = angles_to(x, &p, axis) {
            polar.push(t);
            azimuth.push(a);
        }
    }
    if let Some((c, radius)) = rho.support_ball() {
        let v: Vec<f64> = c.iter().zip(x).map(|(a, b)| a - b).collect();
        let dist = dot(&v, &v).sqrt();
        if dist > radius {
            let half = (radius / dist).asin();
            if let Some((t, _)) = angles_to(x, &c, axis) {
                if x.len() == 2 {
                    let wrap = |a: f64| (a + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
                    polar.push(wrap(t + half));
                    polar.push(wrap(t - half));
                } else if t < 1e-12 {
                    polar.push(half);
                }
            }
        }
    }
    (polar, azimuth)
}

/// ∫_{H_x} |K(x-z) - K(y-z)| ρ(z) dz over the half-space closer to x,
/// in polar coordinates around x.
fn half_space_integral(rho: &dyn SpatialDensity, x: &[f64], y: &[f64], rel: f64) -> Result<f64> {
    let d = x.len();
    let diff: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
    let eps = dot(&diff, &diff).sqrt();
    let e: Vec<f64> = diff.iter().map(|c| c / eps).collect();
    let radial = |w: &[f64]| -> Result<f64> {
        let cos = dot(w, &e);
        let s_max = if cos > 0.0 { eps / (2.0 * cos) } else { f64::INFINITY };
        let mut feats = Vec::new();
        let s_end = rho.ray_features(x, w, &mut feats).min(s_max);
        if !(s_end > 0.0) {
            return Ok(0.0);
        }
        let f = |s: f64| -> f64 {
            let mut z = [0.0; 3];
            let mut q = [0.0; 3];
            let mut q2 = 0.0;
            for a in 0..d {
                z[a] = x[a] + s * w[a];
                q[a] = eps * e[a] - s * w[a];
                q2 += q[a] * q[a];
            }
            let rv = rho.value(&z[..d]);
            if rv == 0.0 {
                return 0.0;
            }
            // s^{d-1} K(q), bounded near s = 0
            let scale = if d == 2 { s / q2 } else { s * s / (q2 * q2.sqrt()) };
            let mut m2 = 0.0;
            for a in 0..d {
                let c = w[a] + scale * q[a];
                m2 += c * c;
            }
            m2.sqrt() * rv
        };
        let near_end = eps.min(s_end);
        let near = breakpoints(0.0, near_end, feats.iter().copied());
        let mut total = integrate_breaks(f, &near, QuadOptions::rel(rel * 0.1).with_max(4000))?.value;
        if s_end > eps {
            let far = breakpoints(eps.ln(), s_end.ln(), feats.iter().filter(|&&s| s > 0.0).map(|s| s.ln()));
            total += integrate_breaks(
                |t: f64| {
                    let s = t.exp();
                    f(s) * s
                },
                &far,
                QuadOptions::rel(rel * 0.1).with_max(4000),
            )?
            .value;
        }
        Ok(total)
    };
    let (mut polar, azimuth) = angular_breaks(rho, x, &e);
    polar.extend([std::f64::consts::FRAC_PI_2, -std::f64::consts::FRAC_PI_2]);
    sphere_integral(d, &e, &polar, &azimuth, rel, 0.0, &radial)
}

/// I(x,y) = ∫ |K(x-z) - K(y-z)| ρ(z) dz.
pub fn morrey_integral(rho: &dyn SpatialDensity, x: &[f64], y: &[f64], rel_tol: f64) -> Result<f64> {
    if x.len() != rho.dim() || y.len() != rho.dim() {
        return invalid("point dimension does not match the density");
    }
    if x == y {
        return Ok(0.0);
    }
    Ok(half_space_integral(rho, x, y, rel_tol)? + half_space_integral(rho, y, x, rel_tol)?)
}

/// |K ∗ ρ|(x) = |∫ ω (∫ ρ(x + sω) ds) dω| (κ does not affect the modulus).
pub fn field_magnitude(rho: &dyn SpatialDensity, x: &[f64], rel_tol: f64) -> Result<f64> {
    let d = x.len();
    let mut axis = vec![0.0; d];
    axis[0] = 1.0;
    if let Some((c, _)) = rho.support_ball() {
        let v: Vec<f64> = c.iter().zip(x).map(|(a, b)| a - b).collect();
        let n = dot(&v, &v).sqrt();
        if n > 0.0 {
            axis = v.into_iter().map(|a| a / n).collect();
        }
    }
    let line = |w: &[f64]| -> Result<f64> {
        let mut feats = Vec::new();
        let s_end = rho.ray_features(x, w, &mut feats);
        if !(s_end > 0.0) {
            return Ok(0.0);
        }
        let br = breakpoints(0.0, s_end, feats.iter().copied());
        let f = |s: f64| {
            let mut z = [0.0; 3];
            for a in 0..d {
                z[a] = x[a] + s * w[a];
            }
            rho.value(&z[..d])
        };
        Ok(integrate_breaks(f, &br, QuadOptions::rel(rel_tol * 0.1).with_max(4000))?.value)
    };
    let (polar, azimuth) = angular_breaks(rho, x, &axis);
    // components can cancel to zero, so they get an absolute floor
    let total = sphere_integral(d, &axis, &polar, &azimuth, rel_tol, 0.0, &line)?;
    let mut comps = Vec::with_capacity(d);
    for a in 0..d {
        let g = |w: &[f64]| -> Result<f64> { Ok(w[a] * line(w)?) };
        comps.push(sphere_integral(d, &axis, &polar, &azimuth, rel_tol, rel_tol * total, &g)?);
    }
    Ok(comps.iter().map(|c| c * c).sum::<f64>().sqrt())
}

fn sample_pairs(dim: usize, opts: &MorreyOptions) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.pairs)
        .map(|_| {
            let dir = random_unit(&mut rng, dim);
            let r = opts.sample_radius * rng.gen::<f64>().powf(1.0 / dim as f64);
            let x: Vec<f64> = dir.iter().map(|c| c * r).collect();
            let lg = rng.gen_range(opts.min_gap.ln()..=opts.max_gap.ln());
            let step = random_unit(&mut rng, dim);
            let y: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + lg.exp() * b).collect();
            (x, y)
        })
        .collect()
}

/// Samples pairs (x, y) and reports sup I(x,y)/φ_Θ(|x-y|) together with
/// sup |K ∗ ρ|.
pub fn morrey_continuity_check(
    rho: &dyn SpatialDensity,
    modulus: &Modulus,
    opts: &MorreyOptions,
    exec: Exec,
) -> Result<MorreyReport> {
    let d = rho.dim();
    if modulus.dim() != d {
        return invalid("modulus and density dimensions differ");
    }
    if !(opts.min_gap > 0.0 && opts.max_gap >= opts.min_gap) {
        return invalid("gap range must satisfy 0 < min_gap <= max_gap");
    }
    let samples = sample_pairs(d, opts);
    let evaluated = map_indexed(exec, samples.len(), |i| {
        let (x, y) = &samples[i];
        morrey_integral(rho, x, y, opts.rel_tol).map(|v| {
            let gap = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            MorreyPair {
                x: x.clone(),
                y: y.clone(),
                gap,
                integral: v,
                ratio: v / modulus.phi(gap),
            }
        })
    });
    let pairs = evaluated.into_iter().collect::<Result<Vec<_>>>()?;
    let sup_ratio = pairs.iter().map(|p| p.ratio).fold(0.0, f64::max);
    let mut field_pts: Vec<Vec<f64>> = vec![vec![0.0; d]];
    field_pts.extend(samples.iter().take(opts.field_points).map(|(x, _)| x.clone()));
    let fields = map_indexed(exec, field_pts.len(), |i| field_magnitude(rho, &field_pts[i], opts.rel_tol));
    let sup_field = fields.into_iter().collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
    Ok(MorreyReport {
        pairs,
        sup_ratio,
        sup_field,
        rel_tol: opts.rel_tol,
    })
}

/// Log-log slopes of I(0, ε e₁) and φ_Θ(ε) between consecutive gaps.
pub fn morrey_slopes(
    rho: &dyn SpatialDensity,
    modulus: &Modulus,
    gaps: &[f64],
    rel_tol: f64,
) -> Result<Vec<(f64, f64, f64)>> {
    let d = rho.dim();
    let x = vec![0.0; d];
    let vals = gaps
        .iter()
        .map(|&g| {
            let mut y = vec![0.0; d];
            y[0] = g;
            morrey_integral(rho, &x, &y, rel_tol)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(gaps
        .windows(2)
        .zip(vals.windows(2))
        .map(|(g, v)| {
            let dl = g[1].ln() - g[0].ln();
            let si = (v[1].ln() - v[0].ln()) / dl;
            let sp = (modulus.phi(g[1]).ln() - modulus.phi(g[0]).ln()) / dl;
            (g[1], si, sp)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::growth::GrowthFunction;

    #[test]
    fn kernel_examples() {
        let k2 = KernelSpec::exact(2, 1.0).unwrap();
        assert_eq!(k2.eval(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let k3 = KernelSpec::exact(3, 1.0).unwrap();
        assert_eq!(k3.eval(&[0.0, 0.0, 2.0]).unwrap(), vec![0.0, 0.0, 0.25]);
        assert!(matches!(k3.eval(&[0.0; 3]), Err(VpyError::Singularity { .. })));
        let reg = KernelSpec::new(2, 1.0, 0.5).unwrap();
        assert_eq!(reg.eval(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(reg.eval(&[0.1, 0.0]).unwrap(), vec![0.1 / 0.25, 0.0]);
    }

    #[test]
    fn single_and_mirror_particles() {
        let k3 = KernelSpec::exact(3, 1.0).unwrap();
        let e = field_from_particles(&k3, &[0.0; 3], &[1.0], Targets::Points(&[0.0, 0.0, 2.0]), Exec::Sequential)
            .unwrap();
        assert_eq!(e, vec![0.0, 0.0, 0.25]);
        let k2 = KernelSpec::exact(2, 1.0).unwrap();
        let e = field_from_particles(
            &k2,
            &[1.0, 0.0, -1.0, 0.0],
            &[0.5, 0.5],
            Targets::Points(&[0.0, 0.0]),
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(e, vec![0.0, 0.0]);
    }

    #[test]
    fn self_term_is_skipped_and_collisions_reported() {
        let k2 = KernelSpec::exact(2, 1.0).unwrap();
        let e = field_from_particles(&k2, &[0.3, 0.4], &[1.0], Targets::Sources, Exec::Sequential).unwrap();
        assert_eq!(e, vec![0.0, 0.0]);
        let r = field_from_particles(&k2, &[0.0, 0.0, 0.0, 0.0], &[0.5, 0.5], Targets::Sources, Exec::Sequential);
        assert!(matches!(r, Err(VpyError::Singularity { .. })));
    }

    #[test]
    fn ball_field_matches_gauss_law_quadrature() {
        // the closed-form constants, checked against polar quadrature of K ∗ 1_B
        for d in [2usize, 3] {
            let spec = KernelSpec::exact(d, 1.0).unwrap();
            let ball = RadialProfile::uniform_ball(1.0, d).unwrap();
            let mass = ball.mass().unwrap();
            for r in [0.3, 0.8, 2.0] {
                let mut x = vec![0.0; d];
                x[0] = r;
                let want = field_uniform_ball(&spec, 1.0, mass, &x);
                let got = field_magnitude(&ball, &x, 1e-8).unwrap();
                assert!((got - want[0]).abs() < 1e-6 * want[0], "d={d} r={r}: {got} vs {want:?}");
            }
        }
        let spec = KernelSpec::exact(3, 1.0).unwrap();
        assert_eq!(field_uniform_ball(&spec, 1.0, 1.0, &[0.0, 0.0, 2.0]), vec![0.0, 0.0, 0.25]);
        assert_eq!(field_uniform_ball(&spec, 1.0, 1.0, &[0.0; 3]), vec![0.0; 3]);
    }

    #[test]
    fn oscillation_ratio_zero_when_points_coincide() {
        assert_eq!(oscillation_ratio(2, &[1.0, 0.0], &[1.0, 0.0], &[0.0, 0.0]), 0.0);
        let rep = oscillation_bound_check(2, 10_000, 3, Exec::Parallel).unwrap();
        assert!(rep.max_ratio < 10.0 && rep.max_ratio > 0.0);
        let seq = oscillation_bound_check(2, 10_000, 3, Exec::Sequential).unwrap();
        assert_eq!(seq, rep);
    }

    #[test]
    fn morrey_integral_scales_linearly() {
        let rho = RadialProfile::theta(0, 2).unwrap();
        let twice = Scaled {
            factor: 2.0,
            inner: &rho,
        };
        let x = [0.05, -0.02];
        let y = [0.05 + 1e-4, -0.02];
        let a = morrey_integral(&rho, &x, &y, 1e-6).unwrap();
        let b = morrey_integral(&twice, &x, &y, 1e-6).unwrap();
        assert_eq!(2.0 * a, b);
    }

    #[test]
    fn morrey_integral_matches_brute_force_for_a_ball() {
        // cross-check against a fine midpoint sum away from the singular points
        let rho = RadialProfile::uniform_ball(1.0, 2).unwrap();
        let x = [0.2, 0.1];
        let y = [0.45, 0.1];
        let got = morrey_integral(&rho, &x, &y, 1e-8).unwrap();
        let n = 2000;
        let h = 2.0 / n as f64;
        let mut s = PairwiseSum::new();
        for i in 0..n {
            for j in 0..n {
                let z = [-1.0 + (i as f64 + 0.5) * h, -1.0 + (j as f64 + 0.5) * h];
                if z[0] * z[0] + z[1] * z[1] > 1.0 {
                    continue;
                }
                let k = |p: &[f64; 2]| {
                    let v = [p[0] - z[0], p[1] - z[1]];
                    let r2 = v[0] * v[0] + v[1] * v[1];
                    [v[0] / r2, v[1] / r2]
                };
                let (a, b) = (k(&x), k(&y));
                s.add(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() * h * h);
            }
        }
        assert!((got - s.total()).abs() < 0.02 * got, "{got} vs {}", s.total());
    }

    #[test]
    fn morrey_slope_tracks_modulus_for_theta1() {
        let rho = RadialProfile::theta(1, 2).unwrap();
        let m = Modulus::new(GrowthFunction::iterated_log(1).unwrap(), 2).unwrap();
        let gaps = [1e-6, 1e-7, 1e-8];
        for (g, si, sp) in morrey_slopes(&rho, &m, &gaps, 1e-7).unwrap() {
            assert!((si - sp).abs() <= 0.05 * sp.abs(), "gap {g}: {si} vs {sp}");
        }
    }
}
