//! L^p, uniformly-localized L^p and Yudovich norms of spatial densities,
//! iterated-logarithm profiles ℓ_m and saturating densities θ_m.
//!
//! Radial norms are computed in u = -ln r, where ∫ θ(|x|)^p dx becomes
//! |S^{d-1}| ∫ exp(p ln θ(e^{-u}) - d u) du. The exponent is shifted by its
//! maximum before integration, so norms stay finite for p in the thousands.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Result, VpyError};
use crate::fragment;
use crate::growth::{exp_tower, iterated_log, GrowthFunction};
use crate::parallel::{map_indexed, Exec, PairwiseSum};
use crate::quad::{breakpoints, integrate_breaks, QuadOptions};

/// ln |S^{d-1}|.
pub fn ln_sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    std::f64::consts::LN_2 + h * std::f64::consts::PI.ln() - ln_gamma(h)
}

/// |B_1| in R^d.
pub fn unit_ball_volume(d: usize) -> f64 {
    (ln_sphere_area(d)).exp() / d as f64
}

/// ε_k = e^{-exp_{k-1}(1)}, the support radius of ℓ_k (0 once it underflows).
pub fn ell_cutoff(k: u32) -> f64 {
    (-ell_cutoff_u(k)).exp()
}

/// -ln ε_k = exp_{k-1}(1).
pub fn ell_cutoff_u(k: u32) -> f64 {
    exp_tower(k.saturating_sub(1))
}

fn nested_ln(depth: u32, u: f64) -> f64 {
    let mut x = u;
    for _ in 0..depth {
        x = x.ln();
    }
    x
}

pub type ProfileFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Shape of a radial profile.
#[derive(Clone)]
pub enum ProfileKind {
    /// ℓ_m(r) = 1_{(0,ε_m)}(r) log_m(r), m ≥ 1.
    Ell { m: u32 },
    /// θ_m = ℓ_1 ℓ_2² ··· ℓ_{m+1}².
    Theta { m: u32 },
    /// |log r|^exponent on (0, radius), radius ≤ 1.
    LogPower { exponent: f64, radius: f64 },
    /// 1 on the closed ball of the given radius.
    UniformBall { radius: f64 },
    /// User profile, assumed non-negative and non-increasing in r.
    Custom { f: ProfileFn, radius: f64 },
}

impl fmt::Debug for ProfileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileKind::Ell { m } => write!(f, "Ell {{ m: {m} }}"),
            ProfileKind::Theta { m } => write!(f, "Theta {{ m: {m} }}"),
            ProfileKind::LogPower { exponent, radius } => {
                write!(f, "LogPower {{ exponent: {exponent}, radius: {radius} }}")
            }
            ProfileKind::UniformBall { radius } => write!(f, "UniformBall {{ radius: {radius} }}"),
            ProfileKind::Custom { radius, .. } => write!(f, "Custom {{ radius: {radius} }}"),
        }
    }
}

/// A radially symmetric density θ(|x|) on R^d.
#[derive(Debug, Clone)]
pub struct RadialProfile {
    dim: usize,
    kind: ProfileKind,
    /// Support is u > support_u, i.e. r < e^{-support_u}.
    support_u: f64,
}

impl RadialProfile {
    fn check_dim(dim: usize) -> Result<()> {
        if dim == 2 || dim == 3 {
            Ok(())
        } else {
            invalid(format!("profiles live in d = 2 or 3, got {dim}"))
        }
    }

    pub fn ell(m: u32, dim: usize) -> Result<Self> {
        Self::check_dim(dim)?;
        if m == 0 || m > 4 {
            return invalid(format!("ell_m needs 1 <= m <= 4, got {m}"));
        }
        Ok(Self {
            dim,
            kind: ProfileKind::Ell { m },
            support_u: ell_cutoff_u(m),
        })
    }

    pub fn theta(m: u32, dim: usize) -> Result<Self> {
        Self::check_dim(dim)?;
        if m > 3 {
            return invalid(format!("theta_m needs m <= 3, got {m}"));
        }
        Ok(Self {
            dim,
            kind: ProfileKind::Theta { m },
            support_u: ell_cutoff_u(m + 1),
        })
    }

    pub fn log_power(exponent: f64, radius: f64, dim: usize) -> Result<Self> {
        Self::check_dim(dim)?;
        if !(exponent >= 0.0 && exponent.is_finite()) {
            return invalid(format!("log_power exponent must be >= 0, got {exponent}"));
        }
        if !(radius > 0.0 && radius <= 1.0) {
            return invalid(format!("log_power radius must be in (0, 1], got {radius}"));
        }
        Ok(Self {
            dim,
            kind: ProfileKind::LogPower { exponent, radius },
            support_u: -radius.ln(),
        })
    }

    pub fn uniform_ball(radius: f64, dim: usize) -> Result<Self> {
        Self::check_dim(dim)?;
        if !(radius > 0.0 && radius.is_finite()) {
            return invalid(format!("ball radius must be positive, got {radius}"));
        }
        Ok(Self {
            dim,
            kind: ProfileKind::UniformBall { radius },
            support_u: -radius.ln(),
        })
    }

    pub fn custom(f: ProfileFn, radius: f64, dim: usize) -> Result<Self> {
        Self::check_dim(dim)?;
        if !(radius > 0.0 && radius.is_finite()) {
            return invalid(format!("support radius must be positive, got {radius}"));
        }
        Ok(Self {
            dim,
            kind: ProfileKind::Custom { f, radius },
            support_u: -radius.ln(),
        })
    }

    /// The config fragment form, e.g. `kind = "theta_m"`, `m = 1`.
    /// Custom profiles have none.
    pub fn to_fragment(&self) -> Result<toml::Table> {
        use toml::Value;
        let kind = |k: &str| ("kind", Value::String(k.into()));
        Ok(match &self.kind {
            ProfileKind::Ell { m } => fragment::table([kind("ell_m"), ("m", Value::Integer(i64::from(*m)))]),
            ProfileKind::Theta { m } => fragment::table([kind("theta_m"), ("m", Value::Integer(i64::from(*m)))]),
            ProfileKind::LogPower { exponent, radius } => fragment::table([
                kind("log_power"),
                ("exponent", Value::Float(*exponent)),
                ("support_radius", Value::Float(*radius)),
            ]),
            ProfileKind::UniformBall { radius } => {
                fragment::table([kind("uniform_ball"), ("support_radius", Value::Float(*radius))])
            }
            ProfileKind::Custom { .. } => return invalid("custom profiles have no config form"),
        })
    }

    /// Parameter keys of a fragment of the given kind (besides `kind`).
    pub fn fragment_keys(kind: &str) -> &'static [&'static str] {
        match kind {
            "theta_m" | "ell_m" => &["m"],
            "uniform_ball" => &["support_radius"],
            "log_power" => &["exponent", "support_radius"],
            _ => &[],
        }
    }

    /// Inverse of [`RadialProfile::to_fragment`] in dimension `dim`.
    pub fn from_fragment(table: &toml::Table, prefix: &str, dim: usize) -> Result<Self> {
        let r = fragment::Reader::new(table, prefix);
        let kind = r.kind()?;
        let keys = Self::fragment_keys(kind);
        if !keys.is_empty() {
            r.only(kind, keys)?;
        }
        match kind {
            "theta_m" | "ell_m" => {
                let m = r.u32_req("m")?;
                if kind == "theta_m" {
                    Self::theta(m, dim)
                } else {
                    Self::ell(m, dim)
                }
            }
            "uniform_ball" => Self::uniform_ball(r.f64_opt("support_radius")?.unwrap_or(1.0), dim),
            "log_power" => Self::log_power(r.f64_req("exponent")?, r.f64_opt("support_radius")?.unwrap_or(1.0), dim),
            other => invalid(format!(
                "unknown '{}' = \"{other}\" (expected theta_m, ell_m, uniform_ball, log_power)",
                r.key("kind")
            )),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn kind(&self) -> &ProfileKind {
        &self.kind
    }
    /// Support radius (0 if it underflows, as for θ_3).
    pub fn support_radius(&self) -> f64 {
        (-self.support_u).exp()
    }
    pub fn support_u(&self) -> f64 {
        self.support_u
    }

    /// ln θ(e^{-u}); -∞ outside the support.
    pub fn ln_value_u(&self, u: f64) -> f64 {
        let closed = matches!(self.kind, ProfileKind::UniformBall { .. });
        if u < self.support_u || (!closed && u == self.support_u) {
            return f64::NEG_INFINITY;
        }
        match &self.kind {
            ProfileKind::Ell { m } => nested_ln(*m - 1, u).ln(),
            ProfileKind::Theta { m } => {
                let mut acc = u.ln();
                for k in 2..=(*m + 1) {
                    acc += 2.0 * nested_ln(k - 1, u).ln();
                }
                acc
            }
            ProfileKind::LogPower { exponent, .. } => exponent * u.ln(),
            ProfileKind::UniformBall { .. } => 0.0,
            ProfileKind::Custom { f, .. } => f((-u).exp()).ln(),
        }
    }

    /// θ(r).
    pub fn eval(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return match &self.kind {
                ProfileKind::UniformBall { .. } => 1.0,
                ProfileKind::Custom { f, .. } => f(0.0),
                _ => f64::INFINITY,
            };
        }
        self.ln_value_u(-r.ln()).exp()
    }

    /// Points in u where the integrand has kinks.
    fn u_breaks(&self) -> Vec<f64> {
        vec![self.support_u]
    }

    /// ln ∫_{|x| < e^{-u_lo}} θ(|x|)^p dx.
    fn ln_power_integral(&self, p: f64, u_lo: f64) -> Result<f64> {
        let d = self.dim as f64;
        let lo = u_lo.max(self.support_u);
        let f = |u: f64| p * self.ln_value_u(u) - d * u;
        // coarse search for the maximum of f on [lo, ∞)
        let mut best_u = lo;
        let mut best = f(lo);
        let mut prev = lo;
        let mut bracket = (lo, lo + 1.0);
        let mut k = 0;
        loop {
            let u = lo + (2f64.powi(k) - 1.0) * 0.25;
            let v = f(u);
            if v > best || !best.is_finite() {
                best = v;
                best_u = u;
                bracket = (prev, lo + (2f64.powi(k + 1) - 1.0) * 0.25);
            }
            prev = u;
            k += 1;
            if (v < best - 60.0 && u > best_u) || k > 1100 {
                break;
            }
        }
        if !best.is_finite() {
            return Err(VpyError::NumericFailure {
                what: "profile has no finite values on its support".into(),
                estimate: f64::NAN,
            });
        }
        // golden-section refinement on the bracket around the coarse maximum
        let (mut a, mut b) = (bracket.0.max(lo), bracket.1);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..120 {
            let c = b - g * (b - a);
            let e = a + g * (b - a);
            if f(c) >= f(e) {
                b = e;
            } else {
                a = c;
            }
        }
        let mid = 0.5 * (a + b);
        if f(mid) > best {
            best = f(mid);
            best_u = mid;
        }
        let peak = best;
        // window where the integrand exceeds e^{-60} of its peak
        let mut step = 0.25;
        while f(best_u + step) - peak > -60.0 {
            step *= 2.0;
            if step > 1e300 {
                break;
            }
        }
        let hi = best_u + step;
        let mut down = 0.25;
        let mut lo_eff = lo;
        while best_u - down > lo {
            if f(best_u - down) - peak < -60.0 {
                lo_eff = best_u - down;
                break;
            }
            down *= 2.0;
        }
        let mut extra = self.u_breaks();
        extra.push(best_u);
        for s in [0.5, 2.0, 8.0, 32.0] {
            extra.push(best_u + s * (hi - best_u) / 64.0);
        }
        let br = breakpoints(lo_eff, hi, extra);
        let integrand = |u: f64| {
            let v = f(u) - peak;
            if v.is_finite() {
                v.exp()
            } else {
                0.0
            }
        };
        let r = integrate_breaks(integrand, &br, QuadOptions::rel(1e-12).with_max(8000))?;
        Ok(ln_sphere_area(self.dim) + peak + r.value.ln())
    }

    /// ln ‖θ‖_{L^p}.
    pub fn ln_lp_norm(&self, p: f64) -> Result<f64> {
        check_p(p)?;
        Ok(self.ln_power_integral(p, f64::NEG_INFINITY)? / p)
    }

    /// ‖θ‖_{L^p(R^d)}.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        Ok(self.ln_lp_norm(p)?.exp())
    }

    /// ‖θ‖_{L^1}.
    pub fn mass(&self) -> Result<f64> {
        self.lp_norm(1.0)
    }

    /// ‖θ‖_{L^p_ul}: for a radial non-increasing profile the sup over unit
    /// balls is attained at the origin.
    pub fn lp_ul_norm(&self, p: f64) -> Result<f64> {
        check_p(p)?;
        Ok((self.ln_power_integral(p, 0.0)? / p).exp())
    }

    /// ∫_{r0 < |x| < r1} θ(|x|) dx, the mass of a shell.
    pub fn shell_mass(&self, r0: f64, r1: f64) -> Result<f64> {
        if !(r1 > r0) {
            return Ok(0.0);
        }
        let u_lo = -r1.ln();
        if r0 <= 0.0 {
            return Ok(self.ln_power_integral(1.0, u_lo)?.exp());
        }
        let u_hi = -r0.ln();
        let u_lo = u_lo.max(self.support_u);
        if u_lo >= u_hi {
            return Ok(0.0);
        }
        Ok(self.shell_mass_u(u_lo, u_hi)?)
    }

    /// Mass of the shell e^{-u_hi} < |x| < e^{-u_lo}.
    pub fn shell_mass_u(&self, u_lo: f64, u_hi: f64) -> Result<f64> {
        let u_lo = u_lo.max(self.support_u);
        if !(u_hi > u_lo) {
            return Ok(0.0);
        }
        let d = self.dim as f64;
        let f = |u: f64| {
            let v = (self.ln_value_u(u) - d * u).exp();
            if v.is_finite() {
                v
            } else {
                0.0
            }
        };
        let br = breakpoints(u_lo, u_hi, self.u_breaks());
        let r = integrate_breaks(f, &br, QuadOptions::rel(1e-12))?;
        Ok(ln_sphere_area(self.dim).exp() * r.value)
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return invalid(format!("L^p norms need finite p >= 1, got {p}"));
    }
    Ok(())
}

/// ‖|log|·|‖_{L^p(B_1)}^p = |S^{d-1}| d^{-(p+1)} Γ(p+1), in log form.
pub fn ln_log_profile_power_integral(d: usize, p: f64) -> f64 {
    ln_sphere_area(d) - (p + 1.0) * (d as f64).ln() + ln_gamma(p + 1.0)
}

/// Default geometric p grid {1, 2, 4, ..., 4096}.
pub fn default_p_grid() -> Vec<f64> {
    (0..=12).map(|k| 2f64.powi(k)).collect()
}

// ---------------------------------------------------------------------------
// Grid densities

/// Cell-averaged density on the cube [-half_width, half_width]^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    dim: usize,
    cells: usize,
    half_width: f64,
    /// Row-major, last axis fastest.
    values: Vec<f64>,
}

impl GridDensity {
    pub fn new(dim: usize, cells: usize, half_width: f64, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || dim > 3 {
            return invalid(format!("grid dimension must be 1..=3, got {dim}"));
        }
        if cells == 0 || !(half_width > 0.0 && half_width.is_finite()) {
            return invalid("grid needs cells >= 1 and a positive half width");
        }
        if values.len() != cells.pow(dim as u32) {
            return invalid(format!(
                "grid expects {} values, got {}",
                cells.pow(dim as u32),
                values.len()
            ));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return invalid("grid values must be finite and non-negative");
        }
        Ok(Self {
            dim,
            cells,
            half_width,
            values,
        })
    }

    /// Cell averages of a function of the cell center.
    pub fn from_fn(dim: usize, cells: usize, half_width: f64, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let h = 2.0 * half_width / cells as f64;
        let n = cells.pow(dim as u32);
        let mut values = Vec::with_capacity(n);
        let mut x = vec![0.0; dim];
        for idx in 0..n {
            let mut rem = idx;
            for a in (0..dim).rev() {
                x[a] = -half_width + (rem % cells) as f64 * h + 0.5 * h;
                rem /= cells;
            }
            values.push(f(&x));
        }
        Self::new(dim, cells, half_width, values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn cells(&self) -> usize {
        self.cells
    }
    pub fn half_width(&self) -> f64 {
        self.half_width
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn cell_size(&self) -> f64 {
        2.0 * self.half_width / self.cells as f64
    }
    pub fn cell_volume(&self) -> f64 {
        self.cell_size().powi(self.dim as i32)
    }

    pub fn mass(&self) -> f64 {
        let mut s = PairwiseSum::new();
        for &v in &self.values {
            s.add(v);
        }
        s.total() * self.cell_volume()
    }

    /// A copy with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.dim,
            self.cells,
            self.half_width,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }

    fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// ‖ρ‖_{L^p} of the piecewise-constant density.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        check_p(p)?;
        let vmax = self.max_value();
        if vmax == 0.0 {
            return Ok(0.0);
        }
        let mut s = PairwiseSum::new();
        for &v in &self.values {
            s.add((v / vmax).powf(p));
        }
        Ok(vmax * (s.total() * self.cell_volume()).powf(1.0 / p))
    }

    /// Volume fractions of cells inside the unit ball centered at a grid
    /// node, as (per-axis cell offsets, fraction) with 4^d subsampling.
    fn unit_ball_stencil(&self) -> Vec<(Vec<i64>, f64)> {
        let h = self.cell_size();
        let n = (1.0 / h).ceil() as i64;
        let d = self.dim;
        let sub = 4usize;
        let mut out = Vec::new();
        let span = (2 * n) as usize;
        let total = span.pow(d as u32);
        let mut off = vec![0i64; d];
        for idx in 0..total {
            let mut rem = idx;
            for a in (0..d).rev() {
                off[a] = (rem % span) as i64 - n;
                rem /= span;
            }
            let subs = sub.pow(d as u32);
            let mut inside = 0usize;
            for s in 0..subs {
                let mut rs = s;
                let mut r2 = 0.0;
                for &o in off.iter().take(d) {
                    let k = rs % sub;
                    rs /= sub;
                    let x = (o as f64 + (k as f64 + 0.5) / sub as f64) * h;
                    r2 += x * x;
                }
                if r2 <= 1.0 {
                    inside += 1;
                }
            }
            if inside > 0 {
                out.push((off.clone(), inside as f64 / subs as f64));
            }
        }
        out
    }

    /// sup over unit balls centered at grid nodes of ‖ρ‖_{L^p(B_1(x))}.
    pub fn lp_ul_norm(&self, p: f64, exec: Exec) -> Result<f64> {
        check_p(p)?;
        if self.cell_size() > 0.25 {
            return invalid(format!(
                "L^p_ul needs cell size <= 0.25 to resolve unit balls, got {}",
                self.cell_size()
            ));
        }
        let vmax = self.max_value();
        if vmax == 0.0 {
            return Ok(0.0);
        }
        let stencil = self.unit_ball_stencil();
        let d = self.dim;
        let c = self.cells as i64;
        let nodes_per_axis = self.cells + 1;
        let n_nodes = nodes_per_axis.pow(d as u32);
        let scaled: Vec<f64> = self.values.iter().map(|v| (v / vmax).powf(p)).collect();
        let sums = map_indexed(exec, n_nodes, |node| {
            let mut rem = node;
            let mut base = [0i64; 3];
            for a in (0..d).rev() {
                base[a] = (rem % nodes_per_axis) as i64;
                rem /= nodes_per_axis;
            }
            let mut s = PairwiseSum::new();
            'cells: for (off, frac) in &stencil {
                let mut flat = 0i64;
                for a in 0..d {
                    let i = base[a] + off[a];
                    if i < 0 || i >= c {
                        continue 'cells;
                    }
                    flat = flat * c + i;
                }
                s.add(frac * scaled[flat as usize]);
            }
            s.total()
        });
        let best = sums.into_iter().fold(0.0, f64::max);
        Ok(vmax * (best * self.cell_volume()).powf(1.0 / p))
    }

    /// Binary dump: u64 dim, u64 cells, f64 half width, row-major f64 values,
    /// all little-endian.
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.cells as u64).to_le_bytes())?;
        w.write_all(&self.half_width.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> Result<Self> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let dim = u64::from_le_bytes(b) as usize;
        r.read_exact(&mut b)?;
        let cells = u64::from_le_bytes(b) as usize;
        r.read_exact(&mut b)?;
        let half_width = f64::from_le_bytes(b);
        if dim == 0 || dim > 3 || cells == 0 || cells > 1 << 20 {
            return invalid("corrupt grid header");
        }
        let n = cells.pow(dim as u32);
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        Self::new(dim, cells, half_width, values)
    }
}

// ---------------------------------------------------------------------------
// Reports

/// A density given either in closed radial form or on a grid.
#[derive(Debug, Clone, Copy)]
pub enum DensitySource<'a> {
    Radial(&'a RadialProfile),
    Grid(&'a GridDensity),
}

impl DensitySource<'_> {
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        match self {
            DensitySource::Radial(r) => r.lp_norm(p),
            DensitySource::Grid(g) => g.lp_norm(p),
        }
    }
    pub fn lp_ul_norm(&self, p: f64, exec: Exec) -> Result<f64> {
        match self {
            DensitySource::Radial(r) => r.lp_ul_norm(p),
            DensitySource::Grid(g) => g.lp_ul_norm(p, exec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub p_grid: Vec<f64>,
    pub lp_values: Vec<f64>,
    pub lp_ul_values: Vec<f64>,
    /// max_i lp_ul_i / Θ(p_i).
    pub yudovich_norm: f64,
    /// min_i lp_i / Θ(p_i).
    pub saturation_ratio: f64,
}

pub fn yudovich_report(
    source: DensitySource<'_>,
    theta: &GrowthFunction,
    p_grid: &[f64],
    exec: Exec,
) -> Result<NormReport> {
    if p_grid.is_empty() {
        return invalid("p grid is empty");
    }
    let lp_values = p_grid.iter().map(|&p| source.lp_norm(p)).collect::<Result<Vec<_>>>()?;
    let lp_ul_values = p_grid
        .iter()
        .map(|&p| source.lp_ul_norm(p, exec))
        .collect::<Result<Vec<_>>>()?;
    let ratio = |v: f64, p: f64| (v.ln() - theta.ln_eval(p)).exp();
    let yudovich_norm = lp_ul_values
        .iter()
        .zip(p_grid)
        .map(|(&v, &p)| ratio(v, p))
        .fold(0.0, f64::max);
    let saturation_ratio = lp_values
        .iter()
        .zip(p_grid)
        .map(|(&v, &p)| ratio(v, p))
        .fold(f64::INFINITY, f64::min);
    Ok(NormReport {
        p_grid: p_grid.to_vec(),
        lp_values,
        lp_ul_values,
        yudovich_norm,
        saturation_ratio,
    })
}

/// Envelope fit a·log_{m-1}(p) ≤ ‖ℓ_m‖_{L^p} ≤ b·log_{m-1}(p).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationFit {
    pub m: u32,
    pub dim: usize,
    /// Grid points actually used (p ≥ p_m).
    pub p: Vec<f64>,
    pub norms: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Smallest admissible p: log_{m-1} must be positive and p ≥ exp_{m-1}(1).
    pub p_min: f64,
    pub lower: f64,
    pub upper: f64,
    /// Log-log slope of the ratio over the top half of the grid.
    pub tail_slope: f64,
}

/// Largest |log-log slope| of the ratio that still counts as bounded.
pub const SATURATION_SLOPE_LIMIT: f64 = 0.25;

/// Fits the envelope of ‖ℓ_m‖_{L^p} / log_{m-1}(p), or of the ratio against
/// `denominator` when supplied (for negative controls).
pub fn saturation_check(
    m: u32,
    dim: usize,
    p_grid: &[f64],
    denominator: Option<&dyn Fn(f64) -> Result<f64>>,
) -> Result<SaturationFit> {
    if m == 0 {
        return invalid("saturation check needs m >= 1");
    }
    let profile = RadialProfile::ell(m, dim)?;
    let p_min = exp_tower(m - 1);
    let default_den = |p: f64| iterated_log(m - 1, p);
    let mut ps = Vec::new();
    let mut norms = Vec::new();
    let mut ratios = Vec::new();
    for &p in p_grid {
        if p < p_min || p < 1.0 {
            continue;
        }
        let den = match denominator {
            Some(f) => f(p)?,
            None => default_den(p)?,
        };
        if !(den > 0.0) {
            continue;
        }
        let n = profile.lp_norm(p)?;
        ps.push(p);
        norms.push(n);
        ratios.push(n / den);
    }
    if ps.len() < 2 {
        return invalid(format!("p grid has fewer than two points above p_m = {p_min}"));
    }
    let lower = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let upper = ratios.iter().copied().fold(0.0, f64::max);
    let half = ps.len() / 2;
    let (p0, r0) = (ps[half.min(ps.len() - 2)], ratios[half.min(ps.len() - 2)]);
    let (p1, r1) = (ps[ps.len() - 1], ratios[ratios.len() - 1]);
    let tail_slope = (r1.ln() - r0.ln()) / (p1.ln() - p0.ln());
    let fit = SaturationFit {
        m,
        dim,
        p: ps,
        norms,
        ratios,
        p_min,
        lower,
        upper,
        tail_slope,
    };
    if !(lower > 0.0) || !upper.is_finite() || tail_slope.abs() > SATURATION_SLOPE_LIMIT {
        return Err(VpyError::PropertyViolation(format!(
            "ratio for ell_{m} is not bounded in a positive interval: range [{lower:e}, {upper:e}], tail log-log slope {tail_slope:.3}"
        )));
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, PI};

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs()
    }

    #[test]
    fn uniform_ball_norms() {
        let b = RadialProfile::uniform_ball(1.0, 2).unwrap();
        assert!(close(b.lp_norm(2.0).unwrap(), PI.sqrt(), 1e-10));
        assert!(close(b.mass().unwrap(), PI, 1e-10));
        let b3 = RadialProfile::uniform_ball(0.5, 3).unwrap();
        assert!(close(b3.mass().unwrap(), 4.0 / 3.0 * PI / 8.0, 1e-10));
    }

    #[test]
    fn log_profile_matches_gamma_closed_form() {
        // ∫_{B_1} |log|x||^p dx = |S^{d-1}| d^{-(p+1)} Γ(p+1)
        let l1 = RadialProfile::log_power(1.0, 1.0, 2).unwrap();
        assert!(close(l1.lp_norm(2.0).unwrap(), (PI / 2.0).sqrt(), 1e-10));
        for d in [2usize, 3] {
            let l1 = RadialProfile::log_power(1.0, 1.0, d).unwrap();
            for p in [1.0, 1.5, 3.0, 17.0, 128.0, 600.0, 4096.0] {
                let want = ln_log_profile_power_integral(d, p) / p;
                let got = l1.ln_lp_norm(p).unwrap();
                assert!((got - want).abs() < 1e-9, "d={d} p={p}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn theta0_equals_ell1() {
        let t0 = RadialProfile::theta(0, 2).unwrap();
        let l1 = RadialProfile::ell(1, 2).unwrap();
        for p in [1.0, 4.0, 64.0] {
            assert_eq!(t0.lp_norm(p).unwrap(), l1.lp_norm(p).unwrap());
        }
        assert_eq!(t0.support_radius(), (-1.0f64).exp());
        assert_eq!(t0.eval(0.5), 0.0);
        assert!(close(t0.eval((-3.0f64).exp()), 3.0, 1e-14));
    }

    #[test]
    fn theta1_value_and_support() {
        let t1 = RadialProfile::theta(1, 2).unwrap();
        assert!(close(t1.support_radius(), (-E).exp(), 1e-15));
        let r = (-10.0f64).exp();
        assert!(close(t1.eval(r), 10.0 * 10f64.ln().powi(2), 1e-13));
        assert_eq!(t1.eval(0.07), 0.0);
    }

    #[test]
    fn lp_ul_of_small_support_equals_lp() {
        let t = RadialProfile::theta(1, 3).unwrap();
        for p in [1.0, 3.0, 50.0] {
            assert_eq!(t.lp_ul_norm(p).unwrap(), t.lp_norm(p).unwrap());
        }
        let big = RadialProfile::uniform_ball(3.0, 2).unwrap();
        assert!(close(big.lp_ul_norm(2.0).unwrap(), PI.sqrt(), 1e-10));
    }

    #[test]
    fn shell_masses_add_up() {
        let t = RadialProfile::theta(0, 2).unwrap();
        let a = t.shell_mass(0.0, 0.1).unwrap();
        let b = t.shell_mass(0.1, 1.0).unwrap();
        assert!(close(a + b, t.mass().unwrap(), 1e-11));
    }

    #[test]
    fn grid_constant_density_lp_ul() {
        // constant c on a large box: c |B_1|^{1/p}, up to the stencil error
        let g = GridDensity::from_fn(2, 80, 4.0, |_| 2.0).unwrap();
        for p in [1.0, 2.0, 8.0] {
            let got = g.lp_ul_norm(p, Exec::Sequential).unwrap();
            let want = 2.0 * PI.powf(1.0 / p);
            assert!(close(got, want, 5e-3 / p), "p={p}: {got} vs {want}");
        }
    }

    #[test]
    fn grid_lp_ul_picks_the_taller_bump() {
        let g = GridDensity::from_fn(2, 120, 6.0, |x| {
            let a = ((x[0] + 3.0).powi(2) + x[1] * x[1]).sqrt();
            let b = ((x[0] - 3.0).powi(2) + x[1] * x[1]).sqrt();
            if a < 0.5 {
                1.0
            } else if b < 0.5 {
                2.0
            } else {
                0.0
            }
        })
        .unwrap();
        let ul = g.lp_ul_norm(1.0, Exec::Parallel).unwrap();
        // the taller bump holds 2/3 of the mass
        assert!(close(ul, g.mass() * 2.0 / 3.0, 1e-12), "{ul} vs {}", g.mass());
        assert!(g.lp_ul_norm(1.0, Exec::Sequential).unwrap() == ul);
    }

    #[test]
    fn grid_supported_in_unit_ball_has_lp_ul_equal_to_lp() {
        let g = GridDensity::from_fn(3, 24, 1.2, |x| {
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            if r < 0.6 {
                1.0 + r
            } else {
                0.0
            }
        })
        .unwrap();
        for p in [1.0, 2.0, 5.0] {
            let a = g.lp_ul_norm(p, Exec::Parallel).unwrap();
            let b = g.lp_norm(p).unwrap();
            assert!(close(a, b, 1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let g = GridDensity::from_fn(2, 4, 2.0, |_| 1.0).unwrap();
        assert!(matches!(
            g.lp_ul_norm(2.0, Exec::Sequential),
            Err(VpyError::InvalidInput(_))
        ));
    }

    #[test]
    fn grid_binary_round_trip() {
        let g = GridDensity::from_fn(2, 5, 1.5, |x| x[0].abs() + 2.0 * x[1].abs()).unwrap();
        let mut buf = Vec::new();
        g.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 8 * 25);
        assert_eq!(&buf[0..8], &2u64.to_le_bytes());
        let back = GridDensity::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn saturation_m1_ratio_interval() {
        let grid: Vec<f64> = (3..=12).map(|k| 2f64.powi(k)).collect();
        let fit = saturation_check(1, 2, &grid, None).unwrap();
        assert!(fit.lower >= 0.15 && fit.upper <= 0.45, "{fit:?}");
    }

    #[test]
    fn saturation_m2_ratio_is_bounded() {
        let grid: Vec<f64> = (6..=12).map(|k| 2f64.powi(k)).collect();
        let fit = saturation_check(2, 2, &grid, None).unwrap();
        assert!(fit.lower > 0.0 && fit.upper.is_finite());
    }

    #[test]
    fn saturation_detects_wrong_exponent() {
        let grid: Vec<f64> = (3..=12).map(|k| 2f64.powi(k)).collect();
        let den = |p: f64| iterated_log(1, p);
        let r = saturation_check(1, 2, &grid, Some(&den));
        assert!(matches!(r, Err(VpyError::PropertyViolation(_))), "{r:?}");
    }

    #[test]
    fn iterated_log_lower_bound_law() {
        // ‖ℓ_m‖_p ≥ |B_1|^{1/p} e^{-d} |log_{m-1}(p)| for p ≥ log(1/ε_m)
        for d in [2usize, 3] {
            let cd = unit_ball_volume(d);
            for m in 1..=3u32 {
                let ell = RadialProfile::ell(m, d).unwrap();
                for k in 0..=12 {
                    let p = 2f64.powi(k);
                    if p < ell_cutoff_u(m) || p < 1.0 {
                        continue;
                    }
                    let lg = iterated_log(m - 1, p).unwrap().abs();
                    let lower = cd.powf(1.0 / p) * (-(d as f64)).exp() * lg;
                    assert!(ell.lp_norm(p).unwrap() >= lower, "m={m} d={d} p={p}");
                }
            }
        }
    }

    #[test]
    fn saturation_ratio_of_theta0() {
        let t0 = RadialProfile::theta(0, 2).unwrap();
        let grid: Vec<f64> = (3..=12).map(|k| 2f64.powi(k)).collect();
        let rep = yudovich_report(
            DensitySource::Radial(&t0),
            &GrowthFunction::iterated_log(0).unwrap(),
            &grid,
            Exec::Sequential,
        )
        .unwrap();
        let top = rep.lp_values.last().unwrap() / 4096.0;
        assert!(close(top, 1.0 / (2.0 * E), 0.1), "{top}");
        assert!(rep.saturation_ratio > 0.1);
        let neg = yudovich_report(
            DensitySource::Radial(&t0),
            &GrowthFunction::constant(1.0).unwrap(),
            &grid,
            Exec::Sequential,
        )
        .unwrap();
        assert!(neg.lp_values.last().unwrap() / neg.lp_values[0] > 100.0);
    }
}
