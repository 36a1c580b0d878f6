//! Growth functions Θ, the modulus φ_Θ with its primitive Φ_Θ, the Osgood
//! functional Ψ_{δ,c} and its inverse, and numeric diagnostics (Osgood
//! classification, continuity at the junction, concavity range).
//!
//! Everything near the origin is computed in the variable `u = -ln r`, in
//! which φ_Θ(e^{-u}) = e^{-u} u Θ(u) and
//! Φ_Θ(e^{-u}) = e^{-2u} g(u) with g(u) = ∫_0^∞ e^{-2t} (u+t) Θ(u+t) dt.
//! `g` is slowly varying, so it can be tabulated and evaluated far below the
//! smallest representable radius.

use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VpyError};
use crate::fragment;
use crate::quad::{breakpoints, integrate_breaks, QuadOptions};

/// `exp_m(1)`: 1, e, e^e, e^{e^e}, ... (infinite from m = 4 on).
pub fn exp_tower(m: u32) -> f64 {
    let mut x = 1.0f64;
    for _ in 0..m {
        x = x.exp();
    }
    x
}

/// The iterated logarithm `log_m`: identity for m = 0, and
/// `log ∘ ... ∘ log (|log r|)` with m-1 outer logarithms otherwise.
pub fn iterated_log(m: u32, r: f64) -> Result<f64> {
    if m == 0 {
        return Ok(r);
    }
    if !(r > 0.0) {
        return Err(VpyError::Domain(format!("log_{m} needs r > 0, got {r}")));
    }
    let mut x = r.ln().abs();
    for k in 1..m {
        if !(x > 0.0) {
            return Err(VpyError::Domain(format!(
                "log_{m}({r}): argument of the log at depth {k} is {x}"
            )));
        }
        x = x.ln();
    }
    Ok(x)
}

/// Natural log applied `depth` times to `u` (no absolute value).
fn nested_ln(depth: u32, u: f64) -> f64 {
    let mut x = u;
    for _ in 0..depth {
        x = x.ln();
    }
    x
}

/// Sorted `(p, Θ(p))` knots of a tabulated growth function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct Knots(Vec<(f64, f64)>);

impl Knots {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return invalid("tabulated growth function needs at least one knot");
        }
        for w in knots.windows(2) {
            if !(w[1].0 > w[0].0) {
                return invalid("tabulated knots must have strictly increasing p");
            }
            if w[1].1 < w[0].1 {
                return invalid("tabulated growth function must be non-decreasing");
            }
        }
        if knots
            .iter()
            .any(|&(p, v)| !p.is_finite() || !v.is_finite() || !(v > 0.0))
        {
            return invalid("tabulated knots must be finite with positive values");
        }
        Ok(Knots(knots))
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.0
    }

    fn eval(&self, p: f64) -> f64 {
        let k = &self.0;
        if p <= k[0].0 {
            return k[0].1;
        }
        let last = k[k.len() - 1];
        if p >= last.0 {
            return last.1;
        }
        let i = k.partition_point(|&(q, _)| q <= p);
        let (p0, v0) = k[i - 1];
        let (p1, v1) = k[i];
        v0 + (v1 - v0) * ((p - p0) / (p1 - p0))
    }
}

impl TryFrom<Vec<(f64, f64)>> for Knots {
    type Error = VpyError;
    fn try_from(v: Vec<(f64, f64)>) -> Result<Self> {
        Knots::new(v)
    }
}

impl From<Knots> for Vec<(f64, f64)> {
    fn from(k: Knots) -> Self {
        k.0
    }
}

/// A growth function Θ: [0, ∞) → (0, ∞), non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GrowthFunction {
    Constant(f64),
    /// Θ(p) = p^{1/alpha}, alpha ≥ 1.
    Power {
        alpha: f64,
    },
    /// Θ_m, m ≤ 3 (exp_4(1) overflows).
    IteratedLog {
        m: u32,
    },
    /// Linear interpolation with constant extension on both sides.
    Tabulated(Knots),
}

pub const MAX_ITERATED_LOG_ORDER: u32 = 3;

impl GrowthFunction {
    pub fn constant(value: f64) -> Result<Self> {
        let g = GrowthFunction::Constant(value);
        g.validate()?;
        Ok(g)
    }

    pub fn power(alpha: f64) -> Result<Self> {
        let g = GrowthFunction::Power { alpha };
        g.validate()?;
        Ok(g)
    }

    pub fn iterated_log(m: u32) -> Result<Self> {
        let g = GrowthFunction::IteratedLog { m };
        g.validate()?;
        Ok(g)
    }

    pub fn tabulated(knots: Vec<(f64, f64)>) -> Result<Self> {
        Ok(GrowthFunction::Tabulated(Knots::new(knots)?))
    }

    /// Tabulated Θ(p) = p^exponent with knots at 10^{k/per_decade} up to
    /// 10^decades (Θ = 1 on [0, 1], constant past the last knot).
    pub fn tabulated_power(exponent: f64, decades: u32, per_decade: u32) -> Result<Self> {
        if !(exponent > 0.0) || per_decade == 0 {
            return invalid("tabulated power needs exponent > 0 and per_decade >= 1");
        }
        let mut knots = vec![(0.0, 1.0), (1.0, 1.0)];
        for k in 1..=decades * per_decade {
            let p = 10f64.powf(k as f64 / per_decade as f64);
            knots.push((p, p.powf(exponent)));
        }
        Self::tabulated(knots)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GrowthFunction::Constant(v) if !(*v > 0.0 && v.is_finite()) => {
                invalid(format!("constant growth must be positive and finite, got {v}"))
            }
            GrowthFunction::Power { alpha } if !(*alpha >= 1.0 && alpha.is_finite()) => {
                invalid(format!("power growth needs alpha >= 1, got {alpha}"))
            }
            GrowthFunction::IteratedLog { m } if *m > MAX_ITERATED_LOG_ORDER => invalid(format!(
                "iterated-log growth supports m <= {MAX_ITERATED_LOG_ORDER}, got {m}"
            )),
            _ => Ok(()),
        }
    }

    /// Θ(p) for p ≥ 0.
    pub fn eval(&self, p: f64) -> f64 {
        match self {
            GrowthFunction::Constant(v) => *v,
            GrowthFunction::Power { alpha } => p.max(0.0).powf(1.0 / alpha),
            GrowthFunction::IteratedLog { m } => theta_m(*m, p),
            GrowthFunction::Tabulated(k) => k.eval(p),
        }
    }

    /// ln Θ(p), accurate where Θ itself would overflow.
    pub fn ln_eval(&self, p: f64) -> f64 {
        match self {
            GrowthFunction::Constant(v) => v.ln(),
            GrowthFunction::Power { alpha } => p.max(0.0).ln() / alpha,
            GrowthFunction::IteratedLog { m } => ln_theta_m(*m, p),
            GrowthFunction::Tabulated(k) => k.eval(p).ln(),
        }
    }

    /// Break points where Θ has kinks, for quadrature.
    fn kinks(&self) -> Vec<f64> {
        match self {
            GrowthFunction::IteratedLog { m } if *m > 0 => vec![exp_tower(*m)],
            GrowthFunction::Tabulated(k) => k.points().iter().map(|&(p, _)| p).collect(),
            _ => Vec::new(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            GrowthFunction::Constant(_) => "constant",
            GrowthFunction::Power { .. } => "power",
            GrowthFunction::IteratedLog { .. } => "iterated_log",
            GrowthFunction::Tabulated(_) => "tabulated",
        }
    }
}

impl GrowthFunction {
    /// The config fragment form, e.g. `kind = "power"`, `alpha = 2.0`.
    pub fn to_fragment(&self) -> toml::Table {
        use toml::Value;
        let kind = ("kind", Value::String(self.kind_name().into()));
        match self {
            GrowthFunction::Constant(v) => fragment::table([kind, ("value", Value::Float(*v))]),
            GrowthFunction::Power { alpha } => fragment::table([kind, ("alpha", Value::Float(*alpha))]),
            GrowthFunction::IteratedLog { m } => fragment::table([kind, ("m", Value::Integer(i64::from(*m)))]),
            GrowthFunction::Tabulated(k) => {
                let flat = k.points().iter().flat_map(|&(p, v)| [Value::Float(p), Value::Float(v)]);
                fragment::table([kind, ("knots", Value::Array(flat.collect()))])
            }
        }
    }

    /// Parameter keys of a fragment of the given kind (besides `kind`).
    pub fn fragment_keys(kind: &str) -> &'static [&'static str] {
        match kind {
            "constant" => &["value"],
            "power" => &["alpha"],
            "iterated_log" => &["m"],
            "tabulated" => &["knots"],
            "tabulated_power" => &["exponent", "decades", "per_decade"],
            _ => &[],
        }
    }

    /// Inverse of [`GrowthFunction::to_fragment`]; also accepts
    /// `kind = "tabulated_power"` with `exponent`, `decades`, `per_decade`.
    /// `prefix` is only used in error messages.
    pub fn from_fragment(table: &toml::Table, prefix: &str) -> Result<Self> {
        let r = fragment::Reader::new(table, prefix);
        let kind = r.kind()?;
        let keys = Self::fragment_keys(kind);
        if !keys.is_empty() {
            r.only(kind, keys)?;
        }
        match kind {
            "constant" => Self::constant(r.f64_opt("value")?.unwrap_or(1.0)),
            "power" => Self::power(r.f64_req("alpha")?),
            "iterated_log" => Self::iterated_log(r.u32_req("m")?),
            "tabulated" => {
                let flat = r.f64_list("knots")?;
                if flat.len() < 2 || flat.len() % 2 != 0 {
                    return invalid(format!("'{}' must list p0, v0, p1, v1, ...", r.key("knots")));
                }
                Self::tabulated(flat.chunks(2).map(|c| (c[0], c[1])).collect())
            }
            "tabulated_power" => Self::tabulated_power(
                r.f64_req("exponent")?,
                r.u32_opt("decades")?.unwrap_or(150),
                r.u32_opt("per_decade")?.unwrap_or(1),
            ),
            other => invalid(format!(
                "unknown '{}' = \"{other}\" (expected constant, power, iterated_log, tabulated, tabulated_power)",
                r.key("kind")
            )),
        }
    }
}

impl fmt::Display for GrowthFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GrowthFunction::Constant(v) => write!(f, "constant({v})"),
            GrowthFunction::Power { alpha } => write!(f, "power(alpha={alpha})"),
            GrowthFunction::IteratedLog { m } => write!(f, "iterated_log(m={m})"),
            GrowthFunction::Tabulated(k) => write!(f, "tabulated({} knots)", k.points().len()),
        }
    }
}

fn ln_theta_m(m: u32, p: f64) -> f64 {
    let p = p.max(exp_tower(m));
    let mut acc = p.ln();
    let mut x = p;
    for _ in 0..m {
        x = x.ln();
        acc += 2.0 * x.ln();
    }
    acc
}

fn theta_m(m: u32, p: f64) -> f64 {
    let p = p.max(exp_tower(m));
    let mut acc = p;
    let mut x = p;
    for _ in 0..m {
        x = x.ln();
        acc *= x * x;
    }
    acc
}

// ---------------------------------------------------------------------------
// Modulus

const TABLE_STEP: f64 = 1.0 / 64.0;
// Below a kink of Θ, ln Φ(e^{-u}) picks up terms like e^{2(u-kink)}; cells
// this close to a kink are evaluated exactly instead of interpolated.
const KINK_SHADOW: f64 = 6.0;
const TABLE_U_MAX: f64 = 760.0;
const TAIL_SPAN: f64 = 40.0;

/// ln H(u) = ln Φ(e^{-u}) (unscaled) on a uniform u-grid, with exact slopes.
struct PrimitiveTable {
    u0: f64,
    ln_phi: Vec<f64>,
    slope: Vec<f64>,
    g: Vec<f64>,
    /// Cells at or below a kink of Θ, where Hermite interpolation is too coarse.
    kinked: Vec<bool>,
}

impl PrimitiveTable {
    fn u_max(&self) -> f64 {
        self.u0 + TABLE_STEP * (self.ln_phi.len() - 1) as f64
    }

    fn cell(&self, u: f64) -> (usize, f64) {
        let x = (u - self.u0) / TABLE_STEP;
        let i = (x.floor() as usize).min(self.ln_phi.len() - 2);
        (i, x - i as f64)
    }

    /// Monotone cubic Hermite interpolation of ln Φ(e^{-u}).
    fn eval(&self, u: f64) -> f64 {
        let (i, s) = self.cell(u);
        let (y0, y1) = (self.ln_phi[i], self.ln_phi[i + 1]);
        let h = TABLE_STEP;
        let mut m0 = self.slope[i] * h;
        let mut m1 = self.slope[i + 1] * h;
        let delta = y1 - y0;
        // Fritsch–Carlson limiter: keeps the interpolant monotone.
        if delta != 0.0 {
            let a = m0 / delta;
            let b = m1 / delta;
            let r2 = a * a + b * b;
            if r2 > 9.0 {
                let tau = 3.0 / r2.sqrt();
                m0 = tau * a * delta;
                m1 = tau * b * delta;
            }
        }
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1
    }
}

/// The modulus φ_Θ for a growth function Θ and dimension d, optionally
/// multiplied by a constant `scale` (φ ↦ scale·φ, Φ ↦ scale·Φ).
#[derive(Clone)]
pub struct Modulus {
    theta: GrowthFunction,
    dim: usize,
    scale: f64,
    junction: f64,
    plateau: f64,
    table: Arc<OnceLock<std::result::Result<PrimitiveTable, VpyError>>>,
}

impl fmt::Debug for Modulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Modulus")
            .field("theta", &self.theta)
            .field("dim", &self.dim)
            .field("scale", &self.scale)
            .finish()
    }
}

impl Modulus {
    pub fn new(theta: GrowthFunction, dim: usize) -> Result<Self> {
        theta.validate()?;
        if dim < 2 {
            return invalid(format!("modulus dimension must be >= 2, got {dim}"));
        }
        let junction = (-(dim as f64) - 1.0).exp();
        let plateau = junction * (dim as f64 + 1.0) * theta.eval(dim as f64 + 1.0);
        Ok(Self {
            theta,
            dim,
            scale: 1.0,
            junction,
            plateau,
            table: Arc::new(OnceLock::new()),
        })
    }

    /// The same modulus multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return invalid(format!("modulus scale must be positive, got {factor}"));
        }
        let mut m = self.clone();
        m.scale *= factor;
        Ok(m)
    }

    pub fn theta(&self) -> &GrowthFunction {
        &self.theta
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }
    /// e^{-d-1}.
    pub fn junction(&self) -> f64 {
        self.junction
    }
    /// The plateau value scale·e^{-d-1}(d+1)Θ(d+1).
    pub fn plateau(&self) -> f64 {
        self.scale * self.plateau
    }
    fn u_junction(&self) -> f64 {
        self.dim as f64 + 1.0
    }

    /// φ_Θ(r).
    pub fn phi(&self, r: f64) -> f64 {
        if r <= 0.0 {
            0.0
        } else if r < self.junction {
            let u = -r.ln();
            self.scale * r * u * self.theta.eval(u)
        } else {
            self.plateau()
        }
    }

    /// ln of the unscaled reduced primitive g(u), by direct quadrature.
    fn ln_g_direct(&self, u: f64) -> Result<f64> {
        let base = u.ln() + self.theta.ln_eval(u);
        let theta = &self.theta;
        let f = |t: f64| (-2.0 * t + (u + t).ln() - u.ln() + theta.ln_eval(u + t) - theta.ln_eval(u)).exp();
        let breaks = breakpoints(0.0, TAIL_SPAN, theta.kinks().into_iter().map(|k| k - u));
        let r = integrate_breaks(f, &breaks, QuadOptions::rel(1e-14))?;
        Ok(base + r.value.ln())
    }

    fn table(&self) -> Result<&PrimitiveTable> {
        self.table
            .get_or_init(|| self.build_table())
            .as_ref()
            .map_err(|e| e.clone())
    }

    fn build_table(&self) -> std::result::Result<PrimitiveTable, VpyError> {
        let u0 = self.u_junction();
        let n = ((TABLE_U_MAX - u0) / TABLE_STEP).ceil() as usize + 1;
        let h = TABLE_STEP;
        let kinks = self.theta.kinks();
        let theta = &self.theta;
        let mut g = vec![0.0; n];
        g[n - 1] = self.ln_g_direct(u0 + h * (n - 1) as f64)?.exp();
        let decay = (-2.0 * h).exp();
        for k in (0..n - 1).rev() {
            let uk = u0 + h * k as f64;
            let f = |t: f64| (-2.0 * t).exp() * (uk + t) * theta.eval(uk + t);
            let breaks = breakpoints(0.0, h, kinks.iter().map(|&p| p - uk));
            let cell = integrate_breaks(f, &breaks, QuadOptions::rel(1e-15))?;
            g[k] = cell.value + decay * g[k + 1];
        }
        let mut ln_phi = Vec::with_capacity(n);
        let mut slope = Vec::with_capacity(n);
        for (k, &gk) in g.iter().enumerate() {
            let uk = u0 + h * k as f64;
            ln_phi.push(gk.ln() - 2.0 * uk);
            slope.push(-uk * theta.eval(uk) / gk);
        }
        let kinked = (0..n)
            .map(|k| {
                let uk = u0 + h * k as f64;
                kinks.iter().any(|&p| p > uk && p < uk + h + KINK_SHADOW)
            })
            .collect();
        Ok(PrimitiveTable {
            u0,
            ln_phi,
            slope,
            g,
            kinked,
        })
    }

    /// Unscaled ln Φ(e^{-u}) inside the table range.
    fn ln_phi_tabled(&self, t: &PrimitiveTable, u: f64) -> Result<f64> {
        let u = u.max(t.u0);
        let (i, _) = t.cell(u);
        if !t.kinked[i] {
            return Ok(t.eval(u));
        }
        // exact: g(u) = ∫_0^{u_{i+1}-u} e^{-2s}(u+s)Θ(u+s) ds + e^{-2(u_{i+1}-u)} g_{i+1}
        let next = t.u0 + TABLE_STEP * (i + 1) as f64;
        let span = (next - u).max(0.0);
        let theta = &self.theta;
        let f = |s: f64| (-2.0 * s).exp() * (u + s) * theta.eval(u + s);
        let breaks = breakpoints(0.0, span, theta.kinks().into_iter().map(|p| p - u));
        let head = integrate_breaks(f, &breaks, QuadOptions::rel(1e-15))?.value;
        Ok((head + (-2.0 * span).exp() * t.g[i + 1]).ln() - 2.0 * u)
    }

    /// ln of the scaled Φ(e^{-u}) for u ≥ d+1, valid for arbitrarily large u.
    pub fn ln_big_phi_u(&self, u: f64) -> Result<f64> {
        let t = self.table()?;
        let unscaled = if u <= t.u_max() {
            self.ln_phi_tabled(t, u)?
        } else {
            self.ln_g_direct(u)? - 2.0 * u
        };
        Ok(unscaled + self.scale.ln())
    }

    /// ln of e^{2u}Φ(e^{-u}) (scaled), the slowly varying part of Φ.
    pub fn ln_reduced_primitive(&self, u: f64) -> Result<f64> {
        let t = self.table()?;
        if u <= t.u_max() {
            Ok(self.ln_phi_tabled(t, u)? + 2.0 * u + self.scale.ln())
        } else {
            Ok(self.ln_g_direct(u)? + self.scale.ln())
        }
    }

    /// Φ_Θ(r) = ∫_0^r φ_Θ, from the memoized table.
    pub fn big_phi(&self, r: f64) -> Result<f64> {
        if r <= 0.0 {
            return Ok(0.0);
        }
        if r < self.junction {
            return Ok(self.ln_big_phi_u(-r.ln())?.exp());
        }
        let at_junction = self.ln_big_phi_u(self.u_junction())?.exp();
        Ok(at_junction + (r - self.junction) * self.plateau())
    }

    /// Φ_Θ(r) by direct adaptive quadrature in u = -ln s (the reference path).
    pub fn big_phi_direct(&self, r: f64) -> Result<f64> {
        if r <= 0.0 {
            return Ok(0.0);
        }
        let a = r.min(self.junction);
        let ua = -a.ln();
        let theta = &self.theta;
        // ∫_{ua}^∞ e^{-2u} u Θ(u) du, shifted by ua for scaling.
        let f = |t: f64| (-2.0 * t).exp() * (ua + t) * theta.eval(ua + t);
        let breaks = breakpoints(0.0, TAIL_SPAN, theta.kinks().into_iter().map(|k| k - ua));
        let inner = integrate_breaks(f, &breaks, QuadOptions::rel(1e-13))?;
        let mut value = self.scale * (-2.0 * ua).exp() * inner.value;
        if r > self.junction {
            value += (r - self.junction) * self.plateau();
        }
        Ok(value)
    }

    /// ∫_a^b φ_Θ by direct quadrature in r; accurate for short intervals away from 0.
    pub fn phi_integral(&self, a: f64, b: f64) -> Result<f64> {
        if b < a {
            return Ok(-self.phi_integral(b, a)?);
        }
        if a <= 0.0 {
            return Ok(self.big_phi(b)? - self.big_phi(a.max(0.0))?);
        }
        let breaks = breakpoints(a, b, [self.junction]);
        Ok(integrate_breaks(|s| self.phi(s), &breaks, QuadOptions::rel(1e-14))?.value)
    }

    /// Largest jump of φ across a tight grid straddling the junction,
    /// relative to the plateau value.
    pub fn junction_jump(&self) -> f64 {
        let a = self.junction;
        let grid: Vec<f64> = (-8..=8).map(|k| a * (1.0 + k as f64 * 1e-15)).collect();
        grid.windows(2)
            .map(|w| (self.phi(w[1]) - self.phi(w[0])).abs() / self.plateau())
            .fold(0.0, f64::max)
    }

    /// Largest grid point up to which the second differences of φ's slopes
    /// are ≤ `tol`; `None` if concavity fails at the first interior point.
    pub fn concavity_extent(&self, grid: &[f64], tol: f64) -> Option<f64> {
        let mut extent = None;
        for i in 1..grid.len().saturating_sub(1) {
            let (r0, r1, r2) = (grid[i - 1], grid[i], grid[i + 1]);
            let s0 = (self.phi(r1) - self.phi(r0)) / (r1 - r0);
            let s1 = (self.phi(r2) - self.phi(r1)) / (r2 - r1);
            if s1 - s0 > tol {
                break;
            }
            extent = Some(r2);
        }
        extent
    }

    pub fn psi(&self, delta: f64, c: f64) -> Result<Psi<'_>> {
        Psi::new(self, delta, c)
    }

    /// Classifies ∫_{0+} dr / √Φ(r) from truncated integrals.
    pub fn osgood_verdict(&self, r0: f64) -> Result<OsgoodReport> {
        osgood_verdict(self, r0, &OsgoodThresholds::default())
    }
}

// ---------------------------------------------------------------------------
// Ψ_{δ,c}

/// A modulus φ together with its primitive Φ, as consumed by Ψ_{δ,c} and
/// the stability certificates.
pub trait Primitive: Send + Sync {
    fn phi(&self, r: f64) -> f64;
    fn big_phi(&self, r: f64) -> Result<f64>;
    /// ln(e^{2u} Φ(e^{-u})), valid for arbitrarily large u ≥ `switch_u()`.
    fn ln_reduced_primitive(&self, u: f64) -> Result<f64>;
    /// Radius up to which Ψ is integrated in u = -ln s.
    fn switch_radius(&self) -> f64;
    /// `(a, P)` when φ ≡ P on [a, ∞), so that Φ is affine there.
    fn plateau_branch(&self) -> Option<(f64, f64)>;
    /// Short description for report headers.
    fn label(&self) -> String;
}

impl Primitive for Modulus {
    fn phi(&self, r: f64) -> f64 {
        Modulus::phi(self, r)
    }
    fn big_phi(&self, r: f64) -> Result<f64> {
        Modulus::big_phi(self, r)
    }
    fn ln_reduced_primitive(&self, u: f64) -> Result<f64> {
        Modulus::ln_reduced_primitive(self, u)
    }
    fn switch_radius(&self) -> f64 {
        self.junction
    }
    fn plateau_branch(&self) -> Option<(f64, f64)> {
        Some((self.junction, self.plateau()))
    }
    fn label(&self) -> String {
        if self.scale == 1.0 {
            format!("{} d={}", self.theta, self.dim)
        } else {
            format!("{}x {} d={}", self.scale, self.theta, self.dim)
        }
    }
}

/// φ(s) = s, Φ(s) = s²/2. Not of the form φ_Θ; used as a closed-form reference.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearModulus;

impl Primitive for LinearModulus {
    fn phi(&self, r: f64) -> f64 {
        r.max(0.0)
    }
    fn big_phi(&self, r: f64) -> Result<f64> {
        Ok(0.5 * r.max(0.0) * r.max(0.0))
    }
    fn ln_reduced_primitive(&self, _u: f64) -> Result<f64> {
        Ok(-std::f64::consts::LN_2)
    }
    fn switch_radius(&self) -> f64 {
        1.0
    }
    fn plateau_branch(&self) -> Option<(f64, f64)> {
        None
    }
    fn label(&self) -> String {
        "linear".into()
    }
}

/// Ψ_{δ,c}(t) = ∫_0^t ds / (δ + √(2cΦ(s))).
#[derive(Clone, Copy)]
pub struct Psi<'a> {
    modulus: &'a dyn Primitive,
    delta: f64,
    /// ln δ, kept separately so that δ below the f64 range stays usable.
    ln_delta: f64,
    c: f64,
    /// Bracket ceiling for the inverse.
    pub t_max: f64,
}

impl fmt::Debug for Psi<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Psi")
            .field("delta", &self.delta)
            .field("c", &self.c)
            .field("t_max", &self.t_max)
            .finish()
    }
}

pub const DEFAULT_PSI_CEILING: f64 = 1e12;

/// Half-width (in u) of the window around u = -ln δ integrated directly.
const TRANSITION_HALF_WIDTH: f64 = 60.0;

impl<'a> Psi<'a> {
    pub fn new(modulus: &'a dyn Primitive, delta: f64, c: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return invalid(format!("Psi needs delta > 0, got {delta}"));
        }
        if !(c > 0.0 && c.is_finite()) {
            return invalid(format!("Psi needs c > 0, got {c}"));
        }
        Ok(Self {
            modulus,
            delta,
            ln_delta: delta.ln(),
            c,
            t_max: DEFAULT_PSI_CEILING,
        })
    }

    /// Ψ_{δ,c} with δ = e^{ln_delta}; δ may underflow f64.
    pub fn with_ln_delta(modulus: &'a dyn Primitive, ln_delta: f64, c: f64) -> Result<Self> {
        if !ln_delta.is_finite() {
            return invalid(format!("Psi needs a finite ln(delta), got {ln_delta}"));
        }
        let mut psi = Self::new(modulus, 1.0, c)?;
        psi.delta = ln_delta.exp();
        psi.ln_delta = ln_delta;
        Ok(psi)
    }

    pub fn with_ceiling(mut self, t_max: f64) -> Self {
        self.t_max = t_max;
        self
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    fn switch_u(&self) -> f64 {
        -self.modulus.switch_radius().ln()
    }

    /// 1 / (δ e^u + √(2c e^{2u}Φ(e^{-u}))): the integrand in u.
    fn integrand_u(&self, u: f64) -> Result<f64> {
        let lg = self.modulus.ln_reduced_primitive(u)?;
        let root = (0.5 * ((2.0 * self.c).ln() + lg)).exp();
        Ok(1.0 / ((u + self.ln_delta).exp() + root))
    }

    /// Ψ(e^{-u}) for u ≥ -ln(switch radius).
    pub fn eval_u(&self, u: f64) -> Result<f64> {
        // The δe^u term switches on at u ≈ ℓ = -ln δ. Below ℓ - 60 it is
        // negligible and the range can span many decades, so integrate in ln u.
        let ell = -self.ln_delta;
        let mid = u.max(ell - TRANSITION_HALF_WIDTH);
        let mut value = 0.0;
        if mid > u {
            value += integrate_fallible(
                |w| {
                    let s = w.exp();
                    Ok(self.integrand_u(s)? * s)
                },
                &[u.ln(), mid.ln()],
                1e-13,
            )?;
        }
        let end = mid.max(ell) + TRANSITION_HALF_WIDTH;
        let breaks = breakpoints(mid, end, [ell, ell + 5.0, ell - 5.0]);
        value += integrate_fallible(|s| self.integrand_u(s), &breaks, 1e-13)?;
        // ∫_end^∞ ≤ e^{-(end - ℓ)}; end - ℓ is formed exactly since it is lost
        // to rounding when ℓ is huge
        let beyond = (u - ell).max(0.0) + TRANSITION_HALF_WIDTH;
        Ok(value + (-beyond).exp())
    }

    fn integrand_t(&self, s: f64) -> Result<f64> {
        Ok(1.0 / (self.delta + (2.0 * self.c * self.modulus.big_phi(s)?).sqrt()))
    }

    /// Ψ(t).
    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return invalid(format!("Psi argument must be >= 0, got {t}"));
        }
        if t == 0.0 {
            return Ok(0.0);
        }
        let a = self.modulus.switch_radius();
        let ua = self.switch_u();
        if t <= a {
            return self.eval_u((-t.ln()).max(ua));
        }
        Ok(self.eval_u(ua)? + self.beyond_switch(t)?)
    }

    /// ∫_a^t for t past the switch radius a.
    fn beyond_switch(&self, t: f64) -> Result<f64> {
        let a = self.modulus.switch_radius();
        match self.plateau_terms()? {
            Some((_, b_val, wa)) => {
                let w = self.w_of(t)?;
                Ok(self.plateau_integral(wa, w, b_val))
            }
            None => integrate_fallible(|s| self.integrand_t(s), &[a, t], 1e-13),
        }
    }

    /// `(2cΦ(a), 2cP, √(2cΦ(a)))` on a plateau branch.
    fn plateau_terms(&self) -> Result<Option<(f64, f64, f64)>> {
        match self.modulus.plateau_branch() {
            Some((a, p)) => {
                let a_val = 2.0 * self.c * self.modulus.big_phi(a)?;
                let b_val = 2.0 * self.c * p;
                Ok(Some((a_val, b_val, a_val.sqrt())))
            }
            None => Ok(None),
        }
    }

    fn w_of(&self, t: f64) -> Result<f64> {
        Ok((2.0 * self.c * self.modulus.big_phi(t)?).sqrt())
    }

    fn plateau_integral(&self, wa: f64, w: f64, b_val: f64) -> f64 {
        let d = self.delta;
        (2.0 / b_val) * ((w - wa) - d * ((w - wa) / (d + wa)).ln_1p())
    }

    /// dΨ/dt = 1/(δ + √(2cΦ(t))).
    pub fn derivative(&self, t: f64) -> Result<f64> {
        self.integrand_t(t)
    }

    fn range_exceeded(&self, y: f64) -> Result<f64> {
        Err(VpyError::RangeExceeded {
            target: y,
            ceiling: self.t_max,
            ceiling_value: self.eval(self.t_max)?,
        })
    }

    /// Ψ^{-1}(y), with |Ψ(t) - y| ≤ 1e-9(1+y).
    pub fn invert(&self, y: f64) -> Result<f64> {
        if !(y >= 0.0) || !y.is_finite() {
            return invalid(format!("Psi inverse needs finite y >= 0, got {y}"));
        }
        if y == 0.0 {
            return Ok(0.0);
        }
        let ua = self.switch_u();
        let ya = self.eval_u(ua)?;
        let tol = 1e-11 * (1.0 + y);
        if y <= ya {
            // Ψ(e^{-u}) is decreasing in u.
            // Ψ(e^{-u}) ≤ e^{ℓ-u}, so the search stops by u = ℓ - ln y + 1
            let cap = (ua + 1.0).max(-y.ln() - self.ln_delta + 1.0);
            let mut lo = ua;
            let mut hi = (ua + 1.0).min(cap);
            while hi < cap && self.eval_u(hi)? > y {
                lo = hi;
                hi = (2.0 * hi).min(cap);
            }
            let u = safeguarded_newton(|u| Ok((self.eval_u(u)? - y, -self.integrand_u(u)?)), lo, hi, tol)?;
            return Ok((-u).exp());
        }
        let target = y - ya;
        let a = self.modulus.switch_radius();
        if self.t_max <= a || self.beyond_switch(self.t_max)? < target {
            return self.range_exceeded(y);
        }
        match self.plateau_terms()? {
            Some((a_val, b_val, wa)) => {
                // closed form in w = √(2cΦ(t))
                let w_max = self.w_of(self.t_max)?;
                let w = safeguarded_newton(
                    |w| {
                        Ok((
                            self.plateau_integral(wa, w, b_val) - target,
                            (2.0 / b_val) * w / (self.delta + w),
                        ))
                    },
                    wa,
                    w_max,
                    tol,
                )?;
                Ok((a + (w * w - a_val) / b_val).min(self.t_max))
            }
            None => safeguarded_newton(
                |t| Ok((self.beyond_switch(t)? - target, self.integrand_t(t)?)),
                a,
                self.t_max,
                tol,
            ),
        }
    }
}

/// Root of an increasing or decreasing `f` on `[lo, hi]` (values of opposite
/// sign at the ends), Newton steps guarded by bisection.
fn safeguarded_newton(f: impl Fn(f64) -> Result<(f64, f64)>, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let (mut lo, mut hi) = (lo, hi);
    let (f_lo, _) = f(lo)?;
    let rising = f_lo < 0.0;
    let mut x = 0.5 * (lo + hi);
    for _ in 0..300 {
        let (fx, dfx) = f(x)?;
        if fx.abs() <= tol {
            // one polishing step; the residual tolerance alone is loose where f is flat
            let polished = x - fx / dfx;
            let inside = polished.is_finite() && polished >= lo.min(hi) && polished <= hi.max(lo);
            return Ok(if inside { polished } else { x });
        }
        if (fx < 0.0) == rising {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(lo.abs()) {
            return Ok(x);
        }
        let newton = x - fx / dfx;
        x = if newton > lo && newton < hi && newton.is_finite() {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Err(VpyError::NumericFailure {
        what: "root search did not converge".into(),
        estimate: hi - lo,
    })
}

/// Adaptive quadrature of a fallible integrand; the first error wins.
fn integrate_fallible(f: impl Fn(f64) -> Result<f64>, breaks: &[f64], rel: f64) -> Result<f64> {
    let mut failure = None;
    let g = |x: f64| match f(x) {
        Ok(v) => v,
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    };
    let r = integrate_breaks(g, breaks, QuadOptions::rel(rel));
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(r?.value)
}

// ---------------------------------------------------------------------------
// Osgood classification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OsgoodVerdict {
    Diverges,
    Converges,
    Inconclusive,
}

/// Thresholds of the increment test; reported with every verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OsgoodThresholds {
    /// Each of the last three increments must exceed this fraction of the median.
    pub diverge_fraction: f64,
    /// ...and the last increment ratio must be at least this (no decay).
    pub diverge_min_ratio: f64,
    /// Convergence: the last `converge_window` increment ratios are all below this.
    pub converge_ratio: f64,
    pub converge_window: usize,
    /// Smallest truncation radius of the decade grid.
    pub eps_floor: f64,
    /// Steps per condensation level above 0.
    pub steps_per_level: usize,
    /// Highest condensation level tried.
    pub max_level: u32,
}

impl Default for OsgoodThresholds {
    fn default() -> Self {
        Self {
            diverge_fraction: 0.5,
            diverge_min_ratio: 0.85,
            converge_ratio: 0.9,
            converge_window: 5,
            eps_floor: 1e-300,
            steps_per_level: 16,
            max_level: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OsgoodSample {
    /// ln(1/ε).
    pub log_inv_eps: f64,
    /// ε itself (0 once it underflows).
    pub eps: f64,
    /// ∫_ε^{r0} dr / √Φ(r).
    pub integral: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsgoodReport {
    pub verdict: OsgoodVerdict,
    /// Truncated integrals on the decade grid ε = r0·10^{-k}.
    pub samples: Vec<OsgoodSample>,
    /// d ln J / d ln ln(1/ε) at the end of the decade grid.
    pub slope_estimate: f64,
    /// Condensation level at which the verdict was reached.
    pub level: u32,
    /// Increments of the deciding level.
    pub increments: Vec<f64>,
    pub thresholds: OsgoodThresholds,
}

fn classify(incs: &[f64], th: &OsgoodThresholds) -> OsgoodVerdict {
    let n = incs.len();
    if n < th.converge_window + 2 || n < 4 {
        return OsgoodVerdict::Inconclusive;
    }
    let mut sorted = incs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let median = sorted[n / 2];
    let tail_ok = incs[n - 3..].iter().all(|&x| x > th.diverge_fraction * median);
    let last_ratio = incs[n - 1] / incs[n - 2];
    if median > 0.0 && tail_ok && last_ratio >= th.diverge_min_ratio {
        return OsgoodVerdict::Diverges;
    }
    let decaying = incs[n - th.converge_window - 1..]
        .windows(2)
        .all(|w| w[1] < th.converge_ratio * w[0]);
    if decaying {
        return OsgoodVerdict::Converges;
    }
    OsgoodVerdict::Inconclusive
}

/// Runs the increment test at condensation levels 0..=max_level.
///
/// Level 0 uses per-decade increments in ε. Level j ≥ 1 uses equal steps in
/// the j-fold logarithm of ln(1/ε), which turns iterated-logarithmic
/// divergence into linear growth. All levels cover the same range
/// ε ∈ [eps_floor, r0].
pub fn osgood_verdict(m: &Modulus, r0: f64, th: &OsgoodThresholds) -> Result<OsgoodReport> {
    if !(r0 > 0.0 && r0 < m.junction()) {
        return invalid(format!(
            "Osgood test needs r0 in (0, {}) (non-plateau branch), got {r0}",
            m.junction()
        ));
    }
    let u0 = -r0.ln();
    let u_floor = -th.eps_floor.ln();
    if !(u_floor > u0) {
        return invalid("eps_floor must be below r0");
    }
    let ln_h = |u: f64| -> Result<f64> { Ok(-0.5 * m.ln_reduced_primitive(u)?) };

    // level 0: decades in ε
    let step0 = std::f64::consts::LN_10;
    let mut samples = vec![OsgoodSample {
        log_inv_eps: u0,
        eps: r0,
        integral: 0.0,
    }];
    let mut incs0 = Vec::new();
    let mut u = u0;
    let mut acc = 0.0;
    while u + step0 <= u_floor + 1e-9 {
        let inc = integrate_fallible(|s| ln_h(s).map(f64::exp), &[u, u + step0], 1e-10)?;
        acc += inc;
        u += step0;
        incs0.push(inc);
        samples.push(OsgoodSample {
            log_inv_eps: u,
            eps: (-u).exp(),
            integral: acc,
        });
    }
    let n = samples.len();
    let back = 10.min(n - 1);
    let (a, b) = (&samples[n - 1 - back], &samples[n - 1]);
    let slope_estimate = if a.integral > 0.0 {
        (b.integral.ln() - a.integral.ln()) / (b.log_inv_eps.ln() - a.log_inv_eps.ln())
    } else {
        f64::NAN
    };

    let mut verdict = classify(&incs0, th);
    let mut level = 0;
    let mut increments = incs0;
    if verdict == OsgoodVerdict::Inconclusive {
        for j in 1..=th.max_level {
            let w0 = nested_ln(j, u0);
            let w1 = nested_ln(j, u_floor);
            if !(w0.is_finite() && w1 > w0) {
                continue;
            }
            let steps = th.steps_per_level;
            let dw = (w1 - w0) / steps as f64;
            let integrand = |w: f64| -> Result<f64> {
                let mut uu = w;
                for _ in 0..j {
                    uu = uu.exp();
                }
                // du/dw = Π_{i<j} L_i(u), L_0 = u, L_i = ln L_{i-1}
                let mut ln_jac = 0.0;
                let mut li = uu;
                for _ in 0..j {
                    ln_jac += li.ln();
                    li = li.ln();
                }
                Ok((ln_h(uu)? + ln_jac).exp())
            };
            let mut incs = Vec::with_capacity(steps);
            for k in 0..steps {
                let a = w0 + dw * k as f64;
                incs.push(integrate_fallible(integrand, &[a, a + dw], 1e-10)?);
            }
            let v = classify(&incs, th);
            level = j;
            increments = incs;
            verdict = v;
            if v != OsgoodVerdict::Inconclusive {
                break;
            }
        }
    }
    Ok(OsgoodReport {
        verdict,
        samples,
        slope_estimate,
        level,
        increments,
        thresholds: *th,
    })
}
