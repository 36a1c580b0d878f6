//! Flat dotted-key configuration: one TOML file plus `--key value` overrides.

use std::sync::Mutex;
use std::collections::BTreeMap;
use std::path::Path;

use toml::Value;
use vpy_core::growth::GrowthFunction;
use vpy_core::yudovich::RadialProfile;
use vpy_core::{Result, VpyError};

/// Short command-line spellings for common keys.
const ALIASES: &[(&str, &str)] = &[
    ("theta", "theta.kind"),
    ("m", "theta.m"),
    ("alpha", "theta.alpha"),
    ("d", "sim.d"),
    ("N", "sim.N"),
    ("kappa", "sim.kappa"),
    ("L", "certify.L"),
    ("T", "dynamics.T"),
    ("dt", "dynamics.dt"),
    ("w1", "certify.w1"),
    ("perturb", "stability.perturb"),
    ("out", "output_dir"),
    ("sim.T", "dynamics.T"),
    ("sim.dt", "dynamics.dt"),
    ("sim.seed", "seed"),
    ("kernel.kappa", "sim.kappa"),
    ("diagnostics.every", "sim.diag_every"),
    ("dynamics.diag_every", "sim.diag_every"),
];

fn invalid(msg: String) -> VpyError {
    VpyError::InvalidInput(msg)
}

/// Key-value configuration. Every value read (including defaults) is
/// recorded so the manifest lists all knobs that shaped a run.
#[derive(Debug, Default)]
pub struct Config {
    values: BTreeMap<String, Value>,
    resolved: Mutex<BTreeMap<String, Value>>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Parses a command-line value: TOML scalar or array if it parses, string otherwise.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| invalid(format!("config: {}", e.message())))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        let mut cfg = Self::default();
        for (k, v) in flat {
            cfg.set(&k, v);
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn set(&mut self, key: &str, value: Value) {
        let key = ALIASES
            .iter()
            .find(|(a, _)| *a == key)
            .map_or(key, |(_, full)| full);
        self.values.insert(key.to_string(), value);
    }

    /// Applies `--key value` pairs; `--config` is handled by the caller.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| invalid(format!("expected --key, got '{flag}'")))?;
            let raw = it
                .next()
                .ok_or_else(|| invalid(format!("missing value for --{key}")))?;
            self.set(key, parse_value(raw));
        }
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, Value>> {
        self.resolved.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn record(&self, key: &str, v: Value) {
        self.lock().insert(key.to_string(), v);
    }

    /// All keys read so far with the values used.
    pub fn resolved(&self) -> BTreeMap<String, Value> {
        self.lock().clone()
    }

    /// Keys present in the input that no experiment step read.
    pub fn unused(&self) -> Vec<String> {
        let r = self.lock();
        self.values.keys().filter(|k| !r.contains_key(*k)).cloned().collect()
    }

    fn raw(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }

    pub fn f64_opt(&self, key: &str) -> Result<Option<f64>> {
        let v = match self.raw(key) {
            None => return Ok(None),
            Some(Value::Float(f)) => *f,
            Some(Value::Integer(i)) => *i as f64,
            Some(other) => return Err(invalid(format!("key '{key}' must be a number, got {other}"))),
        };
        self.record(key, Value::Float(v));
        Ok(Some(v))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.f64_opt(key)?.unwrap_or(default);
        self.record(key, Value::Float(v));
        Ok(v)
    }

    pub fn f64_req(&self, key: &str) -> Result<f64> {
        self.f64_opt(key)?
            .ok_or_else(|| invalid(format!("missing required key '{key}'")))
    }

    pub fn u64_opt(&self, key: &str) -> Result<Option<u64>> {
        let v = match self.raw(key) {
            None => return Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(Value::Float(f)) if *f >= 0.0 && f.fract() == 0.0 && *f < 9e15 => *f as u64,
            Some(other) => {
                return Err(invalid(format!(
                    "key '{key}' must be a non-negative integer, got {other}"
                )))
            }
        };
        self.record(key, Value::Integer(v as i64));
        Ok(Some(v))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        let v = self.u64_opt(key)?.unwrap_or(default);
        self.record(key, Value::Integer(v as i64));
        Ok(v)
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.u64_or(key, default as u64)? as usize)
    }

    pub fn str_opt(&self, key: &str) -> Result<Option<String>> {
        let v = match self.raw(key) {
            None => return Ok(None),
            Some(Value::String(s)) => s.clone(),
            Some(other) => return Err(invalid(format!("key '{key}' must be a string, got {other}"))),
        };
        self.record(key, Value::String(v.clone()));
        Ok(Some(v))
    }

    pub fn str_or(&self, key: &str, default: &str) -> Result<String> {
        let v = self.str_opt(key)?.unwrap_or_else(|| default.to_string());
        self.record(key, Value::String(v.clone()));
        Ok(v)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        let v = match self.raw(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(other) => return Err(invalid(format!("key '{key}' must be true or false, got {other}"))),
        };
        self.record(key, Value::Boolean(v));
        Ok(v)
    }

    /// A list of numbers, given as a TOML array.
    pub fn f64_list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        let v = match self.raw(key) {
            None => default.to_vec(),
            Some(Value::Array(a)) => a
                .iter()
                .map(|x| match x {
                    Value::Float(f) => Ok(*f),
                    Value::Integer(i) => Ok(*i as f64),
                    other => Err(invalid(format!("key '{key}' must hold numbers, got {other}"))),
                })
                .collect::<Result<Vec<_>>>()?,
            Some(Value::Float(f)) => vec![*f],
            Some(Value::Integer(i)) => vec![*i as f64],
            Some(other) => return Err(invalid(format!("key '{key}' must be an array of numbers, got {other}"))),
        };
        self.record(key, Value::Array(v.iter().map(|x| Value::Float(*x)).collect()));
        Ok(v)
    }

    /// `<prefix>.kind` plus those of `keys` present, as one table, marked
    /// as read. Other `<prefix>.*` keys stay unused.
    pub fn fragment(&self, prefix: &str, keys: impl Fn(&str) -> &'static [&'static str]) -> toml::Table {
        let mut out = toml::Table::new();
        let kind_key = format!("{prefix}.kind");
        let Some(kind) = self.raw(&kind_key).cloned() else {
            return out;
        };
        self.record(&kind_key, kind.clone());
        if let toml::Value::String(k) = &kind {
            for name in keys(k) {
                let full = format!("{prefix}.{name}");
                if let Some(v) = self.raw(&full) {
                    self.record(&full, v.clone());
                    out.insert(name.to_string(), v.clone());
                }
            }
        }
        out.insert("kind".into(), kind);
        out
    }

    /// A growth function from the `<prefix>.kind` fragment.
    pub fn growth(&self, prefix: &str) -> Result<GrowthFunction> {
        GrowthFunction::from_fragment(&self.fragment(prefix, GrowthFunction::fragment_keys), prefix)
    }

    /// A radial density from the `<prefix>.kind` fragment.
    pub fn density(&self, prefix: &str, dim: usize) -> Result<RadialProfile> {
        RadialProfile::from_fragment(&self.fragment(prefix, RadialProfile::fragment_keys), prefix, dim)
    }
}
