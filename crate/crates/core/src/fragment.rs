//! Flat key-value config fragments (`kind = "iterated_log"`, `m = 1`) for
//! growth functions and radial profiles.

use toml::{Table, Value};

use crate::error::{invalid, Result};

/// Read access to one fragment; `prefix` only shapes error messages.
pub(crate) struct Reader<'a> {
    table: &'a Table,
    prefix: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(table: &'a Table, prefix: &'a str) -> Self {
        Self { table, prefix }
    }

    pub(crate) fn key(&self, k: &str) -> String {
        if self.prefix.is_empty() {
            k.to_string()
        } else {
            format!("{}.{k}", self.prefix)
        }
    }

    /// Rejects keys outside `allowed` (plus `kind`).
    pub(crate) fn only(&self, kind: &str, allowed: &[&str]) -> Result<()> {
        for k in self.table.keys() {
            if k != "kind" && !allowed.contains(&k.as_str()) {
                return invalid(format!("key '{}' does not apply to kind \"{kind}\"", self.key(k)));
            }
        }
        Ok(())
    }

    pub(crate) fn kind(&self) -> Result<&'a str> {
        match self.table.get("kind") {
            Some(Value::String(s)) => Ok(s),
            Some(other) => invalid(format!("key '{}' must be a string, got {other}", self.key("kind"))),
            None => invalid(format!("missing required key '{}'", self.key("kind"))),
        }
    }

    pub(crate) fn f64_opt(&self, k: &str) -> Result<Option<f64>> {
        match self.table.get(k) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(other) => invalid(format!("key '{}' must be a number, got {other}", self.key(k))),
        }
    }

    pub(crate) fn f64_req(&self, k: &str) -> Result<f64> {
        self.f64_opt(k)?
            .map_or_else(|| invalid(format!("missing required key '{}'", self.key(k))), Ok)
    }

    pub(crate) fn u32_opt(&self, k: &str) -> Result<Option<u32>> {
        match self.table.get(k) {
            None => Ok(None),
            Some(Value::Integer(i)) if (0..=i64::from(u32::MAX)).contains(i) => Ok(Some(*i as u32)),
            Some(other) => invalid(format!(
                "key '{}' must be a non-negative integer, got {other}",
                self.key(k)
            )),
        }
    }

    pub(crate) fn u32_req(&self, k: &str) -> Result<u32> {
        self.u32_opt(k)?
            .map_or_else(|| invalid(format!("missing required key '{}'", self.key(k))), Ok)
    }

    pub(crate) fn f64_list(&self, k: &str) -> Result<Vec<f64>> {
        let bad = || invalid::<Vec<f64>>(format!("key '{}' must be a list of numbers", self.key(k)));
        match self.table.get(k) {
            None => invalid(format!("missing required key '{}'", self.key(k))),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| match v {
                    Value::Float(f) => Some(*f),
                    Value::Integer(i) => Some(*i as f64),
                    _ => None,
                })
                .collect::<Option<Vec<f64>>>()
                .map_or_else(bad, Ok),
            Some(_) => bad(),
        }
    }
}

pub(crate) fn table<const N: usize>(entries: [(&str, Value); N]) -> Table {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}
