use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub name: String,
    pub command: Vec<String>,
    /// Seconds since the Unix epoch. The only field that differs between
    /// otherwise identical runs.
    pub timestamp: u64,
    pub config: BTreeMap<String, serde_json::Value>,
    pub thresholds: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
    pub tables: BTreeMap<String, Table>,
    pub pass: bool,
}

impl Report {
    /// Starts a report for `name`; the command line is echoed verbatim.
    pub fn new(name: &str) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            schema_version: SCHEMA_VERSION,
            name: name.to_string(),
            command: std::env::args().skip(1).collect(),
            timestamp,
            config: BTreeMap::new(),
            thresholds: BTreeMap::new(),
            metrics: BTreeMap::new(),
            tables: BTreeMap::new(),
            pass: false,
        }
    }

    pub fn config(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.config.insert(key.into(), value.into());
    }

    pub fn threshold(&mut self, key: &str, value: f64) {
        self.thresholds.insert(key.into(), value);
    }

    pub fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    pub fn to_json(&self) -> Result<String> {
        // JSON has no NaN or infinity; refuse rather than write nulls
        let finite = |v: &f64| v.is_finite();
        if let Some((k, _)) = self.metrics.iter().find(|(_, v)| !finite(v)) {
            bail!("metric `{k}` is not finite");
        }
        for (name, t) in &self.tables {
            if t.rows.iter().flatten().any(|v| !finite(v)) {
                bail!("table `{name}` has a non-finite entry");
            }
        }
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes `<name>.json` plus `<name>_<table>.csv` for every table and
    /// returns the JSON path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let name = &self.name;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let json = dir.join(format!("{name}.json"));
        fs::write(&json, self.to_json()?).with_context(|| format!("writing {}", json.display()))?;
        for (t, table) in &self.tables {
            let path = dir.join(format!("{name}_{t}.csv"));
            fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(json)
    }

    pub fn summary(&self) -> String {
        let mut out = format!("{}: {}\n", self.name, if self.pass { "PASS" } else { "FAIL" });
        for (k, v) in &self.metrics {
            out.push_str(&format!("  {k} = {v}\n"));
        }
        for (k, v) in &self.thresholds {
            out.push_str(&format!("  threshold {k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut r = Report::new("verify-toy");
        r.config("theta", 0.5);
        r.threshold("tol", 1e-8);
        r.metric("dice.d2", -4.000000000000001);
        r.metric("tiny", 1.2345678901234567e-300);
        let mut t = Table::new(&["order", "value"]);
        t.push(vec![0.0, 0.1 + 0.2]);
        r.tables.insert("dice".into(), t);
        r.pass = true;
        let back: Report = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn non_finite_metrics_are_rejected() {
        let mut r = Report::new("x");
        r.metric("bad", f64::NAN);
        assert!(r.to_json().is_err());
    }

    #[test]
    fn csv_layout() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![1.0, -2.5]);
        assert_eq!(t.to_csv(), "a,b\n1,-2.5\n");
    }
}
