//! Scenario reports: a human-readable table and sorted `key=value` lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScenarioReport {
    pub name: String,
    pub kind: String,
    pub seed: u64,
    pub values: BTreeMap<String, String>,
    pub checks: Vec<Check>,
}

impl ScenarioReport {
    pub fn new(name: &str, kind: &str, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            kind: kind.to_string(),
            seed,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.values.insert(key.into(), value.to_string());
    }

    pub fn extend(&mut self, lines: impl IntoIterator<Item = (String, String)>) {
        self.values.extend(lines);
    }

    pub fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            pass,
            detail: detail.into(),
        });
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario {} (kind {}, seed {})", self.name, self.kind, self.seed);
        let width = self.values.keys().map(String::len).max().unwrap_or(6).max(6);
        let _ = writeln!(out, "\n{:<width$}  value", "metric");
        let _ = writeln!(out, "{:-<width$}  {:-<12}", "", "");
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        if !self.checks.is_empty() {
            let _ = writeln!(out, "\nchecks");
            for c in &self.checks {
                let _ = writeln!(out, "  {}  {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
        }
        let _ = writeln!(out, "\nresult: {}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }

    pub fn to_machine(&self) -> String {
        let mut lines = BTreeMap::new();
        lines.insert("scenario.name".to_string(), self.name.clone());
        lines.insert("scenario.kind".to_string(), self.kind.clone());
        lines.insert("scenario.seed".to_string(), self.seed.to_string());
        for (k, v) in &self.values {
            lines.insert(k.clone(), v.clone());
        }
        for c in &self.checks {
            lines.insert(format!("check.{}", c.name), if c.pass { "pass" } else { "fail" }.to_string());
        }
        lines.insert("result".to_string(), if self.passed() { "pass" } else { "fail" }.to_string());
        lines.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
