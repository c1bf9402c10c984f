//! CSV tables with self-describing headers, and the per-run summary.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Fixed 17-significant-digit formatting, so reruns are byte-identical.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// One column: name and unit.
pub struct Column {
    pub name: &'static str,
    pub unit: &'static str,
}

pub const fn col(name: &'static str, unit: &'static str) -> Column {
    Column { name, unit }
}

pub struct Table {
    pub statistic: &'static str,
    pub formula: &'static str,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(statistic: &'static str, formula: &'static str, columns: Vec<Column>) -> Self {
        Self {
            statistic,
            formula,
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, plan: &str, seed: u64) -> Result<Vec<u8>, csv::Error> {
        let mut out = Vec::new();
        let names: Vec<&str> = self.columns.iter().map(|c| c.name).collect();
        let units: Vec<String> = self.columns.iter().map(|c| format!("{}={}", c.name, c.unit)).collect();
        writeln!(out, "# plan: {plan}")?;
        writeln!(out, "# statistic: {}", self.statistic)?;
        writeln!(out, "# formula: {}", self.formula)?;
        writeln!(out, "# columns: {}", names.join(", "))?;
        writeln!(out, "# units: {}", units.join("; "))?;
        writeln!(out, "# seed: {seed}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&names)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
    }

    pub fn write(&self, path: &Path, plan: &str, seed: u64) -> std::io::Result<()> {
        let bytes = self.render(plan, seed).map_err(std::io::Error::other)?;
        std::fs::write(path, bytes)
    }
}

/// Outcome of one verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    /// Fitted constants and other headline numbers.
    #[serde(default)]
    pub values: Vec<(String, f64)>,
    pub csv: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub criterion: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub plan: String,
    pub regime: String,
    pub command: String,
    pub seed: u64,
    pub replications: usize,
    pub criteria: Vec<CriterionResult>,
    pub failures: Vec<Failure>,
    pub admissible_m: Option<f64>,
}

impl Summary {
    pub fn all_pass(&self) -> bool {
        self.failures.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_have_seventeen_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(-2.0), "-2.0000000000000000e0");
        assert_eq!(num(f64::INFINITY), "inf");
    }

    #[test]
    fn header_precedes_rows() {
        let mut t = Table::new("x", "x = 1", vec![col("n", "count"), col("x", "nats")]);
        t.push(vec!["1".into(), num(1.0)]);
        let text = String::from_utf8(t.render("p", 9).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[5], "# seed: 9");
        assert_eq!(lines[6], "n,x");
        assert_eq!(lines[7], "1,1.0000000000000000e0");
    }
}
