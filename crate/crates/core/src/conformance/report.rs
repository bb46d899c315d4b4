use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::tolerance::Bounds;

pub const SUITE_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub stimulus: String,
    pub expected: Option<f64>,
    pub measured: f64,
    pub delta: Option<f64>,
    pub bound_lo: Option<f64>,
    pub bound_hi: Option<f64>,
    pub pass: bool,
}

impl ReportRow {
    /// Row whose delta `measured - expected` must fall within `bounds`.
    pub fn checked(stimulus: impl Into<String>, expected: f64, measured: f64, bounds: Bounds) -> Self {
        let delta = measured - expected;
        Self {
            stimulus: stimulus.into(),
            expected: Some(expected),
            measured,
            delta: Some(delta),
            bound_lo: Some(bounds.lower),
            bound_hi: Some(bounds.upper),
            pass: delta.is_finite() && bounds.contains(delta),
        }
    }

    /// Row that is reported but never fails.
    pub fn info(stimulus: impl Into<String>, expected: Option<f64>, measured: f64) -> Self {
        Self {
            stimulus: stimulus.into(),
            delta: expected.map(|e| measured - e),
            expected,
            measured,
            bound_lo: None,
            bound_hi: None,
            pass: true,
        }
    }

    /// Row that passes when `measured` lies in `[lo, hi]` (either side optional).
    pub fn limit(stimulus: impl Into<String>, measured: f64, lo: Option<f64>, hi: Option<f64>) -> Self {
        let pass = measured.is_finite()
            && lo.map_or(true, |l| measured >= l - 1e-9)
            && hi.map_or(true, |h| measured <= h + 1e-9);
        Self {
            stimulus: stimulus.into(),
            expected: None,
            measured,
            delta: None,
            bound_lo: lo,
            bound_hi: hi,
            pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub id: String,
    pub rows: Vec<ReportRow>,
    pub pass: bool,
    pub seed: u64,
    pub sample_rate_hz: u32,
}

impl TestReport {
    pub fn new(id: impl Into<String>, rows: Vec<ReportRow>, seed: u64, sample_rate_hz: u32) -> Self {
        let pass = rows.iter().all(|r| r.pass);
        Self {
            id: id.into(),
            rows,
            pass,
            seed,
            sample_rate_hz,
        }
    }

    pub fn row(&self, stimulus: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.stimulus == stimulus)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite_version: String,
    pub seed: u64,
    pub tests: Vec<TestReport>,
    pub overall_pass: bool,
}

/// Collects test reports into one document. An empty list passes.
pub fn emit_report(reports: Vec<TestReport>, seed: u64) -> SuiteReport {
    SuiteReport {
        suite_version: SUITE_VERSION.into(),
        seed,
        overall_pass: reports.iter().all(|r| r.pass),
        tests: reports,
    }
}

impl SuiteReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn test(&self, id: &str) -> Option<&TestReport> {
        self.tests.iter().find(|t| t.id == id)
    }

    /// Plain-text tables; `*` marks rows that meet their bounds.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let num = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        for t in &self.tests {
            let _ = writeln!(s, "{} [{}]", t.id, if t.pass { "PASS" } else { "FAIL" });
            let _ = writeln!(
                s,
                "  {:<14} {:>9} {:>9} {:>8} {:>13}",
                "stimulus", "expected", "measured", "delta", "bounds"
            );
            for r in &t.rows {
                let bounds = match (r.bound_lo, r.bound_hi) {
                    (None, None) => "-".to_string(),
                    (lo, hi) => format!("{}..{}", num(lo), num(hi)),
                };
                let _ = writeln!(
                    s,
                    "  {:<14} {:>9} {:>9} {:>7}{} {:>13}",
                    r.stimulus,
                    num(r.expected),
                    format!("{:.2}", r.measured),
                    num(r.delta),
                    if r.pass { "*" } else { " " },
                    bounds
                );
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "overall: {}",
            if self.overall_pass { "PASS" } else { "FAIL" }
        );
        s
    }
}
