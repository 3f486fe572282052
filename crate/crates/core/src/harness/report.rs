use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// One seeded check. Re-running the named target with `seed` reproduces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCase {
    pub seed: u64,
    pub target: String,
    pub tolerance: f64,
    pub oracle: String,
}

impl OracleCase {
    pub fn new(seed: u64, target: &str, tolerance: f64, oracle: &str) -> Self {
        Self {
            seed,
            target: target.into(),
            tolerance,
            oracle: oracle.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case: OracleCase,
    pub passed: bool,
    /// Measured discrepancy; exact checks report 0 or 1.
    pub error: f64,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: String,
    pub cases: usize,
    pub failures: usize,
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub outcomes: Vec<CaseOutcome>,
}

impl SuiteReport {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            outcomes: Vec::new(),
        }
    }

    /// Records a measured error; NaN never passes.
    pub fn measure(&mut self, case: OracleCase, error: f64) {
        let passed = error <= case.tolerance;
        let message = (!passed).then(|| {
            format!(
                "error {error:e} exceeds tolerance {:e} (seed {})",
                case.tolerance, case.seed
            )
        });
        self.outcomes.push(CaseOutcome {
            case,
            passed,
            error,
            message,
        });
    }

    /// Records an exact check.
    pub fn check(&mut self, case: OracleCase, result: std::result::Result<(), String>) {
        let (passed, message) = match result {
            Ok(()) => (true, None),
            Err(m) => (false, Some(format!("{m} (seed {})", case.seed))),
        };
        self.outcomes.push(CaseOutcome {
            case,
            passed,
            error: if passed { 0.0 } else { 1.0 },
            message,
        });
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseOutcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }

    pub fn is_success(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    /// Per-target counts and maximum error, in target name order.
    pub fn summaries(&self) -> Vec<TargetSummary> {
        let mut by: BTreeMap<&str, TargetSummary> = BTreeMap::new();
        for o in &self.outcomes {
            let s = by.entry(&o.case.target).or_insert_with(|| TargetSummary {
                target: o.case.target.clone(),
                cases: 0,
                failures: 0,
                max_error: 0.0,
            });
            s.cases += 1;
            s.failures += usize::from(!o.passed);
            if o.error.is_nan() || o.error > s.max_error {
                s.max_error = o.error;
            }
        }
        by.into_values().collect()
    }

    pub fn summary_text(&self) -> String {
        let summaries = self.summaries();
        let width = summaries
            .iter()
            .map(|s| s.target.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut out = format!(
            "{}: {} cases, {} failed\n",
            self.name,
            self.outcomes.len(),
            self.failures().count()
        );
        let _ = writeln!(out, "  {:<width$}  {:>6}  {:>6}  {:>10}", "target", "cases", "failed", "max_error");
        for s in &summaries {
            let _ = writeln!(
                out,
                "  {:<width$}  {:>6}  {:>6}  {:>10.3e}",
                s.target, s.cases, s.failures, s.max_error
            );
        }
        for f in self.failures().take(20) {
            let _ = writeln!(
                out,
                "  FAIL {} [{}]: {}",
                f.case.target,
                f.case.oracle,
                f.message.as_deref().unwrap_or("")
            );
        }
        out
    }
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// JUnit-style XML: one `<testsuite>` per report, one `<testcase>` per
/// target, with a `<failure>` element listing the failing seeds.
pub fn junit_xml(reports: &[SuiteReport]) -> String {
    let tests: usize = reports.iter().map(|r| r.summaries().len()).sum();
    let failures: usize = reports
        .iter()
        .map(|r| r.summaries().iter().filter(|s| s.failures > 0).count())
        .sum();
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(out, "<testsuites tests=\"{tests}\" failures=\"{failures}\">");
    for r in reports {
        let summaries = r.summaries();
        let _ = writeln!(
            out,
            "  <testsuite name=\"{}\" tests=\"{}\" failures=\"{}\">",
            xml_escape(&r.name),
            summaries.len(),
            summaries.iter().filter(|s| s.failures > 0).count()
        );
        for s in &summaries {
            let _ = write!(
                out,
                "    <testcase classname=\"{}\" name=\"{}\"",
                xml_escape(&r.name),
                xml_escape(&s.target)
            );
            if s.failures == 0 {
                out.push_str("/>\n");
                continue;
            }
            out.push_str(">\n");
            let detail: Vec<String> = r
                .failures()
                .filter(|f| f.case.target == s.target)
                .map(|f| f.message.clone().unwrap_or_default())
                .collect();
            let _ = writeln!(
                out,
                "      <failure message=\"{} of {} cases failed\">{}</failure>",
                s.failures,
                s.cases,
                xml_escape(&detail.join("\n"))
            );
            out.push_str("    </testcase>\n");
        }
        out.push_str("  </testsuite>\n");
    }
    out.push_str("</testsuites>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summaries_and_xml() {
        let mut r = SuiteReport::new("demo");
        r.measure(OracleCase::new(1, "a", 1e-4, "fd"), 1e-6);
        r.measure(OracleCase::new(2, "a", 1e-4, "fd"), 1e-3);
        r.measure(OracleCase::new(3, "b", 1e-4, "fd"), f64::NAN);
        r.check(OracleCase::new(4, "c<&>", 0.0, "exact"), Ok(()));
        assert!(!r.is_success());
        let s = r.summaries();
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].cases, s[0].failures, s[0].max_error), (2, 1, 1e-3));
        assert!(s[1].max_error.is_nan());
        assert!(r.summary_text().contains("seed 2"));
        let xml = junit_xml(&[r]);
        assert!(xml.contains("tests=\"3\" failures=\"2\""));
        assert!(xml.contains("c&lt;&amp;&gt;"));
        assert_eq!(xml.matches("<failure").count(), 2);
    }
}
