//! Named groups of acceptance checks and their report.

use serde::Serialize;

use crate::checks::{run_check, CheckReport, Settings, CHECKS};
use crate::error::{GeoError, Result};

pub const SUITES: [&str; 7] = ["geodesic", "haar", "immersion", "diffeo", "gauge", "action", "all"];

/// Criterion ids run by a suite.
pub fn suite_criteria(suite: &str) -> Result<Vec<u32>> {
    Ok(match suite {
        "geodesic" => vec![1, 2],
        "haar" => vec![3, 4, 5],
        "immersion" => vec![6],
        "diffeo" => vec![7, 8, 9],
        "gauge" => vec![10, 11],
        "action" => vec![12],
        "all" => CHECKS.iter().map(|c| c.0).collect(),
        other => {
            return Err(GeoError::Precondition(format!("unknown suite '{other}' (known: {})", SUITES.join(", "))))
        }
    })
}

/// Fixed resolutions the checks run at, for the environment stamp.
pub const GRID_SIZES: &str =
    "haar_patch=12x12; structure=32,64,128; circle=128,256; sphere=64x64; builtins=32; sphere_smooth=384x384";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub version: String,
    pub seed: u64,
    pub scales: Vec<f64>,
    pub grid_sizes: String,
    pub checks: Vec<CheckReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One row per measurement, preceded by `#` environment lines.
    pub fn to_csv(&self) -> String {
        let scales: Vec<String> = self.scales.iter().map(|s| format!("{s}")).collect();
        let mut out = format!(
            "# geocalc {} suite={} seed={} scales={} grids={}\n",
            self.version,
            self.suite,
            self.seed,
            scales.join(";"),
            self.grid_sizes
        );
        out.push_str("criterion,check,measurement,value,requirement,pass\n");
        for c in &self.checks {
            for m in &c.measurements {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    c.criterion,
                    c.name,
                    m.label,
                    m.shown(),
                    m.requirement.replace(',', ";"),
                    m.passed
                ));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&c.summary_line());
            out.push('\n');
            for m in &c.measurements {
                let mark = if m.passed { " " } else { "!" };
                out.push_str(&format!("   {mark} {} = {} ({})\n", m.label, m.shown(), m.requirement));
            }
        }
        let n = self.checks.iter().filter(|c| c.passed).count();
        out.push_str(&format!("suite {}: {n}/{} checks passed\n", self.suite, self.checks.len()));
        out
    }
}

/// Runs every check of `suite`; check failures are recorded, not raised.
pub fn run_suite(settings: &Settings, suite: &str) -> Result<SuiteReport> {
    let ids = suite_criteria(suite)?;
    let checks = ids.iter().map(|&id| run_check(settings, id)).collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        suite: suite.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: settings.seed,
        scales: settings.scales.clone(),
        grid_sizes: GRID_SIZES.to_string(),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::ManifoldCase;

    #[test]
    fn suites_cover_every_criterion_once() {
        let mut ids: Vec<u32> = SUITES[..6].iter().flat_map(|s| suite_criteria(s).unwrap()).collect();
        ids.sort();
        assert_eq!(ids, (1..=12).collect::<Vec<_>>());
        assert_eq!(suite_criteria("all").unwrap().len(), 12);
        assert!(suite_criteria("nope").is_err());
    }

    #[test]
    fn geodesic_suite_on_euclidean_is_exact() {
        let settings = Settings { manifolds: vec![ManifoldCase::euclidean(2)], ..Settings::default() };
        let r = run_suite(&settings, "geodesic").unwrap();
        assert!(r.passed(), "{}", r.to_text());
        let slopes: Vec<_> = r.checks.iter().flat_map(|c| &c.measurements).filter(|m| m.label.ends_with("slope")).collect();
        assert!(!slopes.is_empty());
        assert!(slopes.iter().all(|m| m.value.is_none()), "{}", r.to_csv());
    }

    #[test]
    fn report_is_deterministic() {
        let settings = Settings { manifolds: vec![ManifoldCase::unit_sphere()], ..Settings::default() };
        let a = run_suite(&settings, "geodesic").unwrap().to_csv();
        let b = run_suite(&settings, "geodesic").unwrap().to_csv();
        assert_eq!(a, b);
        assert!(a.lines().nth(1).unwrap().starts_with("criterion,check"));
    }
}
