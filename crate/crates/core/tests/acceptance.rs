//! Acceptance suite: every criterion at its stated tolerance, one line each,
//! on the shipped configuration.

use std::time::Instant;

use geocalc::checks::{run_check, CHECKS};
use geocalc::config::RunConfig;

fn main() {
    let settings = RunConfig::shipped().settings(None, None).expect("shipped config");
    let mut failed = Vec::new();
    for (id, _) in CHECKS {
        let start = Instant::now();
        let report = run_check(&settings, id).expect("known criterion");
        println!("{} ({:.1} s)", report.summary_line(), start.elapsed().as_secs_f64());
        if !report.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", CHECKS.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
