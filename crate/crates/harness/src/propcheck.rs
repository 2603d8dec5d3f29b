//! Runs the invariant registry and reports every check.

use std::fmt::Write as _;
use std::path::Path;

use lcm_core::checks::{registry, run_checks, CheckOptions, CheckResult};
use lcm_core::mpm::write_atomic;
use lcm_core::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::metrics::RunRecord;

#[derive(Serialize)]
struct Entry<'a> {
    name: &'a str,
    module: &'a str,
    description: &'a str,
    passed: bool,
    residual: f64,
    tolerance: f64,
    detail: &'a str,
    seconds: f64,
}

pub fn report_json(results: &[CheckResult], opts: &CheckOptions) -> Result<String> {
    let reg = registry();
    let checks: Vec<Entry> = results
        .iter()
        .map(|r| Entry {
            name: r.name,
            module: r.module,
            description: reg.iter().find(|c| c.name == r.name).map_or("", |c| c.description),
            passed: r.passed,
            residual: r.residual,
            tolerance: r.tolerance,
            detail: &r.detail,
            seconds: r.seconds,
        })
        .collect();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let doc = serde_json::json!({
        "trials": opts.trials,
        "seed": opts.seed,
        "fault": opts.fault.map(|f| f.to_string()),
        "total": results.len(),
        "passed": results.len() - failed.len(),
        "failed": failed,
        "checks": checks,
    });
    serde_json::to_string_pretty(&doc).map(|s| s + "\n").map_err(|e| Error::Format(e.to_string()))
}

pub fn table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<4} {:<28} {:>11} {:>10} {:>7}  detail\n", "", "check", "residual", "tolerance", "secs");
    for r in results {
        let _ = writeln!(
            s,
            "{:<4} {:<28} {:>11.3e} {:>10.1e} {:>7.2}  {}",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.residual,
            r.tolerance,
            r.seconds,
            r.detail
        );
    }
    s
}

/// The `propcheck` command. Returns the results; the caller maps any
/// failure to exit code 1.
pub fn run_propcheck(cfg: &RunConfig, out: &Path) -> Result<Vec<CheckResult>> {
    std::fs::create_dir_all(out)?;
    let p = &cfg.propcheck;
    let opts = CheckOptions {
        trials: p.trials,
        seed: cfg.seed,
        fault: p.fault,
    };
    let prefixes: Vec<&str> = p.only.iter().map(String::as_str).collect();
    let results = run_checks(&opts, &prefixes);
    if results.is_empty() {
        return Err(Error::Config(format!("propcheck.only {:?} matches no check", p.only)));
    }
    print!("{}", table(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
    } else {
        println!("{} of {} checks failed: {}", failed.len(), results.len(), failed.join(", "));
    }
    write_atomic(&out.join("propcheck.json"), report_json(&results, &opts)?.as_bytes())?;
    let mut rec = RunRecord::new("propcheck", "f64", 1, cfg.seed);
    for r in &results {
        rec.push(0, r.module, r.name, r.residual);
    }
    rec.summarize("failed", &failed);
    rec.summarize("total", results.len());
    rec.write(out)?;
    Ok(results)
}
