//! Runs a directory of scenarios and checks expectations and invariants.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{run_scenario_with, Attack, HarnessError, ScenarioReport, ScenarioScript};
use crate::assembler::InstrumentConfig;
use crate::device::Device;
use crate::runpba::list_records;

#[derive(Debug)]
pub struct SuiteRow {
    pub path: PathBuf,
    pub result: Result<ScenarioReport, String>,
    pub expectation_failures: Vec<String>,
    pub invariant_breaches: Vec<String>,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.result.is_ok() && self.expectation_failures.is_empty() && self.invariant_breaches.is_empty()
    }
}

/// Properties every scenario must satisfy regardless of its expectations.
pub fn invariant_breaches(r: &ScenarioReport, dev: &Device) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(e) = &r.audit.no_resume {
        out.push(format!("no-resume audit: {e}"));
    }
    if let Some(e) = &r.audit.memory {
        out.push(format!("memory audit: {e}"));
    }
    let first_pacbti = dev.faults.iter().find(|f| f.class.is_some_and(|c| c.is_pacbti()));
    if let Some(f) = first_pacbti {
        if r.runpba {
            for t in r.tokens.iter().filter(|t| t.tick > f.tick) {
                if t.claims.is_some_and(|c| !c.lifecycle.runtime_failure) {
                    out.push(format!("token at tick {} after a PACBTI fault lacks runtime_failure", t.tick));
                }
            }
        }
    }
    if r.runpba && !dev.partition.malfunction {
        if let Ok(records) = list_records(&dev.its) {
            for f in dev.faults.iter().filter(|f| f.class.is_some_and(|c| c.is_pacbti())) {
                let n = records.iter().filter(|rec| rec.fault_pc == f.pc && rec.kind.is_pacbti()).count();
                if n == 0 {
                    out.push(format!("PACBTI fault at {:#06x} has no persisted record", f.pc));
                }
            }
        }
    }
    if r.instrument == InstrumentConfig::FULL && matches!(r.attack, Attack::RopReturn | Attack::BtiForwardEdge) {
        if r.secret_leaked {
            out.push("secret leaked despite full instrumentation".into());
        }
        if !r.fault_raised {
            out.push("control-flow violation raised no fault".into());
        }
    }
    out
}

pub fn run_one(path: &Path) -> SuiteRow {
    let run = ScenarioScript::load(path).and_then(|s| {
        let (r, dev) = run_scenario_with(&s, true)?;
        Ok::<_, HarnessError>((s, r, dev))
    });
    match run {
        Ok((script, report, dev)) => SuiteRow {
            path: path.to_path_buf(),
            expectation_failures: script.expect.check(&report),
            invariant_breaches: invariant_breaches(&report, &dev),
            result: Ok(report),
        },
        Err(e) => SuiteRow {
            path: path.to_path_buf(),
            result: Err(e.to_string()),
            expectation_failures: Vec::new(),
            invariant_breaches: Vec::new(),
        },
    }
}

/// All `*.toy` files in `dir`, sorted by name.
pub fn scenario_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toy"))
        .collect();
    files.sort();
    Ok(files)
}

/// Runs every scenario in `dir` in parallel; rows come back in file order.
pub fn run_suite(dir: &Path) -> std::io::Result<Vec<SuiteRow>> {
    Ok(scenario_files(dir)?.par_iter().map(|p| run_one(p)).collect())
}

/// Pass/fail matrix, one line per scenario.
pub fn render_matrix(rows: &[SuiteRow]) -> String {
    let mut s = format!("{:<32} {:<8} {:<8} {:<20} {:<18} {}\n", "scenario", "result", "leaked", "fault", "lifecycle", "notes");
    for row in rows {
        let name = row.path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let verdict = if row.passed() { "PASS" } else { "FAIL" };
        match &row.result {
            Ok(r) => {
                let fault = r.fault_kind.map(|k| format!("{k:?}")).unwrap_or_else(|| "-".into());
                let notes: Vec<&str> =
                    row.expectation_failures.iter().chain(&row.invariant_breaches).map(String::as_str).collect();
                s += &format!(
                    "{:<32} {:<8} {:<8} {:<20} {:<18} {}\n",
                    name,
                    verdict,
                    r.secret_leaked,
                    fault,
                    format!("{:?}", r.lifecycle_final),
                    notes.join("; ")
                );
            }
            Err(e) => s += &format!("{name:<32} {verdict:<8} error: {e}\n"),
        }
    }
    s
}
