//! Replay user-supplied mappings, trace and rules.

use std::fs;
use std::path::Path;

use super::{RunMode, RunRow, Scenario, ScenarioReport};
use crate::addressing::{parse_mappings, Mapping};
use crate::error::SimError;
use crate::lightv::{parse_rules, RewriteRule};
use crate::machine::{compare_runs, Machine, SimConfig};
use crate::trace::{parse_trace, Access};

fn read(path: &Path) -> Result<String, SimError> {
    fs::read_to_string(path).map_err(|e| SimError::Input {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn parsed<T, E: std::fmt::Display>(path: &Path, r: Result<T, E>) -> Result<T, SimError> {
    r.map_err(|e| SimError::Input {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn run_custom_trace(cfg: &SimConfig, seed: u64, scale: f64, modes: &[RunMode]) -> Result<ScenarioReport, SimError> {
    let ct = cfg
        .custom_trace
        .as_ref()
        .ok_or_else(|| SimError::Scenario("custom-trace needs a [custom_trace] table in the config".into()))?;
    let mappings: Vec<Mapping> = parsed(&ct.mappings, parse_mappings(&read(&ct.mappings)?))?;
    let trace: Vec<Access> = parsed(&ct.trace, parse_trace(&read(&ct.trace)?))?;
    let rules: Vec<RewriteRule> = match &ct.rules {
        Some(p) => parsed(p, parse_rules(&read(p)?))?,
        None => Vec::new(),
    };

    let mut report = ScenarioReport::new(Scenario::CustomTrace, seed, scale);
    report.notes.push(format!(
        "{} mappings, {} accesses, {} rules",
        mappings.len(),
        trace.len(),
        rules.len()
    ));
    for &mode in modes {
        let mut m = Machine::new(mode.config(cfg)).map_err(|e| SimError::Scenario(e.to_string()))?;
        m.build_space(ct.asid, &mappings)?;
        if mode == RunMode::Active && !rules.is_empty() {
            m.activate(&rules)?;
        }
        let stats = m.run_trace(trace.iter().copied()).map_err(|e| e.error)?;
        report.rows.push(RunRow {
            label: mode.to_string(),
            stats,
        });
    }
    if let Some(base) = report.row("baseline").copied() {
        let notes = report
            .rows
            .iter()
            .filter(|r| r.label != "baseline")
            .map(|r| Ok(format!("{} vs baseline: {}", r.label, compare_runs(&base, &r.stats)?)))
            .collect::<Result<Vec<String>, SimError>>()?;
        report.notes.extend(notes);
    }
    Ok(report)
}
