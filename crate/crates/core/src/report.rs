//! CSV and text rendering of scenario reports.

use std::fmt::Write;

use crate::machine::RunStats;
use crate::scenarios::ScenarioReport;

pub const CSV_HEADER: &str = "scenario,mode,seed,scale,total_cycles,data_hits,data_misses,walk_reads,snoops_issued,snoops_acked,dram_reads,dram_writes,lines_manipulated";

fn stat_columns(s: &RunStats) -> [u64; 9] {
    [
        s.total_cycles,
        s.data_hits,
        s.data_misses,
        s.walk_reads,
        s.snoops_issued,
        s.snoops_acked,
        s.dram_reads,
        s.dram_writes,
        s.lines_manipulated,
    ]
}

/// One header line, then one line per run.
pub fn to_csv(report: &ScenarioReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        write!(out, "{},{},{},{}", report.scenario.name(), row.label, report.seed, report.scale).unwrap();
        for v in stat_columns(&row.stats) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn to_text(report: &ScenarioReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "scenario {}  seed {}  scale {}",
        report.scenario.name(),
        report.seed,
        report.scale
    )
    .unwrap();
    let names: Vec<&str> = CSV_HEADER.split(',').skip(4).collect();
    let label_w = report.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(4);
    write!(out, "\n{:label_w$}", "mode").unwrap();
    for n in &names {
        write!(out, "  {n:>w$}", w = n.len().max(8)).unwrap();
    }
    out.push('\n');
    for row in &report.rows {
        write!(out, "{:label_w$}", row.label).unwrap();
        for (n, v) in names.iter().zip(stat_columns(&row.stats)) {
            write!(out, "  {v:>w$}", w = n.len().max(8)).unwrap();
        }
        out.push('\n');
    }
    if !report.notes.is_empty() {
        out.push('\n');
        for n in &report.notes {
            writeln!(out, "{n}").unwrap();
        }
    }
    if !report.checks.is_empty() {
        out.push('\n');
        for c in &report.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            if c.detail.is_empty() {
                writeln!(out, "{mark}  {}", c.name).unwrap();
            } else {
                writeln!(out, "{mark}  {} ({})", c.name, c.detail).unwrap();
            }
        }
    }
    out
}
