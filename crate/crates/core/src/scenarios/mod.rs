//! End-to-end workloads and the hazard demonstrations.

mod custom;
mod hazards;
mod histogram;
mod migration;

use std::fmt;
use std::str::FromStr;

pub use custom::run_custom_trace;
pub use hazards::{
    run_demand_paging_hazard, run_isolation_hazard, DemandCase, DemandPagingReport, IsolationReport, FAR_NEIGHBOR_VA,
    NEAR_NEIGHBOR_VA, TARGET_VA,
};
pub use histogram::{
    gen_histogram_trace, run_histogram, run_overhead_experiment, HistogramRun, HistogramWorkload,
    OverheadReport, CODE_VA, HOT_VA, IMAGE_VA,
};
pub use migration::{run_migration, MigrationPlan, MigrationReport, Step};

use crate::lightv::LightVMode;
use crate::machine::{RunStats, SimConfig};

/// Machine flavor for one run. Baseline has no agent on the fabric.
#[derive(Clone, Copy, PartialEq, Eq, Debug, PartialOrd, Ord)]
pub enum RunMode {
    Baseline,
    Passive,
    Active,
}

impl RunMode {
    pub const ALL: [RunMode; 3] = [RunMode::Baseline, RunMode::Passive, RunMode::Active];

    pub fn lightv_mode(self) -> LightVMode {
        match self {
            Self::Baseline => LightVMode::Absent,
            Self::Passive => LightVMode::Passive,
            Self::Active => LightVMode::Active,
        }
    }

    pub fn config(self, base: &SimConfig) -> SimConfig {
        SimConfig {
            mode: self.lightv_mode(),
            ..base.clone()
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Passive => "passive",
            Self::Active => "active",
        })
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "passive" => Ok(Self::Passive),
            "active" => Ok(Self::Active),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Scenario {
    Histogram,
    DemandPaging,
    Isolation,
    Migration,
    CustomTrace,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Histogram,
        Scenario::DemandPaging,
        Scenario::Isolation,
        Scenario::Migration,
        Scenario::CustomTrace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Histogram => "histogram",
            Self::DemandPaging => "demand-paging",
            Self::Isolation => "isolation",
            Self::Migration => "migration",
            Self::CustomTrace => "custom-trace",
        }
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| format!("unknown scenario `{s}`"))
    }
}

/// One labelled run inside a report.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RunRow {
    pub label: String,
    pub stats: RunStats,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// What the CLI prints for any scenario.
#[derive(Clone, PartialEq, Debug)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub seed: u64,
    pub scale: f64,
    pub rows: Vec<RunRow>,
    pub notes: Vec<String>,
    pub checks: Vec<Check>,
}

impl ScenarioReport {
    pub fn new(scenario: Scenario, seed: u64, scale: f64) -> Self {
        Self {
            scenario,
            seed,
            scale,
            rows: Vec::new(),
            notes: Vec::new(),
            checks: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn row(&self, label: &str) -> Option<&RunStats> {
        self.rows.iter().find(|r| r.label == label).map(|r| &r.stats)
    }
}

/// Run one scenario. `modes` selects the machines for the histogram and
/// custom-trace scenarios; the others always run their fixed comparison.
pub fn run_scenario(
    scenario: Scenario,
    cfg: &SimConfig,
    seed: u64,
    scale: f64,
    modes: &[RunMode],
) -> Result<ScenarioReport, crate::error::SimError> {
    match scenario {
        Scenario::Histogram => histogram::histogram_report(cfg, seed, scale, modes),
        Scenario::DemandPaging => hazards::demand_paging_report(cfg, seed, scale),
        Scenario::Isolation => hazards::isolation_report(cfg, seed, scale),
        Scenario::Migration => migration::migration_report(cfg, seed, scale),
        Scenario::CustomTrace => custom::run_custom_trace(cfg, seed, scale, modes),
    }
}
