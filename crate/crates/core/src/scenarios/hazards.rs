//! The two situations LightV's preconditions exist for: a target page that
//! is not populated yet, and a target that shares its PGD slot.

use super::{Check, RunMode, RunRow, Scenario, ScenarioReport};
use crate::addressing::{
    Asid, Mapping, PageTableEntry, Pfn, PteAttrs, Translation, TranslationFault, VirtualAddress, LEAF_LEVEL,
    PAGE_SIZE,
};
use crate::error::SimError;
use crate::lightv::{ActivationError, Isolation, RewriteRule, WatermarkWindow};
use crate::machine::{FaultPolicy, Machine, RunStats, SimConfig};
use crate::trace::Access;

const ASID: Asid = 1;
pub const TARGET_VA: u64 = 0x8000_0000;
/// Same leaf line as the target.
pub const NEAR_NEIGHBOR_VA: u64 = 0x8000_1000;
/// Same PGD slot, different level-2 table.
pub const FAR_NEIGHBOR_VA: u64 = 0x8020_0000;
/// Target and neighbor for the isolated control case.
pub const ISOLATED_TARGET_VA: u64 = 0xC000_0000;
pub const ISOLATED_NEIGHBOR_VA: u64 = 0x4000_0000;

type Outcome = Result<Translation, TranslationFault>;

fn va(v: u64) -> VirtualAddress {
    VirtualAddress::new(v).unwrap()
}

fn machine(cfg: &SimConfig, mode: RunMode, isolation: Isolation) -> Result<Machine, SimError> {
    let mut c = mode.config(cfg);
    c.fault_policy = FaultPolicy::RecordAndSkip;
    c.lightv.isolation = isolation;
    Machine::new(c).map_err(|e| SimError::Scenario(e.to_string()))
}

/// Map each VA to a fresh frame tagged with its own address.
fn populate(m: &mut Machine, vas: &[u64]) -> Result<Vec<Pfn>, SimError> {
    let frames: Vec<Pfn> = vas.iter().map(|_| m.alloc_frame()).collect::<Result<_, _>>()?;
    let maps: Vec<Mapping> = vas
        .iter()
        .zip(&frames)
        .map(|(&v, f)| Mapping::new(v, f.value(), PteAttrs::WRITABLE | PteAttrs::USER))
        .collect::<Result<_, _>>()?;
    m.build_space(ASID, &maps)?;
    for (&v, f) in vas.iter().zip(&frames) {
        m.dram_mut().poke_u64(f.base().value(), v)?;
    }
    Ok(frames)
}

fn probe(m: &mut Machine, vas: &[u64]) -> Result<(Vec<Outcome>, RunStats), SimError> {
    let mut outcomes = Vec::new();
    for &v in vas {
        outcomes.push(m.translate(ASID, va(v))?.outcome);
    }
    let stats = m.run_trace(vas.iter().map(|&v| Access::read(ASID, va(v)))).map_err(|e| e.error)?;
    Ok((outcomes, stats))
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DemandCase {
    pub label: &'static str,
    pub mode: RunMode,
    pub populated: bool,
    pub outcome: Outcome,
    pub in_window: bool,
    pub stats: RunStats,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DemandPagingReport {
    pub cases: Vec<DemandCase>,
    /// Fault of a plain table walk over the real tables.
    pub real_fault: TranslationFault,
}

impl DemandPagingReport {
    pub fn case(&self, label: &str) -> &DemandCase {
        self.cases.iter().find(|c| c.label == label).unwrap()
    }

    /// Faults land in the watermark window exactly when LightV is active
    /// on an unpopulated target.
    pub fn reproduced(&self) -> bool {
        self.cases.iter().all(|c| {
            let expect_window = c.mode == RunMode::Active && !c.populated;
            let shape = match (&c.outcome, c.populated) {
                (Ok(_), true) => true,
                (Err(f), false) => expect_window || *f == self.real_fault,
                _ => false,
            };
            shape && c.in_window == expect_window
        })
    }
}

pub fn run_demand_paging_hazard(cfg: &SimConfig) -> Result<DemandPagingReport, SimError> {
    let window = WatermarkWindow::new(cfg.lightv.window_base).map_err(|e| SimError::Scenario(e.to_string()))?;
    let plan = [
        ("active, unpopulated", RunMode::Active, false),
        ("passive, unpopulated", RunMode::Passive, false),
        ("baseline, unpopulated", RunMode::Baseline, false),
        ("active, populated", RunMode::Active, true),
    ];
    let mut cases = Vec::new();
    let mut real_fault = None;
    for (label, mode, populated) in plan {
        let mut m = machine(cfg, mode, Isolation::Strict)?;
        populate(&mut m, &[TARGET_VA])?;
        if !populated {
            // tables stay allocated, only the leaf is missing
            m.write_table_entry(ASID, va(TARGET_VA), LEAF_LEVEL, PageTableEntry::EMPTY)?;
            let space = m.space(ASID)?;
            real_fault = crate::addressing::reference_walk(&space, va(TARGET_VA), m.dram()).err();
        }
        if mode == RunMode::Active {
            let dst = m.alloc_frame()?;
            let rule = RewriteRule::new(0, ASID, TARGET_VA, TARGET_VA + PAGE_SIZE, dst.value(), None)
                .map_err(|e| SimError::Scenario(e.to_string()))?;
            m.activate(&[rule])?;
        }
        let (outcomes, stats) = probe(&mut m, &[TARGET_VA])?;
        let outcome = outcomes[0];
        let in_window = outcome.is_err_and(|f| window.contains_pa(f.pte_address.value()));
        cases.push(DemandCase {
            label,
            mode,
            populated,
            outcome,
            in_window,
            stats,
        });
    }
    Ok(DemandPagingReport {
        cases,
        real_fault: real_fault.expect("unpopulated case ran"),
    })
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct IsolationReport {
    pub neighbors: Vec<u64>,
    pub baseline: Vec<Outcome>,
    pub permissive: Vec<Outcome>,
    pub permissive_target: Outcome,
    pub replacement: Pfn,
    pub strict: Result<(), ActivationError>,
    pub control_baseline: Outcome,
    pub control_active: Outcome,
    pub rows: Vec<(&'static str, RunStats)>,
}

impl IsolationReport {
    pub fn neighbor_deviated(&self) -> bool {
        self.baseline != self.permissive
    }

    pub fn strict_rejected(&self) -> bool {
        matches!(self.strict, Err(ActivationError::NotIsolated { .. }))
    }

    pub fn control_unaffected(&self) -> bool {
        self.control_baseline == self.control_active && self.control_active.is_ok()
    }

    pub fn target_redirected(&self) -> bool {
        self.permissive_target.is_ok_and(|t| t.pa.pfn() == self.replacement)
    }

    pub fn reproduced(&self) -> bool {
        self.neighbor_deviated() && self.strict_rejected() && self.control_unaffected() && self.target_redirected()
    }
}

pub fn run_isolation_hazard(cfg: &SimConfig) -> Result<IsolationReport, SimError> {
    let vas = [TARGET_VA, NEAR_NEIGHBOR_VA, FAR_NEIGHBOR_VA];
    let neighbors = vas[1..].to_vec();
    let rule = |dst: Pfn, at: u64| {
        RewriteRule::new(0, ASID, at, at + PAGE_SIZE, dst.value(), None).map_err(|e| SimError::Scenario(e.to_string()))
    };
    let mut rows = Vec::new();

    let mut m = machine(cfg, RunMode::Baseline, Isolation::Strict)?;
    populate(&mut m, &vas)?;
    let (baseline, stats) = probe(&mut m, &neighbors)?;
    rows.push(("baseline", stats));

    let mut m = machine(cfg, RunMode::Active, Isolation::Strict)?;
    populate(&mut m, &vas)?;
    let dst = m.alloc_frame()?;
    let strict = match m.activate(&[rule(dst, TARGET_VA)?]) {
        Ok(()) => Ok(()),
        Err(SimError::Activation(e)) => Err(e),
        Err(e) => return Err(e),
    };

    let mut m = machine(cfg, RunMode::Active, Isolation::Permissive)?;
    populate(&mut m, &vas)?;
    let replacement = m.alloc_frame()?;
    m.activate(&[rule(replacement, TARGET_VA)?])?;
    let (permissive, stats) = probe(&mut m, &neighbors)?;
    rows.push(("permissive", stats));
    let permissive_target = m.translate(ASID, va(TARGET_VA))?.outcome;

    let control_vas = [ISOLATED_TARGET_VA, ISOLATED_NEIGHBOR_VA];
    let mut m = machine(cfg, RunMode::Baseline, Isolation::Strict)?;
    populate(&mut m, &control_vas)?;
    let (control_baseline, _) = probe(&mut m, &control_vas[1..])?;
    let mut m = machine(cfg, RunMode::Active, Isolation::Strict)?;
    populate(&mut m, &control_vas)?;
    let dst = m.alloc_frame()?;
    m.activate(&[rule(dst, ISOLATED_TARGET_VA)?])?;
    let (control_active, stats) = probe(&mut m, &control_vas[1..])?;
    rows.push(("strict-isolated", stats));

    Ok(IsolationReport {
        neighbors,
        baseline,
        permissive,
        permissive_target,
        replacement,
        strict,
        control_baseline: control_baseline[0],
        control_active: control_active[0],
        rows,
    })
}

fn describe(o: &Outcome) -> String {
    match o {
        Ok(t) => format!("pa {}", t.pa),
        Err(f) => format!("fault L{} pte@{}", f.level, f.pte_address),
    }
}

pub(super) fn demand_paging_report(cfg: &SimConfig, seed: u64, scale: f64) -> Result<ScenarioReport, SimError> {
    let r = run_demand_paging_hazard(cfg)?;
    let mut report = ScenarioReport::new(Scenario::DemandPaging, seed, scale);
    for c in &r.cases {
        report.rows.push(RunRow {
            label: c.label.replace(", ", "/"),
            stats: c.stats,
        });
        report.notes.push(format!(
            "{}: {}{}",
            c.label,
            describe(&c.outcome),
            if c.in_window { " (watermark window)" } else { "" }
        ));
    }
    let hazard = r.case("active, unpopulated");
    report.checks.push(Check::new(
        "active on unpopulated target faults inside the watermark window",
        hazard.outcome.is_err() && hazard.in_window,
        describe(&hazard.outcome),
    ));
    report.checks.push(Check::new(
        "window faults occur only in that case",
        r.reproduced(),
        format!("real fault pte@{}", r.real_fault.pte_address),
    ));
    Ok(report)
}

pub(super) fn isolation_report(cfg: &SimConfig, seed: u64, scale: f64) -> Result<ScenarioReport, SimError> {
    let r = run_isolation_hazard(cfg)?;
    let mut report = ScenarioReport::new(Scenario::Isolation, seed, scale);
    for (label, stats) in &r.rows {
        report.rows.push(RunRow {
            label: label.to_string(),
            stats: *stats,
        });
    }
    for (i, n) in r.neighbors.iter().enumerate() {
        report.notes.push(format!(
            "neighbor {:#x}: baseline {}, permissive {}",
            n,
            describe(&r.baseline[i]),
            describe(&r.permissive[i])
        ));
    }
    report.checks.push(Check::new(
        "permissive: neighbor translation deviates",
        r.neighbor_deviated(),
        "",
    ));
    report.checks.push(Check::new(
        "permissive: target still redirected",
        r.target_redirected(),
        describe(&r.permissive_target),
    ));
    report.checks.push(Check::new(
        "strict: shared PGD slot rejected",
        r.strict_rejected(),
        match &r.strict {
            Ok(()) => "accepted".to_string(),
            Err(e) => e.to_string(),
        },
    ));
    report.checks.push(Check::new(
        "strict: isolated target leaves neighbor intact",
        r.control_unaffected(),
        describe(&r.control_active),
    ));
    Ok(report)
}
