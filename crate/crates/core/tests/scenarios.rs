use std::path::Path;

use lightv_core::report::{to_csv, to_text, CSV_HEADER};
use lightv_core::scenarios::{
    run_isolation_hazard, run_migration, run_scenario, MigrationPlan, RunMode, Scenario, Step,
};
use lightv_core::{Access, Pfn, SimConfig, SimError, VirtualAddress};

fn plan(cfg: &SimConfig, during: Vec<Step>, after: Vec<Access>) -> MigrationPlan {
    MigrationPlan {
        during,
        after,
        before: Vec::new(),
        ..MigrationPlan::random(0, cfg)
    }
}

fn word(plan_va: VirtualAddress, i: u64) -> VirtualAddress {
    VirtualAddress::new(plan_va.value() + i * 8).unwrap()
}

#[test]
fn idle_migration_copies_the_page() {
    let cfg = SimConfig::default();
    let p = plan(&cfg, Vec::new(), Vec::new());
    let r = run_migration(&p, &cfg).unwrap();
    assert!(r.ok(), "{r:?}");
    assert_eq!(r.dma_chunks, p.chunks());
    assert_eq!(r.copied_on_touch, 0);
}

#[test]
fn write_during_copy_is_visible_afterwards() {
    let cfg = SimConfig::default();
    let base = MigrationPlan::random(0, &cfg);
    let va = base.page_va;
    let during = vec![
        Step::Access(Access::write(1, word(va, 500), 0xABCD)),
        Step::Dma,
        Step::Access(Access::read(1, word(va, 500))),
        Step::Access(Access::read(1, word(va, 3))),
    ];
    let after = vec![Access::read(1, word(va, 500)), Access::write(1, word(va, 2), 7), Access::read(1, word(va, 2))];
    let p = plan(&cfg, during, after);
    let r = run_migration(&p, &cfg).unwrap();
    assert!(r.ok(), "{r:?}");
    assert_eq!(r.reads_checked, 4);
    assert!(r.copied_on_touch >= 1);
}

#[test]
fn bad_plans_are_rejected() {
    let cfg = SimConfig::default();
    let mut p = MigrationPlan::random(1, &cfg);
    p.dst = p.src;
    assert!(matches!(run_migration(&p, &cfg), Err(SimError::Scenario(_))));
    let mut p = MigrationPlan::random(1, &cfg);
    p.dma_chunk_bytes = 100;
    assert!(run_migration(&p, &cfg).is_err());
    let mut p = MigrationPlan::random(1, &cfg);
    p.dst = Pfn::new(0x10).unwrap();
    assert!(run_migration(&p, &cfg).is_err());
}

#[test]
fn isolation_hazard_needs_permissive_mode() {
    let r = run_isolation_hazard(&SimConfig::default()).unwrap();
    assert!(r.reproduced());
    assert!(r.permissive.iter().all(|o| o.is_err()));
    assert!(r.baseline.iter().all(|o| o.is_ok()));
}

#[test]
fn every_fixed_scenario_passes_its_checks() {
    let cfg = SimConfig::default();
    for s in [Scenario::Histogram, Scenario::DemandPaging, Scenario::Isolation, Scenario::Migration] {
        let r = run_scenario(s, &cfg, 0, 0.002, &RunMode::ALL).unwrap();
        assert!(r.passed(), "{}", to_text(&r));
        assert!(!r.rows.is_empty());
    }
}

#[test]
fn histogram_honors_the_mode_list() {
    let r = run_scenario(Scenario::Histogram, &SimConfig::default(), 0, 0.001, &[RunMode::Passive]).unwrap();
    assert_eq!(r.rows.len(), 1);
    let csv = to_csv(&r);
    assert!(csv.starts_with(CSV_HEADER));
    assert!(csv.lines().nth(1).unwrap().starts_with("histogram,passive,0,0.001,"));
}

#[test]
fn custom_trace_replays_the_shipped_example() {
    let path = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/custom.toml"));
    let cfg = SimConfig::load(path).unwrap();
    let r = run_scenario(Scenario::CustomTrace, &cfg, 0, 1.0, &RunMode::ALL).unwrap();
    assert_eq!(r.rows.len(), 3);
    let active = r.row("active").unwrap();
    assert!(active.snoops_acked > 0);
    assert_eq!(r.row("baseline").unwrap().accesses, active.accesses);
}

#[test]
fn custom_trace_without_inputs_is_an_error() {
    let err = run_scenario(Scenario::CustomTrace, &SimConfig::default(), 0, 1.0, &RunMode::ALL).unwrap_err();
    assert!(matches!(err, SimError::Scenario(_)));
}
