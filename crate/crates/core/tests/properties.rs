use proptest::prelude::*;

use lightv_core::lightv::Tracking;
use lightv_core::scenarios::{
    gen_histogram_trace, run_demand_paging_hazard, run_migration, HistogramWorkload, MigrationPlan, CODE_VA,
    HOT_VA,
};
use lightv_core::verify::{redirection_sweep, translation_sweep, RedirectOptions, SweepOptions};
use lightv_core::{compare_runs, Op, RunStats, SimConfig, TraceDigest};

fn sweep(seed: u64) -> SweepOptions {
    SweepOptions {
        configs: 1,
        vas_per_config: 300,
        seed,
        inject: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn idle_walks_match_the_software_walk(seed in any::<u64>()) {
        let r = translation_sweep(&sweep(seed)).unwrap();
        prop_assert!(r.passed(), "{:?}", r.first);
    }

    #[test]
    fn active_walks_match_the_ghost_tables(seed in any::<u64>(), cache_ptes in any::<bool>(), tlb in any::<bool>()) {
        let r = redirection_sweep(&RedirectOptions {
            sweep: sweep(seed),
            cache_ptes,
            tlb,
            tracking: Tracking::Watermark,
        })
        .unwrap();
        prop_assert!(r.passed(), "{:?}", r.first);
    }

    #[test]
    fn migration_is_linearizable(seed in any::<u64>()) {
        let cfg = SimConfig::default();
        let r = run_migration(&MigrationPlan::random(seed, &cfg), &cfg).unwrap();
        prop_assert!(r.ok(), "{r:?}");
    }

    #[test]
    fn hot_page_sees_one_update_per_image_byte(bytes in 0u64..20_000, seed in any::<u64>()) {
        let w = HistogramWorkload { image_bytes: bytes, seed, ..HistogramWorkload::default() };
        let hot = HOT_VA..HOT_VA + 4096;
        let mut updates = 0;
        for a in gen_histogram_trace(&w) {
            if hot.contains(&a.va.value()) {
                prop_assert!(matches!(a.op, Op::Modify(1)));
                updates += 1;
            }
        }
        prop_assert_eq!(updates, bytes);
    }

    #[test]
    fn identical_runs_compare_to_zero(cycles in 1u64..u64::MAX / 2, hits in any::<u32>()) {
        let s = RunStats { total_cycles: cycles, data_hits: hits as u64, ..RunStats::default() };
        let c = compare_runs(&s, &s).unwrap();
        prop_assert_eq!(c.relative, 0.0);
    }
}

#[test]
fn empty_image_touches_only_code() {
    let w = HistogramWorkload {
        image_bytes: 0,
        ..HistogramWorkload::default()
    };
    let trace: Vec<_> = gen_histogram_trace(&w).collect();
    assert!(!trace.is_empty());
    assert!(trace.iter().all(|a| (CODE_VA..CODE_VA + 4 * 4096).contains(&a.va.value())));
}

#[test]
fn histogram_trace_depends_on_the_seed() {
    let digest = |seed| TraceDigest::of(&gen_histogram_trace(&HistogramWorkload::scaled(0.0005, seed)).collect::<Vec<_>>());
    assert_eq!(digest(3), digest(3));
    assert_ne!(digest(3), digest(4));
}

#[test]
fn hazard_reports_repeat() {
    let cfg = SimConfig::default();
    assert_eq!(run_demand_paging_hazard(&cfg).unwrap(), run_demand_paging_hazard(&cfg).unwrap());
}
