//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lightv_core::coherence::{CacheGeometry, Interconnect, LatencyTable};
use lightv_core::dram::{Aperture, Dram};
use lightv_core::lightv::{WatermarkError, CONTEXT_BITS, MAX_CONTEXTS};
use lightv_core::lightv::{LightV, LightVConfig, LightVMode, WatermarkWindow};
use lightv_core::machine::{CustomTraceConfig, SimConfig};
use lightv_core::report::to_csv;
use lightv_core::scenarios::{
    run_demand_paging_hazard, run_isolation_hazard, run_migration, run_overhead_experiment, run_scenario,
    HistogramWorkload, MigrationPlan, RunMode, Scenario,
};
use lightv_core::verify::{redirection_matrix, translation_sweep, SweepOptions};

const CI_SCALE: f64 = 0.01;
const PASSIVE_LIMIT: f64 = 0.005;
const ACTIVE_LIMIT: f64 = 0.015;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

fn oracle_translation() -> Outcome {
    let t = Instant::now();
    let r = translation_sweep(&SweepOptions {
        configs: 100,
        vas_per_config: 1000,
        seed: 1,
        inject: None,
    })
    .unwrap();
    let el = t.elapsed();
    let first = r.first.as_ref().map(|c| format!(", first: {c}")).unwrap_or_default();
    outcome(
        r.passed() && r.configs == 100 && r.checked == 100_000 && within(el, 60),
        format!("{} configs, {} VAs, {} mismatches, {el:.1?}{first}", r.configs, r.checked, r.mismatches),
    )
}

fn redirection() -> Outcome {
    let t = Instant::now();
    let sweep = SweepOptions {
        configs: 100,
        vas_per_config: 1000,
        seed: 2,
        inject: None,
    };
    let matrix = redirection_matrix(&sweep).unwrap();
    let el = t.elapsed();
    let mut ok = within(el, 120);
    let mut parts = Vec::new();
    for (cache_ptes, tlb, r) in &matrix {
        ok &= r.passed() && r.configs == 100 && r.redirected > 0;
        parts.push(format!(
            "ptes {} tlb {}: {} mismatches/{} ({} redirected)",
            if *cache_ptes { "on" } else { "off" },
            if *tlb { "on" } else { "off" },
            r.mismatches,
            r.checked,
            r.redirected
        ));
        if let Some(c) = &r.first {
            parts.push(format!("first: {c}"));
        }
    }
    parts.push(format!("{el:.1?}"));
    outcome(ok && matrix.len() == 4, parts.join("; "))
}

/// Bins counted straight from the image bytes.
fn histogram_oracle(w: &HistogramWorkload) -> Vec<u8> {
    let slots = w.bin_slots();
    let mut bins = [0u64; 512];
    let bytes: Vec<u8> = w.image().flat_map(u64::to_le_bytes).take(w.image_bytes as usize).collect();
    for (i, b) in bytes.iter().enumerate() {
        let bin = (i % 3) * 128 + (*b as usize >> 1);
        bins[slots[bin] as usize] += 1;
    }
    bins.iter().flat_map(|c| c.to_le_bytes()).collect()
}

fn histogram(cfg: &SimConfig) -> (Outcome, Outcome) {
    let w = HistogramWorkload::scaled(CI_SCALE, 0);
    let r = run_overhead_experiment(cfg, &w).unwrap();
    let oracle = histogram_oracle(&w);
    let active = r.run(RunMode::Active);
    let replacement_used = active.hot_frame != active.original_hot_frame
        && active.original_hot_page.iter().all(|&b| b == 0)
        && active.hot_page == oracle;
    let identical = r.equivalent() && r.runs.iter().all(|run| run.hot_page == oracle);
    let transparency = outcome(
        identical && replacement_used,
        format!(
            "hot page matches the byte-count oracle in all {} modes; active bins in frame {} (original {} untouched: {})",
            r.runs.len(),
            active.hot_frame,
            active.original_hot_frame,
            active.original_hot_page.iter().all(|&b| b == 0)
        ),
    );
    let p = r.passive.relative;
    let a = r.active.relative;
    let overhead = outcome(
        p.abs() < PASSIVE_LIMIT && a > 0.0 && a < ACTIVE_LIMIT,
        format!("passive {:+.4}%, active {:+.4}%", p * 100.0, a * 100.0),
    );
    (transparency, overhead)
}

fn coherence_suite() -> Outcome {
    const OPS: u64 = 100_000;
    const BASE: u64 = 0x8000_0000;
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut total = 0;
    let mut violations = 0;
    let mut stale = 0;
    let mut first = String::new();
    for round in 0..4 {
        let pes = 2 + round % 3;
        let geometry = CacheGeometry { sets: 2, ways: 2 };
        let aperture = Aperture::new(BASE, 1 << 20);
        let mut fabric = Interconnect::new(Dram::new(aperture), pes, geometry, LatencyTable::default());
        if round % 2 == 1 {
            let lv = LightV::new(LightVConfig::default(), LightVMode::Passive, aperture, 0).unwrap();
            fabric.register_agent(Box::new(lv)).unwrap();
        }
        let mut shadow: BTreeMap<u64, u64> = BTreeMap::new();
        for _ in 0..OPS / 4 {
            let pe = rng.random_range(0..pes);
            let pa = BASE + rng.random_range(0..24u64) * 64 + rng.random_range(0..8u64) * 8;
            match rng.random_range(0..100) {
                0..45 => {
                    let (v, _) = fabric.read_word(pe, pa).unwrap();
                    let want = shadow.get(&pa).copied().unwrap_or(0);
                    if v != want {
                        stale += 1;
                        if first.is_empty() {
                            first = format!("pe {pe} read {pa:#x} = {v:#x}, shadow {want:#x}");
                        }
                    }
                }
                45..95 => {
                    let v = rng.random();
                    fabric.write_word(pe, pa, v).unwrap();
                    shadow.insert(pa, v);
                }
                95..99 => fabric.invalidate_line(pa & !63).unwrap(),
                _ => fabric.flush_all().unwrap(),
            }
            total += 1;
            if let Err(line) = fabric.check_single_writer() {
                violations += 1;
                if first.is_empty() {
                    first = format!("two holders of {line:#x} with one unique");
                }
            }
        }
        fabric.flush_all().unwrap();
        for (pa, v) in &shadow {
            if fabric.dram().peek_u64(*pa).unwrap() != *v {
                stale += 1;
            }
        }
    }
    let el = t.elapsed();
    outcome(
        total >= OPS && violations == 0 && stale == 0 && within(el, 60),
        format!("{total} ops, {violations} single-writer violations, {stale} shadow mismatches, {el:.1?} {first}"),
    )
}

fn watermark_codec() -> Outcome {
    let w = WatermarkWindow::default();
    let mut pairs = 0;
    let mut bad = 0;
    for level in 1..=2u8 {
        for ctx in 0..MAX_CONTEXTS as u16 {
            pairs += 1;
            let pfn = w.encode(level, ctx).unwrap();
            if w.decode(pfn.value()) != Ok((level, ctx)) || !w.contains_pfn(pfn.value()) {
                bad += 1;
            }
        }
    }
    let ctx_domain = 1usize << CONTEXT_BITS == MAX_CONTEXTS;
    let dram = SimConfig::default().dram;
    let first = dram.base >> 12;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut accepted = 0;
    for _ in 0..10_000 {
        let pfn = first + rng.random_range(0..dram.size >> 12);
        if !matches!(w.decode(pfn), Err(WatermarkError::NotWatermark(_))) {
            accepted += 1;
        }
    }
    outcome(
        bad == 0 && accepted == 0 && ctx_domain,
        format!("{pairs} (level, context) pairs, {bad} round-trip failures; 10000 DRAM PFNs, {accepted} decoded"),
    )
}

fn hazards(cfg: &SimConfig) -> Outcome {
    let d = run_demand_paging_hazard(cfg).unwrap();
    let i = run_isolation_hazard(cfg).unwrap();
    let repeat = d == run_demand_paging_hazard(cfg).unwrap() && i == run_isolation_hazard(cfg).unwrap();
    outcome(
        d.reproduced() && i.neighbor_deviated() && i.strict_rejected() && i.control_unaffected() && repeat,
        format!(
            "demand paging {}, permissive deviation {}, strict rejection {}, control intact {}, repeatable {}",
            d.reproduced(),
            i.neighbor_deviated(),
            i.strict_rejected(),
            i.control_unaffected(),
            repeat
        ),
    )
}

fn migration(cfg: &SimConfig) -> Outcome {
    let t = Instant::now();
    let mut failed = Vec::new();
    let (mut reads, mut writes, mut touched) = (0, 0, 0);
    for seed in 0..1000 {
        let plan = MigrationPlan::random(seed, cfg);
        let r = run_migration(&plan, cfg).unwrap();
        reads += r.reads_checked;
        writes += r.writes;
        touched += r.copied_on_touch;
        if !r.ok() {
            failed.push(seed);
        }
    }
    let el = t.elapsed();
    outcome(
        failed.is_empty() && within(el, 120),
        format!(
            "1000 seeds, {reads} reads, {writes} writes, {touched} lines copied on touch, failing seeds {failed:?}, {el:.1?}"
        ),
    )
}

fn custom_config(cfg: &SimConfig) -> SimConfig {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-custom");
    fs::create_dir_all(&dir).unwrap();
    let mut trace = String::new();
    for i in 0..40u64 {
        trace += &format!("1 w {:#x} {:#x}\n1 r {:#x}\n", 0x8000_0000 + i * 8, i, 0x4000_0000 + i * 64);
    }
    fs::write(dir.join("maps"), "0x40000000 0x90000 uc\n0x80000000 0x90001 wuc\n").unwrap();
    fs::write(dir.join("trace"), trace).unwrap();
    fs::write(dir.join("rules"), "1 0x80000000 0x80001000 0x90002\n").unwrap();
    SimConfig {
        custom_trace: Some(CustomTraceConfig {
            mappings: dir.join("maps"),
            trace: dir.join("trace"),
            rules: Some(dir.join("rules")),
            asid: 1,
        }),
        ..cfg.clone()
    }
}

fn determinism(cfg: &SimConfig) -> Outcome {
    let cfg = custom_config(cfg);
    let mut same = 0;
    let mut differ = Vec::new();
    for s in Scenario::ALL {
        let csv = || to_csv(&run_scenario(s, &cfg, 3, CI_SCALE, &RunMode::ALL).unwrap());
        if csv() == csv() {
            same += 1;
        } else {
            differ.push(s.name());
        }
    }
    outcome(
        differ.is_empty(),
        format!("{same}/{} scenarios byte-identical across repeats {differ:?}", Scenario::ALL.len()),
    )
}

fn main() -> ExitCode {
    let cfg = SimConfig::default();
    let (transparency, overhead) = histogram(&cfg);
    let results = [
        ("1 oracle translation equivalence", oracle_translation()),
        ("2 redirection correctness", redirection()),
        ("3 histogram functional transparency", transparency),
        ("4 histogram overhead bounds", overhead),
        ("5 coherence invariants", coherence_suite()),
        ("6 watermark codec", watermark_codec()),
        ("7 hazard reproductions", hazards(&cfg)),
        ("8 migration linearizability", migration(&cfg)),
        ("9 report determinism", determinism(&cfg)),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
