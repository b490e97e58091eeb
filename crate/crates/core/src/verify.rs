//! Randomized oracle sweeps over page-table layouts and machine shapes.
//!
//! The translation sweep compares the hardware walk through caches, TLB
//! and an idle LightV against the software walk. The redirection sweep
//! compares an active LightV against a "ghost" copy of memory in which the
//! rules were applied by editing the leaf entries directly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::addressing::{
    reference_walk, AddressSpace, Mapping, PageTableEntry, PteAttrs, Translation, TranslationFault, VirtualAddress,
    PAGE_SHIFT, PAGE_SIZE, VA_BITS,
};
use crate::coherence::CacheGeometry;
use crate::error::SimError;
use crate::lightv::{LightVMode, RewriteRule, Tracking};
use crate::machine::{Machine, SimConfig};
use crate::mmu::InjectedFault;

const ASID: u16 = 1;

type Outcome = Result<Translation, TranslationFault>;

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Counterexample {
    pub config_seed: u64,
    pub va: VirtualAddress,
    pub expected: String,
    pub got: String,
}

impl fmt::Display for Counterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "config seed {:#x}, va {}: expected {}, got {}",
            self.config_seed, self.va, self.expected, self.got
        )
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct SweepReport {
    pub configs: usize,
    pub checked: u64,
    pub mismatches: u64,
    /// Checked VAs whose expected translation differs from the real tables.
    pub redirected: u64,
    pub first: Option<Counterexample>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }

    fn record(&mut self, config_seed: u64, va: VirtualAddress, expected: &Outcome, got: &Outcome, ok: bool) {
        self.checked += 1;
        if !ok {
            self.mismatches += 1;
            self.first.get_or_insert_with(|| Counterexample {
                config_seed,
                va,
                expected: describe(expected),
                got: describe(got),
            });
        }
    }

    fn merge(&mut self, other: SweepReport) {
        self.configs += other.configs;
        self.checked += other.checked;
        self.mismatches += other.mismatches;
        self.redirected += other.redirected;
        if self.first.is_none() {
            self.first = other.first;
        }
    }
}

fn describe(o: &Outcome) -> String {
    match o {
        Ok(t) => format!("pa {} attrs {}", t.pa, t.attrs),
        Err(f) => format!("fault L{} pte@{}", f.level, f.pte_address),
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct SweepOptions {
    pub configs: usize,
    pub vas_per_config: usize,
    pub seed: u64,
    pub inject: Option<InjectedFault>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            configs: 100,
            vas_per_config: 1000,
            seed: 0,
            inject: None,
        }
    }
}

fn config_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

fn random_attrs(rng: &mut ChaCha8Rng) -> PteAttrs {
    PteAttrs::from_bits_truncate(rng.random_range(0..32u64) << 1)
}

fn random_geometry(rng: &mut ChaCha8Rng) -> CacheGeometry {
    CacheGeometry {
        sets: *[1, 4, 16, 64, 256].choose(rng).unwrap(),
        ways: *[1, 2, 4].choose(rng).unwrap(),
    }
}

/// Clustered mappings: pages share PGD lines, intermediate tables and leaf
/// lines often enough to exercise every level of the caches.
fn random_layout(rng: &mut ChaCha8Rng, dram: &SimConfig, avoid_slots: &BTreeSet<u64>) -> Vec<Mapping> {
    let first_pfn = (dram.dram.base >> PAGE_SHIFT) + (dram.dram.size >> PAGE_SHIFT) / 2;
    let span = (dram.dram.size >> PAGE_SHIFT) / 2;
    let mut pages = BTreeMap::new();
    for _ in 0..rng.random_range(1..=6) {
        let slot = loop {
            let s = if rng.random_bool(0.5) { rng.random_range(0..8) } else { rng.random_range(0..512) };
            if !avoid_slots.contains(&s) {
                break s;
            }
        };
        let mut va = (slot << 30) | (rng.random_range(0..512u64) << 21) | (rng.random_range(0..512u64) << 12);
        for _ in 0..rng.random_range(1..=48) {
            let pfn = first_pfn + rng.random_range(0..span);
            let next = va >> 30 == slot && va < 1 << VA_BITS;
            if next {
                pages.insert(va, Mapping::new(va, pfn, random_attrs(rng)).unwrap());
            }
            va += match rng.random_range(0..4) {
                0 | 1 => PAGE_SIZE,
                2 => rng.random_range(1..64) * PAGE_SIZE,
                _ => rng.random_range(1..8) << 21,
            };
        }
    }
    pages.into_values().collect()
}

fn sample_va(rng: &mut ChaCha8Rng, maps: &[Mapping]) -> VirtualAddress {
    let raw = match (rng.random_range(0..4), maps.choose(rng)) {
        (0 | 1, Some(m)) => m.va.value() | rng.random_range(0..PAGE_SIZE),
        // a sibling page under the same level-2 table
        (2, Some(m)) => (m.va.value() & !((1 << 21) - 1)) | rng.random_range(0..1 << 21),
        _ => rng.random_range(0..1 << VA_BITS),
    };
    VirtualAddress::new(raw).unwrap()
}

/// Hardware walks with no active rule must agree with the software walk.
pub fn translation_sweep(opts: &SweepOptions) -> Result<SweepReport, SimError> {
    let mut report = SweepReport::default();
    for i in 0..opts.configs {
        let cs = config_seed(opts.seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(cs);
        let cfg = SimConfig {
            mode: if i % 2 == 0 { LightVMode::Absent } else { LightVMode::Passive },
            cache: random_geometry(&mut rng),
            cache_ptes: rng.random_bool(0.5),
            tlb_size: *[0, 1, 8, 64].choose(&mut rng).unwrap(),
            fault_injection: opts.inject,
            ..SimConfig::default()
        };
        let maps = random_layout(&mut rng, &cfg, &BTreeSet::new());
        let mut m = Machine::new(cfg).map_err(|e| SimError::Scenario(e.to_string()))?;
        let space = m.build_space(ASID, &maps)?;
        for _ in 0..opts.vas_per_config {
            let va = sample_va(&mut rng, &maps);
            let got = m.translate(ASID, va)?.outcome;
            let expected = reference_walk(&space, va, m.dram());
            report.record(cs, va, &expected, &got, got == expected);
        }
        report.configs += 1;
    }
    Ok(report)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct RedirectOptions {
    pub sweep: SweepOptions,
    pub cache_ptes: bool,
    pub tlb: bool,
    pub tracking: Tracking,
}

struct RedirectLayout {
    maps: Vec<Mapping>,
    rules: Vec<RewriteRule>,
    target_slots: BTreeSet<u64>,
    /// Rule pages whose leaf is cleared after the tables are built.
    holes: Vec<u64>,
}

fn redirect_layout(rng: &mut ChaCha8Rng, cfg: &SimConfig) -> RedirectLayout {
    let dram_first = cfg.dram.base >> PAGE_SHIFT;
    let dram_pages = cfg.dram.size >> PAGE_SHIFT;
    let mut rules: Vec<RewriteRule> = Vec::new();
    let mut slots: Vec<u64> = Vec::new();
    let n = rng.random_range(1..=16);
    let mut attempts = 0;
    while rules.len() < n && attempts < 200 {
        attempts += 1;
        let slot = if !slots.is_empty() && rng.random_bool(0.25) {
            *slots.choose(rng).unwrap()
        } else if rng.random_bool(0.5) {
            rng.random_range(0..8)
        } else {
            rng.random_range(0..512)
        };
        let start = (slot << 30) | (rng.random_range(0..512u64) << 21) | (rng.random_range(0..512u64) << 12);
        let slot_end = (slot + 1) << 30;
        let pages = rng.random_range(1..=8u64).min((slot_end - start) >> PAGE_SHIFT);
        let end = start + pages * PAGE_SIZE;
        let base = dram_first + rng.random_range(0..dram_pages - pages);
        let overrides = rng.random_bool(0.5).then(|| random_attrs(rng));
        let Ok(rule) = RewriteRule::new(rules.len() as u32, ASID, start, end, base, overrides) else {
            continue;
        };
        if rules.iter().any(|r| r.overlaps(&rule)) {
            continue;
        }
        if !slots.contains(&slot) {
            slots.push(slot);
        }
        rules.push(rule);
    }
    let target_slots: BTreeSet<u64> = slots.into_iter().collect();
    let mut maps = random_layout(rng, cfg, &target_slots);
    let mut holes = Vec::new();
    let first_pfn = dram_first + dram_pages / 2;
    for r in &rules {
        for va in r.page_vas() {
            let pfn = first_pfn + rng.random_range(0..dram_pages / 2);
            maps.push(Mapping::new(va.value(), pfn, random_attrs(rng)).unwrap());
            if rng.random_bool(0.15) {
                holes.push(va.value());
            }
        }
    }
    RedirectLayout {
        maps,
        rules,
        target_slots,
        holes,
    }
}

/// Memory as it would look had each rule been applied to the tables.
fn ghost(m: &Machine, space: &AddressSpace, rules: &[RewriteRule]) -> Result<crate::dram::Dram, SimError> {
    let mut g = m.dram().clone();
    for r in rules {
        for va in r.page_vas() {
            let slot = space.leaf_address(va, &g)?;
            let pte = PageTableEntry::from_raw(g.peek_u64(slot.value())?);
            if pte.present() {
                let attrs = pte.attrs() | r.attr_overrides.unwrap_or_default();
                g.poke_u64(slot.value(), PageTableEntry::from_parts(true, r.target_pfn(va.value()), attrs).raw())?;
            }
        }
    }
    Ok(g)
}

/// Active LightV against the ghost oracle, then deactivation against the
/// untouched tables.
pub fn redirection_sweep(opts: &RedirectOptions) -> Result<SweepReport, SimError> {
    let mut report = SweepReport::default();
    for i in 0..opts.sweep.configs {
        let cs = config_seed(opts.sweep.seed ^ 0x7265_6469, i);
        let mut rng = ChaCha8Rng::seed_from_u64(cs);
        let mut cfg = SimConfig {
            mode: LightVMode::Active,
            cache: random_geometry(&mut rng),
            cache_ptes: opts.cache_ptes,
            tlb_size: if opts.tlb { *[4, 64].choose(&mut rng).unwrap() } else { 0 },
            fault_injection: opts.sweep.inject,
            ..SimConfig::default()
        };
        cfg.lightv.tracking = opts.tracking;
        let layout = redirect_layout(&mut rng, &cfg);
        let mut m = Machine::new(cfg).map_err(|e| SimError::Scenario(e.to_string()))?;
        let space = m.build_space(ASID, &layout.maps)?;
        for &h in &layout.holes {
            let slot = space.leaf_address(VirtualAddress::new(h)?, m.dram())?;
            m.dram_mut().poke_u64(slot.value(), 0)?;
        }

        let pick = |rng: &mut ChaCha8Rng| -> VirtualAddress {
            match (rng.random_range(0..3), layout.rules.choose(rng)) {
                (0, Some(r)) => VirtualAddress::new(rng.random_range(r.start.value()..r.end)).unwrap(),
                (1, _) => {
                    let slot = *layout.target_slots.iter().collect::<Vec<_>>().choose(rng).unwrap();
                    VirtualAddress::new((slot << 30) | rng.random_range(0..1 << 30)).unwrap()
                }
                _ => sample_va(rng, &layout.maps),
            }
        };
        for _ in 0..opts.sweep.vas_per_config / 4 {
            let va = pick(&mut rng);
            m.translate(ASID, va)?;
        }
        m.activate(&layout.rules)?;
        let g = ghost(&m, &space, &layout.rules)?;

        for _ in 0..opts.sweep.vas_per_config {
            let va = pick(&mut rng);
            let got = m.translate(ASID, va)?.outcome;
            let expected = reference_walk(&space, va, &g);
            if expected.is_ok() && expected != reference_walk(&space, va, m.dram()) {
                report.redirected += 1;
            }
            let in_target_slot = layout.target_slots.contains(&(va.value() >> 30));
            let ok = match (&expected, &got) {
                // faults under a shadowed slot report a watermark address
                (Err(e), Err(g)) if in_target_slot => e.level == g.level,
                _ => expected == got,
            };
            report.record(cs, va, &expected, &got, ok);
        }

        for r in &layout.rules {
            m.deactivate(r.id)?;
        }
        for _ in 0..opts.sweep.vas_per_config / 4 {
            let va = pick(&mut rng);
            let got = m.translate(ASID, va)?.outcome;
            let expected = reference_walk(&space, va, m.dram());
            report.record(cs, va, &expected, &got, got == expected);
        }
        report.configs += 1;
    }
    Ok(report)
}

/// Redirection over every combination of PTE caching and TLB.
pub fn redirection_matrix(sweep: &SweepOptions) -> Result<Vec<(bool, bool, SweepReport)>, SimError> {
    let mut out = Vec::new();
    for cache_ptes in [false, true] {
        for tlb in [false, true] {
            let r = redirection_sweep(&RedirectOptions {
                sweep: *sweep,
                cache_ptes,
                tlb,
                tracking: Tracking::Watermark,
            })?;
            out.push((cache_ptes, tlb, r));
        }
    }
    Ok(out)
}

/// Both sweeps, as run by `lightv-sim verify`.
pub fn full_sweep(opts: &SweepOptions) -> Result<(SweepReport, SweepReport), SimError> {
    let translation = translation_sweep(opts)?;
    let mut redirection = SweepReport::default();
    for (_, _, r) in redirection_matrix(opts)? {
        redirection.merge(r);
    }
    Ok((translation, redirection))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweeps_pass() {
        let opts = SweepOptions {
            configs: 4,
            vas_per_config: 200,
            ..SweepOptions::default()
        };
        let (t, r) = full_sweep(&opts).unwrap();
        assert!(t.passed(), "{:?}", t.first);
        assert!(r.passed(), "{:?}", r.first);
        assert_eq!(t.checked, 800);
        assert!(r.redirected > 0);
    }

    #[test]
    fn empty_sweep_is_vacuous() {
        let opts = SweepOptions {
            configs: 0,
            ..SweepOptions::default()
        };
        let (t, r) = full_sweep(&opts).unwrap();
        assert!(t.passed() && r.passed());
        assert_eq!(t.checked + r.checked, 0);
    }

    #[test]
    fn index_mutation_is_caught() {
        let opts = SweepOptions {
            configs: 3,
            vas_per_config: 100,
            inject: Some(InjectedFault::IndexOffByOne),
            ..SweepOptions::default()
        };
        let t = translation_sweep(&opts).unwrap();
        assert!(!t.passed());
        assert!(t.first.is_some());
        let r = redirection_sweep(&RedirectOptions {
            sweep: opts,
            cache_ptes: true,
            tlb: true,
            tracking: Tracking::Watermark,
        })
        .unwrap();
        assert!(!r.passed());
    }
}
