//! Moving a live page with LightV covering the copy window.
//!
//! The page is redirected to its destination, the destination lines are
//! captured, and the DMA copies chunk by chunk while the accessor keeps
//! running. A captured line touched by the accessor is copied on the spot
//! and then served from the destination like any other line.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Check, RunRow, Scenario, ScenarioReport};
use crate::addressing::{
    reference_walk, Asid, Mapping, PageTableEntry, Pfn, PteAttrs, VirtualAddress, LEAF_LEVEL, PAGE_SIZE,
};
use crate::dram::LINE_SIZE;
use crate::error::SimError;
use crate::lightv::{LightVMode, RewriteRule};
use crate::machine::{Machine, RunStats, SimConfig};
use crate::trace::{Access, Op};

const ASID: Asid = 1;
const WORDS: u64 = PAGE_SIZE / 8;
const POISON: u64 = 0xDEAD_DEAD_DEAD_DEAD;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Step {
    Access(Access),
    /// Copy the next chunk.
    Dma,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MigrationPlan {
    pub page_va: VirtualAddress,
    pub src: Pfn,
    pub dst: Pfn,
    pub dma_chunk_bytes: u64,
    /// Fills the source frame before anything runs.
    pub content_seed: u64,
    pub before: Vec<Access>,
    pub during: Vec<Step>,
    pub after: Vec<Access>,
}

impl MigrationPlan {
    pub fn chunks(&self) -> u64 {
        PAGE_SIZE / self.dma_chunk_bytes
    }

    /// A seeded accessor interleaved with the DMA at random points.
    pub fn random(seed: u64, cfg: &SimConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = cfg.dram.base >> crate::addressing::PAGE_SHIFT;
        let page_va = VirtualAddress::new(0x8000_0000 + (rng.random_range(0..512u64) << 12)).unwrap();
        let src = Pfn::new(base + 0x1000 + rng.random_range(0..256)).unwrap();
        let dst = Pfn::new(base + 0x2000 + rng.random_range(0..256)).unwrap();
        let dma_chunk_bytes = [64, 256, 1024, 4096][rng.random_range(0..4)];
        let op = |rng: &mut ChaCha8Rng| {
            let va = VirtualAddress::new(page_va.value() + rng.random_range(0..WORDS) * 8).unwrap();
            if rng.random_bool(0.5) {
                Access::read(ASID, va)
            } else {
                Access::write(ASID, va, rng.next_u64())
            }
        };
        let before = (0..rng.random_range(0..8)).map(|_| op(&mut rng)).collect();
        let chunks = PAGE_SIZE / dma_chunk_bytes;
        let mut during: Vec<Step> = (0..rng.random_range(0..48)).map(|_| Step::Access(op(&mut rng))).collect();
        for _ in 0..chunks {
            let at = rng.random_range(0..=during.len());
            during.insert(at, Step::Dma);
        }
        let after = (0..rng.random_range(1..16)).map(|_| op(&mut rng)).collect();
        Self {
            page_va,
            src,
            dst,
            dma_chunk_bytes,
            content_seed: seed,
            before,
            during,
            after,
        }
    }

    pub fn validate(&self, cfg: &SimConfig) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Scenario(format!("migration plan: {m}")));
        let dram = cfg.dram.aperture();
        if self.src == self.dst {
            return bad("source and destination are the same frame");
        }
        if !dram.contains(self.src.base().value()) || !dram.contains(self.dst.base().value()) {
            return bad("frames must be inside DRAM");
        }
        let c = self.dma_chunk_bytes;
        if c == 0 || !c.is_multiple_of(LINE_SIZE as u64) || !PAGE_SIZE.is_multiple_of(c) {
            return bad("chunk size must be a line multiple dividing the page");
        }
        if !self.page_va.is_page_aligned() {
            return bad("page VA must be page aligned");
        }
        let all = self.before.iter().chain(self.after.iter()).chain(self.during.iter().filter_map(|s| match s {
            Step::Access(a) => Some(a),
            Step::Dma => None,
        }));
        for a in all {
            if a.va.page_base() != self.page_va || a.va.value() % 8 != 0 || a.asid != ASID {
                return bad("accessor must use aligned words of the migrated page");
            }
        }
        Ok(())
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct MigrationReport {
    pub reads_checked: u64,
    pub writes: u64,
    pub stale_reads: u64,
    pub lost_writes: u64,
    pub dma_chunks: u64,
    /// Destination lines copied on first touch rather than by the DMA.
    pub copied_on_touch: u64,
    pub resolves_to_destination: bool,
    pub source_unreferenced: bool,
    pub stats: RunStats,
}

impl MigrationReport {
    pub fn ok(&self) -> bool {
        self.stale_reads == 0 && self.lost_writes == 0 && self.resolves_to_destination && self.source_unreferenced
    }
}

struct Run<'a> {
    m: &'a mut Machine,
    shadow: Vec<u64>,
    written: Vec<bool>,
    report: MigrationReport,
}

impl Run<'_> {
    fn access(&mut self, a: &Access) -> Result<(), SimError> {
        let r = self.m.access(a)?;
        if let Some(f) = r.fault {
            return Err(SimError::Fault(f));
        }
        let w = (a.va.page_offset() / 8) as usize;
        match a.op {
            Op::Read => {
                self.report.reads_checked += 1;
                if r.value != Some(self.shadow[w]) {
                    self.report.stale_reads += 1;
                }
            }
            Op::Write(v) => {
                self.report.writes += 1;
                self.shadow[w] = v;
                self.written[w] = true;
            }
            Op::Modify(d) => {
                self.shadow[w] = self.shadow[w].wrapping_add(d);
                self.written[w] = true;
            }
        }
        Ok(())
    }
}

pub fn run_migration(plan: &MigrationPlan, cfg: &SimConfig) -> Result<MigrationReport, SimError> {
    plan.validate(cfg)?;
    let mut c = cfg.clone();
    c.mode = LightVMode::Active;
    c.debug_tlb_check = true;
    let mut m = Machine::new(c).map_err(|e| SimError::Scenario(e.to_string()))?;
    m.reserve_frame(plan.dst);
    let attrs = PteAttrs::WRITABLE | PteAttrs::USER | PteAttrs::CACHEABLE;
    m.build_space(ASID, &[Mapping::new(plan.page_va.value(), plan.src.value(), attrs)?])?;

    let mut rng = ChaCha8Rng::seed_from_u64(plan.content_seed ^ 0x6d69_6772);
    let shadow: Vec<u64> = (0..WORDS).map(|_| rng.next_u64()).collect();
    for (i, &w) in shadow.iter().enumerate() {
        m.dram_mut().poke_u64(plan.src.base().value() + i as u64 * 8, w)?;
    }
    let start = m.counters();
    let mut run = Run {
        m: &mut m,
        shadow,
        written: vec![false; WORDS as usize],
        report: MigrationReport::default(),
    };

    for a in &plan.before {
        run.access(a)?;
    }

    // Open the window: future walks see the destination, no cache holds a
    // source line, every destination line answers with source data.
    let va = plan.page_va.value();
    let rule = RewriteRule::new(0, ASID, va, va + PAGE_SIZE, plan.dst.value(), None)
        .map_err(|e| SimError::Scenario(e.to_string()))?;
    run.m.activate(&[rule])?;
    let src = plan.src.base().value();
    run.m.fabric_mut().invalidate_range(src, src + PAGE_SIZE)?;
    run.m.lightv_mut().ok_or(SimError::NoLightV)?.begin_capture(plan.dst.base(), plan.src.base());

    let mut next_chunk = 0;
    let dma = |run: &mut Run, chunk: u64| -> Result<(), SimError> {
        let (lv, dram) = run.m.lightv_with_dram().ok_or(SimError::NoLightV)?;
        let base = plan.dst.base().value() + chunk * plan.dma_chunk_bytes;
        for line in (base..base + plan.dma_chunk_bytes).step_by(LINE_SIZE) {
            lv.release_capture(line, dram)?;
        }
        run.report.dma_chunks += 1;
        Ok(())
    };
    for step in &plan.during {
        match step {
            Step::Access(a) => run.access(a)?,
            Step::Dma if next_chunk < plan.chunks() => {
                dma(&mut run, next_chunk)?;
                next_chunk += 1;
            }
            Step::Dma => {}
        }
    }
    while next_chunk < plan.chunks() {
        dma(&mut run, next_chunk)?;
        next_chunk += 1;
    }

    // Close the window: commit the real mapping, retire the rule, poison
    // the old frame so any later use of it shows up as a stale read.
    let lv = run.m.lightv().ok_or(SimError::NoLightV)?;
    debug_assert_eq!(lv.pending_captures().count(), 0);
    run.report.copied_on_touch = lv.stats().captures_served;
    run.m.write_table_entry(ASID, plan.page_va, LEAF_LEVEL, PageTableEntry::from_parts(true, plan.dst, attrs))?;
    run.m.deactivate(0)?;
    for off in (0..PAGE_SIZE).step_by(8) {
        run.m.dram_mut().poke_u64(src + off, POISON)?;
    }

    for a in &plan.after {
        run.access(a)?;
    }

    let hw = run.m.translate(ASID, plan.page_va)?.outcome;
    let space = run.m.space(ASID)?;
    let sw = reference_walk(&space, plan.page_va, run.m.dram());
    run.report.resolves_to_destination =
        hw.is_ok_and(|t| t.pa.pfn() == plan.dst) && sw.is_ok_and(|t| t.pa.pfn() == plan.dst);

    let in_src = |line: u64| line >= src && line < src + PAGE_SIZE;
    let cached = (0..run.m.config().pe_count).any(|pe| run.m.fabric().cache(pe).lines().any(|l| in_src(l.tag)));
    let tlb = (0..run.m.config().pe_count).any(|pe| run.m.mmu(pe).tlb().entries().iter().any(|e| e.pa_frame == plan.src));
    let pte = space.leaves(run.m.dram()).iter().any(|(_, e)| e.pfn() == plan.src);
    run.report.source_unreferenced = !cached && !tlb && !pte;

    run.m.flush()?;
    let dst = plan.dst.base().value();
    for w in 0..WORDS as usize {
        let got = run.m.dram().peek_u64(dst + w as u64 * 8)?;
        if got != run.shadow[w] && run.written[w] {
            run.report.lost_writes += 1;
        } else if got != run.shadow[w] {
            run.report.stale_reads += 1;
        }
    }
    let mut report = run.report;
    report.stats = m.counters().since(&start);
    Ok(report)
}

pub(super) fn migration_report(cfg: &SimConfig, seed: u64, scale: f64) -> Result<ScenarioReport, SimError> {
    let plan = MigrationPlan::random(seed, cfg);
    let r = run_migration(&plan, cfg)?;
    let mut report = ScenarioReport::new(Scenario::Migration, seed, scale);
    report.rows.push(RunRow {
        label: "active".into(),
        stats: r.stats,
    });
    report.notes.push(format!(
        "page {} moved {} -> {} in {} chunks of {} B; {} reads checked, {} writes, {} lines copied on touch",
        plan.page_va, plan.src, plan.dst, r.dma_chunks, plan.dma_chunk_bytes, r.reads_checked, r.writes, r.copied_on_touch
    ));
    report.checks.push(Check::new("no stale reads", r.stale_reads == 0, r.stale_reads.to_string()));
    report.checks.push(Check::new("no lost writes", r.lost_writes == 0, r.lost_writes.to_string()));
    report.checks.push(Check::new("translations resolve to destination", r.resolves_to_destination, ""));
    report.checks.push(Check::new("source frame unreferenced", r.source_unreferenced, ""));
    Ok(report)
}
