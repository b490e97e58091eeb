//! Composition root: configuration, wiring and run orchestration.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::{
    build_tables, reference_walk, AddressSpace, Asid, Mapping, PageTableEntry, Pfn, Translation, TranslationFault,
    VirtualAddress, PAGE_SIZE, PA_BITS,
};
use crate::coherence::{AgentId, CacheGeometry, FabricEvent, Interconnect, LatencyTable};
use crate::dram::{Aperture, Dram, FrameAllocator, LINE_MASK};
use crate::error::SimError;
use crate::lightv::{LightV, LightVConfig, LightVMode, Maintenance, RewriteRule, RuleId, WatermarkWindow, MAX_CONTEXTS};
use crate::mmu::{AccessReport, InjectedFault, Mmu, TlbTarget, WalkReport};
use crate::trace::{Access, TraceDigest};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramConfig {
    pub base: u64,
    pub size: u64,
}

impl Default for DramConfig {
    fn default() -> Self {
        Self {
            base: 0x8000_0000,
            size: 2 << 30,
        }
    }
}

impl DramConfig {
    pub fn aperture(&self) -> Aperture {
        Aperture::new(self.base, self.size)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultPolicy {
    /// Stop the run at the first translation fault.
    #[default]
    Abort,
    /// Count the fault, skip the access, keep going.
    RecordAndSkip,
}

/// Inputs of the `custom-trace` scenario, as file paths.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomTraceConfig {
    pub mappings: PathBuf,
    pub trace: PathBuf,
    #[serde(default)]
    pub rules: Option<PathBuf>,
    #[serde(default = "default_asid")]
    pub asid: Asid,
}

fn default_asid() -> Asid {
    1
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub mode: LightVMode,
    pub cache_ptes: bool,
    pub tlb_size: usize,
    pub pe_count: usize,
    pub fault_policy: FaultPolicy,
    /// Re-derive the expected translation on every TLB hit.
    pub debug_tlb_check: bool,
    pub cache: CacheGeometry,
    pub latency: LatencyTable,
    pub dram: DramConfig,
    pub lightv: LightVConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub custom_trace: Option<CustomTraceConfig>,
    #[serde(skip)]
    pub fault_injection: Option<InjectedFault>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mode: LightVMode::Active,
            cache_ptes: true,
            tlb_size: 64,
            pe_count: 1,
            fault_policy: FaultPolicy::Abort,
            debug_tlb_check: false,
            cache: CacheGeometry::default(),
            latency: LatencyTable::default(),
            dram: DramConfig::default(),
            lightv: LightVConfig::default(),
            custom_trace: None,
            fault_injection: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

impl ConfigError {
    fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        Self::Invalid {
            field,
            message: message.into(),
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative `custom_trace` paths are taken from the config's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(ct), Some(dir)) = (cfg.custom_trace.as_mut(), path.parent()) {
            for p in [&mut ct.mappings, &mut ct.trace].into_iter().chain(ct.rules.as_mut()) {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = self.cache;
        if g.sets == 0 || !g.sets.is_power_of_two() {
            return Err(ConfigError::invalid("cache.sets", "must be a nonzero power of two"));
        }
        if g.ways == 0 {
            return Err(ConfigError::invalid("cache.ways", "must be at least 1"));
        }
        if !(1..=16).contains(&self.pe_count) {
            return Err(ConfigError::invalid("pe_count", "must be between 1 and 16"));
        }
        let d = self.dram;
        if !d.base.is_multiple_of(PAGE_SIZE) || !d.size.is_multiple_of(PAGE_SIZE) || d.size == 0 {
            return Err(ConfigError::invalid("dram", "base and size must be nonzero page multiples"));
        }
        if d.base.checked_add(d.size).is_none_or(|end| end > 1 << PA_BITS) {
            return Err(ConfigError::invalid("dram", "aperture exceeds the 40-bit physical space"));
        }
        let window = WatermarkWindow::new(self.lightv.window_base)
            .map_err(|e| ConfigError::invalid("lightv.window_base", e.to_string()))?;
        if window.aperture().overlaps(&d.aperture()) {
            return Err(ConfigError::invalid("lightv.window_base", "watermark window overlaps DRAM"));
        }
        if !(1..=MAX_CONTEXTS).contains(&self.lightv.context_capacity) {
            return Err(ConfigError::invalid(
                "lightv.context_capacity",
                format!("must be between 1 and {MAX_CONTEXTS}"),
            ));
        }
        Ok(())
    }
}

/// Counters for one run. Every field is a delta over that run.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct RunStats {
    pub accesses: u64,
    pub total_cycles: u64,
    pub data_hits: u64,
    pub data_misses: u64,
    pub walk_reads: u64,
    pub walk_cache_hits: u64,
    pub tlb_hits: u64,
    pub tlb_misses: u64,
    pub snoops_issued: u64,
    pub snoops_acked: u64,
    pub dram_reads: u64,
    pub dram_writes: u64,
    pub writebacks: u64,
    pub lines_manipulated: u64,
    pub faults: u64,
    pub trace_digest: u64,
}

impl RunStats {
    /// Counter differences against an earlier snapshot of the same machine.
    pub fn since(&self, start: &RunStats) -> RunStats {
        let now = self;
        RunStats {
            accesses: now.accesses - start.accesses,
            total_cycles: now.total_cycles - start.total_cycles,
            data_hits: now.data_hits - start.data_hits,
            data_misses: now.data_misses - start.data_misses,
            walk_reads: now.walk_reads - start.walk_reads,
            walk_cache_hits: now.walk_cache_hits - start.walk_cache_hits,
            tlb_hits: now.tlb_hits - start.tlb_hits,
            tlb_misses: now.tlb_misses - start.tlb_misses,
            snoops_issued: now.snoops_issued - start.snoops_issued,
            snoops_acked: now.snoops_acked - start.snoops_acked,
            dram_reads: now.dram_reads - start.dram_reads,
            dram_writes: now.dram_writes - start.dram_writes,
            writebacks: now.writebacks - start.writebacks,
            lines_manipulated: now.lines_manipulated - start.lines_manipulated,
            faults: now.faults - start.faults,
            trace_digest: now.trace_digest,
        }
    }

    /// (name, value) for every counter compared across runs.
    pub fn counters(&self) -> [(&'static str, u64); 14] {
        [
            ("accesses", self.accesses),
            ("total_cycles", self.total_cycles),
            ("data_hits", self.data_hits),
            ("data_misses", self.data_misses),
            ("walk_reads", self.walk_reads),
            ("walk_cache_hits", self.walk_cache_hits),
            ("tlb_hits", self.tlb_hits),
            ("tlb_misses", self.tlb_misses),
            ("snoops_issued", self.snoops_issued),
            ("snoops_acked", self.snoops_acked),
            ("dram_reads", self.dram_reads),
            ("dram_writes", self.dram_writes),
            ("writebacks", self.writebacks),
            ("lines_manipulated", self.lines_manipulated),
        ]
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("access #{at} failed: {error}")]
pub struct RunError {
    pub at: u64,
    pub error: SimError,
    pub stats: Box<RunStats>,
}

/// Relative cost of run `b` against run `a`.
#[derive(Clone, PartialEq, Debug)]
pub struct Comparison {
    pub relative: f64,
    pub deltas: Vec<(&'static str, i128)>,
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+.4}%", self.relative * 100.0)
    }
}

pub fn compare_runs(a: &RunStats, b: &RunStats) -> Result<Comparison, SimError> {
    if a.trace_digest != b.trace_digest {
        return Err(SimError::TraceMismatch {
            a: a.trace_digest,
            b: b.trace_digest,
        });
    }
    let relative = if a.total_cycles == 0 {
        0.0
    } else {
        (b.total_cycles as f64 - a.total_cycles as f64) / a.total_cycles as f64
    };
    let deltas = a
        .counters()
        .iter()
        .zip(b.counters())
        .map(|(&(name, x), (_, y))| (name, y as i128 - x as i128))
        .collect();
    Ok(Comparison { relative, deltas })
}

/// Cumulative counters of a machine; runs report differences of these.
#[derive(Clone, Copy, Default)]
struct Totals {
    accesses: u64,
    cycles: u64,
    data_hits: u64,
    data_misses: u64,
    walk_reads: u64,
    walk_cache_hits: u64,
    tlb_hits: u64,
    tlb_misses: u64,
    faults: u64,
}

pub struct Machine {
    config: SimConfig,
    fabric: Interconnect,
    mmus: Vec<Mmu>,
    frames: FrameAllocator,
    lightv: Option<AgentId>,
    totals: Totals,
}

impl Machine {
    pub fn new(config: SimConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let aperture = config.dram.aperture();
        let mut fabric = Interconnect::new(Dram::new(aperture), config.pe_count, config.cache, config.latency);
        let lightv = match config.mode {
            LightVMode::Absent => None,
            mode => {
                let agent = LightV::new(config.lightv, mode, aperture, config.latency.lightv + config.latency.dram)
                    .map_err(|e| ConfigError::invalid("lightv", e.to_string()))?;
                Some(fabric.register_agent(Box::new(agent)).expect("fresh fabric"))
            }
        };
        let mmus = (0..config.pe_count)
            .map(|pe| {
                let mut m = Mmu::new(config.tlb_size, config.cache_ptes, pe);
                m.inject(config.fault_injection);
                m
            })
            .collect();
        Ok(Self {
            frames: FrameAllocator::for_aperture(aperture),
            config,
            fabric,
            mmus,
            lightv,
            totals: Totals::default(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn fabric(&self) -> &Interconnect {
        &self.fabric
    }

    pub fn fabric_mut(&mut self) -> &mut Interconnect {
        &mut self.fabric
    }

    pub fn dram(&self) -> &Dram {
        self.fabric.dram()
    }

    /// Backdoor access for preloading memory images.
    pub fn dram_mut(&mut self) -> &mut Dram {
        self.fabric.dram_mut()
    }

    pub fn mmu(&self, pe: usize) -> &Mmu {
        &self.mmus[pe]
    }

    pub fn mmu_mut(&mut self, pe: usize) -> &mut Mmu {
        &mut self.mmus[pe]
    }

    pub fn cycles(&self) -> u64 {
        self.totals.cycles
    }

    pub fn lightv(&self) -> Option<&LightV> {
        self.fabric.agent::<LightV>(self.lightv?)
    }

    pub fn lightv_mut(&mut self) -> Option<&mut LightV> {
        self.fabric.agent_mut::<LightV>(self.lightv?)
    }

    pub fn lightv_with_dram(&mut self) -> Option<(&mut LightV, &mut Dram)> {
        self.fabric.agent_with_dram::<LightV>(self.lightv?)
    }

    pub fn alloc_frame(&mut self) -> Result<Pfn, SimError> {
        let pfn = self.frames.alloc().ok_or(SimError::Table(crate::addressing::TableError::FramesExhausted))?;
        self.fabric.dram_mut().clear_frame(pfn)?;
        Ok(pfn)
    }

    /// Keep the table allocator away from a frame a mapping will use.
    pub fn reserve_frame(&mut self, pfn: Pfn) -> bool {
        self.frames.reserve(pfn)
    }

    /// Build page tables for `asid` and register them with every MMU and
    /// with LightV.
    pub fn build_space(&mut self, asid: Asid, mappings: &[Mapping]) -> Result<AddressSpace, SimError> {
        for m in mappings {
            self.frames.reserve(m.pfn);
        }
        let space = build_tables(asid, mappings, self.fabric.dram_mut(), &mut self.frames)?;
        for mmu in &mut self.mmus {
            mmu.register_space(space);
        }
        if let Some(lv) = self.lightv_mut() {
            lv.register_space(space);
        }
        Ok(space)
    }

    pub fn space(&self, asid: Asid) -> Result<AddressSpace, SimError> {
        self.mmus[0].space(asid).copied().ok_or(SimError::UnknownAsid(asid))
    }

    pub fn activate(&mut self, rules: &[RewriteRule]) -> Result<(), SimError> {
        let (lv, dram) = self.lightv_with_dram().ok_or(SimError::NoLightV)?;
        let maint = lv.activate(rules, dram)?;
        self.apply(&maint)
    }

    pub fn deactivate(&mut self, rule: RuleId) -> Result<(), SimError> {
        let lv = self.lightv_mut().ok_or(SimError::NoLightV)?;
        let maint = lv.deactivate(rule)?;
        self.apply(&maint)
    }

    pub fn apply(&mut self, maint: &Maintenance) -> Result<(), SimError> {
        for &(asid, start, end) in &maint.tlb {
            let s = VirtualAddress::new(start)?;
            let e = VirtualAddress::new(end - 1)?;
            for mmu in &mut self.mmus {
                mmu.tlb_invalidate(Some(asid), TlbTarget::Range(s, e));
            }
        }
        for &line in &maint.lines {
            self.fabric.invalidate_line(line)?;
        }
        Ok(())
    }

    pub fn tlb_invalidate(&mut self, asid: Option<Asid>, target: TlbTarget) {
        for mmu in &mut self.mmus {
            mmu.tlb_invalidate(asid, target);
        }
    }

    /// Update one real table entry: drop the line from every cache, then
    /// store the new value in memory.
    pub fn write_table_entry(
        &mut self,
        asid: Asid,
        va: VirtualAddress,
        level: u8,
        pte: PageTableEntry,
    ) -> Result<(), SimError> {
        let space = self.space(asid)?;
        let slot = space.entry_address(va, level, self.dram())?;
        self.fabric.invalidate_line(slot.line())?;
        self.fabric.dram_mut().poke_u64(slot.value(), pte.raw())?;
        self.tlb_invalidate(Some(asid), TlbTarget::Page(va.page_base()));
        Ok(())
    }

    /// Hardware translation on PE 0, charged to the clock.
    pub fn translate(&mut self, asid: Asid, va: VirtualAddress) -> Result<WalkReport, SimError> {
        let r = self.mmus[0].translate(&mut self.fabric, asid, va)?;
        self.totals.cycles += r.latency;
        Ok(r)
    }

    /// What a fresh walk must produce given the real tables and the active
    /// rules.
    pub fn expected_translation(&self, asid: Asid, va: VirtualAddress) -> Result<Translation, SimError> {
        let space = self.space(asid)?;
        let t = reference_walk(&space, va, self.dram())?;
        let rule = self
            .lightv()
            .filter(|lv| lv.mode() == LightVMode::Active)
            .and_then(|lv| lv.rule_for(asid, va.value()));
        Ok(match rule {
            Some(r) => Translation {
                pa: r.target_pfn(va.value()).base().offset(va.page_offset()),
                attrs: t.attrs | r.attr_overrides.unwrap_or_default(),
            },
            None => t,
        })
    }

    fn check_tlb(&self, pe: usize, access: &Access) -> Result<(), SimError> {
        let page = access.va.value() >> crate::addressing::PAGE_SHIFT;
        let Some(e) = self.mmus[pe]
            .tlb()
            .entries()
            .iter()
            .find(|e| e.asid == access.asid && e.va_page == page)
        else {
            return Ok(());
        };
        let fresh = self.expected_translation(access.asid, access.va.page_base());
        match fresh {
            Ok(t) if t.pa.pfn() == e.pa_frame => Ok(()),
            other => Err(SimError::StaleTlb {
                va: access.va,
                cached: e.pa_frame.value(),
                fresh: match other {
                    Ok(t) => format!("{:#x}", t.pa.pfn().value()),
                    Err(e) => e.to_string(),
                },
            }),
        }
    }

    /// One access on `pe`. Faults are reported, not raised.
    pub fn access_on(&mut self, pe: usize, access: &Access) -> Result<AccessReport, SimError> {
        if self.config.debug_tlb_check {
            self.check_tlb(pe, access)?;
        }
        let r = self.mmus[pe].mem_access(&mut self.fabric, access)?;
        let t = &mut self.totals;
        t.accesses += 1;
        t.cycles += r.latency;
        t.data_hits += r.data_hits;
        t.data_misses += r.data_misses;
        t.walk_reads += r.walk_reads;
        t.walk_cache_hits += r.walk_cache_hits;
        if r.tlb_hit {
            t.tlb_hits += 1;
        } else {
            t.tlb_misses += 1;
        }
        if r.fault.is_some() {
            t.faults += 1;
        }
        Ok(r)
    }

    pub fn access(&mut self, access: &Access) -> Result<AccessReport, SimError> {
        self.access_on(0, access)
    }

    /// Cumulative counters since the machine was built.
    pub fn counters(&self) -> RunStats {
        let f = self.fabric.stats();
        let t = self.totals;
        RunStats {
            accesses: t.accesses,
            total_cycles: t.cycles,
            data_hits: t.data_hits,
            data_misses: t.data_misses,
            walk_reads: t.walk_reads,
            walk_cache_hits: t.walk_cache_hits,
            tlb_hits: t.tlb_hits,
            tlb_misses: t.tlb_misses,
            snoops_issued: f.snoops_issued,
            snoops_acked: f.snoops_acked,
            dram_reads: self.dram().reads(),
            dram_writes: self.dram().writes(),
            writebacks: f.writebacks,
            lines_manipulated: self.lightv().map_or(0, |lv| lv.stats().lines_manipulated),
            faults: t.faults,
            trace_digest: 0,
        }
    }

    fn delta(&self, start: &RunStats, digest: u64) -> RunStats {
        RunStats {
            trace_digest: digest,
            ..self.counters().since(start)
        }
    }

    /// Replay `trace` on PE 0 and report what it cost.
    pub fn run_trace<I>(&mut self, trace: I) -> Result<RunStats, RunError>
    where
        I: IntoIterator<Item = Access>,
    {
        let start = self.counters();
        let mut digest = TraceDigest::new();
        for (at, access) in trace.into_iter().enumerate() {
            digest.push(&access);
            let fail = |m: &Self, error: SimError, digest: TraceDigest| RunError {
                at: at as u64,
                error,
                stats: Box::new(m.delta(&start, digest.finish())),
            };
            match self.access(&access) {
                Ok(r) => {
                    if let (Some(fault), FaultPolicy::Abort) = (r.fault, self.config.fault_policy) {
                        return Err(fail(self, SimError::Fault(fault), digest));
                    }
                }
                Err(e) => return Err(fail(self, e, digest)),
            }
        }
        Ok(self.delta(&start, digest.finish()))
    }

    /// Write back and drop every cached line and TLB entry.
    pub fn flush(&mut self) -> Result<(), SimError> {
        self.fabric.flush_all()?;
        self.tlb_invalidate(None, TlbTarget::All);
        Ok(())
    }

    pub fn set_event_log(&mut self, on: bool) {
        self.fabric.set_event_log(on);
    }

    pub fn take_events(&mut self) -> Vec<FabricEvent> {
        self.fabric.take_events()
    }

    /// Current coherent value of a word, uncharged.
    pub fn peek_word(&self, pa: u64) -> Result<u64, SimError> {
        self.fabric.peek_word(pa)
    }
}

/// Line addresses of one frame.
pub fn frame_lines(pfn: Pfn) -> impl Iterator<Item = u64> {
    let base = pfn.base().value();
    (base..base + PAGE_SIZE).step_by(64).map(|l| l & LINE_MASK)
}

impl fmt::Debug for Machine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Machine")
            .field("mode", &self.config.mode)
            .field("cycles", &self.totals.cycles)
            .finish_non_exhaustive()
    }
}

/// Turn a fault into the `TranslationFault` it carries, if any.
pub fn as_fault(e: &SimError) -> Option<TranslationFault> {
    match e {
        SimError::Fault(f) => Some(*f),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::PteAttrs;

    fn machine(mode: LightVMode) -> (Machine, AddressSpace) {
        let mut m = Machine::new(SimConfig {
            mode,
            ..SimConfig::default()
        })
        .unwrap();
        let maps = [Mapping::new(0x8000_0000, 0x90000, PteAttrs::WRITABLE).unwrap()];
        let s = m.build_space(1, &maps).unwrap();
        (m, s)
    }

    fn va(v: u64) -> VirtualAddress {
        VirtualAddress::new(v).unwrap()
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = SimConfig::default();
        assert_eq!(SimConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(SimConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn validation_names_the_field() {
        let bad = |text: &str| match SimConfig::from_toml(text) {
            Err(ConfigError::Invalid { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(bad("[cache]\nsets = 3"), "cache.sets");
        assert_eq!(bad("[cache]\nways = 0"), "cache.ways");
        assert_eq!(bad("pe_count = 0"), "pe_count");
        assert_eq!(bad("[dram]\nbase = 0xF000000000"), "lightv.window_base");
        assert_eq!(bad("[lightv]\ncontext_capacity = 5000"), "lightv.context_capacity");
        assert!(matches!(SimConfig::from_toml("bogus = 1"), Err(ConfigError::Parse(_))));
        assert!(matches!(SimConfig::from_toml("mode = \"sideways\""), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn absent_has_no_agent() {
        let (mut m, _) = machine(LightVMode::Absent);
        assert!(m.lightv().is_none());
        assert_eq!(m.activate(&[]), Err(SimError::NoLightV));
        let r = m.translate(1, va(0x8000_0000)).unwrap();
        assert_eq!(r.outcome.unwrap().pa.value(), 0x9000_0000);
    }

    #[test]
    fn activation_redirects_and_deactivation_restores() {
        let (mut m, _) = machine(LightVMode::Active);
        let target = va(0x8000_0010);
        m.access(&Access::write(1, target, 7)).unwrap();
        let dst = m.alloc_frame().unwrap();
        let rule = RewriteRule::new(0, 1, 0x8000_0000, 0x8000_1000, dst.value(), None).unwrap();
        m.activate(&[rule]).unwrap();
        let t = m.translate(1, target).unwrap();
        assert_eq!(t.outcome.unwrap().pa.pfn(), dst);
        m.deactivate(0).unwrap();
        let t = m.translate(1, target).unwrap();
        assert_eq!(t.outcome.unwrap().pa.value(), 0x9000_0010);
        assert_eq!(m.access(&Access::read(1, target)).unwrap().value, Some(7));
    }

    #[test]
    fn abort_policy_stops_at_first_fault() {
        let (mut m, _) = machine(LightVMode::Passive);
        let trace = vec![Access::read(1, va(0x8000_0000)), Access::read(1, va(0x10_0000)), Access::read(1, va(0x8000_0008))];
        let err = m.run_trace(trace.clone()).unwrap_err();
        assert_eq!(err.at, 1);
        assert_eq!(err.stats.accesses, 2);
        assert!(as_fault(&err.error).is_some());

        let (mut m, _) = machine(LightVMode::Passive);
        m.config.fault_policy = FaultPolicy::RecordAndSkip;
        let s = m.run_trace(trace).unwrap();
        assert_eq!((s.accesses, s.faults), (3, 1));
    }

    #[test]
    fn compare_runs_rejects_different_traces() {
        let a = RunStats {
            total_cycles: 1000,
            trace_digest: 1,
            ..RunStats::default()
        };
        let b = RunStats {
            total_cycles: 1010,
            ..a
        };
        let c = compare_runs(&a, &b).unwrap();
        assert!((c.relative - 0.01).abs() < 1e-12);
        assert_eq!(c.deltas[1], ("total_cycles", 10));
        let other = RunStats { trace_digest: 2, ..a };
        assert!(matches!(compare_runs(&a, &other), Err(SimError::TraceMismatch { .. })));
    }

    #[test]
    fn stale_tlb_is_caught_in_debug_mode() {
        let (mut m, _) = machine(LightVMode::Active);
        m.config.debug_tlb_check = true;
        let a = Access::read(1, va(0x8000_0000));
        m.access(&a).unwrap();
        // rewrite the real leaf behind the TLB's back
        let space = m.space(1).unwrap();
        let leaf = space.leaf_address(a.va, m.dram()).unwrap();
        m.dram_mut().poke_u64(leaf.value(), PageTableEntry::from_parts(true, Pfn::new(0x90001).unwrap(), PteAttrs::WRITABLE).raw()).unwrap();
        assert!(matches!(m.access(&a), Err(SimError::StaleTlb { .. })));
    }
}
