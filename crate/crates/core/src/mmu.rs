//! TLB, hardware page-table walker and the load/store front end.
//!
//! The walker fetches every PTE through the PE's coherent load port, so a
//! PTE line that misses in the PE cache produces a snoop that any agent on
//! the interconnect can observe and answer.

use std::collections::BTreeMap;
use std::fmt;

use crate::addressing::{
    level_shift, AddressSpace, Asid, PageTableEntry, PhysicalAddress, Pfn, PteAttrs, Translation, TranslationFault,
    VirtualAddress, LEAF_LEVEL, LEVELS, PAGE_SHIFT, PTE_SIZE,
};
use crate::coherence::{Interconnect, Source};
use crate::dram::LINE_MASK;
use crate::error::SimError;
use crate::trace::{Access, Op};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TlbEntry {
    pub asid: Asid,
    /// VA bits [38:12].
    pub va_page: u64,
    pub pa_frame: Pfn,
    pub attrs: PteAttrs,
    stamp: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TlbTarget {
    Page(VirtualAddress),
    /// Page-aligned `[start, end)`.
    Range(VirtualAddress, VirtualAddress),
    All,
}

/// Fully associative, LRU. Capacity 0 disables caching entirely.
#[derive(Clone, Debug)]
pub struct Tlb {
    capacity: usize,
    entries: Vec<TlbEntry>,
    tick: u64,
}

impl Tlb {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            tick: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TlbEntry] {
        &self.entries
    }

    pub fn lookup(&mut self, asid: Asid, va_page: u64) -> Option<TlbEntry> {
        self.tick += 1;
        let tick = self.tick;
        let e = self.entries.iter_mut().find(|e| e.asid == asid && e.va_page == va_page)?;
        e.stamp = tick;
        Some(*e)
    }

    pub fn insert(&mut self, asid: Asid, va_page: u64, pa_frame: Pfn, attrs: PteAttrs) {
        if self.capacity == 0 {
            return;
        }
        self.tick += 1;
        let entry = TlbEntry {
            asid,
            va_page,
            pa_frame,
            attrs,
            stamp: self.tick,
        };
        if let Some(e) = self.entries.iter_mut().find(|e| e.asid == asid && e.va_page == va_page) {
            *e = entry;
            return;
        }
        if self.entries.len() == self.capacity {
            let (i, _) = self.entries.iter().enumerate().min_by_key(|(_, e)| e.stamp).unwrap();
            self.entries.swap_remove(i);
        }
        self.entries.push(entry);
    }

    /// Remove matching entries; `asid == None` matches every address space.
    pub fn invalidate(&mut self, asid: Option<Asid>, target: TlbTarget) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| {
            let space = asid.is_none_or(|a| a == e.asid);
            let hit = match target {
                TlbTarget::All => true,
                TlbTarget::Page(va) => e.va_page == va.value() >> PAGE_SHIFT,
                TlbTarget::Range(s, end) => {
                    e.va_page >= s.value() >> PAGE_SHIFT && e.va_page < end.value().div_ceil(1 << PAGE_SHIFT)
                }
            };
            !(space && hit)
        });
        before - self.entries.len()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct WalkStep {
    pub level: u8,
    pub pte_address: PhysicalAddress,
    pub pte_raw: u64,
    pub served_from: Source,
}

#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct WalkTrace {
    pub steps: Vec<WalkStep>,
}

impl WalkTrace {
    pub fn fabric_reads(&self) -> usize {
        self.steps.iter().filter(|s| s.served_from != Source::Cache).count()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl fmt::Display for WalkTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            writeln!(
                f,
                "L{} pte@{:#x} raw={:#x} from={}",
                s.level,
                s.pte_address.value(),
                s.pte_raw,
                s.served_from
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct WalkReport {
    pub outcome: Result<Translation, TranslationFault>,
    pub trace: WalkTrace,
    pub latency: u64,
    pub tlb_hit: bool,
}

/// Deliberate walker defects for mutation-testing the oracle sweep.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum InjectedFault {
    /// Take each table index one bit too high.
    IndexOffByOne,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct AccessReport {
    pub value: Option<u64>,
    pub fault: Option<TranslationFault>,
    pub latency: u64,
    pub tlb_hit: bool,
    pub walk_reads: u64,
    pub walk_cache_hits: u64,
    pub data_hits: u64,
    pub data_misses: u64,
}

#[derive(Debug, Clone)]
pub struct Mmu {
    tlb: Tlb,
    spaces: BTreeMap<Asid, AddressSpace>,
    cache_ptes: bool,
    pe: usize,
    injected: Option<InjectedFault>,
}

impl Mmu {
    pub fn new(tlb_size: usize, cache_ptes: bool, pe: usize) -> Self {
        Self {
            tlb: Tlb::new(tlb_size),
            spaces: BTreeMap::new(),
            cache_ptes,
            pe,
            injected: None,
        }
    }

    pub fn inject(&mut self, fault: Option<InjectedFault>) {
        self.injected = fault;
    }

    pub fn register_space(&mut self, space: AddressSpace) {
        self.spaces.insert(space.asid, space);
    }

    pub fn space(&self, asid: Asid) -> Option<&AddressSpace> {
        self.spaces.get(&asid)
    }

    pub fn spaces(&self) -> impl Iterator<Item = &AddressSpace> {
        self.spaces.values()
    }

    pub fn tlb(&self) -> &Tlb {
        &self.tlb
    }

    pub fn cache_ptes(&self) -> bool {
        self.cache_ptes
    }

    pub fn tlb_invalidate(&mut self, asid: Option<Asid>, target: TlbTarget) -> usize {
        self.tlb.invalidate(asid, target)
    }

    fn index(&self, va: VirtualAddress, level: u8) -> u64 {
        let shift = match self.injected {
            Some(InjectedFault::IndexOffByOne) => level_shift(level) + 1,
            None => level_shift(level),
        };
        (va.value() >> shift) & 0x1ff
    }

    pub fn translate(&mut self, fabric: &mut Interconnect, asid: Asid, va: VirtualAddress) -> Result<WalkReport, SimError> {
        let va_page = va.value() >> PAGE_SHIFT;
        if let Some(e) = self.tlb.lookup(asid, va_page) {
            return Ok(WalkReport {
                outcome: Ok(Translation {
                    pa: e.pa_frame.base().offset(va.page_offset()),
                    attrs: e.attrs,
                }),
                trace: WalkTrace::default(),
                latency: 0,
                tlb_hit: true,
            });
        }
        let report = self.hardware_walk(fabric, asid, va)?;
        if let Ok(t) = report.outcome {
            self.tlb.insert(asid, va_page, t.pa.pfn(), t.attrs);
        }
        Ok(report)
    }

    /// Walk the tables through the coherent fabric, one line per level.
    pub fn hardware_walk(&mut self, fabric: &mut Interconnect, asid: Asid, va: VirtualAddress) -> Result<WalkReport, SimError> {
        let space = *self.spaces.get(&asid).ok_or(SimError::UnknownAsid(asid))?;
        let mut trace = WalkTrace::default();
        let mut latency = 0;
        let mut table = space.pgd;
        for level in 0..LEVELS {
            let pte_address = table.offset(self.index(va, level) * PTE_SIZE);
            let line = pte_address.value() & LINE_MASK;
            let read = fabric.load_line(self.pe, line, self.cache_ptes)?;
            latency += read.latency;
            let off = (pte_address.value() - line) as usize;
            let raw = u64::from_le_bytes(read.payload[off..off + 8].try_into().unwrap());
            trace.steps.push(WalkStep {
                level,
                pte_address,
                pte_raw: raw,
                served_from: read.source,
            });
            let pte = PageTableEntry::from_raw(raw);
            if !pte.present() {
                return Ok(WalkReport {
                    outcome: Err(TranslationFault { level, pte_address }),
                    trace,
                    latency,
                    tlb_hit: false,
                });
            }
            if level == LEAF_LEVEL {
                return Ok(WalkReport {
                    outcome: Ok(Translation {
                        pa: pte.pfn().base().offset(va.page_offset()),
                        attrs: pte.attrs(),
                    }),
                    trace,
                    latency,
                    tlb_hit: false,
                });
            }
            table = pte.pfn().base();
        }
        unreachable!()
    }

    /// Translate, then perform the data access at the resulting PA.
    pub fn mem_access(&mut self, fabric: &mut Interconnect, access: &Access) -> Result<AccessReport, SimError> {
        let walk = self.translate(fabric, access.asid, access.va)?;
        let mut report = AccessReport {
            latency: walk.latency,
            tlb_hit: walk.tlb_hit,
            walk_reads: walk.trace.fabric_reads() as u64,
            walk_cache_hits: (walk.trace.len() - walk.trace.fabric_reads()) as u64,
            ..Default::default()
        };
        let pa = match walk.outcome {
            Ok(t) => t.pa.value(),
            Err(fault) => {
                report.fault = Some(fault);
                return Ok(report);
            }
        };
        let count = |hit: bool, latency: u64, r: &mut AccessReport| {
            r.latency += latency;
            if hit {
                r.data_hits += 1;
            } else {
                r.data_misses += 1;
            }
        };
        match access.op {
            Op::Read => {
                let (v, r) = fabric.read_word(self.pe, pa)?;
                count(r.source == Source::Cache, r.latency, &mut report);
                report.value = Some(v);
            }
            Op::Write(v) => {
                let w = fabric.write_word(self.pe, pa, v)?;
                count(w.hit, w.latency, &mut report);
            }
            Op::Modify(delta) => {
                let (v, r) = fabric.read_word(self.pe, pa)?;
                count(r.source == Source::Cache, r.latency, &mut report);
                let nv = v.wrapping_add(delta);
                let w = fabric.write_word(self.pe, pa, nv)?;
                count(w.hit, w.latency, &mut report);
                report.value = Some(nv);
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::{build_tables, reference_walk, Mapping};
    use crate::coherence::{CacheGeometry, LatencyTable};
    use crate::dram::{Aperture, Dram, FrameAllocator};

    fn setup(cache_ptes: bool, tlb: usize, maps: &[(u64, u64)]) -> (Interconnect, Mmu, AddressSpace) {
        let ap = Aperture::new(0x8000_0000, 0x100_0000);
        let mut dram = Dram::new(ap);
        let mut frames = FrameAllocator::for_aperture(ap);
        let maps: Vec<_> = maps
            .iter()
            .map(|&(v, p)| Mapping::new(v, p, PteAttrs::WRITABLE).unwrap())
            .collect();
        let space = build_tables(1, &maps, &mut dram, &mut frames).unwrap();
        let fabric = Interconnect::new(dram, 1, CacheGeometry::default(), LatencyTable::default());
        let mut mmu = Mmu::new(tlb, cache_ptes, 0);
        mmu.register_space(space);
        (fabric, mmu, space)
    }

    fn va(v: u64) -> VirtualAddress {
        VirtualAddress::new(v).unwrap()
    }

    #[test]
    fn cold_walk_reads_three_lines() {
        let (mut f, mut mmu, _) = setup(true, 64, &[(0x1000, 0x80100)]);
        let r = mmu.translate(&mut f, 1, va(0x1008)).unwrap();
        assert_eq!(r.outcome.unwrap().pa.value(), 0x8010_0008);
        assert_eq!(r.trace.fabric_reads(), 3);
        assert!(r.trace.steps.windows(2).all(|w| w[0].level < w[1].level));
        // TLB hit: nothing on the fabric
        let again = mmu.translate(&mut f, 1, va(0x1010)).unwrap();
        assert!(again.tlb_hit && again.trace.is_empty());
    }

    #[test]
    fn shared_pgd_line_is_reused() {
        // neighboring PGD slots share a line; the second walk misses below it
        let (mut f, mut mmu, _) = setup(true, 64, &[(0x1000, 0x80100), (0x4000_0000, 0x80101)]);
        mmu.translate(&mut f, 1, va(0x1000)).unwrap();
        let r = mmu.translate(&mut f, 1, va(0x4000_0000)).unwrap();
        assert_eq!(r.trace.fabric_reads(), 2);
        assert_eq!(r.trace.steps[0].served_from, Source::Cache);
    }

    #[test]
    fn uncached_ptes_always_hit_the_fabric() {
        let (mut f, mut mmu, _) = setup(false, 0, &[(0x1000, 0x80100)]);
        for _ in 0..3 {
            let r = mmu.translate(&mut f, 1, va(0x1000)).unwrap();
            assert_eq!(r.trace.fabric_reads(), 3);
        }
        assert!(f.cache(0).is_empty());
    }

    #[test]
    fn fault_truncates_trace() {
        let (mut f, mut mmu, space) = setup(true, 64, &[(0x1000, 0x80100)]);
        let r = mmu.translate(&mut f, 1, va(0x4000_0000)).unwrap();
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.outcome.unwrap_err(), reference_walk(&space, va(0x4000_0000), f.dram()).unwrap_err());
        let r = mmu.translate(&mut f, 1, va(0x2000)).unwrap();
        assert_eq!(r.trace.len(), 3);
        assert_eq!(r.outcome.unwrap_err().level, 2);
    }

    #[test]
    fn trace_dump_format() {
        let (mut f, mut mmu, space) = setup(true, 64, &[(0x1000, 0x80100)]);
        let r = mmu.translate(&mut f, 1, va(0x1000)).unwrap();
        let dump = r.trace.to_string();
        let first = dump.lines().next().unwrap();
        assert_eq!(first, format!("L0 pte@{:#x} raw={:#x} from=DRAM", space.pgd.value(), r.trace.steps[0].pte_raw));
        assert_eq!(dump.lines().count(), 3);
    }

    #[test]
    fn tlb_invalidation() {
        let (mut f, mut mmu, _) = setup(true, 64, &[(0x1000, 0x80100), (0x2000, 0x80101)]);
        mmu.translate(&mut f, 1, va(0x1000)).unwrap();
        mmu.translate(&mut f, 1, va(0x2000)).unwrap();
        assert_eq!(mmu.tlb_invalidate(Some(1), TlbTarget::Page(va(0x2000))), 1);
        assert!(mmu.translate(&mut f, 1, va(0x1000)).unwrap().tlb_hit);
        assert!(!mmu.translate(&mut f, 1, va(0x2000)).unwrap().tlb_hit);
        mmu.tlb_invalidate(None, TlbTarget::All);
        assert!(mmu.tlb().is_empty());
        let r = mmu.translate(&mut f, 1, va(0x1000)).unwrap();
        assert!(!r.tlb_hit && !r.trace.is_empty());
    }

    #[test]
    fn tlb_lru_and_range() {
        let mut t = Tlb::new(2);
        t.insert(1, 1, Pfn::new(1).unwrap(), PteAttrs::empty());
        t.insert(1, 2, Pfn::new(2).unwrap(), PteAttrs::empty());
        t.lookup(1, 1);
        t.insert(1, 3, Pfn::new(3).unwrap(), PteAttrs::empty());
        assert!(t.lookup(1, 2).is_none());
        assert!(t.lookup(1, 1).is_some());
        assert_eq!(t.invalidate(Some(1), TlbTarget::Range(va(0x1000), va(0x3000))), 1);
        assert_eq!(t.entries()[0].va_page, 3);
        let mut off = Tlb::new(0);
        off.insert(1, 1, Pfn::new(1).unwrap(), PteAttrs::empty());
        assert!(off.is_empty());
    }

    #[test]
    fn write_then_read() {
        let (mut f, mut mmu, _) = setup(true, 64, &[(0x1000, 0x80100)]);
        let w = Access::write(1, va(0x1018), 0x55);
        assert!(mmu.mem_access(&mut f, &w).unwrap().fault.is_none());
        let r = mmu.mem_access(&mut f, &Access::read(1, va(0x1018))).unwrap();
        assert_eq!(r.value, Some(0x55));
        let m = mmu.mem_access(&mut f, &Access::modify(1, va(0x1018), 2)).unwrap();
        assert_eq!(m.value, Some(0x57));
        assert_eq!(f.peek_word(0x8010_0018).unwrap(), 0x57);
    }

    #[test]
    fn unknown_space() {
        let (mut f, mut mmu, _) = setup(true, 64, &[]);
        assert_eq!(mmu.translate(&mut f, 9, va(0)).unwrap_err(), SimError::UnknownAsid(9));
    }
}
