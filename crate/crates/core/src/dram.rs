//! Sparse, zero-filled DRAM model and a bump frame allocator.

use std::collections::{BTreeSet, HashMap};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::addressing::{Pfn, PAGE_SHIFT, PAGE_SIZE};

pub const LINE_SIZE: usize = 64;
pub const LINE_MASK: u64 = !(LINE_SIZE as u64 - 1);

/// One coherence granule.
pub type LineData = [u8; LINE_SIZE];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DramError {
    #[error("address {addr:#x} is not backed by DRAM")]
    OutsideAperture { addr: u64 },
    #[error("address {addr:#x} is not {align}-byte aligned")]
    Unaligned { addr: u64, align: u64 },
}

/// A half-open physical range `[base, base + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Aperture {
    pub base: u64,
    pub size: u64,
}

impl Aperture {
    pub fn new(base: u64, size: u64) -> Self {
        Self { base, size }
    }

    pub fn end(&self) -> u64 {
        self.base + self.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    pub fn contains_range(&self, start: u64, len: u64) -> bool {
        len == 0 || (self.contains(start) && start.checked_add(len).is_some_and(|e| e <= self.end()))
    }

    pub fn overlaps(&self, other: &Aperture) -> bool {
        self.base < other.end() && other.base < self.end()
    }
}

/// Byte-addressable memory behind the interconnect.
///
/// Storage is allocated per 4 KB page on first write; untouched bytes read
/// as zero. `read_line`/`write_line` are the counted fabric-side ports,
/// `peek_*`/`poke_*` are an uncounted backdoor used for table construction,
/// preloading and oracles.
#[derive(Debug, Clone)]
pub struct Dram {
    aperture: Aperture,
    pages: HashMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
    reads: u64,
    writes: u64,
}

impl Dram {
    pub fn new(aperture: Aperture) -> Self {
        Self {
            aperture,
            pages: HashMap::new(),
            reads: 0,
            writes: 0,
        }
    }

    pub fn aperture(&self) -> Aperture {
        self.aperture
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.aperture.contains(addr)
    }

    pub fn reads(&self) -> u64 {
        self.reads
    }

    pub fn writes(&self) -> u64 {
        self.writes
    }

    fn check(&self, addr: u64, align: u64) -> Result<(), DramError> {
        if !addr.is_multiple_of(align) {
            return Err(DramError::Unaligned { addr, align });
        }
        if !self.aperture.contains_range(addr, align) {
            return Err(DramError::OutsideAperture { addr });
        }
        Ok(())
    }

    pub fn read_line(&mut self, line_addr: u64) -> Result<LineData, DramError> {
        let line = self.peek_line(line_addr)?;
        self.reads += 1;
        Ok(line)
    }

    pub fn write_line(&mut self, line_addr: u64, data: &LineData) -> Result<(), DramError> {
        self.poke_line(line_addr, data)?;
        self.writes += 1;
        Ok(())
    }

    pub fn peek_line(&self, line_addr: u64) -> Result<LineData, DramError> {
        self.check(line_addr, LINE_SIZE as u64)?;
        let mut out = [0u8; LINE_SIZE];
        if let Some(page) = self.pages.get(&(line_addr >> PAGE_SHIFT)) {
            let off = (line_addr & (PAGE_SIZE - 1)) as usize;
            out.copy_from_slice(&page[off..off + LINE_SIZE]);
        }
        Ok(out)
    }

    pub fn poke_line(&mut self, line_addr: u64, data: &LineData) -> Result<(), DramError> {
        self.check(line_addr, LINE_SIZE as u64)?;
        let off = (line_addr & (PAGE_SIZE - 1)) as usize;
        self.page_mut(line_addr)[off..off + LINE_SIZE].copy_from_slice(data);
        Ok(())
    }

    pub fn peek_u64(&self, addr: u64) -> Result<u64, DramError> {
        self.check(addr, 8)?;
        Ok(self
            .pages
            .get(&(addr >> PAGE_SHIFT))
            .map(|page| {
                let off = (addr & (PAGE_SIZE - 1)) as usize;
                u64::from_le_bytes(page[off..off + 8].try_into().unwrap())
            })
            .unwrap_or(0))
    }

    pub fn poke_u64(&mut self, addr: u64, value: u64) -> Result<(), DramError> {
        self.check(addr, 8)?;
        let off = (addr & (PAGE_SIZE - 1)) as usize;
        self.page_mut(addr)[off..off + 8].copy_from_slice(&value.to_le_bytes());
        Ok(())
    }

    /// Zero a whole frame.
    pub fn clear_frame(&mut self, pfn: Pfn) -> Result<(), DramError> {
        let base = pfn.base().value();
        self.check(base, PAGE_SIZE)?;
        self.pages.remove(&(base >> PAGE_SHIFT));
        Ok(())
    }

    pub fn peek_frame(&self, pfn: Pfn) -> Result<Vec<u8>, DramError> {
        let base = pfn.base().value();
        self.check(base, PAGE_SIZE)?;
        Ok(match self.pages.get(&(base >> PAGE_SHIFT)) {
            Some(page) => page.to_vec(),
            None => vec![0; PAGE_SIZE as usize],
        })
    }

    fn page_mut(&mut self, addr: u64) -> &mut [u8; PAGE_SIZE as usize] {
        self.pages
            .entry(addr >> PAGE_SHIFT)
            .or_insert_with(|| Box::new([0; PAGE_SIZE as usize]))
    }

    /// SHA-256 over all non-zero pages in address order.
    pub fn digest(&self) -> [u8; 32] {
        let mut keys: Vec<_> = self
            .pages
            .iter()
            .filter(|(_, page)| page.iter().any(|&b| b != 0))
            .map(|(k, _)| *k)
            .collect();
        keys.sort_unstable();
        let mut hasher = Sha256::new();
        for k in keys {
            hasher.update(k.to_le_bytes());
            hasher.update(&self.pages[&k][..]);
        }
        hasher.finalize().into()
    }
}

/// Hands out 4 KB frames from a contiguous PFN range in ascending order.
#[derive(Debug, Clone)]
pub struct FrameAllocator {
    next: u64,
    end: u64,
    reserved: BTreeSet<u64>,
    allocated: u64,
}

impl FrameAllocator {
    pub fn new(first: Pfn, end: Pfn) -> Self {
        Self {
            next: first.value(),
            end: end.value(),
            reserved: BTreeSet::new(),
            allocated: 0,
        }
    }

    /// Allocator covering every frame of `aperture`.
    pub fn for_aperture(aperture: Aperture) -> Self {
        Self::new(
            Pfn::from_raw(aperture.base >> PAGE_SHIFT),
            Pfn::from_raw(aperture.end() >> PAGE_SHIFT),
        )
    }

    pub fn alloc(&mut self) -> Option<Pfn> {
        while self.next < self.end {
            let pfn = self.next;
            self.next += 1;
            if !self.reserved.remove(&pfn) {
                self.allocated += 1;
                return Some(Pfn::from_raw(pfn));
            }
        }
        None
    }

    /// Keep `pfn` out of future allocations. Returns false if it was
    /// already handed out or lies outside the range.
    pub fn reserve(&mut self, pfn: Pfn) -> bool {
        let raw = pfn.value();
        if raw < self.next || raw >= self.end {
            return false;
        }
        self.reserved.insert(raw)
    }

    pub fn allocated(&self) -> u64 {
        self.allocated
    }

    pub fn remaining(&self) -> u64 {
        (self.end - self.next).saturating_sub(self.reserved.len() as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dram() -> Dram {
        Dram::new(Aperture::new(0x8000_0000, 0x10_0000))
    }

    #[test]
    fn unwritten_reads_zero() {
        let mut d = dram();
        assert_eq!(d.read_line(0x8000_0040).unwrap(), [0; 64]);
        assert_eq!(d.peek_u64(0x8000_0008).unwrap(), 0);
        assert_eq!(d.reads(), 1);
    }

    #[test]
    fn writes_land_where_expected() {
        let mut d = dram();
        d.poke_u64(0x8000_0048, 0xdead_beef).unwrap();
        let line = d.read_line(0x8000_0040).unwrap();
        assert_eq!(u64::from_le_bytes(line[8..16].try_into().unwrap()), 0xdead_beef);
        let mut l = [7u8; 64];
        l[0] = 1;
        d.write_line(0x8000_1000, &l).unwrap();
        assert_eq!(d.peek_u64(0x8000_1000).unwrap() & 0xff, 1);
        assert_eq!(d.writes(), 1);
    }

    #[test]
    fn rejects_outside_and_unaligned() {
        let mut d = dram();
        assert_eq!(
            d.read_line(0x7fff_ffc0),
            Err(DramError::OutsideAperture { addr: 0x7fff_ffc0 })
        );
        assert!(matches!(d.read_line(0x8000_0001), Err(DramError::Unaligned { .. })));
        assert!(d.poke_u64(0x8010_0000, 1).is_err());
    }

    #[test]
    fn digest_ignores_zero_pages() {
        let mut a = dram();
        let b = dram();
        a.poke_u64(0x8000_2000, 0).unwrap();
        assert_eq!(a.digest(), b.digest());
        a.poke_u64(0x8000_2000, 5).unwrap();
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn allocator_skips_reserved_and_exhausts() {
        let mut f = FrameAllocator::new(Pfn::from_raw(10), Pfn::from_raw(13));
        assert!(f.reserve(Pfn::from_raw(11)));
        assert_eq!(f.alloc().map(Pfn::value), Some(10));
        assert_eq!(f.alloc().map(Pfn::value), Some(12));
        assert_eq!(f.alloc(), None);
        assert_eq!(f.allocated(), 2);
    }
}
