//! Virtual address layout, descriptor codec and page-table construction.
//!
//! The translation regime is fixed: 39-bit VAs, 4 KB granule, three levels
//! of 512-entry tables (the fourth level folded away).
//!
//! ```text
//!  38        30 29        21 20        12 11          0
//! +------------+------------+------------+-------------+
//! |  index 0   |  index 1   |  index 2   |   offset    |
//! +------------+------------+------------+-------------+
//!     PGD          PUD          PMD          frame
//! ```
//!
//! Descriptor layout (64 bits):
//!
//! ```text
//!  63      40 39                 12 11     5 4  3  2  1  0
//! +----------+---------------------+-------+--+--+--+--+--+
//! | reserved |        PFN          |  res  |XN| C| U| W| P|
//! +----------+---------------------+-------+--+--+--+--+--+
//! ```

use std::fmt;

use bitflags::bitflags;
use thiserror::Error;

use crate::dram::{Dram, DramError, FrameAllocator};

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
pub const VA_BITS: u32 = 39;
pub const PA_BITS: u32 = 40;
pub const PFN_BITS: u32 = PA_BITS - PAGE_SHIFT;
pub const ENTRIES_PER_TABLE: u64 = 512;
pub const PTE_SIZE: u64 = 8;
pub const LEVELS: u8 = 3;
pub const LEAF_LEVEL: u8 = LEVELS - 1;

const INDEX_MASK: u64 = ENTRIES_PER_TABLE - 1;
const PFN_MASK: u64 = (1 << PFN_BITS) - 1;

pub type Asid = u16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddressError {
    #[error("virtual address {0:#x} exceeds {VA_BITS} bits")]
    VaOutOfRange(u64),
    #[error("physical address {0:#x} exceeds {PA_BITS} bits")]
    PaOutOfRange(u64),
    #[error("frame number {0:#x} exceeds {PFN_BITS} bits")]
    PfnOutOfRange(u64),
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct VirtualAddress(u64);

impl VirtualAddress {
    pub fn new(value: u64) -> Result<Self, AddressError> {
        if value >> VA_BITS != 0 {
            return Err(AddressError::VaOutOfRange(value));
        }
        Ok(Self(value))
    }

    pub const fn value(self) -> u64 {
        self.0
    }

    pub fn page_base(self) -> Self {
        Self(self.0 & !(PAGE_SIZE - 1))
    }

    pub fn page_offset(self) -> u64 {
        self.0 & (PAGE_SIZE - 1)
    }

    pub fn is_page_aligned(self) -> bool {
        self.page_offset() == 0
    }

    pub fn indices(self) -> VaIndices {
        VaIndices {
            index0: ((self.0 >> 30) & INDEX_MASK) as u16,
            index1: ((self.0 >> 21) & INDEX_MASK) as u16,
            index2: ((self.0 >> 12) & INDEX_MASK) as u16,
            offset: (self.0 & (PAGE_SIZE - 1)) as u16,
        }
    }
}

impl fmt::Display for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct PhysicalAddress(u64);

impl PhysicalAddress {
    pub fn new(value: u64) -> Result<Self, AddressError> {
        if value >> PA_BITS != 0 {
            return Err(AddressError::PaOutOfRange(value));
        }
        Ok(Self(value))
    }

    pub const fn value(self) -> u64 {
        self.0
    }

    pub fn pfn(self) -> Pfn {
        Pfn(self.0 >> PAGE_SHIFT)
    }

    pub fn line(self) -> u64 {
        self.0 & crate::dram::LINE_MASK
    }

    pub fn offset(self, by: u64) -> Self {
        Self(self.0 + by)
    }
}

impl fmt::Display for PhysicalAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Page frame number: a physical address divided by the page size.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Pfn(u64);

impl Pfn {
    pub fn new(value: u64) -> Result<Self, AddressError> {
        if value & !PFN_MASK != 0 {
            return Err(AddressError::PfnOutOfRange(value));
        }
        Ok(Self(value))
    }

    /// Caller guarantees the value fits in 28 bits.
    pub(crate) const fn from_raw(value: u64) -> Self {
        Self(value)
    }

    pub const fn value(self) -> u64 {
        self.0
    }

    pub fn base(self) -> PhysicalAddress {
        PhysicalAddress(self.0 << PAGE_SHIFT)
    }

    pub fn offset(self, pages: u64) -> Result<Self, AddressError> {
        Self::new(self.0 + pages)
    }
}

impl fmt::Display for Pfn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// The four fields of a virtual address.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct VaIndices {
    pub index0: u16,
    pub index1: u16,
    pub index2: u16,
    pub offset: u16,
}

impl VaIndices {
    pub fn index(&self, level: u8) -> u16 {
        match level {
            0 => self.index0,
            1 => self.index1,
            2 => self.index2,
            _ => panic!("no translation level {level}"),
        }
    }

    pub fn join(&self) -> u64 {
        ((self.index0 as u64) << 30)
            | ((self.index1 as u64) << 21)
            | ((self.index2 as u64) << 12)
            | self.offset as u64
    }
}

pub fn split_va(raw: u64) -> Result<VaIndices, AddressError> {
    Ok(VirtualAddress::new(raw)?.indices())
}

/// Bit position of the index consumed at `level`.
pub const fn level_shift(level: u8) -> u32 {
    30 - 9 * level as u32
}

/// Size of the VA region covered by one entry at `level`.
pub const fn entry_span(level: u8) -> u64 {
    1 << level_shift(level)
}

bitflags! {
    #[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
    pub struct PteAttrs: u64 {
        const WRITABLE = 1 << 1;
        const USER = 1 << 2;
        const CACHEABLE = 1 << 3;
        const EXEC_NEVER = 1 << 4;
    }
}

impl PteAttrs {
    /// Parse `-`, a combination of `w u c x`, or a `0x` bit mask.
    pub fn parse(text: &str) -> Option<Self> {
        if text == "-" {
            return Some(Self::empty());
        }
        if let Some(hex) = text.strip_prefix("0x") {
            let bits = u64::from_str_radix(hex, 16).ok()?;
            return Self::from_bits(bits);
        }
        let mut attrs = Self::empty();
        for c in text.chars() {
            attrs |= match c {
                'w' => Self::WRITABLE,
                'u' => Self::USER,
                'c' => Self::CACHEABLE,
                'x' => Self::EXEC_NEVER,
                _ => return None,
            };
        }
        Some(attrs)
    }
}

impl fmt::Display for PteAttrs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("-");
        }
        for (flag, c) in [
            (Self::WRITABLE, 'w'),
            (Self::USER, 'u'),
            (Self::CACHEABLE, 'c'),
            (Self::EXEC_NEVER, 'x'),
        ] {
            if self.contains(flag) {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

const PRESENT: u64 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub struct PageTableEntry(u64);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DecodedPte {
    pub present: bool,
    pub pfn: Pfn,
    pub attrs: PteAttrs,
}

impl PageTableEntry {
    pub const EMPTY: Self = Self(0);

    pub fn encode(present: bool, pfn: u64, attrs: PteAttrs) -> Result<Self, AddressError> {
        let pfn = Pfn::new(pfn)?;
        Ok(Self::from_parts(present, pfn, attrs))
    }

    pub fn from_parts(present: bool, pfn: Pfn, attrs: PteAttrs) -> Self {
        Self((present as u64) | (pfn.0 << PAGE_SHIFT) | attrs.bits())
    }

    pub const fn from_raw(raw: u64) -> Self {
        Self(raw)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    pub fn present(self) -> bool {
        self.0 & PRESENT != 0
    }

    pub fn pfn(self) -> Pfn {
        Pfn((self.0 >> PAGE_SHIFT) & PFN_MASK)
    }

    /// Unknown bits are dropped.
    pub fn attrs(self) -> PteAttrs {
        PteAttrs::from_bits_truncate(self.0)
    }

    pub fn decode(self) -> DecodedPte {
        DecodedPte {
            present: self.present(),
            pfn: self.pfn(),
            attrs: self.attrs(),
        }
    }
}

pub fn encode_pte(present: bool, pfn: u64, attrs: PteAttrs) -> Result<PageTableEntry, AddressError> {
    PageTableEntry::encode(present, pfn, attrs)
}

pub fn decode_pte(raw: u64) -> DecodedPte {
    PageTableEntry::from_raw(raw).decode()
}

/// A walk stopped at a non-present entry.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Error)]
#[error("translation fault at level {level} (pte @ {pte_address})")]
pub struct TranslationFault {
    pub level: u8,
    pub pte_address: PhysicalAddress,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Translation {
    pub pa: PhysicalAddress,
    pub attrs: PteAttrs,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Mapping {
    pub va: VirtualAddress,
    pub pfn: Pfn,
    pub attrs: PteAttrs,
}

impl Mapping {
    pub fn new(va: u64, pfn: u64, attrs: PteAttrs) -> Result<Self, AddressError> {
        Ok(Self {
            va: VirtualAddress::new(va)?,
            pfn: Pfn::new(pfn)?,
            attrs,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TableError {
    #[error("virtual address {0} is not page aligned")]
    Unaligned(VirtualAddress),
    #[error("out of frames while allocating page tables")]
    FramesExhausted,
    #[error("{va} already maps frame {existing}, refusing {requested}")]
    Conflict {
        va: VirtualAddress,
        existing: Pfn,
        requested: Pfn,
    },
    #[error(transparent)]
    Dram(#[from] DramError),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct AddressSpace {
    pub asid: Asid,
    pub pgd: PhysicalAddress,
}

fn entry_address(table: PhysicalAddress, index: u16) -> PhysicalAddress {
    table.offset(index as u64 * PTE_SIZE)
}

fn alloc_table(dram: &mut Dram, frames: &mut FrameAllocator) -> Result<PhysicalAddress, TableError> {
    let pfn = frames.alloc().ok_or(TableError::FramesExhausted)?;
    dram.clear_frame(pfn)?;
    Ok(pfn.base())
}

impl AddressSpace {
    /// Allocate an empty PGD.
    pub fn create(asid: Asid, dram: &mut Dram, frames: &mut FrameAllocator) -> Result<Self, TableError> {
        Ok(Self {
            asid,
            pgd: alloc_table(dram, frames)?,
        })
    }

    /// Install one 4 KB mapping, allocating intermediate tables on demand.
    pub fn map(&self, m: Mapping, dram: &mut Dram, frames: &mut FrameAllocator) -> Result<(), TableError> {
        if !m.va.is_page_aligned() {
            return Err(TableError::Unaligned(m.va));
        }
        let idx = m.va.indices();
        let mut table = self.pgd;
        for level in 0..LEAF_LEVEL {
            let slot = entry_address(table, idx.index(level));
            let pte = PageTableEntry::from_raw(dram.peek_u64(slot.value())?);
            table = if pte.present() {
                pte.pfn().base()
            } else {
                let next = alloc_table(dram, frames)?;
                let entry = PageTableEntry::from_parts(true, next.pfn(), PteAttrs::empty());
                dram.poke_u64(slot.value(), entry.raw())?;
                next
            };
        }
        let slot = entry_address(table, idx.index2);
        let old = PageTableEntry::from_raw(dram.peek_u64(slot.value())?);
        let new = PageTableEntry::from_parts(true, m.pfn, m.attrs);
        if old.present() && old != new {
            return Err(TableError::Conflict {
                va: m.va,
                existing: old.pfn(),
                requested: m.pfn,
            });
        }
        dram.poke_u64(slot.value(), new.raw())?;
        Ok(())
    }

    /// Address of the entry consulted at `level` for `va`, provided every
    /// level above it is present.
    pub fn entry_address(&self, va: VirtualAddress, level: u8, dram: &Dram) -> Result<PhysicalAddress, TranslationFault> {
        let idx = va.indices();
        let mut table = self.pgd;
        for l in 0..level {
            let slot = entry_address(table, idx.index(l));
            let pte = read_entry(dram, slot, l)?;
            if !pte.present() {
                return Err(TranslationFault { level: l, pte_address: slot });
            }
            table = pte.pfn().base();
        }
        Ok(entry_address(table, idx.index(level)))
    }

    pub fn leaf_address(&self, va: VirtualAddress, dram: &Dram) -> Result<PhysicalAddress, TranslationFault> {
        self.entry_address(va, LEAF_LEVEL, dram)
    }

    /// Every present leaf as (page VA, entry), in VA order.
    pub fn leaves(&self, dram: &Dram) -> Vec<(VirtualAddress, PageTableEntry)> {
        let mut out = Vec::new();
        self.collect_leaves(self.pgd, 0, 0, dram, &mut out);
        out
    }

    /// Leaves beneath a single PGD slot.
    pub fn leaves_under(&self, index0: u16, dram: &Dram) -> Vec<(VirtualAddress, PageTableEntry)> {
        let mut out = Vec::new();
        let slot = entry_address(self.pgd, index0);
        if let Ok(pte) = read_entry(dram, slot, 0) {
            if pte.present() {
                self.collect_leaves(pte.pfn().base(), 1, (index0 as u64) << 30, dram, &mut out);
            }
        }
        out
    }

    fn collect_leaves(
        &self,
        table: PhysicalAddress,
        level: u8,
        prefix: u64,
        dram: &Dram,
        out: &mut Vec<(VirtualAddress, PageTableEntry)>,
    ) {
        for i in 0..ENTRIES_PER_TABLE as u16 {
            let Ok(pte) = read_entry(dram, entry_address(table, i), level) else {
                continue;
            };
            if !pte.present() {
                continue;
            }
            let va = prefix | ((i as u64) << level_shift(level));
            if level == LEAF_LEVEL {
                out.push((VirtualAddress(va), pte));
            } else {
                self.collect_leaves(pte.pfn().base(), level + 1, va, dram, out);
            }
        }
    }
}

fn read_entry(dram: &Dram, slot: PhysicalAddress, level: u8) -> Result<PageTableEntry, TranslationFault> {
    dram.peek_u64(slot.value())
        .map(PageTableEntry::from_raw)
        .map_err(|_| TranslationFault { level, pte_address: slot })
}

/// Materialize `mappings` as a fresh three-level radix tree.
pub fn build_tables(
    asid: Asid,
    mappings: &[Mapping],
    dram: &mut Dram,
    frames: &mut FrameAllocator,
) -> Result<AddressSpace, TableError> {
    let space = AddressSpace::create(asid, dram, frames)?;
    for m in mappings {
        space.map(*m, dram, frames)?;
    }
    Ok(space)
}

/// Software walk straight out of DRAM; no caches, no fabric, no agents.
///
/// A table pointer outside the DRAM aperture faults at the level that
/// tried to read through it.
pub fn reference_walk(space: &AddressSpace, va: VirtualAddress, dram: &Dram) -> Result<Translation, TranslationFault> {
    let idx = va.indices();
    let mut table = space.pgd;
    for level in 0..LEVELS {
        let slot = entry_address(table, idx.index(level));
        let pte = read_entry(dram, slot, level)?;
        if !pte.present() {
            return Err(TranslationFault { level, pte_address: slot });
        }
        if level == LEAF_LEVEL {
            return Ok(Translation {
                pa: pte.pfn().base().offset(va.page_offset()),
                attrs: pte.attrs(),
            });
        }
        table = pte.pfn().base();
    }
    unreachable!()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

pub(crate) fn parse_hex(field: &str) -> Option<u64> {
    let digits = field
        .strip_prefix("0x")
        .or_else(|| field.strip_prefix("0X"))
        .unwrap_or(field);
    u64::from_str_radix(&digits.replace('_', ""), 16).ok()
}

/// Parse `VA_hex PFN_hex attr_flags` lines; `#` starts a comment.
pub fn parse_mappings(text: &str) -> Result<Vec<Mapping>, ParseError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ParseError { line: n + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let va = parse_hex(fields[0]).ok_or_else(|| err(format!("bad VA `{}`", fields[0])))?;
        let pfn = parse_hex(fields[1]).ok_or_else(|| err(format!("bad PFN `{}`", fields[1])))?;
        let attrs = PteAttrs::parse(fields[2]).ok_or_else(|| err(format!("bad attribute flags `{}`", fields[2])))?;
        let m = Mapping::new(va, pfn, attrs).map_err(|e| err(e.to_string()))?;
        if !m.va.is_page_aligned() {
            return Err(err(format!("VA {} is not page aligned", m.va)));
        }
        out.push(m);
    }
    Ok(out)
}
