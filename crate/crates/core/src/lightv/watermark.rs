//! Fabricated frame numbers that carry walk state.
//!
//! A watermark PFN lives in a reserved window that no DRAM backs:
//!
//! ```text
//!  27                    14 13  12 11               0
//! +------------------------+------+------------------+
//! |    window base PFN     | lvl  |    context id    |
//! +------------------------+------+------------------+
//! ```

use thiserror::Error;

use crate::addressing::{Pfn, PA_BITS, PAGE_SHIFT};
use crate::dram::Aperture;

pub const LEVEL_BITS: u32 = 2;
pub const CONTEXT_BITS: u32 = 12;
pub const MAX_CONTEXTS: usize = 1 << CONTEXT_BITS;
pub const WINDOW_PAGES: u64 = 1 << (LEVEL_BITS + CONTEXT_BITS);

pub const DEFAULT_WINDOW_BASE: u64 = 0xF0_0000_0000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WatermarkError {
    #[error("frame {0:#x} is not a watermark")]
    NotWatermark(u64),
    #[error("watermarks encode levels 1 and 2, not {0}")]
    BadLevel(u8),
    #[error("context id {0} does not fit in {CONTEXT_BITS} bits")]
    ContextOutOfRange(u16),
    #[error("window base {0:#x} must be {WINDOW_PAGES}-page aligned and inside the {PA_BITS}-bit space")]
    BadBase(u64),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct WatermarkWindow {
    base_pfn: u64,
}

impl WatermarkWindow {
    pub fn new(base_pa: u64) -> Result<Self, WatermarkError> {
        let base_pfn = base_pa >> PAGE_SHIFT;
        let aligned = base_pa.is_multiple_of(WINDOW_PAGES << PAGE_SHIFT);
        let fits = (base_pfn + WINDOW_PAGES) << PAGE_SHIFT <= 1 << PA_BITS;
        if !aligned || !fits {
            return Err(WatermarkError::BadBase(base_pa));
        }
        Ok(Self { base_pfn })
    }

    pub fn aperture(&self) -> Aperture {
        Aperture::new(self.base_pfn << PAGE_SHIFT, WINDOW_PAGES << PAGE_SHIFT)
    }

    pub fn contains_pfn(&self, pfn: u64) -> bool {
        pfn >= self.base_pfn && pfn < self.base_pfn + WINDOW_PAGES
    }

    pub fn contains_pa(&self, pa: u64) -> bool {
        self.contains_pfn(pa >> PAGE_SHIFT)
    }

    pub fn encode(&self, level: u8, context: u16) -> Result<Pfn, WatermarkError> {
        if !(1..=2).contains(&level) {
            return Err(WatermarkError::BadLevel(level));
        }
        if context as usize >= MAX_CONTEXTS {
            return Err(WatermarkError::ContextOutOfRange(context));
        }
        Ok(Pfn::from_raw(self.base_pfn | ((level as u64) << CONTEXT_BITS) | context as u64))
    }

    pub fn decode(&self, pfn: u64) -> Result<(u8, u16), WatermarkError> {
        if !self.contains_pfn(pfn) {
            return Err(WatermarkError::NotWatermark(pfn));
        }
        let level = ((pfn >> CONTEXT_BITS) & ((1 << LEVEL_BITS) - 1)) as u8;
        if !(1..=2).contains(&level) {
            return Err(WatermarkError::NotWatermark(pfn));
        }
        Ok((level, (pfn & (MAX_CONTEXTS as u64 - 1)) as u16))
    }
}

impl Default for WatermarkWindow {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW_BASE).unwrap()
    }
}
