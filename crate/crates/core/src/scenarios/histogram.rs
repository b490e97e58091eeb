//! RGB histogram analog: a cold image stream, a few warm code pages and
//! one hot page of bins that LightV redirects.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Check, RunMode, RunRow, Scenario, ScenarioReport};
use crate::addressing::{Asid, Mapping, Pfn, PteAttrs, VirtualAddress, PAGE_SIZE};
use crate::error::SimError;
use crate::lightv::RewriteRule;
use crate::machine::{compare_runs, Comparison, Machine, RunStats, SimConfig};
use crate::trace::Access;

pub const CODE_VA: u64 = 0x40_0000;
pub const IMAGE_VA: u64 = 0x4000_0000;
pub const HOT_VA: u64 = 0x8000_0000;
pub const DEFAULT_IMAGE_BYTES: u64 = 55_600_000;
pub const ASID: Asid = 1;

const CHANNELS: u64 = 3;
const BINS_PER_CHANNEL: u64 = 128;
const BIN_SLOTS: usize = (CHANNELS * BINS_PER_CHANNEL) as usize;
pub const PASSIVE_BOUND: f64 = 0.005;
pub const ACTIVE_BOUND: f64 = 0.015;

/// Image bytes processed per instruction fetch.
const BYTES_PER_FETCH: u64 = 64;

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct HistogramWorkload {
    pub image_bytes: u64,
    pub hot_page_va: VirtualAddress,
    pub code_pages: u64,
    pub seed: u64,
}

impl Default for HistogramWorkload {
    fn default() -> Self {
        Self {
            image_bytes: DEFAULT_IMAGE_BYTES,
            hot_page_va: VirtualAddress::new(HOT_VA).unwrap(),
            code_pages: 4,
            seed: 0,
        }
    }
}

impl HistogramWorkload {
    pub fn scaled(scale: f64, seed: u64) -> Self {
        Self {
            image_bytes: (DEFAULT_IMAGE_BYTES as f64 * scale).round() as u64,
            seed,
            ..Self::default()
        }
    }

    pub fn image_pages(&self) -> u64 {
        self.image_bytes.div_ceil(PAGE_SIZE)
    }

    pub fn image_words(&self) -> u64 {
        self.image_bytes.div_ceil(8)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Scenario(format!("histogram workload: {m}")));
        if self.code_pages == 0 {
            return bad("needs at least one code page");
        }
        if !self.hot_page_va.is_page_aligned() {
            return bad("hot page must be page aligned");
        }
        let regions = [
            (CODE_VA, self.code_pages * PAGE_SIZE),
            (IMAGE_VA, self.image_pages() * PAGE_SIZE),
            (self.hot_page_va.value(), PAGE_SIZE),
        ];
        for (i, a) in regions.iter().enumerate() {
            if a.0 + a.1 > 1 << crate::addressing::VA_BITS {
                return bad("region leaves the VA space");
            }
            for b in &regions[i + 1..] {
                if a.0 < b.0 + b.1 && b.0 < a.0 + a.1 {
                    return bad("image, code and hot regions overlap");
                }
            }
        }
        Ok(())
    }

    /// Image content, one little-endian word at a time.
    pub fn image(&self) -> impl Iterator<Item = u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.image_words()).map(move |_| rng.next_u64())
    }

    /// Where each (channel, bin) counter lives in the hot page, as a word
    /// index. The permutation is seeded so bins are not laid out in order.
    pub fn bin_slots(&self) -> Vec<u16> {
        let mut slots: Vec<u16> = (0..BIN_SLOTS as u16).collect();
        slots.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed ^ 0x6869_7374));
        slots
    }

    fn code_fetch(&self, n: u64) -> Access {
        let page = n % self.code_pages;
        let line = (n / self.code_pages) % (PAGE_SIZE / 64);
        Access::read(ASID, VirtualAddress::new(CODE_VA + page * PAGE_SIZE + line * 64).unwrap())
    }
}

/// The memory behavior of the benchmark, generated lazily.
pub fn gen_histogram_trace(w: &HistogramWorkload) -> impl Iterator<Item = Access> {
    let w = w.clone();
    let slots = w.bin_slots();
    let hot = w.hot_page_va.value();
    let prologue: Vec<Access> = (0..w.code_pages).map(|n| w.code_fetch(n)).collect();
    let words = w.image();
    let body = words.enumerate().flat_map(move |(i, word)| {
        let i = i as u64;
        let mut out = Vec::with_capacity(10);
        let first_byte = i * 8;
        if first_byte.is_multiple_of(BYTES_PER_FETCH) {
            out.push(w.code_fetch(w.code_pages + first_byte / BYTES_PER_FETCH));
        }
        out.push(Access::read(ASID, VirtualAddress::new(IMAGE_VA + first_byte).unwrap()));
        let last = (first_byte + 8).min(w.image_bytes);
        for idx in first_byte..last {
            let b = (word >> ((idx - first_byte) * 8)) as u8 as u64;
            let bin = (idx % CHANNELS) * BINS_PER_CHANNEL + (b >> 1);
            let va = hot + slots[bin as usize] as u64 * 8;
            out.push(Access::modify(ASID, VirtualAddress::new(va).unwrap(), 1));
        }
        out
    });
    prologue.into_iter().chain(body)
}

/// Result of one histogram run.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct HistogramRun {
    pub mode: RunMode,
    pub stats: RunStats,
    /// Final content of the frame the hot VA resolves to.
    pub hot_page: Vec<u8>,
    pub hot_frame: Pfn,
    pub original_hot_frame: Pfn,
    /// Content of the original hot frame after the run.
    pub original_hot_page: Vec<u8>,
}

pub fn run_histogram(cfg: &SimConfig, w: &HistogramWorkload, mode: RunMode) -> Result<HistogramRun, SimError> {
    w.validate()?;
    let mut m = Machine::new(mode.config(cfg)).map_err(|e| SimError::Scenario(e.to_string()))?;

    let code: Vec<Pfn> = (0..w.code_pages).map(|_| m.alloc_frame()).collect::<Result<_, _>>()?;
    let image: Vec<Pfn> = (0..w.image_pages()).map(|_| m.alloc_frame()).collect::<Result<_, _>>()?;
    let hot = m.alloc_frame()?;
    let replacement = m.alloc_frame()?;

    let ro = PteAttrs::USER | PteAttrs::CACHEABLE;
    let data = ro | PteAttrs::EXEC_NEVER;
    let mut maps = Vec::new();
    for (i, &pfn) in code.iter().enumerate() {
        maps.push(Mapping::new(CODE_VA + i as u64 * PAGE_SIZE, pfn.value(), ro)?);
    }
    for (i, &pfn) in image.iter().enumerate() {
        maps.push(Mapping::new(IMAGE_VA + i as u64 * PAGE_SIZE, pfn.value(), data)?);
    }
    maps.push(Mapping::new(w.hot_page_va.value(), hot.value(), data | PteAttrs::WRITABLE)?);
    m.build_space(ASID, &maps)?;

    for (i, &pfn) in code.iter().enumerate() {
        for off in (0..PAGE_SIZE).step_by(8) {
            m.dram_mut().poke_u64(pfn.base().value() + off, CODE_VA + i as u64 * PAGE_SIZE + off)?;
        }
    }
    for (i, word) in w.image().enumerate() {
        let i = i as u64;
        let pfn = image[(i * 8 / PAGE_SIZE) as usize];
        m.dram_mut().poke_u64(pfn.base().value() + (i * 8) % PAGE_SIZE, word)?;
    }

    if mode == RunMode::Active {
        let va = w.hot_page_va.value();
        let rule = RewriteRule::new(0, ASID, va, va + PAGE_SIZE, replacement.value(), None)
            .map_err(|e| SimError::Scenario(e.to_string()))?;
        m.activate(&[rule])?;
    }

    let stats = m.run_trace(gen_histogram_trace(w)).map_err(|e| e.error)?;
    m.flush()?;
    let hot_frame = m.expected_translation(ASID, w.hot_page_va)?.pa.pfn();
    Ok(HistogramRun {
        mode,
        stats,
        hot_page: m.dram().peek_frame(hot_frame)?,
        hot_frame,
        original_hot_frame: hot,
        original_hot_page: m.dram().peek_frame(hot)?,
    })
}

#[derive(Clone, PartialEq, Debug)]
pub struct OverheadReport {
    pub runs: Vec<HistogramRun>,
    pub passive: Comparison,
    pub active: Comparison,
}

impl OverheadReport {
    pub fn run(&self, mode: RunMode) -> &HistogramRun {
        self.runs.iter().find(|r| r.mode == mode).unwrap()
    }

    pub fn equivalent(&self) -> bool {
        self.runs.windows(2).all(|p| p[0].hot_page == p[1].hot_page)
    }
}

pub fn run_overhead_experiment(cfg: &SimConfig, w: &HistogramWorkload) -> Result<OverheadReport, SimError> {
    let runs: Vec<HistogramRun> = RunMode::ALL
        .iter()
        .map(|&mode| run_histogram(cfg, w, mode))
        .collect::<Result<_, _>>()?;
    Ok(OverheadReport {
        passive: compare_runs(&runs[0].stats, &runs[1].stats)?,
        active: compare_runs(&runs[0].stats, &runs[2].stats)?,
        runs,
    })
}

pub(super) fn histogram_report(
    cfg: &SimConfig,
    seed: u64,
    scale: f64,
    modes: &[RunMode],
) -> Result<ScenarioReport, SimError> {
    let w = HistogramWorkload::scaled(scale, seed);
    let mut report = ScenarioReport::new(Scenario::Histogram, seed, scale);
    report.notes.push(format!(
        "image {} bytes ({} pages), hot page {}, {} code pages",
        w.image_bytes,
        w.image_pages(),
        w.hot_page_va,
        w.code_pages
    ));
    let runs: Vec<HistogramRun> = modes.iter().map(|&m| run_histogram(cfg, &w, m)).collect::<Result<_, _>>()?;
    for r in &runs {
        report.rows.push(RunRow {
            label: r.mode.to_string(),
            stats: r.stats,
        });
    }
    if runs.len() > 1 {
        let same = runs.windows(2).all(|p| p[0].hot_page == p[1].hot_page);
        report.checks.push(Check::new("histogram identical across modes", same, ""));
    }
    if let Some(a) = runs.iter().find(|r| r.mode == RunMode::Active) {
        let moved = a.hot_frame != a.original_hot_frame && a.original_hot_page.iter().all(|&b| b == 0);
        report.checks.push(Check::new(
            "active bins live in the replacement frame",
            moved,
            format!("hot VA -> frame {}, original frame {}", a.hot_frame, a.original_hot_frame),
        ));
    }
    let base = runs.iter().find(|r| r.mode == RunMode::Baseline);
    for other in runs.iter().filter(|r| r.mode != RunMode::Baseline) {
        let Some(base) = base else { break };
        let c = compare_runs(&base.stats, &other.stats)?;
        report.notes.push(format!("{} vs baseline: {}", other.mode, c));
        let (name, ok) = match other.mode {
            RunMode::Passive => ("passive overhead below 0.5%", c.relative.abs() < PASSIVE_BOUND),
            _ => ("active overhead in (0, 1.5%)", c.relative > 0.0 && c.relative < ACTIVE_BOUND),
        };
        report.checks.push(Check::new(name, ok, c.to_string()));
    }
    Ok(report)
}
