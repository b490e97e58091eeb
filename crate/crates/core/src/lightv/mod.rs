//! The snoop agent that rewrites translations in flight.
//!
//! LightV sits on the interconnect next to the PE caches. When a table
//! walk misses in the walker's cache the interconnect snoops every agent;
//! LightV claims lines on the walk path of an active rule and answers with
//! a manipulated copy. Intermediate entries on a target path are replaced
//! by watermarks (fabricated frames that name a context) so the rest of the
//! walk keeps coming back here even if some lines are served from caches.

mod rules;
mod watermark;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use rules::{parse_rules, RewriteRule, RuleError, RuleId};
pub use watermark::{
    WatermarkError, WatermarkWindow, CONTEXT_BITS, DEFAULT_WINDOW_BASE, LEVEL_BITS, MAX_CONTEXTS, WINDOW_PAGES,
};

use crate::addressing::{
    entry_span, level_shift, AddressSpace, Asid, PageTableEntry, PhysicalAddress, PteAttrs, VirtualAddress,
    LEAF_LEVEL, PAGE_SIZE, PTE_SIZE,
};
use crate::coherence::{AgentReply, SnoopAgent, SnoopKind, SnoopRequest, SnoopResponse};
use crate::dram::{Aperture, Dram, LineData, LINE_MASK, LINE_SIZE};
use crate::error::SimError;

const ENTRIES_PER_LINE: u64 = LINE_SIZE as u64 / PTE_SIZE;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LightVMode {
    /// Not on the fabric at all.
    Absent,
    /// Registered, snooped, always answers NACK.
    Passive,
    #[default]
    Active,
}

/// How LightV follows a walk below the PGD.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tracking {
    /// Serve watermark frames for intermediate entries.
    #[default]
    Watermark,
    /// Serve real intermediate entries and watch the next real table line.
    /// Only sound when page-table lines are never cached.
    WatchSet,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Isolation {
    /// Refuse rules whose PGD slot holds foreign mappings or whose pages
    /// lack intermediate tables.
    #[default]
    Strict,
    Permissive,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightVConfig {
    pub tracking: Tracking,
    pub isolation: Isolation,
    pub context_capacity: usize,
    pub window_base: u64,
}

impl Default for LightVConfig {
    fn default() -> Self {
        Self {
            tracking: Tracking::default(),
            isolation: Isolation::default(),
            context_capacity: MAX_CONTEXTS,
            window_base: DEFAULT_WINDOW_BASE,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ActivationError {
    #[error("a passive agent cannot be activated")]
    Passive,
    #[error("no address space registered for asid {0}")]
    UnknownAsid(Asid),
    #[error("rule id {0} is already active")]
    DuplicateId(RuleId),
    #[error("rules {a} and {b} overlap")]
    Overlap { a: RuleId, b: RuleId },
    #[error("rule {rule}: replacement frames leave the DRAM aperture")]
    ReplacementOutsideDram { rule: RuleId },
    #[error("rule {rule}: {neighbor} shares its PGD slot but is not covered by any rule")]
    NotIsolated { rule: RuleId, neighbor: VirtualAddress },
    #[error("rule {rule}: {va} has no level-{level} table")]
    NotPreMapped { rule: RuleId, va: VirtualAddress, level: u8 },
    #[error("rule {0} is not active")]
    UnknownRule(RuleId),
    #[error("context cache full ({capacity} live contexts)")]
    ContextCacheFull { capacity: usize },
    #[error("bad window base: {0}")]
    Window(#[from] WatermarkError),
}

/// Walk state for one subtree of one address space.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TranslationContext {
    pub id: u16,
    pub asid: Asid,
    /// Level of the table this context shadows; 0 is the PGD.
    pub level: u8,
    pub va_prefix: u64,
    pub original_table: PhysicalAddress,
    pub rules: BTreeSet<RuleId>,
    /// Real table lines watched on behalf of this context.
    pub watched: BTreeSet<u64>,
}

impl TranslationContext {
    /// VA range covered by the shadowed table. A level-0 context is
    /// scoped to a single PGD slot.
    pub fn span(&self) -> u64 {
        entry_span(self.level.saturating_sub(1))
    }

    fn covers(&self, lo: u64, hi: u64) -> bool {
        self.va_prefix < hi && lo < self.va_prefix + self.span()
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct WatchEntry {
    pub level: u8,
    pub contexts: BTreeSet<u16>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum PathMatch {
    NoMatch,
    /// A real table line in the watch set.
    Table { level: u8, contexts: Vec<u16> },
    /// A line inside the watermark window naming a live context.
    Watermark { level: u8, context: u16 },
    /// A destination line of an in-flight migration.
    Capture { source_line: u64 },
    /// A watermark line whose context is gone.
    Lost { level: u8, context: u16 },
}

/// Cache and TLB maintenance the machine must perform after a rule change.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Maintenance {
    pub tlb: Vec<(Asid, u64, u64)>,
    pub lines: BTreeSet<u64>,
}

impl Maintenance {
    fn merge(&mut self, other: Maintenance) {
        self.tlb.extend(other.tlb);
        self.lines.extend(other.lines);
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct LightVStats {
    pub snoops_seen: u64,
    pub matches: u64,
    pub lines_manipulated: u64,
    pub captures_served: u64,
    pub contexts_live: usize,
}

pub struct LightV {
    config: LightVConfig,
    mode: LightVMode,
    window: WatermarkWindow,
    dram_aperture: Aperture,
    service_cycles: u64,
    spaces: BTreeMap<Asid, AddressSpace>,
    rules: BTreeMap<RuleId, RewriteRule>,
    watch: BTreeMap<u64, WatchEntry>,
    contexts: BTreeMap<u16, TranslationContext>,
    by_key: BTreeMap<(Asid, u8, u64), u16>,
    free_ids: BTreeSet<u16>,
    captures: BTreeMap<u64, u64>,
    stats: LightVStats,
}

impl LightV {
    /// `service_cycles` is charged on every ACK on top of the snoop.
    pub fn new(
        config: LightVConfig,
        mode: LightVMode,
        dram_aperture: Aperture,
        service_cycles: u64,
    ) -> Result<Self, ActivationError> {
        let window = WatermarkWindow::new(config.window_base)?;
        let capacity = config.context_capacity.min(MAX_CONTEXTS);
        Ok(Self {
            config,
            mode,
            window,
            dram_aperture,
            service_cycles,
            spaces: BTreeMap::new(),
            rules: BTreeMap::new(),
            watch: BTreeMap::new(),
            contexts: BTreeMap::new(),
            by_key: BTreeMap::new(),
            free_ids: (0..capacity as u16).collect(),
            captures: BTreeMap::new(),
            stats: LightVStats::default(),
        })
    }

    pub fn config(&self) -> &LightVConfig {
        &self.config
    }

    pub fn mode(&self) -> LightVMode {
        self.mode
    }

    pub fn window(&self) -> WatermarkWindow {
        self.window
    }

    pub fn stats(&self) -> LightVStats {
        LightVStats {
            contexts_live: self.contexts.len(),
            ..self.stats
        }
    }

    pub fn register_space(&mut self, space: AddressSpace) {
        self.spaces.insert(space.asid, space);
    }

    pub fn rules(&self) -> impl Iterator<Item = &RewriteRule> {
        self.rules.values()
    }

    pub fn rule_for(&self, asid: Asid, va: u64) -> Option<&RewriteRule> {
        self.rules.values().find(|r| r.asid == asid && r.contains(va))
    }

    pub fn watch_set(&self) -> &BTreeMap<u64, WatchEntry> {
        &self.watch
    }

    pub fn contexts(&self) -> impl Iterator<Item = &TranslationContext> {
        self.contexts.values()
    }

    pub fn context(&self, id: u16) -> Option<&TranslationContext> {
        self.contexts.get(&id)
    }

    /// Validate and install `rules`. The returned maintenance must be
    /// applied before the next walk.
    pub fn activate(&mut self, rules: &[RewriteRule], dram: &Dram) -> Result<Maintenance, ActivationError> {
        if self.mode == LightVMode::Passive && !rules.is_empty() {
            return Err(ActivationError::Passive);
        }
        self.validate(rules, dram)?;
        self.reserve_slot_contexts(rules)?;

        let mut maint = Maintenance::default();
        for rule in rules {
            self.rules.insert(rule.id, *rule);
            let space = self.spaces[&rule.asid];
            let first = rule.start.value() >> level_shift(0);
            let last = (rule.end - 1) >> level_shift(0);
            for index0 in first..=last {
                let prefix = index0 << level_shift(0);
                let id = self
                    .context_for(rule.asid, 0, prefix, space.pgd, &[rule.id])
                    .expect("slot contexts reserved");
                let line = space.pgd.value() + index0 * PTE_SIZE;
                self.watch_line(line & LINE_MASK, 0, id);
            }
            let deeper: Vec<u16> = self
                .contexts
                .values()
                .filter(|c| c.asid == rule.asid && c.level > 0 && c.covers(rule.start.value(), rule.end))
                .map(|c| c.id)
                .collect();
            for id in deeper {
                self.contexts.get_mut(&id).unwrap().rules.insert(rule.id);
                if self.config.tracking == Tracking::WatchSet {
                    self.watch_child_lines(id);
                }
            }
            maint.merge(self.maintenance_for(rule));
        }
        self.mode = LightVMode::Active;
        Ok(maint)
    }

    pub fn deactivate(&mut self, rule_id: RuleId) -> Result<Maintenance, ActivationError> {
        let rule = *self.rules.get(&rule_id).ok_or(ActivationError::UnknownRule(rule_id))?;
        let maint = self.maintenance_for(&rule);
        self.rules.remove(&rule_id);
        let owned: Vec<u16> = self
            .contexts
            .values()
            .filter(|c| c.rules.contains(&rule_id))
            .map(|c| c.id)
            .collect();
        for id in owned {
            let ctx = self.contexts.get_mut(&id).unwrap();
            ctx.rules.remove(&rule_id);
            if ctx.rules.is_empty() {
                let ctx = self.contexts.remove(&id).unwrap();
                self.by_key.remove(&(ctx.asid, ctx.level, ctx.va_prefix));
                for line in &ctx.watched {
                    if let Some(w) = self.watch.get_mut(line) {
                        w.contexts.remove(&id);
                        if w.contexts.is_empty() {
                            self.watch.remove(line);
                        }
                    }
                }
                self.free_ids.insert(id);
            }
        }
        Ok(maint)
    }

    /// Answer snoops on `dst` lines with the content of `src` until each
    /// line is released.
    pub fn begin_capture(&mut self, dst_frame: PhysicalAddress, src_frame: PhysicalAddress) {
        for off in (0..PAGE_SIZE).step_by(LINE_SIZE) {
            self.captures.insert(dst_frame.value() + off, src_frame.value() + off);
        }
    }

    /// Copy one captured line to its destination and stop capturing it.
    /// Returns false when the line was no longer captured.
    pub fn release_capture(&mut self, dst_line: u64, dram: &mut Dram) -> Result<bool, SimError> {
        let Some(src) = self.captures.remove(&dst_line) else {
            return Ok(false);
        };
        let data = dram.read_line(src)?;
        dram.write_line(dst_line, &data)?;
        Ok(true)
    }

    pub fn pending_captures(&self) -> impl Iterator<Item = u64> + '_ {
        self.captures.keys().copied()
    }

    pub fn path_check(&self, line_addr: u64) -> PathMatch {
        let line = line_addr & LINE_MASK;
        if let Some(&source_line) = self.captures.get(&line) {
            return PathMatch::Capture { source_line };
        }
        if let Some(w) = self.watch.get(&line) {
            return PathMatch::Table {
                level: w.level,
                contexts: w.contexts.iter().copied().collect(),
            };
        }
        match self.window.decode(line >> crate::addressing::PAGE_SHIFT) {
            Ok((level, context)) if self.contexts.contains_key(&context) => PathMatch::Watermark { level, context },
            Ok((level, context)) => PathMatch::Lost { level, context },
            Err(_) => PathMatch::NoMatch,
        }
    }

    /// Rewrite the entries of one table line for every context whose walk
    /// passes through it. `original` is the real table content; `payload`
    /// is what is served for entries off every target path.
    pub fn manipulate_line(
        &mut self,
        payload: &LineData,
        original: &LineData,
        line_offset: u64,
        level: u8,
        contexts: &[u16],
    ) -> Result<LineData, SimError> {
        let mut out = *payload;
        let first_index = (line_offset & (PAGE_SIZE - 1)) / PTE_SIZE;
        for &cid in contexts {
            let Some(ctx) = self.contexts.get(&cid).cloned() else {
                continue;
            };
            let table_va = if level == 0 { 0 } else { ctx.va_prefix };
            for j in 0..ENTRIES_PER_LINE {
                let index = first_index + j;
                let child_lo = table_va | (index << level_shift(level));
                let child_hi = child_lo + entry_span(level);
                if !ctx.covers(child_lo, child_hi) {
                    continue;
                }
                let hits: Vec<RuleId> = ctx
                    .rules
                    .iter()
                    .copied()
                    .filter(|r| self.rules[r].intersects(child_lo, child_hi))
                    .collect();
                if hits.is_empty() {
                    continue;
                }
                let at = (j * PTE_SIZE) as usize;
                let orig = PageTableEntry::from_raw(u64::from_le_bytes(original[at..at + 8].try_into().unwrap()));
                let served = if !orig.present() {
                    orig
                } else if level == LEAF_LEVEL {
                    let rule = &self.rules[&hits[0]];
                    let attrs = orig.attrs() | rule.attr_overrides.unwrap_or(PteAttrs::empty());
                    PageTableEntry::from_parts(true, rule.target_pfn(child_lo), attrs)
                } else {
                    let child = self
                        .context_for(ctx.asid, level + 1, child_lo, orig.pfn().base(), &hits)
                        .ok_or(SimError::ContextCacheFull {
                            capacity: self.config.context_capacity,
                        })?;
                    match self.config.tracking {
                        Tracking::Watermark => {
                            let wm = self.window.encode(level + 1, child).expect("live ids fit the window");
                            PageTableEntry::from_parts(true, wm, orig.attrs())
                        }
                        Tracking::WatchSet => {
                            self.watch_child_lines(child);
                            orig
                        }
                    }
                };
                out[at..at + 8].copy_from_slice(&served.raw().to_le_bytes());
            }
        }
        Ok(out)
    }

    fn validate(&self, rules: &[RewriteRule], dram: &Dram) -> Result<(), ActivationError> {
        let mut seen: Vec<&RewriteRule> = self.rules.values().collect();
        for rule in rules {
            if self.rules.contains_key(&rule.id) || seen.iter().any(|r| r.id == rule.id) {
                return Err(ActivationError::DuplicateId(rule.id));
            }
            if !self.spaces.contains_key(&rule.asid) {
                return Err(ActivationError::UnknownAsid(rule.asid));
            }
            if let Some(other) = seen.iter().find(|r| r.overlaps(rule)) {
                return Err(ActivationError::Overlap { a: other.id, b: rule.id });
            }
            let base = rule.replacement_base.base().value();
            if !self.dram_aperture.contains_range(base, rule.pages() * PAGE_SIZE) {
                return Err(ActivationError::ReplacementOutsideDram { rule: rule.id });
            }
            seen.push(rule);
        }
        if self.config.isolation == Isolation::Permissive {
            return Ok(());
        }
        for rule in rules {
            let space = &self.spaces[&rule.asid];
            for va in rule.page_vas() {
                if let Err(fault) = space.leaf_address(va, dram) {
                    return Err(ActivationError::NotPreMapped {
                        rule: rule.id,
                        va,
                        level: fault.level + 1,
                    });
                }
            }
            let first = rule.start.value() >> level_shift(0);
            let last = (rule.end - 1) >> level_shift(0);
            for index0 in first..=last {
                for (va, _) in space.leaves_under(index0 as u16, dram) {
                    let covered = seen.iter().any(|r| r.asid == rule.asid && r.contains(va.value()));
                    if !covered {
                        return Err(ActivationError::NotIsolated { rule: rule.id, neighbor: va });
                    }
                }
            }
        }
        Ok(())
    }

    fn reserve_slot_contexts(&self, rules: &[RewriteRule]) -> Result<(), ActivationError> {
        let mut needed = BTreeSet::new();
        for rule in rules {
            let first = rule.start.value() >> level_shift(0);
            let last = (rule.end - 1) >> level_shift(0);
            for index0 in first..=last {
                let key = (rule.asid, 0, index0 << level_shift(0));
                if !self.by_key.contains_key(&key) {
                    needed.insert(key);
                }
            }
        }
        if needed.len() > self.free_ids.len() {
            return Err(ActivationError::ContextCacheFull {
                capacity: self.config.context_capacity,
            });
        }
        Ok(())
    }

    /// Find or allocate the context for one subtree; None when full.
    fn context_for(
        &mut self,
        asid: Asid,
        level: u8,
        prefix: u64,
        table: PhysicalAddress,
        rules: &[RuleId],
    ) -> Option<u16> {
        let key = (asid, level, prefix);
        let id = match self.by_key.get(&key) {
            Some(&id) => id,
            None => {
                let id = self.free_ids.pop_first()?;
                self.by_key.insert(key, id);
                self.contexts.insert(
                    id,
                    TranslationContext {
                        id,
                        asid,
                        level,
                        va_prefix: prefix,
                        original_table: table,
                        rules: BTreeSet::new(),
                        watched: BTreeSet::new(),
                    },
                );
                id
            }
        };
        let ctx = self.contexts.get_mut(&id).unwrap();
        ctx.original_table = table;
        ctx.rules.extend(rules.iter().copied());
        Some(id)
    }

    fn watch_line(&mut self, line: u64, level: u8, context: u16) {
        self.watch
            .entry(line)
            .or_insert_with(|| WatchEntry {
                level,
                contexts: BTreeSet::new(),
            })
            .contexts
            .insert(context);
        self.contexts.get_mut(&context).unwrap().watched.insert(line);
    }

    /// Watch the real lines of a context's table that hold rule entries.
    fn watch_child_lines(&mut self, id: u16) {
        let ctx = &self.contexts[&id];
        let shift = level_shift(ctx.level);
        let (lo, hi) = (ctx.va_prefix, ctx.va_prefix + ctx.span());
        let mut lines = BTreeSet::new();
        for r in &ctx.rules {
            let rule = &self.rules[r];
            let (a, b) = (rule.start.value().max(lo), rule.end.min(hi));
            if a >= b {
                continue;
            }
            let (first, last) = ((a - lo) >> shift, (b - 1 - lo) >> shift);
            for i in first..=last {
                lines.insert((ctx.original_table.value() + i * PTE_SIZE) & LINE_MASK);
            }
        }
        let level = ctx.level;
        for line in lines {
            self.watch_line(line, level, id);
        }
    }

    /// Lines whose served content depends on `rule`.
    fn maintenance_for(&self, rule: &RewriteRule) -> Maintenance {
        let mut m = Maintenance {
            tlb: vec![(rule.asid, rule.start.value(), rule.end)],
            lines: BTreeSet::new(),
        };
        for ctx in self.contexts.values().filter(|c| c.rules.contains(&rule.id)) {
            m.lines.extend(ctx.watched.iter().copied());
            if ctx.level > 0 {
                let page = self.window.encode(ctx.level, ctx.id).unwrap().base().value();
                m.lines.extend((page..page + PAGE_SIZE).step_by(LINE_SIZE));
            }
        }
        m
    }

    fn ack(&mut self, data: LineData) -> AgentReply {
        self.stats.matches += 1;
        AgentReply {
            response: SnoopResponse::Ack(data),
            service_cycles: self.service_cycles,
        }
    }
}

impl SnoopAgent for LightV {
    fn handle_snoop(&mut self, req: &SnoopRequest, dram: &mut Dram) -> Result<AgentReply, SimError> {
        self.stats.snoops_seen += 1;
        if self.mode != LightVMode::Active {
            return Ok(AgentReply::NACK);
        }
        let line = req.line_addr & LINE_MASK;
        match self.path_check(line) {
            PathMatch::NoMatch => Ok(AgentReply::NACK),
            PathMatch::Capture { source_line } => {
                // Copy on first touch so the destination is authoritative
                // from here on.
                let data = dram.read_line(source_line)?;
                dram.write_line(line, &data)?;
                self.captures.remove(&line);
                self.stats.captures_served += 1;
                Ok(self.ack(data))
            }
            PathMatch::Lost { context, .. } => Err(SimError::ContextLost { line, context }),
            // Table lines are only rewritten for walks; ownership requests go
            // to memory untouched.
            _ if req.kind == SnoopKind::ReadUnique => Ok(AgentReply::NACK),
            PathMatch::Table { level, contexts } => {
                let original = dram.read_line(line)?;
                let out = self.manipulate_line(&original, &original, line, level, &contexts)?;
                self.stats.lines_manipulated += 1;
                Ok(self.ack(out))
            }
            PathMatch::Watermark { level, context } => {
                let table = self.contexts[&context].original_table.value();
                let original = dram.read_line(table + (line & (PAGE_SIZE - 1)))?;
                let out = self.manipulate_line(&[0; LINE_SIZE], &original, line, level, &[context])?;
                self.stats.lines_manipulated += 1;
                Ok(self.ack(out))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::{build_tables, Mapping};
    use crate::dram::FrameAllocator;

    const DRAM_BASE: u64 = 0x8000_0000;

    fn setup(mappings: &[(u64, u64)], config: LightVConfig) -> (LightV, Dram, AddressSpace) {
        let ap = Aperture::new(DRAM_BASE, 1 << 30);
        let mut dram = Dram::new(ap);
        let mut frames = FrameAllocator::for_aperture(ap);
        let maps: Vec<Mapping> = mappings
            .iter()
            .map(|&(va, pfn)| Mapping::new(va, pfn, PteAttrs::WRITABLE).unwrap())
            .collect();
        let space = build_tables(1, &maps, &mut dram, &mut frames).unwrap();
        let mut lv = LightV::new(config, LightVMode::Active, ap, 120).unwrap();
        lv.register_space(space);
        (lv, dram, space)
    }

    fn snoop(lv: &mut LightV, dram: &mut Dram, line: u64) -> AgentReply {
        let req = SnoopRequest {
            line_addr: line,
            kind: SnoopKind::ReadShared,
            origin: 0,
        };
        lv.handle_snoop(&req, dram).unwrap()
    }

    fn entry(data: &LineData, addr: u64) -> PageTableEntry {
        let at = (addr % LINE_SIZE as u64) as usize;
        PageTableEntry::from_raw(u64::from_le_bytes(data[at..at + 8].try_into().unwrap()))
    }

    #[test]
    fn empty_activation_watches_nothing() {
        let (mut lv, mut dram, space) = setup(&[(0x1000, 0x80100)], LightVConfig::default());
        lv.activate(&[], &dram).unwrap();
        assert!(lv.watch_set().is_empty());
        assert_eq!(lv.mode(), LightVMode::Active);
        assert_eq!(snoop(&mut lv, &mut dram, space.pgd.value()).response, SnoopResponse::Nack);
    }

    #[test]
    fn one_rule_watches_its_pgd_line() {
        let (mut lv, dram, space) = setup(&[(0x8000_0000, 0x80100)], LightVConfig::default());
        let rule = RewriteRule::new(0, 1, 0x8000_0000, 0x8000_1000, 0x80500, None).unwrap();
        lv.activate(&[rule], &dram).unwrap();
        let lines: Vec<u64> = lv.watch_set().keys().copied().collect();
        assert_eq!(lines, vec![(space.pgd.value() + 2 * 8) & LINE_MASK]);
        assert_eq!(lv.path_check(lines[0]), PathMatch::Table { level: 0, contexts: vec![0] });
        assert_eq!(lv.path_check(0x8000_0000 + 0x40_0000), PathMatch::NoMatch);
    }

    #[test]
    fn two_slots_in_one_line_share_a_watch_entry() {
        let (mut lv, dram, _) = setup(&[(0x4000_0000, 0x80100), (0x8000_0000, 0x80101)], LightVConfig::default());
        let a = RewriteRule::new(0, 1, 0x4000_0000, 0x4000_1000, 0x80500, None).unwrap();
        let b = RewriteRule::new(1, 1, 0x8000_0000, 0x8000_1000, 0x80600, None).unwrap();
        lv.activate(&[a, b], &dram).unwrap();
        assert_eq!(lv.watch_set().len(), 1);
        assert_eq!(lv.contexts().count(), 2);
    }

    #[test]
    fn full_walk_through_watermarks() {
        let va = 0x8000_3000u64;
        let cfg = LightVConfig {
            isolation: Isolation::Permissive,
            ..LightVConfig::default()
        };
        let (mut lv, mut dram, space) = setup(&[(va, 0x80100), (va + 0x1000, 0x80101)], cfg);
        let rule = RewriteRule::new(0, 1, va, va + 0x1000, 0x80500, Some(PteAttrs::EXEC_NEVER)).unwrap();
        lv.activate(&[rule], &dram).unwrap();
        let idx = VirtualAddress::new(va).unwrap().indices();

        let pgd_slot = space.pgd.value() + idx.index0 as u64 * 8;
        let reply = snoop(&mut lv, &mut dram, pgd_slot & LINE_MASK);
        let real = dram.peek_line(pgd_slot & LINE_MASK).unwrap();
        let served = reply.response.payload().copied().unwrap();
        let l0 = entry(&served, pgd_slot);
        assert!(l0.present() && lv.window().contains_pfn(l0.pfn().value()));
        // only the target slot differs
        for k in 0..8 {
            if k != (pgd_slot % 64) as usize / 8 {
                assert_eq!(served[k * 8..k * 8 + 8], real[k * 8..k * 8 + 8]);
            }
        }

        let l1_slot = l0.pfn().base().value() + idx.index1 as u64 * 8;
        let served = snoop(&mut lv, &mut dram, l1_slot & LINE_MASK).response.payload().copied().unwrap();
        let l1 = entry(&served, l1_slot);
        assert_eq!(lv.window().decode(l1.pfn().value()).unwrap().0, 2);

        let l2_slot = l1.pfn().base().value() + idx.index2 as u64 * 8;
        let served = snoop(&mut lv, &mut dram, l2_slot & LINE_MASK).response.payload().copied().unwrap();
        let leaf = entry(&served, l2_slot);
        assert_eq!(leaf.pfn().value(), 0x80500);
        assert_eq!(leaf.attrs(), PteAttrs::WRITABLE | PteAttrs::EXEC_NEVER);
        // the neighboring page is blank in the synthesized line
        assert_eq!(entry(&served, l2_slot + 8).raw(), 0);
        assert_eq!(lv.stats().lines_manipulated, 3);
        assert_eq!(lv.stats().contexts_live, 3);
    }

    #[test]
    fn passive_never_acks_and_refuses_rules() {
        let ap = Aperture::new(DRAM_BASE, 1 << 20);
        let mut dram = Dram::new(ap);
        let mut lv = LightV::new(LightVConfig::default(), LightVMode::Passive, ap, 0).unwrap();
        assert_eq!(snoop(&mut lv, &mut dram, DRAM_BASE).response, SnoopResponse::Nack);
        let rule = RewriteRule::new(0, 1, 0, 0x1000, 0x80000, None).unwrap();
        assert_eq!(lv.activate(&[rule], &dram), Err(ActivationError::Passive));
        assert_eq!(lv.stats().snoops_seen, 1);
    }

    #[test]
    fn activation_errors() {
        let (mut lv, dram, _) = setup(&[(0x8000_0000, 0x80100), (0x8000_1000, 0x80101)], LightVConfig::default());
        let r = |id, s: u64, e: u64, base| RewriteRule::new(id, 1, s, e, base, None).unwrap();
        let overlap = [r(0, 0x8000_0000, 0x8000_2000, 0x80500), r(1, 0x8000_1000, 0x8000_2000, 0x80600)];
        assert_eq!(lv.activate(&overlap, &dram), Err(ActivationError::Overlap { a: 0, b: 1 }));
        let foreign = RewriteRule::new(0, 9, 0x8000_0000, 0x8000_1000, 0x80500, None).unwrap();
        assert_eq!(lv.activate(&[foreign], &dram), Err(ActivationError::UnknownAsid(9)));
        assert_eq!(
            lv.activate(&[r(0, 0x8000_0000, 0x8000_1000, 0x10)], &dram),
            Err(ActivationError::ReplacementOutsideDram { rule: 0 })
        );
        assert!(matches!(
            lv.activate(&[r(0, 0x8000_0000, 0x8000_1000, 0x80500)], &dram),
            Err(ActivationError::NotIsolated { .. })
        ));
        assert!(matches!(
            lv.activate(&[r(0, 0xC000_0000, 0xC000_1000, 0x80500)], &dram),
            Err(ActivationError::NotPreMapped { level: 1, .. })
        ));
        assert!(lv.watch_set().is_empty() && lv.rules().count() == 0);
        lv.activate(&[r(0, 0x8000_0000, 0x8000_2000, 0x80500)], &dram).unwrap();
        assert_eq!(
            lv.activate(&[r(0, 0x1_0000_0000, 0x1_0000_1000, 0x80500)], &dram),
            Err(ActivationError::DuplicateId(0))
        );
    }

    #[test]
    fn deactivate_restores_and_rejects_twice() {
        let va = 0x8000_0000u64;
        let (mut lv, mut dram, space) = setup(&[(va, 0x80100)], LightVConfig::default());
        let rule = RewriteRule::new(3, 1, va, va + 0x1000, 0x80500, None).unwrap();
        lv.activate(&[rule], &dram).unwrap();
        let pgd_line = space.pgd.value() & LINE_MASK;
        let served = snoop(&mut lv, &mut dram, pgd_line).response.payload().copied().unwrap();
        let wm = entry(&served, space.pgd.value() + 16).pfn().base().value();
        let maint = lv.deactivate(3).unwrap();
        assert!(maint.lines.contains(&pgd_line));
        assert_eq!(maint.tlb, vec![(1, va, va + 0x1000)]);
        assert!(lv.watch_set().is_empty());
        assert_eq!(lv.contexts().count(), 0);
        assert_eq!(lv.deactivate(3), Err(ActivationError::UnknownRule(3)));
        assert_eq!(snoop(&mut lv, &mut dram, pgd_line).response, SnoopResponse::Nack);
        assert!(matches!(lv.path_check(wm), PathMatch::Lost { .. }));
    }

    #[test]
    fn capacity_is_enforced() {
        let cfg = LightVConfig {
            context_capacity: 2,
            ..LightVConfig::default()
        };
        let va = 0x8000_0000u64;
        let (mut lv, mut dram, space) = setup(&[(va, 0x80100)], cfg);
        lv.activate(&[RewriteRule::new(0, 1, va, va + 0x1000, 0x80500, None).unwrap()], &dram).unwrap();
        let idx = VirtualAddress::new(va).unwrap().indices();
        let served = snoop(&mut lv, &mut dram, space.pgd.value() & LINE_MASK);
        let l0 = entry(served.response.payload().unwrap(), space.pgd.value() + 16);
        let l1_line = (l0.pfn().base().value() + idx.index1 as u64 * 8) & LINE_MASK;
        let req = SnoopRequest {
            line_addr: l1_line,
            kind: SnoopKind::ReadShared,
            origin: 0,
        };
        assert_eq!(
            lv.handle_snoop(&req, &mut dram),
            Err(SimError::ContextCacheFull { capacity: 2 })
        );
    }

    #[test]
    fn capture_copies_on_touch() {
        let (mut lv, mut dram, _) = setup(&[], LightVConfig::default());
        let src = PhysicalAddress::new(0x8010_0000).unwrap();
        let dst = PhysicalAddress::new(0x8020_0000).unwrap();
        dram.poke_u64(src.value() + 64, 0xabc).unwrap();
        lv.begin_capture(dst, src);
        assert_eq!(lv.pending_captures().count(), 64);
        let reply = snoop(&mut lv, &mut dram, dst.value() + 64);
        assert_eq!(reply.response.payload().unwrap()[0], 0xbc);
        assert_eq!(dram.peek_u64(dst.value() + 64).unwrap(), 0xabc);
        assert_eq!(lv.pending_captures().count(), 63);
        assert!(lv.release_capture(dst.value(), &mut dram).unwrap());
        assert!(!lv.release_capture(dst.value(), &mut dram).unwrap());
    }
}
