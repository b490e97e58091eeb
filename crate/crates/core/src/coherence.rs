//! MESI caches and the snoop-broadcasting interconnect.
//!
//! The fabric is fully serialized: one coherent transaction completes
//! before the next begins. On a miss the interconnect snoops every other
//! PE cache, then every registered agent in registration order; the first
//! holder to ACK supplies the line. If nobody ACKs the line comes from
//! DRAM. Memory is fetched speculatively alongside the snoop, so a NACKed
//! broadcast costs `max(snoop, dram)` rather than their sum.

use std::any::Any;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dram::{Dram, LineData, LINE_MASK, LINE_SIZE};
use crate::error::SimError;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum CacheState {
    Modified,
    Exclusive,
    Shared,
    Invalid,
}

impl CacheState {
    pub fn is_unique(self) -> bool {
        matches!(self, Self::Modified | Self::Exclusive)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheGeometry {
    pub sets: usize,
    pub ways: usize,
}

impl Default for CacheGeometry {
    fn default() -> Self {
        Self { sets: 256, ways: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct CacheLine {
    pub tag: u64,
    pub payload: LineData,
    pub state: CacheState,
    stamp: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Lookup {
    Hit { payload: LineData, state: CacheState },
    Miss,
}

fn check_line(addr: u64) -> Result<(), SimError> {
    if addr & !LINE_MASK != 0 {
        return Err(SimError::Unaligned {
            addr,
            align: LINE_SIZE as u64,
        });
    }
    Ok(())
}

/// Set-associative, LRU, write-back. Absent lines are Invalid; resident
/// lines are never stored in the Invalid state.
#[derive(Clone, Debug)]
pub struct Cache {
    geometry: CacheGeometry,
    sets: Vec<Vec<CacheLine>>,
    tick: u64,
}

impl Cache {
    pub fn new(geometry: CacheGeometry) -> Self {
        Self {
            geometry,
            sets: vec![Vec::with_capacity(geometry.ways); geometry.sets],
            tick: 0,
        }
    }

    pub fn geometry(&self) -> CacheGeometry {
        self.geometry
    }

    fn set_of(&self, line: u64) -> usize {
        ((line / LINE_SIZE as u64) % self.geometry.sets as u64) as usize
    }

    /// Pure probe; neither MESI state nor LRU order changes.
    pub fn lookup(&self, line_addr: u64) -> Result<Lookup, SimError> {
        check_line(line_addr)?;
        Ok(match self.get(line_addr) {
            Some(l) => Lookup::Hit {
                payload: l.payload,
                state: l.state,
            },
            None => Lookup::Miss,
        })
    }

    pub fn get(&self, line_addr: u64) -> Option<&CacheLine> {
        self.sets[self.set_of(line_addr)].iter().find(|l| l.tag == line_addr)
    }

    pub fn get_mut(&mut self, line_addr: u64) -> Option<&mut CacheLine> {
        let set = self.set_of(line_addr);
        self.sets[set].iter_mut().find(|l| l.tag == line_addr)
    }

    pub fn state(&self, line_addr: u64) -> CacheState {
        self.get(line_addr).map_or(CacheState::Invalid, |l| l.state)
    }

    pub fn touch(&mut self, line_addr: u64) {
        self.tick += 1;
        let tick = self.tick;
        if let Some(l) = self.get_mut(line_addr) {
            l.stamp = tick;
        }
    }

    /// Install or overwrite a line. Returns the evicted victim, if any;
    /// the caller owns writing back a Modified victim.
    pub fn fill(&mut self, line_addr: u64, payload: LineData, state: CacheState) -> Option<CacheLine> {
        debug_assert_ne!(state, CacheState::Invalid);
        self.tick += 1;
        let stamp = self.tick;
        let ways = self.geometry.ways;
        let set = self.set_of(line_addr);
        let lines = &mut self.sets[set];
        if let Some(l) = lines.iter_mut().find(|l| l.tag == line_addr) {
            l.payload = payload;
            l.state = state;
            l.stamp = stamp;
            return None;
        }
        let victim = if lines.len() >= ways {
            let (i, _) = lines.iter().enumerate().min_by_key(|(_, l)| l.stamp).unwrap();
            Some(lines.swap_remove(i))
        } else {
            None
        };
        lines.push(CacheLine {
            tag: line_addr,
            payload,
            state,
            stamp,
        });
        victim
    }

    pub fn remove(&mut self, line_addr: u64) -> Option<CacheLine> {
        let set = self.set_of(line_addr);
        let lines = &mut self.sets[set];
        let i = lines.iter().position(|l| l.tag == line_addr)?;
        Some(lines.swap_remove(i))
    }

    /// Drop a line, writing it back first if Modified. Returns whether a
    /// writeback happened.
    pub fn invalidate(&mut self, line_addr: u64, dram: &mut Dram) -> Result<bool, SimError> {
        match self.remove(line_addr) {
            Some(l) if l.state == CacheState::Modified => {
                dram.write_line(line_addr, &l.payload)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    pub fn lines(&self) -> impl Iterator<Item = &CacheLine> {
        self.sets.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum SnoopKind {
    ReadShared,
    /// Write intent; other copies are invalidated.
    ReadUnique,
}

pub type AgentId = usize;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct SnoopRequest {
    pub line_addr: u64,
    pub kind: SnoopKind,
    /// Requesting PE.
    pub origin: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SnoopResponse {
    Ack(LineData),
    Nack,
}

impl SnoopResponse {
    pub fn is_ack(&self) -> bool {
        matches!(self, Self::Ack(_))
    }

    pub fn payload(&self) -> Option<&LineData> {
        match self {
            Self::Ack(p) => Some(p),
            Self::Nack => None,
        }
    }
}

/// An agent's answer plus the cycles it spent producing it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct AgentReply {
    pub response: SnoopResponse,
    pub service_cycles: u64,
}

impl AgentReply {
    pub const NACK: Self = Self {
        response: SnoopResponse::Nack,
        service_cycles: 0,
    };
}

/// A coherent master attached to the interconnect that does not have a
/// PE cache of its own.
pub trait SnoopAgent: Any + Send {
    fn handle_snoop(&mut self, req: &SnoopRequest, dram: &mut Dram) -> Result<AgentReply, SimError>;
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Source {
    Cache,
    Snooped,
    Dram,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cache => "CACHE",
            Self::Snooped => "SNOOPED",
            Self::Dram => "DRAM",
        })
    }
}

/// Flat per-event cycle costs.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyTable {
    pub cache_hit: u64,
    pub cci: u64,
    pub snoop: u64,
    pub dram: u64,
    pub lightv: u64,
}

impl Default for LatencyTable {
    fn default() -> Self {
        Self {
            cache_hit: 2,
            cci: 10,
            snoop: 15,
            dram: 100,
            lightv: 20,
        }
    }
}

/// What happened on the fabric, for independent cycle accounting.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FabricEvent {
    CacheHit,
    Read { snooped: bool, acked: bool, service: u64 },
    Upgrade { snooped: bool },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct FabricStats {
    pub snoops_issued: u64,
    pub snoops_acked: u64,
    pub writebacks: u64,
    pub upgrades: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ReadOutcome {
    pub payload: LineData,
    pub source: Source,
    pub latency: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct WriteOutcome {
    pub hit: bool,
    pub latency: u64,
}

pub struct Interconnect {
    dram: Dram,
    caches: Vec<Cache>,
    agents: Vec<Box<dyn SnoopAgent>>,
    latency: LatencyTable,
    started: bool,
    stats: FabricStats,
    events: Option<Vec<FabricEvent>>,
}

impl fmt::Debug for Interconnect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Interconnect")
            .field("pes", &self.caches.len())
            .field("agents", &self.agents.len())
            .field("stats", &self.stats)
            .finish()
    }
}

impl Interconnect {
    pub fn new(dram: Dram, pe_count: usize, geometry: CacheGeometry, latency: LatencyTable) -> Self {
        assert!(pe_count > 0);
        Self {
            dram,
            caches: (0..pe_count).map(|_| Cache::new(geometry)).collect(),
            agents: Vec::new(),
            latency,
            started: false,
            stats: FabricStats::default(),
            events: None,
        }
    }

    pub fn register_agent(&mut self, agent: Box<dyn SnoopAgent>) -> Result<AgentId, SimError> {
        if self.started {
            return Err(SimError::AlreadyStarted);
        }
        self.agents.push(agent);
        Ok(self.agents.len() - 1)
    }

    pub fn agent<T: SnoopAgent>(&self, id: AgentId) -> Option<&T> {
        let agent: &dyn Any = self.agents.get(id)?.as_ref();
        agent.downcast_ref()
    }

    pub fn agent_mut<T: SnoopAgent>(&mut self, id: AgentId) -> Option<&mut T> {
        let agent: &mut dyn Any = self.agents.get_mut(id)?.as_mut();
        agent.downcast_mut()
    }

    /// Split borrow: one agent plus DRAM.
    pub fn agent_with_dram<T: SnoopAgent>(&mut self, id: AgentId) -> Option<(&mut T, &mut Dram)> {
        let agent: &mut dyn Any = self.agents.get_mut(id)?.as_mut();
        Some((agent.downcast_mut()?, &mut self.dram))
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn pe_count(&self) -> usize {
        self.caches.len()
    }

    pub fn latency(&self) -> &LatencyTable {
        &self.latency
    }

    pub fn dram(&self) -> &Dram {
        &self.dram
    }

    pub fn dram_mut(&mut self) -> &mut Dram {
        &mut self.dram
    }

    pub fn cache(&self, pe: usize) -> &Cache {
        &self.caches[pe]
    }

    pub fn stats(&self) -> FabricStats {
        self.stats
    }

    pub fn set_event_log(&mut self, on: bool) {
        self.events = on.then(Vec::new);
    }

    pub fn take_events(&mut self) -> Vec<FabricEvent> {
        self.events.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn log(&mut self, e: FabricEvent) {
        if let Some(ev) = self.events.as_mut() {
            ev.push(e);
        }
    }

    fn has_snoop_targets(&self) -> bool {
        self.caches.len() > 1 || !self.agents.is_empty()
    }

    fn writeback_victim(&mut self, victim: Option<CacheLine>) -> Result<(), SimError> {
        if let Some(v) = victim {
            if v.state == CacheState::Modified {
                self.dram.write_line(v.tag, &v.payload)?;
                self.stats.writebacks += 1;
            }
        }
        Ok(())
    }

    /// One broadcast transaction for a line the requester does not hold.
    pub fn coherent_read(
        &mut self,
        requester: usize,
        line_addr: u64,
        kind: SnoopKind,
        allocate: bool,
    ) -> Result<ReadOutcome, SimError> {
        check_line(line_addr)?;
        self.started = true;
        let snooped = self.has_snoop_targets();
        if snooped {
            self.stats.snoops_issued += 1;
        }

        let mut supplied = None;
        for (pe, cache) in self.caches.iter_mut().enumerate() {
            if pe == requester {
                continue;
            }
            match kind {
                SnoopKind::ReadShared => {
                    if let Some(l) = cache.get_mut(line_addr) {
                        if l.state == CacheState::Modified {
                            self.dram.write_line(line_addr, &l.payload)?;
                            self.stats.writebacks += 1;
                        }
                        l.state = CacheState::Shared;
                        supplied.get_or_insert(l.payload);
                    }
                }
                SnoopKind::ReadUnique => {
                    // dirty data migrates with ownership, no writeback needed
                    if let Some(l) = cache.remove(line_addr) {
                        supplied.get_or_insert(l.payload);
                    }
                }
            }
        }

        let lat = self.latency;
        let mut service = 0;
        let (payload, source) = match supplied {
            Some(p) => (p, Source::Snooped),
            None => {
                let req = SnoopRequest {
                    line_addr,
                    kind,
                    origin: requester,
                };
                let mut acked = None;
                for agent in self.agents.iter_mut() {
                    let reply = agent.handle_snoop(&req, &mut self.dram)?;
                    if let SnoopResponse::Ack(p) = reply.response {
                        service = reply.service_cycles;
                        acked = Some(p);
                        break;
                    }
                }
                match acked {
                    Some(p) => (p, Source::Snooped),
                    None => {
                        if !self.dram.contains(line_addr) {
                            return Err(SimError::FabricGap { addr: line_addr });
                        }
                        (self.dram.read_line(line_addr)?, Source::Dram)
                    }
                }
            }
        };

        let acked = source == Source::Snooped;
        let latency = match (acked, snooped) {
            (true, _) => lat.cci + lat.snoop + service,
            (false, true) => lat.cci + lat.snoop.max(lat.dram),
            (false, false) => lat.cci + lat.dram,
        };
        if acked {
            self.stats.snoops_acked += 1;
        }
        self.log(FabricEvent::Read { snooped, acked, service });

        if allocate {
            let state = match (kind, source) {
                (SnoopKind::ReadUnique, _) | (SnoopKind::ReadShared, Source::Dram) => CacheState::Exclusive,
                _ => CacheState::Shared,
            };
            let victim = self.caches[requester].fill(line_addr, payload, state);
            self.writeback_victim(victim)?;
        }
        Ok(ReadOutcome {
            payload,
            source,
            latency,
        })
    }

    /// PE load port: cache first, fabric on miss.
    pub fn load_line(&mut self, requester: usize, line_addr: u64, allocate: bool) -> Result<ReadOutcome, SimError> {
        check_line(line_addr)?;
        if let Some(l) = self.caches[requester].get(line_addr) {
            let payload = l.payload;
            self.caches[requester].touch(line_addr);
            self.log(FabricEvent::CacheHit);
            return Ok(ReadOutcome {
                payload,
                source: Source::Cache,
                latency: self.latency.cache_hit,
            });
        }
        self.coherent_read(requester, line_addr, SnoopKind::ReadShared, allocate)
    }

    pub fn read_word(&mut self, requester: usize, pa: u64) -> Result<(u64, ReadOutcome), SimError> {
        if !pa.is_multiple_of(8) {
            return Err(SimError::Unaligned { addr: pa, align: 8 });
        }
        let out = self.load_line(requester, pa & LINE_MASK, true)?;
        let off = (pa & !LINE_MASK) as usize;
        Ok((u64::from_le_bytes(out.payload[off..off + 8].try_into().unwrap()), out))
    }

    pub fn write_word(&mut self, requester: usize, pa: u64, value: u64) -> Result<WriteOutcome, SimError> {
        if !pa.is_multiple_of(8) {
            return Err(SimError::Unaligned { addr: pa, align: 8 });
        }
        let line = pa & LINE_MASK;
        let lat = self.latency;
        let outcome = match self.caches[requester].state(line) {
            CacheState::Modified | CacheState::Exclusive => {
                self.log(FabricEvent::CacheHit);
                WriteOutcome {
                    hit: true,
                    latency: lat.cache_hit,
                }
            }
            CacheState::Shared => {
                self.upgrade(requester, line)?;
                let snooped = self.has_snoop_targets();
                WriteOutcome {
                    hit: true,
                    latency: lat.cci + if snooped { lat.snoop } else { 0 },
                }
            }
            CacheState::Invalid => {
                let r = self.coherent_read(requester, line, SnoopKind::ReadUnique, true)?;
                WriteOutcome {
                    hit: false,
                    latency: r.latency,
                }
            }
        };
        let cache = &mut self.caches[requester];
        cache.touch(line);
        let l = cache.get_mut(line).expect("line resident after write allocation");
        l.state = CacheState::Modified;
        let off = (pa & !LINE_MASK) as usize;
        l.payload[off..off + 8].copy_from_slice(&value.to_le_bytes());
        Ok(outcome)
    }

    /// S -> M: invalidate every other copy. Agents observe the request but
    /// cannot supply data the requester already has.
    fn upgrade(&mut self, requester: usize, line: u64) -> Result<(), SimError> {
        self.started = true;
        let snooped = self.has_snoop_targets();
        if snooped {
            self.stats.snoops_issued += 1;
        }
        self.stats.upgrades += 1;
        for (pe, cache) in self.caches.iter_mut().enumerate() {
            if pe != requester {
                cache.remove(line);
            }
        }
        let req = SnoopRequest {
            line_addr: line,
            kind: SnoopKind::ReadUnique,
            origin: requester,
        };
        for agent in self.agents.iter_mut() {
            agent.handle_snoop(&req, &mut self.dram)?;
        }
        self.log(FabricEvent::Upgrade { snooped });
        Ok(())
    }

    /// Cache maintenance: drop `line` everywhere, writing back dirty data.
    pub fn invalidate_line(&mut self, line: u64) -> Result<(), SimError> {
        for cache in self.caches.iter_mut() {
            if cache.invalidate(line, &mut self.dram)? {
                self.stats.writebacks += 1;
            }
        }
        Ok(())
    }

    /// Drop every resident line in `[start, end)`.
    pub fn invalidate_range(&mut self, start: u64, end: u64) -> Result<usize, SimError> {
        let mut victims: Vec<u64> = self
            .caches
            .iter()
            .flat_map(|c| c.lines().map(|l| l.tag))
            .filter(|&t| t >= start && t < end)
            .collect();
        victims.sort_unstable();
        victims.dedup();
        for &line in &victims {
            self.invalidate_line(line)?;
        }
        Ok(victims.len())
    }

    /// Write back and drop everything.
    pub fn flush_all(&mut self) -> Result<(), SimError> {
        self.invalidate_range(0, u64::MAX).map(|_| ())
    }

    /// No line is held Modified/Exclusive by one cache while any other
    /// cache holds it at all. Returns the first offending line.
    pub fn check_single_writer(&self) -> Result<(), u64> {
        for (pe, cache) in self.caches.iter().enumerate() {
            for l in cache.lines().filter(|l| l.state.is_unique()) {
                if self.caches.iter().enumerate().any(|(o, c)| o != pe && c.get(l.tag).is_some()) {
                    return Err(l.tag);
                }
            }
        }
        Ok(())
    }

    /// The current coherent value of a word without disturbing any state.
    pub fn peek_word(&self, pa: u64) -> Result<u64, SimError> {
        let line = pa & LINE_MASK;
        let off = (pa & !LINE_MASK) as usize;
        for cache in &self.caches {
            if let Some(l) = cache.get(line) {
                return Ok(u64::from_le_bytes(l.payload[off..off + 8].try_into().unwrap()));
            }
        }
        Ok(self.dram.peek_u64(pa)?)
    }
}
