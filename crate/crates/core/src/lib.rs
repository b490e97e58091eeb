//! Cycle-level model of a snoop-coherent SoC memory path (MMU, TLB, PE
//! caches, interconnect, DRAM) hosting LightV, a coherence agent that
//! rewrites page-table walks as they cross the interconnect.

pub mod addressing;
pub mod coherence;
pub mod dram;
pub mod error;
pub mod lightv;
pub mod machine;
pub mod mmu;
pub mod report;
pub mod scenarios;
pub mod trace;
pub mod verify;

pub use addressing::{
    build_tables, decode_pte, encode_pte, parse_mappings, reference_walk, AddressSpace, Asid, Mapping,
    PageTableEntry, Pfn, PhysicalAddress, PteAttrs, Translation, TranslationFault, VirtualAddress,
};
pub use coherence::{CacheGeometry, CacheState, Interconnect, LatencyTable, SnoopAgent, SnoopKind, SnoopRequest, SnoopResponse};
pub use dram::{Aperture, Dram, FrameAllocator};
pub use error::SimError;
pub use lightv::{parse_rules, LightV, LightVConfig, LightVMode, RewriteRule, WatermarkWindow};
pub use machine::{compare_runs, ConfigError, FaultPolicy, Machine, RunError, RunStats, SimConfig};
pub use mmu::{InjectedFault, Mmu, Tlb};
pub use scenarios::{run_scenario, RunMode, Scenario, ScenarioReport};
pub use trace::{parse_trace, Access, Op, TraceDigest};
