//! Fixtures shared by the benchmarks.

use lightv_core::{LightVMode, Machine, Mapping, PteAttrs, RewriteRule, SimConfig, VirtualAddress};

pub const ASID: u16 = 1;
/// Start of the mapped region; the rule, when active, covers all of it.
pub const REGION: u64 = 0x8000_0000;

/// A machine with `pages` consecutive mappings at [`REGION`] and no TLB,
/// so every translation walks.
pub fn walking_machine(mode: LightVMode, cache_ptes: bool, pages: u64) -> Machine {
    let cfg = SimConfig {
        mode,
        cache_ptes,
        tlb_size: 0,
        ..SimConfig::default()
    };
    let mut m = Machine::new(cfg).expect("default config is valid");
    let maps: Vec<Mapping> = (0..pages)
        .map(|i| {
            let pfn = m.alloc_frame().unwrap();
            Mapping::new(REGION + i * 4096, pfn.value(), PteAttrs::USER | PteAttrs::WRITABLE).unwrap()
        })
        .collect();
    m.build_space(ASID, &maps).unwrap();
    if mode == LightVMode::Active {
        let dst = m.alloc_frame().unwrap();
        let rule = RewriteRule::new(0, ASID, REGION, REGION + pages * 4096, dst.value(), None).unwrap();
        m.activate(&[rule]).unwrap();
    }
    m
}

pub fn page(i: u64) -> VirtualAddress {
    VirtualAddress::new(REGION + i * 4096).unwrap()
}
