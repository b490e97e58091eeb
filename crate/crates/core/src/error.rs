use thiserror::Error;

use crate::addressing::{AddressError, Asid, TableError, TranslationFault, VirtualAddress};
use crate::dram::DramError;
use crate::lightv::ActivationError;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error(transparent)]
    Address(#[from] AddressError),
    #[error(transparent)]
    Dram(#[from] DramError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Fault(#[from] TranslationFault),
    #[error(transparent)]
    Activation(#[from] ActivationError),
    #[error("line {addr:#x} is outside DRAM and no agent claimed it")]
    FabricGap { addr: u64 },
    #[error("address {addr:#x} is not {align}-byte aligned")]
    Unaligned { addr: u64, align: u64 },
    #[error("agents must be registered before the first transaction")]
    AlreadyStarted,
    #[error("no address space registered for asid {0}")]
    UnknownAsid(Asid),
    #[error("watermark snoop at {line:#x} names context {context}, which is not live")]
    ContextLost { line: u64, context: u16 },
    #[error("context cache full ({capacity} live contexts)")]
    ContextCacheFull { capacity: usize },
    #[error("stale TLB entry for {va}: cached {cached:#x}, fresh walk gives {fresh}")]
    StaleTlb {
        va: VirtualAddress,
        cached: u64,
        fresh: String,
    },
    #[error("machine has no active-capable LightV agent")]
    NoLightV,
    #[error("runs replayed different traces ({a:#x} vs {b:#x})")]
    TraceMismatch { a: u64, b: u64 },
    #[error("{0}")]
    Scenario(String),
    #[error("cannot load {path}: {message}")]
    Input { path: String, message: String },
}
