//! Coherence protocols: LazyPIM's speculative kernel lifecycle and the
//! fine-grained, coarse-grained, non-cacheable and ideal baselines.
//!
//! The protocol logic is written as methods on the engine's machine state,
//! split by side: [`cpu`] handles processor accesses, [`pim`] PIM-core
//! accesses and kernel launch/end, [`commit`] LazyPIM commit and rollback.

pub(crate) mod commit;
pub(crate) mod cpu;
pub(crate) mod pim;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::LogEntry;
use crate::error::{Error, Result};
use crate::memory::LineAddr;
use crate::signatures::{H3HashFamily, ParallelBloomSignature, SignatureBank, SignatureParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProtocolKind {
    #[serde(rename = "lazypim")]
    LazyPim,
    #[serde(rename = "fg")]
    FineGrained,
    #[serde(rename = "cg")]
    CoarseGrainedLock,
    #[serde(rename = "nc")]
    NonCacheable,
    #[serde(rename = "ideal")]
    IdealPim,
    #[serde(rename = "cpu-only")]
    CpuOnly,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 6] = [
        ProtocolKind::LazyPim,
        ProtocolKind::FineGrained,
        ProtocolKind::CoarseGrainedLock,
        ProtocolKind::NonCacheable,
        ProtocolKind::IdealPim,
        ProtocolKind::CpuOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::LazyPim => "lazypim",
            ProtocolKind::FineGrained => "fg",
            ProtocolKind::CoarseGrainedLock => "cg",
            ProtocolKind::NonCacheable => "nc",
            ProtocolKind::IdealPim => "ideal",
            ProtocolKind::CpuOnly => "cpu-only",
        }
    }

    /// Parse a comma-separated protocol list.
    pub fn parse_list(s: &str) -> Result<Vec<ProtocolKind>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse()).collect()
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k = match s.to_ascii_lowercase().as_str() {
            "lazypim" | "lazy" => ProtocolKind::LazyPim,
            "fg" | "fine-grained" => ProtocolKind::FineGrained,
            "cg" | "coarse-grained" => ProtocolKind::CoarseGrainedLock,
            "nc" | "non-cacheable" => ProtocolKind::NonCacheable,
            "ideal" | "ideal-pim" => ProtocolKind::IdealPim,
            "cpu-only" | "cpuonly" | "cpu" => ProtocolKind::CpuOnly,
            other => return Err(Error::config(format!("unknown protocol `{other}`"))),
        };
        Ok(k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Running,
    Committing,
}

/// What stopped a partial kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitReason {
    AddressCapacity,
    InstructionCap,
    SpeculativeEviction,
    Sync,
    KernelEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictSource {
    /// Dirty in the processor caches when the partial kernel started.
    LaunchDirty,
    /// Written by a processor core while the partial kernel ran.
    InKernel,
    /// Signature alias: no line the kernel read was written.
    FalsePositive,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ProtocolEvent {
    Launch { cycle: u64, core: usize, thread: u32, kernel: u32 },
    Conflict { cycle: u64, core: usize, lines: Vec<(LineAddr, ConflictSource)>, read_set: Option<String> },
    Rollback { cycle: u64, core: usize, count: u32, escalated: bool },
    WawMerge { cycle: u64, core: usize, line: LineAddr },
    Commit { cycle: u64, core: usize, reason: CommitReason, group: Vec<usize> },
    KernelEnd { cycle: u64, core: usize },
}

/// Per-PIM-core kernel state.
#[derive(Clone, Debug)]
pub struct KernelContext {
    pub pim_core: usize,
    pub thread: Option<u32>,
    pub kernel_id: u32,
    pub phase: Phase,
    /// Trace cursor of the first event of the current partial kernel.
    pub checkpoint: usize,
    /// Trace cursor to resume at after a commit that does not end the kernel.
    pub resume_cursor: usize,
    pub read_set: ParallelBloomSignature,
    pub write_set: ParallelBloomSignature,
    /// This core's view of the processor's CPUWriteSet.
    pub cpu_write_set: SignatureBank,
    pub instructions: u64,
    pub rollback_count: u32,
    pub escalated: bool,
    /// Coupled PIM cores (speculative data flowed between them).
    pub spec_read_bits: u64,
    pub locked_lines: BTreeSet<LineAddr>,
    /// Exact read log of this execution of the partial kernel.
    pub read_lines: BTreeSet<LineAddr>,
    pub seeded_lines: BTreeSet<LineAddr>,
    pub cpu_written_lines: BTreeSet<LineAddr>,
    pub pending_ops: Vec<(u64, LogEntry)>,
    /// No access has executed since the partial kernel began.
    pub fresh: bool,
    pub waiting: Option<CommitReason>,
}

impl KernelContext {
    pub fn new(pim_core: usize, params: SignatureParams, family: Arc<H3HashFamily>, bank_registers: usize) -> Self {
        Self {
            pim_core,
            thread: None,
            kernel_id: 0,
            phase: Phase::Idle,
            checkpoint: 0,
            resume_cursor: 0,
            read_set: ParallelBloomSignature::with_family(params, Arc::clone(&family)),
            write_set: ParallelBloomSignature::with_family(params, Arc::clone(&family)),
            cpu_write_set: SignatureBank::with_family(params, family, bank_registers),
            instructions: 0,
            rollback_count: 0,
            escalated: false,
            spec_read_bits: 0,
            locked_lines: BTreeSet::new(),
            read_lines: BTreeSet::new(),
            seeded_lines: BTreeSet::new(),
            cpu_written_lines: BTreeSet::new(),
            pending_ops: Vec::new(),
            fresh: true,
            waiting: None,
        }
    }

    pub fn active(&self) -> bool {
        self.phase != Phase::Idle
    }

    /// Record a processor write to a region line. A line already held by
    /// some register is not stored again, so repeated stores do not spread
    /// across the round-robin registers.
    pub(crate) fn record_cpu_write(&mut self, line: LineAddr) {
        if self.cpu_written_lines.insert(line) && !self.seeded_lines.contains(&line) {
            self.cpu_write_set.insert(line);
        }
    }

    /// Reset per-partial-kernel state; the caller reseeds the CPUWriteSet.
    pub(crate) fn reset_partial(&mut self, checkpoint: usize) {
        self.checkpoint = checkpoint;
        self.read_set.clear();
        self.write_set.clear();
        self.cpu_write_set.clear();
        self.instructions = 0;
        self.read_lines.clear();
        self.seeded_lines.clear();
        self.cpu_written_lines.clear();
        self.pending_ops.clear();
        self.fresh = true;
        self.waiting = None;
        self.phase = Phase::Running;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_names_round_trip() {
        for k in ProtocolKind::ALL {
            assert_eq!(k.name().parse::<ProtocolKind>().unwrap(), k);
        }
        assert_eq!(ProtocolKind::parse_list("lazypim, fg,cpu-only").unwrap().len(), 3);
        assert!("mesi".parse::<ProtocolKind>().is_err());
    }

    #[test]
    fn reset_clears_partial_state() {
        let params = SignatureParams::default();
        let fam = Arc::new(H3HashFamily::new(params.seed, params.segments, params.segment_bits(), 42).unwrap());
        let mut k = KernelContext::new(0, params, fam, 16);
        k.read_set.insert(0x40).unwrap();
        k.read_lines.insert(0x40);
        k.instructions = 9;
        k.reset_partial(5);
        assert!(k.read_set.is_empty());
        assert!(k.read_lines.is_empty());
        assert_eq!(k.instructions, 0);
        assert_eq!(k.checkpoint, 5);
        assert!(k.fresh);
    }
}
