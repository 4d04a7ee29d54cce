//! Memory traces: event types, validation, file formats and generators.

mod format;
mod generate;

pub use format::{parse_binary, parse_trace, read_trace_file, serialize_binary, serialize_trace, write_trace_file};
pub use generate::{
    generate, generate_htap, generate_pointer_chase, generate_random, pointer_chase_vertex, Generator, Vertex, WorkloadSpec,
    PRIVATE_BASE, REGION_BASE,
};

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::memory::PimDataRegion;

pub type ThreadId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SyncKind {
    Acquire,
    Release,
    Fence,
}

impl SyncKind {
    pub fn mnemonic(self) -> &'static str {
        match self {
            SyncKind::Acquire => "acq",
            SyncKind::Release => "rel",
            SyncKind::Fence => "fence",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    Read(u64),
    Write(u64, u64),
    PimBegin(u32),
    PimEnd,
    Sync(SyncKind, u64),
    AllocPim(u64, u64),
    Compute(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    pub thread: ThreadId,
    pub kind: EventKind,
}

impl TraceEvent {
    pub fn new(thread: ThreadId, kind: EventKind) -> Self {
        Self { thread, kind }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(events: Vec<TraceEvent>) -> Self {
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Per-thread program order, AllocPim events removed.
    pub fn per_thread(&self) -> BTreeMap<ThreadId, Vec<EventKind>> {
        let mut out: BTreeMap<ThreadId, Vec<EventKind>> = BTreeMap::new();
        for e in &self.events {
            if !matches!(e.kind, EventKind::AllocPim(..)) {
                out.entry(e.thread).or_default().push(e.kind);
            }
        }
        out
    }

    pub fn region(&self) -> PimDataRegion {
        let mut r = PimDataRegion::default();
        for e in &self.events {
            if let EventKind::AllocPim(base, len) = e.kind {
                r.allocate(base, len);
            }
        }
        r
    }

    pub fn sha256_hex(&self) -> String {
        hex::encode(Sha256::digest(serialize_trace(self).as_bytes()))
    }

    /// Structural checks: PimBegin/PimEnd pairing, word alignment, AllocPim
    /// before any access to its range, and PIM accesses confined to the
    /// PIM data region.
    pub fn validate(&self) -> Result<()> {
        let mut in_kernel: BTreeMap<ThreadId, bool> = BTreeMap::new();
        let mut region = PimDataRegion::default();
        let full = self.region();
        for (i, e) in self.events.iter().enumerate() {
            let inside = *in_kernel.get(&e.thread).unwrap_or(&false);
            let at = |msg: String| Error::Trace(format!("event {i} (thread {}): {msg}", e.thread));
            match e.kind {
                EventKind::PimBegin(_) => {
                    if inside {
                        return Err(at("nested PimBegin".into()));
                    }
                    in_kernel.insert(e.thread, true);
                }
                EventKind::PimEnd => {
                    if !inside {
                        return Err(at("PimEnd without PimBegin".into()));
                    }
                    in_kernel.insert(e.thread, false);
                }
                EventKind::Read(a) | EventKind::Write(a, _) | EventKind::Sync(_, a) => {
                    if a % 8 != 0 {
                        return Err(at(format!("address {a:#x} is not word aligned")));
                    }
                    if full.contains(a) && !region.contains(a) {
                        return Err(at(format!("address {a:#x} accessed before its AllocPim")));
                    }
                    if inside && !region.contains(a) {
                        return Err(at(format!("PIM access to {a:#x} outside the PIM data region")));
                    }
                }
                EventKind::AllocPim(base, len) => {
                    if len == 0 {
                        return Err(at("empty AllocPim".into()));
                    }
                    region.allocate(base, len);
                }
                EventKind::Compute(_) => {}
            }
        }
        if let Some((t, _)) = in_kernel.iter().find(|(_, open)| **open) {
            return Err(Error::Trace(format!("thread {t} ends inside a PIM kernel")));
        }
        Ok(())
    }
}
