use std::collections::BTreeSet;
use std::sync::Arc;

use super::channel::Channel;
use super::{LogEntry, LoggedOp};
use crate::config::SimConfig;
use crate::dbi::DbiStore;
use crate::error::{Error, Result};
use crate::memory::{
    AccessKind, CacheLevel, CacheLine, DirEntry, Directory, DirectoryScope, LineAddr, LineData, MainMemory, Mesi,
    PimDataRegion, SetAssociativeCache,
};
use crate::metrics::{Counters, TrafficCategory};
use crate::protocol::{KernelContext, ProtocolEvent, ProtocolKind};
use crate::signatures::{H3HashFamily, ParallelBloomSignature, DEFAULT_ADDRESS_BITS};
use crate::workload::ThreadId;

/// Processor-directory agent standing for the whole PIM side.
pub(crate) const PIM_SIDE: usize = 63;
/// Directory lock holders for PIM core `c` are `LOCK_BASE + c`.
pub(crate) const LOCK_BASE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Blocked {
    PimCore,
    GroupCommit,
    LineLock,
    RegionLock,
}

/// What a thread does after one attempt at its current event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Step {
    /// Event consumed; ready again after this many cycles.
    Done(u64),
    /// Event not consumed; try again after this many cycles.
    Retry(u64),
    /// Event not consumed; wait for a notice.
    Block(Blocked),
    /// `PimBegin` consumed; the thread now runs on `core`.
    Launched { core: usize, latency: u64 },
    /// `PimEnd` consumed; the thread is back on its CPU core.
    Ended(u64),
}

/// Out-of-band signals from the protocol to the scheduler.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum Notice {
    Resume { thread: ThreadId, at: u64, cursor: Option<usize>, leave_pim: bool },
    Wake { reason: Blocked, at: u64 },
}

/// A commit in flight: CPU accesses to lines it covers wait for `end`.
#[derive(Clone, Debug)]
pub(crate) struct CommitWindow {
    pub end: u64,
    pub sets: Vec<ParallelBloomSignature>,
}

pub(crate) struct Machine {
    pub cfg: SimConfig,
    pub kind: ProtocolKind,
    pub region: PimDataRegion,
    pub mem: MainMemory,
    pub l1: Vec<SetAssociativeCache>,
    pub l2: SetAssociativeCache,
    pub pdir: Directory,
    pub pim_l1: Vec<SetAssociativeCache>,
    pub pim_dir: Directory,
    pub link: Channel,
    pub internal: Channel,
    pub counters: Counters,
    pub dbi: Option<DbiStore>,
    pub kernels: Vec<KernelContext>,
    pub log: Vec<LogEntry>,
    pub events: Vec<ProtocolEvent>,
    pub notices: Vec<Notice>,
    pub windows: Vec<CommitWindow>,
    pub commit_busy_until: u64,
    seq: u64,
    touched: BTreeSet<LineAddr>,
}

impl Machine {
    pub fn new(cfg: &SimConfig, region: PimDataRegion) -> Result<Self> {
        cfg.validate()?;
        let sys = &cfg.system;
        let t = &cfg.timing;
        let params = cfg.signature.params();
        params.validate()?;
        let family = Arc::new(H3HashFamily::new(params.seed, params.segments, params.segment_bits(), DEFAULT_ADDRESS_BITS)?);
        let l1 = (0..sys.cpu_cores)
            .map(|_| SetAssociativeCache::new(CacheLevel::CpuL1, sys.cpu_l1_bytes as u64, sys.cpu_l1_ways))
            .collect::<Result<Vec<_>>>()?;
        let pim_l1 = (0..sys.pim_cores)
            .map(|_| SetAssociativeCache::new(CacheLevel::PimL1, sys.pim_l1_bytes as u64, sys.pim_l1_ways))
            .collect::<Result<Vec<_>>>()?;
        let kernels = (0..sys.pim_cores)
            .map(|c| KernelContext::new(c, params, Arc::clone(&family), cfg.signature.bank_registers))
            .collect();
        let dbi = (cfg.protocol == ProtocolKind::LazyPim && cfg.dbi.enabled).then(|| DbiStore::new(&cfg.dbi));
        Ok(Self {
            kind: cfg.protocol,
            region,
            mem: MainMemory::default(),
            l1,
            l2: SetAssociativeCache::new(CacheLevel::CpuL2, sys.l2_bytes as u64, sys.l2_ways)?,
            pdir: Directory::new(DirectoryScope::Processor),
            pim_l1,
            pim_dir: Directory::new(DirectoryScope::Pim),
            link: Channel::new(t.offchip_link_bytes_per_cycle, t.offchip_latency_cycles),
            internal: Channel::new(t.pim_internal_bytes_per_cycle, 0),
            counters: Counters::default(),
            dbi,
            kernels,
            log: Vec::new(),
            events: Vec::new(),
            notices: Vec::new(),
            windows: Vec::new(),
            commit_busy_until: 0,
            seq: 0,
            touched: BTreeSet::new(),
            cfg: cfg.clone(),
        })
    }

    pub fn in_region(&self, addr: u64) -> bool {
        self.region.contains(addr)
    }

    pub fn cpu_core_of(&self, thread: ThreadId) -> usize {
        thread as usize % self.l1.len()
    }

    pub fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    pub fn log_now(&mut self, thread: ThreadId, op: LoggedOp) {
        let seq = self.next_seq();
        if self.cfg.debug.record_log {
            self.log.push(LogEntry { seq, thread, op });
        }
    }

    pub fn touch(&mut self, line: LineAddr) {
        self.touched.insert(line);
    }

    // ---- off-chip and internal transfers ----

    /// CPU demand fetch from DRAM across the link; returns the delivery cycle.
    pub fn cpu_dram_fetch(&mut self, now: u64) -> u64 {
        let m = &self.cfg.messages;
        let (req, data) = (m.request_bytes, m.data_message());
        let t = self.link.send(now, req, TrafficCategory::Data) + self.cfg.timing.dram_access_cycles;
        self.counters.cpu_dram_accesses += 1;
        self.counters.dram_line_transfers += 1;
        self.link.send(t, data, TrafficCategory::Data)
    }

    /// A CPU-held line written to DRAM across the link.
    pub fn cpu_write_line(&mut self, now: u64, line: LineAddr, data: LineData, category: TrafficCategory) -> u64 {
        self.mem.write_line(line, data);
        self.counters.dram_line_transfers += 1;
        if let Some(d) = self.dbi.as_mut() {
            d.clear_line(line);
        }
        let bytes = self.cfg.messages.data_message();
        self.link.send(now, bytes, category)
    }

    pub fn pim_dram_fetch(&mut self, now: u64) -> u64 {
        self.counters.pim_dram_accesses += 1;
        self.counters.dram_line_transfers += 1;
        let bytes = self.cfg.messages.data_message();
        self.internal.send(now + self.cfg.timing.pim_dram_access_cycles, bytes, TrafficCategory::Data)
    }

    pub fn pim_write_line(&mut self, now: u64, line: LineAddr, data: LineData) -> u64 {
        self.mem.write_line(line, data);
        self.counters.pim_dram_accesses += 1;
        self.counters.dram_line_transfers += 1;
        let bytes = self.cfg.messages.data_message();
        self.internal.send(now, bytes, TrafficCategory::Data)
    }

    /// Request/response pair between the PIM side and the processor directory.
    /// Free under the ideal protocol.
    pub fn coherence_round_trip(&mut self, now: u64) -> u64 {
        if self.kind == ProtocolKind::IdealPim {
            return now;
        }
        let m = &self.cfg.messages;
        let (req, resp) = (m.request_bytes, m.response_bytes);
        let t = self.link.send(now, req, TrafficCategory::CoherenceMsgs) + self.cfg.timing.l1_hit_cycles;
        self.link.send(t, resp, TrafficCategory::CoherenceMsgs)
    }

    // ---- holder queries ----

    pub fn cpu_l1_holders(&self, line: LineAddr, except: Option<usize>) -> Vec<(usize, Mesi)> {
        self.l1
            .iter()
            .enumerate()
            .filter(|(c, _)| Some(*c) != except)
            .filter_map(|(c, l1)| l1.get(line).map(|l| (c, l.mesi)))
            .collect()
    }

    pub fn cpu_holds(&self, line: LineAddr) -> bool {
        self.l2.contains(line) || self.l1.iter().any(|c| c.contains(line))
    }

    pub fn cpu_dirty_copy(&self, line: LineAddr) -> Option<LineData> {
        self.l1
            .iter()
            .chain(std::iter::once(&self.l2))
            .find_map(|c| c.get(line).filter(|l| l.mesi == Mesi::Modified).map(|l| l.data))
    }

    /// PIM copies the processor directory can see: committed and verified.
    pub fn pim_visible_holders(&self, line: LineAddr) -> Vec<(usize, Mesi)> {
        self.pim_l1
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.get(line).filter(|l| !l.speculative && !l.unverified).map(|l| (c, l.mesi)))
            .collect()
    }

    pub fn spec_holder(&self, line: LineAddr, except: usize) -> Option<usize> {
        (0..self.pim_l1.len()).find(|c| *c != except && self.pim_l1[*c].get(line).is_some_and(|l| l.speculative))
    }

    /// Value a non-speculative observer would read right now.
    pub fn committed_line(&self, line: LineAddr) -> LineData {
        if let Some(d) = self.cpu_dirty_copy(line) {
            return d;
        }
        for p in &self.pim_l1 {
            if let Some(l) = p.get(line) {
                if !l.speculative && !l.unverified && l.mesi == Mesi::Modified {
                    return l.data;
                }
            }
        }
        self.mem.read_line(line)
    }

    // ---- CPU-side flushes and evictions ----

    /// Write back the CPU's dirty copy of `line` (if any) and invalidate it;
    /// with `all`, clean copies are invalidated too. Returns (flushed, delivery).
    pub fn cpu_purge_line(&mut self, line: LineAddr, now: u64, category: TrafficCategory, all: bool) -> (bool, u64) {
        let mut t = now;
        let mut flushed = false;
        if let Some(data) = self.cpu_dirty_copy(line) {
            t = self.cpu_write_line(now, line, data, category);
            flushed = true;
        }
        for c in self.l1.iter_mut().chain(std::iter::once(&mut self.l2)) {
            if c.get(line).is_some_and(|l| all || l.mesi == Mesi::Modified) {
                c.invalidate(line);
            }
        }
        self.touch(line);
        (flushed, t)
    }

    /// Place an L1 victim into the non-inclusive L2.
    pub fn cpu_evict_l1(&mut self, victim: CacheLine, now: u64) {
        let line = victim.line;
        self.touch(line);
        match victim.mesi {
            Mesi::Modified => self.l2_insert(line, Mesi::Modified, victim.data, now),
            Mesi::Exclusive => self.l2_insert(line, Mesi::Exclusive, victim.data, now),
            Mesi::Shared => {
                if !self.l2.contains(line) && self.cpu_l1_holders(line, None).is_empty() {
                    self.l2_insert(line, Mesi::Exclusive, victim.data, now);
                }
            }
            Mesi::Invalid => {}
        }
    }

    /// Fill L2; a dirty L2 victim goes to DRAM.
    pub fn l2_insert(&mut self, line: LineAddr, mesi: Mesi, data: LineData, now: u64) {
        self.counters.l2_accesses += 1;
        if let Some(existing) = self.l2.get_mut(line) {
            if mesi == Mesi::Modified {
                existing.mesi = Mesi::Modified;
            }
            existing.data = data;
            return;
        }
        if let Some(v) = self.l2.fill(line, mesi, data) {
            self.touch(v.line);
            if v.mesi == Mesi::Modified {
                self.cpu_write_line(now, v.line, v.data, TrafficCategory::Writebacks);
            }
        }
    }

    /// Fill a CPU L1, spilling its victim.
    pub fn cpu_fill(&mut self, core: usize, line: LineAddr, mesi: Mesi, data: LineData, now: u64) {
        if let Some(v) = self.l1[core].fill(line, mesi, data) {
            self.cpu_evict_l1(v, now);
        }
        self.touch(line);
    }

    // ---- PIM-side helpers ----

    /// Fill a PIM L1. The caller guarantees the victim is not speculative.
    pub fn pim_fill(&mut self, core: usize, line: LineAddr, mesi: Mesi, data: LineData, now: u64) {
        if let Some(v) = self.pim_l1[core].fill(line, mesi, data) {
            assert!(!v.speculative, "speculative line {:#x} evicted without commit", v.line);
            if v.mesi == Mesi::Modified {
                self.pim_write_line(now, v.line, v.data);
            }
            self.touch(v.line);
        }
        self.touch(line);
    }

    /// Committed (non-speculative) copies in PIM L1s other than `except`:
    /// dirty ones are written back; then all are invalidated or downgraded
    /// to Shared. Speculative copies are untouched. Returns the delivery cycle.
    pub fn pim_release_copies(&mut self, line: LineAddr, except: Option<usize>, invalidate: bool, now: u64) -> u64 {
        let mut t = now;
        for c in 0..self.pim_l1.len() {
            if Some(c) == except {
                continue;
            }
            let Some(l) = self.pim_l1[c].get(line).cloned() else { continue };
            if l.speculative {
                continue;
            }
            if l.mesi == Mesi::Modified {
                t = t.max(self.pim_write_line(now, line, l.data));
            }
            if invalidate {
                self.pim_l1[c].invalidate(line);
            } else if let Some(m) = self.pim_l1[c].get_mut(line) {
                m.mesi = Mesi::Shared;
            }
        }
        self.touch(line);
        t
    }

    pub fn dbi_record(&mut self, line: LineAddr, now: u64) {
        let Some(d) = self.dbi.as_mut() else { return };
        self.counters.dbi_accesses += 1;
        let evicted = d.record(line);
        for l in evicted {
            if self.cpu_purge_line(l, now, TrafficCategory::Writebacks, false).0 {
                self.counters.dbi_writebacks += 1;
            }
        }
    }

    pub fn dbi_tick(&mut self, now: u64) {
        let Some(d) = self.dbi.as_mut() else { return };
        if now < d.next_trigger() {
            return;
        }
        let lines = d.tick(now);
        self.counters.dbi_accesses += 1;
        for l in lines {
            if self.cpu_purge_line(l, now, TrafficCategory::Writebacks, true).0 {
                self.counters.dbi_writebacks += 1;
            }
        }
    }

    pub fn lookup_cpu(&mut self, core: usize, line: LineAddr) -> bool {
        self.counters.l1_accesses += 1;
        self.l1[core].access(line, AccessKind::Read) == crate::memory::Lookup::Hit
    }

    pub fn lookup_pim(&mut self, core: usize, line: LineAddr) -> bool {
        self.counters.l1_accesses += 1;
        self.pim_l1[core].access(line, AccessKind::Read) == crate::memory::Lookup::Hit
    }

    /// Commit-window stall for a CPU access to `line` at `now`.
    pub fn window_delay(&mut self, line: LineAddr, now: u64) -> u64 {
        self.windows.retain(|w| w.end > now);
        self.windows
            .iter()
            .filter(|w| w.sets.iter().any(|s| s.may_contain(line)))
            .map(|w| w.end - now)
            .max()
            .unwrap_or(0)
    }

    // ---- directory bookkeeping and validation ----

    fn reconcile(&mut self, line: LineAddr) {
        let mut e = DirEntry::default();
        for (c, l1) in self.l1.iter().enumerate() {
            if let Some(l) = l1.get(line) {
                match l.mesi {
                    Mesi::Modified | Mesi::Exclusive => e.owner = Some(c),
                    Mesi::Shared => e.sharers |= 1 << c,
                    Mesi::Invalid => {}
                }
            }
        }
        let mut p = DirEntry::default();
        for (c, cache) in self.pim_l1.iter().enumerate() {
            if let Some(l) = cache.get(line) {
                let exclusive = !l.speculative && matches!(l.mesi, Mesi::Modified | Mesi::Exclusive);
                if exclusive {
                    p.owner = Some(c);
                } else {
                    p.sharers |= 1 << c;
                }
                if !l.speculative && !l.unverified {
                    if exclusive {
                        e.owner = Some(PIM_SIDE);
                    } else {
                        e.sharers |= 1 << PIM_SIDE;
                    }
                }
            }
        }
        self.pdir.set_entry(line, e);
        self.pim_dir.set_entry(line, p);
    }

    pub fn reconcile_touched(&mut self) {
        for line in std::mem::take(&mut self.touched) {
            self.reconcile(line);
        }
    }

    /// Structural checks across every cache and both directories.
    pub fn validate(&self) -> Result<()> {
        for c in self.l1.iter().chain(std::iter::once(&self.l2)).chain(self.pim_l1.iter()) {
            c.validate()?;
        }
        self.pdir.validate()?;
        self.pim_dir.validate()?;
        let mut lines = BTreeSet::new();
        for c in self.l1.iter().chain(self.pim_l1.iter()) {
            lines.extend(c.lines().map(|l| l.line));
        }
        for line in lines {
            let cpu = self.cpu_l1_holders(line, None);
            let owners = cpu.iter().filter(|(_, m)| *m != Mesi::Shared).count();
            if owners > 1 || (owners == 1 && cpu.len() > 1) {
                return Err(Error::Invariant(format!("line {line:#x} has conflicting CPU copies {cpu:?}")));
            }
            if owners == 1 && self.l2.contains(line) {
                return Err(Error::Invariant(format!("line {line:#x} in L2 while an L1 owns it")));
            }
            let dirty_cpu = self.cpu_dirty_copy(line).is_some();
            let pim = self.pim_visible_holders(line);
            if dirty_cpu && !pim.is_empty() {
                return Err(Error::Invariant(format!("line {line:#x} dirty in CPU while PIM holds {pim:?}")));
            }
            if pim.iter().any(|(_, m)| *m != Mesi::Shared) && (cpu.len() + pim.len() > 1 || self.l2.contains(line)) {
                return Err(Error::Invariant(format!("line {line:#x} owned by a PIM core but shared")));
            }
            let spec = self.pim_l1.iter().filter(|p| p.get(line).is_some_and(|l| l.speculative)).count();
            if spec > 1 {
                return Err(Error::Invariant(format!("line {line:#x} speculative in {spec} PIM cores")));
            }
        }
        Ok(())
    }

    /// Write every dirty committed copy back so memory holds the final state.
    pub fn drain(&mut self) -> Result<()> {
        let mut dirty: Vec<(LineAddr, LineData)> = Vec::new();
        for p in &self.pim_l1 {
            for l in p.lines() {
                if l.speculative {
                    return Err(Error::Invariant(format!("speculative line {:#x} left at end of run", l.line)));
                }
                if l.mesi == Mesi::Modified {
                    dirty.push((l.line, l.data));
                }
            }
        }
        for c in self.l1.iter().chain(std::iter::once(&self.l2)) {
            dirty.extend(c.lines().filter(|l| l.mesi == Mesi::Modified).map(|l| (l.line, l.data)));
        }
        let mut seen = BTreeSet::new();
        for (line, data) in dirty {
            if !seen.insert(line) {
                return Err(Error::Invariant(format!("line {line:#x} dirty in two caches")));
            }
            self.mem.write_line(line, data);
        }
        Ok(())
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, k) in self.kernels.iter().enumerate().filter(|(_, k)| k.active()) {
            out.push_str(&format!(
                "pim core {i}: thread {:?} phase {:?} waiting {:?} coupled {:#x} escalated {}\n",
                k.thread, k.phase, k.waiting, k.spec_read_bits, k.escalated
            ));
        }
        out.push_str(&format!("region locked: {}\n", self.pdir.region_locked()));
        out
    }
}
