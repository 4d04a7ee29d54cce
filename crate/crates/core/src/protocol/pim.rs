//! PIM-core accesses, kernel launch and kernel end.
//!
//! Under LazyPIM a PIM core never asks the processor for permission: reads
//! fill from DRAM (or from another PIM core's uncommitted line, which
//! couples the two cores), writes stay speculative in the L1 with a
//! per-word mask, and every access lands in the core's read or write
//! signature. The baselines run MESI with the PIM side as one more agent.

use crate::engine::machine::{Blocked, Machine, Notice, Step, LOCK_BASE};
use crate::engine::{LogEntry, LoggedOp};
use crate::error::Result;
use crate::memory::{line_of, merge_words, word_of, LineAddr, Mesi};
use crate::metrics::TrafficCategory;
use crate::protocol::{CommitReason, Phase, ProtocolEvent, ProtocolKind};
use crate::workload::{EventKind, ThreadId};

impl Machine {
    /// Start a kernel for `thread`. The kernel's first event is at `cursor`.
    pub(crate) fn launch_kernel(&mut self, thread: ThreadId, kernel: u32, cursor: usize, now: u64) -> Step {
        let Some(core) = self.kernels.iter().position(|k| k.thread.is_none()) else {
            return Step::Block(Blocked::PimCore);
        };
        let mut t = self.link.send(now, 2 * self.cfg.messages.request_bytes, TrafficCategory::Data);
        {
            let k = &mut self.kernels[core];
            k.thread = Some(thread);
            k.kernel_id = kernel;
            k.rollback_count = 0;
            k.escalated = false;
            k.spec_read_bits = 0;
            k.reset_partial(cursor);
        }
        match self.kind {
            ProtocolKind::LazyPim => {
                self.reseed(core);
                self.events.push(ProtocolEvent::Launch { cycle: now, core, thread, kernel });
            }
            ProtocolKind::CoarseGrainedLock => {
                let lines: Vec<LineAddr> = self
                    .l1
                    .iter()
                    .chain(std::iter::once(&self.l2))
                    .flat_map(|c| c.lines().map(|l| l.line))
                    .filter(|l| self.region.contains(*l))
                    .collect::<std::collections::BTreeSet<_>>()
                    .into_iter()
                    .collect();
                for line in lines {
                    let (flushed, d) = self.cpu_purge_line(line, now, TrafficCategory::Flushes, true);
                    if flushed {
                        self.counters.flushed_lines += 1;
                        t = t.max(d);
                    }
                }
                self.pdir.lock_region(LOCK_BASE + core);
            }
            _ => {}
        }
        Step::Launched { core, latency: t - now }
    }

    /// Clear and re-seed the core's CPUWriteSet with the lines dirty in the
    /// processor caches right now.
    pub(crate) fn reseed(&mut self, core: usize) {
        let mut dirty: Vec<LineAddr> =
            self.l1.iter().chain(std::iter::once(&self.l2)).flat_map(|c| c.scan_dirty_in_region(&self.region)).collect();
        dirty.sort_unstable();
        dirty.dedup();
        self.counters.seeded_lines += dirty.len() as u64;
        let k = &mut self.kernels[core];
        k.cpu_write_set.clear();
        for line in dirty {
            k.cpu_write_set.insert(line);
            k.seeded_lines.insert(line);
        }
    }

    /// One event of a thread running on PIM core `core`.
    pub(crate) fn pim_step(
        &mut self,
        core: usize,
        thread: ThreadId,
        cursor: usize,
        event: EventKind,
        now: u64,
    ) -> Result<Step> {
        if self.kind == ProtocolKind::LazyPim {
            return self.lazy_step(core, thread, cursor, event, now);
        }
        Ok(match event {
            EventKind::Read(addr) => {
                let lat = self.pim_mesi_obtain(core, line_of(addr), false, now);
                let value = self.pim_l1[core].get(line_of(addr)).expect("filled").data[word_of(addr)];
                self.log_now(thread, LoggedOp::Read { addr, value });
                Step::Done(lat)
            }
            EventKind::Write(addr, value) => {
                let lat = self.pim_mesi_obtain(core, line_of(addr), true, now);
                let l = self.pim_l1[core].get_mut(line_of(addr)).expect("filled");
                l.data[word_of(addr)] = value;
                l.mesi = Mesi::Modified;
                self.log_now(thread, LoggedOp::Write { addr, value });
                Step::Done(lat)
            }
            EventKind::Sync(kind, addr) => self.memory_atomic(thread, kind, addr, now, Some(core)),
            EventKind::Compute(n) => Step::Done(n),
            EventKind::PimEnd => Step::Ended(self.end_kernel(core, now) - now),
            EventKind::AllocPim(..) | EventKind::PimBegin(_) => Step::Done(0),
        })
    }

    /// Baseline kernel end. Returns the completion cycle.
    fn end_kernel(&mut self, core: usize, now: u64) -> u64 {
        let mut t = self.link.send(now, self.cfg.messages.response_bytes, TrafficCategory::Data);
        if self.kind == ProtocolKind::CoarseGrainedLock {
            let lines = self.pim_l1[core].drain_where(|_| true);
            for l in lines {
                if l.mesi == Mesi::Modified {
                    t = t.max(self.pim_write_line(now, l.line, l.data));
                }
                self.touch(l.line);
            }
            self.pdir.unlock_region(LOCK_BASE + core);
            if !self.pdir.region_locked() {
                self.notices.push(Notice::Wake { reason: Blocked::RegionLock, at: t });
            }
        }
        let k = &mut self.kernels[core];
        k.thread = None;
        k.phase = Phase::Idle;
        self.counters.kernels += 1;
        self.counters.partial_commits += 1;
        self.notices.push(Notice::Wake { reason: Blocked::PimCore, at: t });
        t
    }

    /// MESI access from a PIM core with the PIM side as a processor-directory
    /// agent. Returns the latency.
    fn pim_mesi_obtain(&mut self, core: usize, line: LineAddr, exclusive: bool, now: u64) -> u64 {
        let tm = self.cfg.timing.clone();
        let hit = self.lookup_pim(core, line);
        if hit {
            let mesi = self.pim_l1[core].get(line).expect("hit").mesi;
            if !exclusive || mesi != Mesi::Shared {
                return tm.l1_hit_cycles;
            }
        }
        let mut t = now + tm.l1_hit_cycles;
        // Fine-grained coherence asks the processor directory on every miss
        // or upgrade; CG and NC hold permission through the lock or by
        // construction.
        let ask = matches!(self.kind, ProtocolKind::FineGrained | ProtocolKind::IdealPim);
        if ask {
            t = self.coherence_round_trip(t);
        }
        // Processor copies give way.
        let mut fetched_from_cpu = false;
        if let Some(data) = self.cpu_dirty_copy(line) {
            let d = if self.kind == ProtocolKind::IdealPim {
                self.mem.write_line(line, data);
                t
            } else {
                self.cpu_write_line(t, line, data, TrafficCategory::Data)
            };
            t = t.max(d);
            fetched_from_cpu = true;
            for c in self.l1.iter_mut().chain(std::iter::once(&mut self.l2)) {
                if let Some(l) = c.get_mut(line) {
                    l.mesi = Mesi::Shared;
                }
            }
            if exclusive {
                self.l2.invalidate(line);
            } else if let Some(l2) = self.l2.get_mut(line) {
                l2.mesi = Mesi::Exclusive;
            }
        }
        if exclusive {
            for c in self.l1.iter_mut().chain(std::iter::once(&mut self.l2)) {
                c.invalidate(line);
            }
        } else {
            for c in self.l1.iter_mut() {
                if let Some(l) = c.get_mut(line) {
                    l.mesi = Mesi::Shared;
                }
            }
        }
        // Other PIM cores.
        t = t.max(self.pim_release_copies(line, Some(core), exclusive, now));
        let shared = !exclusive && (self.cpu_holds(line) || !self.pim_visible_holders(line).iter().all(|(c, _)| *c == core));
        let state = if exclusive {
            Mesi::Modified
        } else if shared {
            Mesi::Shared
        } else {
            Mesi::Exclusive
        };
        if hit {
            self.pim_l1[core].get_mut(line).expect("hit").mesi = state;
            self.touch(line);
        } else {
            if !fetched_from_cpu || self.kind != ProtocolKind::IdealPim {
                t = t.max(self.pim_dram_fetch(now + tm.l1_hit_cycles));
            }
            let data = self.mem.read_line(line);
            self.pim_fill(core, line, state, data, now);
        }
        t - now
    }

    // ---- LazyPIM ----

    fn lazy_step(&mut self, core: usize, thread: ThreadId, cursor: usize, event: EventKind, now: u64) -> Result<Step> {
        let partial = self.cfg.partial.enabled;
        if partial && self.kernels[core].instructions >= self.cfg.partial.instruction_cap {
            return self.request_commit(core, CommitReason::InstructionCap, cursor, now);
        }
        match event {
            EventKind::Read(addr) => self.lazy_read(core, thread, cursor, addr, now),
            EventKind::Write(addr, value) => self.lazy_write(core, thread, cursor, addr, value, now),
            EventKind::Sync(kind, addr) => {
                if !self.kernels[core].fresh {
                    return self.request_commit(core, CommitReason::Sync, cursor, now);
                }
                let step = self.memory_atomic(thread, kind, addr, now, Some(core));
                if matches!(step, Step::Done(_)) {
                    self.kernels[core].reset_partial(cursor + 1);
                    self.reseed(core);
                }
                Ok(step)
            }
            EventKind::Compute(n) => {
                self.kernels[core].instructions += n;
                Ok(Step::Done(n))
            }
            EventKind::PimEnd => self.request_commit(core, CommitReason::KernelEnd, cursor, now),
            EventKind::AllocPim(..) | EventKind::PimBegin(_) => Ok(Step::Done(0)),
        }
    }

    /// When a miss would evict an uncommitted line, the partial kernel must
    /// commit first.
    fn spec_victim(&self, core: usize, line: LineAddr) -> bool {
        !self.pim_l1[core].contains(line) && self.pim_l1[core].victim_for(line).is_some_and(|v| v.speculative)
    }

    fn couple(&mut self, a: usize, b: usize) {
        if a != b && self.kernels[b].active() {
            self.kernels[a].spec_read_bits |= 1 << b;
            self.kernels[b].spec_read_bits |= 1 << a;
        }
    }

    fn lazy_read(&mut self, core: usize, thread: ThreadId, cursor: usize, addr: u64, now: u64) -> Result<Step> {
        let line = line_of(addr);
        let cap = self.cfg.signature.capacity;
        if self.cfg.partial.enabled && self.kernels[core].read_set.insert_count() >= cap {
            return self.request_commit(core, CommitReason::AddressCapacity, cursor, now);
        }
        if self.spec_victim(core, line) {
            return self.request_commit(core, CommitReason::SpeculativeEviction, cursor, now);
        }
        let tm = self.cfg.timing.clone();
        let mut t = now + tm.l1_hit_cycles;
        if self.kernels[core].escalated && !self.kernels[core].locked_lines.contains(&line) {
            t = t.max(self.lock_for_escalation(core, line, now));
        }
        if !self.lookup_pim(core, line) {
            let data = if let Some(j) = self.spec_holder(line, core) {
                // Forward the other core's uncommitted data, overlaid on the
                // current DRAM contents.
                self.couple(core, j);
                let l = self.pim_l1[j].get(line).expect("spec holder");
                let data = merge_words(&self.mem.read_line(line), &l.data, l.word_mask);
                t = t.max(self.internal.send(now, self.cfg.messages.data_message(), TrafficCategory::Data));
                data
            } else {
                t = t.max(self.pim_release_copies(line, Some(core), false, now));
                t = t.max(self.pim_dram_fetch(now + tm.l1_hit_cycles));
                self.mem.read_line(line)
            };
            let others = self.pim_l1.iter().enumerate().any(|(c, p)| c != core && p.contains(line));
            self.pim_fill(core, line, if others { Mesi::Shared } else { Mesi::Exclusive }, data, now);
            if others {
                for (c, p) in self.pim_l1.iter_mut().enumerate() {
                    if c != core {
                        if let Some(l) = p.get_mut(line).filter(|l| l.mesi == Mesi::Exclusive) {
                            l.mesi = Mesi::Shared;
                        }
                    }
                }
            }
            self.pim_l1[core].get_mut(line).expect("filled").unverified = true;
        }
        let value = self.pim_l1[core].get(line).expect("present").data[word_of(addr)];
        let seq = self.next_seq();
        let k = &mut self.kernels[core];
        if self.cfg.partial.enabled {
            k.read_set.insert(line)?;
        } else {
            k.read_set.insert_unchecked(line);
        }
        k.read_lines.insert(line);
        k.instructions += 1;
        k.fresh = false;
        k.pending_ops.push((seq, LogEntry { seq, thread, op: LoggedOp::Read { addr, value } }));
        Ok(Step::Done(t - now))
    }

    fn lazy_write(
        &mut self,
        core: usize,
        thread: ThreadId,
        cursor: usize,
        addr: u64,
        value: u64,
        now: u64,
    ) -> Result<Step> {
        let line = line_of(addr);
        let cap = self.cfg.signature.capacity;
        if self.cfg.partial.enabled && self.kernels[core].write_set.insert_count() >= cap {
            return self.request_commit(core, CommitReason::AddressCapacity, cursor, now);
        }
        if self.spec_victim(core, line) {
            return self.request_commit(core, CommitReason::SpeculativeEviction, cursor, now);
        }
        let tm = self.cfg.timing.clone();
        let mut t = now + tm.l1_hit_cycles;
        let hit = self.lookup_pim(core, line);

        // Take over another core's uncommitted line, or drop committed copies.
        let mut stolen = None;
        if let Some(j) = self.spec_holder(line, core) {
            let l = self.pim_l1[j].invalidate(line).expect("spec holder");
            self.couple(core, j);
            stolen = Some((merge_words(&self.mem.read_line(line), &l.data, l.word_mask), l.word_mask));
            t = t.max(self.internal.send(now, self.cfg.messages.data_message(), TrafficCategory::Data));
        }
        t = t.max(self.pim_release_copies(line, Some(core), true, now));
        // A core that already read this line in its current partial kernel
        // must commit in the same group, or its read could land after this
        // write in commit order. The PIM directory keeps such readers as
        // sharers until they commit, so the test is exact.
        for j in 0..self.kernels.len() {
            if j != core && self.kernels[j].active() && self.kernels[j].read_lines.contains(&line) {
                self.couple(core, j);
            }
        }

        let own = self.pim_l1[core].get(line).cloned();
        let (base, mask) = match (&own, stolen) {
            (Some(l), _) if l.speculative => (l.data, l.word_mask),
            (_, Some((data, mask))) => {
                if let Some(l) = &own {
                    if l.mesi == Mesi::Modified {
                        t = t.max(self.pim_write_line(now, line, l.data));
                    }
                }
                (data, mask)
            }
            (Some(l), None) => {
                if l.mesi == Mesi::Modified {
                    t = t.max(self.pim_write_line(now, line, l.data));
                }
                (l.data, 0)
            }
            (None, None) => {
                t = t.max(self.pim_dram_fetch(now + tm.l1_hit_cycles));
                (self.mem.read_line(line), 0)
            }
        };
        if !hit && own.is_none() {
            self.pim_fill(core, line, Mesi::Modified, base, now);
        }
        let l = self.pim_l1[core].get_mut(line).expect("present");
        let w = word_of(addr);
        l.data = base;
        l.data[w] = value;
        l.mesi = Mesi::Modified;
        l.speculative = true;
        l.unverified = false;
        l.word_mask = mask | 1 << w;
        self.touch(line);

        let seq = self.next_seq();
        let k = &mut self.kernels[core];
        if self.cfg.partial.enabled {
            k.write_set.insert(line)?;
        } else {
            k.write_set.insert_unchecked(line);
        }
        k.instructions += 1;
        k.fresh = false;
        k.pending_ops.push((seq, LogEntry { seq, thread, op: LoggedOp::Write { addr, value } }));
        Ok(Step::Done(t - now))
    }

    /// Escalated mode: pull the processor's dirty copy back to DRAM and lock
    /// the line against processor writes until the next commit.
    pub(crate) fn lock_for_escalation(&mut self, core: usize, line: LineAddr, now: u64) -> u64 {
        let (flushed, t) = self.cpu_purge_line(line, now, TrafficCategory::Flushes, false);
        if flushed {
            self.counters.flushed_lines += 1;
        }
        // A line this core already wrote holds DRAM filler in its clean
        // words, which may predate the processor's copy.
        let fresh = self.mem.read_line(line);
        if let Some(l) = self.pim_l1[core].get_mut(line).filter(|l| l.speculative || l.unverified) {
            l.data = merge_words(&fresh, &l.data, l.word_mask);
        }
        self.pdir.lock_line(line, LOCK_BASE + core);
        self.kernels[core].locked_lines.insert(line);
        t
    }
}
