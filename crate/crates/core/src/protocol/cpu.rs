//! Processor-side accesses: MESI through private L1s and a shared
//! non-inclusive L2, plus the per-protocol handling of PIM-region lines.

use crate::engine::machine::{Blocked, Machine, Step, LOCK_BASE};
use crate::engine::LoggedOp;
use crate::error::Result;
use crate::memory::{line_of, word_of, LineAddr, Mesi};
use crate::metrics::TrafficCategory;
use crate::protocol::ProtocolKind;
use crate::workload::{SyncKind, ThreadId};

impl Machine {
    /// Region gatekeeping shared by reads, writes and syncs.
    fn cpu_region_gate(&mut self, line: LineAddr, write: bool) -> Option<Step> {
        if !self.in_region(line) {
            return None;
        }
        if self.kind == ProtocolKind::CoarseGrainedLock && self.pdir.region_locked() {
            self.counters.cpu_blocked_region_accesses += 1;
            return Some(Step::Block(Blocked::RegionLock));
        }
        if write && self.pdir.is_line_locked(line).is_some_and(|h| h >= LOCK_BASE) {
            self.counters.cpu_blocked_region_accesses += 1;
            return Some(Step::Block(Blocked::LineLock));
        }
        None
    }

    pub(crate) fn cpu_read(&mut self, thread: ThreadId, addr: u64, now: u64) -> Result<Step> {
        let line = line_of(addr);
        if let Some(s) = self.cpu_region_gate(line, false) {
            return Ok(s);
        }
        let region = self.in_region(line);
        if region {
            self.counters.cpu_region_accesses += 1;
            if self.kind == ProtocolKind::NonCacheable {
                return Ok(self.nc_read(thread, addr, now));
            }
        }
        let core = self.cpu_core_of(thread);
        let wait = if region { self.window_delay(line, now) } else { 0 };
        let lat = self.cpu_obtain(core, line, false, now + wait);
        let value = self.l1[core].get(line).expect("line present after fill").data[word_of(addr)];
        if self.cfg.debug.validate {
            debug_assert_eq!(value, self.committed_line(line)[word_of(addr)], "CPU read observed uncommitted data");
        }
        self.log_now(thread, LoggedOp::Read { addr, value });
        Ok(Step::Done(wait + lat))
    }

    pub(crate) fn cpu_write(&mut self, thread: ThreadId, addr: u64, value: u64, now: u64) -> Result<Step> {
        let line = line_of(addr);
        if let Some(s) = self.cpu_region_gate(line, true) {
            return Ok(s);
        }
        let region = self.in_region(line);
        if region {
            self.counters.cpu_region_accesses += 1;
            if self.kind == ProtocolKind::NonCacheable {
                return Ok(self.nc_write(thread, addr, value, now));
            }
        }
        let core = self.cpu_core_of(thread);
        let wait = if region { self.window_delay(line, now) } else { 0 };
        let lat = self.cpu_obtain(core, line, true, now + wait);
        self.cpu_store(core, addr, value, now + wait);
        self.log_now(thread, LoggedOp::Write { addr, value });
        Ok(Step::Done(wait + lat))
    }

    /// Update the owned L1 line and record region writes for LazyPIM.
    fn cpu_store(&mut self, core: usize, addr: u64, value: u64, now: u64) {
        let line = line_of(addr);
        let l = self.l1[core].get_mut(line).expect("line owned before store");
        l.mesi = Mesi::Modified;
        l.data[word_of(addr)] = value;
        if self.kind == ProtocolKind::LazyPim && self.in_region(line) {
            for k in self.kernels.iter_mut().filter(|k| k.active()) {
                k.record_cpu_write(line);
            }
            self.dbi_record(line, now);
        }
    }

    pub(crate) fn cpu_sync(&mut self, thread: ThreadId, kind: SyncKind, addr: u64, now: u64) -> Result<Step> {
        let line = line_of(addr);
        let region = self.in_region(line);
        let memory_side = region && matches!(self.kind, ProtocolKind::CoarseGrainedLock | ProtocolKind::NonCacheable);
        if memory_side {
            return Ok(self.memory_atomic(thread, kind, addr, now, None));
        }
        if kind == SyncKind::Fence {
            self.log_now(thread, LoggedOp::Fence { addr });
            return Ok(Step::Done(1));
        }
        if let Some(s) = self.cpu_region_gate(line, true) {
            return Ok(s);
        }
        let core = self.cpu_core_of(thread);
        let wait = if region { self.window_delay(line, now) } else { 0 };
        if kind == SyncKind::Acquire {
            let lat = self.cpu_obtain(core, line, false, now + wait);
            if self.l1[core].get(line).expect("present").data[word_of(addr)] != 0 {
                return Ok(Step::Retry(wait + lat + self.cfg.timing.spin_retry_cycles));
            }
        }
        let lat = self.cpu_obtain(core, line, true, now + wait);
        let (value, op) = match kind {
            SyncKind::Acquire => (u64::from(thread) + 1, LoggedOp::Acquire { addr }),
            _ => (0, LoggedOp::Release { addr }),
        };
        self.cpu_store(core, addr, value, now + wait);
        self.log_now(thread, op);
        Ok(Step::Done(wait + lat))
    }

    /// Read-modify-write performed at memory: every cached copy is written
    /// back and dropped first. `pim_core` is the requester when issued by a
    /// PIM core; other active LazyPIM kernels see it as a processor write.
    pub(crate) fn memory_atomic(
        &mut self,
        thread: ThreadId,
        kind: SyncKind,
        addr: u64,
        now: u64,
        pim_core: Option<usize>,
    ) -> Step {
        let line = line_of(addr);
        if kind == SyncKind::Fence {
            self.log_now(thread, LoggedOp::Fence { addr });
            return Step::Done(1);
        }
        let (_, t1) = self.cpu_purge_line(line, now, TrafficCategory::Flushes, true);
        let t2 = self.pim_release_copies(line, None, true, now);
        let done = match pim_core {
            Some(_) => t1.max(t2) + self.cfg.timing.pim_dram_access_cycles,
            None => {
                let cat = if self.kind == ProtocolKind::NonCacheable { TrafficCategory::NcAccesses } else { TrafficCategory::Data };
                let t = self.link.send(now, self.cfg.messages.request_bytes, cat);
                let t = t.max(t1).max(t2) + self.cfg.timing.dram_access_cycles;
                self.link.send(t, self.cfg.messages.response_bytes, cat)
            }
        };
        let current = self.mem.read_word(addr);
        if kind == SyncKind::Acquire && current != 0 {
            return Step::Retry(done - now + self.cfg.timing.spin_retry_cycles);
        }
        let (value, op) = match kind {
            SyncKind::Acquire => (u64::from(thread) + 1, LoggedOp::Acquire { addr }),
            _ => (0, LoggedOp::Release { addr }),
        };
        self.mem.write_word(addr, value);
        self.counters.dram_line_transfers += 1;
        if self.kind == ProtocolKind::LazyPim && self.in_region(line) {
            for (c, k) in self.kernels.iter_mut().enumerate() {
                if k.active() && Some(c) != pim_core {
                    k.record_cpu_write(line);
                }
            }
        }
        self.log_now(thread, op);
        Step::Done(done - now)
    }

    fn nc_read(&mut self, thread: ThreadId, addr: u64, now: u64) -> Step {
        let line = line_of(addr);
        let t0 = self.pim_release_copies(line, None, false, now);
        let m = &self.cfg.messages;
        let (req, data) = (m.request_bytes, m.data_message());
        let t = self.link.send(now, req, TrafficCategory::NcAccesses).max(t0) + self.cfg.timing.dram_access_cycles;
        let t = self.link.send(t, data, TrafficCategory::NcAccesses);
        self.counters.dram_line_transfers += 1;
        let value = self.mem.read_word(addr);
        self.log_now(thread, LoggedOp::Read { addr, value });
        Step::Done(t - now)
    }

    fn nc_write(&mut self, thread: ThreadId, addr: u64, value: u64, now: u64) -> Step {
        let line = line_of(addr);
        let t0 = self.pim_release_copies(line, None, true, now);
        let t = self.link.send(now, self.cfg.messages.nc_write_bytes, TrafficCategory::NcAccesses).max(t0);
        self.counters.dram_line_transfers += 1;
        self.mem.write_word(addr, value);
        self.log_now(thread, LoggedOp::Write { addr, value });
        Step::Done(t - now)
    }

    /// Committed PIM copies give way to a processor request. Returns the
    /// cycle at which the processor may proceed.
    fn pim_yield(&mut self, line: LineAddr, exclusive: bool, now: u64) -> u64 {
        let holders = self.pim_visible_holders(line);
        if holders.is_empty() {
            return now;
        }
        let needs_action = exclusive || holders.iter().any(|(_, m)| *m != Mesi::Shared);
        if !needs_action {
            return now;
        }
        let t = self.coherence_round_trip(now);
        let wb = self.pim_release_copies(line, None, exclusive, now);
        if self.kind == ProtocolKind::IdealPim {
            now
        } else {
            t.max(wb)
        }
    }

    /// Bring `line` into `core`'s L1 with read or write permission.
    /// Returns the access latency.
    pub(crate) fn cpu_obtain(&mut self, core: usize, line: LineAddr, exclusive: bool, now: u64) -> u64 {
        let tm = self.cfg.timing.clone();
        if self.lookup_cpu(core, line) {
            let mesi = self.l1[core].get(line).expect("hit").mesi;
            if !exclusive || mesi != Mesi::Shared {
                return tm.l1_hit_cycles;
            }
            // Upgrade from Shared.
            self.counters.l2_accesses += 1;
            let mut lat = tm.l1_hit_cycles + tm.l2_hit_cycles;
            let others = self.cpu_l1_holders(line, Some(core));
            for (o, _) in &others {
                self.l1[*o].invalidate(line);
            }
            let mut data = self.l1[core].get(line).expect("hit").data;
            if let Some(l2) = self.l2.invalidate(line) {
                data = l2.data;
            }
            let ready = self.pim_yield(line, true, now + lat);
            lat = lat.max(ready - now) + others.len() as u64 * tm.invalidation_cycles_per_line;
            let l = self.l1[core].get_mut(line).expect("hit");
            l.data = data;
            l.mesi = Mesi::Modified;
            self.touch(line);
            return lat;
        }

        self.counters.l2_accesses += 1;
        let mut lat = tm.l1_hit_cycles + tm.l2_hit_cycles;
        let others = self.cpu_l1_holders(line, Some(core));
        let owner = others.iter().find(|(_, m)| *m != Mesi::Shared).copied();
        let (state, data) = if let Some((o, m)) = owner {
            lat += tm.l1_hit_cycles;
            let data = self.l1[o].get(line).expect("owner").data;
            if exclusive {
                self.l1[o].invalidate(line);
                (Mesi::Modified, data)
            } else {
                self.l1[o].get_mut(line).expect("owner").mesi = Mesi::Shared;
                if m == Mesi::Modified {
                    self.l2_insert(line, Mesi::Modified, data, now);
                }
                (Mesi::Shared, data)
            }
        } else {
            let peer = others.first().and_then(|(o, _)| self.l1[*o].get(line)).map(|l| l.data);
            let ready = self.pim_yield(line, exclusive, now + lat);
            lat = lat.max(ready - now);
            if exclusive {
                for (o, _) in &others {
                    self.l1[*o].invalidate(line);
                }
                lat += others.len() as u64 * tm.invalidation_cycles_per_line;
            }
            let pim_shared = !self.pim_visible_holders(line).is_empty();
            let shared = !exclusive && (!others.is_empty() || pim_shared);
            let (data, dirty) = match (self.l2.get(line), peer) {
                (Some(l), _) => (l.data, l.mesi == Mesi::Modified),
                (None, Some(d)) => {
                    // A clean sharer supplies the line.
                    lat += tm.l1_hit_cycles;
                    (d, false)
                }
                (None, None) => {
                    let t = self.cpu_dram_fetch(now + lat);
                    lat = t - now;
                    (self.mem.read_line(line), false)
                }
            };
            let state = if exclusive || (dirty && !shared) {
                Mesi::Modified
            } else if shared {
                Mesi::Shared
            } else {
                Mesi::Exclusive
            };
            if state != Mesi::Shared {
                self.l2.invalidate(line);
            }
            (state, data)
        };
        self.cpu_fill(core, line, state, data, now);
        lat
    }
}

#[cfg(test)]
mod tests {
    use crate::config::SimConfig;
    use crate::engine::machine::{Machine, Step};
    use crate::memory::{Mesi, PimDataRegion};
    use crate::protocol::ProtocolKind;

    fn machine(kind: ProtocolKind) -> Machine {
        let cfg = SimConfig { protocol: kind, ..SimConfig::default() };
        let mut r = PimDataRegion::default();
        r.allocate(0x1000_0000, 0x10_0000);
        Machine::new(&cfg, r).unwrap()
    }

    #[test]
    fn read_then_write_moves_through_states() {
        let mut m = machine(ProtocolKind::IdealPim);
        assert!(matches!(m.cpu_read(0, 0x40, 0).unwrap(), Step::Done(_)));
        assert_eq!(m.l1[0].get(0x40).unwrap().mesi, Mesi::Exclusive);
        m.cpu_read(1, 0x40, 10).unwrap();
        assert_eq!(m.l1[0].get(0x40).unwrap().mesi, Mesi::Shared);
        assert_eq!(m.l1[1].get(0x40).unwrap().mesi, Mesi::Shared);
        m.cpu_write(1, 0x48, 7, 20).unwrap();
        assert!(m.l1[0].get(0x40).is_none());
        assert_eq!(m.l1[1].get(0x40).unwrap().mesi, Mesi::Modified);
        m.cpu_read(0, 0x48, 30).unwrap();
        assert_eq!(m.l1[0].get(0x40).unwrap().data[1], 7);
        assert_eq!(m.l2.get(0x40).unwrap().mesi, Mesi::Modified);
        m.reconcile_touched();
        m.validate().unwrap();
    }

    #[test]
    fn nc_region_write_bypasses_caches() {
        let mut m = machine(ProtocolKind::NonCacheable);
        m.cpu_write(0, 0x1000_0000, 5, 0).unwrap();
        assert!(m.l1[0].get(0x1000_0000).is_none());
        assert_eq!(m.mem.read_word(0x1000_0000), 5);
        assert_eq!(m.link.traffic().nc_accesses, 16);
    }

    #[test]
    fn lazypim_region_write_lands_in_active_banks() {
        let mut m = machine(ProtocolKind::LazyPim);
        m.kernels[0].phase = crate::protocol::Phase::Running;
        m.cpu_write(0, 0x1000_0040, 1, 0).unwrap();
        assert!(m.kernels[0].cpu_write_set.may_contain(0x1000_0040));
        assert_eq!(m.kernels[1].cpu_write_set.insert_count(), 0);
        assert!(m.kernels[0].cpu_written_lines.contains(&0x1000_0040));
    }
}
