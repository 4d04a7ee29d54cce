//! LazyPIM commit, conflict detection and rollback.
//!
//! Coupled cores (linked through their speculative read bits) commit or
//! roll back as one group once every member has reached a commit point.
//! Commits are serialized: a group starts no earlier than the previous
//! group finished.

use std::collections::{BTreeMap, BTreeSet};

use crate::engine::machine::{Blocked, CommitWindow, Machine, Notice, Step, LOCK_BASE};
use crate::error::Result;
use crate::memory::{merge_words, LineAddr, LineData, Mesi};
use crate::metrics::TrafficCategory;
use crate::protocol::{CommitReason, ConflictSource, Phase, ProtocolEvent};

impl Machine {
    /// Park `core` at a commit point; resolve its group if every member is
    /// waiting. `cursor` is where the kernel resumes after a plain commit.
    pub(crate) fn request_commit(&mut self, core: usize, reason: CommitReason, cursor: usize, now: u64) -> Result<Step> {
        let k = &mut self.kernels[core];
        k.waiting = Some(reason);
        k.phase = Phase::Committing;
        k.resume_cursor = cursor;
        let group = self.group_of(core);
        if group.iter().all(|c| self.kernels[*c].waiting.is_some()) {
            self.resolve_group(&group, now)?;
        }
        Ok(Step::Block(Blocked::GroupCommit))
    }

    /// Transitive closure over speculative read bits.
    fn group_of(&self, core: usize) -> Vec<usize> {
        let mut seen = BTreeSet::from([core]);
        let mut stack = vec![core];
        while let Some(c) = stack.pop() {
            let bits = self.kernels[c].spec_read_bits;
            for j in 0..self.kernels.len() {
                if bits >> j & 1 == 1 && self.kernels[j].active() && seen.insert(j) {
                    stack.push(j);
                }
            }
        }
        seen.into_iter().collect()
    }

    fn resolve_group(&mut self, group: &[usize], now: u64) -> Result<()> {
        let start = now.max(self.commit_busy_until);
        let sig_bytes = 2 * (self.cfg.signature.bits as u64 / 8 + self.cfg.messages.header_bytes);
        let mut t = start;
        for _ in group {
            t = t.max(self.link.send(start, sig_bytes, TrafficCategory::Signatures));
        }
        t += self.cfg.timing.commit_check_cycles;
        let mut conflicted = Vec::new();
        for &c in group {
            let k = &self.kernels[c];
            if !k.escalated && k.cpu_write_set.conflicts_with(&k.read_set)? {
                conflicted.push(c);
            }
        }
        let end = if conflicted.is_empty() { self.commit_group(group, t) } else { self.rollback_group(group, &conflicted, t) };
        self.commit_busy_until = end;
        self.reconcile_touched();
        Ok(())
    }

    fn rollback_group(&mut self, group: &[usize], conflicted: &[usize], now: u64) -> u64 {
        let tm = self.cfg.timing.clone();
        for &c in conflicted {
            let k = &self.kernels[c];
            let mut lines = Vec::new();
            for &line in &k.read_lines {
                if k.cpu_written_lines.contains(&line) {
                    lines.push((line, ConflictSource::InKernel));
                } else if k.seeded_lines.contains(&line) {
                    lines.push((line, ConflictSource::LaunchDirty));
                }
            }
            if lines.iter().any(|(_, s)| *s == ConflictSource::LaunchDirty) {
                self.counters.dirty_conflicts += 1;
            }
            if lines.is_empty() {
                self.counters.false_positive_conflicts += 1;
            }
            let read_set = self.cfg.debug.dump_signatures.then(|| k.read_set.to_hex());
            self.events.push(ProtocolEvent::Conflict { cycle: now, core: c, lines, read_set });
        }

        // Processor dirty lines the group may have read go back to DRAM so
        // the re-execution sees them.
        let mut dirty: BTreeSet<LineAddr> = BTreeSet::new();
        for cache in self.l1.iter().chain(std::iter::once(&self.l2)) {
            dirty.extend(cache.scan_dirty_in_region(&self.region));
        }
        let mut t = now;
        for line in dirty {
            if group.iter().any(|c| self.kernels[*c].read_set.may_contain(line)) {
                let (_, d) = self.cpu_purge_line(line, now, TrafficCategory::Flushes, false);
                self.counters.flushed_lines += 1;
                t = t.max(d);
            }
        }
        let mut invalidated = 0u64;
        for &c in group {
            let dropped = self.pim_l1[c].drain_where(|l| l.speculative || l.unverified);
            for l in &dropped {
                self.touch(l.line);
            }
            invalidated += dropped.len() as u64;
        }
        self.counters.invalidated_lines += invalidated;
        t += invalidated * tm.invalidation_cycles_per_line;

        let threshold = self.cfg.partial.rollback_threshold;
        for &c in group {
            self.counters.conflicts += 1;
            self.counters.rollbacks += 1;
            let k = &mut self.kernels[c];
            k.rollback_count += 1;
            let escalate = k.rollback_count >= threshold && !k.escalated;
            let read_lines: Vec<LineAddr> = k.read_lines.iter().copied().collect();
            self.events.push(ProtocolEvent::Rollback { cycle: t, core: c, count: k.rollback_count, escalated: escalate });
            if escalate {
                self.kernels[c].escalated = true;
                self.counters.escalations += 1;
                for line in read_lines {
                    t = t.max(self.lock_for_escalation(c, line, now));
                }
            }
        }
        for &c in group {
            let k = &mut self.kernels[c];
            let checkpoint = k.checkpoint;
            let thread = k.thread.expect("active kernel has a thread");
            k.spec_read_bits = 0;
            k.reset_partial(checkpoint);
            self.reseed(c);
            self.notices.push(Notice::Resume { thread, at: t, cursor: Some(checkpoint), leave_pim: false });
        }
        t
    }

    fn commit_group(&mut self, group: &[usize], now: u64) -> u64 {
        let tm = self.cfg.timing.clone();
        let mut t = now;
        let in_group_write = |m: &Machine, line: LineAddr| group.iter().any(|c| m.kernels[*c].write_set.may_contain(line));

        // Processor dirty lines the group may have written: real overlaps are
        // merged word by word, aliases are simply written back.
        let mut bases: BTreeMap<LineAddr, LineData> = BTreeMap::new();
        let mut cpu_lines: BTreeSet<LineAddr> = BTreeSet::new();
        for cache in self.l1.iter().chain(std::iter::once(&self.l2)) {
            cpu_lines.extend(cache.lines().map(|l| l.line).filter(|l| self.region.contains(*l)));
        }
        let mut invalidated = 0u64;
        for line in cpu_lines {
            if !in_group_write(self, line) {
                continue;
            }
            let spec_owner = group.iter().copied().find(|c| self.pim_l1[*c].get(line).is_some_and(|l| l.speculative));
            match (self.cpu_dirty_copy(line), spec_owner) {
                (Some(data), Some(c)) => {
                    bases.insert(line, data);
                    for cache in self.l1.iter_mut().chain(std::iter::once(&mut self.l2)) {
                        cache.invalidate(line);
                    }
                    if let Some(d) = self.dbi.as_mut() {
                        d.clear_line(line);
                    }
                    let bytes = self.cfg.messages.data_message();
                    t = t.max(self.link.send(now, bytes, TrafficCategory::Flushes));
                    self.counters.waw_merges += 1;
                    self.events.push(ProtocolEvent::WawMerge { cycle: now, core: c, line });
                    self.touch(line);
                }
                (Some(_), None) => {
                    let (_, d) = self.cpu_purge_line(line, now, TrafficCategory::Writebacks, true);
                    t = t.max(d);
                }
                (None, _) => {
                    for cache in self.l1.iter_mut().chain(std::iter::once(&mut self.l2)) {
                        if cache.invalidate(line).is_some() {
                            invalidated += 1;
                        }
                    }
                    self.touch(line);
                }
            }
        }

        // Speculative lines become ordinary committed lines.
        let eager = self.cfg.partial.eager_writeback;
        let mut merged: BTreeSet<LineAddr> = BTreeSet::new();
        for &c in group {
            let spec: Vec<LineAddr> = self.pim_l1[c].lines().filter(|l| l.speculative).map(|l| l.line).collect();
            for line in spec {
                let base = bases.get(&line).copied().unwrap_or_else(|| self.mem.read_line(line));
                let l = self.pim_l1[c].get_mut(line).expect("spec line");
                l.data = merge_words(&base, &l.data, l.word_mask);
                l.speculative = false;
                l.unverified = false;
                l.word_mask = 0;
                l.mesi = Mesi::Modified;
                let data = l.data;
                if eager {
                    t = t.max(self.pim_write_line(now, line, data));
                    self.pim_l1[c].get_mut(line).expect("spec line").mesi = Mesi::Exclusive;
                }
                merged.insert(line);
                t = t.max(self.pim_release_copies(line, Some(c), true, now));
            }
        }

        // Lines read under speculation are now known to be current.
        for &c in group {
            let unverified: Vec<LineAddr> = self.pim_l1[c].lines().filter(|l| l.unverified).map(|l| l.line).collect();
            for line in unverified {
                if merged.contains(&line) || self.cpu_dirty_copy(line).is_some() {
                    self.pim_l1[c].invalidate(line);
                    self.touch(line);
                    continue;
                }
                let others = self.cpu_holds(line)
                    || self.pim_l1.iter().enumerate().any(|(j, p)| j != c && p.contains(line));
                for cache in self.l1.iter_mut() {
                    if let Some(l) = cache.get_mut(line).filter(|l| l.mesi == Mesi::Exclusive) {
                        l.mesi = Mesi::Shared;
                    }
                }
                let l = self.pim_l1[c].get_mut(line).expect("unverified line");
                l.unverified = false;
                l.mesi = if others { Mesi::Shared } else { Mesi::Exclusive };
                if others {
                    for (j, p) in self.pim_l1.iter_mut().enumerate() {
                        if j != c {
                            if let Some(o) = p.get_mut(line).filter(|o| o.mesi == Mesi::Exclusive) {
                                o.mesi = Mesi::Shared;
                            }
                        }
                    }
                }
                self.touch(line);
            }
        }
        self.counters.invalidated_lines += invalidated;
        t += invalidated * tm.invalidation_cycles_per_line;

        // The group's operations take effect now, in execution order.
        let mut ops = Vec::new();
        for &c in group {
            ops.append(&mut self.kernels[c].pending_ops);
        }
        ops.sort_by_key(|(seq, _)| *seq);
        if self.cfg.debug.record_log {
            self.log.extend(ops.into_iter().map(|(_, e)| e));
        }

        let sets = group
            .iter()
            .flat_map(|c| [self.kernels[*c].write_set.clone(), self.kernels[*c].read_set.clone()])
            .collect();
        self.windows.push(CommitWindow { end: t, sets });

        let mut unlocked = false;
        for &c in group {
            unlocked |= !self.pdir.unlock_lines(LOCK_BASE + c).is_empty();
            self.counters.partial_commits += 1;
            let k = &mut self.kernels[c];
            let reason = k.waiting.expect("group member waiting");
            k.rollback_count = 0;
            k.escalated = false;
            k.spec_read_bits = 0;
            k.locked_lines.clear();
            self.events.push(ProtocolEvent::Commit { cycle: t, core: c, reason, group: group.to_vec() });
        }
        if unlocked {
            self.notices.push(Notice::Wake { reason: Blocked::LineLock, at: t });
        }
        let mut freed = false;
        for &c in group {
            let k = &mut self.kernels[c];
            let thread = k.thread.expect("active kernel has a thread");
            if k.waiting == Some(CommitReason::KernelEnd) {
                k.thread = None;
                k.phase = Phase::Idle;
                k.waiting = None;
                self.counters.kernels += 1;
                self.events.push(ProtocolEvent::KernelEnd { cycle: t, core: c });
                let done = self.link.send(t, self.cfg.messages.response_bytes, TrafficCategory::Data);
                self.notices.push(Notice::Resume { thread, at: done, cursor: None, leave_pim: true });
                freed = true;
            } else {
                let cursor = k.resume_cursor;
                k.reset_partial(cursor);
                self.reseed(c);
                self.notices.push(Notice::Resume { thread, at: t, cursor: Some(cursor), leave_pim: false });
            }
        }
        if freed {
            self.notices.push(Notice::Wake { reason: Blocked::PimCore, at: t });
        }
        t
    }
}
