use std::collections::{BTreeMap, BTreeSet};

use super::LineAddr;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectoryScope {
    /// Main coherence point, tracking processor caches and the PIM side as a whole.
    Processor,
    /// Local directory in the logic layer, tracking PIM core L1s.
    Pim,
}

/// Holders of one line. `owner` holds it Modified or Exclusive; `sharers`
/// is a bit vector of agents in Shared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DirEntry {
    pub owner: Option<usize>,
    pub sharers: u64,
}

impl DirEntry {
    pub fn is_empty(&self) -> bool {
        self.owner.is_none() && self.sharers == 0
    }

    pub fn holds(&self, agent: usize) -> bool {
        self.owner == Some(agent) || self.sharers >> agent & 1 == 1
    }

    pub fn sharer_list(&self) -> Vec<usize> {
        (0..64).filter(|a| self.sharers >> a & 1 == 1).collect()
    }

    /// Every agent holding the line, owner included.
    pub fn holders(&self) -> Vec<usize> {
        let mut v = self.sharer_list();
        if let Some(o) = self.owner {
            v.push(o);
            v.sort_unstable();
        }
        v
    }
}

/// A permission change refused because the line is locked by another holder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stall {
    pub line: LineAddr,
    pub holder: usize,
}

#[derive(Clone, Debug)]
pub struct Directory {
    scope: DirectoryScope,
    entries: BTreeMap<LineAddr, DirEntry>,
    line_locks: BTreeMap<LineAddr, usize>,
    region_holders: BTreeSet<usize>,
}

impl Directory {
    pub fn new(scope: DirectoryScope) -> Self {
        Self { scope, entries: BTreeMap::new(), line_locks: BTreeMap::new(), region_holders: BTreeSet::new() }
    }

    pub fn scope(&self) -> DirectoryScope {
        self.scope
    }

    pub fn lookup(&self, line: LineAddr) -> DirEntry {
        self.entries.get(&line).copied().unwrap_or_default()
    }

    fn put(&mut self, line: LineAddr, e: DirEntry) {
        if e.is_empty() {
            self.entries.remove(&line);
        } else {
            self.entries.insert(line, e);
        }
    }

    /// Refuse access to a line locked by someone other than `requester`.
    pub fn check(&self, line: LineAddr, in_region: bool, requester: Option<usize>) -> Result<(), Stall> {
        if let Some(&holder) = self.line_locks.get(&line) {
            if Some(holder) != requester {
                return Err(Stall { line, holder });
            }
        }
        if in_region {
            if let Some(&holder) = self.region_holders.iter().find(|h| Some(**h) != requester) {
                return Err(Stall { line, holder });
            }
        }
        Ok(())
    }

    /// Make `agent` the single M/E holder. Returns the agents that lost the line.
    pub fn grant_owner(&mut self, line: LineAddr, agent: usize, in_region: bool) -> Result<Vec<usize>, Stall> {
        self.check(line, in_region, None)?;
        Ok(self.set_owner(line, agent))
    }

    /// Add `agent` as a sharer. Returns a previous owner that must downgrade.
    pub fn grant_sharer(&mut self, line: LineAddr, agent: usize, in_region: bool) -> Result<Option<usize>, Stall> {
        self.check(line, in_region, None)?;
        Ok(self.add_sharer(line, agent))
    }

    /// Unchecked form of [`Directory::grant_owner`].
    pub fn set_owner(&mut self, line: LineAddr, agent: usize) -> Vec<usize> {
        let e = self.lookup(line);
        let revoked: Vec<usize> = e.holders().into_iter().filter(|a| *a != agent).collect();
        self.put(line, DirEntry { owner: Some(agent), sharers: 0 });
        revoked
    }

    /// Unchecked form of [`Directory::grant_sharer`].
    pub fn add_sharer(&mut self, line: LineAddr, agent: usize) -> Option<usize> {
        let mut e = self.lookup(line);
        let mut downgraded = None;
        if let Some(o) = e.owner.take() {
            if o != agent {
                downgraded = Some(o);
            }
            e.sharers |= 1 << o;
        }
        e.sharers |= 1 << agent;
        self.put(line, e);
        downgraded
    }

    /// Demote the owner (if any) to a sharer.
    pub fn downgrade(&mut self, line: LineAddr) {
        let mut e = self.lookup(line);
        if let Some(o) = e.owner.take() {
            e.sharers |= 1 << o;
        }
        self.put(line, e);
    }

    pub fn revoke(&mut self, line: LineAddr, agent: usize) {
        let mut e = self.lookup(line);
        if e.owner == Some(agent) {
            e.owner = None;
        }
        e.sharers &= !(1u64 << agent);
        self.put(line, e);
    }

    /// Overwrite the entry for `line`, e.g. after recomputing it from cache contents.
    pub fn set_entry(&mut self, line: LineAddr, entry: DirEntry) {
        self.put(line, entry);
    }

    pub fn clear_line(&mut self, line: LineAddr) {
        self.entries.remove(&line);
    }

    pub fn lock_line(&mut self, line: LineAddr, holder: usize) {
        self.line_locks.insert(line, holder);
    }

    pub fn is_line_locked(&self, line: LineAddr) -> Option<usize> {
        self.line_locks.get(&line).copied()
    }

    /// Release every line lock owned by `holder`; returns the released lines.
    pub fn unlock_lines(&mut self, holder: usize) -> Vec<LineAddr> {
        let lines: Vec<LineAddr> = self.line_locks.iter().filter(|(_, h)| **h == holder).map(|(l, _)| *l).collect();
        for l in &lines {
            self.line_locks.remove(l);
        }
        lines
    }

    pub fn lock_region(&mut self, holder: usize) {
        self.region_holders.insert(holder);
    }

    pub fn unlock_region(&mut self, holder: usize) {
        self.region_holders.remove(&holder);
    }

    pub fn region_locked(&self) -> bool {
        !self.region_holders.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&LineAddr, &DirEntry)> {
        self.entries.iter()
    }

    /// Single-writer / multi-reader check over every entry.
    pub fn validate(&self) -> Result<()> {
        for (line, e) in &self.entries {
            if let Some(o) = e.owner {
                if e.sharers & !(1u64 << o) != 0 {
                    return Err(Error::Invariant(format!(
                        "{:?} directory: line {line:#x} owned by {o} but shared by {:?}",
                        self.scope,
                        e.sharer_list()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn owner_then_sharer_downgrades() {
        let mut d = Directory::new(DirectoryScope::Processor);
        assert!(d.grant_owner(0x40, 0, false).unwrap().is_empty());
        let prev = d.grant_sharer(0x40, 1, false).unwrap();
        assert_eq!(prev, Some(0));
        let e = d.lookup(0x40);
        assert_eq!(e.owner, None);
        assert!(e.holds(0) && e.holds(1));
        d.validate().unwrap();
    }

    #[test]
    fn owner_revokes_sharers() {
        let mut d = Directory::new(DirectoryScope::Processor);
        d.grant_sharer(0x40, 0, false).unwrap();
        d.grant_sharer(0x40, 2, false).unwrap();
        assert_eq!(d.grant_owner(0x40, 1, false).unwrap(), vec![0, 2]);
        assert_eq!(d.lookup(0x40), DirEntry { owner: Some(1), sharers: 0 });
    }

    #[test]
    fn locked_line_stalls_until_unlock() {
        let mut d = Directory::new(DirectoryScope::Processor);
        d.lock_line(0x80, 7);
        assert_eq!(d.grant_owner(0x80, 0, true), Err(Stall { line: 0x80, holder: 7 }));
        assert!(d.check(0x80, true, Some(7)).is_ok());
        assert_eq!(d.unlock_lines(7), vec![0x80]);
        assert!(d.grant_owner(0x80, 0, true).is_ok());
    }

    #[test]
    fn region_lock_only_blocks_region_lines() {
        let mut d = Directory::new(DirectoryScope::Processor);
        d.lock_region(3);
        assert!(d.grant_sharer(0x40, 0, true).is_err());
        assert!(d.grant_sharer(0x40, 0, false).is_ok());
        d.unlock_region(3);
        assert!(!d.region_locked());
        assert!(d.grant_sharer(0x40, 0, true).is_ok());
    }

    #[test]
    fn validator_catches_owner_with_sharers() {
        let mut d = Directory::new(DirectoryScope::Pim);
        d.entries.insert(0x40, DirEntry { owner: Some(0), sharers: 0b10 });
        assert!(d.validate().is_err());
    }
}
