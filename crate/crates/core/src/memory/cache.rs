use std::fmt::Write as _;

use super::{LineAddr, LineData, MainMemory, Mesi, PimDataRegion, LINE_BYTES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheLevel {
    CpuL1,
    CpuL2,
    PimL1,
}

impl CacheLevel {
    fn label(self) -> &'static str {
        match self {
            CacheLevel::CpuL1 => "L1",
            CacheLevel::CpuL2 => "L2",
            CacheLevel::PimL1 => "PL1",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheLine {
    pub line: LineAddr,
    pub mesi: Mesi,
    /// Written by the current uncommitted partial kernel (PIM L1 only).
    pub speculative: bool,
    /// Per-word dirty mask of speculative writes (PIM L1 only).
    pub word_mask: u8,
    /// Filled or read during the current partial kernel and not yet
    /// acknowledged by the processor directory (PIM L1 only).
    pub unverified: bool,
    pub data: LineData,
    pub lru_stamp: u64,
}

impl CacheLine {
    pub fn new(line: LineAddr, mesi: Mesi, data: LineData, lru_stamp: u64) -> Self {
        Self { line, mesi, speculative: false, word_mask: 0, unverified: false, data, lru_stamp }
    }

    pub fn is_dirty(&self) -> bool {
        self.mesi == Mesi::Modified
    }
}

/// Outcome of a tag lookup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lookup {
    Hit,
    Miss,
}

/// Set-associative cache with true LRU replacement.
#[derive(Clone, Debug)]
pub struct SetAssociativeCache {
    level: CacheLevel,
    ways: usize,
    sets: Vec<Vec<CacheLine>>,
    clock: u64,
}

impl SetAssociativeCache {
    pub fn new(level: CacheLevel, size_bytes: u64, ways: usize) -> Result<Self> {
        if ways == 0 || size_bytes == 0 || !size_bytes.is_multiple_of(LINE_BYTES * ways as u64) {
            return Err(Error::param(format!("cache of {size_bytes}B cannot be split into {ways} ways of 64B lines")));
        }
        let num_sets = (size_bytes / (LINE_BYTES * ways as u64)) as usize;
        Ok(Self { level, ways, sets: vec![Vec::with_capacity(ways); num_sets], clock: 0 })
    }

    pub fn level(&self) -> CacheLevel {
        self.level
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn num_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn capacity_lines(&self) -> usize {
        self.sets.len() * self.ways
    }

    fn set_index(&self, line: LineAddr) -> usize {
        ((line / LINE_BYTES) % self.sets.len() as u64) as usize
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Tag lookup. A hit refreshes the line's LRU position.
    pub fn access(&mut self, line: LineAddr, _kind: AccessKind) -> Lookup {
        let stamp = self.tick();
        let set = self.set_index(line);
        match self.sets[set].iter_mut().find(|l| l.line == line) {
            Some(l) => {
                l.lru_stamp = stamp;
                Lookup::Hit
            }
            None => Lookup::Miss,
        }
    }

    pub fn get(&self, line: LineAddr) -> Option<&CacheLine> {
        self.sets[self.set_index(line)].iter().find(|l| l.line == line)
    }

    pub fn get_mut(&mut self, line: LineAddr) -> Option<&mut CacheLine> {
        let set = self.set_index(line);
        self.sets[set].iter_mut().find(|l| l.line == line)
    }

    pub fn contains(&self, line: LineAddr) -> bool {
        self.get(line).is_some()
    }

    /// The line that a fill of `line` would evict, if its set is full.
    pub fn victim_for(&self, line: LineAddr) -> Option<&CacheLine> {
        let set = &self.sets[self.set_index(line)];
        if set.len() < self.ways || set.iter().any(|l| l.line == line) {
            return None;
        }
        set.iter().min_by_key(|l| l.lru_stamp)
    }

    /// Insert `line` as most recently used, returning the evicted LRU victim.
    pub fn fill(&mut self, line: LineAddr, mesi: Mesi, data: LineData) -> Option<CacheLine> {
        debug_assert!(mesi.is_valid());
        let stamp = self.tick();
        let ways = self.ways;
        let set_idx = self.set_index(line);
        let set = &mut self.sets[set_idx];
        if let Some(existing) = set.iter_mut().find(|l| l.line == line) {
            existing.mesi = mesi;
            existing.data = data;
            existing.lru_stamp = stamp;
            return None;
        }
        let victim = if set.len() >= ways {
            let (pos, _) = set.iter().enumerate().min_by_key(|(_, l)| l.lru_stamp).expect("full set");
            Some(set.swap_remove(pos))
        } else {
            None
        };
        set.push(CacheLine::new(line, mesi, data, stamp));
        victim
    }

    pub fn invalidate(&mut self, line: LineAddr) -> Option<CacheLine> {
        let set_idx = self.set_index(line);
        let set = &mut self.sets[set_idx];
        let pos = set.iter().position(|l| l.line == line)?;
        Some(set.swap_remove(pos))
    }

    pub fn lines(&self) -> impl Iterator<Item = &CacheLine> {
        self.sets.iter().flatten()
    }

    pub fn lines_mut(&mut self) -> impl Iterator<Item = &mut CacheLine> {
        self.sets.iter_mut().flatten()
    }

    /// Remove and return every line matching `pred`.
    pub fn drain_where(&mut self, mut pred: impl FnMut(&CacheLine) -> bool) -> Vec<CacheLine> {
        let mut out = Vec::new();
        for set in &mut self.sets {
            let mut i = 0;
            while i < set.len() {
                if pred(&set[i]) {
                    out.push(set.swap_remove(i));
                } else {
                    i += 1;
                }
            }
        }
        out.sort_by_key(|l| l.line);
        out
    }

    /// Addresses of all Modified lines in the PIM data region, ascending.
    pub fn scan_dirty_in_region(&self, region: &PimDataRegion) -> Vec<LineAddr> {
        let mut v: Vec<LineAddr> = self
            .lines()
            .filter(|l| l.mesi == Mesi::Modified && region.contains(l.line))
            .map(|l| l.line)
            .collect();
        v.sort_unstable();
        v
    }

    /// Write back every Modified line matching `pred` and invalidate it.
    pub fn flush_matching(&mut self, memory: &mut MainMemory, mut pred: impl FnMut(LineAddr) -> bool) -> usize {
        let flushed = self.drain_where(|l| l.mesi == Mesi::Modified && pred(l.line));
        for l in &flushed {
            memory.write_back(l);
        }
        flushed.len()
    }

    /// Invalidate every clean (Shared or Exclusive) line matching `pred`.
    pub fn invalidate_matching(&mut self, mut pred: impl FnMut(LineAddr) -> bool) -> usize {
        self.drain_where(|l| matches!(l.mesi, Mesi::Shared | Mesi::Exclusive) && pred(l.line)).len()
    }

    /// One line per valid cache line: `level set way tag mesi spec mask`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let sets = self.sets.len() as u64;
        for (s, set) in self.sets.iter().enumerate() {
            let mut ordered: Vec<&CacheLine> = set.iter().collect();
            ordered.sort_by_key(|l| l.line);
            for (w, l) in ordered.into_iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{} {} {} {:x} {} {} {:02x}",
                    self.level.label(),
                    s,
                    w,
                    l.line / LINE_BYTES / sets,
                    l.mesi.letter(),
                    u8::from(l.speculative),
                    l.word_mask
                );
            }
        }
        out
    }

    /// Per-cache consistency: no duplicates, sets within associativity,
    /// speculative state only on Modified lines.
    pub fn validate(&self) -> Result<()> {
        for (s, set) in self.sets.iter().enumerate() {
            if set.len() > self.ways {
                return Err(Error::Invariant(format!("set {s} holds {} lines", set.len())));
            }
            for (i, l) in set.iter().enumerate() {
                if set[i + 1..].iter().any(|o| o.line == l.line) {
                    return Err(Error::Invariant(format!("line {:#x} cached twice", l.line)));
                }
                if self.set_index(l.line) != s {
                    return Err(Error::Invariant(format!("line {:#x} in wrong set", l.line)));
                }
                if l.word_mask != 0 && l.mesi != Mesi::Modified {
                    return Err(Error::Invariant(format!("line {:#x} has a word mask but is not Modified", l.line)));
                }
                if l.speculative && l.mesi != Mesi::Modified {
                    return Err(Error::Invariant(format!("speculative line {:#x} is not Modified", l.line)));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SetAssociativeCache {
        // 4 sets x 4 ways
        SetAssociativeCache::new(CacheLevel::CpuL1, 1024, 4).unwrap()
    }

    fn line_in_set0(i: u64) -> LineAddr {
        i * 4 * LINE_BYTES
    }

    #[test]
    fn miss_then_hit() {
        let mut c = small();
        assert_eq!(c.access(0x40, AccessKind::Read), Lookup::Miss);
        c.fill(0x40, Mesi::Exclusive, [0; 8]);
        assert_eq!(c.access(0x40, AccessKind::Read), Lookup::Hit);
    }

    #[test]
    fn lru_victim_is_first_filled() {
        let mut c = small();
        for i in 0..4 {
            assert!(c.fill(line_in_set0(i), Mesi::Shared, [i; 8]).is_none());
        }
        assert_eq!(c.victim_for(line_in_set0(4)).unwrap().line, line_in_set0(0));
        let victim = c.fill(line_in_set0(4), Mesi::Shared, [4; 8]).unwrap();
        assert_eq!(victim.line, line_in_set0(0));
        assert!(!c.contains(line_in_set0(0)));
    }

    #[test]
    fn touch_protects_from_eviction() {
        let mut c = small();
        for i in 0..4 {
            c.fill(line_in_set0(i), Mesi::Shared, [0; 8]);
        }
        c.access(line_in_set0(0), AccessKind::Read);
        let victim = c.fill(line_in_set0(9), Mesi::Shared, [0; 8]).unwrap();
        assert_eq!(victim.line, line_in_set0(1));
    }

    #[test]
    fn bad_geometry() {
        assert!(SetAssociativeCache::new(CacheLevel::CpuL1, 1000, 4).is_err());
        assert!(SetAssociativeCache::new(CacheLevel::CpuL1, 1024, 0).is_err());
    }

    fn region() -> PimDataRegion {
        let mut r = PimDataRegion::default();
        r.allocate(0x10_0000, 0x1000);
        r
    }

    #[test]
    fn scan_filters_region() {
        let mut c = small();
        assert!(c.scan_dirty_in_region(&region()).is_empty());
        c.fill(0x10_0040, Mesi::Modified, [1; 8]);
        c.fill(0x20_0040, Mesi::Modified, [1; 8]);
        c.fill(0x10_0080, Mesi::Shared, [1; 8]);
        assert_eq!(c.scan_dirty_in_region(&region()), vec![0x10_0040]);
    }

    #[test]
    fn scan_matches_exhaustive_enumeration() {
        let mut state = 17u64;
        let r = region();
        let mut c = SetAssociativeCache::new(CacheLevel::CpuL1, 4096, 4).unwrap();
        for _ in 0..300 {
            let x = crate::signatures::splitmix64(&mut state);
            let base = if x & 1 == 0 { 0x10_0000 } else { 0x30_0000 };
            let line = base + (x >> 8) % 64 * LINE_BYTES;
            let mesi = [Mesi::Modified, Mesi::Exclusive, Mesi::Shared][(x >> 4) as usize % 3];
            c.fill(line, mesi, [0; 8]);
        }
        let mut expected = Vec::new();
        for set in 0..c.num_sets() {
            for l in c.lines() {
                if c.set_index(l.line) == set && l.mesi == Mesi::Modified && r.contains(l.line) {
                    expected.push(l.line);
                }
            }
        }
        expected.sort_unstable();
        assert_eq!(c.scan_dirty_in_region(&r), expected);
    }

    #[test]
    fn flush_and_invalidate_predicates() {
        let mut mem = MainMemory::default();
        let mut c = small();
        for (i, l) in [0x40u64, 0x80, 0xc0].iter().enumerate() {
            c.fill(*l, Mesi::Modified, [i as u64 + 1; 8]);
        }
        c.fill(0x100, Mesi::Shared, [9; 8]);
        assert_eq!(c.flush_matching(&mut mem, |_| false), 0);
        assert_eq!(c.lines().count(), 4);
        assert_eq!(c.flush_matching(&mut mem, |_| true), 3);
        assert_eq!(mem.read_line(0x80), [2; 8]);
        assert_eq!(c.scan_dirty_in_region(&{
            let mut r = PimDataRegion::default();
            r.allocate(0, 0x1000);
            r
        }), Vec::<u64>::new());
        assert_eq!(c.invalidate_matching(|_| false), 0);
        assert_eq!(c.invalidate_matching(|_| true), 1);
        assert_eq!(c.lines().count(), 0);
    }

    #[test]
    fn dump_format() {
        let mut c = small();
        c.fill(0x40, Mesi::Modified, [0; 8]);
        c.get_mut(0x40).unwrap().speculative = true;
        c.get_mut(0x40).unwrap().word_mask = 0x05;
        assert_eq!(c.dump(), "L1 1 0 0 M 1 05\n");
    }
}
