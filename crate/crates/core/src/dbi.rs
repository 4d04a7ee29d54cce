//! PIM-DBI: a small dirty-block index over PIM-region lines held dirty in
//! the processor caches, drained on a fixed cycle interval.

use serde::{Deserialize, Serialize};

use crate::memory::{LineAddr, LINE_BYTES, PAGE_BYTES};

const BLOCKS_PER_ROW: u64 = PAGE_BYTES / LINE_BYTES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbiConfig {
    pub enabled: bool,
    pub interval_cycles: u64,
    pub rows: usize,
    pub tag_bits: u32,
}

impl Default for DbiConfig {
    fn default() -> Self {
        Self { enabled: true, interval_cycles: 800_000, rows: 16, tag_bits: 48 }
    }
}

#[derive(Clone, Copy, Debug)]
struct DbiRow {
    page: u64,
    dirty: u64,
    lru: u64,
}

#[derive(Clone, Debug)]
pub struct DbiStore {
    rows: Vec<DbiRow>,
    max_rows: usize,
    interval: u64,
    last_trigger: u64,
    clock: u64,
}

impl DbiStore {
    pub fn new(config: &DbiConfig) -> Self {
        Self {
            rows: Vec::with_capacity(config.rows),
            max_rows: config.rows.max(1),
            interval: config.interval_cycles.max(1),
            last_trigger: 0,
            clock: 0,
        }
    }

    pub fn capacity_blocks(&self) -> usize {
        self.max_rows * BLOCKS_PER_ROW as usize
    }

    pub fn tracked_blocks(&self) -> usize {
        self.rows.iter().map(|r| r.dirty.count_ones() as usize).sum()
    }

    pub fn last_trigger(&self) -> u64 {
        self.last_trigger
    }

    fn split(line: LineAddr) -> (u64, u64) {
        (line / PAGE_BYTES, (line % PAGE_BYTES) / LINE_BYTES)
    }

    pub fn is_marked(&self, line: LineAddr) -> bool {
        let (page, bit) = Self::split(line);
        self.rows.iter().any(|r| r.page == page && r.dirty >> bit & 1 == 1)
    }

    /// Mark `line` dirty. Returns lines of an evicted row that the caller
    /// must write back.
    pub fn record(&mut self, line: LineAddr) -> Vec<LineAddr> {
        self.clock += 1;
        let (page, bit) = Self::split(line);
        if let Some(row) = self.rows.iter_mut().find(|r| r.page == page) {
            row.dirty |= 1 << bit;
            row.lru = self.clock;
            return Vec::new();
        }
        let mut evicted = Vec::new();
        if let Some(row) = self.rows.iter_mut().find(|r| r.dirty == 0) {
            *row = DbiRow { page, dirty: 1 << bit, lru: self.clock };
            return evicted;
        }
        if self.rows.len() >= self.max_rows {
            let (pos, _) = self.rows.iter().enumerate().min_by_key(|(_, r)| r.lru).expect("rows");
            let old = self.rows.swap_remove(pos);
            evicted = Self::row_lines(&old);
        }
        self.rows.push(DbiRow { page, dirty: 1 << bit, lru: self.clock });
        evicted
    }

    /// Forget `line` (it was cleaned by some other path).
    pub fn clear_line(&mut self, line: LineAddr) {
        let (page, bit) = Self::split(line);
        if let Some(row) = self.rows.iter_mut().find(|r| r.page == page) {
            row.dirty &= !(1u64 << bit);
        }
    }

    fn row_lines(row: &DbiRow) -> Vec<LineAddr> {
        (0..BLOCKS_PER_ROW).filter(|b| row.dirty >> b & 1 == 1).map(|b| row.page * PAGE_BYTES + b * LINE_BYTES).collect()
    }

    /// When the interval has elapsed, drain every marked line.
    pub fn tick(&mut self, cycle: u64) -> Vec<LineAddr> {
        if cycle < self.last_trigger + self.interval {
            return Vec::new();
        }
        self.last_trigger = cycle;
        let mut lines: Vec<LineAddr> = self.rows.iter().flat_map(Self::row_lines).collect();
        lines.sort_unstable();
        self.rows.clear();
        lines
    }

    /// Cycle at which the next trigger fires.
    pub fn next_trigger(&self) -> u64 {
        self.last_trigger + self.interval
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> DbiStore {
        DbiStore::new(&DbiConfig::default())
    }

    #[test]
    fn record_then_query() {
        let mut d = store();
        assert!(!d.is_marked(0x1040));
        assert!(d.record(0x1040).is_empty());
        assert!(d.is_marked(0x1040));
        d.clear_line(0x1040);
        assert!(!d.is_marked(0x1040));
    }

    #[test]
    fn full_row() {
        let mut d = store();
        for b in 0..64 {
            d.record(0x8000 + b * 64);
        }
        assert_eq!(d.tracked_blocks(), 64);
        assert_eq!(d.rows.len(), 1);
        assert_eq!(d.rows[0].dirty, u64::MAX);
        assert_eq!(d.capacity_blocks(), 1024);
    }

    #[test]
    fn seventeenth_row_evicts_lru() {
        let mut d = store();
        // two lines in page 0, one line in pages 1..16
        d.record(0);
        d.record(64);
        for p in 1..16u64 {
            assert!(d.record(p * PAGE_BYTES).is_empty());
        }
        // Direct replacement model: page 0 has the oldest stamp of its last touch
        // (stamp 2); every other page was touched later, so page 0 is evicted.
        let evicted = d.record(16 * PAGE_BYTES);
        assert_eq!(evicted, vec![0, 64]);
        assert_eq!(d.tracked_blocks(), 16);
        assert!(d.tracked_blocks() <= d.capacity_blocks());
    }

    #[test]
    fn tick_interval() {
        let mut d = store();
        for i in 0..5 {
            d.record(0x4000 + i * 64);
        }
        assert!(d.tick(799_999).is_empty());
        let lines = d.tick(800_000);
        assert_eq!(lines.len(), 5);
        assert_eq!(d.tracked_blocks(), 0);
        assert_eq!(d.next_trigger(), 1_600_000);
        assert!(d.tick(1_000_000).is_empty());
    }
}
