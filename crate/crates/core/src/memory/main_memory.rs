use std::collections::BTreeMap;

use super::{line_of, word_of, CacheLine, LineAddr, LineData};

/// Committed architectural memory. Untouched lines read as zero.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MainMemory {
    lines: BTreeMap<LineAddr, LineData>,
}

impl MainMemory {
    pub fn read_line(&self, line: LineAddr) -> LineData {
        self.lines.get(&line).copied().unwrap_or_default()
    }

    pub fn write_line(&mut self, line: LineAddr, data: LineData) {
        debug_assert_eq!(line, line_of(line));
        if data == [0; 8] {
            self.lines.remove(&line);
        } else {
            self.lines.insert(line, data);
        }
    }

    pub fn read_word(&self, addr: u64) -> u64 {
        self.read_line(line_of(addr))[word_of(addr)]
    }

    pub fn write_word(&mut self, addr: u64, value: u64) {
        let line = line_of(addr);
        let mut data = self.read_line(line);
        data[word_of(addr)] = value;
        self.write_line(line, data);
    }

    /// Writeback path from a cache. Speculative data must never reach DRAM.
    pub fn write_back(&mut self, line: &CacheLine) {
        assert!(!line.speculative, "speculative line {:#x} written back before commit", line.line);
        self.write_line(line.line, line.data);
    }

    /// Non-zero lines in address order.
    pub fn iter(&self) -> impl Iterator<Item = (&LineAddr, &LineData)> {
        self.lines.iter()
    }

    /// Non-zero words as (address, value), ascending.
    pub fn words(&self) -> Vec<(u64, u64)> {
        self.lines
            .iter()
            .flat_map(|(l, d)| d.iter().enumerate().filter(|(_, v)| **v != 0).map(move |(i, v)| (l + 8 * i as u64, *v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Mesi;

    #[test]
    fn default_zero_and_word_access() {
        let mut m = MainMemory::default();
        assert_eq!(m.read_word(0x1238), 0);
        m.write_word(0x1238, 77);
        assert_eq!(m.read_line(0x1200)[7], 77);
        assert_eq!(m.words(), vec![(0x1238, 77)]);
        m.write_word(0x1238, 0);
        assert_eq!(m.iter().count(), 0);
    }

    #[test]
    #[should_panic(expected = "speculative")]
    fn speculative_writeback_panics() {
        let mut m = MainMemory::default();
        let mut l = CacheLine::new(0x40, Mesi::Modified, [1; 8], 0);
        l.speculative = true;
        m.write_back(&l);
    }
}
