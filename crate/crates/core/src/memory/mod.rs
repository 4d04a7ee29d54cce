//! Caches, directories, the DRAM backing store and the PIM data region.

mod cache;
mod directory;
mod main_memory;
mod region;

pub use cache::{AccessKind, CacheLevel, CacheLine, Lookup, SetAssociativeCache};
pub use directory::{DirEntry, Directory, DirectoryScope, Stall};
pub use main_memory::MainMemory;
pub use region::PimDataRegion;

use crate::error::{Error, Result};

pub const LINE_BYTES: u64 = 64;
pub const WORD_BYTES: u64 = 8;
pub const WORDS_PER_LINE: usize = 8;
pub const PAGE_BYTES: u64 = 4096;

/// Line payload as eight 64-bit words.
pub type LineData = [u64; WORDS_PER_LINE];

/// Cache-line aligned address.
pub type LineAddr = u64;

/// A physical byte address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub u64);

impl Address {
    pub fn line(self) -> LineAddr {
        self.0 & !(LINE_BYTES - 1)
    }

    pub fn word_index(self) -> usize {
        ((self.0 >> 3) % WORDS_PER_LINE as u64) as usize
    }

    pub fn page(self) -> u64 {
        self.0 / PAGE_BYTES
    }
}

pub fn line_of(addr: u64) -> LineAddr {
    Address(addr).line()
}

pub fn word_of(addr: u64) -> usize {
    Address(addr).word_index()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mesi {
    Modified,
    Exclusive,
    Shared,
    Invalid,
}

impl Mesi {
    pub fn letter(self) -> char {
        match self {
            Mesi::Modified => 'M',
            Mesi::Exclusive => 'E',
            Mesi::Shared => 'S',
            Mesi::Invalid => 'I',
        }
    }

    pub fn is_valid(self) -> bool {
        self != Mesi::Invalid
    }
}

/// Per-word merge: words whose dirty-mask bit is set come from the PIM line,
/// the rest from `base`.
pub fn merge_waw(base: &LineData, pim_line: &CacheLine) -> Result<LineData> {
    if pim_line.word_mask == 0 {
        return Err(Error::Invariant("WAW merge called with an empty word mask".into()));
    }
    Ok(merge_words(base, &pim_line.data, pim_line.word_mask))
}

pub(crate) fn merge_words(base: &LineData, over: &LineData, mask: u8) -> LineData {
    let mut out = *base;
    for (i, w) in out.iter_mut().enumerate() {
        if mask >> i & 1 == 1 {
            *w = over[i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pim_line(data: LineData, mask: u8) -> CacheLine {
        let mut l = CacheLine::new(0x1000, Mesi::Modified, data, 0);
        l.word_mask = mask;
        l.speculative = true;
        l
    }

    #[test]
    fn address_helpers() {
        let a = Address(0x1234_5678);
        assert_eq!(a.line(), 0x1234_5640);
        assert_eq!(a.word_index(), 7);
        assert_eq!(Address(0x40).word_index(), 0);
        assert_eq!(Address(0x58).word_index(), 3);
    }

    #[test]
    fn merge_full_mask_takes_pim() {
        let cpu = [0xA; 8];
        let pim = pim_line([0xB; 8], 0xFF);
        assert_eq!(merge_waw(&cpu, &pim).unwrap(), [0xB; 8]);
    }

    #[test]
    fn merge_single_word() {
        let cpu = [0xA; 8];
        let pim = pim_line([0xB, 0, 0, 0, 0, 0, 0, 0], 0x01);
        assert_eq!(merge_waw(&cpu, &pim).unwrap(), [0xB, 0xA, 0xA, 0xA, 0xA, 0xA, 0xA, 0xA]);
    }

    #[test]
    fn merge_zero_mask_is_contract_violation() {
        let pim = pim_line([1; 8], 0);
        assert!(merge_waw(&[0; 8], &pim).is_err());
    }

    #[test]
    fn merge_matches_word_loop() {
        let mut state = 3u64;
        for _ in 0..500 {
            let mut cpu = [0u64; 8];
            let mut pim = [0u64; 8];
            for i in 0..8 {
                cpu[i] = crate::signatures::splitmix64(&mut state);
                pim[i] = crate::signatures::splitmix64(&mut state);
            }
            let mask = (crate::signatures::splitmix64(&mut state) as u8).max(1);
            let merged = merge_waw(&cpu, &pim_line(pim, mask)).unwrap();
            let mut expected = [0u64; 8];
            let mut i = 0;
            while i < 8 {
                expected[i] = if (mask & (1 << i)) != 0 { pim[i] } else { cpu[i] };
                i += 1;
            }
            assert_eq!(merged, expected);
        }
    }
}
