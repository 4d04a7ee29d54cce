use std::collections::BTreeSet;

use super::PAGE_BYTES;

/// Per-page flags marking the PIM data region.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PimDataRegion {
    pages: BTreeSet<u64>,
    extents: Vec<(u64, u64)>,
}

impl PimDataRegion {
    /// Flag every page overlapping `[base, base + len)`.
    pub fn allocate(&mut self, base: u64, len: u64) {
        if len == 0 {
            return;
        }
        let first = base / PAGE_BYTES;
        let last = (base + len - 1) / PAGE_BYTES;
        self.pages.extend(first..=last);
        self.extents.push((base, len));
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.pages.contains(&(addr / PAGE_BYTES))
    }

    pub fn extents(&self) -> &[(u64, u64)] {
        &self.extents
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn page_granularity() {
        let mut r = PimDataRegion::default();
        r.allocate(0x2010, 0x10);
        assert!(r.contains(0x2000));
        assert!(r.contains(0x2fff));
        assert!(!r.contains(0x3000));
        r.allocate(0x5ff8, 0x10);
        assert!(r.contains(0x6000));
        assert_eq!(r.page_count(), 3);
        assert_eq!(r.extents().len(), 2);
    }
}
