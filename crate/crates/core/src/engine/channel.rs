use std::collections::BTreeMap;

use crate::metrics::{Traffic, TrafficCategory};

/// A link with fixed bandwidth and latency. Each message occupies the link
/// for `ceil(bytes / bandwidth)` cycles in the earliest free slot at or after
/// its send cycle, so a reply booked for a future cycle does not hold up
/// earlier traffic. Every byte is counted once under its category.
#[derive(Clone, Debug)]
pub struct Channel {
    bytes_per_cycle: u64,
    latency: u64,
    /// Busy intervals `start -> end`, disjoint and non-adjacent.
    busy: BTreeMap<u64, u64>,
    traffic: Traffic,
    messages: u64,
}

impl Channel {
    pub fn new(bytes_per_cycle: u64, latency: u64) -> Self {
        Self { bytes_per_cycle: bytes_per_cycle.max(1), latency, busy: BTreeMap::new(), traffic: Traffic::default(), messages: 0 }
    }

    /// Queue `bytes` at cycle `now`; returns the delivery cycle.
    pub fn send(&mut self, now: u64, bytes: u64, category: TrafficCategory) -> u64 {
        let len = bytes.div_ceil(self.bytes_per_cycle);
        self.traffic.add(category, bytes);
        self.messages += 1;
        let mut start = now;
        if let Some((_, &end)) = self.busy.range(..=now).next_back() {
            start = start.max(end);
        }
        for (&s, &e) in self.busy.range(start..) {
            if s >= start + len {
                break;
            }
            start = e;
        }
        let end = start + len;
        if len > 0 {
            self.reserve(start, end);
        }
        end + self.latency
    }

    fn reserve(&mut self, start: u64, end: u64) {
        let mut lo = start;
        let mut hi = end;
        if let Some((&s, &e)) = self.busy.range(..=start).next_back() {
            if e == start {
                lo = s;
                self.busy.remove(&s);
            }
        }
        if let Some(e) = self.busy.remove(&end) {
            hi = e;
        }
        self.busy.insert(lo, hi);
    }

    /// Forget busy intervals that end at or before `cycle`. Callers must not
    /// send at an earlier cycle afterwards.
    pub fn retire(&mut self, cycle: u64) {
        while let Some((&s, &e)) = self.busy.first_key_value() {
            if e > cycle {
                break;
            }
            self.busy.remove(&s);
        }
    }

    pub fn traffic(&self) -> &Traffic {
        &self.traffic
    }

    pub fn total_bytes(&self) -> u64 {
        self.traffic.total()
    }

    pub fn messages(&self) -> u64 {
        self.messages
    }

    /// End of the last booked interval.
    pub fn free_at(&self) -> u64 {
        self.busy.last_key_value().map_or(0, |(_, e)| *e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_channel_delivery() {
        let mut c = Channel::new(8, 10);
        assert_eq!(c.send(0, 64, TrafficCategory::Data), 18);
    }

    #[test]
    fn back_to_back_serializes() {
        let mut c = Channel::new(8, 10);
        let a = c.send(0, 64, TrafficCategory::Data);
        let b = c.send(0, 64, TrafficCategory::Data);
        assert_eq!(b - a, 8);
        let late = c.send(100, 8, TrafficCategory::CoherenceMsgs);
        assert_eq!(late, 111);
    }

    #[test]
    fn bytes_are_conserved() {
        let mut c = Channel::new(8, 40);
        let sizes = [8u64, 72, 16, 264, 1];
        for (i, s) in sizes.iter().enumerate() {
            c.send(i as u64 * 3, *s, TrafficCategory::ALL[i % 6]);
        }
        assert_eq!(c.total_bytes(), sizes.iter().sum::<u64>());
        assert_eq!(c.messages(), 5);
    }

    #[test]
    fn future_booking_leaves_earlier_gap() {
        let mut c = Channel::new(8, 0);
        assert_eq!(c.send(100, 64, TrafficCategory::Data), 108);
        assert_eq!(c.send(0, 64, TrafficCategory::Data), 8);
        // 100 cycles of link time do not fit before the booking at 100.
        assert_eq!(c.send(0, 800, TrafficCategory::Data), 208);
        c.retire(108);
        assert_eq!(c.free_at(), 208);
    }
}
