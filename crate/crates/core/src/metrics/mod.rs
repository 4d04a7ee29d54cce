//! Run statistics, energy accounting, the storage-overhead ledger and
//! report rendering.

mod overhead;
mod report;

pub use overhead::{overhead_report, OverheadItem, OverheadReport};
pub use report::{compare, Comparison, Normalized, Report, REPORT_SCHEMA};

use serde::{Deserialize, Serialize};

use crate::config::EnergyConfig;
use crate::error::{Error, Result};
use crate::memory::LINE_BYTES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficCategory {
    Data,
    CoherenceMsgs,
    Signatures,
    Flushes,
    Writebacks,
    NcAccesses,
}

impl TrafficCategory {
    pub const ALL: [TrafficCategory; 6] = [
        TrafficCategory::Data,
        TrafficCategory::CoherenceMsgs,
        TrafficCategory::Signatures,
        TrafficCategory::Flushes,
        TrafficCategory::Writebacks,
        TrafficCategory::NcAccesses,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrafficCategory::Data => "data",
            TrafficCategory::CoherenceMsgs => "coherence_msgs",
            TrafficCategory::Signatures => "signatures",
            TrafficCategory::Flushes => "flushes",
            TrafficCategory::Writebacks => "writebacks",
            TrafficCategory::NcAccesses => "nc_accesses",
        }
    }
}

/// Off-chip bytes by category.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub data: u64,
    pub coherence_msgs: u64,
    pub signatures: u64,
    pub flushes: u64,
    pub writebacks: u64,
    pub nc_accesses: u64,
}

impl Traffic {
    pub fn add(&mut self, cat: TrafficCategory, bytes: u64) {
        *self.slot(cat) += bytes;
    }

    fn slot(&mut self, cat: TrafficCategory) -> &mut u64 {
        match cat {
            TrafficCategory::Data => &mut self.data,
            TrafficCategory::CoherenceMsgs => &mut self.coherence_msgs,
            TrafficCategory::Signatures => &mut self.signatures,
            TrafficCategory::Flushes => &mut self.flushes,
            TrafficCategory::Writebacks => &mut self.writebacks,
            TrafficCategory::NcAccesses => &mut self.nc_accesses,
        }
    }

    pub fn get(&self, cat: TrafficCategory) -> u64 {
        match cat {
            TrafficCategory::Data => self.data,
            TrafficCategory::CoherenceMsgs => self.coherence_msgs,
            TrafficCategory::Signatures => self.signatures,
            TrafficCategory::Flushes => self.flushes,
            TrafficCategory::Writebacks => self.writebacks,
            TrafficCategory::NcAccesses => self.nc_accesses,
        }
    }

    pub fn total(&self) -> u64 {
        TrafficCategory::ALL.iter().map(|c| self.get(*c)).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub kernels: u64,
    pub partial_commits: u64,
    pub conflicts: u64,
    pub rollbacks: u64,
    pub escalations: u64,
    pub flushed_lines: u64,
    pub invalidated_lines: u64,
    pub waw_merges: u64,
    pub dirty_conflicts: u64,
    pub false_positive_conflicts: u64,
    pub seeded_lines: u64,
    pub cg_blocked_cycles: u64,
    pub cpu_dram_accesses: u64,
    pub pim_dram_accesses: u64,
    pub dram_line_transfers: u64,
    pub l1_accesses: u64,
    pub l2_accesses: u64,
    pub dbi_accesses: u64,
    pub dbi_writebacks: u64,
    pub cpu_region_accesses: u64,
    pub cpu_blocked_region_accesses: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadStats {
    pub thread: u32,
    pub busy_cycles: u64,
    pub stall_cycles: u64,
    pub finish_cycle: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub total_cycles: u64,
    pub offchip: Traffic,
    /// Bytes moved over the PIM-internal path (not off-chip).
    pub internal_bytes: u64,
    pub counters: Counters,
    pub threads: Vec<ThreadStats>,
}

impl Metrics {
    pub fn offchip_bytes(&self) -> u64 {
        self.offchip.total()
    }

    /// conflicts / (commits + conflicts); 0 when nothing was attempted.
    pub fn conflict_rate(&self) -> f64 {
        let c = &self.counters;
        let attempts = c.partial_commits + c.conflicts;
        if attempts == 0 {
            0.0
        } else {
            c.conflicts as f64 / attempts as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.counters;
        if c.rollbacks > c.conflicts {
            return Err(Error::Invariant(format!("rollbacks {} exceed conflicts {}", c.rollbacks, c.conflicts)));
        }
        if c.partial_commits < c.kernels {
            return Err(Error::Invariant(format!("partial commits {} below kernels {}", c.partial_commits, c.kernels)));
        }
        if c.dirty_conflicts > c.conflicts {
            return Err(Error::Invariant("dirty conflicts exceed conflicts".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub dram_pj: f64,
    pub interconnect_pj: f64,
    pub l1_pj: f64,
    pub l2_pj: f64,
    pub dbi_pj: f64,
    pub total_pj: f64,
}

pub fn energy_total(m: &Metrics, e: &EnergyConfig) -> Result<EnergyBreakdown> {
    e.validate()?;
    let c = &m.counters;
    let dram_pj = (c.dram_line_transfers * LINE_BYTES * 8) as f64 * e.dram_pj_per_bit;
    let interconnect_pj = (m.offchip_bytes() * 8) as f64 * e.interconnect_pj_per_bit;
    let l1_pj = c.l1_accesses as f64 * e.l1_pj_per_access;
    let l2_pj = c.l2_accesses as f64 * e.l2_pj_per_access;
    let dbi_pj = c.dbi_accesses as f64 * e.dbi_pj_per_access;
    Ok(EnergyBreakdown { dram_pj, interconnect_pj, l1_pj, l2_pj, dbi_pj, total_pj: dram_pj + interconnect_pj + l1_pj + l2_pj + dbi_pj })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interconnect_energy_arithmetic() {
        let mut m = Metrics::default();
        assert_eq!(energy_total(&m, &EnergyConfig::default()).unwrap().interconnect_pj, 0.0);
        m.offchip.add(TrafficCategory::Data, 1000);
        let e = energy_total(&m, &EnergyConfig::default()).unwrap();
        assert_eq!(e.interconnect_pj, 24_000.0);
        assert_eq!(e.total_pj, 24_000.0);
    }

    #[test]
    fn traffic_sums_categories() {
        let mut t = Traffic::default();
        for (i, c) in TrafficCategory::ALL.iter().enumerate() {
            t.add(*c, i as u64 + 1);
        }
        assert_eq!(t.total(), 21);
        assert_eq!(t.get(TrafficCategory::NcAccesses), 6);
    }

    #[test]
    fn conflict_rate_and_invariants() {
        let mut m = Metrics::default();
        assert_eq!(m.conflict_rate(), 0.0);
        m.counters.partial_commits = 3;
        m.counters.conflicts = 1;
        m.counters.rollbacks = 1;
        m.counters.kernels = 2;
        assert_eq!(m.conflict_rate(), 0.25);
        m.validate().unwrap();
        m.counters.rollbacks = 2;
        assert!(m.validate().is_err());
    }

    #[test]
    fn bad_rate_rejected() {
        let e = EnergyConfig { dram_pj_per_bit: f64::NAN, ..EnergyConfig::default() };
        assert!(energy_total(&Metrics::default(), &e).is_err());
    }
}
