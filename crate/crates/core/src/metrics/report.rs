use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{EnergyBreakdown, Metrics, TrafficCategory};
use crate::error::Result;

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalized {
    /// cpu-only cycles / these cycles.
    pub speedup_vs_cpu_only: Option<f64>,
    /// These off-chip bytes / cpu-only off-chip bytes.
    pub traffic_vs_cpu_only: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub label: String,
    pub protocol: String,
    pub seed: u64,
    pub trace_sha256: String,
    pub signature_bits: usize,
    pub signature_capacity: u32,
    pub partial_commits_enabled: bool,
    pub instruction_cap: u64,
    pub dbi_enabled: bool,
    pub dbi_interval_cycles: u64,
    pub conflict_rate: f64,
    pub metrics: Metrics,
    pub energy: EnergyBreakdown,
    pub normalized: Option<Normalized>,
}

/// `num / den`, with 0/0 = 1 and x/0 undefined.
fn ratio(num: f64, den: f64) -> Option<f64> {
    if den == 0.0 {
        (num == 0.0).then_some(1.0)
    } else {
        Some(num / den)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

const CSV_COLUMNS: &[&str] = &[
    "label",
    "protocol",
    "seed",
    "trace_sha256",
    "signature_bits",
    "signature_capacity",
    "partial_commits_enabled",
    "instruction_cap",
    "dbi_enabled",
    "dbi_interval_cycles",
    "total_cycles",
    "offchip_bytes",
    "data",
    "coherence_msgs",
    "signatures",
    "flushes",
    "writebacks",
    "nc_accesses",
    "energy_total_pj",
    "energy_dram_pj",
    "energy_interconnect_pj",
    "energy_l1_pj",
    "energy_l2_pj",
    "energy_dbi_pj",
    "kernels",
    "partial_commits",
    "conflicts",
    "rollbacks",
    "escalations",
    "flushed_lines",
    "invalidated_lines",
    "waw_merges",
    "dirty_conflicts",
    "cg_blocked_cycles",
    "cpu_dram_accesses",
    "conflict_rate",
    "speedup_vs_cpu_only",
    "traffic_vs_cpu_only",
];

impl Report {
    pub fn normalize_against(&mut self, cpu_only: &Metrics) {
        self.normalized = Some(Normalized {
            speedup_vs_cpu_only: ratio(cpu_only.total_cycles as f64, self.metrics.total_cycles as f64),
            traffic_vs_cpu_only: ratio(self.metrics.offchip_bytes() as f64, cpu_only.offchip_bytes() as f64),
        });
    }

    fn csv_row(&self) -> Vec<String> {
        let m = &self.metrics;
        let c = &m.counters;
        let e = &self.energy;
        let mut row = vec![
            self.label.clone(),
            self.protocol.clone(),
            self.seed.to_string(),
            self.trace_sha256.clone(),
            self.signature_bits.to_string(),
            self.signature_capacity.to_string(),
            self.partial_commits_enabled.to_string(),
            self.instruction_cap.to_string(),
            self.dbi_enabled.to_string(),
            self.dbi_interval_cycles.to_string(),
            m.total_cycles.to_string(),
            m.offchip_bytes().to_string(),
        ];
        row.extend(TrafficCategory::ALL.iter().map(|cat| m.offchip.get(*cat).to_string()));
        row.extend([e.total_pj, e.dram_pj, e.interconnect_pj, e.l1_pj, e.l2_pj, e.dbi_pj].iter().map(|v| format!("{v:.1}")));
        row.extend(
            [
                c.kernels,
                c.partial_commits,
                c.conflicts,
                c.rollbacks,
                c.escalations,
                c.flushed_lines,
                c.invalidated_lines,
                c.waw_merges,
                c.dirty_conflicts,
                c.cg_blocked_cycles,
                c.cpu_dram_accesses,
            ]
            .iter()
            .map(u64::to_string),
        );
        row.push(format!("{:.6}", self.conflict_rate));
        match &self.normalized {
            Some(n) => {
                row.push(fmt_opt(n.speedup_vs_cpu_only));
                row.push(fmt_opt(n.traffic_vs_cpu_only));
            }
            None => row.extend([String::new(), String::new()]),
        }
        row
    }

    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    pub fn to_csv(reports: &[Report]) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        for r in reports {
            out.push_str(&r.csv_row().join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(reports: &[Report]) -> String {
        serde_json::to_string_pretty(reports).expect("reports serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Vec<Report>> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_table(reports: &[Report]) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:<9} {:>12} {:>12} {:>10} {:>9} {:>9} {:>8} {:>9}",
            "label", "protocol", "cycles", "offchip_B", "energy_uJ", "commits", "conflicts", "c_rate", "speedup"
        );
        for r in reports {
            let speed = r
                .normalized
                .as_ref()
                .and_then(|n| n.speedup_vs_cpu_only)
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<16} {:<9} {:>12} {:>12} {:>10.3} {:>9} {:>9} {:>8.4} {:>9}",
                r.label,
                r.protocol,
                r.metrics.total_cycles,
                r.metrics.offchip_bytes(),
                r.energy.total_pj / 1e6,
                r.metrics.counters.partial_commits,
                r.metrics.counters.conflicts,
                r.conflict_rate,
                speed
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label: String,
    pub protocol: String,
    /// baseline cycles / candidate cycles.
    pub speedup: Option<f64>,
    /// candidate bytes / baseline bytes.
    pub traffic_ratio: Option<f64>,
    pub energy_ratio: Option<f64>,
    pub conflict_rate_delta: f64,
}

/// Pair reports by (label, protocol) and compute candidate-vs-baseline ratios.
pub fn compare(candidate: &[Report], baseline: &[Report]) -> Vec<Comparison> {
    candidate
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            // Positional pairing when no report shares the key.
            let b = baseline.iter().find(|b| b.label == c.label && b.protocol == c.protocol).or_else(|| baseline.get(i))?;
            Some(Comparison {
                label: c.label.clone(),
                protocol: c.protocol.clone(),
                speedup: ratio(b.metrics.total_cycles as f64, c.metrics.total_cycles as f64),
                traffic_ratio: ratio(c.metrics.offchip_bytes() as f64, b.metrics.offchip_bytes() as f64),
                energy_ratio: ratio(c.energy.total_pj, b.energy.total_pj),
                conflict_rate_delta: c.conflict_rate - b.conflict_rate,
            })
        })
        .collect()
}

impl Comparison {
    pub fn to_csv(rows: &[Comparison]) -> String {
        let mut out = String::from("label,protocol,speedup,traffic_ratio,energy_ratio,conflict_rate_delta\n");
        for r in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6}",
                r.label,
                r.protocol,
                fmt_opt(r.speedup),
                fmt_opt(r.traffic_ratio),
                fmt_opt(r.energy_ratio),
                r.conflict_rate_delta
            );
        }
        out
    }

    pub fn to_table(rows: &[Comparison]) -> String {
        let mut out = format!("{:<16} {:<9} {:>9} {:>9} {:>9} {:>9}\n", "label", "protocol", "speedup", "traffic", "energy", "d_crate");
        for r in rows {
            let f = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<16} {:<9} {:>9} {:>9} {:>9} {:>9.4}",
                r.label,
                r.protocol,
                f(r.speedup),
                f(r.traffic_ratio),
                f(r.energy_ratio),
                r.conflict_rate_delta
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        let mut m = Metrics { total_cycles: 1000, ..Metrics::default() };
        m.offchip.add(TrafficCategory::Data, 720);
        m.offchip.add(TrafficCategory::Signatures, 528);
        Report {
            schema: REPORT_SCHEMA,
            label: "t".into(),
            protocol: "lazypim".into(),
            seed: 7,
            trace_sha256: "00".into(),
            signature_bits: 2048,
            signature_capacity: 250,
            partial_commits_enabled: true,
            instruction_cap: 1_000_000,
            dbi_enabled: true,
            dbi_interval_cycles: 800_000,
            conflict_rate: 0.25,
            metrics: m,
            energy: EnergyBreakdown::default(),
            normalized: None,
        }
    }

    #[test]
    fn empty_csv_is_header_only() {
        assert_eq!(Report::to_csv(&[]), Report::csv_header() + "\n");
    }

    #[test]
    fn csv_row_matches_header_width() {
        let csv = Report::to_csv(&[sample()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[1].contains(",1248,"));
    }

    #[test]
    fn json_round_trip() {
        let mut r = sample();
        r.normalize_against(&Metrics { total_cycles: 2000, ..Metrics::default() });
        let back = Report::from_json(&Report::to_json(&[r.clone()])).unwrap();
        assert_eq!(back, vec![r]);
        assert!(Report::to_json(&[sample()]).contains("\"schema\": 1"));
    }

    #[test]
    fn identical_inputs_compare_to_one() {
        let rows = compare(&[sample()], &[sample()]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].speedup, Some(1.0));
        assert_eq!(rows[0].traffic_ratio, Some(1.0));
        assert_eq!(rows[0].energy_ratio, Some(1.0));
        assert_eq!(rows[0].conflict_rate_delta, 0.0);
    }

    #[test]
    fn normalized_ratios() {
        let mut r = sample();
        r.normalize_against(&Metrics { total_cycles: 3000, ..Metrics::default() });
        let n = r.normalized.unwrap();
        assert_eq!(n.speedup_vs_cpu_only, Some(3.0));
        assert_eq!(n.traffic_vs_cpu_only, None);
    }
}
