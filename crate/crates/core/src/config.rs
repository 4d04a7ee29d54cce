//! Simulation configuration, loaded from TOML.
//!
//! Every section is optional and falls back to its defaults. The `energy`
//! section is the exception to partial filling: when present, every rate
//! must be given.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dbi::DbiConfig;
use crate::error::{Error, Result};
use crate::protocol::ProtocolKind;
use crate::signatures::SignatureParams;
use crate::workload::WorkloadSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub cpu_cores: usize,
    pub pim_cores: usize,
    pub cpu_l1_bytes: usize,
    pub cpu_l1_ways: usize,
    pub l2_bytes: usize,
    pub l2_ways: usize,
    pub pim_l1_bytes: usize,
    pub pim_l1_ways: usize,
    /// `Compute(n)` costs `ceil(n / cpu_compute_divisor)` cycles on a CPU core.
    pub cpu_compute_divisor: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            cpu_cores: 16,
            pim_cores: 16,
            cpu_l1_bytes: 64 * 1024,
            cpu_l1_ways: 4,
            l2_bytes: 2 * 1024 * 1024,
            l2_ways: 8,
            pim_l1_bytes: 64 * 1024,
            pim_l1_ways: 4,
            cpu_compute_divisor: 4,
        }
    }
}

/// Cycle costs. Placeholder values chosen for plausible ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub l1_hit_cycles: u64,
    pub l2_hit_cycles: u64,
    pub dram_access_cycles: u64,
    pub pim_dram_access_cycles: u64,
    pub offchip_link_bytes_per_cycle: u64,
    pub offchip_latency_cycles: u64,
    pub pim_internal_bytes_per_cycle: u64,
    pub commit_check_cycles: u64,
    pub invalidation_cycles_per_line: u64,
    pub spin_retry_cycles: u64,
    /// Abort when no thread makes progress for this many cycles.
    pub deadlock_window_cycles: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            l1_hit_cycles: 4,
            l2_hit_cycles: 12,
            dram_access_cycles: 200,
            pim_dram_access_cycles: 60,
            offchip_link_bytes_per_cycle: 8,
            offchip_latency_cycles: 40,
            pim_internal_bytes_per_cycle: 64,
            commit_check_cycles: 10,
            invalidation_cycles_per_line: 1,
            spin_retry_cycles: 20,
            deadlock_window_cycles: 200_000_000,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pim_dram_access_cycles > self.dram_access_cycles {
            return Err(Error::config("pim_dram_access_cycles must not exceed dram_access_cycles"));
        }
        if self.offchip_link_bytes_per_cycle == 0 || self.pim_internal_bytes_per_cycle == 0 {
            return Err(Error::config("bandwidths must be positive"));
        }
        if self.pim_internal_bytes_per_cycle < self.offchip_link_bytes_per_cycle {
            return Err(Error::config("pim_internal_bytes_per_cycle must be at least offchip_link_bytes_per_cycle"));
        }
        if self.spin_retry_cycles == 0 {
            return Err(Error::config("spin_retry_cycles must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignatureConfig {
    pub bits: usize,
    pub segments: usize,
    pub capacity: u32,
    pub seed: u64,
    pub bank_registers: usize,
}

impl Default for SignatureConfig {
    fn default() -> Self {
        let p = SignatureParams::default();
        Self { bits: p.bits, segments: p.segments, capacity: p.capacity, seed: p.seed, bank_registers: 16 }
    }
}

impl SignatureConfig {
    pub fn params(&self) -> SignatureParams {
        SignatureParams { bits: self.bits, segments: self.segments, capacity: self.capacity, seed: self.seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialConfig {
    /// When false, a kernel commits only at its end (or when a speculative
    /// line must be evicted); signatures may then exceed their capacity.
    pub enabled: bool,
    pub instruction_cap: u64,
    pub rollback_threshold: u32,
    /// Write committed lines straight to DRAM instead of keeping them
    /// Modified in the PIM L1.
    pub eager_writeback: bool,
}

impl Default for PartialConfig {
    fn default() -> Self {
        Self { enabled: true, instruction_cap: 1_000_000, rollback_threshold: 3, eager_writeback: false }
    }
}

/// Energy rates. Only the interconnect figure is a published value; the
/// rest are placeholders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub dram_pj_per_bit: f64,
    pub interconnect_pj_per_bit: f64,
    pub l1_pj_per_access: f64,
    pub l2_pj_per_access: f64,
    pub dbi_pj_per_access: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            dram_pj_per_bit: 20.0,
            interconnect_pj_per_bit: 3.0,
            l1_pj_per_access: 10.0,
            l2_pj_per_access: 50.0,
            dbi_pj_per_access: 1.0,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dram_pj_per_bit", self.dram_pj_per_bit),
            ("interconnect_pj_per_bit", self.interconnect_pj_per_bit),
            ("l1_pj_per_access", self.l1_pj_per_access),
            ("l2_pj_per_access", self.l2_pj_per_access),
            ("dbi_pj_per_access", self.dbi_pj_per_access),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("energy rate {name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Off-chip message sizes in bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MessageConfig {
    pub request_bytes: u64,
    pub response_bytes: u64,
    pub data_bytes: u64,
    pub header_bytes: u64,
    pub nc_write_bytes: u64,
}

impl Default for MessageConfig {
    fn default() -> Self {
        Self { request_bytes: 8, response_bytes: 8, data_bytes: 64, header_bytes: 8, nc_write_bytes: 16 }
    }
}

impl MessageConfig {
    pub fn data_message(&self) -> u64 {
        self.data_bytes + self.header_bytes
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebugConfig {
    /// Run structural validators after every simulated event.
    pub validate: bool,
    /// Record the execution log used by serializability checks.
    pub record_log: bool,
    /// Include hex-encoded signatures of conflicting commits in the event log.
    pub dump_signatures: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub protocol: ProtocolKind,
    pub system: SystemConfig,
    pub timing: TimingConfig,
    pub signature: SignatureConfig,
    pub partial: PartialConfig,
    pub dbi: DbiConfig,
    pub energy: EnergyConfig,
    pub messages: MessageConfig,
    pub debug: DebugConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workload: Option<WorkloadSpec>,
    /// Trace file, relative paths resolved against the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolKind::LazyPim,
            system: SystemConfig::default(),
            timing: TimingConfig::default(),
            signature: SignatureConfig::default(),
            partial: PartialConfig::default(),
            dbi: DbiConfig::default(),
            energy: EnergyConfig::default(),
            messages: MessageConfig::default(),
            debug: DebugConfig::default(),
            workload: None,
            trace: None,
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Load `path` (or defaults) and apply `key.path=value` overrides. Values
    /// are parsed as TOML literals, falling back to plain strings.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Value::try_from(SimConfig::default()).map_err(|e| Error::config(e.to_string()))?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: SimConfig = value.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A copy of `self` with `key.path=value` overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: SimConfig = value.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.timing.validate()?;
        self.energy.validate()?;
        self.signature.params().validate()?;
        let s = &self.system;
        if s.cpu_cores == 0 || s.cpu_cores > 63 {
            return Err(Error::config("cpu_cores must lie in 1..=63"));
        }
        if s.pim_cores == 0 || s.pim_cores > 63 {
            return Err(Error::config("pim_cores must lie in 1..=63"));
        }
        if s.cpu_compute_divisor == 0 {
            return Err(Error::config("cpu_compute_divisor must be positive"));
        }
        if self.signature.bank_registers == 0 {
            return Err(Error::config("bank_registers must be positive"));
        }
        if self.partial.instruction_cap == 0 {
            return Err(Error::config("instruction_cap must be positive"));
        }
        if let Some(w) = &self.workload {
            w.validate()?;
        }
        Ok(())
    }
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| Error::config(format!("override `{key}`: `{part}` is not a table")))?;
        if i + 1 == parts.len() {
            table.insert((*part).to_string(), parsed);
            return Ok(());
        }
        cur = table.entry((*part).to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::config("empty override key"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = SimConfig::default();
        let back = SimConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(SimConfig::from_toml_str("").unwrap(), SimConfig::default());
    }

    #[test]
    fn overrides_patch_nested_keys() {
        let c = SimConfig::load_with_overrides(
            None,
            &["signature.bits=8192".into(), "protocol=fg".into(), "dbi.enabled=false".into()],
        )
        .unwrap();
        assert_eq!(c.signature.bits, 8192);
        assert_eq!(c.protocol, ProtocolKind::FineGrained);
        assert!(!c.dbi.enabled);
    }

    #[test]
    fn missing_energy_rate_is_an_error() {
        let err = SimConfig::from_toml_str("[energy]\ndram_pj_per_bit = 1.0\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn timing_ordering_checked() {
        assert!(SimConfig::load_with_overrides(None, &["timing.pim_dram_access_cycles=500".into()]).is_err());
        assert!(SimConfig::from_toml_str("bogus = 1").is_err());
    }
}
