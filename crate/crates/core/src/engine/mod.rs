//! Trace-driven simulation engine.
//!
//! Each trace thread is an in-order agent. The scheduler always runs the
//! ready thread with the smallest ready cycle (ties by thread order), so a
//! run is a pure function of the configuration and the trace.

pub mod channel;
pub(crate) mod machine;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::memory::MainMemory;
use crate::metrics::{energy_total, Metrics, Report, ThreadStats, REPORT_SCHEMA};
use crate::protocol::{ProtocolEvent, ProtocolKind};
use crate::workload::{EventKind, ThreadId, Trace};
use machine::{Blocked, Machine, Notice, Step};

/// One memory-visible operation in the order it took effect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LoggedOp {
    Read { addr: u64, value: u64 },
    Write { addr: u64, value: u64 },
    Acquire { addr: u64 },
    Release { addr: u64 },
    Fence { addr: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    /// Execution sequence number; commits reorder entries but keep this.
    pub seq: u64,
    pub thread: ThreadId,
    pub op: LoggedOp,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub final_memory: MainMemory,
    /// Empty unless `debug.record_log` is set.
    pub log: Vec<LogEntry>,
    pub events: Vec<ProtocolEvent>,
}

struct Agent {
    id: ThreadId,
    events: Vec<EventKind>,
    cursor: usize,
    on_pim: Option<usize>,
    ready_at: Option<u64>,
    blocked: Option<(Blocked, u64)>,
    stats: ThreadStats,
    done: bool,
}

struct Scheduler {
    agents: Vec<Agent>,
    index: BTreeMap<ThreadId, usize>,
    heap: BinaryHeap<Reverse<(u64, usize)>>,
}

impl Scheduler {
    fn ready(&mut self, i: usize, at: u64) {
        let a = &mut self.agents[i];
        a.ready_at = Some(at);
        self.heap.push(Reverse((at, i)));
    }

    fn pop(&mut self) -> Option<(u64, usize)> {
        while let Some(Reverse((t, i))) = self.heap.pop() {
            if self.agents[i].ready_at == Some(t) {
                self.agents[i].ready_at = None;
                return Some((t, i));
            }
        }
        None
    }
}

/// Run `trace` under `cfg`.
pub fn run(cfg: &SimConfig, trace: &Trace) -> Result<RunOutput> {
    trace.validate()?;
    let mut m = Machine::new(cfg, trace.region())?;
    let agents: Vec<Agent> = trace
        .per_thread()
        .into_iter()
        .map(|(id, events)| Agent {
            id,
            events,
            cursor: 0,
            on_pim: None,
            ready_at: None,
            blocked: None,
            stats: ThreadStats { thread: id, ..ThreadStats::default() },
            done: false,
        })
        .collect();
    let index = agents.iter().enumerate().map(|(i, a)| (a.id, i)).collect();
    let mut s = Scheduler { agents, index, heap: BinaryHeap::new() };
    for i in 0..s.agents.len() {
        s.ready(i, 0);
    }

    let window = cfg.timing.deadlock_window_cycles;
    let mut last_progress = 0u64;
    let mut now = 0u64;
    loop {
        let Some((t, i)) = s.pop() else {
            if s.agents.iter().all(|a| a.done) {
                break;
            }
            return Err(Error::Deadlock { cycle: now, dump: dump(&s, &m) });
        };
        now = t;
        if now.saturating_sub(last_progress) > window {
            return Err(Error::Deadlock { cycle: now, dump: dump(&s, &m) });
        }
        let a = &mut s.agents[i];
        if a.cursor >= a.events.len() {
            a.done = true;
            a.stats.finish_cycle = now;
            continue;
        }
        m.link.retire(now);
        m.internal.retire(now);
        if m.kind == ProtocolKind::LazyPim {
            m.dbi_tick(now);
        }
        let (tid, cursor, event, on_pim) = (a.id, a.cursor, a.events[a.cursor], a.on_pim);
        let step = match on_pim {
            Some(core) => m.pim_step(core, tid, cursor, event, now)?,
            None => cpu_step(&mut m, tid, cursor, event, now)?,
        };
        let a = &mut s.agents[i];
        match step {
            Step::Done(lat) => {
                a.cursor += 1;
                a.stats.busy_cycles += lat;
                s.ready(i, now + lat);
            }
            Step::Retry(d) => {
                a.stats.stall_cycles += d;
                s.ready(i, now + d);
            }
            Step::Block(b) => a.blocked = Some((b, now)),
            Step::Launched { core, latency } => {
                a.on_pim = Some(core);
                a.cursor += 1;
                a.stats.busy_cycles += latency;
                s.ready(i, now + latency);
            }
            Step::Ended(lat) => {
                a.on_pim = None;
                a.cursor += 1;
                a.stats.busy_cycles += lat;
                s.ready(i, now + lat);
            }
        }
        if s.agents[i].cursor != cursor {
            last_progress = now;
        }
        for notice in std::mem::take(&mut m.notices) {
            apply_notice(&mut s, &mut m, notice, now, &mut last_progress);
        }
        m.reconcile_touched();
        if cfg.debug.validate {
            m.validate()?;
        }
    }

    m.drain()?;
    let mut metrics = Metrics {
        offchip: m.link.traffic().clone(),
        internal_bytes: m.internal.total_bytes(),
        counters: m.counters.clone(),
        threads: s.agents.iter().map(|a| a.stats.clone()).collect(),
        ..Metrics::default()
    };
    metrics.total_cycles = s.agents.iter().map(|a| a.stats.finish_cycle).max().unwrap_or(0).max(m.commit_busy_until);
    metrics.validate()?;
    Ok(RunOutput { metrics, final_memory: m.mem, log: m.log, events: m.events })
}

fn cpu_step(m: &mut Machine, tid: ThreadId, cursor: usize, event: EventKind, now: u64) -> Result<Step> {
    let offload = m.kind != ProtocolKind::CpuOnly;
    Ok(match event {
        EventKind::Read(addr) => m.cpu_read(tid, addr, now)?,
        EventKind::Write(addr, value) => m.cpu_write(tid, addr, value, now)?,
        EventKind::Sync(kind, addr) => m.cpu_sync(tid, kind, addr, now)?,
        EventKind::PimBegin(kernel) if offload => m.launch_kernel(tid, kernel, cursor + 1, now),
        EventKind::Compute(n) => Step::Done(n.div_ceil(m.cfg.system.cpu_compute_divisor)),
        EventKind::PimBegin(_) | EventKind::PimEnd | EventKind::AllocPim(..) => Step::Done(0),
    })
}

fn apply_notice(s: &mut Scheduler, m: &mut Machine, notice: Notice, now: u64, last_progress: &mut u64) {
    match notice {
        Notice::Resume { thread, at, cursor, leave_pim } => {
            let i = s.index[&thread];
            let a = &mut s.agents[i];
            if let Some((_, since)) = a.blocked.take() {
                a.stats.stall_cycles += at.saturating_sub(since);
            }
            if let Some(c) = cursor {
                a.cursor = c;
            }
            if leave_pim {
                a.cursor += 1;
                a.on_pim = None;
            }
            *last_progress = now;
            s.ready(i, at.max(now));
        }
        Notice::Wake { reason, at } => {
            for i in 0..s.agents.len() {
                let a = &mut s.agents[i];
                let Some((b, since)) = a.blocked else { continue };
                if b != reason {
                    continue;
                }
                a.blocked = None;
                let waited = at.saturating_sub(since);
                a.stats.stall_cycles += waited;
                if reason == Blocked::RegionLock {
                    m.counters.cg_blocked_cycles += waited;
                }
                s.ready(i, at.max(now));
            }
        }
    }
}

fn dump(s: &Scheduler, m: &Machine) -> String {
    let mut out = String::new();
    for a in s.agents.iter().filter(|a| !a.done) {
        out.push_str(&format!(
            "thread {}: cursor {}/{} on_pim {:?} blocked {:?} ready {:?} next {:?}\n",
            a.id,
            a.cursor,
            a.events.len(),
            a.on_pim,
            a.blocked,
            a.ready_at,
            a.events.get(a.cursor)
        ));
    }
    out.push_str(&m.dump());
    out
}

/// The same trace with every kernel run on the processor.
pub fn cpu_only_reference(cfg: &SimConfig, trace: &Trace) -> Result<Metrics> {
    let cfg = SimConfig { protocol: ProtocolKind::CpuOnly, ..cfg.clone() };
    Ok(run(&cfg, trace)?.metrics)
}

/// Package a run's metrics with the configuration that produced them.
pub fn build_report(label: &str, cfg: &SimConfig, trace: &Trace, metrics: Metrics) -> Result<Report> {
    let energy = energy_total(&metrics, &cfg.energy)?;
    Ok(Report {
        schema: REPORT_SCHEMA,
        label: label.to_string(),
        protocol: cfg.protocol.name().to_string(),
        seed: cfg.workload.as_ref().map_or(0, |w| w.seed),
        trace_sha256: trace.sha256_hex(),
        signature_bits: cfg.signature.bits,
        signature_capacity: cfg.signature.capacity,
        partial_commits_enabled: cfg.partial.enabled,
        instruction_cap: cfg.partial.instruction_cap,
        dbi_enabled: cfg.dbi.enabled,
        dbi_interval_cycles: cfg.dbi.interval_cycles,
        conflict_rate: metrics.conflict_rate(),
        metrics,
        energy,
        normalized: None,
    })
}

/// Run and report, normalized against a cpu-only run of the same trace.
pub fn simulate(label: &str, cfg: &SimConfig, trace: &Trace) -> Result<Report> {
    let out = run(cfg, trace)?;
    let mut report = build_report(label, cfg, trace, out.metrics)?;
    let reference = if cfg.protocol == ProtocolKind::CpuOnly {
        report.metrics.clone()
    } else {
        cpu_only_reference(cfg, trace)?
    };
    report.normalize_against(&reference);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate, Generator, WorkloadSpec};

    fn random(seed: u64, syncs: bool) -> Trace {
        generate(&WorkloadSpec {
            generator: Generator::Random { events: 600, region_lines: 24, write_fraction: 0.4, max_kernel_len: 12, syncs },
            seed,
            cpu_threads: 2,
            pim_kernels: 2,
        })
        .unwrap()
    }

    fn small(kind: ProtocolKind) -> SimConfig {
        let mut c = SimConfig { protocol: kind, ..SimConfig::default() };
        c.system.cpu_cores = 2;
        c.system.pim_cores = 2;
        c.system.cpu_l1_bytes = 1024;
        c.system.l2_bytes = 4096;
        c.system.pim_l1_bytes = 1024;
        c.debug.validate = true;
        c.debug.record_log = true;
        c
    }

    /// The log read as a sequential execution: every read sees the latest
    /// write, and replayed memory matches the final memory.
    fn replay(out: &RunOutput) {
        let mut mem: BTreeMap<u64, u64> = BTreeMap::new();
        for e in &out.log {
            match e.op {
                LoggedOp::Read { addr, value } => {
                    assert_eq!(mem.get(&addr).copied().unwrap_or(0), value, "stale read {e:?}");
                }
                LoggedOp::Write { addr, value } => {
                    mem.insert(addr, value);
                }
                LoggedOp::Acquire { addr } => {
                    mem.insert(addr, u64::from(e.thread) + 1);
                }
                LoggedOp::Release { addr } => {
                    mem.insert(addr, 0);
                }
                LoggedOp::Fence { .. } => {}
            }
        }
        for (addr, v) in mem {
            assert_eq!(out.final_memory.read_word(addr), v, "final word {addr:#x}");
        }
    }

    #[test]
    fn every_protocol_runs_serializably() {
        for kind in ProtocolKind::ALL {
            for seed in 0..3 {
                let out = run(&small(kind), &random(seed, true)).unwrap_or_else(|e| panic!("{kind} seed {seed}: {e}"));
                replay(&out);
                assert!(out.metrics.total_cycles > 0);
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let t = random(7, false);
        let a = run(&small(ProtocolKind::LazyPim), &t).unwrap();
        let b = run(&small(ProtocolKind::LazyPim), &t).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.log, b.log);
    }
}
