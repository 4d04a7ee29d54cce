//! Synthetic trace generators.
//!
//! Thread layout shared by every generator: threads `0..cpu_threads` run on
//! the processor, and thread `cpu_threads + k` hosts PIM kernel `k`. Thread 0
//! emits the `AllocPim` events first. Written values are
//! `(thread << 32) | seq` with a per-thread sequence starting at 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EventKind, SyncKind, ThreadId, Trace, TraceEvent};
use crate::error::{Error, Result};
use crate::memory::{LINE_BYTES, PAGE_BYTES, WORD_BYTES};

pub const REGION_BASE: u64 = 0x1000_0000;
pub const PRIVATE_BASE: u64 = 0x8000_0000;
const PRIVATE_STRIDE: u64 = 0x10_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    PointerChase {
        nodes: u64,
        /// Total edge count; out-degree is clamped to 1..=8.
        edges: u64,
        iterations: u32,
        cpu_share_fraction: f64,
        /// Fraction of shared processor accesses that also write the
        /// vertex's `next` line, which kernels write as well.
        #[serde(default = "one")]
        cpu_write_fraction: f64,
        /// Processor accesses per thread per iteration; 0 derives it from
        /// the graph size.
        #[serde(default)]
        cpu_ops: u64,
        /// Idle cycles on each PIM thread before every kernel iteration.
        #[serde(default = "default_kernel_gap")]
        kernel_gap: u64,
    },
    Htap {
        tables: u64,
        tuples: u64,
        txn_count: u64,
        analytic_query_count: u64,
        /// Reads per write inside a transaction.
        read_write_ratio: f64,
        /// Idle cycles on each PIM thread after every query.
        #[serde(default = "default_query_gap")]
        query_gap: u64,
    },
    /// Small dense traces for differential testing.
    Random {
        events: u64,
        region_lines: u64,
        write_fraction: f64,
        max_kernel_len: u64,
        syncs: bool,
    },
}

fn one() -> f64 {
    1.0
}

fn default_kernel_gap() -> u64 {
    100
}

fn default_query_gap() -> u64 {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub generator: Generator,
    #[serde(default)]
    pub seed: u64,
    pub cpu_threads: u32,
    pub pim_kernels: u32,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let frac = |f: f64, name: &str| {
            if (0.0..=1.0).contains(&f) {
                Ok(())
            } else {
                Err(Error::param(format!("{name} must lie in [0, 1], got {f}")))
            }
        };
        if self.cpu_threads + self.pim_kernels == 0 {
            return Err(Error::param("workload needs at least one thread"));
        }
        match self.generator {
            Generator::PointerChase { nodes, cpu_share_fraction, cpu_write_fraction, .. } => {
                if nodes == 0 {
                    return Err(Error::param("pointer chase needs nodes >= 1"));
                }
                frac(cpu_share_fraction, "cpu_share_fraction")?;
                frac(cpu_write_fraction, "cpu_write_fraction")
            }
            Generator::Htap { tables, tuples, read_write_ratio, .. } => {
                if tables == 0 || tuples == 0 {
                    return Err(Error::param("htap needs tables >= 1 and tuples >= 1"));
                }
                if !(read_write_ratio >= 0.0 && read_write_ratio.is_finite()) {
                    return Err(Error::param("read_write_ratio must be finite and non-negative"));
                }
                Ok(())
            }
            Generator::Random { region_lines, write_fraction, max_kernel_len, .. } => {
                if region_lines == 0 || max_kernel_len == 0 {
                    return Err(Error::param("random generator needs region_lines >= 1 and max_kernel_len >= 1"));
                }
                frac(write_fraction, "write_fraction")
            }
        }
    }
}

pub fn generate(spec: &WorkloadSpec) -> Result<Trace> {
    spec.validate()?;
    Ok(match spec.generator {
        Generator::PointerChase { .. } => generate_pointer_chase(spec),
        Generator::Htap { .. } => generate_htap(spec),
        Generator::Random { .. } => generate_random(spec),
    })
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Per-thread event builder.
struct Stream {
    thread: ThreadId,
    seq: u64,
    events: Vec<EventKind>,
}

impl Stream {
    fn new(thread: ThreadId) -> Self {
        Self { thread, seq: 0, events: Vec::new() }
    }
    fn read(&mut self, a: u64) {
        self.events.push(EventKind::Read(a));
    }
    fn write(&mut self, a: u64) {
        self.seq += 1;
        self.events.push(EventKind::Write(a, (u64::from(self.thread) << 32) | self.seq));
    }
    fn compute(&mut self, c: u64) {
        if c > 0 {
            self.events.push(EventKind::Compute(c));
        }
    }
    fn push(&mut self, k: EventKind) {
        self.events.push(k);
    }
}

/// Round-robin merge of per-thread streams after the allocation events.
fn assemble(allocs: Vec<(u64, u64)>, streams: Vec<Stream>) -> Trace {
    let mut out: Vec<TraceEvent> = allocs.into_iter().map(|(b, l)| TraceEvent::new(0, EventKind::AllocPim(b, l))).collect();
    let mut cursors = vec![0usize; streams.len()];
    loop {
        let mut progressed = false;
        for (s, c) in streams.iter().zip(cursors.iter_mut()) {
            if let Some(k) = s.events.get(*c) {
                out.push(TraceEvent::new(s.thread, *k));
                *c += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    Trace::new(out)
}

fn private_line(thread: ThreadId, i: u64) -> u64 {
    PRIVATE_BASE + u64::from(thread) * PRIVATE_STRIDE + i * LINE_BYTES
}

/// Vertex record of a pointer-chase graph: four consecutive lines holding
/// `curr`, `next`, the edge list and padding. Kernel `k` owns the `k`-th
/// contiguous block of vertices.
#[derive(Clone, Copy, Debug)]
pub struct Vertex {
    pub curr: u64,
    pub next: u64,
    pub edges: u64,
}

const VERTEX_LINES: u64 = 4;

pub fn pointer_chase_vertex(i: u64) -> Vertex {
    let base = REGION_BASE + i * VERTEX_LINES * LINE_BYTES;
    Vertex { curr: base, next: base + LINE_BYTES, edges: base + 2 * LINE_BYTES }
}

pub fn generate_pointer_chase(spec: &WorkloadSpec) -> Trace {
    let Generator::PointerChase { nodes, edges, iterations, cpu_share_fraction, cpu_write_fraction, cpu_ops, kernel_gap } = spec.generator else {
        return Trace::default();
    };
    let nodes = nodes.max(1);
    let pim = u64::from(spec.pim_kernels);
    let cpu = spec.cpu_threads;

    let mut g = rng_for(spec.seed, 0);
    let base_degree = (edges / nodes).clamp(1, 8);
    let adj: Vec<Vec<u64>> = (0..nodes)
        .map(|_| {
            let d = (base_degree + g.gen_range(0..2)).min(8);
            (0..d).map(|_| g.gen_range(0..nodes)).collect()
        })
        .collect();

    let mut streams = Vec::new();
    let work = (nodes * base_degree).max(8);
    let cpu_ops = match (cpu, cpu_ops) {
        (0, _) => 0,
        (c, 0) => (work / u64::from(c)).max(8),
        (_, n) => n,
    };
    for t in 0..cpu {
        let mut r = rng_for(spec.seed, 1 + u64::from(t));
        let mut s = Stream::new(t);
        for _ in 0..u64::from(iterations) * cpu_ops {
            // Draw everything up front so the stream is coupled across
            // different share fractions under one seed.
            let u: f64 = r.gen();
            // Squaring the draw skews processor accesses toward low-numbered
            // (popular) vertices.
            let x: f64 = r.gen();
            let v = ((x * x * nodes as f64) as u64).min(nodes - 1);
            let word = r.gen_range(0..8u64) * WORD_BYTES;
            let p = r.gen_range(0..64u64);
            let c = r.gen_range(10..60u64);
            let hit: f64 = r.gen();
            if u < cpu_share_fraction {
                let vx = pointer_chase_vertex(v);
                s.read(vx.curr + word);
                if hit < cpu_write_fraction {
                    s.write(vx.next + word);
                }
                s.compute(c / 2);
            } else {
                s.read(private_line(t, p) + word);
                s.write(private_line(t, (p + 1) % 64) + word);
                s.compute(c);
            }
        }
        streams.push(s);
    }
    for k in 0..pim {
        let thread = cpu + k as u32;
        let mut r = rng_for(spec.seed, 1000 + k);
        let mut s = Stream::new(thread);
        let mut mine: Vec<u64> = (k * nodes / pim..(k + 1) * nodes / pim).collect();
        for _ in 0..iterations {
            // Visit the partition in a fresh random order each iteration.
            for i in (1..mine.len()).rev() {
                let j = r.gen_range(0..=i);
                mine.swap(i, j);
            }
            s.compute(kernel_gap);
            s.push(EventKind::PimBegin(k as u32));
            for &u in &mine {
                let vu = pointer_chase_vertex(u);
                s.read(vu.curr);
                s.read(vu.edges);
                for &v in &adj[u as usize] {
                    s.read(pointer_chase_vertex(v).curr);
                }
                s.compute(4);
                s.write(vu.next);
            }
            s.push(EventKind::PimEnd);
        }
        streams.push(s);
    }
    let region_len = (nodes * VERTEX_LINES * LINE_BYTES).div_ceil(PAGE_BYTES) * PAGE_BYTES;
    assemble(vec![(REGION_BASE, region_len)], streams)
}

const TUPLE_BYTES: u64 = 2 * LINE_BYTES;

fn table_base(t: u64, tuples: u64) -> u64 {
    let bytes = (tuples * TUPLE_BYTES).div_ceil(PAGE_BYTES) * PAGE_BYTES;
    REGION_BASE + t * bytes
}

pub fn generate_htap(spec: &WorkloadSpec) -> Trace {
    let Generator::Htap { tables, tuples, txn_count, analytic_query_count, read_write_ratio, query_gap } = spec.generator else {
        return Trace::default();
    };
    let tables = tables.max(1);
    let tuples = tuples.max(1);
    let cpu = u64::from(spec.cpu_threads);
    let pim = u64::from(spec.pim_kernels);
    let write_prob = 1.0 / (1.0 + read_write_ratio);
    let tuple = |t: u64, j: u64| table_base(t, tuples) + j * TUPLE_BYTES;
    let results = table_base(tables, tuples);
    let region_len = results + pim.max(1) * PAGE_BYTES - REGION_BASE;

    let mut streams = Vec::new();
    for t in 0..cpu {
        let mut r = rng_for(spec.seed, 1 + t);
        let mut s = Stream::new(t as u32);
        let n = txn_count / cpu + u64::from(t < txn_count % cpu);
        for _ in 0..n {
            let tab = r.gen_range(0..tables);
            for _ in 0..2 {
                // Tuples are partitioned among threads, so no two threads
                // write the same word and the final state is timing-free.
                let j = (r.gen_range(0..tuples.div_ceil(cpu)) * cpu + t) % tuples;
                let field = r.gen_range(0..8u64) * WORD_BYTES;
                let line = tuple(tab, j) + r.gen_range(0..2u64) * LINE_BYTES;
                s.read(line + field);
                if r.gen::<f64>() < write_prob {
                    s.write(line + field);
                }
            }
            let c = r.gen_range(20..200u64);
            s.compute(c);
        }
        streams.push(s);
    }
    for k in 0..pim {
        let mut r = rng_for(spec.seed, 1000 + k);
        let mut s = Stream::new((cpu + k) as u32);
        let out = results + k * PAGE_BYTES;
        let mut q = k;
        while q < analytic_query_count {
            s.push(EventKind::PimBegin(k as u32));
            let a = r.gen_range(0..tables);
            if q % 2 == 0 {
                // Full scan of one field over every tuple.
                let field = r.gen_range(0..8u64) * WORD_BYTES;
                for j in 0..tuples {
                    s.read(tuple(a, j) + field);
                }
            } else {
                // Hash join: scan `a`, probe a hashed tuple of `b`.
                let b = r.gen_range(0..tables);
                for j in 0..tuples {
                    s.read(tuple(a, j));
                    let h = r.gen_range(0..tuples);
                    s.read(tuple(b, h) + LINE_BYTES);
                }
            }
            s.compute(tuples / 4);
            s.write(out + (q / pim.max(1) % 64) * WORD_BYTES);
            s.push(EventKind::PimEnd);
            s.compute(query_gap);
            q += pim;
        }
        streams.push(s);
    }
    assemble(vec![(REGION_BASE, region_len)], streams)
}

pub fn generate_random(spec: &WorkloadSpec) -> Trace {
    let Generator::Random { events, region_lines, write_fraction, max_kernel_len, syncs } = spec.generator else {
        return Trace::default();
    };
    let cpu = spec.cpu_threads;
    let pim = spec.pim_kernels;
    let threads = u64::from(cpu + pim).max(1);
    let per_thread = events / threads;
    let region_len = (region_lines * LINE_BYTES).div_ceil(PAGE_BYTES) * PAGE_BYTES + PAGE_BYTES;
    let lock = REGION_BASE + region_len - PAGE_BYTES;
    let region_word = |r: &mut ChaCha8Rng| REGION_BASE + r.gen_range(0..region_lines) * LINE_BYTES + r.gen_range(0..8u64) * WORD_BYTES;

    let mut streams = Vec::new();
    for t in 0..cpu {
        let mut r = rng_for(spec.seed, 1 + u64::from(t));
        let mut s = Stream::new(t);
        let mut n = 0;
        while n < per_thread {
            let x: f64 = r.gen();
            if syncs && x < 0.02 {
                let l = lock + r.gen_range(0..2u64) * WORD_BYTES;
                s.push(EventKind::Sync(SyncKind::Acquire, l));
                let a = region_word(&mut r);
                s.write(a);
                s.push(EventKind::Sync(SyncKind::Release, l));
                n += 3;
                continue;
            }
            let a = if x < 0.8 { region_word(&mut r) } else { private_line(t, r.gen_range(0..4)) };
            if r.gen::<f64>() < write_fraction {
                s.write(a);
            } else {
                s.read(a);
            }
            let c = r.gen_range(0..20u64);
            s.compute(c);
            n += 1;
        }
        streams.push(s);
    }
    for k in 0..pim {
        let mut r = rng_for(spec.seed, 1000 + u64::from(k));
        let mut s = Stream::new(cpu + k);
        let mut n = 0;
        while n < per_thread {
            let len = r.gen_range(1..=max_kernel_len);
            s.push(EventKind::PimBegin(k));
            for _ in 0..len {
                let x: f64 = r.gen();
                if syncs && x < 0.01 {
                    s.push(EventKind::Sync(SyncKind::Fence, lock));
                    continue;
                }
                let a = region_word(&mut r);
                if r.gen::<f64>() < write_fraction {
                    s.write(a);
                } else {
                    s.read(a);
                }
            }
            s.push(EventKind::PimEnd);
            let c = r.gen_range(0..50u64);
            s.compute(c);
            n += len + 2;
        }
        streams.push(s);
    }
    assemble(vec![(REGION_BASE, region_len)], streams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn chase(frac: f64, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            generator: Generator::PointerChase { nodes: 64, edges: 192, iterations: 2, cpu_share_fraction: frac, cpu_write_fraction: 1.0, cpu_ops: 0, kernel_gap: 100 },
            seed,
            cpu_threads: 2,
            pim_kernels: 2,
        }
    }

    fn htap() -> WorkloadSpec {
        WorkloadSpec {
            generator: Generator::Htap { tables: 4, tuples: 64, txn_count: 40, analytic_query_count: 4, read_write_ratio: 1.0, query_gap: 200 },
            seed: 3,
            cpu_threads: 2,
            pim_kernels: 2,
        }
    }

    #[test]
    fn generated_traces_validate() {
        for spec in [chase(0.3, 1), htap()] {
            let t = generate(&spec).unwrap();
            t.validate().unwrap();
            assert!(t.len() > 100);
        }
    }

    #[test]
    fn determinism() {
        assert_eq!(generate(&chase(0.5, 9)).unwrap().sha256_hex(), generate(&chase(0.5, 9)).unwrap().sha256_hex());
        assert_ne!(generate(&chase(0.5, 9)).unwrap().sha256_hex(), generate(&chase(0.5, 10)).unwrap().sha256_hex());
    }

    #[test]
    fn zero_share_keeps_cpu_out_of_region() {
        let t = generate(&chase(0.0, 4)).unwrap();
        let region = t.region();
        for e in &t.events {
            if e.thread < 2 {
                if let EventKind::Read(a) | EventKind::Write(a, _) = e.kind {
                    assert!(!region.contains(a));
                }
            }
        }
    }

    #[test]
    fn kernels_write_only_their_partition() {
        let t = generate(&chase(0.0, 5)).unwrap();
        for e in &t.events {
            if let (k @ 2.., EventKind::Write(a, _)) = (e.thread, e.kind) {
                let v = (a - REGION_BASE) / (VERTEX_LINES * LINE_BYTES);
                assert_eq!(v * 2 / 64, u64::from(k - 2));
                assert_eq!(a, pointer_chase_vertex(v).next);
            }
        }
    }

    #[test]
    fn htap_scan_and_txn_sizes() {
        let t = generate(&htap()).unwrap();
        let per = t.per_thread();
        // CPU transactions: at most 4 memory accesses between computes.
        let mut run = 0;
        for k in &per[&0] {
            match k {
                EventKind::Compute(_) => run = 0,
                _ => {
                    run += 1;
                    assert!(run <= 4);
                }
            }
        }
        // First PIM query is a scan over the whole 64-tuple table.
        let reads = per[&2].iter().take_while(|k| !matches!(k, EventKind::PimEnd)).filter(|k| matches!(k, EventKind::Read(_))).count();
        assert!(reads >= 64);
    }

    #[test]
    fn htap_words_have_one_writer() {
        let t = generate(&htap()).unwrap();
        let mut writers: BTreeMap<u64, BTreeSet<u32>> = BTreeMap::new();
        for e in &t.events {
            if let EventKind::Write(a, _) = e.kind {
                writers.entry(a).or_default().insert(e.thread);
            }
        }
        assert!(writers.len() > 10);
        assert!(writers.values().all(|w| w.len() == 1));
    }

    #[test]
    fn bad_specs_rejected() {
        let mut s = chase(0.5, 0);
        s.generator = Generator::PointerChase { nodes: 0, edges: 0, iterations: 1, cpu_share_fraction: 0.5, cpu_write_fraction: 1.0, cpu_ops: 0, kernel_gap: 100 };
        assert!(generate(&s).is_err());
        assert!(generate(&chase(1.5, 0)).is_err());
    }
}
