//! Command-line front end: single runs, protocol comparisons, parameter
//! sweeps, trace generation, false-positive sweeps and report comparison.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::config::SimConfig;
use crate::engine::{build_report, cpu_only_reference, run};
use crate::error::{Error, Result};
use crate::metrics::{compare, Comparison, Report};
use crate::protocol::ProtocolKind;
use crate::signatures::{measure_fp, FpMeasurement, SignatureParams};
use crate::workload::{generate, read_trace_file, write_trace_file, Trace, WorkloadSpec};

#[derive(Parser, Debug)]
#[command(name = "lazypim", version, about = "Trace-driven simulator for speculative processor/PIM coherence")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a trace under one or more protocols and sweep points.
    Run(RunArgs),
    /// Generate a synthetic trace.
    Gen(GenArgs),
    /// Measure signature false-positive rates against the analytic model.
    FpSweep(FpArgs),
    /// Ratio table between two report files.
    Compare(CompareArgs),
    /// Parse and check a trace file.
    ValidateTrace(ValidateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trace file; overrides the config's `trace` and `workload`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Comma-separated protocol list.
    #[arg(long)]
    pub protocol: Option<String>,
    /// Overrides the workload seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key.path=value` config override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub signature_bits: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub address_capacity: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    pub instruction_cap: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    pub dbi_interval: Vec<u64>,
    /// Run full-kernel commits instead of partial commits.
    #[arg(long)]
    pub full_kernel: bool,
    /// Run the structural validators after every event.
    #[arg(long)]
    pub validate: bool,
    /// Include hex signatures of conflicting commits in the event log.
    #[arg(long)]
    pub dump_signatures: bool,
    /// Write protocol events (JSON lines) here.
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub max_runs: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// TOML file holding a workload spec, or a config with a `[workload]` table.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub binary: bool,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FpArgs {
    #[arg(long, value_delimiter = ',', default_value = "2048")]
    pub bits: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub segments: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,50,100,250")]
    pub inserts: Vec<u64>,
    #[arg(long, default_value_t = 100_000)]
    pub queries: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    pub candidate: PathBuf,
    pub baseline: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    pub trace: PathBuf,
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Param(_) | Error::Parse { .. } | Error::Trace(_) => 2,
                _ => 1,
            }
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Gen(a) => cmd_gen(&a),
        Command::FpSweep(a) => cmd_fp_sweep(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::ValidateTrace(a) => {
            let t = read_trace_file(&a.trace)?;
            t.validate()?;
            let threads = t.per_thread().len();
            println!("ok: {} events, {} threads, {} region pages, sha256 {}", t.len(), threads, t.region().page_count(), t.sha256_hex());
            Ok(())
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| Error::io(Path::new("<stdout>"), e)),
    }
}

fn render(reports: &[Report], format: Format) -> String {
    match format {
        Format::Json => Report::to_json(reports),
        Format::Csv => Report::to_csv(reports),
        Format::Table => Report::to_table(reports),
    }
}

/// One sweep point: a label and the config overrides that define it.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub label: String,
    pub config: SimConfig,
}

/// Cartesian product of protocols and sweep axes. Empty axes keep the
/// configured value.
pub fn sweep_points(base: &SimConfig, a: &RunArgs) -> Result<Vec<SweepPoint>> {
    let protocols = match &a.protocol {
        Some(p) => ProtocolKind::parse_list(p)?,
        None => vec![base.protocol],
    };
    let axis = |v: &[u64]| if v.is_empty() { vec![None] } else { v.iter().map(|x| Some(*x)).collect() };
    let bits = axis(&a.signature_bits.iter().map(|b| *b as u64).collect::<Vec<_>>());
    let caps = axis(&a.address_capacity.iter().map(|c| u64::from(*c)).collect::<Vec<_>>());
    let icaps = axis(&a.instruction_cap);
    let dbis = axis(&a.dbi_interval);
    let total = protocols.len() * bits.len() * caps.len() * icaps.len() * dbis.len();
    if total > a.max_runs {
        return Err(Error::config(format!("sweep has {total} points, above --max-runs {}", a.max_runs)));
    }
    let mut points = Vec::with_capacity(total);
    for &p in &protocols {
        for &b in &bits {
            for &c in &caps {
                for &i in &icaps {
                    for &d in &dbis {
                        let mut cfg = SimConfig { protocol: p, ..base.clone() };
                        let mut label = p.name().to_string();
                        if let Some(b) = b {
                            cfg.signature.bits = b as usize;
                            label.push_str(&format!(" bits={b}"));
                        }
                        if let Some(c) = c {
                            cfg.signature.capacity = c as u32;
                            label.push_str(&format!(" cap={c}"));
                        }
                        if let Some(i) = i {
                            cfg.partial.instruction_cap = i;
                            label.push_str(&format!(" icap={i}"));
                        }
                        if let Some(d) = d {
                            cfg.dbi.interval_cycles = d;
                            label.push_str(&format!(" dbi={d}"));
                        }
                        cfg.validate()?;
                        points.push(SweepPoint { label, config: cfg });
                    }
                }
            }
        }
    }
    Ok(points)
}

/// The trace named by the config (relative to `config_dir`) or generated
/// from its workload section.
pub fn load_trace(cfg: &SimConfig, config_dir: Option<&Path>, explicit: Option<&Path>) -> Result<Trace> {
    if let Some(p) = explicit {
        return read_trace_file(p);
    }
    if let Some(t) = &cfg.trace {
        let p = match config_dir {
            Some(d) => d.join(t),
            None => PathBuf::from(t),
        };
        return read_trace_file(&p);
    }
    match &cfg.workload {
        Some(w) => generate(w),
        None => Err(Error::config("no trace: pass --trace or give the config a `trace` or `[workload]`")),
    }
}

/// Worker pool sized by `SIM_THREADS` (default: all cores).
fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SIM_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::config(format!("SIM_THREADS=`{v}` is not a number")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::config(e.to_string()))
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let mut base = SimConfig::load_with_overrides(a.config.as_deref(), &a.set)?;
    if let (Some(seed), Some(w)) = (a.seed, base.workload.as_mut()) {
        w.seed = seed;
    }
    if a.full_kernel {
        base.partial.enabled = false;
    }
    base.debug.validate |= a.validate;
    base.debug.dump_signatures |= a.dump_signatures;
    let dir = a.config.as_deref().and_then(Path::parent);
    let trace = load_trace(&base, dir, a.trace.as_deref())?;
    trace.validate()?;
    let points = sweep_points(&base, a)?;
    let reports = run_points(&points, &trace, a.events.is_some())?;
    if let Some(p) = &a.events {
        let mut text = String::new();
        for (label, events) in &reports.1 {
            for e in events {
                let mut v = serde_json::to_value(e)?;
                v["label"] = serde_json::Value::String(label.clone());
                text.push_str(&v.to_string());
                text.push('\n');
            }
        }
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    let mut reports = reports.0;
    if let Some(seed) = a.seed {
        for r in &mut reports {
            r.seed = seed;
        }
    }
    emit(a.out.as_deref(), &render(&reports, a.format))?;
    if reports.len() > 1 && a.format != Format::Table {
        eprint!("{}", Report::to_table(&reports));
    }
    Ok(())
}

type Runs = (Vec<Report>, Vec<(String, Vec<crate::protocol::ProtocolEvent>)>);

/// Run every point in parallel; reports keep the point order.
pub fn run_points(points: &[SweepPoint], trace: &Trace, keep_events: bool) -> Result<Runs> {
    let Some(first) = points.first() else {
        return Ok((Vec::new(), Vec::new()));
    };
    let pool = pool()?;
    pool.install(|| {
        let reference = cpu_only_reference(&first.config, trace)?;
        let results: Vec<Result<(Report, Vec<_>)>> = points
            .par_iter()
            .map(|p| {
                let out = run(&p.config, trace)?;
                let mut r = build_report(&p.label, &p.config, trace, out.metrics)?;
                r.normalize_against(&reference);
                Ok((r, if keep_events { out.events } else { Vec::new() }))
            })
            .collect();
        let mut reports = Vec::new();
        let mut events = Vec::new();
        for r in results {
            let (rep, ev) = r?;
            events.push((rep.label.clone(), ev));
            reports.push(rep);
        }
        Ok((reports, events))
    })
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).map_err(|e| Error::io(&a.spec, e))?;
    let mut spec: WorkloadSpec = match toml::from_str::<WorkloadSpec>(&text) {
        Ok(s) => s,
        Err(_) => SimConfig::from_toml_str(&text)?
            .workload
            .ok_or_else(|| Error::config(format!("{}: no workload spec", a.spec.display())))?,
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let trace = generate(&spec)?;
    trace.validate()?;
    write_trace_file(&a.out, &trace, a.binary)?;
    eprintln!("wrote {} events to {}", trace.len(), a.out.display());
    Ok(())
}

/// CSV rows for every (bits, inserts) pair.
pub fn fp_sweep(a: &FpArgs) -> Result<Vec<FpMeasurement>> {
    let pool = pool()?;
    let jobs: Vec<(usize, u64)> = a.bits.iter().flat_map(|b| a.inserts.iter().map(move |n| (*b, *n))).collect();
    pool.install(|| {
        jobs.par_iter()
            .map(|&(bits, n)| {
                let params = SignatureParams { bits, segments: a.segments, ..SignatureParams::default() };
                measure_fp(params, n, a.queries, a.trials, a.seed)
            })
            .collect()
    })
}

pub fn fp_csv(rows: &[FpMeasurement]) -> String {
    let mut out = String::from(
        "bits,segments,inserts,queries,membership_rate,analytic_membership,pair_trials,intersection_rate,analytic_intersection\n",
    );
    for m in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{},{:.6},{:.6}\n",
            m.bits,
            m.segments,
            m.inserts,
            m.queries,
            m.membership_rate,
            m.analytic_membership,
            m.pair_trials,
            m.intersection_rate,
            m.analytic_intersection
        ));
    }
    out
}

fn cmd_fp_sweep(a: &FpArgs) -> Result<()> {
    emit(a.out.as_deref(), &fp_csv(&fp_sweep(a)?))
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let read = |p: &Path| -> Result<Vec<Report>> {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Report::from_json(&text)
    };
    let rows = compare(&read(&a.candidate)?, &read(&a.baseline)?);
    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&rows)? + "\n",
        Format::Csv => Comparison::to_csv(&rows),
        Format::Table => Comparison::to_table(&rows),
    };
    emit(a.out.as_deref(), &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(extra: &[&str]) -> RunArgs {
        let mut v = vec!["lazypim", "run"];
        v.extend_from_slice(extra);
        match Cli::try_parse_from(v).unwrap().command {
            Command::Run(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn sweep_is_a_cartesian_product() {
        let a = args(&["--protocol", "lazypim,fg", "--signature-bits", "2048,8192", "--instruction-cap", "100,1000"]);
        let pts = sweep_points(&SimConfig::default(), &a).unwrap();
        assert_eq!(pts.len(), 8);
        assert_eq!(pts[0].config.signature.bits, 2048);
        assert_eq!(pts[7].config.protocol, ProtocolKind::FineGrained);
        assert!(pts[7].label.contains("bits=8192"));
    }

    #[test]
    fn sweep_cap_enforced() {
        let a = args(&["--signature-bits", "256,512,1024", "--max-runs", "2"]);
        assert!(matches!(sweep_points(&SimConfig::default(), &a), Err(Error::Config(_))));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with_args(["lazypim", "run", "--protocol", "mesi"]), 2);
        assert_eq!(main_with_args(["lazypim", "frobnicate"]), 2);
    }
}
