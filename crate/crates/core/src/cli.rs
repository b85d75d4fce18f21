//! Command-line front end.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::addressing::AddressMap;
use crate::config::{apply_entry, parse_config, parse_size, Entry, SchemeKind, SimConfig};
use crate::engine::{run, run_with, sweep, Axis, RunOptions, DEFAULT_MAX_CYCLES};
use crate::fabric::EventLog;
use crate::metrics::{
    isolation_audit, sweep_row, RunReport, Window, WindowPolicy, SWEEP_CSV_COLUMNS,
};
use crate::workload::{
    load_trace, synthetic_ssd_trace, BurstMix, Direction, WorkloadKind, WorkloadSpec,
};

#[derive(Debug, Parser)]
#[command(
    name = "smsim",
    version,
    about = "Cycle-level model of a banked shared-SRAM interconnect"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one workload and write its report.
    Run(RunArgs),
    /// Run one simulation per value of a parameter and write a summary.
    Sweep(SweepArgs),
    /// Show where an address lives.
    Map(MapArgs),
    /// Check that each master's metrics are the same alone and together.
    AuditIsolation(AuditArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Identity,
    XorFold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Read,
    Write,
    Both,
}

/// Configuration and workload selection shared by the simulating commands.
#[derive(Debug, Args)]
pub struct SimArgs {
    /// Config file (`key = value` lines; `workload.*` keys set the workload).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, or a workload key with a `workload.` prefix.
    /// Applied last; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Interleaving scheme.
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Commands a port may have in flight per channel.
    #[arg(long)]
    pub outstanding: Option<usize>,
    /// Traffic pattern: uniform, bulk, feature, roi, feature-roi or trace.
    #[arg(long)]
    pub workload: Option<String>,
    /// Activate masters 0..N.
    #[arg(long, conflicts_with = "active")]
    pub masters: Option<usize>,
    /// Comma-separated list of active masters.
    #[arg(long)]
    pub active: Option<String>,
    /// Commands per port for uniform traffic, split between reads and writes.
    #[arg(long)]
    pub transactions: Option<u64>,
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    /// Probability of offering a command on a cycle, in (0, 1].
    #[arg(long)]
    pub rate: Option<f64>,
    /// Burst lengths and weights, e.g. `16` or `4:0.5,8:0.5`.
    #[arg(long)]
    pub burst_mix: Option<String>,
    /// Bytes per channel for bulk, feature and roi traffic (`4KiB` etc).
    #[arg(long)]
    pub payload: Option<String>,
    /// Trace CSV to replay (`master,op,address,beats[,min_cycle]`).
    #[arg(long, conflicts_with = "synthetic_trace")]
    pub trace: Option<PathBuf>,
    /// Replay a generated SSD-like trace with this many transfers per master.
    #[arg(long)]
    pub synthetic_trace: Option<usize>,
    /// Require disjoint master regions.
    #[arg(long)]
    pub isolation: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop and flag the report as truncated after this many cycles.
    #[arg(long, default_value_t = DEFAULT_MAX_CYCLES)]
    pub max_cycles: u64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    /// Report path; standard output if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Measurement window `START..END` instead of the per-port default.
    #[arg(long)]
    pub window: Option<String>,
    /// Write a line per beat movement to this file.
    #[arg(long)]
    pub event_log: Option<PathBuf>,
    /// Write the final memory image (raw bytes) to this file.
    #[arg(long)]
    pub dump_memory: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    /// `masters=1..16`, `outstanding=1,16`, `burst=1,4,8,16` or `rate=0.5,1`.
    #[arg(long)]
    pub axis: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    /// Byte address, decimal or `0x` hex.
    pub address: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Also list the beats of a burst of this many beats starting there.
    #[arg(long)]
    pub burst: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    /// Audit summary path; standard output if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// or to standard output.
pub fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    let Some(path) = path else {
        io::stdout().write_all(bytes)?;
        return Ok(());
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<(SimConfig, Vec<Entry>)> {
    let Some(path) = path else {
        return Ok((SimConfig::default(), Vec::new()));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc = parse_config(&text).with_context(|| format!("in {}", path.display()))?;
    Ok((doc.sim, doc.workload))
}

fn scheme_kind(s: SchemeArg) -> SchemeKind {
    match s {
        SchemeArg::Identity => SchemeKind::Identity,
        SchemeArg::XorFold => SchemeKind::XorFold,
    }
}

/// Resolves flags into validated simulation inputs.
pub fn resolve(args: &SimArgs) -> Result<(SimConfig, WorkloadSpec)> {
    let (mut cfg, entries) = load_config(args.config.as_deref())?;
    let mut wl = WorkloadSpec::default();
    wl.apply_entries(&entries)?;

    let mut overrides = Vec::new();
    for (i, kv) in args.set.iter().enumerate() {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        };
        overrides.push(Entry {
            line: i + 1,
            key: k.trim().to_string(),
            value: v.trim().to_string(),
        });
    }

    let trace_given = args.trace.is_some() || args.synthetic_trace.is_some();
    if let Some(k) = &args.workload {
        let kind = WorkloadKind::parse(k).with_context(|| format!("unknown workload `{k}`"))?;
        if trace_given && kind != WorkloadKind::Trace {
            bail!("--trace/--synthetic-trace conflict with --workload {k}");
        }
        wl.kind = kind;
    }
    if trace_given {
        wl.kind = WorkloadKind::Trace;
    }

    if let Some(s) = args.scheme {
        cfg.scheme.kind = scheme_kind(s);
    }
    if let Some(o) = args.outstanding {
        cfg.timing.outstanding_per_port = o;
    }
    for e in overrides.iter().filter(|e| !e.key.starts_with("workload.")) {
        apply_entry(&mut cfg, e).context("in --set")?;
    }
    cfg.validate()?;

    if let Some(n) = args.masters {
        wl.active = (0..n).collect();
    }
    if let Some(a) = &args.active {
        wl.set("active", a).map_err(anyhow::Error::msg)?;
    }
    if let Some(t) = args.transactions {
        wl.transactions = t;
    }
    if let Some(d) = args.direction {
        wl.direction = match d {
            DirectionArg::Read => Direction::Read,
            DirectionArg::Write => Direction::Write,
            DirectionArg::Both => Direction::Both,
        };
    }
    if let Some(r) = args.rate {
        wl.rate = r;
    }
    if let Some(m) = &args.burst_mix {
        wl.burst_mix = BurstMix::parse(m).map_err(anyhow::Error::msg)?;
    }
    if let Some(p) = &args.payload {
        wl.payload_bytes = parse_size(p).map_err(anyhow::Error::msg)?;
    }
    if args.isolation {
        wl.isolation = true;
    }
    if let Some(s) = args.seed {
        wl.seed = s;
    }
    wl.apply_entries(
        &overrides
            .iter()
            .filter(|e| e.key.starts_with("workload."))
            .cloned()
            .collect::<Vec<_>>(),
    )
    .context("in --set")?;

    if let Some(path) = &args.trace {
        wl.trace_path = Some(path.display().to_string());
    }
    if wl.kind == WorkloadKind::Trace {
        let trace = match (&args.synthetic_trace, &wl.trace_path) {
            (Some(n), _) => {
                wl.trace_path = None;
                synthetic_ssd_trace(wl.seed, &wl.active, *n, cfg.topology.beat_bytes)
            }
            (None, Some(p)) => load_trace(Path::new(p), &cfg, wl.isolation)?,
            (None, None) => bail!("trace workload needs --trace or --synthetic-trace"),
        };
        if args.synthetic_trace.is_none() {
            wl.active = trace.by_master().keys().copied().collect();
        }
        wl.trace = Some(Arc::new(trace));
    }
    wl.validate(&cfg)?;
    Ok((cfg, wl))
}

fn parse_window(text: &str) -> Result<Window> {
    let (a, b) = text
        .split_once("..")
        .with_context(|| format!("--window expects START..END, got `{text}`"))?;
    let w = Window::new(
        a.trim().parse().context("window start")?,
        b.trim().parse().context("window end")?,
    );
    if w.is_empty() {
        bail!("--window {text} is empty");
    }
    Ok(w)
}

fn render(report: &RunReport, format: Format) -> Result<Vec<u8>> {
    Ok(match format {
        Format::Json => {
            let mut s = report.to_json();
            s.push('\n');
            s.into_bytes()
        }
        Format::Csv => {
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            buf
        }
    })
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let (cfg, wl) = resolve(&a.sim)?;
    let window = match &a.window {
        Some(w) => WindowPolicy::Fixed(parse_window(w)?),
        None => WindowPolicy::Default,
    };
    let event_log = match &a.event_log {
        Some(p) => {
            let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Some(EventLog::new(Box::new(io::BufWriter::new(f))))
        }
        None => None,
    };
    let out = run_with(
        &cfg,
        &wl,
        RunOptions {
            max_cycles: a.sim.max_cycles,
            window,
            capture_reads: false,
            capture_image: a.dump_memory.is_some(),
            event_log,
        },
    )?;
    if let Some(path) = &a.dump_memory {
        let image = out.image.as_ref().expect("image requested");
        let map = AddressMap::new(&cfg);
        let bb = cfg.topology.beat_bytes as usize;
        let mut bytes = vec![0u8; map.total_bytes() as usize];
        for (&addr, data) in image {
            bytes[addr as usize..addr as usize + bb].copy_from_slice(data);
        }
        write_output(Some(path), &bytes)?;
    }
    write_output(a.out.as_deref(), &render(&out.report, a.format)?)?;
    if out.report.truncated {
        eprintln!(
            "warning: stopped at --max-cycles {} before draining",
            a.sim.max_cycles
        );
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let axis = Axis::parse(&a.axis)?;
    let (cfg, wl) = resolve(&a.sim)?;
    let points = sweep(&cfg, &wl, &axis, a.sim.max_cycles);
    let bytes = match a.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(SWEEP_CSV_COLUMNS)?;
            for p in &points {
                w.write_record(sweep_row(p.axis, &p.value, p.seed, &p.result))?;
            }
            w.into_inner()?
        }
        Format::Json => {
            let items: Vec<serde_json::Value> = points
                .iter()
                .map(|p| {
                    serde_json::json!({
                        "axis": p.axis,
                        "value": p.value,
                        "seed": p.seed,
                        "report": p.result.as_ref().ok(),
                        "error": p.result.as_ref().err(),
                    })
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&items)?;
            s.push('\n');
            s.into_bytes()
        }
    };
    write_output(a.out.as_deref(), &bytes)?;
    let failed = points.iter().filter(|p| p.result.is_err()).count();
    if failed > 0 {
        bail!("{failed} of {} sweep points failed", points.len());
    }
    Ok(())
}

fn cmd_map(a: &MapArgs) -> Result<()> {
    let (mut cfg, _) = load_config(a.config.as_deref())?;
    if let Some(s) = a.scheme {
        cfg.scheme.kind = scheme_kind(s);
    }
    cfg.validate()?;
    let addr = parse_size(&a.address).map_err(anyhow::Error::msg)?;
    let map = AddressMap::new(&cfg);
    let loc = map.decompose(addr)?;
    let mut text = format!("{addr:#x}: {loc}\n");
    for (name, f) in map.geometry().fields() {
        text.push_str(&format!("  {name:<8} {f} = {}\n", f.extract(addr)));
    }
    if let Some(beats) = a.burst {
        for b in map.expand_burst(addr, beats)? {
            text.push_str(&format!(
                "  beat {:>2} {:#x}: {}\n",
                b.beat_index, b.address, b.location
            ));
        }
    }
    write_output(None, text.as_bytes())
}

fn cmd_audit(a: &AuditArgs) -> Result<bool> {
    let (cfg, wl) = resolve(&a.sim)?;
    let max = a.sim.max_cycles;
    let joint = run(&cfg, &wl, max)?;
    let mut solos = Vec::new();
    for &m in &wl.active {
        let mut solo = wl.clone().with_active(vec![m]);
        if let Some(tr) = &wl.trace {
            let records = tr
                .records
                .iter()
                .filter(|r| r.master == m)
                .copied()
                .collect();
            solo.trace = Some(Arc::new(crate::workload::Trace { records }));
        }
        solos.push(run(&cfg, &solo, max)?);
    }
    let violations = isolation_audit(&joint, &solos)?;
    let mut text = String::new();
    if violations.is_empty() {
        text.push_str(&format!(
            "PASS: {} ports identical alone and together\n",
            wl.active.len()
        ));
    } else {
        for v in &violations {
            text.push_str(&format!("VIOLATION {v}\n"));
        }
    }
    write_output(a.out.as_deref(), text.as_bytes())?;
    Ok(violations.is_empty())
}

/// Runs a parsed command line. Returns the process exit code.
pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Run(a) => cmd_run(a).map(|_| 0),
        Command::Sweep(a) => cmd_sweep(a).map(|_| 0),
        Command::Map(a) => cmd_map(a).map(|_| 0),
        Command::AuditIsolation(a) => cmd_audit(a).map(|ok| if ok { 0 } else { 1 }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("smsim").chain(args.iter().copied()))
    }

    fn sim_args(args: &[&str]) -> SimArgs {
        match parse(&[&["run"], args].concat()).unwrap().command {
            Command::Run(r) => r.sim,
            _ => unreachable!(),
        }
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flag_is_rejected() {
        assert!(parse(&["run", "--bogus"]).is_err());
        assert!(parse(&["frobnicate"]).is_err());
    }

    #[test]
    fn conflicting_flags_are_rejected() {
        assert!(parse(&["run", "--masters", "2", "--active", "0,1"]).is_err());
        assert!(parse(&["run", "--trace", "t.csv", "--synthetic-trace", "3"]).is_err());
        let a = sim_args(&["--workload", "uniform", "--synthetic-trace", "2"]);
        assert!(resolve(&a).is_err());
    }

    #[test]
    fn flags_reach_the_inputs() {
        let a = sim_args(&[
            "--workload",
            "bulk",
            "--masters",
            "3",
            "--payload",
            "8KiB",
            "--direction",
            "read",
            "--seed",
            "7",
            "--outstanding",
            "16",
            "--scheme",
            "xor-fold",
            "--set",
            "workload.rate=0.5",
            "--set",
            "split_buffer_beats=128",
        ]);
        let (cfg, wl) = resolve(&a).unwrap();
        assert_eq!(wl.kind, WorkloadKind::Bulk);
        assert_eq!(wl.active, vec![0, 1, 2]);
        assert_eq!(wl.payload_bytes, 8192);
        assert_eq!(wl.direction, Direction::Read);
        assert_eq!(wl.seed, 7);
        assert_eq!(wl.rate, 0.5);
        assert_eq!(cfg.timing.outstanding_per_port, 16);
        assert_eq!(cfg.timing.split_buffer_beats, 128);
        assert_eq!(cfg.scheme.kind, SchemeKind::XorFold);
    }

    #[test]
    fn bad_overrides_fail() {
        assert!(resolve(&sim_args(&["--set", "nonsense"])).is_err());
        assert!(resolve(&sim_args(&["--set", "masters=3"])).is_err());
        assert!(resolve(&sim_args(&["--set", "workload.colour=red"])).is_err());
        assert!(resolve(&sim_args(&["--rate", "0"])).is_err());
    }

    #[test]
    fn synthetic_trace_resolves() {
        let (_, wl) = resolve(&sim_args(&["--synthetic-trace", "2", "--masters", "2"])).unwrap();
        assert_eq!(wl.kind, WorkloadKind::Trace);
        assert!(wl.trace.as_ref().unwrap().records.len() >= 4);
    }

    #[test]
    fn window_parsing() {
        assert_eq!(parse_window("10..20").unwrap(), Window::new(10, 20));
        assert!(parse_window("20..10").is_err());
        assert!(parse_window("20").is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.txt");
        write_output(Some(&p), b"one").unwrap();
        write_output(Some(&p), b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
