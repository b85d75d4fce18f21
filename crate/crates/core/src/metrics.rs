//! Run statistics: the raw per-port event record kept while a run steps,
//! the immutable reports derived from it, and the isolation audit.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SimConfig;
use crate::protocol::{CompletedCommand, Op};
use crate::workload::WorkloadSpec;

pub const HISTOGRAM_BUCKETS: usize = 32;

/// Bucket of a latency in the log-spaced histogram. Bucket `i` covers
/// `[2^(i/2), 2^((i+1)/2))` cycles; the last bucket also takes everything
/// above 2^15.5 and the first everything below sqrt(2).
pub fn bucket_index(cycles: u64) -> usize {
    if cycles <= 1 {
        return 0;
    }
    let k = 63 - cycles.leading_zeros() as u64;
    let sq = cycles as u128 * cycles as u128;
    let half = u64::from(sq >= 1u128 << (2 * k + 1));
    ((2 * k + half) as usize).min(HISTOGRAM_BUCKETS - 1)
}

/// Lower edge of histogram bucket `i`, in cycles.
pub fn bucket_floor(i: usize) -> f64 {
    2f64.powf(i as f64 / 2.0)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("run did not drain: {0}")]
    NotDrained(String),
    #[error("port {port}: {reason}")]
    Inconsistent { port: usize, reason: String },
    #[error("window [{start}, {end}) is empty")]
    EmptyWindow { start: u64, end: u64 },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuditError {
    #[error("joint and solo runs use different {0}")]
    Mismatch(&'static str),
    #[error("master {0} appears in more than one solo run")]
    DuplicateMaster(usize),
    #[error("master {0} is active in a solo run but not in the joint run")]
    MissingMaster(usize),
}

/// Measurement interval `[start, end)` in fabric cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: u64,
    pub end: u64,
}

impl Window {
    pub fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, c: u64) -> bool {
        c >= self.start && c < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Sample {
    op: Op,
    beats: u64,
    issue: u64,
    first: Option<u64>,
    complete: Option<u64>,
}

/// Everything one port did during a run.
#[derive(Debug, Clone, Default)]
pub struct PortRecord {
    /// Indexed by command id, which ports assign sequentially.
    commands: Vec<Sample>,
    /// Cycle each read beat reached the port, and its command id.
    read_returns: Vec<(u64, u64)>,
    /// Cycle each write beat left the port.
    write_beats: Vec<u64>,
    last_issue: [Option<u64>; 2],
}

impl PortRecord {
    fn data_span(&self) -> Option<Window> {
        let first = [
            self.read_returns.first().map(|r| r.0),
            self.write_beats.first().copied(),
        ];
        let last = [
            self.read_returns.last().map(|r| r.0),
            self.write_beats.last().copied(),
        ];
        let s = first.into_iter().flatten().min()?;
        let e = last.into_iter().flatten().max()?;
        Some(Window::new(s, e + 1))
    }

    fn is_idle(&self) -> bool {
        self.commands.is_empty()
    }
}

/// Single-writer event sink filled by the engine while it steps.
#[derive(Debug, Clone, Default)]
pub struct Recorder {
    ports: Vec<PortRecord>,
    pub bank_conflicts: u64,
    pub peak_split_occupancy: usize,
    pub total_cycles: u64,
    pub truncated: bool,
    pub drained: bool,
    pub beats_injected: u64,
    pub beats_retired: u64,
}

impl Recorder {
    pub fn new(ports: usize) -> Self {
        Self {
            ports: vec![PortRecord::default(); ports],
            ..Self::default()
        }
    }

    pub fn port(&self, port: usize) -> &PortRecord {
        &self.ports[port]
    }

    pub fn issue(&mut self, port: usize, cmd_id: u64, op: Op, beats: u64, cycle: u64) {
        let p = &mut self.ports[port];
        debug_assert_eq!(cmd_id as usize, p.commands.len());
        p.commands.push(Sample {
            op,
            beats,
            issue: cycle,
            first: None,
            complete: None,
        });
        p.last_issue[op.index()] = Some(cycle);
    }

    pub fn write_beat(&mut self, port: usize, cycle: u64) {
        self.ports[port].write_beats.push(cycle);
    }

    pub fn read_return(&mut self, port: usize, cmd_id: u64, cycle: u64) {
        self.ports[port].read_returns.push((cycle, cmd_id));
    }

    pub fn complete(&mut self, port: usize, done: &CompletedCommand) {
        let s = &mut self.ports[port].commands[done.command.cmd_id as usize];
        s.first = done.first_return_cycle;
        s.complete = Some(done.complete_cycle);
    }

    /// Default measurement window of one port: skip warm-up (twice the
    /// zero-load latency) and stop at the port's last command issue, so the
    /// drain tail is excluded. Ports that never reach a steady state fall
    /// back to the span of their data transfers.
    pub fn default_window(&self, port: usize, cfg: &SimConfig) -> Window {
        let p = &self.ports[port];
        let start = 2 * cfg.timing.zero_load_read_latency();
        let end = p.last_issue.iter().flatten().copied().min();
        match end {
            Some(e) if e > start => Window::new(start, e),
            _ => p.data_span().unwrap_or(Window::new(0, self.total_cycles)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LatencyStats {
    pub count: u64,
    pub min: Option<u64>,
    pub max: Option<u64>,
    pub avg: Option<f64>,
    pub std_dev: Option<f64>,
}

impl LatencyStats {
    pub fn from_values(values: &[u64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let sum: u128 = values.iter().map(|&v| v as u128).sum();
        let avg = sum as f64 / n;
        let var = values
            .iter()
            .map(|&v| {
                let d = v as f64 - avg;
                d * d
            })
            .sum::<f64>()
            / n;
        Self {
            count: values.len() as u64,
            min: values.iter().copied().min(),
            max: values.iter().copied().max(),
            avg: Some(avg),
            std_dev: Some(var.sqrt()),
        }
    }
}

fn histogram(values: &[u64]) -> Vec<u64> {
    let mut h = vec![0; HISTOGRAM_BUCKETS];
    for &v in values {
        h[bucket_index(v)] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortReport {
    pub port: usize,
    /// False for ports that issued no commands.
    pub active: bool,
    pub window: Window,
    /// Read-return beats per cycle inside the window.
    pub read_throughput: f64,
    /// Write-data beats per cycle inside the window.
    pub write_throughput: f64,
    pub read_beats_in_window: u64,
    pub write_beats_in_window: u64,
    pub completed_reads: u64,
    pub completed_writes: u64,
    pub read_return_beats: u64,
    pub write_data_beats: u64,
    /// Issue to last read beat, over reads issued inside the window.
    pub read_latency: LatencyStats,
    /// Issue to first read beat, same population.
    pub read_first_beat_latency: LatencyStats,
    /// Issue to write acknowledgement.
    pub write_latency: LatencyStats,
    /// Mean number of requested-but-unreturned read beats over the window.
    pub avg_read_inflight_beats: f64,
    pub read_latency_histogram: Vec<u64>,
    pub write_latency_histogram: Vec<u64>,
}

impl PortReport {
    /// Relative gap between the measured read occupancy and the product of
    /// read throughput and mean read latency. `None` when there is no read
    /// traffic to compare.
    pub fn littles_law_error(&self) -> Option<f64> {
        let w = self.read_latency.avg?;
        if self.avg_read_inflight_beats <= 0.0 {
            return None;
        }
        let predicted = self.read_throughput * w;
        Some((self.avg_read_inflight_beats - predicted).abs() / self.avg_read_inflight_beats)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ports: Vec<PortReport>,
    /// Memory ticks on which a sub-bank had more than one master ready.
    pub bank_conflicts: u64,
    pub peak_split_occupancy: usize,
    pub total_cycles: u64,
    pub truncated: bool,
    pub drained: bool,
    pub beats_injected: u64,
    pub beats_retired: u64,
    pub seed: u64,
    pub config: SimConfig,
    pub workload: WorkloadSpec,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn active_ports(&self) -> impl Iterator<Item = &PortReport> {
        self.ports.iter().filter(|p| p.active)
    }

    fn mean_over_active(&self, f: impl Fn(&PortReport) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.active_ports().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    fn min_over_active(&self, f: impl Fn(&PortReport) -> Option<f64>) -> Option<f64> {
        self.active_ports().filter_map(f).reduce(f64::min)
    }

    /// Channels with traffic only.
    pub fn mean_read_throughput(&self) -> Option<f64> {
        self.mean_over_active(|p| (p.read_return_beats > 0).then_some(p.read_throughput))
    }

    pub fn mean_write_throughput(&self) -> Option<f64> {
        self.mean_over_active(|p| (p.write_data_beats > 0).then_some(p.write_throughput))
    }

    pub fn min_read_throughput(&self) -> Option<f64> {
        self.min_over_active(|p| (p.read_return_beats > 0).then_some(p.read_throughput))
    }

    pub fn min_write_throughput(&self) -> Option<f64> {
        self.min_over_active(|p| (p.write_data_beats > 0).then_some(p.write_throughput))
    }

    pub fn mean_read_latency(&self) -> Option<f64> {
        self.mean_over_active(|p| p.read_latency.avg)
    }

    pub fn mean_read_first_beat_latency(&self) -> Option<f64> {
        self.mean_over_active(|p| p.read_first_beat_latency.avg)
    }

    pub fn mean_write_latency(&self) -> Option<f64> {
        self.mean_over_active(|p| p.write_latency.avg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// One row per port, columns in `PORT_CSV_COLUMNS` order.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(PORT_CSV_COLUMNS)?;
        for p in &self.ports {
            w.write_record(port_row(p))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const PORT_CSV_COLUMNS: [&str; 19] = [
    "port",
    "active",
    "window_start",
    "window_end",
    "read_throughput",
    "write_throughput",
    "completed_reads",
    "completed_writes",
    "read_return_beats",
    "write_data_beats",
    "avg_read_latency",
    "min_read_latency",
    "max_read_latency",
    "std_read_latency",
    "avg_read_first_beat_latency",
    "avg_write_latency",
    "min_write_latency",
    "max_write_latency",
    "avg_read_inflight_beats",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn port_row(p: &PortReport) -> Vec<String> {
    vec![
        p.port.to_string(),
        p.active.to_string(),
        p.window.start.to_string(),
        p.window.end.to_string(),
        p.read_throughput.to_string(),
        p.write_throughput.to_string(),
        p.completed_reads.to_string(),
        p.completed_writes.to_string(),
        p.read_return_beats.to_string(),
        p.write_data_beats.to_string(),
        opt(p.read_latency.avg),
        opt(p.read_latency.min),
        opt(p.read_latency.max),
        opt(p.read_latency.std_dev),
        opt(p.read_first_beat_latency.avg),
        opt(p.write_latency.avg),
        opt(p.write_latency.min),
        opt(p.write_latency.max),
        p.avg_read_inflight_beats.to_string(),
    ]
}

/// How each port's window is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowPolicy {
    Default,
    Fixed(Window),
}

fn port_report(
    port: usize,
    rec: &PortRecord,
    window: Window,
    latency_window: Window,
    strict: bool,
) -> Result<PortReport, MetricsError> {
    let len = window.len();
    let read_in = rec
        .read_returns
        .iter()
        .filter(|r| window.contains(r.0))
        .count() as u64;
    let write_in = rec
        .write_beats
        .iter()
        .filter(|&&c| window.contains(c))
        .count() as u64;
    let per_cycle = |n: u64| if len == 0 { 0.0 } else { n as f64 / len as f64 };

    let mut reads = Vec::new();
    let mut firsts = Vec::new();
    let mut writes = Vec::new();
    let mut completed = [0u64; 2];
    let mut completed_read_beats = 0;
    for (id, s) in rec.commands.iter().enumerate() {
        let Some(done) = s.complete else {
            // commands cut off by a cycle limit are left out
            if !strict {
                continue;
            }
            return Err(MetricsError::Inconsistent {
                port,
                reason: format!("command {id} never completed"),
            });
        };
        completed[s.op.index()] += 1;
        if s.op == Op::Read {
            completed_read_beats += s.beats;
        }
        if !latency_window.contains(s.issue) {
            continue;
        }
        match s.op {
            Op::Read => {
                reads.push(done - s.issue);
                firsts.push(s.first.unwrap_or(done) - s.issue);
            }
            Op::Write => writes.push(done - s.issue),
        }
    }
    let returned = rec.read_returns.len() as u64;
    if strict && completed_read_beats != returned {
        return Err(MetricsError::Inconsistent {
            port,
            reason: format!(
                "completed reads carry {completed_read_beats} beats but {returned} returned"
            ),
        });
    }

    // Each read beat is in flight from its command's issue until it returns.
    let mut inflight: u128 = 0;
    for &(ret, id) in &rec.read_returns {
        let issue = rec.commands[id as usize].issue;
        let lo = issue.max(window.start);
        let hi = ret.min(window.end);
        if hi > lo {
            inflight += (hi - lo) as u128;
        }
    }

    Ok(PortReport {
        port,
        active: !rec.is_idle(),
        window,
        read_throughput: per_cycle(read_in),
        write_throughput: per_cycle(write_in),
        read_beats_in_window: read_in,
        write_beats_in_window: write_in,
        completed_reads: completed[0],
        completed_writes: completed[1],
        read_return_beats: returned,
        write_data_beats: rec.write_beats.len() as u64,
        read_latency: LatencyStats::from_values(&reads),
        read_first_beat_latency: LatencyStats::from_values(&firsts),
        write_latency: LatencyStats::from_values(&writes),
        avg_read_inflight_beats: if len == 0 {
            0.0
        } else {
            inflight as f64 / len as f64
        },
        read_latency_histogram: histogram(&reads),
        write_latency_histogram: histogram(&writes),
    })
}

/// Turns a finished run's record into a report.
pub fn finalize(
    rec: &Recorder,
    policy: WindowPolicy,
    cfg: &SimConfig,
    workload: &WorkloadSpec,
) -> Result<RunReport, MetricsError> {
    if !rec.drained && !rec.truncated {
        return Err(MetricsError::NotDrained(format!(
            "stopped at cycle {} with traffic in flight",
            rec.total_cycles
        )));
    }
    if rec.drained && rec.beats_injected != rec.beats_retired {
        return Err(MetricsError::NotDrained(format!(
            "{} beats injected but {} retired",
            rec.beats_injected, rec.beats_retired
        )));
    }
    if let WindowPolicy::Fixed(w) = policy {
        if w.is_empty() {
            return Err(MetricsError::EmptyWindow {
                start: w.start,
                end: w.end,
            });
        }
    }
    let mut ports = Vec::with_capacity(rec.ports.len());
    for (i, p) in rec.ports.iter().enumerate() {
        let (window, latency_window) = match policy {
            WindowPolicy::Fixed(w) => (w, w),
            WindowPolicy::Default => {
                let w = rec.default_window(i, cfg);
                let steady = 2 * cfg.timing.zero_load_read_latency();
                // Short transfers never reach steady state; their latencies
                // are taken over the whole run.
                let lw = if w.start >= steady {
                    w
                } else {
                    Window::new(0, rec.total_cycles.max(1))
                };
                (w, lw)
            }
        };
        ports.push(port_report(i, p, window, latency_window, !rec.truncated)?);
    }
    Ok(RunReport {
        ports,
        bank_conflicts: rec.bank_conflicts,
        peak_split_occupancy: rec.peak_split_occupancy,
        total_cycles: rec.total_cycles,
        truncated: rec.truncated,
        drained: rec.drained,
        beats_injected: rec.beats_injected,
        beats_retired: rec.beats_retired,
        seed: workload.seed,
        config: *cfg,
        workload: workload.clone(),
        notes: Vec::new(),
    })
}

/// One port metric that differs between the joint run and a solo run.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub port: usize,
    pub metric: &'static str,
    pub joint: String,
    pub solo: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "port {}: {} differs (joint {}, solo {})",
            self.port, self.metric, self.joint, self.solo
        )
    }
}

fn compare(port: usize, joint: &PortReport, solo: &PortReport, out: &mut Vec<Violation>) {
    macro_rules! field {
        ($($name:ident).+) => {
            if joint.$($name).+ != solo.$($name).+ {
                out.push(Violation {
                    port,
                    metric: stringify!($($name).+),
                    joint: format!("{:?}", joint.$($name).+),
                    solo: format!("{:?}", solo.$($name).+),
                });
            }
        };
    }
    field!(window);
    field!(read_throughput);
    field!(write_throughput);
    field!(completed_reads);
    field!(completed_writes);
    field!(read_latency);
    field!(read_first_beat_latency);
    field!(write_latency);
    field!(avg_read_inflight_beats);
    field!(read_latency_histogram);
    field!(write_latency_histogram);
}

/// Compares every port of each solo run with the same port in the joint
/// run. The joint run's workload must be the union of the solo workloads.
pub fn isolation_audit(
    joint: &RunReport,
    solos: &[RunReport],
) -> Result<Vec<Violation>, AuditError> {
    let mut seen = std::collections::BTreeSet::new();
    let mut violations = Vec::new();
    for solo in solos {
        if solo.config != joint.config {
            return Err(AuditError::Mismatch("configurations"));
        }
        if solo.seed != joint.seed {
            return Err(AuditError::Mismatch("seeds"));
        }
        let mut expect = joint.workload.clone();
        expect.active = solo.workload.active.clone();
        if expect != solo.workload {
            return Err(AuditError::Mismatch("workloads"));
        }
        for &m in &solo.workload.active {
            if !seen.insert(m) {
                return Err(AuditError::DuplicateMaster(m));
            }
            if !joint.workload.active.contains(&m) {
                return Err(AuditError::MissingMaster(m));
            }
            compare(m, &joint.ports[m], &solo.ports[m], &mut violations);
        }
    }
    Ok(violations)
}

/// Column order of sweep summaries.
pub const SWEEP_CSV_COLUMNS: [&str; 15] = [
    "axis",
    "value",
    "seed",
    "active_ports",
    "mean_read_throughput",
    "min_read_throughput",
    "mean_write_throughput",
    "min_write_throughput",
    "avg_read_latency",
    "avg_read_first_beat_latency",
    "avg_write_latency",
    "bank_conflicts",
    "total_cycles",
    "truncated",
    "error",
];

/// One sweep point as written to the summary CSV.
pub fn sweep_row(
    axis: &str,
    value: &str,
    seed: u64,
    result: &Result<RunReport, String>,
) -> Vec<String> {
    let mut row = vec![axis.to_string(), value.to_string(), seed.to_string()];
    match result {
        Ok(r) => {
            row.extend([
                r.active_ports().count().to_string(),
                opt(r.mean_read_throughput()),
                opt(r.min_read_throughput()),
                opt(r.mean_write_throughput()),
                opt(r.min_write_throughput()),
                opt(r.mean_read_latency()),
                opt(r.mean_read_first_beat_latency()),
                opt(r.mean_write_latency()),
                r.bank_conflicts.to_string(),
                r.total_cycles.to_string(),
                r.truncated.to_string(),
                String::new(),
            ]);
        }
        Err(e) => {
            row.extend(std::iter::repeat_n(String::new(), 11));
            row.push(e.clone());
        }
    }
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    /// One port, one 4-beat read issued at 0 returning on 32..36 and one
    /// single-beat write issued at 1 and acknowledged at 40.
    fn small_record() -> Recorder {
        let mut r = Recorder::new(2);
        r.issue(0, 0, Op::Read, 4, 0);
        r.issue(0, 1, Op::Write, 1, 1);
        r.write_beat(0, 1);
        for c in 32..36 {
            r.read_return(0, 0, c);
        }
        let s = &mut r.ports[0].commands;
        s[0].first = Some(32);
        s[0].complete = Some(35);
        s[1].complete = Some(40);
        r.total_cycles = 41;
        r.drained = true;
        r.beats_injected = 5;
        r.beats_retired = 5;
        r
    }

    #[test]
    fn bucket_edges() {
        assert_eq!(bucket_index(0), 0);
        assert_eq!(bucket_index(1), 0);
        assert_eq!(bucket_index(2), 2);
        assert_eq!(bucket_index(3), 3);
        assert_eq!(bucket_index(4), 4);
        assert_eq!(bucket_index(5), 4);
        assert_eq!(bucket_index(6), 5);
        assert_eq!(bucket_index(32), 10);
        assert_eq!(bucket_index(45), 10);
        assert_eq!(bucket_index(46), 11);
        assert_eq!(bucket_index(46341), 31);
        assert_eq!(bucket_index(1 << 20), 31);
        // bucket 1 is [1.41, 2) and holds no whole cycle count
        for i in 2..HISTOGRAM_BUCKETS {
            let lo = bucket_floor(i).ceil() as u64;
            assert_eq!(bucket_index(lo), i, "edge of bucket {i}");
            assert!(bucket_index(lo - 1) < i);
        }
    }

    #[test]
    fn stats_of_values() {
        let s = LatencyStats::from_values(&[2, 4, 6]);
        assert_eq!(s.count, 3);
        assert_eq!(s.min, Some(2));
        assert_eq!(s.max, Some(6));
        assert_eq!(s.avg, Some(4.0));
        assert!((s.std_dev.unwrap() - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(LatencyStats::from_values(&[]), LatencyStats::default());
    }

    #[test]
    fn fixed_window_report() {
        let rec = small_record();
        let r = finalize(
            &rec,
            WindowPolicy::Fixed(Window::new(30, 40)),
            &cfg(),
            &WorkloadSpec::default(),
        )
        .unwrap();
        let p = &r.ports[0];
        assert_eq!(p.read_beats_in_window, 4);
        assert_eq!(p.read_throughput, 0.4);
        assert_eq!(p.write_throughput, 0.0);
        assert_eq!(p.completed_reads, 1);
        assert_eq!(p.completed_writes, 1);
        // only commands issued inside the window count toward latency
        assert_eq!(p.read_latency.count, 0);
        // the 4 beats were in flight from 30 until 32, 33, 34 and 35
        assert_eq!(p.avg_read_inflight_beats, (2 + 3 + 4 + 5) as f64 / 10.0);
    }

    #[test]
    fn short_run_falls_back_to_data_span() {
        let rec = small_record();
        let r = finalize(
            &rec,
            WindowPolicy::Default,
            &cfg(),
            &WorkloadSpec::default(),
        )
        .unwrap();
        let p = &r.ports[0];
        assert_eq!(p.window, Window::new(1, 36));
        assert_eq!(p.read_latency.avg, Some(35.0));
        assert_eq!(p.read_first_beat_latency.avg, Some(32.0));
        assert_eq!(p.write_latency.max, Some(39));
        assert_eq!(p.read_latency_histogram[bucket_index(35)], 1);
    }

    #[test]
    fn idle_port_is_empty() {
        let rec = small_record();
        let r = finalize(
            &rec,
            WindowPolicy::Default,
            &cfg(),
            &WorkloadSpec::default(),
        )
        .unwrap();
        let p = &r.ports[1];
        assert!(!p.active);
        assert_eq!(p.read_throughput, 0.0);
        assert_eq!(p.write_throughput, 0.0);
        assert_eq!(p.read_latency, LatencyStats::default());
        assert_eq!(p.littles_law_error(), None);
    }

    #[test]
    fn undrained_run_is_rejected() {
        let mut rec = small_record();
        rec.drained = false;
        assert!(matches!(
            finalize(
                &rec,
                WindowPolicy::Default,
                &cfg(),
                &WorkloadSpec::default()
            ),
            Err(MetricsError::NotDrained(_))
        ));
        let mut rec = small_record();
        rec.beats_retired = 4;
        assert!(finalize(
            &rec,
            WindowPolicy::Default,
            &cfg(),
            &WorkloadSpec::default()
        )
        .is_err());
    }

    #[test]
    fn missing_return_beats_are_caught() {
        let mut rec = small_record();
        rec.ports[0].read_returns.pop();
        assert!(matches!(
            finalize(
                &rec,
                WindowPolicy::Default,
                &cfg(),
                &WorkloadSpec::default()
            ),
            Err(MetricsError::Inconsistent { port: 0, .. })
        ));
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let rec = small_record();
        let r = finalize(
            &rec,
            WindowPolicy::Default,
            &cfg(),
            &WorkloadSpec::default(),
        )
        .unwrap();
        let a = r.to_json();
        let back = RunReport::from_json(&a).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json(), a);
    }

    #[test]
    fn csv_has_fixed_columns() {
        let rec = small_record();
        let r = finalize(
            &rec,
            WindowPolicy::Default,
            &cfg(),
            &WorkloadSpec::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), PORT_CSV_COLUMNS.join(","));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn audit_against_itself_passes() {
        let rec = small_record();
        let w = WorkloadSpec::default().with_active(vec![0]);
        let r = finalize(&rec, WindowPolicy::Default, &cfg(), &w).unwrap();
        assert_eq!(
            isolation_audit(&r, std::slice::from_ref(&r)).unwrap(),
            vec![]
        );
    }

    #[test]
    fn audit_names_port_and_metric() {
        let rec = small_record();
        let w = WorkloadSpec::default().with_active(vec![0]);
        let joint = finalize(&rec, WindowPolicy::Default, &cfg(), &w).unwrap();
        let mut solo = joint.clone();
        solo.ports[0].read_throughput += 0.01;
        let v = isolation_audit(&joint, &[solo]).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].port, 0);
        assert_eq!(v[0].metric, "read_throughput");
    }

    #[test]
    fn audit_setup_errors() {
        let rec = small_record();
        let w = WorkloadSpec::default().with_active(vec![0]);
        let joint = finalize(&rec, WindowPolicy::Default, &cfg(), &w).unwrap();
        let mut other = joint.clone();
        other.seed += 1;
        assert_eq!(
            isolation_audit(&joint, &[other]),
            Err(AuditError::Mismatch("seeds"))
        );
        let mut other = joint.clone();
        other.workload.rate = 0.5;
        assert_eq!(
            isolation_audit(&joint, &[other]),
            Err(AuditError::Mismatch("workloads"))
        );
        assert_eq!(
            isolation_audit(&joint, &[joint.clone(), joint.clone()]),
            Err(AuditError::DuplicateMaster(0))
        );
    }

    #[test]
    fn littles_law_on_steady_stream() {
        // 1 beat returns per cycle, each in flight for exactly 10 cycles
        let mut rec = Recorder::new(1);
        for id in 0..100u64 {
            rec.issue(0, id, Op::Read, 1, id);
            rec.read_return(0, id, id + 10);
            let s = &mut rec.ports[0].commands[id as usize];
            s.first = Some(id + 10);
            s.complete = Some(id + 10);
        }
        rec.total_cycles = 110;
        rec.drained = true;
        let r = finalize(
            &rec,
            WindowPolicy::Fixed(Window::new(20, 100)),
            &cfg(),
            &WorkloadSpec::default(),
        )
        .unwrap();
        let p = &r.ports[0];
        assert_eq!(p.read_throughput, 1.0);
        assert_eq!(p.avg_read_inflight_beats, 10.0);
        assert_eq!(p.littles_law_error(), Some(0.0));
    }

    #[test]
    fn sweep_row_width_matches_header() {
        let rec = small_record();
        let r = finalize(
            &rec,
            WindowPolicy::Default,
            &cfg(),
            &WorkloadSpec::default(),
        )
        .unwrap();
        assert_eq!(
            sweep_row("masters", "1", 3, &Ok(r)).len(),
            SWEEP_CSV_COLUMNS.len()
        );
        assert_eq!(
            sweep_row("masters", "1", 3, &Err("bad".into())).len(),
            SWEEP_CSV_COLUMNS.len()
        );
    }
}
