//! Cycle-driven simulation kernel and parameter sweeps.
//!
//! Each fabric cycle runs four phases in a fixed order:
//!
//! 1. response trees deliver read beats and write acknowledgements to ports;
//! 2. on memory-clock edges (`cycle % ratio == 0`) every sub-bank arbiter
//!    grants at most one access;
//! 3. request paths advance and hand beats to sub-bank queues;
//! 4. ports accept new commands and inject beats into their split buffers.
//!
//! Beat conservation is checked at the end of every cycle.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::AddressMap;
use crate::config::{ConfigError, SimConfig};
use crate::fabric::{EventLog, Fabric, ReturnBeat};
use crate::memory::Memory;
use crate::metrics::{finalize, MetricsError, Recorder, RunReport, WindowPolicy};
use crate::protocol::{
    payload_for, Acceptance, Beat, CommandRequest, IntegrityFault, Op, Parent, PortState,
    ProtocolError, ReadReturn, ReturnStatus,
};
use crate::workload::{
    build_sources, ChannelSource, Poll, WorkloadError, WorkloadKind, WorkloadSpec,
};

/// Safety net for runs that would otherwise never stop.
pub const DEFAULT_MAX_CYCLES: u64 = 100_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("integrity fault at cycle {cycle}: {fault}")]
    Integrity { cycle: u64, fault: IntegrityFault },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Knobs that shape a run without being part of its inputs.
pub struct RunOptions {
    pub max_cycles: u64,
    pub window: WindowPolicy,
    /// Keep every read beat's data in the outcome.
    pub capture_reads: bool,
    /// Keep the final memory contents in the outcome.
    pub capture_image: bool,
    pub event_log: Option<EventLog>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            max_cycles: DEFAULT_MAX_CYCLES,
            window: WindowPolicy::Default,
            capture_reads: false,
            capture_image: false,
            event_log: None,
        }
    }
}

impl fmt::Debug for RunOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunOptions")
            .field("max_cycles", &self.max_cycles)
            .field("window", &self.window)
            .field("capture_reads", &self.capture_reads)
            .field("capture_image", &self.capture_image)
            .field("event_log", &self.event_log.is_some())
            .finish()
    }
}

/// Data of one read beat as seen by its port.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadRecord {
    pub master: usize,
    pub cmd_id: u64,
    pub beat_index: u32,
    pub address: u64,
    pub cycle: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub reads: Vec<ReadRecord>,
    pub image: Option<BTreeMap<u64, Vec<u8>>>,
}

struct Master {
    port: PortState,
    sources: [Option<ChannelSource>; 2],
    held: [Option<CommandRequest>; 2],
    /// Accepted beats not yet in the split buffer, per channel.
    pending: [VecDeque<Beat>; 2],
    bases: BTreeMap<u64, u64>,
}

impl Master {
    fn idle(&self) -> bool {
        self.port.in_flight_len() == 0
            && self.held.iter().all(Option::is_none)
            && self.pending.iter().all(VecDeque::is_empty)
            && self.sources.iter().flatten().all(ChannelSource::exhausted)
    }
}

/// State of one run between cycles.
pub struct SimState {
    cfg: SimConfig,
    map: AddressMap,
    ratio: u64,
    cycle: u64,
    masters: Vec<Master>,
    fabric: Fabric,
    memory: Memory,
    rec: Recorder,
    reads: Option<Vec<ReadRecord>>,
}

impl SimState {
    pub fn new(cfg: &SimConfig, workload: &WorkloadSpec) -> Result<Self, SimError> {
        cfg.validate()?;
        let sources = build_sources(workload, cfg)?;
        let t = &cfg.topology;
        let masters = sources
            .into_iter()
            .enumerate()
            .map(|(m, sources)| Master {
                port: PortState::new(m, cfg.timing.outstanding_per_port, t.beat_bytes),
                sources,
                held: [None, None],
                pending: [VecDeque::new(), VecDeque::new()],
                bases: BTreeMap::new(),
            })
            .collect();
        Ok(Self {
            cfg: *cfg,
            map: AddressMap::new(cfg),
            ratio: cfg.timing.fabric_clock_per_mem_clock,
            cycle: 0,
            masters,
            fabric: Fabric::new(cfg),
            memory: Memory::new(cfg),
            rec: Recorder::new(t.masters),
            reads: None,
        })
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn recorder(&self) -> &Recorder {
        &self.rec
    }

    /// True once every source is spent and nothing is left in flight.
    pub fn drained(&self) -> bool {
        self.masters.iter().all(Master::idle)
            && self.fabric.split_occupancy() == 0
            && self.memory.queued() == 0
            && self.fabric.responses_in_flight() == 0
            && self.fabric.acks_in_flight() == 0
    }

    fn fault(&self, fault: IntegrityFault) -> SimError {
        SimError::Integrity {
            cycle: self.cycle,
            fault,
        }
    }

    /// Advances one fabric cycle.
    pub fn step(&mut self) -> Result<(), SimError> {
        let cycle = self.cycle;
        self.deliver(cycle)?;
        if cycle.is_multiple_of(self.ratio) {
            self.memory_tick(cycle)?;
        }
        self.fabric.tick_request(cycle, &mut self.memory);
        if let Some(f) = self.memory.take_fault() {
            return Err(self.fault(f));
        }
        self.issue_and_inject(cycle)?;
        self.check_conservation()?;
        self.cycle += 1;
        Ok(())
    }

    fn deliver(&mut self, cycle: u64) -> Result<(), SimError> {
        for (m, beat, ack) in self.fabric.tick_response(cycle) {
            if let Some(b) = beat {
                self.rec.read_return(m, b.parent.cmd_id, cycle);
                self.rec.beats_retired += 1;
                let ret = ReadReturn {
                    parent: b.parent,
                    beat_index: b.beat_index,
                    payload: b.payload,
                    return_cycle: cycle,
                };
                if let Some(reads) = self.reads.as_mut() {
                    let base = self.masters[m].bases.get(&ret.parent.cmd_id).copied();
                    reads.push(ReadRecord {
                        master: m,
                        cmd_id: ret.parent.cmd_id,
                        beat_index: ret.beat_index,
                        address: base.unwrap_or(0)
                            + ret.beat_index as u64 * self.cfg.topology.beat_bytes,
                        cycle,
                        payload: ret.payload.clone(),
                    });
                }
                match self.masters[m].port.record_return(&ret) {
                    Ok(ReturnStatus::Complete(done)) => {
                        self.masters[m].bases.remove(&done.command.cmd_id);
                        self.rec.complete(m, &done);
                    }
                    Ok(ReturnStatus::Pending) => {}
                    Err(f) => return Err(self.fault(f)),
                }
            }
            if let Some(parent) = ack {
                match self.masters[m].port.record_write_ack(parent, cycle) {
                    Ok(done) => self.rec.complete(m, &done),
                    Err(f) => return Err(self.fault(f)),
                }
            }
        }
        Ok(())
    }

    fn memory_tick(&mut self, cycle: u64) -> Result<(), SimError> {
        for s in self.memory.tick(cycle) {
            let parent = s.beat.parent;
            match s.beat.op {
                Op::Read => {
                    let beat = ReturnBeat {
                        parent,
                        beat_index: s.beat.beat_index,
                        payload: s.beat.payload,
                    };
                    self.fabric.responses[s.master].push_return(s.array_id, beat, s.done_cycle);
                }
                Op::Write => {
                    self.rec.beats_retired += 1;
                    match self.masters[s.master]
                        .port
                        .record_write_commit(parent.cmd_id)
                    {
                        Ok(true) => self.fabric.responses[s.master].push_ack(parent, s.done_cycle),
                        Ok(false) => {}
                        Err(f) => return Err(self.fault(f)),
                    }
                }
            }
        }
        self.rec.bank_conflicts = self.memory.bank_conflicts();
        Ok(())
    }

    fn issue_and_inject(&mut self, cycle: u64) -> Result<(), SimError> {
        let bb = self.cfg.topology.beat_bytes;
        for (m, master) in self.masters.iter_mut().enumerate() {
            for op in [Op::Write, Op::Read] {
                let ch = op.index();
                if master.held[ch].is_none() {
                    if let Some(src) = master.sources[ch].as_mut() {
                        if let Poll::Ready(req) = src.next_command(cycle) {
                            master.held[ch] = Some(req);
                        }
                    }
                }
                let Some(req) = master.held[ch] else { continue };
                let Acceptance::Accepted(cmd) = master.port.try_accept(&req, cycle, &self.map)?
                else {
                    continue;
                };
                master.held[ch] = None;
                self.rec.issue(m, cmd.cmd_id, op, cmd.beats, cycle);
                if self.reads.is_some() && op == Op::Read {
                    master.bases.insert(cmd.cmd_id, cmd.base);
                }
                let parent = Parent {
                    master: m,
                    cmd_id: cmd.cmd_id,
                };
                let beats = self
                    .map
                    .expand_burst(cmd.base, cmd.beats)
                    .map_err(|source| ProtocolError::Malformed { master: m, source })?;
                for b in beats {
                    master.pending[ch].push_back(Beat {
                        parent,
                        beat_index: b.beat_index,
                        op,
                        address: b.address,
                        location: b.location,
                        payload: match op {
                            Op::Write => payload_for(parent, b.address, bb),
                            Op::Read => Vec::new(),
                        },
                    });
                }
            }
            let path = &mut self.fabric.requests[m];
            // write data moves one beat per cycle on its own channel
            if path.inject_beats(&mut master.pending[Op::Write.index()], 1, cycle) == 1 {
                self.rec.write_beat(m, cycle);
                self.rec.beats_injected += 1;
            }
            let n = path.inject_beats(&mut master.pending[Op::Read.index()], usize::MAX, cycle);
            self.rec.beats_injected += n as u64;
            self.rec.peak_split_occupancy =
                self.rec.peak_split_occupancy.max(path.peak_occupancy());
        }
        Ok(())
    }

    fn check_conservation(&self) -> Result<(), SimError> {
        let inside = self.fabric.split_occupancy()
            + self.memory.queued()
            + self.fabric.responses_in_flight();
        if self.rec.beats_injected != inside as u64 + self.rec.beats_retired {
            return Err(self.fault(IntegrityFault::Other(format!(
                "{} beats injected but {} in flight and {} retired",
                self.rec.beats_injected, inside, self.rec.beats_retired
            ))));
        }
        Ok(())
    }
}

/// Runs a workload to drain or to `opts.max_cycles`.
pub fn run_with(
    cfg: &SimConfig,
    workload: &WorkloadSpec,
    mut opts: RunOptions,
) -> Result<RunOutcome, SimError> {
    let mut sim = SimState::new(cfg, workload)?;
    if opts.capture_reads {
        sim.reads = Some(Vec::new());
    }
    sim.fabric.log = opts.event_log.take();
    while !sim.drained() {
        if sim.cycle >= opts.max_cycles {
            sim.rec.truncated = true;
            break;
        }
        sim.step()?;
    }
    if let Some(l) = sim.fabric.log.as_mut() {
        l.flush();
    }
    sim.rec.drained = !sim.rec.truncated;
    sim.rec.total_cycles = sim.cycle;
    let mut report = finalize(&sim.rec, opts.window, cfg, workload)?;
    if workload.kind == WorkloadKind::Trace && workload.trace_path.is_none() {
        report
            .notes
            .push("trace records come from the built-in synthetic generator".into());
    }
    let image = opts.capture_image.then(|| sim.memory.image(&sim.map));
    Ok(RunOutcome {
        report,
        reads: sim.reads.unwrap_or_default(),
        image,
    })
}

/// Runs a workload with default options and returns its report.
pub fn run(
    cfg: &SimConfig,
    workload: &WorkloadSpec,
    max_cycles: u64,
) -> Result<RunReport, SimError> {
    let opts = RunOptions {
        max_cycles,
        ..RunOptions::default()
    };
    Ok(run_with(cfg, workload, opts)?.report)
}

/// A swept parameter and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Axis {
    /// Number of active masters, starting at master 0.
    Masters(Vec<usize>),
    Outstanding(Vec<usize>),
    /// Fixed burst length for uniform traffic.
    Burst(Vec<u64>),
    Rate(Vec<f64>),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("bad axis `{text}`: {reason}")]
pub struct AxisError {
    pub text: String,
    pub reason: String,
}

fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

fn parse_int_list(text: &str) -> Result<Vec<u64>, String> {
    let Some((a, b)) = text.split_once("..") else {
        return parse_list(text);
    };
    // `a..b` and `a..=b` both include `b`
    let b = b.strip_prefix('=').unwrap_or(b);
    let a: u64 = a.trim().parse().map_err(|e| format!("`{a}`: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("`{b}`: {e}"))?;
    if a > b {
        return Err("empty range".into());
    }
    Ok((a..=b).collect())
}

impl Axis {
    /// Parses `name=values`, where values are a comma list or an inclusive
    /// `a..b` range (integers only).
    pub fn parse(text: &str) -> Result<Self, AxisError> {
        let err = |reason: String| AxisError {
            text: text.to_string(),
            reason,
        };
        let (name, values) = text
            .split_once('=')
            .ok_or_else(|| err("expected name=values".into()))?;
        let axis = match name.trim() {
            "masters" => Axis::Masters(
                parse_int_list(values)
                    .map_err(err)?
                    .into_iter()
                    .map(|v| v as usize)
                    .collect(),
            ),
            "outstanding" => Axis::Outstanding(
                parse_int_list(values)
                    .map_err(err)?
                    .into_iter()
                    .map(|v| v as usize)
                    .collect(),
            ),
            "burst" => Axis::Burst(parse_int_list(values).map_err(err)?),
            "rate" => Axis::Rate(parse_list(values).map_err(err)?),
            other => return Err(err(format!("unknown axis `{other}`"))),
        };
        if axis.is_empty() {
            return Err(err("no values".into()));
        }
        Ok(axis)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Axis::Masters(_) => "masters",
            Axis::Outstanding(_) => "outstanding",
            Axis::Burst(_) => "burst",
            Axis::Rate(_) => "rate",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Axis::Masters(v) | Axis::Outstanding(v) => v.len(),
            Axis::Burst(v) => v.len(),
            Axis::Rate(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, i: usize) -> (String, u64) {
        match self {
            Axis::Masters(v) | Axis::Outstanding(v) => (v[i].to_string(), v[i] as u64),
            Axis::Burst(v) => (v[i].to_string(), v[i]),
            Axis::Rate(v) => (v[i].to_string(), v[i].to_bits()),
        }
    }

    /// Inputs of point `i`.
    fn apply(&self, i: usize, cfg: &SimConfig, wl: &WorkloadSpec) -> (SimConfig, WorkloadSpec) {
        let mut cfg = *cfg;
        let mut wl = wl.clone();
        match self {
            Axis::Masters(v) => wl.active = (0..v[i]).collect(),
            Axis::Outstanding(v) => cfg.timing.outstanding_per_port = v[i],
            Axis::Burst(v) => wl.burst_mix = crate::workload::BurstMix::fixed(v[i]),
            Axis::Rate(v) => wl.rate = v[i],
        }
        (cfg, wl)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of a sweep point, from the base seed, the axis and the value.
pub fn point_seed(base: u64, axis: &str, value_bits: u64) -> u64 {
    let tag = axis.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01B3)
    });
    splitmix64(base ^ splitmix64(tag ^ splitmix64(value_bits)))
}

/// Result of one sweep point; failures are kept per point.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub axis: &'static str,
    pub value: String,
    pub seed: u64,
    pub config: SimConfig,
    pub workload: WorkloadSpec,
    pub result: Result<RunReport, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Points run on the rayon pool when the `parallel` feature is on and
    /// sequentially otherwise.
    Parallel,
}

fn sweep_point(
    axis: &Axis,
    i: usize,
    cfg: &SimConfig,
    wl: &WorkloadSpec,
    max_cycles: u64,
) -> SweepPoint {
    let (label, bits) = axis.value(i);
    let (cfg, mut wl) = axis.apply(i, cfg, wl);
    wl.seed = point_seed(wl.seed, axis.name(), bits);
    let result = run(&cfg, &wl, max_cycles).map_err(|e| e.to_string());
    SweepPoint {
        axis: axis.name(),
        value: label,
        seed: wl.seed,
        config: cfg,
        workload: wl,
        result,
    }
}

/// One independent run per axis value.
pub fn sweep_with(
    cfg: &SimConfig,
    wl: &WorkloadSpec,
    axis: &Axis,
    max_cycles: u64,
    exec: Execution,
) -> Vec<SweepPoint> {
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..axis.len())
                .into_par_iter()
                .map(|i| sweep_point(axis, i, cfg, wl, max_cycles))
                .collect()
        }
        _ => (0..axis.len())
            .map(|i| sweep_point(axis, i, cfg, wl, max_cycles))
            .collect(),
    }
}

pub fn sweep(cfg: &SimConfig, wl: &WorkloadSpec, axis: &Axis, max_cycles: u64) -> Vec<SweepPoint> {
    sweep_with(cfg, wl, axis, max_cycles, Execution::Parallel)
}
