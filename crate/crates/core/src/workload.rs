//! Traffic generation and trace replay.
//!
//! Each active master drives two independent command channels (read and
//! write), each fed by a [`ChannelSource`]. Sources are deterministic: every
//! channel owns a xoshiro256++ stream seeded from the run seed, the master
//! index and the channel, so a master's traffic does not depend on which
//! other masters are active.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::{is_supported_burst, AddressMap, BURST_LENGTHS};
use crate::config::{parse_size, Entry, SimConfig};
use crate::protocol::{CommandRequest, Op};

const MIB: u64 = 1 << 20;
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("line {line}: workload key `{key}`: {reason}")]
    Entry {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("cannot read trace `{path}`: {reason}")]
    Io { path: String, reason: String },
    #[error("trace line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("trace line {line}: {reason}")]
    Range { line: u64, reason: String },
    #[error("trace regions of masters {a} and {b} overlap")]
    Overlap { a: usize, b: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    /// Random beat-aligned bursts anywhere in the master's region.
    Uniform,
    /// Sequential burst-16 transfer of `payload_bytes`.
    Bulk,
    /// ML feature-map access: part of a line, then jump to the next line.
    Feature,
    /// Line-by-line scan of an image region of interest.
    Roi,
    /// Lower half of the active masters run `feature`, upper half `roi`.
    FeatureRoi,
    /// Replay of a trace file.
    Trace,
}

impl WorkloadKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "uniform" => Self::Uniform,
            "bulk" => Self::Bulk,
            "feature" => Self::Feature,
            "roi" => Self::Roi,
            "feature-roi" => Self::FeatureRoi,
            "trace" => Self::Trace,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Read,
    Write,
    Both,
}

impl Direction {
    pub fn has(self, op: Op) -> bool {
        matches!(
            (self, op),
            (Direction::Both, _) | (Direction::Read, Op::Read) | (Direction::Write, Op::Write)
        )
    }
}

/// Burst-length distribution, e.g. `16` or `4:0.5,8:0.5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstMix(pub Vec<(u64, f64)>);

impl BurstMix {
    pub fn fixed(beats: u64) -> Self {
        Self(vec![(beats, 1.0)])
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        let mut v = Vec::new();
        for part in s.split(',') {
            // a bare length means weight 1
            let (b, w) = part.split_once(':').unwrap_or((part, "1"));
            let beats = b
                .trim()
                .parse::<u64>()
                .map_err(|e| format!("`{part}`: {e}"))?;
            let weight = w
                .trim()
                .parse::<f64>()
                .map_err(|e| format!("`{part}`: {e}"))?;
            v.push((beats, weight));
        }
        let mix = Self(v);
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.0.is_empty() {
            return Err("empty burst mix".into());
        }
        for &(b, w) in &self.0 {
            if !is_supported_burst(b) {
                return Err(format!("burst length {b} not in {{1,4,8,16}}"));
            }
            // also rejects NaN
            if w.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(format!("weight for burst {b} must be positive"));
            }
        }
        let sum: f64 = self.0.iter().map(|e| e.1).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("burst mix weights sum to {sum}, expected 1"));
        }
        Ok(())
    }

    pub fn max_beats(&self) -> u64 {
        self.0.iter().map(|e| e.0).max().unwrap_or(1)
    }

    fn sample(&self, rng: &mut Xoshiro256PlusPlus) -> u64 {
        let u = unit(rng);
        let mut acc = 0.0;
        for &(b, w) in &self.0 {
            acc += w;
            if u < acc {
                return b;
            }
        }
        self.0.last().unwrap().0
    }
}

impl std::fmt::Display for BurstMix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(b, w)| format!("{b}:{w}")).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub line_bytes: u64,
    /// Bytes read from each line before jumping to the next one.
    pub portion_bytes: u64,
    pub stride_bytes: u64,
    pub burst_mix: BurstMix,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            line_bytes: 256,
            portion_bytes: 128,
            stride_bytes: 1024,
            burst_mix: BurstMix(vec![(4, 0.5), (8, 0.5)]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiParams {
    pub width: u64,
    pub height: u64,
    pub bytes_per_pixel: u64,
    /// Frames larger than this are cut off.
    pub clip_bytes: u64,
}

impl Default for RoiParams {
    fn default() -> Self {
        // 1080p YUV422
        Self {
            width: 1920,
            height: 1080,
            bytes_per_pixel: 2,
            clip_bytes: 2 * MIB,
        }
    }
}

/// One line of a trace file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub master: usize,
    pub op: Op,
    pub address: u64,
    pub beats: u64,
    /// Earliest fabric cycle to offer the command; 0 means immediately.
    pub min_issue_cycle: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    /// Records grouped by master, file order preserved.
    pub fn by_master(&self) -> BTreeMap<usize, Vec<TraceRecord>> {
        let mut out: BTreeMap<usize, Vec<TraceRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.master).or_default().push(*r);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Masters that generate traffic.
    pub active: Vec<usize>,
    /// Commands per port for `uniform` (split across both channels).
    pub transactions: u64,
    pub direction: Direction,
    /// Probability of offering a new command on a cycle.
    pub rate: f64,
    pub burst_mix: BurstMix,
    pub region_bytes: u64,
    /// Distance between consecutive masters' region bases.
    pub region_stride: u64,
    pub region_offset: u64,
    /// Transfer size per channel for `bulk`, traffic volume per channel for
    /// `feature` and `roi`.
    pub payload_bytes: u64,
    pub feature: FeatureParams,
    pub roi: RoiParams,
    pub trace_path: Option<String>,
    #[serde(skip)]
    pub trace: Option<Arc<Trace>>,
    /// Require pairwise-disjoint master regions.
    pub isolation: bool,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            kind: WorkloadKind::Uniform,
            active: (0..16).collect(),
            transactions: 10_000,
            direction: Direction::Both,
            rate: 1.0,
            burst_mix: BurstMix::fixed(16),
            region_bytes: 2 * MIB,
            region_stride: 2 * MIB,
            region_offset: 0,
            payload_bytes: 4096,
            feature: FeatureParams::default(),
            roi: RoiParams::default(),
            trace_path: None,
            trace: None,
            isolation: false,
            seed: 1,
        }
    }
}

/// Byte range `[base, base + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub base: u64,
    pub len: u64,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base + self.len
    }

    pub fn overlaps(&self, o: &Region) -> bool {
        self.base < o.end() && o.base < self.end()
    }
}

impl WorkloadSpec {
    pub fn uniform(masters: usize, transactions: u64) -> Self {
        Self {
            active: (0..masters).collect(),
            transactions,
            ..Self::default()
        }
    }

    pub fn bulk(masters: usize, payload_bytes: u64, direction: Direction) -> Self {
        Self {
            kind: WorkloadKind::Bulk,
            active: (0..masters).collect(),
            payload_bytes,
            direction,
            ..Self::default()
        }
    }

    pub fn with_active(mut self, active: Vec<usize>) -> Self {
        self.active = active;
        self
    }

    pub fn region(&self, master: usize) -> Region {
        Region {
            base: self.region_offset + master as u64 * self.region_stride,
            len: self.region_bytes,
        }
    }

    /// The part of a master's region a channel works in. Streaming patterns
    /// keep reads and writes in separate halves so they never alias.
    pub fn channel_region(&self, master: usize, op: Op, beat_bytes: u64) -> Region {
        let r = self.region(master);
        if self.kind == WorkloadKind::Uniform || self.direction != Direction::Both {
            return r;
        }
        let half = (r.len / 2) / beat_bytes * beat_bytes;
        match op {
            Op::Read => Region {
                base: r.base,
                len: half,
            },
            Op::Write => Region {
                base: r.base + half,
                len: r.len - half,
            },
        }
    }

    /// Pattern a particular master runs.
    pub fn kind_for(&self, master: usize) -> WorkloadKind {
        match self.kind {
            WorkloadKind::FeatureRoi => {
                let mut sorted = self.active.clone();
                sorted.sort_unstable();
                let pos = sorted.iter().position(|&m| m == master).unwrap_or(0);
                if pos < sorted.len().div_ceil(2) {
                    WorkloadKind::Feature
                } else {
                    WorkloadKind::Roi
                }
            }
            k => k,
        }
    }

    pub fn validate(&self, cfg: &SimConfig) -> Result<(), WorkloadError> {
        let t = &cfg.topology;
        let bad = |m: String| Err(WorkloadError::Invalid(m));
        let mut seen = BTreeSet::new();
        for &m in &self.active {
            if m >= t.masters {
                return bad(format!(
                    "active master {m} >= configured masters {}",
                    t.masters
                ));
            }
            if !seen.insert(m) {
                return bad(format!("master {m} listed twice"));
            }
        }
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return bad(format!("rate must be in (0, 1], got {}", self.rate));
        }
        self.burst_mix.validate().map_err(WorkloadError::Invalid)?;
        if self.kind == WorkloadKind::Trace {
            if self.trace.is_none() {
                return bad("trace workload without trace records".into());
            }
            return Ok(());
        }
        let bb = t.beat_bytes;
        if self.region_bytes == 0 || !self.region_bytes.is_multiple_of(bb) {
            return bad("region_bytes must be a non-zero multiple of the beat size".into());
        }
        for &m in &self.active {
            let r = self.region(m);
            if r.end() > t.total_bytes {
                return bad(format!(
                    "region of master {m} ({:#x}..{:#x}) exceeds memory",
                    r.base,
                    r.end()
                ));
            }
            for op in [Op::Read, Op::Write] {
                let cr = self.channel_region(m, op, bb);
                if cr.len < self.burst_mix.max_beats() * bb {
                    return bad(format!("region of master {m} smaller than one burst"));
                }
            }
        }
        if self.isolation {
            for (i, &a) in self.active.iter().enumerate() {
                for &b in &self.active[i + 1..] {
                    if self.region(a).overlaps(&self.region(b)) {
                        return bad(format!("regions of masters {a} and {b} overlap"));
                    }
                }
            }
        }
        let f = &self.feature;
        f.burst_mix.validate().map_err(WorkloadError::Invalid)?;
        if f.line_bytes < bb || !f.line_bytes.is_multiple_of(bb) {
            return bad("feature.line_bytes must be a multiple of the beat size".into());
        }
        if f.portion_bytes == 0 || f.portion_bytes > f.line_bytes {
            return bad("feature.portion_bytes must be in (0, line_bytes]".into());
        }
        if f.stride_bytes < f.line_bytes || !f.stride_bytes.is_multiple_of(bb) {
            return bad("feature.stride_bytes must be >= line_bytes and beat-aligned".into());
        }
        let r = &self.roi;
        if r.width * r.bytes_per_pixel == 0 || !(r.width * r.bytes_per_pixel).is_multiple_of(bb) {
            return bad(
                "roi line (width x bytes_per_pixel) must be a non-zero multiple of the beat size"
                    .into(),
            );
        }
        if r.height == 0 || r.clip_bytes < bb {
            return bad("roi height and clip_bytes must be non-zero".into());
        }
        if matches!(self.kind, WorkloadKind::Bulk) {
            for &m in &self.active {
                for op in [Op::Read, Op::Write] {
                    if self.direction.has(op)
                        && self.payload_bytes > self.channel_region(m, op, bb).len
                    {
                        return bad(format!(
                            "bulk payload {} exceeds the channel region of master {m}",
                            self.payload_bytes
                        ));
                    }
                }
            }
        }
        if !self.payload_bytes.is_multiple_of(bb) {
            return bad("payload_bytes must be a multiple of the beat size".into());
        }
        Ok(())
    }

    /// Applies `workload.*` entries from a config document.
    pub fn apply_entries(&mut self, entries: &[Entry]) -> Result<(), WorkloadError> {
        for e in entries {
            let key = e.key.strip_prefix("workload.").unwrap_or(&e.key);
            self.set(key, &e.value)
                .map_err(|reason| WorkloadError::Entry {
                    line: e.line,
                    key: e.key.clone(),
                    reason,
                })?;
        }
        Ok(())
    }

    /// Sets one parameter by name, as used in config files and on the
    /// command line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let size = || parse_size(value);
        match key {
            "kind" => {
                self.kind = WorkloadKind::parse(value)
                    .ok_or_else(|| format!("unknown workload kind `{value}`"))?
            }
            "masters" => self.active = (0..size()? as usize).collect(),
            "active" => {
                self.active = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}")))
                    .collect::<Result<_, _>>()?
            }
            "transactions" => self.transactions = size()?,
            "direction" => {
                self.direction = match value {
                    "read" => Direction::Read,
                    "write" => Direction::Write,
                    "both" => Direction::Both,
                    _ => return Err(format!("`{value}` is not read, write or both")),
                }
            }
            "rate" => {
                self.rate = value
                    .parse::<f64>()
                    .map_err(|e| format!("`{value}`: {e}"))?
            }
            "burst_mix" => self.burst_mix = BurstMix::parse(value)?,
            "region_bytes" => self.region_bytes = size()?,
            "region_stride" => self.region_stride = size()?,
            "region_offset" => self.region_offset = size()?,
            "payload_bytes" => self.payload_bytes = size()?,
            "feature.line_bytes" => self.feature.line_bytes = size()?,
            "feature.portion_bytes" => self.feature.portion_bytes = size()?,
            "feature.stride_bytes" => self.feature.stride_bytes = size()?,
            "feature.burst_mix" => self.feature.burst_mix = BurstMix::parse(value)?,
            "roi.width" => self.roi.width = size()?,
            "roi.height" => self.roi.height = size()?,
            "roi.bytes_per_pixel" => self.roi.bytes_per_pixel = size()?,
            "roi.clip_bytes" => self.roi.clip_bytes = size()?,
            "trace" => self.trace_path = Some(value.to_string()),
            "isolation" => {
                self.isolation = value
                    .parse::<bool>()
                    .map_err(|e| format!("`{value}`: {e}"))?
            }
            "seed" => self.seed = size()?,
            _ => return Err("unknown workload key".into()),
        }
        Ok(())
    }
}

/// Uniform double in `[0, 1)` from the top 53 bits of one draw.
pub fn unit(rng: &mut Xoshiro256PlusPlus) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Seed of the stream driving `master`'s channel `op`.
pub fn stream_seed(seed: u64, master: usize, op: Op) -> u64 {
    seed ^ GOLDEN.wrapping_mul(2 * master as u64 + op.index() as u64 + 1)
}

fn largest_burst_within(bytes: u64, beat_bytes: u64) -> u64 {
    BURST_LENGTHS
        .iter()
        .rev()
        .copied()
        .find(|b| b * beat_bytes <= bytes)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
enum Generator {
    Uniform {
        region: Region,
        mix: BurstMix,
        remaining: u64,
    },
    Bulk {
        cursor: u64,
        end: u64,
    },
    Feature {
        region: Region,
        params: FeatureParams,
        line_start: u64,
        cursor: u64,
        pass: u64,
        remaining: u64,
    },
    Roi {
        base: u64,
        line_bytes: u64,
        frame_bytes: u64,
        offset: u64,
        remaining: u64,
    },
    Script {
        records: VecDeque<TraceRecord>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Poll {
    Ready(CommandRequest),
    /// Nothing this cycle, more later.
    Idle,
    Exhausted,
}

/// Command stream of one channel of one master.
#[derive(Debug, Clone)]
pub struct ChannelSource {
    op: Op,
    rate: f64,
    beat_bytes: u64,
    rng: Xoshiro256PlusPlus,
    gen: Generator,
}

impl ChannelSource {
    pub fn op(&self) -> Op {
        self.op
    }

    pub fn exhausted(&self) -> bool {
        match &self.gen {
            Generator::Uniform { remaining, .. }
            | Generator::Feature { remaining, .. }
            | Generator::Roi { remaining, .. } => *remaining == 0,
            Generator::Bulk { cursor, end } => cursor >= end,
            Generator::Script { records } => records.is_empty(),
        }
    }

    /// Asks for the next command on `cycle`.
    pub fn next_command(&mut self, cycle: u64) -> Poll {
        if self.exhausted() {
            return Poll::Exhausted;
        }
        if let Generator::Script { records } = &self.gen {
            if records.front().is_some_and(|r| r.min_issue_cycle > cycle) {
                return Poll::Idle;
            }
        }
        if self.rate < 1.0 && unit(&mut self.rng) >= self.rate {
            return Poll::Idle;
        }
        let bb = self.beat_bytes;
        let op = self.op;
        let (base, beats) = match &mut self.gen {
            Generator::Uniform {
                region,
                mix,
                remaining,
            } => {
                let beats = mix.sample(&mut self.rng);
                let slots = (region.len - beats * bb) / bb + 1;
                let base = region.base + (self.rng.next_u64() % slots) * bb;
                *remaining -= 1;
                (base, beats)
            }
            Generator::Bulk { cursor, end } => {
                let beats = largest_burst_within(*end - *cursor, bb);
                let base = *cursor;
                *cursor += beats * bb;
                (base, beats)
            }
            Generator::Feature {
                region,
                params,
                line_start,
                cursor,
                pass,
                remaining,
            } => {
                let mut beats = params.burst_mix.sample(&mut self.rng);
                let line_end = *line_start + params.line_bytes;
                if *cursor + beats * bb > line_end {
                    beats = largest_burst_within(line_end - *cursor, bb);
                }
                let base = *cursor;
                *cursor += beats * bb;
                if *cursor - *line_start >= params.portion_bytes || *cursor >= line_end {
                    *line_start += params.stride_bytes;
                    if *line_start + params.line_bytes > region.end() {
                        // next pass over the map starts on a different sub-region
                        *pass += 1;
                        let span = params.stride_bytes - params.line_bytes + bb;
                        let mut phase = (*pass * params.portion_bytes) % span;
                        phase -= phase % bb;
                        *line_start = region.base + phase;
                        if *line_start + params.line_bytes > region.end() {
                            *line_start = region.base;
                        }
                    }
                    *cursor = *line_start;
                }
                *remaining = remaining.saturating_sub(beats * bb);
                (base, beats)
            }
            Generator::Roi {
                base,
                line_bytes,
                frame_bytes,
                offset,
                remaining,
            } => {
                let in_line = *line_bytes - *offset % *line_bytes;
                let in_frame = *frame_bytes - *offset;
                let beats = largest_burst_within(in_line.min(in_frame), bb);
                let addr = *base + *offset;
                *offset += beats * bb;
                if *offset >= *frame_bytes {
                    *offset = 0;
                }
                *remaining = remaining.saturating_sub(beats * bb);
                (addr, beats)
            }
            Generator::Script { records } => {
                let r = records.pop_front().unwrap();
                (r.address, r.beats)
            }
        };
        Poll::Ready(CommandRequest { op, base, beats })
    }
}

/// Builds the read and write sources of every master (`None` for channels
/// that carry no traffic).
pub fn build_sources(
    spec: &WorkloadSpec,
    cfg: &SimConfig,
) -> Result<Vec<[Option<ChannelSource>; 2]>, WorkloadError> {
    spec.validate(cfg)?;
    let t = &cfg.topology;
    let bb = t.beat_bytes;
    let mut out: Vec<[Option<ChannelSource>; 2]> = (0..t.masters).map(|_| [None, None]).collect();
    let scripts = spec.trace.as_ref().map(|tr| tr.by_master());
    for &m in &spec.active {
        for op in [Op::Read, Op::Write] {
            let gen = match spec.kind_for(m) {
                WorkloadKind::Trace => {
                    let records: VecDeque<TraceRecord> = scripts
                        .as_ref()
                        .and_then(|s| s.get(&m))
                        .map(|v| v.iter().filter(|r| r.op == op).copied().collect())
                        .unwrap_or_default();
                    if records.is_empty() {
                        continue;
                    }
                    Generator::Script { records }
                }
                _ if !spec.direction.has(op) => continue,
                WorkloadKind::Uniform => {
                    let n = match (spec.direction, op) {
                        (Direction::Both, Op::Read) => spec.transactions.div_ceil(2),
                        (Direction::Both, Op::Write) => spec.transactions / 2,
                        _ => spec.transactions,
                    };
                    if n == 0 {
                        continue;
                    }
                    Generator::Uniform {
                        region: spec.channel_region(m, op, bb),
                        mix: spec.burst_mix.clone(),
                        remaining: n,
                    }
                }
                WorkloadKind::Bulk => {
                    let r = spec.channel_region(m, op, bb);
                    if spec.payload_bytes == 0 {
                        continue;
                    }
                    Generator::Bulk {
                        cursor: r.base,
                        end: r.base + spec.payload_bytes,
                    }
                }
                WorkloadKind::Feature => {
                    let r = spec.channel_region(m, op, bb);
                    if r.len < spec.feature.stride_bytes {
                        return Err(WorkloadError::Invalid(format!(
                            "feature stride exceeds the channel region of master {m}"
                        )));
                    }
                    Generator::Feature {
                        region: r,
                        params: spec.feature.clone(),
                        line_start: r.base,
                        cursor: r.base,
                        pass: 0,
                        remaining: spec.payload_bytes,
                    }
                }
                WorkloadKind::Roi => {
                    let r = spec.channel_region(m, op, bb);
                    let p = &spec.roi;
                    let frame = (p.width * p.height * p.bytes_per_pixel)
                        .min(p.clip_bytes)
                        .min(r.len);
                    Generator::Roi {
                        base: r.base,
                        line_bytes: p.width * p.bytes_per_pixel,
                        frame_bytes: frame / bb * bb,
                        offset: 0,
                        remaining: spec.payload_bytes,
                    }
                }
                WorkloadKind::FeatureRoi => unreachable!("resolved per master"),
            };
            out[m][op.index()] = Some(ChannelSource {
                op,
                rate: spec.rate,
                beat_bytes: bb,
                rng: Xoshiro256PlusPlus::seed_from_u64(stream_seed(spec.seed, m, op)),
                gen,
            });
        }
    }
    Ok(out)
}

/// Drains a source, ignoring timing, and returns its commands.
pub fn collect_commands(src: &mut ChannelSource, limit: usize) -> Vec<CommandRequest> {
    let mut out = Vec::new();
    let mut cycle = 0u64;
    while out.len() < limit {
        match src.next_command(cycle) {
            Poll::Ready(c) => out.push(c),
            Poll::Idle => {}
            Poll::Exhausted => break,
        }
        cycle += 1;
    }
    out
}

/// Sub-bank arbiters (array id, bank, sub-bank) touched by a master.
pub fn arbiter_footprint(
    spec: &WorkloadSpec,
    cfg: &SimConfig,
    master: usize,
) -> Result<BTreeSet<(usize, usize, usize)>, WorkloadError> {
    let map = AddressMap::new(cfg);
    let mut set = BTreeSet::new();
    let sources = build_sources(spec, cfg)?;
    for src in sources
        .into_iter()
        .nth(master)
        .into_iter()
        .flatten()
        .flatten()
    {
        let mut src = src;
        for c in collect_commands(&mut src, usize::MAX) {
            for b in map
                .expand_burst(c.base, c.beats)
                .map_err(|e| WorkloadError::Invalid(e.to_string()))?
            {
                let l = b.location;
                set.insert((
                    l.cluster * cfg.topology.arrays_per_cluster + l.array,
                    l.bank,
                    l.subbank,
                ));
            }
        }
    }
    Ok(set)
}

/// Changes of (bank, sub-bank) between consecutive beats, per KiB moved.
pub fn bank_transitions_per_kib(commands: &[CommandRequest], map: &AddressMap) -> f64 {
    let mut prev = None;
    let mut transitions = 0u64;
    let mut bytes = 0u64;
    for c in commands {
        for b in map
            .expand_burst(c.base, c.beats)
            .expect("generated command is valid")
        {
            let key = (b.location.bank, b.location.subbank);
            if prev.is_some_and(|p| p != key) {
                transitions += 1;
            }
            prev = Some(key);
            bytes += map.beat_bytes();
        }
    }
    if bytes == 0 {
        0.0
    } else {
        transitions as f64 * 1024.0 / bytes as f64
    }
}

/// Parses trace CSV text: `master,op,address_hex,beats[,min_cycle]`.
pub fn parse_trace(text: &str, cfg: &SimConfig, isolation: bool) -> Result<Trace, TraceError> {
    let map = AddressMap::new(cfg);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| TraceError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let perr = |reason: String| TraceError::Parse { line, reason };
        if row.len() == 1 && row[0].is_empty() {
            continue;
        }
        if row.len() < 4 || row.len() > 5 {
            return Err(perr(format!("expected 4 or 5 fields, found {}", row.len())));
        }
        let master = row[0]
            .parse::<usize>()
            .map_err(|e| perr(format!("master `{}`: {e}", &row[0])))?;
        let op = match &row[1] {
            "R" | "r" => Op::Read,
            "W" | "w" => Op::Write,
            other => return Err(perr(format!("op `{other}` is not R or W"))),
        };
        let a = &row[2];
        let hex = a
            .strip_prefix("0x")
            .or_else(|| a.strip_prefix("0X"))
            .unwrap_or(a);
        let address =
            u64::from_str_radix(hex, 16).map_err(|e| perr(format!("address `{a}`: {e}")))?;
        let beats = row[3]
            .parse::<u64>()
            .map_err(|e| perr(format!("beats `{}`: {e}", &row[3])))?;
        let min_issue_cycle = match row.get(4) {
            Some(s) if !s.is_empty() => s
                .parse::<u64>()
                .map_err(|e| perr(format!("min_cycle `{s}`: {e}")))?,
            _ => 0,
        };
        if master >= cfg.topology.masters {
            return Err(TraceError::Range {
                line,
                reason: format!("master {master} >= {}", cfg.topology.masters),
            });
        }
        map.check_burst(address, beats)
            .map_err(|e| TraceError::Range {
                line,
                reason: e.to_string(),
            })?;
        records.push(TraceRecord {
            master,
            op,
            address,
            beats,
            min_issue_cycle,
        });
    }
    let trace = Trace { records };
    if isolation {
        check_disjoint(&trace, cfg.topology.beat_bytes)?;
    }
    Ok(trace)
}

fn check_disjoint(trace: &Trace, beat_bytes: u64) -> Result<(), TraceError> {
    let spans: Vec<(usize, u64, u64)> = trace
        .by_master()
        .into_iter()
        .map(|(m, rs)| {
            let lo = rs.iter().map(|r| r.address).min().unwrap();
            let hi = rs
                .iter()
                .map(|r| r.address + r.beats * beat_bytes)
                .max()
                .unwrap();
            (m, lo, hi)
        })
        .collect();
    for (i, a) in spans.iter().enumerate() {
        for b in &spans[i + 1..] {
            if a.1 < b.2 && b.1 < a.2 {
                return Err(TraceError::Overlap { a: a.0, b: b.0 });
            }
        }
    }
    Ok(())
}

pub fn load_trace(path: &Path, cfg: &SimConfig, isolation: bool) -> Result<Trace, TraceError> {
    let text = std::fs::read_to_string(path).map_err(|e| TraceError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_trace(&text, cfg, isolation)
}

pub fn write_trace<W: std::io::Write>(trace: &Trace, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "# master,op,address,beats,min_cycle")?;
    for r in &trace.records {
        let op = if r.op == Op::Read { "R" } else { "W" };
        if r.min_issue_cycle == 0 {
            writeln!(out, "{},{op},{:#x},{}", r.master, r.address, r.beats)?;
        } else {
            writeln!(
                out,
                "{},{op},{:#x},{},{}",
                r.master, r.address, r.beats, r.min_issue_cycle
            )?;
        }
    }
    Ok(())
}

/// Synthetic stand-in for a detection-network trace: each listed master
/// moves transfers of 4 KiB to 260 KiB through its own 2 MiB region,
/// randomly reading or writing, split into burst-16 commands.
pub fn synthetic_ssd_trace(
    seed: u64,
    masters: &[usize],
    transfers: usize,
    beat_bytes: u64,
) -> Trace {
    let region = 2 * MIB;
    let burst = 16 * beat_bytes;
    let mut records = Vec::new();
    for &m in masters {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(stream_seed(seed, m, Op::Read));
        let base = m as u64 * region;
        let mut cursor = 0u64;
        for _ in 0..transfers {
            let kib = 4 + rng.next_u64() % 257;
            let size = kib * 1024;
            let op = if rng.next_u64() & 1 == 0 {
                Op::Read
            } else {
                Op::Write
            };
            if cursor + size > region {
                cursor = 0;
            }
            let mut off = 0;
            while off < size {
                let beats = largest_burst_within((size - off).min(burst), beat_bytes);
                records.push(TraceRecord {
                    master: m,
                    op,
                    address: base + cursor + off,
                    beats,
                    min_issue_cycle: 0,
                });
                off += beats * beat_bytes;
            }
            cursor += size;
        }
    }
    Trace { records }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    fn sources(spec: &WorkloadSpec) -> Vec<[Option<ChannelSource>; 2]> {
        build_sources(spec, &cfg()).unwrap()
    }

    #[test]
    fn uniform_full_rate_burst16_every_cycle() {
        let spec = WorkloadSpec::uniform(1, 100);
        let mut s = sources(&spec);
        let src = s[0][0].as_mut().unwrap();
        for c in 0..50 {
            match src.next_command(c) {
                Poll::Ready(cmd) => {
                    assert_eq!(cmd.beats, 16);
                    assert_eq!(cmd.base % 32, 0);
                    assert!(cmd.base + 512 <= 2 * MIB);
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn uniform_splits_transactions_between_channels() {
        let spec = WorkloadSpec::uniform(1, 11);
        let mut s = sources(&spec);
        let r = collect_commands(s[0][0].as_mut().unwrap(), 100);
        let w = collect_commands(s[0][1].as_mut().unwrap(), 100);
        assert_eq!((r.len(), w.len()), (6, 5));
        assert!(r.iter().all(|c| c.op == Op::Read));
        assert!(w.iter().all(|c| c.op == Op::Write));
    }

    #[test]
    fn bulk_4kib_is_eight_burst16() {
        let spec = WorkloadSpec::bulk(1, 4096, Direction::Read);
        let mut s = sources(&spec);
        let cmds = collect_commands(s[0][0].as_mut().unwrap(), 100);
        assert_eq!(cmds.len(), 8);
        for (i, c) in cmds.iter().enumerate() {
            assert_eq!(c.beats, 16);
            assert_eq!(c.base, i as u64 * 512);
        }
        assert_eq!(cmds.iter().map(|c| c.beats).sum::<u64>(), 4 * 1024 / 32);
        assert!(s[0][1].is_none());
    }

    #[test]
    fn roi_frame_clipped_at_2mib() {
        let spec = WorkloadSpec {
            kind: WorkloadKind::Roi,
            active: vec![0],
            direction: Direction::Read,
            payload_bytes: 2 * MIB,
            ..WorkloadSpec::default()
        };
        let mut s = sources(&spec);
        let cmds = collect_commands(s[0][0].as_mut().unwrap(), usize::MAX);
        let bytes: u64 = cmds.iter().map(|c| c.beats * 32).sum();
        assert_eq!(bytes, 2 * MIB);
        let max_end = cmds.iter().map(|c| c.base + c.beats * 32).max().unwrap();
        assert_eq!(max_end, 2 * MIB);
        // lines are 3840 B: seven burst-16 then a burst-8
        let first: Vec<u64> = cmds[..8].iter().map(|c| c.beats).collect();
        assert_eq!(first, vec![16, 16, 16, 16, 16, 16, 16, 8]);
        // sequential scan
        for w in cmds.windows(2) {
            assert_eq!(w[0].base + w[0].beats * 32, w[1].base);
        }
    }

    #[test]
    fn feature_reads_portion_then_jumps() {
        let mut spec = WorkloadSpec {
            kind: WorkloadKind::Feature,
            active: vec![0],
            direction: Direction::Read,
            payload_bytes: 64 * 1024,
            ..WorkloadSpec::default()
        };
        spec.feature.burst_mix = BurstMix::fixed(4);
        let mut s = sources(&spec);
        let cmds = collect_commands(s[0][0].as_mut().unwrap(), 4);
        let bases: Vec<u64> = cmds.iter().map(|c| c.base).collect();
        assert_eq!(bases, vec![0, 1024, 2048, 3072]);
    }

    #[test]
    fn feature_has_more_bank_transitions_than_roi() {
        let map = AddressMap::new(&cfg());
        let mut base = WorkloadSpec {
            active: vec![0],
            direction: Direction::Read,
            payload_bytes: 256 * 1024,
            ..WorkloadSpec::default()
        };
        base.kind = WorkloadKind::Feature;
        let f = collect_commands(sources(&base)[0][0].as_mut().unwrap(), usize::MAX);
        base.kind = WorkloadKind::Roi;
        let r = collect_commands(sources(&base)[0][0].as_mut().unwrap(), usize::MAX);
        let fb: u64 = f.iter().map(|c| c.beats * 32).sum();
        let rb: u64 = r.iter().map(|c| c.beats * 32).sum();
        assert!(fb >= 256 * 1024 && rb == 256 * 1024);
        let tf = bank_transitions_per_kib(&f, &map);
        let tr = bank_transitions_per_kib(&r, &map);
        assert!(tf > tr, "feature {tf} vs roi {tr}");
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = WorkloadSpec::uniform(2, 200);
        let a = collect_commands(sources(&spec)[1][0].as_mut().unwrap(), 1000);
        let b = collect_commands(sources(&spec)[1][0].as_mut().unwrap(), 1000);
        assert_eq!(a, b);
        let other = WorkloadSpec { seed: 2, ..spec };
        let c = collect_commands(sources(&other)[1][0].as_mut().unwrap(), 1000);
        assert_ne!(a, c);
    }

    #[test]
    fn stream_independent_of_other_masters() {
        let all = WorkloadSpec::uniform(16, 50);
        let solo = all.clone().with_active(vec![5]);
        let a = collect_commands(sources(&all)[5][1].as_mut().unwrap(), 100);
        let b = collect_commands(sources(&solo)[5][1].as_mut().unwrap(), 100);
        assert_eq!(a, b);
    }

    #[test]
    fn rate_thins_offers() {
        let mut spec = WorkloadSpec::uniform(1, 100_000);
        spec.rate = 0.25;
        let mut s = sources(&spec);
        let src = s[0][0].as_mut().unwrap();
        let ready = (0..20_000)
            .filter(|&c| matches!(src.next_command(c), Poll::Ready(_)))
            .count();
        assert!((4500..5500).contains(&ready), "{ready}");
    }

    #[test]
    fn validation_errors() {
        let c = cfg();
        let mut s = WorkloadSpec::uniform(1, 10);
        s.rate = 0.0;
        assert!(s.validate(&c).is_err());
        let mut s = WorkloadSpec::uniform(1, 10);
        s.active = vec![16];
        assert!(s.validate(&c).is_err());
        let mut s = WorkloadSpec::uniform(2, 10);
        s.isolation = true;
        s.region_stride = MIB;
        assert!(s.validate(&c).is_err());
        assert!(BurstMix::parse("4:0.5,8:0.4").is_err());
        assert!(BurstMix::parse("3:1").is_err());
        assert_eq!(BurstMix::parse("16").unwrap(), BurstMix::fixed(16));
        assert!(BurstMix::parse("4,8").is_err());
    }

    #[test]
    fn entries_apply() {
        let doc = crate::config::parse_config(
            "workload.kind = bulk\nworkload.masters = 2\nworkload.payload_bytes = 8KiB\nworkload.direction = read\n",
        )
        .unwrap();
        let mut w = WorkloadSpec::default();
        w.apply_entries(&doc.workload).unwrap();
        assert_eq!(w.kind, WorkloadKind::Bulk);
        assert_eq!(w.active, vec![0, 1]);
        assert_eq!(w.payload_bytes, 8192);
        let bad = crate::config::parse_config("workload.nope = 1").unwrap();
        assert!(matches!(
            w.apply_entries(&bad.workload),
            Err(WorkloadError::Entry { line: 1, .. })
        ));
    }

    #[test]
    fn empty_trace() {
        let t = parse_trace("", &cfg(), false).unwrap();
        assert!(t.records.is_empty());
    }

    #[test]
    fn minimal_trace() {
        let t = parse_trace("0,R,0x0,16\n1,W,0x200000,16\n", &cfg(), true).unwrap();
        let g = t.by_master();
        assert_eq!(g[&0].len(), 1);
        assert_eq!(g[&1][0].address, 0x200000);
        assert_eq!(g[&1][0].op, Op::Write);
    }

    #[test]
    fn trace_errors_carry_line_numbers() {
        let c = cfg();
        match parse_trace("# hdr\n0,R,0x0,16\n0,X,0x0,16\n", &c, false) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_trace("0,R,0x2000000,1\n", &c, false),
            Err(TraceError::Range { line: 1, .. })
        ));
        assert!(matches!(
            parse_trace("0,R,0x0,16\n1,W,0x100,16\n", &c, true),
            Err(TraceError::Overlap { a: 0, b: 1 })
        ));
        assert!(parse_trace("0,R,0x0,16\n1,W,0x100,16\n", &c, false).is_ok());
    }

    #[test]
    fn min_cycle_delays_offer() {
        let c = cfg();
        let trace = parse_trace("0,R,0x0,4,10\n", &c, false).unwrap();
        let spec = WorkloadSpec {
            kind: WorkloadKind::Trace,
            active: vec![0],
            trace: Some(Arc::new(trace)),
            ..WorkloadSpec::default()
        };
        let mut s = build_sources(&spec, &c).unwrap();
        let src = s[0][0].as_mut().unwrap();
        assert_eq!(src.next_command(9), Poll::Idle);
        assert!(matches!(src.next_command(10), Poll::Ready(_)));
        assert_eq!(src.next_command(11), Poll::Exhausted);
    }

    #[test]
    fn synthetic_ssd_trace_sizes() {
        let c = cfg();
        let trace = synthetic_ssd_trace(3, &(0..8).collect::<Vec<_>>(), 20, 32);
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let back = parse_trace(std::str::from_utf8(&buf).unwrap(), &c, true).unwrap();
        assert_eq!(back, trace);
        assert_eq!(back.by_master().len(), 8);
    }
}
