//! Architecture and timing parameters.
//!
//! Everything the simulator needs to know about the memory system lives in
//! [`SimConfig`]: the topology (ports, clusters, arrays, banks, sub-banks,
//! capacity), the pipeline timing, and the interleaving scheme used by the
//! array dispatch. Configs are validated once and are immutable afterwards.
//!
//! The text format is a flat `key = value` document; see [`parse_config`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest burst the port protocol accepts.
pub const MAX_BURST_BEATS: u64 = 16;

const KIB: u64 = 1024;
const MIB: u64 = 1024 * KIB;
const GIB: u64 = 1024 * MIB;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: malformed entry for key `{key}`: {reason}")]
    Parse {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Shape and size of the shared memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyConfig {
    /// Accessing master ports.
    pub masters: usize,
    pub clusters: usize,
    pub arrays_per_cluster: usize,
    /// Logic banks behind each array's dispatch stage.
    pub banks_per_array: usize,
    /// Region slices per logic bank; each has its own arbiter.
    pub subbanks_per_bank: usize,
    pub beat_bytes: u64,
    pub total_bytes: u64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            masters: 16,
            clusters: 4,
            arrays_per_cluster: 4,
            banks_per_array: 16,
            subbanks_per_bank: 4,
            beat_bytes: 32,
            total_bytes: 32 * MIB,
        }
    }
}

impl TopologyConfig {
    /// Number of independently arbitrated sub-banks in one SRAM array.
    pub fn subbanks_per_array(&self) -> usize {
        self.banks_per_array * self.subbanks_per_bank
    }

    pub fn arrays(&self) -> usize {
        self.clusters * self.arrays_per_cluster
    }

    pub fn total_subbanks(&self) -> usize {
        self.arrays() * self.subbanks_per_array()
    }

    /// Rows (beat-sized words) held by one sub-bank.
    pub fn rows_per_subbank(&self) -> u64 {
        let slots = (self.total_subbanks() as u64) * self.beat_bytes;
        self.total_bytes.checked_div(slots).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts = [
            ("masters", self.masters),
            ("clusters", self.clusters),
            ("arrays_per_cluster", self.arrays_per_cluster),
            ("banks_per_array", self.banks_per_array),
            ("subbanks_per_bank", self.subbanks_per_bank),
        ];
        for (name, v) in counts {
            if v == 0 || !v.is_power_of_two() {
                return Err(ConfigError::Invalid(format!(
                    "{name} must be a power of two >= 1 (got {v})"
                )));
            }
        }
        if self.beat_bytes == 0 || !self.beat_bytes.is_power_of_two() {
            return Err(ConfigError::Invalid(format!(
                "beat_bytes must be a power of two (got {})",
                self.beat_bytes
            )));
        }
        let unit = self.total_subbanks() as u64 * self.beat_bytes;
        if self.total_bytes == 0 || !self.total_bytes.is_multiple_of(unit) {
            return Err(ConfigError::Invalid(format!(
                "total_bytes ({}) must be divisible by clusters x arrays x banks x sub-banks x beat_bytes ({unit})",
                self.total_bytes
            )));
        }
        if !self.total_bytes.is_power_of_two() {
            return Err(ConfigError::Invalid(format!(
                "total_bytes must be a power of two (got {})",
                self.total_bytes
            )));
        }
        if self.rows_per_subbank() < 1 {
            return Err(ConfigError::Invalid(
                "derived rows per sub-bank must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Pipeline depths and buffering. All cycle counts are fabric cycles unless
/// the name says otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub fabric_clock_per_mem_clock: u64,
    /// Ingress, both split levels and the array dispatch.
    pub request_path_stages: u64,
    /// Issue-to-data latency of one SRAM access, in memory-clock cycles.
    pub memory_access_mem_cycles: u64,
    /// Both merge levels plus egress to the port.
    pub response_path_stages: u64,
    pub outstanding_per_port: usize,
    pub split_buffer_beats: usize,
    /// Depth of each per-master queue in front of a sub-bank arbiter.
    pub subbank_queue_depth: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            fabric_clock_per_mem_clock: 2,
            request_path_stages: 10,
            memory_access_mem_cycles: 2,
            response_path_stages: 18,
            outstanding_per_port: 8,
            split_buffer_beats: 64,
            subbank_queue_depth: 4,
        }
    }
}

impl TimingConfig {
    /// Issue-to-first-data latency of an uncontended read whose beat reaches
    /// the arbiter on a memory-clock edge.
    pub fn zero_load_read_latency(&self) -> u64 {
        self.request_path_stages
            + self.memory_access_mem_cycles * self.fabric_clock_per_mem_clock
            + self.response_path_stages
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.fabric_clock_per_mem_clock < 1 {
            return Err(ConfigError::Invalid(
                "fabric_clock_per_mem_clock must be >= 1".into(),
            ));
        }
        if self.request_path_stages < 3 {
            return Err(ConfigError::Invalid(
                "request_path_stages must be >= 3 (ingress/L1 split, L2 split, dispatch)".into(),
            ));
        }
        if self.response_path_stages < 3 {
            return Err(ConfigError::Invalid(
                "response_path_stages must be >= 3 (array egress, L2 merge, L1 merge)".into(),
            ));
        }
        if self.memory_access_mem_cycles < 1 {
            return Err(ConfigError::Invalid(
                "memory_access_mem_cycles must be >= 1".into(),
            ));
        }
        if self.outstanding_per_port < 1 {
            return Err(ConfigError::Invalid(
                "outstanding_per_port must be >= 1".into(),
            ));
        }
        if (self.split_buffer_beats as u64) < MAX_BURST_BEATS {
            return Err(ConfigError::Invalid(format!(
                "split_buffer_beats must be >= the largest burst ({MAX_BURST_BEATS})"
            )));
        }
        if self.subbank_queue_depth < 1 {
            return Err(ConfigError::Invalid(
                "subbank_queue_depth must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    #[default]
    Identity,
    XorFold,
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeKind::Identity => f.write_str("identity"),
            SchemeKind::XorFold => f.write_str("xor-fold"),
        }
    }
}

/// Half-open range of address bits `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitRange {
    pub lo: u32,
    pub hi: u32,
}

impl BitRange {
    pub fn width(&self) -> u32 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct InterleaveScheme {
    pub kind: SchemeKind,
    /// Hash input bits for xor-fold. `None` selects the row field.
    pub hash_source_bits: Option<BitRange>,
}

/// A validated configuration. Cheap to copy and share across runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SimConfig {
    pub topology: TopologyConfig,
    pub timing: TimingConfig,
    pub scheme: InterleaveScheme,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.topology.validate()?;
        self.timing.validate()?;
        let geo = derive_geometry(&self.topology);
        if let Some(r) = self.scheme.hash_source_bits {
            let floor = geo.array.hi();
            if r.lo >= r.hi {
                return Err(ConfigError::Invalid(format!(
                    "hash_source_bits {}..{} is empty",
                    r.lo, r.hi
                )));
            }
            if r.lo < floor {
                return Err(ConfigError::Invalid(format!(
                    "hash_source_bits must lie above the cluster/array select bits (lowest allowed bit {floor}, got {})",
                    r.lo
                )));
            }
            if r.hi > geo.address_bits {
                return Err(ConfigError::Invalid(format!(
                    "hash_source_bits exceed the {}-bit address space",
                    geo.address_bits
                )));
            }
        }
        Ok(())
    }

    /// Hash input range actually used by the xor-fold scheme.
    pub fn hash_source(&self) -> BitRange {
        self.scheme.hash_source_bits.unwrap_or_else(|| {
            let g = derive_geometry(&self.topology);
            BitRange {
                lo: g.row.lo,
                hi: g.row.hi(),
            }
        })
    }
}

/// One contiguous bit-field of a byte address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub lo: u32,
    pub width: u32,
}

impl Field {
    /// One past the highest bit.
    pub fn hi(&self) -> u32 {
        self.lo + self.width
    }

    pub fn extract(&self, addr: u64) -> u64 {
        if self.width == 0 {
            0
        } else {
            (addr >> self.lo) & ((1u64 << self.width) - 1)
        }
    }

    pub fn insert(&self, value: u64) -> u64 {
        if self.width == 0 {
            0
        } else {
            value << self.lo
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.width == 0 {
            write!(f, "[-]")
        } else {
            write!(f, "[{}:{}]", self.hi() - 1, self.lo)
        }
    }
}

/// Address bit layout, low to high: beat offset, cluster, array, bank, row,
/// sub-bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressGeometry {
    pub offset: Field,
    pub cluster: Field,
    pub array: Field,
    pub bank: Field,
    pub row: Field,
    pub subbank: Field,
    pub address_bits: u32,
}

impl AddressGeometry {
    pub fn fields(&self) -> [(&'static str, Field); 6] {
        [
            ("offset", self.offset),
            ("cluster", self.cluster),
            ("array", self.array),
            ("bank", self.bank),
            ("row", self.row),
            ("subbank", self.subbank),
        ]
    }
}

fn log2(v: u64) -> u32 {
    debug_assert!(v.is_power_of_two());
    v.trailing_zeros()
}

pub fn derive_geometry(topo: &TopologyConfig) -> AddressGeometry {
    let mut lo = 0;
    let mut next = |width: u32| {
        let f = Field { lo, width };
        lo += width;
        f
    };
    let offset = next(log2(topo.beat_bytes));
    let cluster = next(log2(topo.clusters as u64));
    let array = next(log2(topo.arrays_per_cluster as u64));
    let bank = next(log2(topo.banks_per_array as u64));
    let row = next(log2(topo.rows_per_subbank()));
    let subbank = next(log2(topo.subbanks_per_bank as u64));
    AddressGeometry {
        offset,
        cluster,
        array,
        bank,
        row,
        subbank,
        address_bits: lo,
    }
}

/// Result of parsing a config document: the validated memory configuration
/// plus the raw `workload.*` entries, which the workload module interprets.
#[derive(Debug, Clone, Default)]
pub struct ConfigDocument {
    pub sim: SimConfig,
    pub workload: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses an unsigned integer with an optional `KiB`/`MiB`/`GiB` suffix or a
/// `0x` prefix.
pub fn parse_size(text: &str) -> Result<u64, String> {
    let t = text.trim();
    let (num, mult) = if let Some(n) = t.strip_suffix("GiB") {
        (n, GIB)
    } else if let Some(n) = t.strip_suffix("MiB") {
        (n, MIB)
    } else if let Some(n) = t.strip_suffix("KiB") {
        (n, KIB)
    } else {
        (t, 1)
    };
    let num = num.trim().replace('_', "");
    let v = if let Some(hex) = num.strip_prefix("0x").or_else(|| num.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).map_err(|e| format!("`{text}`: {e}"))?
    } else {
        num.parse::<u64>().map_err(|e| format!("`{text}`: {e}"))?
    };
    v.checked_mul(mult)
        .ok_or_else(|| format!("`{text}` overflows 64 bits"))
}

/// Splits a document into trimmed `key = value` entries, dropping comments
/// and blank lines.
pub fn split_entries(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut out: Vec<Entry> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(ConfigError::Parse {
                line,
                key: content.to_string(),
                reason: "expected `key = value`".into(),
            });
        };
        let key = k.trim().to_string();
        let value = v.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Parse {
                line,
                key,
                reason: "empty key".into(),
            });
        }
        if out.iter().any(|e| e.key == key) {
            return Err(ConfigError::DuplicateKey { line, key });
        }
        out.push(Entry { line, key, value });
    }
    Ok(out)
}

fn parse_bit_range(text: &str) -> Result<BitRange, String> {
    let (a, b) = text
        .split_once("..")
        .ok_or_else(|| format!("`{text}`: expected `lo..hi`"))?;
    let lo = a
        .trim()
        .parse::<u32>()
        .map_err(|e| format!("`{text}`: {e}"))?;
    let hi = b
        .trim()
        .parse::<u32>()
        .map_err(|e| format!("`{text}`: {e}"))?;
    Ok(BitRange { lo, hi })
}

/// Parses and validates a config document. Missing keys keep the prototype
/// defaults; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ConfigDocument, ConfigError> {
    let mut sim = SimConfig::default();
    let mut workload = Vec::new();
    for e in split_entries(text)? {
        if e.key.starts_with("workload.") {
            workload.push(e);
            continue;
        }
        apply_entry(&mut sim, &e)?;
    }
    sim.validate()?;
    Ok(ConfigDocument { sim, workload })
}

/// Sets one memory-configuration key. The result is not validated.
pub fn apply_entry(sim: &mut SimConfig, e: &Entry) -> Result<(), ConfigError> {
    let bad = |reason: String| ConfigError::Parse {
        line: e.line,
        key: e.key.clone(),
        reason,
    };
    let size = || parse_size(&e.value).map_err(bad);
    let t = &mut sim.topology;
    let tm = &mut sim.timing;
    match e.key.as_str() {
        "masters" => t.masters = size()? as usize,
        "clusters" => t.clusters = size()? as usize,
        "arrays_per_cluster" => t.arrays_per_cluster = size()? as usize,
        "banks_per_array" => t.banks_per_array = size()? as usize,
        "subbanks_per_bank" => t.subbanks_per_bank = size()? as usize,
        "beat_bytes" => t.beat_bytes = size()?,
        "total_bytes" => t.total_bytes = size()?,
        "fabric_clock_per_mem_clock" => tm.fabric_clock_per_mem_clock = size()?,
        "request_path_stages" => tm.request_path_stages = size()?,
        "memory_access_mem_cycles" => tm.memory_access_mem_cycles = size()?,
        "response_path_stages" => tm.response_path_stages = size()?,
        "outstanding_per_port" => tm.outstanding_per_port = size()? as usize,
        "split_buffer_beats" => tm.split_buffer_beats = size()? as usize,
        "subbank_queue_depth" => tm.subbank_queue_depth = size()? as usize,
        "scheme_kind" => {
            sim.scheme.kind = match e.value.as_str() {
                "identity" => SchemeKind::Identity,
                "xor-fold" => SchemeKind::XorFold,
                other => return Err(bad(format!("`{other}` is not one of identity, xor-fold"))),
            }
        }
        "hash_source_bits" => {
            sim.scheme.hash_source_bits = Some(parse_bit_range(&e.value).map_err(bad)?)
        }
        _ => {
            return Err(ConfigError::UnknownKey {
                line: e.line,
                key: e.key.clone(),
            })
        }
    }
    Ok(())
}
