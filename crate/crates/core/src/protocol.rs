//! Master-port transaction protocol: credit-gated command acceptance, beat
//! bookkeeping for chunked read returns, and write completion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::{AddressError, AddressMap, Location};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Read,
    Write,
}

impl Op {
    pub fn index(self) -> usize {
        match self {
            Op::Read => 0,
            Op::Write => 1,
        }
    }
}

/// A command as offered by a traffic source, before the port numbers it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandRequest {
    pub op: Op,
    pub base: u64,
    pub beats: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Command {
    pub master: usize,
    pub op: Op,
    pub base: u64,
    pub beats: u64,
    pub cmd_id: u64,
    pub issue_cycle: u64,
}

impl Command {
    pub fn end(&self, beat_bytes: u64) -> u64 {
        self.base + self.beats * beat_bytes
    }
}

/// Identifies the command a beat belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Parent {
    pub master: usize,
    pub cmd_id: u64,
}

/// A single-beat fragment of a burst travelling through the fabric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Beat {
    pub parent: Parent,
    pub beat_index: u32,
    pub op: Op,
    pub address: u64,
    pub location: Location,
    /// Write data; empty for reads.
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadReturn {
    pub parent: Parent,
    pub beat_index: u32,
    pub payload: Vec<u8>,
    pub return_cycle: u64,
}

/// Deterministic write data for one beat of a generated command.
pub fn payload_for(parent: Parent, address: u64, beat_bytes: u64) -> Vec<u8> {
    let salt = (parent.master as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(parent.cmd_id.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    (0..beat_bytes)
        .map(|j| {
            let mut x = salt ^ (address + j);
            x ^= x >> 31;
            x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
            (x >> 56) as u8
        })
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("master {master}: malformed command: {source}")]
    Malformed {
        master: usize,
        #[source]
        source: AddressError,
    },
}

/// Broken bookkeeping somewhere in the fabric or memory model. Runs abort on
/// these.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IntegrityFault {
    #[error("master {master}: return for unknown command {cmd_id}")]
    UnknownParent { master: usize, cmd_id: u64 },
    #[error("master {master}: duplicate return of beat {beat} for command {cmd_id}")]
    DuplicateBeat {
        master: usize,
        cmd_id: u64,
        beat: u32,
    },
    #[error("master {master}: command {cmd_id} is a {found:?}, expected {expected:?}")]
    WrongOp {
        master: usize,
        cmd_id: u64,
        expected: Op,
        found: Op,
    },
    #[error("master {master}: write {cmd_id} acknowledged before all beats committed")]
    EarlyAck { master: usize, cmd_id: u64 },
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StallReason {
    /// The channel has `outstanding_per_port` commands in flight.
    Credits,
    /// An older in-flight command overlaps and one of the two is a write.
    Ordering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acceptance {
    Accepted(Command),
    Stalled(StallReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletedCommand {
    pub command: Command,
    /// Cycle the first read beat reached the port (reads only).
    pub first_return_cycle: Option<u64>,
    pub complete_cycle: u64,
}

impl CompletedCommand {
    pub fn latency(&self) -> u64 {
        self.complete_cycle - self.command.issue_cycle
    }

    pub fn first_beat_latency(&self) -> Option<u64> {
        self.first_return_cycle
            .map(|c| c - self.command.issue_cycle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReturnStatus {
    Pending,
    Complete(CompletedCommand),
}

#[derive(Debug, Clone)]
struct InFlight {
    command: Command,
    returned: u32,
    returned_count: u32,
    committed: u32,
    first_return: Option<u64>,
}

/// Per-port transaction state. Reads and writes travel on independent
/// channels and each channel holds up to `limit` commands in flight.
#[derive(Debug, Clone)]
pub struct PortState {
    master: usize,
    limit: usize,
    beat_bytes: u64,
    next_cmd_id: u64,
    outstanding: [usize; 2],
    in_flight: BTreeMap<u64, InFlight>,
}

impl PortState {
    pub fn new(master: usize, limit: usize, beat_bytes: u64) -> Self {
        Self {
            master,
            limit,
            beat_bytes,
            next_cmd_id: 0,
            outstanding: [0, 0],
            in_flight: BTreeMap::new(),
        }
    }

    pub fn master(&self) -> usize {
        self.master
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn outstanding(&self, op: Op) -> usize {
        self.outstanding[op.index()]
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.len()
    }

    /// Read beats requested by in-flight reads that have not come back yet.
    pub fn pending_read_beats(&self) -> u64 {
        self.in_flight
            .values()
            .filter(|f| f.command.op == Op::Read)
            .map(|f| f.command.beats - f.returned_count as u64)
            .sum()
    }

    fn conflicts(&self, req: &CommandRequest) -> bool {
        let end = req.base + req.beats * self.beat_bytes;
        self.in_flight.values().any(|f| {
            let c = &f.command;
            (c.op == Op::Write || req.op == Op::Write)
                && c.base < end
                && req.base < c.end(self.beat_bytes)
        })
    }

    /// Offers a command to the port on `cycle`.
    pub fn try_accept(
        &mut self,
        req: &CommandRequest,
        cycle: u64,
        map: &AddressMap,
    ) -> Result<Acceptance, ProtocolError> {
        map.check_burst(req.base, req.beats)
            .map_err(|source| ProtocolError::Malformed {
                master: self.master,
                source,
            })?;
        if self.outstanding[req.op.index()] >= self.limit {
            return Ok(Acceptance::Stalled(StallReason::Credits));
        }
        if self.conflicts(req) {
            return Ok(Acceptance::Stalled(StallReason::Ordering));
        }
        let command = Command {
            master: self.master,
            op: req.op,
            base: req.base,
            beats: req.beats,
            cmd_id: self.next_cmd_id,
            issue_cycle: cycle,
        };
        self.next_cmd_id += 1;
        self.outstanding[req.op.index()] += 1;
        self.in_flight.insert(
            command.cmd_id,
            InFlight {
                command,
                returned: 0,
                returned_count: 0,
                committed: 0,
                first_return: None,
            },
        );
        Ok(Acceptance::Accepted(command))
    }

    fn lookup(&mut self, cmd_id: u64, op: Op) -> Result<&mut InFlight, IntegrityFault> {
        let master = self.master;
        let f = self
            .in_flight
            .get_mut(&cmd_id)
            .ok_or(IntegrityFault::UnknownParent { master, cmd_id })?;
        if f.command.op != op {
            return Err(IntegrityFault::WrongOp {
                master,
                cmd_id,
                expected: op,
                found: f.command.op,
            });
        }
        Ok(f)
    }

    fn retire(&mut self, cmd_id: u64, cycle: u64) -> CompletedCommand {
        let f = self
            .in_flight
            .remove(&cmd_id)
            .expect("retiring unknown command");
        self.outstanding[f.command.op.index()] -= 1;
        CompletedCommand {
            command: f.command,
            first_return_cycle: f.first_return,
            complete_cycle: cycle,
        }
    }

    /// Marks one read beat as delivered to the port.
    pub fn record_return(&mut self, ret: &ReadReturn) -> Result<ReturnStatus, IntegrityFault> {
        let master = self.master;
        let cmd_id = ret.parent.cmd_id;
        if ret.parent.master != master {
            return Err(IntegrityFault::UnknownParent {
                master: ret.parent.master,
                cmd_id,
            });
        }
        let f = self.lookup(cmd_id, Op::Read)?;
        let bit = 1u32 << ret.beat_index;
        if ret.beat_index as u64 >= f.command.beats || f.returned & bit != 0 {
            return Err(IntegrityFault::DuplicateBeat {
                master,
                cmd_id,
                beat: ret.beat_index,
            });
        }
        f.returned |= bit;
        f.returned_count += 1;
        f.first_return.get_or_insert(ret.return_cycle);
        if f.returned_count as u64 == f.command.beats {
            Ok(ReturnStatus::Complete(
                self.retire(cmd_id, ret.return_cycle),
            ))
        } else {
            Ok(ReturnStatus::Pending)
        }
    }

    /// Notes that one write beat has been committed to its bank. Returns true
    /// once every beat of the command is in memory.
    pub fn record_write_commit(&mut self, cmd_id: u64) -> Result<bool, IntegrityFault> {
        let master = self.master;
        let f = self.lookup(cmd_id, Op::Write)?;
        f.committed += 1;
        if f.committed as u64 > f.command.beats {
            return Err(IntegrityFault::Other(format!(
                "master {master}: write {cmd_id} committed more beats than it carries"
            )));
        }
        Ok(f.committed as u64 == f.command.beats)
    }

    pub fn record_write_ack(
        &mut self,
        parent: Parent,
        cycle: u64,
    ) -> Result<CompletedCommand, IntegrityFault> {
        let master = self.master;
        let f = self.lookup(parent.cmd_id, Op::Write)?;
        if (f.committed as u64) < f.command.beats {
            return Err(IntegrityFault::EarlyAck {
                master,
                cmd_id: parent.cmd_id,
            });
        }
        Ok(self.retire(parent.cmd_id, cycle))
    }
}
