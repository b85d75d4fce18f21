//! SRAM arrays: dispatch into logic banks, per-sub-bank arbitration and the
//! backing byte store.
//!
//! Every sub-bank has its own arbiter with one queue per master. An arbiter
//! looks only at its own queues, which is what makes traffic on disjoint
//! sub-banks timing-independent.

use std::collections::{HashMap, VecDeque};
use std::io::{self, Write};

use crate::addressing::{AddressMap, Location};
use crate::config::SimConfig;
use crate::fabric::DispatchSink;
use crate::protocol::{Beat, IntegrityFault, Op};

#[derive(Debug, Clone)]
struct Queued {
    arrive: u64,
    beat: Beat,
}

/// Outcome of one granted access.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Serviced {
    pub master: usize,
    pub array_id: usize,
    pub grant_cycle: u64,
    /// Fabric cycle at which read data (or the write commit) is available.
    pub done_cycle: u64,
    /// The beat; for reads the payload now holds the data read.
    pub beat: Beat,
}

#[derive(Debug, Clone)]
pub struct SubBankState {
    queues: Vec<VecDeque<Queued>>,
    rr: usize,
    busy_until: u64,
    queued: usize,
    storage: HashMap<u64, Box<[u8]>>,
}

impl SubBankState {
    pub fn new(masters: usize) -> Self {
        Self {
            queues: vec![VecDeque::new(); masters],
            rr: 0,
            busy_until: 0,
            queued: 0,
            storage: HashMap::new(),
        }
    }

    pub fn queued(&self) -> usize {
        self.queued
    }

    pub fn queue_len(&self, master: usize) -> usize {
        self.queues[master].len()
    }

    pub fn pointer(&self) -> usize {
        self.rr
    }

    pub fn set_pointer(&mut self, rr: usize) {
        self.rr = rr % self.queues.len();
    }

    fn enqueue(&mut self, master: usize, beat: Beat, arrive: u64) {
        self.queues[master].push_back(Queued { arrive, beat });
        self.queued += 1;
    }

    /// Masters whose head-of-queue beat has reached the arbiter by `cycle`.
    pub fn eligible(&self, cycle: u64) -> usize {
        self.queues
            .iter()
            .filter(|q| q.front().is_some_and(|h| h.arrive <= cycle))
            .count()
    }

    /// One memory-clock step. Grants the next eligible master after the
    /// round-robin pointer and performs the access against the byte store.
    pub fn arbitrate_and_access(
        &mut self,
        cycle: u64,
        occupancy: u64,
        latency: u64,
        beat_bytes: u64,
    ) -> Option<(usize, u64, Beat)> {
        if cycle < self.busy_until {
            return None;
        }
        let n = self.queues.len();
        let master = (0..n)
            .map(|k| (self.rr + k) % n)
            .find(|&m| self.queues[m].front().is_some_and(|h| h.arrive <= cycle))?;
        self.rr = (master + 1) % n;
        let mut beat = self.queues[master].pop_front().unwrap().beat;
        self.queued -= 1;
        self.busy_until = cycle + occupancy;
        let row = beat.location.row;
        match beat.op {
            Op::Write => {
                self.storage
                    .insert(row, std::mem::take(&mut beat.payload).into_boxed_slice());
            }
            Op::Read => {
                beat.payload = match self.storage.get(&row) {
                    Some(d) => d.to_vec(),
                    None => vec![0; beat_bytes as usize],
                };
            }
        }
        Some((master, cycle + latency, beat))
    }

    pub fn read_row(&self, row: u64) -> Option<&[u8]> {
        self.storage.get(&row).map(|b| &b[..])
    }
}

/// One SRAM array: `K x S` sub-banks behind a dispatch stage.
#[derive(Debug, Clone)]
pub struct SramArrayState {
    pub cluster: usize,
    pub array: usize,
    subbanks_per_bank: usize,
    pub subbanks: Vec<SubBankState>,
}

impl SramArrayState {
    pub fn new(cluster: usize, array: usize, cfg: &SimConfig) -> Self {
        let t = &cfg.topology;
        Self {
            cluster,
            array,
            subbanks_per_bank: t.subbanks_per_bank,
            subbanks: (0..t.subbanks_per_array())
                .map(|_| SubBankState::new(t.masters))
                .collect(),
        }
    }

    pub fn slot(&self, loc: &Location) -> usize {
        loc.bank * self.subbanks_per_bank + loc.subbank
    }

    /// Routes a beat to the queue of its (bank, sub-bank) for `master`.
    pub fn dispatch(
        &mut self,
        master: usize,
        beat: Beat,
        arrive: u64,
    ) -> Result<usize, IntegrityFault> {
        let loc = beat.location;
        if loc.cluster != self.cluster || loc.array != self.array {
            return Err(IntegrityFault::Other(format!(
                "beat for cluster {} array {} dispatched to cluster {} array {}",
                loc.cluster, loc.array, self.cluster, self.array
            )));
        }
        let slot = self.slot(&loc);
        self.subbanks[slot].enqueue(master, beat, arrive);
        Ok(slot)
    }
}

/// Every SRAM array, plus bookkeeping for the sub-banks with queued work.
#[derive(Debug)]
pub struct Memory {
    arrays: Vec<SramArrayState>,
    arrays_per_cluster: usize,
    subbanks_per_array: usize,
    queue_depth: usize,
    occupancy: u64,
    latency: u64,
    beat_bytes: u64,
    active: Vec<u64>,
    queued: usize,
    conflicts: u64,
    fault: Option<IntegrityFault>,
}

impl Memory {
    pub fn new(cfg: &SimConfig) -> Self {
        let t = &cfg.topology;
        let tm = &cfg.timing;
        let arrays = (0..t.clusters)
            .flat_map(|c| (0..t.arrays_per_cluster).map(move |a| (c, a)))
            .map(|(c, a)| SramArrayState::new(c, a, cfg))
            .collect();
        Self {
            arrays,
            arrays_per_cluster: t.arrays_per_cluster,
            subbanks_per_array: t.subbanks_per_array(),
            queue_depth: tm.subbank_queue_depth,
            // one new access per memory cycle, pipelined over the access latency
            occupancy: tm.fabric_clock_per_mem_clock,
            latency: tm.memory_access_mem_cycles * tm.fabric_clock_per_mem_clock,
            beat_bytes: t.beat_bytes,
            active: vec![0; t.total_subbanks().div_ceil(64)],
            queued: 0,
            conflicts: 0,
            fault: None,
        }
    }

    pub fn array_id(&self, loc: &Location) -> usize {
        loc.cluster * self.arrays_per_cluster + loc.array
    }

    fn global_slot(&self, loc: &Location) -> usize {
        let a = self.array_id(loc);
        a * self.subbanks_per_array + self.arrays[a].slot(loc)
    }

    pub fn subbank(&self, loc: &Location) -> &SubBankState {
        let a = self.array_id(loc);
        &self.arrays[a].subbanks[self.arrays[a].slot(loc)]
    }

    pub fn subbank_mut(&mut self, loc: &Location) -> &mut SubBankState {
        let a = self.array_id(loc);
        let s = self.arrays[a].slot(loc);
        &mut self.arrays[a].subbanks[s]
    }

    /// Beats waiting in sub-bank queues.
    pub fn queued(&self) -> usize {
        self.queued
    }

    /// Memory ticks on which a sub-bank had more than one master ready.
    pub fn bank_conflicts(&self) -> u64 {
        self.conflicts
    }

    pub fn take_fault(&mut self) -> Option<IntegrityFault> {
        self.fault.take()
    }

    /// One memory-clock edge at fabric cycle `cycle`. Sub-banks are visited in
    /// index order so results do not depend on the order work arrived in.
    pub fn tick(&mut self, cycle: u64) -> Vec<Serviced> {
        let mut out = Vec::new();
        for w in 0..self.active.len() {
            let mut bits = self.active[w];
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let g = w * 64 + b;
                let (a, s) = (g / self.subbanks_per_array, g % self.subbanks_per_array);
                let sb = &mut self.arrays[a].subbanks[s];
                if sb.eligible(cycle) > 1 {
                    self.conflicts += 1;
                }
                if let Some((master, done, beat)) =
                    sb.arbitrate_and_access(cycle, self.occupancy, self.latency, self.beat_bytes)
                {
                    self.queued -= 1;
                    out.push(Serviced {
                        master,
                        array_id: a,
                        grant_cycle: cycle,
                        done_cycle: done,
                        beat,
                    });
                }
                if sb.queued() == 0 {
                    self.active[w] &= !(1u64 << b);
                }
            }
        }
        out
    }

    /// Writes the full memory image, one byte per address, zeros where
    /// nothing was ever written.
    pub fn dump<W: Write>(&self, map: &AddressMap, out: &mut W) -> io::Result<()> {
        let image = self.image(map);
        let beat = self.beat_bytes as usize;
        let zero = vec![0u8; beat];
        let mut addr = 0u64;
        for (&a, data) in &image {
            while addr < a {
                out.write_all(&zero)?;
                addr += beat as u64;
            }
            out.write_all(data)?;
            addr += beat as u64;
        }
        while addr < map.total_bytes() {
            out.write_all(&zero)?;
            addr += beat as u64;
        }
        Ok(())
    }

    /// Every written beat keyed by its byte address.
    pub fn image(&self, map: &AddressMap) -> std::collections::BTreeMap<u64, Vec<u8>> {
        let mut image = std::collections::BTreeMap::new();
        for arr in &self.arrays {
            for (slot, sb) in arr.subbanks.iter().enumerate() {
                for (&row, data) in &sb.storage {
                    let loc = Location {
                        cluster: arr.cluster,
                        array: arr.array,
                        bank: slot / arr.subbanks_per_bank,
                        subbank: slot % arr.subbanks_per_bank,
                        row,
                        beat_offset: 0,
                    };
                    let addr = map
                        .compose(&loc)
                        .expect("stored row maps back to an address");
                    image.insert(addr, data.to_vec());
                }
            }
        }
        image
    }
}

impl DispatchSink for Memory {
    fn has_room(&self, master: usize, beat: &Beat) -> bool {
        self.subbank(&beat.location).queue_len(master) < self.queue_depth
    }

    fn dispatch(&mut self, master: usize, beat: Beat, arrive: u64) {
        let a = self.array_id(&beat.location);
        let g = self.global_slot(&beat.location);
        match self.arrays[a].dispatch(master, beat, arrive) {
            Ok(_) => {
                self.queued += 1;
                self.active[g / 64] |= 1u64 << (g % 64);
            }
            Err(e) => {
                self.fault.get_or_insert(e);
            }
        }
    }
}
