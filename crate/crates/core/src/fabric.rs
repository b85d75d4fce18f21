//! Request split network and response merge network.
//!
//! Every master owns a private request path (split by cluster, then by
//! array) and a private response tree (merge arrays into clusters, then
//! clusters into the port). Nothing in here is shared between masters, so
//! contention can only appear at the sub-bank arbiters in `memory` and, per
//! master, at its own merge nodes.
//!
//! Both paths are modelled as per-output FIFOs whose entries carry the cycle
//! at which they may move on. Each FIFO forwards at most one entry per cycle.

use std::collections::VecDeque;
use std::io::Write;

use crate::config::SimConfig;
use crate::protocol::{Beat, Parent};

/// Splits a stage count into three positive parts, the first taking the
/// remainder.
pub fn split_stages(total: u64) -> [u64; 3] {
    let b = total / 3;
    [total - 2 * b, b, b]
}

#[derive(Debug, Clone)]
struct Timed<T> {
    ready: u64,
    item: T,
}

/// Where a beat leaving the split network lands: the per-master queue of a
/// sub-bank arbiter.
pub trait DispatchSink {
    /// True if `master`'s queue in front of the beat's sub-bank has room.
    fn has_room(&self, master: usize, beat: &Beat) -> bool;
    /// Enqueues the beat; it becomes eligible for arbitration at `arrive`.
    fn dispatch(&mut self, master: usize, beat: Beat, arrive: u64);
}

/// Optional per-cycle trace of beat movements, one line each.
pub struct EventLog {
    out: Box<dyn Write + Send>,
}

impl EventLog {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        Self { out }
    }

    pub fn line(&mut self, args: std::fmt::Arguments<'_>) {
        // Debug output only; a failing sink should not stop the simulation.
        let _ = self.out.write_fmt(args);
        let _ = self.out.write_all(b"\n");
    }

    pub fn flush(&mut self) {
        let _ = self.out.flush();
    }
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("EventLog")
    }
}

/// One master's split path. The L1 and L2 queues together form the split
/// buffer and share its beat budget.
#[derive(Debug, Clone)]
pub struct RequestPath {
    master: usize,
    arrays_per_cluster: usize,
    l1: Vec<VecDeque<Timed<Beat>>>,
    l2: Vec<VecDeque<Timed<Beat>>>,
    occupancy: usize,
    capacity: usize,
    peak: usize,
    delays: [u64; 3],
}

impl RequestPath {
    pub fn new(master: usize, cfg: &SimConfig) -> Self {
        let t = &cfg.topology;
        Self {
            master,
            arrays_per_cluster: t.arrays_per_cluster,
            l1: vec![VecDeque::new(); t.clusters],
            l2: vec![VecDeque::new(); t.arrays()],
            occupancy: 0,
            capacity: cfg.timing.split_buffer_beats,
            peak: 0,
            delays: split_stages(cfg.timing.request_path_stages),
        }
    }

    pub fn occupancy(&self) -> usize {
        self.occupancy
    }

    pub fn peak_occupancy(&self) -> usize {
        self.peak
    }

    pub fn free(&self) -> usize {
        self.capacity - self.occupancy
    }

    /// Moves up to `max` beats from the front of `pending` into the split
    /// buffer. Returns how many were taken; the rest stay for a later cycle.
    pub fn inject_beats(&mut self, pending: &mut VecDeque<Beat>, max: usize, cycle: u64) -> usize {
        let mut taken = 0;
        while taken < max && self.occupancy < self.capacity {
            let Some(beat) = pending.pop_front() else {
                break;
            };
            let c = beat.location.cluster;
            self.l1[c].push_back(Timed {
                ready: cycle + self.delays[0],
                item: beat,
            });
            self.occupancy += 1;
            taken += 1;
        }
        self.peak = self.peak.max(self.occupancy);
        taken
    }

    /// Advances the path by one fabric cycle. Returns the number of beats
    /// handed to the sink.
    pub fn tick<S: DispatchSink>(
        &mut self,
        cycle: u64,
        sink: &mut S,
        mut log: Option<&mut EventLog>,
    ) -> usize {
        let mut delivered = 0;
        for (lane, q) in self.l2.iter_mut().enumerate() {
            let Some(head) = q.front() else { continue };
            if head.ready > cycle || !sink.has_room(self.master, &head.item) {
                continue;
            }
            let beat = q.pop_front().unwrap().item;
            if let Some(l) = log.as_deref_mut() {
                l.line(format_args!(
                    "{cycle} m{} dispatch lane{lane} -> bank{}.{} cmd{} beat{}",
                    self.master,
                    beat.location.bank,
                    beat.location.subbank,
                    beat.parent.cmd_id,
                    beat.beat_index
                ));
            }
            sink.dispatch(self.master, beat, cycle + self.delays[2]);
            self.occupancy -= 1;
            delivered += 1;
        }
        for (c, q) in self.l1.iter_mut().enumerate() {
            match q.front() {
                Some(h) if h.ready <= cycle => {}
                _ => continue,
            }
            let beat = q.pop_front().unwrap().item;
            let lane = c * self.arrays_per_cluster + beat.location.array;
            if let Some(l) = log.as_deref_mut() {
                l.line(format_args!(
                    "{cycle} m{} split c{c} -> lane{lane} cmd{} beat{}",
                    self.master, beat.parent.cmd_id, beat.beat_index
                ));
            }
            self.l2[lane].push_back(Timed {
                ready: cycle + self.delays[1],
                item: beat,
            });
        }
        delivered
    }
}

/// A read beat on its way back to the port.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReturnBeat {
    pub parent: Parent,
    pub beat_index: u32,
    pub payload: Vec<u8>,
}

/// One master's response merge tree plus its write-acknowledge channel.
#[derive(Debug, Clone)]
pub struct ResponseTree {
    arrays_per_cluster: usize,
    array_out: Vec<VecDeque<Timed<ReturnBeat>>>,
    cluster_q: Vec<VecDeque<Timed<ReturnBeat>>>,
    egress: VecDeque<Timed<ReturnBeat>>,
    rr_cluster: Vec<usize>,
    rr_port: usize,
    acks: VecDeque<Timed<Parent>>,
    in_flight: usize,
    delays: [u64; 3],
    ack_delay: u64,
}

impl ResponseTree {
    pub fn new(cfg: &SimConfig) -> Self {
        let t = &cfg.topology;
        Self {
            arrays_per_cluster: t.arrays_per_cluster,
            array_out: vec![VecDeque::new(); t.arrays()],
            cluster_q: vec![VecDeque::new(); t.clusters],
            egress: VecDeque::new(),
            rr_cluster: vec![0; t.clusters],
            rr_port: 0,
            acks: VecDeque::new(),
            in_flight: 0,
            delays: split_stages(cfg.timing.response_path_stages),
            ack_delay: cfg.timing.response_path_stages,
        }
    }

    /// Read beats inside the tree.
    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    pub fn pending_acks(&self) -> usize {
        self.acks.len()
    }

    /// Accepts a read beat whose data leaves array `array_id` at `done`.
    pub fn push_return(&mut self, array_id: usize, beat: ReturnBeat, done: u64) {
        self.array_out[array_id].push_back(Timed {
            ready: done + self.delays[0],
            item: beat,
        });
        self.in_flight += 1;
    }

    /// Schedules a write acknowledgement for a command whose last beat
    /// committed at `done`.
    pub fn push_ack(&mut self, parent: Parent, done: u64) {
        let ready = done + self.ack_delay;
        debug_assert!(self.acks.back().is_none_or(|b| b.ready <= ready));
        self.acks.push_back(Timed {
            ready,
            item: parent,
        });
    }

    fn grant(
        queues: &mut [VecDeque<Timed<ReturnBeat>>],
        ptr: &mut usize,
        cycle: u64,
    ) -> Option<ReturnBeat> {
        let n = queues.len();
        for k in 0..n {
            let i = (*ptr + k) % n;
            if queues[i].front().is_some_and(|h| h.ready <= cycle) {
                *ptr = (i + 1) % n;
                return queues[i].pop_front().map(|t| t.item);
            }
        }
        None
    }

    /// Advances one fabric cycle. Returns the read beat delivered to the port
    /// this cycle, if any, and the write acknowledgement, if any.
    pub fn tick(&mut self, cycle: u64) -> (Option<ReturnBeat>, Option<Parent>) {
        let delivered = match self.egress.front() {
            Some(h) if h.ready <= cycle => {
                self.in_flight -= 1;
                self.egress.pop_front().map(|t| t.item)
            }
            _ => None,
        };
        let ack = match self.acks.front() {
            Some(h) if h.ready <= cycle => self.acks.pop_front().map(|t| t.item),
            _ => None,
        };
        if let Some(b) = Self::grant(&mut self.cluster_q, &mut self.rr_port, cycle) {
            self.egress.push_back(Timed {
                ready: cycle + self.delays[2],
                item: b,
            });
        }
        let n = self.arrays_per_cluster;
        for c in 0..self.cluster_q.len() {
            let lanes = &mut self.array_out[c * n..(c + 1) * n];
            if let Some(b) = Self::grant(lanes, &mut self.rr_cluster[c], cycle) {
                self.cluster_q[c].push_back(Timed {
                    ready: cycle + self.delays[1],
                    item: b,
                });
            }
        }
        (delivered, ack)
    }
}

/// All masters' request paths and response trees.
#[derive(Debug)]
pub struct Fabric {
    pub requests: Vec<RequestPath>,
    pub responses: Vec<ResponseTree>,
    pub log: Option<EventLog>,
}

impl Fabric {
    pub fn new(cfg: &SimConfig) -> Self {
        let x = cfg.topology.masters;
        Self {
            requests: (0..x).map(|m| RequestPath::new(m, cfg)).collect(),
            responses: (0..x).map(|_| ResponseTree::new(cfg)).collect(),
            log: None,
        }
    }

    pub fn tick_request<S: DispatchSink>(&mut self, cycle: u64, sink: &mut S) -> usize {
        let mut n = 0;
        for path in &mut self.requests {
            n += path.tick(cycle, sink, self.log.as_mut());
        }
        n
    }

    /// Delivers at most one read beat and one write ack per master.
    pub fn tick_response(
        &mut self,
        cycle: u64,
    ) -> Vec<(usize, Option<ReturnBeat>, Option<Parent>)> {
        let mut out = Vec::new();
        for (m, tree) in self.responses.iter_mut().enumerate() {
            let (beat, ack) = tree.tick(cycle);
            if beat.is_some() || ack.is_some() {
                if let (Some(l), Some(b)) = (self.log.as_mut(), beat.as_ref()) {
                    l.line(format_args!(
                        "{cycle} m{m} return cmd{} beat{}",
                        b.parent.cmd_id, b.beat_index
                    ));
                }
                out.push((m, beat, ack));
            }
        }
        out
    }

    pub fn split_occupancy(&self) -> usize {
        self.requests.iter().map(|r| r.occupancy()).sum()
    }

    pub fn responses_in_flight(&self) -> usize {
        self.responses.iter().map(|r| r.in_flight()).sum()
    }

    pub fn acks_in_flight(&self) -> usize {
        self.responses.iter().map(|r| r.pending_acks()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::AddressMap;
    use crate::protocol::Op;

    /// Sink that records arrival times and can be told to refuse.
    #[derive(Default)]
    struct Probe {
        arrivals: Vec<(usize, u64, u64)>,
        refuse: bool,
    }

    impl DispatchSink for Probe {
        fn has_room(&self, _: usize, _: &Beat) -> bool {
            !self.refuse
        }
        fn dispatch(&mut self, master: usize, beat: Beat, arrive: u64) {
            self.arrivals.push((master, beat.address, arrive));
        }
    }

    fn beats(map: &AddressMap, master: usize, base: u64, n: u64) -> VecDeque<Beat> {
        map.expand_burst(base, n)
            .unwrap()
            .into_iter()
            .map(|b| Beat {
                parent: Parent { master, cmd_id: 0 },
                beat_index: b.beat_index,
                op: Op::Read,
                address: b.address,
                location: b.location,
                payload: vec![],
            })
            .collect()
    }

    fn cfg_with_request(stages: u64) -> SimConfig {
        let mut cfg = SimConfig::default();
        cfg.timing.request_path_stages = stages;
        cfg
    }

    fn run_until_empty(path: &mut RequestPath, probe: &mut Probe, from: u64) {
        let mut c = from;
        while path.occupancy() > 0 {
            path.tick(c, probe, None);
            c += 1;
            assert!(c < 1000);
        }
    }

    #[test]
    fn stage_split_sums() {
        for t in 3..40 {
            let s = split_stages(t);
            assert_eq!(s.iter().sum::<u64>(), t);
            assert!(s.iter().all(|&d| d >= 1));
        }
        assert_eq!(split_stages(18), [6, 6, 6]);
    }

    #[test]
    fn empty_fabric_takes_a_whole_burst() {
        let cfg = SimConfig::default();
        let map = AddressMap::new(&cfg);
        let mut p = RequestPath::new(0, &cfg);
        let mut q = beats(&map, 0, 0, 16);
        assert_eq!(p.inject_beats(&mut q, usize::MAX, 0), 16);
        assert!(q.is_empty());
    }

    #[test]
    fn nearly_full_buffer_takes_remainder() {
        let cfg = SimConfig::default();
        let map = AddressMap::new(&cfg);
        let mut p = RequestPath::new(0, &cfg);
        let mut fill: VecDeque<Beat> = (0..60).flat_map(|i| beats(&map, 0, i * 32, 1)).collect();
        assert_eq!(p.inject_beats(&mut fill, usize::MAX, 0), 60);
        let mut q = beats(&map, 0, 0x10000, 16);
        assert_eq!(p.inject_beats(&mut q, usize::MAX, 0), 4);
        assert_eq!(q.len(), 12);
        assert_eq!(p.occupancy(), 64);
    }

    #[test]
    fn single_beat_arrives_after_request_depth() {
        let cfg = cfg_with_request(11);
        let map = AddressMap::new(&cfg);
        let mut p = RequestPath::new(0, &cfg);
        let mut probe = Probe::default();
        p.inject_beats(&mut beats(&map, 0, 0, 1), usize::MAX, 0);
        run_until_empty(&mut p, &mut probe, 1);
        assert_eq!(probe.arrivals, vec![(0, 0, 11)]);
    }

    #[test]
    fn different_clusters_move_in_parallel() {
        let cfg = SimConfig::default();
        let map = AddressMap::new(&cfg);
        let mut p = RequestPath::new(0, &cfg);
        let mut probe = Probe::default();
        let mut q = beats(&map, 0, 0, 1);
        q.extend(beats(&map, 0, 0x20, 1));
        p.inject_beats(&mut q, usize::MAX, 0);
        run_until_empty(&mut p, &mut probe, 1);
        let times: Vec<u64> = probe.arrivals.iter().map(|a| a.2).collect();
        assert_eq!(times, vec![10, 10]);
    }

    #[test]
    fn sixteen_masters_distinct_lanes_no_contention() {
        let cfg = SimConfig::default();
        let map = AddressMap::new(&cfg);
        let mut fabric = Fabric::new(&cfg);
        let mut probe = Probe::default();
        for m in 0..16 {
            // beat m of a linear burst hits (cluster m%4, array m/4)
            let mut q = beats(&map, m, m as u64 * 32, 1);
            fabric.requests[m].inject_beats(&mut q, usize::MAX, 0);
        }
        for c in 1..=20 {
            fabric.tick_request(c, &mut probe);
        }
        assert_eq!(probe.arrivals.len(), 16);
        assert!(probe.arrivals.iter().all(|a| a.2 == 10));
    }

    #[test]
    fn backpressure_holds_beats() {
        let cfg = SimConfig::default();
        let map = AddressMap::new(&cfg);
        let mut p = RequestPath::new(0, &cfg);
        let mut probe = Probe {
            refuse: true,
            ..Probe::default()
        };
        p.inject_beats(&mut beats(&map, 0, 0, 16), usize::MAX, 0);
        for c in 1..50 {
            p.tick(c, &mut probe, None);
        }
        assert_eq!(p.occupancy(), 16);
        probe.refuse = false;
        run_until_empty(&mut p, &mut probe, 50);
        assert_eq!(probe.arrivals.len(), 16);
    }

    fn rb(cmd: u64, beat: u32) -> ReturnBeat {
        ReturnBeat {
            parent: Parent {
                master: 0,
                cmd_id: cmd,
            },
            beat_index: beat,
            payload: vec![],
        }
    }

    fn drain(tree: &mut ResponseTree, from: u64) -> Vec<(u64, u32)> {
        let mut out = vec![];
        let mut c = from;
        while tree.in_flight() > 0 {
            if let (Some(b), _) = tree.tick(c) {
                out.push((c, b.beat_index));
            }
            c += 1;
            assert!(c < 1000);
        }
        out
    }

    #[test]
    fn single_return_takes_response_depth() {
        let cfg = SimConfig::default();
        let mut t = ResponseTree::new(&cfg);
        t.push_return(5, rb(0, 0), 100);
        assert_eq!(drain(&mut t, 100), vec![(118, 0)]);
    }

    #[test]
    fn four_simultaneous_returns_round_robin() {
        let cfg = SimConfig::default();
        let mut t = ResponseTree::new(&cfg);
        // one beat from each cluster, array 0
        for c in 0..4u32 {
            t.push_return(c as usize * 4, rb(0, c), 100);
        }
        assert_eq!(
            drain(&mut t, 100),
            vec![(118, 0), (119, 1), (120, 2), (121, 3)]
        );
    }

    #[test]
    fn separate_trees_do_not_interfere() {
        let cfg = SimConfig::default();
        let mut a = ResponseTree::new(&cfg);
        let mut b = ResponseTree::new(&cfg);
        a.push_return(0, rb(0, 0), 10);
        b.push_return(0, rb(0, 0), 10);
        b.push_return(1, rb(0, 1), 10);
        assert_eq!(drain(&mut a, 10), vec![(28, 0)]);
        assert_eq!(drain(&mut b, 10), vec![(28, 0), (29, 1)]);
    }

    #[test]
    fn ack_after_response_depth() {
        let cfg = SimConfig::default();
        let mut t = ResponseTree::new(&cfg);
        let p = Parent {
            master: 0,
            cmd_id: 4,
        };
        t.push_ack(p, 14);
        for c in 14..32 {
            assert_eq!(t.tick(c).1, None);
        }
        assert_eq!(t.tick(32).1, Some(p));
    }
}
