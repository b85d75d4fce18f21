use proptest::prelude::*;

use smsim::addressing::{AddressMap, BURST_LENGTHS};
use smsim::config::{SchemeKind, SimConfig};
use smsim::engine::run;
use smsim::protocol::{Acceptance, CommandRequest, Op, Parent, PortState, ReadReturn, StallReason};
use smsim::workload::{BurstMix, WorkloadSpec};

fn scheme() -> impl Strategy<Value = SchemeKind> {
    prop_oneof![Just(SchemeKind::Identity), Just(SchemeKind::XorFold)]
}

proptest! {
    #[test]
    fn decompose_compose_round_trip(addr in 0u64..(32 << 20), kind in scheme()) {
        let mut cfg = SimConfig::default();
        cfg.scheme.kind = kind;
        let map = AddressMap::new(&cfg);
        let loc = map.decompose(addr).unwrap();
        prop_assert_eq!(map.compose(&loc).unwrap(), addr);
    }

    #[test]
    fn burst_beats_are_consecutive(beat in 0u64..((32 << 20) / 32 - 16), which in 0usize..4, kind in scheme()) {
        let mut cfg = SimConfig::default();
        cfg.scheme.kind = kind;
        let map = AddressMap::new(&cfg);
        let beats = BURST_LENGTHS[which];
        let b = map.expand_burst(beat * 32, beats).unwrap();
        prop_assert_eq!(b.len() as u64, beats);
        for (i, x) in b.iter().enumerate() {
            prop_assert_eq!(x.address, beat * 32 + i as u64 * 32);
            prop_assert_eq!(x.beat_index as usize, i);
        }
    }

    /// A channel never holds more than `limit` commands, and a credit stall
    /// happens exactly when it is full.
    #[test]
    fn credit_law(limit in 1usize..6, steps in proptest::collection::vec((any::<bool>(), any::<bool>(), 0usize..4), 1..200)) {
        let map = AddressMap::new(&SimConfig::default());
        let mut port = PortState::new(0, limit, 32);
        let mut live: Vec<(u64, Op, u64)> = Vec::new();
        let mut slot = 0u64;
        for (cycle, (is_read, retire, which)) in steps.into_iter().enumerate() {
            let cycle = cycle as u64;
            let op = if is_read { Op::Read } else { Op::Write };
            let beats = BURST_LENGTHS[which];
            // distinct 512-byte slots keep ordering stalls out of the way
            let req = CommandRequest { op, base: slot * 512, beats };
            let full = port.outstanding(op) == limit;
            match port.try_accept(&req, cycle, &map).unwrap() {
                Acceptance::Accepted(c) => {
                    prop_assert!(!full);
                    live.push((c.cmd_id, op, beats));
                    slot += 1;
                }
                Acceptance::Stalled(r) => {
                    prop_assert_eq!(r, StallReason::Credits);
                    prop_assert!(full);
                }
            }
            prop_assert!(port.outstanding(Op::Read) <= limit);
            prop_assert!(port.outstanding(Op::Write) <= limit);
            if retire && !live.is_empty() {
                let (id, op, beats) = live.remove(0);
                let parent = Parent { master: 0, cmd_id: id };
                match op {
                    Op::Read => {
                        for i in (0..beats as u32).rev() {
                            port.record_return(&ReadReturn { parent, beat_index: i, payload: vec![], return_cycle: cycle }).unwrap();
                        }
                    }
                    Op::Write => {
                        for _ in 0..beats {
                            port.record_write_commit(id).unwrap();
                        }
                        port.record_write_ack(parent, cycle).unwrap();
                    }
                }
            }
        }
        prop_assert_eq!(port.in_flight_len(), live.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Small random runs always drain, conserve beats and repeat exactly.
    #[test]
    fn runs_drain_and_repeat(
        masters in 1usize..5,
        outstanding in 1usize..5,
        transactions in 0u64..40,
        rate in 0.2f64..=1.0,
        seed in any::<u64>(),
        kind in scheme(),
    ) {
        let mut cfg = SimConfig::default();
        cfg.scheme.kind = kind;
        cfg.timing.outstanding_per_port = outstanding;
        let mut wl = WorkloadSpec::uniform(masters, transactions);
        wl.burst_mix = BurstMix::parse("1:0.25,4:0.25,8:0.25,16:0.25").unwrap();
        wl.rate = rate;
        wl.seed = seed;
        // overlapping regions exercise the ordering rules too
        wl.region_stride = 4096;
        wl.region_bytes = 8192;
        let a = run(&cfg, &wl, 1_000_000).unwrap();
        prop_assert!(a.drained);
        prop_assert_eq!(a.beats_injected, a.beats_retired);
        let done: u64 = a.ports.iter().map(|p| p.completed_reads + p.completed_writes).sum();
        prop_assert_eq!(done, masters as u64 * transactions);
        let b = run(&cfg, &wl, 1_000_000).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
    }
}
