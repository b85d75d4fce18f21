//! Split-and-dispatch address decomposition.
//!
//! The lowest bits above the beat offset select the cluster and then the
//! array, so consecutive beats of a linear burst fan out over all clusters
//! first and then over the arrays inside each cluster. Bank, row and
//! sub-bank follow; the sub-bank select sits at the very top so that coarse
//! address regions map to disjoint arbiters.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{derive_geometry, AddressGeometry, BitRange, Field, SchemeKind, SimConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddressError {
    #[error("address {addr:#x} outside the {limit:#x}-byte memory")]
    OutOfRange { addr: u64, limit: u64 },
    #[error("burst base {addr:#x} is not aligned to the {beat_bytes}-byte beat")]
    Unaligned { addr: u64, beat_bytes: u64 },
    #[error("unsupported burst length {0} (expected 1, 4, 8 or 16)")]
    BadBurst(u64),
    #[error("location field `{field}` = {value} out of range (limit {limit})")]
    FieldOutOfRange {
        field: &'static str,
        value: u64,
        limit: u64,
    },
}

/// Burst lengths accepted at a master port.
pub const BURST_LENGTHS: [u64; 4] = [1, 4, 8, 16];

pub fn is_supported_burst(beats: u64) -> bool {
    BURST_LENGTHS.contains(&beats)
}

/// Physical placement of one byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Location {
    pub cluster: usize,
    pub array: usize,
    pub bank: usize,
    pub subbank: usize,
    pub row: u64,
    pub beat_offset: u64,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cluster {} array {} bank {} subbank {} row {} offset {}",
            self.cluster, self.array, self.bank, self.subbank, self.row, self.beat_offset
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocatedBeat {
    pub beat_index: u32,
    pub address: u64,
    pub location: Location,
}

/// Geometry plus interleaving scheme, with the derived constants cached.
#[derive(Debug, Clone, Copy)]
pub struct AddressMap {
    geo: AddressGeometry,
    kind: SchemeKind,
    hash_src: BitRange,
    total_bytes: u64,
    beat_bytes: u64,
    clusters: usize,
    arrays_per_cluster: usize,
    banks_per_array: usize,
    subbanks_per_bank: usize,
    rows: u64,
}

/// XOR-folds `value` down to `width` bits.
fn fold(mut value: u64, width: u32) -> u64 {
    if width == 0 {
        return 0;
    }
    let mask = (1u64 << width) - 1;
    let mut h = 0;
    while value != 0 {
        h ^= value & mask;
        value >>= width;
    }
    h
}

impl AddressMap {
    pub fn new(cfg: &SimConfig) -> Self {
        let t = &cfg.topology;
        Self {
            geo: derive_geometry(t),
            kind: cfg.scheme.kind,
            hash_src: cfg.hash_source(),
            total_bytes: t.total_bytes,
            beat_bytes: t.beat_bytes,
            clusters: t.clusters,
            arrays_per_cluster: t.arrays_per_cluster,
            banks_per_array: t.banks_per_array,
            subbanks_per_bank: t.subbanks_per_bank,
            rows: t.rows_per_subbank(),
        }
    }

    pub fn geometry(&self) -> &AddressGeometry {
        &self.geo
    }

    pub fn scheme(&self) -> SchemeKind {
        self.kind
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn beat_bytes(&self) -> u64 {
        self.beat_bytes
    }

    fn array_hash(&self, addr: u64) -> u64 {
        match self.kind {
            SchemeKind::Identity => 0,
            SchemeKind::XorFold => {
                let r = self.hash_src;
                let bits = Field {
                    lo: r.lo,
                    width: r.width(),
                }
                .extract(addr);
                fold(bits, self.geo.array.width)
            }
        }
    }

    pub fn decompose(&self, addr: u64) -> Result<Location, AddressError> {
        if addr >= self.total_bytes {
            return Err(AddressError::OutOfRange {
                addr,
                limit: self.total_bytes,
            });
        }
        let g = &self.geo;
        let raw_array = g.array.extract(addr);
        Ok(Location {
            cluster: g.cluster.extract(addr) as usize,
            array: (raw_array ^ self.array_hash(addr)) as usize,
            bank: g.bank.extract(addr) as usize,
            subbank: g.subbank.extract(addr) as usize,
            row: g.row.extract(addr),
            beat_offset: g.offset.extract(addr),
        })
    }

    pub fn compose(&self, loc: &Location) -> Result<u64, AddressError> {
        let checks: [(&'static str, u64, u64); 6] = [
            ("cluster", loc.cluster as u64, self.clusters as u64),
            ("array", loc.array as u64, self.arrays_per_cluster as u64),
            ("bank", loc.bank as u64, self.banks_per_array as u64),
            ("subbank", loc.subbank as u64, self.subbanks_per_bank as u64),
            ("row", loc.row, self.rows),
            ("beat_offset", loc.beat_offset, self.beat_bytes),
        ];
        for (field, value, limit) in checks {
            if value >= limit {
                return Err(AddressError::FieldOutOfRange {
                    field,
                    value,
                    limit,
                });
            }
        }
        let g = &self.geo;
        // The hash only reads bits above the array field, so it can be
        // evaluated on the partially assembled address.
        let partial = g.offset.insert(loc.beat_offset)
            | g.cluster.insert(loc.cluster as u64)
            | g.bank.insert(loc.bank as u64)
            | g.row.insert(loc.row)
            | g.subbank.insert(loc.subbank as u64);
        let raw_array = loc.array as u64 ^ self.array_hash(partial);
        Ok(partial | g.array.insert(raw_array))
    }

    /// Splits a burst into its beats, in address order.
    pub fn expand_burst(&self, base: u64, beats: u64) -> Result<Vec<LocatedBeat>, AddressError> {
        self.check_burst(base, beats)?;
        (0..beats)
            .map(|i| {
                let address = base + i * self.beat_bytes;
                Ok(LocatedBeat {
                    beat_index: i as u32,
                    address,
                    location: self.decompose(address)?,
                })
            })
            .collect()
    }

    pub fn check_burst(&self, base: u64, beats: u64) -> Result<(), AddressError> {
        if !is_supported_burst(beats) {
            return Err(AddressError::BadBurst(beats));
        }
        if !base.is_multiple_of(self.beat_bytes) {
            return Err(AddressError::Unaligned {
                addr: base,
                beat_bytes: self.beat_bytes,
            });
        }
        let end = base.saturating_add(beats * self.beat_bytes);
        if end > self.total_bytes {
            return Err(AddressError::OutOfRange {
                addr: end - 1,
                limit: self.total_bytes,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TopologyConfig;
    use std::collections::HashSet;

    fn map(kind: SchemeKind) -> AddressMap {
        let mut cfg = SimConfig::default();
        cfg.scheme.kind = kind;
        AddressMap::new(&cfg)
    }

    #[test]
    fn zero_is_origin() {
        let m = map(SchemeKind::Identity);
        let loc = m.decompose(0).unwrap();
        assert_eq!(
            loc,
            Location {
                cluster: 0,
                array: 0,
                bank: 0,
                subbank: 0,
                row: 0,
                beat_offset: 0
            }
        );
        assert_eq!(m.compose(&loc).unwrap(), 0);
    }

    #[test]
    fn burst4_hits_every_cluster() {
        let m = map(SchemeKind::Identity);
        let clusters: Vec<_> = [0x00, 0x20, 0x40, 0x60]
            .iter()
            .map(|&a| m.decompose(a).unwrap().cluster)
            .collect();
        assert_eq!(clusters, vec![0, 1, 2, 3]);
    }

    #[test]
    fn burst16_four_arrays_per_cluster() {
        for kind in [SchemeKind::Identity, SchemeKind::XorFold] {
            let m = map(kind);
            let beats = m.expand_burst(0, 16).unwrap();
            for c in 0..4 {
                let mut arrays: Vec<_> = beats
                    .iter()
                    .filter(|b| b.location.cluster == c)
                    .map(|b| b.location.array)
                    .collect();
                arrays.sort_unstable();
                assert_eq!(arrays, vec![0, 1, 2, 3], "{kind:?} cluster {c}");
            }
        }
    }

    #[test]
    fn burst8_pattern() {
        let m = map(SchemeKind::Identity);
        let beats = m.expand_burst(0, 8).unwrap();
        let clusters: Vec<_> = beats.iter().map(|b| b.location.cluster).collect();
        assert_eq!(clusters, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        for c in 0..4 {
            let a: Vec<_> = beats
                .iter()
                .filter(|b| b.location.cluster == c)
                .map(|b| b.location.array)
                .collect();
            assert_ne!(a[0], a[1]);
        }
    }

    #[test]
    fn burst16_xor_fold_at_0x1000() {
        let m = map(SchemeKind::XorFold);
        let beats = m.expand_burst(0x1000, 16).unwrap();
        let locs: HashSet<_> = beats.iter().map(|b| b.location).collect();
        assert_eq!(locs.len(), 16);
        for c in 0..4 {
            let arrays: HashSet<_> = beats
                .iter()
                .filter(|b| b.location.cluster == c)
                .map(|b| b.location.array)
                .collect();
            assert_eq!(arrays.len(), 4);
        }
    }

    #[test]
    fn single_beat_burst() {
        let m = map(SchemeKind::Identity);
        let b = m.expand_burst(0, 1).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!((b[0].location.cluster, b[0].location.array), (0, 0));
    }

    #[test]
    fn burst_errors() {
        let m = map(SchemeKind::Identity);
        assert!(matches!(
            m.expand_burst(0x10, 4),
            Err(AddressError::Unaligned { .. })
        ));
        assert!(matches!(
            m.expand_burst(0, 2),
            Err(AddressError::BadBurst(2))
        ));
        let last = m.total_bytes() - 32;
        assert!(m.expand_burst(last, 1).is_ok());
        assert!(matches!(
            m.expand_burst(last, 4),
            Err(AddressError::OutOfRange { .. })
        ));
        assert!(matches!(
            m.decompose(m.total_bytes()),
            Err(AddressError::OutOfRange { .. })
        ));
    }

    #[test]
    fn compose_rejects_bad_fields() {
        let m = map(SchemeKind::Identity);
        let mut loc = m.decompose(0).unwrap();
        loc.bank = 16;
        assert!(matches!(
            m.compose(&loc),
            Err(AddressError::FieldOutOfRange { field: "bank", .. })
        ));
    }

    #[test]
    fn round_trip_last_byte() {
        for kind in [SchemeKind::Identity, SchemeKind::XorFold] {
            let m = map(kind);
            let a = 0x1FF_FFFF;
            assert_eq!(m.compose(&m.decompose(a).unwrap()).unwrap(), a);
        }
    }

    #[test]
    fn xor_fold_round_trip_sampled() {
        use rand_core::{RngCore, SeedableRng};
        let m = map(SchemeKind::XorFold);
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(11);
        for _ in 0..10_000 {
            let a = rng.next_u64() % m.total_bytes();
            assert_eq!(m.compose(&m.decompose(a).unwrap()).unwrap(), a);
        }
    }

    #[test]
    fn xor_fold_whitens_stride() {
        // A 8 KiB stride walks the row field; identity pins the array,
        // xor-fold spreads it.
        let id = map(SchemeKind::Identity);
        let xf = map(SchemeKind::XorFold);
        let arrays = |m: &AddressMap| -> HashSet<usize> {
            (0..16u64)
                .map(|i| m.decompose(i * 8192).unwrap().array)
                .collect()
        };
        assert_eq!(arrays(&id).len(), 1);
        assert_eq!(arrays(&xf).len(), 4);
    }

    #[test]
    fn fold_is_xor_of_chunks() {
        assert_eq!(fold(0b11_01_10, 2), 0b11 ^ 0b01 ^ 0b10);
        assert_eq!(fold(0xff, 0), 0);
    }

    #[test]
    fn degenerate_single_field() {
        let cfg = SimConfig {
            topology: TopologyConfig {
                masters: 1,
                clusters: 1,
                arrays_per_cluster: 1,
                banks_per_array: 1,
                subbanks_per_bank: 1,
                beat_bytes: 32,
                total_bytes: 32 * 1024,
            },
            ..SimConfig::default()
        };
        let m = AddressMap::new(&cfg);
        let loc = m.decompose(0x7fe3).unwrap();
        assert_eq!(loc.row, 0x7fe3 >> 5);
        assert_eq!(loc.beat_offset, 3);
    }
}
