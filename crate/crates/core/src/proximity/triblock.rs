use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::Serialize;

use super::membership::{upper_row_counts, LeafMembership};
use super::plan::{check_budget, triblock_bytes, DEFAULT_RETENTION};
use super::Proximity;
use crate::error::{Result, RfxError};

/// Proximities below this are stored as exact zeros.
pub const HARD_ZERO: f64 = 1e-6;
pub const DEFAULT_TAU: f64 = 1e-4;
/// Bytes per stored entry: two `u32` indices and one `f64`.
pub const ENTRY_BYTES: u64 = 16;

const MAGIC: &[u8; 4] = b"RFXT";

/// Value-tiered upper-triangle proximities.
///
/// Pairs with `p >= tau` live in a hash map, pairs with
/// `HARD_ZERO <= p < tau` in a sorted tuple array, and everything smaller
/// is an implicit zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TriBlock {
    n: usize,
    tau: f64,
    dense: HashMap<(u32, u32), f64>,
    sparse: Vec<(u32, u32, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TriBlockSummary {
    pub n: usize,
    pub tau: f64,
    pub hard_zero: f64,
    pub total_pairs: u64,
    pub dense_entries: u64,
    pub sparse_entries: u64,
    pub zero_pairs: u64,
    pub bytes: u64,
    pub retention: f64,
    pub compression_ratio: f64,
}

impl TriBlock {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dense_len(&self) -> usize {
        self.dense.len()
    }

    pub fn sparse_len(&self) -> usize {
        self.sparse.len()
    }

    pub fn total_pairs(&self) -> u64 {
        (self.n as u64) * (self.n as u64 - 1) / 2
    }

    pub fn stored_entries(&self) -> u64 {
        (self.dense.len() + self.sparse.len()) as u64
    }

    pub fn bytes(&self) -> u64 {
        self.stored_entries() * ENTRY_BYTES
    }

    /// Stored pairs as a fraction of all `i < j` pairs.
    pub fn retention(&self) -> f64 {
        if self.total_pairs() == 0 {
            return 0.0;
        }
        self.stored_entries() as f64 / self.total_pairs() as f64
    }

    pub fn compression_ratio(&self) -> f64 {
        let stored = self.stored_entries();
        if stored == 0 {
            f64::INFINITY
        } else {
            self.total_pairs() as f64 / stored as f64
        }
    }

    pub fn summary(&self) -> TriBlockSummary {
        TriBlockSummary {
            n: self.n,
            tau: self.tau,
            hard_zero: HARD_ZERO,
            total_pairs: self.total_pairs(),
            dense_entries: self.dense.len() as u64,
            sparse_entries: self.sparse.len() as u64,
            zero_pairs: self.total_pairs() - self.stored_entries(),
            bytes: self.bytes(),
            retention: self.retention(),
            compression_ratio: self.compression_ratio(),
        }
    }

    /// Dense-tier entries sorted by `(i, j)`.
    pub fn dense_sorted(&self) -> Vec<(u32, u32, f64)> {
        let mut out: Vec<_> = self.dense.iter().map(|(&(i, j), &v)| (i, j, v)).collect();
        out.sort_unstable_by_key(|&(i, j, _)| (i, j));
        out
    }

    pub fn sparse_entries(&self) -> &[(u32, u32, f64)] {
        &self.sparse
    }

    /// CSV `i,j,value` of the dense tier, sorted by pair.
    pub fn dense_csv(&self) -> String {
        let mut s = String::from("i,j,value\n");
        for (i, j, v) in self.dense_sorted() {
            s.push_str(&format!("{i},{j},{v}\n"));
        }
        s
    }

    /// `"RFXT" | u64 n | f64 tau | u64 dense | u64 sparse | (u32 i, u32 j, f64 p)...`,
    /// both tiers sorted by pair.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u64::<LE>(self.n as u64)?;
        w.write_u64::<LE>(self.tau.to_bits())?;
        w.write_u64::<LE>(self.dense.len() as u64)?;
        w.write_u64::<LE>(self.sparse.len() as u64)?;
        for (i, j, v) in self
            .dense_sorted()
            .into_iter()
            .chain(self.sparse.iter().copied())
        {
            w.write_u32::<LE>(i)?;
            w.write_u32::<LE>(j)?;
            w.write_u64::<LE>(v.to_bits())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RfxError::format("not an RFXT proximity file"));
        }
        let n = r.read_u64::<LE>()? as usize;
        let tau = f64::from_bits(r.read_u64::<LE>()?);
        let n_dense = r.read_u64::<LE>()? as usize;
        let n_sparse = r.read_u64::<LE>()? as usize;
        if n == 0 || !(tau > HARD_ZERO && tau < 1.0) {
            return Err(RfxError::format("bad TriBlock header"));
        }
        let read_entry = |r: &mut R| -> Result<(u32, u32, f64)> {
            let i = r.read_u32::<LE>()?;
            let j = r.read_u32::<LE>()?;
            let v = f64::from_bits(r.read_u64::<LE>()?);
            if i >= j || j as usize >= n || !(HARD_ZERO..=1.0).contains(&v) {
                return Err(RfxError::format(format!(
                    "bad TriBlock entry ({i}, {j}, {v})"
                )));
            }
            Ok((i, j, v))
        };
        let mut dense = HashMap::with_capacity(n_dense.min(1 << 24));
        for _ in 0..n_dense {
            let (i, j, v) = read_entry(r)?;
            if v < tau {
                return Err(RfxError::format("dense-tier entry below tau"));
            }
            dense.insert((i, j), v);
        }
        let mut sparse = Vec::with_capacity(n_sparse.min(1 << 24));
        for _ in 0..n_sparse {
            let e = read_entry(r)?;
            if e.2 >= tau {
                return Err(RfxError::format("sparse-tier entry at or above tau"));
            }
            sparse.push(e);
        }
        if !sparse
            .windows(2)
            .all(|w| (w[0].0, w[0].1) < (w[1].0, w[1].1))
        {
            return Err(RfxError::format("sparse tier not sorted"));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(RfxError::format("trailing bytes after TriBlock payload"));
        }
        Ok(TriBlock {
            n,
            tau,
            dense,
            sparse,
        })
    }
}

impl Proximity for TriBlock {
    fn n(&self) -> usize {
        self.n
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        let key = if i < j {
            (i as u32, j as u32)
        } else {
            (j as u32, i as u32)
        };
        if let Some(&v) = self.dense.get(&key) {
            return v;
        }
        match self.sparse.binary_search_by_key(&key, |&(a, b, _)| (a, b)) {
            Ok(k) => self.sparse[k].2,
            Err(_) => 0.0,
        }
    }
}

/// Same values as [`full_proximity`](super::full_proximity), routed into tiers.
pub fn triblock_proximity(
    membership: &LeafMembership,
    tau: f64,
    budget: Option<u64>,
) -> Result<TriBlock> {
    if !(tau > HARD_ZERO && tau < 1.0) {
        return Err(RfxError::config(format!(
            "tau must lie in ({HARD_ZERO}, 1), got {tau}"
        )));
    }
    let n = membership.n_samples();
    if n > u32::MAX as usize {
        return Err(RfxError::config("TriBlock indices are 32-bit"));
    }
    check_budget(
        "triblock",
        triblock_bytes(n as u64, DEFAULT_RETENTION),
        budget,
    )?;
    let inverted = membership.inverted();
    let ntree = membership.n_trees() as f64;

    let rows: Vec<(Vec<(u32, u32, f64)>, Vec<(u32, u32, f64)>)> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0u32; n],
            |counts, i| {
                let counts = &mut counts[..n - i - 1];
                upper_row_counts(membership, &inverted, i, counts);
                let mut dense = Vec::new();
                let mut sparse = Vec::new();
                for (off, &c) in counts.iter().enumerate() {
                    if c == 0 {
                        continue;
                    }
                    let v = c as f64 / ntree;
                    let entry = (i as u32, (i + 1 + off) as u32, v);
                    if v >= tau {
                        dense.push(entry);
                    } else if v >= HARD_ZERO {
                        sparse.push(entry);
                    }
                }
                (dense, sparse)
            },
        )
        .collect();

    let n_dense: usize = rows.iter().map(|r| r.0.len()).sum();
    let mut dense = HashMap::with_capacity(n_dense);
    let mut sparse = Vec::new();
    for (d, s) in rows {
        dense.extend(d.into_iter().map(|(i, j, v)| ((i, j), v)));
        sparse.extend(s);
    }
    Ok(TriBlock {
        n,
        tau,
        dense,
        sparse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_leaf_forest_puts_every_pair_in_dense_tier() {
        let m = LeafMembership::from_codes(5, vec![0; 10], vec![1, 1]).unwrap();
        let t = triblock_proximity(&m, DEFAULT_TAU, None).unwrap();
        assert_eq!(t.dense_len(), 10);
        assert_eq!(t.sparse_len(), 0);
        assert_eq!(t.get(4, 2), 1.0);
    }

    #[test]
    fn low_values_go_to_sparse_tier_and_zeros_vanish() {
        // B = 4: pair (0,1) co-located once -> 0.25 with tau 0.5 is sparse.
        let m = LeafMembership::from_codes(
            3,
            vec![0, 0, 1, 0, 1, 1, 0, 1, 1, 0, 1, 1],
            vec![2, 2, 2, 2],
        )
        .unwrap();
        let t = triblock_proximity(&m, 0.5, None).unwrap();
        assert_eq!(t.sparse_entries(), &[(0, 1, 0.25)]);
        assert_eq!(t.get(0, 2), 0.0);
        assert_eq!(t.get(2, 1), 0.75);
    }

    #[test]
    fn tau_out_of_range_rejected() {
        let m = LeafMembership::from_codes(2, vec![0, 0], vec![1]).unwrap();
        assert!(triblock_proximity(&m, 1e-7, None).is_err());
        assert!(triblock_proximity(&m, 1.0, None).is_err());
    }

    #[test]
    fn file_round_trip_and_sorted_csv() {
        let m = LeafMembership::from_codes(4, vec![0, 1, 0, 1, 2, 2, 0, 1], vec![2, 3]).unwrap();
        let t = triblock_proximity(&m, 0.75, None).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = TriBlock::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert_eq!(t.dense_csv(), "i,j,value\n");
        assert_eq!(t.sparse_entries(), &[(0, 1, 0.5), (0, 2, 0.5), (1, 3, 0.5)]);
    }
}
