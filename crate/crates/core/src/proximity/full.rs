use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use super::membership::{upper_row_counts, LeafMembership};
use super::plan::{check_budget, full_bytes};
use super::Proximity;
use crate::error::{Result, RfxError};

const MAGIC: &[u8; 4] = b"RFXP";

/// Position of pair `(i, j)`, `i < j`, in the packed upper triangle.
#[inline]
pub fn packed_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// Proximities stored as the packed strict upper triangle, row-major over
/// `i < j`, with an implicit unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct FullTriangle {
    n: usize,
    values: Vec<f64>,
}

impl FullTriangle {
    pub fn from_packed(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || values.len() != n * (n - 1) / 2 {
            return Err(RfxError::data(format!(
                "packed triangle of length {} does not match n = {n}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(RfxError::data(format!("proximity {v} outside [0, 1]")));
        }
        Ok(FullTriangle { n, values })
    }

    pub fn packed(&self) -> &[f64] {
        &self.values
    }

    /// Strict upper part of row `i`: entries `(i, i+1) .. (i, n-1)`.
    pub fn upper_row(&self, i: usize) -> &[f64] {
        let start = if i + 1 < self.n {
            packed_index(self.n, i, i + 1)
        } else {
            self.values.len()
        };
        &self.values[start..start + (self.n - i - 1)]
    }

    pub fn bytes(&self) -> u64 {
        8 * self.values.len() as u64
    }

    /// `"RFXP" | u64 n | packed f64 values`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u64::<LE>(self.n as u64)?;
        for &v in &self.values {
            w.write_u64::<LE>(v.to_bits())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RfxError::format("not an RFXP proximity file"));
        }
        let n = r.read_u64::<LE>()? as usize;
        if n == 0 {
            return Err(RfxError::format("proximity file with n = 0"));
        }
        let mut bits = vec![0u64; n * (n - 1) / 2];
        r.read_u64_into::<LE>(&mut bits)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(RfxError::format("trailing bytes after proximity payload"));
        }
        FullTriangle::from_packed(n, bits.into_iter().map(f64::from_bits).collect())
    }
}

impl Proximity for FullTriangle {
    fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => self.values[packed_index(self.n, i, j)],
            std::cmp::Ordering::Greater => self.values[packed_index(self.n, j, i)],
        }
    }
}

/// `p(i, j)` is the fraction of trees in which `i` and `j` share a leaf.
///
/// Rows are filled independently from integer co-membership counts, so the
/// result does not depend on the worker count.
pub fn full_proximity(membership: &LeafMembership, budget: Option<u64>) -> Result<FullTriangle> {
    let n = membership.n_samples();
    check_budget("full", full_bytes(n as u64), budget)?;
    let inverted = membership.inverted();
    let ntree = membership.n_trees() as f64;

    let mut values = vec![0.0f64; n * (n - 1) / 2];
    let mut rows: Vec<&mut [f64]> = Vec::with_capacity(n);
    let mut rest = values.as_mut_slice();
    for i in 0..n {
        let (row, tail) = rest.split_at_mut(n - i - 1);
        rows.push(row);
        rest = tail;
    }
    rows.into_par_iter().enumerate().for_each_init(
        || vec![0u32; n],
        |counts, (i, row)| {
            let counts = &mut counts[..row.len()];
            upper_row_counts(membership, &inverted, i, counts);
            for (out, &c) in row.iter_mut().zip(counts.iter()) {
                *out = c as f64 / ntree;
            }
        },
    );
    Ok(FullTriangle { n, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_index_enumerates_row_major() {
        let n = 5;
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                assert_eq!(packed_index(n, i, j), k);
                k += 1;
            }
        }
    }

    #[test]
    fn single_tree_shared_leaf_is_one() {
        let m = LeafMembership::from_codes(2, vec![0, 0], vec![1]).unwrap();
        let p = full_proximity(&m, None).unwrap();
        assert_eq!(p.get(0, 1), 1.0);
        assert_eq!(p.get(1, 1), 1.0);
    }

    #[test]
    fn shared_in_one_of_two_trees_is_half() {
        let m = LeafMembership::from_codes(2, vec![0, 0, 0, 1], vec![1, 2]).unwrap();
        let p = full_proximity(&m, None).unwrap();
        assert_eq!(p.get(1, 0), 0.5);
    }

    #[test]
    fn budget_refusal_names_alternatives() {
        let m = LeafMembership::from_codes(3, vec![0, 0, 1], vec![2]).unwrap();
        let err = full_proximity(&m, Some(8)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("triblock") && msg.contains("lowrank"), "{msg}");
    }

    #[test]
    fn file_round_trip() {
        let m = LeafMembership::from_codes(4, vec![0, 1, 0, 1, 2, 2, 0, 1], vec![2, 3]).unwrap();
        let p = full_proximity(&m, None).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let back = FullTriangle::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, p);
    }
}
