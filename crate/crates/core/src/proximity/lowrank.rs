//! Rank-`r` symmetric factorization `P ≈ F Fᵀ` of the proximity matrix,
//! computed from leaf membership without forming `P`.
//!
//! With `M` the one-hot leaf-membership matrix, `P = M Mᵀ / B`. A randomized
//! range finder (oversampling 8, two power iterations) yields an orthonormal
//! basis `Q` of the dominant range. The small matrix `Qᵀ P Q` is then
//! eigendecomposed and `F = Q V_r Λ_r^{1/2}`.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::membership::LeafMembership;
use super::quant::{dequantize, quantize, QuantMode, QuantizedBlock};
use super::Proximity;
use crate::error::{Result, RfxError};
use crate::rng;

pub const OVERSAMPLING: usize = 8;
pub const POWER_ITERATIONS: usize = 2;
/// Off-diagonal pairs sampled for the `pmax` estimate.
pub const PMAX_SAMPLES: usize = 1024;

const MAGIC: &[u8; 4] = b"RFXQ";
const VERSION: u32 = 1;

/// Quantized low-rank proximity factor.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankQuantized {
    n: usize,
    rank: usize,
    mode: QuantMode,
    pmax: f64,
    /// One quantized block per factor column.
    columns: Vec<QuantizedBlock>,
    /// Dequantized factor, row-major `n × rank`.
    factor: Vec<f64>,
    notice: Option<String>,
}

impl LowRankQuantized {
    /// Quantizes a row-major `n × rank` factor.
    pub fn from_factor(
        n: usize,
        rank: usize,
        factor: &[f64],
        mode: QuantMode,
        seed: u64,
    ) -> Result<Self> {
        if n == 0 || rank == 0 || factor.len() != n * rank {
            return Err(RfxError::data("factor shape does not match n x rank"));
        }
        let columns = (0..rank)
            .map(|k| {
                let col: Vec<f64> = (0..n).map(|i| factor[i * rank + k]).collect();
                quantize(&col, mode)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = LowRankQuantized {
            n,
            rank,
            mode,
            pmax: 0.0,
            factor: Vec::new(),
            columns,
            notice: None,
        };
        out.factor = out.dequantized_factor();
        out.pmax = out.estimate_pmax(seed);
        Ok(out)
    }

    fn dequantized_factor(&self) -> Vec<f64> {
        let mut f = vec![0.0; self.n * self.rank];
        for (k, col) in self.columns.iter().enumerate() {
            for (i, v) in dequantize(col).into_iter().enumerate() {
                f[i * self.rank + k] = v;
            }
        }
        f
    }

    fn estimate_pmax(&self, seed: u64) -> f64 {
        let mut pmax = (0..self.n)
            .map(|i| self.raw(i, i))
            .fold(f64::NEG_INFINITY, f64::max);
        if self.n >= 2 {
            let mut rng = rng::stream(seed);
            for _ in 0..PMAX_SAMPLES {
                let i = rng::index(&mut rng, self.n);
                let mut j = rng::index(&mut rng, self.n - 1);
                if j >= i {
                    j += 1;
                }
                pmax = pmax.max(self.raw(i, j));
            }
        }
        pmax
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn pmax(&self) -> f64 {
        self.pmax
    }

    /// Set when the requested rank was reduced to the number of leaves.
    pub fn notice(&self) -> Option<&str> {
        self.notice.as_deref()
    }

    /// Dequantized factor, row-major `n × rank`.
    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    pub fn factor_row(&self, i: usize) -> &[f64] {
        &self.factor[i * self.rank..(i + 1) * self.rank]
    }

    pub fn columns(&self) -> &[QuantizedBlock] {
        &self.columns
    }

    /// Unclamped `F_i · F_j`.
    #[inline]
    pub fn raw(&self, i: usize, j: usize) -> f64 {
        self.factor_row(i)
            .iter()
            .zip(self.factor_row(j))
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn payload_bytes(&self) -> u64 {
        self.columns.iter().map(|c| c.payload_bytes()).sum()
    }

    pub fn metadata_bytes(&self) -> u64 {
        self.columns.iter().map(|c| c.metadata_bytes()).sum()
    }

    /// `"RFXQ" | u32 version | u64 n | u32 r | u8 mode | f64 pmax |
    /// per-column metadata | per-column payload`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_u64::<LE>(self.n as u64)?;
        w.write_u32::<LE>(self.rank as u32)?;
        w.write_u8(self.mode.code())?;
        w.write_u64::<LE>(self.pmax.to_bits())?;
        for c in &self.columns {
            c.write_metadata(w)?;
        }
        for c in &self.columns {
            c.write_payload(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RfxError::format("not an RFXQ factor file"));
        }
        let version = r.read_u32::<LE>()?;
        if version != VERSION {
            return Err(RfxError::format(format!(
                "unsupported factor file version {version}"
            )));
        }
        let n = r.read_u64::<LE>()? as usize;
        let rank = r.read_u32::<LE>()? as usize;
        let mode = QuantMode::from_code(r.read_u8()?)?;
        let pmax = f64::from_bits(r.read_u64::<LE>()?);
        if n == 0 || rank == 0 || rank > n || !pmax.is_finite() {
            return Err(RfxError::format("bad factor file header"));
        }
        let headers = (0..rank)
            .map(|_| QuantizedBlock::read_metadata(r, mode, n))
            .collect::<Result<Vec<_>>>()?;
        let columns = headers
            .into_iter()
            .map(|h| QuantizedBlock::read_payload(r, h))
            .collect::<Result<Vec<_>>>()?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(RfxError::format("trailing bytes after factor payload"));
        }
        let mut out = LowRankQuantized {
            n,
            rank,
            mode,
            pmax,
            columns,
            factor: Vec::new(),
            notice: None,
        };
        out.factor = out.dequantized_factor();
        Ok(out)
    }
}

impl Proximity for LowRankQuantized {
    fn n(&self) -> usize {
        self.n
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else {
            self.raw(i, j).clamp(0.0, 1.0)
        }
    }
}

/// `Y = M X / sqrt(B)` for a leaf-indexed `X` (`total_leaves × cols`, row-major).
fn m_times(membership: &LeafMembership, offsets: &[usize], x: &[f64], cols: usize) -> Vec<f64> {
    let n = membership.n_samples();
    let scale = 1.0 / (membership.n_trees() as f64).sqrt();
    let mut y = vec![0.0; n * cols];
    y.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
        for (b, &off) in offsets.iter().enumerate() {
            let leaf = off + membership.code(b, i) as usize;
            for (o, v) in row.iter_mut().zip(&x[leaf * cols..(leaf + 1) * cols]) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|v| *v *= scale);
    });
    y
}

/// `Z = Mᵀ Y / sqrt(B)` for a sample-indexed `Y` (`n × cols`, row-major).
fn mt_times(membership: &LeafMembership, offsets: &[usize], y: &[f64], cols: usize) -> Vec<f64> {
    let total = membership.total_leaves();
    let scale = 1.0 / (membership.n_trees() as f64).sqrt();
    let mut z = vec![0.0; total * cols];
    // Each tree owns a disjoint run of leaf rows.
    let mut chunks: Vec<&mut [f64]> = Vec::with_capacity(offsets.len());
    let mut rest = z.as_mut_slice();
    for b in 0..offsets.len() {
        let (head, tail) = rest.split_at_mut(membership.leaf_count(b) * cols);
        chunks.push(head);
        rest = tail;
    }
    chunks.into_par_iter().enumerate().for_each(|(b, chunk)| {
        for (i, &code) in membership.tree_codes(b).iter().enumerate() {
            let leaf = code as usize;
            for (o, v) in chunk[leaf * cols..(leaf + 1) * cols]
                .iter_mut()
                .zip(&y[i * cols..(i + 1) * cols])
            {
                *o += v;
            }
        }
        chunk.iter_mut().for_each(|v| *v *= scale);
    });
    z
}

fn orthonormal(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let q = m.qr().q();
    let mut out = vec![0.0; rows * q.ncols()];
    for i in 0..rows {
        for k in 0..q.ncols() {
            out[i * q.ncols() + k] = q[(i, k)];
        }
    }
    out
}

/// Rank-`rank` factor of the proximity matrix, quantized with `mode`.
///
/// A rank above the total number of leaves is reduced to it, with a notice.
pub fn lowrank_proximity(
    membership: &LeafMembership,
    rank: usize,
    mode: QuantMode,
    seed: u64,
) -> Result<LowRankQuantized> {
    let n = membership.n_samples();
    if rank == 0 || rank > n {
        return Err(RfxError::config(format!(
            "rank must lie in 1..={n}, got {rank}"
        )));
    }
    let total = membership.total_leaves();
    let mut notice = None;
    let r = if rank > total {
        notice = Some(format!(
            "rank {rank} exceeds the {total} distinct leaves; using rank {total}"
        ));
        total
    } else {
        rank
    };
    let l = (r + OVERSAMPLING).min(n).min(total);
    let offsets = membership.leaf_offsets();

    let mut rng = rng::stream(seed);
    let omega: Vec<f64> = (0..total * l).map(|_| rng.sample(StandardNormal)).collect();
    let mut q = orthonormal(n, l, &m_times(membership, &offsets, &omega, l));
    for _ in 0..POWER_ITERATIONS {
        let z = orthonormal(total, l, &mt_times(membership, &offsets, &q, l));
        q = orthonormal(n, l, &m_times(membership, &offsets, &z, l));
    }

    // Qᵀ P Q = (Mᵀ Q)ᵀ (Mᵀ Q) / B
    let c = DMatrix::from_row_slice(total, l, &mt_times(membership, &offsets, &q, l));
    let small = c.transpose() * &c;
    let eig = SymmetricEigen::new(small);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut factor = vec![0.0; n * r];
    for (k, &e) in order.iter().take(r).enumerate() {
        let s = eig.eigenvalues[e].max(0.0).sqrt();
        let v = eig.eigenvectors.column(e);
        // Fix the sign so the factor is reproducible.
        let pivot = (0..l)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            let qi = &q[i * l..(i + 1) * l];
            let dot: f64 = qi.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            factor[i * r + k] = sign * s * dot;
        }
    }
    let mut out = LowRankQuantized::from_factor(n, r, &factor, mode, seed.wrapping_add(1))?;
    out.notice = notice;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proximity::full_proximity;

    fn fixture() -> LeafMembership {
        let n = 12;
        let trees = 5;
        let mut codes = Vec::new();
        let mut counts = Vec::new();
        for b in 0..trees {
            let leaves = 2 + b % 3;
            codes.extend((0..n).map(|i| ((i * (b + 1) + b) % leaves) as u32));
            counts.push(leaves as u32);
        }
        LeafMembership::from_codes(n, codes, counts).unwrap()
    }

    #[test]
    fn full_rank_f32_reproduces_proximity() {
        let m = fixture();
        let full = full_proximity(&m, None).unwrap();
        let lr = lowrank_proximity(&m, 12, QuantMode::F32, 3).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                assert!((lr.get(i, j) - full.get(i, j)).abs() < 1e-4, "({i},{j})");
            }
        }
    }

    #[test]
    fn rank_above_leaf_total_degrades_with_notice() {
        let m = LeafMembership::from_codes(6, vec![0, 0, 0, 1, 1, 1], vec![2]).unwrap();
        let lr = lowrank_proximity(&m, 5, QuantMode::F32, 0).unwrap();
        assert_eq!(lr.rank(), 2);
        assert!(lr.notice().is_some());
        assert!((lr.raw(0, 1) - 1.0).abs() < 1e-6);
        assert!(lr.raw(0, 4).abs() < 1e-6);
    }

    #[test]
    fn rank_beyond_n_rejected() {
        assert!(lowrank_proximity(&fixture(), 13, QuantMode::I8, 0).is_err());
        assert!(lowrank_proximity(&fixture(), 0, QuantMode::I8, 0).is_err());
    }

    #[test]
    fn factor_file_round_trip_is_bit_exact() {
        for mode in [
            QuantMode::F32,
            QuantMode::F16,
            QuantMode::I8,
            QuantMode::Nf4,
        ] {
            let lr = lowrank_proximity(&fixture(), 4, mode, 9).unwrap();
            let mut buf = Vec::new();
            lr.write_to(&mut buf).unwrap();
            assert_eq!(&buf[..4], b"RFXQ");
            let back = LowRankQuantized::read_from(&mut buf.as_slice()).unwrap();
            assert_eq!(back, lr);
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            assert_eq!(again, buf);
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = lowrank_proximity(&fixture(), 5, QuantMode::I8, 11).unwrap();
        let b = lowrank_proximity(&fixture(), 5, QuantMode::I8, 11).unwrap();
        assert_eq!(a, b);
    }
}
