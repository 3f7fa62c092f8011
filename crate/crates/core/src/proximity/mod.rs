//! Pairwise proximities: the fraction of trees in which two samples land in
//! the same terminal node.
//!
//! Three storage layouts answer the same [`Proximity::entry`] queries:
//! a packed upper triangle, a value-tiered sparse layout, and a quantized
//! low-rank factor.

mod full;
mod lowrank;
mod membership;
mod plan;
mod quant;
mod triblock;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RfxError};

pub use full::{full_proximity, packed_index, FullTriangle};
pub use lowrank::{
    lowrank_proximity, LowRankQuantized, OVERSAMPLING, PMAX_SAMPLES, POWER_ITERATIONS,
};
pub use membership::{leaf_membership, LeafMembership};
pub use plan::{
    binary, decimal, factor_bytes, full_bytes, full_headline_bytes, lowrank_headline_bytes,
    memory_plan, model_memory, triblock_bytes, BackendEstimate, LineItem, MemoryPlan, ModelMemory,
    PlanRequest, ScalabilityRow, DEFAULT_RETENTION, GIB, HEADLINE_RANK, MIB, RAM_BUDGET,
    USABLE_FRACTION, VRAM_BUDGET,
};
pub use quant::{
    dequantize, nf4_max_gap, quantize, QuantMode, QuantizedBlock, NF4_BLOCK, NF4_CODEBOOK,
};
pub use triblock::{triblock_proximity, TriBlock, TriBlockSummary, DEFAULT_TAU, HARD_ZERO};

/// `Auto` switches from the full triangle to TriBlock above this many samples.
pub const AUTO_TRIBLOCK_ABOVE: usize = 5000;

/// Read access shared by every proximity layout.
pub trait Proximity: Sync {
    fn n(&self) -> usize;

    /// Unchecked lookup; symmetric, with a unit diagonal.
    fn get(&self, i: usize, j: usize) -> f64;

    fn entry(&self, i: usize, j: usize) -> Result<f64> {
        let n = self.n();
        if i >= n || j >= n {
            return Err(RfxError::IndexOutOfRange { i, j, n });
        }
        Ok(self.get(i, j))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Full,
    TriBlock,
    LowRank,
    Auto,
}

impl Backend {
    /// Concrete backend for `n` samples; `Auto` never picks low-rank.
    pub fn resolve(self, n: usize) -> Backend {
        match self {
            Backend::Auto if n > AUTO_TRIBLOCK_ABOVE => Backend::TriBlock,
            Backend::Auto => Backend::Full,
            other => other,
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Full => "full",
            Backend::TriBlock => "triblock",
            Backend::LowRank => "lowrank",
            Backend::Auto => "auto",
        })
    }
}

impl FromStr for Backend {
    type Err = RfxError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Backend::Full),
            "triblock" => Ok(Backend::TriBlock),
            "lowrank" | "low-rank" => Ok(Backend::LowRank),
            "auto" => Ok(Backend::Auto),
            other => Err(RfxError::config(format!(
                "unknown backend '{other}' (full, triblock, lowrank, auto)"
            ))),
        }
    }
}

/// Any of the three layouts.
#[derive(Debug, Clone, PartialEq)]
pub enum ProximityRepr {
    Full(FullTriangle),
    TriBlock(TriBlock),
    LowRank(LowRankQuantized),
}

impl ProximityRepr {
    pub fn backend(&self) -> Backend {
        match self {
            ProximityRepr::Full(_) => Backend::Full,
            ProximityRepr::TriBlock(_) => Backend::TriBlock,
            ProximityRepr::LowRank(_) => Backend::LowRank,
        }
    }

    /// Bytes held by the stored values.
    pub fn bytes(&self) -> u64 {
        match self {
            ProximityRepr::Full(p) => p.bytes(),
            ProximityRepr::TriBlock(p) => p.bytes(),
            ProximityRepr::LowRank(p) => p.payload_bytes() + p.metadata_bytes(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        match self {
            ProximityRepr::Full(p) => p.write_to(w),
            ProximityRepr::TriBlock(p) => p.write_to(w),
            ProximityRepr::LowRank(p) => p.write_to(w),
        }
    }

    /// Dispatches on the four-byte magic.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        let mut chained = magic.as_slice().chain(r);
        match &magic {
            b"RFXP" => Ok(ProximityRepr::Full(FullTriangle::read_from(&mut chained)?)),
            b"RFXT" => Ok(ProximityRepr::TriBlock(TriBlock::read_from(&mut chained)?)),
            b"RFXQ" => Ok(ProximityRepr::LowRank(LowRankQuantized::read_from(
                &mut chained,
            )?)),
            _ => Err(RfxError::format("unrecognized proximity file")),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ProximityRepr::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn as_dyn(&self) -> &dyn Proximity {
        match self {
            ProximityRepr::Full(p) => p,
            ProximityRepr::TriBlock(p) => p,
            ProximityRepr::LowRank(p) => p,
        }
    }
}

impl Proximity for ProximityRepr {
    fn n(&self) -> usize {
        self.as_dyn().n()
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.as_dyn().get(i, j)
    }
}

/// Options for [`compute_proximity`].
#[derive(Debug, Clone)]
pub struct ProximityOptions {
    pub backend: Backend,
    pub tau: f64,
    pub rank: usize,
    pub mode: QuantMode,
    pub budget: Option<u64>,
    pub seed: u64,
}

impl Default for ProximityOptions {
    fn default() -> Self {
        ProximityOptions {
            backend: Backend::Auto,
            tau: DEFAULT_TAU,
            rank: HEADLINE_RANK,
            mode: QuantMode::I8,
            budget: None,
            seed: 0,
        }
    }
}

pub fn compute_proximity(
    membership: &LeafMembership,
    opts: &ProximityOptions,
) -> Result<ProximityRepr> {
    match opts.backend.resolve(membership.n_samples()) {
        Backend::Full => full_proximity(membership, opts.budget).map(ProximityRepr::Full),
        Backend::TriBlock => {
            triblock_proximity(membership, opts.tau, opts.budget).map(ProximityRepr::TriBlock)
        }
        _ => lowrank_proximity(membership, opts.rank, opts.mode, opts.seed)
            .map(ProximityRepr::LowRank),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutlierScores {
    pub clamp_floor: f64,
    pub scores: Vec<f64>,
}

impl OutlierScores {
    /// Sample indices by descending score; ties keep index order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }

    pub fn to_csv(&self, labels: Option<&[u32]>) -> String {
        let mut s = String::from(if labels.is_some() {
            "sample_id,outlier,label\n"
        } else {
            "sample_id,outlier\n"
        });
        for (i, v) in self.scores.iter().enumerate() {
            match labels {
                Some(l) => s.push_str(&format!("{i},{v},{}\n", l[i])),
                None => s.push_str(&format!("{i},{v}\n")),
            }
        }
        s
    }
}

/// Mean inverse squared proximity of each sample to all others, with
/// proximities floored at `clamp_floor` (normally `1/B`).
pub fn outlier_scores(prox: &dyn Proximity, clamp_floor: f64) -> Result<OutlierScores> {
    let n = prox.n();
    if n < 2 {
        return Err(RfxError::data("outlier scores need at least two samples"));
    }
    if !(clamp_floor > 0.0 && clamp_floor <= 1.0) {
        return Err(RfxError::config(format!(
            "clamp floor {clamp_floor} outside (0, 1]"
        )));
    }
    let scores = (0..n)
        .into_par_iter()
        .map(|i| {
            let sum: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| 1.0 / prox.get(i, j).max(clamp_floor).powi(2))
                .sum();
            sum / (n - 1) as f64
        })
        .collect();
    Ok(OutlierScores {
        clamp_floor,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(usize, f64);

    impl Proximity for Constant {
        fn n(&self) -> usize {
            self.0
        }
        fn get(&self, i: usize, j: usize) -> f64 {
            if i == j {
                1.0
            } else {
                self.1
            }
        }
    }

    #[test]
    fn half_proximity_gives_score_four() {
        let s = outlier_scores(&Constant(3, 0.5), 0.01).unwrap();
        assert_eq!(s.scores, vec![4.0; 3]);
    }

    #[test]
    fn isolated_sample_hits_the_ceiling() {
        let b = 20.0;
        let s = outlier_scores(&Constant(4, 0.0), 1.0 / b).unwrap();
        for v in s.scores {
            assert!((v - b * b).abs() < 1e-9);
        }
    }

    #[test]
    fn entry_checks_bounds() {
        let c = Constant(3, 0.2);
        assert!(matches!(
            c.entry(3, 0),
            Err(RfxError::IndexOutOfRange { .. })
        ));
        assert_eq!(c.entry(1, 1).unwrap(), 1.0);
    }

    #[test]
    fn auto_backend_switches_on_size() {
        assert_eq!(Backend::Auto.resolve(5000), Backend::Full);
        assert_eq!(Backend::Auto.resolve(5001), Backend::TriBlock);
        assert_eq!(Backend::LowRank.resolve(10), Backend::LowRank);
    }

    #[test]
    fn repr_file_dispatch() {
        let m = LeafMembership::from_codes(4, vec![0, 1, 0, 1, 2, 2, 0, 1], vec![2, 3]).unwrap();
        for backend in [Backend::Full, Backend::TriBlock, Backend::LowRank] {
            let opts = ProximityOptions {
                backend,
                rank: 2,
                tau: 0.3,
                ..Default::default()
            };
            let repr = compute_proximity(&m, &opts).unwrap();
            let mut buf = Vec::new();
            repr.write_to(&mut buf).unwrap();
            let back = ProximityRepr::read_from(&mut buf.as_slice()).unwrap();
            assert_eq!(back, repr);
            assert_eq!(back.backend(), backend);
        }
    }
}
