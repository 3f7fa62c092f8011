//! `RFX1` forest files.
//!
//! Little-endian layout:
//!
//! ```text
//! "RFX1" | u32 version
//! config: u32 ntree | u32 mtry | u64 seed | u32 min_node_size | u32 max_nodes | u8 casewise
//! u32 n | u32 p | u32 classes
//! per tree: u32 node_count, then per node:
//!   u8 tag (0 terminal, 1 threshold, 2 subset) | u32 class | f64 gain | classes x u32 populations
//!   internal only: u32 feature | (f64 threshold | u32 mask) | u32 left | u32 right
//! bootstrap counts: ntree x n x u32
//! OOB votes: n x classes x u32
//! ```
//!
//! Floats are written by bit pattern, so a round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{BootstrapRecord, Forest, NodeStatus, SplitRule, TrainConfig, Tree, TreeNode};
use crate::error::{Result, RfxError};

const MAGIC: &[u8; 4] = b"RFX1";
const VERSION: u32 = 1;

const TAG_TERMINAL: u8 = 0;
const TAG_THRESHOLD: u8 = 1;
const TAG_SUBSET: u8 = 2;

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| RfxError::format(format!("{what} = {v} does not fit in u32")))
}

impl Forest {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let cfg = &self.config;
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_u32::<LE>(u32_of(cfg.ntree, "ntree")?)?;
        w.write_u32::<LE>(u32_of(cfg.mtry.unwrap_or(0), "mtry")?)?;
        w.write_u64::<LE>(cfg.seed)?;
        w.write_u32::<LE>(u32_of(cfg.min_node_size, "min_node_size")?)?;
        w.write_u32::<LE>(u32_of(cfg.max_nodes.unwrap_or(0), "max_nodes")?)?;
        w.write_u8(cfg.casewise as u8)?;
        w.write_u32::<LE>(u32_of(self.n_samples, "n")?)?;
        w.write_u32::<LE>(u32_of(self.n_features, "p")?)?;
        w.write_u32::<LE>(u32_of(self.n_classes, "classes")?)?;

        for tree in &self.trees {
            w.write_u32::<LE>(u32_of(tree.node_count(), "node_count")?)?;
            for node in tree.nodes() {
                let tag = match node.status {
                    NodeStatus::Terminal => TAG_TERMINAL,
                    NodeStatus::Internal {
                        rule: SplitRule::Threshold(_),
                        ..
                    } => TAG_THRESHOLD,
                    NodeStatus::Internal {
                        rule: SplitRule::Subset(_),
                        ..
                    } => TAG_SUBSET,
                };
                w.write_u8(tag)?;
                w.write_u32::<LE>(node.class)?;
                w.write_u64::<LE>(node.gain.to_bits())?;
                for &c in &node.populations {
                    w.write_u32::<LE>(c)?;
                }
                if let NodeStatus::Internal {
                    feature,
                    rule,
                    left,
                    right,
                } = node.status
                {
                    w.write_u32::<LE>(u32_of(feature, "feature")?)?;
                    match rule {
                        SplitRule::Threshold(t) => w.write_u64::<LE>(t.to_bits())?,
                        SplitRule::Subset(m) => w.write_u32::<LE>(m)?,
                    }
                    w.write_u32::<LE>(u32_of(left, "left")?)?;
                    w.write_u32::<LE>(u32_of(right, "right")?)?;
                }
            }
        }
        for &c in self.bootstrap.raw() {
            w.write_u32::<LE>(c)?;
        }
        for &v in &self.oob_votes {
            w.write_u32::<LE>(v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Forest> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RfxError::format("not an RFX1 forest file"));
        }
        let version = r.read_u32::<LE>()?;
        if version != VERSION {
            return Err(RfxError::format(format!(
                "unsupported forest file version {version}"
            )));
        }
        let ntree = r.read_u32::<LE>()? as usize;
        let mtry = r.read_u32::<LE>()? as usize;
        let seed = r.read_u64::<LE>()?;
        let min_node_size = r.read_u32::<LE>()? as usize;
        let max_nodes = r.read_u32::<LE>()? as usize;
        let casewise = match r.read_u8()? {
            0 => false,
            1 => true,
            other => return Err(RfxError::format(format!("bad casewise flag {other}"))),
        };
        let config = TrainConfig {
            ntree,
            mtry: (mtry > 0).then_some(mtry),
            seed,
            min_node_size,
            max_nodes: (max_nodes > 0).then_some(max_nodes),
            casewise,
        };
        let n = r.read_u32::<LE>()? as usize;
        let p = r.read_u32::<LE>()? as usize;
        let classes = r.read_u32::<LE>()? as usize;
        if n == 0 || p == 0 || classes < 2 {
            return Err(RfxError::format("degenerate forest dimensions"));
        }

        let mut trees = Vec::with_capacity(ntree);
        for _ in 0..ntree {
            let count = r.read_u32::<LE>()? as usize;
            let mut nodes = Vec::with_capacity(count.min(1 << 20));
            for _ in 0..count {
                let tag = r.read_u8()?;
                let class = r.read_u32::<LE>()?;
                let gain = f64::from_bits(r.read_u64::<LE>()?);
                let mut populations = vec![0u32; classes];
                for c in populations.iter_mut() {
                    *c = r.read_u32::<LE>()?;
                }
                let status = match tag {
                    TAG_TERMINAL => NodeStatus::Terminal,
                    TAG_THRESHOLD | TAG_SUBSET => {
                        let feature = r.read_u32::<LE>()? as usize;
                        if feature >= p {
                            return Err(RfxError::format(format!(
                                "split feature {feature} out of range"
                            )));
                        }
                        let rule = if tag == TAG_THRESHOLD {
                            SplitRule::Threshold(f64::from_bits(r.read_u64::<LE>()?))
                        } else {
                            SplitRule::Subset(r.read_u32::<LE>()?)
                        };
                        let left = r.read_u32::<LE>()? as usize;
                        let right = r.read_u32::<LE>()? as usize;
                        NodeStatus::Internal {
                            feature,
                            rule,
                            left,
                            right,
                        }
                    }
                    other => return Err(RfxError::format(format!("unknown node tag {other}"))),
                };
                nodes.push(TreeNode {
                    status,
                    class,
                    populations,
                    gain,
                });
            }
            trees.push(Tree::from_nodes(nodes)?);
        }
        let mut counts = vec![0u32; ntree * n];
        r.read_u32_into::<LE>(&mut counts)?;
        let mut oob_votes = vec![0u32; n * classes];
        r.read_u32_into::<LE>(&mut oob_votes)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(RfxError::format("trailing bytes after forest payload"));
        }
        Forest::from_parts(
            config,
            p,
            classes,
            trees,
            BootstrapRecord::from_counts(n, counts)?,
            oob_votes,
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Forest> {
        let mut cursor = bytes;
        Forest::read_from(&mut cursor)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Forest> {
        let mut r = BufReader::new(File::open(path)?);
        Forest::read_from(&mut r)
    }
}
