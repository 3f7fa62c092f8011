use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RfxError};

/// Elements per NF4 scaling block.
pub const NF4_BLOCK: usize = 64;

/// The 16 normal-float levels on `[-1, 1]`, ascending.
pub const NF4_CODEBOOK: [f64; 16] = [
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
];

const NF4_ZERO_CODE: u8 = 7;

/// Largest gap between adjacent codebook levels.
pub fn nf4_max_gap() -> f64 {
    NF4_CODEBOOK
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    F32,
    F16,
    I8,
    Nf4,
}

impl QuantMode {
    pub fn code(self) -> u8 {
        match self {
            QuantMode::F32 => 0,
            QuantMode::F16 => 1,
            QuantMode::I8 => 2,
            QuantMode::Nf4 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => QuantMode::F32,
            1 => QuantMode::F16,
            2 => QuantMode::I8,
            3 => QuantMode::Nf4,
            other => {
                return Err(RfxError::format(format!(
                    "unknown quantization mode {other}"
                )))
            }
        })
    }

    /// Payload bits per stored element.
    pub fn bits(self) -> u64 {
        match self {
            QuantMode::F32 => 32,
            QuantMode::F16 => 16,
            QuantMode::I8 => 8,
            QuantMode::Nf4 => 4,
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::F32 => "fp32",
            QuantMode::F16 => "fp16",
            QuantMode::I8 => "int8",
            QuantMode::Nf4 => "nf4",
        })
    }
}

impl FromStr for QuantMode {
    type Err = RfxError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" | "fp32" => Ok(QuantMode::F32),
            "f16" | "fp16" => Ok(QuantMode::F16),
            "i8" | "int8" => Ok(QuantMode::I8),
            "nf4" => Ok(QuantMode::Nf4),
            other => Err(RfxError::config(format!(
                "unknown quantization mode '{other}' (fp32, fp16, int8, nf4)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    F32(Vec<f32>),
    F16(Vec<u16>),
    I8 {
        codes: Vec<i8>,
        scale: f64,
    },
    /// Two codes per byte, low nibble first; one absmax per block.
    Nf4 {
        codes: Vec<u8>,
        absmax: Vec<f64>,
    },
}

/// One quantized column of reals with its scaling metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    len: usize,
    payload: Payload,
}

impl QuantizedBlock {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mode(&self) -> QuantMode {
        match self.payload {
            Payload::F32(_) => QuantMode::F32,
            Payload::F16(_) => QuantMode::F16,
            Payload::I8 { .. } => QuantMode::I8,
            Payload::Nf4 { .. } => QuantMode::Nf4,
        }
    }

    /// I8 scale, if this is an I8 block.
    pub fn scale(&self) -> Option<f64> {
        match self.payload {
            Payload::I8 { scale, .. } => Some(scale),
            _ => None,
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        match &self.payload {
            Payload::F32(v) => 4 * v.len() as u64,
            Payload::F16(v) => 2 * v.len() as u64,
            Payload::I8 { codes, .. } => codes.len() as u64,
            Payload::Nf4 { codes, .. } => codes.len() as u64,
        }
    }

    pub fn metadata_bytes(&self) -> u64 {
        match &self.payload {
            Payload::F32(_) | Payload::F16(_) => 0,
            Payload::I8 { .. } => 8,
            Payload::Nf4 { absmax, .. } => 8 * absmax.len() as u64,
        }
    }

    pub fn write_metadata<W: Write>(&self, w: &mut W) -> Result<()> {
        match &self.payload {
            Payload::F32(_) | Payload::F16(_) => {}
            Payload::I8 { scale, .. } => w.write_u64::<LE>(scale.to_bits())?,
            Payload::Nf4 { absmax, .. } => {
                for a in absmax {
                    w.write_u64::<LE>(a.to_bits())?;
                }
            }
        }
        Ok(())
    }

    pub fn write_payload<W: Write>(&self, w: &mut W) -> Result<()> {
        match &self.payload {
            Payload::F32(v) => v.iter().try_for_each(|x| w.write_u32::<LE>(x.to_bits()))?,
            Payload::F16(v) => v.iter().try_for_each(|&x| w.write_u16::<LE>(x))?,
            Payload::I8 { codes, .. } => codes.iter().try_for_each(|&c| w.write_i8(c))?,
            Payload::Nf4 { codes, .. } => w.write_all(codes)?,
        }
        Ok(())
    }

    /// Reads metadata for a block of `len` elements; the payload follows via
    /// [`read_payload`](Self::read_payload).
    pub fn read_metadata<R: Read>(r: &mut R, mode: QuantMode, len: usize) -> Result<BlockHeader> {
        Ok(match mode {
            QuantMode::F32 | QuantMode::F16 => BlockHeader {
                mode,
                len,
                scale: 0.0,
                absmax: Vec::new(),
            },
            QuantMode::I8 => {
                let scale = f64::from_bits(r.read_u64::<LE>()?);
                if !(scale.is_finite() && scale >= 0.0) {
                    return Err(RfxError::format("bad int8 scale"));
                }
                BlockHeader {
                    mode,
                    len,
                    scale,
                    absmax: Vec::new(),
                }
            }
            QuantMode::Nf4 => {
                let mut absmax = vec![0.0; len.div_ceil(NF4_BLOCK)];
                for a in absmax.iter_mut() {
                    *a = f64::from_bits(r.read_u64::<LE>()?);
                    if !(a.is_finite() && *a >= 0.0) {
                        return Err(RfxError::format("bad nf4 absmax"));
                    }
                }
                BlockHeader {
                    mode,
                    len,
                    scale: 0.0,
                    absmax,
                }
            }
        })
    }

    pub fn read_payload<R: Read>(r: &mut R, header: BlockHeader) -> Result<Self> {
        let len = header.len;
        let payload = match header.mode {
            QuantMode::F32 => {
                let mut bits = vec![0u32; len];
                r.read_u32_into::<LE>(&mut bits)?;
                Payload::F32(bits.into_iter().map(f32::from_bits).collect())
            }
            QuantMode::F16 => {
                let mut bits = vec![0u16; len];
                r.read_u16_into::<LE>(&mut bits)?;
                Payload::F16(bits)
            }
            QuantMode::I8 => {
                let mut codes = vec![0i8; len];
                r.read_i8_into(&mut codes)?;
                if codes.contains(&i8::MIN) {
                    return Err(RfxError::format(
                        "int8 code -128 is not produced by symmetric quantization",
                    ));
                }
                Payload::I8 {
                    codes,
                    scale: header.scale,
                }
            }
            QuantMode::Nf4 => {
                let mut codes = vec![0u8; len.div_ceil(2)];
                r.read_exact(&mut codes)?;
                Payload::Nf4 {
                    codes,
                    absmax: header.absmax,
                }
            }
        };
        Ok(QuantizedBlock { len, payload })
    }
}

/// Metadata read ahead of a block's payload.
#[derive(Debug, Clone)]
pub struct BlockHeader {
    mode: QuantMode,
    len: usize,
    scale: f64,
    absmax: Vec<f64>,
}

fn absmax(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn nf4_code(x: f64, absmax: f64) -> u8 {
    let mut best = NF4_ZERO_CODE;
    let mut best_err = f64::INFINITY;
    for (k, &c) in NF4_CODEBOOK.iter().enumerate() {
        let err = (c * absmax - x).abs();
        if err < best_err {
            best_err = err;
            best = k as u8;
        }
    }
    best
}

pub fn quantize(values: &[f64], mode: QuantMode) -> Result<QuantizedBlock> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(RfxError::data(format!(
            "cannot quantize non-finite value {v}"
        )));
    }
    let payload = match mode {
        QuantMode::F32 => Payload::F32(values.iter().map(|&x| x as f32).collect()),
        QuantMode::F16 => {
            Payload::F16(values.iter().map(|&x| f16::from_f64(x).to_bits()).collect())
        }
        QuantMode::I8 => {
            let scale = absmax(values) / 127.0;
            let codes = if scale == 0.0 {
                vec![0; values.len()]
            } else {
                values
                    .iter()
                    .map(|&x| (x / scale).round_ties_even().clamp(-127.0, 127.0) as i8)
                    .collect()
            };
            Payload::I8 { codes, scale }
        }
        QuantMode::Nf4 => {
            let mut codes = vec![0u8; values.len().div_ceil(2)];
            let mut maxes = Vec::with_capacity(values.len().div_ceil(NF4_BLOCK));
            for (b, block) in values.chunks(NF4_BLOCK).enumerate() {
                let a = absmax(block);
                maxes.push(a);
                for (k, &x) in block.iter().enumerate() {
                    let code = if a == 0.0 {
                        NF4_ZERO_CODE
                    } else {
                        nf4_code(x, a)
                    };
                    let idx = b * NF4_BLOCK + k;
                    codes[idx / 2] |= code << (4 * (idx % 2));
                }
            }
            Payload::Nf4 {
                codes,
                absmax: maxes,
            }
        }
    };
    Ok(QuantizedBlock {
        len: values.len(),
        payload,
    })
}

pub fn dequantize(block: &QuantizedBlock) -> Vec<f64> {
    match &block.payload {
        Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
        Payload::F16(v) => v.iter().map(|&x| f16::from_bits(x).to_f64()).collect(),
        Payload::I8 { codes, scale } => codes.iter().map(|&c| c as f64 * scale).collect(),
        Payload::Nf4 { codes, absmax } => (0..block.len)
            .map(|idx| {
                let code = (codes[idx / 2] >> (4 * (idx % 2))) & 0x0f;
                NF4_CODEBOOK[code as usize] * absmax[idx / NF4_BLOCK]
            })
            .collect(),
    }
}
