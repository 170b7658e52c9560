//! Quantized blocks: up to 32 FP4 codes sharing one power-of-two scale.
//!
//! Wire image is exactly 17 bytes: 16 bytes of packed codes (two per byte,
//! low nibble = even index, unused slots zero) followed by the scale exponent
//! as a two's-complement byte. Ragged blocks keep their true length out of
//! band (containers derive it from tensor dimensions).

use crate::error::{MxError, Result};
use crate::format::{Fp4Code, Fp4Format};
use crate::rng::DetRng;
use crate::round::{round_deterministic, round_stochastic, Rounding};
use crate::scale::{compute_scale, MxScale, ScaleRule};

/// Group size: a block never holds more than 32 elements.
pub const BLOCK_LEN: usize = 32;

/// Serialized size of one block.
pub const BLOCK_WIRE_BYTES: usize = 17;

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MxBlock {
    codes: [Fp4Code; BLOCK_LEN],
    len: u8,
    scale: MxScale,
    format: Fp4Format,
}

impl MxBlock {
    pub(crate) fn from_parts(
        codes: [Fp4Code; BLOCK_LEN],
        len: usize,
        scale: MxScale,
        format: Fp4Format,
    ) -> Self {
        debug_assert!(len >= 1 && len <= BLOCK_LEN);
        MxBlock { codes, len: len as u8, scale, format }
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn scale(&self) -> MxScale {
        self.scale
    }

    pub fn format(&self) -> Fp4Format {
        self.format
    }

    pub fn codes(&self) -> &[Fp4Code] {
        &self.codes[..self.len as usize]
    }

    /// Reconstructed value of element `i`: code * 2^s.
    pub fn value(&self, i: usize) -> f64 {
        assert!(i < self.len as usize);
        self.codes[i].decode(self.format) * self.scale.value()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let s = self.scale.value();
        self.codes().iter().map(|c| c.decode(self.format) * s).collect()
    }

    pub fn dequantize_into(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.len as usize);
        let s = self.scale.value();
        for (o, c) in out.iter_mut().zip(self.codes()) {
            *o = c.decode(self.format) * s;
        }
    }

    /// 17-byte wire image.
    pub fn to_wire(&self) -> [u8; BLOCK_WIRE_BYTES] {
        let mut out = [0u8; BLOCK_WIRE_BYTES];
        for (i, c) in self.codes().iter().enumerate() {
            if i % 2 == 0 {
                out[i / 2] |= c.to_bits();
            } else {
                out[i / 2] |= c.to_bits() << 4;
            }
        }
        out[16] = self.scale.to_byte();
        out
    }

    /// Decodes a wire image holding `len` elements. Nibbles past `len` are
    /// padding and are ignored.
    pub fn from_wire(bytes: &[u8; BLOCK_WIRE_BYTES], len: usize, format: Fp4Format) -> Result<Self> {
        if len == 0 {
            return Err(MxError::Empty("MxBlock::from_wire"));
        }
        if len > BLOCK_LEN {
            return Err(MxError::BlockTooLong { len, max: BLOCK_LEN });
        }
        let scale = MxScale::from_byte(bytes[16])?;
        let mut codes = [Fp4Code::ZERO; BLOCK_LEN];
        for (i, code) in codes.iter_mut().enumerate().take(len) {
            let nibble = if i % 2 == 0 { bytes[i / 2] & 0x0F } else { bytes[i / 2] >> 4 };
            *code = Fp4Code::from_bits(nibble);
        }
        Ok(MxBlock { codes, len: len as u8, scale, format })
    }
}

/// Quantizes up to 32 values into one block. The scale comes from `rule`;
/// each latent v/S is then rounded per `rounding`. Under the Microscaling
/// rule latents can fall outside [Qn, Qp]: deterministic rounding saturates
/// them, and stochastic rounding clamps first (its bracket precondition).
/// Under the truncation-free rule no latent is ever out of range.
pub fn quantize_block(
    values: &[f64],
    format: Fp4Format,
    rule: ScaleRule,
    rounding: Rounding,
    rng: &mut DetRng,
) -> Result<MxBlock> {
    if values.is_empty() {
        return Err(MxError::Empty("quantize_block"));
    }
    if values.len() > BLOCK_LEN {
        return Err(MxError::BlockTooLong { len: values.len(), max: BLOCK_LEN });
    }
    let scale = compute_scale(values, format, rule)?;
    let s = scale.value();
    let mut codes = [Fp4Code::ZERO; BLOCK_LEN];
    for (i, &v) in values.iter().enumerate() {
        let x = v / s;
        let rounded = match rounding {
            Rounding::Deterministic => round_deterministic(x, format)?,
            Rounding::Stochastic => {
                let x = x.clamp(format.q_neg(), format.q_pos());
                round_stochastic(x, format, rng)?
            }
        };
        codes[i] = Fp4Code::encode(rounded, format)?;
    }
    Ok(MxBlock { codes, len: values.len() as u8, scale, format })
}
