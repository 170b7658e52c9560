//! Shared block scales: signed power-of-two exponents and the two rules that
//! compute them from a block's magnitude maximum M = max |v|.
//!
//! * `Microscaling`: s = floor(log2 M) - e_max. Can truncate: M/S may exceed
//!   Qp, and those elements saturate when rounded.
//! * `TruncationFree`: s = ceil(log2(2M / (Qp - Qn))), the smallest power of
//!   two with M/S <= Qp, so no element saturates.
//!
//! Zero blocks substitute M~ = 1e-8 under both rules. The exponent saturates
//! at +-127 with no error. log2 floors/ceilings are taken on the IEEE bit
//! representation, not through libm, so they are exact.

use crate::error::{MxError, Result};
use crate::format::Fp4Format;

/// How a block's shared scale is computed.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub enum ScaleRule {
    #[default]
    TruncationFree,
    Microscaling,
}

/// Substituted for M when a block is all zeros.
pub const ZERO_BLOCK_EPSILON: f64 = 1e-8;

/// Exponent bound: the scale is a signed 8-bit power of two with |s| <= 127.
pub const SCALE_EXP_MAX: i32 = 127;

/// A block scale S = 2^s, |s| <= 127.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct MxScale {
    s: i8,
}

impl MxScale {
    pub fn new(s: i32) -> Result<Self> {
        if s.abs() > SCALE_EXP_MAX {
            return Err(MxError::InvalidParam(format!("scale exponent {s} outside +-127")));
        }
        Ok(MxScale { s: s as i8 })
    }

    /// Clamps to +-127 instead of failing.
    pub fn saturating(s: i32) -> Self {
        MxScale { s: s.clamp(-SCALE_EXP_MAX, SCALE_EXP_MAX) as i8 }
    }

    pub const fn exponent(self) -> i32 {
        self.s as i32
    }

    /// 2^s, exact by construction of the bit pattern.
    pub fn value(self) -> f64 {
        f64::from_bits(((self.s as i64 + 1023) as u64) << 52)
    }

    /// Two's-complement wire byte.
    pub const fn to_byte(self) -> u8 {
        self.s as u8
    }

    pub fn from_byte(byte: u8) -> Result<Self> {
        let s = byte as i8;
        if s == i8::MIN {
            return Err(MxError::Container("scale exponent -128 outside +-127".into()));
        }
        Ok(MxScale { s })
    }
}

/// floor(log2 x) for finite x > 0, exact, straight off the exponent bits.
pub(crate) fn floor_log2(x: f64) -> i32 {
    debug_assert!(x.is_finite() && x > 0.0);
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7FF) as i32;
    if biased == 0 {
        // Subnormal: x = mantissa * 2^-1074.
        let mant = bits & ((1u64 << 52) - 1);
        63 - mant.leading_zeros() as i32 - 1074
    } else {
        biased - 1023
    }
}

/// ceil(log2 x) for finite x > 0, exact.
pub(crate) fn ceil_log2(x: f64) -> i32 {
    let f = floor_log2(x);
    if is_power_of_two(x) {
        f
    } else {
        f + 1
    }
}

fn is_power_of_two(x: f64) -> bool {
    let bits = x.to_bits();
    let mant = bits & ((1u64 << 52) - 1);
    let biased = (bits >> 52) & 0x7FF;
    if biased == 0 {
        mant.count_ones() == 1
    } else {
        mant == 0
    }
}

fn max_abs(values: &[f64], context: &'static str) -> Result<f64> {
    if values.is_empty() {
        return Err(MxError::Empty(context));
    }
    let mut m = 0.0f64;
    for &v in values {
        if !v.is_finite() {
            return Err(MxError::NonFinite { context, value: v });
        }
        m = m.max(v.abs());
    }
    Ok(if m == 0.0 { ZERO_BLOCK_EPSILON } else { m })
}

/// Smallest power-of-two scale under which no element of the block truncates:
/// s = ceil(log2(2 M~ / (Qp - Qn))).
pub fn compute_scale_truncation_free(values: &[f64], fmt: Fp4Format) -> Result<MxScale> {
    let m = max_abs(values, "compute_scale_truncation_free")?;
    let span = fmt.q_pos() - fmt.q_neg();
    Ok(MxScale::saturating(ceil_log2(2.0 * m / span)))
}

/// The power-of-two floor rule: s = floor(log2 M~) - e_max.
pub fn compute_scale_microscaling(values: &[f64], fmt: Fp4Format) -> Result<MxScale> {
    let m = max_abs(values, "compute_scale_microscaling")?;
    Ok(MxScale::saturating(floor_log2(m) - fmt.e_max()))
}

pub fn compute_scale(values: &[f64], fmt: Fp4Format, rule: ScaleRule) -> Result<MxScale> {
    match rule {
        ScaleRule::TruncationFree => compute_scale_truncation_free(values, fmt),
        ScaleRule::Microscaling => compute_scale_microscaling(values, fmt),
    }
}
