//! Element rounding onto an FP4 grid.
//!
//! Deterministic rounding clamps to [Qn, Qp] first (saturation is the only
//! truncation mechanism) and sends ties to the upper bracket value.
//! Stochastic rounding requires its input to already be in range and picks
//! the upper value with probability (x - q1)/(q2 - q1), so it is unbiased:
//! E[round_s(x)] = x.

use crate::error::{MxError, Result};
use crate::format::{bracket, Fp4Format};
use crate::rng::DetRng;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub enum Rounding {
    #[default]
    Deterministic,
    Stochastic,
}

/// Round to the nearest grid value; ties go to the upper value. Out-of-range
/// inputs saturate to +-Qp.
pub fn round_deterministic(x: f64, fmt: Fp4Format) -> Result<f64> {
    if !x.is_finite() {
        return Err(MxError::NonFinite { context: "round_deterministic", value: x });
    }
    let x = x.clamp(fmt.q_neg(), fmt.q_pos());
    let (q1, q2) = bracket(x, fmt)?;
    if (x - q1).abs() < (x - q2).abs() {
        Ok(q1)
    } else {
        Ok(q2)
    }
}

/// Unbiased stochastic rounding. The input must lie in [Qn, Qp]; saturating
/// here would break unbiasedness, so out-of-range input is an error.
pub fn round_stochastic(x: f64, fmt: Fp4Format, rng: &mut DetRng) -> Result<f64> {
    if !x.is_finite() {
        return Err(MxError::NonFinite { context: "round_stochastic", value: x });
    }
    let (q1, q2) = bracket(x, fmt)?;
    if q1 == q2 {
        return Ok(q1);
    }
    let p_up = (x - q1) / (q2 - q1);
    if rng.next_f64() < p_up {
        Ok(q2)
    } else {
        Ok(q1)
    }
}
