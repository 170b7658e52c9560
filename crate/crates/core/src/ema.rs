//! EMA-guided weight quantization.
//!
//! A master weight sitting near a rounding threshold flips its quantized
//! value on every tiny crossing, which shows up downstream as oscillation.
//! Instead of rounding each weight to its own nearest grid value, the
//! quantizer here brackets the weight's latent and then lets a slow
//! exponential moving average of the master pick between the two candidates.
//! The EMA barely moves step to step, so its choice is stable even while the
//! master shuttles; when master and EMA agree (the steady state away from
//! thresholds) the result is exactly nearest rounding.
//!
//! Scales still come from the *current* masters, so reconstruction range
//! tracks the live tensor; only the choice within the bracket is guided.

use crate::block::{MxBlock, BLOCK_LEN};
use crate::error::{MxError, Result};
use crate::format::{bracket, Fp4Code, Fp4Format};
use crate::matrix::Matrix;
use crate::qmatrix::{block_count, block_span, GroupAxis, QuantizedMatrix};
use crate::scale::{compute_scale, ScaleRule};

pub const DEFAULT_EMA_BETA: f64 = 0.998;

/// Exponential moving average of a master tensor, initialized at the masters
/// themselves and updated once per optimizer step.
#[derive(Clone, Debug)]
pub struct EmaState {
    beta: f64,
    values: Matrix,
}

impl EmaState {
    pub fn new(w0: &Matrix, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(MxError::InvalidParam(format!("EMA beta must be in (0, 1), got {beta}")));
        }
        if !w0.is_finite() {
            return Err(MxError::NonFinite { context: "EmaState::new", value: f64::NAN });
        }
        Ok(EmaState { beta, values: w0.clone() })
    }

    pub fn with_default_beta(w0: &Matrix) -> Result<Self> {
        Self::new(w0, DEFAULT_EMA_BETA)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// ema <- beta * ema + (1 - beta) * w.
    pub fn update(&mut self, w: &Matrix) -> Result<()> {
        if w.shape() != self.values.shape() {
            return Err(MxError::ShapeMismatch(format!(
                "EMA of {:?} updated with {:?}",
                self.values.shape(),
                w.shape()
            )));
        }
        if !w.is_finite() {
            return Err(MxError::NonFinite { context: "EmaState::update", value: f64::NAN });
        }
        let b = self.beta;
        for (e, &v) in self.values.data_mut().iter_mut().zip(w.data()) {
            *e = b * *e + (1.0 - b) * v;
        }
        Ok(())
    }
}

/// Quantizes one block of masters with the bracket choice made by `guide`
/// (the EMA of the same elements). The scale comes from `values` via `rule`;
/// each latent's two bracketing grid values are candidates and the one
/// nearer to the guide's latent wins, ties to the upper. With
/// `guide == values` this is exactly deterministic nearest rounding.
pub fn quantize_block_ema(
    values: &[f64],
    guide: &[f64],
    format: Fp4Format,
    rule: ScaleRule,
) -> Result<MxBlock> {
    if values.is_empty() {
        return Err(MxError::Empty("quantize_block_ema"));
    }
    if values.len() > BLOCK_LEN {
        return Err(MxError::BlockTooLong { len: values.len(), max: BLOCK_LEN });
    }
    if guide.len() != values.len() {
        return Err(MxError::ShapeMismatch(format!(
            "guide of {} elements for a block of {}",
            guide.len(),
            values.len()
        )));
    }
    let scale = compute_scale(values, format, rule)?;
    let s = scale.value();
    let mut codes = [Fp4Code::ZERO; BLOCK_LEN];
    for (i, (&v, &g)) in values.iter().zip(guide).enumerate() {
        if !g.is_finite() {
            return Err(MxError::NonFinite { context: "quantize_block_ema guide", value: g });
        }
        let x = (v / s).clamp(format.q_neg(), format.q_pos());
        let (q1, q2) = bracket(x, format)?;
        let e = g / s;
        let rounded = if (e - q1).abs() < (e - q2).abs() { q1 } else { q2 };
        codes[i] = Fp4Code::encode(rounded, format)?;
    }
    Ok(MxBlock::from_parts(codes, values.len(), scale, format))
}

/// Matrix form of [`quantize_block_ema`]; `guide` must be shaped like `w`
/// and already laid out the same way (transpose it alongside the masters).
pub fn quantize_matrix_ema(
    w: &Matrix,
    guide: &Matrix,
    axis: GroupAxis,
    format: Fp4Format,
    rule: ScaleRule,
) -> Result<QuantizedMatrix> {
    if w.shape() != guide.shape() {
        return Err(MxError::ShapeMismatch(format!(
            "masters {:?} with guide {:?}",
            w.shape(),
            guide.shape()
        )));
    }
    let (rows, cols) = w.shape();
    if rows == 0 || cols == 0 {
        return Err(MxError::Empty("quantize_matrix_ema"));
    }
    let count = block_count(rows, cols, axis);
    let mut blocks = Vec::with_capacity(count);
    let mut vbuf = [0.0f64; BLOCK_LEN];
    let mut gbuf = [0.0f64; BLOCK_LEN];
    for i in 0..count {
        let (r, c, len) = block_span(rows, cols, axis, i);
        match axis {
            GroupAxis::RowGroups => {
                vbuf[..len].copy_from_slice(&w.row(r)[c..c + len]);
                gbuf[..len].copy_from_slice(&guide.row(r)[c..c + len]);
            }
            GroupAxis::ColGroups => {
                for j in 0..len {
                    vbuf[j] = w.get(r + j, c);
                    gbuf[j] = guide.get(r + j, c);
                }
            }
        }
        blocks.push(quantize_block_ema(&vbuf[..len], &gbuf[..len], format, rule)?);
    }
    QuantizedMatrix::from_parts(rows, cols, axis, format, blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::quantize_block;
    use crate::rng::{DetRng, QuantStream};
    use crate::round::Rounding;

    #[test]
    fn self_guided_matches_nearest_rounding_bitwise() {
        let mut rng = DetRng::new(9);
        for _ in 0..200 {
            let len = 1 + rng.index(BLOCK_LEN);
            let vals: Vec<f64> = (0..len).map(|_| rng.uniform(-40.0, 40.0)).collect();
            for rule in [ScaleRule::TruncationFree, ScaleRule::Microscaling] {
                let guided =
                    quantize_block_ema(&vals, &vals, Fp4Format::E2M1, rule).unwrap();
                let mut dummy = DetRng::new(0);
                let nearest = quantize_block(
                    &vals,
                    Fp4Format::E2M1,
                    rule,
                    Rounding::Deterministic,
                    &mut dummy,
                )
                .unwrap();
                assert_eq!(guided, nearest);
            }
        }
    }

    #[test]
    fn guide_overrides_nearest_within_the_bracket() {
        // Latent -0.74 would round to -0.5, but a guide at -0.9 pulls the
        // choice to -1.0. Unit scale: the block peak 6.0 gives S = 1 under
        // the truncation-free rule.
        let vals = [6.0, -0.74];
        let guide = [6.0, -0.9];
        let b = quantize_block_ema(&vals, &guide, Fp4Format::E2M1, ScaleRule::TruncationFree)
            .unwrap();
        assert_eq!(b.scale().exponent(), 0);
        assert_eq!(b.value(1), -1.0);
        let nearest = quantize_block_ema(&vals, &vals, Fp4Format::E2M1, ScaleRule::TruncationFree)
            .unwrap();
        assert_eq!(nearest.value(1), -0.5);
    }

    #[test]
    fn guide_cannot_escape_the_bracket() {
        // However extreme the guide, the result is one of the two bracketing
        // grid values of the master's latent.
        let vals = [6.0, 1.7];
        for g in [-6.0, -1.0, 0.0, 2.4, 6.0] {
            let b = quantize_block_ema(&vals, &[6.0, g], Fp4Format::E2M1, ScaleRule::TruncationFree)
                .unwrap();
            let q = b.value(1);
            assert!(q == 1.5 || q == 2.0, "guide {g} produced {q}");
        }
    }

    #[test]
    fn tie_in_guide_distance_goes_up() {
        // Guide exactly on the threshold between the candidates.
        let vals = [6.0, 0.7];
        let b = quantize_block_ema(&vals, &[6.0, 0.75], Fp4Format::E2M1, ScaleRule::TruncationFree)
            .unwrap();
        assert_eq!(b.value(1), 1.0);
    }

    #[test]
    fn ema_state_converges_geometrically() {
        let w0 = Matrix::from_vec(1, 1, vec![0.0]);
        let target = Matrix::from_vec(1, 1, vec![1.0]);
        let mut ema = EmaState::new(&w0, 0.9).unwrap();
        for _ in 0..10 {
            ema.update(&target).unwrap();
        }
        let got = ema.values().get(0, 0);
        let want = 1.0 - 0.9f64.powi(10);
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn ema_state_validation() {
        let w = Matrix::zeros(2, 2);
        assert!(EmaState::new(&w, 0.0).is_err());
        assert!(EmaState::new(&w, 1.0).is_err());
        let mut e = EmaState::with_default_beta(&w).unwrap();
        assert_eq!(e.beta(), DEFAULT_EMA_BETA);
        assert!(e.update(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn matrix_form_matches_block_form() {
        let mut rng = DetRng::new(31);
        let w = Matrix::from_fn(40, 3, |_, _| rng.uniform(-5.0, 5.0));
        let mut guide = w.clone();
        for g in guide.data_mut() {
            *g += rng.uniform(-0.1, 0.1);
        }
        let q = quantize_matrix_ema(
            &w,
            &guide,
            GroupAxis::ColGroups,
            Fp4Format::E2M1,
            ScaleRule::TruncationFree,
        )
        .unwrap();
        assert_eq!(q.blocks().len(), 6, "ceil(40/32) groups per column");
        // Column 2, rows 32..40 is the ragged tail block.
        let vals: Vec<f64> = (32..40).map(|r| w.get(r, 2)).collect();
        let guides: Vec<f64> = (32..40).map(|r| guide.get(r, 2)).collect();
        let expect =
            quantize_block_ema(&vals, &guides, Fp4Format::E2M1, ScaleRule::TruncationFree)
                .unwrap();
        assert_eq!(q.blocks()[5], expect);
    }

    #[test]
    fn self_guided_matrix_matches_plain_quantizer() {
        let mut rng = DetRng::new(77);
        let w = Matrix::from_fn(64, 33, |_, _| rng.uniform(-3.0, 3.0));
        let guided = quantize_matrix_ema(
            &w,
            &w,
            GroupAxis::ColGroups,
            Fp4Format::E2M1,
            ScaleRule::TruncationFree,
        )
        .unwrap();
        let plain = crate::qmatrix::quantize_matrix(
            &w,
            GroupAxis::ColGroups,
            Fp4Format::E2M1,
            ScaleRule::TruncationFree,
            Rounding::Deterministic,
            &QuantStream::new(0, 0, 0),
        )
        .unwrap();
        assert_eq!(guided, plain);
    }
}
