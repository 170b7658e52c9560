//! Quantized linear layer: forward and the two backward constructions.
//!
//! Forward (x: NxD, w: CxD, y = x w^T): y = Q1(x) * Q2(w^T), Q1 row-grouped,
//! Q2 column-grouped, both rounded to nearest. The two quantized operands are
//! kept as the layer's tape.
//!
//! `backward_double_quant` re-quantizes the *tape* operands with stochastic
//! rounding (Q4 takes the transposed Q2 output, Q6 takes the Q1 output), so
//! every gradient quantizer is unbiased around the exact straight-through
//! gradient of the forward tape.
//!
//! `backward_from_masters` re-quantizes the master tensors w and x directly
//! (deterministic by default). Because a column-grouped quantization of w is
//! not the transpose of Q2(w^T), this produces a biased gradient; it exists
//! as the comparison baseline.
//!
//! Each of the six quantizer slots can be masked off individually, becoming
//! the identity; with every slot off both paths reproduce dense arithmetic
//! bit-for-bit.

use crate::error::{MxError, Result};
use crate::format::Fp4Format;
use crate::matrix::Matrix;
use crate::qmatrix::{quantize_matrix, GroupAxis, QuantizedMatrix};
use crate::rng::QuantStream;
use crate::round::Rounding;
use crate::scale::ScaleRule;

/// The six quantizer slots of one linear layer.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum QuantizerSlot {
    /// Forward activations, row groups.
    Q1 = 1,
    /// Forward transposed weights, column groups.
    Q2 = 2,
    /// Output gradient for the input gradient, row groups.
    Q3 = 3,
    /// Weight operand of the input gradient, column groups.
    Q4 = 4,
    /// Transposed output gradient for the weight gradient, row groups.
    Q5 = 5,
    /// Activation operand of the weight gradient, column groups.
    Q6 = 6,
}

pub const ALL_SLOTS: [QuantizerSlot; 6] = [
    QuantizerSlot::Q1,
    QuantizerSlot::Q2,
    QuantizerSlot::Q3,
    QuantizerSlot::Q4,
    QuantizerSlot::Q5,
    QuantizerSlot::Q6,
];

/// Which slots quantize (true) and which pass through (false).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct QuantizerMask {
    pub q1: bool,
    pub q2: bool,
    pub q3: bool,
    pub q4: bool,
    pub q5: bool,
    pub q6: bool,
}

impl QuantizerMask {
    pub const ALL_ON: QuantizerMask =
        QuantizerMask { q1: true, q2: true, q3: true, q4: true, q5: true, q6: true };
    pub const ALL_OFF: QuantizerMask =
        QuantizerMask { q1: false, q2: false, q3: false, q4: false, q5: false, q6: false };

    /// Only `slot` quantizes.
    pub fn only(slot: QuantizerSlot) -> Self {
        let mut m = Self::ALL_OFF;
        *m.slot_mut(slot) = true;
        m
    }

    pub fn slot(&self, slot: QuantizerSlot) -> bool {
        match slot {
            QuantizerSlot::Q1 => self.q1,
            QuantizerSlot::Q2 => self.q2,
            QuantizerSlot::Q3 => self.q3,
            QuantizerSlot::Q4 => self.q4,
            QuantizerSlot::Q5 => self.q5,
            QuantizerSlot::Q6 => self.q6,
        }
    }

    pub fn slot_mut(&mut self, slot: QuantizerSlot) -> &mut bool {
        match slot {
            QuantizerSlot::Q1 => &mut self.q1,
            QuantizerSlot::Q2 => &mut self.q2,
            QuantizerSlot::Q3 => &mut self.q3,
            QuantizerSlot::Q4 => &mut self.q4,
            QuantizerSlot::Q5 => &mut self.q5,
            QuantizerSlot::Q6 => &mut self.q6,
        }
    }
}

impl Default for QuantizerMask {
    fn default() -> Self {
        Self::ALL_ON
    }
}

/// Quantization policy of one layer.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct LayerQuantConfig {
    pub mask: QuantizerMask,
    pub scale_rule: ScaleRule,
    pub forward_rounding: Rounding,
    pub backward_rounding: Rounding,
    pub forward_format: Fp4Format,
    pub backward_format: Fp4Format,
}

impl Default for LayerQuantConfig {
    /// The unbiased recipe: truncation-free scales, deterministic forward,
    /// stochastic backward, E2M1 everywhere.
    fn default() -> Self {
        LayerQuantConfig {
            mask: QuantizerMask::ALL_ON,
            scale_rule: ScaleRule::TruncationFree,
            forward_rounding: Rounding::Deterministic,
            backward_rounding: Rounding::Stochastic,
            forward_format: Fp4Format::E2M1,
            backward_format: Fp4Format::E2M1,
        }
    }
}

impl LayerQuantConfig {
    /// The biased comparison baseline: floor scales, deterministic rounding
    /// everywhere, gradients re-quantized from masters.
    pub fn masters_baseline() -> Self {
        LayerQuantConfig {
            mask: QuantizerMask::ALL_ON,
            scale_rule: ScaleRule::Microscaling,
            forward_rounding: Rounding::Deterministic,
            backward_rounding: Rounding::Deterministic,
            forward_format: Fp4Format::E2M1,
            backward_format: Fp4Format::E2M1,
        }
    }
}

/// RNG stream coordinates for one layer at one step. Each quantizer slot
/// owns tensor id `layer * 8 + slot`.
#[derive(Clone, Copy, Debug)]
pub struct LayerStreams {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

impl LayerStreams {
    pub fn new(seed: u64, layer: u64, step: u64) -> Self {
        LayerStreams { seed, layer, step }
    }

    pub fn quantizer(&self, slot: QuantizerSlot) -> QuantStream {
        QuantStream::new(self.seed, self.layer.wrapping_mul(8) + slot as u64, self.step)
    }
}

/// One forward operand as remembered for the backward pass.
#[derive(Clone, PartialEq, Debug)]
pub enum TapeOperand {
    Quantized(QuantizedMatrix),
    /// Pass-through of a masked-off quantizer.
    Dense(Matrix),
}

impl TapeOperand {
    pub fn to_dense(&self) -> Matrix {
        match self {
            TapeOperand::Quantized(q) => q.dequantize(),
            TapeOperand::Dense(m) => m.clone(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            TapeOperand::Quantized(q) => q.shape(),
            TapeOperand::Dense(m) => m.shape(),
        }
    }

    pub fn as_quantized(&self) -> Option<&QuantizedMatrix> {
        match self {
            TapeOperand::Quantized(q) => Some(q),
            TapeOperand::Dense(_) => None,
        }
    }
}

/// What the forward pass leaves behind: the two operands it multiplied.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    /// Q1(x) or x; N x D.
    pub x: TapeOperand,
    /// Q2(w^T) or w^T; D x C.
    pub w_t: TapeOperand,
}

fn quantize_or_pass(
    m: &Matrix,
    on: bool,
    axis: GroupAxis,
    format: Fp4Format,
    rule: ScaleRule,
    rounding: Rounding,
    stream: QuantStream,
) -> Result<TapeOperand> {
    if on {
        Ok(TapeOperand::Quantized(quantize_matrix(m, axis, format, rule, rounding, &stream)?))
    } else {
        Ok(TapeOperand::Dense(m.clone()))
    }
}

/// y = Q1(x) * Q2(w^T). Returns the output and the tape.
pub fn forward(
    x: &Matrix,
    w: &Matrix,
    cfg: &LayerQuantConfig,
    streams: &LayerStreams,
) -> Result<(Matrix, ForwardTape)> {
    if x.cols() != w.cols() {
        return Err(MxError::ShapeMismatch(format!(
            "forward: x {}x{} vs w {}x{}",
            x.rows(),
            x.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let q_x = quantize_or_pass(
        x,
        cfg.mask.q1,
        GroupAxis::RowGroups,
        cfg.forward_format,
        cfg.scale_rule,
        cfg.forward_rounding,
        streams.quantizer(QuantizerSlot::Q1),
    )?;
    let w_t = w.transpose();
    let q_wt = quantize_or_pass(
        &w_t,
        cfg.mask.q2,
        GroupAxis::ColGroups,
        cfg.forward_format,
        cfg.scale_rule,
        cfg.forward_rounding,
        streams.quantizer(QuantizerSlot::Q2),
    )?;
    let y = q_x.to_dense().matmul(&q_wt.to_dense());
    Ok((y, ForwardTape { x: q_x, w_t: q_wt }))
}

/// Forward with an externally supplied weight-operand tape (the EMA-guided
/// quantizer produces one); Q1 behaves as in `forward`.
pub fn forward_with_weight_tape(
    x: &Matrix,
    w_tape: TapeOperand,
    cfg: &LayerQuantConfig,
    streams: &LayerStreams,
) -> Result<(Matrix, ForwardTape)> {
    let (d, _c) = w_tape.shape();
    if x.cols() != d {
        return Err(MxError::ShapeMismatch(format!(
            "forward: x {}x{} vs w^T {}x{}",
            x.rows(),
            x.cols(),
            d,
            _c
        )));
    }
    let q_x = quantize_or_pass(
        x,
        cfg.mask.q1,
        GroupAxis::RowGroups,
        cfg.forward_format,
        cfg.scale_rule,
        cfg.forward_rounding,
        streams.quantizer(QuantizerSlot::Q1),
    )?;
    let y = q_x.to_dense().matmul(&w_tape.to_dense());
    Ok((y, ForwardTape { x: q_x, w_t: w_tape }))
}

fn check_tape(grad_y: &Matrix, tape: &ForwardTape) -> Result<()> {
    let (n, d) = tape.x.shape();
    let (d2, c) = tape.w_t.shape();
    if d != d2 {
        return Err(MxError::TapeMismatch(format!("tape x is {n}x{d} but tape w^T is {d2}x{c}")));
    }
    if grad_y.shape() != (n, c) {
        return Err(MxError::TapeMismatch(format!(
            "grad_y {}x{} against a tape for {n}x{c} outputs",
            grad_y.rows(),
            grad_y.cols()
        )));
    }
    Ok(())
}

/// Unbiased backward from the forward tape:
/// grad_x = Q3(grad_y) * Q4((Q2(w^T))^T), grad_w = Q5(grad_y^T) * Q6(Q1(x)),
/// all stochastic by default. Returns (grad_x, grad_w).
pub fn backward_double_quant(
    grad_y: &Matrix,
    tape: &ForwardTape,
    cfg: &LayerQuantConfig,
    streams: &LayerStreams,
) -> Result<(Matrix, Matrix)> {
    check_tape(grad_y, tape)?;
    let rule = cfg.scale_rule;
    let fmt = cfg.backward_format;
    let rnd = cfg.backward_rounding;

    let g3 = quantize_or_pass(
        grad_y,
        cfg.mask.q3,
        GroupAxis::RowGroups,
        fmt,
        rule,
        rnd,
        streams.quantizer(QuantizerSlot::Q3),
    )?;
    // Second quantization of the forward weight operand.
    let w_back = tape.w_t.to_dense().transpose();
    let g4 = quantize_or_pass(
        &w_back,
        cfg.mask.q4,
        GroupAxis::ColGroups,
        fmt,
        rule,
        rnd,
        streams.quantizer(QuantizerSlot::Q4),
    )?;
    let grad_x = g3.to_dense().matmul(&g4.to_dense());

    let gy_t = grad_y.transpose();
    let g5 = quantize_or_pass(
        &gy_t,
        cfg.mask.q5,
        GroupAxis::RowGroups,
        fmt,
        rule,
        rnd,
        streams.quantizer(QuantizerSlot::Q5),
    )?;
    // Second quantization of the forward activation operand.
    let x_back = tape.x.to_dense();
    let g6 = quantize_or_pass(
        &x_back,
        cfg.mask.q6,
        GroupAxis::ColGroups,
        fmt,
        rule,
        rnd,
        streams.quantizer(QuantizerSlot::Q6),
    )?;
    let grad_w = g5.to_dense().matmul(&g6.to_dense());
    Ok((grad_x, grad_w))
}

/// Baseline backward that re-quantizes the master tensors:
/// grad_x = Q3(grad_y) * Q4(w), grad_w = Q5(grad_y^T) * Q6(x).
/// Q4(w) differs from (Q2(w^T))^T because the groups cut across the other
/// dimension of w, which is what biases this gradient.
pub fn backward_from_masters(
    grad_y: &Matrix,
    x: &Matrix,
    w: &Matrix,
    cfg: &LayerQuantConfig,
    streams: &LayerStreams,
) -> Result<(Matrix, Matrix)> {
    let (n, d) = x.shape();
    let (c, d2) = w.shape();
    if d != d2 {
        return Err(MxError::ShapeMismatch(format!("x {n}x{d} vs w {c}x{d2}")));
    }
    if grad_y.shape() != (n, c) {
        return Err(MxError::ShapeMismatch(format!(
            "grad_y {}x{} for a {n}x{c} output",
            grad_y.rows(),
            grad_y.cols()
        )));
    }
    let rule = cfg.scale_rule;
    let fmt = cfg.backward_format;
    let rnd = cfg.backward_rounding;

    let g3 = quantize_or_pass(
        grad_y,
        cfg.mask.q3,
        GroupAxis::RowGroups,
        fmt,
        rule,
        rnd,
        streams.quantizer(QuantizerSlot::Q3),
    )?;
    let g4 = quantize_or_pass(
        w,
        cfg.mask.q4,
        GroupAxis::ColGroups,
        fmt,
        rule,
        rnd,
        streams.quantizer(QuantizerSlot::Q4),
    )?;
    let grad_x = g3.to_dense().matmul(&g4.to_dense());

    let gy_t = grad_y.transpose();
    let g5 = quantize_or_pass(
        &gy_t,
        cfg.mask.q5,
        GroupAxis::RowGroups,
        fmt,
        rule,
        rnd,
        streams.quantizer(QuantizerSlot::Q5),
    )?;
    let g6 = quantize_or_pass(
        x,
        cfg.mask.q6,
        GroupAxis::ColGroups,
        fmt,
        rule,
        rnd,
        streams.quantizer(QuantizerSlot::Q6),
    )?;
    let grad_w = g5.to_dense().matmul(&g6.to_dense());
    Ok((grad_x, grad_w))
}

/// Exact straight-through gradient of the forward tape, the reference the
/// stochastic backward is unbiased around:
/// grad_x = grad_y * (Q2(w^T))^T, grad_w = grad_y^T * Q1(x).
pub fn ste_reference_grad(grad_y: &Matrix, tape: &ForwardTape) -> Result<(Matrix, Matrix)> {
    check_tape(grad_y, tape)?;
    let grad_x = grad_y.matmul(&tape.w_t.to_dense().transpose());
    let grad_w = grad_y.transpose().matmul(&tape.x.to_dense());
    Ok((grad_x, grad_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn rand_matrix(rows: usize, cols: usize, seed: u64, span: f64) -> Matrix {
        let mut rng = DetRng::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(-span, span))
    }

    fn streams() -> LayerStreams {
        LayerStreams::new(77, 0, 0)
    }

    #[test]
    fn forward_shapes_and_tape() {
        let x = rand_matrix(8, 64, 1, 2.0);
        let w = rand_matrix(32, 64, 2, 1.0);
        let (y, tape) = forward(&x, &w, &LayerQuantConfig::default(), &streams()).unwrap();
        assert_eq!(y.shape(), (8, 32));
        assert_eq!(tape.x.shape(), (8, 64));
        assert_eq!(tape.w_t.shape(), (64, 32));
        assert!(tape.x.as_quantized().is_some());
        let q = tape.w_t.as_quantized().unwrap();
        assert_eq!(q.axis(), GroupAxis::ColGroups);
    }

    #[test]
    fn forward_all_off_is_dense_bit_exact() {
        let x = rand_matrix(5, 40, 3, 3.0);
        let w = rand_matrix(7, 40, 4, 1.5);
        let cfg = LayerQuantConfig { mask: QuantizerMask::ALL_OFF, ..Default::default() };
        let (y, tape) = forward(&x, &w, &cfg, &streams()).unwrap();
        assert_eq!(y, x.matmul(&w.transpose()));
        assert!(tape.x.as_quantized().is_none());
    }

    #[test]
    fn forward_is_exact_on_representable_weights() {
        // Weights on grid * 2^s per block reconstruct exactly, so with Q1 off
        // the layer output equals the dense product bit for bit.
        let grid = Fp4Format::E2M1.grid();
        let w = Matrix::from_fn(4, 32, |r, c| grid[(r * 5 + c) % 15] * 0.5);
        let x = rand_matrix(3, 32, 5, 2.0);
        let cfg = LayerQuantConfig {
            mask: QuantizerMask { q1: false, ..QuantizerMask::ALL_ON },
            ..Default::default()
        };
        let (y, _) = forward(&x, &w, &cfg, &streams()).unwrap();
        assert_eq!(y, x.matmul(&w.transpose()));
    }

    #[test]
    fn q1_only_and_q2_only_differ() {
        let x = rand_matrix(6, 32, 6, 2.0);
        let w = rand_matrix(6, 32, 7, 2.0);
        let mk = |mask| {
            let cfg = LayerQuantConfig { mask, ..Default::default() };
            forward(&x, &w, &cfg, &streams()).unwrap().0
        };
        let y1 = mk(QuantizerMask::only(QuantizerSlot::Q1));
        let y2 = mk(QuantizerMask::only(QuantizerSlot::Q2));
        let dense = x.matmul(&w.transpose());
        assert_ne!(y1, dense);
        assert_ne!(y2, dense);
        assert_ne!(y1, y2);
    }

    #[test]
    fn backward_all_off_matches_ste_reference_bitwise() {
        for seed in 0..20 {
            let x = rand_matrix(9, 64, 100 + seed, 2.0);
            let w = rand_matrix(16, 64, 200 + seed, 1.0);
            let gy = rand_matrix(9, 16, 300 + seed, 1.0);
            let cfg = LayerQuantConfig::default();
            let (_, tape) = forward(&x, &w, &cfg, &streams()).unwrap();
            let off = LayerQuantConfig { mask: QuantizerMask::ALL_OFF, ..cfg };
            let (gx, gw) = backward_double_quant(&gy, &tape, &off, &streams()).unwrap();
            let (rx, rw) = ste_reference_grad(&gy, &tape).unwrap();
            assert_eq!(gx, rx);
            assert_eq!(gw, rw);
        }
    }

    #[test]
    fn backward_from_masters_all_off_is_dense_bit_exact() {
        let x = rand_matrix(8, 32, 8, 2.0);
        let w = rand_matrix(8, 32, 9, 1.0);
        let gy = rand_matrix(8, 8, 10, 1.0);
        let cfg = LayerQuantConfig { mask: QuantizerMask::ALL_OFF, ..LayerQuantConfig::masters_baseline() };
        let (gx, gw) = backward_from_masters(&gy, &x, &w, &cfg, &streams()).unwrap();
        assert_eq!(gx, gy.matmul(&w));
        assert_eq!(gw, gy.transpose().matmul(&x));
    }

    #[test]
    fn q4_of_masters_differs_from_transposed_q2() {
        // The heart of the baseline's bias: column groups of w cut across
        // rows of w^T, so the two quantizations use different block scales.
        // (With every block in the same binade the scales coincide and the
        // two agree, hence the per-row magnitude spread.)
        let mut rng = DetRng::new(11);
        let w = Matrix::from_fn(32, 64, |r, _| {
            rng.uniform(-1.0, 1.0) * f64::powi(2.0, (r % 7) as i32)
        });
        let cfg = LayerQuantConfig::masters_baseline();
        let s = streams();
        let q2 = quantize_matrix(
            &w.transpose(),
            GroupAxis::ColGroups,
            cfg.forward_format,
            cfg.scale_rule,
            Rounding::Deterministic,
            &s.quantizer(QuantizerSlot::Q2),
        )
        .unwrap();
        let q4 = quantize_matrix(
            &w,
            GroupAxis::ColGroups,
            cfg.backward_format,
            cfg.scale_rule,
            Rounding::Deterministic,
            &s.quantizer(QuantizerSlot::Q4),
        )
        .unwrap();
        assert_ne!(q4.dequantize(), q2.dequantize().transpose());
    }

    #[test]
    fn tape_mismatch_is_rejected() {
        let x = rand_matrix(4, 32, 12, 1.0);
        let w = rand_matrix(8, 32, 13, 1.0);
        let cfg = LayerQuantConfig::default();
        let (_, tape) = forward(&x, &w, &cfg, &streams()).unwrap();
        let bad_gy = rand_matrix(4, 9, 14, 1.0);
        assert!(matches!(
            backward_double_quant(&bad_gy, &tape, &cfg, &streams()),
            Err(MxError::TapeMismatch(_))
        ));
        let bad_gy2 = rand_matrix(5, 8, 15, 1.0);
        assert!(ste_reference_grad(&bad_gy2, &tape).is_err());
    }

    #[test]
    fn backward_is_reproducible_per_stream() {
        let x = rand_matrix(6, 32, 16, 2.0);
        let w = rand_matrix(8, 32, 17, 1.0);
        let gy = rand_matrix(6, 8, 18, 1.0);
        let cfg = LayerQuantConfig::default();
        let s = LayerStreams::new(5, 3, 41);
        let (_, tape) = forward(&x, &w, &cfg, &s).unwrap();
        let a = backward_double_quant(&gy, &tape, &cfg, &s).unwrap();
        let b = backward_double_quant(&gy, &tape, &cfg, &s).unwrap();
        assert_eq!(a, b);
        let s2 = LayerStreams::new(5, 3, 42);
        let c = backward_double_quant(&gy, &tape, &cfg, &s2).unwrap();
        assert_ne!(a, c, "a new step re-randomizes the stochastic rounding");
    }

    #[test]
    fn scalar_chain_rule() {
        // 1x1 layer with exactly representable values: y = x*w, grad_x =
        // gy*w_q, grad_w = gy*x_q.
        let x = Matrix::from_vec(1, 1, vec![3.0]);
        let w = Matrix::from_vec(1, 1, vec![0.5]);
        let gy = Matrix::from_vec(1, 1, vec![2.0]);
        let cfg = LayerQuantConfig::default();
        let (y, tape) = forward(&x, &w, &cfg, &streams()).unwrap();
        assert_eq!(y.get(0, 0), 1.5);
        let (gx, gw) = backward_double_quant(&gy, &tape, &cfg, &streams()).unwrap();
        assert_eq!(gx.get(0, 0), 1.0, "2 * 0.5");
        assert_eq!(gw.get(0, 0), 6.0, "2 * 3");
    }
}
