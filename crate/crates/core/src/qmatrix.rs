//! Block-quantized matrices.
//!
//! A matrix is quantized along one axis: `RowGroups` cuts each row into 1x32
//! runs (the layout for left matmul operands), `ColGroups` cuts each column
//! into 32x1 runs (right operands). Trailing groups may be ragged and are
//! quantized over their actual elements only. Blocks are stored in row-major
//! group order: for RowGroups, all groups of row 0, then row 1, ...; for
//! ColGroups, all columns of group-row 0, then group-row 1, ...

use crate::block::{quantize_block, MxBlock, BLOCK_LEN};
use crate::error::{MxError, Result};
use crate::format::Fp4Format;
use crate::matrix::Matrix;
use crate::rng::QuantStream;
use crate::round::Rounding;
use crate::scale::{MxScale, ScaleRule};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum GroupAxis {
    /// 1x32 groups along rows; left operand layout.
    RowGroups,
    /// 32x1 groups along columns; right operand layout.
    ColGroups,
}

impl GroupAxis {
    pub const fn id(self) -> u8 {
        match self {
            GroupAxis::RowGroups => 0,
            GroupAxis::ColGroups => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(GroupAxis::RowGroups),
            1 => Ok(GroupAxis::ColGroups),
            other => Err(MxError::Container(format!("unknown axis id {other}"))),
        }
    }
}

/// Number of blocks a rows x cols matrix splits into along `axis`.
pub fn block_count(rows: usize, cols: usize, axis: GroupAxis) -> usize {
    match axis {
        GroupAxis::RowGroups => rows * cols.div_ceil(BLOCK_LEN),
        GroupAxis::ColGroups => rows.div_ceil(BLOCK_LEN) * cols,
    }
}

/// The (row, col, len) span of block `index` in the canonical order.
pub(crate) fn block_span(
    rows: usize,
    cols: usize,
    axis: GroupAxis,
    index: usize,
) -> (usize, usize, usize) {
    match axis {
        GroupAxis::RowGroups => {
            let per_row = cols.div_ceil(BLOCK_LEN);
            let r = index / per_row;
            let g = index % per_row;
            let c0 = g * BLOCK_LEN;
            (r, c0, BLOCK_LEN.min(cols - c0))
        }
        GroupAxis::ColGroups => {
            let gr = index / cols;
            let c = index % cols;
            let r0 = gr * BLOCK_LEN;
            (r0, c, BLOCK_LEN.min(rows - r0))
        }
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    axis: GroupAxis,
    format: Fp4Format,
    blocks: Vec<MxBlock>,
}

impl QuantizedMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn axis(&self) -> GroupAxis {
        self.axis
    }

    pub fn format(&self) -> Fp4Format {
        self.format
    }

    pub fn blocks(&self) -> &[MxBlock] {
        &self.blocks
    }

    pub(crate) fn from_parts(
        rows: usize,
        cols: usize,
        axis: GroupAxis,
        format: Fp4Format,
        blocks: Vec<MxBlock>,
    ) -> Result<Self> {
        if blocks.len() != block_count(rows, cols, axis) {
            return Err(MxError::ShapeMismatch(format!(
                "{} blocks for a {rows}x{cols} {axis:?} matrix (want {})",
                blocks.len(),
                block_count(rows, cols, axis)
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            let (_, _, len) = block_span(rows, cols, axis, i);
            if b.len() != len || b.format() != format {
                return Err(MxError::ShapeMismatch(format!("block {i} does not fit its span")));
            }
        }
        Ok(QuantizedMatrix { rows, cols, axis, format, blocks })
    }

    /// Index of the block covering element (r, c).
    pub fn block_index_of(&self, r: usize, c: usize) -> usize {
        assert!(r < self.rows && c < self.cols);
        match self.axis {
            GroupAxis::RowGroups => r * self.cols.div_ceil(BLOCK_LEN) + c / BLOCK_LEN,
            GroupAxis::ColGroups => (r / BLOCK_LEN) * self.cols + c,
        }
    }

    /// Shared scale of the block covering element (r, c).
    pub fn scale_at(&self, r: usize, c: usize) -> MxScale {
        self.blocks[self.block_index_of(r, c)].scale()
    }

    /// Reconstructed value of element (r, c).
    pub fn value_at(&self, r: usize, c: usize) -> f64 {
        let b = &self.blocks[self.block_index_of(r, c)];
        let offset = match self.axis {
            GroupAxis::RowGroups => c % BLOCK_LEN,
            GroupAxis::ColGroups => r % BLOCK_LEN,
        };
        b.value(offset)
    }

    pub fn dequantize(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        let mut buf = [0.0f64; BLOCK_LEN];
        for (i, b) in self.blocks.iter().enumerate() {
            let (r, c, len) = block_span(self.rows, self.cols, self.axis, i);
            b.dequantize_into(&mut buf[..len]);
            match self.axis {
                GroupAxis::RowGroups => {
                    for (j, &v) in buf[..len].iter().enumerate() {
                        out.set(r, c + j, v);
                    }
                }
                GroupAxis::ColGroups => {
                    for (j, &v) in buf[..len].iter().enumerate() {
                        out.set(r + j, c, v);
                    }
                }
            }
        }
        out
    }
}

/// Quantizes a dense matrix along `axis`. Each block draws from its own RNG
/// substream (`stream.block(index)`), so the result does not depend on
/// traversal order.
pub fn quantize_matrix(
    m: &Matrix,
    axis: GroupAxis,
    format: Fp4Format,
    rule: ScaleRule,
    rounding: Rounding,
    stream: &QuantStream,
) -> Result<QuantizedMatrix> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(MxError::Empty("quantize_matrix"));
    }
    let count = block_count(rows, cols, axis);
    let mut blocks = Vec::with_capacity(count);
    let mut buf = [0.0f64; BLOCK_LEN];
    for i in 0..count {
        let (r, c, len) = block_span(rows, cols, axis, i);
        match axis {
            GroupAxis::RowGroups => buf[..len].copy_from_slice(&m.row(r)[c..c + len]),
            GroupAxis::ColGroups => {
                for (j, slot) in buf[..len].iter_mut().enumerate() {
                    *slot = m.get(r + j, c);
                }
            }
        }
        let mut rng = stream.block(i as u64);
        blocks.push(quantize_block(&buf[..len], format, rule, rounding, &mut rng)?);
    }
    QuantizedMatrix::from_parts(rows, cols, axis, format, blocks)
}

pub fn dequantize_matrix(q: &QuantizedMatrix) -> Matrix {
    q.dequantize()
}

/// Product of two quantized operands. The grouping must match the contraction
/// dimension on both sides: left RowGroups, right ColGroups. The multiply
/// runs densely on the reconstructed values.
pub fn mx_matmul(a: &QuantizedMatrix, b: &QuantizedMatrix) -> Result<Matrix> {
    if a.axis() != GroupAxis::RowGroups || b.axis() != GroupAxis::ColGroups {
        return Err(MxError::AxisContract);
    }
    if a.cols() != b.rows() {
        return Err(MxError::ShapeMismatch(format!(
            "mx_matmul: {}x{} * {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(a.dequantize().matmul(&b.dequantize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn stream() -> QuantStream {
        QuantStream::new(11, 0, 0)
    }

    fn quant(m: &Matrix, axis: GroupAxis) -> QuantizedMatrix {
        quantize_matrix(m, axis, Fp4Format::E2M1, ScaleRule::TruncationFree, Rounding::Deterministic, &stream())
            .unwrap()
    }

    #[test]
    fn block_counts() {
        assert_eq!(block_count(1, 40, GroupAxis::RowGroups), 2);
        assert_eq!(block_count(1, 40, GroupAxis::ColGroups), 40);
        assert_eq!(block_count(64, 64, GroupAxis::RowGroups), 128);
        assert_eq!(block_count(64, 64, GroupAxis::ColGroups), 128);
        assert_eq!(block_count(33, 3, GroupAxis::ColGroups), 6);
    }

    #[test]
    fn ragged_row_splits_into_32_plus_8() {
        let m = Matrix::from_fn(1, 40, |_, c| c as f64 / 10.0);
        let q = quant(&m, GroupAxis::RowGroups);
        assert_eq!(q.blocks().len(), 2);
        assert_eq!(q.blocks()[0].len(), 32);
        assert_eq!(q.blocks()[1].len(), 8);
        // The tail's scale reflects only its own 8 elements.
        let tail: Vec<f64> = (32..40).map(|c| c as f64 / 10.0).collect();
        let expect = crate::scale::compute_scale_truncation_free(&tail, Fp4Format::E2M1).unwrap();
        assert_eq!(q.blocks()[1].scale(), expect);
    }

    #[test]
    fn axis_grouping_changes_the_result_under_an_outlier() {
        // One large value dominates its row group but only one column group.
        let mut m = Matrix::zeros(32, 32);
        for r in 0..32 {
            for c in 0..32 {
                m.set(r, c, 0.4 + 0.01 * (r as f64) - 0.01 * (c as f64));
            }
        }
        m.set(0, 0, 50.0);
        let row = quant(&m, GroupAxis::RowGroups).dequantize();
        let col = quant(&m, GroupAxis::ColGroups).dequantize();
        assert_ne!(row, col);
        // Row 0 shares the outlier's scale under RowGroups, so its small
        // entries are crushed; under ColGroups only column 0 is.
        assert_ne!(row.get(0, 5), col.get(0, 5));
    }

    #[test]
    fn dequantize_round_trip_on_representable_values() {
        // Values already on grid * 2^s reconstruct exactly.
        let m = Matrix::from_fn(4, 32, |r, c| {
            let grid = Fp4Format::E2M1.grid();
            grid[(r * 7 + c) % grid.len()] * 4.0
        });
        let q = quant(&m, GroupAxis::RowGroups);
        assert_eq!(q.dequantize(), m);
    }

    #[test]
    fn value_at_and_scale_at_agree_with_dequantize() {
        let mut rng = DetRng::new(3);
        let m = Matrix::from_fn(33, 17, |_, _| rng.uniform(-8.0, 8.0));
        for axis in [GroupAxis::RowGroups, GroupAxis::ColGroups] {
            let q = quant(&m, axis);
            let d = q.dequantize();
            for r in [0usize, 13, 31, 32] {
                for c in [0usize, 9, 16] {
                    assert_eq!(q.value_at(r, c), d.get(r, c));
                }
            }
        }
    }

    #[test]
    fn mx_matmul_dot_product_oracle() {
        // 1x32 row times 32x1 column: one block each; compare against a
        // brute-force dot product of the reconstructions.
        let mut rng = DetRng::new(4);
        let a = Matrix::from_fn(1, 32, |_, _| rng.uniform(-2.0, 2.0));
        let b = Matrix::from_fn(32, 1, |_, _| rng.uniform(-2.0, 2.0));
        let qa = quant(&a, GroupAxis::RowGroups);
        let qb = quant(&b, GroupAxis::ColGroups);
        let y = mx_matmul(&qa, &qb).unwrap();
        let da = qa.dequantize();
        let db = qb.dequantize();
        let mut dot = 0.0;
        for k in 0..32 {
            dot += da.get(0, k) * db.get(k, 0);
        }
        assert_eq!(y.get(0, 0), dot);
    }

    #[test]
    fn mx_matmul_enforces_the_axis_contract() {
        let m = Matrix::from_fn(32, 32, |r, c| ((r + c) % 5) as f64 - 2.0);
        let qr = quant(&m, GroupAxis::RowGroups);
        let qc = quant(&m, GroupAxis::ColGroups);
        assert!(matches!(mx_matmul(&qr, &qr), Err(MxError::AxisContract)));
        assert!(matches!(mx_matmul(&qc, &qc), Err(MxError::AxisContract)));
        assert!(matches!(mx_matmul(&qc, &qr), Err(MxError::AxisContract)));
        assert!(mx_matmul(&qr, &qc).is_ok());
    }

    #[test]
    fn power_of_two_blocks_reconstruct_exactly() {
        // Entries g * 2^s for one block: quantization is lossless, and the
        // product of lossless operands is the dense product exactly.
        let grid = Fp4Format::E2M1.grid();
        let a = Matrix::from_fn(2, 32, |r, c| grid[(r + c) % 15] * 0.25);
        let b = Matrix::from_fn(32, 2, |r, c| grid[(r * 3 + c) % 15] * 2.0);
        let qa = quant(&a, GroupAxis::RowGroups);
        let qb = quant(&b, GroupAxis::ColGroups);
        assert_eq!(qa.dequantize(), a);
        assert_eq!(qb.dequantize(), b);
        assert_eq!(mx_matmul(&qa, &qb).unwrap(), a.matmul(&b));
    }

    #[test]
    fn stochastic_quantization_is_order_independent() {
        // Equal streams give equal results; the per-block keying means a
        // hypothetical out-of-order traversal would too.
        let mut rng = DetRng::new(8);
        let m = Matrix::from_fn(40, 40, |_, _| rng.uniform(-3.0, 3.0));
        let s = QuantStream::new(21, 4, 17);
        let a = quantize_matrix(&m, GroupAxis::ColGroups, Fp4Format::E2M1, ScaleRule::TruncationFree, Rounding::Stochastic, &s).unwrap();
        let b = quantize_matrix(&m, GroupAxis::ColGroups, Fp4Format::E2M1, ScaleRule::TruncationFree, Rounding::Stochastic, &s).unwrap();
        assert_eq!(a, b);
        let c = quantize_matrix(&m, GroupAxis::ColGroups, Fp4Format::E2M1, ScaleRule::TruncationFree, Rounding::Stochastic, &QuantStream::new(21, 4, 18)).unwrap();
        assert_ne!(a, c, "a different step draws a different stream");
    }
}
