//! On-disk tensor containers, little-endian throughout.
//!
//! Quantized ("MXT1"): magic, u32 rows, u32 cols, u8 axis (0 = row groups,
//! 1 = column groups), u8 format id, then one 17-byte wire block per group in
//! row-major group order. Block count and ragged tail lengths are derived
//! from the dimensions, never stored.
//!
//! Dense ("MXD1"): magic, u32 rows, u32 cols, then rows*cols f64 row-major.

use std::io::{Read, Write};

use crate::block::{MxBlock, BLOCK_WIRE_BYTES};
use crate::error::{MxError, Result};
use crate::format::Fp4Format;
use crate::matrix::Matrix;
use crate::qmatrix::{block_count, GroupAxis, QuantizedMatrix};

pub const QUANTIZED_MAGIC: &[u8; 4] = b"MXT1";
pub const DENSE_MAGIC: &[u8; 4] = b"MXD1";

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| MxError::Container(format!("{what} {v} exceeds u32")))
}

pub fn write_quantized(w: &mut impl Write, q: &QuantizedMatrix) -> Result<()> {
    w.write_all(QUANTIZED_MAGIC)?;
    w.write_all(&dim_u32(q.rows(), "rows")?.to_le_bytes())?;
    w.write_all(&dim_u32(q.cols(), "cols")?.to_le_bytes())?;
    w.write_all(&[q.axis().id(), q.format().id()])?;
    for b in q.blocks() {
        w.write_all(&b.to_wire())?;
    }
    Ok(())
}

pub fn read_quantized(r: &mut impl Read) -> Result<QuantizedMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| MxError::Container("missing magic".into()))?;
    if &magic != QUANTIZED_MAGIC {
        return Err(MxError::Container(format!("bad magic {magic:02x?}")));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(|_| MxError::Container("truncated header".into()))?;
    let rows = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4).map_err(|_| MxError::Container("truncated header".into()))?;
    let cols = u32::from_le_bytes(buf4) as usize;
    if rows == 0 || cols == 0 {
        return Err(MxError::Container(format!("degenerate shape {rows}x{cols}")));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2).map_err(|_| MxError::Container("truncated header".into()))?;
    let axis = GroupAxis::from_id(buf2[0])?;
    let format = Fp4Format::from_id(buf2[1])?;

    let count = block_count(rows, cols, axis);
    let mut blocks = Vec::with_capacity(count);
    let mut wire = [0u8; BLOCK_WIRE_BYTES];
    for i in 0..count {
        r.read_exact(&mut wire)
            .map_err(|_| MxError::Container(format!("truncated at block {i} of {count}")))?;
        let len = span_len(rows, cols, axis, i);
        blocks.push(MxBlock::from_wire(&wire, len, format)?);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(MxError::Container("trailing bytes after last block".into()));
    }
    QuantizedMatrix::from_parts(rows, cols, axis, format, blocks)
}

fn span_len(rows: usize, cols: usize, axis: GroupAxis, index: usize) -> usize {
    use crate::block::BLOCK_LEN;
    match axis {
        GroupAxis::RowGroups => {
            let per_row = cols.div_ceil(BLOCK_LEN);
            let c0 = (index % per_row) * BLOCK_LEN;
            BLOCK_LEN.min(cols - c0)
        }
        GroupAxis::ColGroups => {
            let r0 = (index / cols) * BLOCK_LEN;
            BLOCK_LEN.min(rows - r0)
        }
    }
}

pub fn write_dense(w: &mut impl Write, m: &Matrix) -> Result<()> {
    w.write_all(DENSE_MAGIC)?;
    w.write_all(&dim_u32(m.rows(), "rows")?.to_le_bytes())?;
    w.write_all(&dim_u32(m.cols(), "cols")?.to_le_bytes())?;
    for &v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dense(r: &mut impl Read) -> Result<Matrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| MxError::Container("missing magic".into()))?;
    if &magic != DENSE_MAGIC {
        return Err(MxError::Container(format!("bad magic {magic:02x?}")));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(|_| MxError::Container("truncated header".into()))?;
    let rows = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4).map_err(|_| MxError::Container("truncated header".into()))?;
    let cols = u32::from_le_bytes(buf4) as usize;
    if rows == 0 || cols == 0 {
        return Err(MxError::Container(format!("degenerate shape {rows}x{cols}")));
    }
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| MxError::Container("shape overflow".into()))?;
    let mut data = Vec::with_capacity(count);
    let mut buf8 = [0u8; 8];
    for i in 0..count {
        r.read_exact(&mut buf8)
            .map_err(|_| MxError::Container(format!("truncated at element {i} of {count}")))?;
        data.push(f64::from_le_bytes(buf8));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(MxError::Container("trailing bytes after last element".into()));
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmatrix::quantize_matrix;
    use crate::rng::{DetRng, QuantStream};
    use crate::round::Rounding;
    use crate::scale::ScaleRule;

    #[test]
    fn quantized_round_trip_row_and_col_ragged() {
        let mut rng = DetRng::new(12);
        for (rows, cols) in [(1, 32), (1, 40), (33, 7), (40, 40), (3, 100)] {
            let m = Matrix::from_fn(rows, cols, |_, _| rng.uniform(-9.0, 9.0));
            for axis in [GroupAxis::RowGroups, GroupAxis::ColGroups] {
                let q = quantize_matrix(
                    &m,
                    axis,
                    Fp4Format::E2M1,
                    ScaleRule::TruncationFree,
                    Rounding::Deterministic,
                    &QuantStream::new(0, 0, 0),
                )
                .unwrap();
                let mut bytes = Vec::new();
                write_quantized(&mut bytes, &q).unwrap();
                assert_eq!(bytes.len(), 14 + 17 * q.blocks().len());
                let back = read_quantized(&mut bytes.as_slice()).unwrap();
                assert_eq!(back, q);
                let mut again = Vec::new();
                write_quantized(&mut again, &back).unwrap();
                assert_eq!(again, bytes, "byte-stable re-serialization");
            }
        }
    }

    #[test]
    fn header_bytes_are_as_documented() {
        let m = Matrix::from_fn(1, 32, |_, c| c as f64 / 8.0);
        let q = quantize_matrix(
            &m,
            GroupAxis::RowGroups,
            Fp4Format::E2M1,
            ScaleRule::TruncationFree,
            Rounding::Deterministic,
            &QuantStream::new(0, 0, 0),
        )
        .unwrap();
        let mut bytes = Vec::new();
        write_quantized(&mut bytes, &q).unwrap();
        assert_eq!(&bytes[0..4], b"MXT1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &32u32.to_le_bytes());
        assert_eq!(bytes[12], 0, "row groups");
        assert_eq!(bytes[13], 0, "E2M1");
    }

    #[test]
    fn rejects_corruption() {
        let m = Matrix::from_fn(2, 32, |_, c| c as f64 / 16.0);
        let q = quantize_matrix(
            &m,
            GroupAxis::RowGroups,
            Fp4Format::E2M1,
            ScaleRule::TruncationFree,
            Rounding::Deterministic,
            &QuantStream::new(0, 0, 0),
        )
        .unwrap();
        let mut bytes = Vec::new();
        write_quantized(&mut bytes, &q).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(read_quantized(&mut bad_magic.as_slice()).is_err());

        let truncated = &bytes[..bytes.len() - 3];
        assert!(read_quantized(&mut &truncated[..]).is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(read_quantized(&mut trailing.as_slice()).is_err());

        let mut bad_axis = bytes.clone();
        bad_axis[12] = 9;
        assert!(read_quantized(&mut bad_axis.as_slice()).is_err());

        let mut bad_format = bytes;
        bad_format[13] = 9;
        assert!(read_quantized(&mut bad_format.as_slice()).is_err());
    }

    #[test]
    fn dense_round_trip_bit_exact() {
        let mut rng = DetRng::new(13);
        let m = Matrix::from_fn(5, 9, |_, _| rng.normal() * 1e-3);
        let mut bytes = Vec::new();
        write_dense(&mut bytes, &m).unwrap();
        assert_eq!(bytes.len(), 12 + 8 * 45);
        let back = read_dense(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, m);
    }
}
