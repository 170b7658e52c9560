//! FP4 element formats: value grids, 4-bit codes, and cell geometry.
//!
//! A 4-bit code is laid out `sign(1) | exponent | mantissa` with exponent 0
//! reserved for subnormals, so encode/decode reduce to an 8-entry magnitude
//! table per sign. Both supported formats have 15 distinct values (negative
//! zero duplicates zero and is never produced by the encoder).

use crate::error::{MxError, Result};

/// Element format of a quantized block.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub enum Fp4Format {
    /// 1 sign, 2 exponent, 1 mantissa bit; values ±{0, 0.5, 1, 1.5, 2, 3, 4, 6}.
    #[default]
    E2M1,
    /// 1 sign, 3 exponent bits, no mantissa; values ±{0, 0.25, 0.5, 1, 2, 4, 8, 16}.
    E3M0,
}

const E2M1_MAGNITUDES: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];
const E3M0_MAGNITUDES: [f64; 8] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

const E2M1_GRID: [f64; 15] = [
    -6.0, -4.0, -3.0, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0,
];
const E3M0_GRID: [f64; 15] = [
    -16.0, -8.0, -4.0, -2.0, -1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0,
];

// Midpoints of consecutive grid values; these are the rounding thresholds.
const E2M1_THRESHOLDS: [f64; 14] = [
    -5.0, -3.5, -2.5, -1.75, -1.25, -0.75, -0.25, 0.25, 0.75, 1.25, 1.75, 2.5, 3.5, 5.0,
];
const E3M0_THRESHOLDS: [f64; 14] = [
    -12.0, -6.0, -3.0, -1.5, -0.75, -0.375, -0.125, 0.125, 0.375, 0.75, 1.5, 3.0, 6.0, 12.0,
];

impl Fp4Format {
    /// Largest representable value.
    pub const fn q_pos(self) -> f64 {
        match self {
            Fp4Format::E2M1 => 6.0,
            Fp4Format::E3M0 => 16.0,
        }
    }

    /// Smallest representable value.
    pub const fn q_neg(self) -> f64 {
        match self {
            Fp4Format::E2M1 => -6.0,
            Fp4Format::E3M0 => -16.0,
        }
    }

    /// Largest binary exponent of the format (log2 of the top binade).
    pub const fn e_max(self) -> i32 {
        match self {
            Fp4Format::E2M1 => 2,
            Fp4Format::E3M0 => 4,
        }
    }

    /// The eight non-negative magnitudes, indexed by the low 3 code bits.
    pub const fn magnitudes(self) -> &'static [f64; 8] {
        match self {
            Fp4Format::E2M1 => &E2M1_MAGNITUDES,
            Fp4Format::E3M0 => &E3M0_MAGNITUDES,
        }
    }

    /// All 15 distinct values, ascending.
    pub const fn grid(self) -> &'static [f64; 15] {
        match self {
            Fp4Format::E2M1 => &E2M1_GRID,
            Fp4Format::E3M0 => &E3M0_GRID,
        }
    }

    /// Midpoints of consecutive grid values, ascending.
    pub const fn thresholds(self) -> &'static [f64; 14] {
        match self {
            Fp4Format::E2M1 => &E2M1_THRESHOLDS,
            Fp4Format::E3M0 => &E3M0_THRESHOLDS,
        }
    }

    /// Wire identifier used by containers.
    pub const fn id(self) -> u8 {
        match self {
            Fp4Format::E2M1 => 0,
            Fp4Format::E3M0 => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Fp4Format::E2M1),
            1 => Ok(Fp4Format::E3M0),
            other => Err(MxError::Container(format!("unknown format id {other}"))),
        }
    }

    /// Quantization cell of the grid value `q`: interior cells are bounded by
    /// the neighboring thresholds, the two boundary cells by Qn and Qp.
    pub fn cell_bounds(self, q: f64) -> Result<(f64, f64)> {
        let grid = self.grid();
        let thr = self.thresholds();
        let idx = grid
            .iter()
            .position(|&g| g == q)
            .ok_or(MxError::OutOfRange { value: q, lo: self.q_neg(), hi: self.q_pos() })?;
        let lo = if idx == 0 { grid[0] } else { thr[idx - 1] };
        let hi = if idx == grid.len() - 1 { grid[grid.len() - 1] } else { thr[idx] };
        Ok((lo, hi))
    }

    /// Largest distance from a point of `q`'s cell to its nearest threshold.
    /// Half the width for interior cells; the full width at the two ends,
    /// where the cell touches only one threshold.
    pub fn max_dist(self, q: f64) -> Result<f64> {
        let (lo, hi) = self.cell_bounds(q)?;
        let grid = self.grid();
        if q == grid[0] || q == grid[grid.len() - 1] {
            Ok(hi - lo)
        } else {
            Ok((hi - lo) / 2.0)
        }
    }
}

/// A 4-bit element code; bit 3 is the sign, bits 0..3 index the magnitude.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
#[repr(transparent)]
pub struct Fp4Code(u8);

impl Fp4Code {
    pub const ZERO: Fp4Code = Fp4Code(0);

    /// Masks to the low nibble.
    pub const fn from_bits(bits: u8) -> Self {
        Fp4Code(bits & 0x0F)
    }

    pub const fn to_bits(self) -> u8 {
        self.0
    }

    /// The represented value. `0x8` (negative zero) decodes to 0.0.
    pub fn decode(self, fmt: Fp4Format) -> f64 {
        let mag = fmt.magnitudes()[(self.0 & 0x7) as usize];
        if self.0 & 0x8 != 0 {
            -mag
        } else {
            mag
        }
    }

    /// Encodes a value that lies exactly on the grid. Zero encodes as +0.
    pub fn encode(value: f64, fmt: Fp4Format) -> Result<Self> {
        let mags = fmt.magnitudes();
        let mag = value.abs();
        match mags.iter().position(|&m| m == mag) {
            Some(idx) => {
                let sign = if value < 0.0 { 0x8 } else { 0x0 };
                Ok(Fp4Code(sign | idx as u8))
            }
            None => Err(MxError::OutOfRange {
                value,
                lo: fmt.q_neg(),
                hi: fmt.q_pos(),
            }),
        }
    }
}

/// The two grid values bracketing `x`: the largest grid value <= x and the
/// smallest >= x. On-grid inputs return the same value twice.
pub fn bracket(x: f64, fmt: Fp4Format) -> Result<(f64, f64)> {
    if !x.is_finite() {
        return Err(MxError::NonFinite { context: "bracket", value: x });
    }
    if x < fmt.q_neg() || x > fmt.q_pos() {
        return Err(MxError::OutOfRange { value: x, lo: fmt.q_neg(), hi: fmt.q_pos() });
    }
    let grid = fmt.grid();
    // First index with grid[i] >= x; in range because x <= Qp.
    let hi = grid.partition_point(|&g| g < x);
    let lo = if grid[hi] == x { hi } else { hi - 1 };
    Ok((grid[lo], grid[hi]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e2m1_code_table() {
        let cases: [(u8, f64); 16] = [
            (0x0, 0.0),
            (0x1, 0.5),
            (0x2, 1.0),
            (0x3, 1.5),
            (0x4, 2.0),
            (0x5, 3.0),
            (0x6, 4.0),
            (0x7, 6.0),
            (0x8, -0.0),
            (0x9, -0.5),
            (0xA, -1.0),
            (0xB, -1.5),
            (0xC, -2.0),
            (0xD, -3.0),
            (0xE, -4.0),
            (0xF, -6.0),
        ];
        for (bits, expected) in cases {
            assert_eq!(Fp4Code::from_bits(bits).decode(Fp4Format::E2M1), expected, "bits {bits:#x}");
        }
    }

    #[test]
    fn e3m0_code_table() {
        let cases: [(u8, f64); 8] = [
            (0x0, 0.0),
            (0x1, 0.25),
            (0x2, 0.5),
            (0x3, 1.0),
            (0x4, 2.0),
            (0x5, 4.0),
            (0x6, 8.0),
            (0x7, 16.0),
        ];
        for (bits, expected) in cases {
            assert_eq!(Fp4Code::from_bits(bits).decode(Fp4Format::E3M0), expected);
            assert_eq!(Fp4Code::from_bits(bits | 0x8).decode(Fp4Format::E3M0), -expected);
        }
    }

    #[test]
    fn encode_round_trips_every_grid_value() {
        for fmt in [Fp4Format::E2M1, Fp4Format::E3M0] {
            for &g in fmt.grid() {
                let code = Fp4Code::encode(g, fmt).unwrap();
                assert_eq!(code.decode(fmt), g);
            }
        }
    }

    #[test]
    fn encode_zero_is_positive_zero() {
        let code = Fp4Code::encode(0.0, Fp4Format::E2M1).unwrap();
        assert_eq!(code.to_bits(), 0x0);
        let code = Fp4Code::encode(-0.0, Fp4Format::E2M1).unwrap();
        assert_eq!(code.to_bits(), 0x0, "negative zero folds into +0");
    }

    #[test]
    fn encode_rejects_off_grid_values() {
        assert!(Fp4Code::encode(0.7, Fp4Format::E2M1).is_err());
        assert!(Fp4Code::encode(7.0, Fp4Format::E2M1).is_err());
        assert!(Fp4Code::encode(1.5, Fp4Format::E3M0).is_err());
    }

    #[test]
    fn grids_are_strictly_ascending_and_symmetric() {
        for fmt in [Fp4Format::E2M1, Fp4Format::E3M0] {
            let grid = fmt.grid();
            for w in grid.windows(2) {
                assert!(w[0] < w[1]);
            }
            for i in 0..grid.len() {
                assert_eq!(grid[i], -grid[grid.len() - 1 - i]);
            }
            assert_eq!(grid[grid.len() - 1], fmt.q_pos());
            assert_eq!(grid[0], fmt.q_neg());
        }
    }

    #[test]
    fn thresholds_are_midpoints() {
        for fmt in [Fp4Format::E2M1, Fp4Format::E3M0] {
            let grid = fmt.grid();
            let thr = fmt.thresholds();
            assert_eq!(thr.len(), grid.len() - 1);
            for i in 0..thr.len() {
                assert_eq!(thr[i], (grid[i] + grid[i + 1]) / 2.0);
            }
        }
    }

    #[test]
    fn e_max_matches_top_binade() {
        for fmt in [Fp4Format::E2M1, Fp4Format::E3M0] {
            assert!(2f64.powi(fmt.e_max()) <= fmt.q_pos());
            assert!(2f64.powi(fmt.e_max() + 1) > fmt.q_pos());
        }
    }

    #[test]
    fn bracket_interior_and_on_grid() {
        let f = Fp4Format::E2M1;
        assert_eq!(bracket(0.7, f).unwrap(), (0.5, 1.0));
        assert_eq!(bracket(5.0, f).unwrap(), (4.0, 6.0));
        assert_eq!(bracket(-0.74, f).unwrap(), (-1.0, -0.5));
        assert_eq!(bracket(3.0, f).unwrap(), (3.0, 3.0));
        assert_eq!(bracket(6.0, f).unwrap(), (6.0, 6.0));
        assert_eq!(bracket(-6.0, f).unwrap(), (-6.0, -6.0));
        assert_eq!(bracket(0.0, f).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn bracket_rejects_out_of_range_and_non_finite() {
        let f = Fp4Format::E2M1;
        assert!(bracket(6.5, f).is_err());
        assert!(bracket(-6.0000001, f).is_err());
        assert!(bracket(f64::NAN, f).is_err());
        assert!(bracket(f64::INFINITY, f).is_err());
    }

    #[test]
    fn cell_bounds_interior_and_boundary() {
        let f = Fp4Format::E2M1;
        assert_eq!(f.cell_bounds(-1.0).unwrap(), (-1.25, -0.75));
        assert_eq!(f.cell_bounds(0.0).unwrap(), (-0.25, 0.25));
        assert_eq!(f.cell_bounds(6.0).unwrap(), (5.0, 6.0));
        assert_eq!(f.cell_bounds(-6.0).unwrap(), (-6.0, -5.0));
        assert!(f.cell_bounds(0.7).is_err());
    }

    #[test]
    fn max_dist_interior_half_width_boundary_full_width() {
        let f = Fp4Format::E2M1;
        assert_eq!(f.max_dist(-1.0).unwrap(), 0.25);
        assert_eq!(f.max_dist(2.0).unwrap(), 0.375);
        assert_eq!(f.max_dist(6.0).unwrap(), 1.0);
        assert_eq!(f.max_dist(-6.0).unwrap(), 1.0);
    }

    #[test]
    fn format_ids_round_trip() {
        for fmt in [Fp4Format::E2M1, Fp4Format::E3M0] {
            assert_eq!(Fp4Format::from_id(fmt.id()).unwrap(), fmt);
        }
        assert!(Fp4Format::from_id(7).is_err());
    }
}
