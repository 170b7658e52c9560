//! Training-time quantization diagnostics.
//!
//! * [`TrajectoryTracker`] — per-element path lengths of a master tensor and
//!   its quantization, and their ratio. A master creeping inside one cell
//!   moves the quantized value not at all (ratio 0); a master shuttling
//!   across a threshold drags the quantized value a full grid step each time
//!   (ratio >> 1). Ratios above [`OSCILLATION_THRESHOLD`] classify the
//!   element as oscillating.
//! * [`quant_confidence`] — how far a latent sits from its nearest rounding
//!   threshold, normalized per cell to [0, 1].
//! * [`ChangeRateAccumulator`] — mean relative step-to-step movement of a
//!   tensor, `mean ||X_t - X_{t-1}||_F / ||X_{t-1}||_F`.
//! * [`FlipTracker`] — per-element EMA of "did the quantized value change
//!   this step".

use crate::error::{MxError, Result};
use crate::format::Fp4Format;
use crate::matrix::Matrix;
use crate::round::round_deterministic;

/// Path-length ratio above which an element counts as oscillating.
pub const OSCILLATION_THRESHOLD: f64 = 16.0;

/// Ratio of quantized to master path length. A parked master under a moving
/// quantization (0 distance below a positive one) is the extreme oscillation
/// and maps to +inf; a parked pair maps to 0.
pub fn oscillation_ratio(dist_q: f64, dist_w: f64) -> f64 {
    if dist_w == 0.0 {
        if dist_q == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        dist_q / dist_w
    }
}

pub fn classify_oscillating(ratio: f64) -> bool {
    ratio > OSCILLATION_THRESHOLD
}

/// Accumulates per-element absolute path lengths of a (master, quantized)
/// pair of equally shaped tensors observed once per step.
#[derive(Clone, Debug)]
pub struct TrajectoryTracker {
    dist_w: Vec<f64>,
    dist_q: Vec<f64>,
    prev_w: Vec<f64>,
    prev_q: Vec<f64>,
    /// Number of observations; distances start accumulating at the second.
    observations: u64,
}

impl TrajectoryTracker {
    pub fn new(len: usize) -> Self {
        TrajectoryTracker {
            dist_w: vec![0.0; len],
            dist_q: vec![0.0; len],
            prev_w: vec![0.0; len],
            prev_q: vec![0.0; len],
            observations: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.dist_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dist_w.is_empty()
    }

    pub fn observations(&self) -> u64 {
        self.observations
    }

    pub fn observe(&mut self, w: &[f64], q: &[f64]) -> Result<()> {
        if w.len() != self.len() || q.len() != self.len() {
            return Err(MxError::ShapeMismatch(format!(
                "tracker of {} elements observed slices of {} and {}",
                self.len(),
                w.len(),
                q.len()
            )));
        }
        if self.observations > 0 {
            for i in 0..self.len() {
                self.dist_w[i] += (w[i] - self.prev_w[i]).abs();
                self.dist_q[i] += (q[i] - self.prev_q[i]).abs();
            }
        }
        self.prev_w.copy_from_slice(w);
        self.prev_q.copy_from_slice(q);
        self.observations += 1;
        Ok(())
    }

    pub fn dist_w(&self, i: usize) -> f64 {
        self.dist_w[i]
    }

    pub fn dist_q(&self, i: usize) -> f64 {
        self.dist_q[i]
    }

    pub fn ratio(&self, i: usize) -> f64 {
        oscillation_ratio(self.dist_q[i], self.dist_w[i])
    }

    pub fn ratios(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.ratio(i)).collect()
    }

    /// Fraction of elements whose ratio exceeds [`OSCILLATION_THRESHOLD`].
    pub fn oscillating_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let n = (0..self.len()).filter(|&i| classify_oscillating(self.ratio(i))).count();
        n as f64 / self.len() as f64
    }

    /// Forget everything, including the last snapshot.
    pub fn reset(&mut self) {
        self.dist_w.iter_mut().for_each(|d| *d = 0.0);
        self.dist_q.iter_mut().for_each(|d| *d = 0.0);
        self.observations = 0;
    }
}

/// Normalized distance of a latent from its nearest rounding threshold:
/// 0 on a threshold, 1 at the point of its cell farthest from any threshold
/// (the grid value for interior cells, the saturation end for the ±Qp
/// cells). The latent must lie within [Qn, Qp].
pub fn quant_confidence(latent: f64, format: Fp4Format) -> Result<f64> {
    if !latent.is_finite() {
        return Err(MxError::NonFinite { context: "quant_confidence", value: latent });
    }
    if latent < format.q_neg() || latent > format.q_pos() {
        return Err(MxError::OutOfRange { value: latent, lo: format.q_neg(), hi: format.q_pos() });
    }
    let nearest = round_deterministic(latent, format)?;
    let max_dist = format.max_dist(nearest)?;
    let mut min_dist = f64::INFINITY;
    for &t in format.thresholds() {
        let d = (latent - t).abs();
        if d < min_dist {
            min_dist = d;
        }
    }
    Ok(min_dist / max_dist)
}

pub const CONFIDENCE_BINS: usize = 50;

/// Histogram of confidences over [0, 1] with `CONFIDENCE_BINS` equal bins
/// (1.0 lands in the last bin).
#[derive(Clone, Debug)]
pub struct ConfidenceReport {
    bins: [u64; CONFIDENCE_BINS],
    sum: f64,
    count: u64,
}

impl Default for ConfidenceReport {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfidenceReport {
    pub fn new() -> Self {
        ConfidenceReport { bins: [0; CONFIDENCE_BINS], sum: 0.0, count: 0 }
    }

    pub fn record(&mut self, confidence: f64) {
        let bin = ((confidence * CONFIDENCE_BINS as f64) as usize).min(CONFIDENCE_BINS - 1);
        self.bins[bin] += 1;
        self.sum += confidence;
        self.count += 1;
    }

    pub fn bins(&self) -> &[u64; CONFIDENCE_BINS] {
        &self.bins
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    /// Fraction of recorded confidences in bins strictly below `cut` (which
    /// is rounded down to a bin boundary).
    pub fn fraction_below(&self, cut: f64) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let edge = ((cut * CONFIDENCE_BINS as f64) as usize).min(CONFIDENCE_BINS);
        let below: u64 = self.bins[..edge].iter().sum();
        below as f64 / self.count as f64
    }
}

/// Mean relative movement of a tensor across observed steps. Steps taken
/// from a zero-norm tensor are skipped (not recorded), so the mean divides
/// by the number of recorded steps only.
#[derive(Clone, Debug)]
pub struct ChangeRateAccumulator {
    prev: Option<Matrix>,
    sum: f64,
    recorded: u64,
}

impl Default for ChangeRateAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl ChangeRateAccumulator {
    pub fn new() -> Self {
        ChangeRateAccumulator { prev: None, sum: 0.0, recorded: 0 }
    }

    pub fn observe(&mut self, x: &Matrix) -> Result<()> {
        if !x.is_finite() {
            return Err(MxError::NonFinite { context: "change rate tensor", value: f64::NAN });
        }
        if let Some(prev) = &self.prev {
            if prev.shape() != x.shape() {
                return Err(MxError::ShapeMismatch(format!(
                    "change rate tensor went from {:?} to {:?}",
                    prev.shape(),
                    x.shape()
                )));
            }
            let denom = prev.frobenius_norm();
            if denom > 0.0 {
                self.sum += x.sub(prev).frobenius_norm() / denom;
                self.recorded += 1;
            }
        }
        self.prev = Some(x.clone());
        Ok(())
    }

    pub fn recorded(&self) -> u64 {
        self.recorded
    }

    pub fn rate(&self) -> f64 {
        if self.recorded == 0 {
            0.0
        } else {
            self.sum / self.recorded as f64
        }
    }
}

/// Per-element exponential moving average of the indicator "the value
/// changed since the previous observation".
#[derive(Clone, Debug)]
pub struct FlipTracker {
    momentum: f64,
    freq: Vec<f64>,
    prev: Vec<f64>,
    observations: u64,
    flips: u64,
}

impl FlipTracker {
    pub fn new(len: usize) -> Self {
        Self::with_momentum(len, 0.9).expect("default momentum is valid")
    }

    pub fn with_momentum(len: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(MxError::InvalidParam(format!(
                "flip momentum must be in (0, 1), got {momentum}"
            )));
        }
        Ok(FlipTracker {
            momentum,
            freq: vec![0.0; len],
            prev: vec![0.0; len],
            observations: 0,
            flips: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }

    pub fn observe(&mut self, q: &[f64]) -> Result<()> {
        if q.len() != self.len() {
            return Err(MxError::ShapeMismatch(format!(
                "flip tracker of {} elements observed {}",
                self.len(),
                q.len()
            )));
        }
        if self.observations > 0 {
            for i in 0..q.len() {
                let flipped = q[i] != self.prev[i];
                if flipped {
                    self.flips += 1;
                }
                self.freq[i] =
                    self.momentum * self.freq[i] + (1.0 - self.momentum) * f64::from(flipped);
            }
        }
        self.prev.copy_from_slice(q);
        self.observations += 1;
        Ok(())
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freq
    }

    pub fn mean_frequency(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.freq.iter().sum::<f64>() / self.len() as f64
        }
    }

    /// Total flips counted across all elements and steps.
    pub fn total_flips(&self) -> u64 {
        self.flips
    }

    /// Number of `observe` calls so far.
    pub fn observations(&self) -> u64 {
        self.observations
    }

    /// Raw state for external persistence; `from_parts` restores it exactly.
    pub fn to_parts(&self) -> FlipTrackerParts {
        FlipTrackerParts {
            momentum: self.momentum,
            freq: self.freq.clone(),
            prev: self.prev.clone(),
            observations: self.observations,
            flips: self.flips,
        }
    }

    pub fn from_parts(parts: FlipTrackerParts) -> Result<Self> {
        if !(parts.momentum > 0.0 && parts.momentum < 1.0) {
            return Err(MxError::InvalidParam(format!(
                "flip momentum must be in (0, 1), got {}",
                parts.momentum
            )));
        }
        if parts.freq.len() != parts.prev.len() {
            return Err(MxError::ShapeMismatch("flip tracker vectors disagree on length".into()));
        }
        Ok(FlipTracker {
            momentum: parts.momentum,
            freq: parts.freq,
            prev: parts.prev,
            observations: parts.observations,
            flips: parts.flips,
        })
    }
}

/// Owned snapshot of a [`FlipTracker`], field for field.
#[derive(Clone, Debug, PartialEq)]
pub struct FlipTrackerParts {
    pub momentum: f64,
    pub freq: Vec<f64>,
    pub prev: Vec<f64>,
    pub observations: u64,
    pub flips: u64,
}
