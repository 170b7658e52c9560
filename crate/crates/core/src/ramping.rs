//! Per-element update amplification.
//!
//! An element whose quantized value oscillates (large quantized-to-master
//! path-length ratio) is taking many tiny master steps that each flip it
//! across a threshold. Amplifying its effective update lets the master
//! clear the threshold region in fewer, larger moves: gradients are
//! accumulated for `n` steps, then one AdamW update is applied with the
//! mean gradient and `n` times the learning rate. Elements with `n = 1`
//! reduce exactly (bit for bit) to plain AdamW, which is also exported
//! here as [`adamw_element`] so every optimizer in the workspace shares
//! one kernel.

use crate::error::{MxError, Result};

/// Hyperparameters of the AdamW rule (the learning rate is passed per step,
/// it is usually scheduled).
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamWParams {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b >= 0.0 && b < 1.0) {
                return Err(MxError::InvalidParam(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(MxError::InvalidParam(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(MxError::InvalidParam(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One AdamW update of one element. `t` is the 1-based count of updates
/// applied to this element (bias correction). Decay is decoupled and
/// applied before the moment step, both scaled by `lr`.
#[inline]
pub fn adamw_element(
    w: &mut f64,
    m: &mut f64,
    v: &mut f64,
    g: f64,
    t: u64,
    lr: f64,
    p: &AdamWParams,
) {
    *m = p.beta1 * *m + (1.0 - p.beta1) * g;
    *v = p.beta2 * *v + (1.0 - p.beta2) * (g * g);
    let mhat = *m / (1.0 - p.beta1.powi(t as i32));
    let vhat = *v / (1.0 - p.beta2.powi(t as i32));
    *w -= lr * p.weight_decay * *w;
    *w -= lr * mhat / (vhat.sqrt() + p.eps);
}

/// Amplification policy and detection cadence.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct RampingConfig {
    /// Path-ratio width of one amplification bracket.
    pub ratio_bracket: f64,
    /// Amplification added per full bracket of ratio.
    pub gain_per_bracket: u32,
    /// Per-element cap on `n`.
    pub max_amplification: u32,
    /// Steps each detection window observes (amplification runs plain
    /// meanwhile).
    pub detect_window: u64,
    /// Interval between detection window starts, in steps.
    pub detect_every: u64,
}

impl Default for RampingConfig {
    fn default() -> Self {
        RampingConfig {
            ratio_bracket: 16.0,
            gain_per_bracket: 5,
            max_amplification: 10,
            detect_window: 30,
            detect_every: 1000,
        }
    }
}

impl RampingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_bracket > 0.0 && self.ratio_bracket.is_finite()) {
            return Err(MxError::InvalidParam(format!(
                "ratio_bracket must be positive, got {}",
                self.ratio_bracket
            )));
        }
        if self.gain_per_bracket == 0 {
            return Err(MxError::InvalidParam("gain_per_bracket must be at least 1".into()));
        }
        if self.max_amplification == 0 {
            return Err(MxError::InvalidParam("max_amplification must be at least 1".into()));
        }
        if self.detect_window < 2 {
            return Err(MxError::InvalidParam(
                "detect_window needs at least 2 observations".into(),
            ));
        }
        if self.detect_every <= self.detect_window {
            return Err(MxError::InvalidParam(format!(
                "detect_every ({}) must exceed detect_window ({})",
                self.detect_every, self.detect_window
            )));
        }
        Ok(())
    }
}

/// Maps a path-length ratio to an amplification factor:
/// `min(gain * floor(ratio / bracket) + 1, max)`. Non-finite ratios (a
/// quantized value that moves while its master stands still) get the cap.
pub fn amplification(ratio: f64, cfg: &RampingConfig) -> u32 {
    if !ratio.is_finite() {
        return cfg.max_amplification;
    }
    let n = cfg.gain_per_bracket as f64 * (ratio / cfg.ratio_bracket).floor() + 1.0;
    n.clamp(1.0, cfg.max_amplification as f64) as u32
}

/// Per-element amplified-AdamW state for one tensor.
#[derive(Clone, Debug)]
pub struct RampingState {
    n: Vec<u32>,
    accum: Vec<f64>,
    phase: Vec<u32>,
    m: Vec<f64>,
    v: Vec<f64>,
    applied: Vec<u64>,
}

impl RampingState {
    /// All elements start unamplified (n = 1).
    pub fn new(len: usize) -> Self {
        RampingState {
            n: vec![1; len],
            accum: vec![0.0; len],
            phase: vec![0; len],
            m: vec![0.0; len],
            v: vec![0.0; len],
            applied: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.n.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n.is_empty()
    }

    pub fn amplifications(&self) -> &[u32] {
        &self.n
    }

    pub fn applied(&self, i: usize) -> u64 {
        self.applied[i]
    }

    pub fn mean_amplification(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.n.iter().map(|&n| n as f64).sum::<f64>() / self.len() as f64
        }
    }

    /// Installs new per-element factors. Pending accumulation is dropped
    /// (the new cycle starts empty); moments and bias-correction counts
    /// survive, they describe applied updates.
    pub fn set_amplification(&mut self, n: &[u32]) -> Result<()> {
        if n.len() != self.len() {
            return Err(MxError::ShapeMismatch(format!(
                "{} factors for {} elements",
                n.len(),
                self.len()
            )));
        }
        if let Some(bad) = n.iter().find(|&&x| x == 0) {
            return Err(MxError::InvalidParam(format!("amplification factor {bad} (must be >= 1)")));
        }
        self.n.copy_from_slice(n);
        self.accum.iter_mut().for_each(|a| *a = 0.0);
        self.phase.iter_mut().for_each(|p| *p = 0);
        Ok(())
    }

    /// Convenience: same factor everywhere.
    pub fn set_uniform_amplification(&mut self, n: u32) -> Result<()> {
        let v = vec![n; self.len()];
        self.set_amplification(&v)
    }

    /// Accumulates this step's gradient; elements whose cycle completes get
    /// one AdamW update with the mean gradient and `n * lr`.
    pub fn step(
        &mut self,
        w: &mut [f64],
        grad: &[f64],
        lr: f64,
        params: &AdamWParams,
    ) -> Result<()> {
        if w.len() != self.len() || grad.len() != self.len() {
            return Err(MxError::ShapeMismatch(format!(
                "step on {} weights / {} gradients for {} elements",
                w.len(),
                grad.len(),
                self.len()
            )));
        }
        if !lr.is_finite() {
            return Err(MxError::NonFinite { context: "ramping lr", value: lr });
        }
        for i in 0..self.len() {
            if !grad[i].is_finite() {
                return Err(MxError::NonFinite { context: "ramping gradient", value: grad[i] });
            }
            self.accum[i] += grad[i];
            self.phase[i] += 1;
            if self.phase[i] == self.n[i] {
                let n = self.n[i] as f64;
                let g = self.accum[i] / n;
                self.applied[i] += 1;
                adamw_element(
                    &mut w[i],
                    &mut self.m[i],
                    &mut self.v[i],
                    g,
                    self.applied[i],
                    n * lr,
                    params,
                );
                self.accum[i] = 0.0;
                self.phase[i] = 0;
            }
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn moments(&self, i: usize) -> (f64, f64) {
        (self.m[i], self.v[i])
    }

    /// Raw state for external persistence; `from_parts` restores it exactly.
    pub fn to_parts(&self) -> RampingStateParts {
        RampingStateParts {
            n: self.n.clone(),
            accum: self.accum.clone(),
            phase: self.phase.clone(),
            m: self.m.clone(),
            v: self.v.clone(),
            applied: self.applied.clone(),
        }
    }

    pub fn from_parts(parts: RampingStateParts) -> Result<Self> {
        let len = parts.n.len();
        if [parts.accum.len(), parts.phase.len(), parts.m.len(), parts.v.len(), parts.applied.len()]
            .iter()
            .any(|&l| l != len)
        {
            return Err(MxError::ShapeMismatch("ramping state vectors disagree on length".into()));
        }
        if parts.n.iter().any(|&n| n == 0) {
            return Err(MxError::InvalidParam("amplification factor 0 (must be >= 1)".into()));
        }
        if parts.phase.iter().zip(&parts.n).any(|(&p, &n)| p >= n) {
            return Err(MxError::InvalidParam("cycle phase must stay below its factor".into()));
        }
        Ok(RampingState {
            n: parts.n,
            accum: parts.accum,
            phase: parts.phase,
            m: parts.m,
            v: parts.v,
            applied: parts.applied,
        })
    }
}

/// Owned snapshot of a [`RampingState`], field for field.
#[derive(Clone, Debug, PartialEq)]
pub struct RampingStateParts {
    pub n: Vec<u32>,
    pub accum: Vec<f64>,
    pub phase: Vec<u32>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub applied: Vec<u64>,
}
