//! Prior-work stabilization baselines the studied methods are compared
//! against: a quantization-error penalty on the loss ("dampen") and
//! permanent freezing of frequently flipping elements ("freeze").
//!
//! Neutral settings are exactly additive: with `lambda = 0` the harness skips
//! the gradient addition entirely (adding 0.0 would flip a -0.0 gradient to
//! +0.0), and a flip threshold above 1 can never fire because an EMA of 0/1
//! indicators stays strictly below 1.

use mxfp4::diagnostics::FlipTracker;
use mxfp4::Matrix;

use crate::error::{Result, TrainError};

/// lambda * sum((w - wq)^2) and its gradient w.r.t. w, `2 lambda (w - wq)`.
pub fn dampen_penalty(w: &Matrix, wq: &Matrix, lambda: f64) -> (f64, Vec<f64>) {
    assert_eq!(w.shape(), wq.shape());
    let mut penalty = 0.0;
    let grad = w
        .data()
        .iter()
        .zip(wq.data())
        .map(|(&a, &b)| {
            let d = a - b;
            penalty += d * d;
            2.0 * lambda * d
        })
        .collect();
    (lambda * penalty, grad)
}

/// Per-quantized-layer flip tracking with permanent element freezing.
///
/// Each layer's quantized view is observed once per step. After warmup, any
/// element whose flip-frequency EMA exceeds the threshold is pinned: its
/// master is overwritten with the running average of its quantized values
/// and the optimizer skips it from then on.
pub struct FreezeState {
    pub threshold: f64,
    pub momentum: f64,
    pub warmup_steps: u64,
    pub trackers: Vec<FlipTracker>,
    /// EMA of each element's quantized value, the value a frozen master pins to.
    pub pins: Vec<Vec<f64>>,
    pub frozen: Vec<Vec<bool>>,
}

impl FreezeState {
    pub fn new(lens: &[usize], threshold: f64, momentum: f64, warmup_steps: u64) -> Result<Self> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(TrainError::Config(format!(
                "freeze threshold must be positive, got {threshold}"
            )));
        }
        let trackers = lens
            .iter()
            .map(|&l| FlipTracker::with_momentum(l, momentum))
            .collect::<mxfp4::Result<_>>()?;
        Ok(FreezeState {
            threshold,
            momentum,
            warmup_steps,
            trackers,
            pins: lens.iter().map(|&l| vec![0.0; l]).collect(),
            frozen: lens.iter().map(|&l| vec![false; l]).collect(),
        })
    }

    /// Feed one step's quantized view of layer `qid`.
    pub fn observe(&mut self, qid: usize, wq: &[f64]) -> Result<()> {
        let first = self.trackers[qid].observations() == 0;
        self.trackers[qid].observe(wq)?;
        let pins = &mut self.pins[qid];
        if first {
            pins.copy_from_slice(wq);
        } else {
            for (p, &q) in pins.iter_mut().zip(wq) {
                *p = self.momentum * *p + (1.0 - self.momentum) * q;
            }
        }
        Ok(())
    }

    /// Freeze every above-threshold element of layer `qid`, overwriting its
    /// master with the pin value. Returns how many were newly frozen.
    pub fn maybe_freeze(&mut self, step: u64, qid: usize, masters: &mut [f64]) -> usize {
        if step < self.warmup_steps {
            return 0;
        }
        let freqs = self.trackers[qid].frequencies();
        let mut newly = 0;
        for e in 0..masters.len() {
            if !self.frozen[qid][e] && freqs[e] > self.threshold {
                self.frozen[qid][e] = true;
                masters[e] = self.pins[qid][e];
                newly += 1;
            }
        }
        newly
    }

    pub fn mask(&self, qid: usize) -> &[bool] {
        &self.frozen[qid]
    }

    pub fn frozen_fraction(&self) -> f64 {
        let total: usize = self.frozen.iter().map(|f| f.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let hit: usize = self.frozen.iter().map(|f| f.iter().filter(|&&b| b).count()).sum();
        hit as f64 / total as f64
    }
}
