//! Model-level optimizer: one AdamW state per parameter tensor, with
//! quantized weight matrices optionally wrapped in per-element update
//! amplification. Both branches run the same element kernel, so a run with
//! amplification capped at 1 is bit-identical to plain AdamW.

use mxfp4::ramping::{adamw_element, AdamWParams, RampingState};

use crate::error::{Result, TrainError};
use crate::model::ParamMeta;

pub enum ParamState {
    Plain { m: Vec<f64>, v: Vec<f64>, t: u64 },
    Ramping(RampingState),
}

impl ParamState {
    pub fn len(&self) -> usize {
        match self {
            ParamState::Plain { m, .. } => m.len(),
            ParamState::Ramping(s) => s.len(),
        }
    }
}

pub struct Optimizer {
    base: AdamWParams,
    /// Effective decay per tensor: matmul weights get `base.weight_decay`,
    /// everything else 0 (identical arithmetic, no branch in the kernel).
    decay: Vec<bool>,
    pub states: Vec<ParamState>,
}

impl Optimizer {
    /// `ramp_quantized` wraps every quantized weight tensor in amplification
    /// state (initially n = 1 everywhere, i.e. plain AdamW).
    pub fn new(metas: &[ParamMeta], base: AdamWParams, ramp_quantized: bool) -> Self {
        let states = metas
            .iter()
            .map(|meta| {
                if ramp_quantized && meta.qid.is_some() {
                    ParamState::Ramping(RampingState::new(meta.len))
                } else {
                    ParamState::Plain { m: vec![0.0; meta.len], v: vec![0.0; meta.len], t: 0 }
                }
            })
            .collect();
        Optimizer { base, decay: metas.iter().map(|m| m.decay).collect(), states }
    }

    pub fn base_params(&self) -> AdamWParams {
        self.base
    }

    fn effective(&self, i: usize) -> AdamWParams {
        AdamWParams {
            weight_decay: if self.decay[i] { self.base.weight_decay } else { 0.0 },
            ..self.base
        }
    }

    /// One optimizer step. `frozen[i]`, when present, marks elements of
    /// tensor `i` that must not move (plain tensors only; the exclusivity
    /// rule keeps freezing and amplification apart).
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Vec<f64>],
        lr: f64,
        frozen: &[Option<Vec<bool>>],
    ) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(TrainError::Numeric(format!(
                "optimizer built for {} tensors stepped with {} params / {} grads",
                self.states.len(),
                params.len(),
                grads.len()
            )));
        }
        for i in 0..self.states.len() {
            let p = self.effective(i);
            let w = &mut *params[i];
            let g = &grads[i];
            if w.len() != self.states[i].len() || g.len() != self.states[i].len() {
                return Err(TrainError::Numeric(format!(
                    "tensor {i}: state len {} vs param {} / grad {}",
                    self.states[i].len(),
                    w.len(),
                    g.len()
                )));
            }
            match &mut self.states[i] {
                ParamState::Plain { m, v, t } => {
                    *t += 1;
                    let mask = frozen.get(i).and_then(|f| f.as_ref());
                    for e in 0..w.len() {
                        if mask.is_some_and(|f| f[e]) {
                            continue;
                        }
                        adamw_element(&mut w[e], &mut m[e], &mut v[e], g[e], *t, lr, &p);
                    }
                }
                ParamState::Ramping(state) => {
                    if frozen.get(i).and_then(|f| f.as_ref()).is_some() {
                        return Err(TrainError::Numeric(format!(
                            "tensor {i} is both amplified and frozen"
                        )));
                    }
                    state.step(w, g, lr, &p)?;
                }
            }
        }
        Ok(())
    }

    /// Amplified tensors in (tensor index, state) pairs.
    pub fn ramping_states(&mut self) -> Vec<(usize, &mut RampingState)> {
        self.states
            .iter_mut()
            .enumerate()
            .filter_map(|(i, s)| match s {
                ParamState::Ramping(r) => Some((i, r)),
                ParamState::Plain { .. } => None,
            })
            .collect()
    }

    pub fn has_ramping(&self) -> bool {
        self.states.iter().any(|s| matches!(s, ParamState::Ramping(_)))
    }
}

/// Cosine decay from `base` to 0 over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    let t = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Cosine decay from `base` to `base * floor` over `total` steps.
pub fn cosine_lr_floored(base: f64, floor: f64, step: u64, total: u64) -> f64 {
    base * floor + (1.0 - floor) * cosine_lr(base, step, total)
}
