//! Post-hoc oscillation probe: resume a checkpoint for a number of steps and
//! report windowed diagnostics plus a static quantization-confidence
//! histogram of the loaded masters.

use std::path::Path;

use mxfp4::diagnostics::{quant_confidence, ConfidenceReport, CONFIDENCE_BINS};
use mxfp4::linear::{LayerStreams, QuantizerSlot};
use mxfp4::{quantize_matrix, GroupAxis, Rounding};
use serde::Serialize;

use crate::checkpoint;
use crate::error::Result;
use crate::harness::Trainer;
use crate::metrics::{MetricLog, MetricRecord};

#[derive(Serialize, Clone, Debug)]
pub struct ConfidenceSummary {
    /// Element counts over `CONFIDENCE_BINS` equal bins of [0, 1].
    pub bins: Vec<u64>,
    pub count: u64,
    pub mean: f64,
    /// Fraction of elements with confidence below 0.1 (flip-prone).
    pub low_fraction: f64,
}

#[derive(Serialize, Clone, Debug)]
pub struct DiagnoseReport {
    pub start_step: u64,
    pub steps_run: u64,
    pub confidence: ConfidenceSummary,
    pub records: Vec<MetricRecord>,
}

/// Confidence of every quantized layer's master weights under the run's own
/// scale rule and format (deterministic nearest view).
pub fn confidence_histogram(trainer: &Trainer) -> Result<ConfidenceSummary> {
    let mut report = ConfidenceReport::new();
    let cfg = &trainer.quant;
    if cfg.mask.q2 {
        for qid in 0..trainer.model.qlayer_count() {
            let w_t = trainer.model.qlayer(qid).w.transpose();
            let qm = quantize_matrix(
                &w_t,
                GroupAxis::ColGroups,
                cfg.forward_format,
                cfg.scale_rule,
                Rounding::Deterministic,
                &LayerStreams::new(trainer.cfg.seed, qid as u64, trainer.step)
                    .quantizer(QuantizerSlot::Q2),
            )?;
            let fmt = qm.format();
            let (lo, hi) = (fmt.q_neg(), fmt.q_pos());
            for r in 0..qm.rows() {
                for c in 0..qm.cols() {
                    let latent = (w_t.get(r, c) / qm.scale_at(r, c).value()).clamp(lo, hi);
                    report.record(quant_confidence(latent, fmt)?);
                }
            }
        }
    }
    Ok(ConfidenceSummary {
        bins: report.bins().to_vec(),
        count: report.count(),
        mean: report.mean(),
        low_fraction: report.fraction_below(0.1),
    })
}

/// Loads `path` and trains `window` further steps with the diagnostics
/// window set to `window`, so at least one full report is emitted. The
/// learning-rate schedule is extended if the checkpoint was already at its
/// final step (a zero learning rate would show no movement at all).
pub fn diagnose(path: &Path, window: u64) -> Result<DiagnoseReport> {
    let mut trainer = checkpoint::load(path)?;
    let start = trainer.step;
    let confidence = confidence_histogram(&trainer)?;
    trainer.cfg.diagnostics.window = window;
    trainer.cfg.steps = trainer.cfg.steps.max(start + window);
    let mut log = MetricLog::in_memory();
    for _ in 0..window {
        trainer.step_once(&mut log)?;
    }
    Ok(DiagnoseReport {
        start_step: start,
        steps_run: window,
        confidence,
        records: log.into_records(),
    })
}

const _: () = assert!(CONFIDENCE_BINS == 50);
