//! Structured training metrics: one JSON object per line, tagged by `kind`.
//! The schema is frozen by tests so downstream tooling can rely on it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Per-layer slice of a diagnostics report.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LayerDiag {
    pub name: String,
    /// Mean relative change rate of the quantized weights over the window.
    pub rate: f64,
    /// Fraction of elements whose quantized/master travel ratio exceeds the
    /// oscillation threshold.
    pub osc_fraction: f64,
    /// Mean EMA flip frequency across elements.
    pub flip_mean: f64,
    /// Mean quantization confidence across elements.
    pub conf_mean: f64,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricRecord {
    Train {
        step: u64,
        loss: f64,
        lr: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        penalty: Option<f64>,
    },
    Eval {
        step: u64,
        val_loss: f64,
        val_acc: f64,
    },
    Diag {
        step: u64,
        /// Mean over quantized layers of the per-layer `rate`.
        wq_rate: f64,
        osc_fraction: f64,
        flip_mean: f64,
        conf_mean: f64,
        layers: Vec<LayerDiag>,
    },
    /// Emitted when an amplification-detection window closes.
    Detect {
        step: u64,
        mean_amplification: f64,
        /// Fraction of tracked elements with amplification above 1.
        amplified_fraction: f64,
        /// Element counts per amplification value, index 0 = n of 1.
        histogram: Vec<u64>,
    },
    Final {
        step: u64,
        val_loss: f64,
        val_acc: f64,
    },
    /// The run stopped early on a non-finite loss at this step.
    Abort {
        step: u64,
    },
}

impl MetricRecord {
    pub fn step(&self) -> u64 {
        match *self {
            MetricRecord::Train { step, .. }
            | MetricRecord::Eval { step, .. }
            | MetricRecord::Diag { step, .. }
            | MetricRecord::Detect { step, .. }
            | MetricRecord::Final { step, .. }
            | MetricRecord::Abort { step, .. } => step,
        }
    }
}

/// Collects records in memory and, when a path is given, mirrors each one to
/// a JSON-lines file as it arrives.
pub struct MetricLog {
    records: Vec<MetricRecord>,
    sink: Option<std::io::BufWriter<std::fs::File>>,
}

impl MetricLog {
    pub fn in_memory() -> Self {
        MetricLog { records: Vec::new(), sink: None }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        Ok(MetricLog { records: Vec::new(), sink: Some(std::io::BufWriter::new(file)) })
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(sink) = &mut self.sink {
            serde_json::to_writer(&mut *sink, &record)?;
            sink.write_all(b"\n")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<MetricRecord> {
        self.records
    }

    pub fn finish(&mut self) -> Result<()> {
        if let Some(sink) = &mut self.sink {
            sink.flush()?;
        }
        Ok(())
    }
}

pub fn read_jsonl(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
