//! Multi-run sweeps over one base config: per-quantizer impact and small
//! ablation grids. Every variant shares the base seed and data, differing
//! only in the swept knobs, so rows are directly comparable.

use serde::Serialize;

use crate::config::{FormatOpt, GradientPath, RoundingOpt, ScaleRuleOpt, TrainConfig};
use crate::error::Result;
use crate::harness::{run, RunResult};

#[derive(Serialize, Clone, Debug)]
pub struct RunSummary {
    pub name: String,
    pub final_val_acc: f64,
    pub final_val_loss: f64,
    /// Quantized-weight change rate over the last diagnostics window.
    pub wq_rate: Option<f64>,
    pub osc_fraction: Option<f64>,
}

#[derive(Serialize, Clone, Debug)]
pub struct SweepReport {
    pub kind: String,
    pub seed: u64,
    pub steps: u64,
    pub runs: Vec<RunSummary>,
}

fn summarize(name: String, res: &RunResult) -> RunSummary {
    RunSummary {
        name,
        final_val_acc: res.final_val_acc,
        final_val_loss: res.final_val_loss,
        wq_rate: res.last_diag.map(|d| d.wq_rate),
        osc_fraction: res.last_diag.map(|d| d.osc_fraction),
    }
}

/// Strips per-run outputs so sweep variants never write over each other.
fn variant(base: &TrainConfig) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.output = Default::default();
    cfg
}

/// One run per quantizer mask: everything off, each of the six alone, all on.
pub fn impact(base: &TrainConfig) -> Result<SweepReport> {
    let mut runs = Vec::new();
    let mut masks = vec!["none".to_string()];
    masks.extend((1..=6).map(|i| format!("q{i}")));
    masks.push("all".into());
    for mask in masks {
        let mut cfg = variant(base);
        cfg.quant.enabled = true;
        cfg.quant.mask = mask.clone();
        let res = run(&cfg)?;
        runs.push(summarize(mask, &res));
    }
    Ok(SweepReport { kind: "impact".into(), seed: base.seed, steps: base.steps, runs })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AblateGrid {
    /// backward rounding x gradient path x scale rule (8 runs).
    Backward,
    /// forward format x backward format (4 runs).
    Format,
}

pub fn ablate(base: &TrainConfig, grid: AblateGrid) -> Result<SweepReport> {
    let mut runs = Vec::new();
    match grid {
        AblateGrid::Backward => {
            for rounding in [RoundingOpt::Deterministic, RoundingOpt::Stochastic] {
                for path in [GradientPath::Tape, GradientPath::Masters] {
                    for rule in [ScaleRuleOpt::TruncationFree, ScaleRuleOpt::Microscaling] {
                        let mut cfg = variant(base);
                        cfg.quant.backward_rounding = rounding;
                        cfg.quant.gradient_path = path;
                        cfg.quant.scale_rule = rule;
                        let name = format!(
                            "{}/{}/{}",
                            match rounding {
                                RoundingOpt::Deterministic => "deterministic",
                                RoundingOpt::Stochastic => "stochastic",
                            },
                            match path {
                                GradientPath::Tape => "tape",
                                GradientPath::Masters => "masters",
                            },
                            match rule {
                                ScaleRuleOpt::TruncationFree => "truncation-free",
                                ScaleRuleOpt::Microscaling => "microscaling",
                            }
                        );
                        let res = run(&cfg)?;
                        runs.push(summarize(name, &res));
                    }
                }
            }
        }
        AblateGrid::Format => {
            for fwd in [FormatOpt::E2m1, FormatOpt::E3m0] {
                for bwd in [FormatOpt::E2m1, FormatOpt::E3m0] {
                    let mut cfg = variant(base);
                    cfg.quant.forward_format = fwd;
                    cfg.quant.backward_format = bwd;
                    let tag = |f: FormatOpt| match f {
                        FormatOpt::E2m1 => "e2m1",
                        FormatOpt::E3m0 => "e3m0",
                    };
                    let name = format!("fwd-{}/bwd-{}", tag(fwd), tag(bwd));
                    let res = run(&cfg)?;
                    runs.push(summarize(name, &res));
                }
            }
        }
    }
    let kind = match grid {
        AblateGrid::Backward => "ablate-backward",
        AblateGrid::Format => "ablate-format",
    };
    Ok(SweepReport { kind: kind.into(), seed: base.seed, steps: base.steps, runs })
}

pub fn render_table(report: &SweepReport) -> String {
    let name_w = report.runs.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{} (seed {}, {} steps)\n{:<name_w$}  {:>9}  {:>10}  {:>10}  {:>8}\n",
        report.kind, report.seed, report.steps, "name", "val_acc", "val_loss", "wq_rate", "osc"
    );
    for r in &report.runs {
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "-".into(),
        };
        out.push_str(&format!(
            "{:<name_w$}  {:>9.4}  {:>10.4}  {:>10}  {:>8}\n",
            r.name,
            r.final_val_acc,
            r.final_val_loss,
            fmt_opt(r.wq_rate),
            fmt_opt(r.osc_fraction),
        ));
    }
    out
}
