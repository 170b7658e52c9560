//! Run configuration: a documented TOML key set with strict validation.
//! Unknown keys are rejected, `seed` is mandatory, and every invalid
//! combination produces an error naming the offending keys.

use mxfp4::linear::{LayerQuantConfig, QuantizerMask, QuantizerSlot};
use mxfp4::ramping::RampingConfig;
use mxfp4::{Fp4Format, Rounding, ScaleRule};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Master seed; every random stream in the run derives from it.
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub quant: QuantSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub weight_quantizer: WeightQuantizerSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_steps() -> u64 {
    1200
}
fn default_batch() -> usize {
    32
}
fn default_eval_every() -> u64 {
    200
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub classes: usize,
    pub tokens: usize,
    pub token_dim: usize,
    /// Standard deviation of the per-coordinate Gaussian noise around each
    /// class mean.
    pub noise: f64,
    pub val_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { classes: 16, tokens: 4, token_dim: 16, noise: 0.7, val_size: 512 }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Permit contraction dimensions that are not multiples of 32 (the
    /// trailing block of each group is then shorter).
    pub allow_ragged: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { depth: 2, width: 64, heads: 4, mlp_ratio: 2, allow_ragged: false }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleRuleOpt {
    TruncationFree,
    Microscaling,
}

impl From<ScaleRuleOpt> for ScaleRule {
    fn from(o: ScaleRuleOpt) -> Self {
        match o {
            ScaleRuleOpt::TruncationFree => ScaleRule::TruncationFree,
            ScaleRuleOpt::Microscaling => ScaleRule::Microscaling,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "kebab-case")]
pub enum RoundingOpt {
    Deterministic,
    Stochastic,
}

impl From<RoundingOpt> for Rounding {
    fn from(o: RoundingOpt) -> Self {
        match o {
            RoundingOpt::Deterministic => Rounding::Deterministic,
            RoundingOpt::Stochastic => Rounding::Stochastic,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "kebab-case")]
pub enum FormatOpt {
    E2m1,
    E3m0,
}

impl From<FormatOpt> for Fp4Format {
    fn from(o: FormatOpt) -> Self {
        match o {
            FormatOpt::E2m1 => Fp4Format::E2M1,
            FormatOpt::E3m0 => Fp4Format::E3M0,
        }
    }
}

/// Where gradient operands come from: re-quantized forward tapes (unbiased
/// with stochastic rounding) or re-quantized master tensors (the biased
/// comparison path).
#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "kebab-case")]
pub enum GradientPath {
    Tape,
    Masters,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    /// false runs the full-precision reference (every quantizer off).
    pub enabled: bool,
    /// "all", "none", or a comma list like "q1,q4".
    pub mask: String,
    pub scale_rule: ScaleRuleOpt,
    pub forward_rounding: RoundingOpt,
    pub backward_rounding: RoundingOpt,
    pub forward_format: FormatOpt,
    pub backward_format: FormatOpt,
    pub gradient_path: GradientPath,
}

impl Default for QuantSection {
    fn default() -> Self {
        QuantSection {
            enabled: true,
            mask: "all".into(),
            scale_rule: ScaleRuleOpt::TruncationFree,
            forward_rounding: RoundingOpt::Deterministic,
            backward_rounding: RoundingOpt::Stochastic,
            forward_format: FormatOpt::E2m1,
            backward_format: FormatOpt::E2m1,
            gradient_path: GradientPath::Tape,
        }
    }
}

pub fn parse_mask(spec: &str) -> Result<QuantizerMask> {
    match spec.trim() {
        "all" => return Ok(QuantizerMask::ALL_ON),
        "none" => return Ok(QuantizerMask::ALL_OFF),
        _ => {}
    }
    let mut mask = QuantizerMask::ALL_OFF;
    for part in spec.split(',') {
        let slot = match part.trim() {
            "q1" => QuantizerSlot::Q1,
            "q2" => QuantizerSlot::Q2,
            "q3" => QuantizerSlot::Q3,
            "q4" => QuantizerSlot::Q4,
            "q5" => QuantizerSlot::Q5,
            "q6" => QuantizerSlot::Q6,
            other => {
                return Err(TrainError::Config(format!(
                    "quant.mask: unknown quantizer {other:?} (want all, none, or q1..q6)"
                )))
            }
        };
        *mask.slot_mut(slot) = true;
    }
    Ok(mask)
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    /// Cosine floor: the schedule decays to `lr * min_lr_fraction` instead
    /// of 0, keeping the tail of training active.
    pub min_lr_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Presence enables per-element update amplification.
    pub ramping: Option<RampingSection>,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: 3e-3,
            min_lr_fraction: 0.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ramping: None,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct RampingSection {
    pub k1: f64,
    pub k2: u32,
    pub n_max: u32,
    /// Detection window length in steps.
    pub t0: u64,
    /// Interval between detection window starts.
    pub t_update: u64,
}

impl Default for RampingSection {
    fn default() -> Self {
        RampingSection { k1: 16.0, k2: 5, n_max: 10, t0: 30, t_update: 1000 }
    }
}

impl RampingSection {
    pub fn to_core(self) -> RampingConfig {
        RampingConfig {
            ratio_bracket: self.k1,
            gain_per_bracket: self.k2,
            max_amplification: self.n_max,
            detect_window: self.t0,
            detect_every: self.t_update,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "kebab-case")]
pub enum WeightQuantizerMode {
    Plain,
    Ema,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct WeightQuantizerSection {
    pub mode: WeightQuantizerMode,
    pub beta: f64,
}

impl Default for WeightQuantizerSection {
    fn default() -> Self {
        WeightQuantizerSection { mode: WeightQuantizerMode::Plain, beta: 0.998 }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    None,
    Dampen,
    Freeze,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub mode: BaselineMode,
    /// Dampen: weight of the master-to-quantized distance penalty.
    pub lambda: f64,
    /// Freeze: flip-frequency threshold above which an element is pinned.
    pub threshold: f64,
    /// Freeze: EMA momentum of the flip tracker and the pin average.
    pub momentum: f64,
    /// Freeze: fraction of total steps before freezing may begin.
    pub warmup_fraction: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            mode: BaselineMode::None,
            lambda: 1e-4,
            threshold: 0.5,
            momentum: 0.9,
            warmup_fraction: 0.1,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    /// Oscillation/rate trackers reset every `window` steps and report at
    /// each window's last step.
    pub window: u64,
    /// Block whose output is probed on a fixed validation batch at each
    /// diagnostics report.
    pub probe_block: Option<usize>,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection { window: 100, probe_block: None }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// JSON-lines metric log path; omitted = kept in memory only.
    pub log: Option<String>,
    /// Final checkpoint path.
    pub checkpoint: Option<String>,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        let d = &self.data;
        if d.classes < 2 || d.tokens == 0 || d.token_dim == 0 || d.val_size == 0 {
            return fail("data: classes >= 2, tokens/token_dim/val_size >= 1 required".into());
        }
        if !(d.noise > 0.0 && d.noise.is_finite()) {
            return fail(format!("data.noise must be positive, got {}", d.noise));
        }
        let m = &self.model;
        if m.depth == 0 {
            return fail("model.depth must be at least 1".into());
        }
        if m.width < 32 {
            return fail(format!("model.width must be at least 32, got {}", m.width));
        }
        if m.heads == 0 || m.width % m.heads != 0 {
            return fail(format!(
                "model.heads must divide model.width ({} % {} != 0)",
                m.width, m.heads
            ));
        }
        if m.mlp_ratio == 0 {
            return fail("model.mlp_ratio must be at least 1".into());
        }
        if !m.allow_ragged {
            let hidden = m.width * m.mlp_ratio;
            if m.width % 32 != 0 || hidden % 32 != 0 {
                return fail(format!(
                    "model.width ({}) and width*mlp_ratio ({hidden}) must be multiples of 32; \
                     set model.allow_ragged = true to permit short tail blocks",
                    m.width
                ));
            }
        }
        parse_mask(&self.quant.mask)?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return fail(format!("optimizer.lr must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.min_lr_fraction) {
            return fail(format!(
                "optimizer.min_lr_fraction must be in [0, 1), got {}",
                o.min_lr_fraction
            ));
        }
        self.adamw_params().validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if let Some(r) = &o.ramping {
            r.to_core().validate().map_err(|e| TrainError::Config(format!("optimizer.ramping: {e}")))?;
        }
        let wq = &self.weight_quantizer;
        if wq.mode == WeightQuantizerMode::Ema && !(wq.beta > 0.0 && wq.beta < 1.0) {
            return fail(format!("weight_quantizer.beta must be in (0, 1), got {}", wq.beta));
        }
        let b = &self.baseline;
        match b.mode {
            BaselineMode::None => {}
            BaselineMode::Dampen => {
                if !(b.lambda >= 0.0 && b.lambda.is_finite()) {
                    return fail(format!("baseline.lambda must be >= 0, got {}", b.lambda));
                }
            }
            BaselineMode::Freeze => {
                if !(b.threshold > 0.0 && b.threshold.is_finite()) {
                    return fail(format!("baseline.threshold must be positive, got {}", b.threshold));
                }
                if !(b.momentum > 0.0 && b.momentum < 1.0) {
                    return fail(format!("baseline.momentum must be in (0, 1), got {}", b.momentum));
                }
                if !(0.0..=1.0).contains(&b.warmup_fraction) {
                    return fail(format!(
                        "baseline.warmup_fraction must be in [0, 1], got {}",
                        b.warmup_fraction
                    ));
                }
            }
        }
        // The stabilization methods are studied in isolation: at most one of
        // EMA weight quantization, update amplification, or a prior-work
        // baseline may be active.
        let mut active: Vec<&str> = Vec::new();
        if wq.mode == WeightQuantizerMode::Ema {
            active.push("weight_quantizer.mode = \"ema\"");
        }
        if o.ramping.is_some() {
            active.push("optimizer.ramping");
        }
        if b.mode != BaselineMode::None {
            active.push("baseline.mode");
        }
        if active.len() > 1 {
            return fail(format!(
                "conflicting method selections: {} (enable at most one)",
                active.join(" and ")
            ));
        }
        let g = &self.diagnostics;
        if g.window < 2 {
            return fail(format!("diagnostics.window must be at least 2, got {}", g.window));
        }
        if let Some(p) = g.probe_block {
            if p >= m.depth {
                return fail(format!(
                    "diagnostics.probe_block {p} out of range for depth {}",
                    m.depth
                ));
            }
        }
        Ok(())
    }

    pub fn adamw_params(&self) -> mxfp4::ramping::AdamWParams {
        mxfp4::ramping::AdamWParams {
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
            weight_decay: self.optimizer.weight_decay,
        }
    }

    /// The per-layer quantization policy this config describes.
    pub fn layer_quant_config(&self) -> Result<LayerQuantConfig> {
        let q = &self.quant;
        let mask = if q.enabled { parse_mask(&q.mask)? } else { QuantizerMask::ALL_OFF };
        Ok(LayerQuantConfig {
            mask,
            scale_rule: q.scale_rule.into(),
            forward_rounding: q.forward_rounding.into(),
            backward_rounding: q.backward_rounding.into(),
            forward_format: q.forward_format.into(),
            backward_format: q.backward_format.into(),
        })
    }
}
