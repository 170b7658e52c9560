//! The training loop: deterministic end to end, with windowed oscillation
//! diagnostics, optional EMA-guided weight quantization, per-element update
//! amplification, and the two prior-work baselines.
//!
//! Step anatomy (order matters for bit-exactness guarantees):
//! 1. amplification detection bookkeeping (windows open/close at step tops),
//! 2. batch, forward, loss, backward,
//! 3. dampen-penalty gradient addition (skipped entirely at lambda 0),
//! 4. diagnostics observe the pre-update masters and quantized views,
//! 5. diagnostics window close (report spans the window just finished),
//! 6. freeze check, then the optimizer step, then the EMA update.

use std::path::Path;

use mxfp4::diagnostics::{
    classify_oscillating, quant_confidence, ChangeRateAccumulator, FlipTracker, TrajectoryTracker,
};
use mxfp4::ema::EmaState;
use mxfp4::linear::LayerQuantConfig;
use mxfp4::ramping::{amplification, RampingConfig};
use mxfp4::Matrix;

use crate::baselines::{dampen_penalty, FreezeState};
use crate::config::{BaselineMode, TrainConfig, WeightQuantizerMode};
use crate::data::{Batch, TaskData};
use crate::error::{Result, TrainError};
use crate::metrics::{LayerDiag, MetricLog, MetricRecord};
use crate::model::{accuracy, softmax_ce, Model, ModelCache, ParamMeta};
use crate::optim::{cosine_lr_floored, Optimizer};

#[derive(Clone, Copy, Debug)]
pub struct DiagSummary {
    pub step: u64,
    pub wq_rate: f64,
    pub osc_fraction: f64,
    pub flip_mean: f64,
    pub conf_mean: f64,
}

pub struct RunResult {
    pub final_val_loss: f64,
    pub final_val_acc: f64,
    pub steps_run: u64,
    /// Summary of the last completed diagnostics window.
    pub last_diag: Option<DiagSummary>,
    pub records: Vec<MetricRecord>,
    pub model: Model,
}

struct Detection {
    cfg: RampingConfig,
    traj: Vec<TrajectoryTracker>,
    started: Option<u64>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub quant: LayerQuantConfig,
    pub model: Model,
    pub opt: Optimizer,
    pub emas: Option<Vec<EmaState>>,
    pub freeze: Option<FreezeState>,
    pub metas: Vec<ParamMeta>,
    /// Parameter index of each quantized layer's weight tensor, by qid.
    pub qid_param: Vec<usize>,
    /// Next step to run.
    pub step: u64,
    data: TaskData,
    val: Batch,
    traj: Vec<TrajectoryTracker>,
    flip: Vec<FlipTracker>,
    rate: Vec<ChangeRateAccumulator>,
    det: Option<Detection>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let quant = cfg.layer_quant_config()?;
        let data = TaskData::new(cfg.seed, &cfg.data);
        let val = data.val_set(cfg.seed);
        let model = Model::new(cfg.seed, &cfg.model, &cfg.data);
        let metas = model.param_metas();
        let opt = Optimizer::new(&metas, cfg.adamw_params(), cfg.optimizer.ramping.is_some());
        let qid_param: Vec<usize> =
            metas.iter().enumerate().filter_map(|(i, m)| m.qid.map(|_| i)).collect();
        let lens: Vec<usize> =
            (0..model.qlayer_count()).map(|q| model.qlayer(q).w.data().len()).collect();

        let emas = match cfg.weight_quantizer.mode {
            WeightQuantizerMode::Plain => None,
            WeightQuantizerMode::Ema => Some(
                (0..model.qlayer_count())
                    .map(|q| EmaState::new(&model.qlayer(q).w, cfg.weight_quantizer.beta))
                    .collect::<mxfp4::Result<Vec<_>>>()?,
            ),
        };
        let freeze = if cfg.baseline.mode == BaselineMode::Freeze {
            let warmup = (cfg.steps as f64 * cfg.baseline.warmup_fraction) as u64;
            Some(FreezeState::new(&lens, cfg.baseline.threshold, cfg.baseline.momentum, warmup)?)
        } else {
            None
        };
        let det = cfg.optimizer.ramping.map(|r| Detection {
            cfg: r.to_core(),
            traj: lens.iter().map(|&l| TrajectoryTracker::new(l)).collect(),
            started: None,
        });

        Ok(Trainer {
            cfg: cfg.clone(),
            quant,
            model,
            opt,
            emas,
            freeze,
            metas,
            qid_param,
            step: 0,
            data,
            val,
            traj: lens.iter().map(|&l| TrajectoryTracker::new(l)).collect(),
            flip: lens.iter().map(|&l| FlipTracker::new(l)).collect(),
            rate: lens.iter().map(|_| ChangeRateAccumulator::new()).collect(),
            det,
        })
    }

    fn guides(&self) -> Option<Vec<&Matrix>> {
        self.emas.as_ref().map(|es| es.iter().map(|e| e.values()).collect())
    }

    /// Runs one training step, pushing this step's records to `log`.
    pub fn step_once(&mut self, log: &mut MetricLog) -> Result<f64> {
        let t = self.step;

        // Amplification detection: close a due window, then maybe open one.
        if let Some(det) = &mut self.det {
            if det.started.is_some_and(|s| t == s + det.cfg.detect_window) {
                let mut hist = vec![0u64; det.cfg.max_amplification as usize];
                let (mut sum, mut above, mut count) = (0.0f64, 0u64, 0u64);
                for ((_, state), tr) in self.opt.ramping_states().into_iter().zip(&det.traj) {
                    let ns: Vec<u32> =
                        tr.ratios().iter().map(|&r| amplification(r, &det.cfg)).collect();
                    for &n in &ns {
                        hist[(n - 1) as usize] += 1;
                        sum += f64::from(n);
                        above += u64::from(n > 1);
                        count += 1;
                    }
                    state.set_amplification(&ns)?;
                }
                det.started = None;
                log.push(MetricRecord::Detect {
                    step: t,
                    mean_amplification: sum / count.max(1) as f64,
                    amplified_fraction: above as f64 / count.max(1) as f64,
                    histogram: hist,
                })?;
            }
            if t % det.cfg.detect_every == 0 {
                // Amplification runs plain while the window observes.
                for (_, state) in self.opt.ramping_states() {
                    state.set_uniform_amplification(1)?;
                }
                for tr in &mut det.traj {
                    tr.reset();
                }
                det.started = Some(t);
            }
        }

        let batch = self.data.train_batch(self.cfg.seed, t, self.cfg.batch_size);
        let guides = self.guides();
        let (logits, cache) =
            self.model.forward(&batch.x, &self.quant, self.cfg.seed, t, guides.as_deref())?;
        let (loss, dlogits) = softmax_ce(&logits, &batch.labels);
        if !loss.is_finite() {
            log.push(MetricRecord::Abort { step: t })?;
            log.finish()?;
            return Err(TrainError::Numeric(format!("non-finite loss {loss} at step {t}")));
        }
        let mut grads = self.model.backward(
            &cache,
            &dlogits,
            &self.quant,
            self.cfg.quant.gradient_path,
            self.cfg.seed,
            t,
        )?;

        // The quantized weight view each layer actually multiplied with.
        let wq: Vec<Matrix> =
            (0..self.model.qlayer_count()).map(|q| cache.qcache(q).weight_operand()).collect();

        let mut penalty = None;
        if self.cfg.baseline.mode == BaselineMode::Dampen {
            let lambda = self.cfg.baseline.lambda;
            let mut total = 0.0;
            if lambda > 0.0 {
                for (q, wq_q) in wq.iter().enumerate() {
                    let (p, g) = dampen_penalty(&self.model.qlayer(q).w, wq_q, lambda);
                    total += p;
                    for (dst, add) in grads[self.qid_param[q]].iter_mut().zip(&g) {
                        *dst += add;
                    }
                }
            }
            penalty = Some(total);
        }
        let lr = cosine_lr_floored(
            self.cfg.optimizer.lr,
            self.cfg.optimizer.min_lr_fraction,
            t,
            self.cfg.steps,
        );
        log.push(MetricRecord::Train { step: t, loss, lr, penalty })?;

        // Observations happen before the update, matching the forward tapes.
        for (q, wq_q) in wq.iter().enumerate() {
            let w = self.model.qlayer(q).w.data();
            self.traj[q].observe(w, wq_q.data())?;
            self.flip[q].observe(wq_q.data())?;
            self.rate[q].observe(wq_q)?;
        }
        if let Some(det) = &mut self.det {
            if det.started.is_some() {
                for (q, wq_q) in wq.iter().enumerate() {
                    det.traj[q].observe(self.model.qlayer(q).w.data(), wq_q.data())?;
                }
            }
        }
        if let Some(fs) = &mut self.freeze {
            for (q, wq_q) in wq.iter().enumerate() {
                fs.observe(q, wq_q.data())?;
            }
        }

        if (t + 1) % self.cfg.diagnostics.window == 0 {
            let record = self.window_summary(t, &cache)?;
            log.push(record)?;
            for tr in &mut self.traj {
                tr.reset();
            }
            self.flip = self.flip.iter().map(|f| FlipTracker::new(f.len())).collect();
            self.rate = self.rate.iter().map(|_| ChangeRateAccumulator::new()).collect();
        }

        if let Some(fs) = &mut self.freeze {
            let mut views = self.model.params_mut();
            for (q, &pi) in self.qid_param.iter().enumerate() {
                fs.maybe_freeze(t, q, &mut *views[pi]);
            }
        }

        let frozen: Vec<Option<Vec<bool>>> = match &self.freeze {
            Some(fs) => self.metas.iter().map(|m| m.qid.map(|q| fs.frozen[q].clone())).collect(),
            None => vec![None; self.metas.len()],
        };
        {
            let mut views = self.model.params_mut();
            self.opt.step(&mut views, &grads, lr, &frozen)?;
        }

        if let Some(es) = &mut self.emas {
            for (q, e) in es.iter_mut().enumerate() {
                e.update(&self.model.qlayer(q).w)?;
            }
        }

        self.step += 1;
        if self.step % self.cfg.eval_every == 0 && self.step != self.cfg.steps {
            let (val_loss, val_acc) = self.evaluate()?;
            log.push(MetricRecord::Eval { step: self.step, val_loss, val_acc })?;
        }
        Ok(loss)
    }

    /// Confidence sum and element count of one layer, from the scales its
    /// forward tape actually used. A dense (masked-off) operand has no
    /// rounding ambiguity and counts as confidence 1.
    fn layer_confidence(&self, q: usize, cache: &ModelCache) -> Result<(f64, u64)> {
        let tape = &cache.qcache(q).tape;
        let w = &self.model.qlayer(q).w;
        match tape.w_t.as_quantized() {
            None => Ok((w.data().len() as f64, w.data().len() as u64)),
            Some(qm) => {
                let fmt = qm.format();
                let (lo, hi) = (fmt.q_neg(), fmt.q_pos());
                let mut sum = 0.0;
                for r in 0..qm.rows() {
                    for c in 0..qm.cols() {
                        let s = qm.scale_at(r, c).value();
                        let latent = (w.get(c, r) / s).clamp(lo, hi);
                        sum += quant_confidence(latent, fmt)?;
                    }
                }
                Ok((sum, (qm.rows() * qm.cols()) as u64))
            }
        }
    }

    fn window_summary(&self, t: u64, cache: &ModelCache) -> Result<MetricRecord> {
        let nq = self.model.qlayer_count();
        let mut layers = Vec::new();
        let (mut rate_sum, mut osc, mut flip_sum, mut conf_sum) = (0.0f64, 0u64, 0.0f64, 0.0f64);
        let (mut elems, mut conf_elems) = (0u64, 0u64);
        for q in 0..nq {
            let len = self.traj[q].len() as u64;
            let layer_osc =
                self.traj[q].ratios().iter().filter(|&&r| classify_oscillating(r)).count() as u64;
            let layer_flip: f64 = self.flip[q].frequencies().iter().sum();
            let (layer_conf, layer_conf_n) = self.layer_confidence(q, cache)?;
            rate_sum += self.rate[q].rate();
            osc += layer_osc;
            flip_sum += layer_flip;
            conf_sum += layer_conf;
            elems += len;
            conf_elems += layer_conf_n;
            let keep = self.cfg.diagnostics.probe_block.is_none_or(|b| q / 6 == b);
            if keep {
                layers.push(LayerDiag {
                    name: self.model.qlayer_name(q),
                    rate: self.rate[q].rate(),
                    osc_fraction: layer_osc as f64 / len as f64,
                    flip_mean: layer_flip / len as f64,
                    conf_mean: layer_conf / layer_conf_n as f64,
                });
            }
        }
        Ok(MetricRecord::Diag {
            step: t,
            wq_rate: rate_sum / nq as f64,
            osc_fraction: osc as f64 / elems as f64,
            flip_mean: flip_sum / elems as f64,
            conf_mean: conf_sum / conf_elems as f64,
        layers,
        })
    }

    /// Loss and accuracy on the held-out set, under the current inference
    /// view (quantized weights, EMA guides if enabled).
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let guides = self.guides();
        let (logits, _) =
            self.model.forward(&self.val.x, &self.quant, self.cfg.seed, self.step, guides.as_deref())?;
        let (loss, _) = softmax_ce(&logits, &self.val.labels);
        Ok((loss, accuracy(&logits, &self.val.labels)))
    }
}

pub fn run(cfg: &TrainConfig) -> Result<RunResult> {
    let mut log = match &cfg.output.log {
        Some(p) => MetricLog::to_file(Path::new(p))?,
        None => MetricLog::in_memory(),
    };
    let mut trainer = Trainer::new(cfg)?;
    for _ in 0..cfg.steps {
        trainer.step_once(&mut log)?;
    }
    let (val_loss, val_acc) = trainer.evaluate()?;
    log.push(MetricRecord::Final { step: cfg.steps, val_loss, val_acc })?;
    log.finish()?;
    if let Some(path) = &cfg.output.checkpoint {
        crate::checkpoint::save(Path::new(path), &trainer)?;
    }
    let records = log.into_records();
    let last_diag = records.iter().rev().find_map(|r| match r {
        MetricRecord::Diag { step, wq_rate, osc_fraction, flip_mean, conf_mean, .. } => {
            Some(DiagSummary {
                step: *step,
                wq_rate: *wq_rate,
                osc_fraction: *osc_fraction,
                flip_mean: *flip_mean,
                conf_mean: *conf_mean,
            })
        }
        _ => None,
    });
    Ok(RunResult {
        final_val_loss: val_loss,
        final_val_acc: val_acc,
        steps_run: trainer.step,
        last_diag,
        records,
        model: trainer.model,
    })
}
