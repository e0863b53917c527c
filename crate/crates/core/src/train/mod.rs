//! Supervised stages: next-state pretraining and rollout SFT.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::grad::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig, GradError, Graph};
use crate::losses::{
    pretrain_loss, pretrain_sample, sft_loss, LossError, PlannerLossConfig, PretrainLossConfig, PretrainSample, SftTerms,
};
use crate::metrics::MetricsRow;
use crate::model::{argmax, Model, ModelError};
use crate::rng::child_rng;
use crate::rollout::{rollout, sample_start_time, RolloutConfig, RolloutError};
use crate::world::LoggedClip;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no clip has room for a training sample")]
    NoSamples,
    #[error("metrics sink: {0}")]
    Sink(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Frames per optimizer step; gradients are averaged over the batch.
    pub batch_frames: usize,
    /// Spacing of the history and of the prediction target.
    pub step_dt: f64,
    pub optimizer: AdamWConfig,
    pub loss: PretrainLossConfig,
    pub clip_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_frames: 4,
            step_dt: 0.5,
            optimizer: AdamWConfig { lr: 1e-3, warmup_steps: 20, ..AdamWConfig::default() },
            loss: PretrainLossConfig::default(),
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub epochs: usize,
    /// Rollout start frames per clip per epoch.
    pub starts_per_clip: usize,
    pub optimizer: AdamWConfig,
    pub loss: PlannerLossConfig,
    pub terms: SftTerms,
    pub clip_norm: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            starts_per_clip: 4,
            optimizer: AdamWConfig { lr: 5e-4, warmup_steps: 20, ..AdamWConfig::default() },
            loss: PlannerLossConfig::default(),
            terms: SftTerms::default(),
            clip_norm: 5.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        check_common(self.batch_frames > 0 && self.step_dt > 0.0, &self.optimizer, self.clip_norm)
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        check_common(self.starts_per_clip > 0, &self.optimizer, self.clip_norm)
    }
}

fn check_common(epochs_ok: bool, opt: &AdamWConfig, clip_norm: f64) -> Result<(), TrainError> {
    if !epochs_ok {
        return Err(TrainError::InvalidConfig("batch sizes must be positive".into()));
    }
    if !(opt.lr > 0.0) || !(clip_norm > 0.0) {
        return Err(TrainError::InvalidConfig("lr and clip_norm must be positive".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub dyn_l1: f64,
    pub ms_ce: f64,
    pub ts_ce: f64,
    pub motion: f64,
    pub grad_norm: f64,
}

impl MetricsRow for PretrainRow {
    fn header() -> &'static [&'static str] {
        &["epoch", "step", "loss", "dyn_l1", "ms_ce", "ts_ce", "motion", "grad_norm"]
    }

    fn fields(&self) -> Vec<String> {
        [self.epoch as f64, self.step as f64, self.loss, self.dyn_l1, self.ms_ce, self.ts_ce, self.motion, self.grad_norm]
            .iter()
            .map(|v| v.to_string())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftRow {
    pub epoch: usize,
    pub scenario: String,
    pub loss: f64,
    pub ego_mse: f64,
    pub reactive_mse: f64,
    pub motion: f64,
    pub grad_norm: f64,
}

impl MetricsRow for SftRow {
    fn header() -> &'static [&'static str] {
        &["epoch", "scenario", "loss", "ego_mse", "reactive_mse", "motion", "grad_norm"]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            self.scenario.clone(),
            self.loss.to_string(),
            self.ego_mse.to_string(),
            self.reactive_mse.to_string(),
            self.motion.to_string(),
            self.grad_norm.to_string(),
        ]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub skipped: usize,
}

/// Frame times on the `dt` grid that have a full history and a target.
pub fn pretrain_frames(clip: &LoggedClip, history: usize, dt: f64) -> Vec<f64> {
    let lead = history.saturating_sub(1) as f64 * dt;
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let t = lead + k as f64 * dt;
        if t + dt > clip.duration() + 1e-9 {
            break;
        }
        out.push(t);
        k += 1;
    }
    out
}

/// Zeroes the gradients, backpropagates `loss`, clips, and steps. Returns the
/// pre-clip gradient norm, or `None` if the step was rejected as non-finite.
fn apply(model: &mut Model, opt: &mut AdamW, g: &mut Graph, loss: crate::grad::Var, clip: f64, lr: f64) -> Result<Option<f64>, TrainError> {
    if !g.value(loss).item().is_finite() {
        return Ok(None);
    }
    model.store.zero_grads();
    g.backward(loss)?;
    g.accumulate_param_grads(&mut model.store);
    let norm = clip_grad_norm(&mut model.store, clip);
    if !norm.is_finite() {
        return Ok(None);
    }
    match opt.step(&mut model.store, lr) {
        Ok(()) => {}
        Err(GradError::NonFiniteGradient(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    model.snapshot += 1;
    Ok(Some(norm))
}

/// Next-state and background-motion pretraining over every frame of every
/// clip, in a seeded shuffled order.
pub fn pretrain(
    model: &mut Model,
    clips: &[LoggedClip],
    cfg: &PretrainConfig,
    seed: u64,
    sink: &mut dyn FnMut(&PretrainRow) -> std::io::Result<()>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let frames: Vec<(usize, f64)> = clips
        .iter()
        .enumerate()
        .flat_map(|(c, clip)| pretrain_frames(clip, model.cfg.history, cfg.step_dt).into_iter().map(move |t| (c, t)))
        .collect();
    if frames.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let per_epoch = frames.len().div_ceil(cfg.batch_frames);
    let total = per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.store);
    let mut out = TrainOutcome::default();
    for epoch in 0..cfg.epochs {
        let mut order = frames.clone();
        order.shuffle(&mut child_rng(seed, &format!("pretrain/{epoch}")));
        for batch in order.chunks(cfg.batch_frames) {
            let mut g = Graph::new();
            let mut parts = Vec::with_capacity(batch.len());
            let mut row = PretrainRow { epoch, step: out.steps + out.skipped, loss: 0.0, dyn_l1: 0.0, ms_ce: 0.0, ts_ce: 0.0, motion: 0.0, grad_norm: 0.0 };
            for &(c, t) in batch {
                let s = pretrain_sample(model, &clips[c], t, cfg.step_dt)?;
                let (l, sb, motion) = pretrain_loss(model, &mut g, &s, &cfg.loss)?;
                parts.push(l);
                let w = 1.0 / batch.len() as f64;
                row.dyn_l1 += w * sb.dyn_l1;
                row.ms_ce += w * sb.ms_ce;
                row.ts_ce += w * sb.ts_ce;
                row.motion += w * motion;
            }
            let mut loss = parts[0];
            for &p in &parts[1..] {
                loss = g.add(loss, p)?;
            }
            let loss = g.scale(loss, 1.0 / batch.len() as f64);
            row.loss = g.value(loss).item();
            let lr = cosine_lr(&cfg.optimizer, out.steps + out.skipped, total);
            match apply(model, &mut opt, &mut g, loss, cfg.clip_norm, lr)? {
                Some(norm) => {
                    out.steps += 1;
                    row.grad_norm = norm;
                    sink(&row).map_err(|e| TrainError::Sink(e.to_string()))?;
                }
                None => out.skipped += 1,
            }
        }
    }
    Ok(out)
}

/// Held-out next-state quality: mean dyn ℓ1 and map-segment / traffic-status
/// accuracy over every frame.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StateEval {
    pub frames: usize,
    pub dyn_l1: f64,
    pub ms_accuracy: f64,
    pub ts_accuracy: f64,
}

pub fn evaluate_state(model: &Model, clips: &[LoggedClip], step_dt: f64) -> Result<StateEval, TrainError> {
    let mut ev = StateEval::default();
    let (mut rows, mut ms_hit, mut ts_hit, mut l1) = (0usize, 0usize, 0usize, 0.0);
    for clip in clips {
        for t in pretrain_frames(clip, model.cfg.history, step_dt) {
            let PretrainSample { input, next, .. } = pretrain_sample(model, clip, t, step_dt)?;
            let mut g = Graph::new();
            let z = model.encode(&mut g, &input)?;
            let cur = g.constant(input.current.clone());
            let pred = model.predict_next_state(&mut g, z, cur)?;
            for (r, target) in next.iter().enumerate() {
                let d = g.value(pred.dyn_).row_slice(r);
                l1 += d.iter().zip(&target.dyn_).map(|(a, b)| (a - b).abs()).sum::<f64>() / d.len() as f64;
                ms_hit += usize::from(argmax(g.value(pred.ms_logits).row_slice(r)) == target.ms_id);
                ts_hit += usize::from(argmax(g.value(pred.ts_logits).row_slice(r)) == target.ts_id);
                rows += 1;
            }
            ev.frames += 1;
        }
    }
    if rows == 0 {
        return Err(TrainError::NoSamples);
    }
    ev.dyn_l1 = l1 / rows as f64;
    ev.ms_accuracy = ms_hit as f64 / rows as f64;
    ev.ts_accuracy = ts_hit as f64 / rows as f64;
    Ok(ev)
}

/// Rollout SFT: roll the scene out from sampled start frames with sampled
/// planner latents and supervise every step with ground truth.
pub fn sft_train(
    model: &mut Model,
    clips: &[LoggedClip],
    rollout_cfg: &RolloutConfig,
    cfg: &SftConfig,
    seed: u64,
    sink: &mut dyn FnMut(&SftRow) -> std::io::Result<()>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let rcfg = RolloutConfig { sample: true, ..rollout_cfg.clone() };
    rcfg.validate()?;
    let lead = model.cfg.history.saturating_sub(1) as f64 * rcfg.step_dt();
    if !clips.iter().any(|c| c.duration() >= lead + rcfg.span()) {
        return Err(TrainError::NoSamples);
    }
    let total = cfg.epochs * clips.len() * cfg.starts_per_clip;
    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.store);
    let mut out = TrainOutcome::default();
    for epoch in 0..cfg.epochs {
        let mut jobs: Vec<(usize, usize)> =
            (0..clips.len()).flat_map(|c| (0..cfg.starts_per_clip).map(move |f| (c, f))).collect();
        jobs.shuffle(&mut child_rng(seed, &format!("sft/{epoch}/order")));
        for (c, f) in jobs {
            let clip = &clips[c];
            let mut rng = child_rng(seed, &format!("sft/{epoch}/{c}/{f}"));
            let Some(t0) = sample_start_time(clip, lead, rcfg.span(), &mut rng) else { continue };
            let rec = rollout(&*model, clip, t0, &rcfg, rng.gen())?;
            if rec.numerical_failure {
                out.skipped += 1;
                continue;
            }
            let mut g = Graph::new();
            let (loss, bd) = sft_loss(model, &mut g, &rec, clip, &cfg.loss, &cfg.terms)?;
            let lr = cosine_lr(&cfg.optimizer, out.steps + out.skipped, total);
            match apply(model, &mut opt, &mut g, loss, cfg.clip_norm, lr)? {
                Some(norm) => {
                    out.steps += 1;
                    let row = SftRow {
                        epoch,
                        scenario: format!("{}@{t0:.1}", clip.scenario.seed),
                        loss: bd.total,
                        ego_mse: bd.ego.mse,
                        reactive_mse: bd.reactive.mse,
                        motion: bd.motion,
                        grad_norm: norm,
                    };
                    sink(&row).map_err(|e| TrainError::Sink(e.to_string()))?;
                }
                None => out.skipped += 1,
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
