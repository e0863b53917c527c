//! Group-relative policy optimization.
//!
//! Each scenario frame is rolled out `Q` times with sampled planner latents.
//! The group mean reward is the baseline, and the loss pushes up the log
//! density of latents from better-than-average rollouts.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::grad::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig, GradError, Graph, Tensor, Var};
use crate::model::{Head, HeadOut, Model, ModelError};
use crate::rewards::{total_reward, RewardBreakdown, RewardConfig, RewardError};
use crate::rng::child_rng;
use crate::rollout::{rollout_group, sample_start_time, RolloutConfig, RolloutError, RolloutRecord, Role};
use crate::world::LoggedClip;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const STD_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error("group needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("{advantages} advantages for {records} records")]
    LengthMismatch { advantages: usize, records: usize },
    #[error("record from parameter snapshot {record}, model is at {model}")]
    StaleRecord { record: u64, model: u64 },
    #[error("epoch {epoch}: skipped {skipped} of {steps} steps on non-finite values")]
    TooManySkipped { epoch: usize, skipped: usize, steps: usize },
    #[error("no clip has room for a rollout")]
    NoFrames,
    #[error("invalid rl config: {0}")]
    InvalidConfig(String),
    #[error("metrics sink: {0}")]
    Sink(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub epochs: usize,
    /// Start frames drawn per clip per epoch.
    pub frames_per_clip: usize,
    pub optimizer: AdamWConfig,
    pub clip_norm: f64,
    pub entropy_weight: f64,
    /// Divide advantages by the group reward standard deviation.
    pub normalize_advantages: bool,
    /// Fraction of skipped steps per epoch above which training aborts.
    pub max_skip_fraction: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            frames_per_clip: 1,
            optimizer: AdamWConfig { lr: 1e-4, warmup_steps: 10, ..AdamWConfig::default() },
            clip_norm: 1.0,
            entropy_weight: 0.0,
            normalize_advantages: true,
            max_skip_fraction: 0.01,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if self.frames_per_clip == 0 {
            return Err(RlError::InvalidConfig("frames_per_clip must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(RlError::InvalidConfig("clip_norm must be positive".into()));
        }
        if !(self.entropy_weight >= 0.0) || !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return Err(RlError::InvalidConfig("entropy_weight or max_skip_fraction out of range".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(RlError::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Group mean and `R - mean`, optionally divided by `std + 1e-8`.
pub fn compute_advantages(rewards: &[f64], normalize: bool) -> Result<(f64, Vec<f64>), RlError> {
    let q = rewards.len();
    if q < 2 {
        return Err(RlError::GroupTooSmall(q));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        // The mean of equal values can be off by an ulp; keep these exact.
        return Ok((rewards[0], vec![0.0; q]));
    }
    let baseline = rewards.iter().sum::<f64>() / q as f64;
    let mut adv: Vec<f64> = rewards.iter().map(|r| r - baseline).collect();
    if normalize {
        let std = (adv.iter().map(|a| a * a).sum::<f64>() / q as f64).sqrt();
        adv.iter_mut().for_each(|a| *a /= std + STD_EPS);
    }
    Ok((baseline, adv))
}

/// Sum of `log N(u; mu, exp(logvar))` over every element.
fn gaussian_log_density(g: &mut Graph, mu: Var, logvar: Var, u: Var) -> Result<Var, GradError> {
    let n = g.value(mu).len() as f64;
    let diff = g.sub(u, mu)?;
    let sq = g.mul(diff, diff)?;
    let nl = g.neg(logvar);
    let prec = g.exp(nl);
    let m = g.mul(sq, prec)?;
    let s = g.add(m, logvar)?;
    let s = g.sum(s);
    let s = g.scale(s, -0.5);
    Ok(g.add_scalar(s, -0.5 * n * LN_2PI))
}

fn gaussian_entropy(g: &mut Graph, logvar: Var) -> Var {
    let n = g.value(logvar).len() as f64;
    let s = g.sum(logvar);
    let s = g.scale(s, 0.5);
    g.add_scalar(s, 0.5 * n * (1.0 + LN_2PI))
}

/// `log softmax(logits)[choice]` for a one-row logit vector.
pub fn choice_log_prob(g: &mut Graph, logits: Var, choice: usize) -> Result<Var, GradError> {
    let ls = g.log_softmax(logits);
    let picked = g.gather(ls, &[choice])?;
    Ok(g.sum(picked))
}

/// Log-probability of a record's actions under the current parameters, and
/// the summed posterior entropy. Actions are the recorded planner latents of
/// every controlled agent, plus the ego planner draw when one was made.
pub fn record_log_prob(model: &Model, g: &mut Graph, record: &RolloutRecord) -> Result<(Var, Var), RlError> {
    let heads = record.heads();
    let mut logp = Vec::new();
    let mut ent = Vec::new();
    for step in &record.steps {
        let z = model.encode(g, &step.input)?;
        for b in model.forward_heads(g, z, &heads, None)? {
            let HeadOut::Planner(pv) = b.out else { continue };
            let width = model.cfg.planner_latent;
            let mut u = Vec::with_capacity(b.rows.len() * width);
            for &r in &b.rows {
                debug_assert!(record.agents[r].role != Role::Background);
                u.extend_from_slice(&step.agents[r].u);
            }
            let u = g.constant(Tensor::matrix(b.rows.len(), width, u)?);
            logp.push(gaussian_log_density(g, pv.mu, pv.logvar, u)?);
            ent.push(gaussian_entropy(g, pv.logvar));
        }
    }
    if let (Some(c), Some(input)) = (record.ego_choice, &record.choice_input) {
        let z = model.encode(g, input)?;
        let logits = model.choice_logits(g, z)?;
        let row = g.slice_rows(logits, 0, 1)?;
        logp.push(choice_log_prob(g, row, c)?);
    }
    Ok((sum_scalars(g, &logp)?, sum_scalars(g, &ent)?))
}

fn sum_scalars(g: &mut Graph, parts: &[Var]) -> Result<Var, GradError> {
    let mut acc = g.constant(Tensor::scalar(0.0));
    for &p in parts {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// `-(1/Q) Σ_q A_q log π(record_q) - entropy_weight · mean entropy`.
/// Records with zero advantage contribute nothing and are not re-encoded
/// unless the entropy bonus is on.
pub fn grpo_loss(
    model: &Model,
    g: &mut Graph,
    records: &[RolloutRecord],
    advantages: &[f64],
    entropy_weight: f64,
) -> Result<Var, RlError> {
    if records.len() != advantages.len() {
        return Err(RlError::LengthMismatch { advantages: advantages.len(), records: records.len() });
    }
    if let Some(r) = records.iter().find(|r| r.snapshot != model.snapshot) {
        return Err(RlError::StaleRecord { record: r.snapshot, model: model.snapshot });
    }
    let q = records.len() as f64;
    let mut parts = Vec::new();
    for (rec, &a) in records.iter().zip(advantages) {
        if a == 0.0 && entropy_weight == 0.0 {
            continue;
        }
        let (lp, ent) = record_log_prob(model, g, rec)?;
        parts.push(g.scale(lp, -a / q));
        if entropy_weight != 0.0 {
            parts.push(g.scale(ent, -entropy_weight / q));
        }
    }
    Ok(sum_scalars(g, &parts)?)
}

/// Per-planner running mean of the ego's vehicle reward while that planner
/// drove it, and the softmax over those means used to pick the ego planner
/// at evaluation. Only planners the ego actually used collect statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlannerRewards {
    pub sum: Vec<f64>,
    pub count: Vec<u64>,
}

impl PlannerRewards {
    pub fn new(pool: usize) -> Self {
        Self { sum: vec![0.0; pool], count: vec![0; pool] }
    }

    pub fn record(&mut self, record: &RolloutRecord, b: &RewardBreakdown) {
        let Some(ego) = record.agents.iter().find(|a| a.role == Role::Ego) else { return };
        if let Head::Planner(p) = ego.head {
            if p < self.sum.len() {
                self.sum[p] += b.ego.total;
                self.count[p] += 1;
            }
        }
    }

    pub fn mean(&self, p: usize) -> Option<f64> {
        (self.count[p] > 0).then(|| self.sum[p] / self.count[p] as f64)
    }

    /// Softmax over running means at `temperature`; unvisited planners get
    /// zero mass unless no planner was visited.
    pub fn selection_probs(&self, temperature: f64) -> Vec<f64> {
        let means: Vec<Option<f64>> = (0..self.sum.len()).map(|p| self.mean(p)).collect();
        let top = means.iter().flatten().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        if !top.is_finite() {
            return vec![1.0 / self.sum.len().max(1) as f64; self.sum.len()];
        }
        let w: Vec<f64> = means.iter().map(|m| m.map_or(0.0, |v| ((v - top) / temperature).exp())).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|v| v / z).collect()
    }

    /// Planner with the highest selection probability; ties go to the lowest index.
    pub fn best(&self) -> usize {
        let p = self.selection_probs(1.0);
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        best
    }
}

/// One optimizer step's metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RlRow {
    pub epoch: usize,
    pub scenario: String,
    pub global: f64,
    pub diversity: f64,
    pub mean_vehicle: f64,
    pub baseline: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub skipped: usize,
}

impl RlRow {
    pub const HEADER: [&'static str; 9] =
        ["epoch", "scenario", "global", "diversity", "mean_vehicle", "baseline", "loss", "grad_norm", "skipped"];

    pub fn fields(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            self.scenario.clone(),
            self.global.to_string(),
            self.diversity.to_string(),
            self.mean_vehicle.to_string(),
            self.baseline.to_string(),
            self.loss.to_string(),
            self.grad_norm.to_string(),
            self.skipped.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlOutcome {
    pub steps: usize,
    pub skipped: usize,
    pub planners: PlannerRewards,
}

enum StepResult {
    Applied(RlRow),
    Skipped,
}

/// GRPO fine-tuning over start frames drawn from `clips`. Rollouts always
/// sample planner latents; `rollout.group_size` is `Q`.
#[allow(clippy::too_many_arguments)]
pub fn rl_train(
    model: &mut Model,
    clips: &[LoggedClip],
    rollout: &RolloutConfig,
    rewards: &RewardConfig,
    cfg: &RlConfig,
    seed: u64,
    workers: usize,
    sink: &mut dyn FnMut(&RlRow) -> std::io::Result<()>,
) -> Result<RlOutcome, RlError> {
    cfg.validate()?;
    rewards.validate()?;
    let rcfg = RolloutConfig { sample: true, ..rollout.clone() };
    rcfg.validate()?;
    let lead = (model.cfg.history.saturating_sub(1)) as f64 * rcfg.step_dt();
    if !clips.iter().any(|c| c.duration() >= lead + rcfg.span()) {
        return Err(RlError::NoFrames);
    }
    let total = cfg.epochs * clips.len() * cfg.frames_per_clip;
    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.store);
    let mut out = RlOutcome { steps: 0, skipped: 0, planners: PlannerRewards::new(model.pool_size()) };
    for epoch in 0..cfg.epochs {
        let (mut applied, mut skipped) = (0usize, 0usize);
        for (ci, clip) in clips.iter().enumerate() {
            for f in 0..cfg.frames_per_clip {
                let mut rng = child_rng(seed, &format!("rl/{epoch}/{ci}/{f}"));
                let Some(t0) = sample_start_time(clip, lead, rcfg.span(), &mut rng) else { continue };
                let base = rng.gen::<u64>();
                let lr = cosine_lr(&cfg.optimizer, out.steps + out.skipped, total);
                match rl_step(model, &mut opt, clip, t0, &rcfg, rewards, cfg, base, workers, lr, &mut out.planners)? {
                    StepResult::Applied(mut row) => {
                        applied += 1;
                        out.steps += 1;
                        row.epoch = epoch;
                        row.scenario = format!("{}@{t0:.1}", clip.scenario.seed);
                        row.skipped = skipped;
                        sink(&row).map_err(|e| RlError::Sink(e.to_string()))?;
                    }
                    StepResult::Skipped => {
                        skipped += 1;
                        out.skipped += 1;
                    }
                }
            }
        }
        let steps = applied + skipped;
        if skipped as f64 > cfg.max_skip_fraction * steps as f64 {
            return Err(RlError::TooManySkipped { epoch, skipped, steps });
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn rl_step(
    model: &mut Model,
    opt: &mut AdamW,
    clip: &LoggedClip,
    t0: f64,
    rcfg: &RolloutConfig,
    rewards: &RewardConfig,
    cfg: &RlConfig,
    base_seed: u64,
    workers: usize,
    lr: f64,
    planners: &mut PlannerRewards,
) -> Result<StepResult, RlError> {
    let records = rollout_group(&*model, clip, t0, rcfg, base_seed, workers)?;
    if records.iter().any(|r| r.numerical_failure) {
        return Ok(StepResult::Skipped);
    }
    let breakdowns = records.iter().map(|r| total_reward(r, clip, rewards)).collect::<Result<Vec<_>, _>>()?;
    let totals: Vec<f64> = breakdowns.iter().map(|b| b.total).collect();
    if totals.iter().any(|v| !v.is_finite()) {
        return Ok(StepResult::Skipped);
    }
    let (baseline, adv) = compute_advantages(&totals, cfg.normalize_advantages)?;

    let mut g = Graph::new();
    let loss = grpo_loss(model, &mut g, &records, &adv, cfg.entropy_weight)?;
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Ok(StepResult::Skipped);
    }
    model.store.zero_grads();
    g.backward(loss)?;
    g.accumulate_param_grads(&mut model.store);
    let grad_norm = clip_grad_norm(&mut model.store, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Ok(StepResult::Skipped);
    }
    match opt.step(&mut model.store, lr) {
        Ok(()) => {}
        Err(GradError::NonFiniteGradient(_)) => return Ok(StepResult::Skipped),
        Err(e) => return Err(e.into()),
    }
    model.snapshot += 1;
    for (r, b) in records.iter().zip(&breakdowns) {
        planners.record(r, b);
    }
    let q = breakdowns.len() as f64;
    Ok(StepResult::Applied(RlRow {
        epoch: 0,
        scenario: String::new(),
        global: breakdowns.iter().map(|b| b.global).sum::<f64>() / q,
        diversity: breakdowns.iter().map(|b| b.diversity).sum::<f64>() / q,
        mean_vehicle: breakdowns.iter().map(|b| b.mean_vehicle_reward()).sum::<f64>() / q,
        baseline,
        loss: loss_value,
        grad_norm,
        skipped: 0,
    }))
}

/// One-step bandit over the planner-choice head: each iteration draws `q`
/// planners for a fixed input, pays `payoff[p]`, and takes a GRPO step.
/// Returns the choice probabilities before the first and after every iteration.
pub fn choice_bandit(
    model: &mut Model,
    input: &crate::model::EncoderInput,
    payoff: &[f64],
    q: usize,
    iterations: usize,
    optimizer: &AdamWConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>, RlError> {
    if payoff.len() != model.pool_size() {
        return Err(RlError::InvalidConfig(format!("{} payoffs for {} planners", payoff.len(), model.pool_size())));
    }
    let mut rng = child_rng(seed, "bandit");
    let mut opt = AdamW::new(optimizer.clone(), &model.store);
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut g = Graph::new();
        let z = model.encode(&mut g, input)?;
        let logits = model.choice_logits(&mut g, z)?;
        let row = g.slice_rows(logits, 0, 1)?;
        let probs = crate::rollout::softmax(g.value(row).data());
        let picks: Vec<usize> = (0..q).map(|_| crate::rollout::sample_categorical(&mut rng, g.value(row).data())).collect();
        let rewards: Vec<f64> = picks.iter().map(|&p| payoff[p]).collect();
        let (_, adv) = compute_advantages(&rewards, true)?;
        let mut parts = Vec::new();
        for (&p, &a) in picks.iter().zip(&adv) {
            let lp = choice_log_prob(&mut g, row, p)?;
            parts.push(g.scale(lp, -a / q as f64));
        }
        let loss = sum_scalars(&mut g, &parts)?;
        model.store.zero_grads();
        g.backward(loss)?;
        g.accumulate_param_grads(&mut model.store);
        clip_grad_norm(&mut model.store, 1.0);
        opt.step(&mut model.store, optimizer.lr)?;
        model.snapshot += 1;
        trace.push(probs);
    }
    let mut g = Graph::new();
    let z = model.encode(&mut g, input)?;
    let logits = model.choice_logits(&mut g, z)?;
    trace.push(crate::rollout::softmax(g.value(logits).row_slice(0)));
    Ok(trace)
}
