//! Supervised objectives: next-state prediction, planner and motion regression,
//! and the horizon-summed loss over a rollout record.
//!
//! Every loss is rebuilt on a fresh graph from recorded encoder inputs, so
//! gradients flow through one step's forward pass and never through the
//! fed-back states.

use serde::{Deserialize, Serialize};

use crate::geometry::{AgentState, Route, Vec2};
use crate::grad::{GradError, Graph, Tensor, Var};
use crate::model::{
    argmax, build_encoder_input, AgentView, EncoderInput, HeadOut, Model, ModelError, PlannerVars,
    StatePrediction,
};
use crate::rollout::{RolloutRecord, Role};
use crate::tokens::{encode_state, StateTokens, TokenError, TrafficStatus};
use crate::world::LoggedClip;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("no ground truth at t = {0:.2} s")]
    MissingGroundTruth(f64),
    #[error("target has {got} waypoints, expected {expected}")]
    WaypointCount { got: usize, expected: usize },
    #[error("record is empty")]
    EmptyRecord,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Token(#[from] TokenError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainLossConfig {
    pub lambda_dyn: f64,
    pub lambda_ms: f64,
    pub lambda_ts: f64,
    pub lambda_motion: f64,
}

impl Default for PretrainLossConfig {
    fn default() -> Self {
        Self { lambda_dyn: 1.0, lambda_ms: 1.0, lambda_ts: 1.0, lambda_motion: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerLossConfig {
    pub lambda_vae: f64,
    pub lambda_mse: f64,
    pub lambda_col: f64,
    pub lambda_bd: f64,
    /// Weight of the cross-entropy toward the winning mode.
    pub mode_ce_weight: f64,
    /// Clearance below which the collision hinge is active.
    pub collision_margin: f64,
    /// The boundary hinge starts this far inside the lane edge.
    pub boundary_inset: f64,
    /// Cap on how far a step's target is pulled back toward the log, meters.
    pub max_correction: f64,
}

impl Default for PlannerLossConfig {
    fn default() -> Self {
        Self {
            lambda_vae: 0.01,
            lambda_mse: 1.0,
            lambda_col: 0.5,
            lambda_bd: 0.5,
            mode_ce_weight: 0.1,
            collision_margin: 0.5,
            boundary_inset: 0.2,
            max_correction: 1.0,
        }
    }
}

/// Which agent groups contribute to the rollout loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftTerms {
    pub ego: bool,
    pub reactive: bool,
    pub background: bool,
}

impl Default for SftTerms {
    fn default() -> Self {
        Self { ego: true, reactive: true, background: true }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StateBreakdown {
    pub dyn_l1: f64,
    pub ms_ce: f64,
    pub ts_ce: f64,
    pub total: f64,
}

/// Unweighted planner terms and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlannerBreakdown {
    pub kl: f64,
    pub mse: f64,
    pub mode_ce: f64,
    pub col: f64,
    pub bd: f64,
    pub total: f64,
}

impl PlannerBreakdown {
    fn add(&mut self, o: &PlannerBreakdown) {
        self.kl += o.kl;
        self.mse += o.mse;
        self.mode_ce += o.mode_ce;
        self.col += o.col;
        self.bd += o.bd;
        self.total += o.total;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SftBreakdown {
    pub ego: PlannerBreakdown,
    pub reactive: PlannerBreakdown,
    pub motion: f64,
    pub total: f64,
    pub steps: usize,
}

fn sum_vars(g: &mut Graph, parts: &[Var]) -> Result<Option<Var>, GradError> {
    let mut acc: Option<Var> = None;
    for &p in parts {
        acc = Some(match acc {
            None => p,
            Some(a) => g.add(a, p)?,
        });
    }
    Ok(acc)
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// `λ_dyn·ℓ1(dyn) + λ_ms·CE(ms) + λ_ts·CE(ts)`, each averaged over rows.
pub fn state_loss(
    g: &mut Graph,
    pred: &StatePrediction,
    targets: &[StateTokens],
    cfg: &PretrainLossConfig,
) -> Result<(Var, StateBreakdown), LossError> {
    let n = targets.len();
    let dyn_t: Vec<f64> = targets.iter().flat_map(|t| t.dyn_).collect();
    let dt = g.constant(Tensor::matrix(n, 6, dyn_t)?);
    let l_dyn = g.l1_loss(pred.dyn_, dt)?;
    let ms: Vec<usize> = targets.iter().map(|t| t.ms_id).collect();
    let ts: Vec<usize> = targets.iter().map(|t| t.ts_id).collect();
    let l_ms = g.cross_entropy(pred.ms_logits, &ms)?;
    let l_ts = g.cross_entropy(pred.ts_logits, &ts)?;
    let a = g.scale(l_dyn, cfg.lambda_dyn);
    let b = g.scale(l_ms, cfg.lambda_ms);
    let c = g.scale(l_ts, cfg.lambda_ts);
    let total = sum_vars(g, &[a, b, c])?.expect("three terms");
    let bd = StateBreakdown {
        dyn_l1: g.value(l_dyn).item(),
        ms_ce: g.value(l_ms).item(),
        ts_ce: g.value(l_ts).item(),
        total: g.value(total).item(),
    };
    Ok((total, bd))
}

/// Another agent's footprint circle at one waypoint time, in the planning
/// agent's start-of-step frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub waypoint: usize,
    pub center: Vec2,
    pub radius: f64,
}

/// Lateral offset at one waypoint, linearized as `normal · p + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneLine {
    pub normal: Vec2,
    pub offset: f64,
    pub half_width: f64,
}

impl LaneLine {
    /// Linearizes `route` around the world point `at`, expressed in `frame`.
    pub fn around(route: &Route, at: Vec2, frame: &AgentState) -> Self {
        let proj = route.project(at);
        let n = proj.tangent.perp();
        Self {
            normal: n.rotate(-frame.heading),
            offset: n.dot(frame.position - proj.point),
            half_width: route.lane_half_width,
        }
    }
}

/// Scene context for the collision and boundary regularizers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlannerContext {
    /// Radius of the planning agent's own footprint circle.
    pub self_radius: f64,
    pub obstacles: Vec<Obstacle>,
    /// One line per waypoint, or empty to disable the boundary term.
    pub lanes: Vec<LaneLine>,
}

/// Footprint circle radius used by the collision hinge: half the width.
pub fn footprint_radius(st: &AgentState) -> f64 {
    0.5 * st.width
}

/// Collision hinge value computed directly, for reporting and checks.
pub fn collision_hinge(points: &[Vec2], ctx: &PlannerContext, margin: f64) -> f64 {
    ctx.obstacles
        .iter()
        .map(|o| (margin + ctx.self_radius + o.radius - points[o.waypoint].distance(o.center)).max(0.0))
        .sum()
}

fn coord(g: &mut Graph, traj: Var, k: usize) -> Result<(Var, Var), GradError> {
    Ok((g.slice_cols(traj, 2 * k, 2 * k + 1)?, g.slice_cols(traj, 2 * k + 1, 2 * k + 2)?))
}

fn flat(points: &[Vec2]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y]).collect()
}

/// Planner loss for row `row` of `out`. The MSE and mode cross-entropy use
/// the mode whose endpoint is nearest the target endpoint; the collision and
/// boundary hinges apply to the executed (argmax) mode.
pub fn planner_loss(
    g: &mut Graph,
    out: &PlannerVars,
    row: usize,
    target: &[Vec2],
    ctx: &PlannerContext,
    cfg: &PlannerLossConfig,
) -> Result<(Var, PlannerBreakdown), LossError> {
    let wp_all = g.slice_rows(out.waypoints, row, row + 1)?;
    let modes = g.value(out.mode_logits).cols();
    let tw = g.value(wp_all).cols() / modes;
    let k = tw / 2;
    if target.len() != k {
        return Err(LossError::WaypointCount { got: target.len(), expected: k });
    }
    let values = g.value(wp_all).data().to_vec();
    let end = target[k - 1];
    let winner = (0..modes)
        .map(|m| {
            let e = Vec2::new(values[m * tw + tw - 2], values[m * tw + tw - 1]);
            e.distance(end)
        })
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(m, _)| m)
        .expect("modes > 0");
    let logits = g.slice_rows(out.mode_logits, row, row + 1)?;
    let executed = argmax(g.value(logits).data());

    let mu = g.slice_rows(out.mu, row, row + 1)?;
    let lv = g.slice_rows(out.logvar, row, row + 1)?;
    let kl = g.kl_diag_gaussian(mu, lv)?;

    let win = g.slice_cols(wp_all, winner * tw, (winner + 1) * tw)?;
    let tgt = g.constant(Tensor::row(flat(target)));
    let sq = g.mse_loss(win, tgt)?;
    let mse = g.scale(sq, 1.0 / k as f64);
    let ce = g.cross_entropy(logits, &[winner])?;

    let exe = g.slice_cols(wp_all, executed * tw, (executed + 1) * tw)?;
    let mut col_parts = Vec::new();
    for o in &ctx.obstacles {
        let (x, y) = coord(g, exe, o.waypoint)?;
        let dx = g.add_scalar(x, -o.center.x);
        let dy = g.add_scalar(y, -o.center.y);
        let dx2 = g.mul(dx, dx)?;
        let dy2 = g.mul(dy, dy)?;
        let d2 = g.add(dx2, dy2)?;
        let d2 = g.add_scalar(d2, 1e-12);
        let d = g.sqrt(d2);
        let nd = g.neg(d);
        let slack = g.add_scalar(nd, cfg.collision_margin + ctx.self_radius + o.radius);
        col_parts.push(g.relu(slack));
    }
    let col = match sum_vars(g, &col_parts)? {
        Some(v) => g.sum(v),
        None => zero(g),
    };
    let mut bd_parts = Vec::new();
    for (kk, lane) in ctx.lanes.iter().enumerate().take(k) {
        let (x, y) = coord(g, exe, kk)?;
        let a = g.scale(x, lane.normal.x);
        let b = g.scale(y, lane.normal.y);
        let lat = g.add(a, b)?;
        let lat = g.add_scalar(lat, lane.offset);
        let thr = lane.half_width - cfg.boundary_inset;
        let over = g.add_scalar(lat, -thr);
        let neg = g.neg(lat);
        let under = g.add_scalar(neg, -thr);
        bd_parts.push(g.relu(over));
        bd_parts.push(g.relu(under));
    }
    let bd = match sum_vars(g, &bd_parts)? {
        Some(v) => g.sum(v),
        None => zero(g),
    };

    let terms = [
        g.scale(kl, cfg.lambda_vae),
        g.scale(mse, cfg.lambda_mse),
        g.scale(ce, cfg.lambda_mse * cfg.mode_ce_weight),
        g.scale(col, cfg.lambda_col),
        g.scale(bd, cfg.lambda_bd),
    ];
    let total = sum_vars(g, &terms)?.expect("five terms");
    let breakdown = PlannerBreakdown {
        kl: g.value(kl).item(),
        mse: g.value(mse).item(),
        mode_ce: g.value(ce).item(),
        col: g.value(col).item(),
        bd: g.value(bd).item(),
        total: g.value(total).item(),
    };
    Ok((total, breakdown))
}

/// Mean over waypoints of the ℓ1 distance between `pred` (`[1, 2K]`) and `target`.
pub fn motion_loss(g: &mut Graph, pred: Var, target: &[Vec2]) -> Result<Var, LossError> {
    let k = g.value(pred).cols() / 2;
    if target.len() != k {
        return Err(LossError::WaypointCount { got: target.len(), expected: k });
    }
    let t = g.constant(Tensor::row(flat(target)));
    let l = g.l1_loss(pred, t)?;
    Ok(g.scale(l, 1.0 / k as f64))
}

/// Ground-truth positions of scenario agent `index` over `[t, t + dt]` at
/// `k` evenly spaced times, in the frame of `frame`.
pub fn local_targets(
    clip: &LoggedClip,
    index: usize,
    t: f64,
    dt: f64,
    k: usize,
    frame: &AgentState,
) -> Result<Vec<Vec2>, LossError> {
    if t + dt > clip.duration() + 1e-9 {
        return Err(LossError::MissingGroundTruth(t + dt));
    }
    let pose = frame.pose();
    Ok((1..=k)
        .map(|j| pose.to_local(clip.state_at(index, t + dt * j as f64 / k as f64).position))
        .collect())
}

/// Supervision target for an agent whose rolled-out state `frame` may have
/// drifted from the log: the logged motion over `[t, t + dt]` in the logged
/// agent's own frame, plus a correction toward the logged positions whose
/// length is capped at `max_correction · j / k` for waypoint `j`. With `frame`
/// equal to the logged state this is exactly [`local_targets`].
pub fn recovery_targets(
    clip: &LoggedClip,
    index: usize,
    t: f64,
    dt: f64,
    k: usize,
    frame: &AgentState,
    max_correction: f64,
) -> Result<Vec<Vec2>, LossError> {
    let catch_up = local_targets(clip, index, t, dt, k, frame)?;
    let logged = clip.state_at(index, t);
    let motion = local_targets(clip, index, t, dt, k, &logged)?;
    Ok(catch_up
        .iter()
        .zip(&motion)
        .enumerate()
        .map(|(j, (c, m))| {
            let corr = *c - *m;
            let cap = max_correction * (j + 1) as f64 / k as f64;
            let n = corr.norm();
            if n > cap { *m + corr * (cap / n) } else { *c }
        })
        .collect())
}

/// Collision and boundary context of agent `i` at one recorded step.
pub fn step_context(record: &RolloutRecord, step: usize, i: usize, clip: &LoggedClip) -> PlannerContext {
    let s = &record.steps[step];
    let me = &s.agents[i];
    let pose = me.start.pose();
    let route = &clip.scenario.agents[record.agents[i].index].route;
    let mut obstacles = Vec::new();
    for (j, other) in s.agents.iter().enumerate() {
        if j == i {
            continue;
        }
        for (k, p) in other.world.iter().enumerate() {
            // Far obstacles cannot activate the hinge; skip them.
            if p.distance(me.world[k]) > 8.0 {
                continue;
            }
            obstacles.push(Obstacle { waypoint: k, center: pose.to_local(*p), radius: footprint_radius(&other.start) });
        }
    }
    PlannerContext {
        self_radius: footprint_radius(&me.start),
        obstacles,
        lanes: me.world.iter().map(|p| LaneLine::around(route, *p, &me.start)).collect(),
    }
}

fn planner_noise(record: &RolloutRecord, step: usize) -> Vec<Option<Vec<f64>>> {
    record.steps[step].agents.iter().map(|a| a.noise.clone()).collect()
}

/// Horizon-summed supervised loss over a rollout record. Step `Δ` (0-based)
/// is supervised by ground truth over `[t0 + Δ·dt, t0 + (Δ+1)·dt]`, i.e. the
/// 1-based step `Δ + 1` of the summation.
pub fn sft_loss(
    model: &Model,
    g: &mut Graph,
    record: &RolloutRecord,
    clip: &LoggedClip,
    cfg: &PlannerLossConfig,
    terms: &SftTerms,
) -> Result<(Var, SftBreakdown), LossError> {
    if record.steps.is_empty() {
        return Err(LossError::EmptyRecord);
    }
    let k = model.cfg.waypoints_per_step;
    let heads = record.heads();
    let mut parts = Vec::new();
    let mut bd = SftBreakdown { steps: record.steps.len(), ..Default::default() };
    for (si, step) in record.steps.iter().enumerate() {
        let z = model.encode(g, &step.input)?;
        let noise = planner_noise(record, si);
        let batches = model.forward_heads(g, z, &heads, Some(&noise))?;
        for b in &batches {
            for (pos, &row) in b.rows.iter().enumerate() {
                let a = &record.agents[row];
                let enabled = match a.role {
                    Role::Ego => terms.ego,
                    Role::Reactive => terms.reactive,
                    Role::Background => terms.background,
                };
                if !enabled {
                    continue;
                }
                let frame = &step.agents[row].start;
                let target = recovery_targets(clip, a.index, step.time, record.step_dt, k, frame, cfg.max_correction)?;
                match b.out {
                    HeadOut::Planner(ref pv) => {
                        let ctx = step_context(record, si, row, clip);
                        let (l, pb) = planner_loss(g, pv, pos, &target, &ctx, cfg)?;
                        parts.push(l);
                        if a.role == Role::Ego {
                            bd.ego.add(&pb);
                        } else {
                            bd.reactive.add(&pb);
                        }
                    }
                    HeadOut::Motion(m) => {
                        let pred = g.slice_rows(m, pos, pos + 1)?;
                        let l = motion_loss(g, pred, &target)?;
                        bd.motion += g.value(l).item();
                        parts.push(l);
                    }
                }
            }
        }
    }
    let total = match sum_vars(g, &parts)? {
        Some(v) => v,
        None => zero(g),
    };
    bd.total = g.value(total).item();
    Ok((total, bd))
}

/// One supervised frame for pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSample {
    pub input: EncoderInput,
    /// Ground-truth tokens one step later, per encoded row.
    pub next: Vec<StateTokens>,
    /// Ground-truth local waypoints over the next step, per encoded row.
    pub motion: Vec<Vec<Vec2>>,
}

/// Builds a pretraining sample from the frame at `t`, with histories sampled
/// every `dt` and targets one `dt` later.
pub fn pretrain_sample(model: &Model, clip: &LoggedClip, t: f64, dt: f64) -> Result<PretrainSample, LossError> {
    let frame = clip.frame_at(t);
    let scn = &clip.scenario;
    let tok = &model.tok;
    let h = model.cfg.history;
    let mut histories = Vec::with_capacity(frame.agents.len());
    for fa in &frame.agents {
        let mut hist = Vec::with_capacity(h);
        for j in (0..h).rev() {
            let tj = t - j as f64 * dt;
            if tj < -1e-9 {
                continue;
            }
            let st = clip.state_at(fa.index, tj);
            let (ms, ts) = scn.labels(fa.index, st.position, tj);
            hist.push(encode_state(&st, ms, ts, tok)?);
        }
        histories.push(hist);
    }
    let views: Vec<AgentView> = frame
        .agents
        .iter()
        .zip(&histories)
        .map(|(fa, hist)| {
            let stop_s = match TrafficStatus::from_id(fa.ts) {
                Some(TrafficStatus::Red | TrafficStatus::Yellow) => scn.agents[fa.index].light.map(|b| b.stop_s),
                _ => None,
            };
            AgentView { state: fa.state, history: hist, route: &scn.agents[fa.index].route, stop_s }
        })
        .collect();
    let rows: Vec<usize> = (0..views.len()).collect();
    let input = build_encoder_input(&views, &rows, scn.descriptor_id, dt, h, tok)?;
    let mut next = Vec::with_capacity(rows.len());
    let mut motion = Vec::with_capacity(rows.len());
    for fa in &frame.agents {
        let st = clip.state_at(fa.index, t + dt);
        let (ms, ts) = scn.labels(fa.index, st.position, t + dt);
        next.push(encode_state(&st, ms, ts, tok)?);
        motion.push(local_targets(clip, fa.index, t, dt, model.cfg.waypoints_per_step, &fa.state)?);
    }
    Ok(PretrainSample { input, next, motion })
}

/// State loss plus background-motion regression on every agent of a frame.
pub fn pretrain_loss(
    model: &Model,
    g: &mut Graph,
    sample: &PretrainSample,
    cfg: &PretrainLossConfig,
) -> Result<(Var, StateBreakdown, f64), LossError> {
    let z = model.encode(g, &sample.input)?;
    let cur = g.constant(sample.input.current.clone());
    let pred = model.predict_next_state(g, z, cur)?;
    let (ls, sb) = state_loss(g, &pred, &sample.next, cfg)?;
    let m = model.predict_motion(g, z)?;
    let flat_t: Vec<f64> = sample.motion.iter().flat_map(|p| flat(p)).collect();
    let t = g.constant(Tensor::matrix(sample.motion.len(), g.value(m).cols(), flat_t)?);
    let l1 = g.l1_loss(m, t)?;
    let lm = g.scale(l1, 1.0 / model.cfg.waypoints_per_step as f64);
    let lm_w = g.scale(lm, cfg.lambda_motion);
    let total = g.add(ls, lm_w)?;
    let motion = g.value(lm).item();
    Ok((total, sb, motion))
}

#[cfg(test)]
mod tests;
