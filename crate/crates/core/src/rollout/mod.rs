//! Multi-agent rollout in latent space.
//!
//! Each step encodes the current scene, lets the ego and reactive agents plan
//! with their assigned planners and background agents regress motion, turns the
//! local waypoints into world positions, checks for collisions inside the step
//! and feeds the decoded end states back as the next step's tokens.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{check_collision, time_to_collision, AgentState, OrientedBox, Vec2};
use crate::grad::{Graph, Tensor};
use crate::model::{
    argmax, build_encoder_input, AgentView, EncoderInput, Head, HeadOut, Model, ModelConfig, ModelError,
};
use crate::rng::{child_rng, Rng};
use crate::tokens::{encode_state, StateTokens, TokenError, TokenizerConfig, TrafficStatus};
use crate::world::{select_reactive_agents, Behavior, LoggedClip};

/// Stride rates (Hz) a rollout may run at.
pub const STRIDE_RATES: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 5.0, 10.0];

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("invalid rollout config: {0}")]
    InvalidConfig(String),
    #[error("clip has no ground truth at t = {0:.2} s")]
    MissingGroundTruth(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Token(#[from] TokenError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feeding {
    /// Decoded predictions are fed back (closed loop).
    Autoregressive,
    /// Ground-truth states are fed back.
    TeacherForced,
    /// Ground truth with probability `mixing_epsilon` per step, else predictions.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    #[serde(alias = "T")]
    pub horizon: usize,
    /// Rollout steps per second.
    pub stride_rate: f64,
    pub n_reactive: usize,
    pub group_size: usize,
    pub sample: bool,
    pub terminate_on_collision: bool,
    pub feeding: Feeding,
    pub mixing_epsilon: f64,
    /// Time resolution of the in-step collision scan.
    pub ttc_dt: f64,
    /// Look-ahead for the end-of-step time-to-collision.
    pub ttc_horizon: f64,
    /// Every agent, ego included, uses planner 0.
    pub shared_planner: bool,
    /// Ego planner drawn from the choice head at the start of each rollout.
    pub ego_choice: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            stride_rate: 2.0,
            n_reactive: 8,
            group_size: 8,
            sample: false,
            terminate_on_collision: false,
            feeding: Feeding::Autoregressive,
            mixing_epsilon: 0.25,
            ttc_dt: 0.05,
            ttc_horizon: 6.0,
            shared_planner: false,
            ego_choice: false,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        let bad = |m: String| Err(RolloutError::InvalidConfig(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !STRIDE_RATES.iter().any(|r| (r - self.stride_rate).abs() < 1e-12) {
            return bad(format!("stride_rate {} not in {STRIDE_RATES:?}", self.stride_rate));
        }
        if !(self.ttc_dt > 0.0 && self.ttc_horizon > 0.0) {
            return bad("ttc_dt and ttc_horizon must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mixing_epsilon) {
            return bad("mixing_epsilon must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn step_dt(&self) -> f64 {
        1.0 / self.stride_rate
    }

    /// Scenario time covered by a full rollout.
    pub fn span(&self) -> f64 {
        self.horizon as f64 * self.step_dt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Ego,
    Reactive,
    Background,
}

impl Role {
    pub fn is_controlled(self) -> bool {
        !matches!(self, Role::Background)
    }
}

/// One participant and the head that drives it for the whole rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutAgent {
    /// Index into the scenario's agent list.
    pub index: usize,
    pub role: Role,
    pub head: Head,
}

/// Reactive planner index (into the pool) for an agent of the given behavior.
pub fn reactive_planner(behavior: Behavior, cfg: &ModelConfig) -> usize {
    1 + behavior.id() % cfg.reactive_planners
}

/// Single-step output of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentStep {
    pub start: AgentState,
    /// State decoded from the final waypoint.
    pub end: AgentState,
    /// `K` waypoints in the start-of-step frame.
    pub local: Vec<Vec2>,
    pub world: Vec<Vec2>,
    /// Executed mode for planner-driven agents.
    pub mode: Option<usize>,
    pub noise: Option<Vec<f64>>,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub u: Vec<f64>,
    pub collided: bool,
    /// Time-to-collision at the end of the step against every other agent.
    pub ttc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Scenario time at the start of the step.
    pub time: f64,
    pub input: EncoderInput,
    /// Latent tokens `[agents, d_latent]`.
    pub latents: Tensor,
    /// Current tokens per agent, as fed to the encoder.
    pub tokens: Vec<StateTokens>,
    /// Whether this step's input states came from ground truth.
    pub ground_truth_input: bool,
    pub agents: Vec<AgentStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub seed: u64,
    /// Parameter snapshot of the policy that produced the record.
    pub snapshot: u64,
    pub t0: f64,
    pub step_dt: f64,
    pub horizon: usize,
    pub agents: Vec<RolloutAgent>,
    /// Ego planner drawn from the choice head, when enabled.
    pub ego_choice: Option<usize>,
    /// Encoder input used for the ego choice draw.
    pub choice_input: Option<EncoderInput>,
    pub steps: Vec<StepRecord>,
    /// Steps completed without a collision.
    pub l: usize,
    pub numerical_failure: bool,
}

impl RolloutRecord {
    pub fn any_collision(&self) -> bool {
        self.steps.iter().any(|s| s.agents.iter().any(|a| a.collided))
    }

    /// Collision events counted once per (agent, step).
    pub fn collision_events(&self, agent: usize) -> usize {
        self.steps.iter().filter(|s| s.agents[agent].collided).count()
    }

    pub fn heads(&self) -> Vec<Head> {
        self.agents.iter().map(|a| a.head).collect()
    }
}

/// Per-row output of a step forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPlan {
    pub local: Vec<Vec2>,
    pub mode: Option<usize>,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub latents: Tensor,
    pub rows: Vec<RowPlan>,
}

/// What the rollout engine needs from a policy.
pub trait StepModel: Sync {
    fn model_config(&self) -> &ModelConfig;
    fn tokenizer(&self) -> &TokenizerConfig;
    fn step(
        &self,
        input: &EncoderInput,
        heads: &[Head],
        noise: &[Option<Vec<f64>>],
    ) -> Result<StepOutput, ModelError>;
    /// Parameter snapshot the outputs come from.
    fn snapshot(&self) -> u64 {
        0
    }
    /// Planner-choice logits for encoded row 0.
    fn choice_logits(&self, input: &EncoderInput) -> Result<Vec<f64>, ModelError>;
}

fn to_points(row: &[f64]) -> Vec<Vec2> {
    row.chunks(2).map(|c| Vec2::new(c[0], c[1])).collect()
}

impl StepModel for Model {
    fn model_config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn tokenizer(&self) -> &TokenizerConfig {
        &self.tok
    }

    fn snapshot(&self) -> u64 {
        self.snapshot
    }

    fn step(
        &self,
        input: &EncoderInput,
        heads: &[Head],
        noise: &[Option<Vec<f64>>],
    ) -> Result<StepOutput, ModelError> {
        let mut g = Graph::new();
        let z = self.encode(&mut g, input)?;
        let batches = self.forward_heads(&mut g, z, heads, Some(noise))?;
        let mut rows = vec![None; heads.len()];
        let tw = self.cfg.traj_width();
        for b in &batches {
            for (j, &r) in b.rows.iter().enumerate() {
                let plan = match b.out {
                    HeadOut::Motion(m) => RowPlan {
                        local: to_points(g.value(m).row_slice(j)),
                        mode: None,
                        mu: Vec::new(),
                        logvar: Vec::new(),
                        u: Vec::new(),
                    },
                    HeadOut::Planner(p) => {
                        let mode = argmax(g.value(p.mode_logits).row_slice(j));
                        let wp = g.value(p.waypoints).row_slice(j);
                        RowPlan {
                            local: to_points(&wp[mode * tw..(mode + 1) * tw]),
                            mode: Some(mode),
                            mu: g.value(p.mu).row_slice(j).to_vec(),
                            logvar: g.value(p.logvar).row_slice(j).to_vec(),
                            u: g.value(p.u).row_slice(j).to_vec(),
                        }
                    }
                };
                rows[r] = Some(plan);
            }
        }
        Ok(StepOutput {
            latents: g.value(z).clone(),
            rows: rows.into_iter().map(|r| r.expect("every row has a head")).collect(),
        })
    }

    fn choice_logits(&self, input: &EncoderInput) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let z = self.encode(&mut g, input)?;
        let c = Model::choice_logits(self, &mut g, z)?;
        Ok(g.value(c).row_slice(0).to_vec())
    }
}

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Index drawn from `softmax(logits)`.
pub fn sample_categorical(rng: &mut Rng, logits: &[f64]) -> usize {
    let p = softmax(logits);
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if x < acc {
            return i;
        }
    }
    p.len() - 1
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Piecewise-linear motion of one agent through a step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPath {
    pub start: AgentState,
    /// `K` world waypoints at times `(k + 1) * dt / K`.
    pub points: Vec<Vec2>,
}

impl StepPath {
    /// Footprint at time `t` in `[0, dt]`. Heading follows the current segment
    /// and holds the previous value across stationary segments.
    pub fn footprint_at(&self, t: f64, dt: f64) -> OrientedBox {
        let k = self.points.len();
        let h = dt / k as f64;
        let x = (t / h).clamp(0.0, k as f64);
        let seg = (x.floor() as usize).min(k - 1);
        let f = x - seg as f64;
        let a = if seg == 0 { self.start.position } else { self.points[seg - 1] };
        let b = self.points[seg];
        let mut heading = self.start.heading;
        for i in 0..=seg {
            let p = if i == 0 { self.start.position } else { self.points[i - 1] };
            let d = self.points[i] - p;
            if d.norm() > 1e-6 {
                heading = d.angle();
            }
        }
        let mut st = self.start;
        st.position = a.lerp(b, f);
        st.heading = heading;
        st.footprint()
    }
}

/// Which agents collide during a step, scanned every `ttc_dt` and at each
/// waypoint time. Only pairs involving a controlled agent are examined; every
/// agent in such a pair is flagged.
pub fn scan_step_collisions(paths: &[StepPath], controlled: &[bool], dt: f64, ttc_dt: f64) -> Vec<bool> {
    let n = paths.len();
    let mut hit = vec![false; n];
    let mut times: Vec<f64> = (1..).map(|j| j as f64 * ttc_dt).take_while(|&t| t < dt - 1e-12).collect();
    if let Some(p) = paths.first() {
        let k = p.points.len();
        times.extend((1..=k).map(|j| j as f64 * dt / k as f64));
    }
    times.sort_by(f64::total_cmp);
    for &t in &times {
        let boxes: Vec<OrientedBox> = paths.iter().map(|p| p.footprint_at(t, dt)).collect();
        for a in 0..n {
            for b in a + 1..n {
                if !(controlled[a] || controlled[b]) || (hit[a] && hit[b]) {
                    continue;
                }
                if check_collision(&boxes[a], &boxes[b]) {
                    hit[a] = true;
                    hit[b] = true;
                }
            }
        }
    }
    hit
}

/// End-of-step state decoded from local waypoints.
pub fn advance_state(start: &AgentState, local: &[Vec2], dt: f64) -> AgentState {
    let pose = start.pose();
    let k = local.len();
    let end = pose.to_world(local[k - 1]);
    let prev = if k >= 2 { pose.to_world(local[k - 2]) } else { start.position };
    let seg = end - prev;
    let h = dt / k as f64;
    let mut st = *start;
    st.position = end;
    if seg.norm() > 1e-3 {
        st.heading = seg.angle();
    }
    st.speed = seg.norm() / h;
    st.acceleration = (st.speed - start.speed) / dt;
    st
}

struct Live {
    state: AgentState,
    history: Vec<StateTokens>,
}

pub(crate) fn stop_line(clip: &LoggedClip, index: usize, tokens: &StateTokens) -> Option<f64> {
    let ts = TrafficStatus::from_id(tokens.ts_id)?;
    match ts {
        TrafficStatus::Red | TrafficStatus::Yellow => clip.scenario.agents[index].light.map(|b| b.stop_s),
        _ => None,
    }
}

pub(crate) fn tokens_for(clip: &LoggedClip, index: usize, st: &AgentState, t: f64, tok: &TokenizerConfig) -> Result<StateTokens, TokenError> {
    let (ms, ts) = clip.scenario.labels(index, st.position, t);
    encode_state(st, ms, ts, tok)
}

/// Rolls the scene of `clip` forward from `t0`.
pub fn rollout<M: StepModel + ?Sized>(
    model: &M,
    clip: &LoggedClip,
    t0: f64,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<RolloutRecord, RolloutError> {
    cfg.validate()?;
    let mcfg = model.model_config();
    let tok = model.tokenizer();
    let dt = cfg.step_dt();
    let k = mcfg.waypoints_per_step;
    let scn = &clip.scenario;
    if t0 < 0.0 || t0 > clip.duration() + 1e-9 {
        return Err(RolloutError::MissingGroundTruth(t0));
    }
    let mut rng = child_rng(seed, "rollout");

    let frame = clip.frame_at(t0);
    let reactive = select_reactive_agents(&frame, scn.ego_index, cfg.n_reactive);
    let mut agents = vec![RolloutAgent { index: scn.ego_index, role: Role::Ego, head: Head::Planner(0) }];
    for &i in &reactive {
        let p = if cfg.shared_planner { 0 } else { reactive_planner(scn.agents[i].behavior, mcfg) };
        agents.push(RolloutAgent { index: i, role: Role::Reactive, head: Head::Planner(p) });
    }
    for fa in &frame.agents {
        if fa.index != scn.ego_index && !reactive.contains(&fa.index) {
            agents.push(RolloutAgent { index: fa.index, role: Role::Background, head: Head::Motion });
        }
    }

    let mut live = Vec::with_capacity(agents.len());
    for a in &agents {
        let mut history = Vec::with_capacity(mcfg.history);
        for j in (0..mcfg.history).rev() {
            let t = t0 - j as f64 * dt;
            if t < -1e-9 {
                continue;
            }
            let st = clip.state_at(a.index, t);
            history.push(tokens_for(clip, a.index, &st, t, tok)?);
        }
        live.push(Live { state: clip.state_at(a.index, t0), history });
    }

    let views = |live: &[Live]| -> Vec<(AgentState, Vec<StateTokens>, Option<f64>)> {
        live.iter()
            .zip(&agents)
            .map(|(l, a)| (l.state, l.history.clone(), stop_line(clip, a.index, l.history.last().expect("history"))))
            .collect()
    };
    let build = |live: &[Live]| -> Result<EncoderInput, ModelError> {
        let v = views(live);
        let av: Vec<AgentView> = v
            .iter()
            .zip(&agents)
            .map(|((st, h, stop), a)| AgentView { state: *st, history: h, route: &scn.agents[a.index].route, stop_s: *stop })
            .collect();
        let rows: Vec<usize> = (0..av.len()).collect();
        build_encoder_input(&av, &rows, scn.descriptor_id, dt, mcfg.history, tok)
    };

    let mut record = RolloutRecord {
        seed,
        snapshot: model.snapshot(),
        t0,
        step_dt: dt,
        horizon: cfg.horizon,
        agents: agents.clone(),
        ego_choice: None,
        choice_input: None,
        steps: Vec::with_capacity(cfg.horizon),
        l: 0,
        numerical_failure: false,
    };

    if cfg.ego_choice && !cfg.shared_planner {
        let input = build(&live)?;
        let logits = model.choice_logits(&input)?;
        if logits.iter().any(|v| !v.is_finite()) {
            record.numerical_failure = true;
            return Ok(record);
        }
        let c = sample_categorical(&mut rng, &logits);
        record.agents[0].head = Head::Planner(c);
        record.ego_choice = Some(c);
        record.choice_input = Some(input);
    }
    let heads = record.heads();
    let controlled: Vec<bool> = record.agents.iter().map(|a| a.role.is_controlled()).collect();

    let mut gt_input = false;
    for step in 0..cfg.horizon {
        let time = t0 + step as f64 * dt;
        let input = build(&live)?;
        let noise: Vec<Option<Vec<f64>>> = heads
            .iter()
            .map(|h| match h {
                Head::Planner(_) if cfg.sample => Some(standard_normal(&mut rng, mcfg.planner_latent)),
                _ => None,
            })
            .collect();
        let out = model.step(&input, &heads, &noise)?;
        let finite = out.latents.all_finite()
            && out.rows.iter().all(|r| r.local.len() == k && r.local.iter().all(|p| p.is_finite()));
        if !finite {
            record.numerical_failure = true;
            return Ok(record);
        }

        let paths: Vec<StepPath> = live
            .iter()
            .zip(&out.rows)
            .map(|(l, r)| {
                let pose = l.state.pose();
                StepPath { start: l.state, points: r.local.iter().map(|p| pose.to_world(*p)).collect() }
            })
            .collect();
        let hits = scan_step_collisions(&paths, &controlled, dt, cfg.ttc_dt);
        let ends: Vec<AgentState> = live.iter().zip(&out.rows).map(|(l, r)| advance_state(&l.state, &r.local, dt)).collect();

        let mut steps = Vec::with_capacity(live.len());
        for (i, ((l, r), noise)) in live.iter().zip(out.rows).zip(noise).enumerate() {
            let ttc = (0..ends.len())
                .filter(|&j| j != i)
                .map(|j| time_to_collision(&ends[i], &ends[j], cfg.ttc_horizon))
                .fold(f64::INFINITY, f64::min);
            steps.push(AgentStep {
                start: l.state,
                end: ends[i],
                world: paths[i].points.clone(),
                local: r.local,
                mode: r.mode,
                noise,
                mu: r.mu,
                logvar: r.logvar,
                u: r.u,
                collided: hits[i],
                ttc,
            });
        }
        record.steps.push(StepRecord {
            time,
            tokens: live.iter().map(|l| *l.history.last().expect("history")).collect(),
            input,
            latents: out.latents,
            ground_truth_input: gt_input,
            agents: steps,
        });

        let collided = hits.iter().zip(&controlled).any(|(h, c)| *h && *c);
        if collided && cfg.terminate_on_collision {
            record.l = step;
            return Ok(record);
        }
        record.l = step + 1;

        let t_next = time + dt;
        gt_input = match cfg.feeding {
            Feeding::Autoregressive => false,
            Feeding::TeacherForced => true,
            Feeding::Mixed => rng.gen::<f64>() < cfg.mixing_epsilon,
        };
        for (j, (l, a)) in live.iter_mut().zip(&record.agents).enumerate() {
            let next = if gt_input { clip.state_at(a.index, t_next) } else { ends[j] };
            let tokens = tokens_for(clip, a.index, &next, t_next, tok)?;
            l.state = next;
            l.history.push(tokens);
            if l.history.len() > mcfg.history {
                l.history.remove(0);
            }
        }
    }
    Ok(record)
}

/// Start time on the clip's sample grid with at least `lead` seconds of
/// log before it and `span` seconds after it, drawn uniformly.
pub fn sample_start_time(clip: &LoggedClip, lead: f64, span: f64, rng: &mut Rng) -> Option<f64> {
    let dt = clip.dt;
    let lo = (lead / dt - 1e-9).ceil().max(0.0) as i64;
    let hi = ((clip.duration() - span) / dt + 1e-9).floor() as i64;
    if hi < lo {
        return None;
    }
    Some(rng.gen_range(lo..=hi) as f64 * dt)
}

/// `Q` rollouts from the same start that differ only in their seeds
/// (`base_seed + q`), assembled in index order.
pub fn rollout_group<M: StepModel + ?Sized>(
    model: &M,
    clip: &LoggedClip,
    t0: f64,
    cfg: &RolloutConfig,
    base_seed: u64,
    workers: usize,
) -> Result<Vec<RolloutRecord>, RolloutError> {
    if cfg.group_size < 2 {
        return Err(RolloutError::InvalidConfig("group_size must be at least 2".into()));
    }
    let q = cfg.group_size;
    let workers = workers.clamp(1, q);
    if workers == 1 {
        return (0..q).map(|i| rollout(model, clip, t0, cfg, base_seed.wrapping_add(i as u64))).collect();
    }
    let mut slots: Vec<Option<Result<RolloutRecord, RolloutError>>> = (0..q).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..q)
                        .step_by(workers)
                        .map(|i| (i, rollout(model, clip, t0, cfg, base_seed.wrapping_add(i as u64))))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("rollout worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

#[cfg(test)]
mod tests;
