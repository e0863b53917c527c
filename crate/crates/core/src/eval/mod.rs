//! Closed-loop evaluation.
//!
//! The ego is driven by a single-step planner at 2 Hz while every other agent
//! replays its log. Episodes end at the route end, on the first collision, or
//! at the timeout.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::geometry::{AgentState, Route, Vec2};
use crate::model::{build_encoder_input, AgentView, EncoderInput, Head, Model, ModelConfig, ModelError};
use crate::rng::child_rng;
use crate::rollout::{advance_state, scan_step_collisions, stop_line, tokens_for, StepModel, StepPath};
use crate::tokens::{StateTokens, TokenError, TokenizerConfig, TrafficStatus};
use crate::world::{in_region, route_coordinates, LoggedClip};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error("clip {0} is too short to evaluate")]
    ClipTooShort(u64),
    #[error("no episodes to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Token(#[from] TokenError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub step_dt: f64,
    pub timeout_s: f64,
    pub success_completion: f64,
    pub collision_factor: f64,
    pub red_light_factor: f64,
    pub off_lane_factor: f64,
    /// The start frame is shifted by up to this many steps, chosen by seed.
    pub start_jitter_steps: usize,
    pub ttc_dt: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            step_dt: 0.5,
            timeout_s: 60.0,
            success_completion: 0.95,
            collision_factor: 0.5,
            red_light_factor: 0.7,
            off_lane_factor: 0.8,
            start_jitter_steps: 4,
            ttc_dt: 0.05,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.into()));
        if !(self.step_dt > 0.0) || !(self.ttc_dt > 0.0) || !(self.timeout_s >= self.step_dt) {
            return bad("step_dt, ttc_dt and timeout_s must be positive with timeout_s >= step_dt");
        }
        if !(0.0..=1.0).contains(&self.success_completion) {
            return bad("success_completion must be in [0, 1]");
        }
        for f in [self.collision_factor, self.red_light_factor, self.off_lane_factor] {
            if !(0.0..=1.0).contains(&f) {
                return bad("penalty factors must be in [0, 1]");
            }
        }
        Ok(())
    }
}

/// `100 · completion · collision^c · red^r · off_lane^o`.
pub fn composed_score(completion: f64, collisions: usize, red_lights: usize, off_lane: usize, cfg: &EvalConfig) -> f64 {
    100.0
        * completion.clamp(0.0, 1.0)
        * cfg.collision_factor.powi(collisions as i32)
        * cfg.red_light_factor.powi(red_lights as i32)
        * cfg.off_lane_factor.powi(off_lane as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub route_completion: f64,
    pub collisions: usize,
    pub red_lights: usize,
    pub off_lane: usize,
    pub success: bool,
    pub score: f64,
    pub steps: usize,
    pub timed_out: bool,
    pub numerical_failure: bool,
}

/// What an ego policy sees each step.
pub struct EgoContext<'a> {
    /// Encoder input with the ego as its only row.
    pub input: &'a EncoderInput,
    /// Scenario time at the start of the step.
    pub time: f64,
    pub state: AgentState,
    pub route: &'a Route,
    pub step_dt: f64,
}

/// A single-step ego planner. Returns `K` waypoints in the ego frame.
pub trait EgoPolicy: Sync {
    fn model_config(&self) -> &ModelConfig;
    fn tokenizer(&self) -> &TokenizerConfig;
    fn plan(&self, ctx: &EgoContext) -> Result<Vec<Vec2>, ModelError>;
}

/// One planner from the pool, deterministic latent, argmax mode.
pub struct PlannerPolicy<'a> {
    pub model: &'a Model,
    pub planner: usize,
}

impl EgoPolicy for PlannerPolicy<'_> {
    fn model_config(&self) -> &ModelConfig {
        &self.model.cfg
    }

    fn tokenizer(&self) -> &TokenizerConfig {
        &self.model.tok
    }

    fn plan(&self, ctx: &EgoContext) -> Result<Vec<Vec2>, ModelError> {
        let out = StepModel::step(self.model, ctx.input, &[Head::Planner(self.planner)], &[None])?;
        Ok(out.rows.into_iter().next().map(|r| r.local).unwrap_or_default())
    }
}

fn gt_history(clip: &LoggedClip, i: usize, t: f64, h: usize, dt: f64, tok: &TokenizerConfig) -> Result<Vec<StateTokens>, TokenError> {
    (0..h)
        .rev()
        .map(|j| t - j as f64 * dt)
        .filter(|&tt| tt >= -1e-9)
        .map(|tt| tokens_for(clip, i, &clip.state_at(i, tt), tt, tok))
        .collect()
}

/// Runs one closed-loop episode on `clip`. The seed only picks the start frame.
pub fn run_episode<P: EgoPolicy + ?Sized>(
    policy: &P,
    clip: &LoggedClip,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<EpisodeResult, EvalError> {
    cfg.validate()?;
    let mcfg = policy.model_config();
    let tok = policy.tokenizer();
    let (h, k, dt) = (mcfg.history, mcfg.waypoints_per_step, cfg.step_dt);
    let scn = &clip.scenario;
    let ego = scn.ego_index;
    let route = &scn.agents[ego].route;
    let total = route.total_length();

    let lead = h.saturating_sub(1) as f64 * dt;
    let jitter = child_rng(seed, "eval/start").gen_range(0..=cfg.start_jitter_steps) as f64 * dt;
    let t0 = if lead + jitter + dt <= clip.duration() { lead + jitter } else { lead };
    if t0 + dt > clip.duration() {
        return Err(EvalError::ClipTooShort(scn.seed));
    }

    let mut state = clip.state_at(ego, t0);
    let mut history = gt_history(clip, ego, t0, h, dt, tok)?;
    let s0 = route_coordinates(route, state.position).0.clamp(0.0, total);
    let mut s_max = s0;
    let mut off = route_coordinates(route, state.position).1.abs() > route.lane_half_width;
    let mut res = EpisodeResult {
        route_completion: 0.0,
        collisions: 0,
        red_lights: 0,
        off_lane: 0,
        success: false,
        score: 0.0,
        steps: 0,
        timed_out: false,
        numerical_failure: false,
    };

    loop {
        let t = t0 + res.steps as f64 * dt;
        if t - t0 >= cfg.timeout_s - 1e-9 {
            res.timed_out = true;
            break;
        }
        // Logs that have ended leave the scene.
        let others: Vec<usize> = (0..scn.agents.len())
            .filter(|&i| i != ego && t <= clip.duration() && in_region(clip.state_at(i, t).position))
            .collect();
        let mut hists = vec![history.clone()];
        let mut states = vec![state];
        for &i in &others {
            hists.push(gt_history(clip, i, t, h, dt, tok)?);
            states.push(clip.state_at(i, t));
        }
        let indices: Vec<usize> = std::iter::once(ego).chain(others.iter().copied()).collect();
        let views: Vec<AgentView> = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| AgentView {
                state: states[r],
                history: &hists[r],
                route: &scn.agents[i].route,
                stop_s: stop_line(clip, i, hists[r].last().expect("history")),
            })
            .collect();
        let input = build_encoder_input(&views, &[0], scn.descriptor_id, dt, h, tok)?;
        let local = policy.plan(&EgoContext { input: &input, time: t, state, route, step_dt: dt })?;
        if local.len() != k || local.iter().any(|p| !p.is_finite()) {
            res.numerical_failure = true;
            break;
        }
        let pose = state.pose();
        let world: Vec<Vec2> = local.iter().map(|p| pose.to_world(*p)).collect();
        let end = advance_state(&state, &local, dt);

        let mut paths = vec![StepPath { start: state, points: world.clone() }];
        for (r, &i) in others.iter().enumerate() {
            let points = (1..=k).map(|j| clip.state_at(i, t + j as f64 * dt / k as f64).position).collect();
            paths.push(StepPath { start: states[r + 1], points });
        }
        let mut controlled = vec![false; paths.len()];
        controlled[0] = true;
        let hit = scan_step_collisions(&paths, &controlled, dt, cfg.ttc_dt)[0];

        let (sa, _) = route_coordinates(route, state.position);
        let (sb, _) = route_coordinates(route, end.position);
        if let Some(b) = scn.agents[ego].light {
            if sa < b.stop_s && sb >= b.stop_s && scn.lights[b.light].status_at(t) == TrafficStatus::Red {
                res.red_lights += 1;
            }
        }
        for p in &world {
            let now_off = route_coordinates(route, *p).1.abs() > route.lane_half_width;
            if now_off && !off {
                res.off_lane += 1;
            }
            off = now_off;
        }
        s_max = s_max.max(sb.clamp(0.0, total));
        state = end;
        history.push(tokens_for(clip, ego, &end, t + dt, tok)?);
        if history.len() > h {
            history.remove(0);
        }
        res.steps += 1;
        if hit {
            res.collisions += 1;
            break;
        }
        if sb >= total {
            break;
        }
    }
    let remaining = total - s0;
    res.route_completion = if remaining > 1e-9 { ((s_max - s0) / remaining).clamp(0.0, 1.0) } else { 1.0 };
    res.success = !res.numerical_failure && res.collisions == 0 && res.route_completion >= cfg.success_completion;
    res.score = if res.numerical_failure {
        0.0
    } else {
        composed_score(res.route_completion, res.collisions, res.red_lights, res.off_lane, cfg)
    };
    Ok(res)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub clip: usize,
    pub scenario_seed: u64,
    pub kind: String,
    pub seed: u64,
    #[serde(flatten)]
    pub result: EpisodeResult,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub score_mean: f64,
    pub score_std: f64,
    pub completion_mean: f64,
    pub collisions: usize,
    pub red_lights: usize,
    pub off_lane: usize,
    pub numerical_failures: usize,
}

impl SuiteSummary {
    /// Aggregates episode results; the standard deviation is the population one.
    pub fn from_results<'a>(results: impl IntoIterator<Item = &'a EpisodeResult>) -> Self {
        let results: Vec<&EpisodeResult> = results.into_iter().collect();
        let n = results.len();
        if n == 0 {
            return Self::default();
        }
        let nf = n as f64;
        let mean = results.iter().map(|r| r.score).sum::<f64>() / nf;
        let var = results.iter().map(|r| (r.score - mean).powi(2)).sum::<f64>() / nf;
        Self {
            episodes: n,
            success_rate: results.iter().filter(|r| r.success).count() as f64 / nf,
            score_mean: mean,
            score_std: var.sqrt(),
            completion_mean: results.iter().map(|r| r.route_completion).sum::<f64>() / nf,
            collisions: results.iter().map(|r| r.collisions).sum(),
            red_lights: results.iter().map(|r| r.red_lights).sum(),
            off_lane: results.iter().map(|r| r.off_lane).sum(),
            numerical_failures: results.iter().filter(|r| r.numerical_failure).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub rows: Vec<EpisodeRow>,
    pub summary: SuiteSummary,
}

/// Every (clip, seed) pair, evaluated on up to `workers` threads and
/// assembled in clip-major order.
pub fn run_suite<P: EgoPolicy + ?Sized>(
    policy: &P,
    clips: &[LoggedClip],
    seeds: &[u64],
    cfg: &EvalConfig,
    workers: usize,
) -> Result<SuiteResult, EvalError> {
    let jobs: Vec<(usize, u64)> = (0..clips.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    if jobs.is_empty() {
        return Err(EvalError::Empty);
    }
    let workers = workers.clamp(1, jobs.len());
    let n = jobs.len();
    let run = |j: usize| run_episode(policy, &clips[jobs[j].0], jobs[j].1, cfg);
    let mut results: Vec<Option<Result<EpisodeResult, EvalError>>> = (0..n).map(|_| None).collect();
    if workers == 1 {
        for (j, slot) in results.iter_mut().enumerate() {
            *slot = Some(run(j));
        }
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run = &run;
                    s.spawn(move || (w..n).step_by(workers).map(|j| (j, run(j))).collect::<Vec<_>>())
                })
                .collect();
            for hd in handles {
                for (j, r) in hd.join().expect("eval worker panicked") {
                    results[j] = Some(r);
                }
            }
        });
    }
    let mut rows = Vec::with_capacity(jobs.len());
    for ((c, s), r) in jobs.iter().zip(results) {
        let clip = &clips[*c];
        rows.push(EpisodeRow {
            clip: *c,
            scenario_seed: clip.scenario.seed,
            kind: clip.scenario.kind.name().to_string(),
            seed: *s,
            result: r.expect("every job ran")?,
        });
    }
    let summary = SuiteSummary::from_results(rows.iter().map(|r| &r.result));
    Ok(SuiteResult { rows, summary })
}

/// Toggles for one ablation row. Every combination names its own run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub name: String,
    /// Multi-step rollouts during SFT; off means single-step supervision.
    pub sft_rollout: bool,
    /// Run the RL stage at all.
    pub rl: bool,
    /// Distinct planners per behavior; off shares planner 0.
    pub multi_planner: bool,
    pub n_reactive: usize,
    pub reward_global: bool,
    pub reward_vehicle: bool,
    pub reward_diversity: bool,
    pub sft_ego: bool,
    pub sft_reactive: bool,
    pub sft_background: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            name: "full".into(),
            sft_rollout: true,
            rl: true,
            multi_planner: true,
            n_reactive: 8,
            reward_global: true,
            reward_vehicle: true,
            reward_diversity: true,
            sft_ego: true,
            sft_reactive: true,
            sft_background: true,
        }
    }
}

pub const REACTIVE_COUNTS: [usize; 5] = [0, 1, 2, 4, 8];

impl AblationSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_+".contains(c)) {
            return Err(EvalError::InvalidConfig(format!("ablation name {:?} must be [A-Za-z0-9_+-]+", self.name)));
        }
        if !REACTIVE_COUNTS.contains(&self.n_reactive) {
            return Err(EvalError::InvalidConfig(format!("n_reactive {} not in {REACTIVE_COUNTS:?}", self.n_reactive)));
        }
        Ok(())
    }
}

/// One evaluated (or failed) ablation row.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub outcome: Result<SuiteSummary, String>,
}

/// Delimited table of every row against `baseline` (by index).
pub fn ablation_table(rows: &[AblationRow], baseline: usize) -> String {
    let base = rows.get(baseline).and_then(|r| r.outcome.as_ref().ok());
    let mut out = String::from("name,status,episodes,score_mean,score_std,success_rate,delta_score,delta_success\n");
    for r in rows {
        match &r.outcome {
            Ok(s) => {
                let (ds, dr) = match base {
                    Some(b) => ((s.score_mean - b.score_mean).to_string(), (s.success_rate - b.success_rate).to_string()),
                    None => (String::new(), String::new()),
                };
                let _ = writeln!(
                    out,
                    "{},ok,{},{},{},{},{ds},{dr}",
                    r.name, s.episodes, s.score_mean, s.score_std, s.success_rate
                );
            }
            Err(e) => {
                let msg: String = e.chars().map(|c| if c == ',' || c == '\n' { ' ' } else { c }).collect();
                let _ = writeln!(out, "{},failed: {msg},,,,,,", r.name);
            }
        }
    }
    out
}

/// Horizontal bar chart of mean composed score per row with ±std whiskers.
pub fn svg_bar_chart(rows: &[AblationRow]) -> String {
    let (bar_h, gap, left, width) = (22.0, 8.0, 160.0, 400.0);
    let height = 40.0 + rows.len() as f64 * (bar_h + gap);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
        left + width + 80.0
    );
    let _ = writeln!(s, r#"<text x="{left}" y="16">composed score (0-100)</text>"#);
    for (i, r) in rows.iter().enumerate() {
        let y = 28.0 + i as f64 * (bar_h + gap);
        let name = r.name.replace('&', "&amp;").replace('<', "&lt;");
        let _ = writeln!(s, r#"<text x="4" y="{}">{name}</text>"#, y + bar_h * 0.7);
        match &r.outcome {
            Ok(m) => {
                let w = width * m.score_mean.clamp(0.0, 100.0) / 100.0;
                let _ = writeln!(s, r##"<rect x="{left}" y="{y}" width="{w:.2}" height="{bar_h}" fill="#4878a8"/>"##);
                let lo = left + width * (m.score_mean - m.score_std).clamp(0.0, 100.0) / 100.0;
                let hi = left + width * (m.score_mean + m.score_std).clamp(0.0, 100.0) / 100.0;
                let cy = y + bar_h / 2.0;
                let _ = writeln!(s, r#"<line x1="{lo:.2}" y1="{cy}" x2="{hi:.2}" y2="{cy}" stroke="black"/>"#);
                let _ = writeln!(s, r#"<text x="{:.2}" y="{}">{:.1}</text>"#, left + w + 6.0, y + bar_h * 0.7, m.score_mean);
            }
            Err(_) => {
                let _ = writeln!(s, r##"<text x="{left}" y="{}" fill="#a83232">failed</text>"##, y + bar_h * 0.7);
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests;
