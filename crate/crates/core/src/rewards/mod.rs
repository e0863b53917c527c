//! Rollout rewards: a scene-level global term, per-vehicle progress and safety
//! terms, and a diversity bonus over behavior descriptors of the planners.

use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_angle, Route, Vec2};
use crate::model::Head;
use crate::rollout::{RolloutRecord, Role};
use crate::tokens::TrafficStatus;
use crate::world::{route_coordinates, LoggedClip};

pub const DESCRIPTOR_DIM: usize = 8;
/// Lane-change timing reported when no lane change happens.
pub const NO_LANE_CHANGE: f64 = 1.0;

pub type Descriptor = [f64; DESCRIPTOR_DIM];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RewardError {
    #[error("descriptor needs at least {needed} positions, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("record is empty")]
    EmptyRecord,
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub collision_penalty: f64,
    pub ttc_max: f64,
    pub global_weight: f64,
    pub rc_weight: f64,
    pub ttc_weight: f64,
    pub progress_weight: f64,
    /// Forward displacement per step below which progress is penalized.
    pub min_progress: f64,
    pub diversity_weight: f64,
    pub accel_range: f64,
    pub jerk_range: f64,
    pub ttc_range: f64,
    pub lane_error_range: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            collision_penalty: 1.0,
            ttc_max: 3.0,
            global_weight: 1.0,
            rc_weight: 1.0,
            ttc_weight: 1.0,
            progress_weight: 1.0,
            min_progress: 0.5,
            diversity_weight: 0.1,
            accel_range: 6.0,
            jerk_range: 10.0,
            ttc_range: 6.0,
            lane_error_range: 2.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.ttc_max > 0.0) {
            return Err(RewardError::InvalidConfig("ttc_max must be positive".into()));
        }
        let weights = [
            ("collision_penalty", self.collision_penalty),
            ("global_weight", self.global_weight),
            ("rc_weight", self.rc_weight),
            ("ttc_weight", self.ttc_weight),
            ("progress_weight", self.progress_weight),
            ("min_progress", self.min_progress),
            ("diversity_weight", self.diversity_weight),
        ];
        if let Some((k, _)) = weights.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(RewardError::InvalidConfig(format!("{k} must be a finite non-negative number")));
        }
        let ranges = [self.accel_range, self.jerk_range, self.ttc_range, self.lane_error_range];
        if ranges.iter().any(|r| !(*r > 0.0)) {
            return Err(RewardError::InvalidConfig("descriptor ranges must be positive".into()));
        }
        Ok(())
    }
}

/// `max(0, ttc_max - ttc)`.
pub fn ttc_penalty(ttc: f64, ttc_max: f64) -> f64 {
    (ttc_max - ttc).max(0.0)
}

/// `l / T` minus one penalty per (controlled agent, step) collision event.
pub fn global_reward(record: &RolloutRecord, cfg: &RewardConfig) -> f64 {
    let events: usize = record
        .agents
        .iter()
        .enumerate()
        .filter(|(_, a)| a.role.is_controlled())
        .map(|(i, _)| record.collision_events(i))
        .sum();
    record.l as f64 / record.horizon as f64 - cfg.collision_penalty * events as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VehicleStep {
    /// Incremental route completion (fraction of route length).
    pub rc: f64,
    pub ttc_penalty: f64,
    pub progress_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VehicleReward {
    pub steps: Vec<VehicleStep>,
    pub total: f64,
}

/// Route state of one vehicle across steps, as arc length and lateral offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepKinematics {
    pub s_start: f64,
    pub s_end: f64,
    pub lateral_end: f64,
    pub ttc: f64,
}

/// Sums `rc_weight·RC - ttc_weight·φ(TTC) - progress_weight·L_prog` over
/// steps. RC is the new arc length covered beyond the running maximum, so it
/// telescopes to the covered route fraction.
pub fn vehicle_reward(steps: &[StepKinematics], route: &Route, cfg: &RewardConfig) -> VehicleReward {
    let total_len = route.total_length();
    let mut out = VehicleReward::default();
    let Some(first) = steps.first() else { return out };
    let mut s_max = first.s_start.clamp(0.0, total_len);
    for k in steps {
        let s_end = k.s_end.clamp(0.0, total_len);
        let rc = (s_end.max(s_max) - s_max) / total_len;
        s_max = s_max.max(s_end);
        let progress_loss =
            (cfg.min_progress - (k.s_end - k.s_start)).max(0.0) + (k.lateral_end.abs() - route.lane_half_width).max(0.0);
        let st = VehicleStep { rc, ttc_penalty: ttc_penalty(k.ttc, cfg.ttc_max), progress_loss };
        out.total += cfg.rc_weight * st.rc - cfg.ttc_weight * st.ttc_penalty - cfg.progress_weight * st.progress_loss;
        out.steps.push(st);
    }
    out
}

/// Route kinematics of record agent `i` at every recorded step.
pub fn record_kinematics(record: &RolloutRecord, clip: &LoggedClip, i: usize) -> Vec<StepKinematics> {
    let route = &clip.scenario.agents[record.agents[i].index].route;
    record
        .steps
        .iter()
        .map(|s| {
            let a = &s.agents[i];
            let (s0, _) = route_coordinates(route, a.start.position);
            let (s1, lat) = route_coordinates(route, a.end.position);
            StepKinematics { s_start: s0, s_end: s1, lateral_end: lat, ttc: a.ttc }
        })
        .collect()
}

fn unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Normalized behavior summary of a trajectory sampled every `spacing`
/// seconds. `light_compliance` is the fraction of red-light steps spent
/// before the stop line (1 when the agent saw no red light).
pub fn behavior_descriptor(
    positions: &[Vec2],
    spacing: f64,
    route: &Route,
    min_ttc: f64,
    light_compliance: f64,
    cfg: &RewardConfig,
) -> Result<Descriptor, RewardError> {
    let n = positions.len();
    if n < 4 {
        return Err(RewardError::TooShort { needed: 4, got: n });
    }
    let speeds: Vec<f64> = positions.windows(2).map(|w| w[1].distance(w[0]) / spacing).collect();
    let accels: Vec<f64> = speeds.windows(2).map(|w| (w[1] - w[0]) / spacing).collect();
    let jerks: Vec<f64> = accels.windows(2).map(|w| (w[1] - w[0]) / spacing).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let lats: Vec<f64> = positions.iter().map(|p| route_coordinates(route, *p).1).collect();
    let hw = route.lane_half_width;
    let change = lats.iter().position(|l| l.abs() > hw).map_or(NO_LANE_CHANGE, |i| i as f64 / (n - 1) as f64);
    let in_lane = lats.iter().filter(|l| l.abs() <= hw).count() as f64 / n as f64;
    let aligned = positions
        .windows(2)
        .filter(|w| {
            let d = w[1] - w[0];
            if d.norm() < 1e-6 {
                return true;
            }
            let s = route_coordinates(route, w[0]).0.clamp(0.0, route.total_length());
            normalize_angle(d.angle() - route.heading_at(s)).abs() <= std::f64::consts::FRAC_PI_2
        })
        .count() as f64
        / (n - 1) as f64;
    Ok([
        unit((mean(&accels) + cfg.accel_range) / (2.0 * cfg.accel_range)),
        unit((mean(&jerks) + cfg.jerk_range) / (2.0 * cfg.jerk_range)),
        unit(min_ttc / cfg.ttc_range),
        unit(mean(&lats.iter().map(|l| l.abs()).collect::<Vec<_>>()) / cfg.lane_error_range),
        change,
        in_lane,
        aligned,
        unit(light_compliance),
    ])
}

/// Average pairwise ℓ1 distance over ordered pairs, normalized by `n(n-1)`.
/// Returns 0 and `true` (degenerate) for fewer than two descriptors.
pub fn diversity_reward(descriptors: &[Descriptor]) -> (f64, bool) {
    let n = descriptors.len();
    if n < 2 {
        return (0.0, true);
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += descriptors[i].iter().zip(&descriptors[j]).map(|(a, b)| (a - b).abs()).sum::<f64>();
            }
        }
    }
    (s / (n * (n - 1)) as f64, false)
}

/// Descriptor of record agent `i` over the recorded steps.
pub fn record_descriptor(
    record: &RolloutRecord,
    clip: &LoggedClip,
    i: usize,
    cfg: &RewardConfig,
) -> Result<Descriptor, RewardError> {
    let first = record.steps.first().ok_or(RewardError::EmptyRecord)?;
    let sa = &clip.scenario.agents[record.agents[i].index];
    let mut positions = vec![first.agents[i].start.position];
    let mut red = 0usize;
    let mut held = 0usize;
    let mut min_ttc = f64::INFINITY;
    for s in &record.steps {
        let a = &s.agents[i];
        positions.extend_from_slice(&a.world);
        min_ttc = min_ttc.min(a.ttc);
        let s0 = route_coordinates(&sa.route, a.start.position).0;
        if clip.scenario.traffic_status(record.agents[i].index, s0, s.time) == TrafficStatus::Red {
            red += 1;
            let s1 = route_coordinates(&sa.route, a.end.position).0;
            if sa.light.is_some_and(|b| s1 < b.stop_s) {
                held += 1;
            }
        }
    }
    let compliance = if red == 0 { 1.0 } else { held as f64 / red as f64 };
    let k = first.agents[i].world.len().max(1);
    behavior_descriptor(&positions, record.step_dt / k as f64, &sa.route, min_ttc, compliance, cfg)
}

/// One descriptor per planner in use: the mean over the agents it drives.
pub fn planner_descriptors(
    record: &RolloutRecord,
    clip: &LoggedClip,
    cfg: &RewardConfig,
) -> Result<Vec<(usize, Descriptor)>, RewardError> {
    let mut groups: Vec<(usize, Descriptor, usize)> = Vec::new();
    for (i, a) in record.agents.iter().enumerate() {
        let Head::Planner(p) = a.head else { continue };
        let d = record_descriptor(record, clip, i, cfg)?;
        match groups.iter_mut().find(|g| g.0 == p) {
            Some(g) => {
                for (acc, v) in g.1.iter_mut().zip(d) {
                    *acc += v;
                }
                g.2 += 1;
            }
            None => groups.push((p, d, 1)),
        }
    }
    groups.sort_by_key(|g| g.0);
    Ok(groups
        .into_iter()
        .map(|(p, mut d, c)| {
            d.iter_mut().for_each(|v| *v /= c as f64);
            (p, d)
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardBreakdown {
    pub global: f64,
    /// Unweighted diversity.
    pub diversity: f64,
    pub diversity_degenerate: bool,
    pub ego: VehicleReward,
    /// Per reactive agent, in record order.
    pub reactive: Vec<VehicleReward>,
    pub total: f64,
}

impl RewardBreakdown {
    /// Total recomputed from the parts.
    pub fn recompose(&self, cfg: &RewardConfig) -> f64 {
        cfg.global_weight * self.global
            + cfg.diversity_weight * self.diversity
            + self.ego.total
            + self.reactive.iter().map(|r| r.total).sum::<f64>()
    }

    pub fn mean_vehicle_reward(&self) -> f64 {
        let n = 1 + self.reactive.len();
        (self.ego.total + self.reactive.iter().map(|r| r.total).sum::<f64>()) / n as f64
    }
}

/// `R = w_G·G + w_D·D + r_ego + Σ r_reactive`.
pub fn total_reward(record: &RolloutRecord, clip: &LoggedClip, cfg: &RewardConfig) -> Result<RewardBreakdown, RewardError> {
    if record.steps.is_empty() {
        return Err(RewardError::EmptyRecord);
    }
    let mut b = RewardBreakdown { global: global_reward(record, cfg), ..Default::default() };
    for (i, a) in record.agents.iter().enumerate() {
        let route = &clip.scenario.agents[a.index].route;
        match a.role {
            Role::Ego => b.ego = vehicle_reward(&record_kinematics(record, clip, i), route, cfg),
            Role::Reactive => b.reactive.push(vehicle_reward(&record_kinematics(record, clip, i), route, cfg)),
            Role::Background => {}
        }
    }
    if cfg.diversity_weight != 0.0 {
        let desc: Vec<Descriptor> = planner_descriptors(record, clip, cfg)?.into_iter().map(|(_, d)| d).collect();
        (b.diversity, b.diversity_degenerate) = diversity_reward(&desc);
    } else {
        b.diversity_degenerate = true;
    }
    b.total = b.recompose(cfg);
    debug_assert!((b.total - b.recompose(cfg)).abs() < 1e-9);
    Ok(b)
}

#[cfg(test)]
mod tests;
