//! Rule-based expert: intelligent-driver-model gap control along each agent's
//! route, pure-pursuit steering, stop lines and first-come right of way at
//! route crossings.

use serde::{Deserialize, Serialize};

use super::{route_coordinates, Behavior, LoggedClip, Scenario, ScenarioKind, ScenarioParams, WorldError};
use crate::geometry::{check_collision, normalize_angle, AgentState, Trajectory, Vec2, Waypoint};
use crate::rng::derive_seed;
use crate::tokens::TrafficStatus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    /// Integration and logging step, seconds, in `(0, 0.5]`.
    pub dt: f64,
    pub time_headway: f64,
    pub min_gap: f64,
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub max_decel: f64,
    pub lookahead: f64,
    pub max_speed: f64,
    pub deadlock_s: f64,
    /// Re-seeded attempts allowed before a clip is given up.
    pub max_attempts: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            time_headway: 1.5,
            min_gap: 2.0,
            max_accel: 1.5,
            comfort_decel: 2.0,
            max_decel: 5.5,
            lookahead: 5.0,
            max_speed: 19.0,
            deadlock_s: 10.0,
            max_attempts: 40,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Idm {
    v0: f64,
    headway: f64,
    s0: f64,
    a: f64,
    b: f64,
}

impl Idm {
    fn for_agent(behavior: Behavior, desired: f64, cfg: &ExpertConfig) -> Self {
        let (kv, kt, ks, ka, kb) = match behavior {
            Behavior::Aggressive => (1.2, 0.67, 0.75, 1.33, 1.25),
            Behavior::Cautious => (0.85, 1.33, 1.5, 0.67, 0.75),
            Behavior::RuleCompliant => (1.0, 1.0, 1.0, 1.0, 1.0),
            Behavior::HighComfort => (0.95, 1.2, 1.25, 0.53, 0.6),
        };
        Self {
            v0: desired * kv,
            headway: cfg.time_headway * kt,
            s0: cfg.min_gap * ks,
            a: cfg.max_accel * ka,
            b: cfg.comfort_decel * kb,
        }
    }

    fn free(&self, v: f64) -> f64 {
        if self.v0 < 0.1 {
            return if v > 0.0 { -self.b } else { 0.0 };
        }
        self.a * (1.0 - (v / self.v0).powi(4))
    }

    /// Interaction term for a leader `gap` meters ahead moving at `vl`.
    fn interaction(&self, v: f64, gap: f64, vl: f64) -> f64 {
        let s_star = self.s0 + 0.1 + (v * self.headway + v * (v - vl) / (2.0 * (self.a * self.b).sqrt())).max(0.0);
        let gap = gap.max(0.05);
        -self.a * (s_star / gap).powi(2)
    }
}

/// Crossing point of two agents' routes.
#[derive(Debug, Clone, Copy)]
struct Conflict {
    other: usize,
    s_self: f64,
    s_other: f64,
    zone_self: f64,
    zone_other: f64,
}

fn segment_intersection(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> Option<(f64, f64)> {
    let r = a1 - a0;
    let s = b1 - b0;
    let den = r.cross(s);
    if den.abs() < 1e-12 {
        return None;
    }
    let t = (b0 - a0).cross(s) / den;
    let u = (b0 - a0).cross(r) / den;
    ((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)).then_some((t, u))
}

fn conflicts_for(scn: &Scenario) -> Vec<Vec<Conflict>> {
    let n = scn.agents.len();
    let mut out = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (ai, aj) = (&scn.agents[i], &scn.agents[j]);
            let (ci, cj) = (ai.route.centerline(), aj.route.centerline());
            let mut si = 0.0;
            for p in 0..ci.len() - 1 {
                let mut sj = 0.0;
                for q in 0..cj.len() - 1 {
                    if let Some((t, u)) = segment_intersection(ci[p], ci[p + 1], cj[q], cj[q + 1]) {
                        let di = ci[p + 1] - ci[p];
                        let dj = cj[q + 1] - cj[q];
                        let cos = (di.dot(dj) / (di.norm() * dj.norm())).abs();
                        let sin = (1.0 - cos * cos).max(0.0).sqrt().max(0.2);
                        let (li, wi) = (ai.initial.length, ai.initial.width);
                        let (lj, wj) = (aj.initial.length, aj.initial.width);
                        let lateral = 0.5 * (wi + wj) / sin + 1.0;
                        let zi = 0.5 * li + 0.5 * lj * cos + lateral;
                        let zj = 0.5 * lj + 0.5 * li * cos + lateral;
                        let s_i = si + t * di.norm();
                        let s_j = sj + u * dj.norm();
                        out[i].push(Conflict { other: j, s_self: s_i, s_other: s_j, zone_self: zi, zone_other: zj });
                        out[j].push(Conflict { other: i, s_self: s_j, s_other: s_i, zone_self: zj, zone_other: zi });
                    }
                    sj += (cj[q + 1] - cj[q]).norm();
                }
                si += (ci[p + 1] - ci[p]).norm();
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Sim {
    pos: Vec2,
    heading: f64,
    speed: f64,
    accel: f64,
    s: f64,
    held_by_light: bool,
}

/// Rolls every agent forward with the expert for the scenario's duration.
/// Fails on any collision or a stall longer than `deadlock_s` that no light explains.
pub fn run_expert(scn: &Scenario, cfg: &ExpertConfig) -> Result<LoggedClip, WorldError> {
    if !(cfg.dt > 0.0 && cfg.dt <= 0.5) {
        return Err(WorldError::InvalidParams(format!("expert dt {} outside (0, 0.5]", cfg.dt)));
    }
    let n = scn.agents.len();
    let steps = (scn.duration_s / cfg.dt).round() as usize;
    let conflicts = conflicts_for(scn);
    let idm: Vec<Idm> = scn
        .agents
        .iter()
        .map(|a| Idm::for_agent(a.behavior, a.desired_speed, cfg))
        .collect();
    let mut sims: Vec<Sim> = scn
        .agents
        .iter()
        .map(|a| Sim {
            pos: a.initial.position,
            heading: a.initial.heading,
            speed: a.initial.speed,
            accel: 0.0,
            s: 0.0,
            held_by_light: false,
        })
        .collect();
    let mut committed = vec![vec![false; n]; n];
    let mut wps: Vec<Vec<Waypoint>> = vec![Vec::with_capacity(steps + 1); n];
    let mut stalled_for = 0.0;

    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        for (i, sim) in sims.iter_mut().enumerate() {
            sim.s = route_coordinates(&scn.agents[i].route, sim.pos).0;
        }
        let mut accel = vec![0.0; n];
        let mut held = vec![false; n];
        for i in 0..n {
            let a = &scn.agents[i];
            let me = sims[i];
            let p = idm[i];
            let mut acc = p.free(me.speed);
            // Leaders in the corridor ahead along this agent's route.
            for (j, &o) in sims.iter().enumerate() {
                if j == i {
                    continue;
                }
                let (sj, lat) = route_coordinates(&a.route, o.pos);
                let ds = sj - me.s;
                if !(0.0..60.0).contains(&ds) {
                    continue;
                }
                let dh = normalize_angle(o.heading - a.route.heading_at(sj));
                let (sin, cos) = (dh.sin().abs(), dh.cos());
                let oj = &scn.agents[j].initial;
                let half_lat = sin * 0.5 * oj.length + cos.abs() * 0.5 * oj.width;
                if lat.abs() - half_lat > 0.5 * a.initial.width + 0.3 {
                    continue;
                }
                let along = cos.abs() * 0.5 * oj.length + sin * 0.5 * oj.width;
                let gap = ds - 0.5 * a.initial.length - along;
                acc = acc.min(p.a + p.interaction(me.speed, gap, (o.speed * cos).max(0.0)));
            }
            // Stop line.
            if let Some(b) = a.light {
                let status = scn.lights[b.light].status_at(t);
                let gap = b.stop_s - me.s - 0.5 * a.initial.length;
                let must_stop = match status {
                    TrafficStatus::Red => gap > -0.5,
                    TrafficStatus::Yellow => gap > me.speed * me.speed / (2.0 * 3.0),
                    _ => false,
                };
                if must_stop {
                    held[i] = true;
                    acc = acc.min(p.a + p.interaction(me.speed, gap, 0.0));
                }
            }
            // Right of way at route crossings.
            for c in &conflicts[i] {
                let j = c.other;
                let oj = sims[j];
                let d_i = c.s_self - me.s;
                let d_j = c.s_other - oj.s;
                if d_i < -c.zone_self || d_j < -c.zone_other {
                    committed[i][j] = false;
                    continue;
                }
                let in_i = d_i.abs() <= c.zone_self || committed[i][j];
                let in_j = d_j.abs() <= c.zone_other || committed[j][i];
                let stop_before = |k: usize, s_conf: f64| {
                    scn.agents[k].light.is_some_and(|b| b.stop_s < s_conf) && sims[k].held_by_light
                };
                let yield_to_j = match (in_i, in_j) {
                    (false, true) => true,
                    (true, false) => false,
                    (true, true) => d_j - c.zone_other < d_i - c.zone_self,
                    (false, false) => {
                        if stop_before(j, c.s_other) {
                            false
                        } else if stop_before(i, c.s_self) {
                            true
                        } else {
                            let key = |d: f64, zone: f64, v: f64, prio: u8| (d - zone).max(0.0) / v.max(1.0) - 2.0 * prio as f64;
                            let ki = key(d_i, c.zone_self, me.speed, a.priority);
                            let kj = key(d_j, c.zone_other, oj.speed, scn.agents[j].priority);
                            kj < ki || (kj == ki && j < i)
                        }
                    }
                };
                if yield_to_j {
                    acc = acc.min(p.a + p.interaction(me.speed, d_i - c.zone_self, 0.0));
                } else if d_i - c.zone_self < me.speed * me.speed / 6.0 + 1.0 {
                    committed[i][j] = true;
                }
            }
            accel[i] = acc.clamp(-cfg.max_decel, p.a);
        }

        // Log the state at time t, then integrate to t + dt.
        for i in 0..n {
            let sim = &mut sims[i];
            sim.held_by_light = held[i];
            wps[i].push(Waypoint { time: t, position: sim.pos, heading: sim.heading, speed: sim.speed });
        }
        if k == steps {
            break;
        }
        for i in 0..n {
            let a = &scn.agents[i];
            let sim = &mut sims[i];
            let v_new = (sim.speed + accel[i] * cfg.dt).clamp(0.0, cfg.max_speed);
            let target = a.route.point_at(sim.s + cfg.lookahead);
            let local = crate::geometry::Pose::new(sim.pos, sim.heading).to_local(target);
            let alpha = local.y.atan2(local.x);
            let kappa = 2.0 * alpha.sin() / cfg.lookahead;
            let v_bar = 0.5 * (sim.speed + v_new);
            let mid = sim.heading + 0.5 * v_bar * kappa * cfg.dt;
            sim.pos = sim.pos + Vec2::from_angle(mid) * (v_bar * cfg.dt);
            sim.heading = normalize_angle(sim.heading + v_bar * kappa * cfg.dt);
            sim.accel = (v_new - sim.speed) / cfg.dt;
            sim.speed = v_new;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let bi = state_of(scn, i, &sims[i]).footprint();
                let bj = state_of(scn, j, &sims[j]).footprint();
                if check_collision(&bi, &bj) {
                    return Err(WorldError::Collision {
                        a: scn.agents[i].id,
                        b: scn.agents[j].id,
                        time: t + cfg.dt,
                        seed: scn.seed,
                    });
                }
            }
        }
        let moving = sims.iter().any(|s| s.speed > 0.1) || held.iter().any(|&h| h);
        stalled_for = if moving { 0.0 } else { stalled_for + cfg.dt };
        if stalled_for > cfg.deadlock_s {
            return Err(WorldError::Deadlock { time: t, seed: scn.seed });
        }
    }

    let mut trajectories = Vec::with_capacity(n);
    let mut map_labels = Vec::with_capacity(n);
    let mut traffic_labels = Vec::with_capacity(n);
    for (i, w) in wps.into_iter().enumerate() {
        let (ms, ts): (Vec<u16>, Vec<u8>) = w
            .iter()
            .map(|p| {
                let (ms, ts) = scn.labels(i, p.position, p.time);
                (ms as u16, ts as u8)
            })
            .unzip();
        map_labels.push(ms);
        traffic_labels.push(ts);
        trajectories.push(
            Trajectory::new(scn.agents[i].id, w).map_err(|e| WorldError::Format(e.to_string()))?,
        );
    }
    // Logged acceleration is the backward speed difference, zero at the first sample.
    let accs: Vec<Vec<f64>> = trajectories
        .iter()
        .map(|tr: &Trajectory| {
            let w = tr.waypoints();
            (0..w.len())
                .map(|k| if k == 0 { 0.0 } else { (w[k].speed - w[k - 1].speed) / cfg.dt })
                .collect()
        })
        .collect();
    Ok(LoggedClip {
        scenario: scn.clone(),
        dt: cfg.dt,
        trajectories,
        accelerations: accs,
        map_labels,
        traffic_labels,
        attempts: 1,
    })
}

fn state_of(scn: &Scenario, i: usize, sim: &Sim) -> AgentState {
    AgentState { position: sim.pos, heading: sim.heading, speed: sim.speed, acceleration: sim.accel, ..scn.agents[i].initial }
}

/// Generates a scenario and runs the expert, re-seeding after collisions or
/// stalls. Attempt 0 uses `seed` itself.
pub fn generate_clip(
    kind: ScenarioKind,
    seed: u64,
    params: &ScenarioParams,
    cfg: &ExpertConfig,
) -> Result<LoggedClip, WorldError> {
    let mut last_err = None;
    for attempt in 0..cfg.max_attempts.max(1) {
        let s = if attempt == 0 { seed } else { derive_seed(seed, &format!("reseed/{attempt}")) };
        let scn = super::generate_scenario(kind, s, params)?;
        match run_expert(&scn, cfg) {
            Ok(mut clip) => {
                clip.attempts = attempt as u32 + 1;
                return Ok(clip);
            }
            Err(e @ (WorldError::Collision { .. } | WorldError::Deadlock { .. })) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}
