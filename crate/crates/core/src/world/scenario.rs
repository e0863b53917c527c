//! Seeded scenario layouts.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    route_coordinates, Behavior, LightBinding, LightPhase, Scenario, ScenarioAgent, ScenarioKind,
    TrafficLight, WorldError,
};
use crate::geometry::{check_collision, AgentKind, AgentState, OrientedBox, Route, Vec2};
use crate::rng::{child_rng, Rng};
use crate::tokens::TrafficStatus;

const PLACEMENT_ATTEMPTS: usize = 100;
const YELLOW_S: f64 = 3.0;
const ALL_RED_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    /// Clip length in seconds, in `[5, 120]`.
    pub duration_s: f64,
    /// Upper bound on agents including the ego, in `[2, 12]`.
    pub max_agents: usize,
    /// Nominal desired speed for cars, m/s, in `(0, 15]`.
    pub desired_speed: f64,
    pub lane_half_width: f64,
    pub green_min_s: f64,
    pub green_max_s: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            duration_s: 20.0,
            max_agents: 12,
            desired_speed: 8.0,
            lane_half_width: 1.75,
            green_min_s: 8.0,
            green_max_s: 14.0,
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::InvalidParams(m.to_string()));
        if !(5.0..=120.0).contains(&self.duration_s) {
            return bad("duration_s must be in [5, 120]");
        }
        if !(2..=12).contains(&self.max_agents) {
            return bad("max_agents must be in [2, 12]");
        }
        if !(self.desired_speed > 0.0 && self.desired_speed <= 15.0) {
            return bad("desired_speed must be in (0, 15]");
        }
        if !(1.0..=2.5).contains(&self.lane_half_width) {
            return bad("lane_half_width must be in [1, 2.5]");
        }
        if !(self.green_min_s > 0.0 && self.green_min_s <= self.green_max_s) {
            return bad("green_min_s must be positive and <= green_max_s");
        }
        Ok(())
    }
}

/// A lane polyline plus the arc-length window where agents may spawn on it.
struct Lane {
    points: Vec<Vec2>,
    slot: usize,
    spawn: (f64, f64),
    priority: u8,
    light: Option<(usize, Vec2)>,
}

struct Builder<'a> {
    rng: Rng,
    params: &'a ScenarioParams,
    agents: Vec<ScenarioAgent>,
    kind: ScenarioKind,
}

impl Builder<'_> {
    fn pick_kind(&mut self, pedestrian: bool) -> AgentKind {
        if pedestrian {
            return AgentKind::Pedestrian;
        }
        let r: f64 = self.rng.gen();
        if r < 0.72 {
            AgentKind::Car
        } else if r < 0.87 {
            AgentKind::Truck
        } else {
            AgentKind::Cyclist
        }
    }

    /// Places one agent on `lane` by rejection sampling. Boxes are inflated by a
    /// speed-dependent margin so the expert starts from a feasible headway.
    fn place(&mut self, lane: &Lane, ego: bool, pedestrian: bool) -> Result<(), WorldError> {
        let full = Route::new(lane.points.clone(), self.params.lane_half_width)
            .map_err(|e| WorldError::InvalidParams(e.to_string()))?;
        let kind = if ego { AgentKind::Car } else { self.pick_kind(pedestrian) };
        let behavior = if ego {
            Behavior::RuleCompliant
        } else {
            *Behavior::ALL.choose(&mut self.rng).expect("non-empty")
        };
        let desired = match kind {
            AgentKind::Pedestrian => 1.2,
            AgentKind::Cyclist => 4.5,
            AgentKind::Truck => self.params.desired_speed * 0.85,
            AgentKind::Car => self.params.desired_speed,
        } * if ego { 1.0 } else { self.rng.gen_range(0.9..1.1) };
        for _ in 0..PLACEMENT_ATTEMPTS {
            let s = self.rng.gen_range(lane.spawn.0..=lane.spawn.1);
            let speed = desired * self.rng.gen_range(0.5..1.0);
            let pos = full.point_at(s);
            let heading = full.heading_at(s);
            let state = AgentState::with_kind(kind, pos, heading, speed, 0.0)
                .map_err(|e| WorldError::InvalidParams(e.to_string()))?;
            let inflate = |st: &AgentState| {
                let b = st.footprint();
                OrientedBox { half_length: b.half_length + 1.0 + 0.6 * st.speed, half_width: b.half_width + 0.3, ..b }
            };
            let candidate = inflate(&state);
            if self.agents.iter().any(|a| check_collision(&candidate, &inflate(&a.initial))) {
                continue;
            }
            let route = cut_route(&full, s, self.params.lane_half_width)?;
            let light = lane.light.map(|(light, stop)| LightBinding {
                light,
                stop_s: route_coordinates(&route, stop).0,
            });
            self.agents.push(ScenarioAgent {
                id: self.agents.len() as u32,
                kind,
                route,
                lane_slot: lane.slot,
                initial: state,
                behavior,
                desired_speed: desired,
                priority: lane.priority,
                light,
            });
            return Ok(());
        }
        Err(WorldError::Placement { kind: self.kind, attempts: PLACEMENT_ATTEMPTS })
    }
}

/// Route that starts at arc length `s` of `full` and follows it to the end.
fn cut_route(full: &Route, s: f64, half_width: f64) -> Result<Route, WorldError> {
    let mut pts = vec![full.point_at(s)];
    let mut acc = 0.0;
    let cl = full.centerline();
    for i in 1..cl.len() {
        acc += cl[i].distance(cl[i - 1]);
        if acc > s + 0.5 {
            pts.push(cl[i]);
        }
    }
    if pts.len() < 2 {
        let t = full.tangent_at(s);
        pts.push(pts[0] + t * 10.0);
    }
    Route::new(pts, half_width).map_err(|e| WorldError::InvalidParams(e.to_string()))
}

fn straight(x0: f64, x1: f64, y: f64) -> Vec<Vec2> {
    vec![Vec2::new(x0, y), Vec2::new(x1, y)]
}

/// Two complementary signal heads sharing one cycle: east-west first, then north-south.
fn signal_pair(rng: &mut Rng, p: &ScenarioParams) -> (TrafficLight, TrafficLight) {
    let g_ew = rng.gen_range(p.green_min_s..=p.green_max_s);
    let g_ns = rng.gen_range(p.green_min_s..=p.green_max_s);
    let cycle = g_ew + g_ns + 2.0 * (YELLOW_S + ALL_RED_S);
    let offset = rng.gen_range(0.0..cycle);
    let (mut ew, mut ns) = (TrafficLight::default(), TrafficLight::default());
    let mut t0 = -offset;
    while t0 < p.duration_s {
        let ph = |start: f64, len: f64, status| LightPhase { start, end: start + len, status };
        let ew_red = t0 + g_ew + YELLOW_S;
        ew.phases.push(ph(t0, g_ew, TrafficStatus::Green));
        ew.phases.push(ph(t0 + g_ew, YELLOW_S, TrafficStatus::Yellow));
        ew.phases.push(ph(ew_red, t0 + cycle - ew_red, TrafficStatus::Red));
        let ns_green = ew_red + ALL_RED_S;
        ns.phases.push(ph(t0, ns_green - t0, TrafficStatus::Red));
        ns.phases.push(ph(ns_green, g_ns, TrafficStatus::Green));
        ns.phases.push(ph(ns_green + g_ns, YELLOW_S, TrafficStatus::Yellow));
        ns.phases.push(ph(ns_green + g_ns + YELLOW_S, ALL_RED_S, TrafficStatus::Red));
        t0 += cycle;
    }
    (ew, ns)
}

/// Deterministic scenario for `(kind, seed, params)`. The ego is agent 0.
pub fn generate_scenario(kind: ScenarioKind, seed: u64, params: &ScenarioParams) -> Result<Scenario, WorldError> {
    params.validate()?;
    let mut b = Builder {
        rng: child_rng(seed, &format!("scenario/{}", kind.name())),
        params,
        agents: Vec::new(),
        kind,
    };
    let budget = params.max_agents - 1;
    let mut lights = Vec::new();
    let variant;
    // (lane, count) in placement order after the ego.
    let mut plan: Vec<(Lane, usize, bool)> = Vec::new();
    let ego_x = b.rng.gen_range(-46.0..=-38.0);
    let ego_lane = Lane {
        points: straight(ego_x, 52.0, 0.0),
        slot: 0,
        spawn: (0.0, 0.0),
        priority: 1,
        light: None,
    };
    match kind {
        ScenarioKind::StraightFollow => {
            variant = b.rng.gen_range(0..2usize);
            let hi = 2 + variant;
            let leaders = b.rng.gen_range(variant..=hi);
            plan.push((
                Lane { points: straight(-60.0, 60.0, 0.0), slot: 0, spawn: (ego_x + 60.0 + 12.0, 105.0), priority: 0, light: None },
                leaders,
                false,
            ));
            plan.push((
                Lane { points: straight(-60.0, 60.0, 3.5), slot: 1, spawn: (10.0, 105.0), priority: 0, light: None },
                b.rng.gen_range(variant..=hi),
                false,
            ));
            plan.push((
                Lane { points: straight(60.0, -60.0, -3.5), slot: 2, spawn: (15.0, 105.0), priority: 0, light: None },
                b.rng.gen_range(variant..=hi),
                false,
            ));
            plan.push((
                Lane { points: straight(-60.0, 60.0, 7.0), slot: 3, spawn: (15.0, 100.0), priority: 0, light: None },
                b.rng.gen_range(0..=1),
                true,
            ));
            if plan.iter().all(|p| p.1 == 0) {
                plan[0].1 = 1;
            }
        }
        ScenarioKind::Merge => {
            let ramp = vec![Vec2::new(-56.0, -14.0), Vec2::new(-16.0, -3.5), Vec2::new(16.0, 3.5), Vec2::new(60.0, 3.5)];
            let n_ramp = b.rng.gen_range(1..=2usize);
            variant = usize::from(n_ramp >= 2);
            plan.push((
                Lane { points: ramp, slot: 1, spawn: (0.0, 40.0), priority: 0, light: None },
                n_ramp,
                false,
            ));
            plan.push((
                Lane { points: straight(-60.0, 60.0, 0.0), slot: 0, spawn: (ego_x + 60.0 + 12.0, 100.0), priority: 1, light: None },
                b.rng.gen_range(0..=2),
                false,
            ));
            plan.push((
                Lane { points: straight(-60.0, 60.0, 7.0), slot: 3, spawn: (15.0, 100.0), priority: 0, light: None },
                b.rng.gen_range(0..=1),
                true,
            ));
        }
        ScenarioKind::IntersectionGiveway => {
            variant = b.rng.gen_range(0..2usize);
            let signalled = variant == 0;
            let (ew_light, ns_light) = if signalled {
                let (ew, ns) = signal_pair(&mut b.rng, params);
                lights.push(ew);
                lights.push(ns);
                (Some(0), Some(1))
            } else {
                (None, None)
            };
            let (ew_prio, ns_prio) = if signalled { (0, 0) } else { (0, 1) };
            let eb_stop = ew_light.map(|l| (l, Vec2::new(-8.0, 0.0)));
            plan.push((
                Lane { points: straight(-60.0, 60.0, 0.0), slot: 0, spawn: (ego_x + 60.0 + 12.0, 48.0), priority: ew_prio, light: eb_stop },
                b.rng.gen_range(0..=1),
                false,
            ));
            plan.push((
                Lane { points: straight(60.0, -60.0, 3.5), slot: 1, spawn: (10.0, 46.0), priority: ew_prio, light: ew_light.map(|l| (l, Vec2::new(8.0, 3.5))) },
                b.rng.gen_range(0..=2),
                false,
            ));
            plan.push((
                Lane { points: straight(-60.0, 60.0, 1.75).into_iter().map(|p| Vec2::new(p.y, p.x)).collect(), slot: 2, spawn: (10.0, 44.0), priority: ns_prio, light: ns_light.map(|l| (l, Vec2::new(1.75, -8.0))) },
                b.rng.gen_range(1..=2),
                false,
            ));
            plan.push((
                Lane { points: vec![Vec2::new(-1.75, 60.0), Vec2::new(-1.75, -60.0)], slot: 3, spawn: (10.0, 42.0), priority: ns_prio, light: ns_light.map(|l| (l, Vec2::new(-1.75, 12.0))) },
                b.rng.gen_range(0..=2),
                false,
            ));
            plan.push((
                Lane { points: straight(-14.0, -60.0, -5.5), slot: 3, spawn: (0.0, 25.0), priority: 0, light: None },
                b.rng.gen_range(0..=1),
                true,
            ));
        }
    }
    let ego_lane = Lane { light: lights.first().map(|_| (0, Vec2::new(-8.0, 0.0))), ..ego_lane };
    b.place(&ego_lane, true, false)?;
    let mut remaining = budget;
    for (lane, count, ped) in &plan {
        for _ in 0..(*count).min(remaining) {
            b.place(lane, false, *ped)?;
            remaining -= 1;
        }
    }
    Ok(Scenario {
        kind,
        seed,
        descriptor_id: kind.id() * 2 + variant,
        duration_s: params.duration_s,
        ego_index: 0,
        agents: b.agents,
        lights,
    })
}
