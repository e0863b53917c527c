//! Synthetic driving world: scenario layouts, a rule-based expert that produces
//! logged clips, frame extraction and the on-disk clip format.
//!
//! Every scenario is a small road patch centered on the origin. The ego always
//! drives east along `y = 0`; the kind decides what else shares the road.

mod dataset;
mod expert;
mod scenario;

pub use dataset::{
    generate_clips, read_clip, read_manifest, write_clip, write_dataset, ClipManifest, Dataset, ManifestEntry,
    CLIP_FORMAT_VERSION, MANIFEST_FILE,
};
pub use expert::{generate_clip, run_expert, ExpertConfig};
pub use scenario::{generate_scenario, ScenarioParams};

use serde::{Deserialize, Serialize};

use crate::geometry::{AgentKind, AgentState, Route, Trajectory, Vec2};
use crate::tokens::TrafficStatus;

/// Half-extent of the region in which agents appear in frames.
pub const REGION_HALF_EXTENT: f64 = 58.0;
/// Number of lane slots in the map-segment vocabulary.
pub const LANE_SLOTS: usize = 4;
/// Along-route bins per lane slot.
pub const ROUTE_BINS: usize = 8;
/// Number of distinct scenario descriptors (kind x variant).
pub const DESCRIPTOR_COUNT: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("could not place agents for {kind:?} after {attempts} attempts")]
    Placement { kind: ScenarioKind, attempts: usize },
    #[error("expert deadlock at t = {time:.1} s (seed {seed})")]
    Deadlock { time: f64, seed: u64 },
    #[error("expert collision between agents {a} and {b} at t = {time:.1} s (seed {seed})")]
    Collision { a: u32, b: u32, time: f64, seed: u64 },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("clip format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    StraightFollow,
    Merge,
    IntersectionGiveway,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [
        ScenarioKind::StraightFollow,
        ScenarioKind::Merge,
        ScenarioKind::IntersectionGiveway,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::StraightFollow => "straight_follow",
            ScenarioKind::Merge => "merge",
            ScenarioKind::IntersectionGiveway => "intersection_giveway",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| WorldError::InvalidParams(format!("unknown scenario kind {s:?}")))
    }
}

/// Driving style of a non-ego agent. It modulates the expert's gap-control
/// parameters and decides which reactive planner controls the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Aggressive,
    Cautious,
    RuleCompliant,
    HighComfort,
}

impl Behavior {
    pub const ALL: [Behavior; 4] = [
        Behavior::Aggressive,
        Behavior::Cautious,
        Behavior::RuleCompliant,
        Behavior::HighComfort,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }
}

/// One phase of a traffic light: `status` holds on `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightPhase {
    pub start: f64,
    pub end: f64,
    pub status: TrafficStatus,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrafficLight {
    pub phases: Vec<LightPhase>,
}

impl TrafficLight {
    /// Status at time `t`; outside every phase the light reads green.
    pub fn status_at(&self, t: f64) -> TrafficStatus {
        self.phases
            .iter()
            .find(|p| t >= p.start && t < p.end)
            .map_or(TrafficStatus::Green, |p| p.status)
    }
}

/// Ties an agent to a light whose stop line sits at arc length `stop_s` on its route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightBinding {
    pub light: usize,
    pub stop_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAgent {
    pub id: u32,
    pub kind: AgentKind,
    pub route: Route,
    pub lane_slot: usize,
    pub initial: AgentState,
    pub behavior: Behavior,
    pub desired_speed: f64,
    /// Right-of-way rank at unsignalled crossings; higher goes first.
    pub priority: u8,
    pub light: Option<LightBinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub descriptor_id: usize,
    pub duration_s: f64,
    /// Index of the ego in `agents`; always 0 for generated scenarios.
    pub ego_index: usize,
    pub agents: Vec<ScenarioAgent>,
    pub lights: Vec<TrafficLight>,
}

impl Scenario {
    pub fn ego(&self) -> &ScenarioAgent {
        &self.agents[self.ego_index]
    }

    /// Traffic status seen by agent `i` standing at arc length `s` at time `t`.
    /// An agent past its stop line, or without a light, sees `None`.
    pub fn traffic_status(&self, i: usize, s: f64, t: f64) -> TrafficStatus {
        match self.agents[i].light {
            Some(b) if s < b.stop_s => self.lights[b.light].status_at(t),
            _ => TrafficStatus::None,
        }
    }

    /// Map-segment id: lane slot times route bins plus the along-route bin.
    pub fn map_segment(&self, i: usize, s: f64) -> usize {
        let a = &self.agents[i];
        let frac = s / a.route.total_length();
        let bin = ((frac * ROUTE_BINS as f64).floor().max(0.0) as usize).min(ROUTE_BINS - 1);
        a.lane_slot * ROUTE_BINS + bin
    }

    /// Map-segment and traffic-status labels for agent `i` at `position`, time `t`.
    pub fn labels(&self, i: usize, position: Vec2, t: f64) -> (usize, usize) {
        let s = route_coordinates(&self.agents[i].route, position).0;
        (self.map_segment(i, s), self.traffic_status(i, s, t).id())
    }
}

/// Arc length and signed lateral offset of `p`, extending the first and last
/// segments linearly so points beyond either end keep a meaningful coordinate.
pub fn route_coordinates(route: &Route, p: Vec2) -> (f64, f64) {
    let proj = route.project(p);
    let n = route.centerline().len();
    if proj.segment == n - 2 && proj.s >= route.total_length() - 1e-9 {
        let d = p - route.end();
        return (route.total_length() + d.dot(proj.tangent), proj.tangent.cross(d));
    }
    if proj.segment == 0 && proj.s <= 1e-9 {
        let d = p - route.start();
        return (d.dot(proj.tangent), proj.tangent.cross(d));
    }
    (proj.s, proj.lateral)
}

/// Whether a position lies in the region that frames cover.
pub fn in_region(p: Vec2) -> bool {
    p.x.abs() <= REGION_HALF_EXTENT && p.y.abs() <= REGION_HALF_EXTENT
}

/// A scenario together with expert trajectories sampled at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedClip {
    pub scenario: Scenario,
    pub dt: f64,
    /// One trajectory per agent, all on the same time grid starting at 0.
    pub trajectories: Vec<Trajectory>,
    /// Longitudinal acceleration per agent per sample.
    pub accelerations: Vec<Vec<f64>>,
    pub map_labels: Vec<Vec<u16>>,
    pub traffic_labels: Vec<Vec<u8>>,
    /// Generation attempts consumed before a collision-free clip was found.
    pub attempts: u32,
}

/// Snapshot of one agent at a frame time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameAgent {
    /// Index into the scenario's agent list.
    pub index: usize,
    pub state: AgentState,
    pub ms: usize,
    pub ts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub time: f64,
    pub agents: Vec<FrameAgent>,
}

impl LoggedClip {
    pub fn num_samples(&self) -> usize {
        self.trajectories[0].len()
    }

    pub fn duration(&self) -> f64 {
        self.trajectories[0].end_time()
    }

    /// State of agent `i` at time `t`, linearly interpolated between samples.
    pub fn state_at(&self, i: usize, t: f64) -> AgentState {
        let w = self.trajectories[i].sample(t);
        let acc = &self.accelerations[i];
        let x = (t / self.dt).clamp(0.0, (acc.len() - 1) as f64);
        let k = (x.floor() as usize).min(acc.len() - 1);
        let f = x - k as f64;
        let a = if k + 1 < acc.len() { acc[k] * (1.0 - f) + acc[k + 1] * f } else { acc[k] };
        let init = &self.scenario.agents[i].initial;
        AgentState {
            position: w.position,
            heading: w.heading,
            speed: w.speed.max(0.0),
            acceleration: a,
            length: init.length,
            width: init.width,
            kind: init.kind,
        }
    }

    /// All in-region agents at time `t` (ego always included), ordered by index.
    pub fn frame_at(&self, t: f64) -> Frame {
        let agents = (0..self.scenario.agents.len())
            .filter_map(|i| {
                let state = self.state_at(i, t);
                if i != self.scenario.ego_index && !in_region(state.position) {
                    return None;
                }
                let (ms, ts) = self.scenario.labels(i, state.position, t);
                Some(FrameAgent { index: i, state, ms, ts })
            })
            .collect();
        Frame { time: t, agents }
    }
}

/// The `min(n_r, available)` non-ego agents nearest to the ego, nearest first.
/// Ties in distance resolve by lower agent index.
pub fn select_reactive_agents(frame: &Frame, ego_index: usize, n_r: usize) -> Vec<usize> {
    let Some(ego) = frame.agents.iter().find(|a| a.index == ego_index) else {
        return Vec::new();
    };
    let mut others: Vec<(f64, usize)> = frame
        .agents
        .iter()
        .filter(|a| a.index != ego_index)
        .map(|a| (a.state.position.distance(ego.state.position), a.index))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(n_r).map(|(_, i)| i).collect()
}
