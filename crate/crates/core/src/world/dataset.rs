//! Dataset directory: one binary file per clip plus a TOML manifest.
//!
//! Clip file layout, all integers and floats little-endian:
//!
//! ```text
//! magic "LPCLIP", version u8 = 1
//! kind u8, seed u64, descriptor u16, duration f64, ego_index u16, dt f64, attempts u32
//! lights u16, then per light: phases u32, then per phase start f64, end f64, status u8
//! agents u16, then per agent:
//!   id u32, kind u8, lane_slot u8, behavior u8, priority u8, desired_speed f64
//!   has_light u8 [light u16, stop_s f64]
//!   lane_half_width f64, points u16, points x (x f64, y f64)
//!   initial x, y, heading, speed, acceleration, length, width (f64 each)
//! samples u32, then per agent, per sample:
//!   x f64, y f64, heading f64, speed f64, acceleration f64, ms u16, ts u8
//! ```
//!
//! Sample `k` is at time `k * dt`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{
    generate_clip, Behavior, ExpertConfig, LightBinding, LightPhase, LoggedClip, Scenario, ScenarioAgent,
    ScenarioKind, ScenarioParams, TrafficLight, WorldError,
};
use crate::geometry::{AgentKind, AgentState, Route, Trajectory, Vec2, Waypoint};
use crate::rng::derive_seed;
use crate::tokens::TrafficStatus;

pub const CLIP_FORMAT_VERSION: u8 = 1;
const CLIP_MAGIC: &[u8; 6] = b"LPCLIP";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub kind: ScenarioKind,
    #[serde(with = "u64_text")]
    pub seed: u64,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub format_version: u8,
    #[serde(with = "u64_text")]
    pub master_seed: u64,
    pub params: ScenarioParams,
    pub expert: ExpertConfig,
    pub clips: Vec<ManifestEntry>,
}

/// Loaded dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: ClipManifest,
    pub clips: Vec<LoggedClip>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, WorldError> {
        let manifest = read_manifest(dir)?;
        let clips = manifest
            .clips
            .iter()
            .map(|e| read_clip(&mut io::BufReader::new(fs::File::open(dir.join(&e.file))?)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { manifest, clips })
    }
}

/// TOML integers are signed 64-bit, so full-range seeds travel as decimal strings.
pub(crate) mod u64_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn fmt_err(m: impl Into<String>) -> WorldError {
    WorldError::Format(m.into())
}

pub fn read_manifest(dir: &Path) -> Result<ClipManifest, WorldError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: ClipManifest = toml::from_str(&text).map_err(|e| fmt_err(e.to_string()))?;
    if m.format_version != CLIP_FORMAT_VERSION {
        return Err(fmt_err(format!("unsupported dataset version {}", m.format_version)));
    }
    Ok(m)
}

/// Generates `count` clips, cycling through the scenario kinds. Clip `i` uses a
/// seed derived from `(master_seed, i)`; work is split over `workers` threads and
/// reassembled in index order.
pub fn generate_clips(
    count: usize,
    master_seed: u64,
    kinds: &[ScenarioKind],
    params: &ScenarioParams,
    expert: &ExpertConfig,
    workers: usize,
) -> Result<Vec<LoggedClip>, WorldError> {
    if kinds.is_empty() {
        return Err(WorldError::InvalidParams("no scenario kinds".into()));
    }
    let job = |i: usize| generate_clip(kinds[i % kinds.len()], derive_seed(master_seed, &format!("clip/{i}")), params, expert);
    let workers = workers.clamp(1, count.max(1));
    if workers == 1 {
        return (0..count).map(job).collect();
    }
    let mut slots: Vec<Option<Result<LoggedClip, WorldError>>> = (0..count).map(|_| None).collect();
    std::thread::scope(|sc| {
        for (w, chunk) in slots.chunks_mut(count.div_ceil(workers)).enumerate() {
            let base = w * count.div_ceil(workers);
            let job = &job;
            sc.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(job(base + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// Writes clips and the manifest into `dir` (created if needed).
pub fn write_dataset(
    dir: &Path,
    clips: &[LoggedClip],
    master_seed: u64,
    params: &ScenarioParams,
    expert: &ExpertConfig,
) -> Result<ClipManifest, WorldError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(clips.len());
    for (i, c) in clips.iter().enumerate() {
        let file = format!("clip_{i:05}.bin");
        let mut w = io::BufWriter::new(fs::File::create(dir.join(&file))?);
        write_clip(&mut w, c)?;
        w.flush()?;
        entries.push(ManifestEntry { file, kind: c.scenario.kind, seed: c.scenario.seed, attempts: c.attempts });
    }
    let manifest = ClipManifest {
        format_version: CLIP_FORMAT_VERSION,
        master_seed,
        params: params.clone(),
        expert: expert.clone(),
        clips: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| fmt_err(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

fn write_vec2<W: Write>(w: &mut W, p: Vec2) -> io::Result<()> {
    w.write_f64::<LE>(p.x)?;
    w.write_f64::<LE>(p.y)
}

fn read_vec2<R: Read>(r: &mut R) -> io::Result<Vec2> {
    Ok(Vec2::new(r.read_f64::<LE>()?, r.read_f64::<LE>()?))
}

pub fn write_clip<W: Write>(w: &mut W, clip: &LoggedClip) -> io::Result<()> {
    let s = &clip.scenario;
    w.write_all(CLIP_MAGIC)?;
    w.write_u8(CLIP_FORMAT_VERSION)?;
    w.write_u8(s.kind.id() as u8)?;
    w.write_u64::<LE>(s.seed)?;
    w.write_u16::<LE>(s.descriptor_id as u16)?;
    w.write_f64::<LE>(s.duration_s)?;
    w.write_u16::<LE>(s.ego_index as u16)?;
    w.write_f64::<LE>(clip.dt)?;
    w.write_u32::<LE>(clip.attempts)?;
    w.write_u16::<LE>(s.lights.len() as u16)?;
    for l in &s.lights {
        w.write_u32::<LE>(l.phases.len() as u32)?;
        for p in &l.phases {
            w.write_f64::<LE>(p.start)?;
            w.write_f64::<LE>(p.end)?;
            w.write_u8(p.status.id() as u8)?;
        }
    }
    w.write_u16::<LE>(s.agents.len() as u16)?;
    for a in &s.agents {
        w.write_u32::<LE>(a.id)?;
        w.write_u8(a.kind.id() as u8)?;
        w.write_u8(a.lane_slot as u8)?;
        w.write_u8(a.behavior.id() as u8)?;
        w.write_u8(a.priority)?;
        w.write_f64::<LE>(a.desired_speed)?;
        match a.light {
            Some(b) => {
                w.write_u8(1)?;
                w.write_u16::<LE>(b.light as u16)?;
                w.write_f64::<LE>(b.stop_s)?;
            }
            None => w.write_u8(0)?,
        }
        w.write_f64::<LE>(a.route.lane_half_width)?;
        w.write_u16::<LE>(a.route.centerline().len() as u16)?;
        for &p in a.route.centerline() {
            write_vec2(w, p)?;
        }
        let st = &a.initial;
        write_vec2(w, st.position)?;
        for v in [st.heading, st.speed, st.acceleration, st.length, st.width] {
            w.write_f64::<LE>(v)?;
        }
    }
    w.write_u32::<LE>(clip.num_samples() as u32)?;
    for i in 0..s.agents.len() {
        for (k, wp) in clip.trajectories[i].waypoints().iter().enumerate() {
            write_vec2(w, wp.position)?;
            w.write_f64::<LE>(wp.heading)?;
            w.write_f64::<LE>(wp.speed)?;
            w.write_f64::<LE>(clip.accelerations[i][k])?;
            w.write_u16::<LE>(clip.map_labels[i][k])?;
            w.write_u8(clip.traffic_labels[i][k])?;
        }
    }
    Ok(())
}

pub fn read_clip<R: Read>(r: &mut R) -> Result<LoggedClip, WorldError> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != CLIP_MAGIC {
        return Err(fmt_err("not a clip file"));
    }
    let version = r.read_u8()?;
    if version != CLIP_FORMAT_VERSION {
        return Err(fmt_err(format!("unsupported clip version {version}")));
    }
    let kind = ScenarioKind::from_id(r.read_u8()? as usize).ok_or_else(|| fmt_err("bad scenario kind"))?;
    let seed = r.read_u64::<LE>()?;
    let descriptor_id = r.read_u16::<LE>()? as usize;
    let duration_s = r.read_f64::<LE>()?;
    let ego_index = r.read_u16::<LE>()? as usize;
    let dt = r.read_f64::<LE>()?;
    let attempts = r.read_u32::<LE>()?;
    let n_lights = r.read_u16::<LE>()? as usize;
    let mut lights = Vec::with_capacity(n_lights);
    for _ in 0..n_lights {
        let n = r.read_u32::<LE>()? as usize;
        let mut phases = Vec::with_capacity(n);
        for _ in 0..n {
            let start = r.read_f64::<LE>()?;
            let end = r.read_f64::<LE>()?;
            let status = TrafficStatus::from_id(r.read_u8()? as usize).ok_or_else(|| fmt_err("bad light status"))?;
            phases.push(LightPhase { start, end, status });
        }
        lights.push(TrafficLight { phases });
    }
    let n_agents = r.read_u16::<LE>()? as usize;
    let mut agents = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let id = r.read_u32::<LE>()?;
        let kind = AgentKind::from_id(r.read_u8()? as usize).ok_or_else(|| fmt_err("bad agent kind"))?;
        let lane_slot = r.read_u8()? as usize;
        let behavior = Behavior::from_id(r.read_u8()? as usize).ok_or_else(|| fmt_err("bad behavior"))?;
        let priority = r.read_u8()?;
        let desired_speed = r.read_f64::<LE>()?;
        let light = match r.read_u8()? {
            0 => None,
            _ => Some(LightBinding { light: r.read_u16::<LE>()? as usize, stop_s: r.read_f64::<LE>()? }),
        };
        let half_width = r.read_f64::<LE>()?;
        let n_pts = r.read_u16::<LE>()? as usize;
        let pts = (0..n_pts).map(|_| read_vec2(r)).collect::<io::Result<Vec<_>>>()?;
        let route = Route::new(pts, half_width).map_err(|e| fmt_err(e.to_string()))?;
        let position = read_vec2(r)?;
        let mut v = [0.0; 5];
        for x in v.iter_mut() {
            *x = r.read_f64::<LE>()?;
        }
        let initial = AgentState::new(position, v[0], v[1], v[2], v[3], v[4], kind).map_err(|e| fmt_err(e.to_string()))?;
        agents.push(ScenarioAgent { id, kind, route, lane_slot, initial, behavior, desired_speed, priority, light });
    }
    let samples = r.read_u32::<LE>()? as usize;
    let mut trajectories = Vec::with_capacity(n_agents);
    let mut accelerations = Vec::with_capacity(n_agents);
    let mut map_labels = Vec::with_capacity(n_agents);
    let mut traffic_labels = Vec::with_capacity(n_agents);
    for a in &agents {
        let mut wps = Vec::with_capacity(samples);
        let (mut acc, mut ms, mut ts) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..samples {
            let position = read_vec2(r)?;
            let heading = r.read_f64::<LE>()?;
            let speed = r.read_f64::<LE>()?;
            acc.push(r.read_f64::<LE>()?);
            ms.push(r.read_u16::<LE>()?);
            ts.push(r.read_u8()?);
            wps.push(Waypoint { time: k as f64 * dt, position, heading, speed });
        }
        trajectories.push(Trajectory::new(a.id, wps).map_err(|e| fmt_err(e.to_string()))?);
        accelerations.push(acc);
        map_labels.push(ms);
        traffic_labels.push(ts);
    }
    Ok(LoggedClip {
        scenario: Scenario { kind, seed, descriptor_id, duration_s, ego_index, agents, lights },
        dt,
        trajectories,
        accelerations,
        map_labels,
        traffic_labels,
        attempts,
    })
}
