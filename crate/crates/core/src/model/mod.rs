//! Token-conditioned policy network: a shared scene encoder and the heads that
//! read it (next-state prediction, a pool of VAE planners, background motion
//! regression and an ego planner-choice categorical).
//!
//! Waypoints are produced in the agent's local frame (x forward, y left) as
//! absolute offsets from the agent's position at the start of the step.

mod features;
mod gradcheck;

pub use features::{
    build_encoder_input, route_features, AgentView, EncoderInput, NEIGHBOR_RADIUS, PAIR_FEATURES, ROUTE_FEATURES,
};

pub use gradcheck::{check_gradients, GradCheckReport};

use std::io::{Read, Write};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::grad::{read_checkpoint, write_checkpoint, GradError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{child_rng, Rng};
use crate::tokens::{TokenError, TokenizerConfig, DYN_DIM};
use crate::world::DESCRIPTOR_COUNT;

pub const LOGVAR_MIN: f64 = -8.0;
pub const LOGVAR_MAX: f64 = 4.0;
pub const PARAM_BUDGET: usize = 500_000;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid model input: {0}")]
    InvalidInput(String),
    #[error("planner index {0} outside pool of {1}")]
    NoSuchPlanner(usize, usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_latent: usize,
    pub hidden: usize,
    /// Token frames per agent fed to the encoder.
    pub history: usize,
    pub waypoints_per_step: usize,
    /// Planner posterior dimension.
    pub planner_latent: usize,
    pub modes: usize,
    pub pair_hidden: usize,
    pub descriptor_dim: usize,
    /// Planners available to reactive agents; the pool adds one ego planner.
    pub reactive_planners: usize,
    /// Metres per unit of raw waypoint output.
    pub waypoint_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_latent: 64,
            hidden: 128,
            history: 4,
            waypoints_per_step: 5,
            planner_latent: 8,
            modes: 6,
            pair_hidden: 32,
            descriptor_dim: 8,
            reactive_planners: 4,
            waypoint_scale: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d_latent == 0 || self.hidden == 0 || self.pair_hidden == 0 || self.descriptor_dim == 0 {
            return bad("layer widths must be positive");
        }
        if self.history == 0 {
            return bad("history must be at least one frame");
        }
        if self.waypoints_per_step == 0 || self.modes == 0 || self.planner_latent == 0 {
            return bad("waypoints, modes and planner latent must be positive");
        }
        if self.reactive_planners == 0 {
            return bad("need at least one reactive planner");
        }
        if !(self.waypoint_scale > 0.0) {
            return bad("waypoint_scale must be positive");
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        1 + self.reactive_planners
    }

    /// Columns of one trajectory: `K` waypoints of (x, y).
    pub fn traj_width(&self) -> usize {
        2 * self.waypoints_per_step
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Self {
        let w = if zero {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
            Tensor::matrix(fan_in, fan_out, data).expect("shape")
        };
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, GradError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Two tanh hidden layers and a linear output.
#[derive(Debug, Clone, Copy)]
struct Mlp {
    l1: Linear,
    l2: Linear,
    out: Linear,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        zero_out: bool,
    ) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}.l1"), fan_in, hidden, false),
            l2: Linear::new(store, rng, &format!("{name}.l2"), hidden, hidden, false),
            out: Linear::new(store, rng, &format!("{name}.out"), hidden, fan_out, zero_out),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, GradError> {
        let h = self.l1.apply(g, store, x)?;
        let h = g.tanh(h);
        let h = self.l2.apply(g, store, h)?;
        let h = g.tanh(h);
        self.out.apply(g, store, h)
    }
}

#[derive(Debug, Clone, Copy)]
struct PlannerParams {
    posterior: Mlp,
    decoder: Mlp,
}

#[derive(Debug, Clone)]
struct Layout {
    pair: Linear,
    descriptor: ParamId,
    enc1: Linear,
    enc2: Linear,
    state: Mlp,
    motion: Mlp,
    planners: Vec<PlannerParams>,
    choice: Linear,
}

/// Next-state head outputs for each encoded row.
#[derive(Debug, Clone, Copy)]
pub struct StatePrediction {
    /// `[n, 6]`
    pub dyn_: Var,
    /// `[n, M]`
    pub ms_logits: Var,
    /// `[n, S]`
    pub ts_logits: Var,
}

/// Planner outputs for a batch of rows sharing one planner.
#[derive(Debug, Clone, Copy)]
pub struct PlannerVars {
    /// `[m, d_u]`
    pub mu: Var,
    /// `[m, d_u]`, clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Var,
    /// `[m, d_u]`, the decoded latent (`mu` when not sampling).
    pub u: Var,
    /// `[m, modes * 2K]`, mode-major.
    pub waypoints: Var,
    /// `[m, modes]`
    pub mode_logits: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub tok: TokenizerConfig,
    pub store: ParamStore,
    /// Bumped by trainers after every parameter update.
    pub snapshot: u64,
    layout: Layout,
}

impl Model {
    pub fn new(cfg: ModelConfig, tok: TokenizerConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        tok.validate()?;
        let mut rng = child_rng(seed, "model/init");
        let mut store = ParamStore::new();
        let f = tok.feature_dim();
        let enc_in = cfg.history * f + cfg.pair_hidden + ROUTE_FEATURES + cfg.descriptor_dim;
        let pair = Linear::new(&mut store, &mut rng, "enc.pair", PAIR_FEATURES, cfg.pair_hidden, false);
        let a = (6.0 / (DESCRIPTOR_COUNT + cfg.descriptor_dim) as f64).sqrt();
        let desc = (0..DESCRIPTOR_COUNT * cfg.descriptor_dim).map(|_| rng.gen_range(-a..a)).collect();
        let descriptor = store.add("enc.descriptor", Tensor::matrix(DESCRIPTOR_COUNT, cfg.descriptor_dim, desc)?);
        let enc1 = Linear::new(&mut store, &mut rng, "enc.l1", enc_in, cfg.hidden, false);
        let enc2 = Linear::new(&mut store, &mut rng, "enc.l2", cfg.hidden, cfg.d_latent, false);
        let state_out = DYN_DIM + tok.map_segment_count + tok.traffic_status_count;
        let state = Mlp::new(&mut store, &mut rng, "state", cfg.d_latent + f, cfg.hidden, state_out, true);
        let motion = Mlp::new(&mut store, &mut rng, "motion", cfg.d_latent, cfg.hidden, cfg.traj_width(), true);
        let planners = (0..cfg.pool_size())
            .map(|p| PlannerParams {
                posterior: Mlp::new(
                    &mut store,
                    &mut rng,
                    &format!("planner{p}.post"),
                    cfg.d_latent,
                    cfg.hidden,
                    2 * cfg.planner_latent,
                    false,
                ),
                decoder: Mlp::new(
                    &mut store,
                    &mut rng,
                    &format!("planner{p}.dec"),
                    cfg.planner_latent,
                    cfg.hidden,
                    cfg.modes * cfg.traj_width() + cfg.modes,
                    false,
                ),
            })
            .collect();
        let choice = Linear::new(&mut store, &mut rng, "choice", cfg.d_latent, cfg.pool_size(), true);
        let model = Self {
            cfg,
            tok,
            store,
            snapshot: 0,
            layout: Layout {
                pair,
                descriptor,
                enc1,
                enc2,
                state,
                motion,
                planners,
                choice,
            },
        };
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    pub fn pool_size(&self) -> usize {
        self.cfg.pool_size()
    }

    /// Latent tokens `[rows, d_latent]` for every encoded row.
    pub fn encode(&self, g: &mut Graph, inp: &EncoderInput) -> Result<Var, ModelError> {
        let s = &self.store;
        let l = &self.layout;
        let hist = g.constant(inp.history.clone());
        let pooled = match (&inp.pairs, &inp.pool) {
            (Some(pairs), Some(pool)) => {
                let p = g.constant(pairs.clone());
                let h = l.pair.apply(g, s, p)?;
                let h = g.tanh(h);
                let a = g.constant(pool.clone());
                g.matmul(a, h)?
            }
            _ => g.constant(Tensor::zeros(&[inp.rows, self.cfg.pair_hidden])),
        };
        let route = g.constant(inp.route.clone());
        let onehot = g.constant(inp.descriptor.clone());
        let table = g.param(s, l.descriptor);
        let desc = g.matmul(onehot, table)?;
        let x = g.concat(&[hist, pooled, route, desc])?;
        let h = l.enc1.apply(g, s, x)?;
        let h = g.tanh(h);
        let z = l.enc2.apply(g, s, h)?;
        Ok(g.tanh(z))
    }

    /// Next-state heads from latents `z` and current token features `current`.
    pub fn predict_next_state(&self, g: &mut Graph, z: Var, current: Var) -> Result<StatePrediction, ModelError> {
        let x = g.concat(&[z, current])?;
        let out = self.layout.state.apply(g, &self.store, x)?;
        let m = self.tok.map_segment_count;
        let w = g.value(out).cols();
        Ok(StatePrediction {
            dyn_: g.slice_cols(out, 0, DYN_DIM)?,
            ms_logits: g.slice_cols(out, DYN_DIM, DYN_DIM + m)?,
            ts_logits: g.slice_cols(out, DYN_DIM + m, w)?,
        })
    }

    /// Runs planner `p` on latents `z`. With `noise` (`[m, d_u]`) the latent is
    /// the reparameterized draw `mu + exp(logvar / 2) * noise`, otherwise `mu`.
    pub fn plan(&self, g: &mut Graph, p: usize, z: Var, noise: Option<&Tensor>) -> Result<PlannerVars, ModelError> {
        let planner = *self.layout.planners.get(p).ok_or(ModelError::NoSuchPlanner(p, self.pool_size()))?;
        let d = self.cfg.planner_latent;
        let post = planner.posterior.apply(g, &self.store, z)?;
        let mu = g.slice_cols(post, 0, d)?;
        let raw = g.slice_cols(post, d, 2 * d)?;
        let logvar = g.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
        let u = match noise {
            Some(eps) => {
                let half = g.scale(logvar, 0.5);
                let std = g.exp(half);
                let e = g.constant(eps.clone());
                let shift = g.mul(std, e)?;
                g.add(mu, shift)?
            }
            None => mu,
        };
        let out = planner.decoder.apply(g, &self.store, u)?;
        let w = self.cfg.modes * self.cfg.traj_width();
        let raw_wp = g.slice_cols(out, 0, w)?;
        let waypoints = g.scale(raw_wp, self.cfg.waypoint_scale);
        let mode_logits = g.slice_cols(out, w, w + self.cfg.modes)?;
        Ok(PlannerVars {
            mu,
            logvar,
            u,
            waypoints,
            mode_logits,
        })
    }

    /// Single-mode background trajectories `[m, 2K]`.
    pub fn predict_motion(&self, g: &mut Graph, z: Var) -> Result<Var, ModelError> {
        let out = self.layout.motion.apply(g, &self.store, z)?;
        Ok(g.scale(out, self.cfg.waypoint_scale))
    }

    /// Ego planner-choice logits `[rows, pool_size]`.
    pub fn choice_logits(&self, g: &mut Graph, z: Var) -> Result<Var, ModelError> {
        Ok(self.layout.choice.apply(g, &self.store, z)?)
    }

    /// Standard-normal noise for `rows` planner draws.
    pub fn sample_noise(&self, rng: &mut Rng, rows: usize) -> Tensor {
        let d = self.cfg.planner_latent;
        let data = (0..rows * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::matrix(rows, d, data).expect("shape")
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        write_checkpoint(w, self.store.named())?;
        Ok(())
    }

    /// Loads parameters saved by [`Model::save`] into a model built from the same config.
    pub fn load<R: Read>(&mut self, r: &mut R) -> Result<(), ModelError> {
        let tensors = read_checkpoint(r)?;
        if tensors.len() != self.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors in file, model has {}",
                tensors.len(),
                self.store.len()
            )));
        }
        for (name, t) in tensors {
            let id = self
                .store
                .id_of(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown tensor {name}")))?;
            if self.store.value(id).shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!("shape mismatch for {name}")));
            }
            *self.store.value_mut(id) = t;
        }
        self.snapshot += 1;
        Ok(())
    }
}

/// Which head drives an encoded row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Head {
    Planner(usize),
    Motion,
}

#[derive(Debug, Clone, Copy)]
pub enum HeadOut {
    Planner(PlannerVars),
    /// `[m, 2K]`
    Motion(Var),
}

/// Rows sharing one head, in ascending row order, and that head's outputs.
#[derive(Debug, Clone)]
pub struct HeadBatch {
    pub head: Head,
    pub rows: Vec<usize>,
    pub out: HeadOut,
}

impl HeadBatch {
    /// Position of encoded row `row` inside this batch.
    pub fn position(&self, row: usize) -> Option<usize> {
        self.rows.iter().position(|&r| r == row)
    }
}

impl Model {
    /// Dispatches the rows of `z` to their heads. `noise[row]` holds the
    /// planner draw for sampled rows; planner groups are either fully sampled
    /// or fully deterministic.
    pub fn forward_heads(
        &self,
        g: &mut Graph,
        z: Var,
        heads: &[Head],
        noise: Option<&[Option<Vec<f64>>]>,
    ) -> Result<Vec<HeadBatch>, ModelError> {
        let n = g.value(z).rows();
        if heads.len() != n {
            return Err(ModelError::InvalidInput(format!("{} heads for {n} rows", heads.len())));
        }
        let mut kinds: Vec<Head> = heads.to_vec();
        kinds.sort();
        kinds.dedup();
        let mut out = Vec::with_capacity(kinds.len());
        for head in kinds {
            let rows: Vec<usize> = (0..n).filter(|&r| heads[r] == head).collect();
            let zs = if rows.len() == n {
                z
            } else {
                let mut sel = vec![0.0; rows.len() * n];
                for (j, &r) in rows.iter().enumerate() {
                    sel[j * n + r] = 1.0;
                }
                let s = g.constant(Tensor::matrix(rows.len(), n, sel)?);
                g.matmul(s, z)?
            };
            let o = match head {
                Head::Motion => HeadOut::Motion(self.predict_motion(g, zs)?),
                Head::Planner(p) => {
                    let eps = match noise {
                        Some(nz) if rows.iter().any(|&r| nz.get(r).is_some_and(Option::is_some)) => {
                            let d = self.cfg.planner_latent;
                            let mut data = Vec::with_capacity(rows.len() * d);
                            for &r in &rows {
                                let e = nz.get(r).and_then(Option::as_ref).ok_or_else(|| {
                                    ModelError::InvalidInput(format!("planner row {r} lacks noise"))
                                })?;
                                if e.len() != d {
                                    return Err(ModelError::InvalidInput(format!("noise width {}", e.len())));
                                }
                                data.extend_from_slice(e);
                            }
                            Some(Tensor::matrix(rows.len(), d, data)?)
                        }
                        _ => None,
                    };
                    HeadOut::Planner(self.plan(g, p, zs, eps.as_ref())?)
                }
            };
            out.push(HeadBatch { head, rows, out: o });
        }
        Ok(out)
    }
}

/// Index of the largest value, first on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
