//! Encoder inputs built from a scene snapshot.
//!
//! Each encoded agent contributes one row: its token history, a set of pair
//! features for neighbors within [`NEIGHBOR_RADIUS`] (mean-pooled inside the
//! model), route context in its own frame and a one-hot scenario descriptor.

use crate::geometry::{normalize_angle, AgentState, Route};
use crate::grad::Tensor;
use crate::tokens::{StateTokens, TokenizerConfig};
use crate::world::{route_coordinates, DESCRIPTOR_COUNT};

use super::ModelError;

pub const PAIR_FEATURES: usize = 9;
pub const ROUTE_FEATURES: usize = 16;
pub const NEIGHBOR_RADIUS: f64 = 30.0;

const LOOKAHEAD: [f64; 4] = [2.0, 5.0, 10.0, 20.0];

/// What the encoder may know about one agent.
#[derive(Debug, Clone, Copy)]
pub struct AgentView<'a> {
    pub state: AgentState,
    /// Oldest first; the last entry is the current frame.
    pub history: &'a [StateTokens],
    pub route: &'a Route,
    /// Stop-line arc length while the agent's light is red or yellow.
    pub stop_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub rows: usize,
    /// `[rows, H * F]`
    pub history: Tensor,
    /// `[rows, F]`, the current frame's token features.
    pub current: Tensor,
    /// `[P, PAIR_FEATURES]`, grouped by row, canonically sorted within a row.
    pub pairs: Option<Tensor>,
    /// `[rows, P]` averaging matrix over each row's pair block.
    pub pool: Option<Tensor>,
    /// `[rows, ROUTE_FEATURES]`
    pub route: Tensor,
    /// `[rows, DESCRIPTOR_COUNT]`
    pub descriptor: Tensor,
    /// Set when some history was shorter than `H` and got front-padded.
    pub padded: bool,
}

/// Builds encoder rows for `rows` (indices into `agents`). Every agent in
/// `agents` is a potential neighbor.
pub fn build_encoder_input(
    agents: &[AgentView],
    rows: &[usize],
    descriptor_id: usize,
    step_dt: f64,
    history_len: usize,
    tok: &TokenizerConfig,
) -> Result<EncoderInput, ModelError> {
    if rows.is_empty() {
        return Err(ModelError::InvalidInput("no agents to encode".into()));
    }
    if descriptor_id >= DESCRIPTOR_COUNT {
        return Err(ModelError::InvalidInput(format!("descriptor id {descriptor_id}")));
    }
    let f = tok.feature_dim();
    let n = rows.len();
    let mut history = vec![0.0; n * history_len * f];
    let mut current = vec![0.0; n * f];
    let mut route = Vec::with_capacity(n * ROUTE_FEATURES);
    let mut descriptor = vec![0.0; n * DESCRIPTOR_COUNT];
    let mut padded = false;
    let mut blocks: Vec<Vec<[f64; PAIR_FEATURES]>> = Vec::with_capacity(n);

    for (r, &i) in rows.iter().enumerate() {
        let a = agents.get(i).ok_or_else(|| ModelError::InvalidInput(format!("row agent {i}")))?;
        let h = a.history;
        if h.is_empty() {
            return Err(ModelError::InvalidInput(format!("agent {i} has no history")));
        }
        if h.len() < history_len {
            padded = true;
        }
        for k in 0..history_len {
            // Front-pad with the earliest frame; keep the most recent H frames.
            let src = (k + h.len()).saturating_sub(history_len);
            let off = (r * history_len + k) * f;
            h[src].write_features(tok, &mut history[off..off + f]);
        }
        h[h.len() - 1].write_features(tok, &mut current[r * f..(r + 1) * f]);
        route.extend_from_slice(&route_features(a, step_dt));
        descriptor[r * DESCRIPTOR_COUNT + descriptor_id] = 1.0;

        let mut block: Vec<[f64; PAIR_FEATURES]> = agents
            .iter()
            .enumerate()
            .filter(|&(j, b)| j != i && b.state.position.distance(a.state.position) <= NEIGHBOR_RADIUS)
            .map(|(_, b)| pair_features(&a.state, &b.state))
            .collect();
        // Sorting makes the pooled sum independent of agent order, bit for bit.
        block.sort_by(|x, y| {
            x.iter().zip(y).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        });
        blocks.push(block);
    }

    let total: usize = blocks.iter().map(Vec::len).sum();
    let (pairs, pool) = if total == 0 {
        (None, None)
    } else {
        let mut pairs = Vec::with_capacity(total * PAIR_FEATURES);
        let mut pool = vec![0.0; n * total];
        let mut col = 0;
        for (r, block) in blocks.iter().enumerate() {
            let w = 1.0 / block.len().max(1) as f64;
            for p in block {
                pairs.extend_from_slice(p);
                pool[r * total + col] = w;
                col += 1;
            }
        }
        (Some(Tensor::matrix(total, PAIR_FEATURES, pairs)?), Some(Tensor::matrix(n, total, pool)?))
    };

    Ok(EncoderInput {
        rows: n,
        history: Tensor::matrix(n, history_len * f, history)?,
        current: Tensor::matrix(n, f, current)?,
        pairs,
        pool,
        route: Tensor::matrix(n, ROUTE_FEATURES, route)?,
        descriptor: Tensor::matrix(n, DESCRIPTOR_COUNT, descriptor)?,
        padded,
    })
}

fn pair_features(a: &AgentState, b: &AgentState) -> [f64; PAIR_FEATURES] {
    let pose = a.pose();
    let rel = pose.to_local(b.position);
    let vel = (b.velocity() - a.velocity()).rotate(-a.heading);
    let dh = normalize_angle(b.heading - a.heading);
    [
        rel.x / NEIGHBOR_RADIUS,
        rel.y / NEIGHBOR_RADIUS,
        vel.x / 10.0,
        vel.y / 10.0,
        dh.sin(),
        dh.cos(),
        b.length / 10.0,
        b.width / 3.0,
        rel.norm() / NEIGHBOR_RADIUS,
    ]
}

/// Route context in the agent's frame.
pub fn route_features(a: &AgentView, step_dt: f64) -> [f64; ROUTE_FEATURES] {
    let st = &a.state;
    let pose = st.pose();
    let (s, lateral) = route_coordinates(a.route, st.position);
    let total = a.route.total_length();
    let mut out = [0.0; ROUTE_FEATURES];
    for (k, d) in LOOKAHEAD.iter().enumerate() {
        let p = pose.to_local(a.route.point_at(s + d));
        out[2 * k] = p.x / 20.0;
        out[2 * k + 1] = p.y / 20.0;
    }
    out[8] = (lateral / a.route.lane_half_width).clamp(-3.0, 3.0);
    let he = normalize_angle(st.heading - a.route.heading_at(s.clamp(0.0, total)));
    out[9] = he.sin();
    out[10] = he.cos();
    match a.stop_s {
        Some(stop) => {
            out[11] = ((stop - s - 0.5 * st.length) / 30.0).clamp(-0.2, 1.0);
            out[12] = 1.0;
        }
        None => out[11] = 1.0,
    }
    out[13] = ((total - s) / total).clamp(0.0, 1.0);
    out[14] = st.speed / 10.0;
    out[15] = step_dt / 2.0;
    out
}
