//! Four-token state representation: continuous dynamics plus categorical type,
//! map segment and traffic status.

use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_angle, AgentKind, AgentState, Vec2};

pub const DYN_DIM: usize = 6;
pub const TYPE_COUNT: usize = 4;

/// Traffic status vocabulary used by the default `S = 4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrafficStatus {
    Green = 0,
    Yellow = 1,
    Red = 2,
    None = 3,
}

impl TrafficStatus {
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        match id {
            0 => Some(Self::Green),
            1 => Some(Self::Yellow),
            2 => Some(Self::Red),
            3 => Some(Self::None),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TokenError {
    #[error("map segment {0} outside vocabulary of size {1}")]
    MapSegmentOutOfVocab(usize, usize),
    #[error("traffic status {0} outside vocabulary of size {1}")]
    TrafficStatusOutOfVocab(usize, usize),
    #[error("type id {0} is not a known agent kind")]
    UnknownType(usize),
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(&'static str),
}

/// Normalization ranges and vocabulary sizes.
///
/// Speed maps `[0, speed_range]` onto `[-1, 1]`, so a stopped agent encodes as -1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub position_range: f64,
    pub speed_range: f64,
    pub accel_range: f64,
    pub map_segment_count: usize,
    pub traffic_status_count: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            position_range: 60.0,
            speed_range: 20.0,
            accel_range: 6.0,
            map_segment_count: 32,
            traffic_status_count: 4,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<(), TokenError> {
        if !(self.position_range > 0.0 && self.speed_range > 0.0 && self.accel_range > 0.0) {
            return Err(TokenError::InvalidConfig("ranges must be positive"));
        }
        if self.map_segment_count == 0 || self.traffic_status_count == 0 {
            return Err(TokenError::InvalidConfig("vocabularies must be non-empty"));
        }
        Ok(())
    }

    /// Width of the one-hot-expanded token feature vector.
    pub fn feature_dim(&self) -> usize {
        DYN_DIM + TYPE_COUNT + self.map_segment_count + self.traffic_status_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateTokens {
    pub dyn_: [f64; DYN_DIM],
    pub type_id: usize,
    pub ms_id: usize,
    pub ts_id: usize,
}

impl StateTokens {
    /// Dense feature vector: dyn, then one-hot type, map segment, traffic status.
    pub fn features(&self, cfg: &TokenizerConfig) -> Vec<f64> {
        let mut f = vec![0.0; cfg.feature_dim()];
        self.write_features(cfg, &mut f);
        f
    }

    pub fn write_features(&self, cfg: &TokenizerConfig, out: &mut [f64]) {
        out[..DYN_DIM].copy_from_slice(&self.dyn_);
        let mut o = DYN_DIM;
        out[o..o + TYPE_COUNT].iter_mut().for_each(|v| *v = 0.0);
        out[o + self.type_id] = 1.0;
        o += TYPE_COUNT;
        out[o..o + cfg.map_segment_count].iter_mut().for_each(|v| *v = 0.0);
        out[o + self.ms_id] = 1.0;
        o += cfg.map_segment_count;
        out[o..o + cfg.traffic_status_count].iter_mut().for_each(|v| *v = 0.0);
        out[o + self.ts_id] = 1.0;
    }
}

/// Count of decode-time clamping events.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeDiagnostics {
    pub clamped_components: usize,
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

pub fn encode_state(
    s: &AgentState,
    ms: usize,
    ts: usize,
    cfg: &TokenizerConfig,
) -> Result<StateTokens, TokenError> {
    if ms >= cfg.map_segment_count {
        return Err(TokenError::MapSegmentOutOfVocab(ms, cfg.map_segment_count));
    }
    if ts >= cfg.traffic_status_count {
        return Err(TokenError::TrafficStatusOutOfVocab(ts, cfg.traffic_status_count));
    }
    let (sin, cos) = s.heading.sin_cos();
    Ok(StateTokens {
        dyn_: [
            clamp_unit(s.position.x / cfg.position_range),
            clamp_unit(s.position.y / cfg.position_range),
            sin,
            cos,
            clamp_unit(s.speed / cfg.speed_range * 2.0 - 1.0),
            clamp_unit(s.acceleration / cfg.accel_range),
        ],
        type_id: s.kind.id(),
        ms_id: ms,
        ts_id: ts,
    })
}

/// Inverse of [`encode_state`]. Footprint comes from the kind's nominal size.
pub fn decode_state(
    t: &StateTokens,
    cfg: &TokenizerConfig,
    diag: &mut DecodeDiagnostics,
) -> Result<(AgentState, usize, usize), TokenError> {
    let kind = AgentKind::from_id(t.type_id).ok_or(TokenError::UnknownType(t.type_id))?;
    if t.ms_id >= cfg.map_segment_count {
        return Err(TokenError::MapSegmentOutOfVocab(t.ms_id, cfg.map_segment_count));
    }
    if t.ts_id >= cfg.traffic_status_count {
        return Err(TokenError::TrafficStatusOutOfVocab(t.ts_id, cfg.traffic_status_count));
    }
    let mut d = t.dyn_;
    for v in d.iter_mut() {
        if !(-1.0..=1.0).contains(v) {
            diag.clamped_components += 1;
            // NaN clamps to 0 so the decoded state stays finite.
            *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        }
    }
    let heading = if d[2] == 0.0 && d[3] == 0.0 {
        0.0
    } else {
        normalize_angle(d[2].atan2(d[3]))
    };
    let (length, width) = kind.footprint();
    let state = AgentState {
        position: Vec2::new(d[0] * cfg.position_range, d[1] * cfg.position_range),
        heading,
        speed: ((d[4] + 1.0) * 0.5 * cfg.speed_range).max(0.0),
        acceleration: d[5] * cfg.accel_range,
        length,
        width,
        kind,
    };
    Ok((state, t.ms_id, t.ts_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> TokenizerConfig {
        TokenizerConfig::default()
    }

    #[test]
    fn origin_state_encoding() {
        let s = AgentState::with_kind(AgentKind::Car, Vec2::ZERO, 0.0, 0.0, 0.0).unwrap();
        let t = encode_state(&s, 0, 3, &cfg()).unwrap();
        assert_eq!(t.dyn_, [0.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
    }

    #[test]
    fn range_endpoint_maps_to_one() {
        let s = AgentState::with_kind(AgentKind::Car, Vec2::new(60.0, -60.0), 0.0, 20.0, 6.0).unwrap();
        let t = encode_state(&s, 1, 1, &cfg()).unwrap();
        assert_eq!(t.dyn_[0], 1.0);
        assert_eq!(t.dyn_[1], -1.0);
        assert_eq!(t.dyn_[4], 1.0);
        assert_eq!(t.dyn_[5], 1.0);
    }

    #[test]
    fn out_of_vocab_is_rejected() {
        let s = AgentState::with_kind(AgentKind::Car, Vec2::ZERO, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(
            encode_state(&s, 32, 0, &cfg()).unwrap_err(),
            TokenError::MapSegmentOutOfVocab(32, 32)
        );
        assert_eq!(
            encode_state(&s, 0, 4, &cfg()).unwrap_err(),
            TokenError::TrafficStatusOutOfVocab(4, 4)
        );
    }

    #[test]
    fn zero_dyn_decodes_to_origin() {
        let t = StateTokens { dyn_: [0.0, 0.0, 0.0, 1.0, -1.0, 0.0], type_id: 0, ms_id: 0, ts_id: 0 };
        let mut diag = DecodeDiagnostics::default();
        let (s, _, _) = decode_state(&t, &cfg(), &mut diag).unwrap();
        assert_eq!(s.position, Vec2::ZERO);
        assert_eq!(s.heading, 0.0);
        assert_eq!(s.speed, 0.0);
        assert_eq!(diag.clamped_components, 0);
    }

    #[test]
    fn out_of_range_dyn_is_clamped_and_counted() {
        let t = StateTokens { dyn_: [1.5, 0.0, 0.0, 1.0, -3.0, f64::NAN], type_id: 0, ms_id: 0, ts_id: 0 };
        let mut diag = DecodeDiagnostics::default();
        let (s, _, _) = decode_state(&t, &cfg(), &mut diag).unwrap();
        assert_eq!(diag.clamped_components, 3);
        assert_eq!(s.position.x, 60.0);
        assert!(s.acceleration.is_finite());
    }

    #[test]
    fn boundary_states_roundtrip() {
        let c = cfg();
        for &(x, y, v, a) in &[(60.0, 60.0, 20.0, 6.0), (-60.0, -60.0, 0.0, -6.0)] {
            let s = AgentState::with_kind(AgentKind::Truck, Vec2::new(x, y), std::f64::consts::PI, v, a).unwrap();
            let t = encode_state(&s, 5, 2, &c).unwrap();
            let (d, ms, ts) = decode_state(&t, &c, &mut DecodeDiagnostics::default()).unwrap();
            assert_eq!((ms, ts), (5, 2));
            assert!((d.position - s.position).norm() < 1e-12);
            assert!((d.speed - s.speed).abs() < 1e-12);
            assert!((d.acceleration - s.acceleration).abs() < 1e-12);
            assert!((normalize_angle(d.heading - s.heading)).abs() < 1e-12);
        }
    }

    #[test]
    fn features_layout() {
        let c = cfg();
        let t = StateTokens { dyn_: [0.1; 6], type_id: 2, ms_id: 7, ts_id: 1 };
        let f = t.features(&c);
        assert_eq!(f.len(), 46);
        assert_eq!(f[6 + 2], 1.0);
        assert_eq!(f[10 + 7], 1.0);
        assert_eq!(f[42 + 1], 1.0);
        assert_eq!(f.iter().filter(|&&v| v == 1.0).count(), 3);
    }

    proptest! {
        #[test]
        fn fuzzed_tokens_decode_heading_in_range(
            d in proptest::array::uniform6(-3.0f64..3.0),
            ty in 0usize..4,
        ) {
            let t = StateTokens { dyn_: d, type_id: ty, ms_id: 0, ts_id: 0 };
            let (s, _, _) = decode_state(&t, &cfg(), &mut DecodeDiagnostics::default()).unwrap();
            prop_assert!(s.heading > -std::f64::consts::PI && s.heading <= std::f64::consts::PI);
            prop_assert!(s.speed >= 0.0);
        }

        #[test]
        fn encode_is_lipschitz_per_channel(
            x0 in -60.0f64..60.0, x1 in -60.0f64..60.0,
            v0 in 0.0f64..20.0, v1 in 0.0f64..20.0,
        ) {
            let c = cfg();
            let a = AgentState::with_kind(AgentKind::Car, Vec2::new(x0, 0.0), 0.0, v0, 0.0).unwrap();
            let b = AgentState::with_kind(AgentKind::Car, Vec2::new(x1, 0.0), 0.0, v1, 0.0).unwrap();
            let ta = encode_state(&a, 0, 0, &c).unwrap();
            let tb = encode_state(&b, 0, 0, &c).unwrap();
            prop_assert!((ta.dyn_[0] - tb.dyn_[0]).abs() <= (x0 - x1).abs() / c.position_range + 1e-15);
            prop_assert!((ta.dyn_[4] - tb.dyn_[4]).abs() <= 2.0 * (v0 - v1).abs() / c.speed_range + 1e-15);
        }

        #[test]
        fn heading_channels_are_unit(h in -10.0f64..10.0) {
            let s = AgentState::with_kind(AgentKind::Car, Vec2::ZERO, h, 0.0, 0.0).unwrap();
            let t = encode_state(&s, 0, 0, &cfg()).unwrap();
            prop_assert!((t.dyn_[2].powi(2) + t.dyn_[3].powi(2) - 1.0).abs() < 1e-9);
        }
    }
}
