//! Continuous-world types and geometric predicates.
//!
//! Everything here is plain `f64` on a flat 2D plane. Collision is decided with
//! the separating-axis test on oriented rectangles, time-to-collision by
//! intersecting the per-axis overlap intervals of constant-velocity footprints,
//! and route quantities by projection onto a polyline centerline.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("extent must be strictly positive, got {0}")]
    NonPositiveExtent(f64),
    #[error("speed must be non-negative, got {0}")]
    NegativeSpeed(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("trajectory needs at least 2 waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("waypoint times must be strictly increasing (index {0})")]
    NonIncreasingTime(usize),
    #[error("route centerline needs at least 2 points, got {0}")]
    TooFewRoutePoints(usize),
    #[error("route has a zero-length segment at index {0}")]
    DegenerateSegment(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn lerp(self, o: Vec2, t: f64) -> Vec2 {
        self + (o - self) * t
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    // rem_euclid can land exactly on -pi after the subtraction for inputs near 3pi.
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Rigid pose in the plane. Used to move points between the world frame and
/// an agent's local frame (x forward, y left).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec2,
    pub heading: f64,
}

impl Pose {
    pub fn new(position: Vec2, heading: f64) -> Self {
        Self { position, heading }
    }

    pub fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.position).rotate(-self.heading)
    }

    pub fn to_world(&self, p: Vec2) -> Vec2 {
        p.rotate(self.heading) + self.position
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Car,
    Truck,
    Pedestrian,
    Cyclist,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [
        AgentKind::Car,
        AgentKind::Truck,
        AgentKind::Pedestrian,
        AgentKind::Cyclist,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    /// Nominal (length, width) footprint in meters.
    pub fn footprint(self) -> (f64, f64) {
        match self {
            AgentKind::Car => (4.5, 1.9),
            AgentKind::Truck => (8.0, 2.5),
            AgentKind::Pedestrian => (0.6, 0.6),
            AgentKind::Cyclist => (1.8, 0.6),
        }
    }
}

/// Kinematic state and footprint of a single traffic participant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub acceleration: f64,
    pub length: f64,
    pub width: f64,
    pub kind: AgentKind,
}

impl AgentState {
    pub fn new(
        position: Vec2,
        heading: f64,
        speed: f64,
        acceleration: f64,
        length: f64,
        width: f64,
        kind: AgentKind,
    ) -> Result<Self, GeometryError> {
        if !position.is_finite() || !heading.is_finite() || !acceleration.is_finite() {
            return Err(GeometryError::NonFinite("agent state"));
        }
        if !(length > 0.0) {
            return Err(GeometryError::NonPositiveExtent(length));
        }
        if !(width > 0.0) {
            return Err(GeometryError::NonPositiveExtent(width));
        }
        if !(speed >= 0.0) {
            return Err(GeometryError::NegativeSpeed(speed));
        }
        Ok(Self {
            position,
            heading: normalize_angle(heading),
            speed,
            acceleration,
            length,
            width,
            kind,
        })
    }

    /// State with the kind's nominal footprint.
    pub fn with_kind(
        kind: AgentKind,
        position: Vec2,
        heading: f64,
        speed: f64,
        acceleration: f64,
    ) -> Result<Self, GeometryError> {
        let (l, w) = kind.footprint();
        Self::new(position, heading, speed, acceleration, l, w, kind)
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::from_angle(self.heading) * self.speed
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.position, self.heading)
    }

    pub fn footprint(&self) -> OrientedBox {
        OrientedBox {
            center: self.position,
            heading: self.heading,
            half_length: 0.5 * self.length,
            half_width: 0.5 * self.width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    pub fn new(
        center: Vec2,
        heading: f64,
        half_length: f64,
        half_width: f64,
    ) -> Result<Self, GeometryError> {
        if !(half_length > 0.0) {
            return Err(GeometryError::NonPositiveExtent(half_length));
        }
        if !(half_width > 0.0) {
            return Err(GeometryError::NonPositiveExtent(half_width));
        }
        Ok(Self {
            center,
            heading,
            half_length,
            half_width,
        })
    }

    pub fn axes(&self) -> (Vec2, Vec2) {
        let u = Vec2::from_angle(self.heading);
        (u, u.perp())
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let (u, v) = self.axes();
        let a = u * self.half_length;
        let b = v * self.half_width;
        [
            self.center + a + b,
            self.center + a - b,
            self.center - a - b,
            self.center - a + b,
        ]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let (u, v) = self.axes();
        let d = p - self.center;
        d.dot(u).abs() <= self.half_length && d.dot(v).abs() <= self.half_width
    }

    /// Half-extent of the box projected onto a unit axis.
    fn radius_along(&self, axis: Vec2) -> f64 {
        let (u, v) = self.axes();
        self.half_length * u.dot(axis).abs() + self.half_width * v.dot(axis).abs()
    }

    pub fn translated(&self, by: Vec2) -> OrientedBox {
        OrientedBox {
            center: self.center + by,
            ..*self
        }
    }
}

/// Separating-axis overlap test for two oriented rectangles. Touching boxes count
/// as colliding.
pub fn check_collision(a: &OrientedBox, b: &OrientedBox) -> bool {
    let d = b.center - a.center;
    let (au, av) = a.axes();
    let (bu, bv) = b.axes();
    for axis in [au, av, bu, bv] {
        let dist = d.dot(axis).abs();
        if dist > a.radius_along(axis) + b.radius_along(axis) {
            return false;
        }
    }
    true
}

/// Earliest time in `[0, horizon_s]` at which the constant-velocity extrapolated
/// footprints of the two agents overlap, or `f64::INFINITY` if they never do.
///
/// Both boxes keep their heading, so the separating-axis conditions are linear in
/// time along each of the four axes; the overlap set is the intersection of the
/// four per-axis time intervals.
pub fn time_to_collision(ego: &AgentState, other: &AgentState, horizon_s: f64) -> f64 {
    let a = ego.footprint();
    let b = other.footprint();
    let d0 = b.center - a.center;
    let v = other.velocity() - ego.velocity();
    let (au, av) = a.axes();
    let (bu, bv) = b.axes();

    let (mut t_in, mut t_out) = (f64::NEG_INFINITY, f64::INFINITY);
    for axis in [au, av, bu, bv] {
        let r = a.radius_along(axis) + b.radius_along(axis);
        let p = d0.dot(axis);
        let q = v.dot(axis);
        if q.abs() < 1e-15 {
            if p.abs() > r {
                return f64::INFINITY;
            }
            continue;
        }
        let (t0, t1) = ((-r - p) / q, (r - p) / q);
        t_in = t_in.max(t0.min(t1));
        t_out = t_out.min(t0.max(t1));
    }
    if t_in > t_out || t_out < 0.0 {
        return f64::INFINITY;
    }
    let t = t_in.max(0.0);
    if t <= horizon_s {
        t
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub time: f64,
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub agent_id: u32,
    waypoints: Vec<Waypoint>,
}

impl Trajectory {
    pub fn new(agent_id: u32, waypoints: Vec<Waypoint>) -> Result<Self, GeometryError> {
        if waypoints.len() < 2 {
            return Err(GeometryError::TooFewWaypoints(waypoints.len()));
        }
        for (i, w) in waypoints.iter().enumerate() {
            if !w.position.is_finite() || !w.time.is_finite() || !w.heading.is_finite() {
                return Err(GeometryError::NonFinite("waypoint"));
            }
            if i > 0 && !(w.time > waypoints[i - 1].time) {
                return Err(GeometryError::NonIncreasingTime(i));
            }
        }
        Ok(Self { agent_id, waypoints })
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.waypoints[0].time
    }

    pub fn end_time(&self) -> f64 {
        self.waypoints[self.waypoints.len() - 1].time
    }

    /// Prefix of the first `n` waypoints (n >= 2).
    pub fn prefix(&self, n: usize) -> Result<Self, GeometryError> {
        Self::new(self.agent_id, self.waypoints[..n.min(self.waypoints.len())].to_vec())
    }

    /// Linear interpolation of position, heading (shortest arc) and speed at
    /// time `t`, clamped to the trajectory's time span.
    pub fn sample(&self, t: f64) -> Waypoint {
        let w = &self.waypoints;
        if t <= w[0].time {
            return Waypoint { time: t, ..w[0] };
        }
        let last = w[w.len() - 1];
        if t >= last.time {
            return Waypoint { time: t, ..last };
        }
        let i = w.partition_point(|p| p.time <= t);
        let (a, b) = (w[i - 1], w[i]);
        let f = (t - a.time) / (b.time - a.time);
        let dh = normalize_angle(b.heading - a.heading);
        Waypoint {
            time: t,
            position: a.position.lerp(b.position, f),
            heading: normalize_angle(a.heading + f * dh),
            speed: a.speed + f * (b.speed - a.speed),
        }
    }
}

/// Result of projecting a point onto a route centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the closest point, in `[0, total_length]`.
    pub s: f64,
    /// Signed perpendicular offset, positive to the left of travel direction.
    pub lateral: f64,
    pub distance: f64,
    pub segment: usize,
    pub point: Vec2,
    pub tangent: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    centerline: Vec<Vec2>,
    pub lane_half_width: f64,
    cumulative: Vec<f64>,
}

impl Route {
    pub fn new(centerline: Vec<Vec2>, lane_half_width: f64) -> Result<Self, GeometryError> {
        if centerline.len() < 2 {
            return Err(GeometryError::TooFewRoutePoints(centerline.len()));
        }
        if !(lane_half_width > 0.0) {
            return Err(GeometryError::NonPositiveExtent(lane_half_width));
        }
        let mut cumulative = Vec::with_capacity(centerline.len());
        cumulative.push(0.0);
        for i in 1..centerline.len() {
            if !centerline[i].is_finite() {
                return Err(GeometryError::NonFinite("route point"));
            }
            let d = centerline[i].distance(centerline[i - 1]);
            if d <= 1e-12 {
                return Err(GeometryError::DegenerateSegment(i - 1));
            }
            cumulative.push(cumulative[i - 1] + d);
        }
        Ok(Self {
            centerline,
            lane_half_width,
            cumulative,
        })
    }

    pub fn centerline(&self) -> &[Vec2] {
        &self.centerline
    }

    pub fn total_length(&self) -> f64 {
        self.cumulative[self.cumulative.len() - 1]
    }

    pub fn start(&self) -> Vec2 {
        self.centerline[0]
    }

    pub fn end(&self) -> Vec2 {
        self.centerline[self.centerline.len() - 1]
    }

    fn segment_of(&self, s: f64) -> usize {
        let n = self.centerline.len() - 1;
        self.cumulative.partition_point(|&c| c <= s).clamp(1, n) - 1
    }

    /// Point at arc length `s`; extrapolates linearly past either end.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let i = self.segment_of(s);
        let a = self.centerline[i];
        let b = self.centerline[i + 1];
        let len = self.cumulative[i + 1] - self.cumulative[i];
        a + (b - a) * ((s - self.cumulative[i]) / len)
    }

    /// Unit tangent at arc length `s`.
    pub fn tangent_at(&self, s: f64) -> Vec2 {
        let i = self.segment_of(s);
        let d = self.centerline[i + 1] - self.centerline[i];
        d * (1.0 / d.norm())
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        self.tangent_at(s).angle()
    }

    /// Closest point on the centerline. Equidistant segments resolve to the lowest index.
    pub fn project(&self, p: Vec2) -> Projection {
        let mut best: Option<Projection> = None;
        for i in 0..self.centerline.len() - 1 {
            let a = self.centerline[i];
            let b = self.centerline[i + 1];
            let d = b - a;
            let len = self.cumulative[i + 1] - self.cumulative[i];
            let t = ((p - a).dot(d) / (len * len)).clamp(0.0, 1.0);
            let q = a + d * t;
            let dist = p.distance(q);
            if best.is_none_or(|b| dist < b.distance) {
                let tangent = d * (1.0 / len);
                best = Some(Projection {
                    s: self.cumulative[i] + t * len,
                    lateral: tangent.cross(p - q),
                    distance: dist,
                    segment: i,
                    point: q,
                    tangent,
                });
            }
        }
        best.expect("route has at least one segment")
    }
}

/// Fraction of the route covered between the first and last waypoint, using a
/// running maximum of the projected arc length so backward motion earns nothing.
pub fn route_progress(traj: &Trajectory, route: &Route) -> f64 {
    let wps = traj.waypoints();
    let s0 = route.project(wps[0].position).s;
    let mut s_max = s0;
    for w in &wps[1..] {
        s_max = s_max.max(route.project(w.position).s);
    }
    ((s_max - s0) / route.total_length()).clamp(0.0, 1.0)
}

/// Mean perpendicular distance from the waypoints to the route centerline.
pub fn lane_center_error(traj: &Trajectory, route: &Route) -> f64 {
    let wps = traj.waypoints();
    wps.iter().map(|w| route.project(w.position).distance).sum::<f64>() / wps.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car_box(x: f64, y: f64, h: f64) -> OrientedBox {
        OrientedBox::new(Vec2::new(x, y), h, 2.0, 1.0).unwrap()
    }

    #[test]
    fn identical_boxes_collide() {
        let a = car_box(1.0, 2.0, 0.3);
        assert!(check_collision(&a, &a));
    }

    #[test]
    fn separated_boxes_do_not_collide() {
        assert!(!check_collision(&car_box(0.0, 0.0, 0.0), &car_box(10.0, 0.0, 0.0)));
    }

    #[test]
    fn rotated_corner_case() {
        // A 45-degree box whose corner pokes into the other box's face.
        let a = car_box(0.0, 0.0, 0.0);
        let b = OrientedBox::new(Vec2::new(3.2, 0.0), PI / 4.0, 1.0, 1.0).unwrap();
        assert!(check_collision(&a, &b));
        let c = OrientedBox::new(Vec2::new(3.5, 0.0), PI / 4.0, 1.0, 1.0).unwrap();
        assert!(!check_collision(&a, &c));
    }

    #[test]
    fn box_rejects_nonpositive_extent() {
        assert!(OrientedBox::new(Vec2::ZERO, 0.0, 0.0, 1.0).is_err());
        assert!(AgentState::new(Vec2::ZERO, 0.0, 1.0, 0.0, 1.0, -1.0, AgentKind::Car).is_err());
        assert!(AgentState::new(Vec2::ZERO, 0.0, -1.0, 0.0, 1.0, 1.0, AgentKind::Car).is_err());
    }

    #[test]
    fn heading_is_normalized() {
        let s = AgentState::with_kind(AgentKind::Car, Vec2::ZERO, 3.0 * PI, 0.0, 0.0).unwrap();
        assert!((s.heading - PI).abs() < 1e-12);
        assert_eq!(normalize_angle(-PI), PI);
        assert!(normalize_angle(-3.0 * PI / 2.0) > 0.0);
    }

    fn point_agent(x: f64, heading: f64, speed: f64) -> AgentState {
        AgentState::new(Vec2::new(x, 0.0), heading, speed, 0.0, 1e-6, 1e-6, AgentKind::Pedestrian).unwrap()
    }

    #[test]
    fn ttc_head_on_point_agents() {
        let a = point_agent(0.0, 0.0, 5.0);
        let b = point_agent(20.0, PI, 5.0);
        let t = time_to_collision(&a, &b, 6.0);
        assert!((t - 2.0).abs() < 1e-6, "ttc = {t}");
    }

    #[test]
    fn ttc_moving_apart_is_infinite() {
        let a = point_agent(0.0, PI, 5.0);
        let b = point_agent(20.0, 0.0, 5.0);
        assert_eq!(time_to_collision(&a, &b, 6.0), f64::INFINITY);
    }

    #[test]
    fn ttc_static_separate_is_infinite() {
        let a = AgentState::with_kind(AgentKind::Car, Vec2::ZERO, 0.0, 0.0, 0.0).unwrap();
        let b = AgentState::with_kind(AgentKind::Car, Vec2::new(10.0, 0.0), 0.0, 0.0, 0.0).unwrap();
        assert_eq!(time_to_collision(&a, &b, 6.0), f64::INFINITY);
    }

    #[test]
    fn ttc_overlapping_now_is_zero() {
        let a = AgentState::with_kind(AgentKind::Car, Vec2::ZERO, 0.0, 3.0, 0.0).unwrap();
        assert_eq!(time_to_collision(&a, &a, 6.0), 0.0);
    }

    fn straight_route() -> Route {
        Route::new(vec![Vec2::new(0.0, 0.0), Vec2::new(50.0, 0.0), Vec2::new(100.0, 0.0)], 1.75).unwrap()
    }

    fn traj_of(points: &[(f64, f64)]) -> Trajectory {
        let wps = points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Waypoint {
                time: i as f64 * 0.1,
                position: Vec2::new(x, y),
                heading: 0.0,
                speed: 0.0,
            })
            .collect();
        Trajectory::new(0, wps).unwrap()
    }

    #[test]
    fn progress_full_and_stationary() {
        let r = straight_route();
        assert!((route_progress(&traj_of(&[(0.0, 0.0), (50.0, 0.0), (100.0, 0.0)]), &r) - 1.0).abs() < 1e-12);
        assert_eq!(route_progress(&traj_of(&[(30.0, 0.0), (30.0, 0.0)]), &r), 0.0);
    }

    #[test]
    fn progress_gives_no_backward_credit() {
        let r = straight_route();
        let t = traj_of(&[(10.0, 0.0), (40.0, 0.0), (20.0, 0.0)]);
        assert!((route_progress(&t, &r) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn lane_error_on_and_off_center() {
        let r = straight_route();
        assert_eq!(lane_center_error(&traj_of(&[(0.0, 0.0), (10.0, 0.0)]), &r), 0.0);
        let e = lane_center_error(&traj_of(&[(1.0, 0.5), (10.0, 0.5), (70.0, -0.5)]), &r);
        assert!((e - 0.5).abs() < 1e-12);
    }

    #[test]
    fn projection_tie_takes_lowest_segment() {
        // Point equidistant from two segments of a V-shaped route.
        let r = Route::new(vec![Vec2::new(-10.0, 10.0), Vec2::new(0.0, 0.0), Vec2::new(10.0, 10.0)], 1.0).unwrap();
        let p = r.project(Vec2::new(0.0, 5.0));
        assert_eq!(p.segment, 0);
    }

    #[test]
    fn route_extrapolates_past_ends() {
        let r = straight_route();
        assert_eq!(r.point_at(120.0), Vec2::new(120.0, 0.0));
        assert_eq!(r.point_at(-5.0), Vec2::new(-5.0, 0.0));
        assert!((r.total_length() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_validation() {
        assert!(Trajectory::new(0, vec![]).is_err());
        let w = Waypoint { time: 0.0, position: Vec2::ZERO, heading: 0.0, speed: 0.0 };
        assert_eq!(Trajectory::new(0, vec![w, w]).unwrap_err(), GeometryError::NonIncreasingTime(1));
    }

    #[test]
    fn pose_roundtrip() {
        let pose = Pose::new(Vec2::new(3.0, -2.0), 0.7);
        let p = Vec2::new(1.5, 4.0);
        let q = pose.to_world(pose.to_local(p));
        assert!((p - q).norm() < 1e-12);
    }
}
