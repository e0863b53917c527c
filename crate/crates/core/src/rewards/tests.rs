use proptest::prelude::*;

use super::*;
use crate::geometry::{AgentKind, AgentState, Trajectory, Waypoint};
use crate::grad::Tensor;
use crate::model::EncoderInput;
use crate::rollout::{AgentStep, RolloutAgent, StepRecord};
use crate::tokens::StateTokens;
use crate::world::{Behavior, Scenario, ScenarioAgent, ScenarioKind};

const K: usize = 5;
const DT: f64 = 0.5;

fn state(x: f64, y: f64, speed: f64) -> AgentState {
    AgentState::with_kind(AgentKind::Car, Vec2::new(x, y), 0.0, speed, 0.0).unwrap()
}

fn x_route() -> Route {
    Route::new(vec![Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)], 1.75).unwrap()
}

fn clip(n: usize) -> LoggedClip {
    let agent = |id: usize| ScenarioAgent {
        id: id as u32,
        kind: AgentKind::Car,
        route: x_route(),
        lane_slot: 0,
        initial: state(0.0, 0.0, 0.0),
        behavior: Behavior::RuleCompliant,
        desired_speed: 10.0,
        priority: 0,
        light: None,
    };
    let still = Trajectory::new(
        0,
        (0..2).map(|i| Waypoint { time: i as f64 * 0.1, position: Vec2::new(0.0, 0.0), heading: 0.0, speed: 0.0 }).collect(),
    )
    .unwrap();
    LoggedClip {
        scenario: Scenario {
            kind: ScenarioKind::StraightFollow,
            seed: 0,
            descriptor_id: 0,
            duration_s: 10.0,
            ego_index: 0,
            agents: (0..n).map(agent).collect(),
            lights: Vec::new(),
        },
        dt: 0.1,
        trajectories: vec![still; n],
        accelerations: vec![vec![0.0; 2]; n],
        map_labels: vec![vec![0; 2]; n],
        traffic_labels: vec![vec![3; 2]; n],
        attempts: 1,
    }
}

/// Straight-line step from `(x0, y)` to `(x1, y)` with evenly spaced waypoints.
fn step(x0: f64, x1: f64, y: f64, collided: bool, ttc: f64) -> AgentStep {
    let world: Vec<Vec2> = (1..=K).map(|k| Vec2::new(x0 + (x1 - x0) * k as f64 / K as f64, y)).collect();
    let speed = (x1 - x0) / DT;
    AgentStep {
        start: state(x0, y, speed),
        end: state(x1, y, speed),
        local: world.iter().map(|p| Vec2::new(p.x - x0, 0.0)).collect(),
        world,
        mode: Some(0),
        noise: None,
        mu: Vec::new(),
        logvar: Vec::new(),
        u: Vec::new(),
        collided,
        ttc,
    }
}

fn record(agents: Vec<RolloutAgent>, steps: Vec<Vec<AgentStep>>, l: usize) -> RolloutRecord {
    let n = agents.len();
    let empty = EncoderInput {
        rows: n,
        history: Tensor::zeros(&[n, 1]),
        current: Tensor::zeros(&[n, 1]),
        pairs: None,
        pool: None,
        route: Tensor::zeros(&[n, 1]),
        descriptor: Tensor::zeros(&[n, 1]),
        padded: false,
    };
    let tok = StateTokens { dyn_: Default::default(), type_id: 0, ms_id: 0, ts_id: 3 };
    RolloutRecord {
        seed: 0,
        snapshot: 0,
        t0: 0.0,
        step_dt: DT,
        horizon: steps.len(),
        agents,
        ego_choice: None,
        choice_input: None,
        steps: steps
            .into_iter()
            .enumerate()
            .map(|(k, agents)| StepRecord {
                time: k as f64 * DT,
                input: empty.clone(),
                latents: Tensor::zeros(&[n, 1]),
                tokens: vec![tok; n],
                ground_truth_input: k == 0,
                agents,
            })
            .collect(),
        l,
        numerical_failure: false,
    }
}

fn three_agents() -> Vec<RolloutAgent> {
    vec![
        RolloutAgent { index: 0, role: Role::Ego, head: Head::Planner(0) },
        RolloutAgent { index: 1, role: Role::Reactive, head: Head::Planner(1) },
        RolloutAgent { index: 2, role: Role::Background, head: Head::Motion },
    ]
}

#[test]
fn two_step_three_agent_record_matches_hand_evaluation() {
    // Ego: 5 m per step on the centerline, no hazards.
    // Reactive: 0.2 m per step at lateral 2.0, TTC 2 s then 5 s, collides in step 2.
    // Background: collides in step 2 as well; it never counts.
    let steps = vec![
        vec![step(0.0, 5.0, 0.0, false, f64::INFINITY), step(0.0, 0.2, 2.0, false, 2.0), step(50.0, 51.0, 0.0, false, 9.0)],
        vec![step(5.0, 10.0, 0.0, false, f64::INFINITY), step(0.2, 0.4, 2.0, true, 5.0), step(51.0, 52.0, 0.0, true, 9.0)],
    ];
    let rec = record(three_agents(), steps, 1);
    let cfg = RewardConfig::default();
    let b = total_reward(&rec, &clip(3), &cfg).unwrap();

    // G = 1/2 - 1 (one reactive event).
    assert!((b.global - (-0.5)).abs() < 1e-9);
    // Ego: RC 0.05 per step.
    assert!((b.ego.total - 0.1).abs() < 1e-9);
    // Reactive step 1: 0.002 - (3 - 2) - ((0.5 - 0.2) + (2 - 1.75)) = -1.548
    // Reactive step 2: 0.002 - 0 - 0.55 = -0.548
    assert_eq!(b.reactive.len(), 1);
    let r = &b.reactive[0];
    assert!((r.steps[0].ttc_penalty - 1.0).abs() < 1e-12);
    assert!((r.steps[1].ttc_penalty).abs() < 1e-12);
    assert!((r.steps[0].progress_loss - 0.55).abs() < 1e-9);
    assert!((r.total - (-2.096)).abs() < 1e-9);
    // Descriptors differ in min TTC (1 vs 1/3), lane error (0 vs 1), lane-change
    // timing (1 vs 0) and drivable compliance (1 vs 0): D = 2/3 + 3 = 11/3.
    assert!(!b.diversity_degenerate);
    assert!((b.diversity - 11.0 / 3.0).abs() < 1e-9);
    let expected = -0.5 + 0.1 * 11.0 / 3.0 + 0.1 - 2.096;
    assert!((b.total - expected).abs() < 1e-9, "{}", b.total);
    assert!((b.recompose(&cfg) - b.total).abs() < 1e-12);
}

#[test]
fn global_reward_cases() {
    let cfg = RewardConfig::default();
    let agents = three_agents();
    let clean: Vec<Vec<AgentStep>> = (0..8)
        .map(|k| {
            let x = k as f64 * 5.0;
            vec![step(x, x + 5.0, 0.0, false, 9.0), step(x, x + 5.0, 3.5, false, 9.0), step(x, x, 0.0, false, 9.0)]
        })
        .collect();
    assert_eq!(global_reward(&record(agents.clone(), clean.clone(), 8), &cfg), 1.0);

    // Ego collision at step 3 ends an 8-step rollout.
    let mut short = clean[..3].to_vec();
    short[2][0].collided = true;
    let mut rec = record(agents.clone(), short, 2);
    rec.horizon = 8;
    rec.l = 3;
    assert!((global_reward(&rec, &cfg) - (-0.625)).abs() < 1e-12);

    // One more reactive event subtracts exactly one unit; background events never count.
    let mut more = rec.clone();
    more.steps[1].agents[1].collided = true;
    more.steps[1].agents[2].collided = true;
    assert!((global_reward(&rec, &cfg) - global_reward(&more, &cfg) - 1.0).abs() < 1e-12);
}

#[test]
fn ttc_penalty_hinge() {
    assert_eq!(ttc_penalty(1.0, 3.0), 2.0);
    assert_eq!(ttc_penalty(3.0, 3.0), 0.0);
    assert_eq!(ttc_penalty(f64::INFINITY, 3.0), 0.0);
}

#[test]
fn full_route_traversal_earns_rc_weight() {
    let cfg = RewardConfig { rc_weight: 2.5, ..Default::default() };
    let steps: Vec<StepKinematics> = (0..10)
        .map(|k| StepKinematics { s_start: k as f64 * 10.0, s_end: (k + 1) as f64 * 10.0, lateral_end: 0.3, ttc: 10.0 })
        .collect();
    let r = vehicle_reward(&steps, &x_route(), &cfg);
    assert!((r.total - 2.5).abs() < 1e-12);
}

#[test]
fn backtracking_does_not_earn_route_completion_twice() {
    let cfg = RewardConfig { ttc_weight: 0.0, progress_weight: 0.0, ..Default::default() };
    let ks = |a: f64, b: f64| StepKinematics { s_start: a, s_end: b, lateral_end: 0.0, ttc: 10.0 };
    let r = vehicle_reward(&[ks(0.0, 10.0), ks(10.0, 5.0), ks(5.0, 12.0)], &x_route(), &cfg);
    assert!((r.total - 0.12).abs() < 1e-12);
}

#[test]
fn ego_only_scene_has_no_diversity() {
    let agents = vec![RolloutAgent { index: 0, role: Role::Ego, head: Head::Planner(0) }];
    let steps = vec![vec![step(0.0, 5.0, 0.0, false, 9.0)], vec![step(5.0, 10.0, 0.0, false, 9.0)]];
    let cfg = RewardConfig::default();
    let b = total_reward(&record(agents, steps, 2), &clip(1), &cfg).unwrap();
    assert!(b.diversity_degenerate);
    assert_eq!(b.diversity, 0.0);
    assert!((b.total - (b.global + b.ego.total)).abs() < 1e-12);
}

#[test]
fn diversity_weight_is_linear() {
    let steps = vec![
        vec![step(0.0, 5.0, 0.0, false, 9.0), step(0.0, 1.0, 1.0, false, 2.0), step(9.0, 9.0, 0.0, false, 9.0)],
        vec![step(5.0, 10.0, 0.0, false, 9.0), step(1.0, 3.0, 1.0, false, 1.0), step(9.0, 9.0, 0.0, false, 9.0)],
    ];
    let rec = record(three_agents(), steps, 2);
    let c1 = RewardConfig::default();
    let c2 = RewardConfig { diversity_weight: 0.2, ..Default::default() };
    let b1 = total_reward(&rec, &clip(3), &c1).unwrap();
    let b2 = total_reward(&rec, &clip(3), &c2).unwrap();
    assert!((b2.total - b1.total - 0.1 * b1.diversity).abs() < 1e-12);
}

#[test]
fn diversity_two_descriptor_hand_case() {
    let a = [0.5; DESCRIPTOR_DIM];
    let mut b = a;
    b[3] = 1.5;
    assert_eq!(diversity_reward(&[a, b]), (1.0, false));
    assert_eq!(diversity_reward(&[a]), (0.0, true));
}

#[test]
fn constant_velocity_centerline_descriptor() {
    let pts: Vec<Vec2> = (0..20).map(|i| Vec2::new(i as f64 * 0.8, 0.0)).collect();
    let d = behavior_descriptor(&pts, 0.1, &x_route(), f64::INFINITY, 1.0, &RewardConfig::default()).unwrap();
    assert!((d[0] - 0.5).abs() < 1e-9);
    assert!((d[1] - 0.5).abs() < 1e-9);
    assert_eq!(d[4], NO_LANE_CHANGE);
    assert_eq!(&d[5..], &[1.0, 1.0, 1.0]);
    assert!(matches!(
        behavior_descriptor(&pts[..3], 0.1, &x_route(), 1.0, 1.0, &RewardConfig::default()),
        Err(RewardError::TooShort { .. })
    ));
}

#[test]
fn reversing_is_direction_noncompliant() {
    let pts: Vec<Vec2> = (0..11).map(|i| Vec2::new(50.0 - i as f64, 0.0)).collect();
    let d = behavior_descriptor(&pts, 0.1, &x_route(), 10.0, 1.0, &RewardConfig::default()).unwrap();
    assert_eq!(d[6], 0.0);
}

/// Finite-difference mean acceleration and jerk, written out index by index.
fn fd_accel_jerk(p: &[Vec2], h: f64) -> (f64, f64) {
    let n = p.len();
    let v = |i: usize| ((p[i + 1].x - p[i].x).powi(2) + (p[i + 1].y - p[i].y).powi(2)).sqrt() / h;
    let a = |i: usize| (v(i + 1) - v(i)) / h;
    let mut sa = 0.0;
    for i in 0..n - 2 {
        sa += a(i);
    }
    let mut sj = 0.0;
    for i in 0..n - 3 {
        sj += (a(i + 1) - a(i)) / h;
    }
    (sa / (n - 2) as f64, sj / (n - 3) as f64)
}

#[test]
fn accel_and_jerk_match_independent_finite_differences() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let cfg = RewardConfig { accel_range: 1e6, jerk_range: 1e6, ..Default::default() };
    for _ in 0..100 {
        let n = rng.gen_range(4..30);
        let h = rng.gen_range(0.05..0.2);
        let mut p = Vec2::new(rng.gen_range(0.0..50.0), rng.gen_range(-2.0..2.0));
        let mut pts = vec![p];
        for _ in 1..n {
            p = p + Vec2::new(rng.gen_range(0.0..2.0), rng.gen_range(-0.3..0.3));
            pts.push(p);
        }
        let d = behavior_descriptor(&pts, h, &x_route(), 1.0, 1.0, &cfg).unwrap();
        let (a, j) = fd_accel_jerk(&pts, h);
        assert!((d[0] - (a + 1e6) / 2e6).abs() < 1e-6);
        assert!((d[1] - (j + 1e6) / 2e6).abs() < 1e-6);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(RewardConfig::default().validate().is_ok());
    assert!(RewardConfig { ttc_max: 0.0, ..Default::default() }.validate().is_err());
    assert!(RewardConfig { rc_weight: -1.0, ..Default::default() }.validate().is_err());
}

fn descriptor() -> impl Strategy<Value = Descriptor> {
    proptest::array::uniform8(0.0f64..=1.0)
}

proptest! {
    #[test]
    fn diversity_is_nonnegative_and_symmetric(mut ds in proptest::collection::vec(descriptor(), 2..8), rot in 0usize..8) {
        let (d, _) = diversity_reward(&ds);
        prop_assert!(d >= 0.0);
        let k = rot % ds.len();
        ds.rotate_left(k);
        ds.reverse();
        prop_assert!((diversity_reward(&ds).0 - d).abs() < 1e-12);
    }

    #[test]
    fn identical_descriptors_have_zero_diversity(d in descriptor(), n in 2usize..6) {
        prop_assert!(diversity_reward(&vec![d; n]).0.abs() < 1e-12);
    }

    #[test]
    fn descriptor_components_stay_in_unit_interval(
        steps in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..25),
        ttc in 0.0f64..100.0,
        light in -1.0f64..2.0,
    ) {
        let mut p = Vec2::new(10.0, 0.0);
        let mut pts = vec![p];
        for (dx, dy) in steps {
            p = p + Vec2::new(dx, dy);
            pts.push(p);
        }
        let d = behavior_descriptor(&pts, 0.1, &x_route(), ttc, light, &RewardConfig::default()).unwrap();
        prop_assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn ttc_penalty_is_nonincreasing(a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(ttc_penalty(hi, 3.0) <= ttc_penalty(lo, 3.0));
    }
}
