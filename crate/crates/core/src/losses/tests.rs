use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::geometry::{AgentKind, Vec2};
use crate::model::check_gradients;
use crate::rng::rng_from_seed;
use crate::rollout::{rollout, RolloutConfig};
use crate::testutil::tiny_model;
use crate::world::{route_coordinates, ScenarioKind};

fn state_pred(g: &mut Graph, dyn_: Vec<f64>, ms: Vec<f64>, ts: Vec<f64>) -> StatePrediction {
    StatePrediction {
        dyn_: g.leaf(Tensor::row(dyn_), true),
        ms_logits: g.leaf(Tensor::row(ms), true),
        ts_logits: g.leaf(Tensor::row(ts), true),
    }
}

fn target(ms: usize, ts: usize) -> StateTokens {
    StateTokens { dyn_: [0.1, -0.2, 0.0, 1.0, -0.5, 0.0], type_id: 0, ms_id: ms, ts_id: ts }
}

#[test]
fn state_loss_is_zero_at_exact_match() {
    let mut g = Graph::new();
    let t = target(1, 2);
    let mut ms = vec![-1e3; 4];
    ms[1] = 0.0;
    let mut ts = vec![-1e3; 4];
    ts[2] = 0.0;
    let p = state_pred(&mut g, t.dyn_.to_vec(), ms, ts);
    let (_, b) = state_loss(&mut g, &p, &[t], &PretrainLossConfig::default()).unwrap();
    assert!(b.total.abs() < 1e-12);
}

#[test]
fn state_loss_hand_case() {
    let mut g = Graph::new();
    let t = target(1, 2);
    let mut d = t.dyn_.to_vec();
    d[3] += 0.1;
    let mut ts = vec![-1e3; 4];
    ts[2] = 0.0;
    let p = state_pred(&mut g, d, vec![0.7; 4], ts);
    let (_, b) = state_loss(&mut g, &p, &[t], &PretrainLossConfig::default()).unwrap();
    assert!((b.total - (0.1 + 4f64.ln())).abs() < 1e-9, "{}", b.total);
    assert!((b.total - 1.48629).abs() < 1e-5);
}

#[test]
fn state_ce_is_shift_invariant() {
    let mut rng = rng_from_seed(1);
    for _ in 0..50 {
        let ms: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let ts: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let c = rng.gen_range(-50.0..50.0);
        let eval = |shift: f64| {
            let mut g = Graph::new();
            let p = state_pred(
                &mut g,
                vec![0.0; 6],
                ms.iter().map(|v| v + shift).collect(),
                ts.iter().map(|v| v + shift).collect(),
            );
            state_loss(&mut g, &p, &[target(3, 0)], &PretrainLossConfig::default()).unwrap().1
        };
        let (a, b) = (eval(0.0), eval(c));
        assert!((a.ms_ce - b.ms_ce).abs() < 1e-9 && (a.ts_ce - b.ts_ce).abs() < 1e-9);
    }
}

/// Planner outputs as free leaves: `modes` modes of `k` waypoints.
fn planner_vars(g: &mut Graph, mu: Vec<f64>, lv: Vec<f64>, wps: Vec<f64>, logits: Vec<f64>) -> PlannerVars {
    let mu = g.leaf(Tensor::row(mu), true);
    let logvar = g.leaf(Tensor::row(lv), true);
    PlannerVars {
        mu,
        logvar,
        u: mu,
        waypoints: g.leaf(Tensor::row(wps), true),
        mode_logits: g.leaf(Tensor::row(logits), true),
    }
}

fn straight_target(k: usize) -> Vec<Vec2> {
    (1..=k).map(|j| Vec2::new(j as f64, 0.0)).collect()
}

#[test]
fn planner_loss_is_zero_at_prior_and_exact_match() {
    let mut g = Graph::new();
    let tgt = straight_target(5);
    let mut wps = Vec::new();
    for m in 0..6 {
        for p in &tgt {
            wps.extend([p.x + m as f64, p.y]);
        }
    }
    let mut logits = vec![-1e3; 6];
    logits[0] = 0.0;
    let pv = planner_vars(&mut g, vec![0.0; 8], vec![0.0; 8], wps, logits);
    let ctx = PlannerContext { self_radius: 0.9, ..Default::default() };
    let (_, b) = planner_loss(&mut g, &pv, 0, &tgt, &ctx, &PlannerLossConfig::default()).unwrap();
    assert!(b.total.abs() < 1e-12, "{b:?}");
}

#[test]
fn kl_closed_form_per_dimension() {
    let mut g = Graph::new();
    let tgt = straight_target(5);
    let wps: Vec<f64> = (0..6).flat_map(|_| flat(&tgt)).collect();
    let pv = planner_vars(&mut g, vec![1.0; 8], vec![0.0; 8], wps, vec![0.0; 6]);
    let (_, b) = planner_loss(&mut g, &pv, 0, &tgt, &PlannerContext::default(), &PlannerLossConfig::default()).unwrap();
    assert!((b.kl - 0.5 * 8.0).abs() < 1e-12);
}

/// Clearance from disc A to disc B by sampling A's boundary.
fn sampled_clearance(ca: Vec2, ra: f64, cb: Vec2, rb: f64) -> f64 {
    (0..20_000)
        .map(|i| {
            let th = i as f64 / 20_000.0 * std::f64::consts::TAU;
            let p = ca + Vec2::from_angle(th) * ra;
            p.distance(cb) - rb
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn collision_hinge_matches_sampled_penetration() {
    let mut rng = rng_from_seed(2);
    let cfg = PlannerLossConfig { lambda_vae: 0.0, lambda_mse: 0.0, lambda_bd: 0.0, lambda_col: 1.0, ..Default::default() };
    for _ in 0..100 {
        let k = 5;
        let wps: Vec<f64> = (0..6 * 2 * k).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let exe = argmax(&logits);
        let pts: Vec<Vec2> = (0..k).map(|j| Vec2::new(wps[exe * 10 + 2 * j], wps[exe * 10 + 2 * j + 1])).collect();
        let ra = rng.gen_range(0.3..1.2);
        let mut obstacles = Vec::new();
        for _ in 0..rng.gen_range(0..4) {
            let w = rng.gen_range(0..k);
            let r = rng.gen_range(0.3..1.2);
            let mut c = Vec2::new(rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0));
            // Keep the other center outside this disc so boundary sampling sees the clearance.
            if c.distance(pts[w]) <= ra + 0.05 {
                c = pts[w] + Vec2::new(ra + 0.5, 0.0);
            }
            obstacles.push(Obstacle { waypoint: w, center: c, radius: r });
        }
        let ctx = PlannerContext { self_radius: ra, obstacles: obstacles.clone(), lanes: Vec::new() };
        let mut g = Graph::new();
        let pv = planner_vars(&mut g, vec![0.0; 8], vec![0.0; 8], wps.clone(), logits);
        let (_, b) = planner_loss(&mut g, &pv, 0, &straight_target(k), &ctx, &cfg).unwrap();
        let oracle: f64 = obstacles
            .iter()
            .map(|o| (cfg.collision_margin - sampled_clearance(pts[o.waypoint], ra, o.center, o.radius)).max(0.0))
            .sum();
        assert!((b.col - oracle).abs() < 1e-6, "{} vs {oracle}", b.col);
        assert!((collision_hinge(&pts, &ctx, cfg.collision_margin) - b.col).abs() < 1e-9);
    }
}

#[test]
fn lane_line_reproduces_route_lateral_offset() {
    let route = Route::new(vec![Vec2::new(-20.0, 0.0), Vec2::new(0.0, 0.0), Vec2::new(20.0, 10.0)], 1.75).unwrap();
    let mut rng = rng_from_seed(3);
    for _ in 0..200 {
        let frame = AgentState::with_kind(
            AgentKind::Car,
            Vec2::new(rng.gen_range(-20.0..20.0), rng.gen_range(-3.0..8.0)),
            rng.gen_range(-3.0..3.0),
            5.0,
            0.0,
        )
        .unwrap();
        let local = Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let world = frame.pose().to_world(local);
        let line = LaneLine::around(&route, world, &frame);
        let lat = line.normal.dot(local) + line.offset;
        assert!((lat - route_coordinates(&route, world).1).abs() < 1e-9);
    }
}

#[test]
fn boundary_hinge_counts_excursion_beyond_inset() {
    let mut g = Graph::new();
    let tgt = straight_target(5);
    let mut wps = Vec::new();
    for _ in 0..6 {
        for (j, p) in tgt.iter().enumerate() {
            wps.extend([p.x, if j == 4 { 2.0 } else { 0.0 }]);
        }
    }
    let pv = planner_vars(&mut g, vec![0.0; 8], vec![0.0; 8], wps, vec![0.0; 6]);
    let lanes = vec![LaneLine { normal: Vec2::new(0.0, 1.0), offset: 0.0, half_width: 1.75 }; 5];
    let ctx = PlannerContext { self_radius: 1.0, obstacles: Vec::new(), lanes };
    let (_, b) = planner_loss(&mut g, &pv, 0, &tgt, &ctx, &PlannerLossConfig::default()).unwrap();
    assert!((b.bd - (2.0 - 1.55)).abs() < 1e-12);
}

#[test]
fn motion_loss_cases() {
    let tgt = straight_target(5);
    let mut g = Graph::new();
    let p = g.leaf(Tensor::row(flat(&tgt)), true);
    let l = motion_loss(&mut g, p, &tgt).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let shifted: Vec<Vec2> = tgt.iter().map(|v| Vec2::new(v.x + 1.0, v.y)).collect();
    let p = g.leaf(Tensor::row(flat(&shifted)), true);
    let l = motion_loss(&mut g, p, &tgt).unwrap();
    assert!((g.value(l).item() - 1.0).abs() < 1e-12);
    assert!(matches!(motion_loss(&mut g, p, &tgt[..3]), Err(LossError::WaypointCount { .. })));
}

proptest! {
    #[test]
    fn planner_loss_is_non_negative(
        wps in prop::collection::vec(-10.0f64..10.0, 60),
        logits in prop::collection::vec(-3.0f64..3.0, 6),
        mu in prop::collection::vec(-2.0f64..2.0, 8),
        lv in prop::collection::vec(-8.0f64..4.0, 8),
        ox in -5.0f64..5.0, oy in -5.0f64..5.0,
    ) {
        let mut g = Graph::new();
        let pv = planner_vars(&mut g, mu, lv, wps, logits);
        let ctx = PlannerContext {
            self_radius: 0.9,
            obstacles: vec![Obstacle { waypoint: 2, center: Vec2::new(ox, oy), radius: 0.9 }],
            lanes: vec![LaneLine { normal: Vec2::new(0.0, 1.0), offset: 0.3, half_width: 1.75 }; 5],
        };
        let (_, b) = planner_loss(&mut g, &pv, 0, &straight_target(5), &ctx, &PlannerLossConfig::default()).unwrap();
        prop_assert!(b.total >= 0.0 && b.kl >= 0.0 && b.mse >= 0.0 && b.col >= 0.0 && b.bd >= 0.0);
    }
}

fn clip(seed: u64) -> LoggedClip {
    crate::testutil::clip(ScenarioKind::StraightFollow, seed)
}

#[test]
fn single_step_sft_loss_is_the_sum_of_agent_terms() {
    let m = tiny_model(4);
    let c = clip(4);
    let rc = RolloutConfig { horizon: 1, n_reactive: 1, ..Default::default() };
    let rec = rollout(&m, &c, 2.0, &rc, 0).unwrap();
    assert!(rec.agents.iter().any(|a| a.role == Role::Background));
    let cfg = PlannerLossConfig::default();
    let mut g = Graph::new();
    let (_, full) = sft_loss(&m, &mut g, &rec, &c, &cfg, &SftTerms::default()).unwrap();

    // Independent evaluation, one head call per agent.
    let step = &rec.steps[0];
    let mut expected = 0.0;
    for (i, a) in rec.agents.iter().enumerate() {
        let mut g = Graph::new();
        let z = m.encode(&mut g, &step.input).unwrap();
        let zi = g.slice_rows(z, i, i + 1).unwrap();
        let tgt = local_targets(&c, a.index, step.time, rec.step_dt, 5, &step.agents[i].start).unwrap();
        expected += match a.head {
            crate::model::Head::Planner(p) => {
                let pv = m.plan(&mut g, p, zi, None).unwrap();
                let ctx = step_context(&rec, 0, i, &c);
                planner_loss(&mut g, &pv, 0, &tgt, &ctx, &cfg).unwrap().1.total
            }
            crate::model::Head::Motion => {
                let mo = m.predict_motion(&mut g, zi).unwrap();
                let l = motion_loss(&mut g, mo, &tgt).unwrap();
                g.value(l).item()
            }
        };
    }
    assert!((full.total - expected).abs() < 1e-9 * expected.max(1.0), "{} vs {expected}", full.total);

    // Dropping a group removes exactly its terms.
    let mut g = Graph::new();
    let no_bg = SftTerms { background: false, ..Default::default() };
    let (_, part) = sft_loss(&m, &mut g, &rec, &c, &cfg, &no_bg).unwrap();
    assert!((full.total - part.total - full.motion).abs() < 1e-9);

    // Linear in the MSE weight.
    let mut g = Graph::new();
    let double = PlannerLossConfig { lambda_mse: 2.0, ..cfg.clone() };
    let (_, two) = sft_loss(&m, &mut g, &rec, &c, &double, &SftTerms::default()).unwrap();
    let mse_part = full.ego.mse + full.reactive.mse + cfg.mode_ce_weight * (full.ego.mode_ce + full.reactive.mode_ce);
    assert!((two.total - full.total - mse_part).abs() < 1e-9);
}

#[test]
fn sft_loss_matches_finite_differences() {
    let mut m = tiny_model(5);
    let c = clip(5);
    let rc = RolloutConfig { horizon: 2, n_reactive: 1, sample: true, ..Default::default() };
    let rec = rollout(&m, &c, 1.0, &rc, 3).unwrap();
    let cfg = PlannerLossConfig::default();
    let r = check_gradients::<LossError, _>(
        &mut m,
        |m, g| Ok(sft_loss(m, g, &rec, &c, &cfg, &SftTerms::default())?.0),
        40,
        1e-4,
        1e-8,
        1,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn pretrain_loss_matches_finite_differences_and_needs_future() {
    let mut m = tiny_model(6);
    let c = clip(6);
    let s = pretrain_sample(&m, &c, 3.0, 0.5).unwrap();
    assert_eq!(s.next.len(), s.input.rows);
    let cfg = PretrainLossConfig::default();
    let r = check_gradients::<LossError, _>(&mut m, |m, g| Ok(pretrain_loss(m, g, &s, &cfg)?.0), 40, 1e-4, 1e-8, 2)
        .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
    assert!(matches!(pretrain_sample(&m, &c, c.duration() - 0.2, 0.5), Err(LossError::MissingGroundTruth(_))));
}

#[test]
fn recovery_targets_cap_the_pull_toward_the_log() {
    let c = clip(12);
    let (t, dt, k) = (2.0, 0.5, 5);
    let logged = c.state_at(0, t);
    let exact = local_targets(&c, 0, t, dt, k, &logged).unwrap();
    assert_eq!(recovery_targets(&c, 0, t, dt, k, &logged, 1.0).unwrap(), exact);

    let mut behind = logged;
    behind.position = logged.position - Vec2::from_angle(logged.heading) * 10.0;
    let uncapped = recovery_targets(&c, 0, t, dt, k, &behind, f64::INFINITY).unwrap();
    assert_eq!(uncapped, local_targets(&c, 0, t, dt, k, &behind).unwrap());
    let capped = recovery_targets(&c, 0, t, dt, k, &behind, 1.0).unwrap();
    for (j, (p, m)) in capped.iter().zip(&exact).enumerate() {
        // Same heading, so the logged motion reads the same in both frames.
        let corr = *p - *m;
        assert!((corr.norm() - (j + 1) as f64 / k as f64).abs() < 1e-9);
        assert!(corr.x > 0.0);
    }
}
