use proptest::prelude::*;

use super::*;
use crate::testutil::{clip, tiny_model};
use crate::world::ScenarioKind;

/// Replays the ego's own log, then keeps driving along the route at 8 m/s.
struct LogFollower<'a> {
    clip: &'a LoggedClip,
    cfg: ModelConfig,
    tok: TokenizerConfig,
}

impl EgoPolicy for LogFollower<'_> {
    fn model_config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn tokenizer(&self) -> &TokenizerConfig {
        &self.tok
    }

    fn plan(&self, ctx: &EgoContext) -> Result<Vec<Vec2>, ModelError> {
        let k = self.cfg.waypoints_per_step;
        let pose = ctx.state.pose();
        let ego = self.clip.scenario.ego_index;
        let s = route_coordinates(ctx.route, ctx.state.position).0;
        Ok((1..=k)
            .map(|j| {
                let t = ctx.time + j as f64 * ctx.step_dt / k as f64;
                let p = if t <= self.clip.duration() {
                    self.clip.state_at(ego, t).position
                } else {
                    ctx.route.point_at(s + 8.0 * (t - ctx.time))
                };
                pose.to_local(p)
            })
            .collect())
    }
}

struct Constant {
    cfg: ModelConfig,
    tok: TokenizerConfig,
    value: f64,
}

impl EgoPolicy for Constant {
    fn model_config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn tokenizer(&self) -> &TokenizerConfig {
        &self.tok
    }

    fn plan(&self, _: &EgoContext) -> Result<Vec<Vec2>, ModelError> {
        Ok(vec![Vec2::new(self.value, 0.0); self.cfg.waypoints_per_step])
    }
}

fn follower(c: &LoggedClip) -> LogFollower<'_> {
    LogFollower { clip: c, cfg: ModelConfig::default(), tok: TokenizerConfig::default() }
}

#[test]
fn log_following_ego_succeeds_with_full_score() {
    for kind in ScenarioKind::ALL {
        let c = clip(kind, 21);
        let r = run_episode(&follower(&c), &c, 0, &EvalConfig::default()).unwrap();
        assert!(r.success, "{kind:?}: {r:?}");
        assert_eq!(r.score, 100.0, "{kind:?}: {r:?}");
    }
}

#[test]
fn stationary_ego_makes_no_progress() {
    let c = clip(ScenarioKind::StraightFollow, 2);
    let p = Constant { cfg: ModelConfig::default(), tok: TokenizerConfig::default(), value: 0.0 };
    let cfg = EvalConfig { timeout_s: 5.0, ..Default::default() };
    let r = run_episode(&p, &c, 0, &cfg).unwrap();
    assert!(r.route_completion < 1e-6);
    assert!(!r.success);
}

#[test]
fn non_finite_plans_fail_the_episode_with_a_flag() {
    let c = clip(ScenarioKind::Merge, 2);
    let p = Constant { cfg: ModelConfig::default(), tok: TokenizerConfig::default(), value: f64::NAN };
    let r = run_episode(&p, &c, 0, &EvalConfig::default()).unwrap();
    assert!(r.numerical_failure);
    assert!(!r.success);
    assert_eq!(r.score, 0.0);
}

#[test]
fn composed_score_by_hand() {
    let cfg = EvalConfig::default();
    assert!((composed_score(0.8, 1, 0, 0, &cfg) - 40.0).abs() < 1e-12);
    assert!((composed_score(1.0, 0, 1, 2, &cfg) - 100.0 * 0.7 * 0.64).abs() < 1e-12);
}

#[test]
fn suite_aggregates_and_reruns_identically() {
    let m = tiny_model(1);
    let clips = vec![clip(ScenarioKind::StraightFollow, 3), clip(ScenarioKind::IntersectionGiveway, 4)];
    let cfg = EvalConfig { timeout_s: 4.0, ..Default::default() };
    let p = PlannerPolicy { model: &m, planner: 0 };
    let a = run_suite(&p, &clips, &[0, 1], &cfg, 1).unwrap();
    let b = run_suite(&p, &clips, &[0, 1], &cfg, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 4);
    let successes = a.rows.iter().filter(|r| r.result.success).count();
    assert_eq!(a.summary.success_rate, successes as f64 / 4.0);

    let one = run_suite(&p, &clips[..1], &[0], &cfg, 1).unwrap();
    assert_eq!(one.summary.score_std, 0.0);
    assert!(matches!(run_suite(&p, &clips, &[], &cfg, 1), Err(EvalError::Empty)));
}

fn summary(score: f64, success: f64) -> SuiteSummary {
    SuiteSummary { episodes: 10, success_rate: success, score_mean: score, score_std: 1.0, ..Default::default() }
}

#[test]
fn ablation_table_deltas() {
    let rows = vec![
        AblationRow { name: "base".into(), outcome: Ok(summary(50.0, 0.5)) },
        AblationRow { name: "more".into(), outcome: Ok(summary(62.5, 0.7)) },
        AblationRow { name: "broken".into(), outcome: Err("diverged, badly".into()) },
    ];
    let t = ablation_table(&rows, 0);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].ends_with(",0,0"));
    let cols: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(cols[6].parse::<f64>().unwrap(), 12.5);
    assert!((cols[7].parse::<f64>().unwrap() - 0.2).abs() < 1e-12);
    assert!(lines[3].starts_with("broken,failed: diverged  badly"));
    assert_eq!(lines[3].split(',').count(), 8);

    let svg = svg_bar_chart(&rows);
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<rect").count(), 2);
}

#[test]
fn ablation_specs_validate() {
    assert!(AblationSpec::default().validate().is_ok());
    assert!(AblationSpec { n_reactive: 3, ..Default::default() }.validate().is_err());
    assert!(AblationSpec { name: "a b".into(), ..Default::default() }.validate().is_err());
}

proptest! {
    #[test]
    fn score_is_monotone_in_infractions(rc in 0.0f64..1.0, c in 0usize..4, r in 0usize..4, o in 0usize..4) {
        let cfg = EvalConfig::default();
        let s = composed_score(rc, c, r, o, &cfg);
        prop_assert!((0.0..=100.0).contains(&s));
        prop_assert!(composed_score(rc, c + 1, r, o, &cfg) <= s);
        prop_assert!(composed_score(rc, c, r + 1, o, &cfg) <= s);
        prop_assert!(composed_score(rc, c, r, o + 1, &cfg) <= s);
    }
}
