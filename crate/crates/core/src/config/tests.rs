use super::*;
use proptest::prelude::*;

#[test]
fn empty_file_gives_defaults() {
    let cfg = RunConfig::parse("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    cfg.validate().unwrap();
}

#[test]
fn defaults_round_trip() {
    let text = RunConfig::default().to_toml();
    assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
}

#[test]
fn overrides_beat_the_file_and_leave_it_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    let text = "seed = 9\n[rollout]\nhorizon = 6\nn_reactive = 2\n";
    fs::write(&path, text).unwrap();
    let cfg = RunConfig::resolve(Some(&path), &["rollout.T=4".into(), "reward.diversity_weight=0.5".into()]).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.rollout.horizon, 4);
    assert_eq!(cfg.rollout.n_reactive, 2);
    assert_eq!(cfg.reward.diversity_weight, 0.5);
    assert_eq!(fs::read_to_string(&path).unwrap(), text);
}

#[test]
fn string_and_list_overrides() {
    let cfg = RunConfig::resolve(
        None,
        &["ablation.baseline=full".into(), "data.kinds=[\"merge\"]".into(), "rollout.feeding=teacher_forced".into()],
    )
    .unwrap();
    assert_eq!(cfg.ablation.baseline, "full");
    assert_eq!(cfg.data.kinds, vec![ScenarioKind::Merge]);
    assert_eq!(cfg.rollout.feeding, crate::rollout::Feeding::TeacherForced);
}

#[test]
fn unknown_file_key_names_key_and_line() {
    let err = RunConfig::parse("seed = 1\n[rollout]\nhorizn = 4\n").unwrap_err().to_string();
    assert!(err.contains("horizn"), "{err}");
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn type_mismatch_names_key() {
    let err = RunConfig::parse("[rl]\nepochs = \"many\"\n").unwrap_err().to_string();
    assert!(err.contains("epochs") || err.contains("line 2"), "{err}");
}

#[test]
fn bad_overrides_name_the_key() {
    let err = RunConfig::resolve(None, &["rollout.nope=1".into()]).unwrap_err();
    assert!(matches!(&err, ConfigError::Override { key, .. } if key == "rollout.nope"), "{err}");
    let err = RunConfig::resolve(None, &["rl.epochs=abc".into()]).unwrap_err();
    assert!(matches!(&err, ConfigError::Override { key, .. } if key == "rl.epochs"), "{err}");
    let err = RunConfig::resolve(None, &["seed.x=1".into()]).unwrap_err();
    assert!(matches!(&err, ConfigError::Override { key, .. } if key == "seed.x"), "{err}");
    assert!(matches!(RunConfig::resolve(None, &["horizon".into()]), Err(ConfigError::OverrideSyntax(_))));
    assert!(matches!(RunConfig::resolve(None, &["a..b=1".into()]), Err(ConfigError::OverrideSyntax(_))));
}

#[test]
fn validation_names_the_section() {
    let err = RunConfig::resolve(None, &["rollout.stride_rate=3.0".into()]).unwrap_err();
    assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "rollout"), "{err}");
    let err = RunConfig::resolve(None, &["ablation.baseline=missing".into()]).unwrap_err();
    assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "ablation.baseline"), "{err}");
    let err = RunConfig::resolve(None, &["suite.planner=99".into()]).unwrap_err();
    assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "suite.planner"), "{err}");
}

#[test]
fn large_seeds_travel_as_strings() {
    let cfg = RunConfig { seed: u64::MAX, ..RunConfig::default() };
    let text = cfg.to_toml();
    assert!(text.contains(&format!("seed = \"{}\"", u64::MAX)));
    assert_eq!(RunConfig::parse(&text).unwrap().seed, u64::MAX);
    assert!(RunConfig::parse("seed = -1").is_err());
}

#[test]
fn missing_config_file_is_a_read_error() {
    let err = RunConfig::resolve(Some(Path::new("/nonexistent/run.toml")), &[]).unwrap_err();
    assert!(matches!(err, ConfigError::Read { .. }));
}

fn fuzzed_config() -> impl Strategy<Value = RunConfig> {
    (
        (any::<u64>(), 1usize..8, 1usize..500, 1usize..500, proptest::sample::subsequence(ScenarioKind::ALL.to_vec(), 1..=3)),
        (1usize..20, prop::sample::select(vec![1.0, 2.0, 4.0]), 0usize..9, 2usize..65, any::<bool>(), 0.0f64..1.0),
        (1e-6f64..1e-2, 0usize..50, 0.0f64..2.0, 0.0f64..5.0, 0.1f64..10.0),
        (1usize..10, "[a-z][a-z0-9_]{0,10}", any::<bool>(), proptest::option::of(0usize..5), proptest::option::of("[a-z/]{1,20}")),
    )
        .prop_map(|(a, b, c, d)| {
            let mut cfg = RunConfig::default();
            (cfg.seed, cfg.workers, cfg.data.train_clips, cfg.data.eval_clips, cfg.data.kinds) = a;
            (cfg.rollout.horizon, cfg.rollout.stride_rate, cfg.rollout.n_reactive, cfg.rollout.group_size) = (b.0, b.1, b.2, b.3);
            cfg.rollout.shared_planner = b.4;
            cfg.rollout.mixing_epsilon = b.5;
            cfg.rl.optimizer.lr = c.0;
            cfg.rl.optimizer.warmup_steps = c.1;
            cfg.reward.diversity_weight = c.2;
            cfg.reward.ttc_max = c.3 + 0.1;
            cfg.eval.timeout_s = c.4 * 10.0;
            cfg.sft.epochs = d.0;
            cfg.ablation.rows[0].name = d.1.clone();
            cfg.ablation.baseline = d.1;
            cfg.ablation.rows[1].multi_planner = d.2;
            cfg.suite.planner = d.3;
            cfg.data.dir = d.4.map(PathBuf::from);
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fuzzed_files_round_trip(cfg in fuzzed_config()) {
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml(), text);
    }
}
