//! Stage orchestration: run directories, checkpoints, prerequisites and the
//! ablation matrix.
//!
//! Every stage writes into its own run directory `<stage>-<hash>-<unix secs>`
//! under the output root, where `<hash>` is a prefix of the SHA-256 of the
//! resolved config snapshot and seed. On success the stage records the
//! directory in `latest/<stage>` so later stages can find it.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::eval::{
    ablation_table, run_suite, svg_bar_chart, AblationRow, AblationSpec, EvalError, PlannerPolicy, SuiteResult,
    SuiteSummary,
};
use crate::grad::GradError;
use crate::grpo::{rl_train, PlannerRewards, RlConfig, RlError, RlRow};
use crate::metrics::{io_sink, MetricsError, MetricsSink};
use crate::model::{Model, ModelError};
use crate::rewards::RewardConfig;
use crate::rng::{derive_seed, RNG_SCHEME};
use crate::rollout::RolloutConfig;
use crate::train::{evaluate_state, pretrain, sft_train, PretrainRow, SftConfig, SftRow, TrainError};
use crate::world::{generate_clips, write_dataset, Dataset, LoggedClip, WorldError};

pub const OUT_ENV: &str = "LATENTPLAY_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const RUN_INFO: &str = "run.toml";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const PLANNERS: &str = "planners.toml";
pub const EPISODES: &str = "episodes.csv";
pub const SUMMARY: &str = "summary.csv";
pub const STATE_EVAL: &str = "state_eval.csv";
pub const ABLATION_TABLE: &str = "ablation.csv";
pub const ABLATION_SEEDS: &str = "ablation_seeds.csv";
pub const ABLATION_CHART: &str = "ablation.svg";
const LATEST: &str = "latest";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl PipelineError {
    /// Process exit status: 2 config, 3 prerequisite, 4 numerical, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Prerequisite(_) => 3,
            Self::Numerical(_)
            | Self::Rl(RlError::TooManySkipped { .. })
            | Self::Rl(RlError::Grad(GradError::NonFiniteGradient(_)))
            | Self::Train(TrainError::Grad(GradError::NonFiniteGradient(_))) => 4,
            _ => 1,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    Pretrain,
    Sft,
    Rl,
    Eval,
    Ablate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::GenData, Stage::Pretrain, Stage::Sft, Stage::Rl, Stage::Eval, Stage::Ablate, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::Rl => "rl",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
            Stage::Report => "report",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }
}

/// Where a stage writes, plus the inputs it consumed.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunInfo {
    stage: String,
    run_id: String,
    config_hash: String,
    seed: String,
    rng: String,
    created_unix: u64,
    inputs: BTreeMap<String, String>,
}

/// Hex SHA-256 of the config snapshot and seed.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(cfg.to_toml().as_bytes());
    h.update(cfg.seed.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Creates `<out>/<stage>-<hash12>-<secs>` and writes the config snapshot and
/// run info into it.
pub fn create_run_dir(
    out: &Path,
    stage: Stage,
    cfg: &RunConfig,
    inputs: BTreeMap<String, String>,
) -> Result<RunDir, PipelineError> {
    let hash = config_hash(cfg);
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let base = format!("{}-{}-{secs}", stage.name(), &hash[..12]);
    fs::create_dir_all(out).map_err(io_err(format!("creating {}", out.display())))?;
    let mut id = base.clone();
    let mut n = 1;
    let path = loop {
        let p = out.join(&id);
        match fs::create_dir(&p) {
            Ok(()) => break p,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                n += 1;
                id = format!("{base}-{n}");
            }
            Err(e) => return Err(io_err(format!("creating {}", p.display()))(e)),
        }
    };
    fs::write(path.join(CONFIG_SNAPSHOT), cfg.to_toml()).map_err(io_err("writing config snapshot"))?;
    let info = RunInfo {
        stage: stage.name().into(),
        run_id: id.clone(),
        config_hash: hash,
        seed: cfg.seed.to_string(),
        rng: RNG_SCHEME.into(),
        created_unix: secs,
        inputs,
    };
    let text = toml::to_string(&info).expect("run info serializes");
    fs::write(path.join(RUN_INFO), text).map_err(io_err("writing run info"))?;
    Ok(RunDir { id, path })
}

fn mark_latest(out: &Path, stage: Stage, run: &RunDir) -> Result<(), PipelineError> {
    let dir = out.join(LATEST);
    fs::create_dir_all(&dir).map_err(io_err("creating latest pointers"))?;
    fs::write(dir.join(stage.name()), &run.id).map_err(io_err("writing latest pointer"))
}

/// The most recent successful run of `stage` under `out`.
pub fn latest_run(out: &Path, stage: Stage) -> Option<PathBuf> {
    let id = fs::read_to_string(out.join(LATEST).join(stage.name())).ok()?;
    let p = out.join(id.trim());
    p.is_dir().then_some(p)
}

/// Seed streams used by the stages, all derived from one master seed.
pub fn model_seed(seed: u64) -> u64 {
    derive_seed(seed, "model/init")
}

pub fn eval_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.suite.seeds_per_clip).map(|k| derive_seed(cfg.seed, &format!("eval/{k}"))).collect()
}

pub fn ablation_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.ablation.seeds).map(|k| derive_seed(cfg.seed, &format!("ablation/{k}"))).collect()
}

pub fn new_model(cfg: &RunConfig) -> Result<Model, PipelineError> {
    Ok(Model::new(cfg.model.clone(), cfg.tokenizer.clone(), model_seed(cfg.seed))?)
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(format!("creating {}", path.display())))?);
    model.save(&mut w)?;
    w.flush().map_err(io_err("writing checkpoint"))
}

pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model, PipelineError> {
    let mut model = new_model(cfg)?;
    let f = fs::File::open(path).map_err(|_| PipelineError::Prerequisite(format!("checkpoint {} is missing", path.display())))?;
    model.load(&mut BufReader::new(f))?;
    Ok(model)
}

/// Rejects parameters that went non-finite during training.
pub fn check_finite(model: &Model) -> Result<(), PipelineError> {
    match model.store.named().find(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
        Some((name, _)) => Err(PipelineError::Numerical(format!("parameter {name} is not finite"))),
        None => Ok(()),
    }
}

/// Accepts a run directory or a checkpoint file.
fn checkpoint_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT)
    } else {
        p.to_path_buf()
    }
}

fn require_checkpoint(
    explicit: Option<&PathBuf>,
    out: &Path,
    producers: &[Stage],
    key: &str,
) -> Result<PathBuf, PipelineError> {
    let path = match explicit {
        Some(p) => checkpoint_file(p),
        None => {
            let found = producers.iter().find_map(|s| latest_run(out, *s));
            let names: Vec<&str> = producers.iter().map(|s| s.name()).collect();
            let run = found.ok_or_else(|| {
                PipelineError::Prerequisite(format!(
                    "no {} checkpoint under {}; run the `{}` stage first or set `{key}`",
                    names.join(" or "),
                    out.display(),
                    names[0]
                ))
            })?;
            run.join(CHECKPOINT)
        }
    };
    if !path.is_file() {
        return Err(PipelineError::Prerequisite(format!("checkpoint {} does not exist (`{key}`)", path.display())));
    }
    Ok(path)
}

/// Train and eval splits of a `gen-data` run.
pub struct Splits {
    pub dir: PathBuf,
    pub train: Vec<LoggedClip>,
    pub eval: Vec<LoggedClip>,
}

pub fn load_splits(cfg: &RunConfig, out: &Path) -> Result<Splits, PipelineError> {
    let dir = match &cfg.data.dir {
        Some(d) => d.clone(),
        None => latest_run(out, Stage::GenData).ok_or_else(|| {
            PipelineError::Prerequisite(format!(
                "no dataset under {}; run the `gen-data` stage first or set `data.dir`",
                out.display()
            ))
        })?,
    };
    let load = |split: &str| -> Result<Vec<LoggedClip>, PipelineError> {
        let p = dir.join(split);
        if !p.join(crate::world::MANIFEST_FILE).is_file() {
            return Err(PipelineError::Prerequisite(format!("dataset split {} is missing", p.display())));
        }
        Ok(Dataset::load(&p)?.clips)
    };
    Ok(Splits { train: load("train")?, eval: load("eval")?, dir })
}

/// Everything one training configuration changes relative to the base config.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub sft_rollout: RolloutConfig,
    pub sft: SftConfig,
    pub rl_rollout: RolloutConfig,
    pub reward: RewardConfig,
    pub rl: Option<RlConfig>,
}

impl Variant {
    /// The base config as written.
    pub fn plain(cfg: &RunConfig) -> Self {
        Self {
            sft_rollout: cfg.rollout.clone(),
            sft: cfg.sft.clone(),
            rl_rollout: cfg.rollout.clone(),
            reward: cfg.reward.clone(),
            rl: Some(cfg.rl.clone()),
        }
    }

    /// The base config with one ablation row's toggles applied.
    pub fn from_spec(cfg: &RunConfig, spec: &AblationSpec) -> Self {
        let rollout = RolloutConfig { n_reactive: spec.n_reactive, shared_planner: !spec.multi_planner, ..cfg.rollout.clone() };
        let mut sft = cfg.sft.clone();
        sft.terms.ego = spec.sft_ego;
        sft.terms.reactive = spec.sft_reactive;
        sft.terms.background = spec.sft_background;
        let mut reward = cfg.reward.clone();
        if !spec.reward_global {
            reward.global_weight = 0.0;
        }
        if !spec.reward_vehicle {
            reward.rc_weight = 0.0;
            reward.ttc_weight = 0.0;
            reward.progress_weight = 0.0;
        }
        if !spec.reward_diversity {
            reward.diversity_weight = 0.0;
        }
        Self {
            sft_rollout: RolloutConfig { horizon: if spec.sft_rollout { rollout.horizon } else { 1 }, ..rollout.clone() },
            sft,
            rl_rollout: rollout,
            reward,
            rl: spec.rl.then(|| cfg.rl.clone()),
        }
    }

    /// Identifies the SFT half so identical SFT runs can be shared.
    fn sft_key(&self) -> String {
        format!("{:?}|{:?}", self.sft_rollout, self.sft)
    }
}

pub struct Trained {
    pub model: Model,
    pub planners: Option<PlannerRewards>,
}

/// Optional metrics destinations for [`train_variant`].
#[derive(Default)]
pub struct VariantSinks<'a> {
    pub sft: Option<&'a mut MetricsSink>,
    pub rl: Option<&'a mut MetricsSink>,
}

pub fn run_sft(
    model: &mut Model,
    clips: &[LoggedClip],
    v: &Variant,
    seed: u64,
    sink: Option<&mut MetricsSink>,
) -> Result<(), PipelineError> {
    let seed = derive_seed(seed, "sft");
    match sink {
        Some(s) => sft_train(model, clips, &v.sft_rollout, &v.sft, seed, &mut io_sink::<SftRow>(s))?,
        None => sft_train(model, clips, &v.sft_rollout, &v.sft, seed, &mut |_| Ok(()))?,
    };
    check_finite(model)
}

pub fn run_rl(
    model: &mut Model,
    clips: &[LoggedClip],
    v: &Variant,
    rl: &RlConfig,
    seed: u64,
    workers: usize,
    sink: Option<&mut MetricsSink>,
) -> Result<PlannerRewards, PipelineError> {
    let seed = derive_seed(seed, "rl");
    let out = match sink {
        Some(s) => rl_train(model, clips, &v.rl_rollout, &v.reward, rl, seed, workers, &mut io_sink::<RlRow>(s))?,
        None => rl_train(model, clips, &v.rl_rollout, &v.reward, rl, seed, workers, &mut |_| Ok(()))?,
    };
    check_finite(model)?;
    Ok(out.planners)
}

/// SFT then, if enabled, RL, starting from a copy of `base`.
pub fn train_variant(
    base: &Model,
    clips: &[LoggedClip],
    v: &Variant,
    seed: u64,
    workers: usize,
    sinks: VariantSinks,
) -> Result<Trained, PipelineError> {
    let mut model = base.clone();
    run_sft(&mut model, clips, v, seed, sinks.sft)?;
    finish_variant(model, clips, v, seed, workers, sinks.rl)
}

fn finish_variant(
    mut model: Model,
    clips: &[LoggedClip],
    v: &Variant,
    seed: u64,
    workers: usize,
    sink: Option<&mut MetricsSink>,
) -> Result<Trained, PipelineError> {
    let planners = match &v.rl {
        Some(rl) => Some(run_rl(&mut model, clips, v, rl, seed, workers, sink)?),
        None => None,
    };
    Ok(Trained { model, planners })
}

/// The ego planner used at evaluation: forced by config, else the one with the
/// best running reward, else the ego planner.
pub fn pick_planner(cfg: &RunConfig, planners: Option<&PlannerRewards>) -> usize {
    cfg.suite.planner.or_else(|| planners.map(PlannerRewards::best)).unwrap_or(0)
}

pub fn evaluate(
    cfg: &RunConfig,
    model: &Model,
    planner: usize,
    clips: &[LoggedClip],
) -> Result<SuiteResult, PipelineError> {
    let policy = PlannerPolicy { model, planner };
    Ok(run_suite(&policy, clips, &eval_seeds(cfg), &cfg.eval, cfg.workers)?)
}

/// Writes per-episode rows and the one-row summary into `dir`.
pub fn write_suite(dir: &Path, suite: &SuiteResult) -> Result<(), PipelineError> {
    let mut eps = MetricsSink::for_rows::<crate::eval::EpisodeRow>(&dir.join(EPISODES))?;
    for r in &suite.rows {
        eps.write(r)?;
    }
    MetricsSink::for_rows::<SuiteSummary>(&dir.join(SUMMARY))?.write(&suite.summary)?;
    Ok(())
}

/// Outcome of one completed stage, for the caller to print.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub dir: PathBuf,
    pub lines: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn run_stage(stage: Stage, cfg: &RunConfig, out: &Path) -> Result<StageReport, PipelineError> {
    match stage {
        Stage::GenData => gen_data(cfg, out),
        Stage::Pretrain => pretrain_stage(cfg, out),
        Stage::Sft => sft_stage(cfg, out),
        Stage::Rl => rl_stage(cfg, out),
        Stage::Eval => eval_stage(cfg, out),
        Stage::Ablate => ablate_stage(cfg, out),
        Stage::Report => crate::report::report_stage(cfg, out, &[]),
    }
}

fn inputs(pairs: &[(&str, &Path)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, p)| (k.to_string(), p.display().to_string())).collect()
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<StageReport, PipelineError> {
    let run = create_run_dir(out, Stage::GenData, cfg, BTreeMap::new())?;
    let mut lines = Vec::new();
    for (split, count) in [("train", cfg.data.train_clips), ("eval", cfg.data.eval_clips)] {
        let seed = derive_seed(cfg.seed, &format!("data/{split}"));
        let clips = generate_clips(count, seed, &cfg.data.kinds, &cfg.scenario, &cfg.expert, cfg.workers)?;
        write_dataset(&run.path.join(split), &clips, seed, &cfg.scenario, &cfg.expert)?;
        lines.push(format!("{split}: {} clips", clips.len()));
    }
    mark_latest(out, Stage::GenData, &run)?;
    Ok(StageReport { dir: run.path, lines, warnings: Vec::new() })
}

fn pretrain_stage(cfg: &RunConfig, out: &Path) -> Result<StageReport, PipelineError> {
    let data = load_splits(cfg, out)?;
    let run = create_run_dir(out, Stage::Pretrain, cfg, inputs(&[("data", &data.dir)]))?;
    let mut model = new_model(cfg)?;
    let before = evaluate_state(&model, &data.eval, cfg.pretrain.step_dt)?;
    let mut sink = MetricsSink::for_rows::<PretrainRow>(&run.path.join(METRICS))?;
    let outcome = pretrain(&mut model, &data.train, &cfg.pretrain, derive_seed(cfg.seed, "pretrain"), &mut io_sink(&mut sink))?;
    check_finite(&model)?;
    let after = evaluate_state(&model, &data.eval, cfg.pretrain.step_dt)?;
    let mut st = MetricsSink::create(&run.path.join(STATE_EVAL), &["when", "frames", "dyn_l1", "ms_accuracy", "ts_accuracy"])?;
    for (when, e) in [("init", &before), ("final", &after)] {
        st.write_fields(&[
            when.into(),
            e.frames.to_string(),
            e.dyn_l1.to_string(),
            e.ms_accuracy.to_string(),
            e.ts_accuracy.to_string(),
        ])?;
    }
    save_model(&model, &run.path.join(CHECKPOINT))?;
    mark_latest(out, Stage::Pretrain, &run)?;
    let mut warnings = Vec::new();
    if outcome.skipped > 0 {
        warnings.push(format!("{} optimizer steps skipped for non-finite gradients", outcome.skipped));
    }
    Ok(StageReport {
        dir: run.path,
        lines: vec![
            format!("{} steps, {} parameters", outcome.steps, model.num_params()),
            format!("held-out dyn l1 {:.4} -> {:.4}", before.dyn_l1, after.dyn_l1),
            format!("held-out map-segment accuracy {:.3} -> {:.3}", before.ms_accuracy, after.ms_accuracy),
        ],
        warnings,
    })
}

fn sft_stage(cfg: &RunConfig, out: &Path) -> Result<StageReport, PipelineError> {
    let ckpt = require_checkpoint(cfg.checkpoints.pretrain.as_ref(), out, &[Stage::Pretrain], "checkpoints.pretrain")?;
    let data = load_splits(cfg, out)?;
    let mut model = load_model(cfg, &ckpt)?;
    let run = create_run_dir(out, Stage::Sft, cfg, inputs(&[("data", &data.dir), ("checkpoint", &ckpt)]))?;
    let mut sink = MetricsSink::for_rows::<SftRow>(&run.path.join(METRICS))?;
    run_sft(&mut model, &data.train, &Variant::plain(cfg), cfg.seed, Some(&mut sink))?;
    save_model(&model, &run.path.join(CHECKPOINT))?;
    mark_latest(out, Stage::Sft, &run)?;
    Ok(StageReport { dir: run.path, lines: vec![format!("{} logged steps", sink.rows_written())], warnings: Vec::new() })
}

fn rl_stage(cfg: &RunConfig, out: &Path) -> Result<StageReport, PipelineError> {
    let ckpt = require_checkpoint(cfg.checkpoints.sft.as_ref(), out, &[Stage::Sft], "checkpoints.sft")?;
    let data = load_splits(cfg, out)?;
    let mut model = load_model(cfg, &ckpt)?;
    let run = create_run_dir(out, Stage::Rl, cfg, inputs(&[("data", &data.dir), ("checkpoint", &ckpt)]))?;
    let mut sink = MetricsSink::for_rows::<RlRow>(&run.path.join(METRICS))?;
    let planners = run_rl(&mut model, &data.train, &Variant::plain(cfg), &cfg.rl, cfg.seed, cfg.workers, Some(&mut sink))?;
    save_model(&model, &run.path.join(CHECKPOINT))?;
    fs::write(run.path.join(PLANNERS), toml::to_string(&planners).expect("planner stats serialize"))
        .map_err(io_err("writing planner stats"))?;
    mark_latest(out, Stage::Rl, &run)?;
    Ok(StageReport {
        dir: run.path,
        lines: vec![format!("{} logged steps, best ego planner {}", sink.rows_written(), planners.best())],
        warnings: Vec::new(),
    })
}

fn read_planners(ckpt: &Path) -> Option<PlannerRewards> {
    let text = fs::read_to_string(ckpt.parent()?.join(PLANNERS)).ok()?;
    toml::from_str(&text).ok()
}

fn eval_stage(cfg: &RunConfig, out: &Path) -> Result<StageReport, PipelineError> {
    let ckpt = require_checkpoint(cfg.checkpoints.eval.as_ref(), out, &[Stage::Rl, Stage::Sft], "checkpoints.eval")?;
    let data = load_splits(cfg, out)?;
    let model = load_model(cfg, &ckpt)?;
    let planner = pick_planner(cfg, read_planners(&ckpt).as_ref());
    let run = create_run_dir(out, Stage::Eval, cfg, inputs(&[("data", &data.dir), ("checkpoint", &ckpt)]))?;
    let suite = evaluate(cfg, &model, planner, &data.eval)?;
    write_suite(&run.path, &suite)?;
    mark_latest(out, Stage::Eval, &run)?;
    let s = &suite.summary;
    let mut warnings = Vec::new();
    if s.numerical_failures > 0 {
        warnings.push(format!("{} episodes hit non-finite model output", s.numerical_failures));
    }
    Ok(StageReport {
        dir: run.path,
        lines: vec![format!(
            "planner {planner}: {} episodes, success {:.3}, score {:.2} ± {:.2}",
            s.episodes, s.success_rate, s.score_mean, s.score_std
        )],
        warnings,
    })
}

/// Per-seed and pooled results of an ablation matrix.
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub seeds: Vec<u64>,
    /// `[seed][row]`
    pub per_seed: Vec<Vec<AblationRow>>,
    /// Every row's episodes pooled over seeds.
    pub pooled: Vec<AblationRow>,
    pub baseline: usize,
}

impl AblationOutcome {
    pub fn table(&self) -> String {
        ablation_table(&self.pooled, self.baseline)
    }

    /// One line per (seed, row), with deltas against the same seed's baseline.
    pub fn seed_table(&self) -> String {
        let mut out = String::new();
        for (i, (seed, rows)) in self.seeds.iter().zip(&self.per_seed).enumerate() {
            let t = ablation_table(rows, self.baseline);
            let mut lines = t.lines();
            let header = lines.next().unwrap_or_default();
            if i == 0 {
                out.push_str(&format!("seed,{header}\n"));
            }
            for l in lines {
                out.push_str(&format!("{seed},{l}\n"));
            }
        }
        out
    }

    pub fn row(&self, name: &str) -> Option<usize> {
        self.pooled.iter().position(|r| r.name == name)
    }
}

/// Trains every row of `rows` from `pretrained` for each seed and evaluates it
/// on `eval`. Rows with identical SFT settings share the SFT result within a
/// seed. A failing row is recorded and the rest continue. With `out` set, each
/// (row, seed) writes its metrics and episodes under `out/<row>/seed<k>/`.
pub fn run_ablation(
    cfg: &RunConfig,
    rows: &[AblationSpec],
    pretrained: &Model,
    train: &[LoggedClip],
    eval: &[LoggedClip],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<AblationOutcome, PipelineError> {
    let baseline = rows.iter().position(|r| r.name == cfg.ablation.baseline).unwrap_or(0);
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut pooled_eps: Vec<Result<Vec<crate::eval::EpisodeResult>, String>> = vec![Ok(Vec::new()); rows.len()];
    for (k, &seed) in seeds.iter().enumerate() {
        let mut sft_cache: BTreeMap<String, Model> = BTreeMap::new();
        let mut seed_rows = Vec::with_capacity(rows.len());
        for (ri, spec) in rows.iter().enumerate() {
            let dir = out.map(|o| o.join(&spec.name).join(format!("seed{k}")));
            let result = ablation_cell(cfg, spec, pretrained, train, eval, seed, dir.as_deref(), &mut sft_cache);
            let outcome = match result {
                Ok(suite) => {
                    if let Ok(eps) = &mut pooled_eps[ri] {
                        eps.extend(suite.rows.iter().map(|r| r.result.clone()));
                    }
                    Ok(suite.summary)
                }
                Err(e) => {
                    pooled_eps[ri] = Err(format!("seed {seed}: {e}"));
                    Err(e.to_string())
                }
            };
            seed_rows.push(AblationRow { name: spec.name.clone(), outcome });
        }
        per_seed.push(seed_rows);
    }
    let pooled = rows
        .iter()
        .zip(pooled_eps)
        .map(|(spec, eps)| AblationRow { name: spec.name.clone(), outcome: eps.map(|e| SuiteSummary::from_results(&e)) })
        .collect();
    Ok(AblationOutcome { seeds: seeds.to_vec(), per_seed, pooled, baseline })
}

#[allow(clippy::too_many_arguments)]
fn ablation_cell(
    cfg: &RunConfig,
    spec: &AblationSpec,
    pretrained: &Model,
    train: &[LoggedClip],
    eval: &[LoggedClip],
    seed: u64,
    dir: Option<&Path>,
    sft_cache: &mut BTreeMap<String, Model>,
) -> Result<SuiteResult, PipelineError> {
    spec.validate()?;
    let v = Variant::from_spec(cfg, spec);
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(io_err(format!("creating {}", d.display())))?;
    }
    let key = v.sft_key();
    let model = match sft_cache.get(&key) {
        Some(m) => m.clone(),
        None => {
            let mut m = pretrained.clone();
            let mut sink = dir.map(|d| MetricsSink::for_rows::<SftRow>(&d.join("sft_metrics.csv"))).transpose()?;
            run_sft(&mut m, train, &v, seed, sink.as_mut())?;
            sft_cache.insert(key, m.clone());
            m
        }
    };
    let mut sink = match (dir, v.rl.is_some()) {
        (Some(d), true) => Some(MetricsSink::for_rows::<RlRow>(&d.join("rl_metrics.csv"))?),
        _ => None,
    };
    let trained = finish_variant(model, train, &v, seed, cfg.workers, sink.as_mut())?;
    let planner = pick_planner(cfg, trained.planners.as_ref());
    let suite = evaluate(cfg, &trained.model, planner, eval)?;
    if let Some(d) = dir {
        write_suite(d, &suite)?;
    }
    Ok(suite)
}

fn ablate_stage(cfg: &RunConfig, out: &Path) -> Result<StageReport, PipelineError> {
    if cfg.ablation.rows.is_empty() {
        return Err(ConfigError::Invalid { key: "ablation.rows".into(), message: "no rows to run".into() }.into());
    }
    let ckpt = require_checkpoint(cfg.checkpoints.pretrain.as_ref(), out, &[Stage::Pretrain], "checkpoints.pretrain")?;
    let data = load_splits(cfg, out)?;
    let pretrained = load_model(cfg, &ckpt)?;
    let run = create_run_dir(out, Stage::Ablate, cfg, inputs(&[("data", &data.dir), ("checkpoint", &ckpt)]))?;
    let res = run_ablation(
        cfg,
        &cfg.ablation.rows,
        &pretrained,
        &data.train,
        &data.eval,
        &ablation_seeds(cfg),
        Some(&run.path.join("rows")),
    )?;
    let write = |name: &str, text: String| fs::write(run.path.join(name), text).map_err(io_err(format!("writing {name}")));
    write(ABLATION_TABLE, res.table())?;
    write(ABLATION_SEEDS, res.seed_table())?;
    write(ABLATION_CHART, svg_bar_chart(&res.pooled))?;
    mark_latest(out, Stage::Ablate, &run)?;
    let failed: Vec<String> = res
        .per_seed
        .iter()
        .zip(&res.seeds)
        .flat_map(|(rows, s)| rows.iter().filter_map(move |r| r.outcome.as_ref().err().map(|e| format!("{} (seed {s}): {e}", r.name))))
        .collect();
    let lines = res
        .pooled
        .iter()
        .map(|r| match &r.outcome {
            Ok(s) => format!("{:<16} success {:.3} score {:.2}", r.name, s.success_rate, s.score_mean),
            Err(_) => format!("{:<16} failed", r.name),
        })
        .collect();
    Ok(StageReport { dir: run.path, lines, warnings: failed })
}
