//! Experiment runner: configuration, per-run CSV output, the strategy/case
//! grid and the aggregate summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, StressMode};
use crate::error::{Error, Result};
use crate::maddpg::{evaluate, train, AgentNets, EpisodeLog, TrainConfig};
use crate::safety::{
    collect_dataset, train_sensitivity, SensitivityConfig, SensitivityModel, Strategy,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub stress_case: StressMode,
    pub n_seeds: usize,
    pub seed_base: u64,
    pub episodes: usize,
    pub test_episodes: usize,
    pub output_dir: PathBuf,
    /// Episodes between actor/critic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub dataset_episodes: usize,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub sensitivity: SensitivityConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: Strategy::Soft,
            stress_case: StressMode::None,
            n_seeds: 3,
            seed_base: 0,
            episodes: 1500,
            test_episodes: 50,
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
            dataset_episodes: 1000,
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            sensitivity: SensitivityConfig::default(),
        }
    }
}

/// Flat key schema of the configuration file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    strategy: Option<String>,
    case: Option<String>,
    seeds: Option<usize>,
    seed_base: Option<u64>,
    episodes: Option<usize>,
    test_episodes: Option<usize>,
    output_dir: Option<PathBuf>,
    checkpoint_every: Option<usize>,

    n_agents: Option<usize>,
    dt: Option<f64>,
    damping: Option<f64>,
    mass: Option<f64>,
    arena_half_width: Option<f64>,
    collision_distance: Option<f64>,
    collision_penalty: Option<f64>,
    episode_length: Option<usize>,
    disturbance_half_width: Option<f64>,
    spawn_margin: Option<f64>,

    gamma: Option<f64>,
    tau: Option<f64>,
    batch_size: Option<usize>,
    actor_lr: Option<f64>,
    critic_lr: Option<f64>,
    noise_sigma_initial: Option<f64>,
    noise_sigma_final: Option<f64>,
    buffer_capacity: Option<usize>,
    update_every: Option<usize>,
    hidden_layers: Option<Vec<usize>>,
    rho: Option<f64>,
    margin_tightening: Option<f64>,

    dataset_episodes: Option<usize>,
    sensitivity_hidden_units: Option<usize>,
    sensitivity_epochs: Option<usize>,
    sensitivity_learning_rate: Option<f64>,
    sensitivity_batch_size: Option<usize>,
    sensitivity_holdout_fraction: Option<f64>,
}

macro_rules! apply {
    ($raw:ident, $target:expr, $($field:ident),+) => {
        $(if let Some(v) = $raw.$field { $target.$field = v; })+
    };
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let mut cfg = ExperimentConfig::default();
    if let Some(s) = &raw.strategy {
        cfg.strategy = s.parse()?;
    }
    if let Some(s) = &raw.case {
        cfg.stress_case = s.parse()?;
    }
    if let Some(v) = raw.seeds {
        cfg.n_seeds = v;
    }
    apply!(raw, cfg, seed_base, episodes, test_episodes, output_dir, checkpoint_every, dataset_episodes);
    apply!(
        raw,
        cfg.env,
        n_agents,
        dt,
        damping,
        mass,
        arena_half_width,
        collision_distance,
        collision_penalty,
        episode_length,
        disturbance_half_width,
        spawn_margin
    );
    apply!(
        raw,
        cfg.train,
        gamma,
        tau,
        batch_size,
        actor_lr,
        critic_lr,
        noise_sigma_initial,
        noise_sigma_final,
        buffer_capacity,
        update_every,
        hidden_layers
    );
    if let Some(v) = raw.rho {
        cfg.train.projection.rho = v;
    }
    if let Some(v) = raw.margin_tightening {
        cfg.train.projection.margin_tightening = v;
    }
    if let Some(v) = raw.sensitivity_hidden_units {
        cfg.sensitivity.hidden_units = v;
    }
    if let Some(v) = raw.sensitivity_epochs {
        cfg.sensitivity.epochs = v;
    }
    if let Some(v) = raw.sensitivity_learning_rate {
        cfg.sensitivity.learning_rate = v;
    }
    if let Some(v) = raw.sensitivity_batch_size {
        cfg.sensitivity.batch_size = v;
    }
    if let Some(v) = raw.sensitivity_holdout_fraction {
        cfg.sensitivity.holdout_fraction = v;
    }
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

impl ExperimentConfig {
    /// Propagates the top-level fields into the embedded configs.
    pub fn sync(&mut self) {
        self.env.stress_mode = self.stress_case;
        self.train.n_episodes = self.episodes;
        self.train.projection.strategy = self.strategy;
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::config("seeds", "must be at least 1"));
        }
        if self.episodes == 0 {
            return Err(Error::config("episodes", "must be at least 1"));
        }
        if self.test_episodes == 0 {
            return Err(Error::config("test_episodes", "must be at least 1"));
        }
        if self.dataset_episodes == 0 {
            return Err(Error::config("dataset_episodes", "must be at least 1"));
        }
        self.env.validate()?;
        self.train.validate()?;
        self.sensitivity.validate()
    }

    /// Copy retargeted at one strategy and stress case.
    pub fn for_cell(&self, strategy: Strategy, case: StressMode) -> Self {
        let mut cfg = self.clone();
        cfg.strategy = strategy;
        cfg.stress_case = case;
        cfg.sync();
        cfg
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_seeds as u64).map(move |k| self.seed_base + k)
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!("{}_{}_seed{}", self.strategy, self.stress_case, seed)
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "strategy = \"{}\"", self.strategy);
        let _ = writeln!(out, "case = \"{}\"", self.stress_case);
        let _ = writeln!(out, "seeds = {}", self.n_seeds);
        let _ = writeln!(out, "seed_base = {}", self.seed_base);
        let _ = writeln!(out, "episodes = {}", self.episodes);
        let _ = writeln!(out, "test_episodes = {}", self.test_episodes);
        let _ = writeln!(out, "output_dir = {:?}", self.output_dir.display().to_string());
        let _ = writeln!(out, "checkpoint_every = {}", self.checkpoint_every);
        let e = &self.env;
        let _ = writeln!(out, "n_agents = {}", e.n_agents);
        let _ = writeln!(out, "dt = {:?}", e.dt);
        let _ = writeln!(out, "damping = {:?}", e.damping);
        let _ = writeln!(out, "mass = {:?}", e.mass);
        let _ = writeln!(out, "arena_half_width = {:?}", e.arena_half_width);
        let _ = writeln!(out, "collision_distance = {:?}", e.collision_distance);
        let _ = writeln!(out, "collision_penalty = {:?}", e.collision_penalty);
        let _ = writeln!(out, "episode_length = {}", e.episode_length);
        let _ = writeln!(out, "disturbance_half_width = {:?}", e.disturbance_half_width);
        let _ = writeln!(out, "spawn_margin = {:?}", e.spawn_margin);
        let t = &self.train;
        let _ = writeln!(out, "gamma = {:?}", t.gamma);
        let _ = writeln!(out, "tau = {:?}", t.tau);
        let _ = writeln!(out, "batch_size = {}", t.batch_size);
        let _ = writeln!(out, "actor_lr = {:?}", t.actor_lr);
        let _ = writeln!(out, "critic_lr = {:?}", t.critic_lr);
        let _ = writeln!(out, "noise_sigma_initial = {:?}", t.noise_sigma_initial);
        let _ = writeln!(out, "noise_sigma_final = {:?}", t.noise_sigma_final);
        let _ = writeln!(out, "buffer_capacity = {}", t.buffer_capacity);
        let _ = writeln!(out, "update_every = {}", t.update_every);
        let _ = writeln!(out, "hidden_layers = {:?}", t.hidden_layers);
        let _ = writeln!(out, "rho = {:?}", t.projection.rho);
        let _ = writeln!(out, "margin_tightening = {:?}", t.projection.margin_tightening);
        let s = &self.sensitivity;
        let _ = writeln!(out, "dataset_episodes = {}", self.dataset_episodes);
        let _ = writeln!(out, "sensitivity_hidden_units = {}", s.hidden_units);
        let _ = writeln!(out, "sensitivity_epochs = {}", s.epochs);
        let _ = writeln!(out, "sensitivity_learning_rate = {:?}", s.learning_rate);
        let _ = writeln!(out, "sensitivity_batch_size = {}", s.batch_size);
        let _ = writeln!(out, "sensitivity_holdout_fraction = {:?}", s.holdout_fraction);
        out
    }

    /// Settings that determine the pre-trained sensitivity model of a case.
    fn sensitivity_fingerprint(&self) -> String {
        format!(
            "{:?}\n{:?}\ndataset_episodes={}\nseed_base={}\n",
            self.env, self.sensitivity, self.dataset_episodes, self.seed_base
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

/// One CSV row of `train.csv` / `test.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub phase: Phase,
    pub episode: usize,
    pub mean_reward: f64,
    pub collisions: usize,
    pub cumulative_collisions: usize,
    pub infeasible_steps: usize,
    pub mean_slack: f64,
}

impl MetricsRow {
    pub fn from_log(run_id: &str, phase: Phase, log: &EpisodeLog) -> Self {
        MetricsRow {
            run_id: run_id.to_string(),
            phase,
            episode: log.episode,
            mean_reward: log.mean_reward,
            collisions: log.collisions,
            cumulative_collisions: log.cumulative_collisions,
            infeasible_steps: log.infeasible_steps,
            mean_slack: log.mean_slack,
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Sensitivity report written next to the cached model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub n_train: usize,
    pub n_holdout: usize,
    pub first_loss: Vec<f64>,
    pub final_loss: Vec<f64>,
    pub holdout_error: Vec<f64>,
}

pub fn sensitivity_dir(output_dir: &Path, case: StressMode) -> PathBuf {
    output_dir.join(format!("sensitivity_{case}"))
}

/// Collects the random-policy dataset of the configured stress case and
/// trains the constraint networks, reusing a cached model when its settings
/// match.
pub fn pretrain(config: &ExperimentConfig) -> Result<(SensitivityModel, SensitivityReport)> {
    let dir = sensitivity_dir(&config.output_dir, config.stress_case);
    let fingerprint_path = dir.join("settings.txt");
    let report_path = dir.join("report.toml");
    let fingerprint = config.sensitivity_fingerprint();
    if fs::read_to_string(&fingerprint_path).ok().as_deref() == Some(fingerprint.as_str()) {
        if let (Ok((model, _)), Ok(text)) = (SensitivityModel::load(&dir), fs::read_to_string(&report_path)) {
            if let Ok(report) = toml::from_str(&text) {
                return Ok((model, report));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed_base);
    rng.set_stream(100 + config.stress_case as u64);
    let dataset = collect_dataset(&config.env, config.dataset_episodes, &mut rng)?;
    let init = SensitivityModel::for_env(&config.env, config.sensitivity.hidden_units, &mut rng)?;
    let trained = train_sensitivity(&dataset, init, &config.sensitivity, &mut rng)?;
    let report = SensitivityReport {
        n_train: trained.n_train,
        n_holdout: trained.n_holdout,
        first_loss: trained.loss_history.iter().map(|h| h[0]).collect(),
        final_loss: trained.train_residual.clone(),
        holdout_error: trained.holdout_error.clone(),
    };
    trained.model.save(&dir, &config.env.constraint_pairs())?;
    let text = toml::to_string(&report).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
    fs::write(&fingerprint_path, fingerprint).map_err(|e| Error::io(&fingerprint_path, e))?;
    Ok((trained.model, report))
}

fn save_agents(dir: &Path, agents: &[AgentNets], tag: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, a) in agents.iter().enumerate() {
        a.actor.save(&dir.join(format!("{tag}_agent{i}_actor.mlp")))?;
        a.critic.save(&dir.join(format!("{tag}_agent{i}_critic.mlp")))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: String,
    pub dir: PathBuf,
    pub train: Vec<MetricsRow>,
    pub test: Vec<MetricsRow>,
}

/// Trains and tests one seed of one cell and writes its directory.
pub fn run_single(config: &ExperimentConfig, seed: u64, model: Option<&SensitivityModel>) -> Result<RunResult> {
    let run_id = config.run_id(seed);
    let dir = config.output_dir.join(&run_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let snapshot = dir.join("config.toml");
    let mut text = config.to_toml();
    let _ = writeln!(text, "# run seed: {seed}");
    fs::write(&snapshot, text).map_err(|e| Error::io(&snapshot, e))?;

    let mut train_cfg = config.train.clone();
    train_cfg.seed = seed;
    let model = if config.strategy == Strategy::Off { None } else { model };
    let ckpt_dir = dir.join("checkpoints");
    let every = config.checkpoint_every;
    let outcome = train(&train_cfg, &config.env, model, |log, agents| {
        if every > 0 && (log.episode + 1) % every == 0 {
            save_agents(&ckpt_dir, agents, &format!("ep{}", log.episode + 1))?;
        }
        Ok(())
    })?;
    save_agents(&ckpt_dir, &outcome.agents, "final")?;

    let test_log = evaluate(
        &outcome.agents,
        &config.env,
        model,
        &train_cfg.projection,
        config.test_episodes,
        seed,
    )?;
    let train_rows: Vec<MetricsRow> = outcome
        .log
        .iter()
        .map(|l| MetricsRow::from_log(&run_id, Phase::Train, l))
        .collect();
    let test_rows: Vec<MetricsRow> = test_log
        .iter()
        .map(|l| MetricsRow::from_log(&run_id, Phase::Test, l))
        .collect();
    write_metrics(&dir.join("train.csv"), &train_rows)?;
    write_metrics(&dir.join("test.csv"), &test_rows)?;
    Ok(RunResult {
        run_id,
        dir,
        train: train_rows,
        test: test_rows,
    })
}

/// Runs every seed of the configured cell.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunResult>> {
    config.validate()?;
    let model = if config.strategy == Strategy::Off {
        None
    } else {
        Some(pretrain(config)?.0)
    };
    let seeds: Vec<u64> = config.seeds().collect();
    seeds
        .par_iter()
        .map(|&seed| run_single(config, seed, model.as_ref()))
        .collect()
}

/// Runs all strategies under every listed case, one worker per run.
pub fn run_grid(config: &ExperimentConfig, cases: &[StressMode]) -> Result<Vec<RunResult>> {
    config.validate()?;
    let models: Vec<(StressMode, SensitivityModel)> = cases
        .par_iter()
        .map(|&case| {
            let cell = config.for_cell(Strategy::Soft, case);
            pretrain(&cell).map(|(m, _)| (case, m))
        })
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for &case in cases {
        for strategy in Strategy::ALL {
            let cell = config.for_cell(strategy, case);
            for seed in cell.seeds() {
                jobs.push((cell.clone(), seed));
            }
        }
    }
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|(cell, seed)| {
            let model = models.iter().find(|(c, _)| *c == cell.stress_case).map(|(_, m)| m);
            run_single(cell, *seed, model)
        })
        .collect::<Result<_>>()?;
    let summary = summarize(&[config.output_dir.clone()])?;
    summary.write(&config.output_dir)?;
    Ok(results)
}

/// Reward window used for "total training reward".
pub const REWARD_WINDOW: usize = 100;

/// Per-run aggregate of the metric files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub run_id: String,
    pub strategy: Strategy,
    pub case: StressMode,
    pub seed: u64,
    pub train_reward: f64,
    pub train_collisions: usize,
    pub test_collisions: usize,
    pub train_infeasible_fraction: f64,
    pub test_infeasible_fraction: f64,
    pub first_decile_reward: f64,
    pub last_decile_reward: f64,
}

pub fn parse_run_id(run_id: &str) -> Option<(Strategy, StressMode, u64)> {
    let mut parts = run_id.rsplitn(3, '_');
    let seed = parts.next()?.strip_prefix("seed")?.parse().ok()?;
    let case = parts.next()?.parse().ok()?;
    let strategy = parts.next()?.parse().ok()?;
    Some((strategy, case, seed))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn infeasible_fraction(rows: &[MetricsRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.infeasible_steps > 0).count() as f64 / rows.len() as f64
}

pub fn run_metrics(run_dir: &Path) -> Result<RunMetrics> {
    let name = run_dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Parse(format!("bad run directory {}", run_dir.display())))?;
    let (strategy, case, seed) =
        parse_run_id(name).ok_or_else(|| Error::Parse(format!("bad run id `{name}`")))?;
    let train = read_metrics(&run_dir.join("train.csv"))?;
    let test = read_metrics(&run_dir.join("test.csv"))?;
    if train.is_empty() {
        return Err(Error::Parse(format!("{name}: empty train.csv")));
    }
    let rewards: Vec<f64> = train.iter().map(|r| r.mean_reward).collect();
    let window = REWARD_WINDOW.min(rewards.len());
    let decile = (rewards.len() / 10).max(1);
    Ok(RunMetrics {
        run_id: name.to_string(),
        strategy,
        case,
        seed,
        train_reward: mean(&rewards[rewards.len() - window..]),
        train_collisions: train.last().map_or(0, |r| r.cumulative_collisions),
        test_collisions: test.last().map_or(0, |r| r.cumulative_collisions),
        train_infeasible_fraction: infeasible_fraction(&train),
        test_infeasible_fraction: infeasible_fraction(&test),
        first_decile_reward: mean(&rewards[..decile]),
        last_decile_reward: mean(&rewards[rewards.len() - decile..]),
    })
}

/// Runs found directly below each directory (those holding a train.csv).
pub fn collect_runs(dirs: &[PathBuf]) -> Result<Vec<RunMetrics>> {
    let mut runs = Vec::new();
    for dir in dirs {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("train.csv").is_file())
            .collect();
        paths.sort();
        for p in paths {
            runs.push(run_metrics(&p)?);
        }
    }
    runs.sort_by(|a, b| (a.case, a.strategy, a.seed).cmp(&(b.case, b.strategy, b.seed)));
    Ok(runs)
}

/// Mean and 95% half-width `1.96 s / sqrt(n)`; no half-width for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: Option<f64>,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let m = mean(samples);
        let half_width = (n > 1).then(|| {
            let var = samples.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        });
        Estimate { mean: m, half_width, n }
    }

    fn ci_text(&self) -> String {
        self.half_width.map_or_else(|| "n/a".to_string(), |h| format!("{h:.2}"))
    }
}

pub fn percent_of_baseline(value: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * value / baseline)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub strategy: Strategy,
    pub case: StressMode,
    pub train_reward: Estimate,
    pub train_collisions: Estimate,
    pub test_collisions: Estimate,
    pub test_collisions_total: usize,
    /// Mean training collisions relative to the unconstrained cell of the same case.
    pub percent_of_baseline: Option<f64>,
    pub infeasible_fraction: Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub cells: Vec<SummaryCell>,
    pub missing: Vec<(Strategy, StressMode)>,
}

pub fn summarize(dirs: &[PathBuf]) -> Result<Summary> {
    let runs = collect_runs(dirs)?;
    summarize_runs(&runs)
}

pub fn summarize_runs(runs: &[RunMetrics]) -> Result<Summary> {
    let mut groups: BTreeMap<(StressMode, Strategy), Vec<&RunMetrics>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.case, r.strategy)).or_default().push(r);
    }
    let mut cells = Vec::new();
    let mut missing = Vec::new();
    let cases: Vec<StressMode> = {
        let mut c: Vec<StressMode> = groups.keys().map(|k| k.0).collect();
        c.dedup();
        c
    };
    for case in cases {
        let baseline = groups
            .get(&(case, Strategy::Off))
            .map(|g| mean(&g.iter().map(|r| r.train_collisions as f64).collect::<Vec<_>>()));
        for strategy in Strategy::ALL {
            let Some(group) = groups.get(&(case, strategy)) else {
                missing.push((strategy, case));
                continue;
            };
            let pick = |f: &dyn Fn(&RunMetrics) -> f64| {
                Estimate::from_samples(&group.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let train_collisions = pick(&|r| r.train_collisions as f64);
            cells.push(SummaryCell {
                strategy,
                case,
                train_reward: pick(&|r| r.train_reward),
                percent_of_baseline: baseline.and_then(|b| percent_of_baseline(train_collisions.mean, b)),
                train_collisions,
                test_collisions: pick(&|r| r.test_collisions as f64),
                test_collisions_total: group.iter().map(|r| r.test_collisions).sum(),
                infeasible_fraction: pick(&|r| r.train_infeasible_fraction),
            });
        }
    }
    Ok(Summary { cells, missing })
}

impl Summary {
    pub fn cell(&self, strategy: Strategy, case: StressMode) -> Option<&SummaryCell> {
        self.cells.iter().find(|c| c.strategy == strategy && c.case == case)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "strategy",
            "case",
            "n_seeds",
            "train_reward_mean",
            "train_reward_ci95",
            "train_collisions_mean",
            "train_collisions_ci95",
            "percent_of_baseline",
            "test_collisions_mean",
            "test_collisions_ci95",
            "test_collisions_total",
            "infeasible_episode_fraction_mean",
            "infeasible_episode_fraction_ci95",
        ])?;
        let ci = |e: &Estimate| e.half_width.map_or_else(|| "n/a".to_string(), |h| h.to_string());
        for c in &self.cells {
            w.write_record([
                c.strategy.to_string(),
                c.case.to_string(),
                c.train_reward.n.to_string(),
                c.train_reward.mean.to_string(),
                ci(&c.train_reward),
                c.train_collisions.mean.to_string(),
                ci(&c.train_collisions),
                c.percent_of_baseline.map_or_else(|| "n/a".to_string(), |p| p.to_string()),
                c.test_collisions.mean.to_string(),
                ci(&c.test_collisions),
                c.test_collisions_total.to_string(),
                c.infeasible_fraction.mean.to_string(),
                ci(&c.infeasible_fraction),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:<5} {:>6} {:>22} {:>30} {:>24} {:>12}",
            "strategy", "case", "seeds", "train reward", "train collisions", "test collisions", "infeasible"
        );
        for c in &self.cells {
            let pct = c
                .percent_of_baseline
                .map_or_else(String::new, |p| format!(" ({p:.2}%)"));
            let _ = writeln!(
                out,
                "{:<14} {:<5} {:>6} {:>22} {:>30} {:>24} {:>12}",
                c.strategy.to_string(),
                c.case.to_string(),
                c.train_reward.n,
                format!("{:.2} ± {}", c.train_reward.mean, c.train_reward.ci_text()),
                format!("{:.1} ± {}{pct}", c.train_collisions.mean, c.train_collisions.ci_text()),
                format!("{:.1} ± {} [{}]", c.test_collisions.mean, c.test_collisions.ci_text(), c.test_collisions_total),
                format!("{:.1}%", 100.0 * c.infeasible_fraction.mean),
            );
        }
        for (s, case) in &self.missing {
            let _ = writeln!(out, "missing: {s} / {case}");
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("summary.csv");
        fs::write(&path, self.to_csv()?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("summary.txt");
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfeasibilityEntry {
    pub strategy: Strategy,
    pub case: StressMode,
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub n_runs: usize,
}

/// Fraction of episodes with at least one infeasible hard-projection step,
/// pooled over the runs of each cell.
pub fn infeasibility_report(dirs: &[PathBuf]) -> Result<Vec<InfeasibilityEntry>> {
    let runs = collect_runs(dirs)?;
    let mut groups: BTreeMap<(StressMode, Strategy), Vec<&RunMetrics>> = BTreeMap::new();
    for r in &runs {
        groups.entry((r.case, r.strategy)).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((case, strategy), g)| InfeasibilityEntry {
            strategy,
            case,
            train_fraction: mean(&g.iter().map(|r| r.train_infeasible_fraction).collect::<Vec<_>>()),
            test_fraction: mean(&g.iter().map(|r| r.test_infeasible_fraction).collect::<Vec<_>>()),
            n_runs: g.len(),
        })
        .collect())
}
