//! Learned linear constraint model and the action-projection filter.
//!
//! Each constraint `c_j` gets a small network `g_j(x)` so that
//! `c_j(x') ~ c_j(x) + g_j(x)' a` for one step under joint action `a`. The
//! filter projects a proposed joint action onto the set where every predicted
//! constraint stays non-positive, either strictly (hard) or with penalized
//! slack (soft).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvConfig};
use crate::error::{check_len, Error, Result};
use crate::nn::{adam_step, Activation, AdamState, BackwardMode, Mlp};
use crate::qp::{build_hard_projection, build_soft_projection, extract_action, solve_qp, ProjectionSpec, QpStatus};

/// Quadratic weight on the slack block of the soft projection.
pub const SLACK_REG: f64 = 1e-6;
/// Feasibility tolerance handed to the QP solver.
pub const QP_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub episode: usize,
    pub step: usize,
    pub joint_state: Vec<f64>,
    pub joint_action: Vec<f64>,
    pub constraint_values: Vec<f64>,
    pub next_constraint_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Rolls out `n_episodes` full episodes under a uniform random policy and
/// records every step.
pub fn collect_dataset<R: Rng + ?Sized>(
    config: &EnvConfig,
    n_episodes: usize,
    rng: &mut R,
) -> Result<Dataset> {
    config.validate()?;
    if n_episodes == 0 {
        return Err(Error::config("dataset_episodes", "must be at least 1"));
    }
    let dim = config.joint_action_dim();
    let mut records = Vec::with_capacity(n_episodes * config.episode_length);
    for episode in 0..n_episodes {
        let mut state = env::reset(config, rng);
        for step in 0..config.episode_length {
            let action: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let joint_state = env::joint_observation(&state)?;
            let constraint_values = env::constraint_values(&state, config);
            let outcome = env::step(&state, &action, config, rng)?;
            let next_constraint_values = env::constraint_values(&outcome.state, config);
            records.push(Record {
                episode,
                step,
                joint_state,
                joint_action: action,
                constraint_values,
                next_constraint_values,
            });
            state = outcome.state;
        }
    }
    Ok(Dataset { records })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub hidden_units: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            hidden_units: 10,
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 256,
            holdout_fraction: 0.1,
        }
    }
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 {
            return Err(Error::config("sensitivity_hidden_units", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("sensitivity_batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("sensitivity_learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("sensitivity_holdout_fraction", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// One network per constraint, each mapping the joint observation to one
/// sensitivity entry per joint action dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityModel {
    pub networks: Vec<Mlp>,
}

impl SensitivityModel {
    pub fn new<R: Rng + ?Sized>(
        n_constraints: usize,
        state_dim: usize,
        action_dim: usize,
        hidden_units: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let networks = (0..n_constraints)
            .map(|_| {
                Mlp::new(
                    &[state_dim, hidden_units, action_dim],
                    Activation::Relu,
                    Activation::Identity,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(SensitivityModel { networks })
    }

    pub fn zeros(n_constraints: usize, state_dim: usize, action_dim: usize, hidden_units: usize) -> Result<Self> {
        let networks = (0..n_constraints)
            .map(|_| {
                Mlp::zeros(
                    &[state_dim, hidden_units, action_dim],
                    Activation::Relu,
                    Activation::Identity,
                )
            })
            .collect::<Result<_>>()?;
        Ok(SensitivityModel { networks })
    }

    pub fn for_env<R: Rng + ?Sized>(config: &EnvConfig, hidden_units: usize, rng: &mut R) -> Result<Self> {
        Self::new(
            config.n_constraints(),
            config.joint_obs_dim(),
            config.joint_action_dim(),
            hidden_units,
            rng,
        )
    }

    pub fn n_constraints(&self) -> usize {
        self.networks.len()
    }

    pub fn action_dim(&self) -> usize {
        self.networks.first().map_or(0, Mlp::output_dim)
    }

    /// `g_j(x)` for every constraint.
    pub fn sensitivities(&self, joint_state: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.networks.iter().map(|net| net.forward(joint_state)).collect()
    }

    /// Writes one checkpoint per constraint plus `manifest.txt` into `dir`.
    pub fn save(&self, dir: &Path, pairs: &[(usize, usize)]) -> Result<()> {
        check_len("sensitivity manifest pairs", self.n_constraints(), pairs.len())?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("sensitivity-model 1\nconstraints {}\n", self.n_constraints());
        for (j, (net, (a, b))) in self.networks.iter().zip(pairs).enumerate() {
            let file = format!("constraint_{j}.mlp");
            net.save(&dir.join(&file))?;
            manifest.push_str(&format!("{j} {a} {b} {file}\n"));
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    /// Loads a model written by [`SensitivityModel::save`]; returns the
    /// constraint pairs listed in the manifest alongside.
    pub fn load(dir: &Path) -> Result<(Self, Vec<(usize, usize)>)> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let mut lines = text.lines();
        if lines.next() != Some("sensitivity-model 1") {
            return Err(bad("unknown manifest header"));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("constraints "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing constraint count"))?;
        let mut networks = Vec::with_capacity(count);
        let mut pairs = Vec::with_capacity(count);
        for j in 0..count {
            let line = lines.next().ok_or_else(|| bad("truncated manifest"))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 || fields[0].parse::<usize>().ok() != Some(j) {
                return Err(bad(&format!("malformed entry `{line}`")));
            }
            let a = fields[1].parse().map_err(|_| bad("bad pair index"))?;
            let b = fields[2].parse().map_err(|_| bad("bad pair index"))?;
            networks.push(Mlp::load(&dir.join(fields[3]))?);
            pairs.push((a, b));
        }
        Ok((SensitivityModel { networks }, pairs))
    }
}

/// `c_j(x) + g_j(x)' a`.
pub fn predict_constraint(
    model: &SensitivityModel,
    j: usize,
    joint_state: &[f64],
    constraint_values: &[f64],
    joint_action: &[f64],
) -> Result<f64> {
    let net = model.networks.get(j).ok_or(Error::IndexOutOfRange {
        index: j,
        len: model.n_constraints(),
    })?;
    check_len("constraint values", model.n_constraints(), constraint_values.len())?;
    check_len("joint action", net.output_dim(), joint_action.len())?;
    let g = net.forward(joint_state)?;
    Ok(constraint_values[j] + g.iter().zip(joint_action).map(|(a, b)| a * b).sum::<f64>())
}

#[derive(Debug, Clone)]
pub struct SensitivityTraining {
    pub model: SensitivityModel,
    /// Per constraint: mean squared one-step residual on the training split
    /// before training (entry 0) and after every epoch.
    pub loss_history: Vec<Vec<f64>>,
    /// Per constraint: mean squared residual on the training split at the end.
    pub train_residual: Vec<f64>,
    /// Per constraint: mean `|c_j(x) + g_j(x)'a - c_j(x')|` on the holdout split.
    pub holdout_error: Vec<f64>,
    pub n_train: usize,
    pub n_holdout: usize,
}

struct Packed {
    states: Vec<f64>,
    actions: Vec<f64>,
    /// `c_j(x') - c_j(x)`, record-major
    deltas: Vec<f64>,
    state_dim: usize,
    action_dim: usize,
    n_constraints: usize,
}

impl Packed {
    fn new(records: &[&Record]) -> Self {
        let first = records[0];
        let mut packed = Packed {
            states: Vec::with_capacity(records.len() * first.joint_state.len()),
            actions: Vec::with_capacity(records.len() * first.joint_action.len()),
            deltas: Vec::with_capacity(records.len() * first.constraint_values.len()),
            state_dim: first.joint_state.len(),
            action_dim: first.joint_action.len(),
            n_constraints: first.constraint_values.len(),
        };
        for r in records {
            packed.states.extend_from_slice(&r.joint_state);
            packed.actions.extend_from_slice(&r.joint_action);
            packed
                .deltas
                .extend(r.next_constraint_values.iter().zip(&r.constraint_values).map(|(n, c)| n - c));
        }
        packed
    }

    fn len(&self) -> usize {
        self.actions.len() / self.action_dim
    }

    /// Residuals `delta_j - g_j(x)'a` over all records.
    fn residuals(&self, net: &Mlp, j: usize) -> Result<Vec<f64>> {
        let n = self.len();
        let g = net.forward_batch(&self.states, n)?;
        Ok((0..n)
            .map(|s| {
                let pred: f64 = g[s * self.action_dim..(s + 1) * self.action_dim]
                    .iter()
                    .zip(&self.actions[s * self.action_dim..(s + 1) * self.action_dim])
                    .map(|(a, b)| a * b)
                    .sum();
                self.deltas[s * self.n_constraints + j] - pred
            })
            .collect())
    }

    fn mean_squared(&self, net: &Mlp, j: usize) -> Result<f64> {
        let r = self.residuals(net, j)?;
        Ok(r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64)
    }
}

/// Fits every constraint network separately by mini-batch Adam on the
/// squared one-step prediction residual.
pub fn train_sensitivity<R: Rng + ?Sized>(
    dataset: &Dataset,
    model_init: SensitivityModel,
    config: &SensitivityConfig,
    rng: &mut R,
) -> Result<SensitivityTraining> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = model_init.n_constraints();
    for r in &dataset.records {
        check_len("record constraint values", k, r.constraint_values.len())?;
        check_len("record next constraint values", k, r.next_constraint_values.len())?;
        check_len("record joint action", model_init.action_dim(), r.joint_action.len())?;
    }

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let n_holdout = ((dataset.len() as f64) * config.holdout_fraction).floor() as usize;
    let n_train = dataset.len() - n_holdout;
    if n_train == 0 {
        return Err(Error::EmptyDataset);
    }
    let (train_idx, holdout_idx) = order.split_at(n_train);
    let train_refs: Vec<&Record> = train_idx.iter().map(|&i| &dataset.records[i]).collect();
    let train = Packed::new(&train_refs);
    let holdout = if holdout_idx.is_empty() {
        None
    } else {
        let refs: Vec<&Record> = holdout_idx.iter().map(|&i| &dataset.records[i]).collect();
        Some(Packed::new(&refs))
    };
    let seeds: Vec<u64> = (0..k).map(|_| rng.gen()).collect();

    let results: Vec<(Mlp, Vec<f64>)> = model_init
        .networks
        .into_par_iter()
        .zip(seeds)
        .enumerate()
        .map(|(j, (net, seed))| fit_one(net, j, &train, config, seed))
        .collect::<Result<_>>()?;

    let mut networks = Vec::with_capacity(k);
    let mut loss_history = Vec::with_capacity(k);
    let mut train_residual = Vec::with_capacity(k);
    let mut holdout_error = Vec::with_capacity(k);
    for (j, (net, history)) in results.into_iter().enumerate() {
        train_residual.push(*history.last().expect("history holds the initial loss"));
        holdout_error.push(match &holdout {
            Some(h) => {
                let r = h.residuals(&net, j)?;
                r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64
            }
            None => f64::NAN,
        });
        loss_history.push(history);
        networks.push(net);
    }
    Ok(SensitivityTraining {
        model: SensitivityModel { networks },
        loss_history,
        train_residual,
        holdout_error,
        n_train,
        n_holdout,
    })
}

fn fit_one(
    mut net: Mlp,
    j: usize,
    data: &Packed,
    config: &SensitivityConfig,
    seed: u64,
) -> Result<(Mlp, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(&net, config.learning_rate);
    let n = data.len();
    let (sd, ad) = (data.state_dim, data.action_dim);
    let mut history = Vec::with_capacity(config.epochs + 1);
    history.push(data.mean_squared(&net, j)?);
    let mut order: Vec<usize> = (0..n).collect();
    let mut states = Vec::with_capacity(config.batch_size * sd);
    let mut upstream = Vec::with_capacity(config.batch_size * ad);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            states.clear();
            for &s in chunk {
                states.extend_from_slice(&data.states[s * sd..(s + 1) * sd]);
            }
            let tape = net.forward_tape(&states, chunk.len())?;
            let g = tape.output();
            upstream.clear();
            let scale = 2.0 / chunk.len() as f64;
            for (b, &s) in chunk.iter().enumerate() {
                let a = &data.actions[s * ad..(s + 1) * ad];
                let pred: f64 = g[b * ad..(b + 1) * ad].iter().zip(a).map(|(x, y)| x * y).sum();
                let resid = data.deltas[s * data.n_constraints + j] - pred;
                upstream.extend(a.iter().map(|v| -scale * resid * v));
            }
            let grads = net.backward_tape(&tape, &upstream, BackwardMode::Params)?;
            adam_step(&mut net, &grads, &mut adam)?;
        }
        history.push(data.mean_squared(&net, j)?);
    }
    Ok((net, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// No projection (plain MADDPG).
    #[serde(rename = "unconstrained", alias = "off")]
    Off,
    Hard,
    Soft,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Off, Strategy::Hard, Strategy::Soft];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Off => "unconstrained",
            Strategy::Hard => "hard",
            Strategy::Soft => "soft",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" | "unconstrained" => Ok(Strategy::Off),
            "hard" => Ok(Strategy::Hard),
            "soft" => Ok(Strategy::Soft),
            other => Err(Error::config(
                "strategy",
                format!("expected one of unconstrained, hard, soft; got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMode {
    pub strategy: Strategy,
    pub rho: f64,
    pub margin_tightening: f64,
}

impl ProjectionMode {
    pub fn new(strategy: Strategy) -> Self {
        ProjectionMode {
            strategy,
            rho: 1000.0,
            margin_tightening: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::config("rho", format!("must be positive, got {}", self.rho)));
        }
        if !(self.margin_tightening >= 0.0) || !self.margin_tightening.is_finite() {
            return Err(Error::config(
                "margin_tightening",
                format!("must be non-negative, got {}", self.margin_tightening),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub action: Vec<f64>,
    /// Soft mode only; zeros otherwise.
    pub slack: Vec<f64>,
    /// False when the hard problem had no solution and the clamped proposal
    /// was passed through unchanged.
    pub feasible: bool,
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Projects a proposed joint action onto the linearized safe set.
pub fn project(
    proposal: &[f64],
    joint_state: &[f64],
    constraint_values: &[f64],
    model: &SensitivityModel,
    mode: &ProjectionMode,
) -> Result<Projection> {
    mode.validate()?;
    let k = model.n_constraints();
    let clamped: Vec<f64> = proposal.iter().copied().map(clamp_unit).collect();
    if mode.strategy == Strategy::Off {
        return Ok(Projection {
            action: clamped,
            slack: vec![0.0; k],
            feasible: true,
        });
    }
    check_len("proposed action", model.action_dim(), proposal.len())?;
    check_len("constraint values", k, constraint_values.len())?;
    let spec = ProjectionSpec {
        proposed_action: clamped.clone(),
        constraint_sensitivities: model.sensitivities(joint_state)?,
        constraint_margins: constraint_values
            .iter()
            .map(|c| -c - mode.margin_tightening)
            .collect(),
        action_bound: 1.0,
        rho: mode.rho,
        slack_reg: SLACK_REG,
    };
    let n = proposal.len();
    match mode.strategy {
        Strategy::Hard => {
            let sol = solve_qp(&build_hard_projection(&spec)?, QP_TOLERANCE)?;
            if sol.status == QpStatus::Infeasible {
                return Ok(Projection {
                    action: clamped,
                    slack: vec![0.0; k],
                    feasible: false,
                });
            }
            let (action, _) = extract_action(&sol, n)?;
            Ok(Projection {
                action: action.into_iter().map(clamp_unit).collect(),
                slack: vec![0.0; k],
                feasible: true,
            })
        }
        Strategy::Soft => {
            let sol = solve_qp(&build_soft_projection(&spec)?, QP_TOLERANCE)?;
            let (action, slack) = extract_action(&sol, n)?;
            Ok(Projection {
                action: action.into_iter().map(clamp_unit).collect(),
                slack,
                feasible: true,
            })
        }
        Strategy::Off => unreachable!("handled above"),
    }
}
