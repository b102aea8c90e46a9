//! Two-dimensional particle world: `N` point agents with double-integrator
//! dynamics, one target landmark each, and pairwise collision constraints.
//!
//! Constraint `j` enumerates ordered agent pairs `(i, k)`, `i != k`, in
//! lexicographic order; for three agents that is
//! `(0,1) (0,2) (1,0) (1,2) (2,0) (2,1)`. Each entry is
//! `collision_distance - |p_i - p_k|`, satisfied when `<= 0`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

/// Per-agent action dimension (planar acceleration).
pub const ACTION_DIM: usize = 2;
/// Per-agent observation length for the three-agent world.
pub const OBS_DIM: usize = 10;

/// Observation length for `n_agents` agents: position, velocity, one
/// displacement per other agent, displacement to target.
pub fn obs_dim(n_agents: usize) -> usize {
    4 + 2 * (n_agents - 1) + 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StressMode {
    None,
    /// Uniform position disturbance after every step.
    Ed,
    /// Unsafe initialization: no separation enforced at reset.
    Ui,
}

impl fmt::Display for StressMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StressMode::None => "none",
            StressMode::Ed => "ed",
            StressMode::Ui => "ui",
        })
    }
}

impl FromStr for StressMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(StressMode::None),
            "ed" => Ok(StressMode::Ed),
            "ui" => Ok(StressMode::Ui),
            other => Err(Error::config("case", format!("unknown stress case `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_agents: usize,
    pub dt: f64,
    pub damping: f64,
    pub mass: f64,
    pub arena_half_width: f64,
    pub collision_distance: f64,
    pub collision_penalty: f64,
    pub episode_length: usize,
    pub disturbance_half_width: f64,
    /// Extra clearance required between agents by the safe reset.
    pub spawn_margin: f64,
    pub stress_mode: StressMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            n_agents: 3,
            dt: 0.1,
            damping: 0.25,
            mass: 1.0,
            arena_half_width: 1.0,
            collision_distance: 0.3,
            collision_penalty: 1.0,
            episode_length: 25,
            disturbance_half_width: 0.05,
            spawn_margin: 0.05,
            stress_mode: StressMode::None,
        }
    }
}

impl EnvConfig {
    pub fn with_stress(mut self, mode: StressMode) -> Self {
        self.stress_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive, got {v}")))
            }
        };
        if self.n_agents < 2 {
            return Err(Error::config("n_agents", "need at least two agents"));
        }
        positive("dt", self.dt)?;
        positive("mass", self.mass)?;
        positive("arena_half_width", self.arena_half_width)?;
        positive("collision_distance", self.collision_distance)?;
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::config("damping", format!("must lie in [0, 1), got {}", self.damping)));
        }
        if self.collision_distance >= self.arena_half_width {
            return Err(Error::config(
                "collision_distance",
                "must be smaller than arena_half_width",
            ));
        }
        if self.collision_penalty < 0.0 {
            return Err(Error::config("collision_penalty", "must be non-negative"));
        }
        if self.disturbance_half_width < 0.0 {
            return Err(Error::config("disturbance_half_width", "must be non-negative"));
        }
        if self.spawn_margin < 0.0 {
            return Err(Error::config("spawn_margin", "must be non-negative"));
        }
        if self.episode_length == 0 {
            return Err(Error::config("episode_length", "must be at least 1"));
        }
        Ok(())
    }

    /// Number of pairwise constraints, `N (N - 1)`.
    pub fn n_constraints(&self) -> usize {
        self.n_agents * (self.n_agents - 1)
    }

    pub fn joint_action_dim(&self) -> usize {
        self.n_agents * ACTION_DIM
    }

    pub fn joint_obs_dim(&self) -> usize {
        self.n_agents * obs_dim(self.n_agents)
    }

    /// Ordered pairs `(i, k)` in constraint order.
    pub fn constraint_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n_agents;
        (0..n)
            .flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| (i, k)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub targets: Vec<Vec2>,
    pub step_index: usize,
}

impl WorldState {
    pub fn n_agents(&self) -> usize {
        self.positions.len()
    }
}

/// One recorded environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub joint_state: Vec<f64>,
    pub joint_action: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_joint_state: Vec<f64>,
    pub constraint_values: Vec<f64>,
    pub next_constraint_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: WorldState,
    pub rewards: Vec<f64>,
    pub collisions: usize,
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn uniform_point<R: Rng + ?Sized>(half_width: f64, rng: &mut R) -> Vec2 {
    [
        rng.gen_range(-half_width..=half_width),
        rng.gen_range(-half_width..=half_width),
    ]
}

const RESET_ATTEMPTS: usize = 100;

/// Fresh episode: targets uniform in the arena, agents at rest. Outside the
/// unsafe-initialization mode agents are resampled until every pair is at
/// least `collision_distance + spawn_margin` apart; after
/// [`RESET_ATTEMPTS`] failures they are placed on a fixed circle.
pub fn reset<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> WorldState {
    let n = config.n_agents;
    let w = config.arena_half_width;
    let targets: Vec<Vec2> = (0..n).map(|_| uniform_point(w, rng)).collect();
    let clearance = config.collision_distance + config.spawn_margin;

    let positions = if config.stress_mode == StressMode::Ui {
        (0..n).map(|_| uniform_point(w, rng)).collect()
    } else {
        let mut placed = None;
        for _ in 0..RESET_ATTEMPTS {
            let candidate: Vec<Vec2> = (0..n).map(|_| uniform_point(w, rng)).collect();
            let separated = (0..n).all(|i| {
                (i + 1..n).all(|k| dist(candidate[i], candidate[k]) >= clearance)
            });
            if separated {
                placed = Some(candidate);
                break;
            }
        }
        placed.unwrap_or_else(|| fallback_positions(config))
    };

    WorldState {
        positions,
        velocities: vec![[0.0, 0.0]; n],
        targets,
        step_index: 0,
    }
}

fn fallback_positions(config: &EnvConfig) -> Vec<Vec2> {
    let n = config.n_agents;
    let radius = 0.75 * config.arena_half_width;
    (0..n)
        .map(|i| {
            let angle = std::f64::consts::TAU * i as f64 / n as f64;
            [radius * angle.cos(), radius * angle.sin()]
        })
        .collect()
}

/// Advances the world by one step under `joint_action` (agent-major, two
/// entries per agent, each in `[-1, 1]`).
pub fn step<R: Rng + ?Sized>(
    state: &WorldState,
    joint_action: &[f64],
    config: &EnvConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    let n = state.n_agents();
    crate::error::check_len("joint action", n * ACTION_DIM, joint_action.len())?;
    if let Some((index, &value)) = joint_action
        .iter()
        .enumerate()
        .find(|(_, a)| !(-1.0..=1.0).contains(*a))
    {
        return Err(Error::ActionOutOfRange { index, value });
    }
    if state.step_index >= config.episode_length {
        return Err(Error::EpisodeFinished(state.step_index));
    }

    let w = config.arena_half_width;
    let mut next = state.clone();
    for i in 0..n {
        for d in 0..2 {
            let accel = joint_action[i * ACTION_DIM + d] / config.mass;
            let v = (1.0 - config.damping) * state.velocities[i][d] + accel * config.dt;
            next.velocities[i][d] = v;
            next.positions[i][d] = state.positions[i][d] + v * config.dt;
        }
    }
    if config.stress_mode == StressMode::Ed && config.disturbance_half_width > 0.0 {
        let h = config.disturbance_half_width;
        for p in &mut next.positions {
            p[0] += rng.gen_range(-h..=h);
            p[1] += rng.gen_range(-h..=h);
        }
    }
    for (p, v) in next.positions.iter_mut().zip(next.velocities.iter_mut()) {
        for d in 0..2 {
            if p[d] > w {
                p[d] = w;
                v[d] = 0.0;
            } else if p[d] < -w {
                p[d] = -w;
                v[d] = 0.0;
            }
        }
    }
    next.step_index += 1;

    let rewards = rewards(&next, config);
    let collisions = count_collisions(&next, config);
    Ok(StepOutcome {
        state: next,
        rewards,
        collisions,
    })
}

/// Per-agent reward: negative L1 distance to the own target minus the
/// collision penalty for every agent currently within `collision_distance`.
pub fn rewards(state: &WorldState, config: &EnvConfig) -> Vec<f64> {
    let n = state.n_agents();
    (0..n)
        .map(|i| {
            let p = state.positions[i];
            let t = state.targets[i];
            let l1 = (p[0] - t[0]).abs() + (p[1] - t[1]).abs();
            let touching = (0..n)
                .filter(|&k| k != i && dist(p, state.positions[k]) < config.collision_distance)
                .count();
            -l1 - config.collision_penalty * touching as f64
        })
        .collect()
}

/// Local observation of one agent: own position, own velocity, displacement
/// to every other agent in index order, displacement to own target.
pub fn observe(state: &WorldState, agent: usize) -> Result<Vec<f64>> {
    let n = state.n_agents();
    if agent >= n {
        return Err(Error::IndexOutOfRange { index: agent, len: n });
    }
    let p = state.positions[agent];
    let v = state.velocities[agent];
    let t = state.targets[agent];
    let mut obs = Vec::with_capacity(obs_dim(n));
    obs.extend_from_slice(&[p[0], p[1], v[0], v[1]]);
    for k in (0..n).filter(|&k| k != agent) {
        let q = state.positions[k];
        obs.extend_from_slice(&[q[0] - p[0], q[1] - p[1]]);
    }
    obs.extend_from_slice(&[t[0] - p[0], t[1] - p[1]]);
    Ok(obs)
}

/// Concatenated observations of all agents, agent-major.
pub fn joint_observation(state: &WorldState) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(state.n_agents() * obs_dim(state.n_agents()));
    for i in 0..state.n_agents() {
        out.extend_from_slice(&observe(state, i)?);
    }
    Ok(out)
}

pub fn constraint_values(state: &WorldState, config: &EnvConfig) -> Vec<f64> {
    config
        .constraint_pairs()
        .into_iter()
        .map(|(i, k)| config.collision_distance - dist(state.positions[i], state.positions[k]))
        .collect()
}

/// Unordered pairs closer than `collision_distance`.
pub fn count_collisions(state: &WorldState, config: &EnvConfig) -> usize {
    let n = state.n_agents();
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |k| (i, k)))
        .filter(|&(i, k)| dist(state.positions[i], state.positions[k]) < config.collision_distance)
        .count()
}

/// One row of an episode trace export.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub episode: usize,
    pub step: usize,
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub constraint_values: Vec<f64>,
    pub collisions: usize,
    pub stress_mode: StressMode,
}

/// Writes trace rows as CSV. Columns: `episode,step`, then per agent
/// `pos_x,pos_y,vel_x,vel_y,act_x,act_y,reward` (suffixed with the agent
/// index), then `c0..c{K-1}`, `collisions`, `stress_mode`.
pub fn write_trace<W: Write>(out: W, n_agents: usize, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["episode".to_string(), "step".to_string()];
    for i in 0..n_agents {
        for f in ["pos_x", "pos_y", "vel_x", "vel_y", "act_x", "act_y", "reward"] {
            header.push(format!("{f}{i}"));
        }
    }
    for j in 0..n_agents * (n_agents - 1) {
        header.push(format!("c{j}"));
    }
    header.push("collisions".into());
    header.push("stress_mode".into());
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.episode.to_string(), row.step.to_string()];
        for i in 0..n_agents {
            let p = row.positions[i];
            let v = row.velocities[i];
            for x in [
                p[0],
                p[1],
                v[0],
                v[1],
                row.actions[2 * i],
                row.actions[2 * i + 1],
                row.rewards[i],
            ] {
                rec.push(x.to_string());
            }
        }
        rec.extend(row.constraint_values.iter().map(|c| c.to_string()));
        rec.push(row.collisions.to_string());
        rec.push(row.stress_mode.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(positions: Vec<Vec2>, targets: Vec<Vec2>) -> WorldState {
        let n = positions.len();
        WorldState {
            positions,
            velocities: vec![[0.0, 0.0]; n],
            targets,
            step_index: 0,
        }
    }

    #[test]
    fn safe_reset_separates_agents() {
        let cfg = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let s = reset(&cfg, &mut rng);
            assert_eq!(s.step_index, 0);
            assert!(s.velocities.iter().all(|v| *v == [0.0, 0.0]));
            assert!(constraint_values(&s, &cfg).iter().all(|c| *c <= 0.0));
        }
    }

    #[test]
    fn unsafe_reset_produces_overlap() {
        let cfg = EnvConfig::default().with_stress(StressMode::Ui);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let overlapping = (0..200)
            .filter(|_| count_collisions(&reset(&cfg, &mut rng), &cfg) > 0)
            .count();
        assert!(overlapping > 0);
    }

    #[test]
    fn fallback_placement_is_separated() {
        let cfg = EnvConfig::default();
        let s = state(fallback_positions(&cfg), vec![[0.0; 2]; 3]);
        assert!(constraint_values(&s, &cfg).iter().all(|c| *c < -cfg.spawn_margin));
    }

    #[test]
    fn zero_action_at_rest_is_fixed_point() {
        let cfg = EnvConfig::default();
        let s = state(vec![[0.1, 0.2], [0.8, -0.5], [-0.6, 0.6]], vec![[0.0; 2]; 3]);
        let out = step(&s, &[0.0; 6], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.state.positions, s.positions);
        assert_eq!(out.state.velocities, s.velocities);
        assert_eq!(out.state.step_index, 1);
    }

    #[test]
    fn double_integrator_update() {
        let cfg = EnvConfig::default();
        let s = state(vec![[0.0, 0.0], [0.8, 0.8], [-0.8, 0.8]], vec![[0.0; 2]; 3]);
        let out = step(&s, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_abs_diff_eq!(out.state.velocities[0][0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(out.state.positions[0][0], 0.01, epsilon = 1e-15);
        assert_eq!(out.state.positions[0][1], 0.0);
    }

    #[test]
    fn reward_is_negative_l1_distance() {
        let cfg = EnvConfig::default();
        let s = state(
            vec![[0.0, 0.0], [0.9, -0.9], [-0.9, 0.9]],
            vec![[1.0, 1.0], [0.9, -0.9], [-0.9, 0.9]],
        );
        let r = rewards(&s, &cfg);
        assert_abs_diff_eq!(r[0], -2.0, epsilon = 1e-15);
        assert_eq!(r[1], 0.0);
    }

    #[test]
    fn reward_counts_each_colliding_counterpart() {
        let cfg = EnvConfig::default();
        let s = state(vec![[0.0, 0.0], [0.1, 0.0], [0.0, 0.1]], vec![[0.0, 0.0], [0.1, 0.0], [0.0, 0.1]]);
        let r = rewards(&s, &cfg);
        assert_eq!(r, vec![-2.0, -2.0, -2.0]);
    }

    #[test]
    fn step_validates_inputs() {
        let cfg = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = reset(&cfg, &mut rng);
        assert!(matches!(
            step(&s, &[0.0, 1.5, 0.0, 0.0, 0.0, 0.0], &cfg, &mut rng),
            Err(Error::ActionOutOfRange { index: 1, .. })
        ));
        s.step_index = cfg.episode_length;
        assert!(matches!(step(&s, &[0.0; 6], &cfg, &mut rng), Err(Error::EpisodeFinished(25))));
    }

    #[test]
    fn positions_clamp_to_arena() {
        let cfg = EnvConfig::default();
        let mut s = state(vec![[0.999, 0.0], [0.0, 0.5], [0.0, -0.5]], vec![[0.0; 2]; 3]);
        s.velocities[0] = [0.4, 0.2];
        let out = step(&s, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(out.state.positions[0][0], 1.0);
        assert_eq!(out.state.velocities[0][0], 0.0);
        assert!(out.state.velocities[0][1] > 0.0);
    }

    #[test]
    fn disturbance_is_bounded() {
        let cfg = EnvConfig::default().with_stress(StressMode::Ed);
        let s = state(vec![[0.0, 0.0], [0.5, 0.5], [-0.5, -0.5]], vec![[0.0; 2]; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut moved = false;
        for _ in 0..100 {
            let out = step(&s, &[0.0; 6], &cfg, &mut rng).unwrap();
            for (p, q) in out.state.positions.iter().zip(&s.positions) {
                assert!((p[0] - q[0]).abs() <= 0.05 && (p[1] - q[1]).abs() <= 0.05);
                moved |= p != q;
            }
        }
        assert!(moved);
    }

    #[test]
    fn observation_layout() {
        let s = state(vec![[0.0; 2]; 3], vec![[0.0; 2]; 3]);
        assert_eq!(observe(&s, 1).unwrap(), vec![0.0; 10]);

        let s = state(vec![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]], vec![[1.0, 1.0], [0.0; 2], [0.0; 2]]);
        assert_eq!(
            observe(&s, 0).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.0, -1.0, 1.0, 0.0, 1.0]
        );
        assert!(matches!(observe(&s, 3), Err(Error::IndexOutOfRange { .. })));
        assert_eq!(joint_observation(&s).unwrap().len(), 30);
    }

    #[test]
    fn constraint_entries() {
        let cfg = EnvConfig::default();
        let s = state(vec![[0.0, 0.0], [0.2, 0.0], [0.0, 0.9]], vec![[0.0; 2]; 3]);
        let c = constraint_values(&s, &cfg);
        assert_eq!(c.len(), 6);
        assert_eq!(cfg.constraint_pairs(), vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
        assert_abs_diff_eq!(c[0], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(c[2], 0.1, epsilon = 1e-12);
        assert_eq!(c[0], c[2]);
        assert_eq!(c[1], c[4]);
        assert_eq!(c[3], c[5]);
        assert!(c[1] < 0.0 && c[3] < 0.0);
    }

    #[test]
    fn collision_counting() {
        let cfg = EnvConfig::default();
        let apart = state(vec![[-0.5, 0.0], [0.5, 0.0], [0.0, 0.8]], vec![[0.0; 2]; 3]);
        assert_eq!(count_collisions(&apart, &cfg), 0);
        let together = state(vec![[0.2, 0.2]; 3], vec![[0.0; 2]; 3]);
        assert_eq!(count_collisions(&together, &cfg), 3);
        let boundary = state(vec![[0.0, 0.0], [0.3 - 1e-6, 0.0], [0.0, 0.9]], vec![[0.0; 2]; 3]);
        assert_eq!(count_collisions(&boundary, &cfg), 1);
        let touching = state(vec![[0.0, 0.0], [0.3, 0.0], [0.0, 0.9]], vec![[0.0; 2]; 3]);
        assert_eq!(count_collisions(&touching, &cfg), 0);
    }

    #[test]
    fn config_validation_names_key() {
        let cfg = EnvConfig {
            collision_distance: 2.0,
            ..EnvConfig::default()
        };
        match cfg.validate() {
            Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "collision_distance"),
            other => panic!("{other:?}"),
        }
        assert!(EnvConfig::default().validate().is_ok());
    }

    #[test]
    fn trace_export_has_one_row_per_step() {
        let cfg = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = reset(&cfg, &mut rng);
        let mut rows = Vec::new();
        for t in 0..3 {
            let a = [0.5, -0.5, 0.0, 0.1, -1.0, 1.0];
            let out = step(&s, &a, &cfg, &mut rng).unwrap();
            rows.push(TraceRow {
                episode: 0,
                step: t,
                positions: out.state.positions.clone(),
                velocities: out.state.velocities.clone(),
                actions: a.to_vec(),
                rewards: out.rewards.clone(),
                constraint_values: constraint_values(&out.state, &cfg),
                collisions: out.collisions,
                stress_mode: cfg.stress_mode,
            });
            s = out.state;
        }
        let mut buf = Vec::new();
        write_trace(&mut buf, 3, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].split(',').count(), 2 + 21 + 6 + 2);
        assert!(lines[1].ends_with(",none"));
    }
}
