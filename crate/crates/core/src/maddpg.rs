//! Multi-agent DDPG with centralized critics, decentralized actors and the
//! safety filter in the action path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvConfig, Transition, ACTION_DIM};
use crate::error::{check_len, Error, Result};
use crate::nn::{adam_step, Activation, AdamState, BackwardMode, Mlp};
use crate::safety::{project, ProjectionMode, SensitivityModel, Strategy};

#[derive(Debug, Clone)]
pub struct AgentNets {
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
}

impl AgentNets {
    /// Actor `obs_dim -> hidden.. -> action_dim` (relu, tanh out) and critic
    /// `joint_obs_dim + joint_action_dim -> hidden.. -> 1` (relu, linear out);
    /// targets start as exact copies.
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        joint_obs_dim: usize,
        joint_action_dim: usize,
        hidden: &[usize],
        actor_lr: f64,
        critic_lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut actor_dims = vec![obs_dim];
        actor_dims.extend_from_slice(hidden);
        actor_dims.push(ACTION_DIM);
        let mut critic_dims = vec![joint_obs_dim + joint_action_dim];
        critic_dims.extend_from_slice(hidden);
        critic_dims.push(1);
        let actor = Mlp::new(&actor_dims, Activation::Relu, Activation::Tanh, rng)?;
        let critic = Mlp::new(&critic_dims, Activation::Relu, Activation::Identity, rng)?;
        Ok(AgentNets {
            actor_opt: AdamState::new(&actor, actor_lr),
            critic_opt: AdamState::new(&critic, critic_lr),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
        })
    }

    pub fn for_env<R: Rng + ?Sized>(
        config: &EnvConfig,
        train: &TrainConfig,
        rng: &mut R,
    ) -> Result<Vec<Self>> {
        (0..config.n_agents)
            .map(|_| {
                Self::new(
                    env::obs_dim(config.n_agents),
                    config.joint_obs_dim(),
                    config.joint_action_dim(),
                    &train.hidden_layers,
                    train.actor_lr,
                    train.critic_lr,
                    rng,
                )
            })
            .collect()
    }
}

/// Ring buffer of transitions stored as flat arrays.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    len: usize,
    cursor: usize,
    state_dim: usize,
    action_dim: usize,
    n_agents: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
}

/// Transitions sampled from a [`ReplayBuffer`], row-major per field.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub n_agents: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, n_agents: usize, state_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("buffer_capacity", "must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            len: 0,
            cursor: 0,
            state_dim,
            action_dim,
            n_agents,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        check_len("transition state", self.state_dim, t.joint_state.len())?;
        check_len("transition next state", self.state_dim, t.next_joint_state.len())?;
        check_len("transition action", self.action_dim, t.joint_action.len())?;
        check_len("transition rewards", self.n_agents, t.rewards.len())?;
        if self.len < self.capacity {
            self.states.extend_from_slice(&t.joint_state);
            self.actions.extend_from_slice(&t.joint_action);
            self.rewards.extend_from_slice(&t.rewards);
            self.next_states.extend_from_slice(&t.next_joint_state);
            self.len += 1;
        } else {
            let c = self.cursor;
            let (s, a, r) = (self.state_dim, self.action_dim, self.n_agents);
            self.states[c * s..(c + 1) * s].copy_from_slice(&t.joint_state);
            self.actions[c * a..(c + 1) * a].copy_from_slice(&t.joint_action);
            self.rewards[c * r..(c + 1) * r].copy_from_slice(&t.rewards);
            self.next_states[c * s..(c + 1) * s].copy_from_slice(&t.next_joint_state);
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Joint action stored at `index` (insertion order modulo capacity).
    pub fn action(&self, index: usize) -> Result<&[f64]> {
        if index >= self.len {
            return Err(Error::IndexOutOfRange { index, len: self.len });
        }
        Ok(&self.actions[index * self.action_dim..(index + 1) * self.action_dim])
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batch> {
        if batch_size == 0 || self.len < batch_size {
            return Err(Error::BatchTooSmall {
                required: batch_size.max(1),
                actual: self.len,
            });
        }
        let indices: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..self.len)).collect();
        Ok(self.gather(&indices))
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let (s, a, r) = (self.state_dim, self.action_dim, self.n_agents);
        let mut batch = Batch {
            size: indices.len(),
            n_agents: r,
            state_dim: s,
            action_dim: a,
            states: Vec::with_capacity(indices.len() * s),
            actions: Vec::with_capacity(indices.len() * a),
            rewards: Vec::with_capacity(indices.len() * r),
            next_states: Vec::with_capacity(indices.len() * s),
        };
        for &i in indices {
            batch.states.extend_from_slice(&self.states[i * s..(i + 1) * s]);
            batch.actions.extend_from_slice(&self.actions[i * a..(i + 1) * a]);
            batch.rewards.extend_from_slice(&self.rewards[i * r..(i + 1) * r]);
            batch.next_states.extend_from_slice(&self.next_states[i * s..(i + 1) * s]);
        }
        batch
    }
}

impl Batch {
    fn obs_dim(&self) -> usize {
        self.state_dim / self.n_agents
    }

    /// Observations of one agent across the batch, taken from `source`
    /// (states or next states).
    fn agent_obs(&self, source: &[f64], agent: usize) -> Vec<f64> {
        let o = self.obs_dim();
        let mut out = Vec::with_capacity(self.size * o);
        for b in 0..self.size {
            let row = &source[b * self.state_dim..(b + 1) * self.state_dim];
            out.extend_from_slice(&row[agent * o..(agent + 1) * o]);
        }
        out
    }

    /// Rows `[state | action]` as the critic input.
    fn critic_input(states: &[f64], actions: &[f64], size: usize, sd: usize, ad: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(size * (sd + ad));
        for b in 0..size {
            out.extend_from_slice(&states[b * sd..(b + 1) * sd]);
            out.extend_from_slice(&actions[b * ad..(b + 1) * ad]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_episodes: usize,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub noise_sigma_initial: f64,
    pub noise_sigma_final: f64,
    pub buffer_capacity: usize,
    /// Environment steps between gradient updates once the buffer is warm.
    pub update_every: usize,
    pub hidden_layers: Vec<usize>,
    pub projection: ProjectionMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_episodes: 1500,
            gamma: 0.95,
            tau: 0.01,
            batch_size: 256,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            noise_sigma_initial: 0.3,
            noise_sigma_final: 0.05,
            buffer_capacity: 1_000_000,
            update_every: 1,
            hidden_layers: vec![100, 500],
            projection: ProjectionMode::new(Strategy::Off),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |key: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must lie in (0, 1), got {v}")))
            }
        };
        open_unit("gamma", self.gamma)?;
        open_unit("tau", self.tau)?;
        if self.n_episodes == 0 {
            return Err(Error::config("episodes", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.update_every == 0 {
            return Err(Error::config("update_every", "must be positive"));
        }
        if !(self.actor_lr > 0.0) {
            return Err(Error::config("actor_lr", "must be positive"));
        }
        if !(self.critic_lr > 0.0) {
            return Err(Error::config("critic_lr", "must be positive"));
        }
        if !(self.noise_sigma_initial >= 0.0) {
            return Err(Error::config("noise_sigma_initial", "must be non-negative"));
        }
        if !(self.noise_sigma_final >= 0.0) {
            return Err(Error::config("noise_sigma_final", "must be non-negative"));
        }
        if self.buffer_capacity < self.batch_size {
            return Err(Error::config("buffer_capacity", "must hold at least one batch"));
        }
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden_layers", "layer widths must be positive"));
        }
        self.projection.validate()
    }

    /// Linear decay from the initial to the final value over the first half
    /// of training, constant afterwards.
    pub fn noise_sigma(&self, episode: usize) -> f64 {
        let half = (self.n_episodes as f64 / 2.0).max(1.0);
        let frac = (episode as f64 / half).min(1.0);
        self.noise_sigma_initial + (self.noise_sigma_final - self.noise_sigma_initial) * frac
    }
}

/// Per-agent actor outputs concatenated in agent order.
pub fn select_actions(agents: &[AgentNets], observations: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_len("observations", agents.len(), observations.len())?;
    let mut out = Vec::with_capacity(agents.len() * ACTION_DIM);
    for (agent, obs) in agents.iter().zip(observations) {
        out.extend(agent.actor.forward(obs)?);
    }
    Ok(out)
}

/// Adds independent `N(0, sigma^2)` noise per entry and clamps to `[-1, 1]`.
pub fn apply_exploration_noise<R: Rng + ?Sized>(action: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if !(sigma > 0.0) {
        return action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    action
        .iter()
        .map(|a| (a + normal.sample(rng)).clamp(-1.0, 1.0))
        .collect()
}

/// One Adam step per critic on the TD targets
/// `z_i = r_i + gamma * Q'_i(x', mu'(o'))`. Returns the mean squared TD
/// error of each critic before its step.
pub fn critic_update(agents: &mut [AgentNets], batch: &Batch, gamma: f64) -> Result<Vec<f64>> {
    check_len("agents", batch.n_agents, agents.len())?;
    if batch.size == 0 {
        return Err(Error::BatchTooSmall { required: 1, actual: 0 });
    }
    let (b, sd, ad) = (batch.size, batch.state_dim, batch.action_dim);

    let mut next_actions = vec![0.0; b * ad];
    for (i, agent) in agents.iter().enumerate() {
        let obs = batch.agent_obs(&batch.next_states, i);
        let out = agent.target_actor.forward_batch(&obs, b)?;
        for s in 0..b {
            next_actions[s * ad + i * ACTION_DIM..s * ad + (i + 1) * ACTION_DIM]
                .copy_from_slice(&out[s * ACTION_DIM..(s + 1) * ACTION_DIM]);
        }
    }
    let target_input = Batch::critic_input(&batch.next_states, &next_actions, b, sd, ad);
    let input = Batch::critic_input(&batch.states, &batch.actions, b, sd, ad);

    let mut losses = Vec::with_capacity(agents.len());
    for (i, agent) in agents.iter_mut().enumerate() {
        let q_next = agent.target_critic.forward_batch(&target_input, b)?;
        let tape = agent.critic.forward_tape(&input, b)?;
        let q = tape.output();
        let mut loss = 0.0;
        let mut upstream = Vec::with_capacity(b);
        for s in 0..b {
            let z = batch.rewards[s * batch.n_agents + i] + gamma * q_next[s];
            let err = q[s] - z;
            loss += err * err;
            upstream.push(2.0 * err / b as f64);
        }
        losses.push(loss / b as f64);
        let grads = agent.critic.backward_tape(&tape, &upstream, BackwardMode::Params)?;
        adam_step(&mut agent.critic, &grads, &mut agent.critic_opt)?;
    }
    Ok(losses)
}

/// Deterministic policy-gradient step for every actor, with the agent's own
/// action block replaced by its current policy output and the other blocks
/// kept as stored. Returns the norm of each actor's objective gradient.
pub fn actor_update(agents: &mut [AgentNets], batch: &Batch) -> Result<Vec<f64>> {
    check_len("agents", batch.n_agents, agents.len())?;
    if batch.size == 0 {
        return Err(Error::BatchTooSmall { required: 1, actual: 0 });
    }
    let (b, sd, ad) = (batch.size, batch.state_dim, batch.action_dim);
    let in_dim = sd + ad;
    let mut norms = Vec::with_capacity(agents.len());
    for (i, agent) in agents.iter_mut().enumerate() {
        let obs = batch.agent_obs(&batch.states, i);
        let actor_tape = agent.actor.forward_tape(&obs, b)?;
        let own = actor_tape.output();
        let mut actions = batch.actions.clone();
        for s in 0..b {
            actions[s * ad + i * ACTION_DIM..s * ad + (i + 1) * ACTION_DIM]
                .copy_from_slice(&own[s * ACTION_DIM..(s + 1) * ACTION_DIM]);
        }
        let input = Batch::critic_input(&batch.states, &actions, b, sd, ad);
        let critic_tape = agent.critic.forward_tape(&input, b)?;
        // minimize -mean Q
        let upstream = vec![-1.0 / b as f64; b];
        let dq = agent.critic.backward_tape(&critic_tape, &upstream, BackwardMode::Input)?;
        let mut actor_upstream = Vec::with_capacity(b * ACTION_DIM);
        for s in 0..b {
            let col = s * in_dim + sd + i * ACTION_DIM;
            actor_upstream.extend_from_slice(&dq.input_grad[col..col + ACTION_DIM]);
        }
        let grads = agent.actor.backward_tape(&actor_tape, &actor_upstream, BackwardMode::Params)?;
        norms.push(grads.param_norm());
        adam_step(&mut agent.actor, &grads, &mut agent.actor_opt)?;
    }
    Ok(norms)
}

/// `target <- tau * source + (1 - tau) * target` for every actor and critic.
pub fn soft_update_targets(agents: &mut [AgentNets], tau: f64) -> Result<()> {
    for agent in agents {
        agent.target_actor.soft_update_from(&agent.actor, tau)?;
        agent.target_critic.soft_update_from(&agent.critic, tau)?;
    }
    Ok(())
}

/// Aggregate of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    /// Episode return averaged over agents.
    pub mean_reward: f64,
    pub agent_rewards: Vec<f64>,
    pub collisions: usize,
    pub cumulative_collisions: usize,
    pub infeasible_steps: usize,
    /// Mean over steps and constraints of the soft-projection slack.
    pub mean_slack: f64,
    pub noise_sigma: f64,
    /// Mean critic loss over the episode's updates (NaN without updates).
    pub critic_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub log: Vec<EpisodeLog>,
    pub agents: Vec<AgentNets>,
    /// Replay contents at the end of training, oldest overwritten first.
    pub replay: ReplayBuffer,
}

/// Independent random streams of one run, all derived from the seed so that
/// environment resets and disturbances line up across strategies.
struct Streams {
    init: ChaCha8Rng,
    env: ChaCha8Rng,
    noise: ChaCha8Rng,
    replay: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        Streams {
            init: stream(1),
            env: stream(2),
            noise: stream(3),
            replay: stream(4),
        }
    }
}

fn filter_action(
    proposal: &[f64],
    joint_state: &[f64],
    constraint_values: &[f64],
    model: Option<&SensitivityModel>,
    mode: &ProjectionMode,
) -> Result<(Vec<f64>, Vec<f64>, bool)> {
    match (mode.strategy, model) {
        (Strategy::Off, _) => Ok((
            proposal.iter().map(|a| a.clamp(-1.0, 1.0)).collect(),
            Vec::new(),
            true,
        )),
        (_, Some(model)) => {
            let p = project(proposal, joint_state, constraint_values, model, mode)?;
            Ok((p.action, p.slack, p.feasible))
        }
        (_, None) => Err(Error::config(
            "strategy",
            "hard and soft projection need a sensitivity model",
        )),
    }
}

struct EpisodeStats {
    agent_rewards: Vec<f64>,
    collisions: usize,
    infeasible_steps: usize,
    slack_sum: f64,
    slack_count: usize,
    critic_loss_sum: f64,
    updates: usize,
}

impl EpisodeStats {
    fn new(n_agents: usize) -> Self {
        EpisodeStats {
            agent_rewards: vec![0.0; n_agents],
            collisions: 0,
            infeasible_steps: 0,
            slack_sum: 0.0,
            slack_count: 0,
            critic_loss_sum: 0.0,
            updates: 0,
        }
    }

    fn finish(self, episode: usize, cumulative: &mut usize, sigma: f64) -> EpisodeLog {
        *cumulative += self.collisions;
        EpisodeLog {
            episode,
            mean_reward: self.agent_rewards.iter().sum::<f64>() / self.agent_rewards.len() as f64,
            agent_rewards: self.agent_rewards,
            collisions: self.collisions,
            cumulative_collisions: *cumulative,
            infeasible_steps: self.infeasible_steps,
            mean_slack: if self.slack_count == 0 {
                0.0
            } else {
                self.slack_sum / self.slack_count as f64
            },
            noise_sigma: sigma,
            critic_loss: if self.updates == 0 {
                f64::NAN
            } else {
                self.critic_loss_sum / self.updates as f64
            },
        }
    }
}

fn observations(state: &env::WorldState) -> Result<Vec<Vec<f64>>> {
    (0..state.n_agents()).map(|i| env::observe(state, i)).collect()
}

/// Runs the full training loop. `observer` sees every finished episode
/// together with the current networks (for streaming logs and checkpoints).
pub fn train<F>(
    config: &TrainConfig,
    env_config: &EnvConfig,
    model: Option<&SensitivityModel>,
    mut observer: F,
) -> Result<TrainingOutcome>
where
    F: FnMut(&EpisodeLog, &[AgentNets]) -> Result<()>,
{
    config.validate()?;
    env_config.validate()?;
    if config.projection.strategy != Strategy::Off && model.is_none() {
        return Err(Error::config(
            "strategy",
            "hard and soft projection need a sensitivity model",
        ));
    }
    let mut rngs = Streams::new(config.seed);
    let mut agents = AgentNets::for_env(env_config, config, &mut rngs.init)?;
    let mut buffer = ReplayBuffer::new(
        config.buffer_capacity,
        env_config.n_agents,
        env_config.joint_obs_dim(),
        env_config.joint_action_dim(),
    )?;
    let mut log = Vec::with_capacity(config.n_episodes);
    let mut cumulative = 0usize;
    let mut total_steps = 0usize;

    for episode in 0..config.n_episodes {
        let sigma = config.noise_sigma(episode);
        let mut stats = EpisodeStats::new(env_config.n_agents);
        let mut state = env::reset(env_config, &mut rngs.env);
        for _ in 0..env_config.episode_length {
            let joint_state = env::joint_observation(&state)?;
            let constraints = env::constraint_values(&state, env_config);
            let proposal = select_actions(&agents, &observations(&state)?)?;
            let (filtered, slack, feasible) =
                filter_action(&proposal, &joint_state, &constraints, model, &config.projection)?;
            let applied = apply_exploration_noise(&filtered, sigma, &mut rngs.noise);
            let outcome = env::step(&state, &applied, env_config, &mut rngs.env)?;

            if !feasible {
                stats.infeasible_steps += 1;
            }
            if config.projection.strategy == Strategy::Soft {
                stats.slack_sum += slack.iter().map(|e| e.max(0.0)).sum::<f64>();
                stats.slack_count += slack.len();
            }
            stats.collisions += outcome.collisions;
            for (acc, r) in stats.agent_rewards.iter_mut().zip(&outcome.rewards) {
                *acc += r;
            }

            let next_joint_state = env::joint_observation(&outcome.state)?;
            buffer.push(&Transition {
                joint_state,
                joint_action: applied,
                rewards: outcome.rewards,
                next_joint_state,
                constraint_values: constraints,
                next_constraint_values: Vec::new(),
            })?;
            total_steps += 1;
            state = outcome.state;

            if buffer.len() >= config.batch_size && total_steps % config.update_every == 0 {
                let batch = buffer.sample(config.batch_size, &mut rngs.replay)?;
                let losses = critic_update(&mut agents, &batch, config.gamma)?;
                actor_update(&mut agents, &batch)?;
                soft_update_targets(&mut agents, config.tau)?;
                stats.critic_loss_sum += losses.iter().sum::<f64>() / losses.len() as f64;
                stats.updates += 1;
            }
        }
        let entry = stats.finish(episode, &mut cumulative, sigma);
        observer(&entry, &agents)?;
        log.push(entry);
    }
    Ok(TrainingOutcome {
        log,
        agents,
        replay: buffer,
    })
}

/// Noise-free rollouts of trained actors with the given projection mode.
/// Uses its own environment stream derived from `seed`.
pub fn evaluate(
    agents: &[AgentNets],
    env_config: &EnvConfig,
    model: Option<&SensitivityModel>,
    mode: &ProjectionMode,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeLog>> {
    env_config.validate()?;
    mode.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    let mut log = Vec::with_capacity(n_episodes);
    let mut cumulative = 0usize;
    for episode in 0..n_episodes {
        let mut stats = EpisodeStats::new(env_config.n_agents);
        let mut state = env::reset(env_config, &mut rng);
        for _ in 0..env_config.episode_length {
            let joint_state = env::joint_observation(&state)?;
            let constraints = env::constraint_values(&state, env_config);
            let proposal = select_actions(agents, &observations(&state)?)?;
            let (applied, slack, feasible) =
                filter_action(&proposal, &joint_state, &constraints, model, mode)?;
            let outcome = env::step(&state, &applied, env_config, &mut rng)?;
            if !feasible {
                stats.infeasible_steps += 1;
            }
            if mode.strategy == Strategy::Soft {
                stats.slack_sum += slack.iter().map(|e| e.max(0.0)).sum::<f64>();
                stats.slack_count += slack.len();
            }
            stats.collisions += outcome.collisions;
            for (acc, r) in stats.agent_rewards.iter_mut().zip(&outcome.rewards) {
                *acc += r;
            }
            state = outcome.state;
        }
        log.push(stats.finish(episode, &mut cumulative, 0.0));
    }
    Ok(log)
}
