use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safe_maddpg::env::{self, EnvConfig, WorldState};
use safe_maddpg::maddpg::{
    actor_update, apply_exploration_noise, critic_update, train, AgentNets, ReplayBuffer, TrainConfig,
};
use safe_maddpg::env::Transition;
use safe_maddpg::nn::Mlp;
use safe_maddpg::safety::{ProjectionMode, SensitivityModel, Strategy};

fn small_agents(rng: &mut ChaCha8Rng) -> Vec<AgentNets> {
    (0..3)
        .map(|_| AgentNets::new(10, 30, 6, &[8, 8], 1e-3, 1e-3, rng).unwrap())
        .collect()
}

fn random_buffer(rng: &mut ChaCha8Rng, n: usize) -> ReplayBuffer {
    let mut buffer = ReplayBuffer::new(64, 3, 30, 6).unwrap();
    for _ in 0..n {
        buffer
            .push(&Transition {
                joint_state: (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                joint_action: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                rewards: (0..3).map(|_| rng.gen_range(-2.0..0.0)).collect(),
                next_joint_state: (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                constraint_values: vec![],
                next_constraint_values: vec![],
            })
            .unwrap();
    }
    buffer
}

/// `-mean_s Q_i(x_s, a_s)` with agent `i`'s block replaced by `actor(o_i)`.
fn actor_objective(actor: &Mlp, critic: &Mlp, states: &[Vec<f64>], actions: &[Vec<f64>], i: usize) -> f64 {
    let mut total = 0.0;
    for (x, a) in states.iter().zip(actions) {
        let own = actor.forward(&x[10 * i..10 * (i + 1)]).unwrap();
        let mut joint = a.clone();
        joint[2 * i..2 * i + 2].copy_from_slice(&own);
        let input: Vec<f64> = x.iter().chain(&joint).copied().collect();
        total += critic.forward(&input).unwrap()[0];
    }
    -total / states.len() as f64
}

#[test]
fn actor_step_follows_the_finite_difference_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut agents = small_agents(&mut rng);
    let buffer = random_buffer(&mut rng, 7);
    let batch = buffer.gather(&[0, 1, 2, 3, 4, 5, 6]);
    let states: Vec<Vec<f64>> = batch.states.chunks(30).map(<[f64]>::to_vec).collect();
    let actions: Vec<Vec<f64>> = batch.actions.chunks(6).map(<[f64]>::to_vec).collect();

    let h = 1e-6;
    let before: Vec<Mlp> = agents.iter().map(|a| a.actor.clone()).collect();
    let numeric: Vec<Vec<f64>> = agents
        .iter()
        .enumerate()
        .map(|(i, agent)| {
            let mut actor = agent.actor.clone();
            (0..actor.param_count())
                .map(|k| {
                    let orig = actor.param(k);
                    *actor.param_mut(k) = orig + h;
                    let plus = actor_objective(&actor, &agent.critic, &states, &actions, i);
                    *actor.param_mut(k) = orig - h;
                    let minus = actor_objective(&actor, &agent.critic, &states, &actions, i);
                    *actor.param_mut(k) = orig;
                    (plus - minus) / (2.0 * h)
                })
                .collect()
        })
        .collect();

    let norms = actor_update(&mut agents, &batch).unwrap();
    for (i, grad) in numeric.iter().enumerate() {
        let fd_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((norms[i] - fd_norm).abs() <= 1e-5 * fd_norm, "agent {i}: {} vs {fd_norm}", norms[i]);
        // a fresh Adam state moves each weight by lr against the gradient sign
        for (k, g) in grad.iter().enumerate() {
            if g.abs() < 1e-6 {
                continue;
            }
            let step = agents[i].actor.param(k) - before[i].param(k);
            assert!(step * g < 0.0, "agent {i} param {k}: step {step}, gradient {g}");
            assert!((step.abs() - 1e-3).abs() < 1e-5, "agent {i} param {k}: step {step}");
        }
    }
}

#[test]
fn critic_loss_matches_per_sample_td_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut agents = small_agents(&mut rng);
    // make the targets differ from the online critics
    for a in &mut agents {
        for k in 0..a.target_critic.param_count() {
            *a.target_critic.param_mut(k) += rng.gen_range(-0.05..0.05);
        }
    }
    let buffer = random_buffer(&mut rng, 5);
    let batch = buffer.gather(&[4, 0, 2, 2, 1]);
    let gamma = 0.95;
    let expected: Vec<f64> = (0..3)
        .map(|i| {
            let mut total = 0.0;
            for s in 0..batch.size {
                let x = &batch.states[30 * s..30 * (s + 1)];
                let a = &batch.actions[6 * s..6 * (s + 1)];
                let x2 = &batch.next_states[30 * s..30 * (s + 1)];
                let next_a: Vec<f64> = (0..3)
                    .flat_map(|k| agents[k].target_actor.forward(&x2[10 * k..10 * (k + 1)]).unwrap())
                    .collect();
                let target_in: Vec<f64> = x2.iter().chain(&next_a).copied().collect();
                let z = batch.rewards[3 * s + i] + gamma * agents[i].target_critic.forward(&target_in).unwrap()[0];
                let input: Vec<f64> = x.iter().chain(a).copied().collect();
                let q = agents[i].critic.forward(&input).unwrap()[0];
                total += (q - z).powi(2);
            }
            total / batch.size as f64
        })
        .collect();
    let losses = critic_update(&mut agents, &batch, gamma).unwrap();
    for (l, e) in losses.iter().zip(&expected) {
        assert!((l - e).abs() <= 1e-12 * e.max(1.0), "{l} vs {e}");
    }
}

#[test]
fn exploration_noise_has_the_requested_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let samples: Vec<f64> = (0..20_000)
        .flat_map(|_| apply_exploration_noise(&[0.0; 6], 0.1, &mut rng))
        .collect();
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 0.002, "mean {mean}");
    assert!((std - 0.1).abs() < 0.005, "std {std}");
}

fn rebuild_state(joint_obs: &[f64]) -> WorldState {
    let block = |i: usize| &joint_obs[10 * i..10 * (i + 1)];
    let positions: Vec<[f64; 2]> = (0..3).map(|i| [block(i)[0], block(i)[1]]).collect();
    WorldState {
        velocities: (0..3).map(|i| [block(i)[2], block(i)[3]]).collect(),
        targets: (0..3)
            .map(|i| [positions[i][0] + block(i)[8], positions[i][1] + block(i)[9]])
            .collect(),
        positions,
        step_index: 0,
    }
}

fn short_config(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        n_episodes: 4,
        batch_size: 32,
        hidden_layers: vec![16, 16],
        projection: ProjectionMode::new(strategy),
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn replay_holds_the_actions_that_were_applied() {
    let env_config = EnvConfig::default();
    let model = SensitivityModel::for_env(&env_config, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for strategy in [Strategy::Off, Strategy::Soft] {
        let out = train(&short_config(strategy), &env_config, Some(&model), |_, _| Ok(())).unwrap();
        let n = out.replay.len();
        assert_eq!(n, 4 * env_config.episode_length);
        let batch = out.replay.gather(&(0..n).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in 0..n {
            let state = rebuild_state(&batch.states[30 * s..30 * (s + 1)]);
            let action = &batch.actions[6 * s..6 * (s + 1)];
            let outcome = env::step(&state, action, &env_config, &mut rng).unwrap();
            let next = env::joint_observation(&outcome.state).unwrap();
            for (a, b) in next.iter().zip(&batch.next_states[30 * s..30 * (s + 1)]) {
                assert!((a - b).abs() < 1e-12, "{strategy} transition {s}");
            }
            for (a, b) in outcome.rewards.iter().zip(&batch.rewards[3 * s..3 * (s + 1)]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn training_is_a_function_of_config_and_seed() {
    let env_config = EnvConfig::default();
    let model = SensitivityModel::for_env(&env_config, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let config = short_config(Strategy::Soft);
    let a = train(&config, &env_config, Some(&model), |_, _| Ok(())).unwrap();
    let b = train(&config, &env_config, Some(&model), |_, _| Ok(())).unwrap();
    // episode 0 has no update yet, so its critic loss is NaN
    let render = |log: &[safe_maddpg::maddpg::EpisodeLog]| format!("{log:?}");
    assert_eq!(render(&a.log), render(&b.log));
    for (x, y) in a.agents.iter().zip(&b.agents) {
        assert_eq!(x.actor, y.actor);
        assert_eq!(x.critic, y.critic);
    }
    let other = train(&TrainConfig { seed: 10, ..config }, &env_config, Some(&model), |_, _| Ok(())).unwrap();
    assert_ne!(render(&a.log), render(&other.log));
}
