use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safe_maddpg::env::{EnvConfig, Transition};
use safe_maddpg::maddpg::{actor_update, critic_update, soft_update_targets, AgentNets, ReplayBuffer, TrainConfig};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut agents = AgentNets::for_env(&EnvConfig::default(), &TrainConfig::default(), &mut rng).unwrap();
    let mut buffer = ReplayBuffer::new(10_000, 3, 30, 6).unwrap();
    for _ in 0..1000 {
        buffer
            .push(&Transition {
                joint_state: (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                joint_action: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                rewards: vec![-1.0; 3],
                next_joint_state: (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                constraint_values: vec![],
                next_constraint_values: vec![],
            })
            .unwrap();
    }
    let n = 50;
    let t = Instant::now();
    for _ in 0..n {
        let batch = buffer.sample(256, &mut rng).unwrap();
        critic_update(&mut agents, &batch, 0.95).unwrap();
        actor_update(&mut agents, &batch).unwrap();
        soft_update_targets(&mut agents, 0.01).unwrap();
    }
    println!("{:.2} ms per update", t.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
