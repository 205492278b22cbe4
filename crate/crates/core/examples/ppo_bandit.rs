//! PPO on a two-armed bandit: arm 0 pays 1, arm 1 pays 0. Prints the
//! probability of the better arm as updates proceed.
//!
//! cargo run --release --example ppo_bandit

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shopgraph::nn::Activation;
use shopgraph::ppo::{
    masked_log_softmax, ppo_update, sample_action, AgentNets, AgentOptimizer, Observation, PpoConfig,
    TrajectoryBatch, Transition,
};

const PULLS_PER_UPDATE: usize = 64;

fn main() {
    let config = PpoConfig::default();
    let mut nets = AgentNets::init(None, 1, &[8], Activation::Tanh, 2, 0).expect("valid sizes");
    let mut opt = AgentOptimizer::new(&nets);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let obs = Observation::Features(vec![1.0]);
    let mask = [true, true];
    let p_best = |nets: &AgentNets| {
        let (logits, _) = nets.evaluate(&obs).expect("feature width 1");
        masked_log_softmax(&logits, &mask)[0].exp()
    };
    for update in 1..=500 {
        let mut batch = TrajectoryBatch::default();
        for _ in 0..PULLS_PER_UPDATE {
            let s = sample_action(&nets, &obs, &mask, &mut rng).expect("legal mask");
            batch.push(Transition {
                observation: obs.clone(),
                action: s.action,
                log_prob: s.log_prob,
                reward: if s.action == 0 { 1.0 } else { 0.0 },
                value: s.value,
                done: true,
                action_mask: mask.to_vec(),
            });
        }
        ppo_update(&mut nets, &mut opt, &batch, &config, &mut rng).expect("finite losses");
        let p = p_best(&nets);
        if update % 25 == 0 || p > 0.99 {
            println!("update {update:>3}: P(better arm) = {p:.4}");
        }
        if p > 0.99 {
            break;
        }
    }
}
