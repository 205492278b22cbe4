//! Trains one job-selecting agent per molding machine on the shipped 30-job
//! instance and compares the greedy schedule with the dispatching rules.
//!
//! cargo run --release --example train_imm -- [episodes] [seed]

use std::time::Instant;

use shopgraph::agents::{build_bindings, evaluate, train, ActionMode, EncoderConfig, HeadConfig, Schedule};
use shopgraph::dispatch::{compare, run_dispatch_imm, DispatchRule};
use shopgraph::imm::instance::shipped_instance;
use shopgraph::imm::{ImmConfig, ImmEnv};
use shopgraph::ppo::PpoConfig;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args()
        .nth(i)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let instance = shipped_instance();
    let config = ImmConfig::default();
    println!("lower bound {}", instance.lower_bound());

    let mut runs = Vec::new();
    for rule in DispatchRule::ALL {
        for seed in 0..20 {
            runs.push(run_dispatch_imm(&instance, &config, rule, seed).expect("valid schedule").0);
        }
    }
    for r in compare(&runs) {
        println!("{:<7} mean makespan {:.1}", r.policy, r.mean_makespan.unwrap_or(f64::NAN));
    }

    let schedule = Schedule {
        episodes: arg(1, 300),
        eval_every: 10,
        seed: arg(2, 0),
        ..Schedule::default()
    };
    let mut env = ImmEnv::new(instance.clone(), config);
    let encoder = EncoderConfig {
        rounds: 2,
        message_width: 16,
        hidden: vec![32],
        ..EncoderConfig::default()
    };
    let mut agents = build_bindings(&env, &encoder, &HeadConfig::default(), schedule.seed).expect("valid sizes");
    let start = Instant::now();
    train(&mut env, &mut agents, &PpoConfig::default(), &schedule, |e| {
        println!(
            "episode {:>5}  greedy makespan {}  [{:.0?}]",
            e.episode + 1,
            e.mean_makespan.map_or("-".into(), |m| format!("{m:.0}")),
            start.elapsed()
        );
    })
    .expect("training failed");
    let greedy = evaluate(&mut env, &mut agents, 1, 0, ActionMode::Greedy).expect("evaluation failed");
    println!("final greedy makespan {:?}", greedy[0].outcome.makespan);
}
