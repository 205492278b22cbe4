//! Trains the two work-piece agents of the robot cell and reports greedy
//! evaluations as training goes.
//!
//! cargo run --release --example train_rmc -- [target_wp1] [target_wp2] [episodes] [seed]

use std::time::Instant;

use shopgraph::agents::{build_bindings, train, EncoderConfig, HeadConfig, Schedule};
use shopgraph::ppo::PpoConfig;
use shopgraph::rmc::{RmcConfig, RmcEnv};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args()
        .nth(i)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let (t1, t2) = (arg(1, 20u32), arg(2, 20u32));
    let schedule = Schedule {
        episodes: arg(3, 5000),
        eval_every: 25,
        eval_episodes: 1,
        seed: arg(4, 0),
        target_success: Some(0.9),
        ..Schedule::default()
    };
    let mut env = RmcEnv::new(RmcConfig::with_targets(t1, t2));
    let encoder = EncoderConfig {
        rounds: 3,
        ..EncoderConfig::default()
    };
    let mut agents = build_bindings(&env, &encoder, &HeadConfig::default(), schedule.seed).expect("valid sizes");
    let start = Instant::now();
    let report = train(&mut env, &mut agents, &PpoConfig::default(), &schedule, |e| {
        println!(
            "episode {:>5}  success {:.2}  makespan {}  steps {:.0}  [{:.0?}]",
            e.episode + 1,
            e.success_rate,
            e.mean_makespan.map_or("-".into(), |m| format!("{m:.0}")),
            e.mean_steps,
            start.elapsed()
        );
    })
    .expect("training failed");
    let last = report.evals.last();
    println!(
        "trained {} episodes, final greedy success {:.2}",
        report.episodes,
        last.map_or(0.0, |e| e.success_rate)
    );
}
