//! Exhaustive optimum of small job shops next to the dispatching rules.
//!
//! cargo run --release --example brute_force

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shopgraph::dispatch::{brute_force_optimal, run_dispatch_imm, DispatchRule};
use shopgraph::imm::instance::random_mini_instance;
use shopgraph::imm::ImmConfig;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let config = ImmConfig::default();
    println!("{:>4} {:>6} {:>6} {:>6} {:>6} {:>8}", "case", "opt", "FIFO", "SPT", "RANDOM", "nodes");
    for case in 0..10 {
        let inst = random_mini_instance(&mut rng, 3, 3, 9);
        let opt = brute_force_optimal(&inst, 200, 1_000_000).expect("small instance");
        let rule = |r| run_dispatch_imm(&inst, &config, r, 0).expect("valid").0.makespan.unwrap_or(0);
        println!(
            "{case:>4} {:>6} {:>6} {:>6} {:>6} {:>8}",
            opt.makespan,
            rule(DispatchRule::Fifo),
            rule(DispatchRule::Spt),
            rule(DispatchRule::Random),
            opt.nodes
        );
    }
}
