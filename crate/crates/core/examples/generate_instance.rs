//! Prints a synthetic 30-job, 4-machine instance in the instance file format.
//!
//! cargo run --example generate_instance -- [seed] > my_instance.txt
//!
//! Without a seed this reproduces `data/imm_30x4.txt`.

use shopgraph::imm::instance::{generate_instance, SHIPPED_SEED, STANDARD_JOBS, STANDARD_MACHINES};

fn main() {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("seed must be a non-negative integer"))
        .unwrap_or(SHIPPED_SEED);
    let inst = generate_instance(seed, STANDARD_JOBS, STANDARD_MACHINES);
    print!("{}", inst.to_text());
    eprintln!("lower bound: {}", inst.lower_bound());
}
