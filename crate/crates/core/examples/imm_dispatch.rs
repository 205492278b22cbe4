//! Runs FIFO, SPT and RANDOM on the shipped 30-job instance, validates every
//! schedule and writes the FIFO trace to `fifo_trace.csv`.
//!
//! cargo run --release --example imm_dispatch -- [path/to/instance.txt]

use shopgraph::dispatch::{compare, run_dispatch_imm, write_summary_csv, DispatchRule};
use shopgraph::imm::instance::{load_instance, shipped_instance};
use shopgraph::imm::trace::write_trace_csv;
use shopgraph::imm::{validate_schedule, ImmConfig};

fn main() {
    let instance = match std::env::args().nth(1) {
        Some(path) => load_instance(&path).unwrap_or_else(|e| panic!("{path}: {e}")),
        None => shipped_instance(),
    };
    let config = ImmConfig::default();
    println!("lower bound: {}", instance.lower_bound());

    let mut runs = Vec::new();
    for rule in DispatchRule::ALL {
        let seeds = if rule == DispatchRule::Random { 0..20 } else { 0..1 };
        for seed in seeds {
            let (summary, trace) = run_dispatch_imm(&instance, &config, rule, seed).expect("env schedules are valid");
            assert!(validate_schedule(&trace, &instance).is_valid());
            if rule == DispatchRule::Fifo {
                let file = std::fs::File::create("fifo_trace.csv").expect("writable directory");
                write_trace_csv(&trace, file).expect("csv");
            }
            runs.push(summary);
        }
    }
    write_summary_csv(&compare(&runs), std::io::stdout()).expect("stdout");
}
