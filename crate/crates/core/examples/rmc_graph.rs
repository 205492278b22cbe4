//! Builds the robot-cell graph, shows the legal moves at reset and pushes one
//! work-piece of each type through the cell by hand, printing the trace as CSV.
//!
//! cargo run --example rmc_graph

use shopgraph::env::{JointAction, MultiAgentEnv};
use shopgraph::rmc::{self, RmcConfig, RmcEnv, NODE_NAMES};

fn main() {
    let mut env = RmcEnv::new(RmcConfig::with_targets(1, 1)).record_trace(true);
    let g = env.graph();
    println!("{} nodes, {} edges", g.node_count(), g.edge_count());
    for (n, name) in NODE_NAMES.iter().enumerate() {
        println!("  {name:<4} {:?}", g.node_features().row(n));
    }
    for k in 0..g.edge_count() {
        let (s, r) = g.edge(k);
        println!("  edge {k:>2}: {} -> {}  {:?}", NODE_NAMES[s], NODE_NAMES[r], g.edge_attrs().row(k));
    }
    for agent in 0..2 {
        let legal: Vec<usize> = (0..rmc::ACTION_COUNT).filter(|&a| env.legal_mask(agent)[a]).collect();
        println!("work-piece {} legal actions at reset: {legal:?}", agent + 1);
    }

    // Each tick activates the lowest legal edge of every agent.
    while !env.is_done() {
        let joint = (0..2)
            .map(|agent| {
                let mask = env.legal_mask(agent);
                (0..rmc::ROUTE_EDGES).map(|b| 1 << b).find(|&a| mask[a]).unwrap_or(0)
            })
            .collect();
        env.step(&JointAction(joint)).expect("legal by construction");
    }
    println!("outcome: {:?}", env.outcome());
    rmc::write_trace_csv(env.trace(), std::io::stdout()).expect("stdout");
}
