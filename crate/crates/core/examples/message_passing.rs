//! Encodes a small directed graph, checks that relabelling the nodes only
//! permutes the embeddings, and shows that a node without incoming edges
//! receives an exact zero message.
//!
//! cargo run --example message_passing

use shopgraph::encoder::{aggregate_messages, assign_initial, encode, EncoderParams};
use shopgraph::graph::Graph;
use shopgraph::nn::Activation;

fn main() {
    let g = Graph::from_rows(
        &[
            vec![1.0, 0.0, 0.5],
            vec![0.0, 1.0, -0.5],
            vec![0.3, 0.3, 0.3],
            vec![-1.0, 0.2, 0.0],
        ],
        [vec![0, 1, 2, 0], vec![1, 2, 1, 2]],
        &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5], vec![1.0, 1.0]],
    )
    .expect("valid graph");
    let params = EncoderParams::init(3, 2, 4, &[8], Activation::Tanh, 3, 7).expect("valid sizes");

    let messages = aggregate_messages(&assign_initial(&g), &g, &params).expect("matching widths");
    for node in [0, 3] {
        println!("node {node} has no incoming edges; message = {:?}", messages.row(node));
    }

    let emb = encode(&g, &params).expect("matching widths");
    for i in 0..g.node_count() {
        println!("h[{i}] = {:.4?}", emb.h.row(i));
    }

    let perm = [2, 0, 3, 1];
    let permuted = encode(&g.permute_nodes(&perm).expect("bijection"), &params).expect("matching widths");
    let max_diff = (0..g.node_count())
        .flat_map(|i| {
            emb.h
                .row(i)
                .iter()
                .zip(permuted.h.row(perm[i]))
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    println!("max |h_i - h'_perm(i)| after relabelling by {perm:?}: {max_diff:e}");
}
