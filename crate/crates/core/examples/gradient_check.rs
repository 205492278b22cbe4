//! Finite-difference checks of hand-written backpropagation, for one dense
//! network, one encoder and then a batch of random configurations.
//!
//! cargo run --release --example gradient_check

use shopgraph::encoder::{check_encoder_gradients, EncoderParams, Readout};
use shopgraph::graph::Graph;
use shopgraph::harness::cmd_gradcheck;
use shopgraph::nn::{check_gradients, Activation, DenseNet};

fn main() {
    let net = DenseNet::init(&[4, 6, 3], Activation::Tanh, 1).expect("valid sizes");
    let r = check_gradients(&net, &[0.2, -0.4, 0.9, 0.1], 1e-4).expect("matching widths");
    println!(
        "dense 4-6-3: {} partials, max relative error {:.2e}, passed {}",
        r.checked, r.max_rel_error, r.passed
    );

    let g = Graph::from_rows(
        &[vec![0.5, -0.1], vec![0.2, 0.7], vec![-0.3, 0.4]],
        [vec![0, 1, 2], vec![1, 2, 0]],
        &[vec![1.0], vec![0.0], vec![0.5]],
    )
    .expect("valid graph");
    let params = EncoderParams::init(2, 1, 3, &[5], Activation::Tanh, 2, 3).expect("valid sizes");
    let r = check_encoder_gradients(&g, &params, &Readout::Nodes(vec![2]), 1e-4).expect("matching widths");
    println!(
        "encoder, 2 rounds: {} partials, max relative error {:.2e}, passed {}",
        r.checked, r.max_rel_error, r.passed
    );

    let s = cmd_gradcheck(0, 50, 1e-4).expect("valid configurations");
    println!(
        "50 random configurations: dense {:.2e}, encoder {:.2e}, passed {}",
        s.dense_max_rel_error, s.encoder_max_rel_error, s.passed
    );
}
