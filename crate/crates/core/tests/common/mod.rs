#![allow(dead_code)]

use rand::Rng;
use shopgraph::env::{JointAction, MultiAgentEnv};

pub fn random_legal(mask: &[bool], rng: &mut impl Rng) -> usize {
    let legal: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
    legal[rng.random_range(0..legal.len())]
}

pub fn random_joint(env: &dyn MultiAgentEnv, rng: &mut impl Rng) -> JointAction {
    JointAction(
        (0..env.agent_count())
            .map(|k| random_legal(&env.legal_mask(k), rng))
            .collect(),
    )
}

pub fn random_permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}
