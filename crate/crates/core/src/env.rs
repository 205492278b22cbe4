//! The interface shared by the production simulators.

use thiserror::Error;

use crate::encoder::Readout;
use crate::graph::Graph;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("agent {agent}: action {action} is not legal in the current state")]
    IllegalAction { agent: usize, action: usize },
    #[error("expected {expected} actions, got {got}")]
    JointWidth { expected: usize, got: usize },
    #[error("episode already finished")]
    Finished,
}

/// One action per agent, indexed by agent id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointAction(pub Vec<usize>);

impl JointAction {
    pub fn get(&self, agent: usize) -> usize {
        self.0[agent]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// What an agent sees: which embeddings it reads and how raw node features
/// are normalized before encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSpec {
    pub readout: Readout,
    /// Elementwise multiplier over the node feature matrix (row-major).
    pub feature_scale: Vec<f64>,
    pub node_count: usize,
    pub node_width: usize,
    pub edge_width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub rewards: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeOutcome {
    pub steps: u64,
    pub success: bool,
    /// Step at which the production goal was met, when it was met.
    pub makespan: Option<u64>,
}

/// A synchronous multi-agent environment whose state is a graph.
///
/// Every agent acts on every step; an agent with nothing to do receives a
/// mask with a single legal entry.
pub trait MultiAgentEnv {
    fn agent_count(&self) -> usize;
    fn action_count(&self, agent: usize) -> usize;
    fn observation_spec(&self, agent: usize) -> ObservationSpec;
    fn reset(&mut self, seed: u64);
    fn graph(&self) -> Graph;
    fn legal_mask(&self, agent: usize) -> Vec<bool>;
    fn step(&mut self, joint: &JointAction) -> Result<EnvStep, EnvError>;
    fn is_done(&self) -> bool;
    fn outcome(&self) -> EpisodeOutcome;
}
