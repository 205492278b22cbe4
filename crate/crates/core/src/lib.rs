//! Job shop scheduling with graph message passing and one PPO learner per
//! resource.

pub mod agents;
pub mod dispatch;
pub mod encoder;
pub mod env;
pub mod graph;
pub mod harness;
pub mod imm;
pub mod nn;
pub mod ppo;
pub mod rmc;
