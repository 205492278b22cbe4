//! Independent learners on a shared environment.
//!
//! Every agent owns its encoder, heads and optimizer. Agents see the same
//! environment graph through their own encoder and readout, act under their
//! own mask and learn from their own reward; nothing else passes between them.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, EncoderParams};
use crate::env::{EnvError, EpisodeOutcome, JointAction, MultiAgentEnv, ObservationSpec};
use crate::nn::{Activation, NetError};
use crate::ppo::{
    greedy_action, ppo_update, sample_action, AgentNets, AgentOptimizer, GraphFrontend, Observation, PpoConfig,
    PpoError, TrajectoryBatch, Transition, UpdateStats,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("episode {episode}, step {step}: {source}")]
    Env {
        episode: u64,
        step: u64,
        source: EnvError,
    },
    #[error("agent {agent}: {source}")]
    Agent { agent: usize, source: PpoError },
    #[error("agent {agent}: expected {expected} actions, environment declares {got}")]
    ActionSpace { agent: usize, expected: usize, got: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Independent seed for component `stream` of a run rooted at `root`.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Stream ids for [`derive_seed`].
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const ENV: u64 = 4;
    pub const EVAL: u64 = 5;
    /// Per-agent streams start here, `AGENT_BASE + 16 * agent + component`.
    pub const AGENT_BASE: u64 = 1 << 16;
}

fn agent_stream(agent: usize, component: u64) -> u64 {
    streams::AGENT_BASE + 16 * agent as u64 + component
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Message-passing rounds `T`.
    pub rounds: usize,
    pub message_width: usize,
    /// Hidden layers of the message and update networks.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            message_width: 8,
            hidden: vec![16],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Hidden layers of the policy and value networks.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub episodes: u64,
    /// Greedy evaluation period in episodes; 0 disables evaluation.
    pub eval_every: u64,
    pub eval_episodes: u64,
    /// Episodes collected between PPO updates.
    pub episodes_per_update: u64,
    /// Root seed; set by the caller, never read from a file.
    #[serde(skip)]
    pub seed: u64,
    /// Stop once an evaluation reaches this success rate.
    pub target_success: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            episodes: 1000,
            eval_every: 50,
            eval_episodes: 1,
            episodes_per_update: 1,
            seed: 0,
            target_success: None,
        }
    }
}

/// One learner.
#[derive(Debug, Clone)]
pub struct AgentBinding {
    pub agent_id: usize,
    pub spec: ObservationSpec,
    pub action_space: usize,
    pub nets: AgentNets,
    pub optimizer: AgentOptimizer,
    /// Transitions collected since the last update.
    pub trajectory: TrajectoryBatch,
    sample_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
}

impl AgentBinding {
    pub fn new(agent_id: usize, spec: ObservationSpec, action_space: usize, nets: AgentNets, seed: u64) -> Self {
        let optimizer = AgentOptimizer::new(&nets);
        Self {
            agent_id,
            spec,
            action_space,
            nets,
            optimizer,
            trajectory: TrajectoryBatch::default(),
            sample_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, agent_stream(agent_id, streams::SAMPLE))),
            shuffle_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, agent_stream(agent_id, streams::SHUFFLE))),
        }
    }

    /// Restarts the action-sampling stream from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, agent_stream(self.agent_id, streams::SAMPLE)));
    }
}

/// Fresh learners for every agent of `env`.
pub fn build_bindings(
    env: &dyn MultiAgentEnv,
    encoder: &EncoderConfig,
    heads: &HeadConfig,
    seed: u64,
) -> Result<Vec<AgentBinding>, TrainError> {
    (0..env.agent_count())
        .map(|i| {
            let spec = env.observation_spec(i);
            let init = derive_seed(seed, agent_stream(i, streams::INIT));
            let params = EncoderParams::init(
                spec.node_width,
                spec.edge_width,
                encoder.message_width,
                &encoder.hidden,
                encoder.activation,
                encoder.rounds,
                init,
            )?;
            let width = spec.readout.width(spec.node_count, spec.node_width);
            let frontend = GraphFrontend {
                encoder: params,
                readout: spec.readout.clone(),
                feature_scale: spec.feature_scale.clone(),
            };
            let actions = env.action_count(i);
            let nets = AgentNets::init(
                Some(frontend),
                width,
                &heads.hidden,
                heads.activation,
                actions,
                init.wrapping_add(2),
            )?;
            Ok(AgentBinding::new(i, spec, actions, nets, seed))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// Sample from the policy and record transitions.
    Sample,
    /// Sample without recording.
    SampleOnly,
    /// Highest-probability legal action.
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub outcome: EpisodeOutcome,
    pub returns: Vec<f64>,
}

fn single_legal(mask: &[bool]) -> Option<usize> {
    let mut it = mask.iter().enumerate().filter(|p| *p.1);
    match (it.next(), it.next()) {
        (Some((a, _)), None) => Some(a),
        _ => None,
    }
}

/// Runs one episode. In [`ActionMode::Sample`] each agent appends one
/// transition per step to its `trajectory`; steps where an agent had a single
/// legal action are recorded without an observation.
pub fn collect_episode(
    env: &mut dyn MultiAgentEnv,
    bindings: &mut [AgentBinding],
    mode: ActionMode,
    episode: u64,
    env_seed: u64,
) -> Result<EpisodeResult, TrainError> {
    for b in bindings.iter() {
        let declared = env.action_count(b.agent_id);
        if declared != b.action_space {
            return Err(TrainError::ActionSpace {
                agent: b.agent_id,
                expected: b.action_space,
                got: declared,
            });
        }
    }
    env.reset(env_seed);
    let mut returns = vec![0.0; bindings.len()];
    let mut step = 0u64;
    let mut pending: Vec<Transition> = Vec::with_capacity(bindings.len());
    while !env.is_done() {
        let graph = Arc::new(env.graph());
        let mut joint = Vec::with_capacity(bindings.len());
        pending.clear();
        for b in bindings.iter_mut() {
            let mask = env.legal_mask(b.agent_id);
            let agent = b.agent_id;
            let wrap = |source| TrainError::Agent { agent, source };
            let (action, observation, log_prob, value) = if let Some(a) = single_legal(&mask) {
                (a, Observation::Forced, 0.0, 0.0)
            } else {
                let obs = Observation::Graph(Arc::clone(&graph));
                match mode {
                    ActionMode::Greedy => (greedy_action(&b.nets, &obs, &mask).map_err(wrap)?, obs, 0.0, 0.0),
                    _ => {
                        let s = sample_action(&b.nets, &obs, &mask, &mut b.sample_rng).map_err(wrap)?;
                        (s.action, obs, s.log_prob, s.value)
                    }
                }
            };
            joint.push(action);
            if mode == ActionMode::Sample {
                pending.push(Transition {
                    observation,
                    action,
                    log_prob,
                    reward: 0.0,
                    value,
                    done: false,
                    action_mask: mask,
                });
            }
        }
        let out = env
            .step(&JointAction(joint))
            .map_err(|source| TrainError::Env { episode, step, source })?;
        step += 1;
        for (i, r) in out.rewards.iter().enumerate() {
            returns[i] += r;
        }
        if mode == ActionMode::Sample {
            for (b, mut t) in bindings.iter_mut().zip(pending.drain(..)) {
                t.reward = out.rewards[b.agent_id];
                t.done = out.done;
                b.trajectory.push(t);
            }
        }
    }
    if mode == ActionMode::Sample {
        for b in bindings.iter_mut() {
            b.trajectory.bootstrap_value = 0.0;
        }
    }
    Ok(EpisodeResult {
        outcome: env.outcome(),
        returns,
    })
}

/// Runs one PPO update per agent on its collected trajectory, in parallel,
/// and clears the trajectories.
pub fn update_agents(bindings: &mut [AgentBinding], config: &PpoConfig) -> Result<Vec<UpdateStats>, TrainError> {
    bindings
        .par_iter_mut()
        .map(|b| {
            let batch = std::mem::take(&mut b.trajectory);
            if batch.is_empty() {
                return Ok(UpdateStats::default());
            }
            ppo_update(&mut b.nets, &mut b.optimizer, &batch, config, &mut b.shuffle_rng)
                .map_err(|source| TrainError::Agent { agent: b.agent_id, source })
        })
        .collect()
}

/// Greedy (or sampled) rollouts without learning.
pub fn evaluate(
    env: &mut dyn MultiAgentEnv,
    bindings: &mut [AgentBinding],
    episodes: u64,
    seed: u64,
    mode: ActionMode,
) -> Result<Vec<EpisodeResult>, TrainError> {
    let mode = if mode == ActionMode::Sample { ActionMode::SampleOnly } else { mode };
    (0..episodes)
        .map(|e| collect_episode(env, bindings, mode, e, derive_seed(seed, streams::EVAL + e * 64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub episode: u64,
    pub agent_id: usize,
    pub episode_return: f64,
    pub episode_steps: u64,
    pub success: bool,
    pub makespan: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub episode: u64,
    pub agent_id: usize,
    pub stats: UpdateStats,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub episode: u64,
    pub episodes: u64,
    pub success_rate: f64,
    pub mean_makespan: Option<f64>,
    pub mean_steps: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub curves: Vec<CurveRow>,
    pub log: Vec<LogRow>,
    pub evals: Vec<EvalRow>,
    /// Episodes actually run.
    pub episodes: u64,
}

fn summarize_eval(episode: u64, results: &[EpisodeResult]) -> EvalRow {
    let n = results.len().max(1) as f64;
    let done: Vec<u64> = results.iter().filter_map(|r| r.outcome.makespan).collect();
    EvalRow {
        episode,
        episodes: results.len() as u64,
        success_rate: results.iter().filter(|r| r.outcome.success).count() as f64 / n,
        mean_makespan: (!done.is_empty()).then(|| done.iter().sum::<u64>() as f64 / done.len() as f64),
        mean_steps: results.iter().map(|r| r.outcome.steps as f64).sum::<f64>() / n,
    }
}

/// Alternates episode collection and per-agent PPO updates. `on_eval` sees
/// every evaluation as it happens.
pub fn train(
    env: &mut dyn MultiAgentEnv,
    bindings: &mut [AgentBinding],
    config: &PpoConfig,
    schedule: &Schedule,
    mut on_eval: impl FnMut(&EvalRow),
) -> Result<TrainReport, TrainError> {
    let mut report = TrainReport::default();
    let per_update = schedule.episodes_per_update.max(1);
    let mut since_update: Vec<(f64, u64)> = vec![(0.0, 0); bindings.len()];
    for episode in 0..schedule.episodes {
        let env_seed = derive_seed(schedule.seed, streams::ENV + 64 * episode);
        let res = collect_episode(env, bindings, ActionMode::Sample, episode, env_seed)?;
        for (i, &ret) in res.returns.iter().enumerate() {
            report.curves.push(CurveRow {
                episode,
                agent_id: i,
                episode_return: ret,
                episode_steps: res.outcome.steps,
                success: res.outcome.success,
                makespan: res.outcome.makespan,
            });
            since_update[i].0 += ret;
            since_update[i].1 += 1;
        }
        report.episodes = episode + 1;
        if (episode + 1) % per_update == 0 || episode + 1 == schedule.episodes {
            let stats = update_agents(bindings, config)?;
            for (i, s) in stats.into_iter().enumerate() {
                let (sum, n) = std::mem::take(&mut since_update[i]);
                report.log.push(LogRow {
                    episode,
                    agent_id: i,
                    stats: s,
                    mean_return: sum / n.max(1) as f64,
                });
            }
        }
        if schedule.eval_every > 0 && (episode + 1) % schedule.eval_every == 0 {
            let results = evaluate(env, bindings, schedule.eval_episodes.max(1), schedule.seed, ActionMode::Greedy)?;
            let row = summarize_eval(episode, &results);
            on_eval(&row);
            let hit = schedule.target_success.is_some_and(|t| row.success_rate >= t);
            report.evals.push(row);
            if hit {
                break;
            }
        }
    }
    Ok(report)
}
