//! Actor-critic PPO with a masked categorical policy.
//!
//! The policy and value heads are dense networks over a feature vector. When
//! an agent carries a [`GraphFrontend`], the feature vector is the readout of
//! the message-passing encoder and the encoder is trained end to end with both
//! heads.
//!
//! Transitions where the agent had exactly one legal action are recorded but
//! carry no observation. They contribute no policy gradient; their rewards are
//! folded into the preceding decision with per-step discounting, so advantages
//! are computed over decision points only.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{self, EncodeTrace, EncoderError, EncoderParams, Readout};
use crate::graph::Graph;
use crate::nn::{apply_update, Activation, DenseNet, ForwardCache, NetError, OptimizerState, UpdateMode};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("action mask has no legal entry")]
    EmptyMask,
    #[error("mask width {got} != action count {expected}")]
    MaskWidth { expected: usize, got: usize },
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("observation kind does not match the agent's networks")]
    ObservationKind,
    #[error("non-finite loss at epoch {epoch}: policy {policy_loss}, value {value_loss}, entropy {entropy}")]
    NonFiniteLoss {
        epoch: usize,
        policy_loss: f64,
        value_loss: f64,
        entropy: f64,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda_gae: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatch_size: 64,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 3e-4,
            max_grad_norm: 0.5,
        }
    }
}

/// Message-passing encoder plus the readout that produces the agent's features.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFrontend {
    pub encoder: EncoderParams,
    pub readout: Readout,
    /// Elementwise multiplier on the node feature matrix before encoding;
    /// empty means unscaled.
    pub feature_scale: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum Observation {
    Features(Vec<f64>),
    Graph(Arc<Graph>),
    /// Not computed: the agent had a single legal action.
    Forced,
}

/// Policy and value heads, optionally behind a graph encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentNets {
    pub frontend: Option<GraphFrontend>,
    pub policy_net: DenseNet,
    pub value_net: DenseNet,
    pub action_count: usize,
}

/// Gradients for every parameter block of an [`AgentNets`].
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGrads {
    pub policy: Vec<f64>,
    pub value: Vec<f64>,
    pub message: Vec<f64>,
    pub update: Vec<f64>,
}

impl AgentGrads {
    fn zeros(nets: &AgentNets) -> Self {
        let (m, u) = nets.frontend.as_ref().map_or((0, 0), |f| {
            (f.encoder.message_net.param_count(), f.encoder.update_net.param_count())
        });
        Self {
            policy: vec![0.0; nets.policy_net.param_count()],
            value: vec![0.0; nets.value_net.param_count()],
            message: vec![0.0; m],
            update: vec![0.0; u],
        }
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.policy, &mut self.value, &mut self.message, &mut self.update]
    }

    pub fn global_norm(&self) -> f64 {
        [&self.policy, &self.value, &self.message, &self.update]
            .iter()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, s: f64) {
        for block in self.blocks_mut() {
            for g in block.iter_mut() {
                *g *= s;
            }
        }
    }
}

/// Adam state for each parameter block of an [`AgentNets`].
#[derive(Debug, Clone, PartialEq)]
pub struct AgentOptimizer {
    policy: OptimizerState,
    value: OptimizerState,
    message: OptimizerState,
    update: OptimizerState,
}

impl AgentOptimizer {
    pub fn new(nets: &AgentNets) -> Self {
        let (m, u) = nets.frontend.as_ref().map_or((0, 0), |f| {
            (f.encoder.message_net.param_count(), f.encoder.update_net.param_count())
        });
        Self {
            policy: OptimizerState::for_net(&nets.policy_net),
            value: OptimizerState::for_net(&nets.value_net),
            message: OptimizerState::new(m),
            update: OptimizerState::new(u),
        }
    }
}

enum FeatureTrace {
    Plain,
    Graph { graph: Graph, trace: EncodeTrace },
}

fn head_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

impl AgentNets {
    /// Fresh heads over `feature_width` inputs. The policy's output layer is
    /// scaled by 0.01 so the initial policy is close to uniform over legal actions.
    pub fn init(
        frontend: Option<GraphFrontend>,
        feature_width: usize,
        hidden: &[usize],
        activation: Activation,
        action_count: usize,
        seed: u64,
    ) -> Result<Self, NetError> {
        let mut policy_net = DenseNet::init(
            &head_sizes(feature_width, hidden, action_count),
            activation,
            seed,
        )?;
        let last = policy_net.layer_count() - 1;
        for w in policy_net.weights_mut(last) {
            *w *= 0.01;
        }
        let value_net = DenseNet::init(
            &head_sizes(feature_width, hidden, 1),
            activation,
            seed.wrapping_add(0x5eed),
        )?;
        Ok(Self {
            frontend,
            policy_net,
            value_net,
            action_count,
        })
    }

    pub fn feature_width(&self) -> usize {
        self.policy_net.input_width()
    }

    fn features_traced(&self, obs: &Observation) -> Result<(Vec<f64>, FeatureTrace), PpoError> {
        match (obs, &self.frontend) {
            (Observation::Features(x), None) => Ok((x.clone(), FeatureTrace::Plain)),
            (Observation::Graph(g), Some(front)) => {
                let graph = g.scale_node_features(&front.feature_scale);
                let (x, trace) = encoder::encode_readout(&graph, &front.encoder, &front.readout)?;
                Ok((x, FeatureTrace::Graph { graph, trace }))
            }
            _ => Err(PpoError::ObservationKind),
        }
    }

    /// Feature vector fed to both heads.
    pub fn features(&self, obs: &Observation) -> Result<Vec<f64>, PpoError> {
        Ok(self.features_traced(obs)?.0)
    }

    /// `(logits, value)` for an observation.
    pub fn evaluate(&self, obs: &Observation) -> Result<(Vec<f64>, f64), PpoError> {
        let x = self.features(obs)?;
        Ok((self.policy_net.predict(&x)?, self.value_net.predict(&x)?[0]))
    }

    fn check_mask(&self, mask: &[bool]) -> Result<(), PpoError> {
        if mask.len() != self.action_count {
            return Err(PpoError::MaskWidth {
                expected: self.action_count,
                got: mask.len(),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(PpoError::EmptyMask);
        }
        Ok(())
    }
}

/// Log-probabilities of the softmax restricted to legal entries; illegal
/// entries get `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let log_z = max
        + logits
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&l, _)| (l - max).exp())
            .sum::<f64>()
            .ln();
    logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l - log_z } else { f64::NEG_INFINITY })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSample {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
}

/// Samples from the masked categorical policy.
pub fn sample_action(
    nets: &AgentNets,
    obs: &Observation,
    mask: &[bool],
    rng: &mut impl Rng,
) -> Result<ActionSample, PpoError> {
    nets.check_mask(mask)?;
    let (logits, value) = nets.evaluate(obs)?;
    let logp = masked_log_softmax(&logits, mask);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut action = None;
    let mut last_legal = 0;
    for (a, &lp) in logp.iter().enumerate() {
        if !mask[a] {
            continue;
        }
        last_legal = a;
        acc += lp.exp();
        if u < acc {
            action = Some(a);
            break;
        }
    }
    let action = action.unwrap_or(last_legal);
    Ok(ActionSample {
        action,
        log_prob: logp[action],
        value,
    })
}

/// Highest-logit legal action; ties go to the lowest index.
pub fn greedy_action(nets: &AgentNets, obs: &Observation, mask: &[bool]) -> Result<usize, PpoError> {
    nets.check_mask(mask)?;
    let (logits, _) = nets.evaluate(obs)?;
    let mut best: Option<(usize, f64)> = None;
    for (a, &l) in logits.iter().enumerate() {
        if mask[a] && best.is_none_or(|(_, b)| l > b) {
            best = Some((a, l));
        }
    }
    Ok(best.expect("mask checked non-empty").0)
}

/// `R_t = r_t + gamma * R_{t+1}`, restarting after every `done`.
pub fn discounted_returns(rewards: &[f64], dones: &[bool], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        if dones[t] {
            running = 0.0;
        }
        running = rewards[t] + gamma * running;
        out[t] = running;
    }
    out
}

/// Generalized advantage estimation. `values` has one more entry than
/// `rewards`: the bootstrap value after the last transition.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let discounts = vec![gamma; rewards.len()];
    gae_with_discounts(rewards, &discounts, values, dones, lambda)
}

/// GAE where transition `t` discounts its successor by `discounts[t]`.
pub fn gae_with_discounts(
    rewards: &[f64],
    discounts: &[f64],
    values: &[f64],
    dones: &[bool],
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let n = rewards.len();
    if discounts.len() != n || dones.len() != n || values.len() != n + 1 {
        return Err(PpoError::Length(format!(
            "{n} rewards, {} discounts, {} dones, {} values (need rewards + 1)",
            discounts.len(),
            dones.len(),
            values.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + discounts[t] * values[t + 1] * live - values[t];
        next = delta + discounts[t] * lambda * live * next;
        adv[t] = next;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub observation: Observation,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
    pub action_mask: Vec<bool>,
}

impl Transition {
    pub fn is_forced(&self) -> bool {
        matches!(self.observation, Observation::Forced)
    }
}

/// One agent's transitions, possibly spanning several episodes.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryBatch {
    pub transitions: Vec<Transition>,
    /// Value of the state after the last transition; ignored when it is terminal.
    pub bootstrap_value: f64,
}

/// A decision point ready for the PPO loss.
#[derive(Debug, Clone)]
pub struct Sample {
    pub observation: Observation,
    pub action: usize,
    pub mask: Vec<bool>,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub value_target: f64,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        self.transitions.push(t);
    }

    pub fn extend(&mut self, other: TrajectoryBatch) {
        self.transitions.extend(other.transitions);
        self.bootstrap_value = other.bootstrap_value;
    }

    /// Advantages and value targets at decision points. Rewards of forced
    /// steps are discounted into the preceding decision.
    pub fn samples(&self, gamma: f64, lambda: f64) -> Result<Vec<Sample>, PpoError> {
        let ts = &self.transitions;
        let decisions: Vec<usize> = (0..ts.len()).filter(|&i| !ts[i].is_forced()).collect();
        let mut rewards = Vec::with_capacity(decisions.len());
        let mut discounts = Vec::with_capacity(decisions.len());
        let mut dones = Vec::with_capacity(decisions.len());
        let mut values = Vec::with_capacity(decisions.len() + 1);
        for (k, &start) in decisions.iter().enumerate() {
            let stop = decisions.get(k + 1).copied().unwrap_or(ts.len());
            let mut ret = 0.0;
            let mut disc = 1.0;
            let mut done = false;
            for t in &ts[start..stop] {
                ret += disc * t.reward;
                disc *= gamma;
                if t.done {
                    done = true;
                    break;
                }
            }
            rewards.push(ret);
            discounts.push(disc);
            dones.push(done);
            values.push(ts[start].value);
        }
        values.push(self.bootstrap_value);
        let (adv, targets) = gae_with_discounts(&rewards, &discounts, &values, &dones, lambda)?;
        Ok(decisions
            .iter()
            .enumerate()
            .map(|(k, &i)| Sample {
                observation: ts[i].observation.clone(),
                action: ts[i].action,
                mask: ts[i].action_mask.clone(),
                old_log_prob: ts[i].log_prob,
                advantage: adv[k],
                value_target: targets[k],
            })
            .collect())
    }
}

/// Mean loss terms over a set of samples.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Mean loss terms and gradients of
/// `-min(r A, clip(r) A) + value_coef (v - target)^2 - entropy_coef H`
/// averaged over `samples`, without applying any update.
pub fn minibatch_gradients(
    nets: &AgentNets,
    samples: &[&Sample],
    config: &PpoConfig,
) -> Result<(LossTerms, AgentGrads), PpoError> {
    let mut grads = AgentGrads::zeros(nets);
    let mut terms = LossTerms::default();
    if samples.is_empty() {
        return Ok((terms, grads));
    }
    for s in samples {
        let (x, ftrace) = nets.features_traced(&s.observation)?;
        let (logits, pcache): (Vec<f64>, ForwardCache) = nets.policy_net.forward(&x)?;
        let (vout, vcache) = nets.value_net.forward(&x)?;
        let logp = masked_log_softmax(&logits, &s.mask);
        let lp = logp[s.action];
        let ratio = (lp - s.old_log_prob).exp();
        let a = s.advantage;
        let clipped = ratio.clamp(1.0 - config.clip_eps, 1.0 + config.clip_eps);
        let unclipped_obj = ratio * a;
        let clipped_obj = clipped * a;
        terms.policy_loss += -unclipped_obj.min(clipped_obj);
        if (ratio - 1.0).abs() > config.clip_eps {
            terms.clip_fraction += 1.0;
        }
        terms.approx_kl += s.old_log_prob - lp;
        // d(-min(...))/d logp: only the unclipped branch carries gradient.
        let d_logp = if unclipped_obj <= clipped_obj { -ratio * a } else { 0.0 };

        let probs: Vec<f64> = logp.iter().map(|l| if l.is_finite() { l.exp() } else { 0.0 }).collect();
        let entropy: f64 = -probs
            .iter()
            .zip(&logp)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| p * l)
            .sum::<f64>();
        terms.entropy += entropy;

        let mut g_logits = vec![0.0; logits.len()];
        for j in 0..logits.len() {
            if !s.mask[j] {
                continue;
            }
            let onehot = if j == s.action { 1.0 } else { 0.0 };
            let mut g = d_logp * (onehot - probs[j]);
            if probs[j] > 0.0 {
                // -c * dH/dz_j = c * p_j (log p_j + H)
                g += config.entropy_coef * probs[j] * (logp[j] + entropy);
            }
            g_logits[j] = g;
        }

        let v = vout[0];
        let diff = v - s.value_target;
        terms.value_loss += diff * diff;
        let g_value = [2.0 * config.value_coef * diff];

        let gx_p = nets.policy_net.backward_accumulate(&pcache, &g_logits, &mut grads.policy)?;
        let gx_v = nets.value_net.backward_accumulate(&vcache, &g_value, &mut grads.value)?;
        if let (FeatureTrace::Graph { graph, trace }, Some(front)) = (&ftrace, &nets.frontend) {
            let gx: Vec<f64> = gx_p.iter().zip(&gx_v).map(|(a, b)| a + b).collect();
            let full = front.readout.scatter(&gx, graph.node_count(), front.encoder.node_width())?;
            encoder::backward_accumulate(
                graph,
                &front.encoder,
                trace,
                &full,
                &mut grads.message,
                &mut grads.update,
            )?;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    grads.scale(inv);
    terms.policy_loss *= inv;
    terms.value_loss *= inv;
    terms.entropy *= inv;
    terms.clip_fraction *= inv;
    terms.approx_kl *= inv;
    Ok((terms, grads))
}

/// Clips `grads` to `max_norm` by global norm and applies one Adam step.
pub fn apply_agent_grads(
    nets: &mut AgentNets,
    opt: &mut AgentOptimizer,
    mut grads: AgentGrads,
    lr: f64,
    max_norm: f64,
) -> Result<(), PpoError> {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    apply_update(&mut nets.policy_net, &grads.policy, &mut opt.policy, lr, UpdateMode::Adam)?;
    apply_update(&mut nets.value_net, &grads.value, &mut opt.value, lr, UpdateMode::Adam)?;
    if let Some(front) = nets.frontend.as_mut() {
        apply_update(&mut front.encoder.message_net, &grads.message, &mut opt.message, lr, UpdateMode::Adam)?;
        apply_update(&mut front.encoder.update_net, &grads.update, &mut opt.update, lr, UpdateMode::Adam)?;
    }
    Ok(())
}

/// Averages over all minibatches of all epochs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// Clip fraction of the first minibatch, evaluated before any step.
    pub initial_clip_fraction: f64,
    pub approx_kl: f64,
    pub samples: usize,
    pub minibatches: usize,
}

/// Normalizes advantages to zero mean and unit variance unless the variance
/// is below `1e-8`.
pub fn normalize_advantages(samples: &mut [Sample]) {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return;
    }
    let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
    if var < 1e-8 {
        return;
    }
    let std = var.sqrt();
    for s in samples {
        s.advantage = (s.advantage - mean) / std;
    }
}

/// Runs `config.epochs` passes of shuffled minibatch updates over the
/// decision points of `batch`.
pub fn ppo_update(
    nets: &mut AgentNets,
    opt: &mut AgentOptimizer,
    batch: &TrajectoryBatch,
    config: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<UpdateStats, PpoError> {
    if batch.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let mut samples = batch.samples(config.gamma, config.lambda_gae)?;
    let mut stats = UpdateStats {
        samples: samples.len(),
        ..Default::default()
    };
    if samples.is_empty() {
        return Ok(stats);
    }
    normalize_advantages(&mut samples);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mb = config.minibatch_size.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(mb) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (terms, grads) = minibatch_gradients(nets, &refs, config)?;
            if !(terms.policy_loss.is_finite() && terms.value_loss.is_finite() && terms.entropy.is_finite()) {
                return Err(PpoError::NonFiniteLoss {
                    epoch,
                    policy_loss: terms.policy_loss,
                    value_loss: terms.value_loss,
                    entropy: terms.entropy,
                });
            }
            if stats.minibatches == 0 {
                stats.initial_clip_fraction = terms.clip_fraction;
            }
            stats.policy_loss += terms.policy_loss;
            stats.value_loss += terms.value_loss;
            stats.entropy += terms.entropy;
            stats.clip_fraction += terms.clip_fraction;
            stats.approx_kl += terms.approx_kl;
            stats.minibatches += 1;
            apply_agent_grads(nets, opt, grads, config.lr, config.max_grad_norm)?;
        }
    }
    let inv = 1.0 / stats.minibatches.max(1) as f64;
    stats.policy_loss *= inv;
    stats.value_loss *= inv;
    stats.entropy *= inv;
    stats.clip_fraction *= inv;
    stats.approx_kl *= inv;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain_nets(actions: usize, seed: u64) -> AgentNets {
        AgentNets::init(None, 3, &[8], Activation::Tanh, actions, seed).unwrap()
    }

    #[test]
    fn forced_choice_has_zero_log_prob() {
        let nets = plain_nets(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = Observation::Features(vec![0.1, 0.2, 0.3]);
        let s = sample_action(&nets, &obs, &[false, false, true, false], &mut rng).unwrap();
        assert_eq!(s.action, 2);
        assert_eq!(s.log_prob, 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let nets = plain_nets(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = Observation::Features(vec![0.0; 3]);
        assert!(matches!(sample_action(&nets, &obs, &[false, false], &mut rng), Err(PpoError::EmptyMask)));
        assert!(matches!(sample_action(&nets, &obs, &[true], &mut rng), Err(PpoError::MaskWidth { .. })));
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        let mut nets = plain_nets(4, 2);
        nets.policy_net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let obs = Observation::Features(vec![1.0, -1.0, 0.5]);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let s = sample_action(&nets, &obs, &[true; 4], &mut rng).unwrap();
            assert!((s.log_prob - 0.25f64.ln()).abs() < 1e-12);
            counts[s.action] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn masked_actions_never_sampled() {
        let nets = plain_nets(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mask = [true, false, true, false, false];
        let obs = Observation::Features(vec![0.4, 0.4, -0.9]);
        for _ in 0..20_000 {
            let a = sample_action(&nets, &obs, &mask, &mut rng).unwrap().action;
            assert!(mask[a]);
        }
        let lp = masked_log_softmax(&[1.0, 100.0, 2.0, 5.0, 0.0], &mask);
        assert_eq!(lp[1], f64::NEG_INFINITY);
        assert!((lp[0].exp() + lp[2].exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discounted_returns_examples() {
        assert_eq!(discounted_returns(&[1.0, 1.0, 1.0], &[false; 3], 0.5), vec![1.75, 1.5, 1.0]);
        assert_eq!(discounted_returns(&[3.0, -1.0, 2.0], &[false; 3], 0.0), vec![3.0, -1.0, 2.0]);
        assert_eq!(discounted_returns(&[1.0, 1.0], &[true, false], 0.9), vec![1.0, 1.0]);
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let r = [1.0, 0.5, -0.2];
        let v = [0.3, 0.1, 0.7, 0.4];
        let d = [false, false, false];
        let (adv, targets) = gae_advantages(&r, &v, &d, 0.9, 0.0).unwrap();
        for t in 0..3 {
            let delta = r[t] + 0.9 * v[t + 1] - v[t];
            assert!((adv[t] - delta).abs() < 1e-15);
            assert!((targets[t] - (delta + v[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_lambda_one_zero_values_is_returns() {
        let r = [1.0, 2.0, 0.5, -1.0];
        let d = [false, true, false, false];
        let (adv, _) = gae_advantages(&r, &[0.0; 5], &d, 0.8, 1.0).unwrap();
        assert_eq!(adv, discounted_returns(&r, &d, 0.8));
    }

    #[test]
    fn gae_rejects_length_mismatch() {
        assert!(gae_advantages(&[1.0], &[0.0], &[false], 0.9, 0.9).is_err());
    }

    #[test]
    fn forced_steps_fold_into_previous_decision() {
        let mut batch = TrajectoryBatch::default();
        let decision = |r: f64, v: f64, done: bool| Transition {
            observation: Observation::Features(vec![0.0; 3]),
            action: 0,
            log_prob: -0.7,
            reward: r,
            value: v,
            done,
            action_mask: vec![true, true],
        };
        let forced = |r: f64, done: bool| Transition {
            observation: Observation::Forced,
            action: 1,
            log_prob: 0.0,
            reward: r,
            value: 0.0,
            done,
            action_mask: vec![false, true],
        };
        batch.push(decision(1.0, 0.5, false));
        batch.push(forced(2.0, false));
        batch.push(forced(4.0, false));
        batch.push(decision(8.0, 0.25, true));
        let g: f64 = 0.5;
        let s = batch.samples(g, 1.0).unwrap();
        assert_eq!(s.len(), 2);
        // second decision: terminal, A = 8 - 0.25
        assert!((s[1].advantage - 7.75).abs() < 1e-12);
        // first: R = 1 + 0.5*2 + 0.25*4 = 3, discount 0.125 to the next decision
        let delta = 3.0 + 0.125 * 0.25 - 0.5;
        assert!((s[0].advantage - (delta + 0.125 * 7.75)).abs() < 1e-12);
    }

    #[test]
    fn ratio_one_gives_vanilla_policy_gradient() {
        let nets = plain_nets(3, 9);
        let obs = Observation::Features(vec![0.2, -0.4, 0.6]);
        let mask = vec![true, true, true];
        let (logits, _) = nets.evaluate(&obs).unwrap();
        let lp = masked_log_softmax(&logits, &mask);
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            value_coef: 0.0,
            ..Default::default()
        };
        let s = Sample {
            observation: obs,
            action: 1,
            mask,
            old_log_prob: lp[1],
            advantage: 1.7,
            value_target: 0.0,
        };
        let (terms, _) = minibatch_gradients(&nets, &[&s], &cfg).unwrap();
        assert!((terms.policy_loss + 1.7).abs() < 1e-12);
        assert_eq!(terms.clip_fraction, 0.0);
    }

    #[test]
    fn zero_advantage_leaves_only_value_and_entropy() {
        let nets = plain_nets(2, 4);
        let obs = Observation::Features(vec![0.5, 0.5, 0.5]);
        let (logits, _) = nets.evaluate(&obs).unwrap();
        let lp = masked_log_softmax(&logits, &[true, true]);
        let mut samples: Vec<Sample> = (0..4)
            .map(|i| Sample {
                observation: obs.clone(),
                action: i % 2,
                mask: vec![true, true],
                old_log_prob: lp[i % 2],
                advantage: 0.0,
                value_target: 1.0,
            })
            .collect();
        normalize_advantages(&mut samples);
        assert!(samples.iter().all(|s| s.advantage == 0.0));
        let refs: Vec<&Sample> = samples.iter().collect();
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            ..Default::default()
        };
        let (terms, grads) = minibatch_gradients(&nets, &refs, &cfg).unwrap();
        assert_eq!(terms.policy_loss, 0.0);
        assert!(grads.policy.iter().all(|&g| g == 0.0));
        assert!(grads.value.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn hand_derived_gradient_two_action_linear_policy() {
        // policy: logits = W x + b with W 2x1; value: v = u x + c.
        let policy = DenseNet::from_params(&[1, 2], Activation::Identity, vec![0.3, -0.2, 0.1, 0.05]).unwrap();
        let value = DenseNet::from_params(&[1, 1], Activation::Identity, vec![0.4, 0.1]).unwrap();
        let nets = AgentNets {
            frontend: None,
            policy_net: policy,
            value_net: value,
            action_count: 2,
        };
        let x: f64 = 2.0;
        let (a, adv, target) = (0usize, 0.8, 1.5);
        let cfg = PpoConfig::default();
        let z = [0.3 * x + 0.1, -0.2 * x + 0.05];
        let p0 = 1.0 / (1.0 + (z[1] - z[0]).exp());
        let p = [p0, 1.0 - p0];
        let h = -(p[0] * p[0].ln() + p[1] * p[1].ln());
        let old_lp = p[a].ln();
        // ratio = 1, unclipped branch: dL/dz_j = -A (1[j=a] - p_j) + c_e p_j (ln p_j + H)
        let g: Vec<f64> = (0..2)
            .map(|j| {
                let onehot = if j == a { 1.0 } else { 0.0 };
                -adv * (onehot - p[j]) + cfg.entropy_coef * p[j] * (p[j].ln() + h)
            })
            .collect();
        let v = 0.4 * x + 0.1;
        let gv = 2.0 * cfg.value_coef * (v - target);
        let expected_policy = [g[0] * x, g[1] * x, g[0], g[1]];
        let expected_value = [gv * x, gv];

        let s = Sample {
            observation: Observation::Features(vec![x]),
            action: a,
            mask: vec![true, true],
            old_log_prob: old_lp,
            advantage: adv,
            value_target: target,
        };
        let (_, grads) = minibatch_gradients(&nets, &[&s], &cfg).unwrap();
        for (got, want) in grads.policy.iter().zip(expected_policy) {
            assert!((got - want).abs() < 1e-6);
        }
        for (got, want) in grads.value.iter().zip(expected_value) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn first_minibatch_has_no_clipping() {
        let mut nets = plain_nets(3, 6);
        let mut opt = AgentOptimizer::new(&nets);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut batch = TrajectoryBatch::default();
        for i in 0..40 {
            let obs = Observation::Features(vec![i as f64 / 40.0, 0.5, -0.5]);
            let mask = vec![true; 3];
            let s = sample_action(&nets, &obs, &mask, &mut rng).unwrap();
            batch.push(Transition {
                observation: obs,
                action: s.action,
                log_prob: s.log_prob,
                reward: if s.action == 0 { 1.0 } else { 0.0 },
                value: s.value,
                done: i % 10 == 9,
                action_mask: mask,
            });
        }
        let stats = ppo_update(&mut nets, &mut opt, &batch, &PpoConfig::default(), &mut rng).unwrap();
        assert_eq!(stats.initial_clip_fraction, 0.0);
        assert_eq!(stats.samples, 40);
        assert!(stats.minibatches >= 4);
    }
}
