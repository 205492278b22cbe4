//! Injection molding shop: jobs with individual machine sequences, one
//! selecting agent per machine.
//!
//! Nodes are `IB`, `M_1..M_m`, `MB_1..MB_m`, `OB` (ids `0`, `1..=m`,
//! `m+1..=2m`, `2m+1`). Every job starts at `IB`; on the first tick all jobs
//! move into the buffer of their first machine. An idle machine picks one job
//! from its buffer. A job that finishes an operation moves into the buffer of
//! its next machine, or to `OB` after its last one.
//!
//! A tick runs in this order: selected jobs load, timers count down, jobs
//! whose timer reached zero leave their machine.

pub mod instance;
pub mod trace;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderError, EncoderParams, Readout};
use crate::env::{EnvError, EnvStep, EpisodeOutcome, JointAction, MultiAgentEnv, ObservationSpec};
use crate::graph::{Graph, Matrix};
pub use instance::{ImmInstance, JobSpec};
pub use trace::{makespan, validate_schedule, TraceRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImmConfig {
    pub max_steps: u32,
    pub completion_bonus: f64,
    pub step_penalty: f64,
    pub terminal_scale: f64,
}

impl Default for ImmConfig {
    fn default() -> Self {
        Self {
            max_steps: 3000,
            completion_bonus: 1.0,
            step_penalty: 0.01,
            terminal_scale: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Location {
    Input,
    Buffer(usize),
    Machine(usize),
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct JobState {
    /// Completed operations; equals the machine count once finished.
    pub stage: usize,
    pub location: Location,
    /// Tick at which the job entered its current buffer.
    pub arrival: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Busy {
    pub job: usize,
    pub remaining: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImmState {
    pub jobs: Vec<JobState>,
    pub machines: Vec<Option<Busy>>,
    pub step: u32,
}

impl ImmState {
    pub fn reset(instance: &ImmInstance) -> Self {
        Self {
            jobs: vec![
                JobState {
                    stage: 0,
                    location: Location::Input,
                    arrival: 0,
                };
                instance.job_count()
            ],
            machines: vec![None; instance.machine_count],
            step: 0,
        }
    }

    pub fn finished_count(&self) -> usize {
        self.jobs.iter().filter(|j| j.location == Location::Output).count()
    }

    pub fn all_finished(&self) -> bool {
        self.finished_count() == self.jobs.len()
    }

    /// Whether `job` is ready to start on `machine`. Jobs still at `IB` count
    /// as waiting in their first machine's buffer.
    pub fn waits_for(&self, job: usize, machine: usize, instance: &ImmInstance) -> bool {
        match self.jobs[job].location {
            Location::Buffer(k) => k == machine,
            Location::Input => instance.jobs[job].machines[0] == machine,
            _ => false,
        }
    }

    /// Jobs in `machine`'s buffer, ascending by id.
    pub fn buffer(&self, machine: usize, instance: &ImmInstance) -> Vec<usize> {
        (0..self.jobs.len())
            .filter(|&j| self.waits_for(j, machine, instance))
            .collect()
    }
}

pub fn ib_node() -> usize {
    0
}

pub fn machine_node(k: usize) -> usize {
    1 + k
}

pub fn buffer_node(k: usize, machine_count: usize) -> usize {
    1 + machine_count + k
}

pub fn ob_node(machine_count: usize) -> usize {
    1 + 2 * machine_count
}

pub fn node_count(machine_count: usize) -> usize {
    2 + 2 * machine_count
}

/// Feature width shared by all nodes: the job count, at least 2.
pub fn feature_width(instance: &ImmInstance) -> usize {
    instance.job_count().max(2)
}

/// Node features: `IB` one-hot of the lowest-id job still there, machines
/// `[job + 1, remaining, 0, ...]`, buffers and `OB` per-job counts. One edge
/// per unfinished job from its location to its next requirement, with a
/// one-hot job attribute, in ascending job order.
pub fn to_graph(state: &ImmState, instance: &ImmInstance) -> Graph {
    let m = instance.machine_count;
    let n = instance.job_count();
    let w = feature_width(instance);
    let mut x = Matrix::zeros(node_count(m), w);
    if let Some(j) = state.jobs.iter().position(|j| j.location == Location::Input) {
        x.row_mut(ib_node())[j] = 1.0;
    }
    for (k, busy) in state.machines.iter().enumerate() {
        if let Some(b) = busy {
            let row = x.row_mut(machine_node(k));
            row[0] = (b.job + 1) as f64;
            row[1] = f64::from(b.remaining);
        }
    }
    let mut senders = Vec::new();
    let mut receivers = Vec::new();
    let mut attrs = Vec::new();
    for (j, js) in state.jobs.iter().enumerate() {
        let seq = &instance.jobs[j].machines;
        let (from, to) = match js.location {
            Location::Output => {
                x.row_mut(ob_node(m))[j] += 1.0;
                continue;
            }
            Location::Input => (ib_node(), buffer_node(seq[0], m)),
            Location::Buffer(k) => {
                x.row_mut(buffer_node(k, m))[j] += 1.0;
                (buffer_node(k, m), machine_node(k))
            }
            Location::Machine(k) => {
                let to = match seq.get(js.stage + 1) {
                    Some(&next) => buffer_node(next, m),
                    None => ob_node(m),
                };
                (machine_node(k), to)
            }
        };
        senders.push(from);
        receivers.push(to);
        let mut a = vec![0.0; n.max(1)];
        a[j] = 1.0;
        attrs.push(a);
    }
    let attrs = Matrix::from_rows(&attrs, n.max(1)).expect("one-hot rows have equal width");
    Graph::new(x, [senders, receivers], attrs).expect("node ids are in range")
}

/// Legal selections of `machine`: jobs `0..n` waiting for it while it is
/// idle, and the no-op `n` only when no job is selectable.
pub fn legal_mask(state: &ImmState, instance: &ImmInstance, machine: usize) -> Vec<bool> {
    let n = instance.job_count();
    let mut mask = vec![false; n + 1];
    if state.machines[machine].is_none() {
        for j in 0..n {
            mask[j] = state.waits_for(j, machine, instance);
        }
    }
    if !mask.iter().any(|&b| b) {
        mask[n] = true;
    }
    mask
}

/// Embedding of `MB_machine` after encoding the state graph.
pub fn agent_observation(
    state: &ImmState,
    instance: &ImmInstance,
    params: &EncoderParams,
    machine: usize,
) -> Result<Vec<f64>, EncoderError> {
    let g = to_graph(state, instance);
    let readout = Readout::Nodes(vec![buffer_node(machine, instance.machine_count)]);
    Ok(encoder::encode_readout(&g, params, &readout)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImmStep {
    pub state: ImmState,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub rows: Vec<TraceRow>,
}

/// Advances one tick. `selections[k]` is machine `k`'s action.
pub fn step(
    state: &ImmState,
    selections: &[usize],
    instance: &ImmInstance,
    config: &ImmConfig,
) -> Result<ImmStep, EnvError> {
    let m = instance.machine_count;
    let n = instance.job_count();
    if selections.len() != m {
        return Err(EnvError::JointWidth {
            expected: m,
            got: selections.len(),
        });
    }
    for (k, &a) in selections.iter().enumerate() {
        if a > n || !legal_mask(state, instance, k)[a] {
            return Err(EnvError::IllegalAction { agent: k, action: a });
        }
    }
    let mut next = state.clone();
    next.step += 1;
    let t = next.step;
    for (j, js) in next.jobs.iter_mut().enumerate() {
        if js.location == Location::Input {
            js.location = Location::Buffer(instance.jobs[j].machines[0]);
            js.arrival = 0;
        }
    }
    let mut loaded = vec![None; m];
    for (k, &a) in selections.iter().enumerate() {
        if a < n {
            let stage = next.jobs[a].stage;
            next.jobs[a].location = Location::Machine(k);
            next.machines[k] = Some(Busy {
                job: a,
                remaining: instance.jobs[a].times[stage],
            });
            loaded[k] = Some(a);
        }
    }
    let mut completed = vec![None; m];
    for k in 0..m {
        let Some(busy) = next.machines[k].as_mut() else { continue };
        busy.remaining -= 1;
        if busy.remaining > 0 {
            continue;
        }
        let j = busy.job;
        next.machines[k] = None;
        let js = &mut next.jobs[j];
        js.stage += 1;
        js.location = match instance.jobs[j].machines.get(js.stage) {
            Some(&nm) => Location::Buffer(nm),
            None => Location::Output,
        };
        js.arrival = t;
        completed[k] = Some(j);
    }
    let finished = next.all_finished();
    let mut rewards: Vec<f64> = completed
        .iter()
        .map(|c| config.completion_bonus * f64::from(u8::from(c.is_some())) - config.step_penalty)
        .collect();
    if finished {
        let bonus = config.terminal_scale * f64::from(instance.lower_bound()) / f64::from(t);
        rewards.iter_mut().for_each(|r| *r += bonus);
    }
    let rows = (0..m)
        .map(|k| TraceRow {
            step: t,
            machine: k,
            action: selections[k],
            loaded: loaded[k],
            completed: completed[k],
            buffer_len: next.buffer(k, instance).len(),
        })
        .collect();
    Ok(ImmStep {
        done: finished || t >= config.max_steps,
        state: next,
        rewards,
        rows,
    })
}

/// [`MultiAgentEnv`] wrapper; agent `k` controls machine `k`.
#[derive(Debug, Clone)]
pub struct ImmEnv {
    instance: ImmInstance,
    config: ImmConfig,
    state: ImmState,
    done: bool,
    trace: Vec<TraceRow>,
}

impl ImmEnv {
    pub fn new(instance: ImmInstance, config: ImmConfig) -> Self {
        let state = ImmState::reset(&instance);
        Self {
            instance,
            config,
            state,
            done: false,
            trace: Vec::new(),
        }
    }

    pub fn instance(&self) -> &ImmInstance {
        &self.instance
    }

    pub fn config(&self) -> &ImmConfig {
        &self.config
    }

    pub fn state(&self) -> &ImmState {
        &self.state
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    /// Scales machine slots by the job count and the longest processing time;
    /// count features are already 0/1.
    pub fn feature_scale(&self) -> Vec<f64> {
        let w = feature_width(&self.instance);
        let m = self.instance.machine_count;
        let max_t = self
            .instance
            .jobs
            .iter()
            .flat_map(|j| j.times.iter().copied())
            .max()
            .unwrap_or(1);
        let mut s = vec![1.0; node_count(m) * w];
        for k in 0..m {
            let row = machine_node(k) * w;
            s[row] = 1.0 / self.instance.job_count().max(1) as f64;
            s[row + 1] = 1.0 / f64::from(max_t);
        }
        s
    }
}

impl MultiAgentEnv for ImmEnv {
    fn agent_count(&self) -> usize {
        self.instance.machine_count
    }

    fn action_count(&self, _agent: usize) -> usize {
        self.instance.job_count() + 1
    }

    fn observation_spec(&self, agent: usize) -> ObservationSpec {
        let m = self.instance.machine_count;
        ObservationSpec {
            readout: Readout::Nodes(vec![buffer_node(agent, m)]),
            feature_scale: self.feature_scale(),
            node_count: node_count(m),
            node_width: feature_width(&self.instance),
            edge_width: self.instance.job_count().max(1),
        }
    }

    fn reset(&mut self, _seed: u64) {
        self.state = ImmState::reset(&self.instance);
        self.done = false;
        self.trace.clear();
    }

    fn graph(&self) -> Graph {
        to_graph(&self.state, &self.instance)
    }

    fn legal_mask(&self, agent: usize) -> Vec<bool> {
        legal_mask(&self.state, &self.instance, agent)
    }

    fn step(&mut self, joint: &JointAction) -> Result<EnvStep, EnvError> {
        if self.done {
            return Err(EnvError::Finished);
        }
        let out = step(&self.state, &joint.0, &self.instance, &self.config)?;
        self.state = out.state;
        self.done = out.done;
        self.trace.extend(out.rows);
        Ok(EnvStep {
            rewards: out.rewards,
            done: out.done,
        })
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn outcome(&self) -> EpisodeOutcome {
        let success = self.state.all_finished();
        EpisodeOutcome {
            steps: u64::from(self.state.step),
            success,
            makespan: success.then(|| u64::from(makespan(&self.trace, &self.instance).unwrap_or(0))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::instance::shipped_instance;
    use super::*;
    use crate::nn::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn first_legal(mask: &[bool]) -> usize {
        mask.iter().position(|&b| b).unwrap()
    }

    fn run(env: &mut ImmEnv, mut pick: impl FnMut(&[bool]) -> usize) {
        while !env.is_done() {
            let joint = (0..env.agent_count()).map(|k| pick(&env.legal_mask(k))).collect();
            env.step(&JointAction(joint)).unwrap();
        }
    }

    #[test]
    fn reset_graph_has_one_edge_per_job_from_ib() {
        let inst = shipped_instance();
        let g = to_graph(&ImmState::reset(&inst), &inst);
        assert_eq!(g.node_count(), 10);
        assert_eq!(g.node_width(), 30);
        assert_eq!(g.edge_count(), 30);
        assert!(g.senders().iter().all(|&s| s == ib_node()));
        // Job 1 starts on M2.
        assert_eq!(g.edge(1), (ib_node(), buffer_node(1, 4)));
        assert_eq!(g.edge_attrs().row(1)[1], 1.0);
        assert_eq!(g.edge_attrs().row(1).iter().sum::<f64>(), 1.0);
        assert_eq!(g.node_features().row(ib_node())[0], 1.0);
    }

    #[test]
    fn single_job_makespan_is_its_length() {
        let one = shipped_instance().subset(&[1]).unwrap();
        let mut env = ImmEnv::new(one.clone(), ImmConfig::default());
        run(&mut env, first_legal);
        let out = env.outcome();
        assert_eq!(out.makespan, Some(56));
        assert_eq!(makespan(env.trace(), &one), Some(56));
        assert_eq!(one.lower_bound(), 56);
        assert!(validate_schedule(env.trace(), &one).is_valid());
    }

    #[test]
    fn terminal_graph_is_edgeless() {
        let inst = shipped_instance().subset(&[0, 1, 2]).unwrap();
        let mut env = ImmEnv::new(inst, ImmConfig::default());
        run(&mut env, first_legal);
        let g = env.graph();
        assert_eq!(g.edge_count(), 0);
        let ob = ob_node(4);
        assert_eq!(g.node_features().row(ob).iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn step_cap_ends_unfinished_episode() {
        let inst = shipped_instance();
        let cfg = ImmConfig {
            max_steps: 50,
            ..ImmConfig::default()
        };
        let mut s = ImmState::reset(&inst);
        // No-op is not selectable while a job waits for an idle machine.
        assert!(step(&s, &[30, 30, 30, 30], &inst, &cfg).is_err());
        let mut steps = 0;
        loop {
            let sel: Vec<usize> = (0..4).map(|k| first_legal(&legal_mask(&s, &inst, k))).collect();
            let out = step(&s, &sel, &inst, &cfg).unwrap();
            s = out.state;
            steps += 1;
            if out.done {
                break;
            }
        }
        assert_eq!(steps, 50);
        assert!(!s.all_finished());
    }

    #[test]
    fn busy_machine_only_noop() {
        let inst = shipped_instance();
        let s = ImmState::reset(&inst);
        let mask = legal_mask(&s, &inst, 1);
        assert!(mask[1] && !mask[30]);
        let out = step(&s, &[first_legal(&legal_mask(&s, &inst, 0)), 1, first_legal(&legal_mask(&s, &inst, 2)), first_legal(&legal_mask(&s, &inst, 3))], &inst, &ImmConfig::default()).unwrap();
        let mask = legal_mask(&out.state, &inst, 1);
        assert_eq!(mask.iter().filter(|&&b| b).count(), 1);
        assert!(mask[30]);
    }

    #[test]
    fn random_rollout_is_valid_and_conserves_jobs() {
        let inst = shipped_instance();
        let mut env = ImmEnv::new(inst.clone(), ImmConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut last_stage = vec![0; 30];
        while !env.is_done() {
            let joint = (0..4)
                .map(|k| {
                    let legal: Vec<usize> = env.legal_mask(k).iter().enumerate().filter(|p| *p.1).map(|p| p.0).collect();
                    legal[rng.random_range(0..legal.len())]
                })
                .collect();
            env.step(&JointAction(joint)).unwrap();
            let s = env.state();
            assert_eq!(s.jobs.len(), 30);
            let on_machines = s.machines.iter().flatten().count();
            let in_machine_state = s.jobs.iter().filter(|j| matches!(j.location, Location::Machine(_))).count();
            assert_eq!(on_machines, in_machine_state);
            for (j, js) in s.jobs.iter().enumerate() {
                assert!(js.stage >= last_stage[j]);
                last_stage[j] = js.stage;
            }
        }
        assert!(env.outcome().success);
        assert!(validate_schedule(env.trace(), &inst).is_valid());
        assert!(env.outcome().makespan.unwrap() >= u64::from(inst.lower_bound()));
    }

    #[test]
    fn completion_reward_includes_terminal_bonus() {
        let one = shipped_instance().subset(&[1]).unwrap();
        let mut env = ImmEnv::new(one, ImmConfig::default());
        let mut last = Vec::new();
        while !env.is_done() {
            let joint = (0..4).map(|k| first_legal(&env.legal_mask(k))).collect();
            last = env.step(&JointAction(joint)).unwrap().rewards;
        }
        // M4 finishes the last operation; 50 * 56 / 56 on top.
        assert!((last[3] - (1.0 - 0.01 + 50.0)).abs() < 1e-12);
        assert!((last[0] - (-0.01 + 50.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_buffer_observation_reduces_to_update_of_zero() {
        let inst = shipped_instance();
        let params = EncoderParams::init(30, 30, 30, &[16], Activation::Tanh, 1, 4).unwrap();
        let mut state = ImmState::reset(&inst);
        for js in &mut state.jobs {
            js.location = Location::Output;
            js.stage = 4;
        }
        let obs = agent_observation(&state, &inst, &params, 2).unwrap();
        let expect = params.update_net.predict(&[0.0; 60]).unwrap();
        assert_eq!(obs, expect);
        assert_eq!(obs.len(), 30);
    }
}
