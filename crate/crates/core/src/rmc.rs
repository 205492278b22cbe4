//! Robot manufacturing cell.
//!
//! Nine stations: two input stations, three machines, a buffer behind each
//! machine and one output station. Work-piece type 1 visits
//! `IB1 M1 MB1 M2 MB2 M3 MB3 OB`, type 2 visits `IB2 M2 MB2 M3 MB3 M1 MB1 OB`.
//! Each type has its own agent whose action is a 7-bit vector: bit `k`
//! activates edge `k` of that type's route and moves one piece along it.
//!
//! A tick runs in this order: machine timers count down, then the activated
//! edges of agent 1 (ascending) and agent 2 (ascending) execute. A piece that
//! finished processing stays on its machine until an edge moves it off.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::encoder::Readout;
use crate::env::{EnvError, EnvStep, EpisodeOutcome, JointAction, MultiAgentEnv, ObservationSpec};
use crate::graph::{Graph, Matrix};

pub const IB1: usize = 0;
pub const IB2: usize = 1;
pub const M1: usize = 2;
pub const M2: usize = 3;
pub const M3: usize = 4;
pub const MB1: usize = 5;
pub const MB2: usize = 6;
pub const MB3: usize = 7;
pub const OB: usize = 8;

pub const NODE_COUNT: usize = 9;
pub const NODE_NAMES: [&str; NODE_COUNT] = ["IB1", "IB2", "M1", "M2", "M3", "MB1", "MB2", "MB3", "OB"];
pub const ROUTE_EDGES: usize = 7;
pub const ACTION_COUNT: usize = 1 << ROUTE_EDGES;
pub const NODE_WIDTH: usize = 4;
pub const EDGE_WIDTH: usize = 2;

/// Station sequence of each work-piece type.
pub const ROUTES: [[usize; 8]; 2] = [
    [IB1, M1, MB1, M2, MB2, M3, MB3, OB],
    [IB2, M2, MB2, M3, MB3, M1, MB1, OB],
];

fn machine_index(node: usize) -> Option<usize> {
    (M1..=M3).contains(&node).then(|| node - M1)
}

/// `(sender, receiver)` of the `bit`-th edge of `piece`'s route.
pub fn route_edge(piece: usize, bit: usize) -> (usize, usize) {
    (ROUTES[piece][bit], ROUTES[piece][bit + 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmcConfig {
    pub target_wp1: u32,
    pub target_wp2: u32,
    pub max_steps: u32,
    /// Processing ticks of M1, M2, M3.
    pub processing_ticks: [u32; 3],
    /// Maximum number of edge executions per tick; `None` is unlimited.
    pub move_cap_per_tick: Option<usize>,
    pub delivery_bonus: f64,
    pub step_penalty: f64,
    pub terminal_bonus: f64,
}

impl Default for RmcConfig {
    fn default() -> Self {
        Self {
            target_wp1: 20,
            target_wp2: 20,
            max_steps: 500,
            processing_ticks: [1, 1, 1],
            move_cap_per_tick: None,
            delivery_bonus: 1.0,
            step_penalty: 0.01,
            terminal_bonus: 10.0,
        }
    }
}

impl RmcConfig {
    pub fn with_targets(target_wp1: u32, target_wp2: u32) -> Self {
        Self {
            target_wp1,
            target_wp2,
            ..Self::default()
        }
    }

    pub fn targets(&self) -> [u32; 2] {
        [self.target_wp1, self.target_wp2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MachineSlot {
    /// 0 for work-piece 1, 1 for work-piece 2.
    pub piece: usize,
    pub remaining: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RmcState {
    /// Piece counts per station and type. Machine rows stay zero; machine
    /// contents live in `machines`.
    pub counts: [[u32; 2]; NODE_COUNT],
    pub machines: [Option<MachineSlot>; 3],
    pub targets: [u32; 2],
    pub step: u32,
    /// Step at which each type's output count first reached its target.
    pub reached_at: [Option<u32>; 2],
}

impl RmcState {
    /// Pieces of `piece` type at `node`, including a piece inside a machine.
    pub fn node_count(&self, node: usize, piece: usize) -> u32 {
        match machine_index(node) {
            Some(m) => u32::from(self.machines[m].is_some_and(|s| s.piece == piece)),
            None => self.counts[node][piece],
        }
    }

    pub fn total(&self, piece: usize) -> u32 {
        (0..NODE_COUNT).map(|n| self.node_count(n, piece)).sum()
    }

    pub fn delivered(&self, piece: usize) -> u32 {
        self.counts[OB][piece]
    }

    pub fn is_complete(&self) -> bool {
        (0..2).all(|p| self.delivered(p) >= self.targets[p])
    }

    /// Whether the piece at `sender` can leave on this tick (machines count
    /// down before edges execute).
    fn can_send(&self, node: usize, piece: usize, after_countdown: bool) -> bool {
        match machine_index(node) {
            Some(m) => self.machines[m].is_some_and(|s| {
                s.piece == piece && if after_countdown { s.remaining == 0 } else { s.remaining <= 1 }
            }),
            None => self.counts[node][piece] > 0,
        }
    }

    fn can_receive(&self, node: usize) -> bool {
        machine_index(node).is_none_or(|m| self.machines[m].is_none())
    }
}

pub fn reset(config: &RmcConfig) -> (RmcState, Graph) {
    let mut counts = [[0; 2]; NODE_COUNT];
    counts[IB1][0] = config.target_wp1;
    counts[IB2][1] = config.target_wp2;
    let targets = config.targets();
    let state = RmcState {
        counts,
        machines: [None; 3],
        targets,
        step: 0,
        reached_at: [0, 1].map(|p| (targets[p] == 0).then_some(0)),
    };
    let graph = to_graph(&state);
    (state, graph)
}

/// Node features `[wp1 count, wp2 count, machine flag, buffer flag]`; input
/// stations carry the machine flag. Edges 0-6 are the type-1 route in order
/// with attribute `[1, 0]`, edges 7-13 the type-2 route with `[0, 1]`.
pub fn to_graph(state: &RmcState) -> Graph {
    let mut features = Matrix::zeros(NODE_COUNT, NODE_WIDTH);
    for node in 0..NODE_COUNT {
        let is_station = node <= M3;
        let row = features.row_mut(node);
        row[0] = f64::from(state.node_count(node, 0));
        row[1] = f64::from(state.node_count(node, 1));
        row[2] = if is_station { 1.0 } else { 0.0 };
        row[3] = if is_station { 0.0 } else { 1.0 };
    }
    let mut senders = Vec::with_capacity(2 * ROUTE_EDGES);
    let mut receivers = Vec::with_capacity(2 * ROUTE_EDGES);
    let mut attrs = Matrix::zeros(2 * ROUTE_EDGES, EDGE_WIDTH);
    for piece in 0..2 {
        for bit in 0..ROUTE_EDGES {
            let (s, r) = route_edge(piece, bit);
            senders.push(s);
            receivers.push(r);
            attrs.row_mut(piece * ROUTE_EDGES + bit)[piece] = 1.0;
        }
    }
    Graph::new(features, [senders, receivers], attrs).expect("static RMC topology is valid")
}

/// Bitmask of the route edges `piece`'s agent may activate on their own.
fn legal_edge_bits(state: &RmcState, piece: usize) -> usize {
    let mut bits = 0;
    for bit in 0..ROUTE_EDGES {
        let (s, r) = route_edge(piece, bit);
        if state.can_send(s, piece, false) && state.can_receive(r) {
            bits |= 1 << bit;
        }
    }
    bits
}

/// Legal actions of the agent moving `piece` (0 or 1). Action `a` activates
/// edge `k` of the route when bit `k` of `a` is set; it is legal when every
/// activated edge has a piece ready at its sender and an empty receiving
/// machine. Action 0 is always legal.
pub fn legal_mask(state: &RmcState, piece: usize) -> Vec<bool> {
    let bits = legal_edge_bits(state, piece);
    (0..ACTION_COUNT).map(|a| a & !bits == 0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmcStep {
    pub state: RmcState,
    pub rewards: [f64; 2],
    pub done: bool,
    /// Edge executions this tick.
    pub moves: usize,
    pub delivered: [u32; 2],
}

/// Advances one tick. Both actions must be legal under [`legal_mask`].
pub fn step(state: &RmcState, joint: [usize; 2], config: &RmcConfig) -> Result<RmcStep, EnvError> {
    for (piece, &action) in joint.iter().enumerate() {
        if action >= ACTION_COUNT || action & !legal_edge_bits(state, piece) != 0 {
            return Err(EnvError::IllegalAction { agent: piece, action });
        }
    }
    let mut next = state.clone();
    for slot in next.machines.iter_mut().flatten() {
        slot.remaining = slot.remaining.saturating_sub(1);
    }
    let cap = config.move_cap_per_tick.unwrap_or(usize::MAX);
    let mut moves = 0;
    let mut delivered = [0u32; 2];
    for (piece, &action) in joint.iter().enumerate() {
        for bit in 0..ROUTE_EDGES {
            if action & (1 << bit) == 0 {
                continue;
            }
            let (s, r) = route_edge(piece, bit);
            if moves >= cap || !next.can_send(s, piece, true) || !next.can_receive(r) {
                continue;
            }
            match machine_index(s) {
                Some(m) => next.machines[m] = None,
                None => next.counts[s][piece] -= 1,
            }
            match machine_index(r) {
                Some(m) => {
                    next.machines[m] = Some(MachineSlot {
                        piece,
                        remaining: config.processing_ticks[m],
                    })
                }
                None => next.counts[r][piece] += 1,
            }
            if r == OB {
                delivered[piece] += 1;
            }
            moves += 1;
        }
    }
    next.step += 1;
    let mut rewards = [0.0; 2];
    for piece in 0..2 {
        rewards[piece] = config.delivery_bonus * f64::from(delivered[piece]) - config.step_penalty;
        if next.reached_at[piece].is_none() && next.delivered(piece) >= next.targets[piece] {
            next.reached_at[piece] = Some(next.step);
            rewards[piece] += config.terminal_bonus;
        }
    }
    let done = next.is_complete() || next.step >= config.max_steps;
    Ok(RmcStep {
        state: next,
        rewards,
        done,
        moves,
        delivered,
    })
}

/// Summary of a finished or truncated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RmcSummary {
    pub steps: u32,
    pub reached_at: [Option<u32>; 2],
}

/// Step at which the second target was met; `None` if the episode missed a target.
pub fn episode_makespan(summary: &RmcSummary) -> Option<u32> {
    match summary.reached_at {
        [Some(a), Some(b)] => Some(a.max(b)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmcTraceRow {
    pub step: u32,
    pub counts: [[u32; 2]; NODE_COUNT],
    pub actions: [usize; 2],
    pub rewards: [f64; 2],
}

/// Writes a trace as CSV: `step`, one `<node>_wp1`/`<node>_wp2` pair per
/// station, `action_wp1`, `action_wp2`, `reward_wp1`, `reward_wp2`.
pub fn write_trace_csv(rows: &[RmcTraceRow], w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["step".to_string()];
    for name in NODE_NAMES {
        header.push(format!("{name}_wp1"));
        header.push(format!("{name}_wp2"));
    }
    header.extend(["action_wp1", "action_wp2", "reward_wp1", "reward_wp2"].map(String::from));
    out.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.step.to_string()];
        for c in &row.counts {
            rec.push(c[0].to_string());
            rec.push(c[1].to_string());
        }
        rec.extend(row.actions.iter().map(ToString::to_string));
        rec.extend(row.rewards.iter().map(ToString::to_string));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// [`MultiAgentEnv`] wrapper: agent 0 moves work-piece 1, agent 1 work-piece 2.
#[derive(Debug, Clone)]
pub struct RmcEnv {
    config: RmcConfig,
    state: RmcState,
    done: bool,
    trace: Vec<RmcTraceRow>,
    record: bool,
}

impl RmcEnv {
    pub fn new(config: RmcConfig) -> Self {
        let (state, _) = reset(&config);
        Self {
            config,
            state,
            done: false,
            trace: Vec::new(),
            record: false,
        }
    }

    /// Keep a per-step trace (see [`write_trace_csv`]).
    pub fn record_trace(mut self, on: bool) -> Self {
        self.record = on;
        self
    }

    pub fn config(&self) -> &RmcConfig {
        &self.config
    }

    pub fn state(&self) -> &RmcState {
        &self.state
    }

    pub fn trace(&self) -> &[RmcTraceRow] {
        &self.trace
    }

    pub fn summary(&self) -> RmcSummary {
        RmcSummary {
            steps: self.state.step,
            reached_at: self.state.reached_at,
        }
    }

    /// Counts are divided by the larger target so features stay in [0, 1].
    pub fn feature_scale(&self) -> Vec<f64> {
        let scale = 1.0 / f64::from(self.config.target_wp1.max(self.config.target_wp2).max(1));
        (0..NODE_COUNT)
            .flat_map(|_| [scale, scale, 1.0, 1.0])
            .collect()
    }
}

impl MultiAgentEnv for RmcEnv {
    fn agent_count(&self) -> usize {
        2
    }

    fn action_count(&self, _agent: usize) -> usize {
        ACTION_COUNT
    }

    fn observation_spec(&self, _agent: usize) -> ObservationSpec {
        ObservationSpec {
            readout: Readout::Flatten,
            feature_scale: self.feature_scale(),
            node_count: NODE_COUNT,
            node_width: NODE_WIDTH,
            edge_width: EDGE_WIDTH,
        }
    }

    fn reset(&mut self, _seed: u64) {
        self.state = reset(&self.config).0;
        self.done = false;
        self.trace.clear();
    }

    fn graph(&self) -> Graph {
        to_graph(&self.state)
    }

    fn legal_mask(&self, agent: usize) -> Vec<bool> {
        legal_mask(&self.state, agent)
    }

    fn step(&mut self, joint: &JointAction) -> Result<EnvStep, EnvError> {
        if self.done {
            return Err(EnvError::Finished);
        }
        if joint.len() != 2 {
            return Err(EnvError::JointWidth {
                expected: 2,
                got: joint.len(),
            });
        }
        let actions = [joint.get(0), joint.get(1)];
        let out = step(&self.state, actions, &self.config)?;
        self.state = out.state;
        self.done = out.done;
        if self.record {
            self.trace.push(RmcTraceRow {
                step: self.state.step,
                counts: std::array::from_fn(|n| [self.state.node_count(n, 0), self.state.node_count(n, 1)]),
                actions,
                rewards: out.rewards,
            });
        }
        Ok(EnvStep {
            rewards: out.rewards.to_vec(),
            done: out.done,
        })
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn outcome(&self) -> EpisodeOutcome {
        let makespan = episode_makespan(&self.summary()).map(u64::from);
        EpisodeOutcome {
            steps: u64::from(self.state.step),
            success: makespan.is_some(),
            makespan,
        }
    }
}
