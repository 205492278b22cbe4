//! Message-passing graph encoder.
//!
//! Embeddings start as the node features. Each round every node sums the
//! message network's output over its incoming edges, applied to
//! `[sender embedding, edge attributes]`, and then replaces its embedding with
//! the update network applied to `[own embedding, summed message]`. The same
//! two networks are reused in every round.

use thiserror::Error;

use crate::graph::{Graph, GraphError, Matrix};
use crate::nn::{
    compare_gradients, numeric_gradient, probe_vector, Activation, DenseNet, ForwardCache, GradCheckReport, NetError,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder widths: {0}")]
    Width(String),
    #[error("readout node {node} out of range for {node_count} nodes")]
    ReadoutNode { node: usize, node_count: usize },
    #[error("trace does not belong to this graph/encoder: {0}")]
    TraceMismatch(&'static str),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Node embedding matrix after `round` message-passing rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    pub h: Matrix,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub message_net: DenseNet,
    pub update_net: DenseNet,
    pub rounds: usize,
}

impl EncoderParams {
    pub fn new(message_net: DenseNet, update_net: DenseNet, rounds: usize) -> Result<Self, EncoderError> {
        if rounds == 0 {
            return Err(EncoderError::Width("at least one round is required".into()));
        }
        let d_m = message_net.output_width();
        let d_h = update_net.output_width();
        if update_net.input_width() != d_h + d_m {
            return Err(EncoderError::Width(format!(
                "update net input {} != embedding {} + message {}",
                update_net.input_width(),
                d_h,
                d_m
            )));
        }
        if message_net.input_width() < d_h {
            return Err(EncoderError::Width(format!(
                "message net input {} narrower than embedding {}",
                message_net.input_width(),
                d_h
            )));
        }
        Ok(Self {
            message_net,
            update_net,
            rounds,
        })
    }

    /// Fresh encoder for graphs with the given node/edge widths. `hidden` lists
    /// the hidden layer widths of both networks.
    pub fn init(
        node_width: usize,
        edge_width: usize,
        message_width: usize,
        hidden: &[usize],
        activation: Activation,
        rounds: usize,
        seed: u64,
    ) -> Result<Self, EncoderError> {
        let sizes = |input: usize, output: usize| {
            let mut s = vec![input];
            s.extend_from_slice(hidden);
            s.push(output);
            s
        };
        let message_net = DenseNet::init(
            &sizes(node_width + edge_width, message_width),
            activation,
            seed,
        )?;
        let update_net = DenseNet::init(
            &sizes(node_width + message_width, node_width),
            activation,
            seed.wrapping_add(1),
        )?;
        Self::new(message_net, update_net, rounds)
    }

    pub fn node_width(&self) -> usize {
        self.update_net.output_width()
    }

    pub fn message_width(&self) -> usize {
        self.message_net.output_width()
    }

    pub fn edge_width(&self) -> usize {
        self.message_net.input_width() - self.node_width()
    }

    fn check_graph(&self, graph: &Graph) -> Result<(), EncoderError> {
        if graph.node_width() != self.node_width() {
            return Err(EncoderError::Width(format!(
                "graph node width {} != encoder width {}",
                graph.node_width(),
                self.node_width()
            )));
        }
        if graph.edge_count() > 0 && graph.edge_width() != self.edge_width() {
            return Err(EncoderError::Width(format!(
                "graph edge width {} != encoder edge width {}",
                graph.edge_width(),
                self.edge_width()
            )));
        }
        Ok(())
    }
}

pub fn assign_initial(graph: &Graph) -> NodeEmbeddings {
    NodeEmbeddings {
        h: graph.node_features().clone(),
        round: 0,
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn check_embeddings(
    emb: &NodeEmbeddings,
    graph: &Graph,
    params: &EncoderParams,
) -> Result<(), EncoderError> {
    params.check_graph(graph)?;
    if emb.h.rows() != graph.node_count() || emb.h.cols() != params.node_width() {
        return Err(EncoderError::Width(format!(
            "embeddings are {}x{}, expected {}x{}",
            emb.h.rows(),
            emb.h.cols(),
            graph.node_count(),
            params.node_width()
        )));
    }
    Ok(())
}

/// Summed incoming messages per node. Nodes without incoming edges get an
/// all-zero row.
pub fn aggregate_messages(
    emb: &NodeEmbeddings,
    graph: &Graph,
    params: &EncoderParams,
) -> Result<Matrix, EncoderError> {
    check_embeddings(emb, graph, params)?;
    let mut messages = Matrix::zeros(graph.node_count(), params.message_width());
    for k in 0..graph.edge_count() {
        let (s, r) = graph.edge(k);
        let msg = params
            .message_net
            .predict(&concat(emb.h.row(s), graph.edge_attrs().row(k)))?;
        for (acc, m) in messages.row_mut(r).iter_mut().zip(&msg) {
            *acc += m;
        }
    }
    Ok(messages)
}

/// One round of message passing.
pub fn message_round(
    emb: &NodeEmbeddings,
    graph: &Graph,
    params: &EncoderParams,
) -> Result<NodeEmbeddings, EncoderError> {
    let messages = aggregate_messages(emb, graph, params)?;
    let mut h = Matrix::zeros(graph.node_count(), params.node_width());
    for i in 0..graph.node_count() {
        let out = params
            .update_net
            .predict(&concat(emb.h.row(i), messages.row(i)))?;
        h.row_mut(i).copy_from_slice(&out);
    }
    Ok(NodeEmbeddings {
        h,
        round: emb.round + 1,
    })
}

/// Initial assignment followed by `params.rounds` message-passing rounds.
pub fn encode(graph: &Graph, params: &EncoderParams) -> Result<NodeEmbeddings, EncoderError> {
    params.check_graph(graph)?;
    let mut emb = assign_initial(graph);
    for _ in 0..params.rounds {
        emb = message_round(&emb, graph, params)?;
    }
    Ok(emb)
}

/// Row-concatenation of all embeddings in node-id order.
pub fn flatten_readout(emb: &NodeEmbeddings) -> Vec<f64> {
    emb.h.as_slice().to_vec()
}

/// Selected embedding rows, in request order.
pub fn node_readout(emb: &NodeEmbeddings, nodes: &[usize]) -> Result<Vec<Vec<f64>>, EncoderError> {
    nodes
        .iter()
        .map(|&n| {
            if n >= emb.h.rows() {
                Err(EncoderError::ReadoutNode {
                    node: n,
                    node_count: emb.h.rows(),
                })
            } else {
                Ok(emb.h.row(n).to_vec())
            }
        })
        .collect()
}

/// How an agent turns node embeddings into a feature vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Readout {
    /// Every node, flattened in node-id order.
    Flatten,
    /// The listed nodes, concatenated in list order.
    Nodes(Vec<usize>),
}

impl Readout {
    pub fn width(&self, node_count: usize, node_width: usize) -> usize {
        match self {
            Readout::Flatten => node_count * node_width,
            Readout::Nodes(ids) => ids.len() * node_width,
        }
    }

    pub fn extract(&self, emb: &NodeEmbeddings) -> Result<Vec<f64>, EncoderError> {
        match self {
            Readout::Flatten => Ok(flatten_readout(emb)),
            Readout::Nodes(ids) => Ok(node_readout(emb, ids)?.concat()),
        }
    }

    /// Spreads a gradient on the readout back onto a full embedding matrix.
    pub fn scatter(&self, grad: &[f64], node_count: usize, node_width: usize) -> Result<Matrix, EncoderError> {
        let expected = self.width(node_count, node_width);
        if grad.len() != expected {
            return Err(EncoderError::Width(format!(
                "readout gradient has {} entries, expected {expected}",
                grad.len()
            )));
        }
        match self {
            Readout::Flatten => Ok(Matrix::new(node_count, node_width, grad.to_vec()).unwrap()),
            Readout::Nodes(ids) => {
                let mut m = Matrix::zeros(node_count, node_width);
                for (j, &n) in ids.iter().enumerate() {
                    if n >= node_count {
                        return Err(EncoderError::ReadoutNode { node: n, node_count });
                    }
                    for (acc, g) in m
                        .row_mut(n)
                        .iter_mut()
                        .zip(&grad[j * node_width..(j + 1) * node_width])
                    {
                        *acc += g;
                    }
                }
                Ok(m)
            }
        }
    }

    fn nodes(&self, node_count: usize) -> Vec<usize> {
        match self {
            Readout::Flatten => (0..node_count).collect(),
            Readout::Nodes(ids) => ids.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct RoundTrace {
    /// Message-net cache per edge; `None` for edges whose message is not needed.
    edges: Vec<Option<ForwardCache>>,
    /// Update-net cache per node; `None` for nodes not recomputed this round.
    nodes: Vec<Option<ForwardCache>>,
}

/// Forward caches of every round, consumed by [`encoder_backward`].
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    rounds: Vec<RoundTrace>,
    node_count: usize,
    edge_count: usize,
}

/// Per-round masks of the nodes whose embedding must be recomputed so that
/// `targets` are exact after the last round.
fn required_nodes(graph: &Graph, rounds: usize, targets: &[usize]) -> Vec<Vec<bool>> {
    let n = graph.node_count();
    let mut need = vec![vec![false; n]; rounds];
    for &t in targets {
        need[rounds - 1][t] = true;
    }
    for t in (1..rounds).rev() {
        let (lower, upper) = need.split_at_mut(t);
        let next = &upper[0];
        let cur = &mut lower[t - 1];
        for i in 0..n {
            cur[i] |= next[i];
        }
        for k in 0..graph.edge_count() {
            let (s, r) = graph.edge(k);
            if next[r] {
                cur[s] = true;
            }
        }
    }
    need
}

fn encode_pruned(
    graph: &Graph,
    params: &EncoderParams,
    need: Option<&[Vec<bool>]>,
) -> Result<(NodeEmbeddings, EncodeTrace), EncoderError> {
    params.check_graph(graph)?;
    let n = graph.node_count();
    let d_m = params.message_width();
    let mut emb = assign_initial(graph);
    let mut rounds = Vec::with_capacity(params.rounds);
    for t in 0..params.rounds {
        let needed = |i: usize| need.is_none_or(|m| m[t][i]);
        let mut messages = Matrix::zeros(n, d_m);
        let mut edges = Vec::with_capacity(graph.edge_count());
        for k in 0..graph.edge_count() {
            let (s, r) = graph.edge(k);
            if !needed(r) {
                edges.push(None);
                continue;
            }
            let (msg, cache) = params
                .message_net
                .forward(&concat(emb.h.row(s), graph.edge_attrs().row(k)))?;
            for (acc, m) in messages.row_mut(r).iter_mut().zip(&msg) {
                *acc += m;
            }
            edges.push(Some(cache));
        }
        let mut h = emb.h.clone();
        let mut nodes = Vec::with_capacity(n);
        for i in 0..n {
            if !needed(i) {
                nodes.push(None);
                continue;
            }
            let (out, cache) = params
                .update_net
                .forward(&concat(emb.h.row(i), messages.row(i)))?;
            h.row_mut(i).copy_from_slice(&out);
            nodes.push(Some(cache));
        }
        emb = NodeEmbeddings {
            h,
            round: emb.round + 1,
        };
        rounds.push(RoundTrace { edges, nodes });
    }
    Ok((
        emb,
        EncodeTrace {
            rounds,
            node_count: n,
            edge_count: graph.edge_count(),
        },
    ))
}

/// [`encode`] that also records the caches needed for backpropagation.
pub fn encode_traced(graph: &Graph, params: &EncoderParams) -> Result<(NodeEmbeddings, EncodeTrace), EncoderError> {
    encode_pruned(graph, params, None)
}

/// Encodes only what `readout` needs and returns the readout vector with its
/// trace. The vector equals `readout.extract(&encode(graph, params)?)` exactly.
pub fn encode_readout(
    graph: &Graph,
    params: &EncoderParams,
    readout: &Readout,
) -> Result<(Vec<f64>, EncodeTrace), EncoderError> {
    let targets = readout.nodes(graph.node_count());
    if let Some(&bad) = targets.iter().find(|&&t| t >= graph.node_count()) {
        return Err(EncoderError::ReadoutNode {
            node: bad,
            node_count: graph.node_count(),
        });
    }
    let (emb, trace) = match readout {
        Readout::Flatten => encode_pruned(graph, params, None)?,
        Readout::Nodes(_) => {
            let need = required_nodes(graph, params.rounds, &targets);
            encode_pruned(graph, params, Some(&need))?
        }
    };
    Ok((readout.extract(&emb)?, trace))
}

/// Gradients of a scalar loss through every round of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub message: Vec<f64>,
    pub update: Vec<f64>,
    /// Gradient with respect to the input node features.
    pub node_features: Matrix,
}

impl EncoderGrads {
    pub fn zeros(params: &EncoderParams, node_count: usize) -> Self {
        Self {
            message: vec![0.0; params.message_net.param_count()],
            update: vec![0.0; params.update_net.param_count()],
            node_features: Matrix::zeros(node_count, params.node_width()),
        }
    }
}

/// Backpropagates a gradient on the final embeddings, adding the parameter
/// gradients into `message_acc` and `update_acc`. Returns the gradient with
/// respect to the input node features.
pub fn backward_accumulate(
    graph: &Graph,
    params: &EncoderParams,
    trace: &EncodeTrace,
    upstream: &Matrix,
    message_acc: &mut [f64],
    update_acc: &mut [f64],
) -> Result<Matrix, EncoderError> {
    let n = graph.node_count();
    let d_h = params.node_width();
    if trace.node_count != n || trace.edge_count != graph.edge_count() {
        return Err(EncoderError::TraceMismatch("graph size"));
    }
    if trace.rounds.len() != params.rounds {
        return Err(EncoderError::TraceMismatch("round count"));
    }
    if upstream.rows() != n || upstream.cols() != d_h {
        return Err(EncoderError::Width(format!(
            "upstream gradient is {}x{}, expected {n}x{d_h}",
            upstream.rows(),
            upstream.cols()
        )));
    }
    let mut grad_h = upstream.clone();
    for round in trace.rounds.iter().rev() {
        let mut grad_prev = Matrix::zeros(n, d_h);
        let mut grad_msg = Matrix::zeros(n, params.message_width());
        for i in 0..n {
            let g = grad_h.row(i);
            match &round.nodes[i] {
                Some(cache) => {
                    if g.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let gin = params.update_net.backward_accumulate(cache, g, update_acc)?;
                    for (acc, v) in grad_prev.row_mut(i).iter_mut().zip(&gin[..d_h]) {
                        *acc += v;
                    }
                    grad_msg.row_mut(i).copy_from_slice(&gin[d_h..]);
                }
                // Not recomputed: the embedding was carried over unchanged.
                None => {
                    for (acc, v) in grad_prev.row_mut(i).iter_mut().zip(g) {
                        *acc += v;
                    }
                }
            }
        }
        for (k, cache) in round.edges.iter().enumerate() {
            let (s, r) = graph.edge(k);
            let g = grad_msg.row(r);
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let cache = cache
                .as_ref()
                .ok_or(EncoderError::TraceMismatch("missing edge cache"))?;
            let gin = params.message_net.backward_accumulate(cache, g, message_acc)?;
            for (acc, v) in grad_prev.row_mut(s).iter_mut().zip(&gin[..d_h]) {
                *acc += v;
            }
        }
        grad_h = grad_prev;
    }
    Ok(grad_h)
}

/// Gradients of `L = <upstream, readout(encode(graph))>` for both networks.
pub fn encoder_backward(
    graph: &Graph,
    params: &EncoderParams,
    trace: &EncodeTrace,
    readout: &Readout,
    upstream: &[f64],
) -> Result<EncoderGrads, EncoderError> {
    let full = readout.scatter(upstream, graph.node_count(), params.node_width())?;
    let mut grads = EncoderGrads::zeros(params, graph.node_count());
    grads.node_features =
        backward_accumulate(graph, params, trace, &full, &mut grads.message, &mut grads.update)?;
    Ok(grads)
}

/// Compares [`encoder_backward`] with central differences for every message
/// and update parameter and every node feature. The loss is the readout
/// dotted with [`probe_vector`].
pub fn check_encoder_gradients(
    graph: &Graph,
    params: &EncoderParams,
    readout: &Readout,
    tolerance: f64,
) -> Result<GradCheckReport, EncoderError> {
    let (emb, trace) = encode_traced(graph, params)?;
    let probe = probe_vector(readout.extract(&emb)?.len());
    let grads = encoder_backward(graph, params, &trace, readout, &probe)?;
    let loss = |g: &Graph, p: &EncoderParams| -> f64 {
        let out = readout.extract(&encode(g, p).expect("checked above")).expect("checked above");
        out.iter().zip(&probe).map(|(a, b)| a * b).sum()
    };

    let mut work = params.clone();
    let mut m = params.message_net.params().to_vec();
    let num_m = numeric_gradient(&mut m, |x| {
        work.message_net.params_mut().copy_from_slice(x);
        loss(graph, &work)
    });
    let mut work = params.clone();
    let mut u = params.update_net.params().to_vec();
    let num_u = numeric_gradient(&mut u, |x| {
        work.update_net.params_mut().copy_from_slice(x);
        loss(graph, &work)
    });
    let mut x = graph.node_features().as_slice().to_vec();
    let num_x = numeric_gradient(&mut x, |v| {
        let feats = Matrix::new(graph.node_count(), graph.node_width(), v.to_vec()).expect("same shape");
        let g = Graph::new(
            feats,
            [graph.senders().to_vec(), graph.receivers().to_vec()],
            graph.edge_attrs().clone(),
        )
        .expect("same topology");
        loss(&g, params)
    });

    let analytic: Vec<f64> = grads
        .message
        .iter()
        .chain(&grads.update)
        .chain(grads.node_features.as_slice())
        .copied()
        .collect();
    let numeric: Vec<f64> = num_m.into_iter().chain(num_u).chain(num_x).collect();
    Ok(compare_gradients(&analytic, &numeric, tolerance))
}
