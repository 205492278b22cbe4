//! Immutable directed graph with node features, a sender/receiver edge index
//! and per-edge attributes.
//!
//! Edges are identified by their position in the edge index. That order is
//! stable and is what environments use to map action bits onto edges.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("{field}: {reason}")]
    Dimension { field: &'static str, reason: String },
    #[error("edge {edge}: {role} node id {node} out of range for {node_count} nodes")]
    NodeOutOfRange {
        edge: usize,
        role: &'static str,
        node: usize,
        node_count: usize,
    },
    #[error("node {node} out of range for {node_count} nodes")]
    QueryOutOfRange { node: usize, node_count: usize },
    #[error("permutation is not a bijection on 0..{0}")]
    NotAPermutation(usize),
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == rows * cols).then_some(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from rows; `None` when the rows are ragged. An empty
    /// row list yields a `0 x width` matrix.
    pub fn from_rows(rows: &[Vec<f64>], width: usize) -> Option<Self> {
        if rows.iter().any(|r| r.len() != width) {
            return None;
        }
        Some(Self {
            rows: rows.len(),
            cols: width,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// A directed graph `G = (V, E)`.
///
/// Self-loops and parallel edges are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    node_features: Matrix,
    senders: Vec<usize>,
    receivers: Vec<usize>,
    edge_attrs: Matrix,
}

impl Graph {
    /// Validates dimensions and node ids and builds the graph.
    ///
    /// `edge_index[0]` holds senders and `edge_index[1]` receivers.
    pub fn new(
        node_features: Matrix,
        edge_index: [Vec<usize>; 2],
        edge_attrs: Matrix,
    ) -> Result<Self, GraphError> {
        let [senders, receivers] = edge_index;
        if senders.len() != receivers.len() {
            return Err(GraphError::Dimension {
                field: "edge_index",
                reason: format!(
                    "sender row has {} entries but receiver row has {}",
                    senders.len(),
                    receivers.len()
                ),
            });
        }
        if edge_attrs.rows() != senders.len() {
            return Err(GraphError::Dimension {
                field: "edge_attrs",
                reason: format!(
                    "{} rows for {} edges",
                    edge_attrs.rows(),
                    senders.len()
                ),
            });
        }
        let n = node_features.rows();
        for (edge, (&s, &r)) in senders.iter().zip(&receivers).enumerate() {
            for (role, node) in [("sender", s), ("receiver", r)] {
                if node >= n {
                    return Err(GraphError::NodeOutOfRange {
                        edge,
                        role,
                        node,
                        node_count: n,
                    });
                }
            }
        }
        Ok(Self {
            node_features,
            senders,
            receivers,
            edge_attrs,
        })
    }

    /// Row-based constructor that reports ragged rows against the offending field.
    pub fn from_rows(
        node_rows: &[Vec<f64>],
        edge_index: [Vec<usize>; 2],
        edge_rows: &[Vec<f64>],
    ) -> Result<Self, GraphError> {
        let d_v = node_rows.first().map_or(0, Vec::len);
        let node_features =
            Matrix::from_rows(node_rows, d_v).ok_or_else(|| GraphError::Dimension {
                field: "node_features",
                reason: "rows have differing widths".into(),
            })?;
        let d_e = edge_rows.first().map_or(0, Vec::len);
        let edge_attrs = Matrix::from_rows(edge_rows, d_e).ok_or_else(|| GraphError::Dimension {
            field: "edge_attrs",
            reason: "rows have differing widths".into(),
        })?;
        Self::new(node_features, edge_index, edge_attrs)
    }

    pub fn node_count(&self) -> usize {
        self.node_features.rows()
    }

    pub fn edge_count(&self) -> usize {
        self.senders.len()
    }

    pub fn node_width(&self) -> usize {
        self.node_features.cols()
    }

    pub fn edge_width(&self) -> usize {
        self.edge_attrs.cols()
    }

    pub fn node_features(&self) -> &Matrix {
        &self.node_features
    }

    pub fn edge_attrs(&self) -> &Matrix {
        &self.edge_attrs
    }

    pub fn senders(&self) -> &[usize] {
        &self.senders
    }

    pub fn receivers(&self) -> &[usize] {
        &self.receivers
    }

    /// `(sender, receiver)` of edge `k`.
    pub fn edge(&self, k: usize) -> (usize, usize) {
        (self.senders[k], self.receivers[k])
    }

    /// Edges whose receiver is `node` as `(sender, edge id)`, ascending by edge id.
    pub fn incoming(&self, node: usize) -> Result<Vec<(usize, usize)>, GraphError> {
        if node >= self.node_count() {
            return Err(GraphError::QueryOutOfRange {
                node,
                node_count: self.node_count(),
            });
        }
        Ok(self
            .receivers
            .iter()
            .enumerate()
            .filter(|&(_, &r)| r == node)
            .map(|(k, _)| (self.senders[k], k))
            .collect())
    }

    /// Relabels node `i` as `perm[i]`. Feature row `i` moves to row `perm[i]`
    /// and every edge endpoint is remapped; edge order and attributes are kept.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let n = self.node_count();
        if !is_permutation(perm, n) {
            return Err(GraphError::NotAPermutation(n));
        }
        let mut features = Matrix::zeros(n, self.node_width());
        for (old, &new) in perm.iter().enumerate() {
            features
                .row_mut(new)
                .copy_from_slice(self.node_features.row(old));
        }
        Ok(Self {
            node_features: features,
            senders: self.senders.iter().map(|&s| perm[s]).collect(),
            receivers: self.receivers.iter().map(|&r| perm[r]).collect(),
            edge_attrs: self.edge_attrs.clone(),
        })
    }

    /// Copy of the graph with node features multiplied elementwise by
    /// `scale` (row-major, one entry per feature). An empty scale is the identity.
    pub fn scale_node_features(&self, scale: &[f64]) -> Self {
        let mut g = self.clone();
        if scale.len() == g.node_features.as_slice().len() {
            for (x, s) in g.node_features.as_mut_slice().iter_mut().zip(scale) {
                *x *= s;
            }
        }
        g
    }
}

/// Whether `perm` is a bijection on `0..n`.
pub fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Inverse of a permutation given as `perm[old] = new`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (old, &new) in perm.iter().enumerate() {
        inv[new] = old;
    }
    inv
}
