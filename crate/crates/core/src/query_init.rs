//! Graph query instantiation: attention-driven node sampling and kNN edges in
//! state-feature space.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev_scene::CellPair;
use crate::error::{config_err, shape_err, GqnError, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// One set of graph queries sharing a sampling ratio and neighbourhood size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySetSpec {
    /// Queries in the set.
    pub queries: usize,
    /// Fraction of BEV cells each query samples, in `(0, 1]`.
    pub ratio: f64,
    /// Out-degree of every node.
    pub k: usize,
}

impl QuerySetSpec {
    pub fn new(queries: usize, ratio: f64, k: usize) -> Self {
        Self { queries, ratio, k }
    }

    /// `round(ratio · M_BEV)` clamped to `[1, M_BEV − 1]`.
    pub fn node_count(&self, m_bev: usize) -> Result<usize> {
        if m_bev < 2 {
            return Err(config_err!("a grid of {m_bev} cells cannot hold a graph query"));
        }
        Ok(((self.ratio * m_bev as f64).round() as usize).clamp(1, m_bev - 1))
    }

    /// Checks the set against a grid of `m_bev` cells, including `K < N`.
    pub fn validate(&self, m_bev: usize) -> Result<usize> {
        if self.queries == 0 {
            return Err(config_err!("a query set needs at least one query"));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(config_err!("sampling ratio {} outside (0, 1]", self.ratio));
        }
        if self.k == 0 {
            return Err(config_err!("K must be at least 1"));
        }
        let n = self.node_count(m_bev)?;
        if self.k >= n {
            return Err(config_err!(
                "K = {} needs more than {n} nodes (ratio {} of {m_bev} cells)",
                self.k,
                self.ratio
            ));
        }
        Ok(n)
    }
}

/// A sampled node: the cell it came from and its selection weight α.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode<T> {
    pub bev_index: usize,
    pub state: Vec<T>,
    pub position: Vec<T>,
    pub weight: T,
}

/// Directed edge between node slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
}

/// A populated graph query `(u, V, E)`.
///
/// Nodes sit in slots ordered by descending α (ties by BEV index). Edges are
/// grouped by source slot, `k` per source, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphQuery<T> {
    pub global: Vec<T>,
    pub set_id: usize,
    pub ratio: f64,
    pub k: usize,
    pub nodes: Vec<GraphNode<T>>,
    pub edges: Vec<Edge>,
}

impl<T: Scalar> GraphQuery<T> {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Target slots of `source`'s out-edges.
    pub fn neighbours(&self, source: usize) -> &[Edge] {
        &self.edges[source * self.k..(source + 1) * self.k]
    }
}

/// `α = softmax_k(u · x_k)` recorded on the tape. `u` is `[d]` (or `[1, d]`),
/// `states` is `[M, d]`; the result has shape `[M]`.
pub fn attention_scores<T: Scalar>(tape: &mut Tape<T>, u: Var, states: Var) -> Result<Var> {
    let d = tape.value(u).numel();
    let x = tape.value(states);
    if x.rank() != 2 || x.cols() != d {
        return Err(shape_err!(
            "global vector of width {d} against states {:?}",
            x.shape()
        ));
    }
    let m = x.rows();
    let col = tape.reshape(u, vec![d, 1])?;
    let scores = tape.matmul(states, col)?;
    let flat = tape.reshape(scores, vec![m])?;
    tape.softmax_rows(flat)
}

/// Value-level attention weights of `u` over a list of cell pairs.
pub fn attention_weights<T: Scalar>(u: &[T], pairs: &[CellPair<T>]) -> Result<Vec<T>> {
    if pairs.is_empty() {
        return Err(GqnError::InvalidInput("attention over an empty grid".into()));
    }
    let rows: Vec<Vec<T>> = pairs.iter().map(|p| p.state.clone()).collect();
    let mut tape = Tape::new();
    let uv = tape.leaf(Tensor::vector(u.to_vec())?);
    let xv = tape.leaf(Tensor::from_rows(&rows)?);
    let alpha = attention_scores(&mut tape, uv, xv)?;
    Ok(tape.value(alpha).values().to_vec())
}

/// Positions of the `n` largest weights, largest first; equal weights are
/// ordered by ascending `keys` (the BEV index of each position).
pub fn top_n<T: Scalar>(alpha: &[T], keys: &[usize], n: usize) -> Result<Vec<usize>> {
    if alpha.len() != keys.len() {
        return Err(shape_err!("{} weights for {} cells", alpha.len(), keys.len()));
    }
    if n == 0 || n > alpha.len() {
        return Err(config_err!("cannot select {n} of {} cells", alpha.len()));
    }
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    let cmp = |&a: &usize, &b: &usize| {
        alpha[b]
            .partial_cmp(&alpha[a])
            .unwrap_or(Ordering::Equal)
            .then(keys[a].cmp(&keys[b]))
    };
    if n < order.len() {
        order.select_nth_unstable_by(n - 1, cmp);
        order.truncate(n);
    }
    order.sort_unstable_by(cmp);
    Ok(order)
}

/// The `n` highest-weight pairs as graph nodes, in slot order.
pub fn select_nodes<T: Scalar>(alpha: &[T], pairs: &[CellPair<T>], n: usize) -> Result<Vec<GraphNode<T>>> {
    let keys: Vec<usize> = pairs.iter().map(|p| p.index).collect();
    Ok(top_n(alpha, &keys, n)?
        .into_iter()
        .map(|i| GraphNode {
            bev_index: pairs[i].index,
            state: pairs[i].state.clone(),
            position: pairs[i].position.clone(),
            weight: alpha[i],
        })
        .collect())
}

fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let t = x - y;
        acc += t * t;
    }
    acc
}

/// For every node, directed edges to its `k` nearest other nodes by Euclidean
/// distance between states, by exact pairwise comparison. Distance ties go to
/// the lower slot. Edges come grouped by source, nearest first.
pub fn knn_edges<T: Scalar>(states: &[&[T]], k: usize) -> Result<Vec<Edge>> {
    let n = states.len();
    if k == 0 || k >= n {
        return Err(config_err!("K = {k} needs K < N = {n}"));
    }
    let d = states[0].len();
    if states.iter().any(|s| s.len() != d) {
        return Err(shape_err!("node states differ in width"));
    }
    let per_source = |i: usize| -> Vec<Edge> {
        let mut cand: Vec<(T, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (squared_distance(states[i], states[j]), j))
            .collect();
        let cmp = |a: &(T, usize), b: &(T, usize)| {
            a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
        };
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_unstable_by(cmp);
        cand.into_iter()
            .map(|(_, j)| Edge { source: i, target: j })
            .collect()
    };
    let edges = if n * n * d >= 1 << 16 {
        (0..n).into_par_iter().flat_map_iter(per_source).collect()
    } else {
        (0..n).flat_map(per_source).collect()
    };
    Ok(edges)
}

/// kNN edges over the nodes' raw state features.
pub fn build_knn_edges<T: Scalar>(nodes: &[GraphNode<T>], k: usize) -> Result<Vec<Edge>> {
    let states: Vec<&[T]> = nodes.iter().map(|n| n.state.as_slice()).collect();
    knn_edges(&states, k)
}

/// Instantiates one query from its global vector: attention, top-N, kNN.
pub fn init_query<T: Scalar>(
    global: &[T],
    pairs: &[CellPair<T>],
    set: &QuerySetSpec,
    set_id: usize,
) -> Result<GraphQuery<T>> {
    let n = set.validate(pairs.len())?;
    let alpha = attention_weights(global, pairs)?;
    let nodes = select_nodes(&alpha, pairs, n)?;
    let edges = build_knn_edges(&nodes, set.k)?;
    Ok(GraphQuery {
        global: global.to_vec(),
        set_id,
        ratio: set.ratio,
        k: set.k,
        nodes,
        edges,
    })
}
