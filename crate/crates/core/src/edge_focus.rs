//! EdgeFocus query update.
//!
//! For node `i` with neighbourhood `N(i)` (its kNN out-edges):
//!
//! ```text
//! e_ij  = φ(p_j − p_i ‖ x_j)
//! s_ij  = q(e_ij) · k(e_ij)
//! β_ij  = softmax over j ∈ N(i) of s_ij
//! v'_i  = ρ(Σ_j β_ij e_ij ‖ x_i)
//! ```
//!
//! The score uses the same edge on both sides (one score per edge, normalised
//! over the neighbourhood). Scoring each edge against all of its peers would
//! replace `row_dot` in [`edge_attention`] with a `[K, K]` product per node.
//!
//! Functions work on a batch of graphs stacked as rows: node states `[n, d]`
//! and edges grouped by source row, `K` per source (see [`EdgeLayout`]).

use crate::error::{shape_err, GqnError, Result};
use crate::numerics::{mlp_forward, Binding, MlpSpec, ParamStore, Scalar, Tape, Tensor, Var};
use crate::query_init::GraphQuery;

pub const PHI: &str = "phi";
pub const EDGE_QUERY: &str = "edge_q";
pub const EDGE_KEY: &str = "edge_k";
pub const RHO: &str = "rho";

/// Perceptron shapes of the operator for feature width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFocusSpec {
    pub phi: MlpSpec,
    pub query: MlpSpec,
    pub key: MlpSpec,
    pub rho: MlpSpec,
}

impl EdgeFocusSpec {
    /// `φ, ρ: 2d → d → d`; `q, k: d → d` single linear layers.
    pub fn new(d: usize) -> Result<Self> {
        Ok(Self {
            phi: MlpSpec::relu_hidden(&[2 * d, d, d])?,
            query: MlpSpec::linear(d, d, true)?,
            key: MlpSpec::linear(d, d, true)?,
            rho: MlpSpec::relu_hidden(&[2 * d, d, d])?,
        })
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.phi.register(store, PHI)?;
        self.query.register(store, EDGE_QUERY)?;
        self.key.register(store, EDGE_KEY)?;
        self.rho.register(store, RHO)
    }
}

/// Edge rows of a node batch: edge `t` runs from node row `sources[t]` to
/// `targets[t]`, and edges `[i·k, (i+1)·k)` all leave node row `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeLayout {
    pub k: usize,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
}

impl EdgeLayout {
    pub fn new(k: usize, sources: Vec<usize>, targets: Vec<usize>) -> Result<Self> {
        if k == 0 || sources.is_empty() {
            return Err(GqnError::Contract("a node needs at least one edge".into()));
        }
        if sources.len() != targets.len() || sources.len() % k != 0 {
            return Err(shape_err!("{} sources / {} targets with K = {k}", sources.len(), targets.len()));
        }
        if sources.iter().enumerate().any(|(t, &s)| s != t / k) {
            return Err(shape_err!("edges must be grouped by source row, {k} per row"));
        }
        Ok(Self { k, sources, targets })
    }

    /// Layout of several queries stacked in order.
    pub fn from_queries<T: Scalar>(queries: &[&GraphQuery<T>]) -> Result<Self> {
        let k = queries.first().map(|q| q.k).unwrap_or(0);
        let mut sources = Vec::new();
        let mut targets = Vec::new();
        let mut offset = 0;
        for q in queries {
            if q.k != k || q.edges.len() != q.num_nodes() * k {
                return Err(shape_err!("queries in one batch must share K"));
            }
            for e in &q.edges {
                sources.push(offset + e.source);
                targets.push(offset + e.target);
            }
            offset += q.num_nodes();
        }
        Self::new(k, sources, targets)
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.sources.len() / self.k
    }
}

/// `p_j − p_i` for every edge, from node positions `[n, d]`.
pub fn relative_positions<T: Scalar>(positions: &Tensor<T>, layout: &EdgeLayout) -> Result<Tensor<T>> {
    let d = positions.cols();
    let mut out = Vec::with_capacity(layout.num_edges() * d);
    for (&i, &j) in layout.sources.iter().zip(&layout.targets) {
        if i >= positions.rows() || j >= positions.rows() {
            return Err(shape_err!("edge ({i}, {j}) outside {} nodes", positions.rows()));
        }
        out.extend(positions.row(j).iter().zip(positions.row(i)).map(|(&pj, &pi)| pj - pi));
    }
    Tensor::matrix(layout.num_edges(), d, out)
}

/// `e_ij = φ(p_j − p_i ‖ x_j)` for every edge; `[E, d]`.
pub fn edge_features<T: Scalar>(
    tape: &mut Tape<T>,
    phi: &MlpSpec,
    params: &Binding,
    states: Var,
    rel_pos: Var,
    layout: &EdgeLayout,
) -> Result<Var> {
    if tape.value(rel_pos).rows() != layout.num_edges() {
        return Err(shape_err!(
            "{} relative positions for {} edges",
            tape.value(rel_pos).rows(),
            layout.num_edges()
        ));
    }
    let neighbour = tape.gather_rows(states, layout.targets.clone())?;
    let input = tape.concat_cols(&[rel_pos, neighbour])?;
    mlp_forward(tape, phi, params, PHI, input)
}

/// Edge weights `β`, shape `[n, K]`: each row is a softmax over one node's
/// out-edges.
pub fn edge_attention<T: Scalar>(
    tape: &mut Tape<T>,
    query: &MlpSpec,
    key: &MlpSpec,
    params: &Binding,
    edge_feats: Var,
    k: usize,
) -> Result<Var> {
    let e = tape.value(edge_feats).rows();
    if k == 0 || e == 0 {
        return Err(GqnError::Contract("edge attention needs at least one edge per node".into()));
    }
    if e % k != 0 {
        return Err(shape_err!("{e} edges do not split into groups of {k}"));
    }
    let q = mlp_forward(tape, query, params, EDGE_QUERY, edge_feats)?;
    let kk = mlp_forward(tape, key, params, EDGE_KEY, edge_feats)?;
    let scores = tape.row_dot(q, kk)?;
    let grouped = tape.reshape(scores, vec![e / k, k])?;
    tape.softmax_rows(grouped)
}

/// `v'_i = ρ(Σ_j β_ij e_ij ‖ x_i)`; `[n, d]`.
pub fn update_nodes<T: Scalar>(
    tape: &mut Tape<T>,
    rho: &MlpSpec,
    params: &Binding,
    edge_feats: Var,
    beta: Var,
    states: Var,
) -> Result<Var> {
    let (n, k) = (tape.value(beta).rows(), tape.value(beta).cols());
    if tape.value(edge_feats).rows() != n * k || tape.value(states).rows() != n {
        return Err(shape_err!(
            "β {:?} does not match {} edges and {} nodes",
            tape.value(beta).shape(),
            tape.value(edge_feats).rows(),
            tape.value(states).rows()
        ));
    }
    let flat = tape.reshape(beta, vec![n * k])?;
    let weighted = tape.row_scale(edge_feats, flat)?;
    let message = tape.sum_groups(weighted, k)?;
    let input = tape.concat_cols(&[message, states])?;
    mlp_forward(tape, rho, params, RHO, input)
}

/// Intermediate and final handles of one EdgeFocus pass.
#[derive(Debug, Clone, Copy)]
pub struct EdgeFocusVars {
    pub edge_features: Var,
    pub beta: Var,
    pub updated: Var,
}

/// Full operator over a node batch. `positions` are constants (`[n, d]`).
pub fn edge_focus<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &EdgeFocusSpec,
    params: &Binding,
    states: Var,
    positions: &Tensor<T>,
    layout: &EdgeLayout,
) -> Result<EdgeFocusVars> {
    let rel = tape.leaf(relative_positions(positions, layout)?);
    let edge_feats = edge_features(tape, &spec.phi, params, states, rel, layout)?;
    let beta = edge_attention(tape, &spec.query, &spec.key, params, edge_feats, layout.k)?;
    let updated = update_nodes(tape, &spec.rho, params, edge_feats, beta, states)?;
    Ok(EdgeFocusVars {
        edge_features: edge_feats,
        beta,
        updated,
    })
}

/// Runs the operator on one query's raw node states; returns `v'` per slot.
pub fn edge_focus_query<T: Scalar>(
    query: &GraphQuery<T>,
    spec: &EdgeFocusSpec,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let binding = tape.bind(params);
    let states: Vec<Vec<T>> = query.nodes.iter().map(|n| n.state.clone()).collect();
    let positions: Vec<Vec<T>> = query.nodes.iter().map(|n| n.position.clone()).collect();
    let layout = EdgeLayout::from_queries(&[query])?;
    let sv = tape.leaf(Tensor::from_rows(&states)?);
    let out = edge_focus(&mut tape, spec, &binding, sv, &Tensor::from_rows(&positions)?, &layout)?;
    Ok(tape.value(out.updated).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind_with(store: &ParamStore<f64>) -> (Tape<f64>, Binding) {
        let mut tape = Tape::new();
        let b = tape.bind(store);
        (tape, b)
    }

    #[test]
    fn hand_evaluated_edge_feature() {
        // single linear φ: all-ones [4, 2] weight, zero bias.
        // input [1, −1 ‖ 2, 0] → every unit 1 − 1 + 2 + 0 = 2
        let phi = MlpSpec::linear(4, 2, true).unwrap();
        let mut store = ParamStore::new(0);
        phi.register(&mut store, PHI).unwrap();
        store.set("phi.0.weight", Tensor::filled(vec![4, 2], 1.0).unwrap()).unwrap();
        let (mut tape, b) = bind_with(&store);
        let states = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap());
        let layout = EdgeLayout::new(1, vec![0, 1], vec![1, 0]).unwrap();
        let positions = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let rel = relative_positions(&positions, &layout).unwrap();
        assert_eq!(rel.row(0), &[1.0, -1.0]);
        // swapping i and j negates the relative position
        assert_eq!(rel.row(1), &[-1.0, 1.0]);
        let rv = tape.leaf(rel);
        let e = edge_features(&mut tape, &phi, &b, states, rv, &layout).unwrap();
        assert_eq!(tape.value(e).row(0), &[2.0, 2.0]);
    }

    #[test]
    fn coincident_positions_give_zero_relative_half() {
        let positions = Tensor::from_rows(&[vec![0.3, 0.4], vec![0.3, 0.4]]).unwrap();
        let layout = EdgeLayout::new(1, vec![0, 1], vec![1, 0]).unwrap();
        let rel = relative_positions(&positions, &layout).unwrap();
        assert!(rel.values().iter().all(|&v| v == 0.0));
    }

    fn attention_store(d: usize) -> (EdgeFocusSpec, ParamStore<f64>) {
        let spec = EdgeFocusSpec::new(d).unwrap();
        let mut store = ParamStore::new(4);
        spec.register(&mut store).unwrap();
        (spec, store)
    }

    #[test]
    fn single_edge_weight_is_one() {
        let (spec, store) = attention_store(3);
        let (mut tape, b) = bind_with(&store);
        let e = tape.leaf(Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.0, 1.0, 1.0]]).unwrap());
        let beta = edge_attention(&mut tape, &spec.query, &spec.key, &b, e, 1).unwrap();
        assert_eq!(tape.value(beta).values(), &[1.0, 1.0]);
    }

    #[test]
    fn identical_edges_give_uniform_weights() {
        let (spec, store) = attention_store(3);
        let (mut tape, b) = bind_with(&store);
        let e = tape.leaf(Tensor::from_rows(&vec![vec![0.5, -1.0, 2.0]; 4]).unwrap());
        let beta = edge_attention(&mut tape, &spec.query, &spec.key, &b, e, 4).unwrap();
        assert!(tape.value(beta).values().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn score_ln3_vs_zero() {
        // q = identity, k = identity, biases 0: s = |e|². Edges with |e|² = ln 3 and 0.
        let d = 2;
        let (spec, mut store) = attention_store(d);
        store.set("edge_q.0.weight", Tensor::identity(d).unwrap()).unwrap();
        store.set("edge_k.0.weight", Tensor::identity(d).unwrap()).unwrap();
        let (mut tape, b) = bind_with(&store);
        let e = tape.leaf(Tensor::from_rows(&[vec![3f64.ln().sqrt(), 0.0], vec![0.0, 0.0]]).unwrap());
        let beta = edge_attention(&mut tape, &spec.query, &spec.key, &b, e, 2).unwrap();
        let v = tape.value(beta).values();
        assert!((v[0] - 0.75).abs() < 1e-15 && (v[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_edges_is_contract_error() {
        assert!(matches!(EdgeLayout::new(0, vec![], vec![]), Err(GqnError::Contract(_))));
        let (spec, store) = attention_store(2);
        let (mut tape, b) = bind_with(&store);
        let e = tape.leaf(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        assert!(matches!(
            edge_attention(&mut tape, &spec.query, &spec.key, &b, e, 0),
            Err(GqnError::Contract(_))
        ));
    }

    /// ρ weights that copy the `x_i` half of the input: [0; I].
    fn passthrough_rho(store: &mut ParamStore<f64>, d: usize) {
        let mut w0 = vec![0.0; 2 * d * d];
        for c in 0..d {
            w0[(d + c) * d + c] = 1.0;
        }
        store.set("rho.0.weight", Tensor::matrix(2 * d, d, w0).unwrap()).unwrap();
        store.set("rho.1.weight", Tensor::identity(d).unwrap()).unwrap();
    }

    #[test]
    fn zero_messages_with_passthrough_rho_keep_states() {
        let d = 3;
        let (spec, mut store) = attention_store(d);
        passthrough_rho(&mut store, d);
        let (mut tape, b) = bind_with(&store);
        // nonnegative states so the hidden ReLU is transparent
        let states = tape.leaf(Tensor::from_rows(&[vec![0.2, 1.5, 0.0], vec![3.0, 0.1, 0.7]]).unwrap());
        let e = tape.leaf(Tensor::zeros(vec![4, d]).unwrap());
        let beta = tape.leaf(Tensor::filled(vec![2, 2], 0.5).unwrap());
        let v = update_nodes(&mut tape, &spec.rho, &b, e, beta, states).unwrap();
        assert_eq!(tape.value(v), tape.value(states));
    }

    #[test]
    fn single_neighbour_update_uses_raw_edge() {
        let d = 2;
        let (spec, store) = attention_store(d);
        let (mut tape, b) = bind_with(&store);
        let states = tape.leaf(Tensor::from_rows(&[vec![0.2, 1.5], vec![3.0, 0.1]]).unwrap());
        let e = tape.leaf(Tensor::from_rows(&[vec![0.4, -0.3], vec![1.0, 2.0]]).unwrap());
        let beta = tape.leaf(Tensor::filled(vec![2, 1], 1.0).unwrap());
        let v = update_nodes(&mut tape, &spec.rho, &b, e, beta, states).unwrap();
        let direct_in = tape.concat_cols(&[e, states]).unwrap();
        let direct = mlp_forward(&mut tape, &spec.rho, &b, RHO, direct_in).unwrap();
        assert_eq!(tape.value(v), tape.value(direct));
    }

    #[test]
    fn edge_order_within_node_is_irrelevant() {
        let d = 3;
        let (spec, store) = attention_store(d);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..d).map(|c| ((i * 3 + c) as f64).sin()).collect()).collect();
        let run = |targets: Vec<usize>| {
            let (mut tape, b) = bind_with(&store);
            let positions = Tensor::from_rows(&rows).unwrap().map(|v| v * 0.5);
            let states = tape.leaf(Tensor::from_rows(&rows).unwrap());
            let layout = EdgeLayout::new(3, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3], targets).unwrap();
            let out = edge_focus(&mut tape, &spec, &b, states, &positions, &layout).unwrap();
            tape.value(out.updated).clone()
        };
        let a = run(vec![1, 2, 3, 0, 2, 3, 0, 1, 3, 0, 1, 2]);
        let b = run(vec![3, 1, 2, 2, 3, 0, 1, 3, 0, 2, 0, 1]);
        assert_eq!(a, b);
    }

    #[test]
    fn layout_must_be_grouped() {
        assert!(EdgeLayout::new(2, vec![0, 1, 0, 1], vec![1, 0, 1, 0]).is_err());
    }
}
