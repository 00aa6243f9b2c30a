//! DeepContext pooling: per-query max-pool summaries, `L` rounds of
//! self-attention across all queries, and infusion of the exchanged summary
//! back into every node of its query.

use crate::error::{shape_err, GqnError, Result};
use crate::numerics::{
    mlp_forward, register_self_attention, self_attention_layer, Binding, MlpSpec, ParamStore, Scalar,
    Tape, Var,
};

pub const CONTEXT_ATTENTION: &str = "ctx_attn";
pub const ETA: &str = "eta";

#[derive(Debug, Clone, PartialEq)]
pub struct DeepContextSpec {
    /// Self-attention rounds `L`.
    pub layers: usize,
    /// One set of attention projections reused by every round, or one per round.
    pub shared: bool,
    pub eta: MlpSpec,
}

impl DeepContextSpec {
    /// `η: 2d → d → d`.
    pub fn new(d: usize, layers: usize, shared: bool) -> Result<Self> {
        Ok(Self {
            layers,
            shared,
            eta: MlpSpec::relu_hidden(&[2 * d, d, d])?,
        })
    }

    fn layer_prefix(&self, layer: usize) -> String {
        if self.shared {
            CONTEXT_ATTENTION.to_string()
        } else {
            format!("{CONTEXT_ATTENTION}.l{layer}")
        }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, d: usize) -> Result<()> {
        if self.shared {
            if self.layers > 0 {
                register_self_attention(store, CONTEXT_ATTENTION, d)?;
            }
        } else {
            for l in 0..self.layers {
                register_self_attention(store, &self.layer_prefix(l), d)?;
            }
        }
        self.eta.register(store, ETA)
    }
}

/// Elementwise max over each query's nodes: `[Q·n, d] → [Q, d]`.
pub fn pool_query<T: Scalar>(tape: &mut Tape<T>, nodes: Var, nodes_per_query: usize) -> Result<Var> {
    if nodes_per_query == 0 {
        return Err(GqnError::Contract("pooling a query without nodes".into()));
    }
    tape.group_max(nodes, nodes_per_query)
}

/// `L` rounds of residual self-attention over the summaries `[τ, d]`.
/// `L = 0` returns the input handle unchanged.
pub fn context_exchange<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &DeepContextSpec,
    params: &Binding,
    summaries: Var,
) -> Result<Var> {
    let mut g = summaries;
    for l in 0..spec.layers {
        g = self_attention_layer(tape, g, params, &spec.layer_prefix(l))?;
    }
    Ok(g)
}

/// `v''_i = η(v'_i ‖ g'_q)` where node row `i` belongs to query
/// `i / nodes_per_query`.
pub fn infuse_context<T: Scalar>(
    tape: &mut Tape<T>,
    eta: &MlpSpec,
    params: &Binding,
    nodes: Var,
    context: Var,
    nodes_per_query: usize,
) -> Result<Var> {
    let (rows, queries) = (tape.value(nodes).rows(), tape.value(context).rows());
    if nodes_per_query == 0 || rows != queries * nodes_per_query {
        return Err(shape_err!(
            "{rows} node rows do not match {queries} queries of {nodes_per_query} nodes"
        ));
    }
    let owner = (0..rows).map(|i| i / nodes_per_query).collect();
    let spread = tape.gather_rows(context, owner)?;
    let input = tape.concat_cols(&[nodes, spread])?;
    mlp_forward(tape, eta, params, ETA, input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn leaf(tape: &mut Tape<f64>, rows: &[Vec<f64>]) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let single = leaf(&mut tape, &[vec![1.0, -2.0]]);
        let g = pool_query(&mut tape, single, 1).unwrap();
        assert_eq!(tape.value(g).values(), &[1.0, -2.0]);

        let pair = leaf(&mut tape, &[vec![1.0, 5.0], vec![3.0, 2.0]]);
        let g = pool_query(&mut tape, pair, 2).unwrap();
        assert_eq!(tape.value(g).values(), &[3.0, 5.0]);

        let same = leaf(&mut tape, &vec![vec![0.5, 0.25]; 3]);
        let g = pool_query(&mut tape, same, 3).unwrap();
        assert_eq!(tape.value(g).values(), &[0.5, 0.25]);

        assert!(matches!(pool_query(&mut tape, same, 0), Err(GqnError::Contract(_))));
    }

    fn spec_store(d: usize, layers: usize, shared: bool) -> (DeepContextSpec, ParamStore<f64>) {
        let spec = DeepContextSpec::new(d, layers, shared).unwrap();
        let mut store = ParamStore::new(9);
        spec.register(&mut store, d).unwrap();
        (spec, store)
    }

    fn summaries() -> Vec<Vec<f64>> {
        (0..5).map(|q| (0..4).map(|c| ((q * 5 + c) as f64 * 0.61).cos()).collect()).collect()
    }

    #[test]
    fn zero_rounds_is_identity() {
        let (spec, store) = spec_store(4, 0, true);
        let mut tape = Tape::new();
        let b = tape.bind(&store);
        let g = leaf(&mut tape, &summaries());
        let out = context_exchange(&mut tape, &spec, &b, g).unwrap();
        assert_eq!(tape.value(out), tape.value(g));
    }

    #[test]
    fn single_query_zero_values_keeps_summary() {
        let (spec, mut store) = spec_store(4, 3, true);
        store.set("ctx_attn.value", Tensor::zeros(vec![4, 4]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&store);
        let g = leaf(&mut tape, &summaries()[..1]);
        let out = context_exchange(&mut tape, &spec, &b, g).unwrap();
        assert_eq!(tape.value(out), tape.value(g));
    }

    #[test]
    fn exchange_is_permutation_equivariant() {
        for shared in [true, false] {
            let (spec, store) = spec_store(4, 3, shared);
            let rows = summaries();
            let perm = [2, 4, 0, 3, 1];
            let run = |rows: &[Vec<f64>]| {
                let mut tape = Tape::new();
                let b = tape.bind(&store);
                let g = leaf(&mut tape, rows);
                let out = context_exchange(&mut tape, &spec, &b, g).unwrap();
                tape.value(out).clone()
            };
            let base = run(&rows);
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&p| rows[p].clone()).collect();
            let out = run(&permuted);
            for (slot, &p) in perm.iter().enumerate() {
                assert_eq!(out.row(slot), base.row(p));
            }
        }
    }

    #[test]
    fn unshared_rounds_register_per_layer() {
        let (_, store) = spec_store(4, 2, false);
        assert!(store.contains("ctx_attn.l0.query") && store.contains("ctx_attn.l1.value"));
        let (_, store) = spec_store(4, 2, true);
        assert!(store.contains("ctx_attn.query") && !store.contains("ctx_attn.l0.query"));
    }

    #[test]
    fn eta_passthrough_and_bias() {
        let d = 2;
        let (spec, mut store) = spec_store(d, 1, true);
        let mut w0 = vec![0.0; 2 * d * d];
        for c in 0..d {
            w0[c * d + c] = 1.0;
        }
        store.set("eta.0.weight", Tensor::matrix(2 * d, d, w0).unwrap()).unwrap();
        store.set("eta.1.weight", Tensor::identity(d).unwrap()).unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&store);
        let v = leaf(&mut tape, &[vec![0.5, 2.0], vec![1.0, 0.0], vec![0.5, 2.0], vec![3.0, 0.25]]);
        let g = leaf(&mut tape, &[vec![-7.0, 9.0], vec![100.0, -3.0]]);
        let out = infuse_context(&mut tape, &spec.eta, &b, v, g, 2).unwrap();
        assert_eq!(tape.value(out), tape.value(v));

        let (spec, mut store) = spec_store(d, 1, true);
        store.set("eta.1.weight", Tensor::zeros(vec![d, d]).unwrap()).unwrap();
        store.set("eta.1.bias", Tensor::vector(vec![0.75, -0.5]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&store);
        let v = leaf(&mut tape, &[vec![0.5, 2.0], vec![0.5, 2.0]]);
        let g = leaf(&mut tape, &[vec![1.0, 1.0]]);
        let out = infuse_context(&mut tape, &spec.eta, &b, v, g, 2).unwrap();
        assert_eq!(tape.value(out).values(), &[0.75, -0.5, 0.75, -0.5]);
    }

    #[test]
    fn identical_nodes_get_identical_output() {
        let (spec, store) = spec_store(3, 1, true);
        let mut tape = Tape::new();
        let b = tape.bind(&store);
        let v = leaf(&mut tape, &[vec![0.1, -0.4, 0.9], vec![0.1, -0.4, 0.9]]);
        let g = leaf(&mut tape, &[vec![0.3, 0.3, -1.0]]);
        let out = infuse_context(&mut tape, &spec.eta, &b, v, g, 2).unwrap();
        assert_eq!(tape.value(out).row(0), tape.value(out).row(1));
        assert_eq!(tape.value(out).cols(), 3);
    }
}
