use crate::error::{shape_err, Result};

use super::{Binding, ParamStore, Scalar, Tape, Var};

pub fn query_name(prefix: &str) -> String {
    format!("{prefix}.query")
}

pub fn key_name(prefix: &str) -> String {
    format!("{prefix}.key")
}

pub fn value_name(prefix: &str) -> String {
    format!("{prefix}.value")
}

/// Registers `d × d` query, key and value projections (no biases).
pub fn register_self_attention<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
) -> Result<()> {
    store.register_uniform(&query_name(prefix), vec![d, d])?;
    store.register_uniform(&key_name(prefix), vec![d, d])?;
    store.register_uniform(&value_name(prefix), vec![d, d])
}

/// Single-head scaled dot-product self-attention over the rows of `x`
/// (`[τ, d]`) with a residual connection:
/// `out = x + softmax(Q Kᵀ / √d) V`.
///
/// The sums over the set axis are canonical, so permuting the rows of `x`
/// permutes the output rows and leaves every value bit-identical.
pub fn self_attention_layer<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &Binding,
    prefix: &str,
) -> Result<Var> {
    let t = tape.value(x);
    if t.rank() != 2 {
        return Err(shape_err!("self-attention input must be [τ, d], got {:?}", t.shape()));
    }
    let d = t.cols();
    let projections = [query_name(prefix), key_name(prefix), value_name(prefix)].map(|n| params.get(&n));
    let [wq, wk, wv] = projections;
    let (wq, wk, wv) = (wq?, wk?, wv?);
    for w in [wq, wk, wv] {
        if tape.value(w).shape() != [d, d] {
            return Err(shape_err!(
                "attention projection {:?} does not match width {d}",
                tape.value(w).shape()
            ));
        }
    }
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, T::one() / T::lit(d as f64).sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    let attended = tape.matmul_set(weights, v)?;
    tape.add(x, attended)
}
