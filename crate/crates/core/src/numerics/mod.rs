//! Dense tensors, a reverse-mode tape and the layers built on it.

mod attention;
pub mod gradcheck;
mod mlp;
mod params;
pub mod reduce;
mod scalar;
mod tape;
mod tensor;

pub use attention::{register_self_attention, self_attention_layer};
pub use gradcheck::{grad_check, grad_check_with, GradCheckConfig, GradCheckReport, GroupCheck};
pub use mlp::{mlp_forward, Activation, MlpSpec};
pub use params::{group_of, GradMap, InitScheme, ParamStore};
pub use scalar::Scalar;
pub use tape::{Binding, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{GqnError, Result};

/// Softmax of a non-empty vector of finite scores.
pub fn softmax<T: Scalar>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    if scores.rank() != 1 {
        return Err(GqnError::InvalidInput(format!(
            "softmax expects a vector, got shape {:?}",
            scores.shape()
        )));
    }
    if !scores.all_finite() {
        return Err(GqnError::InvalidInput("softmax of non-finite scores".into()));
    }
    Tensor::vector(tape::softmax_rows_kernel(scores.values(), scores.numel()))
}

/// Runs the reverse pass from `loss` and stores a gradient on every parameter
/// of `params` (zero for parameters the loss does not reach).
pub fn backward<T: Scalar>(
    tape: &Tape<T>,
    loss: Var,
    params: &mut ParamStore<T>,
    binding: &Binding,
) -> Result<GradMap<T>> {
    let grads = tape.backward(loss)?;
    let mut out = GradMap::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let numel = params.get(&name)?.numel();
        let g = binding
            .get(&name)
            .ok()
            .and_then(|v| grads.wrt(v))
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); numel]);
        params.set_grad(&name, g.clone())?;
        out.insert(name.clone(), Tensor::new(params.get(&name)?.shape().to_vec(), g)?);
    }
    Ok(out)
}
