use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};

use super::{Binding, ParamStore, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// Layer widths, per-layer activation and bias flags of a perceptron.
///
/// `widths` has one more entry than there are layers; the last layer never
/// has an activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    bias: Vec<bool>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>, bias: Vec<bool>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(config_err!("MLP needs at least two positive widths, got {widths:?}"));
        }
        let layers = widths.len() - 1;
        if activations.len() != layers || bias.len() != layers {
            return Err(config_err!(
                "MLP with {layers} layers needs {layers} activations and bias flags"
            ));
        }
        if activations[layers - 1] != Activation::None {
            return Err(config_err!("final MLP layer must not have an activation"));
        }
        Ok(Self {
            widths,
            activations,
            bias,
        })
    }

    /// ReLU on hidden layers, none on the output, biases everywhere.
    pub fn relu_hidden(widths: &[usize]) -> Result<Self> {
        let layers = widths.len().saturating_sub(1);
        let mut activations = vec![Activation::Relu; layers];
        if let Some(last) = activations.last_mut() {
            *last = Activation::None;
        }
        Self::new(widths.to_vec(), activations, vec![true; layers])
    }

    pub fn linear(input: usize, output: usize, bias: bool) -> Result<Self> {
        Self::new(vec![input, output], vec![Activation::None], vec![bias])
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn has_bias(&self, layer: usize) -> bool {
        self.bias[layer]
    }

    pub fn activation(&self, layer: usize) -> Activation {
        self.activations[layer]
    }

    pub fn weight_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.weight")
    }

    pub fn bias_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.bias")
    }

    /// Registers `{prefix}.{layer}.weight` (`[in, out]`) and, where enabled,
    /// `{prefix}.{layer}.bias` (zero-initialised).
    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        for layer in 0..self.num_layers() {
            let (i, o) = (self.widths[layer], self.widths[layer + 1]);
            store.register_uniform(&Self::weight_name(prefix, layer), vec![i, o])?;
            if self.bias[layer] {
                store.register_zeros(&Self::bias_name(prefix, layer), vec![o])?;
            }
        }
        Ok(())
    }

    /// Number of multiply-adds, bias adds and activations for one row.
    pub fn flops_per_row(&self) -> u64 {
        (0..self.num_layers())
            .map(|l| {
                let (i, o) = (self.widths[l] as u64, self.widths[l + 1] as u64);
                let mut f = 2 * i * o;
                if self.bias[l] {
                    f += o;
                }
                if self.activations[l] == Activation::Relu {
                    f += o;
                }
                f
            })
            .sum()
    }
}

/// Applies the perceptron registered under `prefix` to every row of `input`.
pub fn mlp_forward<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &MlpSpec,
    params: &Binding,
    prefix: &str,
    input: Var,
) -> Result<Var> {
    let width = tape.value(input).cols();
    if width != spec.input_width() {
        return Err(shape_err!(
            "MLP `{prefix}` expects input width {}, got {width}",
            spec.input_width()
        ));
    }
    let mut h = input;
    if tape.value(h).rank() != 2 {
        let rows = tape.value(h).rows();
        h = tape.reshape(h, vec![rows, width])?;
    }
    for layer in 0..spec.num_layers() {
        let w = params.get(&MlpSpec::weight_name(prefix, layer))?;
        let expected = [spec.widths[layer], spec.widths[layer + 1]];
        if tape.value(w).shape() != expected {
            return Err(shape_err!(
                "`{prefix}` layer {layer} weight has shape {:?}, expected {expected:?}",
                tape.value(w).shape()
            ));
        }
        h = tape.matmul(h, w)?;
        if spec.bias[layer] {
            let b = params.get(&MlpSpec::bias_name(prefix, layer))?;
            h = tape.add_bias(h, b)?;
        }
        if spec.activations[layer] == Activation::Relu {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}
