//! Finite-difference verification of tape gradients.

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{GqnError, Result};

use super::params::group_of;
use super::{backward, Binding, ParamStore, Scalar, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step, in `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Coordinates checked per parameter tensor; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    /// Seed for choosing coordinates when sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GroupCheck {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Largest analytic gradient magnitude seen in the group.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub max_rel_error: f64,
    pub groups: IndexMap<String, GroupCheck>,
    /// Analytic gradient of every parameter, in registration order.
    #[serde(skip)]
    pub analytic: IndexMap<String, Vec<f64>>,
}

/// `|a − n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<T, F>(f: &F, params: &ParamStore<T>) -> Result<(T, Tape<T>, Binding, Var)>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &Binding) -> Result<Var>,
{
    let mut tape = Tape::new();
    let binding = tape.bind(params);
    let loss = f(&mut tape, &binding)?;
    let value = tape.value(loss).item()?;
    Ok((value, tape, binding, loss))
}

/// Maximum relative error between tape gradients and central differences over
/// all coordinates of all parameters.
pub fn grad_check<T, F>(f: F, params: &ParamStore<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &Binding) -> Result<Var>,
{
    let config = GradCheckConfig {
        eps,
        ..GradCheckConfig::default()
    };
    Ok(grad_check_with(f, params, &config)?.max_rel_error)
}

/// Full report with per-group maxima.
///
/// `f` builds a scalar loss on a fresh tape from the bound parameters. It is
/// evaluated twice at the base point first; differing results are a contract
/// error, since finite differences are meaningless for a non-deterministic
/// function.
pub fn grad_check_with<T, F>(
    f: F,
    params: &ParamStore<T>,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &Binding) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&config.eps) {
        return Err(GqnError::InvalidInput(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            config.eps
        )));
    }
    let (first, tape, binding, loss) = evaluate(&f, params)?;
    let (second, ..) = evaluate(&f, params)?;
    if first.as_f64().to_bits() != second.as_f64().to_bits() {
        return Err(GqnError::Contract(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }
    let mut scratch = params.clone();
    let grads = backward(&tape, loss, &mut scratch, &binding)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut groups: IndexMap<String, GroupCheck> = IndexMap::new();
    let mut analytic_all = IndexMap::new();
    let mut max_rel_error = 0f64;
    let eps = T::lit(config.eps);
    for (name, tensor) in params.iter() {
        let analytic: Vec<f64> = grads[name].values().iter().map(|g| g.as_f64()).collect();
        let n = tensor.numel();
        let coords: Vec<usize> = match config.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let entry = groups.entry(group_of(name).to_string()).or_default();
        for &i in &coords {
            let base = tensor.values()[i];
            let mut probe = params.clone();
            probe.set(name, tensor.with_value(i, base + eps))?;
            let (plus, ..) = evaluate(&f, &probe)?;
            probe.set(name, tensor.with_value(i, base - eps))?;
            let (minus, ..) = evaluate(&f, &probe)?;
            // Divide by the realised step, which differs from 2·eps by rounding.
            let step = (base + eps) - (base - eps);
            let numeric = ((plus - minus) / step).as_f64();
            let err = relative_error(analytic[i], numeric);
            entry.max_rel_error = entry.max_rel_error.max(err);
            entry.max_abs_grad = entry.max_abs_grad.max(analytic[i].abs());
            entry.coords_checked += 1;
            max_rel_error = max_rel_error.max(err);
        }
        analytic_all.insert(name.to_string(), analytic);
    }
    Ok(GradCheckReport {
        eps: config.eps,
        max_rel_error,
        groups,
        analytic: analytic_all,
    })
}
