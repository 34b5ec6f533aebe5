//! Tape versions of the classifier losses and of the difference flow.

use super::one_hot;
use crate::error::{Error, Result};
use crate::nd::{Tape, Tensor, Var};

/// Row-wise log-probabilities `log softmax(gamma * cos)`, shape `M x N`.
pub fn cosine_log_probs_var<'t>(prototypes: Var<'t>, features: Var<'t>, gamma: f64) -> Result<Var<'t>> {
    let f = features.normalize_rows()?;
    let p = prototypes.normalize_rows()?;
    Ok(f.matmul(p.t()?)?.scale(gamma).log_softmax())
}

fn nll<'t>(tape: &'t Tape, log_probs: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = log_probs.shape();
    if labels.is_empty() || shape[0] != labels.len() || labels.iter().any(|&y| y >= shape[1]) {
        return Err(Error::Validation(format!("labels do not fit log-probabilities {shape:?}")));
    }
    let mask = tape.constant(one_hot(labels, shape[1]));
    Ok(log_probs.mul(mask)?.sum().scale(-1.0 / labels.len() as f64))
}

/// Mean query NLL under the cosine classifier.
pub fn cosine_cross_entropy_var<'t>(
    prototypes: Var<'t>,
    features: Var<'t>,
    labels: &[usize],
    gamma: f64,
) -> Result<Var<'t>> {
    let lp = cosine_log_probs_var(prototypes, features, gamma)?;
    nll(prototypes.tape(), lp, labels)
}

/// Euclidean-form NLL with `sphere` from [`super::sphere_features`], so
/// the sphere radii are constants of the graph.
pub fn euclidean_cross_entropy_var<'t>(
    prototypes: Var<'t>,
    sphere: &Tensor,
    labels: &[usize],
    gamma: f64,
) -> Result<Var<'t>> {
    let tape = prototypes.tape();
    let m = labels.len();
    let n = prototypes.shape()[0];
    let diff = tape.constant(sphere.clone()).sub(prototypes.tile_rows(m)?)?;
    let logits = diff.square().sum_cols()?.reshape(vec![m, n])?.scale(-gamma);
    nll(tape, logits.log_softmax(), labels)
}

/// `1/M * sum_i c_ik (g_ik - p_k)` where `coeffs` is `M x N` and
/// `g_ik = f_i * radii_k` when radii are given, else `g_ik = f_i`.
pub fn difference_flow_var<'t>(
    prototypes: Var<'t>,
    features: Var<'t>,
    coeffs: Var<'t>,
    radii: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let m = features.shape()[0];
    let weighted = coeffs.t()?.matmul(features)?;
    let weighted = match radii {
        Some(r) => weighted.mul_col(r)?,
        None => weighted,
    };
    let mass = coeffs.sum_rows()?.t()?;
    weighted.sub(prototypes.mul_col(mass)?).map(|v| v.scale(1.0 / m as f64))
}
