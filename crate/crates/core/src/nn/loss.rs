//! Softmax cross-entropy, numerically stabilized by max-shifting.

use super::{s, Scalar, Tensor};
use crate::error::{Error, Result};

/// Loss and probability vector for a single logit row. Loss is
/// `-log p[target]`.
pub fn softmax_cross_entropy<F: Scalar>(logits: &[F], target: usize) -> Result<(F, Vec<F>)> {
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target {target} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut exps: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: F = exps.iter().cloned().fold(F::zero(), |a, b| a + b);
    let lse = sum.ln();
    let loss = lse - (logits[target] - max);
    for e in &mut exps {
        *e = *e / sum;
    }
    Ok((loss, exps))
}

/// Mean loss over a batch of logits (B, N) with one target per row, plus the
/// full probability tensor.
pub fn softmax_xent_batch<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[usize],
) -> Result<(F, Tensor<F>)> {
    let batch = logits.batch();
    let n = logits.features();
    if targets.len() != batch {
        return Err(Error::invalid(format!(
            "{} targets for a batch of {batch}",
            targets.len()
        )));
    }
    let mut probs = vec![F::zero(); batch * n];
    let mut total = F::zero();
    for (b, &t) in targets.iter().enumerate() {
        let row = &logits.data[b * n..(b + 1) * n];
        let (loss, p) = softmax_cross_entropy(row, t)?;
        total = total + loss;
        probs[b * n..(b + 1) * n].copy_from_slice(&p);
    }
    Ok((
        total / s(batch as f64),
        Tensor::from_vec([batch, n, 1, 1], probs),
    ))
}

/// Gradient of the mean batch loss w.r.t. the logits: (p - onehot) / B.
pub fn softmax_xent_grad<F: Scalar>(probs: &Tensor<F>, targets: &[usize]) -> Tensor<F> {
    let batch = probs.batch();
    let n = probs.features();
    let inv_b: F = s(1.0 / batch as f64);
    let mut grad = probs.data.clone();
    for (b, &t) in targets.iter().enumerate() {
        grad[b * n + t] = grad[b * n + t] - F::one();
    }
    for g in &mut grad {
        *g = *g * inv_b;
    }
    Tensor::from_vec(probs.shape(), grad)
}
