//! Batched loss + analytic gradient for all architectures.

use crate::error::{D2Error, Result};
use crate::util;

use super::forward::{lp_forward, make_masks, sigmoid, Masks};
use super::{attn, lstm, mlp, Arch, ProbeInput, ProbeSpec};

/// Numerically stable binary cross-entropy with logits,
/// `L = log(1 + exp(-(2y-1) * s))`.
pub fn bce_with_logits(logit: f64, label: u8) -> f64 {
    let z = if label == 1 { logit } else { -logit };
    // softplus(-z)
    (-z).max(0.0) + (1.0 + (-(-z).abs()).exp()).ln()
}

/// Mean batch loss and its analytic gradient with respect to every
/// parameter. The dropout mask for each sample is drawn deterministically
/// from `rng_seed`, so a repeated call reproduces the same (loss, grad).
/// Accepts owned or borrowed inputs.
pub fn gradient<B: std::borrow::Borrow<ProbeInput>>(
    spec: &ProbeSpec,
    weights: &[f64],
    batch: &[B],
    labels: &[u8],
    rng_seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(D2Error::Invalid("gradient needs a nonempty batch".into()));
    }
    if batch.len() != labels.len() {
        return Err(D2Error::LengthMismatch(format!(
            "{} inputs vs {} labels",
            batch.len(),
            labels.len()
        )));
    }
    let mut grad = vec![0.0; spec.param_count()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (i, (input, &label)) in batch.iter().map(|b| b.borrow()).zip(labels).enumerate() {
        if input.dim() != spec.d {
            return Err(D2Error::ShapeMismatch(format!(
                "batch item {i} has dim {}, probe has {}",
                input.dim(),
                spec.d
            )));
        }
        let masks = if spec.dropout > 0.0 {
            let mut rng =
                util::rng_from(util::derive_seed(rng_seed, util::tag::DROPOUT, i as u64));
            make_masks(spec, input.steps(), &mut rng)
        } else {
            Masks::None
        };
        let logit = match spec.arch {
            Arch::Lp => {
                let x = input.step(0);
                let logit = lp_forward(spec, weights, x);
                let d = scale * (sigmoid(logit) - label as f64);
                let lay = spec.layout();
                util::axpy(&mut grad[lay.lp_w.clone()], d, x);
                grad[lay.lp_b] += d;
                logit
            }
            Arch::Mlp => {
                let (logit, cache) = mlp::forward(spec, weights, input.step(0), masks.head());
                let d = scale * (sigmoid(logit) - label as f64);
                mlp::backward(spec, weights, &cache, masks.head(), d, &mut grad);
                logit
            }
            Arch::TimeAttn => {
                let (logit, cache) = attn::forward(spec, weights, input, masks.head());
                let d = scale * (sigmoid(logit) - label as f64);
                attn::backward(spec, weights, &cache, masks.head(), d, &mut grad);
                logit
            }
            Arch::Lstm => {
                let (logit, cache) = lstm::forward(spec, weights, input, &masks);
                let d = scale * (sigmoid(logit) - label as f64);
                lstm::backward(spec, weights, &cache, &masks, d, &mut grad);
                logit
            }
        };
        loss += bce_with_logits(logit, label) * scale;
    }
    Ok((loss, grad))
}
