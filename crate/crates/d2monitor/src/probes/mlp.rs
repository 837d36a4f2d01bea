//! Two-layer MLP probe: `s = W_out Dropout(ReLU(W_in x + b_in)) + b_out`.

use crate::util;

use super::forward::{matvec, outer_acc, relu};
use super::ProbeSpec;

pub(crate) struct Cache {
    pub x: Vec<f64>,
    /// Pre-activation of the hidden layer.
    pub a1: Vec<f64>,
    /// Hidden layer after ReLU and dropout (the head input).
    pub hidden: Vec<f64>,
}

pub(crate) fn forward(
    spec: &ProbeSpec,
    w: &[f64],
    x: &[f64],
    mask: Option<&[f64]>,
) -> (f64, Cache) {
    let lay = spec.layout();
    let (k, d) = (spec.k, spec.d);
    let mut a1 = vec![0.0; k];
    matvec(&w[lay.mlp_w_in.clone()], x, k, d, &mut a1);
    for (a, b) in a1.iter_mut().zip(&w[lay.mlp_b_in.clone()]) {
        *a += b;
    }
    let mut hidden: Vec<f64> = a1.iter().map(|&a| relu(a)).collect();
    if let Some(m) = mask {
        for (h, mi) in hidden.iter_mut().zip(m) {
            *h *= mi;
        }
    }
    let logit = util::dot(&w[lay.mlp_w_out.clone()], &hidden) + w[lay.mlp_b_out];
    (logit, Cache { x: x.to_vec(), a1, hidden })
}

pub(crate) fn backward(
    spec: &ProbeSpec,
    w: &[f64],
    cache: &Cache,
    mask: Option<&[f64]>,
    dlogit: f64,
    grad: &mut [f64],
) {
    let lay = spec.layout();
    let (k, d) = (spec.k, spec.d);
    // head
    util::axpy(&mut grad[lay.mlp_w_out.clone()], dlogit, &cache.hidden);
    grad[lay.mlp_b_out] += dlogit;
    // back through dropout + relu
    let w_out = &w[lay.mlp_w_out.clone()];
    let mut da1 = vec![0.0; k];
    for i in 0..k {
        let mut dh = dlogit * w_out[i];
        if let Some(m) = mask {
            dh *= m[i];
        }
        da1[i] = if cache.a1[i] > 0.0 { dh } else { 0.0 };
    }
    outer_acc(&mut grad[lay.mlp_w_in.clone()], &da1, &cache.x, k, d);
    for (g, da) in grad[lay.mlp_b_in.clone()].iter_mut().zip(&da1) {
        *g += da;
    }
}
