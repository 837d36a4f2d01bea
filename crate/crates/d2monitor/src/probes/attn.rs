//! Temporal-attention probe.
//!
//! Each step is layer-normalized, additive attention scores the steps
//! (`e_s = v . tanh(W_a n_s)`, softmax over steps), the attended context is
//! layer-normalized again and classified by a two-layer ReLU head. Handles
//! sequences of any length, which is what makes it usable as the windowed
//! expert.

use crate::util;

use super::forward::{
    layer_norm, layer_norm_backward, matvec, matvec_t_acc, outer_acc, relu, LnCache,
};
use super::{ProbeInput, ProbeSpec};

pub(crate) struct Cache {
    /// Softmax attention over steps.
    pub alpha: Vec<f64>,
    /// Layer-normalized step vectors (attention inputs).
    normed: Vec<Vec<f64>>,
    ln1: Vec<LnCache>,
    /// tanh(W_a n_s) per step.
    tanh_u: Vec<Vec<f64>>,
    ln2: LnCache,
    /// Head input after the second layer norm.
    z: Vec<f64>,
    a1: Vec<f64>,
    hidden: Vec<f64>,
}

pub(crate) fn forward(
    spec: &ProbeSpec,
    w: &[f64],
    input: &ProbeInput,
    mask: Option<&[f64]>,
) -> (f64, Cache) {
    let lay = spec.layout();
    let (d, d_a, k) = (spec.d, spec.d_a, spec.k);
    let steps = input.steps();
    let gamma1 = &w[lay.attn_ln1_g.clone()];
    let beta1 = &w[lay.attn_ln1_b.clone()];
    let w_a = &w[lay.attn_w_a.clone()];
    let v = &w[lay.attn_v.clone()];

    let mut normed = Vec::with_capacity(steps);
    let mut ln1 = Vec::with_capacity(steps);
    let mut tanh_u = Vec::with_capacity(steps);
    let mut scores = Vec::with_capacity(steps);
    for s in 0..steps {
        let (n_s, cache) = layer_norm(input.step(s), gamma1, beta1);
        let mut u = vec![0.0; d_a];
        matvec(w_a, &n_s, d_a, d, &mut u);
        let t: Vec<f64> = u.iter().map(|x| x.tanh()).collect();
        scores.push(util::dot(v, &t));
        normed.push(n_s);
        ln1.push(cache);
        tanh_u.push(t);
    }
    let alpha = softmax(&scores);

    let mut context = vec![0.0; d];
    for s in 0..steps {
        util::axpy(&mut context, alpha[s], &normed[s]);
    }
    let (z, ln2) =
        layer_norm(&context, &w[lay.attn_ln2_g.clone()], &w[lay.attn_ln2_b.clone()]);

    let mut a1 = vec![0.0; k];
    matvec(&w[lay.attn_w1.clone()], &z, k, d, &mut a1);
    for (a, b) in a1.iter_mut().zip(&w[lay.attn_b1.clone()]) {
        *a += b;
    }
    let mut hidden: Vec<f64> = a1.iter().map(|&a| relu(a)).collect();
    if let Some(m) = mask {
        for (h, mi) in hidden.iter_mut().zip(m) {
            *h *= mi;
        }
    }
    let logit = util::dot(&w[lay.attn_w2.clone()], &hidden) + w[lay.attn_b2];
    (logit, Cache { alpha, normed, ln1, tanh_u, ln2, z, a1, hidden })
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
    let (d, d_a, k) = (spec.d, spec.d_a, spec.k);
    let steps = cache.alpha.len();

    // head
    util::axpy(&mut grad[lay.attn_w2.clone()], dlogit, &cache.hidden);
    grad[lay.attn_b2] += dlogit;
    let w2 = &w[lay.attn_w2.clone()];
    let mut da1 = vec![0.0; k];
    for i in 0..k {
        let mut dh = dlogit * w2[i];
        if let Some(m) = mask {
            dh *= m[i];
        }
        da1[i] = if cache.a1[i] > 0.0 { dh } else { 0.0 };
    }
    outer_acc(&mut grad[lay.attn_w1.clone()], &da1, &cache.z, k, d);
    for (g, da) in grad[lay.attn_b1.clone()].iter_mut().zip(&da1) {
        *g += da;
    }
    let mut dz = vec![0.0; d];
    matvec_t_acc(&w[lay.attn_w1.clone()], &da1, k, d, &mut dz);

    // second layer norm -> context gradient
    let mut dcontext = vec![0.0; d];
    {
        let (g2, b2) = (lay.attn_ln2_g.clone(), lay.attn_ln2_b.clone());
        let gamma2 = w[g2.clone()].to_vec();
        let (dgamma, rest) = grad[g2.start..b2.end].split_at_mut(d);
        layer_norm_backward(&dz, &gamma2, &cache.ln2, dgamma, rest, &mut dcontext);
    }

    // context = sum_s alpha_s n_s
    let mut dalpha = vec![0.0; steps];
    let mut dnormed: Vec<Vec<f64>> = (0..steps).map(|_| vec![0.0; d]).collect();
    for (s, dn) in dnormed.iter_mut().enumerate() {
        dalpha[s] = util::dot(&dcontext, &cache.normed[s]);
        util::axpy(dn, cache.alpha[s], &dcontext);
    }

    // softmax
    let dot_ad: f64 = cache.alpha.iter().zip(&dalpha).map(|(a, da)| a * da).sum();
    let descore: Vec<f64> =
        (0..steps).map(|s| cache.alpha[s] * (dalpha[s] - dot_ad)).collect();

    // e_s = v . tanh(W_a n_s)
    let w_a = &w[lay.attn_w_a.clone()];
    let v = &w[lay.attn_v.clone()];
    let mut dw_a = vec![0.0; d_a * d];
    let mut dv = vec![0.0; d_a];
    for s in 0..steps {
        let t = &cache.tanh_u[s];
        util::axpy(&mut dv, descore[s], t);
        let du: Vec<f64> =
            (0..d_a).map(|i| descore[s] * v[i] * (1.0 - t[i] * t[i])).collect();
        outer_acc(&mut dw_a, &du, &cache.normed[s], d_a, d);
        matvec_t_acc(w_a, &du, d_a, d, &mut dnormed[s]);
    }
    util::axpy(&mut grad[lay.attn_w_a.clone()], 1.0, &dw_a);
    util::axpy(&mut grad[lay.attn_v.clone()], 1.0, &dv);

    // first layer norm, per step; input gradient is discarded
    let gamma1 = w[lay.attn_ln1_g.clone()].to_vec();
    let (g1, b1) = (lay.attn_ln1_g.clone(), lay.attn_ln1_b.clone());
    let mut dx = vec![0.0; d];
    for (dn, ln) in dnormed.iter().zip(&cache.ln1) {
        let (dgamma, rest) = grad[g1.start..b1.end].split_at_mut(d);
        layer_norm_backward(dn, &gamma1, ln, dgamma, rest, &mut dx);
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
