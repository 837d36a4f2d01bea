//! Forward dispatch plus the shared dense/layer-norm primitives used by all
//! architectures.

use rand_chacha::ChaCha8Rng;

use crate::error::{D2Error, Result};
use crate::util;

use super::{attn, dropout_mask, lstm, mlp, Arch, ProbeInput, ProbeSpec, LN_EPS};

/// Dropout masks for one forward/backward pass.
pub(crate) enum Masks {
    None,
    /// Head dropout over the K hidden units (`Mlp`, `TimeAttn`).
    Head(Vec<f64>),
    /// Inter-layer dropout for `Lstm`, one mask per step over `d_h` units.
    PerStep(Vec<Vec<f64>>),
}

impl Masks {
    pub(crate) fn head(&self) -> Option<&[f64]> {
        match self {
            Masks::Head(m) => Some(m),
            _ => None,
        }
    }

    pub(crate) fn step(&self, s: usize) -> Option<&[f64]> {
        match self {
            Masks::PerStep(m) => Some(&m[s]),
            _ => None,
        }
    }
}

pub(crate) fn make_masks(spec: &ProbeSpec, steps: usize, rng: &mut ChaCha8Rng) -> Masks {
    if spec.dropout <= 0.0 {
        return Masks::None;
    }
    match spec.arch {
        Arch::Lp => Masks::None,
        Arch::Mlp | Arch::TimeAttn => Masks::Head(dropout_mask(spec.k, spec.dropout, rng)),
        Arch::Lstm => Masks::PerStep(
            (0..steps).map(|_| dropout_mask(spec.d_h, spec.dropout, rng)).collect(),
        ),
    }
}

fn check_input(spec: &ProbeSpec, input: &ProbeInput) -> Result<()> {
    if input.dim() != spec.d {
        return Err(D2Error::ShapeMismatch(format!(
            "input dim {} != probe dim {}",
            input.dim(),
            spec.d
        )));
    }
    match (spec.arch, input) {
        (Arch::Lp | Arch::Mlp, ProbeInput::Pooled(_)) => Ok(()),
        (Arch::TimeAttn | Arch::Lstm, ProbeInput::Sequence { .. }) => Ok(()),
        _ => Err(D2Error::ShapeMismatch(format!(
            "arch {} expects a {} input",
            spec.arch.name(),
            if matches!(spec.arch, Arch::Lp | Arch::Mlp) { "pooled" } else { "sequence" }
        ))),
    }
}

/// Single forward pass to a scalar logit. Dropout is active only in
/// `train_mode`, with the mask drawn from `rng_seed`; inference
/// (`train_mode = false`) is deterministic.
pub fn forward(
    spec: &ProbeSpec,
    weights: &[f64],
    input: &ProbeInput,
    train_mode: bool,
    rng_seed: u64,
) -> Result<f64> {
    check_input(spec, input)?;
    let masks = if train_mode && spec.dropout > 0.0 {
        let mut rng = util::rng_from(rng_seed);
        make_masks(spec, input.steps(), &mut rng)
    } else {
        Masks::None
    };
    Ok(forward_masked(spec, weights, input, &masks))
}

pub(crate) fn forward_masked(
    spec: &ProbeSpec,
    weights: &[f64],
    input: &ProbeInput,
    masks: &Masks,
) -> f64 {
    match spec.arch {
        Arch::Lp => lp_forward(spec, weights, input.step(0)),
        Arch::Mlp => mlp::forward(spec, weights, input.step(0), masks.head()).0,
        Arch::TimeAttn => attn::forward(spec, weights, input, masks.head()).0,
        Arch::Lstm => lstm::forward(spec, weights, input, masks).0,
    }
}

/// Attention weights over the steps of a sequence input (`TimeAttn` only);
/// sums to 1. Exposed for diagnostics.
pub fn attention_weights(
    spec: &ProbeSpec,
    weights: &[f64],
    input: &ProbeInput,
) -> Result<Vec<f64>> {
    if spec.arch != Arch::TimeAttn {
        return Err(D2Error::Invalid("attention weights exist for time_attn only".into()));
    }
    check_input(spec, input)?;
    Ok(attn::forward(spec, weights, input, None).1.alpha)
}

pub(crate) fn lp_forward(spec: &ProbeSpec, weights: &[f64], x: &[f64]) -> f64 {
    let lay = spec.layout();
    util::dot(&weights[lay.lp_w.clone()], x) + weights[lay.lp_b]
}

/// out[i] = sum_j w[i*cols + j] * x[j]
pub(crate) fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for i in 0..rows {
        out[i] = util::dot(&w[i * cols..(i + 1) * cols], x);
    }
}

/// dw[i*cols + j] += dout[i] * x[j]
pub(crate) fn outer_acc(dw: &mut [f64], dout: &[f64], x: &[f64], rows: usize, cols: usize) {
    for i in 0..rows {
        util::axpy(&mut dw[i * cols..(i + 1) * cols], dout[i], x);
    }
}

/// dx[j] += sum_i w[i*cols + j] * dout[i]
pub(crate) fn matvec_t_acc(w: &[f64], dout: &[f64], rows: usize, cols: usize, dx: &mut [f64]) {
    for i in 0..rows {
        util::axpy(dx, dout[i], &w[i * cols..(i + 1) * cols]);
    }
}

pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, over the full vector.
pub(crate) fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LnCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat
        .iter()
        .enumerate()
        .map(|(i, xh)| gamma[i] * xh + beta[i])
        .collect();
    (y, LnCache { xhat, inv_std })
}

/// Backward of [`layer_norm`]: accumulates parameter gradients and writes
/// the input gradient.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    gamma: &[f64],
    cache: &LnCache,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    let n = dy.len();
    let nf = n as f64;
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_xhat = 0.0;
    for i in 0..n {
        dgamma[i] += dy[i] * cache.xhat[i];
        dbeta[i] += dy[i];
        let dxhat = dy[i] * gamma[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * cache.xhat[i];
    }
    let mean_dxhat = sum_dxhat / nf;
    let mean_dxhat_xhat = sum_dxhat_xhat / nf;
    for i in 0..n {
        let dxhat = dy[i] * gamma[i];
        dx[i] = cache.inv_std * (dxhat - mean_dxhat - cache.xhat[i] * mean_dxhat_xhat);
    }
}

pub(crate) fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

/// GELU, tanh approximation.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}
