//! LSTM probe: per-step layer-norm + GELU projection, two unidirectional
//! LSTM layers (gate order input/forget/cell/output), layer-normalized
//! linear head on the final hidden state. Inter-layer dropout between the
//! two LSTM layers when training.

use crate::util;

use super::forward::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, matvec, matvec_t_acc, outer_acc,
    sigmoid, LnCache, Masks,
};
use super::{ProbeInput, ProbeSpec};

/// Per-step, per-layer gate activations and cell state.
struct StepState {
    gates: Vec<f64>, // [i | f | g | o], each d_h
    cell: Vec<f64>,
    tanh_cell: Vec<f64>,
    hidden: Vec<f64>,
    input: Vec<f64>, // the layer's input at this step (post-dropout for layer 2)
}

pub(crate) struct Cache {
    ln_in: Vec<LnCache>,
    normed: Vec<Vec<f64>>,
    proj_pre: Vec<Vec<f64>>, // W_proj n_s + b_proj
    layer1: Vec<StepState>,
    layer2: Vec<StepState>,
    ln_head: LnCache,
    head_in: Vec<f64>, // layer-normalized final hidden state
}

fn cell_forward(
    w: &[f64],
    b: &[f64],
    d_in: usize,
    d_h: usize,
    input: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> StepState {
    let cols = d_in + d_h;
    let mut concat = Vec::with_capacity(cols);
    concat.extend_from_slice(input);
    concat.extend_from_slice(h_prev);
    let mut z = vec![0.0; 4 * d_h];
    matvec(w, &concat, 4 * d_h, cols, &mut z);
    for (zi, bi) in z.iter_mut().zip(b) {
        *zi += bi;
    }
    let mut gates = vec![0.0; 4 * d_h];
    for j in 0..d_h {
        gates[j] = sigmoid(z[j]); // input
        gates[d_h + j] = sigmoid(z[d_h + j]); // forget
        gates[2 * d_h + j] = z[2 * d_h + j].tanh(); // cell candidate
        gates[3 * d_h + j] = sigmoid(z[3 * d_h + j]); // output
    }
    let mut cell = vec![0.0; d_h];
    let mut tanh_cell = vec![0.0; d_h];
    let mut hidden = vec![0.0; d_h];
    for j in 0..d_h {
        cell[j] = gates[d_h + j] * c_prev[j] + gates[j] * gates[2 * d_h + j];
        tanh_cell[j] = cell[j].tanh();
        hidden[j] = gates[3 * d_h + j] * tanh_cell[j];
    }
    StepState { gates, cell, tanh_cell, hidden, input: input.to_vec() }
}

/// Backward through one cell step. `dh`/`dc` are the incoming gradients for
/// this step's hidden and cell state; returns them for the previous step and
/// writes the gradient w.r.t. the step input.
#[allow(clippy::too_many_arguments)]
fn cell_backward(
    w: &[f64],
    state: &StepState,
    c_prev: &[f64],
    h_prev: &[f64],
    d_in: usize,
    d_h: usize,
    dh: &[f64],
    dc_in: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dinput: &mut [f64],
    dh_prev: &mut [f64],
    dc_prev: &mut [f64],
) {
    let cols = d_in + d_h;
    let mut dz = vec![0.0; 4 * d_h];
    for j in 0..d_h {
        let (i, f, g, o) = (
            state.gates[j],
            state.gates[d_h + j],
            state.gates[2 * d_h + j],
            state.gates[3 * d_h + j],
        );
        let tc = state.tanh_cell[j];
        let do_ = dh[j] * tc;
        let dc = dc_in[j] + dh[j] * o * (1.0 - tc * tc);
        let di = dc * g;
        let dg = dc * i;
        let df = dc * c_prev[j];
        dc_prev[j] = dc * f;
        dz[j] = di * i * (1.0 - i);
        dz[d_h + j] = df * f * (1.0 - f);
        dz[2 * d_h + j] = dg * (1.0 - g * g);
        dz[3 * d_h + j] = do_ * o * (1.0 - o);
    }
    let mut concat = Vec::with_capacity(cols);
    concat.extend_from_slice(&state.input);
    concat.extend_from_slice(h_prev);
    outer_acc(dw, &dz, &concat, 4 * d_h, cols);
    for (g, d) in db.iter_mut().zip(&dz) {
        *g += d;
    }
    // split the transposed product into input and recurrent parts
    dinput.fill(0.0);
    dh_prev.fill(0.0);
    for r in 0..4 * d_h {
        let row = &w[r * cols..(r + 1) * cols];
        util::axpy(dinput, dz[r], &row[..d_in]);
        util::axpy(dh_prev, dz[r], &row[d_in..]);
    }
}

pub(crate) fn forward(
    spec: &ProbeSpec,
    w: &[f64],
    input: &ProbeInput,
    masks: &Masks,
) -> (f64, Cache) {
    let lay = spec.layout();
    let (d, d_p, d_h) = (spec.d, spec.d_p, spec.d_h);
    let steps = input.steps();
    let gamma_in = &w[lay.lstm_ln_in_g.clone()];
    let beta_in = &w[lay.lstm_ln_in_b.clone()];
    let w_proj = &w[lay.lstm_w_proj.clone()];
    let b_proj = &w[lay.lstm_b_proj.clone()];
    let (w1, b1) = (&w[lay.lstm_w1.clone()], &w[lay.lstm_b1.clone()]);
    let (w2, b2) = (&w[lay.lstm_w2.clone()], &w[lay.lstm_b2.clone()]);

    let mut ln_in = Vec::with_capacity(steps);
    let mut normed = Vec::with_capacity(steps);
    let mut proj_pre = Vec::with_capacity(steps);
    let mut layer1 = Vec::with_capacity(steps);
    let mut layer2 = Vec::with_capacity(steps);
    let mut h1 = vec![0.0; d_h];
    let mut c1 = vec![0.0; d_h];
    let mut h2 = vec![0.0; d_h];
    let mut c2 = vec![0.0; d_h];

    for s in 0..steps {
        let (n_s, cache) = layer_norm(input.step(s), gamma_in, beta_in);
        let mut p = vec![0.0; d_p];
        matvec(w_proj, &n_s, d_p, d, &mut p);
        for (pi, bi) in p.iter_mut().zip(b_proj) {
            *pi += bi;
        }
        let q: Vec<f64> = p.iter().map(|&x| gelu(x)).collect();
        ln_in.push(cache);
        normed.push(n_s);
        proj_pre.push(p);

        let s1 = cell_forward(w1, b1, d_p, d_h, &q, &h1, &c1);
        h1 = s1.hidden.clone();
        c1 = s1.cell.clone();
        let mut l2_in = s1.hidden.clone();
        if let Some(m) = masks.step(s) {
            for (x, mi) in l2_in.iter_mut().zip(m) {
                *x *= mi;
            }
        }
        layer1.push(s1);
        let s2 = cell_forward(w2, b2, d_h, d_h, &l2_in, &h2, &c2);
        h2 = s2.hidden.clone();
        c2 = s2.cell.clone();
        layer2.push(s2);
    }

    let (head_in, ln_head) =
        layer_norm(&h2, &w[lay.lstm_ln_h_g.clone()], &w[lay.lstm_ln_h_b.clone()]);
    let logit = util::dot(&w[lay.lstm_w_out.clone()], &head_in) + w[lay.lstm_b_out];
    (logit, Cache { ln_in, normed, proj_pre, layer1, layer2, ln_head, head_in })
}

pub(crate) fn backward(
    spec: &ProbeSpec,
    w: &[f64],
    cache: &Cache,
    masks: &Masks,
    dlogit: f64,
    grad: &mut [f64],
) {
    let lay = spec.layout();
    let (d, d_p, d_h) = (spec.d, spec.d_p, spec.d_h);
    let steps = cache.layer1.len();
    let zeros = vec![0.0; d_h];

    // head
    util::axpy(&mut grad[lay.lstm_w_out.clone()], dlogit, &cache.head_in);
    grad[lay.lstm_b_out] += dlogit;
    let dhead: Vec<f64> =
        w[lay.lstm_w_out.clone()].iter().map(|wi| dlogit * wi).collect();
    let mut dh2 = vec![0.0; d_h];
    {
        let gamma = w[lay.lstm_ln_h_g.clone()].to_vec();
        let r = lay.lstm_ln_h_g.start..lay.lstm_ln_h_b.end;
        let (dgamma, dbeta) = grad[r].split_at_mut(d_h);
        layer_norm_backward(&dhead, &gamma, &cache.ln_head, dgamma, dbeta, &mut dh2);
    }

    let (w1, w2) = (&w[lay.lstm_w1.clone()], &w[lay.lstm_w2.clone()]);
    let mut dw1 = vec![0.0; w1.len()];
    let mut db1 = vec![0.0; 4 * d_h];
    let mut dw2 = vec![0.0; w2.len()];
    let mut db2 = vec![0.0; 4 * d_h];
    let mut dw_proj = vec![0.0; d_p * d];
    let mut db_proj = vec![0.0; d_p];
    let gamma_in = w[lay.lstm_ln_in_g.clone()].to_vec();

    let mut dc2 = vec![0.0; d_h];
    let mut dh1 = vec![0.0; d_h];
    let mut dc1 = vec![0.0; d_h];
    let mut dq = vec![0.0; d_p];
    let mut dn = vec![0.0; d];
    let mut dx = vec![0.0; d];
    let mut dh2_prev = vec![0.0; d_h];
    let mut dc2_prev = vec![0.0; d_h];
    let mut dh1_prev = vec![0.0; d_h];
    let mut dc1_prev = vec![0.0; d_h];
    let mut dl2_in = vec![0.0; d_h];

    for s in (0..steps).rev() {
        let h2_prev = if s == 0 { &zeros } else { &cache.layer2[s - 1].hidden };
        let c2_prev = if s == 0 { &zeros } else { &cache.layer2[s - 1].cell };
        cell_backward(
            w2,
            &cache.layer2[s],
            c2_prev,
            h2_prev,
            d_h,
            d_h,
            &dh2,
            &dc2,
            &mut dw2,
            &mut db2,
            &mut dl2_in,
            &mut dh2_prev,
            &mut dc2_prev,
        );
        // through inter-layer dropout into layer 1's hidden
        if let Some(m) = masks.step(s) {
            for (dl, mi) in dl2_in.iter_mut().zip(m) {
                *dl *= mi;
            }
        }
        for j in 0..d_h {
            dh1[j] += dl2_in[j];
        }

        let h1_prev = if s == 0 { &zeros } else { &cache.layer1[s - 1].hidden };
        let c1_prev = if s == 0 { &zeros } else { &cache.layer1[s - 1].cell };
        cell_backward(
            w1,
            &cache.layer1[s],
            c1_prev,
            h1_prev,
            d_p,
            d_h,
            &dh1,
            &dc1,
            &mut dw1,
            &mut db1,
            &mut dq,
            &mut dh1_prev,
            &mut dc1_prev,
        );

        // projection: q = gelu(W_proj n + b_proj)
        let dp: Vec<f64> = dq
            .iter()
            .zip(&cache.proj_pre[s])
            .map(|(dqi, &pi)| dqi * gelu_grad(pi))
            .collect();
        outer_acc(&mut dw_proj, &dp, &cache.normed[s], d_p, d);
        for (g, dpi) in db_proj.iter_mut().zip(&dp) {
            *g += dpi;
        }
        dn.fill(0.0);
        matvec_t_acc(&w[lay.lstm_w_proj.clone()], &dp, d_p, d, &mut dn);
        {
            let r = lay.lstm_ln_in_g.start..lay.lstm_ln_in_b.end;
            let (dgamma, dbeta) = grad[r].split_at_mut(d);
            layer_norm_backward(&dn, &gamma_in, &cache.ln_in[s], dgamma, dbeta, &mut dx);
        }

        std::mem::swap(&mut dh2, &mut dh2_prev);
        std::mem::swap(&mut dc2, &mut dc2_prev);
        std::mem::swap(&mut dh1, &mut dh1_prev);
        std::mem::swap(&mut dc1, &mut dc1_prev);
    }

    util::axpy(&mut grad[lay.lstm_w1.clone()], 1.0, &dw1);
    util::axpy(&mut grad[lay.lstm_b1.clone()], 1.0, &db1);
    util::axpy(&mut grad[lay.lstm_w2.clone()], 1.0, &dw2);
    util::axpy(&mut grad[lay.lstm_b2.clone()], 1.0, &db2);
    util::axpy(&mut grad[lay.lstm_w_proj.clone()], 1.0, &dw_proj);
    util::axpy(&mut grad[lay.lstm_b_proj.clone()], 1.0, &db_proj);
}
