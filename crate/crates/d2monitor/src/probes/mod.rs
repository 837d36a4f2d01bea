//! Probe architectures: specs, flat parameter layouts, forward passes,
//! analytic gradients, parameter counts, analytic FLOPs, and the probe file
//! format.
//!
//! Four architectures, all mapping a (normalized) trajectory or pooled
//! vector to a scalar logit with positive = unsafe:
//!
//! - `Lp`: `s = w . x + b`
//! - `Mlp`: `s = W_out Dropout(ReLU(W_in x + b_in)) + b_out`, hidden width `K`
//! - `TimeAttn`: layer-normalize each step, additive attention over steps,
//!   then a layer-normalized two-layer head
//! - `Lstm`: layer-norm + GELU projection per step, 2-layer unidirectional
//!   LSTM, layer-normalized linear head on the final hidden state
//!
//! Weights live in one flat `Vec<f64>` with the layout fixed by
//! `ProbeSpec::layout`; files store the same layout as little-endian f32.

mod attn;
mod backward;
mod flops;
mod forward;
mod lstm;
mod mlp;

pub use backward::gradient;
pub use flops::flops_estimate;
pub use forward::{attention_weights, forward};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{D2Error, Result};
use crate::normalize::{NormMode, NormStats};
use crate::trajectory::Trajectory;
use crate::util;

pub const PROBE_MAGIC: &[u8; 8] = b"D2PROBE1";
pub const PROBE_VERSION: u32 = 1;

/// Layer-norm epsilon, shared by every normalized layer.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Lp,
    Mlp,
    TimeAttn,
    Lstm,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::Lp => "lp",
            Arch::Mlp => "mlp",
            Arch::TimeAttn => "time_attn",
            Arch::Lstm => "lstm",
        }
    }
}

/// How a probe consumes a trajectory at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Evaluate on the final (most refined) step only.
    LastStep,
    /// Evaluate on the temporal mean of all steps.
    Mean,
    /// Evaluate every step independently; unsafe wins on >= S/2 votes.
    MajorityVote,
    /// Consume the whole ordered sequence (sequence architectures).
    FullSequence,
    /// Expert mode over a hesitation window of arbitrary length
    /// (mean-over-window for `Mlp`, sequence-over-window otherwise).
    Window,
}

impl Readout {
    pub fn name(&self) -> &'static str {
        match self {
            Readout::LastStep => "last_step",
            Readout::Mean => "mean",
            Readout::MajorityVote => "majority_vote",
            Readout::FullSequence => "full_sequence",
            Readout::Window => "window",
        }
    }
}

/// Architecture identity and dimensions. Construct through
/// [`ProbeSpec::new`] so arch/readout compatibility is checked once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub arch: Arch,
    /// Input feature dimension.
    #[serde(rename = "D")]
    pub d: usize,
    /// MLP hidden width.
    #[serde(rename = "K")]
    pub k: usize,
    /// Attention dimension.
    pub d_a: usize,
    /// LSTM projection dimension.
    pub d_p: usize,
    /// LSTM hidden size.
    pub d_h: usize,
    pub dropout: f64,
    pub readout: Readout,
}

impl ProbeSpec {
    pub fn new(arch: Arch, d: usize, readout: Readout) -> Result<ProbeSpec> {
        let spec = ProbeSpec {
            arch,
            d,
            k: 256,
            d_a: 128,
            d_p: 512,
            d_h: 128,
            dropout: 0.0,
            readout,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_dropout(mut self, dropout: f64) -> Result<ProbeSpec> {
        self.dropout = dropout;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.d_a == 0 || self.d_p == 0 || self.d_h == 0 {
            return Err(D2Error::Invalid("probe dimensions must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(D2Error::Invalid("dropout must lie in [0,1)".into()));
        }
        let ok = match self.arch {
            Arch::Lp => matches!(
                self.readout,
                Readout::LastStep | Readout::Mean | Readout::MajorityVote
            ),
            Arch::Mlp => matches!(
                self.readout,
                Readout::LastStep | Readout::Mean | Readout::MajorityVote | Readout::Window
            ),
            Arch::TimeAttn | Arch::Lstm => {
                matches!(self.readout, Readout::FullSequence | Readout::Window)
            }
        };
        if !ok {
            return Err(D2Error::Invalid(format!(
                "readout {} is not valid for arch {}",
                self.readout.name(),
                self.arch.name()
            )));
        }
        Ok(())
    }

    /// Exact number of parameters in the flat weight vector.
    pub fn param_count(&self) -> usize {
        self.layout().len
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(self)
    }

    /// Normalization mode this probe trains and predicts under: last-step
    /// probes standardize each step by its own statistics, everything else
    /// pools statistics over samples and steps.
    pub fn norm_mode(&self) -> NormMode {
        match self.readout {
            Readout::LastStep => NormMode::PerStep,
            _ => NormMode::PerFeature,
        }
    }

    /// Glorot-uniform weight matrices, zero biases, layer-norm scales at 1,
    /// LSTM forget-gate bias at 1.
    pub fn init_weights(&self, seed: u64) -> Vec<f64> {
        let lay = self.layout();
        let mut w = vec![0.0; lay.len];
        let mut rng = util::rng_from(seed);
        let mut glorot = |w: &mut [f64], range: Range<usize>, fan_in: usize, fan_out: usize| {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for i in range {
                w[i] = rng.gen::<f64>() * 2.0 * lim - lim;
            }
        };
        match self.arch {
            Arch::Lp => {
                glorot(&mut w, lay.lp_w.clone(), self.d, 1);
            }
            Arch::Mlp => {
                glorot(&mut w, lay.mlp_w_in.clone(), self.d, self.k);
                glorot(&mut w, lay.mlp_w_out.clone(), self.k, 1);
            }
            Arch::TimeAttn => {
                glorot(&mut w, lay.attn_w_a.clone(), self.d, self.d_a);
                glorot(&mut w, lay.attn_v.clone(), self.d_a, 1);
                glorot(&mut w, lay.attn_w1.clone(), self.d, self.k);
                glorot(&mut w, lay.attn_w2.clone(), self.k, 1);
                w[lay.attn_ln1_g.clone()].fill(1.0);
                w[lay.attn_ln2_g.clone()].fill(1.0);
            }
            Arch::Lstm => {
                glorot(&mut w, lay.lstm_w_proj.clone(), self.d, self.d_p);
                glorot(&mut w, lay.lstm_w1.clone(), self.d_p + self.d_h, 4 * self.d_h);
                glorot(&mut w, lay.lstm_w2.clone(), 2 * self.d_h, 4 * self.d_h);
                glorot(&mut w, lay.lstm_w_out.clone(), self.d_h, 1);
                w[lay.lstm_ln_in_g.clone()].fill(1.0);
                w[lay.lstm_ln_h_g.clone()].fill(1.0);
                // forget gates start open
                let b1 = lay.lstm_b1.clone();
                w[b1.start + self.d_h..b1.start + 2 * self.d_h].fill(1.0);
                let b2 = lay.lstm_b2.clone();
                w[b2.start + self.d_h..b2.start + 2 * self.d_h].fill(1.0);
            }
        }
        w
    }
}

/// Byte-stable offsets into the flat weight vector. Gate order for LSTM
/// layers is input, forget, cell, output.
#[derive(Debug, Clone, Default)]
pub(crate) struct Layout {
    pub len: usize,
    // lp
    pub lp_w: Range<usize>,
    pub lp_b: usize,
    // mlp
    pub mlp_w_in: Range<usize>,
    pub mlp_b_in: Range<usize>,
    pub mlp_w_out: Range<usize>,
    pub mlp_b_out: usize,
    // time-attn
    pub attn_w_a: Range<usize>,
    pub attn_v: Range<usize>,
    pub attn_ln1_g: Range<usize>,
    pub attn_ln1_b: Range<usize>,
    pub attn_ln2_g: Range<usize>,
    pub attn_ln2_b: Range<usize>,
    pub attn_w1: Range<usize>,
    pub attn_b1: Range<usize>,
    pub attn_w2: Range<usize>,
    pub attn_b2: usize,
    // lstm
    pub lstm_ln_in_g: Range<usize>,
    pub lstm_ln_in_b: Range<usize>,
    pub lstm_w_proj: Range<usize>,
    pub lstm_b_proj: Range<usize>,
    pub lstm_w1: Range<usize>,
    pub lstm_b1: Range<usize>,
    pub lstm_w2: Range<usize>,
    pub lstm_b2: Range<usize>,
    pub lstm_ln_h_g: Range<usize>,
    pub lstm_ln_h_b: Range<usize>,
    pub lstm_w_out: Range<usize>,
    pub lstm_b_out: usize,
}

impl Layout {
    fn new(spec: &ProbeSpec) -> Layout {
        let mut lay = Layout::default();
        let mut cursor = 0usize;
        let mut take = |n: usize| {
            let r = cursor..cursor + n;
            cursor += n;
            r
        };
        let (d, k, d_a, d_p, d_h) = (spec.d, spec.k, spec.d_a, spec.d_p, spec.d_h);
        match spec.arch {
            Arch::Lp => {
                lay.lp_w = take(d);
                lay.lp_b = take(1).start;
            }
            Arch::Mlp => {
                lay.mlp_w_in = take(k * d);
                lay.mlp_b_in = take(k);
                lay.mlp_w_out = take(k);
                lay.mlp_b_out = take(1).start;
            }
            Arch::TimeAttn => {
                lay.attn_w_a = take(d_a * d);
                lay.attn_v = take(d_a);
                lay.attn_ln1_g = take(d);
                lay.attn_ln1_b = take(d);
                lay.attn_ln2_g = take(d);
                lay.attn_ln2_b = take(d);
                lay.attn_w1 = take(k * d);
                lay.attn_b1 = take(k);
                lay.attn_w2 = take(k);
                lay.attn_b2 = take(1).start;
            }
            Arch::Lstm => {
                lay.lstm_ln_in_g = take(d);
                lay.lstm_ln_in_b = take(d);
                lay.lstm_w_proj = take(d_p * d);
                lay.lstm_b_proj = take(d_p);
                lay.lstm_w1 = take(4 * d_h * (d_p + d_h));
                lay.lstm_b1 = take(4 * d_h);
                lay.lstm_w2 = take(4 * d_h * (2 * d_h));
                lay.lstm_b2 = take(4 * d_h);
                lay.lstm_ln_h_g = take(d_h);
                lay.lstm_ln_h_b = take(d_h);
                lay.lstm_w_out = take(d_h);
                lay.lstm_b_out = take(1).start;
            }
        }
        lay.len = cursor;
        lay
    }
}

/// A normalized input to a probe forward pass.
#[derive(Debug, Clone)]
pub enum ProbeInput {
    /// A single pooled feature vector of length `D`.
    Pooled(Vec<f64>),
    /// A step-major sequence (`steps x dim`).
    Sequence { steps: usize, dim: usize, data: Vec<f64> },
}

impl ProbeInput {
    pub fn from_trajectory(t: &Trajectory) -> ProbeInput {
        ProbeInput::Sequence {
            steps: t.steps(),
            dim: t.dim(),
            data: t.states().to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ProbeInput::Pooled(x) => x.len(),
            ProbeInput::Sequence { dim, .. } => *dim,
        }
    }

    pub(crate) fn step(&self, s: usize) -> &[f64] {
        match self {
            ProbeInput::Pooled(x) => {
                debug_assert_eq!(s, 0);
                x
            }
            ProbeInput::Sequence { dim, data, .. } => &data[s * dim..(s + 1) * dim],
        }
    }

    pub(crate) fn steps(&self) -> usize {
        match self {
            ProbeInput::Pooled(_) => 1,
            ProbeInput::Sequence { steps, .. } => *steps,
        }
    }
}

/// Outcome of applying a probe to one trajectory.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// 1 = unsafe.
    pub label: u8,
    /// Decision score: the logit for single-forward readouts, or the
    /// positive-vote count minus `S/2` for majority vote.
    pub score: f64,
    /// Per-step logits, populated for the majority-vote readout.
    pub step_logits: Option<Vec<f64>>,
}

/// A trained probe: spec, normalization statistics, and flat weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub spec: ProbeSpec,
    pub stats: NormStats,
    pub weights: Vec<f64>,
    /// Step count of the dataset the probe was trained on.
    pub s_trained: usize,
}

impl Probe {
    pub fn new(
        spec: ProbeSpec,
        stats: NormStats,
        weights: Vec<f64>,
        s_trained: usize,
    ) -> Result<Probe> {
        if weights.len() != spec.param_count() {
            return Err(D2Error::ShapeMismatch(format!(
                "weight vector has {} values, spec wants {}",
                weights.len(),
                spec.param_count()
            )));
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(D2Error::NonFiniteValue("probe weights".into()));
        }
        if stats.dim != spec.d {
            return Err(D2Error::ShapeMismatch(format!(
                "stats dim {} != spec dim {}",
                stats.dim, spec.d
            )));
        }
        Ok(Probe { spec, stats, weights, s_trained })
    }

    /// Normalize a trajectory and apply the probe under its own readout.
    pub fn predict(&self, t: &Trajectory) -> Result<Prediction> {
        if t.dim() != self.spec.d {
            return Err(D2Error::ShapeMismatch(format!(
                "trajectory dim {} != probe dim {}",
                t.dim(),
                self.spec.d
            )));
        }
        match self.spec.readout {
            Readout::LastStep => {
                let x = self.stats.apply_step(t.steps() - 1, t.last_step())?;
                let logit = forward(&self.spec, &self.weights, &ProbeInput::Pooled(x), false, 0)?;
                Ok(Prediction { label: (logit > 0.0) as u8, score: logit, step_logits: None })
            }
            Readout::Mean => {
                let normed = self.stats.apply(t)?;
                let logit = forward(
                    &self.spec,
                    &self.weights,
                    &ProbeInput::Pooled(normed.step_mean()),
                    false,
                    0,
                )?;
                Ok(Prediction { label: (logit > 0.0) as u8, score: logit, step_logits: None })
            }
            Readout::MajorityVote => {
                let logits = self.step_logits(t)?;
                let votes = logits.iter().filter(|&&l| l > 0.0).count();
                // unsafe on ties: votes >= S/2
                let label = (2 * votes >= logits.len()) as u8;
                let score = votes as f64 - logits.len() as f64 / 2.0;
                Ok(Prediction { label, score, step_logits: Some(logits) })
            }
            Readout::FullSequence => {
                let normed = self.stats.apply(t)?;
                let logit = forward(
                    &self.spec,
                    &self.weights,
                    &ProbeInput::from_trajectory(&normed),
                    false,
                    0,
                )?;
                Ok(Prediction { label: (logit > 0.0) as u8, score: logit, step_logits: None })
            }
            Readout::Window => {
                // the caller has already sliced the window; consume all of it
                let normed = self.stats.apply(t)?;
                let input = match self.spec.arch {
                    Arch::Mlp => ProbeInput::Pooled(normed.step_mean()),
                    _ => ProbeInput::from_trajectory(&normed),
                };
                let logit = forward(&self.spec, &self.weights, &input, false, 0)?;
                Ok(Prediction { label: (logit > 0.0) as u8, score: logit, step_logits: None })
            }
        }
    }

    /// Per-step logits under this probe's normalization, in stored step
    /// order. Only meaningful for pooled-input architectures.
    pub fn step_logits(&self, t: &Trajectory) -> Result<Vec<f64>> {
        if matches!(self.spec.arch, Arch::TimeAttn | Arch::Lstm) {
            return Err(D2Error::Invalid(
                "per-step logits are defined for pooled-input probes only".into(),
            ));
        }
        let normed = self.stats.apply(t)?;
        (0..normed.steps())
            .map(|s| {
                forward(
                    &self.spec,
                    &self.weights,
                    &ProbeInput::Pooled(normed.step(s).to_vec()),
                    false,
                    0,
                )
            })
            .collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Probe> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| D2Error::Truncated("missing probe magic".into()))?;
        if &magic != PROBE_MAGIC {
            return Err(D2Error::BadMagic {
                expected: String::from_utf8_lossy(PROBE_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let version = read_u32(&mut r)?;
        if version != PROBE_VERSION {
            return Err(D2Error::VersionUnsupported(version));
        }
        let json_len = read_u32(&mut r)? as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)
            .map_err(|_| D2Error::Truncated("probe metadata".into()))?;
        let meta: ProbeMeta = serde_json::from_slice(&json)?;
        let spec = meta.spec();
        spec.validate()?;
        let stat_len = match meta.norm_mode {
            NormMode::PerFeature => spec.d,
            NormMode::PerStep => meta.s_trained * spec.d,
        };
        let mean = read_f32_vec(&mut r, stat_len, "probe mean blob")?;
        let std = read_f32_vec(&mut r, stat_len, "probe std blob")?;
        let weights = read_f32_vec(&mut r, spec.param_count(), "probe weight blob")?;
        let stats = NormStats {
            mode: meta.norm_mode,
            steps: meta.s_trained,
            dim: spec.d,
            mean,
            std,
        };
        Probe::new(spec, stats, weights, meta.s_trained)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        let meta = ProbeMeta::from_probe(self);
        let json = serde_json::to_vec(&meta)?;
        w.write_all(PROBE_MAGIC)?;
        w.write_all(&PROBE_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        write_f32_vec(&mut w, &self.stats.mean)?;
        write_f32_vec(&mut w, &self.stats.std)?;
        write_f32_vec(&mut w, &self.weights)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ProbeMeta {
    arch: Arch,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    d_a: usize,
    d_p: usize,
    d_h: usize,
    dropout: f64,
    readout: Readout,
    norm_mode: NormMode,
    #[serde(rename = "S_trained")]
    s_trained: usize,
}

impl ProbeMeta {
    fn from_probe(p: &Probe) -> ProbeMeta {
        ProbeMeta {
            arch: p.spec.arch,
            d: p.spec.d,
            k: p.spec.k,
            d_a: p.spec.d_a,
            d_p: p.spec.d_p,
            d_h: p.spec.d_h,
            dropout: p.spec.dropout,
            readout: p.spec.readout,
            norm_mode: p.stats.mode,
            s_trained: p.s_trained,
        }
    }

    fn spec(&self) -> ProbeSpec {
        ProbeSpec {
            arch: self.arch,
            d: self.d,
            k: self.k,
            d_a: self.d_a,
            d_p: self.d_p,
            d_h: self.d_h,
            dropout: self.dropout,
            readout: self.readout,
        }
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| D2Error::Truncated("probe header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32_vec(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| D2Error::Truncated(what.into()))?;
    let mut out = Vec::with_capacity(n);
    for c in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(D2Error::NonFiniteValue(what.into()));
        }
        out.push(v as f64);
    }
    Ok(out)
}

fn write_f32_vec(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Inverted-scale dropout mask: each unit keeps value `1/(1-p)` with
/// probability `1-p`, else 0. Inference needs no rescaling.
pub(crate) fn dropout_mask(n: usize, p: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    (0..n).map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 }).collect()
}
