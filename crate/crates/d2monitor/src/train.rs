//! Probe optimization: Adam with decoupled weight decay, stratified
//! splitting, minibatch training, and grid search.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{D2Error, Result};
use crate::metrics;
use crate::normalize::NormStats;
use crate::probes::{gradient, Arch, Probe, ProbeInput, ProbeSpec, Readout};
use crate::trajectory::Dataset;
use crate::util::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            dropout: 0.0,
            epochs: 50,
            batch_size: 256,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// Minimum optimizer steps a fixed-configuration linear probe gets. The
/// stock constants (batch 256, 50 epochs) assume datasets of ~10^5
/// samples; on small sets the epoch count is raised to keep the step budget.
pub const LP_MIN_STEPS: usize = 3000;

impl TrainConfig {
    /// The fixed linear-probe configuration used for out-of-fold scoring and
    /// for the cascade's base probe: lr 1e-3, weight decay 1e-4.
    pub fn fixed_lp(seed: u64) -> TrainConfig {
        TrainConfig { lr: 1e-3, weight_decay: 1e-4, seed, ..TrainConfig::default() }
    }

    /// [`TrainConfig::fixed_lp`] with the epoch count floored so a dataset of
    /// `n_samples` still yields at least [`LP_MIN_STEPS`] optimizer steps.
    pub fn fixed_lp_for(n_samples: usize, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::fixed_lp(seed);
        let batches_per_epoch = n_samples.div_ceil(cfg.batch_size).max(1);
        cfg.epochs = cfg.epochs.max(LP_MIN_STEPS.div_ceil(batches_per_epoch));
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(D2Error::Invalid(
                "training needs lr > 0, epochs >= 1, batch_size >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Hyperparameter candidates for one architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub dropout: Vec<f64>,
}

impl GridSpace {
    /// The default search space for each architecture.
    pub fn for_arch(arch: Arch) -> GridSpace {
        match arch {
            Arch::Lp => GridSpace {
                lr: vec![1e-5, 1e-4, 1e-3, 1e-2],
                weight_decay: vec![0.0, 1e-6, 1e-5, 1e-4],
                dropout: vec![0.0],
            },
            Arch::Mlp => GridSpace {
                lr: vec![1e-5, 1e-4, 1e-3],
                weight_decay: vec![0.0, 1e-5, 1e-4, 1e-3],
                dropout: vec![0.1, 0.2, 0.3, 0.5],
            },
            Arch::TimeAttn => GridSpace {
                lr: vec![1e-4, 1e-3, 4e-3, 1e-2],
                weight_decay: vec![0.0, 1e-5],
                dropout: vec![0.2, 0.3, 0.5],
            },
            Arch::Lstm => GridSpace {
                lr: vec![1e-5, 1e-4, 1e-3],
                weight_decay: vec![0.0, 1e-6, 1e-5, 1e-4],
                dropout: vec![0.0, 0.1, 0.2, 0.3],
            },
        }
    }

    pub fn singleton(lr: f64, weight_decay: f64, dropout: f64) -> GridSpace {
        GridSpace { lr: vec![lr], weight_decay: vec![weight_decay], dropout: vec![dropout] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr.is_empty() || self.weight_decay.is_empty() || self.dropout.is_empty() {
            return Err(D2Error::Invalid("grid lists must be nonempty".into()));
        }
        Ok(())
    }

    /// Candidate points in selection order: lr, then weight decay, then
    /// dropout, each ascending, so ties resolve toward the smallest values.
    fn points(&self) -> Vec<(f64, f64, f64)> {
        let mut lr = self.lr.clone();
        let mut wd = self.weight_decay.clone();
        let mut dr = self.dropout.clone();
        lr.sort_by(f64::total_cmp);
        wd.sort_by(f64::total_cmp);
        dr.sort_by(f64::total_cmp);
        let mut out = Vec::with_capacity(lr.len() * wd.len() * dr.len());
        for &a in &lr {
            for &b in &wd {
                for &c in &dr {
                    out.push((a, b, c));
                }
            }
        }
        out
    }
}

/// Seeded stratified shuffle split. `ratio` is the training fraction; class
/// proportions are preserved to within one sample per class. Both sides
/// keep the original sample order.
pub fn split_train_val(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(D2Error::Invalid("split ratio must lie in (0,1)".into()));
    }
    let labels = ds.labels()?;
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> =
            (0..ds.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(D2Error::TooFewSamples(format!(
                "class {class} has {} sample(s); need >= 2 to split",
                members.len()
            )));
        }
        let mut rng = util::rng_from(util::derive_seed(seed, tag::SPLIT, class as u64));
        members.shuffle(&mut rng);
        let n_train = ((ratio * members.len() as f64).round() as usize)
            .clamp(1, members.len() - 1);
        train_idx.extend_from_slice(&members[..n_train]);
        val_idx.extend_from_slice(&members[n_train..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((ds.subset(&train_idx)?, ds.subset(&val_idx)?))
}

/// First/second-moment state for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One Adam update with decoupled weight decay:
/// `w -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * w`.
pub fn adam_step(weights: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &TrainConfig) {
    debug_assert_eq!(weights.len(), grad.len());
    state.t += 1;
    let b1t = 1.0 - cfg.beta1.powi(state.t as i32);
    let b2t = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..weights.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        weights[i] -=
            cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.lr * cfg.weight_decay * weights[i];
    }
}

/// Weights and per-epoch mean loss from one training run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub weights: Vec<f64>,
    pub epoch_loss: Vec<f64>,
}

/// Core optimizer loop over pre-built inputs. Deterministic given
/// `cfg.seed`: initialization, epoch shuffles, and dropout masks all derive
/// from it. The last partial minibatch is kept.
pub fn fit<B: std::borrow::Borrow<ProbeInput>>(
    spec: &ProbeSpec,
    cfg: &TrainConfig,
    inputs: &[B],
    labels: &[u8],
) -> Result<FitOutcome> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(D2Error::EmptyDataset);
    }
    if inputs.len() != labels.len() {
        return Err(D2Error::LengthMismatch(format!(
            "{} inputs vs {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let spec = ProbeSpec { dropout: cfg.dropout, ..spec.clone() };
    spec.validate()?;
    let mut weights = spec.init_weights(util::derive_seed(cfg.seed, tag::INIT, 0));
    let mut adam = AdamState::new(weights.len());
    let mut shuffle_rng = util::rng_from(util::derive_seed(cfg.seed, tag::SHUFFLE, 0));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&ProbeInput> =
                chunk.iter().map(|&i| inputs[i].borrow()).collect();
            let batch_labels: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let dropout_seed = util::derive_seed(
                cfg.seed,
                tag::DROPOUT,
                (epoch as u64) << 32 | batch_idx as u64,
            );
            let (loss, grad) =
                gradient(&spec, &weights, &batch, &batch_labels, dropout_seed)?;
            if !loss.is_finite() {
                return Err(D2Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            adam_step(&mut weights, &grad, &mut adam, cfg);
            if !weights.iter().all(|w| w.is_finite()) {
                return Err(D2Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            loss_sum += loss * chunk.len() as f64;
        }
        epoch_loss.push(loss_sum / inputs.len() as f64);
    }
    Ok(FitOutcome { weights, epoch_loss })
}

/// Build the training input a readout consumes from a (already normalized)
/// trajectory.
pub(crate) fn training_input(spec: &ProbeSpec, t: &crate::trajectory::Trajectory) -> ProbeInput {
    match spec.readout {
        Readout::LastStep => ProbeInput::Pooled(t.last_step().to_vec()),
        Readout::Mean | Readout::MajorityVote => ProbeInput::Pooled(t.step_mean()),
        Readout::FullSequence => ProbeInput::from_trajectory(t),
        Readout::Window => match spec.arch {
            Arch::Mlp => ProbeInput::Pooled(t.step_mean()),
            _ => ProbeInput::from_trajectory(t),
        },
    }
}

/// Probe training over a labeled dataset that has already been normalized
/// with `stats`. The returned probe carries `stats` so it can be applied to
/// raw trajectories later.
pub fn train_probe(
    ds: &Dataset,
    spec: &ProbeSpec,
    cfg: &TrainConfig,
    stats: &NormStats,
) -> Result<(Probe, Vec<f64>)> {
    let labels = ds.labels()?;
    let inputs: Vec<ProbeInput> =
        ds.samples().iter().map(|t| training_input(spec, t)).collect();
    let outcome = fit(spec, cfg, &inputs, &labels)?;
    let trained_spec = ProbeSpec { dropout: cfg.dropout, ..spec.clone() };
    let probe = Probe::new(trained_spec, stats.clone(), outcome.weights, ds.steps())?;
    Ok((probe, outcome.epoch_loss))
}

/// One evaluated grid point.
#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Validation macro-F1; `None` when training diverged (the point is
    /// skipped, the search continues).
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GridSearchOutcome {
    pub best: TrainConfig,
    pub probe: Probe,
    pub points: Vec<GridPoint>,
}

/// Grid search on a seeded 4:1-style split of `ds` (raw, labeled), selecting
/// the best validation macro-F1 (ties: lowest lr, then lowest weight decay,
/// then lowest dropout), then retraining on the full set with the winner.
/// Normalization statistics are fit on the training portion during the
/// search and refit on the full set for the final probe.
pub fn grid_search(
    ds: &Dataset,
    spec: &ProbeSpec,
    grid: &GridSpace,
    ratio: f64,
    seed: u64,
) -> Result<GridSearchOutcome> {
    grid.validate()?;
    let (train, val) = split_train_val(ds, ratio, seed)?;
    let stats = NormStats::fit(&train, spec.norm_mode())?;
    let train_normed = stats.apply_dataset(&train)?;
    let val_labels = val.labels()?;

    let candidates = grid.points();
    let points: Vec<GridPoint> = candidates
        .par_iter()
        .enumerate()
        .map(|(idx, &(lr, weight_decay, dropout))| {
            let cfg = TrainConfig {
                lr,
                weight_decay,
                dropout,
                seed: util::derive_seed(seed, tag::GRID, idx as u64),
                ..TrainConfig::default()
            };
            let val_f1 = match train_probe(&train_normed, spec, &cfg, &stats) {
                Ok((probe, _)) => {
                    let preds = val
                        .samples()
                        .iter()
                        .map(|t| probe.predict(t).map(|p| p.label))
                        .collect::<Result<Vec<u8>>>()?;
                    let c = metrics::confusion(&preds, &val_labels)?;
                    Some(metrics::scores(&c).f1_macro)
                }
                // a diverged point is recorded and skipped
                Err(D2Error::NonFiniteLoss { .. }) => None,
                Err(e) => return Err(e),
            };
            Ok(GridPoint { lr, weight_decay, dropout, val_f1 })
        })
        .collect::<Result<Vec<GridPoint>>>()?;

    let best_point = points
        .iter()
        .filter(|p| p.val_f1.is_some())
        .max_by(|a, b| {
            // strictly-greater wins; equal scores keep the earlier
            // (smaller-hyperparameter) point
            a.val_f1.partial_cmp(&b.val_f1).unwrap().then(std::cmp::Ordering::Greater)
        })
        .ok_or_else(|| {
            D2Error::Invalid("every grid point diverged; nothing to select".into())
        })?;

    let best = TrainConfig {
        lr: best_point.lr,
        weight_decay: best_point.weight_decay,
        dropout: best_point.dropout,
        seed,
        ..TrainConfig::default()
    };
    let full_stats = NormStats::fit(ds, spec.norm_mode())?;
    let full_normed = full_stats.apply_dataset(ds)?;
    let (probe, _) = train_probe(&full_normed, spec, &best, &full_stats)?;
    Ok(GridSearchOutcome { best, probe, points })
}
