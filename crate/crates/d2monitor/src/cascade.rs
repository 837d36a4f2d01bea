//! The bi-level monitor: a linear base probe scores every step, hesitation
//! severity routes hard trajectories to a windowed expert probe.
//!
//! Training runs in three stages: (1) out-of-fold scoring of the training
//! set yields leakage-free margins and the hesitation threshold `tau`;
//! (2) the base probe trains on the full set while the expert trains only on
//! the hesitation windows of trajectories with `n_tau > 0`; (3) at inference
//! the router compares `n_tau` against `lambda` — strictly greater escalates
//! to the expert, anything else keeps the base majority vote.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{D2Error, Result};
use crate::hesitation::{oof_margins, profile, select_tau, OofMargins};
use crate::metrics;
use crate::normalize::{NormMode, NormStats};
use crate::probes::{Arch, Probe, ProbeInput, ProbeSpec, Readout};
use crate::train::{fit, train_probe, GridSpace, TrainConfig};
use crate::trajectory::{Dataset, Trajectory};
use crate::util::{self, tag};

/// How the expert probe's hyperparameters are chosen.
#[derive(Debug, Clone)]
pub enum ExpertTraining {
    /// Train once with this configuration.
    Fixed(TrainConfig),
    /// Grid-search on a stratified split of the hesitation windows
    /// (`ratio` = training fraction), then retrain on all windows.
    Grid(GridSpace, f64),
}

/// Seeds and provenance recorded alongside a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeSeeds {
    pub root: u64,
    pub oof: u64,
    pub base: u64,
    pub expert: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeMeta {
    pub k: usize,
    pub target_ratio: f64,
    pub seeds: CascadeSeeds,
    /// Number of hesitation trajectories the expert trained on.
    pub expert_train_size: usize,
    /// Expert config that was ultimately used (the grid winner when
    /// searched).
    pub expert_cfg: TrainConfig,
}

/// A trained cascade: base probe, expert probe, hesitation threshold, and
/// routing threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeBundle {
    pub base: Probe,
    pub expert: Probe,
    pub tau: f64,
    /// Routing threshold; `None` until selected.
    pub lambda: Option<usize>,
    pub meta: CascadeMeta,
}

/// Routing outcome for one trajectory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteRecord {
    /// Hesitation severity under the bundle's base probe and `tau`.
    pub n_tau: usize,
    /// Whether the expert handled the sample (`n_tau > lambda`).
    pub routed: bool,
    /// Hesitation window, present when routed.
    pub window: Option<(usize, usize)>,
    /// Base majority-vote label (always computed).
    pub base_label: u8,
    /// The served label: expert's when routed, base's otherwise.
    pub final_label: u8,
}

/// Stage 1 + 2: out-of-fold scoring, threshold selection, and probe
/// training. `lambda` is left unset; pick it with
/// [`CascadeBundle::select_lambda`] on a validation set.
pub fn train_cascade(
    ds: &Dataset,
    expert_arch: Arch,
    k: usize,
    target_ratio: f64,
    expert_training: &ExpertTraining,
    seed: u64,
) -> Result<CascadeBundle> {
    let oof = oof_margins(ds, k, util::derive_seed(seed, tag::OOF, 0))?;
    let tau = select_tau(&oof, target_ratio)?;
    train_cascade_with_tau(ds, &oof, expert_arch, tau, target_ratio, expert_training, seed)
}

/// Stage 2 with a caller-supplied threshold (useful when `tau` comes from a
/// transfer protocol rather than the out-of-fold quantile).
pub fn train_cascade_with_tau(
    ds: &Dataset,
    oof: &OofMargins,
    expert_arch: Arch,
    tau: f64,
    target_ratio: f64,
    expert_training: &ExpertTraining,
    seed: u64,
) -> Result<CascadeBundle> {
    if !matches!(expert_arch, Arch::Mlp | Arch::TimeAttn) {
        return Err(D2Error::Invalid("expert must be mlp or time_attn".into()));
    }
    if oof.margins.len() != ds.len() {
        return Err(D2Error::LengthMismatch(format!(
            "{} margin rows for {} samples",
            oof.margins.len(),
            ds.len()
        )));
    }
    let labels = ds.labels()?;

    // hesitation trajectories and their windows, from the leakage-free margins
    let mut windows: Vec<Trajectory> = Vec::new();
    let mut window_labels: Vec<u8> = Vec::new();
    if tau > 0.0 {
        for (i, margins) in oof.margins.iter().enumerate() {
            let prof = profile(margins, tau);
            if let Some((lo, hi)) = prof.window {
                windows.push(ds.sample(i).slice_window(lo, hi)?);
                window_labels.push(labels[i]);
            }
        }
    }
    if windows.is_empty() {
        return Err(D2Error::NoHesitationSamples);
    }

    // base probe: linear, majority vote, fixed configuration, full set
    let base_seed = util::derive_seed(seed, tag::BASE_PROBE, 0);
    let base_spec = ProbeSpec::new(Arch::Lp, ds.dim(), Readout::MajorityVote)?;
    let base_stats = NormStats::fit(ds, NormMode::PerFeature)?;
    let base_normed = base_stats.apply_dataset(ds)?;
    let (base, _) =
        train_probe(
            &base_normed,
            &base_spec,
            &TrainConfig::fixed_lp_for(ds.len(), base_seed),
            &base_stats,
        )?;

    // expert probe: trained only on hidden states inside hesitation windows
    let expert_seed = util::derive_seed(seed, tag::EXPERT, 0);
    let expert_spec = ProbeSpec::new(expert_arch, ds.dim(), Readout::Window)?;
    let expert_stats = NormStats::fit_per_feature(&windows, ds.dim());
    let normed_windows = windows
        .iter()
        .map(|t| expert_stats.apply(t))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<ProbeInput> = normed_windows
        .iter()
        .map(|t| crate::train::training_input(&expert_spec, t))
        .collect();

    let expert_cfg = match expert_training {
        ExpertTraining::Fixed(cfg) => TrainConfig { seed: expert_seed, ..cfg.clone() },
        ExpertTraining::Grid(grid, ratio) => grid_search_windows(
            &expert_spec,
            grid,
            *ratio,
            &inputs,
            &window_labels,
            expert_seed,
        )?,
    };
    let outcome = fit(&expert_spec, &expert_cfg, &inputs, &window_labels)?;
    let expert_spec = ProbeSpec { dropout: expert_cfg.dropout, ..expert_spec };
    let expert = Probe::new(expert_spec, expert_stats, outcome.weights, ds.steps())?;

    Ok(CascadeBundle {
        base,
        expert,
        tau,
        lambda: None,
        meta: CascadeMeta {
            k: oof.k,
            target_ratio,
            seeds: CascadeSeeds {
                root: seed,
                oof: util::derive_seed(seed, tag::OOF, 0),
                base: base_seed,
                expert: expert_seed,
            },
            expert_train_size: windows.len(),
            expert_cfg,
        },
    })
}

/// Grid search over pre-built window inputs: stratified split, best
/// validation macro-F1 (ties toward the smallest hyperparameters), winner
/// returned for a full retrain by the caller.
fn grid_search_windows(
    spec: &ProbeSpec,
    grid: &GridSpace,
    ratio: f64,
    inputs: &[ProbeInput],
    labels: &[u8],
    seed: u64,
) -> Result<TrainConfig> {
    grid.validate()?;
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(D2Error::Invalid("grid split ratio must lie in (0,1)".into()));
    }
    // stratified index split
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(D2Error::TooFewSamples(format!(
                "window class {class} has {} sample(s)",
                members.len()
            )));
        }
        use rand::seq::SliceRandom;
        let mut rng = util::rng_from(util::derive_seed(seed, tag::SPLIT, class as u64));
        members.shuffle(&mut rng);
        let n_train =
            ((ratio * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        train_idx.extend_from_slice(&members[..n_train]);
        val_idx.extend_from_slice(&members[n_train..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();

    let train_inputs: Vec<&ProbeInput> = train_idx.iter().map(|&i| &inputs[i]).collect();
    let train_labels: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
    let val_labels: Vec<u8> = val_idx.iter().map(|&i| labels[i]).collect();

    let candidates: Vec<(f64, f64, f64)> = {
        let mut lr = grid.lr.clone();
        let mut wd = grid.weight_decay.clone();
        let mut dr = grid.dropout.clone();
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
    };

    let scored: Vec<Option<f64>> = candidates
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
            let spec = ProbeSpec { dropout, ..spec.clone() };
            match fit(&spec, &cfg, &train_inputs, &train_labels) {
                Ok(outcome) => {
                    let preds: Vec<u8> = val_idx
                        .iter()
                        .map(|&i| {
                            let logit = crate::probes::forward(
                                &spec,
                                &outcome.weights,
                                &inputs[i],
                                false,
                                0,
                            )
                            .expect("validated input");
                            (logit > 0.0) as u8
                        })
                        .collect();
                    let c = metrics::confusion(&preds, &val_labels).ok()?;
                    Some(metrics::scores(&c).f1_macro)
                }
                Err(_) => None,
            }
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (idx, f1) in scored.iter().enumerate() {
        if let Some(f1) = f1 {
            if best.is_none_or(|(_, b)| *f1 > b) {
                best = Some((idx, *f1));
            }
        }
    }
    let (idx, _) = best.ok_or_else(|| {
        D2Error::Invalid("every expert grid point diverged; nothing to select".into())
    })?;
    let (lr, weight_decay, dropout) = candidates[idx];
    Ok(TrainConfig { lr, weight_decay, dropout, seed, ..TrainConfig::default() })
}

impl CascadeBundle {
    /// Sweep `lambda` over `0..=S` on a labeled validation set and keep the
    /// macro-F1 argmax; ties resolve to the largest `lambda` (fewest routed
    /// samples). Sets and returns the winner.
    pub fn select_lambda(&mut self, val: &Dataset) -> Result<usize> {
        let labels = val.labels()?;
        let steps = val.steps();
        // precompute per-sample decisions once; the sweep only flips routing
        let prepared: Vec<(usize, u8, u8)> = val
            .samples()
            .par_iter()
            .map(|t| {
                let margins = self.base.step_logits(t)?;
                let prof = profile(&margins, self.tau);
                let base_label = majority_label(&margins);
                let expert_label = match prof.window {
                    Some((lo, hi)) => {
                        self.expert.predict(&t.slice_window(lo, hi)?)?.label
                    }
                    None => base_label,
                };
                Ok((prof.n_tau, base_label, expert_label))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut best_lambda = 0;
        let mut best_f1 = f64::NEG_INFINITY;
        for lambda in 0..=steps {
            let preds: Vec<u8> = prepared
                .iter()
                .map(|&(n_tau, base, expert)| if n_tau > lambda { expert } else { base })
                .collect();
            let c = metrics::confusion(&preds, &labels)?;
            let f1 = metrics::scores(&c).f1_macro;
            if f1 >= best_f1 {
                best_f1 = f1;
                best_lambda = lambda;
            }
        }
        self.lambda = Some(best_lambda);
        Ok(best_lambda)
    }

    /// Route and classify one trajectory. Requires `lambda` to be set.
    pub fn classify(&self, t: &Trajectory) -> Result<RouteRecord> {
        let lambda = self
            .lambda
            .ok_or_else(|| D2Error::Invalid("bundle has no lambda; run select_lambda".into()))?;
        if t.dim() != self.base.spec.d {
            return Err(D2Error::ShapeMismatch(format!(
                "trajectory dim {} != bundle dim {}",
                t.dim(),
                self.base.spec.d
            )));
        }
        let margins = self.base.step_logits(t)?;
        let prof = profile(&margins, self.tau);
        let base_label = majority_label(&margins);
        // strict comparison: n_tau == lambda stays with the base probe
        let routed = prof.n_tau > lambda;
        let (window, final_label) = if routed {
            let (lo, hi) = prof.window.expect("routed implies n_tau >= 1");
            let label = self.expert.predict(&t.slice_window(lo, hi)?)?.label;
            (Some((lo, hi)), label)
        } else {
            (None, base_label)
        };
        Ok(RouteRecord { n_tau: prof.n_tau, routed, window, base_label, final_label })
    }

    /// Classify every sample of a dataset (parallel, order-stable).
    pub fn classify_all(&self, ds: &Dataset) -> Result<Vec<RouteRecord>> {
        ds.samples().par_iter().map(|t| self.classify(t)).collect()
    }

    /// Expected parameters used per example at routed fraction `rho`:
    /// `|theta_base| + rho * |theta_expert|`.
    pub fn expected_params(&self, rho: f64) -> f64 {
        self.base.spec.param_count() as f64 + rho * self.expert.spec.param_count() as f64
    }

    /// Expected per-sample FLOPs: the base margins cost `2 S D` on every
    /// sample; the expert runs on the escaped fraction over a mean window of
    /// `s_win` steps.
    pub fn expected_flops(&self, p_esc: f64, s_win: f64, steps: usize, dim: usize) -> Result<f64> {
        if !(0.0..=1.0).contains(&p_esc) {
            return Err(D2Error::Invalid("escape fraction must lie in [0,1]".into()));
        }
        if !(1.0..=steps as f64).contains(&s_win) {
            return Err(D2Error::Invalid(format!(
                "mean window {s_win} must lie in [1, {steps}]"
            )));
        }
        let d = dim as f64;
        let k = self.expert.spec.k as f64;
        let d_a = self.expert.spec.d_a as f64;
        let expert = match self.expert.spec.arch {
            Arch::Mlp => s_win * d + 2.0 * d * k,
            Arch::TimeAttn => 2.0 * s_win * d * d_a + 2.0 * s_win * d + 2.0 * d * k,
            _ => unreachable!("expert arch checked at training time"),
        };
        Ok(2.0 * steps as f64 * d + p_esc * expert)
    }

    /// Write `base.d2p`, `expert.d2p`, and `cascade.json` into a directory.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.base.write(dir.join("base.d2p"))?;
        self.expert.write(dir.join("expert.d2p"))?;
        let json = CascadeJson {
            tau: self.tau,
            lambda: self.lambda,
            k: self.meta.k,
            target_ratio: self.meta.target_ratio,
            seeds: self.meta.seeds.clone(),
            expert_train_size: self.meta.expert_train_size,
            expert_cfg: self.meta.expert_cfg.clone(),
        };
        fs::write(dir.join("cascade.json"), serde_json::to_vec_pretty(&json)?)?;
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<CascadeBundle> {
        let dir = dir.as_ref();
        let base = Probe::read(dir.join("base.d2p"))?;
        let expert = Probe::read(dir.join("expert.d2p"))?;
        let json: CascadeJson =
            serde_json::from_slice(&fs::read(dir.join("cascade.json"))?)?;
        if json.tau <= 0.0 {
            return Err(D2Error::Invalid("cascade.json has non-positive tau".into()));
        }
        Ok(CascadeBundle {
            base,
            expert,
            tau: json.tau,
            lambda: json.lambda,
            meta: CascadeMeta {
                k: json.k,
                target_ratio: json.target_ratio,
                seeds: json.seeds,
                expert_train_size: json.expert_train_size,
                expert_cfg: json.expert_cfg,
            },
        })
    }

    /// Joint re-selection of `(tau, lambda)` on a labeled validation set,
    /// for transfer to a shifted dataset: `tau` candidates come from the
    /// given hesitant-ratio quantiles of the validation margins, `lambda`
    /// sweeps `0..=S`; best validation macro-F1 wins (ties keep the earlier
    /// ratio and the larger lambda).
    pub fn retune(&self, val: &Dataset, ratios: &[f64]) -> Result<(f64, usize)> {
        let labels = val.labels()?;
        let steps = val.steps();
        let margins: Vec<Vec<f64>> = val
            .samples()
            .par_iter()
            .map(|t| self.base.step_logits(t))
            .collect::<Result<Vec<_>>>()?;
        let mut mins: Vec<f64> = margins
            .iter()
            .map(|m| m.iter().fold(f64::INFINITY, |a, d| a.min(d.abs())))
            .collect();
        mins.sort_by(f64::total_cmp);

        let mut best: Option<(f64, usize, f64)> = None; // tau, lambda, f1
        for &ratio in ratios {
            if !(0.0 < ratio && ratio < 1.0) {
                return Err(D2Error::Invalid("retune ratios must lie in (0,1)".into()));
            }
            let j = ((ratio * mins.len() as f64).floor() as usize).min(mins.len() - 1);
            let tau = mins[j];
            if tau <= 0.0 {
                continue;
            }
            let prepared: Vec<(usize, u8, u8)> = val
                .samples()
                .par_iter()
                .zip(&margins)
                .map(|(t, m)| {
                    let prof = profile(m, tau);
                    let base_label = majority_label(m);
                    let expert_label = match prof.window {
                        Some((lo, hi)) => {
                            self.expert.predict(&t.slice_window(lo, hi)?)?.label
                        }
                        None => base_label,
                    };
                    Ok((prof.n_tau, base_label, expert_label))
                })
                .collect::<Result<Vec<_>>>()?;
            for lambda in 0..=steps {
                let preds: Vec<u8> = prepared
                    .iter()
                    .map(|&(n, b, e)| if n > lambda { e } else { b })
                    .collect();
                let c = metrics::confusion(&preds, &labels)?;
                let f1 = metrics::scores(&c).f1_macro;
                let better = match best {
                    None => true,
                    // within one tau, prefer larger lambda on ties
                    Some((bt, _, bf)) => f1 > bf || (f1 == bf && bt == tau),
                };
                if better {
                    best = Some((tau, lambda, f1));
                }
            }
        }
        best.map(|(t, l, _)| (t, l)).ok_or_else(|| {
            D2Error::Invalid("no usable tau candidate on the validation set".into())
        })
    }
}

/// Majority vote over precomputed margins: unsafe wins on >= S/2 positive
/// step decisions.
pub(crate) fn majority_label(margins: &[f64]) -> u8 {
    let votes = margins.iter().filter(|&&d| d > 0.0).count();
    (2 * votes >= margins.len()) as u8
}

#[derive(Serialize, Deserialize)]
struct CascadeJson {
    tau: f64,
    lambda: Option<usize>,
    k: usize,
    target_ratio: f64,
    seeds: CascadeSeeds,
    expert_train_size: usize,
    expert_cfg: TrainConfig,
}

/// Export route records as CSV:
/// `sample_id,n_tau,routed,window_lo,window_hi,base_label,final_label`.
/// Window columns are empty for unrouted samples.
pub fn write_route_records_csv(records: &[RouteRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "sample_id",
        "n_tau",
        "routed",
        "window_lo",
        "window_hi",
        "base_label",
        "final_label",
    ])?;
    for (i, r) in records.iter().enumerate() {
        let (lo, hi) = match r.window {
            Some((lo, hi)) => (lo.to_string(), hi.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record(&[
            i.to_string(),
            r.n_tau.to_string(),
            r.routed.to_string(),
            lo,
            hi,
            r.base_label.to_string(),
            r.final_label.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
