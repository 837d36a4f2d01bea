//! Hesitation analysis: step margins, hesitation profiles and severity,
//! out-of-fold scoring, threshold selection, and margin-dynamics statistics
//! (boundary-crossing probability and margin persistence).
//!
//! A step is *hesitant* when its signed margin sits inside the band
//! `|d_s| < tau`; the severity `n_tau` counts hesitant steps, and the
//! hesitation window is the minimal contiguous span covering them all.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{D2Error, Result};
use crate::normalize::{NormMode, NormStats};
use crate::probes::{Arch, Probe, ProbeSpec, Readout};
use crate::train::{train_probe, TrainConfig};
use crate::trajectory::{Dataset, Trajectory};
use crate::util::{self, tag};

/// Per-trajectory hesitation summary at a given threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct HesitationProfile {
    pub margins: Vec<f64>,
    /// `|d_s| < tau` per step.
    pub flags: Vec<bool>,
    /// Number of hesitant steps.
    pub n_tau: usize,
    /// Minimal inclusive span covering all hesitant steps; absent when
    /// `n_tau == 0`.
    pub window: Option<(usize, usize)>,
    pub tau: f64,
}

/// Signed per-step margins of a base probe on one trajectory, in stored
/// step order.
pub fn step_margins(base: &Probe, t: &Trajectory) -> Result<Vec<f64>> {
    base.step_logits(t)
}

/// Flag hesitant steps and extract severity and the minimal window.
pub fn profile(margins: &[f64], tau: f64) -> HesitationProfile {
    debug_assert!(tau > 0.0, "tau must be positive");
    let flags: Vec<bool> = margins.iter().map(|d| d.abs() < tau).collect();
    let n_tau = flags.iter().filter(|&&f| f).count();
    let window = if n_tau == 0 {
        None
    } else {
        let lo = flags.iter().position(|&f| f).unwrap();
        let hi = flags.iter().rposition(|&f| f).unwrap();
        Some((lo, hi))
    };
    HesitationProfile { margins: margins.to_vec(), flags, n_tau, window, tau }
}

/// Probe-extrinsic severities: steps with entropy >= `tau_e` and steps with
/// confidence <= `tau_c`.
pub fn extrinsic_severity(t: &Trajectory, tau_e: f64, tau_c: f64) -> Result<(usize, usize)> {
    let entropy = t.entropy.as_ref().ok_or(D2Error::ChannelMissing("entropy"))?;
    let confidence =
        t.confidence.as_ref().ok_or(D2Error::ChannelMissing("confidence"))?;
    let n_entropy = entropy.iter().filter(|&&e| e >= tau_e).count();
    let n_confidence = confidence.iter().filter(|&&c| c <= tau_c).count();
    Ok((n_entropy, n_confidence))
}

/// Leakage-free signed margins for a whole training set: every sample is
/// scored by a probe trained on the other folds.
#[derive(Debug, Clone, PartialEq)]
pub struct OofMargins {
    /// Per sample (original dataset order), per step.
    pub margins: Vec<Vec<f64>>,
    /// Fold index of each sample.
    pub fold: Vec<usize>,
    pub k: usize,
}

impl OofMargins {
    /// Minimum absolute margin per trajectory; the quantity `select_tau`
    /// thresholds.
    pub fn min_abs_margins(&self) -> Vec<f64> {
        self.margins
            .iter()
            .map(|m| m.iter().fold(f64::INFINITY, |a, d| a.min(d.abs())))
            .collect()
    }

    /// CSV export with header `sample_id,fold,step,margin`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "fold", "step", "margin"])?;
        for (i, margins) in self.margins.iter().enumerate() {
            for (s, d) in margins.iter().enumerate() {
                w.write_record(&[
                    i.to_string(),
                    self.fold[i].to_string(),
                    s.to_string(),
                    d.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Read per-sample margin sequences back from a margins CSV
/// (`sample_id,fold,step,margin`, as written by [`OofMargins::write_csv`]).
pub fn read_margins_csv(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows: Vec<(usize, usize, f64)> = Vec::new();
    for record in r.records() {
        let record = record?;
        let parse = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| D2Error::Invalid("short row in margins csv".into()))
        };
        let sample: usize = parse(0)?
            .parse()
            .map_err(|_| D2Error::Invalid("bad sample_id in margins csv".into()))?;
        let step: usize = parse(2)?
            .parse()
            .map_err(|_| D2Error::Invalid("bad step in margins csv".into()))?;
        let margin: f64 = parse(3)?
            .parse()
            .map_err(|_| D2Error::Invalid("bad margin in margins csv".into()))?;
        rows.push((sample, step, margin));
    }
    if rows.is_empty() {
        return Err(D2Error::Invalid("margins csv holds no rows".into()));
    }
    let n = rows.iter().map(|r| r.0).max().unwrap() + 1;
    let mut out: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (sample, step, margin) in rows {
        if sample >= n {
            return Err(D2Error::Invalid("sample_id out of range".into()));
        }
        out[sample].push((step, margin));
    }
    out.into_iter()
        .enumerate()
        .map(|(i, mut steps)| {
            if steps.is_empty() {
                return Err(D2Error::Invalid(format!("sample {i} has no margin rows")));
            }
            steps.sort_by_key(|&(s, _)| s);
            Ok(steps.into_iter().map(|(_, d)| d).collect())
        })
        .collect()
}

/// Stratified fold assignment: per class, shuffled round-robin dealing.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(D2Error::Invalid("fold count must be >= 2".into()));
    }
    let mut assignment = vec![usize::MAX; labels.len()];
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(D2Error::TooFewSamples(format!(
                "class {class} has {} samples, fewer than k = {k}",
                members.len()
            )));
        }
        let mut rng = util::rng_from(util::derive_seed(seed, tag::OOF, class as u64));
        members.shuffle(&mut rng);
        for (pos, idx) in members.into_iter().enumerate() {
            assignment[idx] = pos % k;
        }
    }
    if assignment.contains(&usize::MAX) {
        return Err(D2Error::Invalid("labels must be binary".into()));
    }
    Ok(assignment)
}

/// Out-of-fold margins with a seeded stratified fold assignment. Each
/// fold's probe is a linear probe with the fixed configuration
/// (lr 1e-3, weight decay 1e-4), trained on the other folds with
/// per-feature statistics fit on those folds only.
pub fn oof_margins(ds: &Dataset, k: usize, seed: u64) -> Result<OofMargins> {
    let labels = ds.labels()?;
    let assignment = stratified_folds(&labels, k, seed)?;
    oof_margins_with_assignment(ds, &assignment, k, seed)
}

/// Out-of-fold margins under a caller-supplied fold assignment. Exposed so
/// leakage-freedom can be audited with pinned folds.
pub fn oof_margins_with_assignment(
    ds: &Dataset,
    assignment: &[usize],
    k: usize,
    seed: u64,
) -> Result<OofMargins> {
    if assignment.len() != ds.len() {
        return Err(D2Error::LengthMismatch(format!(
            "{} fold assignments for {} samples",
            assignment.len(),
            ds.len()
        )));
    }
    let spec = ProbeSpec::new(Arch::Lp, ds.dim(), Readout::Mean)?;
    let per_fold: Vec<Vec<(usize, Vec<f64>)>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train_idx: Vec<usize> =
                (0..ds.len()).filter(|&i| assignment[i] != fold).collect();
            let held_idx: Vec<usize> =
                (0..ds.len()).filter(|&i| assignment[i] == fold).collect();
            if train_idx.is_empty() || held_idx.is_empty() {
                return Err(D2Error::TooFewSamples(format!(
                    "fold {fold} leaves an empty train or held-out side"
                )));
            }
            let train = ds.subset(&train_idx)?;
            let stats = NormStats::fit(&train, NormMode::PerFeature)?;
            let normed = stats.apply_dataset(&train)?;
            let cfg = TrainConfig::fixed_lp_for(
                train.len(),
                util::derive_seed(seed, tag::FOLD, fold as u64),
            );
            let (probe, _) = train_probe(&normed, &spec, &cfg, &stats)?;
            held_idx
                .into_iter()
                .map(|i| Ok((i, probe.step_logits(ds.sample(i))?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut margins = vec![Vec::new(); ds.len()];
    for fold in per_fold {
        for (i, m) in fold {
            margins[i] = m;
        }
    }
    for m in &margins {
        if !m.iter().all(|d| d.is_finite()) {
            return Err(D2Error::NonFiniteValue("out-of-fold margins".into()));
        }
    }
    Ok(OofMargins { margins, fold: assignment.to_vec(), k })
}

/// Threshold such that roughly `target_ratio` of trajectories are hesitant
/// (a trajectory is hesitant iff `min_s |d_s| < tau`). Lower-interpolation
/// quantile of the per-trajectory minimum absolute margins, so the flagged
/// fraction never exceeds the target.
pub fn select_tau(oof: &OofMargins, target_ratio: f64) -> Result<f64> {
    if !(0.0 < target_ratio && target_ratio < 1.0) {
        return Err(D2Error::Invalid("target ratio must lie in (0,1)".into()));
    }
    let mut mins = oof.min_abs_margins();
    mins.sort_by(f64::total_cmp);
    let j = ((target_ratio * mins.len() as f64).floor() as usize).min(mins.len() - 1);
    Ok(mins[j])
}

/// One bin of the boundary-crossing analysis: among steps whose absolute
/// margin fell in `[lo, hi)`, the fraction whose margin changed sign at the
/// next step.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossingBin {
    pub lo: f64,
    pub hi: f64,
    pub total: usize,
    pub flips: usize,
}

impl CrossingBin {
    pub fn probability(&self) -> f64 {
        self.flips as f64 / self.total as f64
    }
}

/// Equal-width bin edges over `[0, p99]` of the pooled absolute margins.
pub fn default_bin_edges(sequences: &[Vec<f64>], bins: usize) -> Vec<f64> {
    let mut abs: Vec<f64> =
        sequences.iter().flatten().map(|d| d.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let p99 = if abs.is_empty() {
        1.0
    } else {
        abs[((0.99 * abs.len() as f64).floor() as usize).min(abs.len() - 1)]
    };
    let hi = if p99 > 0.0 { p99 } else { 1.0 };
    (0..=bins).map(|i| hi * i as f64 / bins as f64).collect()
}

/// Per-bin probability that the margin sign flips at the next step. Final
/// steps have no successor and are excluded; empty bins are omitted.
pub fn crossing_probability(sequences: &[Vec<f64>], bin_edges: &[f64]) -> Result<Vec<CrossingBin>> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(D2Error::Invalid("bin edges must be strictly increasing".into()));
    }
    let nbins = bin_edges.len() - 1;
    let mut bins: Vec<CrossingBin> = (0..nbins)
        .map(|b| CrossingBin { lo: bin_edges[b], hi: bin_edges[b + 1], total: 0, flips: 0 })
        .collect();
    for seq in sequences {
        if seq.len() < 2 {
            return Err(D2Error::Invalid(
                "crossing analysis needs sequences of length >= 2".into(),
            ));
        }
        for s in 0..seq.len() - 1 {
            let a = seq[s].abs();
            // half-open bins; values at or past the last edge are out of range
            let Some(b) = bins.iter().position(|bin| a >= bin.lo && a < bin.hi) else {
                continue;
            };
            bins[b].total += 1;
            if (seq[s] > 0.0) != (seq[s + 1] > 0.0) {
                bins[b].flips += 1;
            }
        }
    }
    Ok(bins.into_iter().filter(|b| b.total > 0).collect())
}

/// Margin persistence: `P(|d_{s+k}| < tau | |d_s| < tau)` for each lag
/// `k = 1..=max_lag`, pooled over all valid step pairs, plus the
/// unconditional fraction of hesitant steps as a baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceCurve {
    pub tau: f64,
    /// `probs[k-1]` is the conditional probability at lag k.
    pub probs: Vec<f64>,
    /// Number of conditioning pairs behind each lag.
    pub pairs: Vec<usize>,
    pub baseline: f64,
}

pub fn persistence_curve(
    sequences: &[Vec<f64>],
    tau: f64,
    max_lag: usize,
) -> Result<PersistenceCurve> {
    if max_lag == 0 {
        return Err(D2Error::Invalid("max lag must be >= 1".into()));
    }
    if tau <= 0.0 {
        return Err(D2Error::Invalid("tau must be positive".into()));
    }
    let mut probs = Vec::with_capacity(max_lag);
    let mut pairs = Vec::with_capacity(max_lag);
    for k in 1..=max_lag {
        let mut cond = 0usize;
        let mut both = 0usize;
        for seq in sequences {
            if seq.len() <= k {
                continue;
            }
            for s in 0..seq.len() - k {
                if seq[s].abs() < tau {
                    cond += 1;
                    if seq[s + k].abs() < tau {
                        both += 1;
                    }
                }
            }
        }
        probs.push(if cond == 0 { 0.0 } else { both as f64 / cond as f64 });
        pairs.push(cond);
    }
    let total: usize = sequences.iter().map(|s| s.len()).sum();
    let hesitant: usize =
        sequences.iter().flatten().filter(|d| d.abs() < tau).count();
    let baseline = if total == 0 { 0.0 } else { hesitant as f64 / total as f64 };
    Ok(PersistenceCurve { tau, probs, pairs, baseline })
}
