//! Activation normalization.
//!
//! Two modes: `PerFeature` pools statistics over both the sample and step
//! axes (shape `[D]`), used by every trajectory readout; `PerStep` keeps one
//! statistic per denoising step (shape `[S, D]`), used by last-step probes so
//! the final step is standardized by its own distribution.
//!
//! Population standard deviation, floored at `1e-6` so constant features
//! stay finite.

use serde::{Deserialize, Serialize};

use crate::error::{D2Error, Result};
use crate::trajectory::{Dataset, Trajectory};

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    PerFeature,
    PerStep,
}

/// Fitted normalization statistics. `mean`/`std` are length `D` for
/// `PerFeature` and length `S*D` (step-major) for `PerStep`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mode: NormMode,
    pub steps: usize,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Identity statistics (mean 0, std 1); normalization becomes a no-op.
    pub fn identity(mode: NormMode, steps: usize, dim: usize) -> NormStats {
        let n = match mode {
            NormMode::PerFeature => dim,
            NormMode::PerStep => steps * dim,
        };
        NormStats { mode, steps, dim, mean: vec![0.0; n], std: vec![1.0; n] }
    }

    /// Fit statistics from a dataset.
    pub fn fit(ds: &Dataset, mode: NormMode) -> Result<NormStats> {
        if ds.is_empty() {
            return Err(D2Error::EmptyDataset);
        }
        match mode {
            NormMode::PerFeature => {
                let stats = Self::fit_per_feature(ds.samples(), ds.dim());
                Ok(NormStats { steps: ds.steps(), ..stats })
            }
            NormMode::PerStep => {
                let (steps, dim) = (ds.steps(), ds.dim());
                let n = steps * dim;
                let mut mean = vec![0.0; n];
                let mut sq = vec![0.0; n];
                for t in ds.samples() {
                    for (acc, v) in mean.iter_mut().zip(t.states()) {
                        *acc += v;
                    }
                    for (acc, v) in sq.iter_mut().zip(t.states()) {
                        *acc += v * v;
                    }
                }
                let inv = 1.0 / ds.len() as f64;
                let mut std = vec![0.0; n];
                for i in 0..n {
                    mean[i] *= inv;
                    let var = (sq[i] * inv - mean[i] * mean[i]).max(0.0);
                    std[i] = var.sqrt().max(STD_FLOOR);
                }
                Ok(NormStats { mode, steps, dim, mean, std })
            }
        }
    }

    /// Per-feature fit over an arbitrary collection of trajectories, which
    /// may differ in step count. Used for expert probes trained on
    /// variable-length hesitation windows.
    pub fn fit_per_feature(samples: &[Trajectory], dim: usize) -> NormStats {
        let mut mean = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut count = 0usize;
        for t in samples {
            debug_assert_eq!(t.dim(), dim);
            for s in 0..t.steps() {
                for (d, v) in t.step(s).iter().enumerate() {
                    mean[d] += v;
                    sq[d] += v * v;
                }
            }
            count += t.steps();
        }
        let inv = 1.0 / count.max(1) as f64;
        let mut std = vec![0.0; dim];
        for d in 0..dim {
            mean[d] *= inv;
            let var = (sq[d] * inv - mean[d] * mean[d]).max(0.0);
            std[d] = var.sqrt().max(STD_FLOOR);
        }
        NormStats { mode: NormMode::PerFeature, steps: 0, dim, mean, std }
    }

    /// Standardize one trajectory: `x' = (x - mean) / std` with
    /// mode-appropriate broadcasting. Channels and label pass through.
    pub fn apply(&self, t: &Trajectory) -> Result<Trajectory> {
        if t.dim() != self.dim {
            return Err(D2Error::ShapeMismatch(format!(
                "trajectory dim {} != stats dim {}",
                t.dim(),
                self.dim
            )));
        }
        if self.mode == NormMode::PerStep && t.steps() != self.steps {
            return Err(D2Error::ShapeMismatch(format!(
                "trajectory has {} steps, per-step stats were fit on {}",
                t.steps(),
                self.steps
            )));
        }
        let mut states = Vec::with_capacity(t.steps() * t.dim());
        for s in 0..t.steps() {
            let (m, sd) = self.row(s);
            for (d, v) in t.step(s).iter().enumerate() {
                states.push((v - m[d]) / sd[d]);
            }
        }
        let mut out = Trajectory::new(t.steps(), t.dim(), states)?;
        out.entropy = t.entropy.clone();
        out.confidence = t.confidence.clone();
        out.label = t.label;
        Ok(out)
    }

    /// Standardize a whole dataset.
    pub fn apply_dataset(&self, ds: &Dataset) -> Result<Dataset> {
        let samples =
            ds.samples().iter().map(|t| self.apply(t)).collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }

    /// Standardize a single step vector. For `PerStep` stats the caller
    /// names the step the vector came from.
    pub fn apply_step(&self, step: usize, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(D2Error::ShapeMismatch(format!(
                "vector dim {} != stats dim {}",
                x.len(),
                self.dim
            )));
        }
        if self.mode == NormMode::PerStep && step >= self.steps {
            return Err(D2Error::ShapeMismatch(format!(
                "step {step} out of range for per-step stats with {} steps",
                self.steps
            )));
        }
        let (m, sd) = self.row(step);
        Ok(x.iter().enumerate().map(|(d, v)| (v - m[d]) / sd[d]).collect())
    }

    fn row(&self, step: usize) -> (&[f64], &[f64]) {
        match self.mode {
            NormMode::PerFeature => (&self.mean, &self.std),
            NormMode::PerStep => {
                let base = step * self.dim;
                (&self.mean[base..base + self.dim], &self.std[base..base + self.dim])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_dataset(n: usize, steps: usize, dim: usize, seed: u64) -> Dataset {
        let mut rng = crate::util::rng_from(seed);
        let samples = (0..n)
            .map(|_| {
                let states: Vec<f64> =
                    (0..steps * dim).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
                Trajectory::new(steps, dim, states).unwrap()
            })
            .collect();
        Dataset::new(samples).unwrap()
    }

    #[test]
    fn all_zeros_floors_std() {
        let ds = Dataset::new(vec![
            Trajectory::new(2, 3, vec![0.0; 6]).unwrap(),
            Trajectory::new(2, 3, vec![0.0; 6]).unwrap(),
        ])
        .unwrap();
        let stats = NormStats::fit(&ds, NormMode::PerFeature).unwrap();
        assert!(stats.mean.iter().all(|&m| m == 0.0));
        assert!(stats.std.iter().all(|&s| s == STD_FLOOR));
    }

    #[test]
    fn two_point_population_std() {
        // feature values {1, 3}: mean 2, population std 1
        let ds = Dataset::new(vec![
            Trajectory::new(1, 1, vec![1.0]).unwrap(),
            Trajectory::new(1, 1, vec![3.0]).unwrap(),
        ])
        .unwrap();
        let stats = NormStats::fit(&ds, NormMode::PerFeature).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.std, vec![1.0]);
    }

    #[test]
    fn per_step_matches_brute_force() {
        let ds = random_dataset(200, 5, 4, 42);
        let stats = NormStats::fit(&ds, NormMode::PerStep).unwrap();
        // independent accumulation, one (step, feature) cell at a time
        for s in 0..5 {
            for d in 0..4 {
                let vals: Vec<f64> = ds.samples().iter().map(|t| t.step(s)[d]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                let idx = s * 4 + d;
                assert!((stats.mean[idx] - mean).abs() < 1e-6);
                assert!((stats.std[idx] - var.sqrt().max(STD_FLOOR)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn standardization_identity() {
        let ds = random_dataset(300, 4, 3, 7);
        let stats = NormStats::fit(&ds, NormMode::PerFeature).unwrap();
        let normed = stats.apply_dataset(&ds).unwrap();
        let refit = NormStats::fit(&normed, NormMode::PerFeature).unwrap();
        for d in 0..3 {
            assert!(refit.mean[d].abs() < 1e-5, "column mean {}", refit.mean[d]);
            assert!((refit.std[d] - 1.0).abs() < 1e-3, "column std {}", refit.std[d]);
        }
    }

    #[test]
    fn identity_stats_noop() {
        let ds = random_dataset(5, 3, 2, 9);
        let stats = NormStats::identity(NormMode::PerFeature, 3, 2);
        let normed = stats.apply_dataset(&ds).unwrap();
        assert_eq!(ds, normed);
    }

    #[test]
    fn per_step_shape_mismatch() {
        let ds = random_dataset(10, 4, 3, 11);
        let stats = NormStats::fit(&ds, NormMode::PerStep).unwrap();
        let other = random_dataset(1, 5, 3, 12);
        assert!(matches!(
            stats.apply(other.sample(0)),
            Err(D2Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn refit_on_normalized_is_idempotent() {
        let ds = random_dataset(500, 3, 4, 21);
        for mode in [NormMode::PerFeature, NormMode::PerStep] {
            let stats = NormStats::fit(&ds, mode).unwrap();
            let normed = stats.apply_dataset(&ds).unwrap();
            let refit = NormStats::fit(&normed, mode).unwrap();
            assert!(refit.mean.iter().all(|m| m.abs() < 1e-3));
            assert!(refit.std.iter().all(|s| (s - 1.0).abs() < 1e-3));
        }
    }

    #[test]
    fn apply_is_affine() {
        // apply(a*x + c) = a/std * x + const, checked numerically
        let ds = random_dataset(50, 2, 3, 33);
        let stats = NormStats::fit(&ds, NormMode::PerFeature).unwrap();
        let t = ds.sample(0);
        let (a, c) = (1.7, -0.4);
        let scaled = Trajectory::new(
            t.steps(),
            t.dim(),
            t.states().iter().map(|v| a * v + c).collect(),
        )
        .unwrap();
        let n1 = stats.apply(t).unwrap();
        let n2 = stats.apply(&scaled).unwrap();
        for s in 0..t.steps() {
            for d in 0..t.dim() {
                let want = a * n1.step(s)[d] + (a * stats.mean[d] + c - stats.mean[d]) / stats.std[d];
                assert!((n2.step(s)[d] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_dataset_rejected_by_fit() {
        // Dataset::new rejects empties, so fit can only see nonempty ones;
        // the subset path is the realistic way to hit it.
        let ds = random_dataset(3, 2, 2, 1);
        assert!(ds.subset(&[]).is_err());
    }
}
