//! Seeded synthetic trajectory generator.
//!
//! Builds a desk-scale world where margin hesitation genuinely predicts
//! difficulty. Every sample carries a latent mean-reverting margin path
//! `m_s` along a shared direction `u`. *Easy* samples sit far from the
//! boundary (`|m| ~ mu_easy`) and are linearly separable. *Hard* samples
//! hover near it (`|m| ~ mu_hard`, higher volatility) and carry their label
//! in an XOR arrangement over two extra directions `(v1, v2)` — invisible to
//! a linear probe, learnable by a nonlinear one. Entropy and confidence
//! channels are deterministic functions of `|m_s|` plus noise.
//!
//! Generation is parallel over samples with one derived RNG stream per
//! sample, so output is identical for any thread count.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{D2Error, Result};
use crate::trajectory::{Dataset, Trajectory};
use crate::util::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub samples: usize,
    pub steps: usize,
    pub dim: usize,
    /// Fraction of samples drawn from the hard (XOR-coded) population.
    pub hard_fraction: f64,
    pub seed: u64,
    /// First sample-stream index. The seed fixes the world (basis
    /// directions); disjoint offset ranges yield disjoint draws from that
    /// same world, which is how train/validation/test splits are produced.
    #[serde(default)]
    pub sample_offset: usize,
    /// Mean-reversion rate of the margin path.
    pub theta_ou: f64,
    pub sigma_easy: f64,
    pub sigma_hard: f64,
    pub mu_easy: f64,
    pub mu_hard: f64,
    /// Isotropic state noise.
    pub noise: f64,
    /// XOR cluster amplitude along `v1`, `v2`.
    pub xor_amplitude: f64,
}

/// Jitter on the XOR coordinates around `±xor_amplitude`.
const XOR_JITTER: f64 = 0.1;
const ENTROPY_NOISE: f64 = 0.05;
const CONFIDENCE_NOISE: f64 = 0.02;

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 1000,
            steps: 16,
            dim: 32,
            hard_fraction: 0.4,
            seed: 0,
            sample_offset: 0,
            theta_ou: 0.5,
            sigma_easy: 0.1,
            sigma_hard: 0.4,
            mu_easy: 2.0,
            mu_hard: 0.15,
            noise: 0.3,
            xor_amplitude: 1.5,
        }
    }
}

impl SynthConfig {
    pub fn new(samples: usize, steps: usize, dim: usize, seed: u64) -> SynthConfig {
        SynthConfig { samples, steps, dim, seed, ..SynthConfig::default() }
    }

    /// Same world, next draw range: a config for `samples` fresh samples
    /// starting right after this config's range.
    pub fn next_split(&self, samples: usize) -> SynthConfig {
        SynthConfig {
            samples,
            sample_offset: self.sample_offset + self.samples,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.steps == 0 {
            return Err(D2Error::Invalid("need samples >= 1 and steps >= 1".into()));
        }
        if self.dim < 4 {
            return Err(D2Error::Invalid("synthetic dim must be >= 4".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(D2Error::Invalid("hard fraction must lie in [0,1]".into()));
        }
        if self.sigma_easy <= 0.0 || self.sigma_hard <= 0.0 || self.noise <= 0.0 {
            return Err(D2Error::Invalid("noise scales must be positive".into()));
        }
        Ok(())
    }
}

/// Noiseless entropy channel value for margin `m`: high near the boundary,
/// decaying toward 1 as `|m|` grows.
pub fn noiseless_entropy(m: f64) -> f64 {
    1.0 + 2.0 * (-m.abs() / 0.5).exp()
}

/// Noiseless confidence channel value for margin `m`: low near the
/// boundary, saturating toward 0.9 as `|m|` grows.
pub fn noiseless_confidence(m: f64) -> f64 {
    0.4 + 0.5 * (1.0 - (-m.abs() / 0.5).exp())
}

/// The orthonormal directions `(u, v1, v2)` a given config generates under:
/// seeded Gram-Schmidt on three Gaussian draws.
pub fn basis(cfg: &SynthConfig) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = util::rng_from(util::derive_seed(cfg.seed, tag::SYNTH_BASIS, 0));
    let normal = StandardNormal;
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..cfg.dim).map(|_| normal.sample(rng)).collect()
    };
    let mut u = draw(&mut rng);
    normalize(&mut u);
    let mut v1 = draw(&mut rng);
    reject(&mut v1, &u);
    normalize(&mut v1);
    let mut v2 = draw(&mut rng);
    reject(&mut v2, &u);
    reject(&mut v2, &v1);
    normalize(&mut v2);
    (u, v1, v2)
}

fn normalize(v: &mut [f64]) {
    let norm = util::dot(v, v).sqrt();
    for x in v {
        *x /= norm;
    }
}

fn reject(v: &mut [f64], onto: &[f64]) {
    let proj = util::dot(v, onto);
    util::axpy(v, -proj, onto);
}

/// Generate a labeled dataset with entropy and confidence channels.
/// Deterministic given `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (u, v1, v2) = basis(cfg);
    let samples: Vec<Trajectory> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let stream = (cfg.sample_offset + i) as u64;
            let mut rng =
                util::rng_from(util::derive_seed(cfg.seed, tag::SYNTH_SAMPLE, stream));
            let normal = StandardNormal;
            let label = rng.gen::<f64>() < 0.5;
            let hard = rng.gen::<f64>() < cfg.hard_fraction;
            let xor_sign = if rng.gen::<f64>() < 0.5 { 1.0 } else { -1.0 };
            let side = if label { 1.0 } else { -1.0 };
            let (mu, sigma) = if hard {
                (side * cfg.mu_hard, cfg.sigma_hard)
            } else {
                (side * cfg.mu_easy, cfg.sigma_easy)
            };

            // mean-reverting margin path
            let mut margins = Vec::with_capacity(cfg.steps);
            let e0: f64 = normal.sample(&mut rng);
            let mut m = mu + sigma * e0;
            margins.push(m);
            for _ in 1..cfg.steps {
                let e: f64 = normal.sample(&mut rng);
                m += cfg.theta_ou * (mu - m) + sigma * e;
                margins.push(m);
            }

            // label sits in sign(a*b) = 2y-1 for hard samples
            let sign_a = xor_sign;
            let sign_b = xor_sign * side;

            let mut states = vec![0.0; cfg.steps * cfg.dim];
            for (s, &m_s) in margins.iter().enumerate() {
                let row = &mut states[s * cfg.dim..(s + 1) * cfg.dim];
                util::axpy(row, m_s, &u);
                if hard {
                    let ja: f64 = normal.sample(&mut rng);
                    let jb: f64 = normal.sample(&mut rng);
                    let a_s = sign_a * cfg.xor_amplitude + XOR_JITTER * ja;
                    let b_s = sign_b * cfg.xor_amplitude + XOR_JITTER * jb;
                    util::axpy(row, a_s, &v1);
                    util::axpy(row, b_s, &v2);
                }
                for x in row.iter_mut() {
                    let e: f64 = normal.sample(&mut rng);
                    *x += cfg.noise * e;
                }
            }

            let entropy: Vec<f64> = margins
                .iter()
                .map(|&m| {
                    let e: f64 = normal.sample(&mut rng);
                    noiseless_entropy(m) + ENTROPY_NOISE * e
                })
                .collect();
            let confidence: Vec<f64> = margins
                .iter()
                .map(|&m| {
                    let e: f64 = normal.sample(&mut rng);
                    (noiseless_confidence(m) + CONFIDENCE_NOISE * e).clamp(0.0, 1.0)
                })
                .collect();

            Trajectory::new(cfg.steps, cfg.dim, states)?
                .with_entropy(entropy)?
                .with_confidence(confidence)?
                .with_label(label as u8)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use crate::normalize::{NormMode, NormStats};
    use crate::probes::{Arch, ProbeSpec, Readout};
    use crate::train::{split_train_val, train_probe, TrainConfig};

    #[test]
    fn same_seed_bit_identical() {
        let cfg = SynthConfig::new(50, 8, 16, 2026);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn offset_splits_share_the_world_but_not_samples() {
        let train = SynthConfig::new(30, 4, 8, 5);
        let test = train.next_split(10);
        assert_eq!(test.sample_offset, 30);
        let a = generate(&train).unwrap();
        let b = generate(&test).unwrap();
        // a combined draw reproduces both ranges exactly
        let all = generate(&SynthConfig { samples: 40, ..train.clone() }).unwrap();
        for i in 0..30 {
            assert_eq!(all.sample(i), a.sample(i));
        }
        for i in 0..10 {
            assert_eq!(all.sample(30 + i), b.sample(i));
        }
    }

    #[test]
    fn basis_is_orthonormal() {
        let cfg = SynthConfig::new(1, 4, 24, 3);
        let (u, v1, v2) = basis(&cfg);
        let close = |x: f64, y: f64| (x - y).abs() < 1e-10;
        assert!(close(crate::util::dot(&u, &u), 1.0));
        assert!(close(crate::util::dot(&v1, &v1), 1.0));
        assert!(close(crate::util::dot(&v2, &v2), 1.0));
        assert!(close(crate::util::dot(&u, &v1), 0.0));
        assert!(close(crate::util::dot(&u, &v2), 0.0));
        assert!(close(crate::util::dot(&v1, &v2), 0.0));
    }

    #[test]
    fn class_balance_near_half() {
        let cfg = SynthConfig::new(2000, 4, 8, 11);
        let ds = generate(&cfg).unwrap();
        let pos: usize =
            ds.labels().unwrap().iter().map(|&l| l as usize).sum();
        let frac = pos as f64 / 2000.0;
        assert!((frac - 0.5).abs() < 0.03, "positive fraction {frac}");
    }

    #[test]
    fn channels_monotone_in_margin_magnitude() {
        let mut prev_e = f64::INFINITY;
        let mut prev_c = f64::NEG_INFINITY;
        for i in 0..50 {
            let m = i as f64 * 0.1;
            let e = noiseless_entropy(m);
            let c = noiseless_confidence(m);
            assert!(e < prev_e || i == 0);
            assert!(c > prev_c || i == 0);
            prev_e = e;
            prev_c = c;
        }
        // symmetric in the sign of m
        assert_eq!(noiseless_entropy(-1.2), noiseless_entropy(1.2));
        assert_eq!(noiseless_confidence(-0.7), noiseless_confidence(0.7));
    }

    fn sign_flip_rate(ds: &Dataset, u: &[f64]) -> f64 {
        let mut flips = 0usize;
        let mut pairs = 0usize;
        for t in ds.samples() {
            for s in 0..t.steps() - 1 {
                let a = crate::util::dot(t.step(s), u);
                let b = crate::util::dot(t.step(s + 1), u);
                pairs += 1;
                if (a > 0.0) != (b > 0.0) {
                    flips += 1;
                }
            }
        }
        flips as f64 / pairs as f64
    }

    #[test]
    fn hard_samples_flip_more() {
        let mut hard_cfg = SynthConfig::new(1000, 8, 16, 21);
        hard_cfg.hard_fraction = 1.0;
        let mut easy_cfg = hard_cfg.clone();
        easy_cfg.hard_fraction = 0.0;
        let (u, _, _) = basis(&hard_cfg);
        let hard_rate = sign_flip_rate(&generate(&hard_cfg).unwrap(), &u);
        let easy_rate = sign_flip_rate(&generate(&easy_cfg).unwrap(), &u);
        assert!(
            hard_rate > easy_rate + 0.1,
            "hard {hard_rate} vs easy {easy_rate}"
        );
    }

    #[test]
    fn hard_margins_stay_small() {
        let mut cfg = SynthConfig::new(1000, 8, 16, 23);
        cfg.hard_fraction = 1.0;
        let (u, _, _) = basis(&cfg);
        let ds = generate(&cfg).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in ds.samples() {
            for s in 0..t.steps() {
                sum += crate::util::dot(t.step(s), &u).abs();
                count += 1;
            }
        }
        let mean_abs = sum / count as f64;
        assert!(
            mean_abs < cfg.mu_easy / 2.0,
            "mean |<h,u>| = {mean_abs} should stay below {}",
            cfg.mu_easy / 2.0
        );
    }

    #[test]
    fn linearly_separable_world_is_easy_for_lp() {
        // hard_fraction = 0: a linear probe must reach macro-F1 >= 0.95
        let mut cfg = SynthConfig::new(1200, 8, 16, 31);
        cfg.hard_fraction = 0.0;
        let ds = generate(&cfg).unwrap();
        let (train, test) = split_train_val(&ds, 0.8, 7).unwrap();
        let stats = NormStats::fit(&train, NormMode::PerFeature).unwrap();
        let normed = stats.apply_dataset(&train).unwrap();
        let spec = ProbeSpec::new(Arch::Lp, 16, Readout::Mean).unwrap();
        let (probe, _) =
            train_probe(&normed, &spec, &TrainConfig::fixed_lp(3), &stats).unwrap();
        let report = metrics::evaluate_probe(&probe, &test).unwrap();
        assert!(report.f1_macro >= 0.95, "macro-F1 {}", report.f1_macro);
    }
}
