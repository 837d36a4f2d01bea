//! Token-dimension pooling: build a raw `S x L x D` dataset, pool it to the
//! step-wise `S x D` form the probes consume, and round-trip the raw format.
//!
//! ```bash
//! cargo run -p d2monitor --example token_pooling
//! ```

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use d2monitor::trajectory::{RawDataset, RawSample, RawTrajectory};

fn main() -> d2monitor::Result<()> {
    let (steps, tokens, dim) = (4, 6, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<RawSample> = (0..3)
        .map(|i| {
            let states: Vec<f64> = (0..steps * tokens * dim)
                .map(|_| (rng.gen::<f32>() * 2.0 - 1.0) as f64)
                .collect();
            Ok(RawSample {
                states: RawTrajectory::new(steps, tokens, dim, states)?,
                entropy: None,
                confidence: None,
                label: Some(i % 2),
            })
        })
        .collect::<d2monitor::Result<_>>()?;
    let raw = RawDataset::new(samples)?;

    let dir = std::env::temp_dir().join("d2m_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("raw.d2t");
    raw.write(&path)?;
    let back = RawDataset::read(&path)?;
    assert_eq!(raw, back);
    println!("raw file round-tripped: S x L x D = {steps} x {tokens} x {dim}");

    let pooled = back.pool()?;
    println!(
        "pooled to {} trajectories of S x D = {} x {}",
        pooled.len(),
        pooled.steps(),
        pooled.dim()
    );

    // the pooled row is the token mean
    let manual: f64 = (0..tokens)
        .map(|r| back.samples[0].states.token(0, r)[0])
        .sum::<f64>()
        / tokens as f64;
    println!(
        "step 0, feature 0: token mean {manual:.6} == pooled {:.6}",
        pooled.sample(0).step(0)[0]
    );
    Ok(())
}
