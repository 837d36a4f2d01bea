//! Out-of-fold margin scoring and hesitation analysis: leakage-free margins,
//! threshold selection at a target hesitant ratio, per-trajectory severity
//! and windows, and the probe-extrinsic severities for comparison.
//!
//! ```bash
//! cargo run -p d2monitor --example oof_hesitation
//! ```

use d2monitor::hesitation::{extrinsic_severity, oof_margins, profile, select_tau};
use d2monitor::synth::{generate, SynthConfig};

fn main() -> d2monitor::Result<()> {
    let ds = generate(&SynthConfig::new(1000, 16, 32, 2026))?;
    let oof = oof_margins(&ds, 5, 2026)?;
    let tau = select_tau(&oof, 0.5)?;
    println!("out-of-fold margins over {} samples, 5 folds; tau = {tau:.4}", ds.len());

    // severity histogram
    let mut histogram = vec![0usize; ds.steps() + 1];
    let mut windows = Vec::new();
    for margins in &oof.margins {
        let p = profile(margins, tau);
        histogram[p.n_tau] += 1;
        if let Some((lo, hi)) = p.window {
            windows.push(hi - lo + 1);
        }
    }
    println!("hesitation severity histogram (n_tau -> trajectories):");
    for (n, count) in histogram.iter().enumerate() {
        if *count > 0 {
            println!("  {n:2}: {count:4} {}", "#".repeat(count / 8));
        }
    }
    let mean_window = windows.iter().sum::<usize>() as f64 / windows.len().max(1) as f64;
    println!(
        "{} hesitant trajectories, mean window {:.1} of {} steps",
        windows.len(),
        mean_window,
        ds.steps()
    );

    // the same counting construction applies to the extrinsic channels
    let (n_entropy, n_confidence) = extrinsic_severity(ds.sample(0), 1.8, 0.6)?;
    println!(
        "sample 0 extrinsic severities: n_entropy = {n_entropy}, n_confidence = {n_confidence}"
    );

    let dir = std::env::temp_dir().join("d2m_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("margins.csv");
    oof.write_csv(&path)?;
    println!("margins exported to {}", path.display());
    Ok(())
}
