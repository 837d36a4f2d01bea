//! Generate a synthetic trajectory dataset, write it to the binary format,
//! read it back, and summarize what is inside.
//!
//! ```bash
//! cargo run -p d2monitor --example synth_dataset
//! ```

use d2monitor::synth::{generate, SynthConfig};
use d2monitor::trajectory::Dataset;

fn main() -> d2monitor::Result<()> {
    let cfg = SynthConfig::new(500, 16, 32, 2026);
    let ds = generate(&cfg)?;

    let dir = std::env::temp_dir().join("d2m_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("synth.d2t");
    ds.write(&path)?;
    // values are stored as f32, so the file (not the f64 in-memory form) is
    // the round-trip fixed point
    let back = Dataset::read(&path)?;
    let again = dir.join("synth2.d2t");
    back.write(&again)?;
    assert_eq!(std::fs::read(&path)?, std::fs::read(&again)?);
    println!(
        "wrote and re-read {} samples (S = {}, D = {}) at {}",
        back.len(),
        back.steps(),
        back.dim(),
        path.display()
    );

    let labels = back.labels()?;
    let unsafe_count: usize = labels.iter().map(|&l| l as usize).sum();
    println!(
        "labels: {} unsafe / {} safe",
        unsafe_count,
        back.len() - unsafe_count
    );

    // entropy runs high near the decision boundary, confidence low
    let sample = back.sample(0);
    let entropy = sample.entropy.as_ref().unwrap();
    let confidence = sample.confidence.as_ref().unwrap();
    println!("sample 0, per step (entropy, confidence):");
    for s in 0..sample.steps() {
        println!("  step {s:2}: ({:.3}, {:.3})", entropy[s], confidence[s]);
    }
    Ok(())
}
