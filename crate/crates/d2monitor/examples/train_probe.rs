//! Train a single probe end to end: fit normalization, optimize, evaluate on
//! a fresh draw, and save/reload the probe file.
//!
//! ```bash
//! cargo run -p d2monitor --example train_probe
//! ```

use d2monitor::metrics::evaluate_probe;
use d2monitor::normalize::NormStats;
use d2monitor::probes::{Arch, Probe, ProbeSpec, Readout};
use d2monitor::synth::{generate, SynthConfig};
use d2monitor::train::{train_probe, TrainConfig};

fn main() -> d2monitor::Result<()> {
    let world = SynthConfig::new(2000, 16, 32, 7);
    let train = generate(&world)?;
    let test = generate(&world.next_split(500))?;

    let spec = ProbeSpec::new(Arch::Mlp, train.dim(), Readout::Mean)?;
    let stats = NormStats::fit(&train, spec.norm_mode())?;
    let normed = stats.apply_dataset(&train)?;
    let cfg = TrainConfig {
        lr: 1e-3,
        weight_decay: 1e-4,
        dropout: 0.1,
        epochs: 100,
        batch_size: 64,
        seed: 1,
        ..TrainConfig::default()
    };
    let (probe, history) = train_probe(&normed, &spec, &cfg, &stats)?;
    println!(
        "trained mlp(mean): {} parameters, loss {:.4} -> {:.4} over {} epochs",
        probe.spec.param_count(),
        history.first().unwrap(),
        history.last().unwrap(),
        history.len()
    );

    let report = evaluate_probe(&probe, &test)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());

    let dir = std::env::temp_dir().join("d2m_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("mlp.d2p");
    probe.write(&path)?;
    let reloaded = Probe::read(&path)?;
    let again = evaluate_probe(&reloaded, &test)?;
    println!(
        "reloaded probe agrees: macro-F1 {:.4} vs {:.4}",
        again.f1_macro, report.f1_macro
    );
    Ok(())
}
