//! The full bi-level monitor, end to end: out-of-fold scoring, threshold
//! selection, base + windowed-expert training, routing-threshold selection
//! on a validation draw, and a test-set comparison against the base probe
//! alone — accuracy, macro-F1, routed fraction, expected parameters, and
//! expected FLOPs.
//!
//! ```bash
//! cargo run --release -p d2monitor --example cascade_pipeline
//! ```

use d2monitor::cascade::{train_cascade, ExpertTraining};
use d2monitor::metrics::{evaluate_cascade, evaluate_probe};
use d2monitor::probes::Arch;
use d2monitor::synth::{generate, SynthConfig};
use d2monitor::train::TrainConfig;

fn main() -> d2monitor::Result<()> {
    let world = SynthConfig::new(5000, 16, 32, 2026);
    let train = generate(&world)?;
    let val = generate(&world.next_split(1000))?;
    let test = generate(&SynthConfig { samples: 1000, sample_offset: 6000, ..world })?;

    let expert = ExpertTraining::Fixed(TrainConfig {
        lr: 1e-3,
        weight_decay: 1e-4,
        dropout: 0.1,
        epochs: 75,
        batch_size: 64,
        ..TrainConfig::default()
    });
    let started = std::time::Instant::now();
    let mut bundle = train_cascade(&train, Arch::Mlp, 5, 0.5, &expert, 2026)?;
    let lambda = bundle.select_lambda(&val)?;
    println!(
        "trained in {:.1}s: tau = {:.4}, lambda = {lambda}, expert saw {} hesitation windows",
        started.elapsed().as_secs_f64(),
        bundle.tau,
        bundle.meta.expert_train_size
    );

    let base = evaluate_probe(&bundle.base, &test)?;
    let (cascade, records) = evaluate_cascade(&bundle, &test)?;
    let routed = records.iter().filter(|r| r.routed).count();

    println!("\n{:<22} {:>9} {:>9}", "", "base LP", "cascade");
    println!("{:<22} {:>9.4} {:>9.4}", "accuracy", base.accuracy, cascade.accuracy);
    println!("{:<22} {:>9.4} {:>9.4}", "macro-F1", base.f1_macro, cascade.f1_macro);
    println!("{:<22} {:>9.4} {:>9.4}", "F2 (unsafe)", base.f2_pos, cascade.f2_pos);
    println!("{:<22} {:>9.4} {:>9.4}", "false rejection", base.frr, cascade.frr);
    println!(
        "{:<22} {:>9.0} {:>9.0}",
        "expected params", base.expected_params, cascade.expected_params
    );
    println!(
        "{:<22} {:>9.3} {:>9.3}",
        "expected MFLOPs", base.expected_mflops, cascade.expected_mflops
    );
    println!(
        "\nrouted {} of {} test samples ({:.1}%); the expert only ever sees hesitation windows",
        routed,
        records.len(),
        100.0 * cascade.routed_fraction.unwrap()
    );
    Ok(())
}
