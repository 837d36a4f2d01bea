//! The analytic cost model: exact parameter counts and per-sample FLOPs for
//! the whole probe zoo at two deployment shapes, plus the cascade's expected
//! cost as a function of the escape fraction.
//!
//! ```bash
//! cargo run -p d2monitor --example flops_table
//! ```

use d2monitor::probes::{flops_estimate, Arch, ProbeSpec, Readout};

fn main() -> d2monitor::Result<()> {
    let rows = [
        (Arch::Lp, Readout::LastStep),
        (Arch::Lp, Readout::Mean),
        (Arch::Lp, Readout::MajorityVote),
        (Arch::Mlp, Readout::LastStep),
        (Arch::Mlp, Readout::Mean),
        (Arch::Mlp, Readout::MajorityVote),
        (Arch::TimeAttn, Readout::FullSequence),
        (Arch::Lstm, Readout::FullSequence),
    ];
    for (steps, dim) in [(32usize, 4096usize), (128, 2048)] {
        println!("S = {steps}, D = {dim}");
        println!("{:<28} {:>12} {:>12}", "probe", "params", "MFLOPs");
        for (arch, readout) in rows {
            let spec = ProbeSpec::new(arch, dim, readout)?;
            let flops = flops_estimate(&spec, steps, dim, readout)?;
            println!(
                "{:<28} {:>12} {:>12.3}",
                format!("{}({})", arch.name(), readout.name()),
                spec.param_count(),
                flops / 1e6
            );
        }
        println!();
    }

    // cascade cost model: base margins always run, the expert only on the
    // escaped fraction and only over its window
    let (steps, dim, s_win) = (32usize, 4096usize, 12.0);
    let expert = ProbeSpec::new(Arch::Mlp, dim, Readout::Window)?;
    let expert_flops = flops_estimate(&expert, s_win as usize, dim, Readout::Window)?;
    println!("cascade with an mlp expert over a {s_win}-step window (S = {steps}, D = {dim}):");
    for p_esc in [0.0, 0.1, 0.25, 0.5, 1.0] {
        let total = 2.0 * (steps * dim) as f64 + p_esc * expert_flops;
        println!("  escape fraction {p_esc:>4.2}: {:>7.3} MFLOPs", total / 1e6);
    }
    Ok(())
}
