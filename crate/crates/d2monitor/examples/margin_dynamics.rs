//! Margin dynamics: how likely is a step to cross the decision boundary at
//! the next step, and how long does a hesitant state persist?
//!
//! ```bash
//! cargo run -p d2monitor --example margin_dynamics
//! ```

use d2monitor::hesitation::{
    crossing_probability, default_bin_edges, oof_margins, persistence_curve, select_tau,
};
use d2monitor::synth::{generate, SynthConfig};

fn main() -> d2monitor::Result<()> {
    let ds = generate(&SynthConfig::new(1000, 16, 32, 11))?;
    let oof = oof_margins(&ds, 5, 11)?;
    let tau = select_tau(&oof, 0.5)?;

    let edges = default_bin_edges(&oof.margins, 12);
    let bins = crossing_probability(&oof.margins, &edges)?;
    println!("crossing probability by margin magnitude (tau = {tau:.3}):");
    println!("{:>16} {:>8} {:>8}", "|d| bin", "pairs", "P(flip)");
    for b in &bins {
        println!(
            "[{:6.3}, {:6.3}) {:>8} {:>8.3} {}",
            b.lo,
            b.hi,
            b.total,
            b.probability(),
            "*".repeat((b.probability() * 40.0) as usize)
        );
    }

    let curve = persistence_curve(&oof.margins, tau, 8)?;
    println!("\nmargin persistence P(|d(s+k)| < tau | |d(s)| < tau):");
    println!("  baseline hesitant fraction: {:.3}", curve.baseline);
    for (k, p) in curve.probs.iter().enumerate() {
        println!(
            "  k = {:2}: {:.3} over {:6} pairs {}",
            k + 1,
            p,
            curve.pairs[k],
            "*".repeat((p * 40.0) as usize)
        );
    }
    println!("\nsteps near the boundary flip often and stay hesitant; far steps are stable");
    Ok(())
}
