//! Hyperparameter grid search on a held-out split, with the default
//! per-architecture search spaces.
//!
//! ```bash
//! cargo run -p d2monitor --example grid_search
//! ```

use d2monitor::probes::{Arch, ProbeSpec, Readout};
use d2monitor::synth::{generate, SynthConfig};
use d2monitor::train::{grid_search, GridSpace};

fn main() -> d2monitor::Result<()> {
    let ds = generate(&SynthConfig::new(800, 8, 16, 3))?;
    let spec = ProbeSpec::new(Arch::Lp, ds.dim(), Readout::Mean)?;
    let grid = GridSpace::for_arch(Arch::Lp);
    println!(
        "searching {} points (lr x weight_decay = {} x {})",
        grid.lr.len() * grid.weight_decay.len() * grid.dropout.len(),
        grid.lr.len(),
        grid.weight_decay.len()
    );

    let outcome = grid_search(&ds, &spec, &grid, 0.8, 17)?;
    println!("{:>10} {:>12} {:>9} {:>9}", "lr", "decay", "dropout", "val F1");
    for p in &outcome.points {
        match p.val_f1 {
            Some(f1) => println!(
                "{:>10.0e} {:>12.0e} {:>9.1} {:>9.4}",
                p.lr, p.weight_decay, p.dropout, f1
            ),
            None => println!(
                "{:>10.0e} {:>12.0e} {:>9.1} {:>9}",
                p.lr, p.weight_decay, p.dropout, "diverged"
            ),
        }
    }
    println!(
        "winner: lr {:.0e}, weight decay {:.0e} (retrained on the full set)",
        outcome.best.lr, outcome.best.weight_decay
    );
    Ok(())
}
