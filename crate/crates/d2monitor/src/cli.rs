//! Command-line surface. The `d2m` binary is a thin wrapper over
//! [`dispatch`]; every artifact-producing subcommand writes a
//! [`RunManifest`] file next to its artifact.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::cascade::{self, CascadeBundle, ExpertTraining};
use crate::error::{D2Error, Result};
use crate::hesitation;
use crate::manifest::RunManifest;
use crate::metrics;
use crate::normalize::NormStats;
use crate::probes::{flops_estimate, forward, Arch, Probe, ProbeInput, ProbeSpec, Readout};
use crate::synth::{self, SynthConfig};
use crate::train::{grid_search, train_probe, GridSpace, TrainConfig};
use crate::trajectory::Dataset;

#[derive(Parser)]
#[command(
    name = "d2m",
    about = "Bi-level safety monitoring over multi-step denoising trajectories",
    version
)]
struct Cli {
    /// Sample-level parallelism; falls back to the D2M_THREADS env var,
    /// then to all cores. Outputs are identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ArchArg {
    Lp,
    Mlp,
    TimeAttn,
    Lstm,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Arch {
        match a {
            ArchArg::Lp => Arch::Lp,
            ArchArg::Mlp => Arch::Mlp,
            ArchArg::TimeAttn => Arch::TimeAttn,
            ArchArg::Lstm => Arch::Lstm,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReadoutArg {
    LastStep,
    Mean,
    Mv,
    FullSeq,
    Window,
}

impl From<ReadoutArg> for Readout {
    fn from(r: ReadoutArg) -> Readout {
        match r {
            ReadoutArg::LastStep => Readout::LastStep,
            ReadoutArg::Mean => Readout::Mean,
            ReadoutArg::Mv => Readout::MajorityVote,
            ReadoutArg::FullSeq => Readout::FullSequence,
            ReadoutArg::Window => Readout::Window,
        }
    }
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

impl TrainFlags {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trajectory dataset. The seed fixes the world;
    /// disjoint --offset ranges draw disjoint train/val/test splits from it.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0.4)]
        hard_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// First sample-stream index of this draw.
        #[arg(long, default_value_t = 0)]
        offset: usize,
    },
    /// Train a probe on a labeled dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        probe: ArchArg,
        #[arg(long, value_enum)]
        readout: ReadoutArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid-search hyperparameters on a held-out split instead of using
        /// the explicit flags.
        #[arg(long)]
        grid: bool,
        /// Training fraction of the grid-search split.
        #[arg(long, default_value_t = 0.8)]
        split_ratio: f64,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Out-of-fold margins for a labeled dataset, exported as CSV.
    Oof {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a cascade bundle (base probe, expert probe, tau).
    CascadeTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        expert: ArchArg,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0.5)]
        target_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Grid-search the expert instead of the explicit flags.
        #[arg(long)]
        grid: bool,
        #[arg(long, default_value_t = 0.8)]
        split_ratio: f64,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Pick the routing threshold lambda on a validation set and update the
    /// bundle.
    SelectLambda {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        val: PathBuf,
    },
    /// Evaluate a probe or bundle; writes a report JSON and, for bundles,
    /// per-sample route records.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "bundle")]
        probe: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        records: Option<PathBuf>,
        /// Re-select tau and lambda on this labeled validation set before
        /// evaluating (cross-dataset transfer).
        #[arg(long)]
        retune_val: Option<PathBuf>,
        /// Hesitant-ratio candidates for tau during retuning.
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.4,0.5,0.6,0.7")]
        retune_ratios: Vec<f64>,
    },
    /// Margin-dynamics statistics (crossing probability, persistence) from a
    /// margins CSV.
    Analyze {
        #[arg(long)]
        margins: PathBuf,
        /// Hesitation threshold; derived from --target-ratio when omitted.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        target_ratio: f64,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 8)]
        max_lag: usize,
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Analytic parameter and FLOPs table for the probe zoo.
    Flops {
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, default_value_t = 4096)]
        dim: usize,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Post-hoc inference timing over a dataset. Single-step and
    /// majority-vote probes are timed on the last step only (earlier steps
    /// amortize into generation); mean readouts include pooling; sequence
    /// probes process the full trajectory; cascades time the last-step base
    /// margin plus the conditional expert.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "bundle")]
        probe: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        repeat: usize,
    },
}

/// Parse and run. Returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_threads(cli.threads);
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn init_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("D2M_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        // a second init in the same process is a no-op
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, samples, steps, dim, hard_fraction, seed, offset } => {
            let started = Instant::now();
            let cfg = SynthConfig {
                samples,
                steps,
                dim,
                hard_fraction,
                seed,
                sample_offset: offset,
                ..SynthConfig::default()
            };
            let ds = synth::generate(&cfg)?;
            ds.write(&out)?;
            let mut manifest =
                RunManifest::new("synth", serde_json::to_value(&cfg)?, vec![seed]);
            manifest.add_output(&out)?;
            manifest.record_ms("total", started);
            manifest.write_alongside(&out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Train { data, probe, readout, out, seed, grid, split_ratio, train } => {
            let started = Instant::now();
            let ds = Dataset::read(&data)?;
            let spec = ProbeSpec::new(probe.into(), ds.dim(), readout.into())?;
            let mut config = json!({
                "data": data.display().to_string(),
                "arch": spec.arch.name(),
                "readout": spec.readout.name(),
                "grid": grid,
            });
            let trained = if grid {
                let space = GridSpace::for_arch(spec.arch);
                let outcome = grid_search(&ds, &spec, &space, split_ratio, seed)?;
                config["grid_points"] = serde_json::to_value(&outcome.points)?;
                config["selected"] = serde_json::to_value(&outcome.best)?;
                outcome.probe
            } else {
                let cfg = train.config(seed);
                config["train"] = serde_json::to_value(&cfg)?;
                let stats = NormStats::fit(&ds, spec.norm_mode())?;
                let normed = stats.apply_dataset(&ds)?;
                let (probe, _) = train_probe(&normed, &spec, &cfg, &stats)?;
                probe
            };
            trained.write(&out)?;
            let mut manifest = RunManifest::new("train", config, vec![seed]);
            manifest.add_input(&data)?;
            manifest.add_output(&out)?;
            manifest.record_ms("total", started);
            manifest.write_alongside(&out)?;
            println!("wrote probe to {}", out.display());
            Ok(())
        }
        Command::Oof { data, folds, seed, out } => {
            let started = Instant::now();
            let ds = Dataset::read(&data)?;
            let oof = hesitation::oof_margins(&ds, folds, seed)?;
            oof.write_csv(&out)?;
            let config = json!({
                "data": data.display().to_string(),
                "folds": folds,
            });
            let mut manifest = RunManifest::new("oof", config, vec![seed]);
            manifest.add_input(&data)?;
            manifest.add_output(&out)?;
            manifest.record_ms("total", started);
            manifest.write_alongside(&out)?;
            println!("wrote out-of-fold margins to {}", out.display());
            Ok(())
        }
        Command::CascadeTrain {
            data,
            expert,
            folds,
            target_ratio,
            seed,
            out,
            grid,
            split_ratio,
            train,
        } => {
            let started = Instant::now();
            let ds = Dataset::read(&data)?;
            let expert_training = if grid {
                ExpertTraining::Grid(GridSpace::for_arch(expert.into()), split_ratio)
            } else {
                // sensible fixed default for the expert when no grid is asked
                let mut cfg = train.config(seed);
                if cfg.weight_decay == 0.0 {
                    cfg.weight_decay = 1e-4;
                }
                ExpertTraining::Fixed(cfg)
            };
            let bundle = cascade::train_cascade(
                &ds,
                expert.into(),
                folds,
                target_ratio,
                &expert_training,
                seed,
            )?;
            bundle.write_dir(&out)?;
            let config = json!({
                "data": data.display().to_string(),
                "expert": bundle.expert.spec.arch.name(),
                "folds": folds,
                "target_ratio": target_ratio,
                "grid": grid,
                "tau": bundle.tau,
                "expert_train_size": bundle.meta.expert_train_size,
                "expert_cfg": serde_json::to_value(&bundle.meta.expert_cfg)?,
            });
            let mut manifest = RunManifest::new("cascade-train", config, vec![seed]);
            manifest.add_input(&data)?;
            manifest.add_output(out.join("base.d2p"))?;
            manifest.add_output(out.join("expert.d2p"))?;
            manifest.add_output(out.join("cascade.json"))?;
            manifest.record_ms("total", started);
            manifest.write_into_dir(&out)?;
            println!(
                "trained cascade (tau = {:.6}, expert windows = {}) into {}",
                bundle.tau,
                bundle.meta.expert_train_size,
                out.display()
            );
            Ok(())
        }
        Command::SelectLambda { bundle, val } => {
            let started = Instant::now();
            let mut b = CascadeBundle::read_dir(&bundle)?;
            let ds = Dataset::read(&val)?;
            let lambda = b.select_lambda(&ds)?;
            b.write_dir(&bundle)?;
            let config = json!({
                "bundle": bundle.display().to_string(),
                "val": val.display().to_string(),
                "lambda": lambda,
            });
            let mut manifest =
                RunManifest::new("select-lambda", config, vec![b.meta.seeds.root]);
            manifest.add_input(&val)?;
            manifest.add_output(bundle.join("cascade.json"))?;
            manifest.record_ms("total", started);
            manifest.write_alongside(bundle.join("cascade.json"))?;
            println!("selected lambda = {lambda}");
            Ok(())
        }
        Command::Eval { data, probe, bundle, report, records, retune_val, retune_ratios } => {
            let started = Instant::now();
            let ds = Dataset::read(&data)?;
            let mut config = json!({ "data": data.display().to_string() });
            let mut inputs = vec![data.clone()];
            let (rep, route_records) = match (&probe, &bundle) {
                (Some(p), None) => {
                    let probe = Probe::read(p)?;
                    inputs.push(p.clone());
                    config["probe"] = json!(p.display().to_string());
                    (metrics::evaluate_probe(&probe, &ds)?, None)
                }
                (None, Some(b)) => {
                    let mut bundle = CascadeBundle::read_dir(b)?;
                    inputs.push(b.join("cascade.json"));
                    config["bundle"] = json!(b.display().to_string());
                    if let Some(val_path) = &retune_val {
                        let val = Dataset::read(val_path)?;
                        let (tau, lambda) = bundle.retune(&val, &retune_ratios)?;
                        bundle.tau = tau;
                        bundle.lambda = Some(lambda);
                        config["retuned_tau"] = json!(tau);
                        config["retuned_lambda"] = json!(lambda);
                        inputs.push(val_path.clone());
                    }
                    let (rep, recs) = metrics::evaluate_cascade(&bundle, &ds)?;
                    (rep, Some(recs))
                }
                _ => {
                    return Err(D2Error::Invalid(
                        "eval needs exactly one of --probe or --bundle".into(),
                    ))
                }
            };
            std::fs::write(&report, serde_json::to_vec_pretty(&rep)?)?;
            if let (Some(path), Some(recs)) = (&records, &route_records) {
                cascade::write_route_records_csv(recs, path)?;
            }
            let mut manifest = RunManifest::new("eval", config, vec![]);
            for input in inputs {
                manifest.add_input(input)?;
            }
            manifest.add_output(&report)?;
            if let (Some(path), Some(_)) = (&records, &route_records) {
                manifest.add_output(path)?;
            }
            manifest.record_ms("total", started);
            manifest.write_alongside(&report)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
            Ok(())
        }
        Command::Analyze { margins, tau, target_ratio, bins, max_lag, out_prefix } => {
            let started = Instant::now();
            let sequences = hesitation::read_margins_csv(&margins)?;
            let tau = match tau {
                Some(t) => t,
                None => {
                    let oof = hesitation::OofMargins {
                        margins: sequences.clone(),
                        fold: vec![0; sequences.len()],
                        k: 0,
                    };
                    hesitation::select_tau(&oof, target_ratio)?
                }
            };
            let edges = hesitation::default_bin_edges(&sequences, bins);
            let crossing = hesitation::crossing_probability(&sequences, &edges)?;
            let persistence = hesitation::persistence_curve(&sequences, tau, max_lag)?;

            let crossing_path = with_suffix(&out_prefix, "crossing.csv");
            let mut w = csv::Writer::from_path(&crossing_path)?;
            w.write_record(["bin_lo", "bin_hi", "count", "flips", "p_flip"])?;
            for b in &crossing {
                w.write_record(&[
                    b.lo.to_string(),
                    b.hi.to_string(),
                    b.total.to_string(),
                    b.flips.to_string(),
                    b.probability().to_string(),
                ])?;
            }
            w.flush()?;

            let persistence_path = with_suffix(&out_prefix, "persistence.csv");
            let mut w = csv::Writer::from_path(&persistence_path)?;
            w.write_record(["k", "pairs", "p_persist", "baseline"])?;
            for (i, p) in persistence.probs.iter().enumerate() {
                w.write_record(&[
                    (i + 1).to_string(),
                    persistence.pairs[i].to_string(),
                    p.to_string(),
                    persistence.baseline.to_string(),
                ])?;
            }
            w.flush()?;

            let config = json!({
                "margins": margins.display().to_string(),
                "tau": tau,
                "bins": bins,
                "max_lag": max_lag,
            });
            let mut manifest = RunManifest::new("analyze", config, vec![]);
            manifest.add_input(&margins)?;
            manifest.add_output(&crossing_path)?;
            manifest.add_output(&persistence_path)?;
            manifest.record_ms("total", started);
            manifest.write_alongside(&crossing_path)?;
            println!(
                "wrote {} and {}",
                crossing_path.display(),
                persistence_path.display()
            );
            Ok(())
        }
        Command::Flops { steps, dim, out } => {
            let mut rows = Vec::new();
            let pooled = [
                (Arch::Lp, Readout::LastStep),
                (Arch::Lp, Readout::Mean),
                (Arch::Lp, Readout::MajorityVote),
                (Arch::Mlp, Readout::LastStep),
                (Arch::Mlp, Readout::Mean),
                (Arch::Mlp, Readout::MajorityVote),
                (Arch::TimeAttn, Readout::FullSequence),
                (Arch::Lstm, Readout::FullSequence),
            ];
            for (arch, readout) in pooled {
                let spec = ProbeSpec::new(arch, dim, readout)?;
                let flops = flops_estimate(&spec, steps, dim, readout)?;
                rows.push(format!(
                    "{},{},{},{:.6}",
                    arch.name(),
                    readout.name(),
                    spec.param_count(),
                    flops / 1e6
                ));
            }
            let mut table = String::from("arch,readout,params,mflops\n");
            for r in rows {
                table.push_str(&r);
                table.push('\n');
            }
            match out {
                Some(path) => {
                    std::fs::write(&path, &table)?;
                    let config = json!({ "steps": steps, "dim": dim });
                    let mut manifest = RunManifest::new("flops", config, vec![]);
                    manifest.add_output(&path)?;
                    manifest.write_alongside(&path)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{table}"),
            }
            Ok(())
        }
        Command::Bench { data, probe, bundle, repeat } => {
            let ds = Dataset::read(&data)?;
            let result = match (&probe, &bundle) {
                (Some(p), None) => bench_probe(&Probe::read(p)?, &ds, repeat)?,
                (None, Some(b)) => bench_bundle(&CascadeBundle::read_dir(b)?, &ds, repeat)?,
                _ => {
                    return Err(D2Error::Invalid(
                        "bench needs exactly one of --probe or --bundle".into(),
                    ))
                }
            };
            println!("{}", serde_json::to_string_pretty(&result)?);
            Ok(())
        }
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if !name.is_empty() {
        name.push('.');
    }
    name.push_str(suffix);
    prefix.with_file_name(name)
}

#[derive(serde::Serialize)]
struct BenchResult {
    what: String,
    samples: usize,
    repeats: usize,
    /// Total milliseconds over the dataset, best of `repeats`.
    best_ms: f64,
    mean_ms: f64,
}

fn time_over<F: FnMut() -> Result<()>>(repeat: usize, mut body: F) -> Result<(f64, f64)> {
    body()?; // warmup
    let mut times = Vec::with_capacity(repeat);
    for _ in 0..repeat.max(1) {
        let t = Instant::now();
        body()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let best = times.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    Ok((best, mean))
}

/// Timing conventions: last-step and majority-vote probes process only the
/// final step post hoc (earlier steps run online during generation); mean
/// readouts pay for pooling; sequence probes consume the full trajectory.
fn bench_probe(probe: &Probe, ds: &Dataset, repeat: usize) -> Result<BenchResult> {
    let spec = &probe.spec;
    let (best_ms, mean_ms) = match spec.readout {
        Readout::LastStep | Readout::MajorityVote => time_over(repeat, || {
            for t in ds.samples() {
                let x = probe.stats.apply_step(t.steps() - 1, t.last_step())?;
                let logit = forward(spec, &probe.weights, &ProbeInput::Pooled(x), false, 0)?;
                std::hint::black_box(logit);
            }
            Ok(())
        })?,
        _ => time_over(repeat, || {
            for t in ds.samples() {
                std::hint::black_box(probe.predict(t)?.label);
            }
            Ok(())
        })?,
    };
    Ok(BenchResult {
        what: format!("{}-{}", spec.arch.name(), spec.readout.name()),
        samples: ds.len(),
        repeats: repeat,
        best_ms,
        mean_ms,
    })
}

fn bench_bundle(bundle: &CascadeBundle, ds: &Dataset, repeat: usize) -> Result<BenchResult> {
    // routing decisions are made from margins that accrue online during
    // generation; compute them outside the timed region
    let windows: Vec<Option<(usize, usize)>> = bundle
        .classify_all(ds)?
        .into_iter()
        .map(|r| if r.routed { r.window } else { None })
        .collect();
    let (best_ms, mean_ms) = time_over(repeat, || {
        for (t, window) in ds.samples().iter().zip(&windows) {
            let x = bundle.base.stats.apply_step(t.steps() - 1, t.last_step())?;
            let margin = forward(
                &bundle.base.spec,
                &bundle.base.weights,
                &ProbeInput::Pooled(x),
                false,
                0,
            )?;
            std::hint::black_box(margin);
            if let Some((lo, hi)) = window {
                let label = bundle.expert.predict(&t.slice_window(*lo, *hi)?)?.label;
                std::hint::black_box(label);
            }
        }
        Ok(())
    })?;
    Ok(BenchResult {
        what: format!("cascade-{}", bundle.expert.spec.arch.name()),
        samples: ds.len(),
        repeats: repeat,
        best_ms,
        mean_ms,
    })
}
