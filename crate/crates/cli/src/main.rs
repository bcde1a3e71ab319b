//! `moe`: train mixture-of-experts models and run the experiment presets.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use moe_core::harness::{
    bench_caching, compare_loss, compare_loss_csv, epochs_csv, run_train, sweep_capacity, sweep_csv, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "moe", version, about = "Mixture-of-experts training with dynamic recompilation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `runtime.workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train once; writes the metrics CSV, the task trace and the config echo.
    Train,
    /// Static capacity factors against the dynamic capacity policy.
    SweepCapacity,
    /// Adaptive assignment caching against caching off.
    BenchCaching,
    /// Cooperation vs specification loss, learned vs fixed routing, three seeds.
    CompareLoss,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("invalid config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = common.workers {
        cfg.runtime.workers = Some(workers);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(out, &cfg.output.config_echo, &cfg.to_json())?;
    match cli.command {
        Command::Train => {
            let o = run_train(&cfg)?;
            write(out, &cfg.output.csv, &o.csv())?;
            write(out, &cfg.output.trace, &o.trace.to_tsv())?;
            write(out, "epochs.csv", &epochs_csv(&o.epochs()))?;
            println!(
                "iterations={} final_accuracy={:.4} drop_rate={:.4} mean_capacity={:.2} recompiles={}",
                o.records.len(),
                o.final_accuracy(),
                o.drop_rate(),
                o.mean_capacity(),
                o.recompiles.len()
            );
        }
        Command::SweepCapacity => {
            let rows = sweep_capacity(&cfg)?;
            let csv = sweep_csv(&rows);
            write(out, "sweep_capacity.csv", &csv)?;
            print!("{csv}");
        }
        Command::BenchCaching => {
            let b = bench_caching(&cfg)?;
            write(out, "bench_caching.csv", &b.csv())?;
            write(out, &cfg.output.csv, &b.adaptive.csv())?;
            write(out, &cfg.output.trace, &b.adaptive.trace.to_tsv())?;
            print!("{}", b.csv());
            for (epoch, on) in b.transitions() {
                println!("caching {} at epoch {epoch}", if on { "on" } else { "off" });
            }
            println!(
                "forward makespan off={:.4}ms on={:.4}ms ratio={:.4}",
                b.forward_makespan_off,
                b.forward_makespan_on,
                b.forward_makespan_off / b.forward_makespan_on
            );
        }
        Command::CompareLoss => {
            let seeds = [cfg.seed, cfg.seed + 1, cfg.seed + 2];
            let arms = compare_loss(&cfg, &seeds)?;
            let csv = compare_loss_csv(&arms);
            write(out, "compare_loss.csv", &csv)?;
            for a in &arms {
                println!(
                    "seed={} loss={:?} routing={:?} final_accuracy={:.4}",
                    a.seed,
                    a.mode,
                    a.routing,
                    a.final_accuracy()
                );
            }
        }
    }
    Ok(())
}
