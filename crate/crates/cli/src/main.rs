//! `dfn`: generate pools, train and apply data filtering networks, and run the
//! canned experiment sweeps.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dfn_core::experiments::pipeline::{self, Layout};
use dfn_core::experiments::plot::{svg_chart, Series, Style};
use dfn_core::experiments::{self as exp, append_csv, write_file, write_json, ExperimentConfig, TableRow};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "dfn", version, about = "Data filtering networks at desk scale")]
struct Cli {
    /// Experiment config (flat TOML key = value); missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for scoring and filtering [default: available cores].
    #[arg(long, global = true, env = "DFN_WORKERS")]
    workers: Option<usize>,
    /// Experiment directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct SelectArgs {
    /// Keep the top fraction of the pool by score.
    #[arg(long, conflicts_with = "threshold")]
    keep_fraction: Option<f64>,
    /// Keep records scoring strictly above this value.
    #[arg(long)]
    threshold: Option<f32>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the DFN filter-training pool and the raw pool as shards.
    Gen,
    /// Train the DFN on the filter-training pool.
    TrainDfn,
    /// Score the raw pool and report the keep-fraction threshold.
    Calibrate {
        #[arg(long)]
        keep_fraction: Option<f64>,
    },
    /// Apply the DFN to the raw pool.
    Filter(SelectArgs),
    /// Train the induced model on the filtered pool.
    Induce,
    /// Evaluate the DFN and induced checkpoints.
    Eval,
    /// Experiment sweeps.
    #[command(subcommand)]
    Exp(Exp),
    /// Throughput benchmarks.
    #[command(subcommand)]
    Bench(Bench),
    /// Every pipeline stage in order.
    RunAll(SelectArgs),
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Exp {
    /// Induced quality as the DFN's filter-training pool is diluted.
    PoisonSweep,
    /// DFN accuracy against filtering performance over a training grid.
    FilterVsDownstream,
    /// Augmentation, scale, fine-tuning and checkpoint-init ablations.
    Interventions,
    /// Fine-tuned DFN against appending target data, plus weight interpolation.
    Robustness,
    /// No filter, binary classifiers and a CLIP DFN side by side.
    FilterTypes,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Bench {
    /// apply_dfn wall time over pool sizes and worker counts.
    Scaling,
}

impl Command {
    fn slug(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::TrainDfn => "train-dfn",
            Command::Calibrate { .. } => "calibrate",
            Command::Filter(_) => "filter",
            Command::Induce => "induce",
            Command::Eval => "eval",
            Command::Exp(Exp::PoisonSweep) => "poison-sweep",
            Command::Exp(Exp::FilterVsDownstream) => "filter-vs-downstream",
            Command::Exp(Exp::Interventions) => "interventions",
            Command::Exp(Exp::Robustness) => "robustness",
            Command::Exp(Exp::FilterTypes) => "filter-types",
            Command::Bench(Bench::Scaling) => "bench-scaling",
            Command::RunAll(_) => "run-all",
        }
    }
}

/// Exclusive ownership of an experiment directory for one process.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".dfn.lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).with_context(|| {
            format!(
                "{} is locked by another run (delete {} if that run is gone)",
                dir.display(),
                path.display()
            )
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn apply_select(cfg: &mut ExperimentConfig, s: SelectArgs) {
    if let Some(f) = s.keep_fraction {
        cfg.keep_fraction = f;
        cfg.threshold = None;
    }
    if s.threshold.is_some() {
        cfg.threshold = s.threshold;
    }
}

fn emit<R: TableRow + Serialize>(out: &Path, name: &str, rows: &[R]) -> Result<()> {
    append_csv(&out.join(format!("{name}.csv")), rows)?;
    write_json(&out.join(format!("{name}.json")), rows)?;
    Ok(())
}

fn by_seed<R>(rows: &[R], seed: impl Fn(&R) -> u64, point: impl Fn(&R) -> (f64, f64)) -> Vec<Series> {
    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        let label = format!("seed {}", seed(r));
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push(point(r)),
            None => series.push(Series {
                label,
                points: vec![point(r)],
            }),
        }
    }
    series
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    match &cli.command {
        Command::Calibrate {
            keep_fraction: Some(f),
        } => cfg.keep_fraction = *f,
        Command::Filter(s) | Command::RunAll(s) => apply_select(&mut cfg, *s),
        _ => {}
    }
    cfg.validate()?;
    let workers = match cli.workers {
        Some(0) => bail!("--workers must be >= 1"),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let seed = cfg.seeds[0];
    let out = cli.out.as_path();
    let _lock = DirLock::acquire(out)?;
    let snapshot = toml::to_string(&cfg)?;
    write_file(&out.join(format!("config.{}.toml", cli.command.slug())), snapshot.as_bytes())?;
    let layout = Layout::new(out);

    match cli.command {
        Command::Gen => {
            let (f, r) = pipeline::generate(&cfg, seed, &layout)?;
            eprintln!(
                "wrote {} filter-training and {} raw records",
                f.total_records(),
                r.total_records()
            );
        }
        Command::TrainDfn => {
            pipeline::train_dfn(&cfg, seed, &layout)?;
            eprintln!("wrote {}", layout.dfn_checkpoint().display());
        }
        Command::Calibrate { .. } => {
            let r = pipeline::calibrate(&cfg, seed, &layout, cfg.keep_fraction, workers)?;
            println!("{}", r.threshold);
        }
        Command::Filter(_) => {
            let r = pipeline::filter(&cfg, seed, &layout, cfg.selection()?, workers)?;
            eprintln!("kept {} of {} (threshold {})", r.kept_count, r.input_count, r.threshold);
        }
        Command::Induce => {
            pipeline::induce(&cfg, seed, &layout)?;
            eprintln!("wrote {}", layout.induced_checkpoint().display());
        }
        Command::Eval => print_report(&pipeline::eval(&cfg, seed, &layout)?),
        Command::RunAll(_) => print_report(&pipeline::run_all(&cfg, seed, out, workers)?),
        Command::Exp(Exp::PoisonSweep) => {
            let rows = exp::poison_sweep(&cfg, workers)?;
            emit(out, "poison_sweep", &rows)?;
            let series = by_seed(&rows, |r| r.seed, |r| (r.unfiltered_fraction, r.induced_id_accuracy));
            let svg = svg_chart(
                "Induced accuracy vs DFN training pool dilution",
                "unfiltered fraction of DFN training pool",
                "induced id accuracy",
                &series,
                Style::Lines,
            );
            write_file(&out.join("poison_sweep.svg"), svg.as_bytes())?;
        }
        Command::Exp(Exp::FilterVsDownstream) => {
            let rows = exp::filter_vs_downstream(&cfg, workers)?;
            emit(out, "filter_vs_downstream", &rows)?;
            let series = by_seed(&rows, |r| r.seed, |r| (r.dfn_id_accuracy, r.induced_id_accuracy));
            let svg = svg_chart(
                "DFN accuracy vs filtering performance",
                "DFN id accuracy",
                "induced id accuracy",
                &series,
                Style::Points,
            );
            write_file(&out.join("filter_vs_downstream.svg"), svg.as_bytes())?;
            eprintln!("{} inverted pairs", exp::inverted_pairs(&rows).len());
        }
        Command::Exp(Exp::Interventions) => emit(out, "interventions", &exp::interventions(&cfg, workers)?)?,
        Command::Exp(Exp::FilterTypes) => emit(out, "filter_types", &exp::filter_types(&cfg, workers)?)?,
        Command::Exp(Exp::Robustness) => {
            let r = exp::robustness(&cfg, workers)?;
            append_csv(&out.join("robustness.csv"), &r.arms)?;
            append_csv(&out.join("interpolation.csv"), &r.interpolation)?;
            write_json(&out.join("robustness.json"), &r)?;
        }
        Command::Bench(Bench::Scaling) => {
            let work = out.join("bench_work");
            let rows = exp::bench_scaling(&cfg, &work)?;
            let _ = fs::remove_dir(&work);
            append_csv(&out.join("bench_scaling.csv"), &rows)?;
            write_json(&out.join("bench_scaling.json"), &rows)?;
            for r in &rows {
                eprintln!(
                    "{:>9} records  {} workers  {:>8.3} s  {:>10.0} rec/s",
                    r.records, r.workers, r.seconds, r.records_per_sec
                );
            }
        }
    }
    Ok(())
}

fn print_report(r: &pipeline::PipelineReport) {
    println!(
        "dfn: id {:.4} avg {:.4} | induced: id {:.4} avg {:.4}",
        r.dfn.id_accuracy, r.dfn.average, r.induced.id_accuracy, r.induced.average
    );
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
