//! The on-disk pipeline: generate, train the DFN, calibrate, filter, train
//! the induced model, evaluate. Each stage reads the previous stage's files
//! from one experiment directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::table::write_json;
use crate::clip::{save_log_csv, train_clip, TwoTowerModel};
use crate::data::{generate_from_world, mix_pools, write_shards, Perturbation, ShardSet, World};
use crate::error::{Error, Result};
use crate::eval::{build_suite, evaluate, EvalReport};
use crate::filter::{apply_dfn, check_keep_fraction, Calibrator, Dfn, FilterReport, Scorer, Selection};

/// File names inside an experiment directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn filter_pool(&self) -> PathBuf {
        self.root.join("filter_pool")
    }

    pub fn raw_pool(&self) -> PathBuf {
        self.root.join("raw_pool")
    }

    pub fn dfn_checkpoint(&self) -> PathBuf {
        self.root.join("dfn.ckpt")
    }

    pub fn dfn_log(&self) -> PathBuf {
        self.root.join("dfn_train_log.csv")
    }

    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration.json")
    }

    pub fn induced_pool(&self) -> PathBuf {
        self.root.join("induced_pool")
    }

    pub fn filter_report(&self) -> PathBuf {
        self.root.join("filter_report.json")
    }

    pub fn induced_checkpoint(&self) -> PathBuf {
        self.root.join("induced.ckpt")
    }

    pub fn induced_log(&self) -> PathBuf {
        self.root.join("induced_train_log.csv")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval_report.json")
    }
}

fn world(cfg: &ExperimentConfig, seed: u64) -> Result<World> {
    World::new(&cfg.world_spec(seed))
}

/// Writes the DFN filter-training pool and the raw candidate pool as shards.
pub fn generate(cfg: &ExperimentConfig, seed: u64, layout: &Layout) -> Result<(ShardSet, ShardSet)> {
    cfg.validate()?;
    let w = world(cfg, seed)?;
    let hq = generate_from_world(&w, &cfg.world_spec(seed), cfg.filter_pool_size, Perturbation::None)?;
    let noisy = generate_from_world(&w, &cfg.noisy_filter_spec(seed), cfg.filter_pool_size, Perturbation::None)?;
    let filter = mix_pools(&hq, &noisy, cfg.unfiltered_fraction, cfg.filter_pool_size, cfg.mix_seed(seed))?;
    let filter = write_shards(&filter, &layout.filter_pool(), cfg.records_per_shard)?;
    let raw = generate_from_world(&w, &cfg.raw_spec(seed), cfg.raw_pool_size, Perturbation::None)?;
    let raw = write_shards(&raw, &layout.raw_pool(), cfg.records_per_shard)?;
    Ok((filter, raw))
}

/// Trains the DFN on the filter-training shards.
pub fn train_dfn(cfg: &ExperimentConfig, seed: u64, layout: &Layout) -> Result<TwoTowerModel> {
    let pool = ShardSet::open(layout.filter_pool())?.load()?;
    let out = train_clip(&pool, &cfg.dfn_train_config(seed))?;
    out.model.save(&layout.dfn_checkpoint())?;
    save_log_csv(&out.log, &layout.dfn_log())?;
    Ok(out.model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub keep_fraction: f64,
    pub mode: String,
    pub scored: u64,
    pub threshold: f32,
}

fn load_dfn(cfg: &ExperimentConfig, seed: u64, layout: &Layout, selection: Selection) -> Result<Dfn> {
    let model = TwoTowerModel::load(&layout.dfn_checkpoint())?;
    Ok(Dfn {
        scorer: Scorer::Clip(model),
        selection,
        seed: cfg.calibration_seed(seed),
    })
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::config("workers must be >= 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))
}

/// Scores the raw shards with the DFN and computes the keep-fraction
/// threshold over all of them.
pub fn calibrate(
    cfg: &ExperimentConfig,
    seed: u64,
    layout: &Layout,
    keep_fraction: f64,
    workers: usize,
) -> Result<CalibrationReport> {
    check_keep_fraction(keep_fraction)?;
    let mode = cfg.calibration_mode()?;
    let dfn = load_dfn(cfg, seed, layout, Selection::keep_fraction(keep_fraction))?;
    let raw = ShardSet::open(layout.raw_pool())?;
    let scores: Vec<Vec<f32>> = worker_pool(workers)?.install(|| {
        (0..raw.shards.len())
            .into_par_iter()
            .map(|i| dfn.scorer.score_pool(&raw.read(i)?))
            .collect::<Result<_>>()
    })?;
    let mut cal = Calibrator::new(mode, dfn.seed)?;
    for &s in scores.iter().flatten() {
        cal.observe(s)?;
    }
    let report = CalibrationReport {
        keep_fraction,
        mode: mode.name().into(),
        scored: cal.seen(),
        threshold: cal.threshold(keep_fraction)?,
    };
    write_json(&layout.calibration(), &report)?;
    Ok(report)
}

/// Applies the DFN to the raw shards.
pub fn filter(
    cfg: &ExperimentConfig,
    seed: u64,
    layout: &Layout,
    selection: Selection,
    workers: usize,
) -> Result<FilterReport> {
    let dfn = load_dfn(cfg, seed, layout, selection)?;
    let raw = ShardSet::open(layout.raw_pool())?;
    let (_, report) = apply_dfn(&dfn, &raw, &layout.induced_pool(), workers)?;
    write_json(&layout.filter_report(), &report)?;
    Ok(report)
}

/// Trains the induced model on the filtered shards.
pub fn induce(cfg: &ExperimentConfig, seed: u64, layout: &Layout) -> Result<TwoTowerModel> {
    let pool = ShardSet::open(layout.induced_pool())?.load()?;
    if pool.len() < 2 {
        return Err(Error::EmptyFilteredPool {
            keep_fraction: cfg.keep_fraction,
        });
    }
    let out = train_clip(&pool, &cfg.induced_train_config(seed))?;
    out.model.save(&layout.induced_checkpoint())?;
    save_log_csv(&out.log, &layout.induced_log())?;
    Ok(out.model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub dfn: EvalReport,
    pub induced: EvalReport,
}

/// Evaluates both checkpoints on the seed's evaluation suite.
pub fn eval(cfg: &ExperimentConfig, seed: u64, layout: &Layout) -> Result<PipelineReport> {
    let suite = build_suite(&world(cfg, seed)?, &cfg.suite_spec(seed))?;
    let dfn = TwoTowerModel::load(&layout.dfn_checkpoint())?;
    let induced = TwoTowerModel::load(&layout.induced_checkpoint())?;
    let report = PipelineReport {
        seed,
        dfn: evaluate(&dfn, &suite, cfg.gallery_size)?,
        induced: evaluate(&induced, &suite, cfg.gallery_size)?,
    };
    write_json(&layout.eval_report(), &report)?;
    Ok(report)
}

/// Every stage in order.
pub fn run_all(cfg: &ExperimentConfig, seed: u64, root: &Path, workers: usize) -> Result<PipelineReport> {
    let layout = Layout::new(root);
    generate(cfg, seed, &layout)?;
    train_dfn(cfg, seed, &layout)?;
    calibrate(cfg, seed, &layout, cfg.keep_fraction, workers)?;
    filter(cfg, seed, &layout, cfg.selection()?, workers)?;
    induce(cfg, seed, &layout)?;
    eval(cfg, seed, &layout)
}
