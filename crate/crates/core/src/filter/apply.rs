//! Pointwise pool filtering, sharded over a worker pool.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::calibrate::{check_keep_fraction, CalibrationMode, Calibrator};
use super::scorer::Scorer;
use crate::data::shard::{shard_file_name, write_shard, ShardEntry};
use crate::data::{Pool, ShardSet};
use crate::error::{Error, Result};

/// Records per shard when an in-memory pool is filtered.
pub const DEFAULT_RECORDS_PER_SHARD: usize = 8192;

/// Where the filter threshold comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    Threshold { threshold: f32 },
    KeepFraction { fraction: f64, mode: CalibrationMode },
}

impl Selection {
    pub fn keep_fraction(fraction: f64) -> Self {
        Selection::KeepFraction {
            fraction,
            mode: CalibrationMode::Exact,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Selection::Threshold { threshold } if threshold.is_nan() => Err(Error::config("threshold is NaN")),
            Selection::Threshold { .. } => Ok(()),
            Selection::KeepFraction { fraction, .. } => check_keep_fraction(*fraction),
        }
    }
}

/// A scorer plus a selection rule.
#[derive(Debug, Clone)]
pub struct Dfn {
    pub scorer: Scorer,
    pub selection: Selection,
    /// Seeds reservoir calibration.
    pub seed: u64,
}

impl Dfn {
    pub fn new(scorer: Scorer, selection: Selection) -> Self {
        Self {
            scorer,
            selection,
            seed: 0,
        }
    }

    /// The same scorer with a fixed threshold.
    pub fn with_threshold(&self, threshold: f32) -> Self {
        Self {
            selection: Selection::Threshold { threshold },
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardReport {
    pub path: String,
    pub input_count: u64,
    pub kept_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: u64,
    pub kept_count: u64,
    pub threshold: f32,
    pub keep_fraction: Option<f64>,
    /// `threshold`, `exact` or `reservoir`.
    pub mode: String,
    pub shards: Vec<ShardReport>,
    /// Wall-clock time per shard; not serialized so reports stay reproducible.
    #[serde(skip)]
    pub shard_wall_times: Vec<Duration>,
}

impl FilterReport {
    pub fn kept_fraction(&self) -> f64 {
        self.kept_count as f64 / self.input_count.max(1) as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::config("workers must be >= 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))
}

fn resolve_threshold(dfn: &Dfn, shard_scores: &[Vec<f32>]) -> Result<(f32, Option<f64>, String)> {
    match dfn.selection {
        Selection::Threshold { threshold } => Ok((threshold, None, "threshold".into())),
        Selection::KeepFraction { fraction, mode } => {
            let mut cal = Calibrator::new(mode, dfn.seed)?;
            for s in shard_scores.iter().flatten() {
                cal.observe(*s)?;
            }
            Ok((cal.threshold(fraction)?, Some(fraction), mode.name().into()))
        }
    }
}

fn kept_indices(scores: &[f32], threshold: f32) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Filters an in-memory pool, treating consecutive runs of
/// `records_per_shard` records as shards.
pub fn filter_pool(dfn: &Dfn, pool: &Pool, workers: usize, records_per_shard: usize) -> Result<(Pool, FilterReport)> {
    dfn.selection.validate()?;
    if records_per_shard == 0 {
        return Err(Error::config("records_per_shard must be >= 1"));
    }
    let tp = thread_pool(workers)?;
    let ranges: Vec<_> = (0..pool.len().div_ceil(records_per_shard))
        .map(|i| i * records_per_shard..((i + 1) * records_per_shard).min(pool.len()))
        .collect();

    let scored: Vec<(Vec<f32>, Duration)> = tp.install(|| {
        ranges
            .par_iter()
            .map(|r| {
                let start = Instant::now();
                let scores = r
                    .clone()
                    .map(|i| dfn.scorer.score(pool.record(i)))
                    .collect::<Result<Vec<f32>>>()?;
                Ok((scores, start.elapsed()))
            })
            .collect::<Result<_>>()
    })?;
    let (scores, times): (Vec<Vec<f32>>, Vec<Duration>) = scored.into_iter().unzip();
    let (threshold, keep_fraction, mode) = resolve_threshold(dfn, &scores)?;

    let mut keep = Vec::new();
    let mut shards = Vec::with_capacity(ranges.len());
    for (i, (r, s)) in ranges.iter().zip(&scores).enumerate() {
        let local = kept_indices(s, threshold);
        shards.push(ShardReport {
            path: shard_file_name(i),
            input_count: s.len() as u64,
            kept_count: local.len() as u64,
        });
        keep.extend(local.into_iter().map(|j| r.start + j));
    }
    let out = pool.select(&keep);
    let report = FilterReport {
        input_count: pool.len() as u64,
        kept_count: out.len() as u64,
        threshold,
        keep_fraction,
        mode,
        shards,
        shard_wall_times: times,
    };
    Ok((out, report))
}

/// Filters a sharded pool on disk, writing one output shard per input shard
/// (in the same order) plus a manifest into `out_dir`.
///
/// With a keep-fraction selection the shards are scored once, the threshold
/// is calibrated over all scores in shard order, and the stored scores are
/// reused for the filtering pass.
pub fn apply_dfn(dfn: &Dfn, input: &ShardSet, out_dir: &Path, workers: usize) -> Result<(ShardSet, FilterReport)> {
    dfn.selection.validate()?;
    let tp = thread_pool(workers)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let n = input.shards.len();

    let score_shard = |i: usize| -> Result<Vec<f32>> { dfn.scorer.score_pool(&input.read(i)?) };
    let precomputed: Option<Vec<Vec<f32>>> = match dfn.selection {
        Selection::Threshold { .. } => None,
        Selection::KeepFraction { .. } => {
            Some(tp.install(|| (0..n).into_par_iter().map(score_shard).collect::<Result<_>>())?)
        }
    };
    let (threshold, keep_fraction, mode) = match &precomputed {
        Some(s) => resolve_threshold(dfn, s)?,
        None => resolve_threshold(dfn, &[])?,
    };

    let results: Vec<(ShardEntry, ShardReport, Duration)> = tp.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let start = Instant::now();
                let shard = input.read(i)?;
                let scores = match &precomputed {
                    Some(all) => all[i].clone(),
                    None => dfn.scorer.score_pool(&shard)?,
                };
                let kept = shard.select(&kept_indices(&scores, threshold));
                let name = shard_file_name(i);
                let sha256 = write_shard(&out_dir.join(&name), &kept)?;
                let entry = ShardEntry {
                    path: name,
                    record_count: kept.len() as u64,
                    sha256,
                };
                let report = ShardReport {
                    path: input.shards[i].path.clone(),
                    input_count: shard.len() as u64,
                    kept_count: kept.len() as u64,
                };
                Ok((entry, report, start.elapsed()))
            })
            .collect::<Result<_>>()
    })?;

    let mut entries = Vec::with_capacity(n);
    let mut shards = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    for (e, r, t) in results {
        entries.push(e);
        shards.push(r);
        times.push(t);
    }
    let output = ShardSet::from_entries(out_dir, entries, input.d_img, input.d_txt)?;
    let report = FilterReport {
        input_count: shards.iter().map(|s| s.input_count).sum(),
        kept_count: shards.iter().map(|s| s.kept_count).sum(),
        threshold,
        keep_fraction,
        mode,
        shards,
        shard_wall_times: times,
    };
    Ok((output, report))
}
