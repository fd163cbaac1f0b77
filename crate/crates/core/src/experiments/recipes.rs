//! Canned experiments: each returns its table rows and is deterministic given
//! the config (bench timings aside).

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{labels, ExperimentConfig};
use super::table::TableRow;
use crate::clip::{caption_with_prototypes, finetune, interpolate_weights, train_clip, train_from, TwoTowerModel};
use crate::data::{generate_from_world, mix_pools, write_shards, Perturbation, Pool, World};
use crate::error::{Error, Result};
use crate::eval::{build_suite, evaluate, filtering_performance, EvalReport, EvalSuite, FilteringOutcome};
use crate::filter::{apply_dfn, filter_pool, train_binary_filter, BinaryFilterConfig, Dfn, FeatureSet, Scorer, Selection};
use crate::rng::derive;

/// Every pool one seed of an experiment needs.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub world: World,
    pub high_quality: Pool,
    pub noisy_filter: Pool,
    pub raw: Pool,
    pub target: Pool,
    pub suite: EvalSuite,
}

impl SeedContext {
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let world = World::new(&cfg.world_spec(seed))?;
        let gen = |spec, n| generate_from_world(&world, &spec, n, Perturbation::None);
        Ok(Self {
            seed,
            high_quality: gen(cfg.world_spec(seed), cfg.filter_pool_size)?,
            noisy_filter: gen(cfg.noisy_filter_spec(seed), cfg.filter_pool_size)?,
            raw: gen(cfg.raw_spec(seed), cfg.raw_pool_size)?,
            target: gen(cfg.target_spec(seed), cfg.target_size)?,
            suite: build_suite(&world, &cfg.suite_spec(seed))?,
            world,
        })
    }

    /// DFN filter-training pool with the given share of unfiltered records.
    pub fn filter_training_pool(&self, cfg: &ExperimentConfig, unfiltered_fraction: f64) -> Result<Pool> {
        mix_pools(
            &self.high_quality,
            &self.noisy_filter,
            unfiltered_fraction,
            cfg.filter_pool_size,
            cfg.mix_seed(self.seed),
        )
    }

    pub fn train_dfn(&self, cfg: &ExperimentConfig, unfiltered_fraction: f64) -> Result<TwoTowerModel> {
        let pool = self.filter_training_pool(cfg, unfiltered_fraction)?;
        Ok(train_clip(&pool, &cfg.dfn_train_config(self.seed))?.model)
    }

    /// Fine-tunes `dfn` on the target records and interpolates back towards
    /// it with `cfg.finetune_alpha`.
    pub fn finetune_dfn(&self, cfg: &ExperimentConfig, dfn: &TwoTowerModel) -> Result<TwoTowerModel> {
        let ft = finetune(dfn, &self.target, &self.suite.captions, &cfg.finetune_config(self.seed))?.model;
        interpolate_weights(dfn, &ft, cfg.finetune_alpha)
    }

    pub fn dfn(&self, cfg: &ExperimentConfig, scorer: Scorer) -> Result<Dfn> {
        Ok(Dfn {
            scorer,
            selection: cfg.selection()?,
            seed: cfg.calibration_seed(self.seed),
        })
    }

    /// Filters the raw pool with `scorer`, trains the induced model and
    /// evaluates it.
    pub fn induced(&self, cfg: &ExperimentConfig, scorer: Scorer, workers: usize) -> Result<FilteringOutcome> {
        let dfn = self.dfn(cfg, scorer)?;
        filtering_performance(
            &dfn,
            &self.raw,
            &cfg.induced_train_config(self.seed),
            &self.suite,
            workers,
            cfg.gallery_size,
        )
    }

    pub fn evaluate(&self, cfg: &ExperimentConfig, model: &TwoTowerModel) -> Result<EvalReport> {
        evaluate(model, &self.suite, cfg.gallery_size)
    }
}

fn shift_mean(r: &EvalReport) -> f64 {
    if r.shift_accuracies.is_empty() {
        return 0.0;
    }
    r.shift_accuracies.values().sum::<f64>() / r.shift_accuracies.len() as f64
}

fn shift(r: &EvalReport, name: &str) -> f64 {
    r.shift_accuracies.get(name).copied().unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------------------
// Filter types

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTypeRow {
    pub seed: u64,
    pub filter: String,
    pub kept_count: u64,
    pub threshold: f32,
    pub id_accuracy: f64,
    pub average: f64,
}

impl TableRow for FilterTypeRow {
    const HEADER: &'static [&'static str] = &["seed", "filter", "kept_count", "threshold", "id_accuracy", "average"];
}

/// Induced-model quality for no filtering, two binary classifiers and a
/// CLIP DFN trained on curated data.
pub fn filter_types(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<FilterTypeRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = SeedContext::build(cfg, seed)?;
        let mut push = |name: &str, out: FilteringOutcome| {
            rows.push(FilterTypeRow {
                seed,
                filter: name.into(),
                kept_count: out.filter.kept_count,
                threshold: out.filter.threshold,
                id_accuracy: out.eval.id_accuracy,
                average: out.eval.average,
            })
        };

        let all = Dfn::new(Scorer::Constant(1.0), Selection::keep_fraction(1.0));
        push(
            "no_filter",
            filtering_performance(
                &all,
                &ctx.raw,
                &cfg.induced_train_config(seed),
                &ctx.suite,
                workers,
                cfg.gallery_size,
            )?,
        );
        for (name, features) in [("binary_image", FeatureSet::Image), ("binary_image_text", FeatureSet::ImageText)] {
            let bcfg = BinaryFilterConfig {
                features,
                seed: derive(seed, labels::BINARY),
                ..Default::default()
            };
            let filter = train_binary_filter(&ctx.high_quality, &ctx.noisy_filter, &bcfg)?;
            push(name, ctx.induced(cfg, Scorer::Binary(filter), workers)?);
        }
        let dfn = ctx.train_dfn(cfg, 0.0)?;
        push("clip_dfn", ctx.induced(cfg, Scorer::Clip(dfn), workers)?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Poison sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonRow {
    pub seed: u64,
    pub unfiltered_fraction: f64,
    pub dfn_id_accuracy: f64,
    pub dfn_average: f64,
    pub induced_id_accuracy: f64,
    pub induced_average: f64,
}

impl TableRow for PoisonRow {
    const HEADER: &'static [&'static str] = &[
        "seed",
        "unfiltered_fraction",
        "dfn_id_accuracy",
        "dfn_average",
        "induced_id_accuracy",
        "induced_average",
    ];
}

/// Trains one DFN per unfiltered fraction on a constant-size mixed pool and
/// measures its filtering performance on a fixed raw pool.
pub fn poison_sweep(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<PoisonRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = SeedContext::build(cfg, seed)?;
        for &x in &cfg.poison_fractions {
            let dfn = ctx.train_dfn(cfg, x)?;
            let own = ctx.evaluate(cfg, &dfn)?;
            let out = ctx.induced(cfg, Scorer::Clip(dfn), workers)?;
            rows.push(PoisonRow {
                seed,
                unfiltered_fraction: x,
                dfn_id_accuracy: own.id_accuracy,
                dfn_average: own.average,
                induced_id_accuracy: out.eval.id_accuracy,
                induced_average: out.eval.average,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Filter quality vs downstream quality

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub seed: u64,
    pub unfiltered_fraction: f64,
    pub samples_seen: u64,
    pub dfn_id_accuracy: f64,
    pub dfn_average: f64,
    pub induced_id_accuracy: f64,
    pub induced_average: f64,
}

impl TableRow for GridRow {
    const HEADER: &'static [&'static str] = &[
        "seed",
        "unfiltered_fraction",
        "samples_seen",
        "dfn_id_accuracy",
        "dfn_average",
        "induced_id_accuracy",
        "induced_average",
    ];
}

/// DFNs over a grid of (filter-training data quality, samples seen), each
/// with its own accuracy next to its filtering performance.
pub fn filter_vs_downstream(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = SeedContext::build(cfg, seed)?;
        for &x in &cfg.grid_fractions {
            let pool = ctx.filter_training_pool(cfg, x)?;
            for &samples_seen in &cfg.grid_samples_seen {
                let tc = crate::clip::TrainConfig {
                    samples_seen,
                    ..cfg.dfn_train_config(seed)
                };
                let dfn = train_clip(&pool, &tc)?.model;
                let own = ctx.evaluate(cfg, &dfn)?;
                let out = ctx.induced(cfg, Scorer::Clip(dfn), workers)?;
                rows.push(GridRow {
                    seed,
                    unfiltered_fraction: x,
                    samples_seen,
                    dfn_id_accuracy: own.id_accuracy,
                    dfn_average: own.average,
                    induced_id_accuracy: out.eval.id_accuracy,
                    induced_average: out.eval.average,
                });
            }
        }
    }
    Ok(rows)
}

/// Pairs `(a, b)` of rows from the same seed where `a` has strictly lower own
/// accuracy but at least the filtering performance of `b`.
pub fn inverted_pairs(rows: &[GridRow]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate() {
            if a.seed == b.seed && a.dfn_id_accuracy < b.dfn_id_accuracy && a.induced_id_accuracy >= b.induced_id_accuracy
            {
                out.push((i, j));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Interventions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRow {
    pub seed: u64,
    pub intervention: String,
    pub setting: String,
    pub id_accuracy: f64,
    pub shift_mean: f64,
    pub retrieval_mean: f64,
    pub average: f64,
}

impl TableRow for InterventionRow {
    const HEADER: &'static [&'static str] = &[
        "seed",
        "intervention",
        "setting",
        "id_accuracy",
        "shift_mean",
        "retrieval_mean",
        "average",
    ];
}

pub const INTERVENTIONS: [&str; 4] = ["augmentation", "samples_batch", "finetune", "init_from_checkpoint"];

/// Two rows per intervention and seed: the DFN without and with it, each
/// scored by its induced model.
pub fn interventions(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<InterventionRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = SeedContext::build(cfg, seed)?;
        let x = cfg.unfiltered_fraction;
        let pool = ctx.filter_training_pool(cfg, x)?;
        let base_cfg = cfg.dfn_train_config(seed);

        let base = train_clip(&pool, &base_cfg)?.model;
        let no_aug = train_clip(
            &pool,
            &crate::clip::TrainConfig {
                augmentation: None,
                ..base_cfg.clone()
            },
        )?
        .model;
        let big_cfg = crate::clip::TrainConfig {
            samples_seen: base_cfg.samples_seen * 2,
            batch_size: base_cfg.batch_size * 2,
            ..base_cfg.clone()
        };
        let big = train_clip(&pool, &big_cfg)?.model;
        let tuned = ctx.finetune_dfn(cfg, &base)?;

        let pretrain_pool = generate_from_world(&ctx.world, &cfg.pretrain_spec(seed), cfg.pretrain_pool_size, Perturbation::None)?;
        let checkpoint = train_clip(&pretrain_pool, &cfg.pretrain_train_config(seed))?.model;
        let from_checkpoint = train_from(checkpoint, &pool, &base_cfg)?.model;
        let tuned_from_checkpoint = ctx.finetune_dfn(cfg, &from_checkpoint)?;

        let score = |m: &TwoTowerModel| ctx.induced(cfg, Scorer::Clip(m.clone()), workers).map(|o| o.eval);
        let base_eval = score(&base)?;
        let tuned_eval = score(&tuned)?;
        let sb = |c: &crate::clip::TrainConfig| format!("{}/{}", c.samples_seen, c.batch_size);
        let entries = [
            ("augmentation", "off".to_string(), score(&no_aug)?),
            ("augmentation", "on".to_string(), base_eval.clone()),
            ("samples_batch", sb(&base_cfg), base_eval.clone()),
            ("samples_batch", sb(&big_cfg), score(&big)?),
            ("finetune", "off".to_string(), base_eval),
            ("finetune", "on".to_string(), tuned_eval.clone()),
            ("init_from_checkpoint", "off".to_string(), tuned_eval),
            ("init_from_checkpoint", "on".to_string(), score(&tuned_from_checkpoint)?),
        ];
        for (intervention, setting, e) in entries {
            rows.push(InterventionRow {
                seed,
                intervention: intervention.into(),
                setting,
                id_accuracy: e.id_accuracy,
                shift_mean: shift_mean(&e),
                retrieval_mean: (e.retrieval_image_to_text + e.retrieval_text_to_image) / 2.0,
                average: e.average,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Robustness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub seed: u64,
    pub arm: String,
    pub id_accuracy: f64,
    pub shift_noise: f64,
    pub shift_map_shift: f64,
    pub shift_dropout: f64,
    pub average: f64,
}

impl TableRow for RobustnessRow {
    const HEADER: &'static [&'static str] = &[
        "seed",
        "arm",
        "id_accuracy",
        "shift_noise",
        "shift_map_shift",
        "shift_dropout",
        "average",
    ];
}

impl RobustnessRow {
    fn new(seed: u64, arm: &str, e: &EvalReport) -> Self {
        Self {
            seed,
            arm: arm.into(),
            id_accuracy: e.id_accuracy,
            shift_noise: shift(e, "noise"),
            shift_map_shift: shift(e, "map_shift"),
            shift_dropout: shift(e, "dropout"),
            average: e.average,
        }
    }

    pub fn shifts(&self) -> [f64; 3] {
        [self.shift_noise, self.shift_map_shift, self.shift_dropout]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationRow {
    pub seed: u64,
    pub alpha: f32,
    pub id_accuracy: f64,
    pub shift_mean: f64,
    /// Mean of id accuracy and every shift accuracy.
    pub robustness_average: f64,
}

impl TableRow for InterpolationRow {
    const HEADER: &'static [&'static str] = &["seed", "alpha", "id_accuracy", "shift_mean", "robustness_average"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessResult {
    pub arms: Vec<RobustnessRow>,
    pub interpolation: Vec<InterpolationRow>,
}

pub const ARMS: [&str; 3] = ["baseline_dfn", "finetuned_dfn", "baseline_plus_target"];

/// Three arms per seed (baseline DFN, fine-tuned DFN, baseline DFN with the
/// target records appended to its induced dataset) plus the DFN's own
/// accuracy along the base-to-fine-tuned weight path.
pub fn robustness(cfg: &ExperimentConfig, workers: usize) -> Result<RobustnessResult> {
    let mut arms = Vec::new();
    let mut interpolation = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = SeedContext::build(cfg, seed)?;
        let base = ctx.train_dfn(cfg, cfg.unfiltered_fraction)?;
        let raw_ft = finetune(&base, &ctx.target, &ctx.suite.captions, &cfg.finetune_config(seed))?.model;
        let tuned = interpolate_weights(&base, &raw_ft, cfg.finetune_alpha)?;

        let arm1 = ctx.induced(cfg, Scorer::Clip(base.clone()), workers)?;
        let arm2 = ctx.induced(cfg, Scorer::Clip(tuned), workers)?;
        let (mut induced, _) = filter_pool(&ctx.dfn(cfg, Scorer::Clip(base.clone()))?, &ctx.raw, workers, cfg.records_per_shard)?;
        induced.extend(&caption_with_prototypes(&ctx.target, &ctx.suite.captions)?)?;
        let arm3_model = train_clip(&induced, &cfg.induced_train_config(seed))?.model;
        let arm3 = ctx.evaluate(cfg, &arm3_model)?;

        arms.push(RobustnessRow::new(seed, ARMS[0], &arm1.eval));
        arms.push(RobustnessRow::new(seed, ARMS[1], &arm2.eval));
        arms.push(RobustnessRow::new(seed, ARMS[2], &arm3));

        for &alpha in &cfg.interpolation_alphas {
            let m = interpolate_weights(&base, &raw_ft, alpha)?;
            let e = ctx.evaluate(cfg, &m)?;
            interpolation.push(InterpolationRow {
                seed,
                alpha,
                id_accuracy: e.id_accuracy,
                shift_mean: shift_mean(&e),
                robustness_average: e.robustness_average(),
            });
        }
    }
    Ok(RobustnessResult { arms, interpolation })
}

// ---------------------------------------------------------------------------
// Throughput

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub records: u64,
    pub workers: usize,
    pub seconds: f64,
    pub records_per_sec: f64,
}

impl TableRow for BenchRow {
    const HEADER: &'static [&'static str] = &["records", "workers", "seconds", "records_per_sec"];
}

/// Times `apply_dfn` with a fixed threshold over pools of `n`, `2n` and `4n`
/// records and every configured worker count. Shards are written under
/// `work_dir`, which is cleaned up afterwards.
pub fn bench_scaling(cfg: &ExperimentConfig, work_dir: &Path) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let world = World::new(&cfg.world_spec(seed))?;
    let model = TwoTowerModel::init(cfg.d_img, cfg.d_txt, cfg.embed_dim, derive(seed, labels::BENCH));
    let dfn = Dfn::new(Scorer::Clip(model), Selection::Threshold { threshold: 0.0 });
    let mut rows = Vec::new();
    for mult in [1usize, 2, 4] {
        let n = cfg.bench_records * mult;
        let pool = generate_from_world(&world, &cfg.raw_spec(seed), n, Perturbation::None)?;
        let in_dir = work_dir.join(format!("pool-{n}"));
        let input = write_shards(&pool, &in_dir, cfg.records_per_shard)?;
        drop(pool);
        for &workers in &cfg.bench_workers {
            let out_dir = work_dir.join(format!("out-{n}-{workers}"));
            let start = Instant::now();
            apply_dfn(&dfn, &input, &out_dir, workers)?;
            let seconds = start.elapsed().as_secs_f64();
            fs::remove_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            rows.push(BenchRow {
                records: n as u64,
                workers,
                seconds,
                records_per_sec: n as f64 / seconds,
            });
        }
        fs::remove_dir_all(&in_dir).map_err(|e| Error::io(&in_dir, e))?;
    }
    Ok(rows)
}
