//! Flat experiment configuration. Every field has a default, so a config file
//! only needs the keys it changes.

use serde::{Deserialize, Serialize};

use crate::clip::TrainConfig;
use crate::data::{Perturbation, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{ShiftSpec, SuiteSpec};
use crate::filter::{check_keep_fraction, CalibrationMode, Selection};
use crate::rng::derive;

/// First record id of each pool family. Pools never share ids.
pub mod id_ranges {
    pub const HIGH_QUALITY: u64 = 0;
    pub const NOISY_FILTER: u64 = 1 << 40;
    pub const RAW: u64 = 2 << 40;
    pub const TARGET: u64 = 3 << 40;
    pub const PRETRAIN: u64 = 4 << 40;
    pub const EVAL: u64 = 5 << 40;
}

/// Child-seed labels, one per random source of a run.
pub(crate) mod labels {
    pub const HIGH_QUALITY: u64 = 1;
    pub const NOISY_FILTER: u64 = 2;
    pub const RAW: u64 = 3;
    pub const TARGET: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const MIX: u64 = 7;
    pub const DFN_TRAIN: u64 = 8;
    pub const INDUCED_TRAIN: u64 = 9;
    pub const FINETUNE: u64 = 10;
    pub const PRETRAIN_TRAIN: u64 = 11;
    pub const MAP_SHIFT: u64 = 12;
    pub const BINARY: u64 = 13;
    pub const CALIBRATION: u64 = 14;
    pub const BENCH: u64 = 15;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,

    // concept world
    pub num_concepts: usize,
    pub d_latent: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub embed_dim: usize,

    // pools
    pub hq_align_prob: f64,
    pub hq_noise_sigma: f64,
    pub noisy_align_prob: f64,
    pub noisy_noise_sigma: f64,
    pub filter_pool_size: usize,
    pub raw_pool_size: usize,
    pub records_per_shard: usize,
    /// Share of unfiltered records in the DFN's filter-training pool for
    /// single-DFN commands.
    pub unfiltered_fraction: f64,

    // filtering
    pub keep_fraction: f64,
    /// Fixed score threshold; when set it replaces keep-fraction calibration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f32>,
    /// `exact` or `reservoir`.
    pub calibration: String,
    pub reservoir_capacity: usize,

    // DFN training
    pub dfn_samples_seen: u64,
    pub dfn_batch_size: usize,
    pub dfn_learning_rate: f64,
    pub dfn_weight_decay: f64,
    pub dfn_warmup_steps: usize,
    /// Image-feature noise added during DFN training and fine-tuning; 0 disables it.
    pub dfn_augmentation: f64,

    // induced model
    pub induced_samples_seen: u64,
    pub induced_batch_size: usize,
    pub induced_learning_rate: f64,
    pub induced_weight_decay: f64,
    pub induced_warmup_steps: usize,

    // fine-tuning on target-task data
    pub target_size: usize,
    pub finetune_samples_seen: u64,
    pub finetune_learning_rate: f64,
    pub finetune_warmup_steps: usize,
    /// Interpolation weight towards the fine-tuned model.
    pub finetune_alpha: f32,

    // checkpoint used by the init-from-checkpoint intervention
    pub pretrain_pool_size: usize,
    pub pretrain_align_prob: f64,
    pub pretrain_noise_sigma: f64,
    pub pretrain_samples_seen: u64,

    // evaluation
    pub eval_noise_sigma: f64,
    pub eval_id_size: usize,
    pub eval_shift_size: usize,
    pub eval_retrieval_size: usize,
    pub gallery_size: usize,
    pub shift_noise: f64,
    pub shift_map: f64,
    pub shift_dropout: f64,

    // sweeps
    pub poison_fractions: Vec<f64>,
    pub grid_fractions: Vec<f64>,
    pub grid_samples_seen: Vec<u64>,
    pub interpolation_alphas: Vec<f32>,
    pub bench_records: usize,
    pub bench_workers: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seeds: vec![0, 1, 2],
            num_concepts: 50,
            d_latent: 32,
            d_img: 64,
            d_txt: 64,
            embed_dim: 32,
            hq_align_prob: 0.98,
            hq_noise_sigma: 0.1,
            noisy_align_prob: 0.3,
            noisy_noise_sigma: 0.6,
            filter_pool_size: 10_000,
            raw_pool_size: 200_000,
            records_per_shard: 8192,
            unfiltered_fraction: 0.0,
            keep_fraction: 0.15,
            threshold: None,
            calibration: "exact".into(),
            reservoir_capacity: 100_000,
            dfn_samples_seen: 200_000,
            dfn_batch_size: 256,
            dfn_learning_rate: 5e-3,
            dfn_weight_decay: 0.1,
            dfn_warmup_steps: 100,
            dfn_augmentation: 0.1,
            induced_samples_seen: 500_000,
            induced_batch_size: 256,
            induced_learning_rate: 5e-3,
            induced_weight_decay: 0.1,
            induced_warmup_steps: 100,
            target_size: 5000,
            finetune_samples_seen: 50_000,
            finetune_learning_rate: 1e-3,
            finetune_warmup_steps: 10,
            finetune_alpha: 1.0,
            pretrain_pool_size: 50_000,
            pretrain_align_prob: 0.6,
            pretrain_noise_sigma: 0.4,
            pretrain_samples_seen: 500_000,
            eval_noise_sigma: 0.3,
            eval_id_size: 5000,
            eval_shift_size: 2000,
            eval_retrieval_size: 2048,
            gallery_size: 256,
            shift_noise: 0.3,
            shift_map: 0.5,
            shift_dropout: 0.3,
            poison_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            grid_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            grid_samples_seen: vec![25_000, 50_000, 100_000, 200_000, 400_000],
            interpolation_alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            bench_records: 250_000,
            bench_workers: vec![1, 2, 4, 8],
        }
    }
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        for (name, v) in [
            ("hq_align_prob", self.hq_align_prob),
            ("noisy_align_prob", self.noisy_align_prob),
            ("pretrain_align_prob", self.pretrain_align_prob),
            ("unfiltered_fraction", self.unfiltered_fraction),
        ] {
            check_fraction(name, v)?;
        }
        for &x in self.poison_fractions.iter().chain(&self.grid_fractions) {
            check_fraction("sweep fraction", x)?;
        }
        for &a in &self.interpolation_alphas {
            check_fraction("interpolation alpha", a as f64)?;
        }
        check_fraction("finetune_alpha", self.finetune_alpha as f64)?;
        check_keep_fraction(self.keep_fraction)?;
        self.calibration_mode()?;
        self.selection()?;
        for (name, v) in [
            ("filter_pool_size", self.filter_pool_size),
            ("raw_pool_size", self.raw_pool_size),
            ("records_per_shard", self.records_per_shard),
            ("target_size", self.target_size),
            ("eval_id_size", self.eval_id_size),
            ("gallery_size", self.gallery_size),
            ("bench_records", self.bench_records),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.bench_workers.contains(&0) {
            return Err(Error::config("bench_workers entries must be >= 1"));
        }
        if !(self.dfn_augmentation >= 0.0) {
            return Err(Error::config("dfn_augmentation must be >= 0"));
        }
        self.world_spec(0).validate()?;
        for s in [self.noisy_spec(0), self.pretrain_spec(0)] {
            s.validate()?;
        }
        for cfg in [
            self.dfn_train_config(0),
            self.induced_train_config(0),
            self.pretrain_train_config(0),
        ] {
            cfg.validate()?;
        }
        if self.finetune_samples_seen > 0 {
            self.finetune_config(0).validate()?;
        }
        Ok(())
    }

    pub fn calibration_mode(&self) -> Result<CalibrationMode> {
        match self.calibration.as_str() {
            "exact" => Ok(CalibrationMode::Exact),
            "reservoir" => Ok(CalibrationMode::Reservoir {
                capacity: self.reservoir_capacity,
            }),
            other => Err(Error::config(format!("unknown calibration mode `{other}`"))),
        }
    }

    pub fn selection(&self) -> Result<Selection> {
        if let Some(threshold) = self.threshold {
            if threshold.is_nan() {
                return Err(Error::config("threshold is NaN"));
            }
            return Ok(Selection::Threshold { threshold });
        }
        Ok(Selection::KeepFraction {
            fraction: self.keep_fraction,
            mode: self.calibration_mode()?,
        })
    }

    /// Sampling parameters of the curated pool; also fixes the world.
    pub fn world_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_concepts: self.num_concepts,
            d_latent: self.d_latent,
            d_img: self.d_img,
            d_txt: self.d_txt,
            align_prob: self.hq_align_prob,
            noise_sigma: self.hq_noise_sigma,
            world_seed: seed,
            seed: derive(seed, labels::HIGH_QUALITY),
            id_offset: id_ranges::HIGH_QUALITY,
        }
    }

    fn noisy_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            align_prob: self.noisy_align_prob,
            noise_sigma: self.noisy_noise_sigma,
            ..self.world_spec(seed)
        }
    }

    pub fn noisy_filter_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed: derive(seed, labels::NOISY_FILTER),
            id_offset: id_ranges::NOISY_FILTER,
            ..self.noisy_spec(seed)
        }
    }

    pub fn raw_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed: derive(seed, labels::RAW),
            id_offset: id_ranges::RAW,
            ..self.noisy_spec(seed)
        }
    }

    /// Labeled target-task records: always aligned, evaluation noise level.
    pub fn target_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            align_prob: 1.0,
            noise_sigma: self.eval_noise_sigma,
            seed: derive(seed, labels::TARGET),
            id_offset: id_ranges::TARGET,
            ..self.world_spec(seed)
        }
    }

    pub fn pretrain_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            align_prob: self.pretrain_align_prob,
            noise_sigma: self.pretrain_noise_sigma,
            seed: derive(seed, labels::PRETRAIN),
            id_offset: id_ranges::PRETRAIN,
            ..self.world_spec(seed)
        }
    }

    pub fn suite_spec(&self, seed: u64) -> SuiteSpec {
        SuiteSpec {
            base: SyntheticSpec {
                align_prob: 1.0,
                noise_sigma: self.eval_noise_sigma,
                seed: derive(seed, labels::EVAL),
                id_offset: id_ranges::EVAL,
                ..self.world_spec(seed)
            },
            id_size: self.eval_id_size,
            shift_size: self.eval_shift_size,
            retrieval_size: self.eval_retrieval_size,
            shifts: vec![
                ShiftSpec {
                    name: "noise".into(),
                    perturbation: Perturbation::Noise {
                        magnitude: self.shift_noise,
                    },
                },
                ShiftSpec {
                    name: "map_shift".into(),
                    perturbation: Perturbation::MapShift {
                        magnitude: self.shift_map,
                        seed: derive(seed, labels::MAP_SHIFT),
                    },
                },
                ShiftSpec {
                    name: "dropout".into(),
                    perturbation: Perturbation::Dropout {
                        magnitude: self.shift_dropout,
                    },
                },
            ],
        }
    }

    fn augmentation(&self) -> Option<f64> {
        (self.dfn_augmentation > 0.0).then_some(self.dfn_augmentation)
    }

    pub fn dfn_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            samples_seen: self.dfn_samples_seen,
            batch_size: self.dfn_batch_size,
            embed_dim: self.embed_dim,
            learning_rate: self.dfn_learning_rate,
            weight_decay: self.dfn_weight_decay,
            warmup_steps: self.dfn_warmup_steps,
            seed: derive(seed, labels::DFN_TRAIN),
            augmentation: self.augmentation(),
            ..TrainConfig::default()
        }
    }

    pub fn induced_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            samples_seen: self.induced_samples_seen,
            batch_size: self.induced_batch_size,
            embed_dim: self.embed_dim,
            learning_rate: self.induced_learning_rate,
            weight_decay: self.induced_weight_decay,
            warmup_steps: self.induced_warmup_steps,
            seed: derive(seed, labels::INDUCED_TRAIN),
            augmentation: None,
            ..TrainConfig::default()
        }
    }

    pub fn finetune_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            samples_seen: self.finetune_samples_seen,
            learning_rate: self.finetune_learning_rate,
            warmup_steps: self.finetune_warmup_steps,
            seed: derive(seed, labels::FINETUNE),
            ..self.dfn_train_config(seed)
        }
    }

    pub fn pretrain_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            samples_seen: self.pretrain_samples_seen,
            seed: derive(seed, labels::PRETRAIN_TRAIN),
            augmentation: None,
            ..self.dfn_train_config(seed)
        }
    }

    pub fn mix_seed(&self, seed: u64) -> u64 {
        derive(seed, labels::MIX)
    }

    pub fn calibration_seed(&self, seed: u64) -> u64 {
        derive(seed, labels::CALIBRATION)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            ExperimentConfig {
                seeds: vec![],
                ..Default::default()
            },
            ExperimentConfig {
                keep_fraction: 0.0,
                ..Default::default()
            },
            ExperimentConfig {
                poison_fractions: vec![0.0, 1.5],
                ..Default::default()
            },
            ExperimentConfig {
                calibration: "median".into(),
                ..Default::default()
            },
            ExperimentConfig {
                bench_workers: vec![0],
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn pool_families_use_distinct_seeds_and_ids() {
        let c = ExperimentConfig::default();
        let specs = [c.world_spec(3), c.noisy_filter_spec(3), c.raw_spec(3), c.target_spec(3), c.pretrain_spec(3)];
        for (i, a) in specs.iter().enumerate() {
            assert_eq!(a.world_seed, 3);
            for b in &specs[i + 1..] {
                assert_ne!(a.seed, b.seed);
                assert_ne!(a.id_offset, b.id_offset);
            }
        }
    }
}
