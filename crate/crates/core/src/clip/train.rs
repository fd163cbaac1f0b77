use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loss::{contrastive_loss, tower_backward, tower_forward};
use super::model::{TwoTowerModel, MAX_LOG_SCALE, MIN_LOG_SCALE};
use crate::data::{Pool, Record, RecordRef};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Optimization settings for contrastive training.
///
/// Defaults follow the usual CLIP recipe structure (AdamW with decoupled
/// weight decay, linear warmup then cosine decay, beta2 = 0.98) scaled to
/// small linear towers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub samples_seen: u64,
    pub batch_size: usize,
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Standard deviation of Gaussian noise added to image features of each
    /// training batch; `None` disables augmentation.
    pub augmentation: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            samples_seen: 500_000,
            batch_size: 256,
            embed_dim: 32,
            learning_rate: 5e-3,
            weight_decay: 0.1,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            seed: 0,
            augmentation: None,
        }
    }
}

impl TrainConfig {
    pub fn steps(&self) -> usize {
        (self.samples_seen / self.batch_size.max(1) as u64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be >= 2 so every batch has negatives"));
        }
        if self.samples_seen < self.batch_size as u64 {
            return Err(Error::config(format!(
                "samples_seen {} is smaller than batch_size {}",
                self.samples_seen, self.batch_size
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be >= 1"));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("weight_decay", self.weight_decay), ("eps", self.eps)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must be in [0, 1)")));
            }
        }
        if let Some(s) = self.augmentation {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config("augmentation scale must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Learning rate at `step`: linear warmup to the peak, then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.steps();
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = total.saturating_sub(self.warmup_steps).max(1);
        let progress = (step - self.warmup_steps) as f64 / decay_steps as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TwoTowerModel,
    pub log: Vec<LogEntry>,
}

/// Writes a training log as CSV with header `step,loss,lr`.
pub fn write_log_csv(log: &[LogEntry], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in log {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io("training log", e))?;
    Ok(())
}

pub fn save_log_csv(log: &[LogEntry], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_log_csv(log, f)
}

/// AdamW over the model's parameter blocks. Weight decay applies to the two
/// weight matrices only.
struct AdamW {
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    t: i32,
}

const DECAYED_BLOCKS: [bool; 5] = [true, false, true, false, false];

impl AdamW {
    fn new(model: &TwoTowerModel) -> Self {
        let sizes: Vec<usize> = model.parameters().iter().map(|p| p.len()).collect();
        Self {
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut TwoTowerModel, grads: [&[f32]; 5], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let lr = lr as f32;
        let eps = cfg.eps as f32;
        let wd = cfg.weight_decay as f32;
        for (b, (params, grad)) in model.parameters_mut().into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[b], &mut self.second[b]);
            for i in 0..params.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                if DECAYED_BLOCKS[b] {
                    params[i] -= lr * wd * params[i];
                }
                params[i] -= lr * update;
            }
        }
        model.log_scale = model.log_scale.clamp(MIN_LOG_SCALE, MAX_LOG_SCALE);
    }
}

/// Trains a fresh model on `pool`.
pub fn train_clip(pool: &Pool, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let init = TwoTowerModel::init(pool.d_img(), pool.d_txt(), config.embed_dim, config.seed);
    train_from(init, pool, config)
}

/// Continues training `model` on `pool`.
///
/// Batches are consecutive slices of per-epoch permutations (remainders
/// dropped so a batch never repeats a record). The permutation stream is
/// seeded from `config.seed` and the pool fingerprint, so the same pool and
/// seed always give the same batch sequence.
pub fn train_from(mut model: TwoTowerModel, pool: &Pool, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if pool.is_empty() {
        return Err(Error::Empty("training pool".into()));
    }
    if pool.d_img() != model.d_img() || pool.d_txt() != model.d_txt() {
        return Err(Error::DimensionMismatch(format!(
            "model expects {}x{} features, pool has {}x{}",
            model.d_img(),
            model.d_txt(),
            pool.d_img(),
            pool.d_txt()
        )));
    }
    let batch = config.batch_size.min(pool.len());
    if batch < 2 {
        return Err(Error::config("training pool needs at least 2 records"));
    }

    let order_seed = rng::derive(config.seed, pool.fingerprint_u64());
    let mut order_rng = rng::stream(order_seed, streams::BATCH_ORDER);
    let mut aug_rng = rng::stream(config.seed, streams::AUGMENT);
    let mut perm: Vec<usize> = (0..pool.len()).collect();
    let per_epoch = pool.len() / batch;
    let mut cursor = per_epoch;

    let images = pool.image_matrix();
    let texts = pool.text_matrix();
    let mut opt = AdamW::new(&model);
    let steps = config.steps();
    let mut log = Vec::with_capacity(steps);

    for step in 0..steps {
        if cursor == per_epoch {
            perm.shuffle(&mut order_rng);
            cursor = 0;
        }
        let idx = &perm[cursor * batch..(cursor + 1) * batch];
        cursor += 1;

        let mut x_img = images.select(Axis(0), idx);
        let x_txt = texts.select(Axis(0), idx);
        if let Some(scale) = config.augmentation.filter(|&s| s > 0.0) {
            let scale = scale as f32;
            x_img.mapv_inplace(|v| {
                let e: f32 = StandardNormal.sample(&mut aug_rng);
                v + scale * e
            });
        }

        let (e_img, n_img) = tower_forward(model.image_weight.view(), model.image_bias.view(), x_img.view())?;
        let (e_txt, n_txt) = tower_forward(model.text_weight.view(), model.text_bias.view(), x_txt.view())?;
        let out = contrastive_loss(e_img.view(), e_txt.view(), model.log_scale)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { step, loss: f64::NAN },
                other => other,
            })?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: out.loss as f64,
            });
        }
        let (gw_img, gb_img) = tower_backward(e_img.view(), n_img.view(), out.grad_image.view(), x_img.view());
        let (gw_txt, gb_txt) = tower_backward(e_txt.view(), n_txt.view(), out.grad_text.view(), x_txt.view());

        let lr = config.lr_at(step);
        let grads: [&[f32]; 5] = [
            std_slice(&gw_img),
            gb_img.as_slice().expect("standard layout"),
            std_slice(&gw_txt),
            gb_txt.as_slice().expect("standard layout"),
            std::slice::from_ref(&out.grad_log_scale),
        ];
        opt.step(&mut model, grads, lr, config);
        if !model.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: out.loss as f64,
            });
        }
        log.push(LogEntry {
            step,
            loss: out.loss as f64,
            lr,
        });
    }
    Ok(TrainOutcome { model, log })
}

fn std_slice(a: &Array2<f32>) -> &[f32] {
    a.as_slice().expect("standard layout")
}

/// Replaces each record's text with the clean caption of its concept.
pub fn caption_with_prototypes(records: &Pool, captions: &[Vec<f32>]) -> Result<Pool> {
    let mut out = Pool::with_capacity(records.d_img(), records.d_txt(), records.len());
    for r in records.iter() {
        let k = r.concept.ok_or_else(|| Error::config(format!("record {} has no concept label", r.id)))? as usize;
        let caption = captions
            .get(k)
            .ok_or_else(|| Error::config(format!("record {} has concept {k} without a caption", r.id)))?;
        out.push(RecordRef {
            text: caption,
            aligned: Some(true),
            ..r
        })?;
    }
    Ok(out)
}

/// Fine-tunes `model` on labeled records paired with their concept's clean
/// caption. `samples_seen == 0` returns the model unchanged.
pub fn finetune(model: &TwoTowerModel, records: &Pool, captions: &[Vec<f32>], config: &TrainConfig) -> Result<TrainOutcome> {
    if config.samples_seen == 0 {
        return Ok(TrainOutcome {
            model: model.clone(),
            log: Vec::new(),
        });
    }
    let pairs = caption_with_prototypes(records, captions)?;
    train_from(model.clone(), &pairs, config)
}

/// Adds seeded Gaussian noise of standard deviation `scale` to the image
/// features; text is untouched.
pub fn augment(record: &Record, scale: f64, seed: u64) -> Record {
    let mut out = record.clone();
    if scale > 0.0 {
        let mut rng = rng::stream(rng::derive(seed, record.id), streams::AUGMENT);
        for v in out.image.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += (scale * e) as f32;
        }
    }
    out
}
