//! Logistic-regression quality classifier: curated records are positives,
//! unfiltered records negatives.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Pool;
use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Image,
    ImageText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinaryFilterConfig {
    pub features: FeatureSet,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for BinaryFilterConfig {
    fn default() -> Self {
        Self {
            features: FeatureSet::Image,
            epochs: 20,
            batch_size: 128,
            learning_rate: 0.1,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFilter {
    pub features: FeatureSet,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn gather(features: FeatureSet, image: &[f32], text: &[f32], out: &mut Vec<f64>) {
    out.clear();
    out.extend(image.iter().map(|&v| v as f64));
    if features == FeatureSet::ImageText {
        out.extend(text.iter().map(|&v| v as f64));
    }
}

impl LogisticFilter {
    fn dim(&self) -> usize {
        self.weights.len()
    }

    fn logit(&self, x: &[f64]) -> f64 {
        self.bias
            + x.iter()
                .zip(&self.mean)
                .zip(&self.inv_std)
                .zip(&self.weights)
                .map(|(((x, m), s), w)| (x - m) * s * w)
                .sum::<f64>()
    }

    /// Probability that the pair belongs to the positive class.
    pub fn probability(&self, image: &[f32], text: &[f32]) -> Result<f32> {
        let mut x = Vec::with_capacity(self.dim());
        gather(self.features, image, text, &mut x);
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "binary filter expects {} features, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(sigmoid(self.logit(&x)) as f32)
    }

    /// Fraction of records classified on the correct side of 0.5.
    pub fn accuracy(&self, pool: &Pool, positive: bool) -> Result<f64> {
        let mut correct = 0usize;
        for r in pool.iter() {
            let p = self.probability(r.image, r.text)?;
            if (p > 0.5) == positive {
                correct += 1;
            }
        }
        Ok(correct as f64 / pool.len().max(1) as f64)
    }
}

/// Fits a class-balanced logistic regression by mini-batch gradient descent
/// on standardized features.
pub fn train_binary_filter(positives: &Pool, negatives: &Pool, config: &BinaryFilterConfig) -> Result<LogisticFilter> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Empty("binary filter needs positive and negative records".into()));
    }
    if positives.d_img() != negatives.d_img() || positives.d_txt() != negatives.d_txt() {
        return Err(Error::DimensionMismatch("positive and negative pools differ in shape".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::config("binary filter needs batch_size >= 1 and epochs >= 1"));
    }

    let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(positives.len() + negatives.len());
    let mut x = Vec::new();
    for (pool, label) in [(positives, 1.0), (negatives, 0.0)] {
        for r in pool.iter() {
            gather(config.features, r.image, r.text, &mut x);
            rows.push((x.clone(), label));
        }
    }
    let dim = rows[0].0.len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r.0[j]).sum::<f64>() / n).collect();
    let inv_std: Vec<f64> = (0..dim)
        .map(|j| {
            let var = rows.iter().map(|r| (r.0[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-12 {
                1.0 / var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let class_weight = [
        n / (2.0 * negatives.len() as f64),
        n / (2.0 * positives.len() as f64),
    ];

    let mut model = LogisticFilter {
        features: config.features,
        mean,
        inv_std,
        weights: vec![0.0; dim],
        bias: 0.0,
    };
    let mut rng = rng::stream(config.seed, streams::LOGISTIC);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut grad_w = vec![0.0; dim];
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.learning_rate / (1.0 + epoch as f64).sqrt();
        for batch in order.chunks(config.batch_size) {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            let mut loss = 0.0;
            for &i in batch {
                let (x, y) = &rows[i];
                let p = sigmoid(model.logit(x));
                let w = class_weight[*y as usize];
                let err = w * (p - y);
                loss -= w * (y * p.max(1e-12).ln() + (1.0 - y) * (1.0 - p).max(1e-12).ln());
                for ((g, xj), (m, s)) in grad_w.iter_mut().zip(x).zip(model.mean.iter().zip(&model.inv_std)) {
                    *g += err * (xj - m) * s;
                }
                grad_b += err;
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: epoch, loss });
            }
            let bn = batch.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&grad_w) {
                *w -= lr * (g / bn + config.l2 * *w);
            }
            model.bias -= lr * grad_b / bn;
        }
    }
    Ok(model)
}
