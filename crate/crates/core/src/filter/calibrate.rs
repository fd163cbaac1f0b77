//! Keep-fraction to threshold calibration.
//!
//! For a target keep fraction `f` over `n` scores, the threshold is the
//! `(1 - f)` order statistic: the smallest observed score `t` with
//! `|{s : s > t}| <= floor(f * n)`. Combined with the strict `>` filter this
//! keeps at most `floor(f * n)` records, and exactly that many when there are
//! no ties at the threshold.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

pub const DEFAULT_KEEP_FRACTION: f64 = 0.15;
pub const DEFAULT_RESERVOIR_CAPACITY: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Keeps every score; threshold is exact.
    Exact,
    /// Uniform reservoir sample of fixed capacity (Algorithm R).
    Reservoir { capacity: usize },
}

impl CalibrationMode {
    pub fn name(&self) -> &'static str {
        match self {
            CalibrationMode::Exact => "exact",
            CalibrationMode::Reservoir { .. } => "reservoir",
        }
    }
}

impl Default for CalibrationMode {
    fn default() -> Self {
        CalibrationMode::Exact
    }
}

/// Streaming threshold calibrator.
#[derive(Debug, Clone)]
pub struct Calibrator {
    mode: CalibrationMode,
    sample: Vec<f32>,
    seen: u64,
    min: f32,
    rng: rng::Rng,
}

impl Calibrator {
    pub fn new(mode: CalibrationMode, seed: u64) -> Result<Self> {
        if let CalibrationMode::Reservoir { capacity: 0 } = mode {
            return Err(Error::config("reservoir capacity must be >= 1"));
        }
        Ok(Self {
            mode,
            sample: Vec::new(),
            seen: 0,
            min: f32::INFINITY,
            rng: rng::stream(seed, streams::RESERVOIR),
        })
    }

    pub fn observe(&mut self, score: f32) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score {score} at position {}", self.seen)));
        }
        self.seen += 1;
        self.min = self.min.min(score);
        match self.mode {
            CalibrationMode::Exact => self.sample.push(score),
            CalibrationMode::Reservoir { capacity } => {
                if self.sample.len() < capacity {
                    self.sample.push(score);
                } else {
                    let j = self.rng.random_range(0..self.seen);
                    if (j as usize) < capacity {
                        self.sample[j as usize] = score;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// Threshold for `keep_fraction` over everything observed so far.
    pub fn threshold(&self, keep_fraction: f64) -> Result<f32> {
        check_keep_fraction(keep_fraction)?;
        if self.seen == 0 {
            return Err(Error::Empty("score stream".into()));
        }
        if keep_fraction >= 1.0 {
            return Ok(self.min.next_down());
        }
        let mut sample = self.sample.clone();
        Ok(order_statistic_threshold(&mut sample, keep_fraction))
    }
}

pub fn check_keep_fraction(keep_fraction: f64) -> Result<()> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::config(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    Ok(())
}

/// Number of records a keep fraction allows out of `n`.
pub fn keep_budget(keep_fraction: f64, n: usize) -> usize {
    ((keep_fraction * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Exact threshold over a non-empty, finite sample (reorders `scores`).
fn order_statistic_threshold(scores: &mut [f32], keep_fraction: f64) -> f32 {
    let n = scores.len();
    let keep = keep_budget(keep_fraction, n);
    if keep >= n {
        let min = scores.iter().copied().fold(f32::INFINITY, f32::min);
        return min.next_down();
    }
    let (_, t, _) = scores.select_nth_unstable_by(n - keep - 1, f32::total_cmp);
    *t
}

/// Calibrates a threshold over a whole score stream.
pub fn calibrate_threshold(
    scores: impl IntoIterator<Item = f32>,
    keep_fraction: f64,
    mode: CalibrationMode,
    seed: u64,
) -> Result<f32> {
    check_keep_fraction(keep_fraction)?;
    let mut cal = Calibrator::new(mode, seed)?;
    for s in scores {
        cal.observe(s)?;
    }
    cal.threshold(keep_fraction)
}
