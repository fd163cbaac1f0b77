use rand::seq::{index, SliceRandom};

use super::pool::Pool;
use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Builds a pool of exactly `total` records: `round((1 - unfiltered_fraction) * total)`
/// drawn without replacement from `high_quality`, the rest from `noisy`.
///
/// The combined records are shuffled; the result depends only on the inputs
/// and `seed`.
pub fn mix_pools(high_quality: &Pool, noisy: &Pool, unfiltered_fraction: f64, total: usize, seed: u64) -> Result<Pool> {
    if !(0.0..=1.0).contains(&unfiltered_fraction) {
        return Err(Error::config(format!("unfiltered_fraction {unfiltered_fraction} outside [0, 1]")));
    }
    if high_quality.d_img() != noisy.d_img() || high_quality.d_txt() != noisy.d_txt() {
        return Err(Error::DimensionMismatch(format!(
            "high-quality pool is {}x{}, noisy pool is {}x{}",
            high_quality.d_img(),
            high_quality.d_txt(),
            noisy.d_img(),
            noisy.d_txt()
        )));
    }
    let n_hq = ((1.0 - unfiltered_fraction) * total as f64).round() as usize;
    let n_noisy = total - n_hq;
    for (want, have) in [(n_hq, high_quality.len()), (n_noisy, noisy.len())] {
        if want > have {
            return Err(Error::InsufficientRecords {
                requested: want,
                available: have,
            });
        }
    }

    let mut rng = rng::stream(seed, streams::MIX);
    let mut hq_idx = index::sample(&mut rng, high_quality.len(), n_hq).into_vec();
    let mut noisy_idx = index::sample(&mut rng, noisy.len(), n_noisy).into_vec();
    hq_idx.sort_unstable();
    noisy_idx.sort_unstable();

    let mut out = high_quality.select(&hq_idx);
    out.extend(&noisy.select(&noisy_idx))?;
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.shuffle(&mut rng);
    Ok(out.select(&order))
}
