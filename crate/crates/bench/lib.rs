//! Shared fixtures for the criterion benchmarks.

use dfn_core::data::{generate_pool, Pool};
use dfn_core::{SyntheticSpec, TwoTowerModel};

/// A default-shaped noisy pool of `n` records.
pub fn raw_pool(n: usize) -> Pool {
    generate_pool(&SyntheticSpec::noisy(0, 1, 0), n).expect("default spec is valid")
}

/// An untrained model with the default tower shapes; scoring cost does not
/// depend on the weights.
pub fn model() -> TwoTowerModel {
    let s = SyntheticSpec::default();
    TwoTowerModel::init(s.d_img, s.d_txt, 32, 7)
}
