//! Data filtering networks: scorers, threshold calibration and pool filtering.

mod apply;
mod binary;
mod calibrate;
mod scorer;

pub use apply::{apply_dfn, filter_pool, Dfn, FilterReport, Selection, ShardReport, DEFAULT_RECORDS_PER_SHARD};
pub use binary::{train_binary_filter, BinaryFilterConfig, FeatureSet, LogisticFilter};
pub use calibrate::{
    calibrate_threshold, check_keep_fraction, keep_budget, CalibrationMode, Calibrator, DEFAULT_KEEP_FRACTION, DEFAULT_RESERVOIR_CAPACITY,
};
pub use scorer::{clip_filter, score_alignment, Scorer, ScorerKind};
