//! Experiment configuration, the on-disk pipeline, and canned sweeps that
//! emit CSV tables and SVG charts.

mod config;
pub mod pipeline;
pub mod plot;
mod recipes;
mod table;

pub use config::{id_ranges, ExperimentConfig};
pub use recipes::{
    bench_scaling, filter_types, filter_vs_downstream, interventions, inverted_pairs, poison_sweep, robustness, BenchRow,
    FilterTypeRow, GridRow, InterpolationRow, InterventionRow, PoisonRow, RobustnessResult, RobustnessRow, SeedContext,
    ARMS, INTERVENTIONS,
};
pub use table::{append_csv, to_csv, write_file, write_json, TableRow};
