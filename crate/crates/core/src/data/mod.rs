//! Record and pool data model, shard files, synthetic generation and mixing.

mod mix;
mod pool;
pub mod shard;
mod synth;

pub use mix::mix_pools;
pub use pool::{Pool, Record, RecordRef, UNKNOWN_CONCEPT};
pub use shard::{read_shards, write_shards, PoolHeader, ShardEntry, ShardSet};
pub use synth::{generate_from_world, generate_pool, Perturbation, SyntheticSpec, World, GEN_CHUNK};
