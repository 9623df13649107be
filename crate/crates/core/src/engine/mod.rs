//! Deterministic discrete-event core.
//!
//! [`queue`] orders events by (time, node, insertion sequence); [`world`]
//! steps the whole network slot by slot; [`trace`] records everything in a
//! line format stable enough to hash. Randomness comes exclusively from
//! [`rng_stream`], which derives an independent reproducible stream per
//! (master seed, node, purpose) triple.

pub mod queue;
pub mod trace;
pub mod world;

pub use queue::{EventQueue, QueueError};
pub use trace::{fnv1a64, Trace, TraceBody, TraceEvent};
pub use world::{
    CapStats, LatencyRecord, NodeSpec, PdsSpec, RequestSpec, TrafficKind, TrafficSpec, World,
    WorldConfig,
};

use crate::protocol::ProtocolError;
use crate::radio::RadioError;
use crate::schedule::ScheduleError;
use crate::types::NodeId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("topology invalid: {0}")]
    TopologyInvalid(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Radio(#[from] RadioError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Queue(#[from] QueueError),
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent deterministic stream for one (node, purpose) pair.
///
/// The triple is folded into a 64-bit seed (purpose hashed, parts whitened
/// with splitmix64 so near-identical inputs land far apart) and expanded by
/// the ChaCha seeder. Distinct triples give unrelated streams; equal triples
/// replay exactly.
pub fn rng_stream(master_seed: u64, node: NodeId, purpose: &str) -> ChaCha8Rng {
    let mixed = splitmix64(master_seed)
        ^ splitmix64(fnv1a64(purpose.as_bytes()))
        ^ splitmix64(0x5851_f42d_4c95_7f2d ^ node.0 as u64);
    ChaCha8Rng::seed_from_u64(splitmix64(mixed))
}
