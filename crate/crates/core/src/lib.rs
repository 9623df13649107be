//! Deterministic simulator and protocol library for a beacon-scheduled
//! low-rate WPAN MAC.
//!
//! A PAN coordinator divides time into superframes and broadcasts a
//! superbeacon in slot 0 of every one. Star coordinators get a guaranteed
//! beacon slot each (GBS), and data slots are dedicated to single nodes at a
//! *reservation level* `n`: a level-`n` slot recurs every `2^n` superframes,
//! so the whole schedule repeats after `2^n_max` superframes. Slots can be
//! dedicated on a node's request (GTS) or handed out unprompted by the
//! coordinator (PDS). Two dedicated slots may be merged into one *shared*
//! slot (SGTS) when RSSI reports show that each receiver hears its own
//! transmitter far enough above the other pair's transmitter.
//!
//! The crate is split along those concerns:
//!
//! * [`schedule`] — superframe timing and the slot table (GBS/GTS/SGTS
//!   allocation, release, merge, validation, dump format);
//! * [`radio`] — log-distance path loss, per-frame shadowing, and two-frame
//!   capture with a timing-advance bias;
//! * [`protocol`] — per-node state machines: slot actions, slotted CSMA/CA,
//!   synchronization, and the energy ledger;
//! * [`engine`] — the discrete-event core: microsecond ticks, the event
//!   queue, seeded RNG streams, the world stepper, and line-oriented traces;
//! * [`scenario`] — the strict TOML scenario format;
//! * [`harness`] — experiment drivers: the schedule demo, the shared-slot
//!   power sweep, window estimation, latency measurement, trace audits, and
//!   the merge-soundness study.
//!
//! Everything is deterministic: one master seed derives independent named
//! RNG streams per node, and identical runs produce byte-identical traces.

pub mod engine;
pub mod harness;
pub mod protocol;
pub mod radio;
pub mod scenario;
pub mod schedule;
pub mod time;
pub mod types;

pub use time::SimTime;
pub use types::{Destination, NodeId};
