//! Line-oriented run traces.
//!
//! One event per line, stable field order, floats printed with four
//! decimals — equal runs produce byte-identical text, so a single hash
//! witnesses determinism.

use crate::protocol::NodeState;
use crate::time::SimTime;
use crate::types::{Destination, NodeId};
use std::fmt;

/// FNV-1a over a byte stream; tiny, stable, good enough to fingerprint text.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceBody {
    Tx {
        kind: &'static str,
        destination: Destination,
        superframe: u64,
        slot: u16,
        duration: SimTime,
    },
    RxDecoded {
        from: NodeId,
        kind: &'static str,
        rssi_dbm: f64,
        superframe: u64,
        slot: u16,
    },
    RxCollision {
        strongest_dbm: f64,
        superframe: u64,
        slot: u16,
    },
    /// Synchronization anchor acquired from a decoded beacon.
    Sync {
        source: NodeId,
        skew_us: i64,
        superframe: u64,
    },
    Grant {
        owner: NodeId,
        peer: NodeId,
        slot: u16,
        level: u8,
        phase: u16,
        origin: &'static str,
        replanned: bool,
        effective_at: u64,
    },
    Refusal {
        owner: NodeId,
        reason: &'static str,
    },
    Merge {
        owner_a: NodeId,
        owner_b: NodeId,
        slot: u16,
        phase: u16,
    },
    MergeRefused {
        owner_a: NodeId,
        owner_b: NodeId,
        reason: String,
    },
    Boundary {
        superframe: u64,
    },
    Energy {
        state: NodeState,
        duration: SimTime,
    },
    CsmaFailure {
        nb: u8,
    },
    CsmaTxStart {
        superframe: u64,
        slot: u16,
    },
}

impl TraceBody {
    pub fn category(&self) -> &'static str {
        match self {
            TraceBody::Tx { .. } => "tx",
            TraceBody::RxDecoded { .. } | TraceBody::RxCollision { .. } => "rx-outcome",
            TraceBody::Sync { .. } => "beacon",
            TraceBody::Grant { .. }
            | TraceBody::Refusal { .. }
            | TraceBody::Merge { .. }
            | TraceBody::MergeRefused { .. }
            | TraceBody::Boundary { .. } => "schedule-change",
            TraceBody::Energy { .. } => "energy",
            TraceBody::CsmaFailure { .. } | TraceBody::CsmaTxStart { .. } => "csma",
        }
    }
}

impl fmt::Display for TraceBody {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceBody::Tx { kind, destination, superframe, slot, duration } => {
                write!(f, "kind={kind} dst={destination} sf={superframe} slot={slot} dur={duration}")
            }
            TraceBody::RxDecoded { from, kind, rssi_dbm, superframe, slot } => write!(
                f,
                "result=decoded from={from} kind={kind} rssi={rssi_dbm:.4} sf={superframe} slot={slot}"
            ),
            TraceBody::RxCollision { strongest_dbm, superframe, slot } => write!(
                f,
                "result=collision strongest={strongest_dbm:.4} sf={superframe} slot={slot}"
            ),
            TraceBody::Sync { source, skew_us, superframe } => {
                write!(f, "event=sync source={source} skew={skew_us} sf={superframe}")
            }
            TraceBody::Grant { owner, peer, slot, level, phase, origin, replanned, effective_at } => {
                write!(
                    f,
                    "what=grant owner={owner} peer={peer} slot={slot} level={level} phase={phase} origin={origin} replanned={replanned} effective={effective_at}"
                )
            }
            TraceBody::Refusal { owner, reason } => {
                write!(f, "what=refusal owner={owner} reason={reason}")
            }
            TraceBody::Merge { owner_a, owner_b, slot, phase } => {
                write!(f, "what=merge owner_a={owner_a} owner_b={owner_b} slot={slot} phase={phase}")
            }
            TraceBody::MergeRefused { owner_a, owner_b, reason } => {
                write!(f, "what=merge-refusal owner_a={owner_a} owner_b={owner_b} reason={reason}")
            }
            TraceBody::Boundary { superframe } => write!(f, "what=boundary sf={superframe}"),
            TraceBody::Energy { state, duration } => write!(f, "state={state} dur={duration}"),
            TraceBody::CsmaFailure { nb } => write!(f, "event=failure nb={nb}"),
            TraceBody::CsmaTxStart { superframe, slot } => {
                write!(f, "event=tx-start sf={superframe} slot={slot}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time: SimTime,
    pub node: NodeId,
    pub body: TraceBody,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} node={} cat={} {}", self.time, self.node, self.body.category(), self.body)
    }
}

/// The full ordered record of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn push(&mut self, time: SimTime, node: NodeId, body: TraceBody) {
        self.events.push(TraceEvent { time, node, body });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    /// Stable-sort everything emitted since `from` by (time, node). Slot
    /// processing emits per machine, not per instant; this restores the
    /// total order the trace contract promises.
    pub fn sort_tail(&mut self, from: usize) {
        self.events[from..].sort_by_key(|e| (e.time, e.node));
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// The whole trace as text, one event per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", fnv1a64(self.render().as_bytes()))
    }
}
