//! Totally ordered event queue.
//!
//! Events fire in (time, node id, insertion sequence) order, which pins the
//! execution order of simultaneous events and makes runs reproducible.

use crate::time::SimTime;
use crate::types::NodeId;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QueueError {
    #[error("event scheduled at {at} which is before now ({now})")]
    PastEvent { at: SimTime, now: SimTime },
}

#[derive(Debug, Clone)]
pub struct EventQueue<E> {
    events: BTreeMap<(SimTime, NodeId, u64), E>,
    now: SimTime,
    seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue { events: BTreeMap::new(), now: SimTime::ZERO, seq: 0 }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    /// Time of the next event without popping it.
    pub fn peek_time(&self) -> Option<SimTime> {
        self.events.keys().next().map(|(t, _, _)| *t)
    }

    pub fn schedule(&mut self, at: SimTime, node: NodeId, event: E) -> Result<(), QueueError> {
        if at < self.now {
            return Err(QueueError::PastEvent { at, now: self.now });
        }
        self.events.insert((at, node, self.seq), event);
        self.seq += 1;
        Ok(())
    }

    /// Pop the next event and advance the clock to it.
    pub fn pop(&mut self) -> Option<(SimTime, NodeId, E)> {
        let key = *self.events.keys().next()?;
        let event = self.events.remove(&key).expect("key just observed");
        self.now = key.0;
        Some((key.0, key.1, event))
    }
}
