//! Identifiers shared by every layer.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Short address of a node inside the PAN.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub u16);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u16> for NodeId {
    fn from(v: u16) -> Self {
        NodeId(v)
    }
}

/// Where a frame is headed. Beacons are broadcast; everything else is
/// addressed to a single node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Destination {
    Node(NodeId),
    Broadcast,
}

impl Destination {
    /// True when a frame with this destination is meant for `node`.
    pub fn accepts(&self, node: NodeId) -> bool {
        match self {
            Destination::Node(n) => *n == node,
            Destination::Broadcast => true,
        }
    }
}

impl fmt::Display for Destination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Destination::Node(n) => write!(f, "{n}"),
            Destination::Broadcast => write!(f, "*"),
        }
    }
}
