//! Per-node MAC state machines and frame definitions.
//!
//! Three roles exist: one PAN coordinator that owns the schedule and emits
//! superbeacons in slot 0, star coordinators that beacon in their guaranteed
//! beacon slots and relay requests, and simple nodes. Machines are sequential
//! and interact only through frames the engine carries over the radio.

use crate::radio::Position;
use crate::schedule::{
    Allocation, Direction, MergeContext, MergeOutcome, Origin, RssiReport, ScheduleError,
    ScheduleTable, SlotEntry, SlotRequest,
};
use crate::time::SimTime;
use crate::types::{Destination, NodeId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use thiserror::Error;

/// Radio wake-up transition time.
pub const WAKE_TRANSITION_US: u64 = 330;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("node {0} has not heard a superbeacon within the horizon")]
    NotSynchronized(NodeId),
    #[error("reservation level {level} exceeds n_max {n_max}")]
    LevelOutOfRange { level: u8, n_max: u8 },
    #[error("channel access failed after the maximum number of backoffs")]
    ChannelAccessFailure,
    #[error("frame of {symbols} symbols does not fit a {slot_symbols}-symbol slot")]
    FrameTooLong { symbols: u64, slot_symbols: u64 },
}

// ─── Frames ─────────────────────────────────────────────────────────────────

/// Why the PAN coordinator turned a request down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrantRefusal {
    SlotExhausted,
    LevelOutOfRange,
    OwnerIsPeer,
}

impl fmt::Display for GrantRefusal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GrantRefusal::SlotExhausted => write!(f, "slot-exhausted"),
            GrantRefusal::LevelOutOfRange => write!(f, "level-out-of-range"),
            GrantRefusal::OwnerIsPeer => write!(f, "owner-is-peer"),
        }
    }
}

/// Outcome of one GTS request, broadcast inside a superbeacon. Grants name
/// the superframe counter at which the new table takes effect, so in-flight
/// guarantees are never revoked mid-horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GtsConfirm {
    Granted { allocation: Allocation, effective_at: u64 },
    Refused { owner: NodeId, reason: GrantRefusal },
}

impl GtsConfirm {
    pub fn owner(&self) -> NodeId {
        match self {
            GtsConfirm::Granted { allocation, .. } => allocation.owner,
            GtsConfirm::Refused { owner, .. } => *owner,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrameKind {
    Superbeacon { superframe: u64, confirms: Vec<GtsConfirm> },
    Beacon { superframe: u64 },
    Data,
    GtsRequest { owner: NodeId, peer: NodeId, level: u8, direction: Direction },
    RssiReportMsg(RssiReport),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: FrameKind,
    pub source: NodeId,
    pub destination: Destination,
    /// On-air length in symbol times (2 symbols per encoded byte).
    pub payload_symbols: u64,
    pub seq: u32,
}

impl Frame {
    pub fn new(kind: FrameKind, source: NodeId, destination: Destination, seq: u32) -> Self {
        let payload_symbols = match &kind {
            FrameKind::Superbeacon { confirms, .. } => 40 + 8 * confirms.len() as u64,
            FrameKind::Beacon { .. } => 32,
            FrameKind::Data => 48,
            FrameKind::GtsRequest { .. } => 28,
            FrameKind::RssiReportMsg(r) => 24 + 4 * r.rssi_dbm.len() as u64,
        };
        Frame { kind, source, destination, payload_symbols, seq }
    }

    pub fn duration(&self, symbol_us: u64) -> SimTime {
        SimTime(self.payload_symbols * symbol_us)
    }

    /// Every frame except the superbeacon (whose payload is deliberately not
    /// modeled against slot duration) must fit one slot.
    pub fn check_fits_slot(&self, slot_symbols: u64) -> Result<(), ProtocolError> {
        if matches!(self.kind, FrameKind::Superbeacon { .. }) {
            return Ok(());
        }
        if self.payload_symbols > slot_symbols {
            return Err(ProtocolError::FrameTooLong {
                symbols: self.payload_symbols,
                slot_symbols,
            });
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            FrameKind::Superbeacon { .. } => "superbeacon",
            FrameKind::Beacon { .. } => "beacon",
            FrameKind::Data => "data",
            FrameKind::GtsRequest { .. } => "gts-request",
            FrameKind::RssiReportMsg(_) => "rssi-report",
        }
    }
}

// ─── Energy accounting ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeState {
    Dozing,
    AwakeListening,
    Transmitting,
    Waking,
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeState::Dozing => "dozing",
            NodeState::AwakeListening => "awake-listening",
            NodeState::Transmitting => "transmitting",
            NodeState::Waking => "waking",
        };
        write!(f, "{s}")
    }
}

/// Current drawn per state, µA.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentProfile {
    pub doze_ua: f64,
    pub listen_ua: f64,
    pub tx_ua: f64,
    pub waking_ua: f64,
}

impl Default for CurrentProfile {
    fn default() -> Self {
        CurrentProfile { doze_ua: 40.0, listen_ua: 15_000.0, tx_ua: 17_000.0, waking_ua: 3_000.0 }
    }
}

impl CurrentProfile {
    fn current_ua(&self, state: NodeState) -> f64 {
        match state {
            NodeState::Dozing => self.doze_ua,
            NodeState::AwakeListening => self.listen_ua,
            NodeState::Transmitting => self.tx_ua,
            NodeState::Waking => self.waking_ua,
        }
    }
}

/// Accumulated time per radio state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyLedger {
    per_state_us: BTreeMap<NodeState, u64>,
}

impl EnergyLedger {
    pub fn tick(&mut self, state: NodeState, duration_us: u64) {
        if duration_us == 0 {
            return;
        }
        *self.per_state_us.entry(state).or_insert(0) += duration_us;
    }

    pub fn time_in(&self, state: NodeState) -> u64 {
        self.per_state_us.get(&state).copied().unwrap_or(0)
    }

    pub fn states(&self) -> impl Iterator<Item = (NodeState, u64)> + '_ {
        self.per_state_us.iter().map(|(s, us)| (*s, *us))
    }

    /// Total charge in µA·s.
    pub fn charge_ua_s(&self, profile: &CurrentProfile) -> f64 {
        self.per_state_us
            .iter()
            .map(|(state, us)| profile.current_ua(*state) * (*us as f64) / 1e6)
            .sum()
    }

    /// Total charge in µAh.
    pub fn charge_uah(&self, profile: &CurrentProfile) -> f64 {
        self.charge_ua_s(profile) / 3600.0
    }
}

// ─── Slotted CSMA/CA ────────────────────────────────────────────────────────

/// One backoff period: 20 symbols.
pub const BACKOFF_PERIOD_SYMBOLS: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsmaConfig {
    pub min_be: u8,
    pub max_be: u8,
    pub max_backoffs: u8,
}

impl Default for CsmaConfig {
    fn default() -> Self {
        CsmaConfig { min_be: 3, max_be: 5, max_backoffs: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CsmaOutcome {
    /// Still backing off or between the two clear-channel assessments.
    Pending,
    /// Both assessments came back clear; transmit at the next period boundary.
    TxNow,
    /// NB exceeded the retry cap; report ChannelAccessFailure.
    Failed,
}

/// Slotted CSMA/CA for one frame. The engine advances it once per backoff
/// period: `advance_backoff` while counting down, then `report_cca` with the
/// sensed channel. Two consecutive clear assessments earn the transmission,
/// which therefore starts two periods after the countdown expires. The
/// machine never observes time itself, so a CAP boundary simply pauses it.
#[derive(Debug, Clone)]
pub struct CsmaMachine {
    cfg: CsmaConfig,
    nb: u8,
    be: u8,
    countdown: u32,
    second_cca: bool,
    failed: bool,
}

impl CsmaMachine {
    pub fn new<R: Rng + ?Sized>(cfg: CsmaConfig, rng: &mut R) -> Self {
        let be = cfg.min_be;
        let countdown = rng.random_range(0..(1u32 << be));
        CsmaMachine { cfg, nb: 0, be, countdown, second_cca: false, failed: false }
    }

    pub fn wants_cca(&self) -> bool {
        !self.failed && self.countdown == 0
    }

    pub fn failed(&self) -> bool {
        self.failed
    }

    pub fn nb(&self) -> u8 {
        self.nb
    }

    pub fn be(&self) -> u8 {
        self.be
    }

    /// One backoff period elapsed with the countdown still positive.
    pub fn advance_backoff(&mut self) {
        debug_assert!(!self.wants_cca() && !self.failed);
        self.countdown = self.countdown.saturating_sub(1);
    }

    /// Feed one clear-channel assessment taken at a period boundary.
    pub fn report_cca<R: Rng + ?Sized>(&mut self, busy: bool, rng: &mut R) -> CsmaOutcome {
        debug_assert!(self.wants_cca());
        if !busy {
            if self.second_cca {
                return CsmaOutcome::TxNow;
            }
            self.second_cca = true;
            return CsmaOutcome::Pending;
        }
        self.second_cca = false;
        self.nb += 1;
        self.be = (self.be + 1).min(self.cfg.max_be);
        if self.nb > self.cfg.max_backoffs {
            self.failed = true;
            return CsmaOutcome::Failed;
        }
        self.countdown = rng.random_range(0..(1u32 << self.be));
        CsmaOutcome::Pending
    }
}

// ─── Node machines ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    PanCoordinator,
    StarCoordinator,
    SimpleNode,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::PanCoordinator => "pan-coordinator",
            Role::StarCoordinator => "star-coordinator",
            Role::SimpleNode => "simple-node",
        };
        write!(f, "{s}")
    }
}

/// What a node does for one slot, decided at the slot boundary purely from
/// the schedule and its own state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotAction {
    TransmitSuperbeacon,
    TransmitBeacon,
    TransmitData,
    Listen,
    Doze,
}

/// A data frame waiting for its guaranteed slot, stamped for latency stats.
#[derive(Debug, Clone, PartialEq)]
pub struct QueuedFrame {
    pub frame: Frame,
    pub queued_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SyncAnchor {
    superframe: u64,
}

/// Sequential per-node protocol state, driven by engine callbacks.
#[derive(Debug, Clone)]
pub struct NodeMachine {
    pub id: NodeId,
    pub role: Role,
    pub parent: Option<NodeId>,
    pub position: Position,
    /// Constant offset of this node's own clock, µs.
    pub clock_offset_us: i64,
    /// Offset actually applied to slot boundaries: own offset plus the sync
    /// source's skew, so a chain through a coordinator compounds.
    pub effective_offset_us: i64,
    pub state: NodeState,
    pub energy: EnergyLedger,
    pub tx_power_dbm: f64,
    pub mobile: bool,
    /// Control frames waiting for contention access.
    pub pending: VecDeque<Frame>,
    /// Data frames waiting for the node's guaranteed slot.
    pub data_queue: VecDeque<QueuedFrame>,
    sync: Option<SyncAnchor>,
    next_seq: u32,
}

impl NodeMachine {
    pub fn new(id: NodeId, role: Role, parent: Option<NodeId>, position: Position) -> Self {
        NodeMachine {
            id,
            role,
            parent,
            position,
            clock_offset_us: 0,
            effective_offset_us: 0,
            state: NodeState::Dozing,
            energy: EnergyLedger::default(),
            tx_power_dbm: 0.0,
            mobile: false,
            pending: VecDeque::new(),
            data_queue: VecDeque::new(),
            sync: None,
            next_seq: 0,
        }
    }

    pub fn next_seq(&mut self) -> u32 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    /// The PAN coordinator is the clock source and always synchronized;
    /// everyone else must have decoded a superbeacon (or their coordinator's
    /// beacon) within one horizon.
    pub fn is_synchronized(&self, now_superframe: u64, horizon: u64) -> bool {
        if self.role == Role::PanCoordinator {
            return true;
        }
        match self.sync {
            Some(a) => now_superframe.saturating_sub(a.superframe) <= horizon,
            None => false,
        }
    }

    /// Anchor slot boundaries to a decoded beacon. `source_skew_us` is the
    /// skew the beacon itself arrived with (zero for the PAN coordinator's
    /// superbeacon, the coordinator's own effective offset for a relayed
    /// anchor), so offsets compound down the synchronization chain.
    pub fn sync_to_beacon(&mut self, superframe: u64, source_skew_us: i64) {
        self.sync = Some(SyncAnchor { superframe });
        self.effective_offset_us = source_skew_us + self.clock_offset_us;
    }

    /// Decide this slot's action. `measuring` marks a coordinator told to
    /// stay awake in foreign dedicated slots to tabulate RSSI for merges.
    pub fn on_slot_boundary(
        &self,
        table: &ScheduleTable,
        superframe: u64,
        slot: u16,
        measuring: bool,
    ) -> Result<SlotAction, ProtocolError> {
        if !self.is_synchronized(superframe, table.config().horizon()) {
            return Err(ProtocolError::NotSynchronized(self.id));
        }
        let entry = table
            .entry_at(superframe, slot)
            .expect("engine only asks about in-range slots");
        let action = match entry {
            SlotEntry::Superbeacon => {
                if self.role == Role::PanCoordinator {
                    SlotAction::TransmitSuperbeacon
                } else {
                    SlotAction::Listen
                }
            }
            SlotEntry::Gbs(c) if c == self.id => SlotAction::TransmitBeacon,
            SlotEntry::Gbs(c) => {
                if self.parent == Some(c) || self.role == Role::PanCoordinator {
                    SlotAction::Listen
                } else {
                    SlotAction::Doze
                }
            }
            SlotEntry::Gts(a) => self.dedicated_action(&[a], measuring),
            SlotEntry::Sgts(a, b) => self.dedicated_action(&[a, b], measuring),
            SlotEntry::Cap => {
                let relay_duty = matches!(self.role, Role::PanCoordinator | Role::StarCoordinator);
                if relay_duty || !self.pending.is_empty() {
                    SlotAction::Listen
                } else {
                    SlotAction::Doze
                }
            }
            SlotEntry::Inactive => SlotAction::Doze,
        };
        Ok(action)
    }

    fn dedicated_action(&self, allocs: &[Allocation], measuring: bool) -> SlotAction {
        for a in allocs {
            if a.transmitter() == self.id {
                return if self.data_queue.is_empty() {
                    SlotAction::Doze
                } else {
                    SlotAction::TransmitData
                };
            }
            if a.receiver() == self.id {
                return SlotAction::Listen;
            }
        }
        if measuring {
            SlotAction::Listen
        } else {
            SlotAction::Doze
        }
    }

    /// Queue a GTS request for contention access toward the parent (simple
    /// nodes) or the PAN coordinator directly (star coordinators).
    pub fn request_gts(
        &mut self,
        peer: NodeId,
        level: u8,
        direction: Direction,
        n_max: u8,
        pan: NodeId,
    ) -> Result<(), ProtocolError> {
        if level > n_max {
            return Err(ProtocolError::LevelOutOfRange { level, n_max });
        }
        let to = self.parent.unwrap_or(pan);
        let seq = self.next_seq();
        let frame = Frame::new(
            FrameKind::GtsRequest { owner: self.id, peer, level, direction },
            self.id,
            Destination::Node(to),
            seq,
        );
        self.pending.push_back(frame);
        Ok(())
    }
}

// ─── PAN coordinator brain ──────────────────────────────────────────────────

/// Slot-sharing policy knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgtsPolicy {
    pub enabled: bool,
    /// Required RSSI margin at both receivers, dB.
    pub threshold_db: f64,
}

impl Default for SgtsPolicy {
    fn default() -> Self {
        SgtsPolicy { enabled: false, threshold_db: 10.0 }
    }
}

/// Central scheduling state. Requests land on the *pending* table, confirms
/// go out in the next superbeacons, and the pending table becomes active at
/// a horizon boundary so granted cells never move mid-horizon.
#[derive(Debug, Clone)]
pub struct PanState {
    pub active: ScheduleTable,
    pub pending: ScheduleTable,
    pub outbox: Vec<GtsConfirm>,
    pub reports: BTreeMap<NodeId, RssiReport>,
    pub policy: SgtsPolicy,
    pub mobile: BTreeSet<NodeId>,
    pub sensitivity_dbm: f64,
}

impl PanState {
    pub fn new(table: ScheduleTable, policy: SgtsPolicy, sensitivity_dbm: f64) -> Self {
        PanState {
            active: table.clone(),
            pending: table,
            outbox: Vec::new(),
            reports: BTreeMap::new(),
            policy,
            mobile: BTreeSet::new(),
            sensitivity_dbm,
        }
    }

    fn next_boundary(&self, now_superframe: u64) -> u64 {
        let h = self.active.config().horizon();
        (now_superframe / h + 1) * h
    }

    /// Allocate on the pending table and queue the confirm. Re-asking for an
    /// owner that already holds a pending allocation re-announces it instead
    /// of double-allocating (superbeacons can be missed). The second result
    /// reports whether satisfying the request re-packed the table.
    pub fn handle_request(&mut self, req: SlotRequest, now_superframe: u64) -> (GtsConfirm, bool) {
        let effective_at = self.next_boundary(now_superframe);
        if let Some((existing, _)) =
            self.pending.allocations().into_iter().find(|(a, _)| a.owner == req.owner)
        {
            let confirm = GtsConfirm::Granted { allocation: existing, effective_at };
            self.outbox.push(confirm);
            return (confirm, false);
        }
        let mut replanned = false;
        let confirm = match self.pending.allocate_gts(req) {
            Ok(grant) => {
                replanned = grant.replanned;
                GtsConfirm::Granted { allocation: grant.allocation, effective_at }
            }
            Err(e) => {
                let reason = match e {
                    ScheduleError::LevelOutOfRange { .. } => GrantRefusal::LevelOutOfRange,
                    ScheduleError::OwnerIsPeer(_) => GrantRefusal::OwnerIsPeer,
                    _ => GrantRefusal::SlotExhausted,
                };
                GtsConfirm::Refused { owner: req.owner, reason }
            }
        };
        self.outbox.push(confirm);
        (confirm, replanned)
    }

    /// Grant a slot nobody asked for (coordinator anticipation).
    pub fn grant_pds(
        &mut self,
        owner: NodeId,
        peer: NodeId,
        level: u8,
        direction: Direction,
        now_superframe: u64,
    ) -> (GtsConfirm, bool) {
        self.handle_request(
            SlotRequest { owner, peer, level, origin: Origin::Pds, direction },
            now_superframe,
        )
    }

    pub fn note_report(&mut self, report: RssiReport) {
        self.reports.insert(report.receiver, report);
    }

    /// Try to merge every same-level pair of dedicated slots on the pending
    /// table. Pairs lacking fresh reports are skipped silently (they may
    /// merge later); accepted merges queue confirms for the moved owner.
    pub fn consider_merges(&mut self, now_superframe: u64) -> Vec<(NodeId, NodeId, MergeOutcome)> {
        if !self.policy.enabled {
            return Vec::new();
        }
        let mut outcomes = Vec::new();
        let mut attempted: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
        loop {
            let singles: Vec<Allocation> = self
                .pending
                .allocations()
                .into_iter()
                .filter(|(_, shared)| !shared)
                .map(|(a, _)| a)
                .collect();
            let mut merged_any = false;
            'outer: for i in 0..singles.len() {
                for j in (i + 1)..singles.len() {
                    let (a, b) = (singles[i], singles[j]);
                    if a.level != b.level || a.receiver() == b.receiver() {
                        continue;
                    }
                    if !attempted.insert((a.owner, b.owner)) {
                        continue;
                    }
                    let ctx = MergeContext {
                        reports: &self.reports,
                        threshold_db: self.policy.threshold_db,
                        sensitivity_dbm: self.sensitivity_dbm,
                        now_superframe,
                        mobile: &self.mobile,
                    };
                    match self.pending.try_merge_sgts(a.owner, b.owner, &ctx) {
                        Ok(MergeOutcome::Merged { slot_index, phase, level }) => {
                            outcomes.push((
                                a.owner,
                                b.owner,
                                MergeOutcome::Merged { slot_index, phase, level },
                            ));
                            let effective_at = self.next_boundary(now_superframe);
                            let moved = Allocation { slot_index, phase, ..b };
                            self.outbox.push(GtsConfirm::Granted { allocation: moved, effective_at });
                            merged_any = true;
                            break 'outer;
                        }
                        Ok(MergeOutcome::Refused(r)) => {
                            outcomes.push((a.owner, b.owner, MergeOutcome::Refused(r)));
                        }
                        Err(_) => {} // no usable report yet; retry next time
                    }
                }
            }
            if !merged_any {
                break;
            }
        }
        outcomes
    }

    /// Cross a horizon boundary: the pending table becomes the active one.
    pub fn roll_boundary(&mut self) {
        self.active = self.pending.clone();
    }

    /// Drain queued confirms into a superbeacon payload.
    pub fn take_confirms(&mut self) -> Vec<GtsConfirm> {
        std::mem::take(&mut self.outbox)
    }
}
