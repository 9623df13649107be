//! The simulated network: machines, schedule, radio, and the event loop.
//!
//! A run is driven by three event kinds: superframe starts (which roll the
//! schedule at horizon boundaries and fan out slot events), slot starts
//! (which execute one whole slot synchronously: actions, transmissions,
//! CSMA tournaments in the CAP, receptions, energy), and timed injections
//! (traffic arrivals, GTS requests, PDS grants). Everything consults node
//! state in id order and all containers iterate deterministically, so a
//! trace is a pure function of (config, master seed).

use super::{rng_stream, EngineError, EventQueue, Trace, TraceBody};
use crate::protocol::{
    CsmaConfig, CsmaMachine, CsmaOutcome, CurrentProfile, Frame, FrameKind, GtsConfirm,
    NodeMachine, NodeState, PanState, ProtocolError, QueuedFrame, Role, SgtsPolicy, SlotAction,
    BACKOFF_PERIOD_SYMBOLS, WAKE_TRANSITION_US,
};
use crate::radio::{
    channel_power_dbm, resolve_reception, survey_rssi, Position, RadioConfig, RadioError,
    RxOutcome, TxAttempt,
};
use crate::schedule::{
    Direction, MergeOutcome, Origin, RssiReport, ScheduleTable, SlotEntry, SlotRequest,
};
use crate::time::SimTime;
use crate::types::{Destination, NodeId};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

// ─── Configuration ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub role: Role,
    pub parent: Option<NodeId>,
    pub position: Position,
    pub tx_power_dbm: f64,
    pub clock_offset_us: i64,
    pub mobile: bool,
}

impl NodeSpec {
    pub fn new(id: u16, role: Role, parent: Option<u16>, x_m: f64, y_m: f64) -> Self {
        NodeSpec {
            id: NodeId(id),
            role,
            parent: parent.map(NodeId),
            position: Position::new(x_m, y_m),
            tx_power_dbm: 0.0,
            clock_offset_us: 0,
            mobile: false,
        }
    }
}

/// Periodic frame injection. `Gts` arrivals queue for the node's dedicated
/// slot (dropped while it has none — the latency guarantee covers admitted
/// traffic only); `Cap` arrivals queue a best-effort data frame to the
/// parent, contended via CSMA/CA.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrafficKind {
    Gts { period_us: u64, start_us: u64 },
    Cap { period_us: u64, start_us: u64 },
}

impl TrafficKind {
    fn start_us(&self) -> u64 {
        match self {
            TrafficKind::Gts { start_us, .. } | TrafficKind::Cap { start_us, .. } => *start_us,
        }
    }

    fn period_us(&self) -> u64 {
        match self {
            TrafficKind::Gts { period_us, .. } | TrafficKind::Cap { period_us, .. } => *period_us,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficSpec {
    pub node: NodeId,
    pub kind: TrafficKind,
}

/// A dedicated-slot request. `at_us: None` installs the grant before the run
/// starts (effective from superframe 0); `Some(t)` makes the node signal it
/// over the air at `t`, with activation at the following horizon boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestSpec {
    pub owner: NodeId,
    pub peer: NodeId,
    pub level: u8,
    pub direction: Direction,
    pub at_us: Option<u64>,
}

/// An unprompted grant issued by the PAN coordinator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdsSpec {
    pub owner: NodeId,
    pub peer: NodeId,
    pub level: u8,
    pub direction: Direction,
    pub at_us: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub superframe: crate::schedule::SuperframeConfig,
    pub radio: RadioConfig,
    pub energy: CurrentProfile,
    pub csma: CsmaConfig,
    pub sgts: SgtsPolicy,
    pub nodes: Vec<NodeSpec>,
    pub traffic: Vec<TrafficSpec>,
    pub requests: Vec<RequestSpec>,
    pub pds: Vec<PdsSpec>,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            superframe: Default::default(),
            radio: Default::default(),
            energy: Default::default(),
            csma: Default::default(),
            sgts: Default::default(),
            nodes: Vec::new(),
            traffic: Vec::new(),
            requests: Vec::new(),
            pds: Vec::new(),
            seed: 1,
        }
    }
}

// ─── Run results ────────────────────────────────────────────────────────────

/// Queue-to-air latency of one guaranteed frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyRecord {
    pub node: NodeId,
    pub level: u8,
    pub queued_at: SimTime,
    pub tx_start: SimTime,
}

impl LatencyRecord {
    pub fn latency(&self) -> SimTime {
        self.tx_start.saturating_sub(self.queued_at)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CapStats {
    /// Best-effort data frames handed to CSMA.
    pub enqueued: u64,
    /// Transmissions actually started.
    pub tx_started: u64,
    /// Channel-access failures (frame dropped or re-queued).
    pub failures: u64,
    /// Data frames decoded at their addressed destination.
    pub delivered: u64,
    /// Collision outcomes observed by listeners in CAP slots.
    pub collisions: u64,
}

// ─── The world ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Ev {
    SuperframeStart { sf: u64 },
    SlotStart { sf: u64, slot: u16 },
    Traffic { idx: usize },
    Request { idx: usize },
    Pds { idx: usize },
}

struct OnAir {
    attempt: TxAttempt,
    frame: Frame,
    end: SimTime,
}

pub struct World {
    cfg: WorldConfig,
    pan_id: NodeId,
    pan: PanState,
    nodes: BTreeMap<NodeId, NodeMachine>,
    queue: EventQueue<Ev>,
    trace: Trace,
    superframe: u64,
    slot_dur: SimTime,
    slot_symbols: u64,
    span_state: BTreeMap<NodeId, (NodeState, SimTime)>,
    csma: BTreeMap<NodeId, CsmaMachine>,
    csma_ready: BTreeSet<NodeId>,
    csma_rng: BTreeMap<NodeId, ChaCha8Rng>,
    radio_rng: BTreeMap<NodeId, ChaCha8Rng>,
    measurements: BTreeMap<NodeId, BTreeMap<NodeId, f64>>,
    dirty_measurements: BTreeSet<NodeId>,
    latencies: Vec<LatencyRecord>,
    cap_stats: CapStats,
    delivered: BTreeMap<NodeId, u64>,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<World, EngineError> {
        cfg.radio.validate()?;
        cfg.superframe.validate()?;
        let bad = |msg: String| EngineError::TopologyInvalid(msg);

        let mut ids = BTreeSet::new();
        let mut pan_id = None;
        for n in &cfg.nodes {
            if !ids.insert(n.id) {
                return Err(bad(format!("duplicate node id {}", n.id)));
            }
            if n.role == Role::PanCoordinator {
                if pan_id.is_some() {
                    return Err(bad("more than one PAN coordinator".into()));
                }
                pan_id = Some(n.id);
            }
            cfg.radio.check_power(n.tx_power_dbm)?;
        }
        let pan_id = pan_id.ok_or_else(|| bad("no PAN coordinator defined".into()))?;
        let by_id: BTreeMap<NodeId, &NodeSpec> = cfg.nodes.iter().map(|n| (n.id, n)).collect();
        let in_range = |a: &NodeSpec, b: &NodeSpec| {
            let d = a.position.distance_m(&b.position);
            cfg.radio.expected_rssi_dbm(a.tx_power_dbm, d) >= cfg.radio.sensitivity_dbm
                && cfg.radio.expected_rssi_dbm(b.tx_power_dbm, d) >= cfg.radio.sensitivity_dbm
        };
        for n in &cfg.nodes {
            match n.role {
                Role::PanCoordinator => {
                    if n.clock_offset_us != 0 {
                        return Err(bad(
                            "the PAN coordinator is the time reference; its clock offset must be 0"
                                .into(),
                        ));
                    }
                    if n.parent.is_some() {
                        return Err(bad("the PAN coordinator has no parent".into()));
                    }
                }
                Role::StarCoordinator => {
                    if let Some(p) = n.parent {
                        if p != pan_id {
                            return Err(bad(format!(
                                "star coordinator {} must attach to the PAN coordinator",
                                n.id
                            )));
                        }
                    }
                    if !in_range(n, by_id[&pan_id]) {
                        return Err(bad(format!(
                            "star coordinator {} is out of radio range of the PAN coordinator",
                            n.id
                        )));
                    }
                }
                Role::SimpleNode => {
                    let p = n
                        .parent
                        .ok_or_else(|| bad(format!("simple node {} needs a parent", n.id)))?;
                    let ps = by_id
                        .get(&p)
                        .ok_or_else(|| bad(format!("node {} has unknown parent {}", n.id, p)))?;
                    if ps.role == Role::SimpleNode {
                        return Err(bad(format!("parent of {} must be a coordinator", n.id)));
                    }
                    if !in_range(n, ps) {
                        return Err(bad(format!(
                            "simple node {} is out of radio range of its parent {}",
                            n.id, p
                        )));
                    }
                }
            }
        }
        for t in &cfg.traffic {
            if !ids.contains(&t.node) {
                return Err(bad(format!("traffic references unknown node {}", t.node)));
            }
        }
        for (owner, peer) in cfg
            .requests
            .iter()
            .map(|r| (r.owner, r.peer))
            .chain(cfg.pds.iter().map(|p| (p.owner, p.peer)))
        {
            if !ids.contains(&owner) || !ids.contains(&peer) {
                return Err(bad(format!(
                    "request references unknown node ({owner} -> {peer})"
                )));
            }
        }

        let mut trace = Trace::new();
        let mut table = ScheduleTable::new(cfg.superframe)?;
        for n in cfg.nodes.iter().filter(|n| n.role == Role::StarCoordinator) {
            table.allocate_gbs(n.id)?;
        }
        let preinstalled = cfg
            .requests
            .iter()
            .filter(|r| r.at_us.is_none())
            .map(|r| (r.owner, r.peer, r.level, r.direction, Origin::Request))
            .chain(
                cfg.pds
                    .iter()
                    .filter(|p| p.at_us.is_none())
                    .map(|p| (p.owner, p.peer, p.level, p.direction, Origin::Pds)),
            )
            .collect::<Vec<_>>();
        for (owner, peer, level, direction, origin) in preinstalled {
            let grant = table.allocate_gts(SlotRequest { owner, peer, level, origin, direction })?;
            let a = grant.allocation;
            trace.push(
                SimTime::ZERO,
                pan_id,
                TraceBody::Grant {
                    owner,
                    peer,
                    slot: a.slot_index,
                    level: a.level,
                    phase: a.phase,
                    origin: match origin {
                        Origin::Request => "request",
                        Origin::Pds => "pds",
                    },
                    replanned: grant.replanned,
                    effective_at: 0,
                },
            );
        }

        let mut pan = PanState::new(table, cfg.sgts, cfg.radio.sensitivity_dbm);
        pan.mobile = cfg.nodes.iter().filter(|n| n.mobile).map(|n| n.id).collect();

        let mut nodes = BTreeMap::new();
        for spec in &cfg.nodes {
            let mut m = NodeMachine::new(spec.id, spec.role, spec.parent, spec.position);
            m.clock_offset_us = spec.clock_offset_us;
            m.tx_power_dbm = spec.tx_power_dbm;
            m.mobile = spec.mobile;
            nodes.insert(spec.id, m);
        }
        let span_state =
            nodes.keys().map(|id| (*id, (NodeState::Dozing, SimTime::ZERO))).collect();

        let mut queue = EventQueue::new();
        queue.schedule(SimTime::ZERO, pan_id, Ev::SuperframeStart { sf: 0 })?;
        for (i, t) in cfg.traffic.iter().enumerate() {
            queue.schedule(SimTime(t.kind.start_us()), t.node, Ev::Traffic { idx: i })?;
        }
        for (i, r) in cfg.requests.iter().enumerate() {
            if let Some(at) = r.at_us {
                queue.schedule(SimTime(at), r.owner, Ev::Request { idx: i })?;
            }
        }
        for (i, p) in cfg.pds.iter().enumerate() {
            if let Some(at) = p.at_us {
                queue.schedule(SimTime(at), pan_id, Ev::Pds { idx: i })?;
            }
        }

        let slot_dur = cfg.superframe.slot_duration()?;
        let slot_symbols = slot_dur.as_us() / cfg.superframe.symbol_us;
        Ok(World {
            cfg,
            pan_id,
            pan,
            nodes,
            queue,
            trace,
            superframe: 0,
            slot_dur,
            slot_symbols,
            span_state,
            csma: BTreeMap::new(),
            csma_ready: BTreeSet::new(),
            csma_rng: BTreeMap::new(),
            radio_rng: BTreeMap::new(),
            measurements: BTreeMap::new(),
            dirty_measurements: BTreeSet::new(),
            latencies: Vec::new(),
            cap_stats: CapStats::default(),
            delivered: BTreeMap::new(),
        })
    }

    // ── Accessors ──

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn pan(&self) -> &PanState {
        &self.pan
    }

    pub fn pan_id(&self) -> NodeId {
        self.pan_id
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeMachine> {
        self.nodes.get(&id)
    }

    pub fn machines(&self) -> impl Iterator<Item = (&NodeId, &NodeMachine)> {
        self.nodes.iter()
    }

    pub fn latencies(&self) -> &[LatencyRecord] {
        &self.latencies
    }

    pub fn cap_stats(&self) -> &CapStats {
        &self.cap_stats
    }

    pub fn delivered(&self, source: NodeId) -> u64 {
        self.delivered.get(&source).copied().unwrap_or(0)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn now(&self) -> SimTime {
        self.queue.now()
    }

    // ── Running ──

    pub fn run_superframes(&mut self, n: u64) -> Result<(), EngineError> {
        let end = SimTime(self.cfg.superframe.beacon_interval().as_us() * n);
        self.run_until(end)
    }

    /// Process every event in `[now, end)`; energy ledgers are closed at
    /// `end` so charge totals cover exactly the simulated span.
    pub fn run_until(&mut self, end: SimTime) -> Result<(), EngineError> {
        while let Some(t) = self.queue.peek_time() {
            if t >= end {
                break;
            }
            let (time, _node, ev) = self.queue.pop().expect("peeked");
            match ev {
                Ev::SuperframeStart { sf } => self.on_superframe(time, sf)?,
                Ev::SlotStart { sf, slot } => self.on_slot(time, sf, slot)?,
                Ev::Traffic { idx } => self.on_traffic(time, idx)?,
                Ev::Request { idx } => self.on_request(idx)?,
                Ev::Pds { idx } => self.on_pds(time, idx),
            }
        }
        self.flush_energy(end);
        Ok(())
    }

    // ── Event handlers ──

    fn on_superframe(&mut self, t: SimTime, sf: u64) -> Result<(), EngineError> {
        self.superframe = sf;
        let horizon = self.cfg.superframe.horizon();
        if sf > 0 && sf % horizon == 0 {
            let outcomes = self.pan.consider_merges(sf - 1);
            for (a, b, outcome) in outcomes {
                let body = match outcome {
                    MergeOutcome::Merged { slot_index, phase, .. } => {
                        TraceBody::Merge { owner_a: a, owner_b: b, slot: slot_index, phase }
                    }
                    MergeOutcome::Refused(r) => {
                        TraceBody::MergeRefused { owner_a: a, owner_b: b, reason: r.to_string() }
                    }
                };
                self.trace.push(t, self.pan_id, body);
            }
            self.pan.roll_boundary();
            self.trace.push(t, self.pan_id, TraceBody::Boundary { superframe: sf });
        }
        for slot in 0..self.cfg.superframe.slots_per_superframe {
            let at = t + self.slot_dur * slot as u64;
            self.queue.schedule(at, self.pan_id, Ev::SlotStart { sf, slot })?;
        }
        let next = t + self.cfg.superframe.beacon_interval();
        self.queue.schedule(next, self.pan_id, Ev::SuperframeStart { sf: sf + 1 })?;
        Ok(())
    }

    fn on_traffic(&mut self, t: SimTime, idx: usize) -> Result<(), EngineError> {
        let spec = self.cfg.traffic[idx];
        match spec.kind {
            TrafficKind::Gts { .. } => {
                // Admitted traffic only: a frame is queued when the node holds
                // an active allocation and is synchronized, otherwise it is
                // dropped. A node that has never heard its anchor beacon
                // cannot use its slot, and letting the frame linger would put
                // every later frame one period behind for the rest of the run.
                let alloc = self
                    .pan
                    .active
                    .allocations()
                    .into_iter()
                    .map(|(a, _)| a)
                    .find(|a| a.transmitter() == spec.node);
                let sf = t.as_us() / self.cfg.superframe.beacon_interval().as_us();
                let horizon = self.cfg.superframe.horizon();
                let m = self.nodes.get_mut(&spec.node).expect("validated id");
                if let (Some(a), true) = (alloc, m.is_synchronized(sf, horizon)) {
                    let seq = m.next_seq();
                    let frame = Frame::new(
                        FrameKind::Data,
                        spec.node,
                        Destination::Node(a.receiver()),
                        seq,
                    );
                    m.data_queue.push_back(QueuedFrame { frame, queued_at: t });
                }
            }
            TrafficKind::Cap { .. } => {
                let m = self.nodes.get_mut(&spec.node).expect("validated id");
                let to = m.parent.unwrap_or(self.pan_id);
                let seq = m.next_seq();
                m.pending.push_back(Frame::new(
                    FrameKind::Data,
                    spec.node,
                    Destination::Node(to),
                    seq,
                ));
                self.cap_stats.enqueued += 1;
            }
        }
        self.queue.schedule(t + SimTime(spec.kind.period_us()), spec.node, Ev::Traffic { idx })?;
        Ok(())
    }

    fn on_request(&mut self, idx: usize) -> Result<(), EngineError> {
        let r = self.cfg.requests[idx];
        let n_max = self.cfg.superframe.n_max;
        let pan_id = self.pan_id;
        let m = self.nodes.get_mut(&r.owner).expect("validated id");
        m.request_gts(r.peer, r.level, r.direction, n_max, pan_id)?;
        Ok(())
    }

    fn on_pds(&mut self, t: SimTime, idx: usize) {
        let p = self.cfg.pds[idx];
        let (confirm, replanned) =
            self.pan.grant_pds(p.owner, p.peer, p.level, p.direction, self.superframe);
        self.trace_confirm(t, confirm, replanned, "pds");
    }

    fn trace_confirm(&mut self, t: SimTime, confirm: GtsConfirm, replanned: bool, origin: &'static str) {
        let body = match confirm {
            GtsConfirm::Granted { allocation: a, effective_at } => TraceBody::Grant {
                owner: a.owner,
                peer: a.peer,
                slot: a.slot_index,
                level: a.level,
                phase: a.phase,
                origin,
                replanned,
                effective_at,
            },
            GtsConfirm::Refused { owner, reason } => TraceBody::Refusal {
                owner,
                reason: match reason {
                    crate::protocol::GrantRefusal::SlotExhausted => "slot-exhausted",
                    crate::protocol::GrantRefusal::LevelOutOfRange => "level-out-of-range",
                    crate::protocol::GrantRefusal::OwnerIsPeer => "owner-is-peer",
                },
            },
        };
        self.trace.push(t, self.pan_id, body);
    }

    fn on_slot(&mut self, t: SimTime, sf: u64, slot: u16) -> Result<(), EngineError> {
        let mark = self.trace.len();
        let table = self.pan.active.clone();
        let entry = table.entry_at(sf, slot).expect("slots come from config");
        let measurers: BTreeSet<NodeId> = if self.pan.policy.enabled {
            table
                .allocations()
                .iter()
                .filter(|(_, shared)| !shared)
                .map(|(a, _)| a.receiver())
                .collect()
        } else {
            BTreeSet::new()
        };
        let single_gts = matches!(entry, SlotEntry::Gts(_));
        let mut actions: BTreeMap<NodeId, SlotAction> = BTreeMap::new();
        for (id, m) in &self.nodes {
            let measuring = single_gts && measurers.contains(id);
            let action = match m.on_slot_boundary(&table, sf, slot, measuring) {
                Ok(a) => a,
                // A cold node stays in receive mode hunting for a beacon.
                Err(ProtocolError::NotSynchronized(_)) => SlotAction::Listen,
                Err(e) => return Err(e.into()),
            };
            actions.insert(*id, action);
        }
        if matches!(entry, SlotEntry::Cap) {
            self.run_cap_slot(t, sf, slot, &actions)?;
        } else {
            self.run_dedicated_slot(t, sf, slot, &entry, &actions)?;
        }
        self.trace.sort_tail(mark);
        Ok(())
    }

    // ── Dedicated slots (beacons, GTS, SGTS) ──

    fn run_dedicated_slot(
        &mut self,
        t: SimTime,
        sf: u64,
        slot: u16,
        entry: &SlotEntry,
        actions: &BTreeMap<NodeId, SlotAction>,
    ) -> Result<(), EngineError> {
        let symbol_us = self.cfg.superframe.symbol_us;
        let mut on_air: Vec<OnAir> = Vec::new();

        for (&id, action) in actions {
            let (frame, start) = match action {
                SlotAction::TransmitSuperbeacon => {
                    let confirms = self.pan.take_confirms();
                    let m = self.nodes.get_mut(&id).expect("acting node");
                    let seq = m.next_seq();
                    let f = Frame::new(
                        FrameKind::Superbeacon { superframe: sf, confirms },
                        id,
                        Destination::Broadcast,
                        seq,
                    );
                    (f, t)
                }
                SlotAction::TransmitBeacon => {
                    let m = self.nodes.get_mut(&id).expect("acting node");
                    let seq = m.next_seq();
                    let start = t.offset_us(m.effective_offset_us);
                    let f = Frame::new(
                        FrameKind::Beacon { superframe: sf },
                        id,
                        Destination::Broadcast,
                        seq,
                    );
                    (f, start)
                }
                SlotAction::TransmitData => {
                    let alloc = match entry {
                        SlotEntry::Gts(a) => *a,
                        SlotEntry::Sgts(a, b) => {
                            if a.transmitter() == id {
                                *a
                            } else {
                                *b
                            }
                        }
                        _ => unreachable!("data transmissions need a dedicated cell"),
                    };
                    let m = self.nodes.get_mut(&id).expect("acting node");
                    let qf = m.data_queue.pop_front().expect("action implies queued frame");
                    let start = t.offset_us(m.effective_offset_us);
                    self.latencies.push(LatencyRecord {
                        node: id,
                        level: alloc.level,
                        queued_at: qf.queued_at,
                        tx_start: start,
                    });
                    (qf.frame, start)
                }
                SlotAction::Listen | SlotAction::Doze => continue,
            };
            frame.check_fits_slot(self.slot_symbols)?;
            // The superbeacon payload is not modeled against the slot; its
            // air occupancy is clipped so slot 1 never sees it.
            let dur = if matches!(frame.kind, FrameKind::Superbeacon { .. }) {
                frame.duration(symbol_us).min(self.slot_dur)
            } else {
                frame.duration(symbol_us)
            };
            let end = start + dur;
            let (position, power_dbm) = {
                let m = &self.nodes[&id];
                (m.position, m.tx_power_dbm)
            };
            self.trace.push(
                start,
                id,
                TraceBody::Tx {
                    kind: frame.kind_name(),
                    destination: frame.destination,
                    superframe: sf,
                    slot,
                    duration: dur,
                },
            );
            self.transition(id, start, NodeState::Transmitting);
            self.transition(id, end, NodeState::AwakeListening);
            on_air.push(OnAir {
                attempt: TxAttempt { transmitter: id, position, power_dbm, start },
                frame,
                end,
            });
        }

        for (&id, action) in actions {
            match action {
                SlotAction::Listen => self.transition(id, t, NodeState::AwakeListening),
                SlotAction::Doze => self.transition(id, t, NodeState::Dozing),
                _ => {}
            }
        }

        let single_gts = matches!(entry, SlotEntry::Gts(_));
        self.resolve_listeners(&on_air, actions, sf, slot, single_gts, false)
    }

    // ── CAP slots ──

    fn run_cap_slot(
        &mut self,
        t: SimTime,
        sf: u64,
        slot: u16,
        actions: &BTreeMap<NodeId, SlotAction>,
    ) -> Result<(), EngineError> {
        let symbol_us = self.cfg.superframe.symbol_us;
        let slot_end = t + self.slot_dur;
        let period_us = BACKOFF_PERIOD_SYMBOLS * symbol_us;
        let periods = self.slot_symbols / BACKOFF_PERIOD_SYMBOLS;
        let horizon = self.cfg.superframe.horizon();

        // Fresh RSSI tabulations head for the PAN coordinator first thing in
        // the contention period.
        let dirty: Vec<NodeId> = self.dirty_measurements.iter().copied().collect();
        for id in dirty {
            let map = self.measurements.get(&id).cloned().unwrap_or_default();
            if map.is_empty() {
                continue;
            }
            let report = RssiReport { receiver: id, rssi_dbm: map, superframe: sf };
            if id == self.pan_id {
                self.pan.note_report(report);
            } else {
                let pan_id = self.pan_id;
                let m = self.nodes.get_mut(&id).expect("measurer exists");
                m.pending.retain(|f| !matches!(f.kind, FrameKind::RssiReportMsg(_)));
                let seq = m.next_seq();
                m.pending.push_back(Frame::new(
                    FrameKind::RssiReportMsg(report),
                    id,
                    Destination::Node(pan_id),
                    seq,
                ));
            }
        }
        self.dirty_measurements.clear();

        for (&id, action) in actions {
            match action {
                SlotAction::Listen => self.transition(id, t, NodeState::AwakeListening),
                SlotAction::Doze => self.transition(id, t, NodeState::Dozing),
                _ => {}
            }
        }

        let contenders: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|(id, m)| {
                !m.pending.is_empty()
                    && m.is_synchronized(sf, horizon)
                    && actions.get(*id) == Some(&SlotAction::Listen)
            })
            .map(|(id, _)| *id)
            .collect();
        for &id in &contenders {
            if !self.csma.contains_key(&id) && !self.csma_ready.contains(&id) {
                let mut rng = self.take_csma_rng(id);
                let machine = CsmaMachine::new(self.cfg.csma, &mut rng);
                self.csma_rng.insert(id, rng);
                self.csma.insert(id, machine);
            }
        }

        let mut on_air: Vec<OnAir> = Vec::new();
        let mut ready: BTreeSet<NodeId> = std::mem::take(&mut self.csma_ready);
        for p in 0..periods {
            let tp = t + SimTime(p * period_us);
            // Ready machines transmit at this boundary if the frame still
            // fits the slot; otherwise they hold for the next CAP window.
            let starters: Vec<NodeId> = ready.iter().copied().collect();
            for id in starters {
                let frame_head = match self.nodes[&id].pending.front() {
                    Some(f) => f.clone(),
                    None => {
                        ready.remove(&id);
                        continue;
                    }
                };
                frame_head.check_fits_slot(self.slot_symbols)?;
                let dur = frame_head.duration(symbol_us);
                if tp + dur > slot_end {
                    continue;
                }
                ready.remove(&id);
                let (start, position, power_dbm, frame) = {
                    let m = self.nodes.get_mut(&id).expect("contender exists");
                    let frame = m.pending.pop_front().expect("checked above");
                    (tp.offset_us(m.effective_offset_us), m.position, m.tx_power_dbm, frame)
                };
                let end = start + dur;
                self.cap_stats.tx_started += 1;
                self.trace.push(start, id, TraceBody::CsmaTxStart { superframe: sf, slot });
                self.trace.push(
                    start,
                    id,
                    TraceBody::Tx {
                        kind: frame.kind_name(),
                        destination: frame.destination,
                        superframe: sf,
                        slot,
                        duration: dur,
                    },
                );
                self.transition(id, start, NodeState::Transmitting);
                self.transition(id, end, NodeState::AwakeListening);
                on_air.push(OnAir {
                    attempt: TxAttempt { transmitter: id, position, power_dbm, start },
                    frame,
                    end,
                });
                self.csma.remove(&id);
            }

            for &id in &contenders {
                if ready.contains(&id) {
                    continue;
                }
                let Some(machine) = self.csma.get(&id) else { continue };
                if machine.wants_cca() {
                    let current: Vec<TxAttempt> = on_air
                        .iter()
                        .filter(|o| o.attempt.start <= tp && tp < o.end)
                        .map(|o| o.attempt)
                        .collect();
                    let position = self.nodes[&id].position;
                    let mut rng = self.take_radio_rng(id);
                    let level =
                        channel_power_dbm(&self.cfg.radio, id, &position, &current, &mut rng);
                    self.radio_rng.insert(id, rng);
                    let busy = level.is_some_and(|l| l >= self.cfg.radio.cca_threshold_dbm);
                    let mut crng = self.take_csma_rng(id);
                    let machine = self.csma.get_mut(&id).expect("present");
                    let outcome = machine.report_cca(busy, &mut crng);
                    self.csma_rng.insert(id, crng);
                    match outcome {
                        CsmaOutcome::TxNow => {
                            ready.insert(id);
                        }
                        CsmaOutcome::Failed => {
                            let nb = self.csma[&id].nb();
                            self.trace.push(tp, id, TraceBody::CsmaFailure { nb });
                            self.cap_stats.failures += 1;
                            self.csma.remove(&id);
                            let m = self.nodes.get_mut(&id).expect("contender exists");
                            let dropped = m.pending.pop_front().expect("had a frame");
                            // Signaling retries next CAP; best-effort data is lost.
                            if matches!(
                                dropped.kind,
                                FrameKind::GtsRequest { .. } | FrameKind::RssiReportMsg(_)
                            ) {
                                m.pending.push_back(dropped);
                            }
                        }
                        CsmaOutcome::Pending => {}
                    }
                } else {
                    self.csma.get_mut(&id).expect("present").advance_backoff();
                }
            }
        }
        self.csma_ready.extend(ready);

        // Resolve receptions one overlap component at a time; sequential
        // frames in the same CAP slot are independent receptions.
        on_air.sort_by_key(|o| (o.attempt.start, o.attempt.transmitter));
        let mut i = 0;
        while i < on_air.len() {
            let mut j = i + 1;
            let mut end = on_air[i].end;
            while j < on_air.len() && on_air[j].attempt.start < end {
                end = end.max(on_air[j].end);
                j += 1;
            }
            let component: Vec<OnAir> = on_air[i..j]
                .iter()
                .map(|o| OnAir { attempt: o.attempt, frame: o.frame.clone(), end: o.end })
                .collect();
            self.resolve_listeners(&component, actions, sf, slot, false, true)?;
            i = j;
        }
        Ok(())
    }

    // ── Reception ──

    fn resolve_listeners(
        &mut self,
        on_air: &[OnAir],
        actions: &BTreeMap<NodeId, SlotAction>,
        sf: u64,
        slot: u16,
        measuring_slot: bool,
        in_cap: bool,
    ) -> Result<(), EngineError> {
        if on_air.is_empty() {
            return Ok(());
        }
        let attempts: Vec<TxAttempt> = on_air.iter().map(|o| o.attempt).collect();
        // Half duplex: whoever is on the air in this window cannot receive it.
        let txers: BTreeSet<NodeId> = attempts.iter().map(|a| a.transmitter).collect();
        let listeners: Vec<NodeId> = actions
            .iter()
            .filter(|(id, a)| **a == SlotAction::Listen && !txers.contains(id))
            .map(|(id, _)| *id)
            .collect();
        for id in listeners {
            let position = self.nodes[&id].position;
            let mut rng = self.take_radio_rng(id);
            let outcome = resolve_reception(&self.cfg.radio, id, &position, &attempts, &mut rng);
            // A pileup denser than the capture model handles is a collision
            // by definition; survey the field for the trace's energy figure.
            let pileup_strongest = match &outcome {
                Err(RadioError::MoreThanTwoAttempts(_)) => {
                    let survey =
                        survey_rssi(&self.cfg.radio, id, &position, &attempts, &mut rng);
                    Some(survey.values().copied().fold(self.cfg.radio.sensitivity_dbm, f64::max))
                }
                _ => None,
            };
            self.radio_rng.insert(id, rng);
            match outcome {
                Ok(RxOutcome::Decoded { transmitter, rssi_dbm }) => {
                    let item = on_air
                        .iter()
                        .find(|o| o.attempt.transmitter == transmitter)
                        .expect("decoded frame was on the air");
                    self.trace.push(
                        item.end,
                        id,
                        TraceBody::RxDecoded {
                            from: transmitter,
                            kind: item.frame.kind_name(),
                            rssi_dbm,
                            superframe: sf,
                            slot,
                        },
                    );
                    let frame = item.frame.clone();
                    let at = item.end;
                    self.on_decoded(id, transmitter, frame, rssi_dbm, at, sf, measuring_slot, in_cap);
                }
                Ok(RxOutcome::Collision { strongest_dbm }) => {
                    let end = on_air.iter().map(|o| o.end).max().expect("non-empty");
                    self.trace.push(
                        end,
                        id,
                        TraceBody::RxCollision { strongest_dbm, superframe: sf, slot },
                    );
                    if in_cap {
                        self.cap_stats.collisions += 1;
                    }
                }
                Ok(RxOutcome::Idle) => {}
                Err(RadioError::MoreThanTwoAttempts(_)) => {
                    let end = on_air.iter().map(|o| o.end).max().expect("non-empty");
                    self.trace.push(
                        end,
                        id,
                        TraceBody::RxCollision {
                            strongest_dbm: pileup_strongest.expect("just computed"),
                            superframe: sf,
                            slot,
                        },
                    );
                    if in_cap {
                        self.cap_stats.collisions += 1;
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn on_decoded(
        &mut self,
        listener: NodeId,
        from: NodeId,
        frame: Frame,
        rssi_dbm: f64,
        at: SimTime,
        sf: u64,
        measuring_slot: bool,
        in_cap: bool,
    ) {
        let pan_id = self.pan_id;
        match frame.kind {
            FrameKind::Superbeacon { superframe, ref confirms } => {
                let (role, parent) = {
                    let m = &self.nodes[&listener];
                    (m.role, m.parent)
                };
                let parent_is_star = parent
                    .and_then(|p| self.nodes.get(&p))
                    .map_or(false, |pm| pm.role == Role::StarCoordinator);
                // Simple nodes under a star coordinator anchor to that
                // coordinator's beacon instead, compounding offsets.
                if role != Role::PanCoordinator && !(role == Role::SimpleNode && parent_is_star) {
                    let m = self.nodes.get_mut(&listener).expect("listener exists");
                    m.sync_to_beacon(superframe, 0);
                    self.trace.push(
                        at,
                        listener,
                        TraceBody::Sync { source: from, skew_us: 0, superframe },
                    );
                }
                if confirms.iter().any(|c| c.owner() == listener) {
                    let m = self.nodes.get_mut(&listener).expect("listener exists");
                    m.pending.retain(|f| {
                        !matches!(f.kind, FrameKind::GtsRequest { owner, .. } if owner == listener)
                    });
                }
            }
            FrameKind::Beacon { superframe } => {
                let should_sync = {
                    let m = &self.nodes[&listener];
                    m.role == Role::SimpleNode && m.parent == Some(from)
                };
                let source_is_star = self.nodes[&from].role == Role::StarCoordinator;
                if should_sync && source_is_star {
                    let skew = self.nodes[&from].effective_offset_us;
                    let m = self.nodes.get_mut(&listener).expect("listener exists");
                    m.sync_to_beacon(superframe, skew);
                    self.trace.push(
                        at,
                        listener,
                        TraceBody::Sync { source: from, skew_us: skew, superframe },
                    );
                }
            }
            FrameKind::Data => {
                if frame.destination.accepts(listener) {
                    *self.delivered.entry(from).or_insert(0) += 1;
                    if in_cap {
                        self.cap_stats.delivered += 1;
                    }
                }
                if measuring_slot && self.pan.policy.enabled {
                    let is_measurer = self
                        .pan
                        .active
                        .allocations()
                        .iter()
                        .any(|(a, shared)| !shared && a.receiver() == listener);
                    if is_measurer {
                        self.measurements.entry(listener).or_default().insert(from, rssi_dbm);
                        self.dirty_measurements.insert(listener);
                    }
                }
            }
            FrameKind::GtsRequest { owner, peer, level, direction } => {
                if !frame.destination.accepts(listener) {
                    return;
                }
                if listener == pan_id {
                    let (confirm, replanned) = self.pan.handle_request(
                        SlotRequest { owner, peer, level, origin: Origin::Request, direction },
                        sf,
                    );
                    self.trace_confirm(at, confirm, replanned, "request");
                } else if self.nodes[&listener].role == Role::StarCoordinator {
                    let m = self.nodes.get_mut(&listener).expect("listener exists");
                    let duplicate = m.pending.iter().any(|f| {
                        matches!(f.kind, FrameKind::GtsRequest { owner: o, .. } if o == owner)
                    });
                    if !duplicate {
                        let seq = m.next_seq();
                        m.pending.push_back(Frame::new(
                            FrameKind::GtsRequest { owner, peer, level, direction },
                            listener,
                            Destination::Node(pan_id),
                            seq,
                        ));
                    }
                }
            }
            FrameKind::RssiReportMsg(ref report) => {
                if frame.destination.accepts(listener) && listener == pan_id {
                    self.pan.note_report(report.clone());
                }
            }
        }
    }

    // ── Plumbing ──

    fn take_radio_rng(&mut self, id: NodeId) -> ChaCha8Rng {
        self.radio_rng
            .remove(&id)
            .unwrap_or_else(|| rng_stream(self.cfg.seed, id, "radio"))
    }

    fn take_csma_rng(&mut self, id: NodeId) -> ChaCha8Rng {
        self.csma_rng
            .remove(&id)
            .unwrap_or_else(|| rng_stream(self.cfg.seed, id, "csma"))
    }

    /// Close the node's current energy span at `at` and switch states. A
    /// doze span ending in an active state donates its last 330 µs to the
    /// wake-up transition.
    fn transition(&mut self, id: NodeId, at: SimTime, new_state: NodeState) {
        let (old, since) = self.span_state[&id];
        if old == new_state {
            return;
        }
        // A frame sent late in a slot under a positive clock offset can end a
        // few µs past the next boundary; the overlap stays with the old state.
        let at = at.max(since);
        let dur = at.saturating_sub(since).as_us();
        let m = self.nodes.get_mut(&id).expect("span nodes exist");
        if old == NodeState::Dozing && new_state != NodeState::Dozing && dur >= WAKE_TRANSITION_US
        {
            let doze = dur - WAKE_TRANSITION_US;
            if doze > 0 {
                m.energy.tick(NodeState::Dozing, doze);
                self.trace.push(
                    SimTime(at.as_us() - WAKE_TRANSITION_US),
                    id,
                    TraceBody::Energy { state: NodeState::Dozing, duration: SimTime(doze) },
                );
            }
            m.energy.tick(NodeState::Waking, WAKE_TRANSITION_US);
            self.trace.push(
                at,
                id,
                TraceBody::Energy {
                    state: NodeState::Waking,
                    duration: SimTime(WAKE_TRANSITION_US),
                },
            );
        } else if dur > 0 {
            m.energy.tick(old, dur);
            self.trace.push(at, id, TraceBody::Energy { state: old, duration: SimTime(dur) });
        }
        self.span_state.insert(id, (new_state, at));
    }

    fn flush_energy(&mut self, upto: SimTime) {
        let ids: Vec<NodeId> = self.span_state.keys().copied().collect();
        for id in ids {
            let (state, since) = self.span_state[&id];
            if since >= upto {
                continue;
            }
            let dur = upto.saturating_sub(since);
            let m = self.nodes.get_mut(&id).expect("span nodes exist");
            m.energy.tick(state, dur.as_us());
            self.trace.push(upto, id, TraceBody::Energy { state, duration: dur });
            self.span_state.insert(id, (state, upto));
        }
    }
}
