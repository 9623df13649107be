//! Superframe timing and the slot table.
//!
//! Time is divided into beacon intervals of `15.36 ms * 2^bo`; the first
//! `15.36 ms * 2^so` of each is the active portion, split into
//! `slots_per_superframe` equal slots. Slot 0 always carries the
//! superbeacon. A schedule covers `2^n_max` consecutive superframes (the
//! *horizon*) and then repeats; a level-`n` allocation owns its slot in
//! every superframe whose index is congruent to `phase` modulo `2^n`.
//!
//! The table tracks three claim kinds: guaranteed beacon slots for star
//! coordinators (one slot in every superframe), dedicated data slots
//! (requested GTS or coordinator-initiated PDS), and shared slots holding
//! exactly two allocations that passed the RSSI non-perturbation check.
//! Placement, release, merge, validation, and a line-oriented dump live
//! here; nothing in this module is stochastic.

use crate::time::{SimTime, BASE_SUPERFRAME_SYMBOLS, SYMBOL_US};
use crate::types::NodeId;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// Slots per superframe unless a scenario overrides it.
pub const DEFAULT_SLOTS_PER_SUPERFRAME: u16 = 16;

/// Upper cap on `bo`/`so` so every tick computation stays inside u64.
pub const MAX_ORDER: u8 = 30;

/// Upper cap on `n_max`; phases fit in u16 and horizons stay enumerable.
pub const MAX_LEVEL: u8 = 16;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("superframe config violation: {0}")]
    ConfigViolation(String),
    #[error("reservation level {level} exceeds n_max {n_max}")]
    LevelOutOfRange { level: u8, n_max: u8 },
    #[error("no slot satisfies the request")]
    SlotExhausted,
    #[error("coordinator {0} already holds a beacon slot")]
    DuplicateGbs(NodeId),
    #[error("node {0} owns no allocation")]
    UnknownOwner(NodeId),
    #[error("node {0} is already part of a shared slot")]
    AlreadyShared(NodeId),
    #[error("candidate allocations have different reservation levels")]
    LevelMismatch,
    #[error("slot {slot} out of range (table has {slots} slots)")]
    SlotOutOfRange { slot: u16, slots: u16 },
    #[error("owner and peer are the same node ({0})")]
    OwnerIsPeer(NodeId),
    #[error("receiver {receiver} has no fresh report covering the candidate pair")]
    MissingReport { receiver: NodeId },
}

// ─── Superframe configuration ──────────────────────────────────────────────

/// Orders and table dimensions of the superframe structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperframeConfig {
    /// Beacon order: beacon interval = 15.36 ms * 2^bo.
    pub bo: u8,
    /// Superframe order: active portion = 15.36 ms * 2^so. Must not exceed `bo`.
    pub so: u8,
    /// Highest reservation level; the schedule repeats every 2^n_max superframes.
    pub n_max: u8,
    /// Slots the active portion is divided into (slot 0 is the superbeacon).
    pub slots_per_superframe: u16,
    /// PHY symbol duration in microseconds.
    pub symbol_us: u64,
    /// Contention slots that must stay free in every superframe (0 disables
    /// the check; the allocator packs every non-beacon slot).
    pub min_cap_slots: u16,
}

impl Default for SuperframeConfig {
    fn default() -> Self {
        SuperframeConfig {
            bo: 0,
            so: 0,
            n_max: 3,
            slots_per_superframe: DEFAULT_SLOTS_PER_SUPERFRAME,
            symbol_us: SYMBOL_US,
            min_cap_slots: 0,
        }
    }
}

impl SuperframeConfig {
    pub fn new(bo: u8, so: u8, n_max: u8) -> Result<Self, ScheduleError> {
        let cfg = SuperframeConfig { bo, so, n_max, ..Default::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.so > self.bo {
            return Err(ScheduleError::ConfigViolation(format!(
                "so ({}) must not exceed bo ({})",
                self.so, self.bo
            )));
        }
        if self.bo > MAX_ORDER {
            return Err(ScheduleError::ConfigViolation(format!(
                "bo ({}) exceeds the supported cap ({MAX_ORDER})",
                self.bo
            )));
        }
        if self.n_max > MAX_LEVEL {
            return Err(ScheduleError::ConfigViolation(format!(
                "n_max ({}) exceeds the supported cap ({MAX_LEVEL})",
                self.n_max
            )));
        }
        if self.slots_per_superframe < 2 {
            return Err(ScheduleError::ConfigViolation(
                "need at least two slots (superbeacon plus one)".into(),
            ));
        }
        if self.symbol_us == 0 {
            return Err(ScheduleError::ConfigViolation("symbol duration must be positive".into()));
        }
        if self.active_symbols() % self.slots_per_superframe as u64 != 0 {
            return Err(ScheduleError::ConfigViolation(format!(
                "{} slots do not divide the active portion of {} symbols evenly",
                self.slots_per_superframe,
                self.active_symbols()
            )));
        }
        if self.min_cap_slots >= self.slots_per_superframe {
            return Err(ScheduleError::ConfigViolation(
                "min_cap_slots must leave room for the superbeacon".into(),
            ));
        }
        Ok(())
    }

    /// Superframes until the schedule repeats.
    pub fn horizon(&self) -> u64 {
        1u64 << self.n_max
    }

    fn active_symbols(&self) -> u64 {
        BASE_SUPERFRAME_SYMBOLS << self.so
    }

    /// Time from one superbeacon to the next: 960 * 2^bo symbols.
    pub fn beacon_interval(&self) -> SimTime {
        SimTime((BASE_SUPERFRAME_SYMBOLS << self.bo) * self.symbol_us)
    }

    /// Duration of the slotted (active) portion: 960 * 2^so symbols.
    pub fn active_portion(&self) -> Result<SimTime, ScheduleError> {
        if self.so > self.bo {
            return Err(ScheduleError::ConfigViolation(format!(
                "so ({}) must not exceed bo ({})",
                self.so, self.bo
            )));
        }
        Ok(SimTime(self.active_symbols() * self.symbol_us))
    }

    /// Duration of one slot.
    pub fn slot_duration(&self) -> Result<SimTime, ScheduleError> {
        Ok(SimTime(self.active_portion()?.as_us() / self.slots_per_superframe as u64))
    }

    /// Unslotted tail of the superframe during which every node dozes.
    pub fn inactive_portion(&self) -> Result<SimTime, ScheduleError> {
        Ok(self.beacon_interval() - self.active_portion()?)
    }
}

// ─── Allocations and slot entries ───────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Uplink,
    Downlink,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Uplink => write!(f, "uplink"),
            Direction::Downlink => write!(f, "downlink"),
        }
    }
}

/// How an allocation came to exist: requested by the owning node, or pushed
/// by the coordinator as a previously dedicated slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Request,
    Pds,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Request => write!(f, "request"),
            Origin::Pds => write!(f, "pds"),
        }
    }
}

/// A dedicated slot: `owner`'s traffic with `peer`, in `slot_index` of every
/// superframe congruent to `phase` modulo `2^level`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub owner: NodeId,
    pub peer: NodeId,
    pub slot_index: u16,
    pub level: u8,
    pub phase: u16,
    pub origin: Origin,
    pub direction: Direction,
}

impl Allocation {
    /// Superframes between consecutive occurrences.
    pub fn period(&self) -> u64 {
        1u64 << self.level
    }

    /// True when the allocation occupies its slot in table row `row`.
    pub fn covers(&self, row: u64) -> bool {
        row % self.period() == self.phase as u64
    }

    /// The node transmitting in this slot.
    pub fn transmitter(&self) -> NodeId {
        match self.direction {
            Direction::Uplink => self.owner,
            Direction::Downlink => self.peer,
        }
    }

    /// The node listening in this slot.
    pub fn receiver(&self) -> NodeId {
        match self.direction {
            Direction::Uplink => self.peer,
            Direction::Downlink => self.owner,
        }
    }
}

/// What a single (superframe, slot) cell holds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlotEntry {
    Superbeacon,
    /// Guaranteed beacon slot of the named star coordinator.
    Gbs(NodeId),
    Gts(Allocation),
    /// Shared slot: two allocations with distinct owners and distinct receivers.
    Sgts(Allocation, Allocation),
    Cap,
    /// Beyond the active portion; only produced by timeline helpers, never
    /// stored in the table grid.
    Inactive,
}

/// Input to [`ScheduleTable::allocate_gts`].
#[derive(Debug, Clone, Copy)]
pub struct SlotRequest {
    pub owner: NodeId,
    pub peer: NodeId,
    pub level: u8,
    pub origin: Origin,
    pub direction: Direction,
}

/// Successful placement. `replanned` is set when the greedy rule found no
/// cell and the whole table was re-packed to fit the request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtsGrant {
    pub allocation: Allocation,
    pub replanned: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum GtsEntry {
    Single(Allocation),
    Merged(Allocation, Allocation),
}

impl GtsEntry {
    fn level(&self) -> u8 {
        match self {
            GtsEntry::Single(a) | GtsEntry::Merged(a, _) => a.level,
        }
    }

    fn placement(&self) -> (u16, u16) {
        match self {
            GtsEntry::Single(a) | GtsEntry::Merged(a, _) => (a.slot_index, a.phase),
        }
    }

    fn covers(&self, row: u64, slot: u16) -> bool {
        match self {
            GtsEntry::Single(a) | GtsEntry::Merged(a, _) => a.slot_index == slot && a.covers(row),
        }
    }

    fn with_placement(&self, slot: u16, phase: u16) -> GtsEntry {
        let mut out = self.clone();
        match &mut out {
            GtsEntry::Single(a) => {
                a.slot_index = slot;
                a.phase = phase;
            }
            GtsEntry::Merged(a, b) => {
                a.slot_index = slot;
                a.phase = phase;
                b.slot_index = slot;
                b.phase = phase;
            }
        }
        out
    }
}

// ─── RSSI reports and merging ───────────────────────────────────────────────

/// What one receiver measured, transmitter by transmitter, in dBm. Only
/// transmitters actually heard above sensitivity appear; the merge check
/// substitutes the sensitivity floor for absent interferers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssiReport {
    pub receiver: NodeId,
    pub rssi_dbm: BTreeMap<NodeId, f64>,
    /// Superframe counter at which the report was composed.
    pub superframe: u64,
}

/// Everything [`ScheduleTable::try_merge_sgts`] consults besides the table.
#[derive(Debug, Clone)]
pub struct MergeContext<'a> {
    pub reports: &'a BTreeMap<NodeId, RssiReport>,
    pub threshold_db: f64,
    pub sensitivity_dbm: f64,
    pub now_superframe: u64,
    pub mobile: &'a BTreeSet<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MergeRefusal {
    /// Both allocations deliver to the same receiver; sharing would always collide.
    SameReceiver,
    /// The named receiver's margin over the interferer is below the threshold.
    InsufficientMargin { receiver: NodeId, margin_db: f64 },
    /// A mobile owner's margins cannot be trusted to stay valid.
    MobileNode(NodeId),
}

impl fmt::Display for MergeRefusal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MergeRefusal::SameReceiver => write!(f, "same-receiver"),
            MergeRefusal::InsufficientMargin { receiver, margin_db } => {
                write!(f, "insufficient-margin receiver={receiver} margin={margin_db:.2}dB")
            }
            MergeRefusal::MobileNode(n) => write!(f, "mobile-node {n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MergeOutcome {
    Merged { slot_index: u16, phase: u16, level: u8 },
    Refused(MergeRefusal),
}

// ─── Validation ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationRule {
    DoubleBooking,
    SgtsSameReceiver,
    SgtsSameOwner,
    SgtsPlacementMismatch,
    Slot0Reserved,
    SlotOutOfRange,
    LevelOutOfRange,
    PhaseOutOfRange,
    OwnerIsPeer,
    DuplicateGbs,
    MinCapShortfall,
}

impl fmt::Display for ViolationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationRule::DoubleBooking => "double-booking",
            ViolationRule::SgtsSameReceiver => "sgts-same-receiver",
            ViolationRule::SgtsSameOwner => "sgts-same-owner",
            ViolationRule::SgtsPlacementMismatch => "sgts-placement-mismatch",
            ViolationRule::Slot0Reserved => "slot0-reserved",
            ViolationRule::SlotOutOfRange => "slot-out-of-range",
            ViolationRule::LevelOutOfRange => "level-out-of-range",
            ViolationRule::PhaseOutOfRange => "phase-out-of-range",
            ViolationRule::OwnerIsPeer => "owner-is-peer",
            ViolationRule::DuplicateGbs => "duplicate-gbs",
            ViolationRule::MinCapShortfall => "min-cap-shortfall",
        };
        write!(f, "{s}")
    }
}

/// One broken rule, pointing at the first offending cell when one exists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub superframe: Option<u64>,
    pub slot: Option<u16>,
    pub rule: ViolationRule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.rule)?;
        if let Some(sf) = self.superframe {
            write!(f, " sf={sf}")?;
        }
        if let Some(slot) = self.slot {
            write!(f, " slot={slot}")?;
        }
        Ok(())
    }
}

// ─── The table ──────────────────────────────────────────────────────────────

/// One full scheduling horizon: `2^n_max` superframes by `slots_per_superframe`
/// slots. Claims are stored as records (beacon slots and allocation entries)
/// and cells are derived, so ill-formed tables built by hand remain
/// representable for [`ScheduleTable::validate_schedule`] to reject.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    config: SuperframeConfig,
    gbs: Vec<(NodeId, u16)>,
    entries: Vec<GtsEntry>,
}

impl ScheduleTable {
    pub fn new(config: SuperframeConfig) -> Result<Self, ScheduleError> {
        config.validate()?;
        Ok(ScheduleTable { config, gbs: Vec::new(), entries: Vec::new() })
    }

    pub fn config(&self) -> &SuperframeConfig {
        &self.config
    }

    /// Beacon slot assignments in grant order.
    pub fn gbs_assignments(&self) -> &[(NodeId, u16)] {
        &self.gbs
    }

    /// Every allocation in the table, shared ones flagged.
    pub fn allocations(&self) -> Vec<(Allocation, bool)> {
        let mut out = Vec::new();
        for e in &self.entries {
            match e {
                GtsEntry::Single(a) => out.push((*a, false)),
                GtsEntry::Merged(a, b) => {
                    out.push((*a, true));
                    out.push((*b, true));
                }
            }
        }
        out
    }

    fn occupied(&self, row: u64, slot: u16) -> bool {
        if slot == 0 {
            return true;
        }
        self.gbs.iter().any(|(_, s)| *s == slot) || self.entries.iter().any(|e| e.covers(row, slot))
    }

    /// Occupied cells in table row `row` (the superbeacon counts).
    fn load(&self, row: u64) -> u64 {
        1 + self.gbs.len() as u64
            + self.entries.iter().filter(|e| e.placement().1 as u64 == row % (1u64 << e.level())).count() as u64
    }

    fn cap_count(&self, row: u64) -> u64 {
        self.config.slots_per_superframe as u64 - self.load(row)
    }

    /// True when allocating one more cell in `row` keeps the CAP floor.
    fn cap_floor_ok(&self, row: u64) -> bool {
        self.cap_count(row) > self.config.min_cap_slots as u64
    }

    // ── Guaranteed beacon slots ──

    /// Reserve one slot in every superframe for `coordinator`'s beacon.
    /// Quarter-point slots are preferred so beacons spread across the
    /// superframe; after those, the lowest free slot wins.
    pub fn allocate_gbs(&mut self, coordinator: NodeId) -> Result<u16, ScheduleError> {
        if self.gbs.iter().any(|(c, _)| *c == coordinator) {
            return Err(ScheduleError::DuplicateGbs(coordinator));
        }
        let slots = self.config.slots_per_superframe;
        let quarter = slots / 4;
        let mut candidates: Vec<u16> = Vec::new();
        for mark in [quarter, 2 * quarter, 3 * quarter] {
            if mark > 0 && mark < slots && !candidates.contains(&mark) {
                candidates.push(mark);
            }
        }
        for s in 1..slots {
            if !candidates.contains(&s) {
                candidates.push(s);
            }
        }
        let horizon = self.config.horizon();
        for slot in candidates {
            let free = (0..horizon).all(|r| !self.occupied(r, slot) && self.cap_floor_ok(r));
            if free {
                self.gbs.push((coordinator, slot));
                return Ok(slot);
            }
        }
        Err(ScheduleError::SlotExhausted)
    }

    // ── Dedicated data slots ──

    /// Place a level-`n` allocation. The greedy rule: among feasible
    /// (slot, phase) pairs, pick the phase that minimizes the resulting
    /// maximum per-superframe load, tie-break lowest phase, then the lowest
    /// feasible slot for that phase. When greedy finds nothing the whole
    /// table is re-packed (weight-descending first fit with buddy placement
    /// inside each slot column); the grant is flagged `replanned` and other
    /// owners' cells may move, which a coordinator applies at the next
    /// horizon boundary.
    pub fn allocate_gts(&mut self, request: SlotRequest) -> Result<GtsGrant, ScheduleError> {
        if request.level > self.config.n_max {
            return Err(ScheduleError::LevelOutOfRange {
                level: request.level,
                n_max: self.config.n_max,
            });
        }
        if request.owner == request.peer {
            return Err(ScheduleError::OwnerIsPeer(request.owner));
        }

        if let Some((slot, phase)) = self.greedy_placement(request.level) {
            let allocation = Allocation {
                owner: request.owner,
                peer: request.peer,
                slot_index: slot,
                level: request.level,
                phase,
                origin: request.origin,
                direction: request.direction,
            };
            self.entries.push(GtsEntry::Single(allocation));
            return Ok(GtsGrant { allocation, replanned: false });
        }

        let replanned = self.replan_with(request).ok_or(ScheduleError::SlotExhausted)?;
        *self = replanned;
        let allocation = match self.entries.last() {
            Some(GtsEntry::Single(a)) => *a,
            _ => unreachable!("replan appends the new request last"),
        };
        Ok(GtsGrant { allocation, replanned: true })
    }

    fn greedy_placement(&self, level: u8) -> Option<(u16, u16)> {
        let horizon = self.config.horizon();
        let period = 1u64 << level;
        let loads: Vec<u64> = (0..horizon).map(|r| self.load(r)).collect();
        let mut best: Option<(u64, u16, u16)> = None;
        for phase in 0..period as u16 {
            let rows: Vec<u64> = (0..horizon).filter(|r| r % period == phase as u64).collect();
            if rows.iter().any(|r| !self.cap_floor_ok(*r)) {
                continue;
            }
            let slot = (1..self.config.slots_per_superframe)
                .find(|s| rows.iter().all(|r| !self.occupied(*r, *s)));
            let Some(slot) = slot else { continue };
            let resulting = (0..horizon)
                .map(|r| loads[r as usize] + u64::from(r % period == phase as u64))
                .max()
                .unwrap_or(0);
            let better = match best {
                None => true,
                Some((l, p, _)) => resulting < l || (resulting == l && phase < p),
            };
            if better {
                best = Some((resulting, phase, slot));
            }
        }
        best.map(|(_, phase, slot)| (slot, phase))
    }

    /// Re-pack every entry plus `request` onto a fresh table with the same
    /// beacon slots. Entries are placed in descending weight order (level
    /// ascending, insertion order preserved within a level); inside each slot
    /// column the phase splitting the smallest free residue class wins, which
    /// never fragments a column. Returns None when even the re-pack fails.
    fn replan_with(&self, request: SlotRequest) -> Option<ScheduleTable> {
        let mut fresh = ScheduleTable {
            config: self.config,
            gbs: self.gbs.clone(),
            entries: Vec::new(),
        };
        let new_alloc = Allocation {
            owner: request.owner,
            peer: request.peer,
            slot_index: 0,
            level: request.level,
            phase: 0,
            origin: request.origin,
            direction: request.direction,
        };
        let mut units: Vec<(usize, GtsEntry)> = self.entries.iter().cloned().enumerate().collect();
        units.push((self.entries.len(), GtsEntry::Single(new_alloc)));
        units.sort_by_key(|(idx, e)| (e.level(), *idx));

        let mut placed: Vec<(usize, GtsEntry)> = Vec::with_capacity(units.len());
        for (idx, unit) in units {
            let (slot, phase) = fresh.first_fit_placement(unit.level())?;
            let entry = unit.with_placement(slot, phase);
            fresh.entries.push(entry.clone());
            placed.push((idx, entry));
        }
        placed.sort_by_key(|(idx, _)| *idx);
        fresh.entries = placed.into_iter().map(|(_, e)| e).collect();
        Some(fresh)
    }

    fn first_fit_placement(&self, level: u8) -> Option<(u16, u16)> {
        let horizon = self.config.horizon();
        let period = 1u64 << level;
        for slot in 1..self.config.slots_per_superframe {
            let mut best: Option<(u8, u16)> = None;
            for phase in 0..period as u16 {
                let rows: Vec<u64> = (0..horizon).filter(|r| r % period == phase as u64).collect();
                let feasible = rows
                    .iter()
                    .all(|r| !self.occupied(*r, slot) && self.cap_floor_ok(*r));
                if !feasible {
                    continue;
                }
                // Depth of the smallest fully-free residue class enclosing
                // this phase in this column; cutting into a smaller free
                // class wastes less room for future low-level requests.
                let mut depth = 0u8;
                for j in (0..=level).rev() {
                    let pj = 1u64 << j;
                    let class_free = (0..horizon)
                        .filter(|r| r % pj == (phase as u64) % pj)
                        .all(|r| !self.occupied(r, slot));
                    if class_free {
                        depth = j;
                        break;
                    }
                }
                let better = match best {
                    None => true,
                    Some((d, p)) => depth > d || (depth == d && phase < p),
                };
                if better {
                    best = Some((depth, phase));
                }
            }
            if let Some((_, phase)) = best {
                return Some((slot, phase));
            }
        }
        None
    }

    /// Drop every allocation owned by `owner`. A shared slot survives as a
    /// plain dedicated slot for the other owner. Beacon slots are untouched.
    pub fn release_allocation(&mut self, owner: NodeId) -> Result<usize, ScheduleError> {
        let mut released = 0usize;
        let mut next = Vec::with_capacity(self.entries.len());
        for e in self.entries.drain(..) {
            match e {
                GtsEntry::Single(a) if a.owner == owner => released += 1,
                GtsEntry::Merged(a, b) if a.owner == owner => {
                    released += 1;
                    next.push(GtsEntry::Single(b));
                }
                GtsEntry::Merged(a, b) if b.owner == owner => {
                    released += 1;
                    next.push(GtsEntry::Single(a));
                }
                other => next.push(other),
            }
        }
        self.entries = next;
        if released == 0 {
            return Err(ScheduleError::UnknownOwner(owner));
        }
        Ok(released)
    }

    // ── Shared slots ──

    /// Try to merge the dedicated slots of owners `a` and `b` into one shared
    /// slot. The merge is accepted only when the receivers differ, neither
    /// owner is mobile, and at each receiver the RSSI of its own transmitter
    /// exceeds the other pair's transmitter by at least the threshold; an
    /// interferer absent from a report counts as the sensitivity floor. The
    /// surviving cell is `a`'s placement and `b`'s former cells revert to CAP.
    pub fn try_merge_sgts(
        &mut self,
        a: NodeId,
        b: NodeId,
        ctx: &MergeContext<'_>,
    ) -> Result<MergeOutcome, ScheduleError> {
        let find = |owner: NodeId| -> Result<(usize, Allocation), ScheduleError> {
            let mut seen_shared = false;
            for (i, e) in self.entries.iter().enumerate() {
                match e {
                    GtsEntry::Single(al) if al.owner == owner => return Ok((i, *al)),
                    GtsEntry::Merged(al, bl) if al.owner == owner || bl.owner == owner => {
                        seen_shared = true;
                    }
                    _ => {}
                }
            }
            if seen_shared {
                Err(ScheduleError::AlreadyShared(owner))
            } else {
                Err(ScheduleError::UnknownOwner(owner))
            }
        };
        let (ia, alloc_a) = find(a)?;
        let (ib, alloc_b) = find(b)?;
        if alloc_a.level != alloc_b.level {
            return Err(ScheduleError::LevelMismatch);
        }

        if alloc_a.receiver() == alloc_b.receiver() {
            return Ok(MergeOutcome::Refused(MergeRefusal::SameReceiver));
        }
        for owner in [a, b] {
            if ctx.mobile.contains(&owner) {
                return Ok(MergeOutcome::Refused(MergeRefusal::MobileNode(owner)));
            }
        }

        let horizon = self.config.horizon();
        for (own, other) in [(alloc_a, alloc_b), (alloc_b, alloc_a)] {
            let rx = own.receiver();
            let report = ctx
                .reports
                .get(&rx)
                .ok_or(ScheduleError::MissingReport { receiver: rx })?;
            if ctx.now_superframe.saturating_sub(report.superframe) > horizon {
                return Err(ScheduleError::MissingReport { receiver: rx });
            }
            let own_rssi = report
                .rssi_dbm
                .get(&own.transmitter())
                .copied()
                .ok_or(ScheduleError::MissingReport { receiver: rx })?;
            let other_rssi = report
                .rssi_dbm
                .get(&other.transmitter())
                .copied()
                .unwrap_or(ctx.sensitivity_dbm);
            let margin_db = own_rssi - other_rssi;
            if margin_db < ctx.threshold_db {
                return Ok(MergeOutcome::Refused(MergeRefusal::InsufficientMargin {
                    receiver: rx,
                    margin_db,
                }));
            }
        }

        let merged_b = Allocation {
            slot_index: alloc_a.slot_index,
            phase: alloc_a.phase,
            ..alloc_b
        };
        self.entries[ia] = GtsEntry::Merged(alloc_a, merged_b);
        self.entries.remove(ib);
        Ok(MergeOutcome::Merged {
            slot_index: alloc_a.slot_index,
            phase: alloc_a.phase,
            level: alloc_a.level,
        })
    }

    // ── Lookup, validation, dump ──

    /// Cell for an absolute superframe counter (wraps modulo the horizon).
    /// On an ill-formed table the earliest claim wins: beacon slots in grant
    /// order, then entries in insertion order.
    pub fn entry_at(&self, superframe: u64, slot: u16) -> Result<SlotEntry, ScheduleError> {
        if slot >= self.config.slots_per_superframe {
            return Err(ScheduleError::SlotOutOfRange {
                slot,
                slots: self.config.slots_per_superframe,
            });
        }
        if slot == 0 {
            return Ok(SlotEntry::Superbeacon);
        }
        let row = superframe % self.config.horizon();
        if let Some((c, _)) = self.gbs.iter().find(|(_, s)| *s == slot) {
            return Ok(SlotEntry::Gbs(*c));
        }
        for e in &self.entries {
            if e.covers(row, slot) {
                return Ok(match e {
                    GtsEntry::Single(a) => SlotEntry::Gts(*a),
                    GtsEntry::Merged(a, b) => SlotEntry::Sgts(*a, *b),
                });
            }
        }
        Ok(SlotEntry::Cap)
    }

    /// Contention and guaranteed durations of one superframe; they always sum
    /// to the active portion.
    pub fn cap_cfp(&self, superframe: u64) -> (SimTime, SimTime) {
        let row = superframe % self.config.horizon();
        let slot = self.config.slot_duration().expect("validated config");
        let cap = self.cap_count(row);
        let cfp = self.config.slots_per_superframe as u64 - cap;
        (slot * cap, slot * cfp)
    }

    /// Cells owned by `owner` across one horizon.
    pub fn occupancy(&self, owner: NodeId) -> u64 {
        let horizon = self.config.horizon();
        self.allocations()
            .iter()
            .filter(|(a, _)| a.owner == owner)
            .map(|(a, _)| horizon / a.period())
            .sum()
    }

    /// Every broken structural rule in the table. A well-formed product of
    /// the allocator returns an empty list.
    pub fn validate_schedule(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let slots = self.config.slots_per_superframe;
        let cell = |rule, sf, slot| Violation { superframe: sf, slot, rule };

        let mut seen = BTreeSet::new();
        for (c, s) in &self.gbs {
            if !seen.insert(*c) {
                out.push(cell(ViolationRule::DuplicateGbs, None, Some(*s)));
            }
            if *s == 0 {
                out.push(cell(ViolationRule::Slot0Reserved, None, Some(0)));
            } else if *s >= slots {
                out.push(cell(ViolationRule::SlotOutOfRange, None, Some(*s)));
            }
        }

        let mut allocs: Vec<Allocation> = Vec::new();
        for e in &self.entries {
            match e {
                GtsEntry::Single(a) => {
                    self.check_allocation(a, &mut out);
                    allocs.push(*a);
                }
                GtsEntry::Merged(a, b) => {
                    self.check_allocation(a, &mut out);
                    if a.owner == b.owner {
                        out.push(cell(
                            ViolationRule::SgtsSameOwner,
                            Some(a.phase as u64),
                            Some(a.slot_index),
                        ));
                    }
                    if a.receiver() == b.receiver() {
                        out.push(cell(
                            ViolationRule::SgtsSameReceiver,
                            Some(a.phase as u64),
                            Some(a.slot_index),
                        ));
                    }
                    if (a.slot_index, a.phase, a.level) != (b.slot_index, b.phase, b.level) {
                        out.push(cell(
                            ViolationRule::SgtsPlacementMismatch,
                            Some(a.phase as u64),
                            Some(a.slot_index),
                        ));
                    }
                    allocs.push(*a);
                }
            }
        }

        // Pairwise overlap between claim patterns: one violation per pair.
        let patterns: Vec<(u16, u64, u64)> = self
            .gbs
            .iter()
            .map(|(_, s)| (*s, 1u64, 0u64))
            .chain(allocs.iter().map(|a| (a.slot_index, a.period(), a.phase as u64)))
            .collect();
        for i in 0..patterns.len() {
            for j in (i + 1)..patterns.len() {
                let (s1, p1, f1) = patterns[i];
                let (s2, p2, f2) = patterns[j];
                if s1 != s2 || s1 == 0 {
                    continue;
                }
                let g = p1.min(p2);
                if f1 % g == f2 % g {
                    let row = if p1 >= p2 { f1 } else { f2 };
                    out.push(cell(ViolationRule::DoubleBooking, Some(row), Some(s1)));
                }
            }
        }

        if self.config.min_cap_slots > 0 {
            for row in 0..self.config.horizon() {
                if self.cap_count(row) < self.config.min_cap_slots as u64 {
                    out.push(cell(ViolationRule::MinCapShortfall, Some(row), None));
                }
            }
        }
        out
    }

    fn check_allocation(&self, a: &Allocation, out: &mut Vec<Violation>) {
        let slots = self.config.slots_per_superframe;
        let mk = |rule| Violation {
            superframe: Some(a.phase as u64),
            slot: Some(a.slot_index),
            rule,
        };
        if a.slot_index == 0 {
            out.push(mk(ViolationRule::Slot0Reserved));
        } else if a.slot_index >= slots {
            out.push(mk(ViolationRule::SlotOutOfRange));
        }
        if a.level > self.config.n_max {
            out.push(mk(ViolationRule::LevelOutOfRange));
        } else if a.phase as u64 >= a.period() {
            out.push(mk(ViolationRule::PhaseOutOfRange));
        }
        if a.owner == a.peer {
            out.push(mk(ViolationRule::OwnerIsPeer));
        }
    }

    /// Line-oriented dump: one line per (superframe, slot) across the whole
    /// horizon, stable field order. This is the format the CLI `schedule`
    /// subcommand prints and golden tests pin.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for sf in 0..self.config.horizon() {
            for slot in 0..self.config.slots_per_superframe {
                let entry = self.entry_at(sf, slot).expect("slot in range");
                out.push_str(&format!("sf={sf} slot={slot} "));
                match entry {
                    SlotEntry::Superbeacon => out.push_str("kind=superbeacon"),
                    SlotEntry::Gbs(c) => out.push_str(&format!("kind=gbs coordinator={c}")),
                    SlotEntry::Gts(a) => out.push_str(&format!(
                        "kind=gts owner={} peer={} level={} phase={} origin={} direction={}",
                        a.owner, a.peer, a.level, a.phase, a.origin, a.direction
                    )),
                    SlotEntry::Sgts(a, b) => out.push_str(&format!(
                        "kind=sgts owner_a={} peer_a={} owner_b={} peer_b={} level={} phase={}",
                        a.owner, a.peer, b.owner, b.peer, a.level, a.phase
                    )),
                    SlotEntry::Cap => out.push_str("kind=cap"),
                    SlotEntry::Inactive => out.push_str("kind=inactive"),
                }
                out.push('\n');
            }
        }
        out
    }

    #[cfg(test)]
    fn forge_single(&mut self, a: Allocation) {
        self.entries.push(GtsEntry::Single(a));
    }

    #[cfg(test)]
    fn forge_merged(&mut self, a: Allocation, b: Allocation) {
        self.entries.push(GtsEntry::Merged(a, b));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(i: u16) -> NodeId {
        NodeId(i)
    }

    fn req(owner: u16, peer: u16, level: u8) -> SlotRequest {
        SlotRequest {
            owner: node(owner),
            peer: node(peer),
            level,
            origin: Origin::Request,
            direction: Direction::Uplink,
        }
    }

    #[test]
    fn beacon_interval_doubles_with_bo() {
        assert_eq!(SuperframeConfig::new(0, 0, 0).unwrap().beacon_interval().as_us(), 15_360);
        assert_eq!(SuperframeConfig::new(1, 0, 0).unwrap().beacon_interval().as_us(), 30_720);
        assert_eq!(SuperframeConfig::new(3, 0, 0).unwrap().beacon_interval().as_us(), 122_880);
    }

    #[test]
    fn active_portion_and_slot_duration() {
        let cfg = SuperframeConfig::new(0, 0, 0).unwrap();
        assert_eq!(cfg.active_portion().unwrap().as_us(), 15_360);
        assert_eq!(cfg.slot_duration().unwrap().as_us(), 960);
        let cfg = SuperframeConfig::new(4, 2, 0).unwrap();
        assert_eq!(cfg.active_portion().unwrap().as_us(), 61_440);
    }

    #[test]
    fn so_above_bo_is_rejected() {
        let err = SuperframeConfig::new(2, 3, 0).unwrap_err();
        assert!(matches!(err, ScheduleError::ConfigViolation(_)));
        assert!(err.to_string().contains("so (3) must not exceed bo (2)"));
    }

    #[test]
    fn slot_count_must_divide_active_portion() {
        let cfg = SuperframeConfig { slots_per_superframe: 7, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(ScheduleError::ConfigViolation(_))));
        let cfg = SuperframeConfig { slots_per_superframe: 8, ..Default::default() };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn timing_is_exact_for_all_supported_orders() {
        for bo in 0..=8u8 {
            for so in 0..=bo {
                let cfg = SuperframeConfig::new(bo, so, 0).unwrap();
                assert_eq!(cfg.beacon_interval().as_us(), 15_360u64 << bo);
                assert_eq!(cfg.active_portion().unwrap().as_us(), 15_360u64 << so);
                assert_eq!(cfg.slot_duration().unwrap().as_us(), 960u64 << so);
            }
        }
    }

    #[test]
    fn gbs_prefers_quarter_points() {
        let mut t = ScheduleTable::new(SuperframeConfig::new(0, 0, 3).unwrap()).unwrap();
        assert_eq!(t.allocate_gbs(node(1)).unwrap(), 4);
        assert_eq!(t.allocate_gbs(node(2)).unwrap(), 8);
        assert_eq!(t.allocate_gbs(node(3)).unwrap(), 12);
        assert_eq!(t.allocate_gbs(node(4)).unwrap(), 1);
        assert_eq!(t.allocate_gbs(node(1)).unwrap_err(), ScheduleError::DuplicateGbs(node(1)));
    }

    #[test]
    fn gbs_exhausts_when_no_column_is_free() {
        let cfg = SuperframeConfig {
            slots_per_superframe: 2,
            n_max: 0,
            ..Default::default()
        };
        let mut t = ScheduleTable::new(cfg).unwrap();
        assert_eq!(t.allocate_gbs(node(1)).unwrap(), 1);
        assert_eq!(t.allocate_gbs(node(2)).unwrap_err(), ScheduleError::SlotExhausted);
    }

    #[test]
    fn level_zero_capacity_is_all_non_beacon_slots() {
        let mut t = ScheduleTable::new(SuperframeConfig::new(0, 0, 3).unwrap()).unwrap();
        for i in 0..15u16 {
            let grant = t.allocate_gts(req(100 + i, 1, 0)).unwrap();
            assert!(!grant.replanned);
        }
        assert_eq!(t.allocate_gts(req(200, 1, 0)).unwrap_err(), ScheduleError::SlotExhausted);
        assert!(t.validate_schedule().is_empty());
    }

    #[test]
    fn level_above_n_max_is_rejected() {
        let mut t = ScheduleTable::new(SuperframeConfig::new(0, 0, 2).unwrap()).unwrap();
        assert_eq!(
            t.allocate_gts(req(5, 1, 3)).unwrap_err(),
            ScheduleError::LevelOutOfRange { level: 3, n_max: 2 }
        );
    }

    #[test]
    fn owner_equal_peer_is_rejected() {
        let mut t = ScheduleTable::new(SuperframeConfig::default()).unwrap();
        assert_eq!(t.allocate_gts(req(5, 5, 0)).unwrap_err(), ScheduleError::OwnerIsPeer(node(5)));
    }

    /// Hand-derived layout for the demo workload: three coordinators, then
    /// levels 3, 2, 1, 1, 0, 0 in that order. The greedy rule must spread
    /// phases by load and stack complementary phases onto shared columns.
    #[test]
    fn demo_workload_placement_is_reproduced() {
        let mut t = ScheduleTable::new(SuperframeConfig::new(0, 0, 3).unwrap()).unwrap();
        for c in [1, 2, 3] {
            t.allocate_gbs(node(c)).unwrap();
        }
        let cases = [
            (33, 3, 3, (1, 0)),
            (32, 3, 2, (1, 1)),
            (11, 1, 1, (2, 0)),
            (21, 2, 1, (2, 1)),
            (22, 2, 0, (3, 0)),
            (31, 3, 0, (5, 0)),
        ];
        for (owner, peer, level, (slot, phase)) in cases {
            let g = t.allocate_gts(req(owner, peer, level)).unwrap();
            assert!(!g.replanned);
            assert_eq!(
                (g.allocation.slot_index, g.allocation.phase),
                (slot, phase),
                "owner {owner}"
            );
        }
        assert_eq!(t.occupancy(node(33)), 1);
        assert_eq!(t.occupancy(node(32)), 2);
        assert_eq!(t.occupancy(node(11)), 4);
        assert_eq!(t.occupancy(node(21)), 4);
        assert_eq!(t.occupancy(node(22)), 8);
        assert_eq!(t.occupancy(node(31)), 8);
        assert!(t.validate_schedule().is_empty());
    }

    /// Greedy alone strands this sequence (the second level-2 entry lands on
    /// phase 1 and blocks both level-1 classes); the re-pack must save it.
    #[test]
    fn replan_rescues_greedy_fragmentation() {
        let cfg = SuperframeConfig {
            slots_per_superframe: 2,
            n_max: 2,
            ..Default::default()
        };
        let mut t = ScheduleTable::new(cfg).unwrap();
        let a = t.allocate_gts(req(10, 1, 2)).unwrap();
        assert_eq!((a.allocation.slot_index, a.allocation.phase, a.replanned), (1, 0, false));
        let b = t.allocate_gts(req(11, 1, 2)).unwrap();
        assert_eq!((b.allocation.slot_index, b.allocation.phase, b.replanned), (1, 1, false));
        let c = t.allocate_gts(req(12, 1, 1)).unwrap();
        assert!(c.replanned);
        assert_eq!((c.allocation.slot_index, c.allocation.phase), (1, 0));
        let by_owner: BTreeMap<u16, (u16, u16)> = t
            .allocations()
            .iter()
            .map(|(a, _)| (a.owner.0, (a.slot_index, a.phase)))
            .collect();
        assert_eq!(by_owner[&10], (1, 1));
        assert_eq!(by_owner[&11], (1, 3));
        assert!(t.validate_schedule().is_empty());
    }

    #[test]
    fn release_restores_original_table() {
        let mut t = ScheduleTable::new(SuperframeConfig::new(0, 0, 3).unwrap()).unwrap();
        t.allocate_gbs(node(1)).unwrap();
        t.allocate_gts(req(10, 1, 1)).unwrap();
        let before = t.clone();
        let g = t.allocate_gts(req(11, 1, 2)).unwrap();
        assert!(!g.replanned);
        assert_eq!(t.release_allocation(node(11)).unwrap(), 1);
        assert_eq!(t, before);
        assert_eq!(t.release_allocation(node(99)).unwrap_err(), ScheduleError::UnknownOwner(node(99)));
    }

    fn merge_fixture() -> (ScheduleTable, Allocation, Allocation) {
        let mut t = ScheduleTable::new(SuperframeConfig::new(0, 0, 3).unwrap()).unwrap();
        let a = t.allocate_gts(req(11, 1, 1)).unwrap().allocation;
        let b = t.allocate_gts(req(21, 2, 1)).unwrap().allocation;
        (t, a, b)
    }

    fn reports_with_margins(
        a: &Allocation,
        b: &Allocation,
        margin_at_a: f64,
        margin_at_b: f64,
    ) -> BTreeMap<NodeId, RssiReport> {
        let mut reports = BTreeMap::new();
        let mut at_a = BTreeMap::new();
        at_a.insert(a.transmitter(), -50.0);
        at_a.insert(b.transmitter(), -50.0 - margin_at_a);
        reports.insert(
            a.receiver(),
            RssiReport { receiver: a.receiver(), rssi_dbm: at_a, superframe: 0 },
        );
        let mut at_b = BTreeMap::new();
        at_b.insert(b.transmitter(), -50.0);
        at_b.insert(a.transmitter(), -50.0 - margin_at_b);
        reports.insert(
            b.receiver(),
            RssiReport { receiver: b.receiver(), rssi_dbm: at_b, superframe: 0 },
        );
        reports
    }

    fn ctx<'a>(
        reports: &'a BTreeMap<NodeId, RssiReport>,
        mobile: &'a BTreeSet<NodeId>,
    ) -> MergeContext<'a> {
        MergeContext {
            reports,
            threshold_db: 10.0,
            sensitivity_dbm: -92.0,
            now_superframe: 0,
            mobile,
        }
    }

    #[test]
    fn merge_accepts_on_wide_margins() {
        let (mut t, a, b) = merge_fixture();
        let reports = reports_with_margins(&a, &b, 20.0, 20.0);
        let mobile = BTreeSet::new();
        let out = t.try_merge_sgts(node(11), node(21), &ctx(&reports, &mobile)).unwrap();
        assert_eq!(
            out,
            MergeOutcome::Merged { slot_index: a.slot_index, phase: a.phase, level: 1 }
        );
        assert!(t.validate_schedule().is_empty());
        match t.entry_at(a.phase as u64, a.slot_index).unwrap() {
            SlotEntry::Sgts(x, y) => {
                assert_eq!(x.owner, node(11));
                assert_eq!(y.owner, node(21));
                assert_eq!(y.slot_index, a.slot_index);
            }
            other => panic!("expected shared slot, got {other:?}"),
        }
        // b's former cell reverted to contention.
        assert_eq!(t.entry_at(b.phase as u64, b.slot_index).unwrap(), SlotEntry::Cap);
    }

    #[test]
    fn merge_refuses_thin_margin_naming_the_receiver() {
        let (mut t, a, b) = merge_fixture();
        let reports = reports_with_margins(&a, &b, 20.0, 0.0);
        let mobile = BTreeSet::new();
        let out = t.try_merge_sgts(node(11), node(21), &ctx(&reports, &mobile)).unwrap();
        match out {
            MergeOutcome::Refused(MergeRefusal::InsufficientMargin { receiver, margin_db }) => {
                assert_eq!(receiver, b.receiver());
                assert!((margin_db - 0.0).abs() < 1e-9);
            }
            other => panic!("expected refusal, got {other:?}"),
        }
        assert_eq!(t.entry_at(b.phase as u64, b.slot_index).unwrap(), SlotEntry::Gts(b));
    }

    #[test]
    fn merge_refuses_same_receiver() {
        let mut t = ScheduleTable::new(SuperframeConfig::new(0, 0, 3).unwrap()).unwrap();
        t.allocate_gts(req(11, 1, 1)).unwrap();
        t.allocate_gts(req(12, 1, 1)).unwrap();
        let reports = BTreeMap::new();
        let mobile = BTreeSet::new();
        let out = t.try_merge_sgts(node(11), node(12), &ctx(&reports, &mobile)).unwrap();
        assert_eq!(out, MergeOutcome::Refused(MergeRefusal::SameReceiver));
    }

    #[test]
    fn merge_refuses_mobile_owner() {
        let (mut t, a, b) = merge_fixture();
        let reports = reports_with_margins(&a, &b, 20.0, 20.0);
        let mobile: BTreeSet<NodeId> = [node(21)].into_iter().collect();
        let out = t.try_merge_sgts(node(11), node(21), &ctx(&reports, &mobile)).unwrap();
        assert_eq!(out, MergeOutcome::Refused(MergeRefusal::MobileNode(node(21))));
    }

    #[test]
    fn merge_errors_without_fresh_reports() {
        let (mut t, a, b) = merge_fixture();
        let mobile = BTreeSet::new();

        let empty = BTreeMap::new();
        let err = t.try_merge_sgts(node(11), node(21), &ctx(&empty, &mobile)).unwrap_err();
        assert_eq!(err, ScheduleError::MissingReport { receiver: a.receiver() });

        // Stale: older than one horizon (8 superframes here).
        let reports = reports_with_margins(&a, &b, 20.0, 20.0);
        let mut c = ctx(&reports, &mobile);
        c.now_superframe = 9;
        let err = t.try_merge_sgts(node(11), node(21), &c).unwrap_err();
        assert_eq!(err, ScheduleError::MissingReport { receiver: a.receiver() });

        // A report that misses the receiver's own transmitter is unusable.
        let mut reports = reports_with_margins(&a, &b, 20.0, 20.0);
        reports.get_mut(&a.receiver()).unwrap().rssi_dbm.remove(&a.transmitter());
        let err = t.try_merge_sgts(node(11), node(21), &ctx(&reports, &mobile)).unwrap_err();
        assert_eq!(err, ScheduleError::MissingReport { receiver: a.receiver() });
    }

    #[test]
    fn merge_treats_unheard_interferer_as_floor() {
        let (mut t, a, b) = merge_fixture();
        let mut reports = reports_with_margins(&a, &b, 20.0, 20.0);
        reports.get_mut(&a.receiver()).unwrap().rssi_dbm.remove(&b.transmitter());
        let mobile = BTreeSet::new();
        // Own at -50, interferer at the -92 floor: margin 42 dB, accepted.
        let out = t.try_merge_sgts(node(11), node(21), &ctx(&reports, &mobile)).unwrap();
        assert!(matches!(out, MergeOutcome::Merged { .. }));
    }

    #[test]
    fn releasing_one_shared_owner_leaves_a_plain_gts() {
        let (mut t, a, b) = merge_fixture();
        let reports = reports_with_margins(&a, &b, 20.0, 20.0);
        let mobile = BTreeSet::new();
        t.try_merge_sgts(node(11), node(21), &ctx(&reports, &mobile)).unwrap();
        t.release_allocation(node(11)).unwrap();
        match t.entry_at(a.phase as u64, a.slot_index).unwrap() {
            SlotEntry::Gts(x) => assert_eq!(x.owner, node(21)),
            other => panic!("expected surviving dedicated slot, got {other:?}"),
        }
    }

    #[test]
    fn entry_at_wraps_modulo_horizon() {
        let mut t = ScheduleTable::new(SuperframeConfig::new(0, 0, 3).unwrap()).unwrap();
        let a = t.allocate_gts(req(10, 1, 3)).unwrap().allocation;
        assert_eq!(a.phase, 0);
        assert!(matches!(t.entry_at(8, a.slot_index).unwrap(), SlotEntry::Gts(_)));
        assert_eq!(t.entry_at(9, a.slot_index).unwrap(), SlotEntry::Cap);
        assert_eq!(t.entry_at(8, 0).unwrap(), SlotEntry::Superbeacon);
        assert_eq!(
            t.entry_at(0, 16).unwrap_err(),
            ScheduleError::SlotOutOfRange { slot: 16, slots: 16 }
        );
    }

    #[test]
    fn cap_and_cfp_sum_to_active_portion() {
        let mut t = ScheduleTable::new(SuperframeConfig::new(2, 1, 2).unwrap()).unwrap();
        t.allocate_gbs(node(1)).unwrap();
        t.allocate_gts(req(10, 1, 1)).unwrap();
        for sf in 0..4 {
            let (cap, cfp) = t.cap_cfp(sf);
            assert_eq!((cap + cfp).as_us(), t.config().active_portion().unwrap().as_us());
        }
    }

    #[test]
    fn validate_accepts_fresh_and_built_tables() {
        let t = ScheduleTable::new(SuperframeConfig::default()).unwrap();
        assert!(t.validate_schedule().is_empty());
    }

    #[test]
    fn validate_flags_forged_double_booking() {
        let mut t = ScheduleTable::new(SuperframeConfig::new(0, 0, 3).unwrap()).unwrap();
        let mk = |owner: u16| Allocation {
            owner: node(owner),
            peer: node(1),
            slot_index: 2,
            level: 0,
            phase: 0,
            origin: Origin::Request,
            direction: Direction::Uplink,
        };
        t.forge_single(mk(10));
        t.forge_single(mk(11));
        let v = t.validate_schedule();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, ViolationRule::DoubleBooking);
        assert_eq!(v[0].slot, Some(2));
    }

    #[test]
    fn validate_flags_forged_same_receiver_share() {
        let mut t = ScheduleTable::new(SuperframeConfig::new(0, 0, 3).unwrap()).unwrap();
        let mk = |owner: u16| Allocation {
            owner: node(owner),
            peer: node(1),
            slot_index: 3,
            level: 0,
            phase: 0,
            origin: Origin::Request,
            direction: Direction::Uplink,
        };
        t.forge_merged(mk(10), mk(11));
        let v = t.validate_schedule();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, ViolationRule::SgtsSameReceiver);
    }

    #[test]
    fn min_cap_floor_is_enforced_when_configured() {
        let cfg = SuperframeConfig {
            slots_per_superframe: 4,
            n_max: 0,
            min_cap_slots: 1,
            ..Default::default()
        };
        let mut t = ScheduleTable::new(cfg).unwrap();
        t.allocate_gts(req(10, 1, 0)).unwrap();
        t.allocate_gts(req(11, 1, 0)).unwrap();
        assert_eq!(t.allocate_gts(req(12, 1, 0)).unwrap_err(), ScheduleError::SlotExhausted);
        assert!(t.validate_schedule().is_empty());
    }

    #[test]
    fn dump_covers_every_cell_in_stable_order() {
        let mut t = ScheduleTable::new(SuperframeConfig::new(0, 0, 1).unwrap()).unwrap();
        t.allocate_gbs(node(1)).unwrap();
        t.allocate_gts(req(10, 1, 1)).unwrap();
        let dump = t.dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 2 * 16);
        assert_eq!(lines[0], "sf=0 slot=0 kind=superbeacon");
        assert_eq!(lines[4], "sf=0 slot=4 kind=gbs coordinator=1");
        assert_eq!(
            lines[1],
            "sf=0 slot=1 kind=gts owner=10 peer=1 level=1 phase=0 origin=request direction=uplink"
        );
        assert_eq!(lines[16 + 1], "sf=1 slot=1 kind=cap");
    }
}
