//! Experiments as functions: the demo scheduling workload, transmit-power
//! sweeps for slot sharing, latency measurement, trace audits, and the
//! merge-soundness study. Everything here is deterministic given (inputs,
//! seed) and returns plain data for the CLI to format.

use crate::engine::{rng_stream, EngineError, Trace, TraceBody, World};
use crate::radio::{resolve_reception, survey_rssi, Position, RadioConfig, RadioError, RxOutcome, TxAttempt};
use crate::scenario::Scenario;
use crate::schedule::{
    Direction, MergeContext, MergeOutcome, Origin, RssiReport, ScheduleError, ScheduleTable,
    SlotRequest, SuperframeConfig,
};
use crate::time::SimTime;
use crate::types::NodeId;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad topology: {0}")]
    BadTopology(String),
    #[error("curve is not monotone: {0}")]
    NonMonotone(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Radio(#[from] RadioError),
}

// ─── Demo scheduling workload ───────────────────────────────────────────────

/// The reference workload: three star coordinators and six dedicated-slot
/// requests at descending reservation levels, planned over an 8-superframe
/// horizon. Returns the resulting table for dumping or inspection.
pub fn run_schedule_demo() -> ScheduleTable {
    let cfg = SuperframeConfig::new(0, 0, 3).expect("static demo config");
    let mut table = ScheduleTable::new(cfg).expect("fresh table");
    for c in [1u16, 2, 3] {
        table.allocate_gbs(NodeId(c)).expect("three beacon slots fit");
    }
    let workload: [(u16, u16, u8); 6] =
        [(33, 3, 3), (32, 3, 2), (11, 1, 1), (21, 2, 1), (22, 2, 0), (31, 3, 0)];
    for (owner, peer, level) in workload {
        table
            .allocate_gts(SlotRequest {
                owner: NodeId(owner),
                peer: NodeId(peer),
                level,
                origin: Origin::Request,
                direction: Direction::Uplink,
            })
            .expect("demo workload fits a 16-slot horizon");
    }
    table
}

// ─── Transmit-power sweep ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    /// Mean own-signal margin (own RSSI − other RSSI, dB) this node's
    /// receiver measured at this power step.
    pub delta_db: f64,
    /// Swept transmitter's power at this step, dBm.
    pub power_dbm: f64,
    pub trials: u32,
    pub positives: u32,
}

impl SweepPoint {
    pub fn rate(&self) -> f64 {
        self.positives as f64 / self.trials as f64
    }
}

/// Success curves from a shared-slot power sweep, one per transmitter, each
/// plotted against its own receiver's measured margin.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub swept: NodeId,
    pub fixed: NodeId,
    pub curves: BTreeMap<NodeId, Vec<SweepPoint>>,
    /// Both transmitters deliver to the same coordinator.
    pub common_receiver: bool,
}

/// Replay the slot-sharing measurement procedure over the radio model: per
/// trial, each transmitter fires alone while the receiving coordinators
/// tabulate RSSI, then both fire together in the shared slot and each
/// coordinator reports whether it decoded its own node. The swept node walks
/// the radio's full power range; the other stays at `fixed_power_dbm`.
pub fn run_sgts_sweep(scenario: &Scenario) -> Result<SweepResult, HarnessError> {
    let bad = |m: String| HarnessError::BadTopology(m);
    let sweep = scenario
        .sweep
        .ok_or_else(|| bad("scenario has no [sweep] section".into()))?;
    let radio = scenario.radio_config();
    radio.validate()?;
    radio.check_power(sweep.fixed_power_dbm)?;

    let node = |id: u16| {
        scenario
            .nodes
            .iter()
            .find(|n| n.id == id)
            .ok_or_else(|| bad(format!("sweep references undefined node {id}")))
    };
    let s_spec = node(sweep.swept)?;
    let f_spec = node(sweep.fixed)?;
    let s_rx_id = s_spec
        .parent
        .ok_or_else(|| bad(format!("node {} has no receiving parent", s_spec.id)))?;
    let f_rx_id = f_spec
        .parent
        .ok_or_else(|| bad(format!("node {} has no receiving parent", f_spec.id)))?;
    let s_rx = node(s_rx_id)?;
    let f_rx = node(f_rx_id)?;
    let common = s_rx_id == f_rx_id;

    let swept_id = NodeId(sweep.swept);
    let fixed_id = NodeId(sweep.fixed);
    let s_pos = Position::new(s_spec.x_m, s_spec.y_m);
    let f_pos = Position::new(f_spec.x_m, f_spec.y_m);
    let s_rx_pos = Position::new(s_rx.x_m, s_rx.y_m);
    let f_rx_pos = Position::new(f_rx.x_m, f_rx.y_m);
    let s_rx_nid = NodeId(s_rx_id);
    let f_rx_nid = NodeId(f_rx_id);
    // Shared-slot start instants carry the nodes' clock offsets; the base is
    // arbitrary but must leave room for a negative skew.
    let base = SimTime(1_000);
    let s_start = base.offset_us(s_spec.clock_offset_us);
    let f_start = base.offset_us(f_spec.clock_offset_us);
    let floor = radio.sensitivity_dbm;

    let mut rng = rng_stream(scenario.seed, swept_id, "sweep");
    let mut s_points = Vec::new();
    let mut f_points = Vec::new();
    let steps = ((radio.tx_power_max_dbm - radio.tx_power_min_dbm) / sweep.step_db).floor() as u32;
    for k in 0..=steps {
        let power = radio.tx_power_min_dbm + f64::from(k) * sweep.step_db;
        let mut sum_s = 0.0;
        let mut sum_f = 0.0;
        let mut pos_s = 0u32;
        let mut pos_f = 0u32;
        for _ in 0..sweep.trials {
            let f_alone =
                [TxAttempt { transmitter: fixed_id, position: f_pos, power_dbm: sweep.fixed_power_dbm, start: f_start }];
            let s_alone =
                [TxAttempt { transmitter: swept_id, position: s_pos, power_dbm: power, start: s_start }];
            let measure = |rx: NodeId, at: &Position, frames: &[TxAttempt], tx: NodeId, rng: &mut ChaCha8Rng| {
                survey_rssi(&radio, rx, at, frames, rng).get(&tx).copied().unwrap_or(floor)
            };
            let (delta_s, delta_f) = if common {
                let f_at_rx = measure(f_rx_nid, &f_rx_pos, &f_alone, fixed_id, &mut rng);
                let s_at_rx = measure(f_rx_nid, &f_rx_pos, &s_alone, swept_id, &mut rng);
                (s_at_rx - f_at_rx, f_at_rx - s_at_rx)
            } else {
                let f_at_frx = measure(f_rx_nid, &f_rx_pos, &f_alone, fixed_id, &mut rng);
                let f_at_srx = measure(s_rx_nid, &s_rx_pos, &f_alone, fixed_id, &mut rng);
                let s_at_frx = measure(f_rx_nid, &f_rx_pos, &s_alone, swept_id, &mut rng);
                let s_at_srx = measure(s_rx_nid, &s_rx_pos, &s_alone, swept_id, &mut rng);
                (s_at_srx - f_at_srx, f_at_frx - s_at_frx)
            };
            sum_s += delta_s;
            sum_f += delta_f;

            let shared = [
                TxAttempt { transmitter: fixed_id, position: f_pos, power_dbm: sweep.fixed_power_dbm, start: f_start },
                TxAttempt { transmitter: swept_id, position: s_pos, power_dbm: power, start: s_start },
            ];
            if common {
                let outcome = resolve_reception(&radio, f_rx_nid, &f_rx_pos, &shared, &mut rng)?;
                if matches!(outcome, RxOutcome::Decoded { transmitter, .. } if transmitter == fixed_id) {
                    pos_f += 1;
                }
                if matches!(outcome, RxOutcome::Decoded { transmitter, .. } if transmitter == swept_id) {
                    pos_s += 1;
                }
            } else {
                let at_frx = resolve_reception(&radio, f_rx_nid, &f_rx_pos, &shared, &mut rng)?;
                if matches!(at_frx, RxOutcome::Decoded { transmitter, .. } if transmitter == fixed_id) {
                    pos_f += 1;
                }
                let at_srx = resolve_reception(&radio, s_rx_nid, &s_rx_pos, &shared, &mut rng)?;
                if matches!(at_srx, RxOutcome::Decoded { transmitter, .. } if transmitter == swept_id) {
                    pos_s += 1;
                }
            }
        }
        let trials = sweep.trials;
        s_points.push(SweepPoint {
            delta_db: sum_s / f64::from(trials),
            power_dbm: power,
            trials,
            positives: pos_s,
        });
        f_points.push(SweepPoint {
            delta_db: sum_f / f64::from(trials),
            power_dbm: power,
            trials,
            positives: pos_f,
        });
    }

    let mut curves = BTreeMap::new();
    curves.insert(swept_id, s_points);
    curves.insert(fixed_id, f_points);
    Ok(SweepResult { swept: swept_id, fixed: fixed_id, curves, common_receiver: common })
}

// ─── Window estimation ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct WindowEstimate {
    /// Span on the common margin axis where neither transmitter clears `hi`
    /// — the region where the slot should not be shared.
    pub window_db: f64,
    /// Where the two success curves meet on the common axis (coordinates of
    /// the swept node's own margin; the fixed node's curve is mirrored).
    pub crossover_db: f64,
    /// Per transmitter: own-axis margins where its curve crosses `lo` / `hi`.
    pub bands: BTreeMap<NodeId, (f64, f64)>,
}

/// Estimate the no-sharing window and the curves' crossover. `lo`/`hi` are
/// the success rates bounding the transition band (defaults 0.05 / 0.95).
pub fn estimate_window(
    result: &SweepResult,
    lo: f64,
    hi: f64,
) -> Result<WindowEstimate, HarnessError> {
    assert!(0.0 < lo && lo < hi && hi < 1.0, "rate band must satisfy 0 < lo < hi < 1");
    let sorted = |node: NodeId| -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> =
            result.curves[&node].iter().map(|p| (p.delta_db, p.rate())).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts
    };
    let s_curve = sorted(result.swept);
    let f_curve = sorted(result.fixed);

    let mut bands = BTreeMap::new();
    for (node, curve) in [(result.swept, &s_curve), (result.fixed, &f_curve)] {
        let x_lo = crossing_from_below(curve, lo).ok_or_else(|| {
            HarnessError::NonMonotone(format!("node {node} success never rises through {lo}"))
        })?;
        let x_hi = crossing_from_below(curve, hi).ok_or_else(|| {
            HarnessError::NonMonotone(format!("node {node} success never rises through {hi}"))
        })?;
        bands.insert(node, (x_lo, x_hi));
    }
    // Mirroring the fixed curve puts both on one axis; its safe side is the
    // negative end, so the unshareable window runs between the hi-crossings.
    let window_db = bands[&result.swept].1 + bands[&result.fixed].1;
    let crossover_db = estimate_crossover(result)?;
    Ok(WindowEstimate { window_db, crossover_db, bands })
}

/// Just the curves' meeting point on the common axis. Unlike
/// [`estimate_window`] this needs no rate-band crossings, so it works when
/// shadowing keeps a curve from saturating within the radio's power range.
pub fn estimate_crossover(result: &SweepResult) -> Result<f64, HarnessError> {
    let sorted = |node: NodeId| -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> =
            result.curves[&node].iter().map(|p| (p.delta_db, p.rate())).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts
    };
    let s_curve = sorted(result.swept);
    let mut f_mirrored: Vec<(f64, f64)> =
        sorted(result.fixed).iter().map(|(x, r)| (-x, *r)).collect();
    f_mirrored.sort_by(|a, b| a.0.total_cmp(&b.0));
    curves_intersection(&s_curve, &f_mirrored).ok_or_else(|| {
        HarnessError::NonMonotone("curves never exchange dominance; no crossover".into())
    })
}

/// First x where the piecewise-linear curve rises through `target`.
fn crossing_from_below(points: &[(f64, f64)], target: f64) -> Option<f64> {
    for w in points.windows(2) {
        let (x0, r0) = w[0];
        let (x1, r1) = w[1];
        if r0 < target && r1 >= target {
            return Some(x0 + (x1 - x0) * (target - r0) / (r1 - r0));
        }
    }
    None
}

fn eval_clamped(points: &[(f64, f64)], x: f64) -> f64 {
    let first = points.first().expect("curves are non-empty");
    let last = points.last().expect("curves are non-empty");
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    for w in points.windows(2) {
        let (x0, r0) = w[0];
        let (x1, r1) = w[1];
        if x0 <= x && x <= x1 {
            if x1 == x0 {
                return r0;
            }
            return r0 + (r1 - r0) * (x - x0) / (x1 - x0);
        }
    }
    last.1
}

/// Intersection of an ascending and a descending success curve. When their
/// difference holds a zero plateau (step curves at σ=0) the plateau midpoint
/// is reported.
fn curves_intersection(rising: &[(f64, f64)], falling: &[(f64, f64)]) -> Option<f64> {
    let mut xs: Vec<f64> = rising.iter().chain(falling).map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let d: Vec<(f64, f64)> =
        xs.iter().map(|&x| (x, eval_clamped(rising, x) - eval_clamped(falling, x))).collect();
    let mut first = None;
    let mut last = None;
    for w in d.windows(2) {
        let (x0, d0) = w[0];
        let (x1, d1) = w[1];
        if d0 < 0.0 && d1 >= 0.0 && first.is_none() {
            first = Some(x0 + (x1 - x0) * (-d0) / (d1 - d0));
        }
        if d0 <= 0.0 && d1 > 0.0 {
            last = Some(x0 + (x1 - x0) * (-d0) / (d1 - d0));
        }
    }
    match (first, last) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (None, None) => None,
    }
}

// ─── Latency measurement ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct NodeLatency {
    pub frames: u64,
    pub max_us: u64,
    pub mean_us: f64,
    /// 2^level × beacon interval + one slot.
    pub bound_us: u64,
    /// Latency counts bucketed by slot-duration multiples.
    pub histogram: BTreeMap<u64, u64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencyStats {
    pub per_node: BTreeMap<NodeId, NodeLatency>,
    pub violations: Vec<(NodeId, u64)>,
}

impl LatencyStats {
    pub fn total_frames(&self) -> u64 {
        self.per_node.values().map(|n| n.frames).sum()
    }
}

/// Queue-to-air latency statistics from a finished run.
pub fn latency_stats(world: &World) -> LatencyStats {
    let cfg = world.config();
    let bi = cfg.superframe.beacon_interval().as_us();
    let slot = cfg.superframe.slot_duration().expect("validated config").as_us();
    let mut stats = LatencyStats::default();
    for r in world.latencies() {
        let bound = (1u64 << r.level) * bi + slot;
        let lat = r.latency().as_us();
        let entry = stats.per_node.entry(r.node).or_insert_with(|| NodeLatency {
            frames: 0,
            max_us: 0,
            mean_us: 0.0,
            bound_us: bound,
            histogram: BTreeMap::new(),
        });
        entry.frames += 1;
        entry.max_us = entry.max_us.max(lat);
        entry.mean_us += lat as f64; // divided once all frames are in
        entry.bound_us = entry.bound_us.max(bound);
        *entry.histogram.entry(lat / slot).or_insert(0) += 1;
        if lat > bound {
            stats.violations.push((r.node, lat));
        }
    }
    for n in stats.per_node.values_mut() {
        n.mean_us /= n.frames as f64;
    }
    stats
}

/// Build the scenario's world, run it, and summarize guaranteed-slot latency.
pub fn measure_gts_latency(scenario: &Scenario) -> Result<LatencyStats, HarnessError> {
    let mut world = World::new(scenario.world_config())?;
    world.run_superframes(scenario.run_superframes)?;
    Ok(latency_stats(&world))
}

// ─── Trace audit ────────────────────────────────────────────────────────────

/// Scan a trace for physical-exclusivity violations: beacons overlapping
/// anything, and overlaps touching a guaranteed (non-contention) data
/// transmission. Contention transmissions colliding with each other are the
/// protocol working as designed and are not reported. Returns one line per
/// problem; an empty result is a clean trace.
pub fn audit_trace(trace: &Trace) -> Vec<String> {
    let contention: BTreeSet<(NodeId, SimTime)> = trace
        .events()
        .iter()
        .filter_map(|e| match e.body {
            TraceBody::CsmaTxStart { .. } => Some((e.node, e.time)),
            _ => None,
        })
        .collect();
    struct Span {
        start: u64,
        end: u64,
        node: NodeId,
        kind: &'static str,
        superframe: u64,
        slot: u16,
        contention: bool,
    }
    let mut spans: Vec<Span> = trace
        .events()
        .iter()
        .filter_map(|e| match &e.body {
            TraceBody::Tx { kind, duration, superframe, slot, .. } => Some(Span {
                start: e.time.as_us(),
                end: e.time.as_us() + duration.as_us(),
                node: e.node,
                kind,
                superframe: *superframe,
                slot: *slot,
                contention: contention.contains(&(e.node, e.time)),
            }),
            _ => None,
        })
        .collect();
    spans.sort_by_key(|s| (s.start, s.node));
    let mut problems = Vec::new();
    for i in 0..spans.len() {
        for j in i + 1..spans.len() {
            if spans[j].start >= spans[i].end {
                break;
            }
            let (a, b) = (&spans[i], &spans[j]);
            let is_beacon = |s: &Span| matches!(s.kind, "beacon" | "superbeacon");
            if is_beacon(a) || is_beacon(b) {
                problems.push(format!(
                    "beacon overlap: node {} ({}) and node {} ({}) at {}us",
                    a.node, a.kind, b.node, b.kind, b.start
                ));
            } else if !a.contention || !b.contention {
                problems.push(format!(
                    "guaranteed-slot overlap: node {} and node {} at {}us (sf {} slot {})",
                    a.node, b.node, b.start, b.superframe, b.slot
                ));
            }
        }
    }
    problems
}

// ─── Merge soundness ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MergeStudy {
    pub pairs_tried: u32,
    pub accepted: u32,
    pub occurrences: u64,
    pub collisions: u64,
}

impl MergeStudy {
    pub fn collision_rate(&self) -> f64 {
        if self.occurrences == 0 {
            0.0
        } else {
            self.collisions as f64 / self.occurrences as f64
        }
    }
}

/// Stress the merge rule: random two-pair geometries are measured through
/// the shadowed radio, offered to the real merge check, and — when accepted
/// — fired in a shared slot many times with fresh fading to count how often
/// either receiver loses its own frame.
pub fn merge_collision_study(
    radio: &RadioConfig,
    threshold_db: f64,
    pairs: u32,
    occurrences_per_merge: u64,
    seed: u64,
) -> Result<MergeStudy, HarnessError> {
    radio.validate()?;
    let (rx_a, tx_a, rx_b, tx_b) = (NodeId(1), NodeId(10), NodeId(2), NodeId(20));
    let mut rng = rng_stream(seed, NodeId(0), "merge-study");
    let mut study = MergeStudy::default();
    let power = 0.0;
    let start = SimTime(1_000);
    let attempt = |tx: NodeId, at: Position| TxAttempt {
        transmitter: tx,
        position: at,
        power_dbm: power,
        start,
    };
    for _ in 0..pairs {
        study.pairs_tried += 1;
        // Receivers log-spaced from "down the hall" to "other building wing";
        // each transmitter sits 1.5–3 m from its own receiver.
        let separation = 8.0 * (80.0f64 / 8.0).powf(rng.random::<f64>());
        let pa = Position::new(0.0, 0.0);
        let pb = Position::new(separation, 0.0);
        let place = |rng: &mut ChaCha8Rng, origin: Position| {
            let d = 1.5 + 1.5 * rng.random::<f64>();
            let angle = std::f64::consts::TAU * rng.random::<f64>();
            Position::new(origin.x_m + d * angle.cos(), origin.y_m + d * angle.sin())
        };
        let ta = place(&mut rng, pa);
        let tb = place(&mut rng, pb);

        let floor = radio.sensitivity_dbm;
        let a_alone = [attempt(tx_a, ta)];
        let b_alone = [attempt(tx_b, tb)];
        let measure = |rx: NodeId, at: &Position, frames: &[TxAttempt], tx: NodeId, rng: &mut ChaCha8Rng| {
            survey_rssi(radio, rx, at, frames, rng).get(&tx).copied().unwrap_or(floor)
        };
        let a_at_a = measure(rx_a, &pa, &a_alone, tx_a, &mut rng);
        let a_at_b = measure(rx_b, &pb, &a_alone, tx_a, &mut rng);
        let b_at_a = measure(rx_a, &pa, &b_alone, tx_b, &mut rng);
        let b_at_b = measure(rx_b, &pb, &b_alone, tx_b, &mut rng);
        let mut reports = BTreeMap::new();
        reports.insert(
            rx_a,
            RssiReport {
                receiver: rx_a,
                rssi_dbm: BTreeMap::from([(tx_a, a_at_a), (tx_b, b_at_a)]),
                superframe: 0,
            },
        );
        reports.insert(
            rx_b,
            RssiReport {
                receiver: rx_b,
                rssi_dbm: BTreeMap::from([(tx_a, a_at_b), (tx_b, b_at_b)]),
                superframe: 0,
            },
        );

        let mut table = ScheduleTable::new(SuperframeConfig::new(0, 0, 0)?)?;
        for (owner, peer) in [(tx_a, rx_a), (tx_b, rx_b)] {
            table.allocate_gts(SlotRequest {
                owner,
                peer,
                level: 0,
                origin: Origin::Request,
                direction: Direction::Uplink,
            })?;
        }
        let mobile = BTreeSet::new();
        let ctx = MergeContext {
            reports: &reports,
            threshold_db,
            sensitivity_dbm: radio.sensitivity_dbm,
            now_superframe: 0,
            mobile: &mobile,
        };
        let outcome = table.try_merge_sgts(tx_a, tx_b, &ctx)?;
        if !matches!(outcome, MergeOutcome::Merged { .. }) {
            continue;
        }
        study.accepted += 1;

        for _ in 0..occurrences_per_merge {
            study.occurrences += 1;
            let shared = [attempt(tx_a, ta), attempt(tx_b, tb)];
            let at_a = resolve_reception(radio, rx_a, &pa, &shared, &mut rng)?;
            let at_b = resolve_reception(radio, rx_b, &pb, &shared, &mut rng)?;
            let a_ok =
                matches!(at_a, RxOutcome::Decoded { transmitter, .. } if transmitter == tx_a);
            let b_ok =
                matches!(at_b, RxOutcome::Decoded { transmitter, .. } if transmitter == tx_b);
            if !a_ok || !b_ok {
                study.collisions += 1;
            }
        }
    }
    Ok(study)
}
