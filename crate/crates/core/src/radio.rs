//! Log-distance propagation with per-frame shadowing and two-frame capture.
//!
//! Received power follows `tx_power - (ref_loss + 10·exp·log10(d/d0))` plus a
//! zero-mean Gaussian shadowing term drawn once per (frame, listener). A lone
//! frame above sensitivity decodes. When exactly two audible frames overlap,
//! the earlier one decodes if its power beats the later frame (noise-combined)
//! by the capture threshold, helped by a start-time bias that grows 1 dB/µs up
//! to a saturation; the later frame gets the symmetric check without the bias.
//! Anything denser than two audible frames is outside the validated envelope
//! and reported as an error for the caller to treat as a collision.

use crate::types::NodeId;
use crate::SimTime;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RadioError {
    #[error("transmit power {dbm} dBm outside supported range [{min}, {max}]")]
    PowerOutOfRange { dbm: f64, min: f64, max: f64 },
    #[error("capture model resolves at most two audible overlapping frames, got {0}")]
    MoreThanTwoAttempts(usize),
    #[error("radio config violation: {0}")]
    ConfigViolation(String),
}

/// Planar node position in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x_m: f64,
    pub y_m: f64,
}

impl Position {
    pub fn new(x_m: f64, y_m: f64) -> Self {
        Position { x_m, y_m }
    }

    pub fn distance_m(&self, other: &Position) -> f64 {
        ((self.x_m - other.x_m).powi(2) + (self.y_m - other.y_m).powi(2)).sqrt()
    }
}

/// Propagation, receiver, and capture parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioConfig {
    /// Reference distance for the path-loss intercept, metres.
    pub d0_m: f64,
    /// Path loss at the reference distance, dB.
    pub ref_loss_db: f64,
    /// Log-distance path-loss exponent.
    pub path_loss_exponent: f64,
    /// Standard deviation of per-frame shadowing, dB (0 disables it but the
    /// draw still happens, keeping RNG consumption identical).
    pub shadowing_sigma_db: f64,
    /// Frames below this power are inaudible, dBm.
    pub sensitivity_dbm: f64,
    /// Thermal floor combined into the interferer during capture, dBm.
    pub noise_floor_dbm: f64,
    /// Power advantage required to decode through an overlap, dB (inclusive).
    pub capture_threshold_db: f64,
    /// Extra effective margin per microsecond of head start, dB/µs.
    pub bias_slope_db_per_us: f64,
    /// Head-start bias cap, dB.
    pub bias_saturation_db: f64,
    /// Supported transmit power range, dBm.
    pub tx_power_min_dbm: f64,
    pub tx_power_max_dbm: f64,
    /// Energy level at which clear-channel assessment reports busy, dBm.
    pub cca_threshold_dbm: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            d0_m: 1.0,
            ref_loss_db: 40.0,
            path_loss_exponent: 3.0,
            shadowing_sigma_db: 0.0,
            sensitivity_dbm: -92.0,
            noise_floor_dbm: -95.0,
            capture_threshold_db: 5.0,
            bias_slope_db_per_us: 1.0,
            bias_saturation_db: 5.0,
            tx_power_min_dbm: -16.0,
            tx_power_max_dbm: 3.6,
            cca_threshold_dbm: -82.0,
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<(), RadioError> {
        let bad = |msg: String| Err(RadioError::ConfigViolation(msg));
        if !(self.d0_m > 0.0) {
            return bad(format!("reference distance must be positive, got {}", self.d0_m));
        }
        if !(self.path_loss_exponent > 0.0) {
            return bad(format!(
                "path-loss exponent must be positive, got {}",
                self.path_loss_exponent
            ));
        }
        if !(self.shadowing_sigma_db >= 0.0) {
            return bad(format!("shadowing sigma must be >= 0, got {}", self.shadowing_sigma_db));
        }
        if self.tx_power_min_dbm > self.tx_power_max_dbm {
            return bad(format!(
                "empty transmit power range [{}, {}]",
                self.tx_power_min_dbm, self.tx_power_max_dbm
            ));
        }
        if !(self.capture_threshold_db >= 0.0) {
            return bad(format!(
                "capture threshold must be >= 0, got {}",
                self.capture_threshold_db
            ));
        }
        if !(self.bias_slope_db_per_us >= 0.0) || !(self.bias_saturation_db >= 0.0) {
            return bad("capture bias parameters must be >= 0".into());
        }
        Ok(())
    }

    pub fn check_power(&self, dbm: f64) -> Result<(), RadioError> {
        if dbm < self.tx_power_min_dbm || dbm > self.tx_power_max_dbm || !dbm.is_finite() {
            return Err(RadioError::PowerOutOfRange {
                dbm,
                min: self.tx_power_min_dbm,
                max: self.tx_power_max_dbm,
            });
        }
        Ok(())
    }

    /// Log-distance path loss, clamped at the reference distance so the model
    /// never predicts gain in the very near field.
    pub fn path_loss_db(&self, distance_m: f64) -> f64 {
        let d = distance_m.max(self.d0_m);
        self.ref_loss_db + 10.0 * self.path_loss_exponent * (d / self.d0_m).log10()
    }

    /// Mean received power without shadowing, dBm.
    pub fn expected_rssi_dbm(&self, tx_power_dbm: f64, distance_m: f64) -> f64 {
        tx_power_dbm - self.path_loss_db(distance_m)
    }

    fn bias_db(&self, head_start_us: u64) -> f64 {
        (self.bias_slope_db_per_us * head_start_us as f64).min(self.bias_saturation_db)
    }
}

/// Linear-domain power sum of two dBm levels.
pub fn power_sum_dbm(a_dbm: f64, b_dbm: f64) -> f64 {
    let lin = 10f64.powf(a_dbm / 10.0) + 10f64.powf(b_dbm / 10.0);
    10.0 * lin.log10()
}

/// One frame on the air.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TxAttempt {
    pub transmitter: NodeId,
    pub position: Position,
    pub power_dbm: f64,
    pub start: SimTime,
}

/// What a listener got out of a resolution window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RxOutcome {
    Decoded { transmitter: NodeId, rssi_dbm: f64 },
    /// Audible energy, no decodable frame.
    Collision { strongest_dbm: f64 },
    /// Nothing above sensitivity.
    Idle,
}

fn shadowed_rssi<R: Rng + ?Sized>(
    cfg: &RadioConfig,
    listener: NodeId,
    at: &Position,
    attempts: &[TxAttempt],
    rng: &mut R,
) -> Vec<(usize, f64)> {
    let normal = Normal::new(0.0, cfg.shadowing_sigma_db).expect("sigma validated >= 0");
    let mut order: Vec<usize> = (0..attempts.len()).collect();
    // Shadowing draws happen in transmitter-id order no matter how the caller
    // assembled the slice, so equal seeds give equal fields.
    order.sort_by_key(|i| (attempts[*i].transmitter, attempts[*i].start.as_us()));
    let mut out = Vec::with_capacity(attempts.len());
    for i in order {
        let a = &attempts[i];
        let shadow = normal.sample(rng);
        if a.transmitter == listener {
            continue;
        }
        let rssi = cfg.expected_rssi_dbm(a.power_dbm, a.position.distance_m(at)) + shadow;
        out.push((i, rssi));
    }
    out.sort_by_key(|(i, _)| *i);
    out
}

/// Per-transmitter received power for every audible frame, as a measurement
/// receiver would tabulate it. Inaudible frames are omitted.
pub fn survey_rssi<R: Rng + ?Sized>(
    cfg: &RadioConfig,
    listener: NodeId,
    at: &Position,
    attempts: &[TxAttempt],
    rng: &mut R,
) -> BTreeMap<NodeId, f64> {
    shadowed_rssi(cfg, listener, at, attempts, rng)
        .into_iter()
        .filter(|(_, rssi)| *rssi >= cfg.sensitivity_dbm)
        .map(|(i, rssi)| (attempts[i].transmitter, rssi))
        .collect()
}

/// Combined energy a clear-channel assessment sees, dBm. `None` when the
/// channel carries nothing at all.
pub fn channel_power_dbm<R: Rng + ?Sized>(
    cfg: &RadioConfig,
    listener: NodeId,
    at: &Position,
    attempts: &[TxAttempt],
    rng: &mut R,
) -> Option<f64> {
    let rssis = shadowed_rssi(cfg, listener, at, attempts, rng);
    let mut acc: Option<f64> = None;
    for (_, rssi) in rssis {
        acc = Some(match acc {
            None => rssi,
            Some(p) => power_sum_dbm(p, rssi),
        });
    }
    acc
}

/// Resolve every frame overlapping one reception window at one listener.
///
/// Callers pass all concurrent attempts; power validity is enforced here so a
/// mis-configured transmitter fails loudly instead of bending the model.
pub fn resolve_reception<R: Rng + ?Sized>(
    cfg: &RadioConfig,
    listener: NodeId,
    at: &Position,
    attempts: &[TxAttempt],
    rng: &mut R,
) -> Result<RxOutcome, RadioError> {
    for a in attempts {
        cfg.check_power(a.power_dbm)?;
    }
    let audible: Vec<(usize, f64)> = shadowed_rssi(cfg, listener, at, attempts, rng)
        .into_iter()
        .filter(|(_, rssi)| *rssi >= cfg.sensitivity_dbm)
        .collect();

    match audible.len() {
        0 => Ok(RxOutcome::Idle),
        1 => {
            let (i, rssi) = audible[0];
            Ok(RxOutcome::Decoded { transmitter: attempts[i].transmitter, rssi_dbm: rssi })
        }
        2 => {
            let (i, rssi_i) = audible[0];
            let (j, rssi_j) = audible[1];
            // Earlier start is "early"; a dead tie falls to the lower id,
            // which then gets zero bias anyway.
            let i_first = match attempts[i].start.cmp(&attempts[j].start) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Greater => false,
                std::cmp::Ordering::Equal => attempts[i].transmitter <= attempts[j].transmitter,
            };
            let ((e, rssi_e), (l, rssi_l)) = if i_first {
                ((i, rssi_i), (j, rssi_j))
            } else {
                ((j, rssi_j), (i, rssi_i))
            };
            let head_start = attempts[l].start.saturating_sub(attempts[e].start).as_us();
            let c_early =
                rssi_e - power_sum_dbm(rssi_l, cfg.noise_floor_dbm) + cfg.bias_db(head_start);
            let c_late = rssi_l - power_sum_dbm(rssi_e, cfg.noise_floor_dbm);
            if c_early >= cfg.capture_threshold_db {
                Ok(RxOutcome::Decoded { transmitter: attempts[e].transmitter, rssi_dbm: rssi_e })
            } else if c_late >= cfg.capture_threshold_db {
                Ok(RxOutcome::Decoded { transmitter: attempts[l].transmitter, rssi_dbm: rssi_l })
            } else {
                Ok(RxOutcome::Collision { strongest_dbm: rssi_e.max(rssi_l) })
            }
        }
        n => Err(RadioError::MoreThanTwoAttempts(n)),
    }
}
