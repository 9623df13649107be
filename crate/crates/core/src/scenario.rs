//! Scenario files: the complete, human-editable description of one run.
//!
//! Parsing is strict — an unknown key is an error, never a silently ignored
//! typo — and every run-affecting parameter lives in the file (plus the
//! seed), so a scenario pins its outputs bit for bit. Sections mirror the
//! engine's configuration structs but keep their own serde types so the file
//! format can't drift when internals are refactored.

use crate::engine::{
    NodeSpec, PdsSpec, RequestSpec, TrafficKind, TrafficSpec, WorldConfig,
};
use crate::protocol::{CsmaConfig, CurrentProfile, Role, SgtsPolicy};
use crate::radio::{Position, RadioConfig};
use crate::schedule::{Direction, SuperframeConfig};
use crate::time::SYMBOL_US;
use crate::types::NodeId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    /// Syntax or schema violation, with toml's line/column diagnostics.
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Parse and validate scenario text.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = toml::from_str(text)?;
    scenario.validate()?;
    Ok(scenario)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    /// Simulated length of `run` and `latency` executions.
    #[serde(default = "defaults::run_superframes")]
    pub run_superframes: u64,
    #[serde(default)]
    pub superframe: SuperframeSection,
    #[serde(default)]
    pub radio: RadioSection,
    #[serde(default)]
    pub energy: EnergySection,
    #[serde(default)]
    pub csma: CsmaSection,
    #[serde(default)]
    pub sgts: SgtsSection,
    #[serde(default)]
    pub nodes: Vec<NodeSection>,
    #[serde(default)]
    pub traffic: Vec<TrafficSection>,
    #[serde(default)]
    pub requests: Vec<RequestSection>,
    #[serde(default)]
    pub pds: Vec<RequestSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: defaults::seed(),
            run_superframes: defaults::run_superframes(),
            superframe: Default::default(),
            radio: Default::default(),
            energy: Default::default(),
            csma: Default::default(),
            sgts: Default::default(),
            nodes: Vec::new(),
            traffic: Vec::new(),
            requests: Vec::new(),
            pds: Vec::new(),
            sweep: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperframeSection {
    #[serde(default)]
    pub bo: u8,
    #[serde(default)]
    pub so: u8,
    #[serde(default = "defaults::n_max")]
    pub n_max: u8,
    #[serde(default = "defaults::slots")]
    pub slots: u16,
    #[serde(default)]
    pub min_cap_slots: u16,
}

impl Default for SuperframeSection {
    fn default() -> Self {
        SuperframeSection { bo: 0, so: 0, n_max: defaults::n_max(), slots: defaults::slots(), min_cap_slots: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioSection {
    #[serde(default = "defaults::exponent")]
    pub exponent: f64,
    #[serde(default)]
    pub sigma_db: f64,
    #[serde(default = "defaults::capture_threshold_db")]
    pub capture_threshold_db: f64,
    #[serde(default = "defaults::sensitivity_dbm")]
    pub sensitivity_dbm: f64,
    #[serde(default = "defaults::bias_db_per_us")]
    pub bias_db_per_us: f64,
    #[serde(default = "defaults::bias_saturation_db")]
    pub bias_saturation_db: f64,
    #[serde(default = "defaults::d0_m")]
    pub d0_m: f64,
    #[serde(default = "defaults::ref_loss_db")]
    pub ref_loss_db: f64,
    #[serde(default = "defaults::noise_floor_dbm")]
    pub noise_floor_dbm: f64,
    #[serde(default = "defaults::cca_threshold_dbm")]
    pub cca_threshold_dbm: f64,
    #[serde(default = "defaults::tx_power_min_dbm")]
    pub tx_power_min_dbm: f64,
    #[serde(default = "defaults::tx_power_max_dbm")]
    pub tx_power_max_dbm: f64,
}

impl Default for RadioSection {
    fn default() -> Self {
        RadioSection {
            exponent: defaults::exponent(),
            sigma_db: 0.0,
            capture_threshold_db: defaults::capture_threshold_db(),
            sensitivity_dbm: defaults::sensitivity_dbm(),
            bias_db_per_us: defaults::bias_db_per_us(),
            bias_saturation_db: defaults::bias_saturation_db(),
            d0_m: defaults::d0_m(),
            ref_loss_db: defaults::ref_loss_db(),
            noise_floor_dbm: defaults::noise_floor_dbm(),
            cca_threshold_dbm: defaults::cca_threshold_dbm(),
            tx_power_min_dbm: defaults::tx_power_min_dbm(),
            tx_power_max_dbm: defaults::tx_power_max_dbm(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySection {
    #[serde(default = "defaults::doze_ua")]
    pub doze_ua: f64,
    #[serde(default = "defaults::listen_ua")]
    pub listen_ua: f64,
    #[serde(default = "defaults::tx_ua")]
    pub tx_ua: f64,
    #[serde(default = "defaults::waking_ua")]
    pub waking_ua: f64,
}

impl Default for EnergySection {
    fn default() -> Self {
        EnergySection {
            doze_ua: defaults::doze_ua(),
            listen_ua: defaults::listen_ua(),
            tx_ua: defaults::tx_ua(),
            waking_ua: defaults::waking_ua(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsmaSection {
    #[serde(default = "defaults::min_be")]
    pub min_be: u8,
    #[serde(default = "defaults::max_be")]
    pub max_be: u8,
    #[serde(default = "defaults::max_backoffs")]
    pub max_backoffs: u8,
}

impl Default for CsmaSection {
    fn default() -> Self {
        CsmaSection {
            min_be: defaults::min_be(),
            max_be: defaults::max_be(),
            max_backoffs: defaults::max_backoffs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgtsSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "defaults::sgts_threshold_db")]
    pub threshold_db: f64,
}

impl Default for SgtsSection {
    fn default() -> Self {
        SgtsSection { enabled: false, threshold_db: defaults::sgts_threshold_db() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSection {
    pub id: u16,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<u16>,
    pub x_m: f64,
    pub y_m: f64,
    #[serde(default = "defaults::tx_power_dbm")]
    pub tx_power_dbm: f64,
    #[serde(default)]
    pub clock_offset_us: i64,
    #[serde(default)]
    pub mobile: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrafficClass {
    Gts,
    Cap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSection {
    pub node: u16,
    pub kind: TrafficClass,
    pub period_us: u64,
    #[serde(default)]
    pub start_us: u64,
}

/// One dedicated-slot request (or unprompted grant, under `[[pds]]`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestSection {
    pub owner: u16,
    pub peer: u16,
    pub level: u8,
    #[serde(default = "defaults::direction")]
    pub direction: Direction,
    /// Absent: installed before the run starts. Present: signaled over the
    /// air at this instant, activating at the following horizon boundary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_us: Option<u64>,
}

/// Power-sweep experiment: `swept` walks the radio's whole power range in
/// `step_db` steps while `fixed` stays at `fixed_power_dbm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub swept: u16,
    pub fixed: u16,
    #[serde(default = "defaults::fixed_power_dbm")]
    pub fixed_power_dbm: f64,
    #[serde(default = "defaults::step_db")]
    pub step_db: f64,
    #[serde(default = "defaults::trials")]
    pub trials: u32,
}

mod defaults {
    use crate::schedule::Direction;

    pub fn seed() -> u64 {
        1
    }
    pub fn run_superframes() -> u64 {
        16
    }
    pub fn n_max() -> u8 {
        3
    }
    pub fn slots() -> u16 {
        16
    }
    pub fn exponent() -> f64 {
        3.0
    }
    pub fn capture_threshold_db() -> f64 {
        5.0
    }
    pub fn sensitivity_dbm() -> f64 {
        -92.0
    }
    pub fn bias_db_per_us() -> f64 {
        1.0
    }
    pub fn bias_saturation_db() -> f64 {
        5.0
    }
    pub fn d0_m() -> f64 {
        1.0
    }
    pub fn ref_loss_db() -> f64 {
        40.0
    }
    pub fn noise_floor_dbm() -> f64 {
        -95.0
    }
    pub fn cca_threshold_dbm() -> f64 {
        -82.0
    }
    pub fn tx_power_min_dbm() -> f64 {
        -16.0
    }
    pub fn tx_power_max_dbm() -> f64 {
        3.6
    }
    pub fn doze_ua() -> f64 {
        40.0
    }
    pub fn listen_ua() -> f64 {
        15_000.0
    }
    pub fn tx_ua() -> f64 {
        17_000.0
    }
    pub fn waking_ua() -> f64 {
        3_000.0
    }
    pub fn min_be() -> u8 {
        3
    }
    pub fn max_be() -> u8 {
        5
    }
    pub fn max_backoffs() -> u8 {
        4
    }
    pub fn sgts_threshold_db() -> f64 {
        10.0
    }
    pub fn tx_power_dbm() -> f64 {
        3.6
    }
    pub fn direction() -> Direction {
        Direction::Uplink
    }
    pub fn fixed_power_dbm() -> f64 {
        -6.0
    }
    pub fn step_db() -> f64 {
        0.5
    }
    pub fn trials() -> u32 {
        500
    }
}

impl Scenario {
    pub fn superframe_config(&self) -> SuperframeConfig {
        SuperframeConfig {
            bo: self.superframe.bo,
            so: self.superframe.so,
            n_max: self.superframe.n_max,
            slots_per_superframe: self.superframe.slots,
            symbol_us: SYMBOL_US,
            min_cap_slots: self.superframe.min_cap_slots,
        }
    }

    pub fn radio_config(&self) -> RadioConfig {
        RadioConfig {
            d0_m: self.radio.d0_m,
            ref_loss_db: self.radio.ref_loss_db,
            path_loss_exponent: self.radio.exponent,
            shadowing_sigma_db: self.radio.sigma_db,
            sensitivity_dbm: self.radio.sensitivity_dbm,
            noise_floor_dbm: self.radio.noise_floor_dbm,
            capture_threshold_db: self.radio.capture_threshold_db,
            bias_slope_db_per_us: self.radio.bias_db_per_us,
            bias_saturation_db: self.radio.bias_saturation_db,
            tx_power_min_dbm: self.radio.tx_power_min_dbm,
            tx_power_max_dbm: self.radio.tx_power_max_dbm,
            cca_threshold_dbm: self.radio.cca_threshold_dbm,
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            superframe: self.superframe_config(),
            radio: self.radio_config(),
            energy: CurrentProfile {
                doze_ua: self.energy.doze_ua,
                listen_ua: self.energy.listen_ua,
                tx_ua: self.energy.tx_ua,
                waking_ua: self.energy.waking_ua,
            },
            csma: CsmaConfig {
                min_be: self.csma.min_be,
                max_be: self.csma.max_be,
                max_backoffs: self.csma.max_backoffs,
            },
            sgts: SgtsPolicy { enabled: self.sgts.enabled, threshold_db: self.sgts.threshold_db },
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeSpec {
                    id: NodeId(n.id),
                    role: n.role,
                    parent: n.parent.map(NodeId),
                    position: Position::new(n.x_m, n.y_m),
                    tx_power_dbm: n.tx_power_dbm,
                    clock_offset_us: n.clock_offset_us,
                    mobile: n.mobile,
                })
                .collect(),
            traffic: self
                .traffic
                .iter()
                .map(|t| TrafficSpec {
                    node: NodeId(t.node),
                    kind: match t.kind {
                        TrafficClass::Gts => {
                            TrafficKind::Gts { period_us: t.period_us, start_us: t.start_us }
                        }
                        TrafficClass::Cap => {
                            TrafficKind::Cap { period_us: t.period_us, start_us: t.start_us }
                        }
                    },
                })
                .collect(),
            requests: self
                .requests
                .iter()
                .map(|r| RequestSpec {
                    owner: NodeId(r.owner),
                    peer: NodeId(r.peer),
                    level: r.level,
                    direction: r.direction,
                    at_us: r.at_us,
                })
                .collect(),
            pds: self
                .pds
                .iter()
                .map(|p| PdsSpec {
                    owner: NodeId(p.owner),
                    peer: NodeId(p.peer),
                    level: p.level,
                    direction: p.direction,
                    at_us: p.at_us,
                })
                .collect(),
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario sections are plain data")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| ScenarioError::Invalid(m);
        self.superframe_config().validate().map_err(|e| invalid(e.to_string()))?;
        self.radio_config().validate().map_err(|e| invalid(e.to_string()))?;
        if self.run_superframes == 0 {
            return Err(invalid("run_superframes must be at least 1".into()));
        }
        if self.nodes.is_empty() {
            return Err(invalid("a scenario needs at least one node".into()));
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                return Err(invalid(format!("duplicate node id {}", n.id)));
            }
        }
        let known = |id: u16, what: &str| {
            if ids.contains(&id) {
                Ok(())
            } else {
                Err(invalid(format!("{what} references undefined node {id}")))
            }
        };
        for t in &self.traffic {
            known(t.node, "traffic")?;
        }
        for r in self.requests.iter().chain(&self.pds) {
            known(r.owner, "request")?;
            known(r.peer, "request")?;
        }
        if let Some(s) = &self.sweep {
            known(s.swept, "sweep")?;
            known(s.fixed, "sweep")?;
            if s.swept == s.fixed {
                return Err(invalid("sweep needs two distinct transmitters".into()));
            }
            if !(s.step_db > 0.0) {
                return Err(invalid("sweep step_db must be positive".into()));
            }
            if s.trials == 0 {
                return Err(invalid("sweep trials must be positive".into()));
            }
        }
        Ok(())
    }
}
