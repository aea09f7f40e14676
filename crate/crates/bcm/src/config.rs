//! Declarative scenario description.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::AdversaryStrategy;
use crate::types::{NodeId, Payload};

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadEvent {
    Broadcast { tick: u64, mh: NodeId, payload: Payload },
    MssBroadcast { tick: u64, mss: NodeId, payload: Payload },
    Handoff { tick: u64, mh: NodeId, dest: NodeId },
}

impl WorkloadEvent {
    pub fn tick(&self) -> u64 {
        match self {
            WorkloadEvent::Broadcast { tick, .. }
            | WorkloadEvent::MssBroadcast { tick, .. }
            | WorkloadEvent::Handoff { tick, .. } => *tick,
        }
    }
}

/// Poisson join/leave traffic around one station.
///
/// `poisson_rates` are expected event counts per horizon for the classes
/// Byzantine leave, honest leave, Byzantine join, honest join.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobilityModel {
    pub poisson_rates: [f64; 4],
    pub horizon_ticks: u64,
    pub target_mss: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_mss: u32,
    pub n_mh: u32,
    pub initial_assignment: BTreeMap<NodeId, NodeId>,
    #[serde(default)]
    pub byzantine_set: BTreeSet<u32>,
    #[serde(default)]
    pub adversary_strategy: BTreeMap<NodeId, AdversaryStrategy>,
    #[serde(default)]
    pub workload: Vec<WorkloadEvent>,
    #[serde(default)]
    pub mobility_model: Option<MobilityModel>,
    #[serde(default)]
    pub seed: u64,
    /// Latency of host links, and of station links unless overridden.
    #[serde(default = "one")]
    pub channel_latency: u64,
    #[serde(default)]
    pub causal_latency: Option<u64>,
    #[serde(default)]
    pub handoff_latency: Option<u64>,
    /// Ticks between leaving a station and detecting the next one.
    #[serde(default = "one")]
    pub transit_delay: u64,
    #[serde(default)]
    pub horizon_ticks: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), reason: reason.into() }
}

impl ScenarioConfig {
    /// Every host on one station, nothing scheduled.
    pub fn single_group(n_mss: u32, n_mh: u32, station: u32) -> Self {
        ScenarioConfig {
            n_mss,
            n_mh,
            initial_assignment: (1..=n_mh).map(|i| (NodeId::mh(i), NodeId::mss(station))).collect(),
            byzantine_set: BTreeSet::new(),
            adversary_strategy: BTreeMap::new(),
            workload: Vec::new(),
            mobility_model: None,
            seed: 0,
            channel_latency: 1,
            causal_latency: None,
            handoff_latency: None,
            transit_delay: 1,
            horizon_ticks: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn causal_latency(&self) -> u64 {
        self.causal_latency.unwrap_or(self.channel_latency)
    }

    pub fn handoff_latency(&self) -> u64 {
        self.handoff_latency.unwrap_or(self.channel_latency)
    }

    pub fn is_byzantine(&self, h: NodeId) -> bool {
        h.is_mh() && self.byzantine_set.contains(&h.index)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn members_of(&self, mss: NodeId) -> BTreeSet<NodeId> {
        self.initial_assignment.iter().filter(|(_, s)| **s == mss).map(|(h, _)| *h).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_mss == 0 {
            return Err(invalid("n_mss", "must be at least 1"));
        }
        if self.n_mh == 0 {
            return Err(invalid("n_mh", "must be at least 1"));
        }
        let mh_ok = |h: &NodeId| h.is_mh() && h.index <= self.n_mh;
        let mss_ok = |s: &NodeId| s.is_mss() && s.index <= self.n_mss;
        for (h, s) in &self.initial_assignment {
            if !mh_ok(h) {
                return Err(invalid("initial_assignment", format!("{h} is not a host of this scenario")));
            }
            if !mss_ok(s) {
                return Err(invalid("initial_assignment", format!("{s} is not a station of this scenario")));
            }
        }
        for i in 1..=self.n_mh {
            if !self.initial_assignment.contains_key(&NodeId::mh(i)) {
                return Err(invalid("initial_assignment", format!("h{i} has no station")));
            }
        }
        if let Some(i) = self.byzantine_set.iter().find(|&&i| i == 0 || i > self.n_mh) {
            return Err(invalid("byzantine_set", format!("index {i} out of range")));
        }
        for (h, strategy) in &self.adversary_strategy {
            if !self.is_byzantine(*h) {
                return Err(invalid("adversary_strategy", format!("{h} is not in byzantine_set")));
            }
            if let AdversaryStrategy::Equivocate { side_a, .. } = strategy {
                if let Some(x) = side_a.iter().find(|x| !mh_ok(x)) {
                    return Err(invalid("adversary_strategy", format!("{x} is not a host")));
                }
            }
        }
        for (i, w) in self.workload.iter().enumerate() {
            let bad = match w {
                WorkloadEvent::Broadcast { mh, .. } => !mh_ok(mh),
                WorkloadEvent::MssBroadcast { mss, .. } => !mss_ok(mss),
                WorkloadEvent::Handoff { mh, dest, .. } => !mh_ok(mh) || !mss_ok(dest),
            };
            if bad {
                return Err(invalid("workload", format!("entry {i} names an unknown node")));
            }
        }
        if let Some(m) = &self.mobility_model {
            if !mss_ok(&m.target_mss) {
                return Err(invalid("mobility_model", "target_mss out of range"));
            }
            if m.poisson_rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                return Err(invalid("mobility_model", "poisson_rates must be nonnegative"));
            }
            if self.n_mss < 2 && m.poisson_rates.iter().any(|r| *r > 0.0) {
                return Err(invalid("mobility_model", "mobility needs at least two stations"));
            }
        }
        if self.channel_latency == 0 {
            return Err(invalid("channel_latency", "must be at least 1"));
        }
        if self.causal_latency == Some(0) {
            return Err(invalid("causal_latency", "must be at least 1"));
        }
        if self.handoff_latency == Some(0) {
            return Err(invalid("handoff_latency", "must be at least 1"));
        }
        if self.transit_delay == 0 {
            return Err(invalid("transit_delay", "must be at least 1"));
        }
        Ok(())
    }
}
