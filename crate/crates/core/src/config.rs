//! Cluster configuration, relay-group partitioning, and the JSON config file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model;
use crate::types::NodeId;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("relay_groups: R={r} outside 1..={max} for a cluster of {n} nodes")]
    RelayGroups { r: usize, n: usize, max: usize },
    #[error("n: cluster needs at least 3 nodes, got {0}")]
    TooSmall(usize),
    #[error("leader {leader} is not a member of a cluster of {n} nodes")]
    UnknownLeader { leader: NodeId, n: usize },
    #[error("relay_timeout_ms ({relay_ms}) must be strictly below leader_timeout_ms ({leader_ms})")]
    Timeouts { relay_ms: u64, leader_ms: u64 },
    #[error("prc: {0}")]
    Prc(#[from] model::PrcViolation),
    #[error("graylist.probe_prob: {0} is not a probability")]
    ProbeProbability(f64),
    #[error("peers: {0}")]
    Peers(String),
    #[error("config file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config file: {0}")]
    Io(#[from] std::io::Error),
}

/// How protocol broadcasts reach followers.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routing {
    /// Fan-out and fan-in through one rotating relay per group.
    #[default]
    Pig,
    /// Classical leader-to-everyone messaging; used as the reference oracle.
    Direct,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraylistConfig {
    pub enabled: bool,
    pub duration: Duration,
    pub probe_probability: f64,
}

impl Default for GraylistConfig {
    fn default() -> Self {
        GraylistConfig { enabled: false, duration: Duration::from_secs(5), probe_probability: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub n: usize,
    /// Number of relay groups, `1..=N-1`.
    pub relay_groups: usize,
    /// Per-group slack for partial response collection.
    pub prc: usize,
    pub relay_timeout: Duration,
    pub leader_timeout: Duration,
    pub graylist: GraylistConfig,
    pub rng_seed: u64,
    pub routing: Routing,
    /// With a single relay group, flush once the relay sees a global majority.
    pub majority_shortcut: bool,
    /// Leader retries after which an alarm is raised (retrying continues).
    pub max_retries: u32,
    pub peers: BTreeMap<NodeId, String>,
}

impl ClusterConfig {
    /// Defaults: `T_r` = 50 ms, `T_i` = 200 ms, PRC 0, gray list off.
    pub fn new(n: usize, relay_groups: usize) -> Self {
        ClusterConfig {
            n,
            relay_groups,
            prc: 0,
            relay_timeout: Duration::from_millis(50),
            leader_timeout: Duration::from_millis(200),
            graylist: GraylistConfig::default(),
            rng_seed: 0,
            routing: Routing::Pig,
            majority_shortcut: false,
            max_retries: 10,
            peers: BTreeMap::new(),
        }
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.n as u32).map(NodeId)
    }

    pub fn majority(&self) -> usize {
        crate::types::majority(self.n)
    }

    /// Failure-detector window after which a follower campaigns.
    pub fn election_timeout(&self) -> Duration {
        self.leader_timeout * 3
    }

    /// The single-relay majority shortcut applies only when R = 1.
    pub fn shortcut_active(&self) -> bool {
        self.majority_shortcut && self.relay_groups == 1
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 3 {
            return Err(ConfigError::TooSmall(self.n));
        }
        if self.relay_groups < 1 || self.relay_groups > self.n - 1 {
            return Err(ConfigError::RelayGroups { r: self.relay_groups, n: self.n, max: self.n - 1 });
        }
        if self.relay_timeout >= self.leader_timeout {
            return Err(ConfigError::Timeouts {
                relay_ms: self.relay_timeout.as_millis() as u64,
                leader_ms: self.leader_timeout.as_millis() as u64,
            });
        }
        let p = self.graylist.probe_probability;
        if !(0.0..=1.0).contains(&p) {
            return Err(ConfigError::ProbeProbability(p));
        }
        let groups = partition_followers(self.n, self.relay_groups, NodeId(0))?;
        model::validate_prc(&groups, self.prc, self.n)?;
        if !self.peers.is_empty() {
            if self.peers.len() != self.n {
                return Err(ConfigError::Peers(format!(
                    "{} addresses listed for {} nodes",
                    self.peers.len(),
                    self.n
                )));
            }
            if let Some(bad) = self.peers.keys().find(|id| id.index() >= self.n) {
                return Err(ConfigError::Peers(format!("node id {} out of range", bad.0)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let file: ConfigFile = serde_json::from_str(text)?;
        let cfg = file.into_config();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_file(&self) -> ConfigFile {
        ConfigFile {
            n: self.n,
            peers: self.peers.iter().map(|(k, v)| (k.0.to_string(), v.clone())).collect(),
            relay_groups: self.relay_groups,
            prc: self.prc,
            relay_timeout_ms: self.relay_timeout.as_millis() as u64,
            leader_timeout_ms: Some(self.leader_timeout.as_millis() as u64),
            graylist: GraylistFile {
                enabled: self.graylist.enabled,
                duration_ms: self.graylist.duration.as_millis() as u64,
                probe_prob: self.graylist.probe_probability,
            },
            seed: self.rng_seed,
            routing: self.routing,
            majority_shortcut: self.majority_shortcut,
            max_retries: self.max_retries,
        }
    }
}

/// On-disk cluster configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub n: usize,
    #[serde(default)]
    pub peers: BTreeMap<String, String>,
    pub relay_groups: usize,
    #[serde(default)]
    pub prc: usize,
    #[serde(default = "default_relay_timeout_ms")]
    pub relay_timeout_ms: u64,
    /// Defaults to four times the relay timeout.
    #[serde(default)]
    pub leader_timeout_ms: Option<u64>,
    #[serde(default)]
    pub graylist: GraylistFile,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub routing: Routing,
    #[serde(default)]
    pub majority_shortcut: bool,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

fn default_relay_timeout_ms() -> u64 {
    50
}

fn default_max_retries() -> u32 {
    10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraylistFile {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_graylist_ms")]
    pub duration_ms: u64,
    #[serde(default = "default_probe")]
    pub probe_prob: f64,
}

fn default_graylist_ms() -> u64 {
    5_000
}

fn default_probe() -> f64 {
    0.05
}

impl Default for GraylistFile {
    fn default() -> Self {
        GraylistFile { enabled: false, duration_ms: default_graylist_ms(), probe_prob: default_probe() }
    }
}

impl ConfigFile {
    pub fn into_config(self) -> ClusterConfig {
        let mut peers = BTreeMap::new();
        for (k, v) in self.peers {
            // non-numeric keys map to an out-of-range id and fail validation
            let id = k.parse::<u32>().unwrap_or(u32::MAX);
            peers.insert(NodeId(id), v);
        }
        ClusterConfig {
            n: self.n,
            relay_groups: self.relay_groups,
            prc: self.prc,
            relay_timeout: Duration::from_millis(self.relay_timeout_ms),
            leader_timeout: Duration::from_millis(
                self.leader_timeout_ms.unwrap_or(4 * self.relay_timeout_ms),
            ),
            graylist: GraylistConfig {
                enabled: self.graylist.enabled,
                duration: Duration::from_millis(self.graylist.duration_ms),
                probe_probability: self.graylist.probe_prob,
            },
            rng_seed: self.seed,
            routing: self.routing,
            majority_shortcut: self.majority_shortcut,
            max_retries: self.max_retries,
            peers,
        }
    }
}

/// Static partition of one initiator's followers into relay groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelayGroupConfig {
    pub leader: NodeId,
    pub groups: Vec<Vec<NodeId>>,
}

impl RelayGroupConfig {
    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Per-group flush thresholds `g_i = n_i - PRC`, clamped at zero.
    pub fn thresholds(&self, prc: usize) -> Vec<usize> {
        self.groups.iter().map(|g| g.len().saturating_sub(prc)).collect()
    }

    pub fn group_of(&self, node: NodeId) -> Option<usize> {
        self.groups.iter().position(|g| g.binary_search(&node).is_ok())
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn members(&self) -> BTreeSet<NodeId> {
        self.groups.iter().flatten().copied().collect()
    }
}

/// Splits the `N-1` non-leader ids into `R` contiguous groups whose sizes
/// differ by at most one (larger groups first).
pub fn partition_followers(n: usize, r: usize, leader: NodeId) -> Result<RelayGroupConfig, ConfigError> {
    if n < 2 || r < 1 || r > n - 1 {
        return Err(ConfigError::RelayGroups { r, n, max: n.saturating_sub(1) });
    }
    if leader.index() >= n {
        return Err(ConfigError::UnknownLeader { leader, n });
    }
    let followers: Vec<NodeId> = (0..n as u32).map(NodeId).filter(|&id| id != leader).collect();
    let base = followers.len() / r;
    let extra = followers.len() % r;
    let mut groups = Vec::with_capacity(r);
    let mut rest = followers.as_slice();
    for i in 0..r {
        let size = base + usize::from(i < extra);
        let (head, tail) = rest.split_at(size);
        groups.push(head.to_vec());
        rest = tail;
    }
    Ok(RelayGroupConfig { leader, groups })
}
