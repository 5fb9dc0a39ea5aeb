use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::msg::MsgType;

/// Simulated processing cost of one message, charged both when a node
/// serializes it and when a node deserializes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpuCost {
    /// Fixed cost per message in microseconds.
    pub per_message_us: u64,
    /// Additional microseconds per 100 encoded bytes.
    pub per_100_bytes_us: u64,
    /// Per-type overrides of `per_message_us`, keyed by type name.
    pub per_type_us: BTreeMap<String, u64>,
}

impl Default for CpuCost {
    fn default() -> Self {
        CpuCost { per_message_us: 10, per_100_bytes_us: 1, per_type_us: BTreeMap::new() }
    }
}

impl CpuCost {
    pub fn free() -> Self {
        CpuCost { per_message_us: 0, per_100_bytes_us: 0, per_type_us: BTreeMap::new() }
    }

    pub fn cost_us(&self, ty: MsgType, encoded_bytes: usize) -> u64 {
        let base = self.per_type_us.get(ty.name()).copied().unwrap_or(self.per_message_us);
        base + encoded_bytes as u64 * self.per_100_bytes_us / 100
    }
}

/// Link and node behaviour of the simulated network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkProfile {
    /// One-way link latency, uniform over `[lo, hi]` milliseconds.
    pub latency_ms: [f64; 2],
    pub drop_probability: f64,
    pub duplicate_probability: f64,
    pub cpu: CpuCost,
}

impl Default for NetworkProfile {
    fn default() -> Self {
        Self::lan()
    }
}

impl NetworkProfile {
    /// Same-datacenter links: 0.3 to 0.6 ms.
    pub fn lan() -> Self {
        NetworkProfile { latency_ms: [0.3, 0.6], drop_probability: 0.0, duplicate_probability: 0.0, cpu: CpuCost::default() }
    }

    /// Cross-region links: 30 to 70 ms.
    pub fn wan() -> Self {
        NetworkProfile { latency_ms: [30.0, 70.0], ..Self::lan() }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "lan" => Some(Self::lan()),
            "wan" => Some(Self::wan()),
            _ => None,
        }
    }

    pub fn latency_range_us(&self) -> (u64, u64) {
        let lo = (self.latency_ms[0] * 1000.0).round() as u64;
        let hi = (self.latency_ms[1] * 1000.0).round() as u64;
        (lo, hi.max(lo))
    }

    pub fn validate(&self) -> Result<(), String> {
        let [lo, hi] = self.latency_ms;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(format!("latency_ms: invalid range [{lo}, {hi}]"));
        }
        for (name, p) in [("drop_probability", self.drop_probability), ("duplicate_probability", self.duplicate_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name}: {p} is not a probability"));
            }
        }
        for name in self.cpu.per_type_us.keys() {
            if !MsgType::ALL.iter().any(|t| t.name() == name) {
                return Err(format!("cpu.per_type_us: unknown message type {name:?}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_cost_model() {
        let c = CpuCost::default();
        assert_eq!(c.cost_us(MsgType::P2b, 26), 10);
        assert_eq!(c.cost_us(MsgType::P2a, 1350), 23);
    }

    #[test]
    fn type_override() {
        let mut c = CpuCost::default();
        c.per_type_us.insert("p3".into(), 2);
        assert_eq!(c.cost_us(MsgType::P3, 0), 2);
        assert_eq!(c.cost_us(MsgType::P1a, 0), 10);
    }

    #[test]
    fn profile_validation() {
        assert!(NetworkProfile::lan().validate().is_ok());
        let mut p = NetworkProfile::lan();
        p.drop_probability = 1.5;
        assert!(p.validate().is_err());
        p = NetworkProfile::lan();
        p.cpu.per_type_us.insert("bogus".into(), 1);
        assert!(p.validate().is_err());
        assert_eq!(NetworkProfile::wan().latency_range_us(), (30_000, 70_000));
    }
}
