use serde::{Deserialize, Serialize};

use crate::types::NodeId;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultAction {
    /// Stop the listed nodes; they neither send nor receive.
    Crash,
    /// Resume the listed nodes with their state intact.
    Recover,
    /// Cut the listed nodes off from every other node.
    Partition,
    /// Remove every partition.
    Heal,
    /// Crash whichever node the current leader next picks as a relay.
    CrashNextRelay,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEvent {
    pub at_ms: u64,
    pub action: FaultAction,
    #[serde(default)]
    pub nodes: Vec<NodeId>,
}

pub type FaultScript = Vec<FaultEvent>;

/// Rejects node ids outside the cluster and actions missing their targets.
pub fn validate_script(script: &[FaultEvent], n: usize) -> Result<(), String> {
    for (i, ev) in script.iter().enumerate() {
        if let Some(bad) = ev.nodes.iter().find(|id| id.index() >= n) {
            return Err(format!("faults[{i}].nodes: node {bad} outside a cluster of {n}"));
        }
        let needs_nodes = matches!(ev.action, FaultAction::Crash | FaultAction::Recover | FaultAction::Partition);
        if needs_nodes && ev.nodes.is_empty() {
            return Err(format!("faults[{i}].nodes: {:?} needs at least one node", ev.action));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_script() {
        let s: FaultScript = serde_json::from_str(
            r#"[{"at_ms": 1000, "action": "crash", "nodes": [2]},
                {"at_ms": 2000, "action": "heal"},
                {"at_ms": 10, "action": "crash_next_relay"}]"#,
        )
        .unwrap();
        assert_eq!(s[0].nodes, vec![NodeId(2)]);
        assert_eq!(s[1].action, FaultAction::Heal);
        assert!(validate_script(&s, 3).is_ok());
        assert!(validate_script(&s, 2).is_err());
    }

    #[test]
    fn crash_without_nodes_is_rejected() {
        let s = vec![FaultEvent { at_ms: 0, action: FaultAction::Crash, nodes: vec![] }];
        assert!(validate_script(&s, 3).is_err());
    }
}
