//! Scenario files: a base cluster, network profile, workload and fault
//! script, plus optional variants that patch the base before each run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bench::{routing_name, MetricsReport, WorkloadSpec};
use crate::config::{ConfigError, ConfigFile};
use crate::sim::{FaultScript, NetworkProfile, SimConfig, SimError, SimReport, Simulation, Violation};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown network profile {0:?}")]
    UnknownProfile(String),
    #[error("variant {variant:?}: {source}")]
    Variant { variant: String, source: Box<ScenarioError> },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// A named profile preset or an inline profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Named(String),
    Inline(NetworkProfile),
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec::Named("lan".into())
    }
}

impl ProfileSpec {
    pub fn resolve(&self) -> Result<NetworkProfile, ScenarioError> {
        match self {
            ProfileSpec::Named(name) => {
                NetworkProfile::by_name(name).ok_or_else(|| ScenarioError::UnknownProfile(name.clone()))
            }
            ProfileSpec::Inline(p) => Ok(p.clone()),
        }
    }
}

/// Patches applied on top of the base scenario.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// Merged field by field into the base cluster object.
    #[serde(default)]
    pub cluster: Option<Value>,
    #[serde(default)]
    pub workload: Option<Value>,
    /// Replaces the base fault script when present.
    #[serde(default)]
    pub faults: Option<FaultScript>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    /// One row per variant.
    pub summary: Option<PathBuf>,
    /// Directory for each variant's full metrics CSV.
    pub metrics_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub cluster: Value,
    #[serde(default)]
    pub profile: ProfileSpec,
    #[serde(default)]
    pub workload: Value,
    #[serde(default)]
    pub faults: FaultScript,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_drain_ms")]
    pub drain_ms: u64,
    #[serde(default)]
    pub trace_relays: bool,
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub outputs: Outputs,
}

fn default_drain_ms() -> u64 {
    1_000
}

/// One fully resolved run.
#[derive(Clone, Debug, PartialEq)]
pub struct Run {
    pub name: String,
    pub config: SimConfig,
}

#[derive(Debug)]
pub struct RunResult {
    pub name: String,
    pub prc: usize,
    pub clients: usize,
    pub report: SimReport,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.runs()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Resolves and validates every run. Without variants the base
    /// scenario is the single run.
    pub fn runs(&self) -> Result<Vec<Run>, ScenarioError> {
        if self.variants.is_empty() {
            let base = Variant { name: self.name.clone(), ..Variant::default() };
            return Ok(vec![self.resolve(&base)?]);
        }
        self.variants
            .iter()
            .map(|v| {
                self.resolve(v).map_err(|e| ScenarioError::Variant { variant: v.name.clone(), source: Box::new(e) })
            })
            .collect()
    }

    fn resolve(&self, v: &Variant) -> Result<Run, ScenarioError> {
        let mut cluster = self.cluster.clone();
        if let Some(patch) = &v.cluster {
            merge(&mut cluster, patch);
        }
        let mut workload = if self.workload.is_null() { Value::Object(Default::default()) } else { self.workload.clone() };
        if let Some(patch) = &v.workload {
            merge(&mut workload, patch);
        }
        let file: ConfigFile = serde_json::from_value(cluster)?;
        let cluster = file.into_config();
        cluster.validate()?;
        let workload: WorkloadSpec = serde_json::from_value(workload)?;
        let mut config = SimConfig::new(cluster);
        config.profile = self.profile.resolve()?;
        config.workload = workload;
        config.faults = v.faults.clone().unwrap_or_else(|| self.faults.clone());
        config.seed = v.seed.unwrap_or(self.seed);
        config.drain = std::time::Duration::from_millis(self.drain_ms);
        config.trace_relays = self.trace_relays;
        // surfaces profile, workload and fault errors before anything runs
        Simulation::new(config.clone())?;
        Ok(Run { name: v.name.clone(), config })
    }

    /// Runs every variant in order.
    pub fn execute(&self) -> Result<Vec<RunResult>, ScenarioError> {
        let mut out = Vec::new();
        for run in self.runs()? {
            let prc = run.config.cluster.prc;
            let clients = run.config.workload.clients;
            let report = Simulation::new(run.config)?.run();
            out.push(RunResult { name: run.name, prc, clients, report });
        }
        Ok(out)
    }
}

/// JSON merge patch: objects merge recursively, anything else replaces.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

pub const SUMMARY_HEADER: &str = "variant,n,relay_groups,prc,routing,clients,ops,throughput,steady_throughput,\
p25_ms,median_ms,p75_ms,p99_ms,retries,relay_timeouts,elections,violations";

pub fn summary_csv(results: &[RunResult]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in results {
        let m: &MetricsReport = &r.report.metrics;
        let l = &m.latency;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.1},{:.1},{:.3},{:.3},{:.3},{:.3},{},{},{},{}",
            r.name,
            m.n,
            m.relay_groups,
            r.prc,
            routing_name(m.routing),
            r.clients,
            m.ops,
            m.throughput(),
            m.steady_throughput(),
            l.p25_ms,
            l.median_ms,
            l.p75_ms,
            l.p99_ms,
            m.retries,
            m.relay_timeouts,
            m.elections,
            r.report.violations.len()
        );
    }
    s
}

/// First safety violation across all runs, with the run's name.
pub fn first_violation(results: &[RunResult]) -> Option<(&str, &Violation)> {
    results.iter().find_map(|r| r.report.violations.first().map(|v| (r.name.as_str(), v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "name": "t",
        "cluster": {"n": 5, "relay_groups": 2},
        "workload": {"clients": 2, "duration_ms": 1000, "warmup_ms": 100},
        "seed": 3,
        "variants": [
            {"name": "r1", "cluster": {"relay_groups": 1, "graylist": {"enabled": true}}},
            {"name": "direct", "cluster": {"routing": "direct"}, "workload": {"clients": 1}}
        ]
    }"#;

    #[test]
    fn variants_patch_the_base() {
        let s = Scenario::from_json(BASE).unwrap();
        let runs = s.runs().unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].config.cluster.relay_groups, 1);
        assert!(runs[0].config.cluster.graylist.enabled);
        assert_eq!(runs[0].config.workload.clients, 2);
        assert_eq!(runs[1].config.cluster.relay_groups, 2);
        assert_eq!(runs[1].config.workload.clients, 1);
        assert_eq!(runs[1].config.seed, 3);
    }

    #[test]
    fn bad_variant_is_named() {
        let text = BASE.replace(r#""relay_groups": 1,"#, r#""relay_groups": 9,"#);
        let err = Scenario::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("r1") && err.contains("relay_groups"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = BASE.replace(r#""seed": 3"#, r#""sed": 3"#);
        assert!(Scenario::from_json(&text).unwrap_err().to_string().contains("sed"));
    }

    #[test]
    fn executes_and_summarizes() {
        let s = Scenario::from_json(BASE).unwrap();
        let results = s.execute().unwrap();
        let csv = summary_csv(&results);
        assert_eq!(csv.lines().count(), 3);
        assert!(first_violation(&results).is_none());
        assert!(results.iter().all(|r| r.report.metrics.ops > 0));
    }
}
