//! Analytical per-command message-load model for relay-based replication.
//!
//! The leader handles `2R + 2` messages per command (client in/out plus a
//! round trip with each relay). A follower is a relay with probability
//! `R/(N-1)`, in which case it also fans out to and collects from its
//! `(N-R-1)/R` group peers; amortized over rounds that gives
//! `2(N-R-1)/(N-1) + 2`. Every function is generic over the scalar type so
//! the same formulas run exactly (`Rational64`) or in floating point.

use std::fmt::{self, Write as _};

use num_rational::Rational64;
use num_traits::{FromPrimitive, Num};
use thiserror::Error;

use crate::config::RelayGroupConfig;
use crate::types::majority;

/// Scalar types the load formulas can be evaluated in.
pub trait LoadScalar: Num + Copy + PartialOrd + FromPrimitive + fmt::Debug {
    fn to_f64(&self) -> f64;
}

impl LoadScalar for f64 {
    fn to_f64(&self) -> f64 {
        *self
    }
}

impl LoadScalar for f32 {
    fn to_f64(&self) -> f64 {
        *self as f64
    }
}

impl LoadScalar for Rational64 {
    fn to_f64(&self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("R={r} is not a valid relay group count for N={n}")]
    InvalidGroups { n: u64, r: u64 },
    #[error("total message count needs N >= 3, got {0}")]
    ClusterTooSmall(u64),
    #[error("cross-validation needs at least one committed command")]
    NoCommands,
}

/// Partial-response thresholds cannot guarantee a majority.
#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("sum of group thresholds {sum} is below the majority {required}")]
pub struct PrcViolation {
    pub sum: usize,
    pub required: usize,
}

fn lit<T: LoadScalar>(v: u64) -> T {
    T::from_u64(v).expect("small integer is representable")
}

fn check(n: u64, r: u64) -> Result<(), ModelError> {
    if r < 1 || n < 2 || r > n - 1 {
        return Err(ModelError::InvalidGroups { n, r });
    }
    Ok(())
}

/// `M_l = 2R + 2`.
pub fn leader_load<T: LoadScalar>(r: u64) -> Result<T, ModelError> {
    if r < 1 {
        return Err(ModelError::InvalidGroups { n: 0, r });
    }
    Ok(lit::<T>(2 * r + 2))
}

/// `M_f = 2(N-R-1)/(N-1) + 2`.
pub fn follower_load<T: LoadScalar>(n: u64, r: u64) -> Result<T, ModelError> {
    check(n, r)?;
    let two = lit::<T>(2);
    Ok(two * lit::<T>(n - r - 1) / lit::<T>(n - 1) + two)
}

/// The unsimplified form `2 (R/(N-1)) ((N-R-1)/R) + 2`, kept as a second
/// algebraic route to [`follower_load`].
pub fn follower_load_expanded<T: LoadScalar>(n: u64, r: u64) -> Result<T, ModelError> {
    check(n, r)?;
    let two = lit::<T>(2);
    let relay_probability = lit::<T>(r) / lit::<T>(n - 1);
    let peers_per_relay = lit::<T>(n - r - 1) / lit::<T>(r);
    Ok(two * relay_probability * peers_per_relay + two)
}

/// `M_l / M_f`.
pub fn load_ratio<T: LoadScalar>(n: u64, r: u64) -> Result<T, ModelError> {
    Ok(leader_load::<T>(r)? / follower_load::<T>(n, r)?)
}

/// Messages sent cluster-wide per command, `2N - 1`.
pub fn total_messages(n: u64) -> Result<u64, ModelError> {
    if n < 3 {
        return Err(ModelError::ClusterTooSmall(n));
    }
    Ok(2 * n - 1)
}

/// Sums sends by role for a concrete partition: the leader sends one
/// envelope per group plus the client reply, each relay forwards to its
/// peers and sends one aggregate, every other follower sends one reply.
pub fn total_messages_by_role(groups: &RelayGroupConfig) -> u64 {
    let r = groups.len() as u64;
    let followers: u64 = groups.groups.iter().map(|g| g.len() as u64).sum();
    let leader = r + 1;
    let relays: u64 = groups.groups.iter().map(|g| g.len() as u64 - 1 + 1).sum();
    let plain = followers - r;
    leader + relays + plain
}

/// `lim_{N->inf} 2(N-2)/(N-1) + 2`.
pub fn asymptotic_follower_limit<T: LoadScalar>() -> T {
    lit::<T>(4)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrcCheck {
    pub sum: usize,
    pub required: usize,
}

/// Checks `sum_i max(n_i - PRC, 0) >= floor(N/2) + 1`.
pub fn validate_prc(groups: &RelayGroupConfig, prc: usize, n: usize) -> Result<PrcCheck, PrcViolation> {
    let sum: usize = groups.thresholds(prc).iter().sum();
    let required = majority(n);
    if sum >= required {
        Ok(PrcCheck { sum, required })
    } else {
        Err(PrcViolation { sum, required })
    }
}

/// One row of the leader/follower load table.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadModelRow<T> {
    pub n: u64,
    pub r: u64,
    pub leader: T,
    pub follower: T,
    pub ratio: T,
}

impl<T: LoadScalar> LoadModelRow<T> {
    pub fn new(n: u64, r: u64) -> Result<Self, ModelError> {
        Ok(LoadModelRow {
            n,
            r,
            leader: leader_load(r)?,
            follower: follower_load(n, r)?,
            ratio: load_ratio(n, r)?,
        })
    }
}

/// Relay-group counts tabulated for a 25-node cluster.
pub const LARGE_TABLE: (u64, &[u64]) = (25, &[1, 2, 3, 4, 5, 6, 24]);
/// Relay-group counts tabulated for a 5-node cluster.
pub const SMALL_TABLE: (u64, &[u64]) = (5, &[1, 2, 4]);

/// Rounds half away from zero to `places` decimals, exactly.
pub fn round_decimal(x: Rational64, places: u32) -> Rational64 {
    let scale = 10i64.pow(places);
    let scaled = x * Rational64::from_integer(scale);
    let num = *scaled.numer();
    let den = *scaled.denom();
    let q = (2 * num.abs() + den) / (2 * den);
    Rational64::new(q * num.signum(), scale)
}

pub fn format_fixed(x: Rational64, places: u32) -> String {
    let r = round_decimal(x, places);
    let scale = 10i64.pow(places);
    let units = (r * Rational64::from_integer(scale)).to_integer();
    if places == 0 {
        return units.to_string();
    }
    let sign = if units < 0 { "-" } else { "" };
    let units = units.abs();
    format!("{sign}{}.{:0width$}", units / scale, units % scale, width = places as usize)
}

/// A rendered table line: leader load as an integer, follower load to two
/// decimals, and the ratio to three decimals computed from the two-decimal
/// follower figure, the usual convention for these tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableLine {
    pub r: u64,
    pub leader: String,
    pub follower: String,
    pub ratio: String,
}

impl TableLine {
    pub fn from_row(row: &LoadModelRow<Rational64>) -> Self {
        let shown_follower = round_decimal(row.follower, 2);
        TableLine {
            r: row.r,
            leader: format_fixed(row.leader, 0),
            follower: format_fixed(row.follower, 2),
            ratio: format_fixed(row.leader / shown_follower, 3),
        }
    }
}

pub fn table(n: u64, rs: &[u64]) -> Result<Vec<LoadModelRow<Rational64>>, ModelError> {
    rs.iter().map(|&r| LoadModelRow::new(n, r)).collect()
}

pub fn table_lines(n: u64, rs: &[u64]) -> Result<Vec<TableLine>, ModelError> {
    Ok(table(n, rs)?.iter().map(TableLine::from_row).collect())
}

fn render_table(out: &mut String, n: u64, rs: &[u64]) -> Result<(), ModelError> {
    let _ = writeln!(out, "N = {n}");
    let _ = writeln!(out, "{:>10} | {:>6} | {:>6} | {:>7}", "R", "M_l", "M_f", "M_l/M_f");
    for line in table_lines(n, rs)? {
        let label = if line.r == n - 1 { format!("{} (Paxos)", line.r) } else { line.r.to_string() };
        let _ = writeln!(out, "{:>10} | {:>6} | {:>6} | {:>7}", label, line.leader, line.follower, line.ratio);
    }
    Ok(())
}

/// Both load tables as plain text.
pub fn render_tables() -> String {
    let mut out = String::new();
    render_table(&mut out, LARGE_TABLE.0, LARGE_TABLE.1).expect("static table is valid");
    out.push('\n');
    render_table(&mut out, SMALL_TABLE.0, SMALL_TABLE.1).expect("static table is valid");
    out
}

/// Handled-message counters measured over a fault-free run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadCounters {
    pub n: u64,
    pub r: u64,
    pub leader: usize,
    pub commands: u64,
    /// Sends plus receives per node, indexed by node id.
    pub handled: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub leader_per_command: Rational64,
    pub expected_leader: Rational64,
    pub follower_mean: f64,
    pub expected_follower: f64,
    pub follower_relative_error: f64,
    pub failures: Vec<String>,
}

impl CrossValidation {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for CrossValidation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "leader messages/command: {} (model {})",
            self.leader_per_command, self.expected_leader
        )?;
        writeln!(
            f,
            "follower mean messages/command: {:.4} (model {:.4}, error {:.3}%)",
            self.follower_mean,
            self.expected_follower,
            self.follower_relative_error * 100.0
        )?;
        if self.failures.is_empty() {
            write!(f, "verdict: ok")
        } else {
            write!(f, "verdict: FAILED: {}", self.failures.join("; "))
        }
    }
}

/// Relative tolerance on the follower mean.
pub const FOLLOWER_TOLERANCE: f64 = 0.02;

/// Compares measured counters against the model: the leader must match
/// `2R + 2` exactly, the follower mean within [`FOLLOWER_TOLERANCE`].
pub fn cross_validate(c: &LoadCounters) -> Result<CrossValidation, ModelError> {
    if c.commands == 0 {
        return Err(ModelError::NoCommands);
    }
    let expected_leader = leader_load::<Rational64>(c.r)?;
    let expected_follower = follower_load::<Rational64>(c.n, c.r)?.to_f64();
    let leader_handled = c.handled.get(c.leader).copied().unwrap_or(0);
    let leader_per_command = Rational64::new(leader_handled as i64, c.commands as i64);
    let follower_total: u64 =
        c.handled.iter().enumerate().filter(|(i, _)| *i != c.leader).map(|(_, h)| *h).sum();
    let follower_mean = follower_total as f64 / ((c.n - 1) as f64 * c.commands as f64);
    let follower_relative_error = (follower_mean - expected_follower).abs() / expected_follower;
    let mut failures = Vec::new();
    if leader_per_command != expected_leader {
        failures.push(format!(
            "leader handled counter: {leader_per_command} per command, expected {expected_leader}"
        ));
    }
    if follower_relative_error > FOLLOWER_TOLERANCE {
        failures.push(format!(
            "follower handled counter: mean {follower_mean:.4} per command, expected {expected_follower:.4}"
        ));
    }
    Ok(CrossValidation {
        leader_per_command,
        expected_leader,
        follower_mean,
        expected_follower,
        follower_relative_error,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::partition_followers;
    use crate::types::NodeId;

    fn q(n: i64, d: i64) -> Rational64 {
        Rational64::new(n, d)
    }

    #[test]
    fn leader_load_values() {
        assert_eq!(leader_load::<Rational64>(3).unwrap(), q(8, 1));
        assert_eq!(leader_load::<Rational64>(24).unwrap(), q(50, 1));
        assert_eq!(leader_load::<Rational64>(1).unwrap(), q(4, 1));
        assert!(leader_load::<Rational64>(0).is_err());
    }

    #[test]
    fn follower_load_values() {
        assert_eq!(follower_load::<Rational64>(25, 1).unwrap(), q(47, 12));
        assert_eq!(follower_load::<Rational64>(25, 6).unwrap(), q(7, 2));
        assert_eq!(follower_load::<Rational64>(5, 2).unwrap(), q(3, 1));
        assert_eq!(follower_load::<Rational64>(25, 24).unwrap(), q(2, 1));
        assert!(follower_load::<Rational64>(25, 25).is_err());
        assert!(follower_load::<Rational64>(25, 0).is_err());
    }

    #[test]
    fn ratio_values() {
        // the exact value; 3.352 comes from the rounded M_f
        assert_eq!(load_ratio::<Rational64>(25, 5).unwrap(), q(144, 43));
        assert_eq!(TableLine::from_row(&LoadModelRow::new(25, 5).unwrap()).ratio, "3.352");
        assert_eq!(load_ratio::<Rational64>(5, 4).unwrap(), q(5, 1));
        assert_eq!(load_ratio::<Rational64>(25, 24).unwrap(), q(25, 1));
    }

    #[test]
    fn float_and_exact_agree() {
        for n in 3..=50u64 {
            for r in 1..n {
                let exact = follower_load::<Rational64>(n, r).unwrap().to_f64();
                let float = follower_load::<f64>(n, r).unwrap();
                let single = follower_load::<f32>(n, r).unwrap();
                assert!((exact - float).abs() < 1e-12);
                assert!((exact - single.to_f64()).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn expanded_form_equals_simplified() {
        for n in 3..=60u64 {
            for r in 1..n {
                assert_eq!(
                    follower_load_expanded::<Rational64>(n, r).unwrap(),
                    follower_load::<Rational64>(n, r).unwrap()
                );
            }
        }
    }

    #[test]
    fn total_messages_values() {
        assert_eq!(total_messages(25).unwrap(), 49);
        assert_eq!(total_messages(5).unwrap(), 9);
        assert_eq!(total_messages(3).unwrap(), 5);
        assert!(total_messages(2).is_err());
    }

    #[test]
    fn total_messages_independent_of_groups() {
        for n in 3..=50usize {
            for r in 1..n {
                let groups = partition_followers(n, r, NodeId(0)).unwrap();
                assert_eq!(total_messages_by_role(&groups), total_messages(n as u64).unwrap());
            }
        }
    }

    #[test]
    fn follower_load_approaches_four_from_below() {
        let limit = asymptotic_follower_limit::<Rational64>();
        assert_eq!(limit, q(4, 1));
        let big = follower_load::<Rational64>(1_000_000, 1).unwrap();
        assert!(big < limit);
        assert_eq!(format_fixed(big, 6), "3.999998");
        assert!(follower_load::<Rational64>(5, 1).unwrap() < follower_load::<Rational64>(25, 1).unwrap());
        let mut prev = q(0, 1);
        for n in 3..500u64 {
            let v = follower_load::<Rational64>(n, 1).unwrap();
            assert!(v > prev && v < limit);
            prev = v;
        }
    }

    #[test]
    fn ratio_strictly_increases_with_groups() {
        for n in 3..=50u64 {
            for r in 1..n - 1 {
                assert!(load_ratio::<Rational64>(n, r).unwrap() < load_ratio::<Rational64>(n, r + 1).unwrap());
            }
        }
    }

    #[test]
    fn leader_never_below_follower() {
        for n in 3..=200u64 {
            for r in 1..n {
                assert!(leader_load::<Rational64>(r).unwrap() >= follower_load::<Rational64>(n, r).unwrap());
            }
        }
    }

    #[test]
    fn prc_examples() {
        let groups = partition_followers(25, 3, NodeId(0)).unwrap();
        assert_eq!(validate_prc(&groups, 1, 25), Ok(PrcCheck { sum: 21, required: 13 }));
        assert_eq!(validate_prc(&groups, 3, 25), Ok(PrcCheck { sum: 15, required: 13 }));
        assert_eq!(validate_prc(&groups, 4, 25), Err(PrcViolation { sum: 12, required: 13 }));
        let single = partition_followers(5, 1, NodeId(0)).unwrap();
        assert_eq!(validate_prc(&single, 0, 5), Ok(PrcCheck { sum: 4, required: 3 }));
        // thresholds clamp at zero
        assert_eq!(validate_prc(&single, 9, 5), Err(PrcViolation { sum: 0, required: 3 }));
    }

    #[test]
    fn fixed_formatting() {
        assert_eq!(format_fixed(q(47, 12), 2), "3.92");
        assert_eq!(format_fixed(q(23, 6), 2), "3.83");
        assert_eq!(format_fixed(q(1, 8), 2), "0.13");
        assert_eq!(format_fixed(q(-1, 8), 2), "-0.13");
        assert_eq!(format_fixed(q(50, 1), 0), "50");
    }

    #[test]
    fn rendered_rows() {
        let line = |n, r| TableLine::from_row(&LoadModelRow::new(n, r).unwrap());
        assert_eq!(line(25, 2), TableLine { r: 2, leader: "6".into(), follower: "3.83".into(), ratio: "1.567".into() });
        assert_eq!(line(25, 4), TableLine { r: 4, leader: "10".into(), follower: "3.67".into(), ratio: "2.725".into() });
        assert_eq!(line(5, 1).follower, "3.50");
        let text = render_tables();
        assert!(text.contains("24 (Paxos)"));
        assert!(text.contains("4 (Paxos)"));
    }

    #[test]
    fn cross_validation_verdicts() {
        // N=5, R=4 direct pattern: leader 10, followers 2 each
        let ok = LoadCounters { n: 5, r: 4, leader: 0, commands: 100, handled: vec![1000, 200, 200, 200, 200] };
        assert!(cross_validate(&ok).unwrap().is_ok());
        let bad = LoadCounters { handled: vec![1001, 200, 200, 200, 200], ..ok.clone() };
        let report = cross_validate(&bad).unwrap();
        assert!(!report.is_ok());
        assert!(report.failures[0].contains("leader"));
        let skewed = LoadCounters { handled: vec![1000, 250, 250, 250, 250], ..ok.clone() };
        assert!(cross_validate(&skewed).unwrap().failures[0].contains("follower"));
        assert_eq!(cross_validate(&LoadCounters { commands: 0, ..ok }).unwrap_err(), ModelError::NoCommands);
    }
}
