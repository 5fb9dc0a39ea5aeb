//! Multi-Paxos with relay-based message dissemination.
//!
//! The leader reaches followers through one randomly chosen relay per
//! follower group; relays fan out, collect votes and answer with a single
//! aggregated reply. [`replica::Replica`] is transport-agnostic and runs
//! under the deterministic simulator in [`sim`] or over TCP via [`net`].

pub mod bench;
pub mod config;
pub mod engine;
pub mod kvstore;
pub mod linearizability;
pub mod model;
pub mod msg;
pub mod net;
pub mod pig;
pub mod replica;
pub mod scenario;
pub mod sim;
pub mod types;
pub mod wire;

pub use config::{ClusterConfig, ConfigError, RelayGroupConfig, Routing};
pub use num_rational::Rational64;
pub use types::{Ballot, Command, NodeId, Slot, Time};

/// Exact rational scalar for the load model.
pub type Exact = Rational64;
pub type ExactLoadRow = model::LoadModelRow<Exact>;
pub type FloatLoadRow = model::LoadModelRow<f64>;
