use serde::{Deserialize, Serialize};

use crate::msg::Category;

/// Messages a node sent and handled, by category.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCounters {
    pub sent: [u64; 4],
    pub received: [u64; 4],
}

impl NodeCounters {
    pub fn record_sent(&mut self, c: Category) {
        self.sent[c.index()] += 1;
    }

    pub fn record_received(&mut self, c: Category) {
        self.received[c.index()] += 1;
    }

    pub fn sent_in(&self, cats: &[Category]) -> u64 {
        cats.iter().map(|c| self.sent[c.index()]).sum()
    }

    pub fn received_in(&self, cats: &[Category]) -> u64 {
        cats.iter().map(|c| self.received[c.index()]).sum()
    }

    /// Sent plus received over the given categories.
    pub fn handled_in(&self, cats: &[Category]) -> u64 {
        self.sent_in(cats) + self.received_in(cats)
    }

    pub fn total_sent(&self) -> u64 {
        self.sent.iter().sum()
    }

    pub fn total_received(&self) -> u64 {
        self.received.iter().sum()
    }
}

/// Categories that make up the per-command load: the client exchange and
/// the replication round.
pub const COMMAND_PATH: [Category; 2] = [Category::Client, Category::Replication];

/// Whole-run message accounting, clients included.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub sent: u64,
    /// Extra copies injected by the duplication fault.
    pub duplicated: u64,
    pub received: u64,
    pub dropped: u64,
    pub in_flight: u64,
}

impl Accounting {
    /// `sent + duplicated == received + dropped + in_flight`.
    pub fn balanced(&self) -> bool {
        self.sent + self.duplicated == self.received + self.dropped + self.in_flight
    }
}
