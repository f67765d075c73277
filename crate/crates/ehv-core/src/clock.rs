//! Vector clocks: per-node counters giving a causal partial order.
//!
//! No wall-clock time enters this module; ordering is derived purely from
//! counters carried on mutations, which is what makes backdated-update
//! injection via clock skew a non-issue.

use std::collections::BTreeMap;

use crate::crypto::CanonicalEncoder;

/// Map from node id to that node's update counter; absent entries are zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VectorClock {
    entries: BTreeMap<String, u64>,
}

/// Outcome of comparing two clocks under the componentwise partial order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CausalOrder {
    Dominates,
    Dominated,
    Equal,
    Concurrent,
}

impl VectorClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, node: &str) -> u64 {
        self.entries.get(node).copied().unwrap_or(0)
    }

    pub fn set(&mut self, node: &str, value: u64) {
        if value == 0 {
            self.entries.remove(node);
        } else {
            self.entries.insert(node.to_string(), value);
        }
    }

    /// Bump this node's own component by one.
    pub fn advance(&mut self, node: &str) {
        let v = self.get(node) + 1;
        self.entries.insert(node.to_string(), v);
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, u64)> {
        self.entries.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Componentwise maximum: the join of the clock semilattice.
    pub fn merge(&self, other: &VectorClock) -> VectorClock {
        let mut out = self.clone();
        for (node, &v) in &other.entries {
            let cur = out.get(node);
            if v > cur {
                out.entries.insert(node.clone(), v);
            }
        }
        out
    }

    pub fn compare(&self, other: &VectorClock) -> CausalOrder {
        let mut ge = true;
        let mut le = true;
        let keys = self.entries.keys().chain(other.entries.keys());
        for node in keys {
            let a = self.get(node);
            let b = other.get(node);
            if a < b {
                ge = false;
            }
            if a > b {
                le = false;
            }
        }
        match (ge, le) {
            (true, true) => CausalOrder::Equal,
            (true, false) => CausalOrder::Dominates,
            (false, true) => CausalOrder::Dominated,
            (false, false) => CausalOrder::Concurrent,
        }
    }

    pub fn dominates(&self, other: &VectorClock) -> bool {
        self.compare(other) == CausalOrder::Dominates
    }

    /// Canonical bytes: entry count, then `(node, counter)` pairs in
    /// ascending node order.
    pub fn encode(&self, enc: &mut CanonicalEncoder) {
        enc.u32(self.entries.len() as u32);
        for (node, &v) in &self.entries {
            enc.str(node).u64(v);
        }
    }
}

impl std::fmt::Display for VectorClock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, (node, v)) in self.entries.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{node}:{v}")?;
        }
        write!(f, "]")
    }
}

/// Convenience constructor from `(node, counter)` pairs.
pub fn clock(entries: &[(&str, u64)]) -> VectorClock {
    let mut c = VectorClock::new();
    for &(node, v) in entries {
        c.set(node, v);
    }
    c
}
