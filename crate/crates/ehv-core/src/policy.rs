//! Causal-graph CRDT policy state.
//!
//! Policy mutations form a DAG: each signed mutation carries a vector clock
//! and the ids of the heads it was authored on top of. Replicas converge by
//! exchanging mutations in any order, any number of times; ingestion is
//! idempotent, order-insensitive (orphans are buffered until their parents
//! arrive), and authenticated against an issuer allowlist.
//!
//! The effective policy is a deterministic topological order of the DAG:
//! parents before children, concurrent siblings tie-broken by ascending
//! mutation id (content hash), later entries overriding earlier ones per
//! grammar name. The whole state is committed as a binary Merkle root over
//! the effective order, so two replicas agree on the policy iff they agree
//! on one 32-byte digest.
//!
//! Canonical mutation serialization (see `PolicyMutation::canonical_bytes`):
//! issuer, clock, parent ids (ascending), payload — in that order, using the
//! crate-wide length-prefixed encoding. The mutation id is the SHA-256 of
//! those bytes; the signature is detached Ed25519 over the same bytes under
//! the `ehv.mutation` domain tag.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use thiserror::Error;

use crate::clock::VectorClock;
use crate::crypto::{CanonicalEncoder, Digest, Signature, SigningKey, VerifyingKey};

pub const MUTATION_DOMAIN: &str = "ehv.mutation";

/// Mutation id: content hash of the canonical serialization.
pub type MutationId = Digest;

/// A signed, vector-clock-stamped node in the policy DAG. The payload is a
/// full grammar source document; a mutation replaces any earlier grammar of
/// the same name.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMutation {
    pub id: MutationId,
    pub issuer: String,
    pub clock: VectorClock,
    pub parents: BTreeSet<MutationId>,
    pub payload: String,
    pub signature: Signature,
}

impl PolicyMutation {
    /// Canonical bytes, excluding the signature field.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_mutation_bytes(&self.issuer, &self.clock, &self.parents, &self.payload)
    }

    /// Wire form: canonical bytes followed by the 64-byte signature.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut enc = CanonicalEncoder::new();
        enc.bytes(&self.canonical_bytes());
        enc.bytes(&self.signature.0);
        enc.finish()
    }

    pub fn from_wire(bytes: &[u8]) -> Option<PolicyMutation> {
        let (canon, rest) = read_prefixed(bytes)?;
        let (sig_bytes, rest) = read_prefixed(rest)?;
        if !rest.is_empty() || sig_bytes.len() != 64 {
            return None;
        }
        let mut sig = [0u8; 64];
        sig.copy_from_slice(sig_bytes);
        let (issuer, clock, parents, payload) = parse_canonical(canon)?;
        Some(PolicyMutation {
            id: Digest::of(canon),
            issuer,
            clock,
            parents,
            payload,
            signature: Signature(sig),
        })
    }
}

fn canonical_mutation_bytes(
    issuer: &str,
    clock: &VectorClock,
    parents: &BTreeSet<MutationId>,
    payload: &str,
) -> Vec<u8> {
    let mut enc = CanonicalEncoder::new();
    enc.str(issuer);
    clock.encode(&mut enc);
    enc.u32(parents.len() as u32);
    for p in parents {
        enc.digest(p);
    }
    enc.str(payload);
    enc.finish()
}

fn read_prefixed(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    if bytes.len() < 4 {
        return None;
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().ok()?) as usize;
    if bytes.len() < 4 + len {
        return None;
    }
    Some((&bytes[4..4 + len], &bytes[4 + len..]))
}

fn read_u64(bytes: &[u8]) -> Option<(u64, &[u8])> {
    if bytes.len() < 8 {
        return None;
    }
    Some((u64::from_be_bytes(bytes[..8].try_into().ok()?), &bytes[8..]))
}

fn read_u32(bytes: &[u8]) -> Option<(u32, &[u8])> {
    if bytes.len() < 4 {
        return None;
    }
    Some((u32::from_be_bytes(bytes[..4].try_into().ok()?), &bytes[4..]))
}

fn parse_canonical(bytes: &[u8]) -> Option<(String, VectorClock, BTreeSet<MutationId>, String)> {
    let (issuer, rest) = read_prefixed(bytes)?;
    let issuer = String::from_utf8(issuer.to_vec()).ok()?;
    let (n_clock, mut rest) = read_u32(rest)?;
    let mut clock = VectorClock::new();
    for _ in 0..n_clock {
        let (node, r) = read_prefixed(rest)?;
        let (v, r) = read_u64(r)?;
        clock.set(&String::from_utf8(node.to_vec()).ok()?, v);
        rest = r;
    }
    let (n_parents, mut rest) = read_u32(rest)?;
    let mut parents = BTreeSet::new();
    for _ in 0..n_parents {
        if rest.len() < 32 {
            return None;
        }
        let mut d = [0u8; 32];
        d.copy_from_slice(&rest[..32]);
        parents.insert(Digest(d));
        rest = &rest[32..];
    }
    let (payload, rest) = read_prefixed(rest)?;
    if !rest.is_empty() {
        return None;
    }
    Some((
        issuer,
        clock,
        parents,
        String::from_utf8(payload.to_vec()).ok()?,
    ))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("issuer {0:?} is not on the allowlist")]
    UnknownIssuer(String),
    #[error("signature verification failed for mutation {0}")]
    BadSignature(Digest),
    #[error("mutation id does not match content hash (claimed {claimed}, actual {actual})")]
    IdMismatch { claimed: Digest, actual: Digest },
    #[error("policy DAG has unresolved parent references: {0:?}")]
    IncompleteState(Vec<Digest>),
    #[error("grammar {name:?} version {version} does not exceed current version {current}")]
    NonMonotonicVersion {
        name: String,
        version: u64,
        current: u64,
    },
    #[error("mutation payload failed to parse: {0}")]
    BadPayload(String),
}

/// How an ingested mutation was handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ingest {
    Applied,
    /// Already present; dropped for idempotence.
    Duplicate,
    /// Parents not yet present; buffered until they arrive.
    Buffered,
}

/// A rejected mutation, kept for audit.
#[derive(Debug, Clone)]
pub struct Rejection {
    pub id: Digest,
    pub issuer: String,
    pub reason: String,
}

/// One replica's policy state.
#[derive(Debug, Clone)]
pub struct PolicyStore {
    replica: String,
    dag: BTreeMap<MutationId, PolicyMutation>,
    heads: BTreeSet<MutationId>,
    node_clock: VectorClock,
    issuers: BTreeMap<String, VerifyingKey>,
    /// Mutations waiting on parents, keyed by their own id.
    orphans: BTreeMap<MutationId, PolicyMutation>,
    rejections: Vec<Rejection>,
}

impl PolicyStore {
    pub fn new(replica: impl Into<String>) -> Self {
        Self {
            replica: replica.into(),
            dag: BTreeMap::new(),
            heads: BTreeSet::new(),
            node_clock: VectorClock::new(),
            issuers: BTreeMap::new(),
            orphans: BTreeMap::new(),
            rejections: Vec::new(),
        }
    }

    pub fn replica(&self) -> &str {
        &self.replica
    }

    pub fn register_issuer(&mut self, issuer: impl Into<String>, key: VerifyingKey) {
        self.issuers.insert(issuer.into(), key);
    }

    pub fn issuer_key(&self, issuer: &str) -> Option<&VerifyingKey> {
        self.issuers.get(issuer)
    }

    pub fn node_clock(&self) -> &VectorClock {
        &self.node_clock
    }

    pub fn heads(&self) -> &BTreeSet<MutationId> {
        &self.heads
    }

    pub fn len(&self) -> usize {
        self.dag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dag.is_empty()
    }

    pub fn contains(&self, id: &MutationId) -> bool {
        self.dag.contains_key(id)
    }

    pub fn mutations(&self) -> impl Iterator<Item = &PolicyMutation> {
        self.dag.values()
    }

    pub fn pending_orphans(&self) -> usize {
        self.orphans.len()
    }

    pub fn rejections(&self) -> &[Rejection] {
        &self.rejections
    }

    /// Author a new mutation on top of the current heads and apply it
    /// locally. The caller holds the issuer's signing key; the issuer must
    /// already be allowlisted. Grammar versions must strictly increase per
    /// grammar name.
    pub fn author(
        &mut self,
        payload: &str,
        issuer: &str,
        key: &SigningKey,
    ) -> Result<PolicyMutation, PolicyError> {
        let registered = self
            .issuers
            .get(issuer)
            .ok_or_else(|| PolicyError::UnknownIssuer(issuer.to_string()))?;
        if *registered != key.verifying_key() {
            return Err(PolicyError::UnknownIssuer(issuer.to_string()));
        }
        let grammar = crate::grammar::parse_grammar(payload)
            .map_err(|e| PolicyError::BadPayload(e.to_string()))?;
        let mut current: Option<u64> = None;
        if let Ok(order) = self.effective_policy() {
            for m in order {
                if let Ok(g) = crate::grammar::parse_grammar(&m.payload) {
                    if g.name == grammar.name {
                        current = Some(g.version);
                    }
                }
            }
        }
        if let Some(cur) = current {
            if grammar.version <= cur {
                return Err(PolicyError::NonMonotonicVersion {
                    name: grammar.name,
                    version: grammar.version,
                    current: cur,
                });
            }
        }

        let mut clock = self.node_clock.clone();
        clock.advance(issuer);
        let parents = self.heads.clone();
        let canon = canonical_mutation_bytes(issuer, &clock, &parents, payload);
        let mutation = PolicyMutation {
            id: Digest::of(&canon),
            issuer: issuer.to_string(),
            clock,
            parents,
            payload: payload.to_string(),
            signature: key.sign(MUTATION_DOMAIN, &canon),
        };
        self.apply(mutation.clone());
        Ok(mutation)
    }

    /// Ingest a remote mutation. Verifies id and signature, checks the
    /// issuer allowlist, drops duplicates, buffers orphans. Order- and
    /// duplication-insensitive.
    pub fn ingest(&mut self, m: PolicyMutation) -> Result<Ingest, PolicyError> {
        if self.dag.contains_key(&m.id) || self.orphans.contains_key(&m.id) {
            return Ok(Ingest::Duplicate);
        }
        let canon = m.canonical_bytes();
        let actual = Digest::of(&canon);
        if actual != m.id {
            self.reject(&m, "id mismatch");
            return Err(PolicyError::IdMismatch {
                claimed: m.id,
                actual,
            });
        }
        let Some(key) = self.issuers.get(&m.issuer) else {
            self.reject(&m, "unknown issuer");
            return Err(PolicyError::UnknownIssuer(m.issuer.clone()));
        };
        if !key.verify(MUTATION_DOMAIN, &canon, &m.signature) {
            self.reject(&m, "bad signature");
            return Err(PolicyError::BadSignature(m.id));
        }
        if !m.parents.iter().all(|p| self.dag.contains_key(p)) {
            self.orphans.insert(m.id, m);
            return Ok(Ingest::Buffered);
        }
        self.apply(m);
        self.drain_orphans();
        Ok(Ingest::Applied)
    }

    fn reject(&mut self, m: &PolicyMutation, reason: &str) {
        self.rejections.push(Rejection {
            id: m.id,
            issuer: m.issuer.clone(),
            reason: reason.to_string(),
        });
    }

    fn apply(&mut self, m: PolicyMutation) {
        for p in &m.parents {
            self.heads.remove(p);
        }
        self.node_clock = self.node_clock.merge(&m.clock);
        self.heads.insert(m.id);
        self.dag.insert(m.id, m);
    }

    fn drain_orphans(&mut self) {
        loop {
            let ready: Vec<MutationId> = self
                .orphans
                .iter()
                .filter(|(_, m)| m.parents.iter().all(|p| self.dag.contains_key(p)))
                .map(|(&id, _)| id)
                .collect();
            if ready.is_empty() {
                return;
            }
            for id in ready {
                let m = self.orphans.remove(&id).expect("present");
                self.apply(m);
            }
        }
    }

    /// Deterministic topological order of the DAG: parents before children,
    /// concurrent mutations tie-broken by ascending id. A mutation whose
    /// clock dominates another's therefore appears after it and overrides it.
    pub fn effective_policy(&self) -> Result<Vec<&PolicyMutation>, PolicyError> {
        let dangling: Vec<Digest> = self
            .dag
            .values()
            .flat_map(|m| m.parents.iter())
            .filter(|p| !self.dag.contains_key(*p))
            .copied()
            .collect();
        if !dangling.is_empty() {
            return Err(PolicyError::IncompleteState(dangling));
        }

        let mut children: BTreeMap<MutationId, Vec<MutationId>> = BTreeMap::new();
        let mut indegree: BTreeMap<MutationId, usize> = BTreeMap::new();
        for m in self.dag.values() {
            indegree.entry(m.id).or_insert(0);
            for p in &m.parents {
                children.entry(*p).or_default().push(m.id);
                *indegree.entry(m.id).or_insert(0) += 1;
            }
        }
        let mut ready: BinaryHeap<Reverse<MutationId>> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| Reverse(id))
            .collect();
        let mut order = Vec::with_capacity(self.dag.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(&self.dag[&id]);
            for child in children.get(&id).into_iter().flatten() {
                let d = indegree.get_mut(child).expect("tracked");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(*child));
                }
            }
        }
        debug_assert_eq!(order.len(), self.dag.len(), "DAG must be acyclic");
        Ok(order)
    }

    /// Latest grammar per name in effective order (later overrides earlier).
    pub fn effective_grammars(
        &self,
    ) -> Result<Vec<(String, crate::grammar::PolicyGrammar)>, PolicyError> {
        let mut by_name: BTreeMap<String, crate::grammar::PolicyGrammar> = BTreeMap::new();
        for m in self.effective_policy()? {
            let g = crate::grammar::parse_grammar(&m.payload)
                .map_err(|e| PolicyError::BadPayload(e.to_string()))?;
            by_name.insert(g.name.clone(), g);
        }
        Ok(by_name.into_iter().collect())
    }

    /// Merkle root over the effective order's mutation ids. Empty state
    /// commits to SHA-256 of the empty byte string.
    pub fn merkle_root(&self) -> Digest {
        let leaves: Vec<Digest> = self
            .effective_policy()
            .map(|order| order.iter().map(|m| m.id).collect())
            .unwrap_or_default();
        merkle_root_of(&leaves)
    }
}

/// Binary Merkle tree over leaf digests: odd layers duplicate the final
/// node; the empty tree is the empty-string digest.
pub fn merkle_root_of(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return Digest::empty();
    }
    let mut layer: Vec<Digest> = leaves.to_vec();
    while layer.len() > 1 {
        let mut next = Vec::with_capacity(layer.len().div_ceil(2));
        for pair in layer.chunks(2) {
            let left = pair[0];
            let right = if pair.len() == 2 { pair[1] } else { pair[0] };
            let mut enc = CanonicalEncoder::new();
            enc.digest(&left).digest(&right);
            next.push(Digest::of(&enc.finish()));
        }
        layer = next;
    }
    layer[0]
}
