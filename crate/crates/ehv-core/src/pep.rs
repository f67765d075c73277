//! The policy enforcement point.
//!
//! One `Pep` drives one generation stream: it walks the active DFA as
//! tokens are sampled, masks logits before every sample, renders verdicts
//! for complete candidate actions, and hot-swaps to a newer automaton
//! without ever changing the active DFA mid-action.
//!
//! Boundaries: a boundary is reached when the end-of-action token is
//! consumed at an accepting state. The completed action's tokens are kept
//! through the boundary instant for the swap alignment test; they are
//! cleared when the next action's first token arrives. Between actions
//! (empty prefix) the stream is also at a boundary, which is what lets a
//! deferred swap complete "at the fresh start state".
//!
//! Swap protocol: a newer automaton is published into a staging buffer (a
//! single atomic publication; readers never observe a partial staging).
//! `try_swap` activates it only at a boundary where the current prefix
//! re-walks into the staged automaton — trivially true for the empty
//! prefix — so once something is staged, the swap lands no later than the
//! start of the next action.
//!
//! Epoch interaction: a halted epoch refuses every step and denies every
//! decision (fail-closed dominates, even mid-action). A root mismatch
//! (re-attestation pending) refuses new actions but lets the current
//! action finish under the committed root.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Digest;
use crate::dfa::{Dfa, WalkOutcome};
use crate::epoch::{EpochHandle, Freshness, LogicalMs};
use crate::gbom::{GbomLog, RecordDraft, RecordEvent};
use crate::logits::{mask_in_place, Logits, Sampler};
use crate::vocab::TokenId;

/// Enforcement verdict for an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Permit,
    Deny,
    Escalate,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Permit => "PERMIT",
            Verdict::Deny => "DENY",
            Verdict::Escalate => "ESCALATE",
        }
    }

    pub fn parse(s: &str) -> Option<Verdict> {
        match s {
            "PERMIT" => Some(Verdict::Permit),
            "DENY" => Some(Verdict::Deny),
            "ESCALATE" => Some(Verdict::Escalate),
            _ => None,
        }
    }
}

/// Why a verdict was rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionReason {
    /// Accepted by the active grammar.
    GrammarAccept,
    /// Undefined transition, or the action ended short of acceptance.
    DeadEnd,
    /// Accepted via an escalation-flagged production.
    EscalateMark,
    /// The committed epoch root does not cover this automaton.
    EpochStale,
    /// Epoch TTL exceeded: strict fail-closed.
    Halt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub verdict: Verdict,
    pub reason: DecisionReason,
}

impl Decision {
    fn deny(reason: DecisionReason) -> Self {
        debug_assert!(matches!(
            reason,
            DecisionReason::DeadEnd | DecisionReason::EpochStale | DecisionReason::Halt
        ));
        Self {
            verdict: Verdict::Deny,
            reason,
        }
    }
}

/// Audit record state label, e.g. `q17`.
pub fn state_label(q: u32) -> String {
    format!("q{q}")
}

/// Walk a token sequence through an automaton from its start state. A
/// missing transition is a deny, not a fault.
pub fn walk_prefix(dfa: &Dfa, tokens: &[TokenId]) -> WalkOutcome {
    dfa.walk(tokens)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StageError {
    #[error("staged automaton has the same policy root as the active one")]
    SameRoot,
    #[error("staged automaton root (seq {staged}) is not newer than active (seq {active})")]
    OlderThanActive { staged: u64, active: u64 },
    #[error("an automaton at least as new (seq {existing}) is already staged")]
    NotNewerThanStaged { existing: u64 },
}

#[derive(Debug, Clone)]
struct Staged {
    dfa: Arc<Dfa>,
    seq: u64,
}

/// Cloneable handle for publishing a recompiled automaton from outside the
/// generation loop. Publication is one atomic slot write; `try_swap` either
/// sees the whole staged automaton or nothing.
#[derive(Debug, Clone)]
pub struct StagingBuffer {
    slot: Arc<Mutex<Option<Staged>>>,
    active_seq: Arc<AtomicU64>,
    active_root: Arc<Mutex<Digest>>,
}

impl StagingBuffer {
    fn new(active_seq: u64, active_root: Digest) -> Self {
        Self {
            slot: Arc::new(Mutex::new(None)),
            active_seq: Arc::new(AtomicU64::new(active_seq)),
            active_root: Arc::new(Mutex::new(active_root)),
        }
    }

    /// Stage a newer automaton. `seq` is the caller's monotone position for
    /// the automaton's policy root (the policy store's effective length at
    /// compile time); newer wins, same-or-older is rejected.
    pub fn stage(&self, dfa: Arc<Dfa>, seq: u64) -> Result<(), StageError> {
        if dfa.source_root() == *self.active_root.lock().expect("root lock") {
            return Err(StageError::SameRoot);
        }
        let active = self.active_seq.load(Ordering::SeqCst);
        if seq <= active {
            return Err(StageError::OlderThanActive {
                staged: seq,
                active,
            });
        }
        let mut slot = self.slot.lock().expect("staging lock");
        if let Some(existing) = slot.as_ref() {
            if existing.seq >= seq {
                return Err(StageError::NotNewerThanStaged {
                    existing: existing.seq,
                });
            }
        }
        *slot = Some(Staged { dfa, seq });
        Ok(())
    }

    pub fn is_staged(&self) -> bool {
        self.slot.lock().expect("staging lock").is_some()
    }
}

/// How much the enforcement point writes to the audit log on its own: every
/// masked token, or only what the caller logs per action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogGranularity {
    PerToken,
    PerAction,
}

#[derive(Debug, Clone)]
pub struct PepConfig {
    pub end_of_action: TokenId,
    pub identity: String,
    pub granularity: LogGranularity,
}

/// Outcome of one generation step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Sampled {
        token: TokenId,
        masked: Logits,
        at_boundary: bool,
    },
    Refused(Decision),
}

/// Per-PEP counters exposed for trace assertions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PepStats {
    pub steps: u64,
    pub swaps: u64,
    pub prefetch_hits: u64,
    pub prefetch_misses: u64,
}

pub struct Pep {
    active: Arc<Dfa>,
    staging: StagingBuffer,
    state: u32,
    at_boundary: bool,
    action_prefix: Vec<TokenId>,
    prefetched: Option<std::collections::HashMap<u32, Vec<TokenId>>>,
    epoch: EpochHandle,
    config: PepConfig,
    stats: PepStats,
}

impl Pep {
    /// `active_seq` is the policy-root position of the initial automaton;
    /// later stagings must carry strictly larger positions.
    pub fn new(active: Arc<Dfa>, active_seq: u64, epoch: EpochHandle, config: PepConfig) -> Self {
        let staging = StagingBuffer::new(active_seq, active.source_root());
        let state = active.start();
        Self {
            active,
            staging,
            state,
            at_boundary: true,
            action_prefix: Vec::new(),
            prefetched: None,
            epoch,
            config,
            stats: PepStats::default(),
        }
    }

    pub fn active(&self) -> &Arc<Dfa> {
        &self.active
    }

    pub fn active_root(&self) -> Digest {
        self.active.source_root()
    }

    pub fn active_seq(&self) -> u64 {
        self.staging.active_seq.load(Ordering::SeqCst)
    }

    pub fn state(&self) -> u32 {
        self.state
    }

    pub fn at_boundary(&self) -> bool {
        self.at_boundary
    }

    pub fn stats(&self) -> PepStats {
        self.stats
    }

    pub fn epoch(&self) -> &EpochHandle {
        &self.epoch
    }

    /// Handle for staging from another execution context.
    pub fn staging_handle(&self) -> StagingBuffer {
        self.staging.clone()
    }

    /// Stage a recompiled automaton (see [`StagingBuffer::stage`]).
    pub fn stage_dfa(&self, dfa: Arc<Dfa>, seq: u64) -> Result<(), StageError> {
        self.staging.stage(dfa, seq)
    }

    /// Activate the staged automaton if we are at a boundary and the prefix
    /// since the last boundary re-walks into it. Returns whether a swap
    /// happened. The whole exchange runs under the staging lock, so the
    /// automaton observed by the next mask is never partially swapped.
    pub fn try_swap(&mut self) -> bool {
        if !self.at_boundary {
            return false;
        }
        let mut slot = self.staging.slot.lock().expect("staging lock");
        let Some(staged) = slot.as_ref() else {
            return false;
        };
        if !matches!(
            staged.dfa.walk(&self.action_prefix),
            WalkOutcome::Reached(_)
        ) {
            // Deferred: the swap will land once the boundary completes and
            // the prefix resets to empty.
            return false;
        }
        let staged = slot.take().expect("checked above");
        drop(slot);
        self.active = staged.dfa;
        self.staging.active_seq.store(staged.seq, Ordering::SeqCst);
        *self.staging.active_root.lock().expect("root lock") = self.active.source_root();
        self.state = self.active.start();
        self.action_prefix.clear();
        self.prefetched = None;
        self.stats.swaps += 1;
        true
    }

    /// Abort the in-flight action (runtime cancellation): return to the
    /// safe-halt boundary without emitting anything.
    pub fn abort_action(&mut self) {
        self.at_boundary = true;
        self.action_prefix.clear();
        self.state = self.active.start();
    }

    /// Precompute the allowed sets of every successor of the current state,
    /// so the next step's mask lookup is a cache hit. Models pipelined mask
    /// prefetch; the cache is observable via [`PepStats`].
    pub fn prefetch_masks(&mut self) {
        let mut cache = std::collections::HashMap::new();
        for succ in self.active.successors(self.state) {
            let ids = self
                .active
                .allowed(succ)
                .expect("successor state valid")
                .ids
                .to_vec();
            cache.insert(succ, ids);
        }
        self.prefetched = Some(cache);
    }

    /// Number of entries currently prefetched.
    pub fn prefetched_len(&self) -> usize {
        self.prefetched.as_ref().map_or(0, |c| c.len())
    }

    fn consume_prefetch(&mut self) -> Option<Vec<TokenId>> {
        let hit = self.prefetched.as_mut().and_then(|c| c.remove(&self.state));
        match hit {
            Some(ids) => {
                self.stats.prefetch_hits += 1;
                Some(ids)
            }
            None => {
                self.stats.prefetch_misses += 1;
                None
            }
        }
    }

    /// One generation step: freshness gate, boundary housekeeping, mask,
    /// sample, advance, log. Masking and sampling happen against a single
    /// automaton snapshot; swaps only occur between steps, at boundaries.
    pub fn step(
        &mut self,
        raw: &Logits,
        sampler: &mut dyn Sampler,
        now: LogicalMs,
        log: &mut GbomLog,
    ) -> StepOutcome {
        if self.at_boundary {
            // The previous action is sealed: reset, then give a deferred
            // swap its boundary-completion chance before the freshness gate
            // (a staged newer policy may be exactly what the gate wants).
            self.action_prefix.clear();
            self.try_swap();
            self.state = self.active.start();
        }

        match self.epoch.verify(&self.active.source_root(), now) {
            Freshness::Halted => return StepOutcome::Refused(Decision::deny(DecisionReason::Halt)),
            Freshness::Reattest if self.at_boundary => {
                // New actions wait for re-attestation; only an in-flight
                // action may finish under the committed root.
                return StepOutcome::Refused(Decision::deny(DecisionReason::EpochStale));
            }
            Freshness::Reattest | Freshness::Fresh => {}
        }
        self.at_boundary = false;

        let cached = self.consume_prefetch();
        let allowed = self.active.allowed(self.state).expect("state invariant");
        debug_assert!(
            cached.as_deref().is_none_or(|ids| ids == allowed.ids),
            "prefetched allowed set diverged from the automaton"
        );
        if allowed.is_empty() {
            // Dead end: no token can complete a valid action. Abort to the
            // safe-halt boundary.
            self.at_boundary = true;
            self.action_prefix.clear();
            return StepOutcome::Refused(Decision::deny(DecisionReason::DeadEnd));
        }

        let mask_state = self.state;
        let mut masked = raw.clone();
        if mask_in_place(&mut masked, &allowed).is_err() {
            self.at_boundary = true;
            return StepOutcome::Refused(Decision::deny(DecisionReason::DeadEnd));
        }
        let token = sampler
            .sample(&masked)
            .expect("non-empty allowed set always yields a sample");
        debug_assert!(allowed.contains(token), "sampler escaped the mask");

        self.state = self
            .active
            .transition(self.state, token)
            .expect("sampled token is allowed");
        self.action_prefix.push(token);
        self.stats.steps += 1;

        if token == self.config.end_of_action && self.active.is_accepting(self.state) {
            self.at_boundary = true;
        }

        if self.config.granularity == LogGranularity::PerToken {
            let (epoch_id, measurement) = self.epoch.read(|e| (e.epoch_label(), e.measurement()));
            log.append(RecordDraft {
                timestamp_ms: now,
                event: RecordEvent::Token,
                policy_merkle_root: self.active.source_root(),
                tee_measurement: measurement,
                epoch_id,
                dfa_state: state_label(mask_state),
                enforcement: Verdict::Permit,
                identity: self.config.identity.clone(),
            });
        }

        let outcome = StepOutcome::Sampled {
            token,
            masked,
            at_boundary: self.at_boundary,
        };
        if self.at_boundary {
            self.try_swap();
        }
        outcome
    }

    /// Render the verdict for a complete candidate action and log it. Does
    /// not disturb generation state.
    pub fn decide(&mut self, action: &[TokenId], now: LogicalMs, log: &mut GbomLog) -> Decision {
        let (decision, end_state) = match self.epoch.verify(&self.active.source_root(), now) {
            Freshness::Halted => (Decision::deny(DecisionReason::Halt), self.state),
            Freshness::Reattest => (Decision::deny(DecisionReason::EpochStale), self.state),
            Freshness::Fresh => match self.active.walk(action) {
                WalkOutcome::DeadEnd { index, .. } => {
                    let last = match self.active.walk(&action[..index]) {
                        WalkOutcome::Reached(q) => q,
                        WalkOutcome::DeadEnd { .. } => self.active.start(),
                    };
                    (Decision::deny(DecisionReason::DeadEnd), last)
                }
                WalkOutcome::Reached(q)
                    if self.active.is_escalating(q) && self.active.is_accepting(q) =>
                {
                    (
                        Decision {
                            verdict: Verdict::Escalate,
                            reason: DecisionReason::EscalateMark,
                        },
                        q,
                    )
                }
                WalkOutcome::Reached(q) if self.active.is_accepting(q) => (
                    Decision {
                        verdict: Verdict::Permit,
                        reason: DecisionReason::GrammarAccept,
                    },
                    q,
                ),
                WalkOutcome::Reached(q) => (Decision::deny(DecisionReason::DeadEnd), q),
            },
        };

        let (epoch_id, measurement) = self.epoch.read(|e| (e.epoch_label(), e.measurement()));
        log.append(RecordDraft {
            timestamp_ms: now,
            event: RecordEvent::Action,
            policy_merkle_root: self.active.source_root(),
            tee_measurement: measurement,
            epoch_id,
            dfa_state: state_label(end_state),
            enforcement: decision.verdict,
            identity: self.config.identity.clone(),
        });
        decision
    }
}
