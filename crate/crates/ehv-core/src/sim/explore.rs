//! Small-scope exhaustive exploration of the enforcement state machine.
//!
//! The explorer enumerates, breadth-first, every interleaving of policy
//! publication, boundary-gated policy swaps, action submission and
//! decision, network partition and heal, and epoch expiry and
//! re-attestation, over the versioned dosage policy family. Decisions are
//! rendered by a pluggable backend; the default backend walks the real
//! compiled automata with real fail-closed gating, so the model checks the
//! artifact's own enforcement logic, not a parallel reimplementation.
//!
//! Two invariants are checked in every generated state:
//!
//! - Safety: a PERMIT whose action is not derivable from the productions
//!   of the active policy version (an oracle independent of the DFA path)
//!   is a violation.
//! - Prefix alignment: the active policy version never changes while an
//!   action is in flight. This is structural (the swap transition is
//!   boundary-gated) and double-checked on every generated edge.
//!
//! State counts are reported for transparency; they are properties of this
//! state machine, not of any external model.

use std::collections::{BTreeMap, HashMap, VecDeque};

use thiserror::Error;

use crate::dfa::{compile, Dfa, WalkOutcome};
use crate::fixtures;
use crate::grammar::{parse_grammar, PolicyGrammar};
use crate::pep::Verdict;
use crate::sim::scenario::ActionKind;
use crate::vocab::TokenId;

/// Finite-domain configuration for the exploration.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Policy versions 1..=max, compiled from the dosage family.
    pub max_policy_version: u64,
    pub actions: Vec<ActionKind>,
    /// Exploration stops (flagged incomplete) past this depth.
    pub depth_bound: usize,
    /// Exploration stops (flagged incomplete) past this many distinct states.
    pub state_budget: usize,
}

impl ModelConfig {
    /// The bounded configuration used by the acceptance gate: five policy
    /// versions, three actions, two network states.
    pub fn small_scope() -> ModelConfig {
        ModelConfig {
            max_policy_version: 5,
            actions: vec![
                ActionKind::SafeDosage,
                ActionKind::UnsafeDosage,
                ActionKind::EscalateCase,
            ],
            depth_bound: 64,
            state_budget: 1_000_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("model config invalid: {0}")]
    Invalid(String),
}

/// Renders a verdict for an action under a policy version and epoch
/// freshness. The production backend walks the compiled automaton.
pub trait EnforcementBackend {
    fn decide(&self, action: &[TokenId], version: u64, epoch_fresh: bool) -> Verdict;
}

/// Real enforcement: fail-closed gate then a DFA walk.
pub struct DfaBackend {
    dfas: BTreeMap<u64, Dfa>,
}

impl DfaBackend {
    pub fn for_versions(max: u64) -> Result<DfaBackend, ExploreError> {
        let vocab = fixtures::clinical_vocab();
        let mut dfas = BTreeMap::new();
        for version in 1..=max {
            let g = parse_grammar(&fixtures::dosage_grammar_source(version))
                .map_err(|e| ExploreError::Invalid(e.to_string()))?;
            let dfa = compile(&g, &vocab).map_err(|e| ExploreError::Invalid(e.to_string()))?;
            dfas.insert(version, dfa);
        }
        Ok(DfaBackend { dfas })
    }

    fn dfa(&self, version: u64) -> &Dfa {
        &self.dfas[&version]
    }
}

impl EnforcementBackend for DfaBackend {
    fn decide(&self, action: &[TokenId], version: u64, epoch_fresh: bool) -> Verdict {
        if !epoch_fresh {
            return Verdict::Deny;
        }
        let dfa = self.dfa(version);
        match dfa.walk(action) {
            WalkOutcome::Reached(q) if dfa.is_accepting(q) && dfa.is_escalating(q) => {
                Verdict::Escalate
            }
            WalkOutcome::Reached(q) if dfa.is_accepting(q) => Verdict::Permit,
            _ => Verdict::Deny,
        }
    }
}

/// Detector-sensitivity instrumentation: a broken enforcement point that
/// skips the grammar walk entirely. Exists so tests can prove the explorer
/// actually notices an unsound PERMIT; never used in production paths.
pub struct UncheckedPermitBackend;

impl EnforcementBackend for UncheckedPermitBackend {
    fn decide(&self, _action: &[TokenId], _version: u64, epoch_fresh: bool) -> Verdict {
        if epoch_fresh {
            Verdict::Permit
        } else {
            Verdict::Deny
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Network {
    Connected,
    Partitioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Phase {
    Idle,
    Pending(ActionKind),
    Decided(ActionKind, Verdict),
}

/// Coarse view of the generation automaton state, kept finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DfaAbstract {
    Start,
    Interior,
    Accepting,
    Escalating,
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct ModelState {
    /// CRDT-merged policy version at the node.
    store_version: u64,
    /// Version enforced by the active automaton; trails the store until a
    /// boundary swap.
    active_version: u64,
    network: Network,
    epoch_fresh: bool,
    phase: Phase,
}

impl ModelState {
    fn initial() -> ModelState {
        ModelState {
            store_version: 1,
            active_version: 1,
            network: Network::Connected,
            epoch_fresh: true,
            phase: Phase::Idle,
        }
    }

    /// The finite view of the generation automaton for this state: between
    /// actions, mid-action, or at one of the three action outcomes.
    pub(crate) fn dfa_abstract(&self) -> DfaAbstract {
        match self.phase {
            Phase::Idle => DfaAbstract::Start,
            Phase::Pending(_) => DfaAbstract::Interior,
            Phase::Decided(_, Verdict::Permit) => DfaAbstract::Accepting,
            Phase::Decided(_, Verdict::Escalate) => DfaAbstract::Escalating,
            Phase::Decided(_, Verdict::Deny) => DfaAbstract::Dead,
        }
    }
}

/// Exploration outcome.
#[derive(Debug, Clone)]
pub struct ExplorationReport {
    pub states_generated: u64,
    pub distinct_states: u64,
    pub max_depth: usize,
    pub violations: Vec<String>,
    pub deadlocks: u64,
    /// False when a depth or state budget stopped the sweep early.
    pub complete: bool,
}

impl ExplorationReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "states generated      {}\n",
            self.states_generated
        ));
        out.push_str(&format!("distinct states       {}\n", self.distinct_states));
        out.push_str(&format!("max depth             {}\n", self.max_depth));
        out.push_str(&format!("deadlocks             {}\n", self.deadlocks));
        out.push_str(&format!(
            "violations            {}\n",
            self.violations.len()
        ));
        for v in &self.violations {
            out.push_str(&format!("  VIOLATION: {v}\n"));
        }
        out.push_str(&format!(
            "exploration           {}\n",
            if self.complete {
                "complete"
            } else {
                "INCOMPLETE (budget reached)"
            }
        ));
        out
    }
}

/// Explore with the real DFA-walking backend.
pub fn explore(config: &ModelConfig) -> Result<ExplorationReport, ExploreError> {
    let backend = DfaBackend::for_versions(config.max_policy_version)?;
    explore_with_backend(config, &backend)
}

/// Explore with an injected backend (used by detector-sensitivity tests).
pub fn explore_with_backend(
    config: &ModelConfig,
    backend: &dyn EnforcementBackend,
) -> Result<ExplorationReport, ExploreError> {
    if config.max_policy_version == 0 || config.max_policy_version > 16 {
        return Err(ExploreError::Invalid(
            "policy versions must be in 1..=16".into(),
        ));
    }
    if config.actions.is_empty() {
        return Err(ExploreError::Invalid("at least one action".into()));
    }

    // The independent validity oracle: derivation from productions.
    let grammars: BTreeMap<u64, PolicyGrammar> = (1..=config.max_policy_version)
        .map(|v| {
            parse_grammar(&fixtures::dosage_grammar_source(v))
                .map(|g| (v, g))
                .map_err(|e| ExploreError::Invalid(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let derivable = |kind: ActionKind, version: u64| grammars[&version].derives(&kind.tokens());

    let mut report = ExplorationReport {
        states_generated: 0,
        distinct_states: 0,
        max_depth: 0,
        violations: Vec::new(),
        deadlocks: 0,
        complete: true,
    };

    let mut seen: HashMap<ModelState, usize> = HashMap::new();
    let mut queue: VecDeque<(ModelState, usize)> = VecDeque::new();
    let init = ModelState::initial();
    seen.insert(init, 0);
    queue.push_back((init, 0));
    report.states_generated += 1;

    while let Some((state, depth)) = queue.pop_front() {
        report.max_depth = report.max_depth.max(depth);
        if depth >= config.depth_bound {
            report.complete = false;
            continue;
        }

        let successors = successors(&state, config, backend);
        if successors.is_empty() {
            report.deadlocks += 1;
            continue;
        }
        for (label, next) in successors {
            report.states_generated += 1;

            // Prefix alignment: no active-version change mid-action.
            if matches!(state.phase, Phase::Pending(_))
                && next.active_version != state.active_version
            {
                report.violations.push(format!(
                    "prefix alignment broken by {label}: active v{} -> v{} while pending",
                    state.active_version, next.active_version
                ));
            }
            // Safety: PERMIT must be backed by grammar derivability under
            // the deciding (active) version.
            if let Phase::Decided(kind, Verdict::Permit) = next.phase {
                if matches!(state.phase, Phase::Pending(_)) && !derivable(kind, next.active_version)
                {
                    report.violations.push(format!(
                        "unsound PERMIT for {} under policy v{} (fresh={}, dfa {:?})",
                        kind.name(),
                        next.active_version,
                        next.epoch_fresh,
                        next.dfa_abstract()
                    ));
                }
            }

            if !seen.contains_key(&next) {
                if seen.len() >= config.state_budget {
                    report.complete = false;
                    continue;
                }
                seen.insert(next, depth + 1);
                queue.push_back((next, depth + 1));
            }
        }
    }

    report.distinct_states = seen.len() as u64;
    Ok(report)
}

fn successors(
    state: &ModelState,
    config: &ModelConfig,
    backend: &dyn EnforcementBackend,
) -> Vec<(&'static str, ModelState)> {
    let mut out: Vec<(&'static str, ModelState)> = Vec::new();

    // Policy publication reaches the node only while connected.
    if state.network == Network::Connected && state.store_version < config.max_policy_version {
        let mut next = *state;
        next.store_version += 1;
        out.push(("publish", next));
    }
    // Boundary-gated swap of the active automaton.
    if state.active_version < state.store_version && !matches!(state.phase, Phase::Pending(_)) {
        let mut next = *state;
        next.active_version = next.store_version;
        out.push(("swap", next));
    }
    // Action lifecycle.
    match state.phase {
        Phase::Idle => {
            for &kind in &config.actions {
                let mut next = *state;
                next.phase = Phase::Pending(kind);
                out.push(("submit", next));
            }
        }
        Phase::Pending(kind) => {
            let verdict = backend.decide(&kind.tokens(), state.active_version, state.epoch_fresh);
            let mut next = *state;
            next.phase = Phase::Decided(kind, verdict);
            out.push(("decide", next));
        }
        Phase::Decided(_, _) => {
            let mut next = *state;
            next.phase = Phase::Idle;
            out.push(("ack", next));
        }
    }
    // Network weather.
    match state.network {
        Network::Connected => {
            let mut next = *state;
            next.network = Network::Partitioned;
            out.push(("partition", next));
        }
        Network::Partitioned => {
            let mut next = *state;
            next.network = Network::Connected;
            out.push(("heal", next));
        }
    }
    // Epoch expiry is reachable only while partitioned (connected nodes
    // re-attest inside the TTL); recovery requires connectivity.
    if state.network == Network::Partitioned && state.epoch_fresh {
        let mut next = *state;
        next.epoch_fresh = false;
        out.push(("expire", next));
    }
    if state.network == Network::Connected && !state.epoch_fresh {
        let mut next = *state;
        next.epoch_fresh = true;
        out.push(("reattest", next));
    }

    out
}
