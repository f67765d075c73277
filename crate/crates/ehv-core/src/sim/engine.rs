//! Deterministic discrete-event engine.
//!
//! Every node bundles a policy store replica, an epoch attestation cache,
//! an enforcement point, and its own audit log. The event queue is ordered
//! by `(time, sequence)` with all randomness drawn from one seeded
//! generator in event order, so a seed fully determines the event log
//! bytes, the audit logs, and the metrics.
//!
//! Policy flow per node: mutation delivered (publish or gossip) -> store
//! ingests -> automaton recompiled against the new Merkle root and staged
//! -> swap at the next action boundary -> re-attestation commits the new
//! root -> queued actions decided fresh. Epoch refreshes are scheduled one
//! attestation-latency before the TTL lapses; a node that cannot reach the
//! control plane keeps retrying, halts at the staleness instant, and
//! recovers only through a successful attestation after heal.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crypto::{Digest, SigningKey};
use crate::dfa::{compile_with, intersect, CompileOptions, Dfa, Intersection};
use crate::epoch::{AttestationAuthority, EpochHandle, EpochState, ResetSignal};
use crate::gbom::{
    verify_chain, ApproverRegistry, ChainReport, GbomLog, OverrideDecision, OverrideEnvelope,
    RecordDraft, RecordEvent,
};
use crate::grammar::PolicyGrammar;
use crate::identity::{validate_credential, CredentialIssuer, WorkloadIdentity};
use crate::logits::{GreedySampler, MockLogitSource};
use crate::pep::{LogGranularity, Pep, PepConfig, StepOutcome, Verdict};
use crate::policy::{PolicyMutation, PolicyStore};
use crate::sim::metrics::{legacy_exposure, RunMetrics};
use crate::sim::scenario::{ActionKind, Endpoint, Scenario, ScenarioError};
use crate::vocab::TokenId;

const PAP_ISSUER: &str = "pap-1";
const RETRY_MS: u64 = 1_000;
const GENERATION_STEP_CAP: usize = 16;
const GOAL_BOOST: f32 = 50.0;

/// Everything a run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub event_log: String,
    pub gboms: Vec<GbomLog>,
    /// Per node: the committed epoch root over time, one entry per
    /// successful attestation (boot attestation at time 0 included).
    pub committed_timelines: Vec<Vec<(u64, Digest)>>,
}

/// Provenance binding: every PERMIT record carries the policy root that was
/// committed in that node's epoch cache at the record's timestamp.
pub fn provenance_bound(output: &RunOutput) -> bool {
    output
        .gboms
        .iter()
        .zip(&output.committed_timelines)
        .all(|(log, timeline)| {
            log.records()
                .iter()
                .filter(|r| r.enforcement == Verdict::Permit)
                .all(|r| {
                    let committed = timeline
                        .iter()
                        .take_while(|(t, _)| *t <= r.timestamp_ms)
                        .last()
                        .map(|(_, root)| *root);
                    committed == Some(r.policy_merkle_root)
                })
        })
}

/// Liveness check: did every replica end on the same Merkle root?
pub fn converge_check(output: &RunOutput) -> (bool, Vec<Digest>) {
    (output.metrics.converged, output.metrics.final_roots.clone())
}

/// Audit-log completeness: per node, the engine's emitted decision count
/// must equal the log's action-level record count, and every chain must
/// verify.
pub fn audit_complete(output: &RunOutput) -> bool {
    output
        .gboms
        .iter()
        .zip(&output.metrics.gbom_decision_counts)
        .all(|(log, &count)| {
            log.decision_count() as u64 == count
                && matches!(verify_chain(log.records()), ChainReport::Valid { .. })
        })
}

#[derive(Debug)]
enum EventKind {
    Publish {
        index: usize,
    },
    Deliver {
        to: usize,
        batch: Vec<Vec<u8>>,
    },
    Gossip {
        node: usize,
    },
    Action {
        node: usize,
        kind: ActionKind,
    },
    AttestComplete {
        node: usize,
        root: Digest,
        nonce: u64,
    },
    EpochRefresh {
        node: usize,
    },
    StalenessCheck {
        node: usize,
    },
    Reset {
        index: usize,
    },
}

#[derive(Debug)]
struct Event {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

struct SimNode {
    store: PolicyStore,
    epoch: EpochHandle,
    pep: Pep,
    gbom: GbomLog,
    agent_uri: String,
    attesting: bool,
    retry_pending: bool,
    queued: VecDeque<(u64, ActionKind)>,
    /// Effective-policy length and grammars per compiled root. The
    /// enforcement point can swap internally at generated-action
    /// boundaries, so policy attribution is always resolved through the
    /// currently active root rather than cached.
    meta: BTreeMap<Digest, (u64, Vec<PolicyGrammar>)>,
    halt_started: Option<u64>,
    last_root_change: u64,
    decisions_emitted: u64,
    committed_timeline: Vec<(u64, Digest)>,
    logits: MockLogitSource,
    sampler: GreedySampler,
}

impl SimNode {
    /// Effective-policy position of the automaton currently enforcing.
    fn policy_seq(&self) -> u64 {
        self.meta
            .get(&self.pep.active_root())
            .map(|(seq, _)| *seq)
            .expect("active root was compiled by this node")
    }

    /// Grammars behind the automaton currently enforcing, for the
    /// derivation oracle.
    fn policy_grammars(&self) -> &[PolicyGrammar] {
        self.meta
            .get(&self.pep.active_root())
            .map(|(_, g)| g.as_slice())
            .expect("active root was compiled by this node")
    }
}

struct Engine<'s> {
    scenario: &'s Scenario,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: u64,
    nodes: Vec<SimNode>,
    pap_store: PolicyStore,
    pap_key: SigningKey,
    authority: AttestationAuthority,
    issuer: CredentialIssuer,
    approvers: ApproverRegistry,
    approver_key: SigningKey,
    approver_uri: String,
    metrics: RunMetrics,
    log: Vec<String>,
    nonce: u64,
    /// Publication timeline: (time, global policy sequence). Genesis is
    /// sequence 1 at time 0.
    published: Vec<(u64, u64)>,
}

/// Execute a scenario. Rejects invalid scenarios before any event runs.
pub fn run(scenario: &Scenario) -> Result<RunOutput, ScenarioError> {
    scenario.validate()?;
    let mut engine = Engine::new(scenario)?;
    engine.schedule_initial();
    while let Some(Reverse(event)) = engine.queue.pop() {
        if event.time > scenario.duration_ms {
            continue;
        }
        engine.now = event.time;
        engine.dispatch(event);
    }
    Ok(engine.finish())
}

impl<'s> Engine<'s> {
    fn new(scenario: &'s Scenario) -> Result<Engine<'s>, ScenarioError> {
        let pap_key = SigningKey::for_principal(PAP_ISSUER);
        let authority = AttestationAuthority::new(
            SigningKey::for_principal("attestation-authority"),
            Digest::of(b"ehv-enclave-measurement-v1"),
        )
        .with_latency(scenario.attest_latency_ms);
        let mut issuer = CredentialIssuer::new(SigningKey::for_principal("credential-issuer"));
        let approver_key = SigningKey::for_principal("approver-dr-chen");
        let approver_uri = "spiffe://ehv.example/approver/dr-chen".to_string();
        let mut approvers = ApproverRegistry::new();
        approvers.register(approver_uri.clone(), approver_key.verifying_key());

        let mut pap_store = PolicyStore::new("pap");
        pap_store.register_issuer(PAP_ISSUER, pap_key.verifying_key());
        let genesis = pap_store
            .author(&scenario.initial_grammar, PAP_ISSUER, &pap_key)
            .map_err(|e| ScenarioError::Invalid(format!("genesis: {e}")))?;

        let mut nodes = Vec::with_capacity(scenario.nodes);
        for i in 0..scenario.nodes {
            let agent_key = SigningKey::for_principal(&format!("twin-{i:03}"));
            let identity = WorkloadIdentity::new(
                "ehv.example",
                &format!("/agent/twin-{i:03}"),
                agent_key.verifying_key(),
            );
            let agent_uri = identity.uri();
            issuer.register(identity);

            let mut store = PolicyStore::new(format!("node{i}"));
            store.register_issuer(PAP_ISSUER, pap_key.verifying_key());
            store
                .ingest(genesis.clone())
                .map_err(|e| ScenarioError::Invalid(format!("genesis ingest: {e}")))?;

            let (dfa, grammars) = compile_store(&store, scenario)?;
            let mut epoch_state = EpochState::new(
                scenario.epoch_ttl_ms,
                authority.measurement(),
                authority.verifying_key(),
            );
            epoch_state.register_reset_authority(pap_key.verifying_key());
            // Boot attestation at t=0 commits the genesis root.
            epoch_state
                .attest(&authority.issue_quote(dfa.source_root(), i as u64), 0)
                .map_err(|e| ScenarioError::Invalid(format!("boot attest: {e}")))?;
            let epoch = EpochHandle::new(epoch_state);

            let pep = Pep::new(
                dfa.clone(),
                1,
                epoch.clone(),
                PepConfig {
                    end_of_action: crate::fixtures::TOK_END_OF_ACTION,
                    identity: agent_uri.clone(),
                    granularity: if scenario.log_tokens {
                        LogGranularity::PerToken
                    } else {
                        LogGranularity::PerAction
                    },
                },
            );
            let mut meta = BTreeMap::new();
            meta.insert(dfa.source_root(), (1u64, grammars.clone()));
            let boot_root = dfa.source_root();

            nodes.push(SimNode {
                store,
                epoch,
                pep,
                gbom: GbomLog::new(),
                agent_uri,
                attesting: false,
                retry_pending: false,
                queued: VecDeque::new(),
                meta,
                halt_started: None,
                last_root_change: 0,
                decisions_emitted: 0,
                committed_timeline: vec![(0, boot_root)],
                logits: MockLogitSource::new(
                    scenario.seed ^ (0x9e37 + i as u64),
                    scenario.vocab.size(),
                )
                .with_goal(Vec::new(), GOAL_BOOST),
                sampler: GreedySampler,
            });
        }

        let mut metrics = RunMetrics {
            n_unsafe_legacy: legacy_exposure(
                scenario.instances,
                scenario.recs_per_hour,
                scenario.legacy_gl_days,
            ),
            ..RunMetrics::default()
        };
        metrics.partition_start_ms = scenario
            .partitions
            .iter()
            .filter(|p| p.a == Endpoint::ControlPlane || p.b == Endpoint::ControlPlane)
            .map(|p| p.start_ms)
            .min();

        Ok(Engine {
            scenario,
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            nodes,
            pap_store,
            pap_key,
            authority,
            issuer,
            approvers,
            approver_key,
            approver_uri,
            metrics,
            log: Vec::new(),
            nonce: 1_000,
            published: vec![(0, 1)],
        })
    }

    fn push(&mut self, time: u64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Reverse(Event {
            time,
            seq: self.seq,
            kind,
        }));
    }

    fn note(&mut self, text: String) {
        self.log
            .push(format!("{:>9}ms #{:06} {}", self.now, self.seq, text));
    }

    fn schedule_initial(&mut self) {
        let s = self.scenario;
        let ttl = s.epoch_ttl_ms;
        let latency = s.attest_latency_ms;
        for n in 0..s.nodes {
            self.push(
                ttl.saturating_sub(latency),
                EventKind::EpochRefresh { node: n },
            );
            self.push(ttl + 1, EventKind::StalenessCheck { node: n });
            self.push(s.gossip_ms, EventKind::Gossip { node: n });
        }
        for (index, p) in s.publications.iter().enumerate() {
            self.push(p.at_ms, EventKind::Publish { index });
        }
        for (index, r) in s.resets.iter().enumerate() {
            self.push(r.at_ms, EventKind::Reset { index });
        }
        // Heal retries: the moment a control-plane partition lifts.
        let heals: Vec<(u64, usize)> = s
            .partitions
            .iter()
            .filter_map(|p| match (p.a, p.b) {
                (Endpoint::Node(n), Endpoint::ControlPlane)
                | (Endpoint::ControlPlane, Endpoint::Node(n)) => Some((p.end_ms, n)),
                _ => None,
            })
            .collect();
        for (at, node) in heals {
            self.push(at, EventKind::EpochRefresh { node });
        }
        // Seeded Poisson arrivals, round-robin across nodes.
        if s.lambda_per_hour > 0 {
            let mean_ms = 3_600_000.0 / s.lambda_per_hour as f64;
            let exp = rand_distr::Exp::new(1.0 / mean_ms).expect("positive rate");
            let mut t = 0.0f64;
            let mut i = 0u64;
            loop {
                t += self.rng.sample(exp);
                let at = t as u64;
                if at >= s.duration_ms {
                    break;
                }
                self.push(
                    at,
                    EventKind::Action {
                        node: (i % s.nodes as u64) as usize,
                        kind: s.action_for(i),
                    },
                );
                i += 1;
            }
        }
    }

    fn cut(&self, a: Endpoint, b: Endpoint, now: u64) -> bool {
        self.scenario.partitions.iter().any(|p| {
            now >= p.start_ms
                && now < p.end_ms
                && ((p.a == a && p.b == b) || (p.a == b && p.b == a))
        })
    }

    fn delay(&mut self) -> u64 {
        let (lo, hi) = self.scenario.delay_ms;
        self.rng.gen_range(lo..=hi)
    }

    fn dispatch(&mut self, event: Event) {
        match event.kind {
            EventKind::Publish { index } => self.handle_publish(index),
            EventKind::Deliver { to, batch } => self.handle_deliver(to, batch),
            EventKind::Gossip { node } => self.handle_gossip(node),
            EventKind::Action { node, kind } => self.handle_action(node, kind, self.now),
            EventKind::AttestComplete { node, root, nonce } => {
                self.handle_attest_complete(node, root, nonce)
            }
            EventKind::EpochRefresh { node } => self.handle_refresh(node),
            EventKind::StalenessCheck { node } => self.handle_staleness(node),
            EventKind::Reset { index } => self.handle_reset(index),
        }
    }

    fn handle_publish(&mut self, index: usize) {
        let source = self.scenario.publications[index].grammar_source.clone();
        let mutation = match self.pap_store.author(&source, PAP_ISSUER, &self.pap_key) {
            Ok(m) => m,
            Err(e) => {
                self.note(format!("publish[{index}] rejected: {e}"));
                return;
            }
        };
        let global_seq = self
            .pap_store
            .effective_policy()
            .map(|o| o.len() as u64)
            .unwrap_or(0);
        self.published.push((self.now, global_seq));
        self.note(format!(
            "pap publish[{index}] mutation {} (policy seq {global_seq})",
            &mutation.id.to_hex()[..12]
        ));
        let wire = mutation.to_wire();
        for n in 0..self.nodes.len() {
            if self.cut(Endpoint::Node(n), Endpoint::ControlPlane, self.now) {
                self.note(format!("publish[{index}] to node{n} dropped (partitioned)"));
                continue;
            }
            let delay = self.delay();
            self.push(
                self.now + delay,
                EventKind::Deliver {
                    to: n,
                    batch: vec![wire.clone()],
                },
            );
        }
    }

    fn handle_deliver(&mut self, to: usize, batch: Vec<Vec<u8>>) {
        let before = self.nodes[to].store.merkle_root();
        let mut applied = 0usize;
        for wire in batch {
            let Some(mutation) = PolicyMutation::from_wire(&wire) else {
                self.note(format!("node{to} received undecodable mutation"));
                continue;
            };
            match self.nodes[to].store.ingest(mutation) {
                Ok(crate::policy::Ingest::Applied) => applied += 1,
                Ok(_) => {}
                Err(e) => self.note(format!("node{to} rejected mutation: {e}")),
            }
        }
        let after = self.nodes[to].store.merkle_root();
        if after != before {
            self.nodes[to].last_root_change = self.now;
            self.note(format!(
                "node{to} store advanced to {} ({applied} applied)",
                &after.to_hex()[..12]
            ));
            self.restage(to);
        }
    }

    fn restage(&mut self, n: usize) {
        let (dfa, grammars) = match compile_store(&self.nodes[n].store, self.scenario) {
            Ok(v) => v,
            Err(e) => {
                self.note(format!("node{n} recompile failed: {e}"));
                return;
            }
        };
        let seq = self.nodes[n]
            .store
            .effective_policy()
            .map(|o| o.len() as u64)
            .unwrap_or(0);
        self.nodes[n]
            .meta
            .insert(dfa.source_root(), (seq, grammars));
        match self.nodes[n].pep.stage_dfa(dfa, seq) {
            Ok(()) => self.note(format!("node{n} staged policy seq {seq}")),
            Err(e) => self.note(format!("node{n} staging skipped: {e}")),
        }
    }

    fn handle_gossip(&mut self, node: usize) {
        let next = self.now + self.scenario.gossip_ms;
        if next <= self.scenario.duration_ms {
            self.push(next, EventKind::Gossip { node });
        }
        for peer in 0..self.nodes.len() {
            if peer == node || self.cut(Endpoint::Node(node), Endpoint::Node(peer), self.now) {
                continue;
            }
            if self.nodes[node].store.merkle_root() == self.nodes[peer].store.merkle_root() {
                continue;
            }
            let batch: Vec<Vec<u8>> = self.nodes[node]
                .store
                .mutations()
                .map(PolicyMutation::to_wire)
                .collect();
            if batch.is_empty() {
                continue;
            }
            let delay = self.delay();
            self.note(format!(
                "node{node} sync -> node{peer} ({} mutations)",
                batch.len()
            ));
            self.push(self.now + delay, EventKind::Deliver { to: peer, batch });
        }
    }

    /// Swap any staged automaton at this boundary and update the node's
    /// policy attribution.
    fn node_swap(&mut self, n: usize) {
        if self.nodes[n].pep.try_swap() {
            let root = self.nodes[n].pep.active_root();
            let seq = self.nodes[n].policy_seq();
            self.note(format!(
                "node{n} swapped active policy to {} (seq {seq})",
                &root.to_hex()[..12]
            ));
        }
    }

    fn handle_action(&mut self, n: usize, kind: ActionKind, request_time: u64) {
        self.node_swap(n);
        let now = self.now;
        let halted = self.nodes[n].epoch.write(|e| e.observe(now));
        if halted {
            self.execute_action(n, kind, request_time);
            return;
        }
        if self.nodes[n].attesting {
            self.nodes[n].queued.push_back((request_time, kind));
            return;
        }
        let committed = self.nodes[n].epoch.read(|e| e.committed_root());
        if committed != self.nodes[n].pep.active_root() {
            // The active policy is ahead of the attested root: block new
            // actions until re-attestation lands.
            self.nodes[n].queued.push_back((request_time, kind));
            self.start_attest(n);
            return;
        }
        self.execute_action(n, kind, request_time);
    }

    fn execute_action(&mut self, n: usize, kind: ActionKind, request_time: u64) {
        let now = self.now;
        let candidate = kind.tokens();

        // Per-action credential, bound to this epoch and measurement.
        let halted = self.nodes[n].epoch.read(|e| e.is_halted(now));
        if !halted {
            let node = &self.nodes[n];
            let cred = node
                .epoch
                .read(|e| self.issuer.issue(&node.agent_uri, kind.class(), e, now));
            let cred_ok = match cred {
                Ok(c) => self.nodes[n]
                    .epoch
                    .read(|e| {
                        validate_credential(&c, kind.class(), &self.issuer.verifying_key(), e, now)
                    })
                    .is_ok(),
                Err(_) => false,
            };
            if !cred_ok {
                let node = &mut self.nodes[n];
                let (epoch_id, measurement) =
                    node.epoch.read(|e| (e.epoch_label(), e.measurement()));
                node.gbom.append(RecordDraft {
                    timestamp_ms: now,
                    event: RecordEvent::Action,
                    policy_merkle_root: node.pep.active_root(),
                    tee_measurement: measurement,
                    epoch_id,
                    dfa_state: "q0".into(),
                    enforcement: Verdict::Deny,
                    identity: node.agent_uri.clone(),
                });
                node.decisions_emitted += 1;
                self.metrics.total_actions += 1;
                self.metrics.denies += 1;
                self.metrics.gl_samples_ms.push(now - request_time);
                self.note(format!("node{n} {} DENY (credential)", kind.name()));
                return;
            }
        }

        if self.scenario.generate && !halted {
            self.run_generation(n, &candidate);
        }

        let node = &mut self.nodes[n];
        let decision = node.pep.decide(&candidate, now, &mut node.gbom);
        node.decisions_emitted += 1;
        self.metrics.total_actions += 1;
        self.metrics.gl_samples_ms.push(now - request_time);
        match decision.verdict {
            Verdict::Permit => self.metrics.permits += 1,
            Verdict::Deny => self.metrics.denies += 1,
            Verdict::Escalate => self.metrics.escalates += 1,
        }

        // Staleness attribution: a decision under a policy root that lacks
        // an already-published mutation.
        let active_seq = self.nodes[n].policy_seq();
        let published_now = self.published_seq_at(now);
        if active_seq < published_now {
            self.metrics.n_stale += 1;
            let first_missing = active_seq + 1;
            if let Some(&(t_pub, _)) = self.published.iter().find(|(_, s)| *s == first_missing) {
                self.metrics.staleness_samples_ms.push(now - t_pub);
            }
        }

        if decision.verdict == Verdict::Permit {
            if self.nodes[n].halt_started.is_some() {
                self.metrics.permits_while_halted += 1;
            }
            // Independent validity oracle: derivation from the productions
            // of the active policy, no DFA involved.
            let derivable = self.nodes[n]
                .policy_grammars()
                .iter()
                .all(|g| g.derives(&candidate));
            if !derivable {
                self.metrics.ig_violations += 1;
                self.note(format!(
                    "node{n} INVARIANT VIOLATION: permit for non-derivable {}",
                    kind.name()
                ));
            }
        }

        self.note(format!(
            "node{n} {} {} (reason {:?})",
            kind.name(),
            decision.verdict.as_str(),
            decision.reason
        ));

        // Escalations route to the human approver, who answers with a
        // signed override envelope.
        if decision.verdict == Verdict::Escalate {
            let target = self.nodes[n]
                .gbom
                .records()
                .last()
                .expect("decision just logged")
                .record_uuid
                .clone();
            let envelope = OverrideEnvelope::sign(
                &target,
                &self.approver_uri,
                OverrideDecision::Approve,
                &self.approver_key,
            );
            let node = &mut self.nodes[n];
            match node.gbom.record_override(&envelope, &self.approvers, now) {
                Ok(_) => {
                    node.decisions_emitted += 1;
                    self.note(format!("node{n} override approved for {}", &target[..8]));
                }
                Err(e) => self.note(format!("node{n} override rejected: {e}")),
            }
        }
    }

    /// One masked generation pass steered toward the candidate action.
    fn run_generation(&mut self, n: usize, candidate: &[TokenId]) {
        let now = self.now;
        let node = &mut self.nodes[n];
        node.logits.reset_goal(candidate.to_vec());
        for _ in 0..GENERATION_STEP_CAP {
            let raw = node.logits.next_logits();
            match node.pep.step(&raw, &mut node.sampler, now, &mut node.gbom) {
                StepOutcome::Sampled { at_boundary, .. } => {
                    if at_boundary {
                        break;
                    }
                }
                StepOutcome::Refused(_) => break,
            }
        }
        if !node.pep.at_boundary() {
            node.pep.abort_action();
        }
    }

    fn published_seq_at(&self, now: u64) -> u64 {
        self.published
            .iter()
            .filter(|(t, _)| *t <= now)
            .map(|(_, s)| *s)
            .max()
            .unwrap_or(1)
    }

    fn start_attest(&mut self, n: usize) {
        if self.nodes[n].attesting {
            return;
        }
        if self.cut(Endpoint::Node(n), Endpoint::ControlPlane, self.now) {
            if !self.nodes[n].retry_pending {
                self.nodes[n].retry_pending = true;
                self.push(self.now + RETRY_MS, EventKind::EpochRefresh { node: n });
            }
            return;
        }
        self.nodes[n].attesting = true;
        let root = self.nodes[n].store.merkle_root();
        self.nonce += 1;
        let nonce = self.nonce;
        self.note(format!(
            "node{n} attestation started for {}",
            &root.to_hex()[..12]
        ));
        self.push(
            self.now + self.scenario.attest_latency_ms,
            EventKind::AttestComplete {
                node: n,
                root,
                nonce,
            },
        );
    }

    fn handle_attest_complete(&mut self, n: usize, root: Digest, nonce: u64) {
        self.nodes[n].attesting = false;
        if self.cut(Endpoint::Node(n), Endpoint::ControlPlane, self.now) {
            self.note(format!("node{n} attestation lost to partition"));
            if !self.nodes[n].retry_pending {
                self.nodes[n].retry_pending = true;
                self.push(self.now + RETRY_MS, EventKind::EpochRefresh { node: n });
            }
            return;
        }
        let quote = self.authority.issue_quote(root, nonce);
        let now = self.now;
        match self.nodes[n].epoch.write(|e| e.attest(&quote, now)) {
            Ok(()) => {
                self.metrics.attestations += 1;
                self.nodes[n].committed_timeline.push((now, root));
                let label = self.nodes[n].epoch.read(|e| e.epoch_label());
                self.note(format!(
                    "node{n} attested {} as epoch {label}",
                    &root.to_hex()[..12]
                ));
                self.nodes[n].halt_started = None;
                let ttl = self.scenario.epoch_ttl_ms;
                let latency = self.scenario.attest_latency_ms;
                self.push(
                    self.now + ttl.saturating_sub(latency),
                    EventKind::EpochRefresh { node: n },
                );
                self.push(self.now + ttl + 1, EventKind::StalenessCheck { node: n });
                // Decide everything that waited out the attestation window.
                let queued: Vec<(u64, ActionKind)> = self.nodes[n].queued.drain(..).collect();
                for (req_t, kind) in queued {
                    self.handle_action(n, kind, req_t);
                }
            }
            Err(e) => self.note(format!("node{n} attestation rejected: {e}")),
        }
    }

    fn handle_refresh(&mut self, n: usize) {
        self.nodes[n].retry_pending = false;
        self.start_attest(n);
    }

    fn handle_staleness(&mut self, n: usize) {
        let now = self.now;
        let expired = self.nodes[n]
            .epoch
            .write(|e| now > e.epoch_end() && e.observe(now));
        if !expired {
            return;
        }
        if self.nodes[n].halt_started.is_none() {
            self.nodes[n].halt_started = Some(now);
            if self.metrics.halted_at_ms.is_none() {
                self.metrics.halted_at_ms = Some(now);
                if let Some(ps) = self.metrics.partition_start_ms {
                    self.metrics.fail_closed_transition_ms = Some(now.saturating_sub(ps));
                }
            }
            self.note(format!("node{n} FAIL-CLOSED HALT (epoch ttl lapsed)"));
            // Everything queued is denied under the halt.
            let queued: Vec<(u64, ActionKind)> = self.nodes[n].queued.drain(..).collect();
            for (req_t, kind) in queued {
                self.execute_action(n, kind, req_t);
            }
        }
        // Keep trying to recover; the retry no-ops until the heal.
        self.start_attest(n);
    }

    fn handle_reset(&mut self, index: usize) {
        let req = self.scenario.resets[index].clone();
        self.nonce += 1;
        let signal = if req.authorized {
            ResetSignal::sign(PAP_ISSUER, self.nonce, &self.pap_key)
        } else {
            ResetSignal::unsigned(PAP_ISSUER, self.nonce)
        };
        let now = self.now;
        let outcome = self.nodes[req.node]
            .epoch
            .write(|e| e.emergency_reset(&signal, now));
        match outcome {
            Ok(()) => {
                self.metrics.accepted_resets_ms.push(now);
                self.note(format!("node{} emergency reset accepted", req.node));
                self.start_attest(req.node);
            }
            Err(reason) => {
                self.metrics.rejected_resets += 1;
                let node = &mut self.nodes[req.node];
                let (epoch_id, measurement) =
                    node.epoch.read(|e| (e.epoch_label(), e.measurement()));
                node.gbom.append(RecordDraft {
                    timestamp_ms: now,
                    event: RecordEvent::Security,
                    policy_merkle_root: node.pep.active_root(),
                    tee_measurement: measurement,
                    epoch_id,
                    dfa_state: "q0".into(),
                    enforcement: Verdict::Deny,
                    identity: format!("spiffe://ehv.example/pap/{PAP_ISSUER}"),
                });
                node.decisions_emitted += 1;
                self.note(format!(
                    "node{} emergency reset REJECTED ({reason:?})",
                    req.node
                ));
            }
        }
    }

    fn finish(mut self) -> RunOutput {
        self.metrics.final_roots = self.nodes.iter().map(|n| n.store.merkle_root()).collect();
        let all_equal = self.metrics.final_roots.windows(2).all(|w| w[0] == w[1]);
        self.metrics.converged = all_equal;
        if all_equal {
            self.metrics.convergence_ms = self.nodes.iter().map(|n| n.last_root_change).max();
        }
        self.metrics.gbom_decision_counts =
            self.nodes.iter().map(|n| n.decisions_emitted).collect();
        let gboms: Vec<GbomLog> = self.nodes.iter().map(|n| n.gbom.clone()).collect();
        let committed_timelines: Vec<Vec<(u64, Digest)>> = self
            .nodes
            .iter()
            .map(|n| n.committed_timeline.clone())
            .collect();
        // Completeness cross-check: emitted counts vs log contents.
        for (node, log) in self.nodes.iter().zip(&gboms) {
            debug_assert_eq!(node.decisions_emitted, log.decision_count() as u64);
        }
        let mut event_log = self.log.join("\n");
        event_log.push('\n');
        RunOutput {
            metrics: self.metrics,
            event_log,
            gboms,
            committed_timelines,
        }
    }
}

/// Compile the store's effective grammars against the scenario vocabulary,
/// stamped with the store's Merkle root; multiple grammars intersect into
/// one product automaton.
fn compile_store(
    store: &PolicyStore,
    scenario: &Scenario,
) -> Result<(Arc<Dfa>, Vec<PolicyGrammar>), ScenarioError> {
    let grammars: Vec<PolicyGrammar> = store
        .effective_grammars()
        .map_err(|e| ScenarioError::Invalid(format!("policy state: {e}")))?
        .into_iter()
        .map(|(_, g)| g)
        .collect();
    if grammars.is_empty() {
        return Err(ScenarioError::Invalid("no effective policy".into()));
    }
    let options = CompileOptions {
        source_root: Some(store.merkle_root()),
        ..CompileOptions::default()
    };
    let dfas: Vec<Dfa> = grammars
        .iter()
        .map(|g| compile_with(g, &scenario.vocab, &options))
        .collect::<Result<_, _>>()
        .map_err(|e| ScenarioError::Invalid(format!("compile: {e}")))?;
    let dfa = if dfas.len() == 1 {
        dfas.into_iter().next().expect("one")
    } else {
        match intersect(&dfas, crate::dfa::DEFAULT_STATE_BUDGET)
            .map_err(|e| ScenarioError::Invalid(format!("intersect: {e}")))?
        {
            Intersection::Product(d) => d,
            Intersection::Plan(_) => {
                return Err(ScenarioError::Invalid(
                    "policy product exceeds the state budget; decompose the policy".into(),
                ))
            }
        }
    };
    Ok((Arc::new(dfa), grammars))
}
