//! Acceptance gate: the release criteria for the whole engine, one test
//! per criterion, each printing a pass line (run with `--nocapture` to see
//! them). Every tolerance is pinned here, in code.

use std::collections::HashSet;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ehv_cli::bench_mask;
use ehv_core::clock::clock;
use ehv_core::crypto::SigningKey;
use ehv_core::dfa::{compile, intersect, CompileOptions, Intersection};
use ehv_core::epoch::{AttestationAuthority, EpochHandle, EpochState};
use ehv_core::fixtures;
use ehv_core::gbom::{export_oscal, verify_chain, ChainReport, GbomLog, RecordDraft, RecordEvent};
use ehv_core::grammar::{parse_grammar, PolicyGrammar};
use ehv_core::logits::{softmax, Logits, SeededSoftmaxSampler};
use ehv_core::pep::{LogGranularity, Pep, PepConfig, StepOutcome, Verdict};
use ehv_core::policy::PolicyStore;
use ehv_core::sim::explore::UncheckedPermitBackend;
use ehv_core::sim::scenario::ResetRequest;
use ehv_core::sim::{
    audit_complete, converge_check, esw_bound, explore, explore_with_backend, flagged_at_rate,
    legacy_exposure, run, ModelConfig, Scenario, Workload,
};
use ehv_core::vocab::{TokenId, Vocabulary};
use ehv_core::Digest;

fn pass(name: &str, detail: String) {
    println!("acceptance: {name}: PASS ({detail})");
}

#[test]
fn criterion_01_legacy_exposure_arithmetic() {
    let exposure = legacy_exposure(5_000, 100, 14);
    assert_eq!(exposure, 168_000_000);
    let flagged = flagged_at_rate(exposure, 3, 10_000);
    assert_eq!(flagged, 50_400);
    pass(
        "legacy exposure arithmetic",
        format!("exposure={exposure}, flagged at 0.03%={flagged}"),
    );
}

#[test]
fn criterion_02_esw_bound_and_w4_staleness() {
    let bound = esw_bound(500_000, 60);
    assert_eq!(bound, 8_194);

    let mut scenario = Scenario::workload_default(Workload::W4, 14);
    scenario.lambda_per_hour = 500_000;
    assert_eq!(scenario.epoch_ttl_ms, 60_000);
    let out = run(&scenario).unwrap();
    assert!(
        out.metrics.total_actions > 1_000,
        "workload too small to be meaningful"
    );
    assert!(
        out.metrics.n_stale <= bound,
        "measured N_stale {} exceeds bound {bound}",
        out.metrics.n_stale
    );
    pass(
        "ESW bound",
        format!(
            "bound={bound}, measured N_stale={} over {} actions",
            out.metrics.n_stale, out.metrics.total_actions
        ),
    );
}

#[test]
fn criterion_03_safety_invariant_exploration() {
    let config = ModelConfig::small_scope();
    assert_eq!(config.max_policy_version, 5);
    assert_eq!(config.actions.len(), 3);
    let report = explore(&config).unwrap();
    assert!(report.complete, "exploration must finish within budget");
    assert_eq!(
        report.violations.len(),
        0,
        "violations: {:?}",
        report.violations
    );
    assert_eq!(report.deadlocks, 0);

    // Detector sensitivity: with the grammar walk disabled, the explorer
    // must find at least one violating state.
    let broken = explore_with_backend(&config, &UncheckedPermitBackend).unwrap();
    assert!(
        !broken.violations.is_empty(),
        "mutation test failed: explorer blind to a disabled mask"
    );
    pass(
        "safety invariant exploration",
        format!(
            "{} generated / {} distinct / depth {}, 0 violations, 0 deadlocks; \
             mutation test flagged {}",
            report.states_generated,
            report.distinct_states,
            report.max_depth,
            broken.violations.len()
        ),
    );
}

#[test]
fn criterion_04_mask_soundness_ten_thousand_steps() {
    let vocab = fixtures::CLINICAL_VOCAB_SIZE as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce97);
    let mut sampler = SeededSoftmaxSampler::new(0x5a);
    let mut log = GbomLog::new();
    let mut steps = 0u64;

    'outer: for version in [1u64, 2, 3, 4, 5].iter().cycle() {
        let g = parse_grammar(&fixtures::dosage_grammar_source(*version)).unwrap();
        let dfa = Arc::new(compile(&g, &fixtures::clinical_vocab()).unwrap());
        let authority = AttestationAuthority::new(
            SigningKey::for_principal("authority"),
            Digest::of(b"enclave-v1"),
        );
        let mut state = EpochState::new(
            u64::MAX / 2,
            authority.measurement(),
            authority.verifying_key(),
        );
        state
            .attest(&authority.issue_quote(dfa.source_root(), 1), 0)
            .unwrap();
        let mut pep = Pep::new(
            dfa.clone(),
            1,
            EpochHandle::new(state),
            PepConfig {
                end_of_action: fixtures::TOK_END_OF_ACTION,
                identity: "spiffe://ehv.example/agent/twin-001".into(),
                granularity: LogGranularity::PerAction,
            },
        );
        for _ in 0..400 {
            let state_before = pep.state();
            let boundary_before = pep.at_boundary();
            let raw = Logits::new((0..vocab).map(|_| rng.gen_range(-9.0..9.0)).collect());
            match pep.step(&raw, &mut sampler, steps, &mut log) {
                StepOutcome::Sampled { token, masked, .. } => {
                    let mask_state = if boundary_before {
                        dfa.start()
                    } else {
                        state_before
                    };
                    assert!(
                        dfa.allowed(mask_state).unwrap().contains(token),
                        "sampled token {token} outside the allowed set"
                    );
                    let probs = softmax(&masked);
                    for (k, &p) in probs.iter().enumerate() {
                        if masked.scores[k] == f32::NEG_INFINITY {
                            assert_eq!(p, 0.0, "masked token {k} carries probability mass");
                        }
                    }
                    steps += 1;
                    if steps == 10_000 {
                        break 'outer;
                    }
                }
                StepOutcome::Refused(d) => panic!("step refused: {d:?}"),
            }
        }
    }
    assert_eq!(steps, 10_000);
    pass(
        "mask soundness",
        "10000 seeded steps in-mask, masked softmax mass exactly 0".into(),
    );
}

mod oracle {
    use super::*;

    /// Brute-force language enumeration straight from productions;
    /// independent of the compilation pipeline under test.
    pub fn language(grammar: &PolicyGrammar, max_len: usize) -> HashSet<Vec<TokenId>> {
        let mut out = HashSet::new();
        let Some(start) = grammar.start_symbol() else {
            out.insert(Vec::new());
            return out;
        };
        let mut visited = HashSet::new();
        let mut stack = vec![(Vec::<TokenId>::new(), start.to_string())];
        while let Some((prefix, nt)) = stack.pop() {
            if !visited.insert((prefix.clone(), nt.clone())) {
                continue;
            }
            for rule in grammar.rules.iter().filter(|r| r.lhs == nt) {
                let mut ext = prefix.clone();
                for lexeme in &rule.terminals {
                    ext.push(grammar.terminal_map[lexeme]);
                }
                if ext.len() > max_len {
                    continue;
                }
                match &rule.next {
                    Some(next) => stack.push((ext, next.clone())),
                    None => {
                        out.insert(ext);
                    }
                }
            }
        }
        out
    }

    pub fn all_strings(vocab: u32, max_len: usize) -> Vec<Vec<TokenId>> {
        let mut out = vec![Vec::new()];
        let mut layer: Vec<Vec<TokenId>> = vec![Vec::new()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &layer {
                for t in 0..vocab {
                    let mut e = s.clone();
                    e.push(t);
                    next.push(e);
                }
            }
            out.extend(next.iter().cloned());
            layer = next;
        }
        out
    }

    pub fn random_grammar(rng: &mut ChaCha8Rng, vocab: u32) -> PolicyGrammar {
        let nts = rng.gen_range(2..=4usize);
        let mut src = String::from("grammar random 1\n");
        for t in 0..vocab {
            src.push_str(&format!("token \"t{t}\" = {t}\n"));
        }
        for nt in 0..nts {
            for _ in 0..rng.gen_range(1..=3usize) {
                let mut rhs = String::new();
                for _ in 0..rng.gen_range(0..=2usize) {
                    rhs.push_str(&format!(" \"t{}\"", rng.gen_range(0..vocab)));
                }
                if rng.gen_bool(0.5) {
                    rhs.push_str(&format!(" N{}", rng.gen_range(0..nts)));
                }
                src.push_str(&format!("rule N{nt} ->{rhs}\n"));
            }
        }
        parse_grammar(&src).expect("well-formed by construction")
    }
}

#[test]
fn criterion_05_grammar_dfa_oracle_equivalence() {
    const MAX_LEN: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(0x07ac1e);
    let mut grammars_checked = 0;
    let mut products_checked = 0;
    let mut previous: Option<(PolicyGrammar, u32)> = None;

    while grammars_checked < 20 {
        let vocab_size = rng.gen_range(3..=5u32);
        let grammar = oracle::random_grammar(&mut rng, vocab_size);
        let vocab = Vocabulary::anonymous(vocab_size);
        let dfa = compile(&grammar, &vocab).unwrap();
        let language = oracle::language(&grammar, MAX_LEN);
        for w in oracle::all_strings(vocab_size, MAX_LEN) {
            assert_eq!(
                dfa.accepts(&w),
                language.contains(&w),
                "DFA/derivation mismatch on {w:?}"
            );
        }
        grammars_checked += 1;

        if let Some((prev, prev_vocab)) = previous.take() {
            if prev_vocab == vocab_size {
                let da = compile(&prev, &vocab).unwrap();
                let product = match intersect(&[da.clone(), dfa.clone()], 10_000).unwrap() {
                    Intersection::Product(p) => p,
                    Intersection::Plan(_) => panic!("tiny product hit the budget"),
                };
                for w in oracle::all_strings(vocab_size, MAX_LEN) {
                    assert_eq!(
                        product.accepts(&w),
                        da.accepts(&w) && dfa.accepts(&w),
                        "product mismatch on {w:?}"
                    );
                }
                products_checked += 1;
            }
        }
        previous = Some((grammar, vocab_size));
    }
    assert!(products_checked >= 5, "too few product pairs exercised");
    pass(
        "grammar/DFA oracle equivalence",
        format!("{grammars_checked} grammars, {products_checked} products, strings <= {MAX_LEN}"),
    );
}

#[test]
fn criterion_06_crdt_convergence_and_semilattice() {
    // Fixed-point check from the clock-merge figure.
    let v1 = clock(&[("a", 1), ("b", 1)]);
    let v2 = clock(&[("a", 1), ("c", 1)]);
    assert_eq!(v1.merge(&v2), clock(&[("a", 1), ("b", 1), ("c", 1)]));

    // Four mutations, two concurrent chains, every delivery order.
    let key_a = SigningKey::for_principal("pap-a");
    let key_b = SigningKey::for_principal("pap-b");
    let mut a = PolicyStore::new("a");
    a.register_issuer("pap-a", key_a.verifying_key());
    let mut b = PolicyStore::new("b");
    b.register_issuer("pap-b", key_b.verifying_key());
    let mutations = vec![
        a.author("grammar alpha 1\n", "pap-a", &key_a).unwrap(),
        a.author("grammar alpha 2\n", "pap-a", &key_a).unwrap(),
        b.author("grammar beta 1\n", "pap-b", &key_b).unwrap(),
        b.author("grammar beta 2\n", "pap-b", &key_b).unwrap(),
    ];
    fn permute<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let head = rest.remove(i);
            for mut tail in permute(&rest) {
                tail.insert(0, head.clone());
                out.push(tail);
            }
        }
        out
    }
    let mut roots = Vec::new();
    for perm in permute(&mutations) {
        let mut replica = PolicyStore::new("r");
        replica.register_issuer("pap-a", key_a.verifying_key());
        replica.register_issuer("pap-b", key_b.verifying_key());
        for m in &perm {
            replica.ingest(m.clone()).unwrap();
        }
        // Idempotence: second delivery of everything changes nothing.
        let first = replica.merkle_root();
        for m in &perm {
            replica.ingest(m.clone()).unwrap();
        }
        assert_eq!(replica.merkle_root(), first);
        roots.push(first);
    }
    assert_eq!(roots.len(), 24);
    assert!(
        roots.windows(2).all(|w| w[0] == w[1]),
        "roots diverged across orders"
    );

    // And end-to-end in the simulator: all replicas converge.
    let out = run(&Scenario::workload_default(Workload::W4, 6)).unwrap();
    let (converged, sim_roots) = converge_check(&out);
    assert!(converged, "simulated replicas diverged: {sim_roots:?}");
    pass(
        "CRDT convergence and semilattice laws",
        format!(
            "24/24 delivery orders on one root, {} sim replicas equal",
            sim_roots.len()
        ),
    );
}

#[test]
fn criterion_07_fail_closed_partition() {
    let scenario = Scenario::workload_default(Workload::W5, 15);
    // Fixture shape: ttl 60 s, control-plane partition of 90 s.
    assert_eq!(scenario.epoch_ttl_ms, 60_000);
    let p = &scenario.partitions[0];
    assert_eq!(p.end_ms - p.start_ms, 90_000);

    let out = run(&scenario).unwrap();
    // Last attest lands at 60,000; the staleness instant is 120,001 and the
    // halt must be latched by the very next scheduled observation event.
    assert_eq!(out.metrics.halted_at_ms, Some(120_001));
    assert_eq!(out.metrics.permits_while_halted, 0);
    // Recovery requires a successful attestation after the heal, and
    // permits resume only after it.
    let log = &out.event_log;
    let halt_pos = log.find("FAIL-CLOSED HALT").expect("halt logged");
    let attest_pos = log[halt_pos..]
        .find(" attested ")
        .expect("recovery attestation follows the halt");
    assert!(attest_pos > 0);
    assert!(out.metrics.permits > 0, "fleet recovered after heal");
    pass(
        "fail-closed partition",
        format!(
            "halt at 120001 ms (one event past staleness), transition {} ms, 0 permits while halted",
            out.metrics.fail_closed_transition_ms.unwrap()
        ),
    );
}

#[test]
fn criterion_08_double_buffered_swap() {
    let g1 = parse_grammar(&fixtures::dosage_grammar_source(1)).unwrap();
    let g2 = parse_grammar(&fixtures::dosage_grammar_source(2)).unwrap();
    let vocab = fixtures::clinical_vocab();
    let v1 = Arc::new(compile(&g1, &vocab).unwrap());
    let v2 = Arc::new(compile(&g2, &vocab).unwrap());

    let mut runs = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9));
        let authority = AttestationAuthority::new(
            SigningKey::for_principal("authority"),
            Digest::of(b"enclave-v1"),
        );
        let mut st = EpochState::new(
            u64::MAX / 2,
            authority.measurement(),
            authority.verifying_key(),
        );
        st.attest(&authority.issue_quote(v1.source_root(), 1), 0)
            .unwrap();
        let epoch = EpochHandle::new(st);
        let mut pep = Pep::new(
            v1.clone(),
            1,
            epoch.clone(),
            PepConfig {
                end_of_action: fixtures::TOK_END_OF_ACTION,
                identity: "spiffe://ehv.example/agent/twin-001".into(),
                granularity: LogGranularity::PerAction,
            },
        );
        let mut sampler = SeededSoftmaxSampler::new(seed);
        let mut log = GbomLog::new();
        let stage_at = rng.gen_range(0..25usize);
        let mut nonce = 100;
        let mut changes = Vec::new();

        for i in 0..70usize {
            if i == stage_at {
                pep.stage_dfa(v2.clone(), 2).unwrap();
            }
            let boundary_before = pep.at_boundary();
            let root_before = pep.active_root();
            let raw = Logits::new(
                (0..vocab.size())
                    .map(|_| rng.gen_range(-4.0..4.0))
                    .collect(),
            );
            let mut outcome = pep.step(&raw, &mut sampler, i as u64, &mut log);
            if matches!(outcome, StepOutcome::Refused(_)) {
                // Boundary swap outran the attestation cache: re-attest the
                // new root and retry, as the runtime does.
                nonce += 1;
                let root = pep.active_root();
                epoch.write(|e| {
                    e.attest(&authority.issue_quote(root, nonce), i as u64)
                        .unwrap()
                });
                outcome = pep.step(&raw, &mut sampler, i as u64, &mut log);
            }
            assert!(matches!(outcome, StepOutcome::Sampled { .. }));
            let root_after = pep.active_root();
            if root_before != root_after {
                changes.push((i, boundary_before, pep.at_boundary()));
            }
            // No step ever observes a half-staged automaton.
            assert!(
                (root_after == v1.source_root() && pep.active_seq() == 1)
                    || (root_after == v2.source_root() && pep.active_seq() == 2),
                "partially staged automaton observed"
            );
        }
        assert_eq!(changes.len(), 1, "seed {seed}: expected exactly one swap");
        let (swap_step, boundary_before, boundary_after) = changes[0];
        assert!(swap_step >= stage_at);
        assert!(
            boundary_before || boundary_after,
            "seed {seed}: swap mid-action at step {swap_step}"
        );
        assert_eq!(pep.stats().swaps, 1);
        runs += 1;
    }
    pass(
        "double-buffered swap",
        format!("{runs} randomized staging runs, swaps only at aligned boundaries"),
    );
}

#[test]
fn criterion_09_emergency_reset_rate_limit() {
    let mut scenario = Scenario::workload_default(Workload::W1, 31);
    scenario.duration_ms = 60_000;
    scenario.resets = vec![
        ResetRequest {
            at_ms: 2_000,
            node: 0,
            authorized: true,
        },
        ResetRequest {
            at_ms: 9_000,
            node: 0,
            authorized: true,
        }, // inside ttl/2
        ResetRequest {
            at_ms: 20_000,
            node: 0,
            authorized: false,
        }, // unsigned
        ResetRequest {
            at_ms: 33_000,
            node: 0,
            authorized: true,
        }, // 31 s later
        ResetRequest {
            at_ms: 40_000,
            node: 0,
            authorized: false,
        }, // unsigned
    ];
    let out = run(&scenario).unwrap();
    assert_eq!(out.metrics.accepted_resets_ms, vec![2_000, 33_000]);
    assert_eq!(out.metrics.rejected_resets, 3);
    let half_ttl = scenario.epoch_ttl_ms / 2;
    for w in out.metrics.accepted_resets_ms.windows(2) {
        assert!(
            w[1] - w[0] >= half_ttl,
            "two accepted resets {w:?} inside one ttl/2 window"
        );
    }
    // Unauthenticated resets never land in the accepted list and are
    // security-logged.
    let security_records = out.gboms[0]
        .records()
        .iter()
        .filter(|r| r.event == RecordEvent::Security)
        .count();
    assert_eq!(security_records, 3);
    pass(
        "emergency reset rate limit",
        format!(
            "accepted at {:?}, {} rejections security-logged",
            out.metrics.accepted_resets_ms, security_records
        ),
    );
}

#[test]
fn criterion_10_gbom_integrity() {
    // Field names bit-exact against the published record shape.
    let mut log = GbomLog::new();
    log.append(RecordDraft {
        timestamp_ms: 1,
        event: RecordEvent::Action,
        policy_merkle_root: Digest::of(b"root"),
        tee_measurement: Digest::of(b"mr"),
        epoch_id: "E-042".into(),
        dfa_state: "q17".into(),
        enforcement: Verdict::Permit,
        identity: "spiffe://ehv.example/agent/twin-001".into(),
    });
    let doc = export_oscal(&log);
    assert_eq!(
        doc["$schema"],
        "https://pages.nist.gov/OSCAL/schemas/json/1.1.2/oscal_assessment-results_schema.json"
    );
    let ar = &doc["assessment-results"];
    assert_eq!(ar["metadata"]["oscal-version"], "1.1.2");
    let result = &ar["results"][0];
    let names: Vec<&str> = result["observations"][0]["props"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "policy_merkle_root",
            "tee_measurement",
            "epoch_id",
            "dfa_state",
            "enforcement",
            "spiffe_svid"
        ]
    );
    assert_eq!(result["findings"][0]["target"]["target-id"], "ehv-si-17");
    assert_eq!(
        result["reviewed-controls"]["control-selections"][0]["include-controls"][0]["control-id"],
        "si-17"
    );

    // 100-record chain: every single-byte field tamper and a reordering are
    // caught at the right index.
    let mut log = GbomLog::new();
    for i in 0..100u64 {
        log.append(RecordDraft {
            timestamp_ms: i,
            event: RecordEvent::Action,
            policy_merkle_root: Digest::of(b"root"),
            tee_measurement: Digest::of(b"mr"),
            epoch_id: "E-001".into(),
            dfa_state: format!("q{i}"),
            enforcement: if i % 4 == 0 {
                Verdict::Deny
            } else {
                Verdict::Permit
            },
            identity: "spiffe://ehv.example/agent/twin-001".into(),
        });
    }
    assert_eq!(
        verify_chain(log.records()),
        ChainReport::Valid { records: 100 }
    );
    let mut tampered = log.records().to_vec();
    tampered[42].dfa_state = "q999".into();
    assert_eq!(
        verify_chain(&tampered),
        ChainReport::Broken {
            first_bad_index: 42
        }
    );
    let mut reordered = log.records().to_vec();
    reordered.swap(10, 60);
    assert_eq!(
        verify_chain(&reordered),
        ChainReport::Broken {
            first_bad_index: 10
        }
    );

    // Record/decision count equality on a full mixed run.
    let out = run(&Scenario::workload_default(Workload::Mixed, 10)).unwrap();
    assert!(audit_complete(&out), "decision/record counts diverged");
    pass(
        "GBOM integrity",
        "exact field names, tamper at 42, reorder at 10, counts equal".into(),
    );
}

#[test]
fn criterion_11_dose_ceiling_regression() {
    // Publish the 0.75 ceiling mid-run: after each node's first decision
    // under the new root, the legacy 1.5 dose is structurally unreachable.
    let mut scenario = Scenario::workload_default(Workload::W4, 21);
    scenario.generate = true;
    scenario.log_tokens = true;
    scenario.lambda_per_hour = 7_200;
    scenario.duration_ms = 30_000;
    let out = run(&scenario).unwrap();
    assert!(out.metrics.permits > 0 && out.metrics.denies > 0);
    assert_eq!(out.metrics.ig_violations, 0);
    let (converged, roots) = converge_check(&out);
    assert!(converged);
    let new_root = roots[0];

    for (i, gbom) in out.gboms.iter().enumerate() {
        assert!(matches!(
            verify_chain(gbom.records()),
            ChainReport::Valid { .. }
        ));
        let actions: Vec<_> = gbom
            .records()
            .iter()
            .filter(|r| r.event == RecordEvent::Action)
            .collect();
        let first_new = actions
            .iter()
            .position(|r| r.policy_merkle_root == new_root)
            .unwrap_or_else(|| panic!("node{i} never enforced the new root"));
        for r in &actions[first_new..] {
            assert_eq!(
                r.policy_merkle_root, new_root,
                "node{i} record bound to stale root"
            );
            assert_eq!(
                r.enforcement,
                Verdict::Deny,
                "node{i} permitted the excluded dose under the new root"
            );
        }
    }

    // Masked-out side: adversarial generation under the new policy can
    // never emit the excluded dose token.
    let g2 = parse_grammar(&fixtures::dosage_grammar_source(2)).unwrap();
    let dfa = Arc::new(compile(&g2, &fixtures::clinical_vocab()).unwrap());
    let authority = AttestationAuthority::new(
        SigningKey::for_principal("authority"),
        Digest::of(b"enclave-v1"),
    );
    let mut st = EpochState::new(
        u64::MAX / 2,
        authority.measurement(),
        authority.verifying_key(),
    );
    st.attest(&authority.issue_quote(dfa.source_root(), 1), 0)
        .unwrap();
    let mut pep = Pep::new(
        dfa,
        1,
        EpochHandle::new(st),
        PepConfig {
            end_of_action: fixtures::TOK_END_OF_ACTION,
            identity: "spiffe://ehv.example/agent/twin-001".into(),
            granularity: LogGranularity::PerAction,
        },
    );
    let mut source = ehv_core::logits::MockLogitSource::new(3, fixtures::CLINICAL_VOCAB_SIZE)
        .with_goal(fixtures::unsafe_dosage_action(), 80.0);
    let mut sampler = SeededSoftmaxSampler::new(4);
    let mut log = GbomLog::new();
    for now in 0..1_000u64 {
        if pep.at_boundary() {
            source.reset_goal(fixtures::unsafe_dosage_action());
        }
        match pep.step(&source.next_logits(), &mut sampler, now, &mut log) {
            StepOutcome::Sampled { token, .. } => {
                assert_ne!(
                    token,
                    fixtures::TOK_DOSE_1_5,
                    "excluded dose token emitted at {now}"
                );
            }
            StepOutcome::Refused(d) => panic!("refused: {d:?}"),
        }
    }
    pass(
        "dose ceiling regression",
        format!(
            "fleet denies under root {} after swap; 1000 adversarial steps never emit the excluded token",
            &new_root.to_hex()[..12]
        ),
    );
}

#[test]
fn criterion_12_desk_scale_mask_latency() {
    let g2 = parse_grammar(&fixtures::dosage_grammar_source(2)).unwrap();
    let vocab = Vocabulary::anonymous(50_000);
    let dfa = ehv_core::dfa::compile_with(&g2, &vocab, &CompileOptions::default()).unwrap();
    let report = bench_mask(&dfa, 10_000, 7);
    assert_eq!(report.correctness_failures, 0);
    assert!(
        report.mean_us < 1_000.0,
        "mean mask application {}us exceeds 1ms at vocab 50000",
        report.mean_us
    );
    pass(
        "desk-scale mask latency",
        format!(
            "mean {:.1}us, p99 {:.1}us at vocab 50000 on {}",
            report.mean_us, report.p99_us, report.hardware
        ),
    );
}
