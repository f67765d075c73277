//! Replica convergence under every delivery order, plus the vector-clock
//! semilattice laws as property tests.

use proptest::prelude::*;

use ehv_core::clock::{clock, CausalOrder, VectorClock};
use ehv_core::crypto::SigningKey;
use ehv_core::policy::{merkle_root_of, PolicyMutation, PolicyStore};
use ehv_core::Digest;

fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}

fn fresh_replica(name: &str, issuers: &[(&str, &SigningKey)]) -> PolicyStore {
    let mut store = PolicyStore::new(name);
    for (issuer, key) in issuers {
        store.register_issuer(*issuer, key.verifying_key());
    }
    store
}

/// Two concurrent two-mutation chains authored on different replicas.
fn two_concurrent_chains() -> (Vec<PolicyMutation>, SigningKey, SigningKey) {
    let key_a = SigningKey::for_principal("pap-a");
    let key_b = SigningKey::for_principal("pap-b");
    let mut a = fresh_replica("a", &[("pap-a", &key_a)]);
    let mut b = fresh_replica("b", &[("pap-b", &key_b)]);
    let a1 = a.author("grammar alpha 1\n", "pap-a", &key_a).unwrap();
    let a2 = a.author("grammar alpha 2\n", "pap-a", &key_a).unwrap();
    let b1 = b.author("grammar beta 1\n", "pap-b", &key_b).unwrap();
    let b2 = b.author("grammar beta 2\n", "pap-b", &key_b).unwrap();
    (vec![a1, a2, b1, b2], key_a, key_b)
}

#[test]
fn all_delivery_permutations_of_four_mutations_converge() {
    let (mutations, key_a, key_b) = two_concurrent_chains();
    let mut roots: Vec<Digest> = Vec::new();
    let mut orders: Vec<Vec<Digest>> = Vec::new();
    for (i, perm) in permutations(&mutations).into_iter().enumerate() {
        let mut replica = fresh_replica(
            &format!("replica{i}"),
            &[("pap-a", &key_a), ("pap-b", &key_b)],
        );
        for m in perm {
            replica.ingest(m).unwrap();
        }
        assert_eq!(replica.len(), 4);
        assert_eq!(replica.pending_orphans(), 0);
        assert_eq!(replica.heads().len(), 2, "two concurrent chain heads");
        roots.push(replica.merkle_root());
        orders.push(
            replica
                .effective_policy()
                .unwrap()
                .iter()
                .map(|m| m.id)
                .collect(),
        );
    }
    assert_eq!(roots.len(), 24);
    assert!(roots.windows(2).all(|w| w[0] == w[1]), "roots diverged");
    assert!(orders.windows(2).all(|w| w[0] == w[1]), "orders diverged");
}

#[test]
fn redelivery_any_number_of_times_is_idempotent() {
    let (mutations, key_a, key_b) = two_concurrent_chains();
    let mut replica = fresh_replica("r", &[("pap-a", &key_a), ("pap-b", &key_b)]);
    for m in &mutations {
        replica.ingest(m.clone()).unwrap();
    }
    let root = replica.merkle_root();
    let len = replica.len();
    for _ in 0..3 {
        for m in &mutations {
            replica.ingest(m.clone()).unwrap();
        }
    }
    assert_eq!(replica.merkle_root(), root);
    assert_eq!(replica.len(), len);
}

#[test]
fn effective_policy_is_monotone_under_ingestion() {
    let (mutations, key_a, key_b) = two_concurrent_chains();
    let mut replica = fresh_replica("r", &[("pap-a", &key_a), ("pap-b", &key_b)]);
    let mut prev_len = 0;
    for m in mutations {
        replica.ingest(m).unwrap();
        let len = replica.effective_policy().unwrap().len() + replica.pending_orphans();
        assert!(len >= prev_len, "ingest removed a mutation");
        prev_len = len;
    }
}

#[test]
fn merkle_tree_oracle_one_to_five_leaves() {
    // Recompute the binary tree by hand: odd layers duplicate the tail.
    let leaves: Vec<Digest> = (0..5u8).map(|i| Digest::of(&[i])).collect();
    let pair = |l: &Digest, r: &Digest| {
        let mut bytes = Vec::with_capacity(64);
        bytes.extend_from_slice(&l.0);
        bytes.extend_from_slice(&r.0);
        Digest::of(&bytes)
    };
    assert_eq!(merkle_root_of(&[]), Digest::empty());
    assert_eq!(merkle_root_of(&leaves[..1]), leaves[0]);
    assert_eq!(merkle_root_of(&leaves[..2]), pair(&leaves[0], &leaves[1]));
    assert_eq!(
        merkle_root_of(&leaves[..3]),
        pair(&pair(&leaves[0], &leaves[1]), &pair(&leaves[2], &leaves[2]))
    );
    assert_eq!(
        merkle_root_of(&leaves[..4]),
        pair(&pair(&leaves[0], &leaves[1]), &pair(&leaves[2], &leaves[3]))
    );
    let l01 = pair(&leaves[0], &leaves[1]);
    let l23 = pair(&leaves[2], &leaves[3]);
    let l44 = pair(&leaves[4], &leaves[4]);
    assert_eq!(
        merkle_root_of(&leaves[..5]),
        pair(&pair(&l01, &l23), &pair(&l44, &l44))
    );
    // Any single-byte divergence anywhere changes the root.
    let mut tweaked = leaves.clone();
    tweaked[3].0[31] ^= 1;
    assert_ne!(merkle_root_of(&leaves), merkle_root_of(&tweaked));
}

fn arb_clock() -> impl Strategy<Value = VectorClock> {
    prop::collection::vec((0u8..4, 0u64..5), 0..6).prop_map(|entries| {
        let pairs: Vec<(String, u64)> = entries
            .into_iter()
            .map(|(n, v)| (format!("n{n}"), v))
            .collect();
        let refs: Vec<(&str, u64)> = pairs.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        clock(&refs)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn vc_merge_is_commutative(a in arb_clock(), b in arb_clock()) {
        prop_assert_eq!(a.merge(&b), b.merge(&a));
    }

    #[test]
    fn vc_merge_is_associative(a in arb_clock(), b in arb_clock(), c in arb_clock()) {
        prop_assert_eq!(a.merge(&b).merge(&c), a.merge(&b.merge(&c)));
    }

    #[test]
    fn vc_merge_is_idempotent(a in arb_clock()) {
        prop_assert_eq!(a.merge(&a), a);
    }

    #[test]
    fn dominance_is_consistent_with_merge(a in arb_clock(), b in arb_clock()) {
        // The join semilattice view of merge: the dominant side absorbs.
        match a.compare(&b) {
            CausalOrder::Dominates | CausalOrder::Equal => {
                prop_assert_eq!(a.merge(&b), a.clone());
            }
            CausalOrder::Dominated => prop_assert_eq!(a.merge(&b), b.clone()),
            CausalOrder::Concurrent => {
                let m = a.merge(&b);
                prop_assert!(m.compare(&a) != CausalOrder::Dominated);
                prop_assert!(m.compare(&b) != CausalOrder::Dominated);
                prop_assert!(m != a && m != b);
            }
        }
    }

    #[test]
    fn comparison_is_antisymmetric(a in arb_clock(), b in arb_clock()) {
        let ab = a.compare(&b);
        let ba = b.compare(&a);
        let expected = match ab {
            CausalOrder::Dominates => CausalOrder::Dominated,
            CausalOrder::Dominated => CausalOrder::Dominates,
            CausalOrder::Equal => CausalOrder::Equal,
            CausalOrder::Concurrent => CausalOrder::Concurrent,
        };
        prop_assert_eq!(ba, expected);
    }
}

/// The literal tamper-evidence claim: flipping any single byte of any
/// persisted record is detected, either as a parse failure or as a chain
/// break at (or before) the tampered record.
#[test]
fn every_single_byte_flip_of_a_persisted_log_is_detected() {
    use ehv_core::gbom::{verify_chain, ChainReport, GbomLog, RecordDraft, RecordEvent};
    use ehv_core::pep::Verdict;

    let mut log = GbomLog::new();
    for i in 0..4u64 {
        log.append(RecordDraft {
            timestamp_ms: i * 7,
            event: RecordEvent::Action,
            policy_merkle_root: Digest::of(b"root"),
            tee_measurement: Digest::of(b"mr"),
            epoch_id: "E-001".into(),
            dfa_state: format!("q{i}"),
            enforcement: if i % 2 == 0 {
                Verdict::Permit
            } else {
                Verdict::Deny
            },
            identity: "spiffe://ehv.example/agent/twin-001".into(),
        });
    }
    let lines = log.to_lines();
    let line_starts: Vec<usize> = {
        let mut starts = vec![0usize];
        starts.extend(
            lines
                .bytes()
                .enumerate()
                .filter(|(_, b)| *b == b'\n')
                .map(|(i, _)| i + 1),
        );
        starts
    };
    let record_of_offset = |off: usize| line_starts.iter().filter(|&&s| s <= off).count() - 1;

    let mut detections = 0usize;
    for offset in 0..lines.len() {
        let original = lines.as_bytes()[offset];
        if original == b'\n' {
            continue;
        }
        let mut tampered = lines.clone().into_bytes();
        tampered[offset] ^= 0x01;
        let detected = match String::from_utf8(tampered) {
            Err(_) => true,
            Ok(text) => match GbomLog::from_lines(&text) {
                Err(_) => true,
                Ok(parsed) => match verify_chain(parsed.records()) {
                    ChainReport::Broken { first_bad_index } => {
                        assert!(
                            first_bad_index <= record_of_offset(offset),
                            "offset {offset}: break reported after the tampered record"
                        );
                        true
                    }
                    ChainReport::Valid { .. } => false,
                },
            },
        };
        assert!(detected, "byte flip at offset {offset} went unnoticed");
        detections += 1;
    }
    assert!(detections > 1_000, "sweep degenerated: {detections} flips");
}

/// Ordering never consults a wall clock: the causal modules contain no
/// system-time reads at all.
#[test]
fn causal_ordering_has_no_physical_clock_inputs() {
    for (name, source) in [
        ("clock.rs", include_str!("../src/clock.rs")),
        ("policy.rs", include_str!("../src/policy.rs")),
    ] {
        for banned in ["SystemTime", "Instant::now", "chrono"] {
            assert!(
                !source.contains(banned),
                "{name} references {banned}; causal ordering must be clock-free"
            );
        }
    }
}
