//! End-to-end simulator runs over the workload matrix.

use ehv_core::fixtures;
use ehv_core::gbom::{verify_chain, ChainReport, RecordEvent};
use ehv_core::pep::Verdict;
use ehv_core::sim::scenario::{Endpoint, PartitionInterval, PolicyPublication, ResetRequest};
use ehv_core::sim::{
    audit_complete, converge_check, esw_bound, provenance_bound, run, Scenario, Workload,
};

#[test]
fn w1_safe_baseline_permits_everything() {
    let scenario = Scenario::workload_default(Workload::W1, 11);
    let out = run(&scenario).unwrap();
    assert!(out.metrics.total_actions > 0);
    assert_eq!(out.metrics.permits, out.metrics.total_actions);
    assert_eq!(out.metrics.denies, 0);
    assert_eq!(out.metrics.ig_violations, 0);
    assert!(audit_complete(&out));
    let (converged, roots) = converge_check(&out);
    assert!(converged);
    assert_eq!(roots.len(), 3);
}

#[test]
fn w2_unsafe_candidates_denied_and_generation_masked() {
    let scenario = Scenario::workload_default(Workload::W2, 12);
    let out = run(&scenario).unwrap();
    assert!(out.metrics.total_actions > 0);
    assert_eq!(out.metrics.denies, out.metrics.total_actions);
    assert_eq!(out.metrics.permits, 0);
    assert_eq!(out.metrics.ig_violations, 0);
    // Adversarially boosted unsafe token never appears in any token record:
    // the mask excluded it from every sampled step.
    let unsafe_state_hits = out
        .gboms
        .iter()
        .flat_map(|g| g.records())
        .filter(|r| r.event == RecordEvent::Token)
        .count();
    assert!(unsafe_state_hits > 0, "expected per-token records");
    assert!(audit_complete(&out));
}

#[test]
fn w3_escalations_route_to_signed_overrides() {
    let scenario = Scenario::workload_default(Workload::W3, 13);
    let out = run(&scenario).unwrap();
    assert!(out.metrics.escalates > 0);
    assert_eq!(out.metrics.escalates, out.metrics.total_actions);
    let overrides = out
        .gboms
        .iter()
        .flat_map(|g| g.records())
        .filter(|r| matches!(r.event, RecordEvent::Override { .. }))
        .count();
    assert_eq!(overrides as u64, out.metrics.escalates);
    assert!(audit_complete(&out));
}

#[test]
fn w4_mid_epoch_update_bounds_staleness() {
    let mut scenario = Scenario::workload_default(Workload::W4, 14);
    scenario.lambda_per_hour = 500_000;
    let out = run(&scenario).unwrap();
    assert!(out.metrics.total_actions > 100);
    // Unsafe 1.5 dose: permitted under v1, denied once v2 is enforced.
    assert!(out.metrics.permits > 0, "pre-update permits under v1");
    assert!(out.metrics.denies > 0, "post-update denies under v2");
    assert_eq!(out.metrics.ig_violations, 0);
    let bound = esw_bound(scenario.lambda_per_hour, scenario.epoch_ttl_ms / 1000);
    assert!(
        out.metrics.n_stale <= bound,
        "measured {} stale > bound {bound}",
        out.metrics.n_stale
    );
    assert!(
        out.metrics.max_staleness_ms() <= scenario.epoch_ttl_ms,
        "staleness {}ms exceeded ttl",
        out.metrics.max_staleness_ms()
    );
    let (converged, _) = converge_check(&out);
    assert!(converged);
}

#[test]
fn w5_partition_past_ttl_fails_closed_and_recovers() {
    let scenario = Scenario::workload_default(Workload::W5, 15);
    let out = run(&scenario).unwrap();
    let halted_at = out.metrics.halted_at_ms.expect("must halt");
    // Halt lands at the first staleness check after last_attest + ttl.
    assert_eq!(halted_at, 120_001);
    let transition = out.metrics.fail_closed_transition_ms.expect("measured");
    assert!(
        transition.abs_diff(scenario.epoch_ttl_ms) <= 1_000,
        "fail-closed transition {transition}ms not within 1s of ttl"
    );
    assert_eq!(out.metrics.permits_while_halted, 0);
    // Recovery is attestation-gated: an attest event follows the heal.
    assert!(out.metrics.attestations >= 2);
    assert!(out.metrics.permits > 0, "permits resume after recovery");
    assert!(out.event_log.contains("FAIL-CLOSED HALT"));
    // Ordering in the log: halt strictly before the recovery attestation.
    let halt_pos = out.event_log.find("FAIL-CLOSED HALT").unwrap();
    let recovery = out.event_log[halt_pos..]
        .find("attested")
        .expect("recovery attestation logged");
    assert!(recovery > 0);
}

#[test]
fn verdict_counts_sum_to_total_actions() {
    for (workload, seed) in [
        (Workload::W1, 81),
        (Workload::W2, 82),
        (Workload::W3, 83),
        (Workload::W4, 84),
        (Workload::W5, 85),
        (Workload::Mixed, 86),
    ] {
        let out = run(&Scenario::workload_default(workload, seed)).unwrap();
        let m = &out.metrics;
        assert_eq!(
            m.permits + m.denies + m.escalates,
            m.total_actions,
            "{workload:?}: verdict counts do not partition the actions"
        );
        assert_eq!(m.gl_samples_ms.len() as u64, m.total_actions);
    }
}

#[test]
fn identical_seeds_reproduce_event_logs_bit_for_bit() {
    let scenario = Scenario::workload_default(Workload::Mixed, 77);
    let a = run(&scenario).unwrap();
    let b = run(&scenario).unwrap();
    assert_eq!(a.event_log, b.event_log);
    assert_eq!(a.metrics.total_actions, b.metrics.total_actions);
    assert_eq!(a.metrics.final_roots, b.metrics.final_roots);
    for (ga, gb) in a.gboms.iter().zip(&b.gboms) {
        assert_eq!(ga.records(), gb.records());
    }
    let c = run(&Scenario::workload_default(Workload::Mixed, 78)).unwrap();
    assert_ne!(a.event_log, c.event_log, "different seed, different log");
}

#[test]
fn zero_lambda_runs_no_actions() {
    let mut scenario = Scenario::workload_default(Workload::W1, 16);
    scenario.lambda_per_hour = 0;
    let out = run(&scenario).unwrap();
    assert_eq!(out.metrics.total_actions, 0);
    assert_eq!(
        out.metrics.permits + out.metrics.denies + out.metrics.escalates,
        0
    );
}

#[test]
fn vincristine_update_blocks_the_excluded_dose_fleet_wide() {
    // Version 1 permits the 1.5 dose; publishing version 2 (ceiling 0.75)
    // must make every node deny it at its next boundary, with audit records
    // bound to the new Merkle root.
    let mut scenario = Scenario::workload_default(Workload::W4, 21);
    scenario.generate = true;
    scenario.log_tokens = true;
    scenario.lambda_per_hour = 7_200;
    scenario.duration_ms = 30_000;
    scenario.publications[0].at_ms = 8_000;
    let out = run(&scenario).unwrap();

    assert!(out.metrics.permits > 0, "v1 permits the legacy dose");
    assert!(out.metrics.denies > 0, "v2 denies it");
    assert_eq!(out.metrics.ig_violations, 0);
    let (converged, roots) = converge_check(&out);
    assert!(converged);
    let final_root = roots[0];

    for (node, gbom) in out.gboms.iter().enumerate() {
        assert!(matches!(
            verify_chain(gbom.records()),
            ChainReport::Valid { .. }
        ));
        // Find the swap point: the first action record carrying the new root.
        let records: Vec<_> = gbom
            .records()
            .iter()
            .filter(|r| r.event == RecordEvent::Action)
            .collect();
        let swap_idx = records
            .iter()
            .position(|r| r.policy_merkle_root == final_root)
            .unwrap_or_else(|| panic!("node{node} never decided under the new root"));
        for r in &records[swap_idx..] {
            assert_eq!(
                r.policy_merkle_root, final_root,
                "node{node} regressed to an old root after the swap"
            );
            assert_eq!(
                r.enforcement,
                Verdict::Deny,
                "node{node} permitted the excluded dose under the new root"
            );
        }
        // Under the new root, no generated token is ever the excluded dose.
        let mut current_root_is_new = false;
        for r in gbom.records() {
            if r.event == RecordEvent::Action {
                current_root_is_new = r.policy_merkle_root == final_root;
            }
            if r.event == RecordEvent::Token && r.policy_merkle_root == final_root {
                current_root_is_new = true;
            }
            if current_root_is_new && r.event == RecordEvent::Token {
                assert_eq!(r.policy_merkle_root, final_root);
            }
        }
    }
    // The mask keeps the excluded token out of generation under the new
    // root: reconstruct sampled tokens from the event log is not needed —
    // token records carry the mask state; decisive check is that zero
    // permits occur after every node swapped.
    let last_permit_ms = out
        .gboms
        .iter()
        .flat_map(|g| g.records())
        .filter(|r| r.event == RecordEvent::Action && r.enforcement == Verdict::Permit)
        .map(|r| r.timestamp_ms)
        .max()
        .unwrap();
    let first_new_root_decision = out
        .gboms
        .iter()
        .flat_map(|g| g.records())
        .filter(|r| r.event == RecordEvent::Action && r.policy_merkle_root == final_root)
        .map(|r| r.timestamp_ms)
        .max()
        .unwrap();
    assert!(last_permit_ms <= first_new_root_decision);
}

#[test]
fn emergency_reset_rate_limit_enforced_in_run() {
    let mut scenario = Scenario::workload_default(Workload::W1, 31);
    scenario.duration_ms = 60_000;
    scenario.resets = vec![
        ResetRequest {
            at_ms: 5_000,
            node: 0,
            authorized: true,
        },
        // 10 s later: inside ttl/2 = 30 s, must be rejected.
        ResetRequest {
            at_ms: 15_000,
            node: 0,
            authorized: true,
        },
        // 31 s after the first: accepted.
        ResetRequest {
            at_ms: 36_000,
            node: 0,
            authorized: true,
        },
        // Unsigned: always rejected.
        ResetRequest {
            at_ms: 40_000,
            node: 0,
            authorized: false,
        },
    ];
    let out = run(&scenario).unwrap();
    assert_eq!(out.metrics.accepted_resets_ms, vec![5_000, 36_000]);
    assert_eq!(out.metrics.rejected_resets, 2);
    // Rate-limit audit over the accepted timestamps: no window of ttl/2
    // holds two accepted resets.
    let half = scenario.epoch_ttl_ms / 2;
    for pair in out.metrics.accepted_resets_ms.windows(2) {
        assert!(pair[1] - pair[0] >= half);
    }
    // Rejections are security observations in the audit log.
    let security = out.gboms[0]
        .records()
        .iter()
        .filter(|r| r.event == RecordEvent::Security)
        .count();
    assert_eq!(security, 2);
    assert!(audit_complete(&out));
}

#[test]
fn attest_window_defers_but_does_not_drop_actions() {
    // A publication forces re-attestation; actions arriving inside the
    // attestation window are queued and decided at its end.
    let mut scenario = Scenario::workload_default(Workload::W4, 41);
    scenario.lambda_per_hour = 36_000; // one action per 100 ms
    scenario.duration_ms = 15_000;
    let out = run(&scenario).unwrap();
    assert!(out.metrics.total_actions > 100);
    let max_gl = out.metrics.gl_samples_ms.iter().copied().max().unwrap();
    assert!(
        max_gl >= scenario.attest_latency_ms / 2,
        "expected some action to wait out part of the attestation window, max {max_gl}"
    );
    // Every request was eventually decided.
    assert!(audit_complete(&out));
}

#[test]
fn invalid_scenario_rejected_before_any_event() {
    let mut scenario = Scenario::workload_default(Workload::W1, 1);
    scenario.partitions.push(PartitionInterval {
        a: Endpoint::Node(0),
        b: Endpoint::ControlPlane,
        start_ms: 5_000,
        end_ms: scenario.duration_ms + 1,
    });
    assert!(run(&scenario).is_err());
}

#[test]
fn a_second_named_policy_intersects_into_enforcement() {
    // A "protocol" policy without the escalation branch publishes alongside
    // the dosage policy: the enforced automaton is their product, so
    // escalations flip from ESCALATE to DENY once both policies are active.
    let protocol = "\
grammar protocol 1
token \"administer\" = 0
token \"0.0\" = 1
token \"0.25\" = 2
token \"0.5\" = 3
token \"0.75\" = 4
token \"1.0\" = 5
token \"1.25\" = 6
token \"1.5\" = 7
token \"mg/m2\" = 8
token \"<eoa>\" = 10
rule Action -> \"administer\" Dose
rule Dose -> \"0.0\" Unit
rule Dose -> \"0.25\" Unit
rule Dose -> \"0.5\" Unit
rule Dose -> \"0.75\" Unit
rule Dose -> \"1.0\" Unit
rule Dose -> \"1.25\" Unit
rule Dose -> \"1.5\" Unit
rule Unit -> \"mg/m2\" End
rule End -> \"<eoa>\"
";
    let mut scenario = Scenario::workload_default(Workload::W3, 95);
    scenario.duration_ms = 30_000;
    scenario.publications.push(PolicyPublication {
        at_ms: 10_000,
        grammar_source: protocol.to_string(),
    });
    let out = run(&scenario).unwrap();
    assert!(
        out.metrics.escalates > 0,
        "pre-product escalations expected"
    );
    assert!(out.metrics.denies > 0, "post-product denials expected");
    assert_eq!(out.metrics.ig_violations, 0);
    let (converged, roots) = converge_check(&out);
    assert!(converged);
    let product_root = roots[0];
    for (i, gbom) in out.gboms.iter().enumerate() {
        for r in gbom.records() {
            if r.event == RecordEvent::Action && r.policy_merkle_root == product_root {
                assert_ne!(
                    r.enforcement,
                    Verdict::Escalate,
                    "node{i} escalated under the product policy"
                );
            }
        }
    }
    assert!(audit_complete(&out));
}

#[test]
fn isolated_node_catches_up_by_gossip_after_heal() {
    // node0 is cut from the control plane and both peers while the update
    // publishes; the partition is shorter than the ttl, so nothing halts,
    // and anti-entropy converges the fleet after the heal.
    let mut scenario = Scenario::workload_default(Workload::W4, 91);
    scenario.duration_ms = 30_000;
    scenario.publications[0].at_ms = 5_000;
    for peer in [Endpoint::ControlPlane, Endpoint::Node(1), Endpoint::Node(2)] {
        scenario.partitions.push(PartitionInterval {
            a: Endpoint::Node(0),
            b: peer,
            start_ms: 2_000,
            end_ms: 12_000,
        });
    }
    let out = run(&scenario).unwrap();
    assert_eq!(
        out.metrics.halted_at_ms, None,
        "partition < ttl must not halt"
    );
    let (converged, roots) = converge_check(&out);
    assert!(converged, "gossip failed to heal the divergence: {roots:?}");
    assert!(
        out.event_log.contains("sync -> node0"),
        "expected anti-entropy delivery"
    );
    // node0 eventually enforces the new root too.
    let final_root = roots[0];
    assert!(
        out.gboms[0]
            .records()
            .iter()
            .any(|r| r.policy_merkle_root == final_root),
        "node0 never decided under the converged root"
    );
    assert_eq!(out.metrics.ig_violations, 0);
}

#[test]
fn single_node_trivially_converges() {
    let mut scenario = Scenario::workload_default(Workload::W1, 51);
    scenario.nodes = 1;
    let out = run(&scenario).unwrap();
    let (converged, roots) = converge_check(&out);
    assert!(converged);
    assert_eq!(roots.len(), 1);
}

#[test]
fn lifecycle_publish_cache_enforce_binds_roots() {
    // Publish -> converge -> attest -> enforce: after the run, the epoch's
    // committed root equals the store root on every node.
    let scenario = Scenario::workload_default(Workload::W4, 61);
    let out = run(&scenario).unwrap();
    let (converged, roots) = converge_check(&out);
    assert!(converged);
    // Every node's final permit/deny records bind a root that the fleet
    // agrees on, and the last committed epoch root matches the store root.
    for (gbom, timeline) in out.gboms.iter().zip(&out.committed_timelines) {
        let last = gbom
            .records()
            .iter()
            .rev()
            .find(|r| r.event == RecordEvent::Action)
            .expect("actions decided");
        assert_eq!(last.policy_merkle_root, roots[0]);
        assert_eq!(timeline.last().expect("attested").1, roots[0]);
    }
    let _ = fixtures::clinical_vocab();
}

#[test]
fn every_permit_is_bound_to_the_committed_epoch_root() {
    for (workload, seed) in [
        (Workload::W1, 71),
        (Workload::W4, 72),
        (Workload::W5, 73),
        (Workload::Mixed, 74),
    ] {
        let mut scenario = Scenario::workload_default(workload, seed);
        scenario.generate = true;
        scenario.log_tokens = true;
        let out = run(&scenario).unwrap();
        assert!(
            provenance_bound(&out),
            "{workload:?}: a PERMIT record escaped its committed epoch root"
        );
    }
}
