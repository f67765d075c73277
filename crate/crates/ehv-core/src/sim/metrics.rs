//! Run metrics and the closed-form exposure arithmetic.

use serde::Serialize;

use crate::crypto::Digest;

/// Actions executable under a stale policy in a legacy review pipeline:
/// `instances * recommendations_per_hour * 24 * days`, exact.
pub fn legacy_exposure(instances: u64, recs_per_hour: u64, gl_days: u64) -> u64 {
    instances * recs_per_hour * 24 * gl_days
}

/// Of `exposure` actions, how many a violation rate of `num/den` flags,
/// in exact integer arithmetic (multiply before divide).
pub fn flagged_at_rate(exposure: u64, rate_num: u64, rate_den: u64) -> u64 {
    exposure * rate_num / rate_den
}

/// Upper bound on actions decided inside the epoch staleness window:
/// `floor(lambda_per_hour * (ttl_s - 1) / 3600)` under one-second
/// quantization of the window.
pub fn esw_bound(lambda_per_hour: u64, ttl_s: u64) -> u64 {
    if ttl_s == 0 {
        return 0;
    }
    lambda_per_hour * (ttl_s - 1) / 3600
}

/// Everything a simulation run measures.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunMetrics {
    pub total_actions: u64,
    pub permits: u64,
    pub denies: u64,
    pub escalates: u64,
    /// Per-action time from request to decision, ms.
    pub gl_samples_ms: Vec<u64>,
    /// Decisions rendered under a policy root missing an already-published
    /// mutation.
    pub n_stale: u64,
    /// Per stale decision: ms since the first unapplied publication.
    pub staleness_samples_ms: Vec<u64>,
    /// Legacy-pipeline comparator for the scenario's fleet parameters.
    pub n_unsafe_legacy: u64,
    /// First partition start affecting an attestation path, if any.
    pub partition_start_ms: Option<u64>,
    /// First fail-closed halt instant, if any.
    pub halted_at_ms: Option<u64>,
    /// `halted_at - partition_start` when both occurred.
    pub fail_closed_transition_ms: Option<u64>,
    /// PERMIT verdicts rendered between a halt and the next successful
    /// attestation; the fail-closed guarantee is that this stays zero.
    pub permits_while_halted: u64,
    /// Last store-root change across nodes, if roots converged by run end.
    pub convergence_ms: Option<u64>,
    pub converged: bool,
    pub final_roots: Vec<Digest>,
    /// PERMIT verdicts whose action the grammar-derivation oracle rejects
    /// under the deciding node's active policy. The safety invariant is
    /// that this stays zero.
    pub ig_violations: u64,
    /// Accepted forced epoch resets, with timestamps for rate-limit audit.
    pub accepted_resets_ms: Vec<u64>,
    pub rejected_resets: u64,
    /// Decision count per node's audit log, for completeness checks.
    pub gbom_decision_counts: Vec<u64>,
    pub attestations: u64,
}

impl RunMetrics {
    pub fn mean_gl_ms(&self) -> f64 {
        if self.gl_samples_ms.is_empty() {
            return 0.0;
        }
        self.gl_samples_ms.iter().sum::<u64>() as f64 / self.gl_samples_ms.len() as f64
    }

    pub fn max_staleness_ms(&self) -> u64 {
        self.staleness_samples_ms.iter().copied().max().unwrap_or(0)
    }

    /// Tabular report for operators.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let mut row = |k: &str, v: String| out.push_str(&format!("{k:<28} {v}\n"));
        row("actions", self.total_actions.to_string());
        row(
            "verdicts",
            format!(
                "permit={} deny={} escalate={}",
                self.permits, self.denies, self.escalates
            ),
        );
        row("mean GL (ms)", format!("{:.3}", self.mean_gl_ms()));
        row("stale decisions", self.n_stale.to_string());
        row("max staleness (ms)", self.max_staleness_ms().to_string());
        row("legacy comparator", self.n_unsafe_legacy.to_string());
        row(
            "fail-closed transition (ms)",
            self.fail_closed_transition_ms
                .map_or("n/a".into(), |v| v.to_string()),
        );
        row(
            "permits while halted",
            self.permits_while_halted.to_string(),
        );
        row(
            "converged",
            format!(
                "{} ({})",
                self.converged,
                self.convergence_ms
                    .map_or("n/a".into(), |v| format!("last root change {v} ms"))
            ),
        );
        row("invariant violations", self.ig_violations.to_string());
        row("attestations", self.attestations.to_string());
        row(
            "forced resets",
            format!(
                "accepted={} rejected={}",
                self.accepted_resets_ms.len(),
                self.rejected_resets
            ),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exposure_matches_worked_example() {
        assert_eq!(legacy_exposure(5_000, 100, 14), 168_000_000);
        assert_eq!(legacy_exposure(0, 100, 14), 0);
        assert_eq!(flagged_at_rate(168_000_000, 3, 10_000), 50_400);
    }

    #[test]
    fn esw_bound_floors() {
        assert_eq!(esw_bound(500_000, 60), 8_194);
        assert_eq!(esw_bound(0, 60), 0);
        assert_eq!(esw_bound(3_600, 0), 0);
        assert_eq!(esw_bound(3_600, 2), 1);
    }
}
