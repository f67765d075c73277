//! Hash-chained audit log with OSCAL assessment-results export.
//!
//! Every enforcement event appends one record binding the decision to the
//! policy Merkle root, enclave measurement, epoch, DFA state, workload
//! identity, and verdict. Records chain by hash from a genesis sentinel
//! (SHA-256 of the empty string); there is no mutation or deletion
//! interface, and [`verify_chain`] recomputes every link so any single-byte
//! tamper or reordering is detected at the first broken index.
//!
//! Export renders the log as an OSCAL v1.1.2 assessment-results document:
//! one results entry per action-level record (token-step records attach to
//! the result of the action that closes them), each observation carrying
//! exactly the property names `policy_merkle_root`, `tee_measurement`,
//! `epoch_id`, `dfa_state`, `enforcement`, `spiffe_svid`. Chain fields live
//! outside the observation props, in `remarks`, so an exported document
//! re-parses to the identical record sequence and verifies end to end.
//!
//! On disk the log is newline-delimited canonical records, append-only.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::crypto::{tagged_digest, CanonicalEncoder, Digest, Signature, SigningKey, VerifyingKey};
use crate::epoch::LogicalMs;
use crate::pep::Verdict;

pub const RECORD_DOMAIN: &str = "ehv.gbom.record";
pub const OVERRIDE_DOMAIN: &str = "ehv.override";
pub const OSCAL_SCHEMA: &str =
    "https://pages.nist.gov/OSCAL/schemas/json/1.1.2/oscal_assessment-results_schema.json";
pub const OSCAL_VERSION: &str = "1.1.2";
pub const DOCUMENT_TITLE: &str = "EHV Runtime Governance Bill of Materials";
pub const CONTROL_ID: &str = "si-17";
pub const FINDING_TARGET: &str = "ehv-si-17";

/// Scenario-fixed origin for rendering logical milliseconds as ISO-8601.
pub const TIME_ORIGIN: &str = "2026-05-27T00:00:00Z";

/// What kind of enforcement event a record captures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordEvent {
    /// A complete-action decision.
    Action,
    /// One masked generation step.
    Token,
    /// A human override of an escalated record (target = record uuid).
    Override { target: String },
    /// A security observation (e.g. rejected emergency reset).
    Security,
}

impl RecordEvent {
    fn remark_str(&self) -> String {
        match self {
            RecordEvent::Action => "action".into(),
            RecordEvent::Token => "token".into(),
            RecordEvent::Override { target } => format!("override:{target}"),
            RecordEvent::Security => "security".into(),
        }
    }

    fn from_remark(s: &str) -> Option<RecordEvent> {
        match s {
            "action" => Some(RecordEvent::Action),
            "token" => Some(RecordEvent::Token),
            "security" => Some(RecordEvent::Security),
            other => other
                .strip_prefix("override:")
                .map(|t| RecordEvent::Override { target: t.into() }),
        }
    }

    pub fn is_action_level(&self) -> bool {
        !matches!(self, RecordEvent::Token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FindingStatus {
    #[serde(rename = "satisfied")]
    Satisfied,
    #[serde(rename = "not-satisfied")]
    NotSatisfied,
}

impl FindingStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FindingStatus::Satisfied => "satisfied",
            FindingStatus::NotSatisfied => "not-satisfied",
        }
    }
}

/// One audit record. `record_hash` covers every other field including
/// `prev_hash`; `record_uuid` is derived from `record_hash`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbomRecord {
    pub record_uuid: String,
    pub timestamp_ms: LogicalMs,
    pub event: RecordEvent,
    pub policy_merkle_root: Digest,
    pub tee_measurement: Digest,
    pub epoch_id: String,
    pub dfa_state: String,
    pub enforcement: Verdict,
    pub identity: String,
    pub finding_status: FindingStatus,
    pub prev_hash: Digest,
    pub record_hash: Digest,
}

/// Caller-supplied record fields; chain fields are computed on append.
#[derive(Debug, Clone)]
pub struct RecordDraft {
    pub timestamp_ms: LogicalMs,
    pub event: RecordEvent,
    pub policy_merkle_root: Digest,
    pub tee_measurement: Digest,
    pub epoch_id: String,
    pub dfa_state: String,
    pub enforcement: Verdict,
    pub identity: String,
}

fn canonical_record_bytes(
    draft: &RecordDraft,
    finding_status: FindingStatus,
    prev_hash: &Digest,
) -> Vec<u8> {
    let mut enc = CanonicalEncoder::new();
    enc.u64(draft.timestamp_ms)
        .str(&draft.event.remark_str())
        .digest(&draft.policy_merkle_root)
        .digest(&draft.tee_measurement)
        .str(&draft.epoch_id)
        .str(&draft.dfa_state)
        .str(draft.enforcement.as_str())
        .str(&draft.identity)
        .str(finding_status.as_str())
        .digest(prev_hash);
    enc.finish()
}

fn uuid_from_digest(d: &Digest) -> String {
    let b = &d.0;
    format!(
        "{}-{}-{}-{}-{}",
        hex::encode(&b[0..4]),
        hex::encode(&b[4..6]),
        hex::encode(&b[6..8]),
        hex::encode(&b[8..10]),
        hex::encode(&b[10..16]),
    )
}

/// The appendix-style rendering of each digest-valued OSCAL prop.
fn root_prop(d: &Digest) -> String {
    format!("sha256:{}", d.to_hex())
}

fn measurement_prop(d: &Digest) -> String {
    format!("sevsnp:mrenclave:{}", d.to_hex())
}

fn parse_digest_prop(s: &str) -> Option<Digest> {
    Digest::from_hex(s.rsplit(':').next()?)
}

/// Render logical ms as ISO-8601 from the scenario origin.
pub fn iso_timestamp(ms: LogicalMs) -> String {
    use chrono::{DateTime, Duration, SecondsFormat, Utc};
    let origin: DateTime<Utc> = TIME_ORIGIN.parse().expect("valid origin");
    (origin + Duration::milliseconds(ms as i64)).to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// Append-only log. There is deliberately no API to mutate or remove a
/// record once appended.
#[derive(Debug, Clone, Default)]
pub struct GbomLog {
    records: Vec<GbomRecord>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GbomError {
    #[error("override target {0:?} not found in log")]
    UnknownTarget(String),
    #[error("override target {0:?} is not an ESCALATE record")]
    TargetNotEscalate(String),
    #[error("approver {0:?} is not on the approver allowlist")]
    UnknownApprover(String),
    #[error("override signature invalid")]
    BadSignature,
    #[error("target {0:?} already has an approved override")]
    AlreadyOverridden(String),
    #[error("log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("export missing field {0}")]
    ExportShape(String),
}

/// Chain verification outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainReport {
    Valid { records: usize },
    Broken { first_bad_index: usize },
}

impl GbomLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[GbomRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of action-level records (everything but token steps).
    pub fn decision_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.event.is_action_level())
            .count()
    }

    /// Append a record, chaining it onto the log. The finding status is
    /// derived from the verdict: only PERMIT satisfies.
    pub fn append(&mut self, draft: RecordDraft) -> &GbomRecord {
        let finding_status = match draft.enforcement {
            Verdict::Permit => FindingStatus::Satisfied,
            Verdict::Deny | Verdict::Escalate => FindingStatus::NotSatisfied,
        };
        let prev_hash = self
            .records
            .last()
            .map_or_else(Digest::empty, |r| r.record_hash);
        let canon = canonical_record_bytes(&draft, finding_status, &prev_hash);
        let record_hash = tagged_digest(RECORD_DOMAIN, &canon);
        self.records.push(GbomRecord {
            record_uuid: uuid_from_digest(&record_hash),
            timestamp_ms: draft.timestamp_ms,
            event: draft.event,
            policy_merkle_root: draft.policy_merkle_root,
            tee_measurement: draft.tee_measurement,
            epoch_id: draft.epoch_id,
            dfa_state: draft.dfa_state,
            enforcement: draft.enforcement,
            identity: draft.identity,
            finding_status,
            prev_hash,
            record_hash,
        });
        self.records.last().expect("just pushed")
    }

    /// Chain a signed human override of an escalated record. An approved
    /// override authorizes exactly one action instance; a second approval
    /// for the same target is rejected.
    pub fn record_override(
        &mut self,
        envelope: &OverrideEnvelope,
        approvers: &ApproverRegistry,
        timestamp_ms: LogicalMs,
    ) -> Result<&GbomRecord, GbomError> {
        let target = self
            .records
            .iter()
            .find(|r| r.record_uuid == envelope.target_uuid)
            .ok_or_else(|| GbomError::UnknownTarget(envelope.target_uuid.clone()))?;
        if target.enforcement != Verdict::Escalate {
            return Err(GbomError::TargetNotEscalate(envelope.target_uuid.clone()));
        }
        let key = approvers
            .key_for(&envelope.approver)
            .ok_or_else(|| GbomError::UnknownApprover(envelope.approver.clone()))?;
        if !key.verify(
            OVERRIDE_DOMAIN,
            &envelope.canonical_bytes(),
            &envelope.signature,
        ) {
            return Err(GbomError::BadSignature);
        }
        if envelope.decision == OverrideDecision::Approve
            && self.records.iter().any(|r| {
                matches!(&r.event, RecordEvent::Override { target: t }
                    if *t == envelope.target_uuid)
                    && r.enforcement == Verdict::Permit
            })
        {
            return Err(GbomError::AlreadyOverridden(envelope.target_uuid.clone()));
        }
        let (root, measurement, epoch_id, dfa_state) = (
            target.policy_merkle_root,
            target.tee_measurement,
            target.epoch_id.clone(),
            target.dfa_state.clone(),
        );
        Ok(self.append(RecordDraft {
            timestamp_ms,
            event: RecordEvent::Override {
                target: envelope.target_uuid.clone(),
            },
            policy_merkle_root: root,
            tee_measurement: measurement,
            epoch_id,
            dfa_state,
            enforcement: match envelope.decision {
                OverrideDecision::Approve => Verdict::Permit,
                OverrideDecision::Reject => Verdict::Deny,
            },
            identity: envelope.approver.clone(),
        }))
    }

    /// Newline-delimited canonical persistence form.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<GbomLog, GbomError> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: GbomRecord = serde_json::from_str(line).map_err(|e| GbomError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            records.push(r);
        }
        Ok(GbomLog { records })
    }
}

/// Recompute every record hash and linkage; report the first tamper point.
pub fn verify_chain(records: &[GbomRecord]) -> ChainReport {
    let mut prev = Digest::empty();
    for (i, r) in records.iter().enumerate() {
        if r.prev_hash != prev {
            return ChainReport::Broken { first_bad_index: i };
        }
        let draft = RecordDraft {
            timestamp_ms: r.timestamp_ms,
            event: r.event.clone(),
            policy_merkle_root: r.policy_merkle_root,
            tee_measurement: r.tee_measurement,
            epoch_id: r.epoch_id.clone(),
            dfa_state: r.dfa_state.clone(),
            enforcement: r.enforcement,
            identity: r.identity.clone(),
        };
        let canon = canonical_record_bytes(&draft, r.finding_status, &r.prev_hash);
        let expect = tagged_digest(RECORD_DOMAIN, &canon);
        if expect != r.record_hash || uuid_from_digest(&expect) != r.record_uuid {
            return ChainReport::Broken { first_bad_index: i };
        }
        prev = r.record_hash;
    }
    ChainReport::Valid {
        records: records.len(),
    }
}

// ---------------------------------------------------------------------------
// Human override envelopes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverrideDecision {
    Approve,
    Reject,
}

/// A signed approval or rejection of one escalated record.
#[derive(Debug, Clone, PartialEq)]
pub struct OverrideEnvelope {
    pub target_uuid: String,
    pub approver: String,
    pub decision: OverrideDecision,
    pub signature: Signature,
}

impl OverrideEnvelope {
    pub fn sign(
        target_uuid: &str,
        approver: &str,
        decision: OverrideDecision,
        key: &SigningKey,
    ) -> Self {
        let mut env = Self {
            target_uuid: target_uuid.to_string(),
            approver: approver.to_string(),
            decision,
            signature: Signature([0u8; 64]),
        };
        env.signature = key.sign(OVERRIDE_DOMAIN, &env.canonical_bytes());
        env
    }

    /// Canonical bytes: target uuid, approver, decision flag.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut enc = CanonicalEncoder::new();
        enc.str(&self.target_uuid)
            .str(&self.approver)
            .u32(u32::from(self.decision == OverrideDecision::Approve));
        enc.finish()
    }
}

/// Approver allowlist, held separately from the policy issuer allowlist so
/// duty separation is structural: a policy issuer key grants no override
/// authority unless independently registered here.
#[derive(Debug, Clone, Default)]
pub struct ApproverRegistry {
    approvers: Vec<(String, VerifyingKey)>,
}

impl ApproverRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, uri: impl Into<String>, key: VerifyingKey) {
        self.approvers.push((uri.into(), key));
    }

    pub fn key_for(&self, uri: &str) -> Option<&VerifyingKey> {
        self.approvers
            .iter()
            .find(|(u, _)| u == uri)
            .map(|(_, k)| k)
    }
}

// ---------------------------------------------------------------------------
// OSCAL export / parse-back
// ---------------------------------------------------------------------------

fn observation_value(record: &GbomRecord) -> Value {
    json!({
        "uuid": record.record_uuid,
        "description": match record.event {
            RecordEvent::Token => "GCD token mask",
            RecordEvent::Override { .. } => "Human override of escalated action",
            RecordEvent::Security => "Security observation",
            RecordEvent::Action => "GCD enforcement outcome",
        },
        "props": [
            {"name": "policy_merkle_root", "value": root_prop(&record.policy_merkle_root)},
            {"name": "tee_measurement", "value": measurement_prop(&record.tee_measurement)},
            {"name": "epoch_id", "value": record.epoch_id},
            {"name": "dfa_state", "value": record.dfa_state},
            {"name": "enforcement", "value": record.enforcement.as_str()},
            {"name": "spiffe_svid", "value": record.identity},
        ],
        "remarks": format!(
            "event={} ts={} status={} prev=sha256:{} hash=sha256:{}",
            record.event.remark_str(),
            record.timestamp_ms,
            record.finding_status.as_str(),
            record.prev_hash.to_hex(),
            record.record_hash.to_hex(),
        ),
    })
}

/// Export the log as an OSCAL v1.1.2 assessment-results document. One
/// results entry per action-level record; token observations attach to the
/// result of the action that closes them; a trailing token run with no
/// closing action becomes a final partial result without findings.
pub fn export_oscal(log: &GbomLog) -> Value {
    let mut results = Vec::new();
    let mut pending: Vec<&GbomRecord> = Vec::new();
    let mut action_seq = 0usize;

    for record in log.records() {
        pending.push(record);
        if !record.event.is_action_level() {
            continue;
        }
        action_seq += 1;
        let start = pending.first().expect("non-empty").timestamp_ms;
        let observations: Vec<Value> = pending.iter().map(|r| observation_value(r)).collect();
        let result_uuid = uuid_from_digest(&tagged_digest(
            "ehv.gbom.result",
            record.record_hash.to_hex().as_bytes(),
        ));
        let finding_uuid = uuid_from_digest(&tagged_digest(
            "ehv.gbom.finding",
            record.record_hash.to_hex().as_bytes(),
        ));
        results.push(json!({
            "uuid": result_uuid,
            "title": format!("Governed Action {action_seq} - Epoch {}", record.epoch_id),
            "description": format!("{} decision for {}", record.enforcement.as_str(), record.identity),
            "start": iso_timestamp(start),
            "end": iso_timestamp(record.timestamp_ms.max(start) + 1),
            "reviewed-controls": {
                "control-selections": [
                    {"include-controls": [{"control-id": CONTROL_ID}]}
                ]
            },
            "observations": observations,
            "findings": [
                {
                    "uuid": finding_uuid,
                    "title": match record.finding_status {
                        FindingStatus::Satisfied => "Action compliant with epoch policy",
                        FindingStatus::NotSatisfied => "Action blocked or pending review",
                    },
                    "description": format!(
                        "Enforcement {} bound to policy root {}",
                        record.enforcement.as_str(),
                        root_prop(&record.policy_merkle_root)
                    ),
                    "target": {
                        "type": "objective-id",
                        "target-id": FINDING_TARGET,
                        "status": {"state": record.finding_status.as_str()}
                    }
                }
            ]
        }));
        pending.clear();
    }

    if !pending.is_empty() {
        let start = pending.first().expect("non-empty").timestamp_ms;
        let end = pending.last().expect("non-empty").timestamp_ms;
        let observations: Vec<Value> = pending.iter().map(|r| observation_value(r)).collect();
        let uuid = uuid_from_digest(&tagged_digest(
            "ehv.gbom.result",
            pending
                .last()
                .expect("non-empty")
                .record_hash
                .to_hex()
                .as_bytes(),
        ));
        results.push(json!({
            "uuid": uuid,
            "title": "Token stream (no closing action)",
            "description": "Masked generation steps not yet closed by an action decision",
            "start": iso_timestamp(start),
            "end": iso_timestamp(end + 1),
            "reviewed-controls": {
                "control-selections": [
                    {"include-controls": [{"control-id": CONTROL_ID}]}
                ]
            },
            "observations": observations,
            "findings": []
        }));
    }

    let last_modified = log
        .records()
        .last()
        .map_or_else(|| iso_timestamp(0), |r| iso_timestamp(r.timestamp_ms));
    let doc_uuid = uuid_from_digest(&tagged_digest(
        "ehv.gbom.document",
        log.records()
            .last()
            .map_or_else(Digest::empty, |r| r.record_hash)
            .to_hex()
            .as_bytes(),
    ));

    json!({
        "$schema": OSCAL_SCHEMA,
        "assessment-results": {
            "uuid": doc_uuid,
            "metadata": {
                "title": DOCUMENT_TITLE,
                "last-modified": last_modified,
                "version": "2.0.0",
                "oscal-version": OSCAL_VERSION,
            },
            "results": results,
        }
    })
}

/// Reconstruct the record sequence from an exported document. Flattening
/// results' observations in order recovers the original log order.
pub fn parse_oscal(doc: &Value) -> Result<Vec<GbomRecord>, GbomError> {
    let shape = |what: &str| GbomError::ExportShape(what.to_string());
    let results = doc
        .get("assessment-results")
        .and_then(|a| a.get("results"))
        .and_then(Value::as_array)
        .ok_or_else(|| shape("assessment-results.results"))?;

    let mut records = Vec::new();
    for result in results {
        let observations = result
            .get("observations")
            .and_then(Value::as_array)
            .ok_or_else(|| shape("observations"))?;
        for obs in observations {
            let uuid = obs
                .get("uuid")
                .and_then(Value::as_str)
                .ok_or_else(|| shape("observation.uuid"))?;
            let props = obs
                .get("props")
                .and_then(Value::as_array)
                .ok_or_else(|| shape("observation.props"))?;
            let prop = |name: &str| -> Result<&str, GbomError> {
                props
                    .iter()
                    .find(|p| p.get("name").and_then(Value::as_str) == Some(name))
                    .and_then(|p| p.get("value"))
                    .and_then(Value::as_str)
                    .ok_or_else(|| shape(name))
            };
            let remarks = obs
                .get("remarks")
                .and_then(Value::as_str)
                .ok_or_else(|| shape("observation.remarks"))?;
            let mut remark_map = std::collections::BTreeMap::new();
            for kv in remarks.split_whitespace() {
                if let Some((k, v)) = kv.split_once('=') {
                    remark_map.insert(k.to_string(), v.to_string());
                }
            }
            let remark = |k: &str| -> Result<&str, GbomError> {
                remark_map
                    .get(k)
                    .map(String::as_str)
                    .ok_or_else(|| shape(&format!("remarks.{k}")))
            };

            records.push(GbomRecord {
                record_uuid: uuid.to_string(),
                timestamp_ms: remark("ts")?.parse().map_err(|_| shape("remarks.ts"))?,
                event: RecordEvent::from_remark(remark("event")?)
                    .ok_or_else(|| shape("remarks.event"))?,
                policy_merkle_root: parse_digest_prop(prop("policy_merkle_root")?)
                    .ok_or_else(|| shape("policy_merkle_root"))?,
                tee_measurement: parse_digest_prop(prop("tee_measurement")?)
                    .ok_or_else(|| shape("tee_measurement"))?,
                epoch_id: prop("epoch_id")?.to_string(),
                dfa_state: prop("dfa_state")?.to_string(),
                enforcement: Verdict::parse(prop("enforcement")?)
                    .ok_or_else(|| shape("enforcement"))?,
                identity: prop("spiffe_svid")?.to_string(),
                finding_status: match remark("status")? {
                    "satisfied" => FindingStatus::Satisfied,
                    "not-satisfied" => FindingStatus::NotSatisfied,
                    _ => return Err(shape("remarks.status")),
                },
                prev_hash: parse_digest_prop(remark("prev")?)
                    .ok_or_else(|| shape("remarks.prev"))?,
                record_hash: parse_digest_prop(remark("hash")?)
                    .ok_or_else(|| shape("remarks.hash"))?,
            });
        }
    }
    Ok(records)
}
