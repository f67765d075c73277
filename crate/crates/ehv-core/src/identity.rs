//! Workload identities and epoch-scoped action credentials.
//!
//! Each agent instance is a non-human identity named by a URI
//! (`spiffe://<trust_domain><path>`). Before an action class may be
//! exercised inside an epoch, the deployment's credential issuer mints a
//! short-lived credential bound to that epoch and to the attested enclave
//! measurement, expiring at the epoch end. A credential replayed into a
//! later epoch, against a different measurement, for a different scope, or
//! past its expiry is invalid — and once invalid it can never become valid
//! again.

use thiserror::Error;

use crate::crypto::{CanonicalEncoder, Digest, Signature, SigningKey, VerifyingKey};
use crate::epoch::{EpochState, LogicalMs};

pub const CREDENTIAL_DOMAIN: &str = "ehv.credential";

/// An agent workload identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadIdentity {
    pub trust_domain: String,
    pub path: String,
    pub key: VerifyingKey,
}

impl WorkloadIdentity {
    pub fn new(trust_domain: &str, path: &str, key: VerifyingKey) -> Self {
        Self {
            trust_domain: trust_domain.to_string(),
            path: path.to_string(),
            key,
        }
    }

    /// URI form used verbatim in audit records.
    pub fn uri(&self) -> String {
        format!("spiffe://{}{}", self.trust_domain, self.path)
    }
}

/// A scoped, epoch-bound, measurement-bound action credential.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionCredential {
    pub subject: String,
    pub action_class: String,
    pub epoch_seq: u64,
    pub expiry: LogicalMs,
    pub measurement: Digest,
    pub signature: Signature,
}

impl ActionCredential {
    /// Canonical bytes: subject URI, action class, epoch sequence, expiry,
    /// measurement.
    pub fn canonical_bytes(
        subject: &str,
        action_class: &str,
        epoch_seq: u64,
        expiry: LogicalMs,
        measurement: &Digest,
    ) -> Vec<u8> {
        let mut enc = CanonicalEncoder::new();
        enc.str(subject)
            .str(action_class)
            .u64(epoch_seq)
            .u64(expiry)
            .digest(measurement);
        enc.finish()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IssueError {
    #[error("cannot issue credentials while the epoch is halted")]
    Halted,
    #[error("subject {0:?} is not registered")]
    UnknownSubject(String),
}

/// Why a credential failed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidCredential {
    Signature,
    ScopeMismatch,
    Expired,
    EpochMismatch,
    MeasurementMismatch,
}

/// Deployment-level credential issuer: registry of workload identities plus
/// the issuing key nodes validate against.
#[derive(Debug, Clone)]
pub struct CredentialIssuer {
    key: SigningKey,
    subjects: Vec<WorkloadIdentity>,
}

impl CredentialIssuer {
    pub fn new(key: SigningKey) -> Self {
        Self {
            key,
            subjects: Vec::new(),
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn register(&mut self, identity: WorkloadIdentity) {
        self.subjects.push(identity);
    }

    pub fn subject(&self, uri: &str) -> Option<&WorkloadIdentity> {
        self.subjects.iter().find(|s| s.uri() == uri)
    }

    /// Issue a credential for `action_class` inside the current epoch,
    /// expiring at the epoch end. Refused while halted.
    pub fn issue(
        &self,
        subject_uri: &str,
        action_class: &str,
        epoch: &EpochState,
        now: LogicalMs,
    ) -> Result<ActionCredential, IssueError> {
        if epoch.is_halted(now) {
            return Err(IssueError::Halted);
        }
        let subject = self
            .subject(subject_uri)
            .ok_or_else(|| IssueError::UnknownSubject(subject_uri.to_string()))?;
        let expiry = epoch.epoch_end();
        let canon = ActionCredential::canonical_bytes(
            &subject.uri(),
            action_class,
            epoch.epoch_seq(),
            expiry,
            &epoch.measurement(),
        );
        Ok(ActionCredential {
            subject: subject.uri(),
            action_class: action_class.to_string(),
            epoch_seq: epoch.epoch_seq(),
            expiry,
            measurement: epoch.measurement(),
            signature: self.key.sign(CREDENTIAL_DOMAIN, &canon),
        })
    }
}

/// Validate a credential against the current epoch. Invalidity is a value
/// with an enumerated reason, not a fault.
pub fn validate_credential(
    cred: &ActionCredential,
    action_class: &str,
    issuer_key: &VerifyingKey,
    epoch: &EpochState,
    now: LogicalMs,
) -> Result<(), InvalidCredential> {
    let canon = ActionCredential::canonical_bytes(
        &cred.subject,
        &cred.action_class,
        cred.epoch_seq,
        cred.expiry,
        &cred.measurement,
    );
    if !issuer_key.verify(CREDENTIAL_DOMAIN, &canon, &cred.signature) {
        return Err(InvalidCredential::Signature);
    }
    if cred.action_class != action_class {
        return Err(InvalidCredential::ScopeMismatch);
    }
    // Valid through the expiry instant itself (the epoch boundary); any
    // later use is rejected. Freshness and credential validity share the
    // same inclusive boundary.
    if now > cred.expiry {
        return Err(InvalidCredential::Expired);
    }
    if cred.epoch_seq != epoch.epoch_seq() {
        return Err(InvalidCredential::EpochMismatch);
    }
    if cred.measurement != epoch.measurement() {
        return Err(InvalidCredential::MeasurementMismatch);
    }
    Ok(())
}
