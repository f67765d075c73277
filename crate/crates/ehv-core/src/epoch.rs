//! Simulated-TEE epoch attestation cache.
//!
//! A quote from the attestation authority commits one policy Merkle root per
//! epoch. Within the epoch, verification is a single digest comparison;
//! once the epoch TTL lapses without re-attestation the cache reports
//! HALTED and every action must be denied until a fresh attestation lands.
//! Time is logical simulator milliseconds throughout; nothing here reads a
//! wall clock.

use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::crypto::{CanonicalEncoder, Digest, Signature, SigningKey, VerifyingKey};

pub const QUOTE_DOMAIN: &str = "ehv.quote";
pub const RESET_DOMAIN: &str = "ehv.reset";

/// Default simulated attestation round-trip latency, ms.
pub const DEFAULT_ATTEST_LATENCY_MS: u64 = 200;

/// Logical simulator time in milliseconds.
pub type LogicalMs = u64;

/// Freshness verdict for the in-epoch check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freshness {
    /// Roots match within the epoch: exactly one digest comparison.
    Fresh,
    /// In-epoch but the local root differs from the committed root.
    Reattest,
    /// TTL exceeded; strict fail-closed.
    Halted,
}

/// A signed attestation quote binding a measurement to a policy root.
#[derive(Debug, Clone, PartialEq)]
pub struct AttestationQuote {
    pub measurement: Digest,
    pub policy_root: Digest,
    pub nonce: u64,
    pub signature: Signature,
}

impl AttestationQuote {
    fn canonical_bytes(measurement: &Digest, policy_root: &Digest, nonce: u64) -> Vec<u8> {
        let mut enc = CanonicalEncoder::new();
        enc.digest(measurement).digest(policy_root).u64(nonce);
        enc.finish()
    }
}

/// The simulated attestation authority: one signing key, one expected
/// enclave measurement per deployment.
#[derive(Debug, Clone)]
pub struct AttestationAuthority {
    key: SigningKey,
    measurement: Digest,
    latency_ms: u64,
}

impl AttestationAuthority {
    pub fn new(key: SigningKey, measurement: Digest) -> Self {
        Self {
            key,
            measurement,
            latency_ms: DEFAULT_ATTEST_LATENCY_MS,
        }
    }

    pub fn with_latency(mut self, latency_ms: u64) -> Self {
        self.latency_ms = latency_ms;
        self
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn measurement(&self) -> Digest {
        self.measurement
    }

    /// Simulated round-trip latency for one attestation.
    pub fn latency_ms(&self) -> u64 {
        self.latency_ms
    }

    pub fn issue_quote(&self, policy_root: Digest, nonce: u64) -> AttestationQuote {
        let canon = AttestationQuote::canonical_bytes(&self.measurement, &policy_root, nonce);
        AttestationQuote {
            measurement: self.measurement,
            policy_root,
            nonce,
            signature: self.key.sign(QUOTE_DOMAIN, &canon),
        }
    }
}

/// Signed emergency-reset message; requires policy-authority signing keys,
/// distinct in role from the attestation authority.
#[derive(Debug, Clone, PartialEq)]
pub struct ResetSignal {
    pub issuer: String,
    pub nonce: u64,
    pub signature: Signature,
}

impl ResetSignal {
    pub fn sign(issuer: &str, nonce: u64, key: &SigningKey) -> Self {
        let canon = Self::canonical_bytes(issuer, nonce);
        Self {
            issuer: issuer.to_string(),
            nonce,
            signature: key.sign(RESET_DOMAIN, &canon),
        }
    }

    /// Canonical bytes: issuer, then nonce.
    pub fn canonical_bytes(issuer: &str, nonce: u64) -> Vec<u8> {
        let mut enc = CanonicalEncoder::new();
        enc.str(issuer).u64(nonce);
        enc.finish()
    }

    /// An unsigned placeholder for testing rejection paths.
    pub fn unsigned(issuer: &str, nonce: u64) -> Self {
        Self {
            issuer: issuer.to_string(),
            nonce,
            signature: Signature([0u8; 64]),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttestError {
    #[error("quote signature invalid")]
    BadSignature,
    #[error("quote measurement {got} does not match expected {expected}")]
    WrongMeasurement { expected: Digest, got: Digest },
}

/// Why an emergency reset was not accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResetRejection {
    Unauthorized,
    RateLimited { since_last_ms: u64, minimum_ms: u64 },
}

/// Per-node attestation cache state.
#[derive(Debug, Clone)]
pub struct EpochState {
    epoch_seq: u64,
    committed_root: Digest,
    expected_measurement: Digest,
    authority_key: VerifyingKey,
    reset_authority: Vec<VerifyingKey>,
    last_attest: LogicalMs,
    ttl_ms: u64,
    halted: bool,
    last_forced_reset: Option<LogicalMs>,
    attested_once: bool,
    /// Digest comparisons performed on the FRESH path; the in-epoch cost
    /// is independent of policy-set size, and this makes that assertable.
    pub digest_comparisons: u64,
}

impl EpochState {
    /// A cache that has never attested: reports HALTED until the first
    /// successful attestation.
    pub fn new(ttl_ms: u64, expected_measurement: Digest, authority_key: VerifyingKey) -> Self {
        Self {
            epoch_seq: 0,
            committed_root: Digest::ZERO,
            expected_measurement,
            authority_key,
            reset_authority: Vec::new(),
            last_attest: 0,
            ttl_ms,
            halted: true,
            last_forced_reset: None,
            attested_once: false,
            digest_comparisons: 0,
        }
    }

    pub fn register_reset_authority(&mut self, key: VerifyingKey) {
        self.reset_authority.push(key);
    }

    pub fn ttl_ms(&self) -> u64 {
        self.ttl_ms
    }

    pub fn committed_root(&self) -> Digest {
        self.committed_root
    }

    pub fn measurement(&self) -> Digest {
        self.expected_measurement
    }

    pub fn last_attest(&self) -> LogicalMs {
        self.last_attest
    }

    /// End of the current epoch: the staleness instant is one past this.
    pub fn epoch_end(&self) -> LogicalMs {
        self.last_attest + self.ttl_ms
    }

    /// Monotonic epoch sequence number, 1-based after the first attestation.
    pub fn epoch_seq(&self) -> u64 {
        self.epoch_seq
    }

    /// Epoch label as it appears in audit records, e.g. `E-042`.
    pub fn epoch_label(&self) -> String {
        format!("E-{:03}", self.epoch_seq)
    }

    pub fn is_halted(&self, now: LogicalMs) -> bool {
        !self.attested_once || self.halted || now.saturating_sub(self.last_attest) > self.ttl_ms
    }

    /// Apply a verified attestation at `now` (the completion instant; the
    /// caller accounts for the authority round-trip latency). A bad quote
    /// leaves the state untouched, including any halt.
    pub fn attest(&mut self, quote: &AttestationQuote, now: LogicalMs) -> Result<(), AttestError> {
        let canon =
            AttestationQuote::canonical_bytes(&quote.measurement, &quote.policy_root, quote.nonce);
        if !self
            .authority_key
            .verify(QUOTE_DOMAIN, &canon, &quote.signature)
        {
            return Err(AttestError::BadSignature);
        }
        if quote.measurement != self.expected_measurement {
            return Err(AttestError::WrongMeasurement {
                expected: self.expected_measurement,
                got: quote.measurement,
            });
        }
        self.epoch_seq += 1;
        self.committed_root = quote.policy_root;
        self.last_attest = now;
        self.halted = false;
        self.attested_once = true;
        Ok(())
    }

    /// Synchronize the halt flag with the clock; true when halted. Every
    /// observation point past the TTL latches the halt.
    pub fn observe(&mut self, now: LogicalMs) -> bool {
        if !self.attested_once || now.saturating_sub(self.last_attest) > self.ttl_ms {
            self.halted = true;
        }
        self.halted
    }

    /// In-epoch verification. Staleness dominates: past the TTL the answer
    /// is HALTED no matter what the roots say. The FRESH path performs
    /// exactly one digest comparison.
    pub fn verify(&mut self, local_root: &Digest, now: LogicalMs) -> Freshness {
        if !self.attested_once || now.saturating_sub(self.last_attest) > self.ttl_ms {
            self.halted = true;
            return Freshness::Halted;
        }
        self.digest_comparisons += 1;
        if *local_root == self.committed_root {
            Freshness::Fresh
        } else {
            Freshness::Reattest
        }
    }

    /// Authenticated, rate-limited forced reset: at most one accepted reset
    /// per `ttl/2`. Acceptance means the caller must attest immediately;
    /// rejection leaves the state unchanged and should be logged as a
    /// security observation.
    pub fn emergency_reset(
        &mut self,
        signal: &ResetSignal,
        now: LogicalMs,
    ) -> Result<(), ResetRejection> {
        let canon = ResetSignal::canonical_bytes(&signal.issuer, signal.nonce);
        let authorized = self
            .reset_authority
            .iter()
            .any(|k| k.verify(RESET_DOMAIN, &canon, &signal.signature));
        if !authorized {
            return Err(ResetRejection::Unauthorized);
        }
        let minimum = self.ttl_ms / 2;
        if let Some(last) = self.last_forced_reset {
            let since = now.saturating_sub(last);
            if since < minimum {
                return Err(ResetRejection::RateLimited {
                    since_last_ms: since,
                    minimum_ms: minimum,
                });
            }
        }
        self.last_forced_reset = Some(now);
        Ok(())
    }
}

/// Shared view of one node's epoch state. The node's event loop is the
/// writer; the enforcement point reads (and bumps verification counters)
/// through the same handle. Each access is atomic per event.
#[derive(Debug, Clone)]
pub struct EpochHandle(Arc<Mutex<EpochState>>);

impl EpochHandle {
    pub fn new(state: EpochState) -> Self {
        Self(Arc::new(Mutex::new(state)))
    }

    pub fn read<R>(&self, f: impl FnOnce(&EpochState) -> R) -> R {
        f(&self.0.lock().expect("epoch lock"))
    }

    pub fn write<R>(&self, f: impl FnOnce(&mut EpochState) -> R) -> R {
        f(&mut self.0.lock().expect("epoch lock"))
    }

    pub fn verify(&self, local_root: &Digest, now: LogicalMs) -> Freshness {
        self.write(|e| e.verify(local_root, now))
    }
}
