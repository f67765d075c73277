//! Digests, detached signatures, and the canonical wire encoding.
//!
//! Every signed or content-addressed value in this crate (policy mutations,
//! attestation quotes, action credentials, audit records, reset signals) is
//! serialized through [`CanonicalEncoder`] before hashing or signing, so the
//! byte layout is identical on every replica:
//!
//! - `u64` fields are written big-endian, 8 bytes;
//! - byte-string fields are written as a big-endian `u32` length prefix
//!   followed by the raw bytes;
//! - map-like fields are written as a `u32` entry count followed by the
//!   entries in ascending key order, each entry encoded field by field;
//! - fields appear in the fixed order documented on each type's
//!   `canonical_bytes` method.
//!
//! Signatures are Ed25519 over a domain tag (encoded as a byte-string field)
//! followed by the message's canonical bytes, keeping signatures for
//! different message kinds mutually unusable.

use ed25519_dalek::{Signer, Verifier};
use sha2::{Digest as _, Sha256};

/// 32-byte SHA-256 digest newtype used for Merkle roots, record hashes,
/// mutation ids, and simulated enclave measurements.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    /// Digest of the empty byte string; the genesis sentinel for hash chains
    /// and the Merkle root of an empty policy state.
    pub fn empty() -> Digest {
        Digest(Sha256::digest([]).into())
    }

    pub fn of(bytes: &[u8]) -> Digest {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let raw = hex::decode(s).ok()?;
        let arr: [u8; 32] = raw.try_into().ok()?;
        Some(Digest(arr))
    }
}

impl std::fmt::Debug for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl std::fmt::Display for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl serde::Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> serde::Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Digest::from_hex(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("bad digest hex {s:?}")))
    }
}

/// Append-only canonical byte writer. See the module docs for the layout.
#[derive(Default)]
pub struct CanonicalEncoder {
    buf: Vec<u8>,
}

impl CanonicalEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.buf.extend_from_slice(&d.0);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Hash `domain || bytes` where the domain tag is itself length-prefixed.
pub fn tagged_digest(domain: &str, bytes: &[u8]) -> Digest {
    let mut enc = CanonicalEncoder::new();
    enc.str(domain).bytes(bytes);
    Digest::of(&enc.finish())
}

/// Ed25519 signing key wrapper. Test and simulator keys are derived from
/// fixed 32-byte seeds so signatures are reproducible run to run.
#[derive(Clone)]
pub struct SigningKey {
    inner: ed25519_dalek::SigningKey,
}

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SigningKey(…)")
    }
}

/// Ed25519 verification key wrapper.
#[derive(Clone, PartialEq, Eq)]
pub struct VerifyingKey {
    inner: ed25519_dalek::VerifyingKey,
}

/// Detached signature over a domain-tagged canonical message.
#[derive(Clone, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl SigningKey {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self {
            inner: ed25519_dalek::SigningKey::from_bytes(&seed),
        }
    }

    /// Deterministic key for a named principal; used by fixtures and the
    /// simulator so scenario files never carry raw key material.
    pub fn for_principal(name: &str) -> Self {
        Self::from_seed(tagged_digest("ehv.keyseed", name.as_bytes()).0)
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        VerifyingKey {
            inner: self.inner.verifying_key(),
        }
    }

    pub fn sign(&self, domain: &str, message: &[u8]) -> Signature {
        let mut enc = CanonicalEncoder::new();
        enc.str(domain).bytes(message);
        Signature(self.inner.sign(&enc.finish()).to_bytes())
    }
}

impl VerifyingKey {
    pub fn verify(&self, domain: &str, message: &[u8], sig: &Signature) -> bool {
        let mut enc = CanonicalEncoder::new();
        enc.str(domain).bytes(message);
        let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
        self.inner.verify(&enc.finish(), &sig).is_ok()
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.inner.to_bytes()
    }
}

impl std::fmt::Debug for VerifyingKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VerifyingKey({})", &hex::encode(self.to_bytes())[..12])
    }
}

impl std::fmt::Debug for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Signature({})", &hex::encode(self.0)[..12])
    }
}
