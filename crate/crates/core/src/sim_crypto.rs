//! Simulated hash function, signatures and threshold signatures.
//!
//! Cryptography is assumed perfect, so signatures carry the signer's identity and the digest
//! of the signed bytes instead of key material, and verification is structural. What makes
//! them unforgeable is that the only way to produce one is through a [`SigningKey`]: the
//! engine holds one per processor and hands the adversary keys only for processors it has
//! corrupted (see [`AdversaryKeys`]).

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// 1-based processor index.
pub type ProcessorId = u32;

/// A 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let bytes = hex::decode(s).ok()?;
        Some(Digest(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex characters"))
    }
}

/// Hashes `data` with SHA-256.
pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Hashes the concatenation of `parts` without materialising it.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("processor {signer} is not corrupted; the adversary cannot sign for it")]
    ForgeryAttempt { signer: ProcessorId },
    #[error("insufficient shares: {have} distinct signers, threshold {need}")]
    InsufficientShares { have: usize, need: u32 },
    #[error("shares belong to different threshold schemes")]
    MixedScheme,
    #[error("shares sign different messages")]
    MixedMessage,
}

/// A signature by `signer` on the message whose digest is `message_digest`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Signature {
    signer: ProcessorId,
    message_digest: Digest,
}

impl Signature {
    pub fn signer(&self) -> ProcessorId {
        self.signer
    }

    pub fn message_digest(&self) -> Digest {
        self.message_digest
    }

    pub fn verify(&self, signer: ProcessorId, message: &[u8]) -> bool {
        self.signer == signer && self.message_digest == hash(message)
    }

    /// Rebuilds a signature read back from a trace or wire encoding.
    pub(crate) fn from_parts(signer: ProcessorId, message_digest: Digest) -> Self {
        Signature { signer, message_digest }
    }
}

/// A k-of-n threshold scheme. The label separates the independent schemes a protocol uses
/// (e.g. the f+1 and n−f stage-2 schemes).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Scheme {
    pub threshold: u32,
    pub total: u32,
    pub label: String,
}

impl Scheme {
    pub fn new(threshold: u32, total: u32, label: &str) -> Self {
        Scheme { threshold, total, label: label.to_string() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ThresholdShare {
    scheme: Scheme,
    signer: ProcessorId,
    message_digest: Digest,
}

impl ThresholdShare {
    pub fn scheme(&self) -> &Scheme {
        &self.scheme
    }

    pub fn signer(&self) -> ProcessorId {
        self.signer
    }

    pub fn message_digest(&self) -> Digest {
        self.message_digest
    }

    pub(crate) fn from_parts(scheme: Scheme, signer: ProcessorId, message_digest: Digest) -> Self {
        ThresholdShare { scheme, signer, message_digest }
    }

    pub fn verify(&self, scheme: &Scheme, signer: ProcessorId, message: &[u8]) -> bool {
        &self.scheme == scheme
            && self.signer == signer
            && signer >= 1
            && signer <= scheme.total
            && self.message_digest == hash(message)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ThresholdCertificate {
    scheme: Scheme,
    message_digest: Digest,
    signers: Vec<ProcessorId>,
}

impl ThresholdCertificate {
    pub fn scheme(&self) -> &Scheme {
        &self.scheme
    }

    pub fn message_digest(&self) -> Digest {
        self.message_digest
    }

    /// Sorted, distinct.
    pub fn signers(&self) -> &[ProcessorId] {
        &self.signers
    }

    pub(crate) fn from_parts(scheme: Scheme, message_digest: Digest, signers: Vec<ProcessorId>) -> Self {
        ThresholdCertificate { scheme, message_digest, signers }
    }

    pub fn verify(&self, scheme: &Scheme, message: &[u8]) -> bool {
        &self.scheme == scheme
            && self.signers.len() >= scheme.threshold as usize
            && self.signers.windows(2).all(|w| w[0] < w[1])
            && self.signers.iter().all(|&s| s >= 1 && s <= scheme.total)
            && self.message_digest == hash(message)
    }
}

/// Combines shares into a certificate. Duplicate signers count once; extra shares beyond the
/// threshold are kept.
pub fn combine<'a, I>(shares: I) -> Result<ThresholdCertificate, CryptoError>
where
    I: IntoIterator<Item = &'a ThresholdShare>,
{
    let mut iter = shares.into_iter();
    let first = iter.next().ok_or(CryptoError::InsufficientShares { have: 0, need: 1 })?;
    let mut signers = BTreeSet::from([first.signer]);
    for s in iter {
        if s.scheme != first.scheme {
            return Err(CryptoError::MixedScheme);
        }
        if s.message_digest != first.message_digest {
            return Err(CryptoError::MixedMessage);
        }
        signers.insert(s.signer);
    }
    if signers.len() < first.scheme.threshold as usize {
        return Err(CryptoError::InsufficientShares {
            have: signers.len(),
            need: first.scheme.threshold,
        });
    }
    Ok(ThresholdCertificate {
        scheme: first.scheme.clone(),
        message_digest: first.message_digest,
        signers: signers.into_iter().collect(),
    })
}

/// The capability to sign as one processor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SigningKey {
    id: ProcessorId,
}

impl SigningKey {
    pub fn id(&self) -> ProcessorId {
        self.id
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature { signer: self.id, message_digest: hash(message) }
    }

    pub fn share(&self, scheme: &Scheme, message: &[u8]) -> ThresholdShare {
        ThresholdShare { scheme: scheme.clone(), signer: self.id, message_digest: hash(message) }
    }
}

/// The signing authority of a simulation: it alone issues keys. The engine, trace replay and
/// test fixtures own one; adversaries only ever see an [`AdversaryKeys`].
#[derive(Clone, Debug)]
pub struct KeyRing {
    n: u32,
}

impl KeyRing {
    pub fn new(n: u32) -> Self {
        KeyRing { n }
    }

    pub fn key(&self, id: ProcessorId) -> SigningKey {
        assert!(id >= 1 && id <= self.n, "processor {id} outside 1..={}", self.n);
        SigningKey { id }
    }

    pub fn sign(&self, signer: ProcessorId, message: &[u8]) -> Signature {
        self.key(signer).sign(message)
    }

    pub fn make_share(&self, signer: ProcessorId, scheme: &Scheme, message: &[u8]) -> ThresholdShare {
        self.key(signer).share(scheme, message)
    }
}

/// The adversary's view of the key ring: signing is refused for processors that are still
/// correct.
#[derive(Clone, Debug)]
pub struct AdversaryKeys {
    corrupted: BTreeSet<ProcessorId>,
}

impl AdversaryKeys {
    pub(crate) fn new(corrupted: BTreeSet<ProcessorId>) -> Self {
        AdversaryKeys { corrupted }
    }

    pub fn corrupted(&self) -> &BTreeSet<ProcessorId> {
        &self.corrupted
    }

    pub fn key(&self, signer: ProcessorId) -> Result<SigningKey, CryptoError> {
        if self.corrupted.contains(&signer) {
            Ok(SigningKey { id: signer })
        } else {
            Err(CryptoError::ForgeryAttempt { signer })
        }
    }

    pub fn sign(&self, signer: ProcessorId, message: &[u8]) -> Result<Signature, CryptoError> {
        Ok(self.key(signer)?.sign(message))
    }

    pub fn make_share(
        &self,
        signer: ProcessorId,
        scheme: &Scheme,
        message: &[u8],
    ) -> Result<ThresholdShare, CryptoError> {
        Ok(self.key(signer)?.share(scheme, message))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_and_zero_byte_hash_differ() {
        // SHA-256 test vectors.
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash(&[0u8]).to_hex(),
            "6e340b9cffb37a989ca544e6bb780a2c78901d3fb33738768511a30617afa01d"
        );
    }

    #[test]
    fn hash_parts_matches_concatenation() {
        assert_eq!(hash_parts(&[b"ab", b"", b"cd"]), hash(b"abcd"));
    }

    #[test]
    fn signatures_bind_signer_and_message() {
        let ring = KeyRing::new(4);
        let sig = ring.sign(1, b"m");
        assert!(sig.verify(1, b"m"));
        assert!(!sig.verify(2, b"m"));
        assert!(!sig.verify(1, b"m'"));
    }

    #[test]
    fn adversary_cannot_sign_for_correct_processors() {
        let keys = AdversaryKeys::new(BTreeSet::from([3]));
        assert!(keys.sign(3, b"m").is_ok());
        assert_eq!(keys.sign(1, b"m"), Err(CryptoError::ForgeryAttempt { signer: 1 }));
        let scheme = Scheme::new(2, 4, "t");
        assert_eq!(
            keys.make_share(2, &scheme, b"m"),
            Err(CryptoError::ForgeryAttempt { signer: 2 })
        );
    }

    #[test]
    fn combine_examples() {
        let ring = KeyRing::new(13);
        let scheme = Scheme::new(4, 13, "t");
        let shares: Vec<_> = (1..=4).map(|i| ring.make_share(i, &scheme, b"m")).collect();
        let cert = combine(&shares).unwrap();
        assert_eq!(cert.signers(), &[1, 2, 3, 4]);
        assert!(cert.verify(&scheme, b"m"));
        assert!(!cert.verify(&scheme, b"other"));

        assert_eq!(
            combine(&shares[..3]),
            Err(CryptoError::InsufficientShares { have: 3, need: 4 })
        );

        let dup = [shares[0].clone(), shares[0].clone(), shares[1].clone(), shares[2].clone()];
        assert!(matches!(combine(&dup), Err(CryptoError::InsufficientShares { have: 3, .. })));

        let mixed = [shares[0].clone(), ring.make_share(2, &scheme, b"x")];
        assert_eq!(combine(&mixed), Err(CryptoError::MixedMessage));

        let other = Scheme::new(4, 13, "u");
        let mixed = [shares[0].clone(), ring.make_share(2, &other, b"m")];
        assert_eq!(combine(&mixed), Err(CryptoError::MixedScheme));

        let scheme10 = Scheme::new(10, 13, "t");
        let all: Vec<_> = (1..=13).map(|i| ring.make_share(i, &scheme10, b"m")).collect();
        assert_eq!(combine(&all).unwrap().signers().len(), 13);
    }

    #[test]
    fn digest_serde_is_hex() {
        let d = hash(b"x");
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, format!("\"{}\"", d.to_hex()));
        assert_eq!(serde_json::from_str::<Digest>(&s).unwrap(), d);
    }

    proptest! {
        #[test]
        fn combine_round_trips(n in 1u32..=20, t in 1u32..=20, msg in proptest::collection::vec(any::<u8>(), 0..32)) {
            let t = t.min(n);
            let ring = KeyRing::new(n);
            let scheme = Scheme::new(t, n, "p");
            let shares: Vec<_> = (1..=t).map(|i| ring.make_share(i, &scheme, &msg)).collect();
            let cert = combine(&shares).unwrap();
            prop_assert!(cert.verify(&scheme, &msg));
            prop_assert_eq!(cert.signers().len(), t as usize);
        }
    }
}
