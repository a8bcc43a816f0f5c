//! Simplified pseudonym PKI: Ed25519 key pairs, a two-level certificate
//! chain (root CA -> intermediate CA -> station), signed message envelopes,
//! and the key-purge primitive used as a mitigation.
//!
//! Signing is deliberately content-blind: the HSM signs whatever bytes it is
//! handed. A compromised sender therefore produces perfectly valid envelopes
//! around falsified payloads, which is exactly the gap the detection pipeline
//! covers.

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::messages::{ByteReader, ByteWriter, CodecError, StationId, TAG_CERTIFICATE, TAG_SIGNED};

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

/// Service-specific permission bits carried in certificates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct PermissionSet(pub u8);

impl PermissionSet {
    pub const SEND_CAM: PermissionSet = PermissionSet(1 << 0);
    pub const SEND_CPM: PermissionSet = PermissionSet(1 << 1);
    pub const SEND_DENM: PermissionSet = PermissionSet(1 << 2);
    pub const SEND_SPAT: PermissionSet = PermissionSet(1 << 3);
    pub const SEND_MAP: PermissionSet = PermissionSet(1 << 4);

    pub fn union(self, other: PermissionSet) -> PermissionSet {
        PermissionSet(self.0 | other.0)
    }

    pub fn allows(self, perm: PermissionSet) -> bool {
        self.0 & perm.0 == perm.0
    }

    /// Permission required to emit a payload with the given type tag, if the
    /// tag names a known payload type.
    pub fn required_for_tag(tag: u8) -> Option<PermissionSet> {
        match tag {
            crate::messages::TAG_CAM => Some(Self::SEND_CAM),
            crate::messages::TAG_CPM => Some(Self::SEND_CPM),
            crate::messages::TAG_DENM => Some(Self::SEND_DENM),
            crate::messages::TAG_SPAT => Some(Self::SEND_SPAT),
            crate::messages::TAG_MAP => Some(Self::SEND_MAP),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssuerKind {
    RootCa,
    IntermediateCa,
}

impl IssuerKind {
    fn to_byte(self) -> u8 {
        match self {
            IssuerKind::RootCa => 0,
            IssuerKind::IntermediateCa => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self, CodecError> {
        Ok(match b {
            0 => IssuerKind::RootCa,
            1 => IssuerKind::IntermediateCa,
            _ => return Err(CodecError::Malformed("unknown issuer kind".into())),
        })
    }
}

/// A station (or CA) certificate: subject identity, public key, permissions,
/// and the issuer's signature over those three fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject: StationId,
    pub subject_public_key: [u8; PUBLIC_KEY_LEN],
    pub permissions: PermissionSet,
    pub issuer: IssuerKind,
    pub issuer_signature: [u8; SIGNATURE_LEN],
}

impl Certificate {
    /// The to-be-signed bytes: (subject, subjectPublicKey, permissions).
    pub fn tbs_bytes(
        subject: StationId,
        public_key: &[u8; PUBLIC_KEY_LEN],
        permissions: PermissionSet,
    ) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u32(subject.0).bytes(public_key).u8(permissions.0);
        w.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u8(TAG_CERTIFICATE)
            .u32(self.subject.0)
            .bytes(&self.subject_public_key)
            .u8(self.permissions.0)
            .u8(self.issuer.to_byte())
            .bytes(&self.issuer_signature);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = ByteReader::new(bytes);
        let cert = Self::decode_from(&mut r)?;
        r.expect_end()?;
        Ok(cert)
    }

    fn decode_from(r: &mut ByteReader) -> Result<Self, CodecError> {
        let tag = r.u8()?;
        if tag != TAG_CERTIFICATE {
            return Err(CodecError::Malformed("expected certificate tag".into()));
        }
        Ok(Certificate {
            subject: StationId(r.u32()?),
            subject_public_key: r.bytes(PUBLIC_KEY_LEN)?.try_into().unwrap(),
            permissions: PermissionSet(r.u8()?),
            issuer: IssuerKind::from_byte(r.u8()?)?,
            issuer_signature: r.bytes(SIGNATURE_LEN)?.try_into().unwrap(),
        })
    }
}

/// An asymmetric key pair. The public half is derived from the private seed.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self { signing: SigningKey::from_bytes(&seed) }
    }

    pub fn public_key(&self) -> [u8; PUBLIC_KEY_LEN] {
        self.signing.verifying_key().to_bytes()
    }

    fn sign(&self, msg: &[u8]) -> [u8; SIGNATURE_LEN] {
        self.signing.sign(msg).to_bytes()
    }
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // The private half never leaves the HSM, including via logs.
        write!(f, "KeyPair(pub={})", hex8(&self.public_key()))
    }
}

fn hex8(b: &[u8]) -> String {
    b.iter().take(4).map(|x| format!("{x:02x}")).collect()
}

fn verify_raw(public_key: &[u8; PUBLIC_KEY_LEN], msg: &[u8], sig: &[u8; SIGNATURE_LEN]) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(public_key) else {
        return false;
    };
    vk.verify(msg, &Signature::from_bytes(sig)).is_ok()
}

/// Message envelope: canonical payload bytes, the sender certificate, and a
/// signature over the payload bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedMessage {
    pub payload_bytes: Vec<u8>,
    pub certificate: Certificate,
    pub signature: [u8; SIGNATURE_LEN],
}

impl SignedMessage {
    pub fn sender(&self) -> StationId {
        self.certificate.subject
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u8(TAG_SIGNED).u16(self.payload_bytes.len() as u16).bytes(&self.payload_bytes);
        w.bytes(&self.certificate.encode());
        w.bytes(&self.signature);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = ByteReader::new(bytes);
        let tag = r.u8()?;
        if tag != TAG_SIGNED {
            return Err(CodecError::Malformed("expected signed-message tag".into()));
        }
        let len = r.u16()? as usize;
        let payload_bytes = r.bytes(len)?.to_vec();
        let certificate = Certificate::decode_from(&mut r)?;
        let signature: [u8; SIGNATURE_LEN] = r.bytes(SIGNATURE_LEN)?.try_into().unwrap();
        r.expect_end()?;
        Ok(SignedMessage { payload_bytes, certificate, signature })
    }

    /// SHA-256 over the encoded envelope; the evidence currency of
    /// detection reports.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.encode());
        h.finalize().into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TrustError {
    /// The HSM keys were purged; this unit can no longer sign.
    #[error("keys purged")]
    KeysPurged,
}

/// Tamper-resistant key store. Holds the key pair and certificate until
/// purged; purging is permanent and idempotent, and the private key is never
/// exported.
#[derive(Debug, Clone)]
pub struct Hsm {
    inner: Option<(KeyPair, Certificate)>,
}

impl Hsm {
    pub fn new(key_pair: KeyPair, certificate: Certificate) -> Self {
        Self { inner: Some((key_pair, certificate)) }
    }

    pub fn is_purged(&self) -> bool {
        self.inner.is_none()
    }

    pub fn certificate(&self) -> Option<&Certificate> {
        self.inner.as_ref().map(|(_, c)| c)
    }

    /// Signs arbitrary payload bytes without inspecting them.
    pub fn sign(&self, payload_bytes: &[u8]) -> Result<SignedMessage, TrustError> {
        let (kp, cert) = self.inner.as_ref().ok_or(TrustError::KeysPurged)?;
        Ok(SignedMessage {
            payload_bytes: payload_bytes.to_vec(),
            certificate: cert.clone(),
            signature: kp.sign(payload_bytes),
        })
    }

    /// Destroys the private key material. Already-emitted messages remain
    /// verifiable; all subsequent sign calls fail.
    pub fn purge_keys(&mut self) {
        self.inner = None;
    }
}

/// Verification outcome; all cases are ordinary return values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    BadSignature,
    BadChain,
    PermissionDenied,
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Accept => "accept",
            Verdict::BadSignature => "bad_signature",
            Verdict::BadChain => "bad_chain",
            Verdict::PermissionDenied => "permission_denied",
        }
    }
}

/// What every receiver needs to validate chains: the root public key and the
/// intermediate CA certificate.
#[derive(Debug, Clone)]
pub struct TrustAnchor {
    pub root_public_key: [u8; PUBLIC_KEY_LEN],
    pub intermediate_cert: Certificate,
}

/// Verifies an envelope: certificate chain up to the root, signature over
/// the payload bytes, and the service-specific permission for the payload's
/// type tag.
pub fn verify(msg: &SignedMessage, anchor: &TrustAnchor) -> Verdict {
    let cert = &msg.certificate;
    let issuer_key = match cert.issuer {
        IssuerKind::RootCa => anchor.root_public_key,
        IssuerKind::IntermediateCa => {
            let ic = &anchor.intermediate_cert;
            let ic_tbs = Certificate::tbs_bytes(ic.subject, &ic.subject_public_key, ic.permissions);
            if ic.issuer != IssuerKind::RootCa
                || !verify_raw(&anchor.root_public_key, &ic_tbs, &ic.issuer_signature)
            {
                return Verdict::BadChain;
            }
            ic.subject_public_key
        }
    };
    let tbs = Certificate::tbs_bytes(cert.subject, &cert.subject_public_key, cert.permissions);
    if !verify_raw(&issuer_key, &tbs, &cert.issuer_signature) {
        return Verdict::BadChain;
    }
    if !verify_raw(&cert.subject_public_key, &msg.payload_bytes, &msg.signature) {
        return Verdict::BadSignature;
    }
    if let Some(required) = msg
        .payload_bytes
        .first()
        .and_then(|tag| PermissionSet::required_for_tag(*tag))
    {
        if !cert.permissions.allows(required) {
            return Verdict::PermissionDenied;
        }
    }
    Verdict::Accept
}

/// The issuing side of the two-level chain. Key material is derived
/// deterministically from a seed so scenario runs replay bit-exactly.
pub struct Pki {
    root: KeyPair,
    intermediate: KeyPair,
    intermediate_cert: Certificate,
}

fn derive_seed(seed: u64, label: &str, index: u32) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

/// Station id used for the intermediate CA's own certificate subject.
const INTERMEDIATE_SUBJECT: StationId = StationId(u32::MAX);

impl Pki {
    pub fn new(seed: u64) -> Self {
        let root = KeyPair::from_seed(derive_seed(seed, "root-ca", 0));
        let intermediate = KeyPair::from_seed(derive_seed(seed, "intermediate-ca", 0));
        let tbs = Certificate::tbs_bytes(
            INTERMEDIATE_SUBJECT,
            &intermediate.public_key(),
            PermissionSet(0),
        );
        let intermediate_cert = Certificate {
            subject: INTERMEDIATE_SUBJECT,
            subject_public_key: intermediate.public_key(),
            permissions: PermissionSet(0),
            issuer: IssuerKind::RootCa,
            issuer_signature: root.sign(&tbs),
        };
        Self { root, intermediate, intermediate_cert }
    }

    pub fn anchor(&self) -> TrustAnchor {
        TrustAnchor {
            root_public_key: self.root.public_key(),
            intermediate_cert: self.intermediate_cert.clone(),
        }
    }

    /// Issues a station certificate under the intermediate CA and returns the
    /// provisioned HSM. Repeated calls with distinct station ids model
    /// pseudonym sets for one physical actor.
    pub fn issue_station(&self, station: StationId, permissions: PermissionSet) -> Hsm {
        let kp = KeyPair::from_seed(derive_seed(
            u64::from_le_bytes(self.intermediate.public_key()[..8].try_into().unwrap()),
            "station",
            station.0,
        ));
        let tbs = Certificate::tbs_bytes(station, &kp.public_key(), permissions);
        let cert = Certificate {
            subject: station,
            subject_public_key: kp.public_key(),
            permissions,
            issuer: IssuerKind::IntermediateCa,
            issuer_signature: self.intermediate.sign(&tbs),
        };
        Hsm::new(kp, cert)
    }
}
