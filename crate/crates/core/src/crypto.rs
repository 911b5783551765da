//! Finder-side encryption of location reports and owner-side decryption.
//!
//! Each report is an ephemeral-static X25519 exchange against the tag's
//! advertised key. The symmetric key is
//! `SHA-256(shared || ephemeral_public || tag_public)` and the 25-byte
//! payload is sealed with ChaCha20-Poly1305 under a random 96-bit nonce.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as X25519Public, StaticSecret};

use crate::protocol::{PublicKey, KEY_LEN};
use crate::Timestamp;

pub const PAYLOAD_LEN: usize = 25;
pub const TAG_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;
pub const CIPHERTEXT_LEN: usize = PAYLOAD_LEN + TAG_LEN;
/// Bytes before the ciphertext in the wire encoding.
pub const WIRE_HEADER_LEN: usize = 32 + 32 + NONCE_LEN + 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("invalid location: {0}")]
    Validation(String),
    #[error("codec error: {0}")]
    Codec(String),
    #[error("authentication failed (wrong key or tampered report)")]
    WrongKey,
}

/// What a finder reports about where it heard a tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationPayload {
    pub latitude: f64,
    pub longitude: f64,
    /// Meters, saturating at 255.
    pub accuracy: u8,
    pub observed_at: Timestamp,
}

impl LocationPayload {
    pub fn new(latitude: f64, longitude: f64, accuracy: u8, observed_at: Timestamp) -> Result<Self, CryptoError> {
        let p = Self { latitude, longitude, accuracy, observed_at };
        p.validate()?;
        Ok(p)
    }

    /// Accuracy given in (possibly fractional or oversized) meters.
    pub fn with_accuracy_m(latitude: f64, longitude: f64, accuracy_m: f64, observed_at: Timestamp) -> Result<Self, CryptoError> {
        let accuracy = accuracy_m.round().clamp(0.0, 255.0) as u8;
        Self::new(latitude, longitude, accuracy, observed_at)
    }

    pub fn validate(&self) -> Result<(), CryptoError> {
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(CryptoError::Validation(format!("latitude {} out of range", self.latitude)));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(CryptoError::Validation(format!("longitude {} out of range", self.longitude)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> [u8; PAYLOAD_LEN] {
        let mut out = [0u8; PAYLOAD_LEN];
        out[0..8].copy_from_slice(&self.latitude.to_be_bytes());
        out[8..16].copy_from_slice(&self.longitude.to_be_bytes());
        out[16] = self.accuracy;
        out[17..25].copy_from_slice(&self.observed_at.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != PAYLOAD_LEN {
            return Err(CryptoError::Codec(format!("payload is {} bytes, expected {PAYLOAD_LEN}", bytes.len())));
        }
        let f = |r: std::ops::Range<usize>| -> [u8; 8] { bytes[r].try_into().unwrap() };
        let p = Self {
            latitude: f64::from_be_bytes(f(0..8)),
            longitude: f64::from_be_bytes(f(8..16)),
            accuracy: bytes[16],
            observed_at: u64::from_be_bytes(f(17..25)),
        };
        p.validate().map_err(|e| CryptoError::Codec(e.to_string()))?;
        Ok(p)
    }
}

/// Cloud index for a public key: `SHA-256(public_key)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub [u8; 32]);

impl KeyId {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(s).map_err(|e| CryptoError::Codec(e.to_string()))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|b: Vec<u8>| CryptoError::Codec(format!("key id is {} bytes, expected 32", b.len())))?;
        Ok(Self(arr))
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({})", self.to_hex())
    }
}

impl From<&PublicKey> for KeyId {
    fn from(pk: &PublicKey) -> Self {
        Self(Sha256::digest(pk.as_bytes()).into())
    }
}

pub fn key_id(public_key: &[u8]) -> Result<KeyId, CryptoError> {
    if public_key.len() != KEY_LEN {
        return Err(CryptoError::Codec(format!("public key is {} bytes, expected {KEY_LEN}", public_key.len())));
    }
    Ok(KeyId(Sha256::digest(public_key).into()))
}

#[derive(Clone, PartialEq, Eq)]
pub struct EncryptedReport {
    pub key_id: KeyId,
    pub ephemeral_public: [u8; 32],
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    /// Upload time. Not part of the wire encoding; the store keeps its own
    /// receive time.
    pub uploaded_at: Timestamp,
}

impl fmt::Debug for EncryptedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncryptedReport")
            .field("key_id", &self.key_id)
            .field("ciphertext_len", &self.ciphertext.len())
            .field("uploaded_at", &self.uploaded_at)
            .finish_non_exhaustive()
    }
}

impl EncryptedReport {
    /// `key_id(32) || ephemeral_public(32) || nonce(12) || len(2, BE) || ciphertext`
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(WIRE_HEADER_LEN + self.ciphertext.len());
        out.extend_from_slice(&self.key_id.0);
        out.extend_from_slice(&self.ephemeral_public);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.ciphertext.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_wire(bytes: &[u8], uploaded_at: Timestamp) -> Result<Self, CryptoError> {
        if bytes.len() < WIRE_HEADER_LEN {
            return Err(CryptoError::Codec(format!("report truncated at {} bytes", bytes.len())));
        }
        let declared = u16::from_be_bytes([bytes[76], bytes[77]]) as usize;
        let body = &bytes[WIRE_HEADER_LEN..];
        if body.len() != declared {
            return Err(CryptoError::Codec(format!(
                "ciphertext length field says {declared}, found {}",
                body.len()
            )));
        }
        Ok(Self {
            key_id: KeyId(bytes[0..32].try_into().unwrap()),
            ephemeral_public: bytes[32..64].try_into().unwrap(),
            nonce: bytes[64..76].try_into().unwrap(),
            ciphertext: body.to_vec(),
            uploaded_at,
        })
    }
}

fn symmetric_key(shared: &[u8; 32], ephemeral_public: &[u8; 32], tag_public: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(shared);
    h.update(ephemeral_public);
    h.update(tag_public);
    h.finalize().into()
}

/// Seals `payload` to `tag_public_key`. Each call uses a fresh ephemeral key
/// and nonce drawn from `rng`.
pub fn encrypt_report<R: RngCore + CryptoRng>(
    payload: &LocationPayload,
    tag_public_key: &[u8],
    rng: &mut R,
) -> Result<EncryptedReport, CryptoError> {
    payload.validate()?;
    let tag_pk: [u8; 32] = tag_public_key
        .try_into()
        .map_err(|_| CryptoError::Codec(format!("public key is {} bytes, expected 32", tag_public_key.len())))?;

    let ephemeral = StaticSecret::random_from_rng(&mut *rng);
    let ephemeral_public = X25519Public::from(&ephemeral).to_bytes();
    let shared = ephemeral.diffie_hellman(&X25519Public::from(tag_pk));
    let key = symmetric_key(shared.as_bytes(), &ephemeral_public, &tag_pk);

    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key));
    let ciphertext = cipher
        .encrypt(Nonce::from_slice(&nonce), payload.to_bytes().as_slice())
        .map_err(|_| CryptoError::Codec("encryption failed".into()))?;

    Ok(EncryptedReport {
        key_id: key_id(&tag_pk)?,
        ephemeral_public,
        nonce,
        ciphertext,
        uploaded_at: payload.observed_at,
    })
}

pub fn decrypt_report(report: &EncryptedReport, private_scalar: &[u8]) -> Result<LocationPayload, CryptoError> {
    let scalar: [u8; 32] = private_scalar
        .try_into()
        .map_err(|_| CryptoError::Codec(format!("private scalar is {} bytes, expected 32", private_scalar.len())))?;
    if report.ciphertext.len() != CIPHERTEXT_LEN {
        return Err(CryptoError::Codec(format!(
            "ciphertext is {} bytes, expected {CIPHERTEXT_LEN}",
            report.ciphertext.len()
        )));
    }

    let secret = StaticSecret::from(scalar);
    let tag_public = X25519Public::from(&secret).to_bytes();
    let shared = secret.diffie_hellman(&X25519Public::from(report.ephemeral_public));
    let key = symmetric_key(shared.as_bytes(), &report.ephemeral_public, &tag_public);

    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key));
    let plain = cipher
        .decrypt(Nonce::from_slice(&report.nonce), report.ciphertext.as_slice())
        .map_err(|_| CryptoError::WrongKey)?;
    LocationPayload::from_bytes(&plain)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use super::*;
    use crate::protocol::{derive_epoch_keypair, MasterSecret};

    // Built with Python `cryptography`: tag key = zero secret epoch 0,
    // ephemeral scalar 32x0x07, nonce 00..0b, payload (48.2082, 16.3738, 10, 1234).
    const REFERENCE_PAYLOAD_HEX: &str = "40481aa64c2f837b40305fb15b573eab0a00000000000004d2";
    const REFERENCE_WIRE_HEX: &str = "2618ba9d5deace70c5432e8e5946bfe8bfacbc20863b4b4c110185f6218fea7313be4feaeaf204c7fd3358fc9c00721881d174278128227ec674f37f7fe97b6d000102030405060708090a0b00297c7b7f4d7ed30c0d63e2537e96b90d015ea8a6a4a44cc8542c76c5ba385d9f93c64d36b5c6c83a6464";

    fn sample() -> LocationPayload {
        LocationPayload::new(48.2082, 16.3738, 10, 1234).unwrap()
    }

    fn keys(epoch: u64) -> crate::protocol::EpochKeypair {
        derive_epoch_keypair(&MasterSecret::new([0u8; 32], 0), epoch)
    }

    #[test]
    fn payload_serialization_matches_reference() {
        assert_eq!(hex::encode(sample().to_bytes()), REFERENCE_PAYLOAD_HEX);
    }

    #[test]
    fn decrypts_reference_report() {
        let wire = hex::decode(REFERENCE_WIRE_HEX).unwrap();
        let report = EncryptedReport::from_wire(&wire, 0).unwrap();
        assert_eq!(report.to_wire(), wire);
        let kp = keys(0);
        assert_eq!(report.key_id, KeyId::from(&kp.public_key));
        assert_eq!(decrypt_report(&report, &kp.private_scalar).unwrap(), sample());
        assert_eq!(decrypt_report(&report, &keys(1).private_scalar), Err(CryptoError::WrongKey));
    }

    #[test]
    fn key_id_of_zero_key() {
        assert_eq!(
            key_id(&[0u8; 32]).unwrap().to_hex(),
            "66687aadf862bd776c8fc18b8e9f8e20089714856ee233b3902a591d0d5f2925"
        );
        assert_eq!(key_id(&[0u8; 32]), key_id(&[0u8; 32]));
        assert!(key_id(&[0u8; 16]).is_err());
        assert_ne!(KeyId::from(&keys(0).public_key), KeyId::from(&keys(1).public_key));
    }

    #[test]
    fn round_trip_and_randomization() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let kp = keys(3);
        let a = encrypt_report(&sample(), kp.public_key.as_bytes(), &mut rng).unwrap();
        let b = encrypt_report(&sample(), kp.public_key.as_bytes(), &mut rng).unwrap();
        assert_ne!(a.ciphertext, b.ciphertext);
        assert_ne!(a.ephemeral_public, b.ephemeral_public);
        assert_eq!(a.key_id, b.key_id);
        assert_eq!(decrypt_report(&a, &kp.private_scalar).unwrap(), sample());
        assert_eq!(decrypt_report(&b, &kp.private_scalar).unwrap(), sample());
    }

    #[test]
    fn wrong_epoch_key_fails() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let r = encrypt_report(&sample(), keys(0).public_key.as_bytes(), &mut rng).unwrap();
        assert_eq!(decrypt_report(&r, &keys(1).private_scalar), Err(CryptoError::WrongKey));
    }

    #[test]
    fn tampering_and_truncation() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let kp = keys(0);
        let r = encrypt_report(&sample(), kp.public_key.as_bytes(), &mut rng).unwrap();

        let mut flipped = r.clone();
        flipped.ciphertext[4] ^= 0x01;
        assert_eq!(decrypt_report(&flipped, &kp.private_scalar), Err(CryptoError::WrongKey));

        let mut short = r.clone();
        short.ciphertext.truncate(30);
        assert!(matches!(decrypt_report(&short, &kp.private_scalar), Err(CryptoError::Codec(_))));

        let wire = r.to_wire();
        assert!(matches!(EncryptedReport::from_wire(&wire[..wire.len() - 1], 0), Err(CryptoError::Codec(_))));
        assert!(matches!(EncryptedReport::from_wire(&wire[..40], 0), Err(CryptoError::Codec(_))));
    }

    #[test]
    fn payload_bounds() {
        assert!(LocationPayload::new(90.5, 0.0, 0, 0).is_err());
        assert!(LocationPayload::new(0.0, -180.1, 0, 0).is_err());
        assert!(LocationPayload::new(f64::NAN, 0.0, 0, 0).is_err());
        assert_eq!(LocationPayload::with_accuracy_m(0.0, 0.0, 1000.0, 0).unwrap().accuracy, 255);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let bad = LocationPayload { latitude: 91.0, longitude: 0.0, accuracy: 0, observed_at: 0 };
        assert!(matches!(
            encrypt_report(&bad, keys(0).public_key.as_bytes(), &mut rng),
            Err(CryptoError::Validation(_))
        ));
    }

    proptest! {
        #[test]
        fn payload_round_trips(
            lat in -90.0f64..=90.0,
            lon in -180.0f64..=180.0,
            acc in any::<u8>(),
            t in any::<u64>(),
        ) {
            let p = LocationPayload::new(lat, lon, acc, t).unwrap();
            let bytes = p.to_bytes();
            prop_assert_eq!(bytes.len(), PAYLOAD_LEN);
            prop_assert_eq!(LocationPayload::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        }
    }
}
