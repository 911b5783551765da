use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as X25519Public, StaticSecret};

use crate::Timestamp;

/// Length of public keys and private scalars, in bytes.
pub const KEY_LEN: usize = 32;

/// Tags rotate their key once a day.
pub const DEFAULT_ROTATION_PERIOD: u64 = 86_400;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TimeError {
    #[error("time {now} precedes pairing time {pairing_time}")]
    BeforePairing { now: Timestamp, pairing_time: Timestamp },
    #[error("rotation period must be positive")]
    ZeroPeriod,
    #[error("epoch {epoch} is later than the current epoch {current}")]
    FutureEpoch { epoch: u64, current: u64 },
    #[error("invalid master secret length {0}, expected 32")]
    SecretLength(usize),
}

/// Secret shared between a tag and its owner at pairing time.
#[derive(Clone, PartialEq, Eq)]
pub struct MasterSecret {
    bytes: [u8; 32],
    pairing_time: Timestamp,
}

impl MasterSecret {
    pub fn new(bytes: [u8; 32], pairing_time: Timestamp) -> Self {
        Self { bytes, pairing_time }
    }

    pub fn from_slice(bytes: &[u8], pairing_time: Timestamp) -> Result<Self, TimeError> {
        let bytes: [u8; 32] = bytes
            .try_into()
            .map_err(|_| TimeError::SecretLength(bytes.len()))?;
        Ok(Self::new(bytes, pairing_time))
    }

    pub fn bytes(&self) -> &[u8; 32] {
        &self.bytes
    }

    pub fn pairing_time(&self) -> Timestamp {
        self.pairing_time
    }

    /// Same secret, re-paired at a different time.
    pub fn with_pairing_time(&self, pairing_time: Timestamp) -> Self {
        Self { bytes: self.bytes, pairing_time }
    }
}

impl fmt::Debug for MasterSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MasterSecret")
            .field("bytes", &"<redacted>")
            .field("pairing_time", &self.pairing_time)
            .finish()
    }
}

/// A 32-byte X25519 public key (the u-coordinate only).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey(pub [u8; KEY_LEN]);

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.to_hex())
    }
}

impl From<[u8; KEY_LEN]> for PublicKey {
    fn from(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct EpochKeypair {
    pub epoch: u64,
    /// Clamped X25519 scalar.
    pub private_scalar: [u8; KEY_LEN],
    pub public_key: PublicKey,
}

impl fmt::Debug for EpochKeypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EpochKeypair")
            .field("epoch", &self.epoch)
            .field("public_key", &self.public_key)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotationPolicy {
    period: u64,
}

impl RotationPolicy {
    pub fn new(period: u64) -> Result<Self, TimeError> {
        if period == 0 {
            return Err(TimeError::ZeroPeriod);
        }
        Ok(Self { period })
    }

    pub fn period(&self) -> u64 {
        self.period
    }

    /// Start of `epoch` for a tag paired at `pairing_time`.
    pub fn epoch_start(&self, pairing_time: Timestamp, epoch: u64) -> Timestamp {
        pairing_time.saturating_add(epoch.saturating_mul(self.period))
    }
}

impl Default for RotationPolicy {
    fn default() -> Self {
        Self { period: DEFAULT_ROTATION_PERIOD }
    }
}

/// Derives the keypair a tag uses during `epoch`.
///
/// The scalar is `SHA-256(secret || epoch_be64)` clamped per RFC 7748 and the
/// public key is the X25519 base-point multiple of that scalar.
pub fn derive_epoch_keypair(secret: &MasterSecret, epoch: u64) -> EpochKeypair {
    let mut hasher = Sha256::new();
    hasher.update(secret.bytes);
    hasher.update(epoch.to_be_bytes());
    let mut scalar: [u8; KEY_LEN] = hasher.finalize().into();
    scalar[0] &= 248;
    scalar[31] &= 127;
    scalar[31] |= 64;

    let public = X25519Public::from(&StaticSecret::from(scalar));
    EpochKeypair {
        epoch,
        private_scalar: scalar,
        public_key: PublicKey(public.to_bytes()),
    }
}

/// Index of the key epoch active at `now`. Epoch `k` covers
/// `[pairing + k*period, pairing + (k+1)*period)`.
pub fn current_epoch(
    policy: RotationPolicy,
    pairing_time: Timestamp,
    now: Timestamp,
) -> Result<u64, TimeError> {
    if now < pairing_time {
        return Err(TimeError::BeforePairing { now, pairing_time });
    }
    Ok((now - pairing_time) / policy.period)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    fn zero_secret() -> MasterSecret {
        MasterSecret::new([0u8; 32], 0)
    }

    // Frozen from a Python script using `cryptography`'s X25519 on
    // SHA-256(secret || epoch_be64), clamped.
    const ZERO_SECRET_EPOCH0_SCALAR: &str =
        "2834ce1df23b838c5abf2a7f6437cca3d3067ed509ff25f11df6b11b582b516b";
    const ZERO_SECRET_EPOCH0_PUBLIC: &str =
        "fb118f87476b7c8ee15755872b735d6f05db8249de783b3fa21fdc7acd28db2d";
    const ZERO_SECRET_EPOCH5_PUBLIC: &str =
        "7b17c25a92fea5f20773401b674c5414c8a0b82c9626289e0fe171cea33a0f0d";
    const COUNTING_SECRET_EPOCH3_PUBLIC: &str =
        "1382bdcb3ccfafafddf80134d61dd85f4ef15b730184b563596735300b62a37f";

    #[test]
    fn matches_reference_vectors() {
        let kp = derive_epoch_keypair(&zero_secret(), 0);
        assert_eq!(hex::encode(kp.private_scalar), ZERO_SECRET_EPOCH0_SCALAR);
        assert_eq!(kp.public_key.to_hex(), ZERO_SECRET_EPOCH0_PUBLIC);
        assert_eq!(
            derive_epoch_keypair(&zero_secret(), 5).public_key.to_hex(),
            ZERO_SECRET_EPOCH5_PUBLIC
        );

        let counting: Vec<u8> = (0u8..32).collect();
        let secret = MasterSecret::from_slice(&counting, 1000).unwrap();
        assert_eq!(
            derive_epoch_keypair(&secret, 3).public_key.to_hex(),
            COUNTING_SECRET_EPOCH3_PUBLIC
        );
    }

    #[test]
    fn derivation_is_deterministic() {
        let s = MasterSecret::new([0x5a; 32], 10);
        assert_eq!(derive_epoch_keypair(&s, 5), derive_epoch_keypair(&s, 5));
        assert_ne!(
            derive_epoch_keypair(&s, 0).public_key,
            derive_epoch_keypair(&s, 1).public_key
        );
    }

    #[test]
    fn thousand_epochs_have_distinct_keys() {
        let s = MasterSecret::new([0x11; 32], 0);
        let keys: HashSet<_> = (0..1000)
            .map(|e| derive_epoch_keypair(&s, e).public_key)
            .collect();
        assert_eq!(keys.len(), 1000);
    }

    #[test]
    fn epoch_examples() {
        let p = RotationPolicy::default();
        assert_eq!(current_epoch(p, 0, 0), Ok(0));
        assert_eq!(current_epoch(p, 0, 129_600), Ok(1));
        assert_eq!(current_epoch(p, 0, 86_400), Ok(1));
        assert_eq!(current_epoch(p, 0, 86_399), Ok(0));
        assert_eq!(
            current_epoch(p, 100, 99),
            Err(TimeError::BeforePairing { now: 99, pairing_time: 100 })
        );
    }

    #[test]
    fn zero_period_rejected() {
        assert_eq!(RotationPolicy::new(0), Err(TimeError::ZeroPeriod));
        assert_eq!(RotationPolicy::new(10).unwrap().period(), 10);
    }

    #[test]
    fn secret_length_checked() {
        assert_eq!(
            MasterSecret::from_slice(&[0u8; 31], 0),
            Err(TimeError::SecretLength(31))
        );
    }

    proptest! {
        #[test]
        fn epoch_is_monotone_and_steps_at_boundaries(
            period in 1u64..200_000,
            pairing in 0u64..1_000_000,
            offset in 0u64..10_000_000,
        ) {
            let p = RotationPolicy::new(period).unwrap();
            let now = pairing + offset;
            let e = current_epoch(p, pairing, now).unwrap();
            let next = current_epoch(p, pairing, now + 1).unwrap();
            prop_assert!(next >= e);
            let crosses = (offset + 1) % period == 0;
            prop_assert_eq!(next - e, u64::from(crosses));
        }
    }
}
