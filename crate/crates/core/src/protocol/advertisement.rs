//! Over-the-air advertisement frame.
//!
//! Wire layout (34 bytes):
//!
//! ```text
//! mac[0..6]      key[0..6], with the two MSBs of mac[0] forced to 1
//! payload[0]     status byte (bit 0 = lost, bit 1 = battery low)
//! payload[1..27] key[6..32]
//! payload[27]    original two MSBs of key[0] in bits 0..2, rest zero
//! ```

use std::fmt;

use thiserror::Error;

use super::keys::{PublicKey, KEY_LEN};

pub const MAC_LEN: usize = 6;
pub const PAYLOAD_LEN: usize = 28;
pub const ADVERTISEMENT_LEN: usize = MAC_LEN + PAYLOAD_LEN;

const STATUS_LOST: u8 = 0x01;
const STATUS_BATTERY_LOW: u8 = 0x02;
const MAC_MSBS: u8 = 0xC0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("invalid length: expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("malformed advertisement: {0}")]
    Malformed(&'static str),
    #[error("invalid hex: {0}")]
    Hex(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TagStatus {
    pub lost: bool,
    pub battery_low: bool,
}

impl TagStatus {
    pub const LOST: Self = Self { lost: true, battery_low: false };
    pub const CONNECTED: Self = Self { lost: false, battery_low: false };

    pub fn to_byte(self) -> u8 {
        let mut b = 0;
        if self.lost {
            b |= STATUS_LOST;
        }
        if self.battery_low {
            b |= STATUS_BATTERY_LOW;
        }
        b
    }

    pub fn from_byte(b: u8) -> Result<Self, CodecError> {
        if b & !(STATUS_LOST | STATUS_BATTERY_LOW) != 0 {
            return Err(CodecError::Malformed("reserved status bits set"));
        }
        Ok(Self {
            lost: b & STATUS_LOST != 0,
            battery_low: b & STATUS_BATTERY_LOW != 0,
        })
    }
}

/// A raw advertisement as it appears on air. Any 34 bytes can be held here;
/// [`decode_advertisement`] is what enforces the layout.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Advertisement {
    pub mac: [u8; MAC_LEN],
    pub payload: [u8; PAYLOAD_LEN],
}

impl Advertisement {
    pub fn to_bytes(&self) -> [u8; ADVERTISEMENT_LEN] {
        let mut out = [0u8; ADVERTISEMENT_LEN];
        out[..MAC_LEN].copy_from_slice(&self.mac);
        out[MAC_LEN..].copy_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() != ADVERTISEMENT_LEN {
            return Err(CodecError::Length {
                expected: ADVERTISEMENT_LEN,
                actual: bytes.len(),
            });
        }
        let mut mac = [0u8; MAC_LEN];
        let mut payload = [0u8; PAYLOAD_LEN];
        mac.copy_from_slice(&bytes[..MAC_LEN]);
        payload.copy_from_slice(&bytes[MAC_LEN..]);
        Ok(Self { mac, payload })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, CodecError> {
        let bytes = hex::decode(s.trim()).map_err(|e| CodecError::Hex(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

impl fmt::Debug for Advertisement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Advertisement({})", self.to_hex())
    }
}

/// Packs a public key and status into an advertisement.
pub fn encode_advertisement(public_key: &[u8], status: TagStatus) -> Result<Advertisement, CodecError> {
    let key: &[u8; KEY_LEN] = public_key.try_into().map_err(|_| CodecError::Length {
        expected: KEY_LEN,
        actual: public_key.len(),
    })?;

    let mut mac = [0u8; MAC_LEN];
    mac.copy_from_slice(&key[..MAC_LEN]);
    mac[0] |= MAC_MSBS;

    let mut payload = [0u8; PAYLOAD_LEN];
    payload[0] = status.to_byte();
    payload[1..PAYLOAD_LEN - 1].copy_from_slice(&key[MAC_LEN..]);
    payload[PAYLOAD_LEN - 1] = key[0] >> 6;

    Ok(Advertisement { mac, payload })
}

/// Inverse of [`encode_advertisement`].
pub fn decode_advertisement(adv: &Advertisement) -> Result<(PublicKey, TagStatus), CodecError> {
    if adv.mac[0] & MAC_MSBS != MAC_MSBS {
        return Err(CodecError::Malformed("address MSBs not set"));
    }
    let bits = adv.payload[PAYLOAD_LEN - 1];
    if bits & !0x03 != 0 {
        return Err(CodecError::Malformed("reserved key bits set"));
    }
    let status = TagStatus::from_byte(adv.payload[0])?;

    let mut key = [0u8; KEY_LEN];
    key[..MAC_LEN].copy_from_slice(&adv.mac);
    key[0] = (adv.mac[0] & !MAC_MSBS) | (bits << 6);
    key[MAC_LEN..].copy_from_slice(&adv.payload[1..PAYLOAD_LEN - 1]);
    Ok((PublicKey(key), status))
}
