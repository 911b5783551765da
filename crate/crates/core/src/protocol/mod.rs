//! Tag-side protocol: the rotating key schedule and the advertisement frame
//! that carries the current public key over the air.

mod advertisement;
mod keys;

pub use advertisement::{
    decode_advertisement, encode_advertisement, Advertisement, CodecError, TagStatus,
    ADVERTISEMENT_LEN, MAC_LEN, PAYLOAD_LEN,
};
pub use keys::{
    current_epoch, derive_epoch_keypair, EpochKeypair, MasterSecret, PublicKey, RotationPolicy,
    TimeError, DEFAULT_ROTATION_PERIOD, KEY_LEN,
};
