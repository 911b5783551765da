//! Desk-scale model of an offline-finding tracker network and a relay-attack
//! toolkit against it.
//!
//! - [`protocol`]: rotating tag keys and the advertisement codec
//! - [`crypto`]: encrypted location reports
//! - [`cloud`]: the blind report store and its TCP service
//! - [`relay`]: collector/relay-server/emitter toolkit
//! - [`owner`]: the owner's client and its display rules
//! - [`sim`]: deterministic discrete-event world tying it together
//! - [`presets`]: ready-made experiments

pub mod cloud;
pub mod crypto;
pub mod journal;
pub mod net;
pub mod owner;
pub mod presets;
pub mod protocol;
pub mod relay;
pub mod sim;
pub mod time;
pub mod wire;

/// Seconds on the virtual (or wall) clock.
pub type Timestamp = u64;

pub use cloud::{CloudStore, ReportRecord};
pub use crypto::{decrypt_report, encrypt_report, key_id, EncryptedReport, KeyId, LocationPayload};
pub use owner::{OwnerClient, OwnerConfig, OwnerView, ViewSource};
pub use protocol::{
    current_epoch, decode_advertisement, derive_epoch_keypair, encode_advertisement, Advertisement,
    EpochKeypair, MasterSecret, PublicKey, RotationPolicy, TagStatus,
};
pub use relay::{ObservationMsg, RelayState, ReplayCommand, StoredBeacon};
pub use sim::{EventLog, Scenario, Simulation};
