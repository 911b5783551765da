//! Owner-side client: works out which key ids to ask the cloud for, decrypts
//! what comes back, listens for the tag locally, and reduces all of it to
//! the single [`OwnerView`] the owner gets to see.
//!
//! Display rules:
//! - a local beacon heard within `local_window` overrides every cloud report,
//!   even when the beacon carries a key from an earlier epoch;
//! - cloud reports are only displayable while their epoch equals the newest
//!   epoch observed so far, so one report under a newer key retires all older
//!   ones for good;
//! - whatever is displayed is flagged outdated once its key epoch ended
//!   `outdated_after` seconds ago or more.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cloud::{ReportRecord, ReportSource, StoreError};
use crate::crypto::{decrypt_report, KeyId, LocationPayload};
use crate::protocol::{
    current_epoch, decode_advertisement, derive_epoch_keypair, Advertisement, EpochKeypair,
    MasterSecret, PublicKey, RotationPolicy, TimeError,
};
use crate::Timestamp;

pub const SEVEN_DAYS: u64 = 7 * 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OwnerConfig {
    /// How long a local sighting keeps overriding the cloud.
    pub local_window: u64,
    /// Number of epochs (ending with the current one) queried per fetch.
    pub query_epochs: u64,
    pub outdated_after: u64,
    /// Displayable cloud entries older than this, relative to the newest one,
    /// are discarded.
    pub cloud_retention: u64,
}

impl Default for OwnerConfig {
    fn default() -> Self {
        Self { local_window: 60, query_epochs: 9, outdated_after: SEVEN_DAYS, cloud_retention: 3600 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewSource {
    Cloud,
    Local,
    None,
}

impl fmt::Display for ViewSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViewSource::Cloud => "cloud",
            ViewSource::Local => "local",
            ViewSource::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OwnerView {
    pub location: Option<LocationPayload>,
    pub source: ViewSource,
    pub outdated: bool,
    pub displayed_key_epoch: Option<u64>,
    pub as_of: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudEntry {
    pub payload: LocationPayload,
    pub epoch: u64,
    pub received_at: Timestamp,
    pub report_seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalBeacon {
    pub advertisement: Advertisement,
    pub heard_at: Timestamp,
    pub epoch: u64,
    /// Where the owner was when it heard the beacon.
    pub owner_location: LocationPayload,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AcceptanceState {
    pub latest_observed_epoch: Option<u64>,
    pub last_local_beacon: Option<LocalBeacon>,
    /// Decrypted cloud reports that are still display-eligible.
    pub accepted_cloud: Vec<CloudEntry>,
    /// Reports that could not be attributed or decrypted.
    pub skipped: u64,
    seen_through_seq: u64,
}

impl AcceptanceState {
    pub fn is_display_eligible(&self, entry: &CloudEntry) -> bool {
        self.latest_observed_epoch == Some(entry.epoch)
    }

    fn observe_epoch(&mut self, epoch: u64) {
        if self.latest_observed_epoch.is_none_or(|e| epoch > e) {
            self.latest_observed_epoch = Some(epoch);
        }
    }
}

/// Picks the cloud entry to display among the eligible ones.
pub trait DisplayStrategy: Send {
    fn select(&self, eligible: &[CloudEntry]) -> Option<CloudEntry>;
}

/// Most recently received report wins; ties go to the later sequence number.
#[derive(Debug, Clone, Copy, Default)]
pub struct LatestWins;

impl DisplayStrategy for LatestWins {
    fn select(&self, eligible: &[CloudEntry]) -> Option<CloudEntry> {
        eligible.iter().max_by_key(|e| (e.received_at, e.report_seq)).cloned()
    }
}

/// Time since `epoch` stopped being the active epoch; zero for the current
/// epoch.
pub fn staleness(
    epoch: u64,
    policy: RotationPolicy,
    pairing_time: Timestamp,
    now: Timestamp,
) -> Result<u64, TimeError> {
    let current = current_epoch(policy, pairing_time, now)?;
    if epoch > current {
        return Err(TimeError::FutureEpoch { epoch, current });
    }
    let ended = policy.epoch_start(pairing_time, epoch + 1);
    Ok(now.saturating_sub(ended))
}

fn query_range(
    policy: RotationPolicy,
    pairing_time: Timestamp,
    now: Timestamp,
    query_epochs: u64,
) -> Result<std::ops::RangeInclusive<u64>, TimeError> {
    let e_now = current_epoch(policy, pairing_time, now)?;
    Ok(e_now.saturating_sub(query_epochs.saturating_sub(1))..=e_now)
}

/// Key ids for the default nine-epoch query window ending at `now`.
pub fn expected_key_ids(
    secret: &MasterSecret,
    policy: RotationPolicy,
    now: Timestamp,
) -> Result<Vec<KeyId>, TimeError> {
    let range = query_range(policy, secret.pairing_time(), now, OwnerConfig::default().query_epochs)?;
    Ok(range
        .map(|e| KeyId::from(&derive_epoch_keypair(secret, e).public_key))
        .collect())
}

pub struct OwnerClient {
    secret: MasterSecret,
    policy: RotationPolicy,
    config: OwnerConfig,
    state: AcceptanceState,
    keys: Vec<EpochKeypair>,
    by_public: HashMap<PublicKey, u64>,
    by_key_id: HashMap<KeyId, u64>,
    strategy: Box<dyn DisplayStrategy>,
    last_fetch: Option<Timestamp>,
}

impl fmt::Debug for OwnerClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OwnerClient")
            .field("policy", &self.policy)
            .field("config", &self.config)
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

impl OwnerClient {
    pub fn new(secret: MasterSecret, policy: RotationPolicy, config: OwnerConfig) -> Self {
        Self {
            secret,
            policy,
            config,
            state: AcceptanceState::default(),
            keys: Vec::new(),
            by_public: HashMap::new(),
            by_key_id: HashMap::new(),
            strategy: Box::new(LatestWins),
            last_fetch: None,
        }
    }

    pub fn with_strategy(mut self, strategy: Box<dyn DisplayStrategy>) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn state(&self) -> &AcceptanceState {
        &self.state
    }

    pub fn config(&self) -> &OwnerConfig {
        &self.config
    }

    pub fn pairing_time(&self) -> Timestamp {
        self.secret.pairing_time()
    }

    fn ensure_keys(&mut self, through_epoch: u64) {
        while (self.keys.len() as u64) <= through_epoch {
            let kp = derive_epoch_keypair(&self.secret, self.keys.len() as u64);
            self.by_public.insert(kp.public_key, kp.epoch);
            self.by_key_id.insert(KeyId::from(&kp.public_key), kp.epoch);
            self.keys.push(kp);
        }
    }

    pub fn keypair(&mut self, epoch: u64) -> &EpochKeypair {
        self.ensure_keys(epoch);
        &self.keys[epoch as usize]
    }

    pub fn expected_key_ids(&mut self, now: Timestamp) -> Result<Vec<KeyId>, TimeError> {
        let range = query_range(self.policy, self.secret.pairing_time(), now, self.config.query_epochs)?;
        self.ensure_keys(*range.end());
        Ok(range.map(|e| KeyId::from(&self.keys[e as usize].public_key)).collect())
    }

    /// Decrypts and absorbs fetched reports. Returns how many were accepted;
    /// unattributable or undecryptable reports are counted in
    /// [`AcceptanceState::skipped`].
    pub fn ingest_cloud(&mut self, reports: &[ReportRecord], now: Timestamp) -> usize {
        let mut accepted = 0;
        if let Ok(e_now) = current_epoch(self.policy, self.secret.pairing_time(), now) {
            self.ensure_keys(e_now);
        }
        for rec in reports {
            if rec.report_seq <= self.state.seen_through_seq {
                continue;
            }
            self.state.seen_through_seq = rec.report_seq;
            let Some(&epoch) = self.by_key_id.get(&rec.report.key_id) else {
                self.state.skipped += 1;
                continue;
            };
            let kp = &self.keys[epoch as usize];
            match decrypt_report(&rec.report, &kp.private_scalar) {
                Ok(payload) => {
                    self.state.observe_epoch(epoch);
                    self.state.accepted_cloud.push(CloudEntry {
                        payload,
                        epoch,
                        received_at: rec.received_at,
                        report_seq: rec.report_seq,
                    });
                    accepted += 1;
                }
                Err(e) => {
                    log::debug!("skipping report {}: {e}", rec.report_seq);
                    self.state.skipped += 1;
                }
            }
        }
        self.prune();
        accepted
    }

    // Entries below the newest observed epoch can never become eligible
    // again, so they are dropped along with anything outside the retention
    // horizon.
    fn prune(&mut self) {
        let latest = self.state.latest_observed_epoch;
        let newest = self
            .state
            .accepted_cloud
            .iter()
            .filter(|e| Some(e.epoch) == latest)
            .map(|e| e.received_at)
            .max();
        let horizon = newest.map_or(0, |t| t.saturating_sub(self.config.cloud_retention));
        self.state
            .accepted_cloud
            .retain(|e| Some(e.epoch) == latest && e.received_at >= horizon);
    }

    /// Handles an advertisement heard by the owner's own device. Returns the
    /// matched epoch, or `None` for undecodable frames and foreign tags.
    pub fn ingest_local(
        &mut self,
        adv: &Advertisement,
        heard_at: Timestamp,
        owner_location: LocationPayload,
    ) -> Option<u64> {
        let (key, _status) = decode_advertisement(adv).ok()?;
        let e_now = current_epoch(self.policy, self.secret.pairing_time(), heard_at).ok()?;
        self.ensure_keys(e_now);
        let epoch = *self.by_public.get(&key).filter(|&&e| e <= e_now)?;
        self.state.observe_epoch(epoch);
        let newer = self
            .state
            .last_local_beacon
            .as_ref()
            .is_none_or(|b| heard_at >= b.heard_at);
        if newer {
            self.state.last_local_beacon = Some(LocalBeacon {
                advertisement: *adv,
                heard_at,
                epoch,
                owner_location,
            });
        }
        Some(epoch)
    }

    fn outdated(&self, epoch: u64, now: Timestamp) -> bool {
        staleness(epoch, self.policy, self.secret.pairing_time(), now)
            .is_ok_and(|s| s >= self.config.outdated_after)
    }

    pub fn reconcile(&self, now: Timestamp) -> OwnerView {
        if let Some(b) = &self.state.last_local_beacon {
            if b.heard_at <= now && now - b.heard_at <= self.config.local_window {
                return OwnerView {
                    location: Some(b.owner_location),
                    source: ViewSource::Local,
                    outdated: self.outdated(b.epoch, now),
                    displayed_key_epoch: Some(b.epoch),
                    as_of: now,
                };
            }
        }
        let eligible: Vec<CloudEntry> = self
            .state
            .accepted_cloud
            .iter()
            .filter(|e| self.state.is_display_eligible(e) && e.received_at <= now)
            .cloned()
            .collect();
        match self.strategy.select(&eligible) {
            Some(entry) => OwnerView {
                location: Some(entry.payload),
                source: ViewSource::Cloud,
                outdated: self.outdated(entry.epoch, now),
                displayed_key_epoch: Some(entry.epoch),
                as_of: now,
            },
            None => OwnerView {
                location: None,
                source: ViewSource::None,
                outdated: false,
                displayed_key_epoch: None,
                as_of: now,
            },
        }
    }

    /// Fetches everything new since the previous poll, ingests it and
    /// reconciles.
    pub fn poll<S: ReportSource + ?Sized>(&mut self, source: &mut S, now: Timestamp) -> Result<OwnerView, StoreError> {
        let ids = self
            .expected_key_ids(now)
            .map_err(|e| StoreError::Protocol(e.to_string()))?;
        let since = self.last_fetch.unwrap_or(0);
        let reports = source.fetch(&ids, since)?;
        self.ingest_cloud(&reports, now);
        self.last_fetch = Some(now);
        Ok(self.reconcile(now))
    }
}
