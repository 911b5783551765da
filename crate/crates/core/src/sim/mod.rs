//! Deterministic discrete-event world.
//!
//! Events run in `(time, entity id, sequence)` order on a virtual clock, and
//! the only randomness (finder encryption) comes from a seeded generator, so
//! the same scenario and seed always produce the same log.

mod log;
mod scenario;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cloud::CloudStore;
use crate::crypto::{encrypt_report, EncryptedReport, LocationPayload};
use crate::owner::{OwnerClient, OwnerView};
use crate::protocol::{
    current_epoch, decode_advertisement, derive_epoch_keypair, encode_advertisement, Advertisement,
    CodecError, EpochKeypair, MasterSecret, PublicKey, RotationPolicy, TagStatus,
};
use crate::relay::{collector_capture, ObservationMsg, RelayError, RelayState, ReplayCommand};
use crate::Timestamp;

pub use log::{EventLog, LogEvent, LogRow, CSV_HEADER};
pub use scenario::{
    Action, ActionKind, BeaconName, BeaconSelector, EntityKind, EntitySpec, GeoOrigin, Point,
    Scenario, ScenarioError, ScheduledAction, TagMode, TimeSpec, TimelineEntry, WorldConfig,
};

const RELAY_ENTITY: &str = "relay";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
}

/// One advertisement as heard by one receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub advertisement: Advertisement,
    pub rssi: f64,
    pub heard_at: Timestamp,
    pub receiver_id: String,
}

/// Log-distance path loss, clamped below at 0.1 m.
pub fn rssi_at(config: &WorldConfig, distance: f64) -> f64 {
    config.rssi_at_1m - 10.0 * config.path_loss_exponent * distance.max(0.1).log10()
}

/// A finder's reaction to a sighting: lost tags get an encrypted report of the
/// finder's own position, anything else gets nothing.
pub fn finder_behavior<R: rand::RngCore + rand::CryptoRng>(
    observation: &Observation,
    finder_location: (f64, f64),
    accuracy: u8,
    rng: &mut R,
) -> Result<Option<EncryptedReport>, CodecError> {
    let (key, status) = decode_advertisement(&observation.advertisement)?;
    if !status.lost {
        return Ok(None);
    }
    let payload = LocationPayload::new(finder_location.0, finder_location.1, accuracy, observation.heard_at)
        .map_err(|_| CodecError::Malformed("finder position out of range"))?;
    let report = encrypt_report(&payload, key.as_bytes(), rng)
        .map_err(|_| CodecError::Malformed("encryption failed"))?;
    Ok(Some(report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagRuntime {
    pub master_secret: MasterSecret,
    pub policy: RotationPolicy,
    pub paired: bool,
    pub powered: bool,
    pub mode: TagMode,
    /// `None` means the owner has not been in contact since pairing.
    pub last_owner_contact: Option<Timestamp>,
    pub frozen_epoch: Option<u64>,
}

impl TagRuntime {
    fn mode_at(&self, now: Timestamp, separation_delay: u64) -> TagMode {
        match self.last_owner_contact {
            Some(c) if now.saturating_sub(c) < separation_delay => TagMode::Connected,
            _ => TagMode::Lost,
        }
    }

    fn epoch_at(&self, now: Timestamp) -> Option<u64> {
        if !self.paired {
            return None;
        }
        current_epoch(self.policy, self.master_secret.pairing_time(), now).ok()
    }
}

#[derive(Debug)]
struct TagSlot {
    entity: usize,
    runtime: TagRuntime,
    owner: Option<usize>,
    adv_gen: u64,
    mode_gen: u64,
    key: Option<EpochKeypair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub tag: String,
    pub view: OwnerView,
}

/// A frame put on air, by whom.
#[derive(Debug, Clone, PartialEq)]
pub struct AirFrame {
    pub at: Timestamp,
    pub sender: String,
    pub advertisement: Advertisement,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Action(usize),
    Advertise { tag: usize, gen: u64 },
    ModeCheck { tag: usize, gen: u64 },
    RelayIngest(usize),
    RelayDue,
    OwnerPoll { tag: usize },
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Queued {
    at: Timestamp,
    entity: String,
    seq: u64,
    kind: EventKind,
}

pub struct Simulation {
    world: WorldConfig,
    entities: Vec<(String, EntityKind, Point)>,
    index: HashMap<String, usize>,
    tags: Vec<TagSlot>,
    tag_index: HashMap<String, usize>,
    owners: BTreeMap<usize, OwnerClient>,
    actions: Vec<ScheduledAction>,
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    now: Timestamp,
    rng: ChaCha20Rng,
    cloud: CloudStore,
    relay: RelayState,
    pending_ingest: Vec<Option<ObservationMsg>>,
    relay_wakeup: Option<Timestamp>,
    key_registry: HashMap<PublicKey, u64>,
    last_upload: HashMap<(usize, PublicKey), Timestamp>,
    observations: BTreeMap<String, u64>,
    dropped: u64,
    log: EventLog,
    views: Vec<ViewRecord>,
    air: Option<Vec<AirFrame>>,
}

fn default_secret(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"tagrelay-master-secret");
    h.update(seed.to_be_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

impl Simulation {
    pub fn new(scenario: &Scenario, seed: u64) -> Result<Self, ScenarioError> {
        let actions = scenario.validate()?;
        let world = scenario.world.clone();
        let policy = RotationPolicy::new(world.rotation_period)
            .map_err(|e| ScenarioError::Invalid(vec![e.to_string()]))?;

        let entities: Vec<_> = scenario.entities.iter().map(|e| (e.id.clone(), e.kind, e.position)).collect();
        let index: HashMap<_, _> = entities.iter().enumerate().map(|(i, e)| (e.0.clone(), i)).collect();

        let mut sim = Self {
            world,
            entities,
            index,
            tags: Vec::new(),
            tag_index: HashMap::new(),
            owners: BTreeMap::new(),
            actions,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            rng: ChaCha20Rng::seed_from_u64(seed),
            cloud: CloudStore::new(),
            relay: RelayState::new(),
            pending_ingest: Vec::new(),
            relay_wakeup: None,
            key_registry: HashMap::new(),
            last_upload: HashMap::new(),
            observations: BTreeMap::new(),
            dropped: 0,
            log: EventLog::default(),
            views: Vec::new(),
            air: None,
        };

        for spec in &scenario.entities {
            match spec.kind {
                EntityKind::Emitter => sim.relay.register_emitter(&spec.id),
                EntityKind::Tag => {
                    let bytes = match &spec.secret {
                        Some(h) => hex::decode(h).ok().and_then(|b| b.try_into().ok()).expect("validated secret"),
                        None => default_secret(seed, &spec.id),
                    };
                    let pairing = spec.pairing_time.as_ref().map(|t| t.resolve().expect("validated time"));
                    let runtime = TagRuntime {
                        master_secret: MasterSecret::new(bytes, pairing.unwrap_or(0)),
                        policy,
                        paired: pairing.is_some(),
                        powered: spec.powered.unwrap_or(true),
                        mode: spec.mode.unwrap_or(TagMode::Connected),
                        last_owner_contact: match spec.mode {
                            Some(TagMode::Lost) => None,
                            _ => pairing,
                        },
                        frozen_epoch: None,
                    };
                    let t = sim.tags.len();
                    sim.tag_index.insert(spec.id.clone(), t);
                    sim.tags.push(TagSlot {
                        entity: sim.index[&spec.id],
                        runtime,
                        owner: spec.owner.as_ref().map(|o| sim.index[o]),
                        adv_gen: 0,
                        mode_gen: 0,
                        key: None,
                    });
                    if let Some(p) = pairing {
                        sim.activate_tag(t, p);
                    }
                }
                _ => {}
            }
        }

        for i in 0..sim.actions.len() {
            let a = &sim.actions[i];
            let (at, subject) = (a.at, a.action.subject().to_owned());
            sim.push(at, subject, EventKind::Action(i));
        }
        Ok(sim)
    }

    /// Enables recording of every frame put on air.
    pub fn record_air(&mut self) {
        self.air.get_or_insert_with(Vec::new);
    }

    pub fn air(&self) -> &[AirFrame] {
        self.air.as_deref().unwrap_or(&[])
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn world(&self) -> &WorldConfig {
        &self.world
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }

    pub fn views(&self) -> &[ViewRecord] {
        &self.views
    }

    pub fn cloud(&self) -> &CloudStore {
        &self.cloud
    }

    pub fn relay(&self) -> &RelayState {
        &self.relay
    }

    pub fn owner(&self, tag_id: &str) -> Option<&OwnerClient> {
        self.tag_index.get(tag_id).and_then(|&t| self.owners.get(&t))
    }

    pub fn tag(&self, tag_id: &str) -> Option<&TagRuntime> {
        self.tag_index.get(tag_id).map(|&t| &self.tags[t].runtime)
    }

    pub fn position(&self, entity_id: &str) -> Option<Point> {
        self.index.get(entity_id).map(|&i| self.entities[i].2)
    }

    pub fn geo(&self, p: Point) -> (f64, f64) {
        self.world.origin.to_geo(p)
    }

    /// Observations delivered to `receiver_id` so far.
    pub fn observation_count(&self, receiver_id: &str) -> u64 {
        self.observations.get(receiver_id).copied().unwrap_or(0)
    }

    /// Malformed advertisements dropped by finders.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    fn push(&mut self, at: Timestamp, entity: String, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Reverse(Queued { at, entity, seq: self.seq, kind }));
    }

    fn entity_id(&self, idx: usize) -> String {
        self.entities[idx].0.clone()
    }

    /// Processes every event up to and including `until`.
    pub fn run_until(&mut self, until: Timestamp) {
        while let Some(Reverse(ev)) = self.queue.peek() {
            if ev.at > until {
                break;
            }
            let Reverse(ev) = self.queue.pop().expect("peeked");
            self.now = ev.at;
            self.handle(ev.kind);
        }
        self.now = self.now.max(until);
    }

    fn handle(&mut self, kind: EventKind) {
        match kind {
            EventKind::Action(i) => {
                let action = self.actions[i].action.clone();
                self.apply(action);
            }
            EventKind::Advertise { tag, gen } => self.advertise(tag, gen),
            EventKind::ModeCheck { tag, gen } => self.mode_check(tag, gen),
            EventKind::RelayIngest(i) => {
                if let Some(msg) = self.pending_ingest[i].take() {
                    self.relay_ingest(msg);
                }
            }
            EventKind::RelayDue => self.relay_due(),
            EventKind::OwnerPoll { tag } => self.owner_poll(tag),
        }
    }

    // --- tags -------------------------------------------------------------

    fn activate_tag(&mut self, t: usize, now: Timestamp) {
        let id = self.entity_id(self.tags[t].entity);
        if self.tags[t].runtime.powered {
            self.tags[t].adv_gen += 1;
            let gen = self.tags[t].adv_gen;
            self.push(now, id.clone(), EventKind::Advertise { tag: t, gen });
        }
        if let Some(c) = self.tags[t].runtime.last_owner_contact {
            self.tags[t].mode_gen += 1;
            let gen = self.tags[t].mode_gen;
            self.push(c + self.world.separation_delay, id, EventKind::ModeCheck { tag: t, gen });
        }
        if let Some(owner) = self.tags[t].owner {
            let rt = &self.tags[t].runtime;
            let client = OwnerClient::new(rt.master_secret.clone(), rt.policy, self.world.owner);
            self.owners.insert(t, client);
            let (interval, offset) = (self.world.owner_poll_interval, self.world.owner_poll_offset);
            let first = if now <= offset {
                offset
            } else {
                offset + (now - offset).div_ceil(interval) * interval
            };
            self.push(first, self.entity_id(owner), EventKind::OwnerPoll { tag: t });
        }
    }

    fn owner_contact(&mut self, t: usize, now: Timestamp) {
        let sep = self.world.separation_delay;
        let id = self.entity_id(self.tags[t].entity);
        let slot = &mut self.tags[t];
        let was = slot.runtime.mode_at(now, sep);
        slot.runtime.last_owner_contact = Some(now);
        slot.runtime.mode = TagMode::Connected;
        slot.mode_gen += 1;
        let gen = slot.mode_gen;
        self.push(now + sep, id.clone(), EventKind::ModeCheck { tag: t, gen });
        if was == TagMode::Lost {
            self.log.push(LogRow::new(now, LogEvent::Mode, &id).flag("connected"));
        }
    }

    fn mode_check(&mut self, t: usize, gen: u64) {
        let sep = self.world.separation_delay;
        let now = self.now;
        let id = self.entity_id(self.tags[t].entity);
        let slot = &mut self.tags[t];
        if gen != slot.mode_gen || slot.runtime.mode_at(now, sep) != TagMode::Lost {
            return;
        }
        slot.runtime.mode = TagMode::Lost;
        let advertising = slot.runtime.powered && slot.runtime.paired;
        if advertising {
            slot.adv_gen += 1;
        }
        let gen = slot.adv_gen;
        self.log.push(LogRow::new(now, LogEvent::Mode, &id).flag("lost"));
        if advertising {
            self.push(now, id, EventKind::Advertise { tag: t, gen });
        }
    }

    /// Inserts or removes a tag's battery.
    pub fn set_tag_power(&mut self, tag_id: &str, powered: bool) -> Result<TagRuntime, SimError> {
        let &t = self.tag_index.get(tag_id).ok_or_else(|| SimError::UnknownTag(tag_id.to_owned()))?;
        let now = self.now;
        let slot = &mut self.tags[t];
        if slot.runtime.powered == powered {
            return Ok(slot.runtime.clone());
        }
        slot.runtime.powered = powered;
        slot.adv_gen += 1;
        let mut row = LogRow::new(now, LogEvent::Power, tag_id);
        if powered {
            slot.runtime.frozen_epoch = None;
            row = row.flag("on");
            if slot.runtime.paired {
                let gen = slot.adv_gen;
                self.push(now, tag_id.to_owned(), EventKind::Advertise { tag: t, gen });
            }
        } else {
            slot.runtime.frozen_epoch = slot.runtime.epoch_at(now);
            row = row.epoch(slot.runtime.frozen_epoch).flag("off");
        }
        self.log.push(row);
        Ok(self.tags[t].runtime.clone())
    }

    fn advertise(&mut self, t: usize, gen: u64) {
        let now = self.now;
        let sep = self.world.separation_delay;
        {
            let slot = &self.tags[t];
            if gen != slot.adv_gen || !slot.runtime.powered || !slot.runtime.paired {
                return;
            }
        }
        let tag_pos = self.entities[self.tags[t].entity].2;
        let tag_id = self.entity_id(self.tags[t].entity);

        if let Some(owner) = self.tags[t].owner {
            if self.entities[owner].2.distance(&tag_pos) <= self.world.ble_range {
                self.owner_contact(t, now);
            }
        }

        let slot = &mut self.tags[t];
        let mode = slot.runtime.mode_at(now, sep);
        slot.runtime.mode = mode;
        let epoch = slot.runtime.epoch_at(now).expect("paired tag has an epoch");
        if slot.key.as_ref().is_none_or(|k| k.epoch != epoch) {
            let kp = derive_epoch_keypair(&slot.runtime.master_secret, epoch);
            self.key_registry.insert(kp.public_key, epoch);
            self.log.push(
                LogRow::new(now, LogEvent::Rotate, &tag_id)
                    .epoch(Some(epoch))
                    .flag(format!("key={}", &kp.public_key.to_hex()[..16])),
            );
            slot.key = Some(kp);
        }
        let key = slot.key.as_ref().expect("just derived").public_key;
        let status = TagStatus { lost: mode == TagMode::Lost, battery_low: false };
        let adv = encode_advertisement(key.as_bytes(), status).expect("32-byte key");
        let interval = match mode {
            TagMode::Lost => self.world.lost_adv_interval,
            TagMode::Connected => self.world.connected_adv_interval,
        };

        if self.world.log_advertisements {
            let geo = self.geo(tag_pos);
            self.log.push(
                LogRow::new(now, LogEvent::Adv, &tag_id)
                    .epoch(Some(epoch))
                    .at(geo)
                    .flag(if status.lost { "lost" } else { "connected" }),
            );
        }
        self.transmit(&tag_id, tag_pos, adv);
        self.push(now + interval, tag_id, EventKind::Advertise { tag: t, gen });
    }

    // --- radio ------------------------------------------------------------

    /// Everyone within range of `sender_position` who listens, ordered by id.
    pub fn deliver_advertisement(&self, sender_position: Point, adv: Advertisement, now: Timestamp) -> Vec<Observation> {
        let mut out: Vec<Observation> = self
            .entities
            .iter()
            .filter(|(_, kind, _)| kind.receives())
            .filter_map(|(id, _, pos)| {
                let d = pos.distance(&sender_position);
                (d <= self.world.ble_range).then(|| Observation {
                    advertisement: adv,
                    rssi: rssi_at(&self.world, d),
                    heard_at: now,
                    receiver_id: id.clone(),
                })
            })
            .collect();
        out.sort_by(|a, b| a.receiver_id.cmp(&b.receiver_id));
        out
    }

    fn transmit(&mut self, sender: &str, pos: Point, adv: Advertisement) {
        let now = self.now;
        if let Some(air) = self.air.as_mut() {
            air.push(AirFrame { at: now, sender: sender.to_owned(), advertisement: adv });
        }
        for obs in self.deliver_advertisement(pos, adv, now) {
            *self.observations.entry(obs.receiver_id.clone()).or_default() += 1;
            let idx = self.index[&obs.receiver_id];
            match self.entities[idx].1 {
                EntityKind::Finder => self.on_finder(idx, &obs),
                EntityKind::Collector => self.on_collector(&obs),
                EntityKind::OwnerPhone => self.on_owner_phone(idx, &obs),
                _ => {}
            }
        }
    }

    fn epoch_of(&self, adv: &Advertisement) -> Option<u64> {
        let (key, _) = decode_advertisement(adv).ok()?;
        self.key_registry.get(&key).copied()
    }

    fn on_finder(&mut self, idx: usize, obs: &Observation) {
        let now = self.now;
        let (id, _, pos) = self.entities[idx].clone();
        let key = match decode_advertisement(&obs.advertisement) {
            Ok((key, status)) if status.lost => key,
            Ok(_) => return,
            Err(e) => {
                self.dropped += 1;
                self.log.push(LogRow::new(now, LogEvent::Drop, &id).flag(e.to_string().replace([',', ';'], " ")));
                return;
            }
        };
        if self.world.finder_upload_interval > 0 {
            if let Some(&last) = self.last_upload.get(&(idx, key)) {
                if now - last < self.world.finder_upload_interval {
                    return;
                }
            }
        }
        let geo = self.geo(pos);
        let report = match finder_behavior(obs, geo, self.world.finder_accuracy, &mut self.rng) {
            Ok(Some(r)) => r,
            Ok(None) => return,
            Err(e) => {
                self.dropped += 1;
                self.log.push(LogRow::new(now, LogEvent::Drop, &id).flag(e.to_string().replace([',', ';'], " ")));
                return;
            }
        };
        self.last_upload.insert((idx, key), now);
        let seq = self.cloud.upload(report, now).expect("in-memory upload");
        let epoch = self.key_registry.get(&key).copied();
        self.log.push(
            LogRow::new(now, LogEvent::Upload, &id)
                .epoch(epoch)
                .at(geo)
                .flag(format!("seq={seq}")),
        );
    }

    fn on_collector(&mut self, obs: &Observation) {
        let msg = collector_capture(obs);
        if self.world.relay_link_delay == 0 {
            self.relay_ingest(msg);
        } else {
            let at = self.now + self.world.relay_link_delay;
            self.pending_ingest.push(Some(msg));
            let i = self.pending_ingest.len() - 1;
            self.push(at, obs.receiver_id.clone(), EventKind::RelayIngest(i));
        }
    }

    fn on_owner_phone(&mut self, idx: usize, obs: &Observation) {
        let pos = self.entities[idx].2;
        let (lat, lon) = self.geo(pos);
        let Ok(here) = LocationPayload::new(lat, lon, 0, obs.heard_at) else { return };
        let owned: Vec<usize> = self
            .tags
            .iter()
            .enumerate()
            .filter(|(_, s)| s.owner == Some(idx))
            .map(|(t, _)| t)
            .collect();
        for t in owned {
            if let Some(client) = self.owners.get_mut(&t) {
                client.ingest_local(&obs.advertisement, obs.heard_at, here);
            }
        }
    }

    // --- relay ------------------------------------------------------------

    fn relay_ingest(&mut self, msg: ObservationMsg) {
        let now = self.now;
        let collector = msg.collector_id.clone();
        let epoch = Advertisement::from_bytes(&msg.advertisement).ok().and_then(|a| self.epoch_of(&a));
        match self.relay.ingest(msg) {
            Ok(b) if b.seen_count == 1 => {
                self.log.push(
                    LogRow::new(now, LogEvent::Capture, &collector)
                        .epoch(epoch)
                        .flag(format!("beacon={}", b.beacon_id)),
                );
            }
            Ok(_) => {}
            Err(e) => {
                self.log.push(LogRow::new(now, LogEvent::Reject, &collector).flag(e.to_string().replace([',', ';'], " ")));
            }
        }
    }

    fn arm_relay(&mut self) {
        if let Some(t) = self.relay.next_due() {
            if self.relay_wakeup != Some(t) {
                self.relay_wakeup = Some(t);
                self.push(t, RELAY_ENTITY.to_owned(), EventKind::RelayDue);
            }
        }
    }

    fn relay_due(&mut self) {
        let now = self.now;
        if self.relay_wakeup == Some(now) {
            self.relay_wakeup = None;
        }
        for e in self.relay.take_due(now) {
            let Ok(adv) = Advertisement::from_bytes(&e.advertisement) else { continue };
            let pos = self.entities[self.index[&e.emitter_id]].2;
            let epoch = self.epoch_of(&adv);
            let geo = self.geo(pos);
            self.log.push(
                LogRow::new(now, LogEvent::Emit, &e.emitter_id)
                    .epoch(epoch)
                    .at(geo)
                    .flag(format!("beacon={}", e.beacon_id)),
            );
            self.transmit(&e.emitter_id, pos, adv);
        }
        self.arm_relay();
    }

    // --- owner ------------------------------------------------------------

    fn owner_poll(&mut self, t: usize) {
        let now = self.now;
        let tag_id = self.entity_id(self.tags[t].entity);
        let Some(client) = self.owners.get_mut(&t) else { return };
        let view = match client.poll(&mut self.cloud, now) {
            Ok(v) => v,
            Err(e) => {
                ::log::warn!("owner poll for {tag_id} failed: {e}");
                client.reconcile(now)
            }
        };
        let mut row = LogRow::new(now, LogEvent::OwnerView, &tag_id)
            .epoch(view.displayed_key_epoch)
            .source(view.source);
        if let Some(loc) = &view.location {
            row = row.at((loc.latitude, loc.longitude));
        }
        if view.outdated {
            row = row.flag("outdated");
        }
        self.log.push(row);
        self.views.push(ViewRecord { tag: tag_id, view });

        let owner = self.tags[t].owner.expect("polling tag has an owner");
        let next = now + self.world.owner_poll_interval;
        self.push(next, self.entity_id(owner), EventKind::OwnerPoll { tag: t });
    }

    // --- timeline ---------------------------------------------------------

    fn apply(&mut self, action: Action) {
        let now = self.now;
        match action {
            Action::Move { entity, position } => {
                let i = self.index[&entity];
                self.entities[i].2 = position;
                let geo = self.geo(position);
                self.log.push(LogRow::new(now, LogEvent::Move, &entity).at(geo));
            }
            Action::Power { tag, on } => {
                self.set_tag_power(&tag, on).expect("validated tag");
            }
            Action::Pair { tag, owner } => {
                let t = self.tag_index[&tag];
                let owner_idx = self.index[&owner];
                let slot = &mut self.tags[t];
                slot.runtime.master_secret = slot.runtime.master_secret.with_pairing_time(now);
                slot.runtime.paired = true;
                slot.runtime.last_owner_contact = Some(now);
                slot.runtime.mode = TagMode::Connected;
                slot.runtime.frozen_epoch = None;
                slot.owner = Some(owner_idx);
                slot.key = None;
                self.log.push(LogRow::new(now, LogEvent::Pair, &tag).flag(format!("owner={owner}")));
                self.activate_tag(t, now);
            }
            Action::OwnerContact { tag } => {
                let t = self.tag_index[&tag];
                self.log.push(LogRow::new(now, LogEvent::OwnerContact, &tag));
                self.owner_contact(t, now);
            }
            Action::StartRelay { emitter, beacon, interval, repeat, start_delay } => {
                let chosen = match &beacon {
                    BeaconSelector::Id(id) => self.relay.beacon(*id),
                    BeaconSelector::Named(BeaconName::Latest) => self.relay.latest_beacon(),
                    BeaconSelector::Named(BeaconName::First) => self.relay.beacons().first(),
                }
                .map(|b| b.beacon_id);
                let Some(beacon_id) = chosen else {
                    self.log.push(LogRow::new(now, LogEvent::RelayError, &emitter).flag("no beacon captured"));
                    return;
                };
                let cmd = ReplayCommand {
                    beacon_id,
                    emitter_id: emitter.clone(),
                    start_at: now + start_delay,
                    interval,
                    repeat,
                };
                match self.relay.schedule_replay(cmd, now) {
                    Ok(_) => {
                        let adv = self.relay.beacon(beacon_id).and_then(|b| Advertisement::from_bytes(&b.advertisement).ok());
                        let epoch = adv.and_then(|a| self.epoch_of(&a));
                        self.log.push(
                            LogRow::new(now, LogEvent::RelayStart, &emitter)
                                .epoch(epoch)
                                .flag(format!("beacon={beacon_id}"))
                                .flag(format!("interval={interval}")),
                        );
                        self.arm_relay();
                    }
                    Err(RelayError::NotFound(m) | RelayError::Validation(m)) => {
                        self.log.push(LogRow::new(now, LogEvent::RelayError, &emitter).flag(m));
                    }
                    Err(e) => self.log.push(LogRow::new(now, LogEvent::RelayError, &emitter).flag(e.to_string())),
                }
            }
            Action::StopRelay { emitter } => {
                let n = self.relay.stop(Some(&emitter), None);
                self.log.push(LogRow::new(now, LogEvent::RelayStop, &emitter).flag(format!("schedules={n}")));
            }
        }
    }
}

/// Runs `scenario` from time zero through `until` and returns the log.
pub fn run(scenario: &Scenario, seed: u64, until: Timestamp) -> Result<EventLog, ScenarioError> {
    let mut sim = Simulation::new(scenario, seed)?;
    sim.run_until(until);
    Ok(sim.into_log())
}
