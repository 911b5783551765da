//! Capture → store → replay toolkit.
//!
//! Collectors forward every advertisement they hear, byte for byte. The relay
//! server deduplicates by exact bytes, keeps first/last-seen times, and hands
//! out replay schedules to emitters which rebroadcast the stored bytes
//! somewhere else.

mod net;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::journal::{self, Journal};
use crate::protocol::{decode_advertisement, Advertisement};
use crate::sim::Observation;
use crate::wire::hex_bytes;
use crate::Timestamp;

pub use net::{ClockMode, EmitFrame, RelayClient, RelayMsg, RelayServer, Role};

#[derive(Debug, Error)]
pub enum RelayError {
    #[error("rejected advertisement: {0}")]
    Rejected(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// What a collector sends upstream for every advertisement it hears.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationMsg {
    pub collector_id: String,
    #[serde(with = "hex_bytes")]
    pub advertisement: Vec<u8>,
    pub rssi: f64,
    pub heard_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredBeacon {
    pub beacon_id: u64,
    #[serde(with = "hex_bytes")]
    pub advertisement: Vec<u8>,
    pub first_seen: Timestamp,
    pub last_seen: Timestamp,
    pub seen_count: u64,
    pub source_collector: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayCommand {
    pub beacon_id: u64,
    pub emitter_id: String,
    pub start_at: Timestamp,
    pub interval: u64,
    /// `None` repeats until stopped.
    pub repeat: Option<u64>,
}

impl ReplayCommand {
    /// Time of the `k`-th emission, if the schedule has one.
    pub fn emission_time(&self, k: u64) -> Option<Timestamp> {
        if self.repeat.is_some_and(|n| k >= n) {
            return None;
        }
        self.start_at.checked_add(k.checked_mul(self.interval)?)
    }
}

/// One due rebroadcast.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emission {
    pub schedule_id: u64,
    pub emitter_id: String,
    pub beacon_id: u64,
    pub advertisement: Vec<u8>,
    pub at: Timestamp,
}

/// Copies what a collector heard into an upstream message. No field is
/// re-derived and undecodable frames are forwarded too.
pub fn collector_capture(observation: &Observation) -> ObservationMsg {
    ObservationMsg {
        collector_id: observation.receiver_id.clone(),
        advertisement: observation.advertisement.to_bytes().to_vec(),
        rssi: observation.rssi,
        heard_at: observation.heard_at,
    }
}

#[derive(Debug, Clone)]
struct Schedule {
    cmd: ReplayCommand,
    next: u64,
}

impl Schedule {
    fn next_time(&self) -> Option<Timestamp> {
        self.cmd.emission_time(self.next)
    }
}

/// Beacon table plus replay schedules; transport agnostic.
#[derive(Debug, Default)]
pub struct RelayState {
    beacons: Vec<StoredBeacon>,
    by_bytes: HashMap<Vec<u8>, u64>,
    rejected: u64,
    emitters: BTreeSet<String>,
    schedules: BTreeMap<u64, Schedule>,
    next_schedule_id: u64,
    journal: Option<Journal>,
}

impl RelayState {
    pub fn new() -> Self {
        Self::default()
    }

    /// State backed by a journal of accepted observations, replayed on open.
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let (journal, lines) = Journal::open(path)?;
        let mut state = Self::new();
        for (i, fields) in lines.iter().enumerate() {
            let [heard_at, collector, rssi, adv] = fields.as_slice() else {
                return Err(journal::corrupt(journal.path(), i, "expected 4 fields"));
            };
            let msg = ObservationMsg {
                collector_id: collector.clone(),
                advertisement: hex::decode(adv).map_err(|e| journal::corrupt(journal.path(), i, e))?,
                rssi: rssi.parse().map_err(|e| journal::corrupt(journal.path(), i, e))?,
                heard_at: heard_at.parse().map_err(|e| journal::corrupt(journal.path(), i, e))?,
            };
            state
                .ingest(msg)
                .map_err(|e| journal::corrupt(journal.path(), i, e))?;
        }
        state.journal = Some(journal);
        Ok(state)
    }

    /// Records an observation. Identical bytes map to the same beacon;
    /// `first_seen` tracks the earliest `heard_at` ever ingested for it.
    pub fn ingest(&mut self, msg: ObservationMsg) -> Result<StoredBeacon, RelayError> {
        let decoded = Advertisement::from_bytes(&msg.advertisement)
            .and_then(|adv| decode_advertisement(&adv));
        if let Err(e) = decoded {
            self.rejected += 1;
            return Err(RelayError::Rejected(e.to_string()));
        }
        if msg.collector_id.is_empty() || msg.collector_id.contains(char::is_whitespace) {
            return Err(RelayError::Validation(format!("bad collector id {:?}", msg.collector_id)));
        }
        if let Some(j) = self.journal.as_mut() {
            j.append(&[
                &msg.heard_at.to_string(),
                &msg.collector_id,
                &msg.rssi.to_string(),
                &hex::encode(&msg.advertisement),
            ])?;
        }

        if let Some(&id) = self.by_bytes.get(&msg.advertisement) {
            let b = &mut self.beacons[(id - 1) as usize];
            if msg.heard_at < b.first_seen {
                b.first_seen = msg.heard_at;
                b.source_collector = msg.collector_id;
            }
            b.last_seen = b.last_seen.max(msg.heard_at);
            b.seen_count += 1;
            return Ok(b.clone());
        }

        let beacon = StoredBeacon {
            beacon_id: self.beacons.len() as u64 + 1,
            advertisement: msg.advertisement.clone(),
            first_seen: msg.heard_at,
            last_seen: msg.heard_at,
            seen_count: 1,
            source_collector: msg.collector_id,
        };
        self.by_bytes.insert(msg.advertisement, beacon.beacon_id);
        self.beacons.push(beacon.clone());
        Ok(beacon)
    }

    pub fn beacon(&self, id: u64) -> Option<&StoredBeacon> {
        id.checked_sub(1).and_then(|i| self.beacons.get(i as usize))
    }

    pub fn beacons(&self) -> &[StoredBeacon] {
        &self.beacons
    }

    /// Most recently first-seen beacon.
    pub fn latest_beacon(&self) -> Option<&StoredBeacon> {
        self.beacons.iter().max_by_key(|b| (b.first_seen, b.beacon_id))
    }

    /// Number of observations refused because they did not decode.
    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn register_emitter(&mut self, id: &str) {
        self.emitters.insert(id.to_owned());
    }

    pub fn unregister_emitter(&mut self, id: &str) {
        self.emitters.remove(id);
    }

    pub fn schedule_replay(&mut self, cmd: ReplayCommand, now: Timestamp) -> Result<u64, RelayError> {
        if cmd.interval == 0 {
            return Err(RelayError::Validation("interval must be positive".into()));
        }
        if cmd.start_at < now {
            return Err(RelayError::Validation(format!(
                "start_at {} is before issue time {now}",
                cmd.start_at
            )));
        }
        if self.beacon(cmd.beacon_id).is_none() {
            return Err(RelayError::NotFound(format!("beacon {}", cmd.beacon_id)));
        }
        if !self.emitters.contains(&cmd.emitter_id) {
            return Err(RelayError::NotFound(format!("emitter {}", cmd.emitter_id)));
        }
        self.next_schedule_id += 1;
        let id = self.next_schedule_id;
        self.schedules.insert(id, Schedule { cmd, next: 0 });
        Ok(id)
    }

    /// Cancels schedules matching the filters; `None` matches anything.
    pub fn stop(&mut self, emitter_id: Option<&str>, beacon_id: Option<u64>) -> usize {
        let before = self.schedules.len();
        self.schedules.retain(|_, s| {
            let hit = emitter_id.is_none_or(|e| s.cmd.emitter_id == e)
                && beacon_id.is_none_or(|b| s.cmd.beacon_id == b);
            !hit
        });
        before - self.schedules.len()
    }

    pub fn active_schedules(&self) -> usize {
        self.schedules.len()
    }

    pub fn next_due(&self) -> Option<Timestamp> {
        self.schedules.values().filter_map(Schedule::next_time).min()
    }

    /// Pops every emission due at or before `until`, ordered by time then
    /// schedule id. Exhausted schedules are dropped.
    pub fn take_due(&mut self, until: Timestamp) -> Vec<Emission> {
        let mut out = Vec::new();
        for (&id, s) in self.schedules.iter_mut() {
            while let Some(at) = s.next_time().filter(|&t| t <= until) {
                let adv = self.beacons[(s.cmd.beacon_id - 1) as usize].advertisement.clone();
                out.push(Emission {
                    schedule_id: id,
                    emitter_id: s.cmd.emitter_id.clone(),
                    beacon_id: s.cmd.beacon_id,
                    advertisement: adv,
                    at,
                });
                s.next += 1;
            }
        }
        self.schedules.retain(|_, s| s.next_time().is_some());
        out.sort_by_key(|e| (e.at, e.schedule_id));
        out
    }
}

/// Writes one JSON object per line.
pub fn write_capture_log<W: Write>(mut w: W, msgs: &[ObservationMsg]) -> io::Result<()> {
    for m in msgs {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_capture_log<R: BufRead>(r: R) -> io::Result<Vec<ObservationMsg>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let msg = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(msg);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::protocol::{derive_epoch_keypair, encode_advertisement, MasterSecret, TagStatus};

    fn adv(epoch: u64) -> Vec<u8> {
        let kp = derive_epoch_keypair(&MasterSecret::new([3; 32], 0), epoch);
        encode_advertisement(kp.public_key.as_bytes(), TagStatus::LOST)
            .unwrap()
            .to_bytes()
            .to_vec()
    }

    fn msg(bytes: Vec<u8>, t: Timestamp) -> ObservationMsg {
        ObservationMsg { collector_id: "c1".into(), advertisement: bytes, rssi: -50.0, heard_at: t }
    }

    #[test]
    fn capture_is_byte_faithful() {
        let a = Advertisement::from_bytes(&adv(0)).unwrap();
        let obs = |t| Observation { advertisement: a, rssi: -41.5, heard_at: t, receiver_id: "col".into() };
        let m1 = collector_capture(&obs(10));
        let m2 = collector_capture(&obs(12));
        assert_eq!(m1.advertisement, adv(0));
        assert_eq!(m1.advertisement, m2.advertisement);
        assert_ne!(m1.heard_at, m2.heard_at);

        let mut bad = a;
        bad.payload[27] = 0xF0;
        let m = collector_capture(&Observation { advertisement: bad, rssi: -60.0, heard_at: 1, receiver_id: "col".into() });
        assert_eq!(m.advertisement, bad.to_bytes().to_vec());
    }

    #[test]
    fn ingest_dedups_by_bytes() {
        let mut s = RelayState::new();
        let b1 = s.ingest(msg(adv(0), 100)).unwrap();
        assert_eq!((b1.beacon_id, b1.seen_count), (1, 1));
        let again = s.ingest(msg(adv(0), 105)).unwrap();
        assert_eq!(again.beacon_id, 1);
        assert_eq!(again.seen_count, 2);
        assert_eq!(again.first_seen, 100);
        assert_eq!(again.last_seen, 105);
        let b2 = s.ingest(msg(adv(1), 110)).unwrap();
        assert_eq!(b2.beacon_id, 2);
        assert_eq!(s.latest_beacon().unwrap().beacon_id, 2);
    }

    #[test]
    fn undecodable_is_rejected_and_counted() {
        let mut s = RelayState::new();
        let mut bytes = adv(0);
        bytes[33] = 0x04;
        assert!(matches!(s.ingest(msg(bytes, 1)), Err(RelayError::Rejected(_))));
        assert!(matches!(s.ingest(msg(vec![1, 2, 3], 1)), Err(RelayError::Rejected(_))));
        assert_eq!(s.rejected(), 2);
        assert!(s.beacons().is_empty());
    }

    #[test]
    fn schedule_arithmetic() {
        let mut s = RelayState::new();
        s.ingest(msg(adv(0), 1)).unwrap();
        s.register_emitter("e1");
        let cmd = ReplayCommand { beacon_id: 1, emitter_id: "e1".into(), start_at: 100, interval: 2, repeat: Some(3) };
        s.schedule_replay(cmd, 50).unwrap();
        assert_eq!(s.next_due(), Some(100));
        let times: Vec<_> = s.take_due(1000).iter().map(|e| e.at).collect();
        assert_eq!(times, vec![100, 102, 104]);
        assert_eq!(s.active_schedules(), 0);
    }

    #[test]
    fn schedule_validation() {
        let mut s = RelayState::new();
        s.ingest(msg(adv(0), 1)).unwrap();
        s.register_emitter("e1");
        let base = ReplayCommand { beacon_id: 1, emitter_id: "e1".into(), start_at: 10, interval: 2, repeat: None };
        assert!(matches!(
            s.schedule_replay(ReplayCommand { beacon_id: 9, ..base.clone() }, 0),
            Err(RelayError::NotFound(_))
        ));
        assert!(matches!(
            s.schedule_replay(ReplayCommand { emitter_id: "nope".into(), ..base.clone() }, 0),
            Err(RelayError::NotFound(_))
        ));
        assert!(matches!(
            s.schedule_replay(ReplayCommand { interval: 0, ..base.clone() }, 0),
            Err(RelayError::Validation(_))
        ));
        assert!(matches!(s.schedule_replay(base.clone(), 11), Err(RelayError::Validation(_))));
        assert!(s.schedule_replay(base, 10).is_ok());
    }

    #[test]
    fn unbounded_schedule_stops() {
        let mut s = RelayState::new();
        s.ingest(msg(adv(0), 1)).unwrap();
        s.register_emitter("e1");
        let cmd = ReplayCommand { beacon_id: 1, emitter_id: "e1".into(), start_at: 0, interval: 5, repeat: None };
        s.schedule_replay(cmd, 0).unwrap();
        assert_eq!(s.take_due(20).len(), 5);
        assert_eq!(s.stop(Some("e1"), None), 1);
        assert!(s.take_due(1000).is_empty());
        assert_eq!(s.next_due(), None);
    }

    #[test]
    fn journal_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("relay.journal");
        {
            let mut s = RelayState::open(&path).unwrap();
            s.ingest(msg(adv(0), 100)).unwrap();
            s.ingest(msg(adv(0), 130)).unwrap();
            s.ingest(msg(adv(1), 200)).unwrap();
            let mut bad = adv(2);
            bad[0] = 0;
            assert!(s.ingest(msg(bad, 300)).is_err());
        }
        let s = RelayState::open(&path).unwrap();
        assert_eq!(s.beacons().len(), 2);
        let b = s.beacon(1).unwrap();
        assert_eq!((b.first_seen, b.last_seen, b.seen_count), (100, 130, 2));
        assert_eq!(b.advertisement, adv(0));
    }

    #[test]
    fn capture_log_round_trip() {
        let msgs = vec![msg(adv(0), 1), msg(vec![0xde, 0xad], 2)];
        let mut buf = Vec::new();
        write_capture_log(&mut buf, &msgs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().contains("\"dead\""));
        assert_eq!(read_capture_log(buf.as_slice()).unwrap(), msgs);
    }

    proptest! {
        #[test]
        fn first_seen_is_min_heard_at(times in prop::collection::vec(0u64..1_000_000, 1..40)) {
            let mut s = RelayState::new();
            for &t in &times {
                s.ingest(msg(adv(0), t)).unwrap();
            }
            let b = s.beacon(1).unwrap();
            prop_assert_eq!(b.first_seen, *times.iter().min().unwrap());
            prop_assert_eq!(b.last_seen, *times.iter().max().unwrap());
            prop_assert_eq!(b.seen_count, times.len() as u64);
        }

        #[test]
        fn emissions_land_on_grid(start in 0u64..10_000, interval in 1u64..500, repeat in 1u64..50) {
            let mut s = RelayState::new();
            s.ingest(msg(adv(0), 0)).unwrap();
            s.register_emitter("e");
            let cmd = ReplayCommand { beacon_id: 1, emitter_id: "e".into(), start_at: start, interval, repeat: Some(repeat) };
            s.schedule_replay(cmd, 0).unwrap();
            let got = s.take_due(u64::MAX);
            prop_assert_eq!(got.len() as u64, repeat);
            for (k, e) in got.iter().enumerate() {
                prop_assert_eq!(e.at, start + k as u64 * interval);
            }
        }
    }
}
