//! Scenario documents.
//!
//! ```json
//! {
//!   "world":    { "ble_range": 30, "origin": { "lat": 48.2082, "lon": 16.3738 } },
//!   "entities": [
//!     { "id": "tag", "kind": "tag", "position": [0, 0],
//!       "pairing_time": 0, "owner": "owner", "mode": "lost" },
//!     { "id": "owner", "kind": "owner_phone", "position": [-5000, 0] }
//!   ],
//!   "timeline": [
//!     { "at": "1d", "action": "power", "args": { "tag": "tag", "on": false } }
//!   ]
//! }
//! ```
//!
//! Plane coordinates are meters. Latitude/longitude are derived from them
//! with a fixed equirectangular mapping around `world.origin`: one degree of
//! latitude is 111 320 m and one degree of longitude is
//! `111 320 * cos(origin.lat)` m. Times are seconds or duration strings
//! such as `"36h"`.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::owner::OwnerConfig;
use crate::protocol::DEFAULT_ROTATION_PERIOD;
use crate::time::parse_duration;
use crate::Timestamp;

const METERS_PER_DEGREE: f64 = 111_320.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoOrigin {
    pub lat: f64,
    pub lon: f64,
}

impl Default for GeoOrigin {
    fn default() -> Self {
        Self { lat: 48.2082, lon: 16.3738 }
    }
}

impl GeoOrigin {
    fn lon_scale(&self) -> f64 {
        METERS_PER_DEGREE * self.lat.to_radians().cos()
    }

    pub fn to_geo(&self, p: Point) -> (f64, f64) {
        (self.lat + p.y / METERS_PER_DEGREE, self.lon + p.x / self.lon_scale())
    }

    pub fn to_plane(&self, lat: f64, lon: f64) -> Point {
        Point::new((lon - self.lon) * self.lon_scale(), (lat - self.lat) * METERS_PER_DEGREE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub ble_range: f64,
    pub rssi_at_1m: f64,
    pub path_loss_exponent: f64,
    pub lost_adv_interval: u64,
    pub connected_adv_interval: u64,
    pub separation_delay: u64,
    pub rotation_period: u64,
    pub origin: GeoOrigin,
    /// Accuracy finders attach to their reports, meters.
    pub finder_accuracy: u8,
    /// Minimum spacing between two uploads by the same finder for the same
    /// advertised key; 0 uploads on every sighting.
    pub finder_upload_interval: u64,
    pub owner_poll_interval: u64,
    pub owner_poll_offset: u64,
    /// Collector → relay server latency.
    pub relay_link_delay: u64,
    pub owner: OwnerConfig,
    /// Log every tag advertisement, not just key rotations.
    pub log_advertisements: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            ble_range: 30.0,
            rssi_at_1m: -40.0,
            path_loss_exponent: 2.0,
            lost_adv_interval: 2,
            connected_adv_interval: 30,
            separation_delay: 1800,
            rotation_period: DEFAULT_ROTATION_PERIOD,
            origin: GeoOrigin::default(),
            finder_accuracy: 10,
            finder_upload_interval: 0,
            owner_poll_interval: 60,
            owner_poll_offset: 0,
            relay_link_delay: 0,
            owner: OwnerConfig::default(),
            log_advertisements: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Tag,
    Finder,
    OwnerPhone,
    Collector,
    Emitter,
}

impl EntityKind {
    pub fn receives(self) -> bool {
        matches!(self, EntityKind::Finder | EntityKind::OwnerPhone | EntityKind::Collector)
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityKind::Tag => "tag",
            EntityKind::Finder => "finder",
            EntityKind::OwnerPhone => "owner_phone",
            EntityKind::Collector => "collector",
            EntityKind::Emitter => "emitter",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagMode {
    Connected,
    Lost,
}

/// Seconds, or a duration string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeSpec {
    Seconds(i64),
    Text(String),
}

impl TimeSpec {
    pub fn resolve(&self) -> Result<Timestamp, String> {
        match self {
            TimeSpec::Seconds(s) if *s >= 0 => Ok(*s as u64),
            TimeSpec::Seconds(s) => Err(format!("negative time {s}")),
            TimeSpec::Text(t) => parse_duration(t).map_err(|e| e.to_string()),
        }
    }
}

impl From<u64> for TimeSpec {
    fn from(s: u64) -> Self {
        TimeSpec::Seconds(s as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntitySpec {
    pub id: String,
    pub kind: EntityKind,
    pub position: Point,
    /// Tag only: 32-byte master secret as hex. Derived from the seed and id
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secret: Option<String>,
    /// Tag only: unpaired until a `pair` action when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairing_time: Option<TimeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<TagMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub powered: Option<bool>,
}

impl EntitySpec {
    pub fn new(id: &str, kind: EntityKind, position: Point) -> Self {
        Self {
            id: id.to_owned(),
            kind,
            position,
            secret: None,
            pairing_time: None,
            owner: None,
            mode: None,
            powered: None,
        }
    }

    /// A tag paired to `owner` at `pairing_time`.
    pub fn tag(id: &str, position: Point, owner: &str, pairing_time: Timestamp, mode: TagMode) -> Self {
        Self {
            pairing_time: Some(pairing_time.into()),
            owner: Some(owner.to_owned()),
            mode: Some(mode),
            ..Self::new(id, EntityKind::Tag, position)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Move,
    Power,
    Pair,
    OwnerContact,
    StartRelay,
    StopRelay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimelineEntry {
    pub at: TimeSpec,
    pub action: ActionKind,
    #[serde(default)]
    pub args: Value,
}

impl TimelineEntry {
    pub fn new(at: Timestamp, action: ActionKind, args: Value) -> Self {
        Self { at: at.into(), action, args }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BeaconSelector {
    Id(u64),
    Named(BeaconName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeaconName {
    /// Most recently first-seen beacon.
    Latest,
    First,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Move { entity: String, position: Point },
    Power { tag: String, on: bool },
    Pair { tag: String, owner: String },
    OwnerContact { tag: String },
    StartRelay {
        emitter: String,
        beacon: BeaconSelector,
        interval: u64,
        repeat: Option<u64>,
        start_delay: u64,
    },
    StopRelay { emitter: String },
}

impl Action {
    /// Entity used for same-time ordering.
    pub fn subject(&self) -> &str {
        match self {
            Action::Move { entity, .. } => entity,
            Action::Power { tag, .. } | Action::Pair { tag, .. } | Action::OwnerContact { tag } => tag,
            Action::StartRelay { emitter, .. } | Action::StopRelay { emitter } => emitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledAction {
    pub at: Timestamp,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub entities: Vec<EntitySpec>,
    #[serde(default)]
    pub timeline: Vec<TimelineEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MoveArgs {
    entity: String,
    position: Point,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PowerArgs {
    tag: String,
    on: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairArgs {
    tag: String,
    owner: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TagArgs {
    tag: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StartRelayArgs {
    emitter: String,
    #[serde(default = "latest")]
    beacon: BeaconSelector,
    interval: TimeSpec,
    #[serde(default)]
    repeat: Option<u64>,
    #[serde(default)]
    start_delay: Option<TimeSpec>,
}

fn latest() -> BeaconSelector {
    BeaconSelector::Named(BeaconName::Latest)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmitterArgs {
    emitter: String,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "_.-".contains(c))
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn entity(&self, id: &str) -> Option<&EntitySpec> {
        self.entities.iter().find(|e| e.id == id)
    }

    /// Checks the whole document and returns the typed timeline, sorted by
    /// time (stable for equal times). Every problem found is reported.
    pub fn validate(&self) -> Result<Vec<ScheduledAction>, ScenarioError> {
        let mut errors = Vec::new();
        self.validate_world(&mut errors);

        let mut kinds: HashMap<&str, EntityKind> = HashMap::new();
        let mut seen = HashSet::new();
        for (i, e) in self.entities.iter().enumerate() {
            let at = format!("entities[{i}] ({})", e.id);
            if !valid_id(&e.id) {
                errors.push(format!("{at}: id must be non-empty [A-Za-z0-9_.-]"));
            }
            if !seen.insert(e.id.as_str()) {
                errors.push(format!("{at}: duplicate id"));
            }
            if !(e.position.x.is_finite() && e.position.y.is_finite()) {
                errors.push(format!("{at}: position must be finite"));
            }
            kinds.insert(&e.id, e.kind);
        }
        for (i, e) in self.entities.iter().enumerate() {
            let at = format!("entities[{i}] ({})", e.id);
            if e.kind != EntityKind::Tag {
                if e.secret.is_some() || e.pairing_time.is_some() || e.owner.is_some() || e.mode.is_some() || e.powered.is_some() {
                    errors.push(format!("{at}: tag-only fields on a {}", e.kind));
                }
                continue;
            }
            if let Some(s) = &e.secret {
                match hex::decode(s) {
                    Ok(b) if b.len() == 32 => {}
                    _ => errors.push(format!("{at}: secret must be 64 hex characters")),
                }
            }
            if let Some(t) = &e.pairing_time {
                if let Err(msg) = t.resolve() {
                    errors.push(format!("{at}: pairing_time: {msg}"));
                }
            }
            if let Some(o) = &e.owner {
                if kinds.get(o.as_str()) != Some(&EntityKind::OwnerPhone) {
                    errors.push(format!("{at}: owner {o:?} is not an owner_phone"));
                }
            }
        }

        let mut actions = Vec::new();
        for (i, entry) in self.timeline.iter().enumerate() {
            let at = match entry.at.resolve() {
                Ok(t) => t,
                Err(msg) => {
                    errors.push(format!("timeline[{i}]: at: {msg}"));
                    continue;
                }
            };
            let ctx = format!("timeline[{i}] ({:?} at {at})", entry.action);
            match self.parse_action(entry, &kinds) {
                Ok(action) => actions.push(ScheduledAction { at, action }),
                Err(msgs) => errors.extend(msgs.into_iter().map(|m| format!("{ctx}: {m}"))),
            }
        }

        if errors.is_empty() {
            actions.sort_by_key(|a| a.at);
            Ok(actions)
        } else {
            Err(ScenarioError::Invalid(errors))
        }
    }

    fn validate_world(&self, errors: &mut Vec<String>) {
        let w = &self.world;
        let positive_f = [
            ("ble_range", w.ble_range),
            ("path_loss_exponent", w.path_loss_exponent),
        ];
        for (name, v) in positive_f {
            if !(v > 0.0 && v.is_finite()) {
                errors.push(format!("world.{name} must be positive"));
            }
        }
        if !w.rssi_at_1m.is_finite() {
            errors.push("world.rssi_at_1m must be finite".into());
        }
        let positive_u = [
            ("lost_adv_interval", w.lost_adv_interval),
            ("connected_adv_interval", w.connected_adv_interval),
            ("separation_delay", w.separation_delay),
            ("rotation_period", w.rotation_period),
            ("owner_poll_interval", w.owner_poll_interval),
            ("owner.query_epochs", w.owner.query_epochs),
        ];
        for (name, v) in positive_u {
            if v == 0 {
                errors.push(format!("world.{name} must be positive"));
            }
        }
        if w.origin.lat.abs() >= 90.0 || w.origin.lon.abs() > 180.0 {
            errors.push("world.origin out of range".into());
        }
    }

    fn parse_action(&self, entry: &TimelineEntry, kinds: &HashMap<&str, EntityKind>) -> Result<Action, Vec<String>> {
        fn args<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T, Vec<String>> {
            serde_json::from_value(v.clone()).map_err(|e| vec![format!("bad args: {e}")])
        }
        let expect = |id: &str, want: &[EntityKind]| -> Option<String> {
            match kinds.get(id) {
                None => Some(format!("unknown entity {id:?}")),
                Some(k) if !want.is_empty() && !want.contains(k) => {
                    Some(format!("{id:?} is a {k}, expected {}", want.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" or ")))
                }
                _ => None,
            }
        };
        let check = |problems: Vec<Option<String>>, action: Action| -> Result<Action, Vec<String>> {
            let problems: Vec<String> = problems.into_iter().flatten().collect();
            if problems.is_empty() {
                Ok(action)
            } else {
                Err(problems)
            }
        };

        match entry.action {
            ActionKind::Move => {
                let a: MoveArgs = args(&entry.args)?;
                let finite = (a.position.x.is_finite() && a.position.y.is_finite())
                    .then_some(())
                    .map_or(Some("position must be finite".to_owned()), |_| None);
                check(vec![expect(&a.entity, &[]), finite], Action::Move { entity: a.entity, position: a.position })
            }
            ActionKind::Power => {
                let a: PowerArgs = args(&entry.args)?;
                check(vec![expect(&a.tag, &[EntityKind::Tag])], Action::Power { tag: a.tag, on: a.on })
            }
            ActionKind::Pair => {
                let a: PairArgs = args(&entry.args)?;
                check(
                    vec![expect(&a.tag, &[EntityKind::Tag]), expect(&a.owner, &[EntityKind::OwnerPhone])],
                    Action::Pair { tag: a.tag, owner: a.owner },
                )
            }
            ActionKind::OwnerContact => {
                let a: TagArgs = args(&entry.args)?;
                check(vec![expect(&a.tag, &[EntityKind::Tag])], Action::OwnerContact { tag: a.tag })
            }
            ActionKind::StartRelay => {
                let a: StartRelayArgs = args(&entry.args)?;
                let mut problems = vec![expect(&a.emitter, &[EntityKind::Emitter])];
                let interval = a.interval.resolve().unwrap_or_else(|m| {
                    problems.push(Some(format!("interval: {m}")));
                    0
                });
                if interval == 0 && problems.iter().flatten().all(|p| !p.starts_with("interval")) {
                    problems.push(Some("interval must be positive".into()));
                }
                let start_delay = match &a.start_delay {
                    None => 0,
                    Some(t) => t.resolve().unwrap_or_else(|m| {
                        problems.push(Some(format!("start_delay: {m}")));
                        0
                    }),
                };
                if a.repeat == Some(0) {
                    problems.push(Some("repeat must be positive".into()));
                }
                check(
                    problems,
                    Action::StartRelay { emitter: a.emitter, beacon: a.beacon, interval, repeat: a.repeat, start_delay },
                )
            }
            ActionKind::StopRelay => {
                let a: EmitterArgs = args(&entry.args)?;
                check(vec![expect(&a.emitter, &[EntityKind::Emitter])], Action::StopRelay { emitter: a.emitter })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    #[test]
    fn parses_example_document() {
        let doc = json!({
            "world": { "ble_range": 25, "origin": { "lat": 10.0, "lon": 20.0 } },
            "entities": [
                { "id": "tag", "kind": "tag", "position": [0, 0], "pairing_time": 0, "owner": "owner", "mode": "lost" },
                { "id": "owner", "kind": "owner_phone", "position": [-5000, 0] },
                { "id": "e1", "kind": "emitter", "position": [1000, 0] }
            ],
            "timeline": [
                { "at": "1d", "action": "power", "args": { "tag": "tag", "on": false } },
                { "at": 10, "action": "start_relay", "args": { "emitter": "e1", "interval": "2s" } },
                { "at": 20, "action": "stop_relay", "args": { "emitter": "e1" } }
            ]
        });
        let s = Scenario::from_json(&doc.to_string()).unwrap();
        assert_eq!(s.world.ble_range, 25.0);
        assert_eq!(s.world.lost_adv_interval, 2);
        let actions = s.validate().unwrap();
        assert_eq!(actions.len(), 3);
        assert_eq!(actions[0].at, 10);
        assert_eq!(actions[2].at, 86_400);
        assert!(matches!(
            &actions[0].action,
            Action::StartRelay { beacon: BeaconSelector::Named(BeaconName::Latest), interval: 2, repeat: None, .. }
        ));
        let again = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn reports_every_problem() {
        let doc = json!({
            "entities": [
                { "id": "a", "kind": "finder", "position": [0, 0] },
                { "id": "a", "kind": "tag", "position": [0, 0], "owner": "a" },
                { "id": "bad id", "kind": "collector", "position": [0, 0] }
            ],
            "timeline": [
                { "at": -5, "action": "move", "args": { "entity": "a", "position": [1, 1] } },
                { "at": 3, "action": "power", "args": { "tag": "ghost", "on": true } },
                { "at": 4, "action": "start_relay", "args": { "emitter": "a", "interval": 0 } }
            ]
        });
        let s = Scenario::from_json(&doc.to_string()).unwrap();
        let Err(ScenarioError::Invalid(errs)) = s.validate() else { panic!("expected invalid") };
        let text = errs.join("\n");
        assert!(text.contains("duplicate id"), "{text}");
        assert!(text.contains("bad id"), "{text}");
        assert!(text.contains("negative time"), "{text}");
        assert!(text.contains("ghost"), "{text}");
        assert!(text.contains("interval must be positive"), "{text}");
        assert!(text.contains("expected emitter"), "{text}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = Scenario::from_json("{\n  \"entities\": [\n    { \"id\": 3 }\n  ]\n}").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = Scenario::from_json("{\"wrold\": {}}").unwrap_err();
        assert!(err.to_string().contains("wrold"), "{err}");
    }

    #[test]
    fn geo_mapping_round_trips() {
        let o = GeoOrigin::default();
        let p = Point::new(1000.0, -250.0);
        let (lat, lon) = o.to_geo(p);
        let back = o.to_plane(lat, lon);
        assert!(back.distance(&p) < 1e-6);
        let (lat1, _) = o.to_geo(Point::new(0.0, 111_320.0));
        assert!((lat1 - o.lat - 1.0).abs() < 1e-12);
    }
}
