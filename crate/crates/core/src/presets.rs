//! Canned experiments. Each expands to a [`Scenario`] and has a default
//! horizon long enough to show its effect.
//!
//! Shared layout: the victim tag sits at site A (origin), the attacker's
//! collector 3 m from it, the emitter at site B `distance` meters east with a
//! bystander finder 5 m further, and the owner far away at (-5000, 0).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde_json::json;

use crate::sim::{ActionKind, EntityKind, EntitySpec, Point, Scenario, ScenarioError, TagMode, TimelineEntry};
use crate::time::parse_duration;
use crate::Timestamp;

const DAY: u64 = 86_400;

pub const TAG: &str = "tag";
pub const OWNER: &str = "owner";
pub const COLLECTOR: &str = "collector";
pub const EMITTER: &str = "emitter";
pub const FINDER_A: &str = "finder-a";
pub const FINDER_B: &str = "finder-b";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Relay a lost tag's beacon to a remote site; the owner sees site B.
    RelayBasic,
    /// Replay one captured key across a rotation; the legit next-epoch report
    /// retires it.
    KeyRotation,
    /// Replay a three-day-old beacon next to the owner; it beats fresh cloud
    /// reports.
    LocalOverride,
    /// Battery pulled right after capture; the frozen key replays until it
    /// ages past seven days.
    ReplayLifetime,
    /// Legit and relayed reports interleave; the owner view flips between
    /// sites.
    Alternation,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::RelayBasic,
        Preset::KeyRotation,
        Preset::LocalOverride,
        Preset::ReplayLifetime,
        Preset::Alternation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::RelayBasic => "relay-basic",
            Preset::KeyRotation => "key-rotation",
            Preset::LocalOverride => "local-override",
            Preset::ReplayLifetime => "replay-lifetime",
            Preset::Alternation => "alternation",
        }
    }

    pub fn default_until(self) -> Timestamp {
        match self {
            Preset::RelayBasic => 3600,
            Preset::KeyRotation => 2 * DAY,
            Preset::LocalOverride => 3 * DAY + 3 * 3600,
            Preset::ReplayLifetime => 10 * DAY,
            Preset::Alternation => 2 * 3600,
        }
    }

    fn default_interval(self) -> u64 {
        match self {
            Preset::RelayBasic | Preset::LocalOverride => 2,
            Preset::KeyRotation => 30,
            Preset::ReplayLifetime => 60,
            Preset::Alternation => 120,
        }
    }

    /// Expands the preset. Recognized parameters: `distance` (meters between
    /// the sites), `interval` (replay interval) and `poll` (owner poll
    /// interval).
    pub fn scenario(self, params: &BTreeMap<String, String>) -> Result<Scenario, ScenarioError> {
        let mut errors = Vec::new();
        let mut distance = 1000.0;
        let mut interval = self.default_interval();
        let mut poll = None;
        for (k, v) in params {
            match k.as_str() {
                "distance" => match v.parse::<f64>() {
                    Ok(d) if d.is_finite() && d > 0.0 => distance = d,
                    _ => errors.push(format!("parameter distance: bad value {v:?}")),
                },
                "interval" => match parse_duration(v) {
                    Ok(i) if i > 0 => interval = i,
                    _ => errors.push(format!("parameter interval: bad value {v:?}")),
                },
                "poll" => match parse_duration(v) {
                    Ok(p) if p > 0 => poll = Some(p),
                    _ => errors.push(format!("parameter poll: bad value {v:?}")),
                },
                other => errors.push(format!("unknown parameter {other:?} for preset {}", self.name())),
            }
        }
        if !errors.is_empty() {
            return Err(ScenarioError::Invalid(errors));
        }

        let site_b = Point::new(distance, 0.0);
        let mut s = Scenario {
            entities: vec![
                EntitySpec::tag(TAG, Point::new(0.0, 0.0), OWNER, 0, TagMode::Lost),
                EntitySpec::new(COLLECTOR, EntityKind::Collector, Point::new(3.0, 0.0)),
                EntitySpec::new(EMITTER, EntityKind::Emitter, site_b),
                EntitySpec::new(FINDER_B, EntityKind::Finder, Point::new(site_b.x + 5.0, 0.0)),
                EntitySpec::new(OWNER, EntityKind::OwnerPhone, Point::new(-5000.0, 0.0)),
            ],
            ..Default::default()
        };
        let relay = |at: Timestamp| {
            TimelineEntry::new(
                at,
                ActionKind::StartRelay,
                json!({ "emitter": EMITTER, "beacon": "latest", "interval": interval }),
            )
        };
        let legit_finder = || EntitySpec::new(FINDER_A, EntityKind::Finder, Point::new(5.0, 0.0));

        match self {
            Preset::RelayBasic => {
                s.timeline.push(relay(10));
            }
            Preset::KeyRotation => {
                s.world.finder_upload_interval = 60;
                s.entities.push(legit_finder());
                s.timeline.push(relay(30));
            }
            Preset::LocalOverride => {
                s.world.finder_upload_interval = 60;
                s.entities.push(legit_finder());
                // emitter parked next to the owner instead of at site B
                s.entities[2].position = Point::new(-4995.0, 0.0);
                s.timeline.push(TimelineEntry::new(
                    60,
                    ActionKind::Move,
                    json!({ "entity": COLLECTOR, "position": [3.0, 10_000.0] }),
                ));
                s.timeline.push(relay(3 * DAY));
                s.timeline.push(TimelineEntry::new(
                    3 * DAY + 2 * 3600,
                    ActionKind::StopRelay,
                    json!({ "emitter": EMITTER }),
                ));
            }
            Preset::ReplayLifetime => {
                // last epoch-0 advertisement goes out at DAY - 2
                s.timeline.push(TimelineEntry::new(
                    DAY - 1,
                    ActionKind::Power,
                    json!({ "tag": TAG, "on": false }),
                ));
                s.timeline.push(relay(DAY));
            }
            Preset::Alternation => {
                s.world.lost_adv_interval = 120;
                s.world.owner_poll_offset = 30;
                s.entities.push(legit_finder());
                s.timeline.push(relay(60));
            }
        }
        if let Some(p) = poll {
            s.world.owner_poll_interval = p;
        }
        s.validate()?;
        Ok(s)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                format!("unknown preset {s:?} (expected one of {})", names.join(", "))
            })
    }
}

/// A preset plus its parameter overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentPreset {
    pub preset: Preset,
    pub parameters: BTreeMap<String, String>,
}

impl ExperimentPreset {
    pub fn new(preset: Preset) -> Self {
        Self { preset, parameters: BTreeMap::new() }
    }

    pub fn expand(&self) -> Result<Scenario, ScenarioError> {
        self.preset.scenario(&self.parameters)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_expands() {
        for p in Preset::ALL {
            let s = ExperimentPreset::new(p).expand().unwrap();
            assert!(s.validate().is_ok(), "{p}");
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("nope".parse::<Preset>().is_err());
    }

    #[test]
    fn parameters() {
        let mut e = ExperimentPreset::new(Preset::RelayBasic);
        e.parameters.insert("distance".into(), "2500".into());
        e.parameters.insert("interval".into(), "5s".into());
        let s = e.expand().unwrap();
        assert_eq!(s.entity(EMITTER).unwrap().position, Point::new(2500.0, 0.0));
        assert_eq!(s.timeline[0].args["interval"], 5);

        e.parameters.insert("colour".into(), "red".into());
        e.parameters.insert("distance".into(), "-1".into());
        let Err(ScenarioError::Invalid(errs)) = e.expand() else { panic!() };
        assert_eq!(errs.len(), 2);
    }
}
