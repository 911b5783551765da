//! Event log and its CSV export.
//!
//! Columns, in order: `time,event,entity,key_epoch,lat,lon,source,flags`.
//! Empty cells mean "not applicable". Coordinates have six decimals, flags
//! are `;`-separated.

use std::fmt;
use std::io::{self, Write};

use crate::owner::ViewSource;
use crate::Timestamp;

pub const CSV_HEADER: &str = "time,event,entity,key_epoch,lat,lon,source,flags";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LogEvent {
    Pair,
    Move,
    Power,
    Mode,
    OwnerContact,
    /// A tag started advertising a new key.
    Rotate,
    Adv,
    Upload,
    Drop,
    Capture,
    Reject,
    RelayStart,
    RelayStop,
    RelayError,
    Emit,
    OwnerView,
}

impl LogEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            LogEvent::Pair => "pair",
            LogEvent::Move => "move",
            LogEvent::Power => "power",
            LogEvent::Mode => "mode",
            LogEvent::OwnerContact => "owner_contact",
            LogEvent::Rotate => "rotate",
            LogEvent::Adv => "adv",
            LogEvent::Upload => "upload",
            LogEvent::Drop => "drop",
            LogEvent::Capture => "capture",
            LogEvent::Reject => "reject",
            LogEvent::RelayStart => "relay_start",
            LogEvent::RelayStop => "relay_stop",
            LogEvent::RelayError => "relay_error",
            LogEvent::Emit => "emit",
            LogEvent::OwnerView => "owner_view",
        }
    }
}

impl fmt::Display for LogEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub time: Timestamp,
    pub event: LogEvent,
    pub entity: String,
    pub key_epoch: Option<u64>,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    pub source: Option<ViewSource>,
    pub flags: Vec<String>,
}

impl LogRow {
    pub fn new(time: Timestamp, event: LogEvent, entity: &str) -> Self {
        Self {
            time,
            event,
            entity: entity.to_owned(),
            key_epoch: None,
            lat: None,
            lon: None,
            source: None,
            flags: Vec::new(),
        }
    }

    pub fn epoch(mut self, epoch: Option<u64>) -> Self {
        self.key_epoch = epoch;
        self
    }

    pub fn at(mut self, (lat, lon): (f64, f64)) -> Self {
        self.lat = Some(lat);
        self.lon = Some(lon);
        self
    }

    pub fn source(mut self, source: ViewSource) -> Self {
        self.source = Some(source);
        self
    }

    pub fn flag(mut self, flag: impl Into<String>) -> Self {
        self.flags.push(flag.into());
        self
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let opt_u = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        let opt_f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            self.time,
            self.event,
            self.entity,
            opt_u(self.key_epoch),
            opt_f(self.lat),
            opt_f(self.lon),
            self.source.map(|s| s.to_string()).unwrap_or_default(),
            self.flags.join(";"),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    rows: Vec<LogRow>,
}

impl EventLog {
    pub fn push(&mut self, row: LogRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn of(&self, event: LogEvent) -> impl Iterator<Item = &LogRow> + '_ {
        self.rows.iter().filter(move |r| r.event == event)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            r.write_csv(&mut w)?;
        }
        w.flush()
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}
