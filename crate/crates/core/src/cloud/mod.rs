//! The crowd-sourced report store. It indexes encrypted reports by key id and
//! hands them back to whoever asks; it never sees keys or plaintext and does
//! not (cannot) check that a report is truthful.

mod net;

use std::collections::HashMap;
use std::io;
use std::path::Path;
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::crypto::{EncryptedReport, KeyId};
use crate::journal::{self, Journal};
use crate::Timestamp;

pub use net::{CloudClient, CloudRequest, CloudResponse, CloudServer, WireRecord};

/// Upper bound on key ids per fetch.
pub const MAX_FETCH_KEYS: usize = 64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportRecord {
    pub report: EncryptedReport,
    pub received_at: Timestamp,
    pub report_seq: u64,
}

/// Anything the owner can query for reports.
pub trait ReportSource {
    fn fetch(&mut self, key_ids: &[KeyId], since: Timestamp) -> Result<Vec<ReportRecord>, StoreError>;
}

#[derive(Debug, Default)]
pub struct CloudStore {
    records: Vec<ReportRecord>,
    by_key: HashMap<KeyId, Vec<usize>>,
    // false once an upload arrives with an earlier clock than its predecessor
    monotone: bool,
    journal: Option<Journal>,
}

pub type SharedStore = Arc<RwLock<CloudStore>>;

impl CloudStore {
    pub fn new() -> Self {
        Self { monotone: true, ..Default::default() }
    }

    /// Store backed by an append-only journal; existing records are replayed.
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let (journal, lines) = Journal::open(path)?;
        let mut store = Self::new();
        for (i, fields) in lines.iter().enumerate() {
            let [received_at, wire] = fields.as_slice() else {
                return Err(journal::corrupt(journal.path(), i, "expected 2 fields"));
            };
            let received_at: Timestamp = received_at
                .parse()
                .map_err(|e| journal::corrupt(journal.path(), i, e))?;
            let bytes = hex::decode(wire).map_err(|e| journal::corrupt(journal.path(), i, e))?;
            let report = EncryptedReport::from_wire(&bytes, received_at)
                .map_err(|e| journal::corrupt(journal.path(), i, e))?;
            store.insert(report, received_at);
        }
        store.journal = Some(journal);
        Ok(store)
    }

    pub fn into_shared(self) -> SharedStore {
        Arc::new(RwLock::new(self))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ReportRecord] {
        &self.records
    }

    fn insert(&mut self, report: EncryptedReport, now: Timestamp) -> u64 {
        if self.records.last().is_some_and(|r| r.received_at > now) {
            self.monotone = false;
        }
        let seq = self.records.len() as u64 + 1;
        self.by_key.entry(report.key_id).or_default().push(self.records.len());
        self.records.push(ReportRecord { report, received_at: now, report_seq: seq });
        seq
    }

    /// Stores a report as-is. Only the framing is checked.
    pub fn upload(&mut self, report: EncryptedReport, now: Timestamp) -> Result<u64, StoreError> {
        if report.ciphertext.len() > u16::MAX as usize {
            return Err(StoreError::Protocol("ciphertext too long".into()));
        }
        if let Some(j) = self.journal.as_mut() {
            j.append(&[&now.to_string(), &hex::encode(report.to_wire())])?;
        }
        Ok(self.insert(report, now))
    }

    pub fn upload_wire(&mut self, wire: &[u8], now: Timestamp) -> Result<u64, StoreError> {
        let report = EncryptedReport::from_wire(wire, now).map_err(|e| StoreError::Protocol(e.to_string()))?;
        self.upload(report, now)
    }

    /// Records under any of `key_ids` received at or after `since`, in
    /// arrival order.
    pub fn fetch(&self, key_ids: &[KeyId], since: Timestamp) -> Result<Vec<ReportRecord>, StoreError> {
        if key_ids.is_empty() || key_ids.len() > MAX_FETCH_KEYS {
            return Err(StoreError::Protocol(format!(
                "fetch needs 1..={MAX_FETCH_KEYS} key ids, got {}",
                key_ids.len()
            )));
        }
        let mut idx: Vec<usize> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for id in key_ids {
            if !seen.insert(id) {
                continue;
            }
            let Some(list) = self.by_key.get(id) else { continue };
            if self.monotone {
                let start = list.partition_point(|&i| self.records[i].received_at < since);
                idx.extend_from_slice(&list[start..]);
            } else {
                idx.extend(list.iter().copied().filter(|&i| self.records[i].received_at >= since));
            }
        }
        idx.sort_unstable();
        Ok(idx.into_iter().map(|i| self.records[i].clone()).collect())
    }
}

impl ReportSource for CloudStore {
    fn fetch(&mut self, key_ids: &[KeyId], since: Timestamp) -> Result<Vec<ReportRecord>, StoreError> {
        CloudStore::fetch(self, key_ids, since)
    }
}

impl ReportSource for SharedStore {
    fn fetch(&mut self, key_ids: &[KeyId], since: Timestamp) -> Result<Vec<ReportRecord>, StoreError> {
        self.read().expect("store lock poisoned").fetch(key_ids, since)
    }
}
