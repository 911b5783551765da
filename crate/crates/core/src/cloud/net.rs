use std::io;
use std::net::{TcpStream, ToSocketAddrs};

use serde::{Deserialize, Serialize};

use super::{ReportRecord, ReportSource, SharedStore, StoreError};
use crate::crypto::{EncryptedReport, KeyId};
use crate::net::{self, Clock, ServerHandle};
use crate::wire::{self, hex_bytes, FrameError};
use crate::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum CloudRequest {
    Upload {
        #[serde(with = "hex_bytes")]
        report: Vec<u8>,
    },
    Fetch {
        key_ids: Vec<String>,
        #[serde(default)]
        since: Timestamp,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRecord {
    pub report_seq: u64,
    pub received_at: Timestamp,
    #[serde(with = "hex_bytes")]
    pub report: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<Vec<WireRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CloudResponse {
    fn error(msg: impl Into<String>) -> Self {
        Self { ok: false, report_seq: None, records: None, error: Some(msg.into()) }
    }
}

fn handle(store: &SharedStore, req: CloudRequest, now: Timestamp) -> CloudResponse {
    match req {
        CloudRequest::Upload { report } => {
            let res = store.write().expect("store lock poisoned").upload_wire(&report, now);
            match res {
                Ok(seq) => CloudResponse { ok: true, report_seq: Some(seq), records: None, error: None },
                Err(e) => CloudResponse::error(e.to_string()),
            }
        }
        CloudRequest::Fetch { key_ids, since } => {
            let ids: Result<Vec<KeyId>, _> = key_ids.iter().map(|s| KeyId::from_hex(s)).collect();
            let ids = match ids {
                Ok(ids) => ids,
                Err(e) => return CloudResponse::error(format!("protocol error: {e}")),
            };
            match store.read().expect("store lock poisoned").fetch(&ids, since) {
                Ok(records) => CloudResponse {
                    ok: true,
                    report_seq: None,
                    records: Some(
                        records
                            .into_iter()
                            .map(|r| WireRecord {
                                report_seq: r.report_seq,
                                received_at: r.received_at,
                                report: r.report.to_wire(),
                            })
                            .collect(),
                    ),
                    error: None,
                },
                Err(e) => CloudResponse::error(e.to_string()),
            }
        }
    }
}

fn session(store: SharedStore, clock: Clock, mut stream: TcpStream) {
    loop {
        let body = match wire::read_frame_bytes(&mut stream) {
            Ok(b) => b,
            Err(e) => {
                if !e.is_eof() {
                    log::debug!("cloud session ended: {e}");
                }
                return;
            }
        };
        let resp = match serde_json::from_slice::<CloudRequest>(&body) {
            Ok(req) => handle(&store, req, clock()),
            Err(e) => CloudResponse::error(format!("protocol error: {e}")),
        };
        if wire::write_frame(&mut stream, &resp).is_err() {
            return;
        }
    }
}

/// TCP front end for a [`SharedStore`].
pub struct CloudServer;

impl CloudServer {
    pub fn spawn(addr: impl ToSocketAddrs, store: SharedStore, clock: Clock) -> io::Result<ServerHandle> {
        let listener = net::bind(addr)?;
        net::spawn_accept_loop(listener, "cloud", move |stream| {
            session(store.clone(), clock.clone(), stream)
        })
    }
}

/// Blocking request/response client.
pub struct CloudClient {
    stream: TcpStream,
}

impl CloudClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    pub fn request(&mut self, req: &CloudRequest) -> Result<CloudResponse, StoreError> {
        wire::write_frame(&mut self.stream, req).map_err(frame_err)?;
        wire::read_frame(&mut self.stream).map_err(frame_err)
    }

    pub fn upload(&mut self, report: &EncryptedReport) -> Result<u64, StoreError> {
        let resp = self.request(&CloudRequest::Upload { report: report.to_wire() })?;
        match (resp.ok, resp.report_seq) {
            (true, Some(seq)) => Ok(seq),
            _ => Err(StoreError::Protocol(resp.error.unwrap_or_else(|| "missing report_seq".into()))),
        }
    }
}

impl ReportSource for CloudClient {
    fn fetch(&mut self, key_ids: &[KeyId], since: Timestamp) -> Result<Vec<ReportRecord>, StoreError> {
        let req = CloudRequest::Fetch { key_ids: key_ids.iter().map(KeyId::to_hex).collect(), since };
        let resp = self.request(&req)?;
        if !resp.ok {
            return Err(StoreError::Protocol(resp.error.unwrap_or_default()));
        }
        resp.records
            .unwrap_or_default()
            .into_iter()
            .map(|w| {
                let report = EncryptedReport::from_wire(&w.report, w.received_at)
                    .map_err(|e| StoreError::Protocol(e.to_string()))?;
                Ok(ReportRecord { report, received_at: w.received_at, report_seq: w.report_seq })
            })
            .collect()
    }
}

fn frame_err(e: FrameError) -> StoreError {
    match e {
        FrameError::Io(io) => StoreError::Io(io),
        other => StoreError::Protocol(other.to_string()),
    }
}
