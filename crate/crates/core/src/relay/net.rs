//! Relay server wire service: the same length-prefixed JSON framing as the
//! cloud store, with `hello`/`observe`/`schedule`/`advance`/`stop` from
//! clients and `emit` pushed to emitters.

use std::collections::HashMap;
use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Emission, ObservationMsg, RelayError, RelayState, ReplayCommand, StoredBeacon};
use crate::net::{self, Clock, ServerHandle};
use crate::wire::{self, hex_bytes, FrameError};
use crate::Timestamp;

const LIVE_TICK: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Collector,
    Emitter,
    Controller,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmitFrame {
    pub schedule_id: u64,
    pub beacon_id: u64,
    #[serde(with = "hex_bytes")]
    pub advertisement: Vec<u8>,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum RelayMsg {
    Hello {
        role: Role,
        id: String,
    },
    Observe(ObservationMsg),
    Schedule(ReplayCommand),
    /// Virtual-clock mode only: moves the server clock forward and
    /// dispatches everything now due.
    Advance {
        to: Timestamp,
    },
    Stop {
        #[serde(default)]
        emitter_id: Option<String>,
        #[serde(default)]
        beacon_id: Option<u64>,
    },
    Emit(EmitFrame),
    Ack {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beacon: Option<StoredBeacon>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schedule_id: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        count: Option<u64>,
    },
    Err {
        error: String,
    },
}

impl RelayMsg {
    fn ack() -> Self {
        RelayMsg::Ack { beacon: None, schedule_id: None, count: None }
    }

    fn err(e: impl ToString) -> Self {
        RelayMsg::Err { error: e.to_string() }
    }
}

/// How the server decides what "now" is.
#[derive(Clone)]
pub enum ClockMode {
    /// Dispatch against a real clock from a background thread.
    Live(Clock),
    /// Clock only moves on `advance` requests.
    Virtual,
}

struct Shared {
    state: RelayState,
    sinks: HashMap<String, Arc<Mutex<TcpStream>>>,
    virtual_now: Timestamp,
}

impl Shared {
    fn dispatch(&mut self, due: Vec<Emission>) -> u64 {
        let mut sent = 0;
        for e in due {
            let Some(sink) = self.sinks.get(&e.emitter_id) else {
                log::debug!("emitter {} gone, dropping emission at {}", e.emitter_id, e.at);
                continue;
            };
            let frame = RelayMsg::Emit(EmitFrame {
                schedule_id: e.schedule_id,
                beacon_id: e.beacon_id,
                advertisement: e.advertisement,
                at: e.at,
            });
            let mut stream = sink.lock().expect("sink lock poisoned");
            if wire::write_frame(&mut *stream, &frame).is_ok() {
                sent += 1;
            }
        }
        sent
    }
}

pub struct RelayServer;

impl RelayServer {
    pub fn spawn(addr: impl ToSocketAddrs, state: RelayState, mode: ClockMode) -> io::Result<ServerHandle> {
        let listener = net::bind(addr)?;
        let shared = Arc::new(Mutex::new(Shared { state, sinks: HashMap::new(), virtual_now: 0 }));

        let session_shared = Arc::clone(&shared);
        let session_mode = mode.clone();
        let handle = net::spawn_accept_loop(listener, "relay", move |stream| {
            session(Arc::clone(&session_shared), session_mode.clone(), stream)
        })?;

        if let ClockMode::Live(clock) = mode {
            let flag = handle.shutdown_flag();
            thread::Builder::new().name("relay-dispatch".into()).spawn(move || {
                while !flag.load(Ordering::SeqCst) {
                    {
                        let mut g = shared.lock().expect("relay lock poisoned");
                        let due = g.state.take_due(clock());
                        g.dispatch(due);
                    }
                    thread::sleep(LIVE_TICK);
                }
            })?;
        }
        Ok(handle)
    }
}

fn session(shared: Arc<Mutex<Shared>>, mode: ClockMode, mut stream: TcpStream) {
    let mut emitter_id: Option<String> = None;
    loop {
        let body = match wire::read_frame_bytes(&mut stream) {
            Ok(b) => b,
            Err(e) => {
                if !e.is_eof() {
                    log::debug!("relay session ended: {e}");
                }
                break;
            }
        };
        let reply = match serde_json::from_slice::<RelayMsg>(&body) {
            Ok(msg) => handle(&shared, &mode, &stream, &mut emitter_id, msg),
            Err(e) => RelayMsg::err(format!("protocol error: {e}")),
        };
        // Emitters share their socket with the dispatcher.
        let res = match emitter_id.as_ref() {
            Some(id) => {
                let g = shared.lock().expect("relay lock poisoned");
                match g.sinks.get(id) {
                    Some(sink) => {
                        let sink = Arc::clone(sink);
                        drop(g);
                        let mut s = sink.lock().expect("sink lock poisoned");
                        wire::write_frame(&mut *s, &reply)
                    }
                    None => wire::write_frame(&mut stream, &reply),
                }
            }
            None => wire::write_frame(&mut stream, &reply),
        };
        if res.is_err() {
            break;
        }
    }
    if let Some(id) = emitter_id {
        let mut g = shared.lock().expect("relay lock poisoned");
        g.sinks.remove(&id);
        g.state.unregister_emitter(&id);
    }
}

fn handle(
    shared: &Mutex<Shared>,
    mode: &ClockMode,
    stream: &TcpStream,
    emitter_id: &mut Option<String>,
    msg: RelayMsg,
) -> RelayMsg {
    let mut g = shared.lock().expect("relay lock poisoned");
    let now = match mode {
        ClockMode::Live(clock) => clock(),
        ClockMode::Virtual => g.virtual_now,
    };
    match msg {
        RelayMsg::Hello { role, id } => {
            if id.is_empty() || id.contains(char::is_whitespace) {
                return RelayMsg::err(format!("validation error: bad node id {id:?}"));
            }
            if role == Role::Emitter {
                let sink = match stream.try_clone() {
                    Ok(s) => s,
                    Err(e) => return RelayMsg::err(e),
                };
                g.sinks.insert(id.clone(), Arc::new(Mutex::new(sink)));
                g.state.register_emitter(&id);
                *emitter_id = Some(id);
            }
            RelayMsg::ack()
        }
        RelayMsg::Observe(obs) => match g.state.ingest(obs) {
            Ok(beacon) => RelayMsg::Ack { beacon: Some(beacon), schedule_id: None, count: None },
            Err(e) => RelayMsg::err(e),
        },
        RelayMsg::Schedule(cmd) => match g.state.schedule_replay(cmd, now) {
            Ok(id) => RelayMsg::Ack { beacon: None, schedule_id: Some(id), count: None },
            Err(e) => RelayMsg::err(e),
        },
        RelayMsg::Advance { to } => match mode {
            ClockMode::Live(_) => RelayMsg::err("protocol error: advance is only valid in virtual mode"),
            ClockMode::Virtual => {
                if to < g.virtual_now {
                    return RelayMsg::err(format!("validation error: clock cannot go back to {to}"));
                }
                g.virtual_now = to;
                let due = g.state.take_due(to);
                let sent = g.dispatch(due);
                RelayMsg::Ack { beacon: None, schedule_id: None, count: Some(sent) }
            }
        },
        RelayMsg::Stop { emitter_id, beacon_id } => {
            let n = g.state.stop(emitter_id.as_deref(), beacon_id);
            RelayMsg::Ack { beacon: None, schedule_id: None, count: Some(n as u64) }
        }
        RelayMsg::Emit(_) | RelayMsg::Ack { .. } | RelayMsg::Err { .. } => {
            RelayMsg::err("protocol error: unexpected message from client")
        }
    }
}

/// Client for any relay node role.
pub struct RelayClient {
    stream: TcpStream,
}

impl RelayClient {
    pub fn connect(addr: impl ToSocketAddrs, role: Role, id: &str) -> Result<Self, RelayError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut c = Self { stream };
        c.call(&RelayMsg::Hello { role, id: id.to_owned() })?;
        Ok(c)
    }

    pub fn send(&mut self, msg: &RelayMsg) -> Result<(), RelayError> {
        wire::write_frame(&mut self.stream, msg).map_err(frame_err)
    }

    pub fn recv(&mut self) -> Result<RelayMsg, RelayError> {
        wire::read_frame(&mut self.stream).map_err(frame_err)
    }

    /// Sends a request and waits for its ack. Emit frames that arrive in
    /// between are not expected on non-emitter sessions and are an error.
    pub fn call(&mut self, msg: &RelayMsg) -> Result<RelayMsg, RelayError> {
        self.send(msg)?;
        match self.recv()? {
            RelayMsg::Err { error } => Err(classify(error)),
            other => Ok(other),
        }
    }

    pub fn observe(&mut self, msg: ObservationMsg) -> Result<StoredBeacon, RelayError> {
        match self.call(&RelayMsg::Observe(msg))? {
            RelayMsg::Ack { beacon: Some(b), .. } => Ok(b),
            other => Err(RelayError::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn schedule(&mut self, cmd: ReplayCommand) -> Result<u64, RelayError> {
        match self.call(&RelayMsg::Schedule(cmd))? {
            RelayMsg::Ack { schedule_id: Some(id), .. } => Ok(id),
            other => Err(RelayError::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    /// Returns how many emit frames the server pushed.
    pub fn advance(&mut self, to: Timestamp) -> Result<u64, RelayError> {
        match self.call(&RelayMsg::Advance { to })? {
            RelayMsg::Ack { count: Some(n), .. } => Ok(n),
            other => Err(RelayError::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn stop(&mut self, emitter_id: Option<&str>, beacon_id: Option<u64>) -> Result<u64, RelayError> {
        let msg = RelayMsg::Stop { emitter_id: emitter_id.map(str::to_owned), beacon_id };
        match self.call(&msg)? {
            RelayMsg::Ack { count: Some(n), .. } => Ok(n),
            other => Err(RelayError::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    /// Blocks for the next emit frame (emitter role).
    pub fn next_emit(&mut self) -> Result<EmitFrame, RelayError> {
        loop {
            match self.recv()? {
                RelayMsg::Emit(frame) => return Ok(frame),
                RelayMsg::Err { error } => return Err(classify(error)),
                _ => continue,
            }
        }
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(t)
    }
}

fn classify(error: String) -> RelayError {
    if let Some(rest) = error.strip_prefix("not found: ") {
        RelayError::NotFound(rest.to_owned())
    } else if let Some(rest) = error.strip_prefix("validation error: ") {
        RelayError::Validation(rest.to_owned())
    } else if let Some(rest) = error.strip_prefix("rejected advertisement: ") {
        RelayError::Rejected(rest.to_owned())
    } else {
        RelayError::Protocol(error)
    }
}

fn frame_err(e: FrameError) -> RelayError {
    match e {
        FrameError::Io(io) => RelayError::Io(io),
        other => RelayError::Protocol(other.to_string()),
    }
}
