//! Client-side access to bartenders: one session per client, bounded
//! retries with exponential backoff on overload, failover to the next
//! configured bartender on connection failure. Uploads compute the

//! checksum locally and stream bytes straight to the storage node's ticket
//! URL; downloads stream from it. No file byte ever passes a bartender.

use std::collections::BTreeMap;

use parking_lot::Mutex;

use crate::codec::Msg;
use crate::content::Content;
use crate::hed::config::{Config, ConfigError};
use crate::hed::envelope::{codes, CallError, CallResult};
use crate::hed::sim::{Sim, SimPort};
use crate::vtime::{secs, Nanos};

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub bartender_urls: Vec<String>,
    pub identity: String,
    pub secret: String,
    pub default_needed_replicas: u32,
    pub retry_attempts: usize,
    pub retry_backoff: Nanos,
}

impl ClientConfig {
    pub fn from_config(cfg: &Config) -> Result<ClientConfig, ConfigError> {
        let urls = cfg.get_list("client", "bartender_urls");
        if urls.is_empty() {
            return Err(ConfigError::Missing("client".into(), "bartender_urls".into()));
        }
        let needed = cfg.get_u64("client", "needed_replicas", 2)?.max(1) as u32;
        Ok(ClientConfig {
            bartender_urls: urls,
            identity: cfg
                .get("client", "identity")
                .unwrap_or("CN=user")
                .to_string(),
            secret: cfg.get("client", "secret").unwrap_or_default().to_string(),
            default_needed_replicas: needed,
            retry_attempts: cfg.get_u64("client", "retry_attempts", 5)? as usize,
            retry_backoff: secs(cfg.get_f64("client", "retry_backoff_secs", 0.5)?),
        })
    }
}

/// One bartender attempt plus the transfer lane; the retry loop lives in
/// [`StorageClient`].
pub trait Transport: Send + Sync {
    fn call(&self, op: &str, payload: Msg) -> CallResult;
    /// Fail over to the next configured bartender.
    fn rotate(&self);
    fn transfer(&self, turl: &str, body: Option<Content>) -> Result<Option<Content>, CallError>;
    fn sleep(&self, ns: Nanos);
    /// Message-accounting trace of the most recent call (simulation only).
    fn last_trace(&self) -> u64 {
        0
    }
}

/// Simulation transport: a session against the active bartender, a fresh
/// trace per operation so benchmarks can attribute messages exactly.
pub struct SimTransport {
    sim: Sim,
    port: SimPort,
    urls: Vec<String>,
    state: Mutex<SimConnState>,
    trace_per_op: bool,
}

struct SimConnState {
    active: usize,
    session: Option<u64>,
    last_trace: u64,
}

impl SimTransport {
    pub fn new(sim: Sim, port: SimPort, urls: Vec<String>) -> SimTransport {
        assert!(!urls.is_empty());
        SimTransport {
            sim,
            port,
            urls,
            state: Mutex::new(SimConnState {
                active: 0,
                session: None,
                last_trace: 0,
            }),
            trace_per_op: true,
        }
    }

    pub fn close(&self) {
        let mut st = self.state.lock();
        if let Some(session) = st.session.take() {
            self.port.close_session(&self.urls[st.active], session);
        }
    }
}

impl Transport for SimTransport {
    fn call(&self, op: &str, payload: Msg) -> CallResult {
        let (url, session, trace) = {
            let mut st = self.state.lock();
            let url = self.urls[st.active].clone();
            let session = match st.session {
                Some(s) => s,
                None => {
                    drop(st);
                    let s = self.port.open_session(&url)?;
                    st = self.state.lock();
                    st.session = Some(s);
                    s
                }
            };
            let trace = if self.trace_per_op {
                self.sim.new_trace()
            } else {
                0
            };
            st.last_trace = trace;
            (url, session, trace)
        };
        let result = self
            .port
            .call_in_session(Some(session), trace, &url, op, payload);
        if matches!(result, Err(CallError::Transport(_))) {
            self.state.lock().session = None; // connection gone
        }
        result
    }

    fn rotate(&self) {
        let mut st = self.state.lock();
        if let Some(session) = st.session.take() {
            self.port.close_session(&self.urls[st.active], session);
        }
        st.active = (st.active + 1) % self.urls.len();
    }

    fn transfer(&self, turl: &str, body: Option<Content>) -> Result<Option<Content>, CallError> {
        use crate::hed::Runtime;
        let trace = self.state.lock().last_trace;
        self.port.transfer_raw(trace, turl, body)
    }

    fn sleep(&self, ns: Nanos) {
        self.port.sleep(ns);
    }

    fn last_trace(&self) -> u64 {
        self.state.lock().last_trace
    }
}

/// TCP transport: one connection per session, hello/secret authentication.
pub struct TcpTransport {
    urls: Vec<String>,
    dn: String,
    secret: String,
    state: Mutex<TcpConnState>,
}

struct TcpConnState {
    active: usize,
    conn: Option<std::net::TcpStream>,
    next_id: u64,
}

impl TcpTransport {
    pub fn new(cfg: &ClientConfig) -> TcpTransport {
        TcpTransport {
            urls: cfg.bartender_urls.clone(),
            dn: cfg.identity.clone(),
            secret: cfg.secret.clone(),
            state: Mutex::new(TcpConnState {
                active: 0,
                conn: None,
                next_id: 1,
            }),
        }
    }
}

impl Transport for TcpTransport {
    fn call(&self, op: &str, payload: Msg) -> CallResult {
        use crate::hed::envelope::parse_service_url;
        use crate::hed::socket;
        let mut st = self.state.lock();
        let url = self.urls[st.active].clone();
        let (addr, service) =
            parse_service_url(&url).ok_or_else(|| CallError::UnknownTarget(url.clone()))?;
        if st.conn.is_none() {
            st.conn = Some(socket::open_session_conn(&addr, &self.dn, &self.secret)?);
        }
        let id = st.next_id;
        st.next_id += 1;
        let conn = st.conn.as_mut().unwrap();
        let result = socket::call_on_conn(conn, id, &service, op, 0, payload);
        if matches!(result, Err(CallError::Transport(_))) {
            st.conn = None;
        }
        result
    }

    fn rotate(&self) {
        let mut st = self.state.lock();
        st.conn = None;
        st.active = (st.active + 1) % self.urls.len();
    }

    fn transfer(&self, turl: &str, body: Option<Content>) -> Result<Option<Content>, CallError> {
        crate::hed::socket::transfer(turl, body)
    }

    fn sleep(&self, ns: Nanos) {
        std::thread::sleep(std::time::Duration::from_nanos(ns));
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GetOutcome {
    Data(Content),
    /// Traversal hit a mount point; the content lives at this external URL.
    External(String),
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("{code}: {message}")]
pub struct ClientError {
    pub code: String,
    pub message: String,
}

impl ClientError {
    fn from_call(err: CallError) -> ClientError {
        ClientError {
            code: err.code().to_string(),
            message: err.to_string(),
        }
    }
}

pub struct StorageClient<T: Transport> {
    pub transport: T,
    attempts: usize,
    backoff: Nanos,
    needed_default: u32,
    retries_observed: Mutex<u64>,
}

impl<T: Transport> StorageClient<T> {
    pub fn new(transport: T, attempts: usize, backoff: Nanos, needed_default: u32) -> Self {
        StorageClient {
            transport,
            attempts: attempts.max(1),
            backoff,
            needed_default,
            retries_observed: Mutex::new(0),
        }
    }

    pub fn retries_observed(&self) -> u64 {
        *self.retries_observed.lock()
    }

    /// Overload and connection failures are retried with exponential
    /// backoff, failing over to the next bartender on connection errors.
    fn call(&self, op: &str, payload: Msg) -> Result<Msg, ClientError> {
        const BACKOFF_CAP: Nanos = 8_000_000_000;
        let mut backoff = self.backoff.min(BACKOFF_CAP);
        let mut last = None;
        for attempt in 0..self.attempts {
            match self.transport.call(op, payload.clone()) {
                Ok(msg) => return Ok(msg),
                Err(CallError::Remote(e)) => {
                    if e.is(codes::QUEUE_FULL) && attempt + 1 < self.attempts {
                        *self.retries_observed.lock() += 1;
                        self.transport.sleep(backoff);
                        backoff = (backoff * 2).min(BACKOFF_CAP);
                        last = Some(CallError::Remote(e));
                        continue;
                    }
                    return Err(ClientError::from_call(CallError::Remote(e)));
                }
                Err(e @ (CallError::QueueFull(_) | CallError::Transport(_) | CallError::Timeout)) => {
                    if attempt + 1 < self.attempts {
                        *self.retries_observed.lock() += 1;
                        if matches!(e, CallError::Transport(_)) {
                            self.transport.rotate();
                        }
                        self.transport.sleep(backoff);
                        backoff = (backoff * 2).min(BACKOFF_CAP);
                        last = Some(e);
                        continue;
                    }
                    return Err(ClientError::from_call(e));
                }
                Err(e) => return Err(ClientError::from_call(e)),
            }
        }
        Err(ClientError::from_call(last.unwrap_or(CallError::Timeout)))
    }

    pub fn mkdir(&self, ln: &str) -> Result<(), ClientError> {
        self.call("make_collection", Msg::map().str_field("ln", ln).build())?;
        Ok(())
    }

    pub fn put(&self, ln: &str, content: Content, needed: Option<u32>) -> Result<String, ClientError> {
        let checksum = content.checksum();
        let payload = Msg::map()
            .str_field("ln", ln)
            .int_field("size", content.len() as i64)
            .str_field("checksum", &checksum)
            .str_field("checksumType", content.checksum_type())
            .int_field(
                "neededReplicas",
                needed.unwrap_or(self.needed_default) as i64,
            )
            .build();
        let resp = self.call("put_file", payload)?;
        let turl = resp.get_str("turl").unwrap_or_default().to_string();
        self.transport
            .transfer(&turl, Some(content))
            .map_err(ClientError::from_call)?;
        Ok(resp.get_str("guid").unwrap_or_default().to_string())
    }

    pub fn get(&self, ln: &str) -> Result<GetOutcome, ClientError> {
        let resp = self.call("get_file", Msg::map().str_field("ln", ln).build())?;
        if let Some(external) = resp.get_str("external") {
            return Ok(GetOutcome::External(external.to_string()));
        }
        let turl = resp.get_str("turl").unwrap_or_default();
        let content = self
            .transport
            .transfer(turl, None)
            .map_err(ClientError::from_call)?
            .ok_or_else(|| ClientError {
                code: codes::TRANSPORT_FAILURE.to_string(),
                message: "empty download".into(),
            })?;
        Ok(GetOutcome::Data(content))
    }

    pub fn list(&self, ln: &str) -> Result<BTreeMap<String, (String, String)>, ClientError> {
        let resp = self.call("list", Msg::map().str_field("ln", ln).build())?;
        let mut out = BTreeMap::new();
        for (name, info) in resp.get("entries").as_map().into_iter().flatten() {
            out.insert(
                name.clone(),
                (
                    info.get_str("guid").unwrap_or_default().to_string(),
                    info.get_str("type").unwrap_or_default().to_string(),
                ),
            );
        }
        Ok(out)
    }

    pub fn stat(&self, ln: &str) -> Result<Msg, ClientError> {
        self.call("stat", Msg::map().str_field("ln", ln).build())
    }

    pub fn del(&self, ln: &str) -> Result<(), ClientError> {
        self.call("del_file", Msg::map().str_field("ln", ln).build())?;
        Ok(())
    }

    pub fn mv(&self, src: &str, dst: &str) -> Result<(), ClientError> {
        self.call(
            "move",
            Msg::map().str_field("src", src).str_field("dst", dst).build(),
        )?;
        Ok(())
    }

    pub fn rmdir(&self, ln: &str) -> Result<(), ClientError> {
        self.call("unmake_collection", Msg::map().str_field("ln", ln).build())?;
        Ok(())
    }

    pub fn mount(&self, ln: &str, url: &str) -> Result<(), ClientError> {
        self.call(
            "mount",
            Msg::map().str_field("ln", ln).str_field("url", url).build(),
        )?;
        Ok(())
    }
}
