//! Real TCP transport: one connection per client session, length-prefixed
//! frames, a bounded worker pool admitting connections FIFO, and per-DN
//! shared-secret identity.
//!
//! The frame layer is a u32 little-endian length followed by a version byte
//! and a canonical [`Msg`] body. A connection starts with a hello frame
//! carrying the caller DN and its shared secret; every later frame is one
//! request or one response. File content moves over a separate transfer
//! port as a header frame plus a raw byte stream.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::codec::{decode_frame_body, encode_frame, Msg};
use crate::content::Content;
use crate::vtime::Nanos;

use super::envelope::{codes, parse_service_url, CallError, CallResult, ServiceError};
use super::{check_trust, CallCtx, Runtime, ServiceEndpoint, ServiceSpec, TransferHandler};

const MAX_FRAME: u32 = 64 * 1024 * 1024;
const CHUNK: usize = 64 * 1024;

pub fn write_frame(stream: &mut TcpStream, msg: &Msg) -> std::io::Result<()> {
    stream.write_all(&encode_frame(msg))
}

pub fn read_frame(stream: &mut TcpStream) -> std::io::Result<Msg> {
    let mut len_buf = [0u8; 4];
    stream.read_exact(&mut len_buf)?;
    let len = u32::from_le_bytes(len_buf);
    if len == 0 || len > MAX_FRAME {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "bad frame length",
        ));
    }
    let mut body = vec![0u8; len as usize];
    stream.read_exact(&mut body)?;
    decode_frame_body(&body)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

/// FIFO connection admission: a worker per connection, bounded queue.
struct Pool {
    max: usize,
    queue_cap: usize,
    state: Mutex<PoolState>,
    cv: Condvar,
}

struct PoolState {
    active: usize,
    waiting: VecDeque<u64>,
    next_ticket: u64,
}

impl Pool {
    fn new(max: usize, queue_cap: usize) -> Pool {
        Pool {
            max,
            queue_cap,
            state: Mutex::new(PoolState {
                active: 0,
                waiting: VecDeque::new(),
                next_ticket: 0,
            }),
            cv: Condvar::new(),
        }
    }

    /// Returns false when the queue is full (overload).
    fn acquire(&self) -> bool {
        let mut st = self.state.lock();
        if st.active < self.max && st.waiting.is_empty() {
            st.active += 1;
            return true;
        }
        if st.waiting.len() >= self.queue_cap {
            return false;
        }
        let ticket = st.next_ticket;
        st.next_ticket += 1;
        st.waiting.push_back(ticket);
        loop {
            self.cv.wait(&mut st);
            if st.active < self.max && st.waiting.front() == Some(&ticket) {
                st.waiting.pop_front();
                st.active += 1;
                return true;
            }
        }
    }

    fn release(&self) {
        let mut st = self.state.lock();
        st.active -= 1;
        drop(st);
        self.cv.notify_all();
    }
}

struct HostedService {
    spec: ServiceSpec,
    endpoint: ServiceEndpoint,
}

struct HostInner {
    advertise: String,
    secrets: BTreeMap<String, String>,
    services: Mutex<BTreeMap<String, Arc<HostedService>>>,
    transfer: Mutex<Option<(String, Arc<dyn TransferHandler>)>>,
    pool: Pool,
    start: Instant,
    rng: Mutex<ChaCha20Rng>,
    next_request: AtomicU64,
    stopping: AtomicBool,
    caller: CallerPool,
}

/// A host process on the socket transport.
#[derive(Clone)]
pub struct SocketHost {
    inner: Arc<HostInner>,
    threads: Arc<Mutex<Vec<std::thread::JoinHandle<()>>>>,
}

impl SocketHost {
    /// `advertise` is the host:port clients use to reach this process.
    pub fn new(
        advertise: &str,
        pool: super::WorkerPoolConfig,
        secrets: BTreeMap<String, String>,
    ) -> SocketHost {
        let mut seed = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut seed);
        SocketHost {
            inner: Arc::new(HostInner {
                advertise: advertise.to_string(),
                secrets: secrets.clone(),
                services: Mutex::new(BTreeMap::new()),
                transfer: Mutex::new(None),
                pool: Pool::new(pool.max_concurrent, pool.queue_capacity),
                start: Instant::now(),
                rng: Mutex::new(ChaCha20Rng::from_seed(seed)),
                next_request: AtomicU64::new(1),
                stopping: AtomicBool::new(false),
                caller: CallerPool::new(secrets),
            }),
            threads: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn register_service(&self, spec: ServiceSpec) -> Result<ServiceEndpoint, ServiceError> {
        let mut services = self.inner.services.lock();
        if services.contains_key(&spec.name) {
            return Err(ServiceError::new(
                codes::DUPLICATE_NAME,
                format!("service {} already registered", spec.name),
            ));
        }
        let endpoint = ServiceEndpoint {
            url: format!("chel://{}/{}", self.inner.advertise, spec.name),
            dn: spec.dn.clone(),
        };
        services.insert(
            spec.name.clone(),
            Arc::new(HostedService {
                endpoint: endpoint.clone(),
                spec,
            }),
        );
        Ok(endpoint)
    }

    pub fn set_transfer_handler(&self, dn: &str, handler: Arc<dyn TransferHandler>) {
        *self.inner.transfer.lock() = Some((dn.to_string(), handler));
    }

    pub fn port_for(&self, service: &str) -> SocketPort {
        let services = self.inner.services.lock();
        let rec = services.get(service).expect("service not registered");
        SocketPort {
            inner: self.inner.clone(),
            endpoint: rec.endpoint.clone(),
        }
    }

    /// Emulation of the simulation-only network shaping control.
    pub fn set_network(&self, _latency: Nanos, _bandwidth: u64) -> Result<(), ServiceError> {
        Err(ServiceError::new(
            codes::NOT_SIMULATION,
            "network shaping requires the simulation transport",
        ))
    }

    /// Bind the RPC listener and start serving. Non-blocking.
    pub fn serve_rpc(&self, bind: &str) -> std::io::Result<()> {
        let listener = TcpListener::bind(bind)?;
        let inner = self.inner.clone();
        let handle = std::thread::Builder::new()
            .name(format!("rpc-{bind}"))
            .spawn(move || {
                for stream in listener.incoming() {
                    if inner.stopping.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let inner = inner.clone();
                    std::thread::spawn(move || serve_rpc_conn(inner, stream));
                }
            })?;
        self.threads.lock().push(handle);
        Ok(())
    }

    /// Bind the byte-stream transfer listener. Non-blocking.
    pub fn serve_transfer(&self, bind: &str) -> std::io::Result<()> {
        let listener = TcpListener::bind(bind)?;
        let inner = self.inner.clone();
        let handle = std::thread::Builder::new()
            .name(format!("xfer-{bind}"))
            .spawn(move || {
                for stream in listener.incoming() {
                    if inner.stopping.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let inner = inner.clone();
                    std::thread::spawn(move || {
                        let _ = serve_transfer_conn(inner, stream);
                    });
                }
            })?;
        self.threads.lock().push(handle);
        Ok(())
    }

    /// Launch the background tasks of all registered services.
    pub fn start_services(&self) {
        let services: Vec<Arc<HostedService>> =
            self.inner.services.lock().values().cloned().collect();
        for rec in services {
            let port = SocketPort {
                inner: self.inner.clone(),
                endpoint: rec.endpoint.clone(),
            };
            rec.spec.service.on_start(&port);
            for task in rec.spec.service.background_tasks() {
                let port = port.clone();
                let inner = self.inner.clone();
                let handle = std::thread::Builder::new()
                    .name(task.name.clone())
                    .spawn(move || {
                        std::thread::sleep(Duration::from_nanos(task.phase));
                        while !inner.stopping.load(Ordering::SeqCst) {
                            (task.tick)(&port);
                            std::thread::sleep(Duration::from_nanos(task.period));
                        }
                    })
                    .expect("spawn background task");
                self.threads.lock().push(handle);
            }
        }
    }

    pub fn stop(&self) {
        self.inner.stopping.store(true, Ordering::SeqCst);
    }
}

fn serve_rpc_conn(inner: Arc<HostInner>, mut stream: TcpStream) {
    // Hello: authenticate the DN by shared secret.
    let hello = match read_frame(&mut stream) {
        Ok(m) => m,
        Err(_) => return,
    };
    let dn = hello.get_str("dn").unwrap_or_default().to_string();
    let secret = hello.get_str("secret").unwrap_or_default();
    if inner.secrets.get(&dn).map(String::as_str) != Some(secret) {
        let _ = write_frame(
            &mut stream,
            &Msg::map()
                .field(
                    "err",
                    ServiceError::new(codes::TRUST_DENIED, "bad identity secret").to_msg(),
                )
                .build(),
        );
        return;
    }
    // Admission: this connection is one worker session.
    if !inner.pool.acquire() {
        let _ = write_frame(
            &mut stream,
            &Msg::map()
                .field(
                    "err",
                    ServiceError::new(codes::QUEUE_FULL, "worker queue full").to_msg(),
                )
                .build(),
        );
        return;
    }
    let _ = write_frame(&mut stream, &Msg::map().field("ok", Msg::Bool(true)).build());

    loop {
        let req = match read_frame(&mut stream) {
            Ok(m) => m,
            Err(_) => break,
        };
        let id = req.get_int("id").unwrap_or(0);
        let service_name = req.get_str("service").unwrap_or_default().to_string();
        let op = req.get_str("op").unwrap_or_default().to_string();
        let trace = req.get_int("trace").unwrap_or(0) as u64;
        let payload = req.get("payload").clone();

        let rec = inner.services.lock().get(&service_name).cloned();
        let result: CallResult = match rec {
            None => Err(CallError::remote(
                codes::UNKNOWN_TARGET,
                format!("no service {service_name}"),
            )),
            Some(rec) => {
                if rec.spec.service.is_internal(&op) && !check_trust(&dn, &rec.spec.trusted) {
                    Err(CallError::remote(
                        codes::TRUST_DENIED,
                        format!("{dn} is not trusted by {service_name}"),
                    ))
                } else {
                    let port = SocketPort {
                        inner: inner.clone(),
                        endpoint: rec.endpoint.clone(),
                    };
                    let ctx = CallCtx {
                        caller_dn: &dn,
                        trace,
                        rt: &port,
                    };
                    rec.spec
                        .service
                        .handle(&ctx, &op, &payload)
                        .map_err(CallError::Remote)
                }
            }
        };
        let frame = match result {
            Ok(msg) => Msg::map().int_field("id", id).field("ok", msg).build(),
            Err(CallError::Remote(e)) => Msg::map()
                .int_field("id", id)
                .field("err", e.to_msg())
                .build(),
            Err(other) => Msg::map()
                .int_field("id", id)
                .field(
                    "err",
                    ServiceError::new(other.code(), other.to_string()).to_msg(),
                )
                .build(),
        };
        if write_frame(&mut stream, &frame).is_err() {
            break;
        }
    }
    inner.pool.release();
}

fn serve_transfer_conn(inner: Arc<HostInner>, mut stream: TcpStream) -> std::io::Result<()> {
    let header = read_frame(&mut stream)?;
    let token = header.get_str("token").unwrap_or_default().to_string();
    let dir = header.get_str("dir").unwrap_or_default().to_string();
    let handler = inner.transfer.lock().clone();
    let Some((handler_dn, handler)) = handler else {
        write_frame(
            &mut stream,
            &Msg::map()
                .field(
                    "err",
                    ServiceError::new(codes::UNKNOWN_TARGET, "no transfer endpoint").to_msg(),
                )
                .build(),
        )?;
        return Ok(());
    };
    let port = SocketPort {
        inner: inner.clone(),
        endpoint: ServiceEndpoint {
            url: format!("chel://{}/_transfer", inner.advertise),
            dn: handler_dn,
        },
    };
    match dir.as_str() {
        "put" => {
            let size = header.get_int("size").unwrap_or(0).max(0) as u64;
            write_frame(&mut stream, &Msg::map().field("ok", Msg::Bool(true)).build())?;
            let mut data = Vec::with_capacity(size.min(1 << 30) as usize);
            let mut remaining = size;
            let mut buf = vec![0u8; CHUNK];
            while remaining > 0 {
                let n = stream.read(&mut buf[..remaining.min(CHUNK as u64) as usize])?;
                if n == 0 {
                    return Ok(()); // truncated upload burns the ticket
                }
                data.extend_from_slice(&buf[..n]);
                remaining -= n as u64;
            }
            let outcome = handler.upload(&port, &token, Content::Bytes(data));
            let frame = match outcome {
                Ok(()) => Msg::map().field("ok", Msg::Bool(true)).build(),
                Err(e) => Msg::map().field("err", e.to_msg()).build(),
            };
            write_frame(&mut stream, &frame)?;
        }
        "get" => match handler.download(&port, &token) {
            Ok(content) => {
                let bytes = content.materialize();
                write_frame(
                    &mut stream,
                    &Msg::map()
                        .field("ok", Msg::Bool(true))
                        .int_field("size", bytes.len() as i64)
                        .build(),
                )?;
                stream.write_all(&bytes)?;
            }
            Err(e) => {
                write_frame(&mut stream, &Msg::map().field("err", e.to_msg()).build())?;
            }
        },
        _ => {
            write_frame(
                &mut stream,
                &Msg::map()
                    .field(
                        "err",
                        ServiceError::new(codes::BAD_REQUEST, "bad transfer direction").to_msg(),
                    )
                    .build(),
            )?;
        }
    }
    Ok(())
}

/// Outbound connections, pooled per target address, one hello each.
struct CallerPool {
    secrets: BTreeMap<String, String>,
    idle: Mutex<HashMap<(String, String), Vec<TcpStream>>>,
}

impl CallerPool {
    fn new(secrets: BTreeMap<String, String>) -> CallerPool {
        CallerPool {
            secrets,
            idle: Mutex::new(HashMap::new()),
        }
    }

    fn connect(&self, addr: &str, dn: &str) -> Result<TcpStream, CallError> {
        if let Some(conn) = self
            .idle
            .lock()
            .get_mut(&(addr.to_string(), dn.to_string()))
            .and_then(Vec::pop)
        {
            return Ok(conn);
        }
        let secret = self.secrets.get(dn).cloned().unwrap_or_default();
        open_session_conn(addr, dn, &secret)
    }

    fn put_back(&self, addr: &str, dn: &str, conn: TcpStream) {
        let mut idle = self.idle.lock();
        let conns = idle.entry((addr.to_string(), dn.to_string())).or_default();
        if conns.len() < 4 {
            conns.push(conn);
        }
    }
}

/// Dial, send hello, await accept. Exposed for the CLI client.
pub fn open_session_conn(addr: &str, dn: &str, secret: &str) -> Result<TcpStream, CallError> {
    let mut stream = TcpStream::connect(addr)
        .map_err(|e| CallError::Transport(format!("connect {addr}: {e}")))?;
    stream.set_nodelay(true).ok();
    write_frame(
        &mut stream,
        &Msg::map().str_field("dn", dn).str_field("secret", secret).build(),
    )
    .map_err(|e| CallError::Transport(e.to_string()))?;
    let reply = read_frame(&mut stream).map_err(|e| CallError::Transport(e.to_string()))?;
    if let Msg::Map(m) = &reply {
        if let Some(err) = m.get("err") {
            let e = ServiceError::from_msg(err);
            return if e.is(codes::QUEUE_FULL) {
                Err(CallError::QueueFull(addr.to_string()))
            } else {
                Err(CallError::Remote(e))
            };
        }
    }
    Ok(stream)
}

/// Issue one request on an established session connection.
pub fn call_on_conn(
    stream: &mut TcpStream,
    id: u64,
    service: &str,
    op: &str,
    trace: u64,
    payload: Msg,
) -> CallResult {
    let frame = Msg::map()
        .int_field("id", id as i64)
        .str_field("service", service)
        .str_field("op", op)
        .int_field("trace", trace as i64)
        .field("payload", payload)
        .build();
    write_frame(stream, &frame).map_err(|e| CallError::Transport(e.to_string()))?;
    let reply = read_frame(stream).map_err(|e| CallError::Transport(e.to_string()))?;
    if let Msg::Map(m) = &reply {
        if let Some(err) = m.get("err") {
            return Err(CallError::Remote(ServiceError::from_msg(err)));
        }
        if let Some(ok) = m.get("ok") {
            return Ok(ok.clone());
        }
    }
    Err(CallError::Transport("malformed response".into()))
}

/// Redeem a transfer URL over TCP.
pub fn transfer(turl: &str, body: Option<Content>) -> Result<Option<Content>, CallError> {
    let (addr, token) =
        parse_service_url(turl).ok_or_else(|| CallError::UnknownTarget(turl.to_string()))?;
    let mut stream = TcpStream::connect(&addr)
        .map_err(|e| CallError::Transport(format!("connect {addr}: {e}")))?;
    match body {
        Some(content) => {
            let bytes = content.materialize();
            write_frame(
                &mut stream,
                &Msg::map()
                    .str_field("token", &token)
                    .str_field("dir", "put")
                    .int_field("size", bytes.len() as i64)
                    .build(),
            )
            .map_err(|e| CallError::Transport(e.to_string()))?;
            let ready = read_frame(&mut stream).map_err(|e| CallError::Transport(e.to_string()))?;
            if let Some(err) = ready.as_map().and_then(|m| m.get("err")) {
                return Err(CallError::Remote(ServiceError::from_msg(err)));
            }
            stream
                .write_all(&bytes)
                .map_err(|e| CallError::Transport(e.to_string()))?;
            let done = read_frame(&mut stream).map_err(|e| CallError::Transport(e.to_string()))?;
            if let Some(err) = done.as_map().and_then(|m| m.get("err")) {
                return Err(CallError::Remote(ServiceError::from_msg(err)));
            }
            Ok(None)
        }
        None => {
            write_frame(
                &mut stream,
                &Msg::map()
                    .str_field("token", &token)
                    .str_field("dir", "get")
                    .build(),
            )
            .map_err(|e| CallError::Transport(e.to_string()))?;
            let head = read_frame(&mut stream).map_err(|e| CallError::Transport(e.to_string()))?;
            if let Some(err) = head.as_map().and_then(|m| m.get("err")) {
                return Err(CallError::Remote(ServiceError::from_msg(err)));
            }
            let size = head.get_int("size").unwrap_or(0).max(0) as usize;
            let mut data = vec![0u8; size];
            stream
                .read_exact(&mut data)
                .map_err(|e| CallError::Transport(e.to_string()))?;
            Ok(Some(Content::Bytes(data)))
        }
    }
}

/// Runtime implementation for services hosted on the socket transport.
#[derive(Clone)]
pub struct SocketPort {
    inner: Arc<HostInner>,
    endpoint: ServiceEndpoint,
}

impl Runtime for SocketPort {
    fn call_raw(&self, trace: u64, target_url: &str, op: &str, payload: Msg) -> CallResult {
        let (addr, service) = parse_service_url(target_url)
            .ok_or_else(|| CallError::UnknownTarget(target_url.to_string()))?;
        let dn = self.endpoint.dn.clone();
        let mut conn = self.inner.caller.connect(&addr, &dn)?;
        let id = self.inner.next_request.fetch_add(1, Ordering::SeqCst);
        match call_on_conn(&mut conn, id, &service, op, trace, payload) {
            Ok(msg) => {
                self.inner.caller.put_back(&addr, &dn, conn);
                Ok(msg)
            }
            Err(CallError::Remote(e)) => {
                self.inner.caller.put_back(&addr, &dn, conn);
                Err(CallError::Remote(e))
            }
            Err(e) => Err(e), // broken connection is dropped
        }
    }

    fn transfer_raw(
        &self,
        _trace: u64,
        turl: &str,
        body: Option<Content>,
    ) -> Result<Option<Content>, CallError> {
        transfer(turl, body)
    }

    fn now(&self) -> Nanos {
        self.inner.start.elapsed().as_nanos() as Nanos
    }

    fn sleep(&self, ns: Nanos) {
        std::thread::sleep(Duration::from_nanos(ns));
    }

    fn rand_u64(&self) -> u64 {
        self.inner.rng.lock().next_u64()
    }

    fn self_endpoint(&self) -> &ServiceEndpoint {
        &self.endpoint
    }

    fn is_simulation(&self) -> bool {
        false
    }
}
