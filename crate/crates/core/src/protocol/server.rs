//! The staging server.
//!
//! Each accepted connection gets a reader thread that executes its requests
//! in arrival order; at most `workers` requests execute at once across all
//! connections. GETs whose box is not yet covered are parked and answered
//! by whichever PUT completes the coverage, or by the reaper on timeout.
//! Descriptor notifications to peers go through one sender thread per peer.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use thiserror::Error;

use crate::directory::{mix64, DistGrid, Directory, ObjectDescriptor, DEFAULT_MAX_VERSIONS};
use crate::geometry::{copy_region_raw, NDBox};
use crate::tier::{open_tier, ChunkHandle, ChunkKey, Tier, TierConfig, TierError};

use super::wire::{
    self, read_frame, write_frame, ErrorCode, FrameError, GetRequest, Message, PayloadError,
    PutRequest, ServerStat,
};

const NOTIFY_ATTEMPTS: u32 = 3;
const NOTIFY_BACKOFF: Duration = Duration::from_millis(50);
const NOTIFY_BATCH: usize = 256;
const PEER_IO_TIMEOUT: Duration = Duration::from_secs(5);
const KEY_DATA: u8 = 0x01;
const KEY_META: u8 = 0x02;

pub fn default_workers() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Observable server milestones, delivered to [`ServerConfig::events`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerEvent {
    PutAcked { var: String, version: u32, bbox: NDBox },
    GetParked { var: String, version: u32, bbox: NDBox },
    GetAnswered { var: String, version: u32, bbox: NDBox },
    GetTimedOut { var: String, version: u32, bbox: NDBox },
    Recovered { descriptors: usize },
}

pub type EventHook = Arc<dyn Fn(ServerEvent) + Send + Sync>;

#[derive(Clone)]
pub struct ServerConfig {
    pub server_id: u32,
    /// Address of every server, indexed by id.
    pub servers: Vec<String>,
    /// Bind address; `servers[server_id]` when unset.
    pub listen: Option<String>,
    pub grid: DistGrid,
    pub tier: TierConfig,
    pub workers: usize,
    pub max_versions: usize,
    pub events: Option<EventHook>,
}

impl fmt::Debug for ServerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerConfig")
            .field("server_id", &self.server_id)
            .field("servers", &self.servers)
            .field("listen", &self.listen)
            .field("grid", &self.grid)
            .field("tier", &self.tier)
            .field("workers", &self.workers)
            .field("max_versions", &self.max_versions)
            .finish_non_exhaustive()
    }
}

impl ServerConfig {
    pub fn new(server_id: u32, servers: Vec<String>, grid: DistGrid, tier: TierConfig) -> Self {
        Self {
            server_id,
            servers,
            listen: None,
            grid,
            tier,
            workers: default_workers(),
            max_versions: DEFAULT_MAX_VERSIONS,
            events: None,
        }
    }

    pub fn listen_addr(&self) -> &str {
        self.listen
            .as_deref()
            .unwrap_or(&self.servers[self.server_id as usize])
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("invalid server configuration: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error(transparent)]
    Tier(#[from] TierError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// A failed request, answered with an ERR frame.
struct Reject(ErrorCode, String);

impl Reject {
    fn new(code: ErrorCode, msg: impl Into<String>) -> Self {
        Reject(code, msg.into())
    }
}

impl From<TierError> for Reject {
    fn from(e: TierError) -> Self {
        match e {
            TierError::Capacity { .. } => Reject(ErrorCode::StagingFull, e.to_string()),
            e => Reject(ErrorCode::Internal, e.to_string()),
        }
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Write half of a client connection, shared with threads answering parked gets.
type Responder = Arc<Mutex<BufWriter<TcpStream>>>;

fn respond(out: &Responder, corr: u64, msg: &Message) {
    let mut w = out.lock().unwrap();
    if let Err(e) = write_frame(&mut *w, corr, msg) {
        debug!("dropping response {corr}: {e}");
    }
}

struct ParkedGet {
    corr: u64,
    req: GetRequest,
    deadline: Instant,
    out: Responder,
}

#[derive(Default)]
struct Pending {
    gets: Vec<ParkedGet>,
    closed: bool,
}

#[derive(Default)]
struct Counters {
    notify_sent: AtomicU64,
    notify_retries: AtomicU64,
    notify_failures: AtomicU64,
}

struct Shared {
    id: u32,
    grid: DistGrid,
    tier: Arc<dyn Tier>,
    dir: RwLock<Directory>,
    /// Meta chunk of each owned data chunk, keyed by data generation.
    meta: Mutex<HashMap<u64, ChunkHandle>>,
    pending: Mutex<Pending>,
    pending_cv: Condvar,
    workers: Semaphore,
    peers: Mutex<Vec<mpsc::Sender<ObjectDescriptor>>>,
    counters: Counters,
    shutting_down: AtomicBool,
    /// Descriptors handed to the notifiers so far.
    owned_registrations: AtomicU64,
    conns: Mutex<HashMap<u64, TcpStream>>,
    events: Option<EventHook>,
}

impl Shared {
    fn emit(&self, ev: impl FnOnce() -> ServerEvent) {
        if let Some(hook) = &self.events {
            hook(ev());
        }
    }

    fn check_owned(&self, var: &str, b: &NDBox) -> Result<(), Reject> {
        let blocks = self
            .grid
            .blocks_of(b)
            .map_err(|e| Reject::new(ErrorCode::BadRequest, e.to_string()))?;
        for c in blocks {
            let owner = self.grid.shard_owner(var, &c).expect("block in range");
            if owner != self.id {
                return Err(Reject::new(
                    ErrorCode::NotOwner,
                    format!("block {c:?} of `{var}` belongs to server {owner}, not {}", self.id),
                ));
            }
        }
        Ok(())
    }

    fn check_esize(&self, var: &str, version: u32, esize: u32) -> Result<(), Reject> {
        if esize == 0 {
            return Err(Reject::new(ErrorCode::BadRequest, "element size must be > 0"));
        }
        match self.dir.read().unwrap().element_size_of(var, version) {
            Some(e) if e != esize => Err(Reject::new(
                ErrorCode::ESize,
                format!("`{var}` version {version} has element size {e}, request uses {esize}"),
            )),
            _ => Ok(()),
        }
    }

    fn handle_put(&self, req: PutRequest) -> Result<(), Reject> {
        self.check_owned(&req.var, &req.bbox)?;
        self.check_esize(&req.var, req.version, req.element_size)?;
        let tag = descriptor_tag(&req.var, req.version, &req.bbox);
        let handle = self
            .tier
            .allocate_keyed(req.data.len() as u64, chunk_key(KEY_DATA, tag))?;
        let desc = ObjectDescriptor {
            var: req.var,
            version: req.version,
            bbox: req.bbox,
            element_size: req.element_size,
            owner: self.id,
            handle,
        };
        let stored = self.store(&desc, req.data);
        if let Err(e) = stored {
            let _ = self.tier.free_chunk(&handle);
            return Err(e.into());
        }
        {
            let mut dir = self.dir.write().unwrap();
            // Re-checked under the write lock: two first puts may race.
            if let Some(e) = dir.element_size_of(&desc.var, desc.version) {
                if e != desc.element_size {
                    drop(dir);
                    self.free_owned(&desc);
                    return Err(Reject::new(
                        ErrorCode::ESize,
                        format!("`{}` version {} has element size {e}", desc.var, desc.version),
                    ));
                }
            }
            let outcome = dir.register(desc.clone());
            drop(dir);
            for old in outcome.replaced.iter().chain(&outcome.evicted) {
                if old.owner == self.id && old.handle != desc.handle {
                    self.free_owned(old);
                }
            }
        }
        self.fan_out(&desc);
        Ok(())
    }

    /// Writes and flushes the data chunk, then (on persistent tiers) a meta
    /// chunk describing it, so that recovery never sees meta without data.
    fn store(&self, desc: &ObjectDescriptor, data: Vec<u8>) -> Result<(), TierError> {
        self.tier.write_chunk_owned(&desc.handle, data)?;
        self.tier.flush_chunk(&desc.handle)?;
        if self.tier.is_persistent() {
            let bytes = encode_meta(desc);
            let tag = descriptor_tag(&desc.var, desc.version, &desc.bbox);
            let mh = self
                .tier
                .allocate_keyed(bytes.len() as u64, chunk_key(KEY_META, tag))?;
            let written = self
                .tier
                .write_chunk(&mh, &bytes)
                .and_then(|_| self.tier.flush_chunk(&mh));
            if let Err(e) = written {
                let _ = self.tier.free_chunk(&mh);
                return Err(e);
            }
            self.meta.lock().unwrap().insert(desc.handle.generation, mh);
        }
        Ok(())
    }

    fn free_owned(&self, desc: &ObjectDescriptor) {
        if let Some(mh) = self.meta.lock().unwrap().remove(&desc.handle.generation) {
            if let Err(e) = self.tier.free_chunk(&mh) {
                warn!("freeing meta chunk of {}: {e}", desc.bbox);
            }
        }
        if let Err(e) = self.tier.free_chunk(&desc.handle) {
            debug!("freeing chunk of {} v{} {}: {e}", desc.var, desc.version, desc.bbox);
        }
    }

    fn fan_out(&self, desc: &ObjectDescriptor) {
        self.owned_registrations.fetch_add(1, Ordering::SeqCst);
        for tx in self.peers.lock().unwrap().iter() {
            let _ = tx.send(desc.clone());
        }
    }

    fn handle_notify(&self, desc: ObjectDescriptor) {
        if desc.owner == self.id {
            // Only this server is authoritative for its own chunks.
            return;
        }
        let outcome = self.dir.write().unwrap().register(desc);
        for old in &outcome.evicted {
            if old.owner == self.id {
                self.free_owned(old);
            }
        }
    }

    /// Answers a GET now if possible; otherwise parks it and returns `None`.
    fn handle_get(&self, corr: u64, req: GetRequest, out: &Responder) -> Option<Message> {
        if let Err(Reject(code, msg)) = self
            .check_owned(&req.var, &req.bbox)
            .and_then(|_| self.check_esize(&req.var, req.version, req.element_size))
        {
            return Some(Message::err(code, msg));
        }
        let mut pending = self.pending.lock().unwrap();
        let covered = self
            .dir
            .read()
            .unwrap()
            .is_covered_owned(&req.var, req.version, &req.bbox, self.id);
        if covered {
            drop(pending);
            return Some(self.assemble(&req));
        }
        if req.timeout_ms == 0 || pending.closed {
            let code = if pending.closed { ErrorCode::Shutdown } else { ErrorCode::Timeout };
            return Some(Message::err(code, format!("{} v{} {} not available", req.var, req.version, req.bbox)));
        }
        self.emit(|| ServerEvent::GetParked {
            var: req.var.clone(),
            version: req.version,
            bbox: req.bbox,
        });
        pending.gets.push(ParkedGet {
            corr,
            deadline: Instant::now() + Duration::from_millis(req.timeout_ms as u64),
            req,
            out: out.clone(),
        });
        self.pending_cv.notify_all();
        None
    }

    /// Builds the GET_RESP for a covered box from owned chunks, later
    /// registrations overwriting earlier ones where they overlap.
    fn assemble(&self, req: &GetRequest) -> Message {
        if let Err(Reject(code, msg)) = self.check_esize(&req.var, req.version, req.element_size) {
            return Message::err(code, msg);
        }
        let esize = req.element_size as usize;
        let mut last_err = None;
        // A chunk may be replaced or evicted between the query and the read;
        // retry with a fresh query in that case.
        for _ in 0..3 {
            let descs = self
                .dir
                .read()
                .unwrap()
                .query_owned(&req.var, req.version, &req.bbox, self.id);
            let mut buf = vec![0u8; (req.bbox.volume() as usize) * esize];
            let mut pieces = Vec::with_capacity(descs.len());
            let mut failed = false;
            for d in &descs {
                let region = d.bbox.intersect(&req.bbox).ok().flatten().expect("query intersects");
                let r = self.tier.visit_chunk(&d.handle, &mut |chunk| {
                    copy_region_raw(&d.bbox, chunk, &req.bbox, &mut buf, esize, &region)
                        .expect("descriptor geometry is consistent");
                });
                if let Err(e) = r {
                    last_err = Some(e);
                    failed = true;
                    break;
                }
                pieces.push(region);
            }
            if failed {
                continue;
            }
            if crate::geometry::covers(&req.bbox, &pieces) != Ok(true) {
                // Evicted since coverage was established.
                return Message::err(
                    ErrorCode::Internal,
                    format!("{} v{} {} no longer fully stored", req.var, req.version, req.bbox),
                );
            }
            return Message::GetResp(buf);
        }
        Message::err(
            ErrorCode::Internal,
            format!("reading {} v{}: {}", req.var, req.version, last_err.expect("set on failure")),
        )
    }

    /// Detaches parked gets on `(var, version)` that are now covered.
    fn take_ready(&self, var: &str, version: u32) -> Vec<ParkedGet> {
        let mut pending = self.pending.lock().unwrap();
        if pending.gets.is_empty() {
            return Vec::new();
        }
        let dir = self.dir.read().unwrap();
        let mut ready = Vec::new();
        let mut i = 0;
        while i < pending.gets.len() {
            let g = &pending.gets[i];
            if g.req.var == var
                && g.req.version == version
                && dir.is_covered_owned(var, version, &g.req.bbox, self.id)
            {
                ready.push(pending.gets.swap_remove(i));
            } else {
                i += 1;
            }
        }
        ready
    }

    fn answer_parked(&self, g: ParkedGet) {
        let resp = self.assemble(&g.req);
        if matches!(resp, Message::GetResp(_)) {
            self.emit(|| ServerEvent::GetAnswered {
                var: g.req.var.clone(),
                version: g.req.version,
                bbox: g.req.bbox,
            });
        }
        respond(&g.out, g.corr, &resp);
    }

    fn stat(&self) -> ServerStat {
        ServerStat {
            server_id: self.id,
            tier: self.tier.stats(),
            descriptor_count: self.dir.read().unwrap().len() as u64,
            pending_gets: self.pending.lock().unwrap().gets.len() as u64,
            notify_retries: self.counters.notify_retries.load(Ordering::Relaxed),
            notify_failures: self.counters.notify_failures.load(Ordering::Relaxed),
            notify_sent: self.counters.notify_sent.load(Ordering::Relaxed),
        }
    }
}

fn descriptor_tag(var: &str, version: u32, b: &NDBox) -> [u8; 15] {
    let mut h = crate::directory::block_hash(var, b.lower()) ^ mix64(version as u64 + 1);
    let mut tag = [0u8; 15];
    for (i, &u) in b.upper().iter().enumerate() {
        h = mix64(h ^ u.wrapping_add(i as u64));
    }
    tag[..8].copy_from_slice(&h.to_le_bytes());
    tag[8..].copy_from_slice(&mix64(h).to_le_bytes()[..7]);
    tag
}

fn chunk_key(kind: u8, tag: [u8; 15]) -> ChunkKey {
    let mut k = [0u8; 16];
    k[0] = kind;
    k[1..].copy_from_slice(&tag);
    ChunkKey(k)
}

/// Meta chunk body: a NOTIFY payload for the data chunk.
fn encode_meta(desc: &ObjectDescriptor) -> Vec<u8> {
    let frame = wire::encode_frame(0, &Message::Notify(desc.clone()));
    frame[wire::HEADER_LEN..].to_vec()
}

fn decode_meta(bytes: &[u8]) -> Option<ObjectDescriptor> {
    match Message::decode(wire::msg_type::NOTIFY, bytes) {
        Ok(Message::Notify(d)) => Some(d),
        _ => None,
    }
}

/// A running staging server.
pub struct Server {
    shared: Arc<Shared>,
    addr: SocketAddr,
    acceptor: Option<JoinHandle<()>>,
    reaper: Option<JoinHandle<()>>,
    notifiers: Vec<JoinHandle<()>>,
    readers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl Server {
    /// Opens the configured tier and binds the configured address.
    pub fn start(config: ServerConfig) -> Result<Server, ServerError> {
        let tier = open_tier(&config.tier)?;
        Self::start_with_tier(config, tier)
    }

    /// Like [`Server::start`] with a caller-supplied tier.
    pub fn start_with_tier(config: ServerConfig, tier: Arc<dyn Tier>) -> Result<Server, ServerError> {
        let addr = config.listen_addr().to_string();
        let listener = TcpListener::bind(&addr).map_err(|source| ServerError::Bind { addr, source })?;
        Self::start_on(listener, config, tier)
    }

    /// Serves on an already-bound listener.
    pub fn start_on(
        listener: TcpListener,
        config: ServerConfig,
        tier: Arc<dyn Tier>,
    ) -> Result<Server, ServerError> {
        if config.grid.server_count() as usize != config.servers.len() {
            return Err(ServerError::Config(format!(
                "grid is sharded over {} servers but {} addresses are listed",
                config.grid.server_count(),
                config.servers.len()
            )));
        }
        if config.server_id as usize >= config.servers.len() {
            return Err(ServerError::Config(format!("server_id {} out of range", config.server_id)));
        }
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            id: config.server_id,
            grid: config.grid.clone(),
            tier,
            dir: RwLock::new(Directory::new(config.max_versions)),
            meta: Mutex::new(HashMap::new()),
            pending: Mutex::new(Pending::default()),
            pending_cv: Condvar::new(),
            workers: Semaphore::new(config.workers.max(1)),
            peers: Mutex::new(Vec::new()),
            counters: Counters::default(),
            shutting_down: AtomicBool::new(false),
            owned_registrations: AtomicU64::new(0),
            conns: Mutex::new(HashMap::new()),
            events: config.events.clone(),
        });

        let mut notifiers = Vec::new();
        {
            let mut peers = shared.peers.lock().unwrap();
            for (i, peer) in config.servers.iter().enumerate() {
                if i as u32 == config.server_id {
                    continue;
                }
                let (tx, rx) = mpsc::channel();
                peers.push(tx);
                let sh = shared.clone();
                let peer = peer.clone();
                notifiers.push(
                    thread::Builder::new()
                        .name(format!("notify-{i}"))
                        .spawn(move || notify_loop(sh, peer, rx))?,
                );
            }
        }

        let recovered = recover(&shared)?;
        if recovered > 0 {
            info!("server {}: recovered {recovered} stored regions", shared.id);
        }
        shared.emit(|| ServerEvent::Recovered { descriptors: recovered });

        let readers = Arc::new(Mutex::new(Vec::new()));
        let sh = shared.clone();
        let rd = readers.clone();
        let acceptor = thread::Builder::new()
            .name("accept".into())
            .spawn(move || accept_loop(sh, listener, rd))?;
        let sh = shared.clone();
        let reaper = thread::Builder::new()
            .name("reaper".into())
            .spawn(move || reap_loop(sh))?;
        info!("server {} listening on {addr}", shared.id);
        Ok(Server {
            shared,
            addr,
            acceptor: Some(acceptor),
            reaper: Some(reaper),
            notifiers,
            readers,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn id(&self) -> u32 {
        self.shared.id
    }

    pub fn stat(&self) -> ServerStat {
        self.shared.stat()
    }

    pub fn tier(&self) -> &Arc<dyn Tier> {
        &self.shared.tier
    }

    /// Canonically ordered copy of the local directory.
    pub fn directory_snapshot(&self) -> Vec<ObjectDescriptor> {
        self.shared.dir.read().unwrap().snapshot()
    }

    /// Stops accepting, lets in-flight requests finish, fails parked gets
    /// with SHUTDOWN and joins every server thread.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.shutting_down.swap(true, Ordering::SeqCst) {
            return;
        }
        // Unblock accept().
        let _ = TcpStream::connect_timeout(&wake_addr(self.addr), Duration::from_secs(1));
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for s in self.shared.conns.lock().unwrap().values() {
            let _ = s.shutdown(Shutdown::Read);
        }
        let readers: Vec<_> = std::mem::take(&mut *self.readers.lock().unwrap());
        for h in readers {
            let _ = h.join();
        }
        let parked = {
            let mut p = self.shared.pending.lock().unwrap();
            p.closed = true;
            self.shared.pending_cv.notify_all();
            std::mem::take(&mut p.gets)
        };
        for g in parked {
            respond(&g.out, g.corr, &Message::err(ErrorCode::Shutdown, "server shutting down"));
        }
        for s in self.shared.conns.lock().unwrap().drain() {
            let _ = s.1.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.reaper.take() {
            let _ = h.join();
        }
        self.shared.peers.lock().unwrap().clear();
        for h in self.notifiers.drain(..) {
            let _ = h.join();
        }
        info!("server {} stopped", self.shared.id);
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop();
    }
}

fn wake_addr(addr: SocketAddr) -> SocketAddr {
    let mut a = addr;
    if a.ip().is_unspecified() {
        a.set_ip(match a {
            SocketAddr::V4(_) => [127, 0, 0, 1].into(),
            SocketAddr::V6(_) => std::net::Ipv6Addr::LOCALHOST.into(),
        });
    }
    a
}

/// Re-registers every chunk whose meta record survived, frees orphans and
/// re-announces the recovered descriptors to peers.
fn recover(shared: &Shared) -> Result<usize, ServerError> {
    if !shared.tier.is_persistent() {
        return Ok(0);
    }
    let entries = shared.tier.entries();
    let mut data: HashMap<u64, ChunkHandle> = HashMap::new();
    let mut metas = Vec::new();
    for (h, key) in &entries {
        match key.0[0] {
            KEY_DATA => {
                data.insert(h.generation, *h);
            }
            KEY_META => metas.push(*h),
            _ => warn!("ignoring chunk with unknown key kind {:#x}", key.0[0]),
        }
    }
    let mut recovered = Vec::new();
    for mh in metas {
        let desc = shared.tier.read_chunk(&mh).ok().and_then(|b| decode_meta(&b));
        let valid = desc.filter(|d| {
            d.owner == shared.id
                && data.get(&d.handle.generation) == Some(&d.handle)
                && d.payload_len() == d.handle.length
        });
        match valid {
            Some(d) => {
                data.remove(&d.handle.generation);
                shared.meta.lock().unwrap().insert(d.handle.generation, mh);
                recovered.push(d);
            }
            None => {
                warn!("dropping unreadable meta chunk at offset {}", mh.offset);
                shared.tier.free_chunk(&mh)?;
            }
        }
    }
    for (_, h) in data {
        debug!("dropping unacknowledged chunk at offset {}", h.offset);
        shared.tier.free_chunk(&h)?;
    }
    for d in recovered {
        let outcome = shared.dir.write().unwrap().register(d.clone());
        for old in outcome.replaced.iter().chain(&outcome.evicted) {
            shared.free_owned(old);
        }
        shared.fan_out(&d);
    }
    Ok(shared.dir.read().unwrap().len())
}

fn accept_loop(shared: Arc<Shared>, listener: TcpListener, readers: Arc<Mutex<Vec<JoinHandle<()>>>>) {
    let mut next_conn = 0u64;
    for stream in listener.incoming() {
        if shared.shutting_down.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let id = next_conn;
        next_conn += 1;
        let Ok(registered) = stream.try_clone() else { continue };
        shared.conns.lock().unwrap().insert(id, registered);
        let sh = shared.clone();
        let spawned = thread::Builder::new()
            .name(format!("conn-{id}"))
            .spawn(move || {
                if let Err(e) = serve_connection(&sh, stream) {
                    debug!("connection {id} closed: {e}");
                }
                sh.conns.lock().unwrap().remove(&id);
            });
        match spawned {
            Ok(h) => {
                let mut r = readers.lock().unwrap();
                r.retain(|h| !h.is_finished());
                r.push(h);
            }
            Err(e) => warn!("cannot spawn connection thread: {e}"),
        }
    }
}

fn serve_connection(shared: &Arc<Shared>, stream: TcpStream) -> Result<(), FrameError> {
    let out: Responder = Arc::new(Mutex::new(BufWriter::with_capacity(64 * 1024, stream.try_clone()?)));
    let mut reader = BufReader::with_capacity(256 * 1024, stream);
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(e) => {
                if let FrameError::BadMagic(_) = e {
                    warn!("closing connection after bad frame magic");
                }
                return Err(e);
            }
        };
        let _permit = shared.workers.acquire();
        let corr = frame.corr;
        let msg = match frame.into_message() {
            Ok(m) => m,
            Err(PayloadError::UnknownType(t)) => {
                respond(&out, corr, &Message::err(ErrorCode::UnknownType, format!("unknown message type {t}")));
                continue;
            }
            Err(e) => {
                respond(&out, corr, &Message::err(ErrorCode::BadRequest, e.to_string()));
                continue;
            }
        };
        match msg {
            Message::Put(req) => {
                let (var, version, bbox) = (req.var.clone(), req.version, req.bbox);
                match shared.handle_put(req) {
                    Ok(()) => {
                        respond(&out, corr, &Message::PutAck);
                        shared.emit(|| ServerEvent::PutAcked {
                            var: var.clone(),
                            version,
                            bbox,
                        });
                        for g in shared.take_ready(&var, version) {
                            shared.answer_parked(g);
                        }
                    }
                    Err(Reject(code, m)) => respond(&out, corr, &Message::err(code, m)),
                }
            }
            Message::Get(req) => {
                if let Some(resp) = shared.handle_get(corr, req, &out) {
                    respond(&out, corr, &resp);
                }
            }
            Message::Notify(desc) => {
                shared.handle_notify(desc);
                respond(&out, corr, &Message::NotifyAck);
            }
            Message::Stat => respond(&out, corr, &Message::StatResp(shared.stat())),
            other => respond(
                &out,
                corr,
                &Message::err(
                    ErrorCode::BadRequest,
                    format!("message type {} is not a server request", other.msg_type()),
                ),
            ),
        }
    }
}

fn reap_loop(shared: Arc<Shared>) {
    let mut pending = shared.pending.lock().unwrap();
    loop {
        if pending.closed {
            return;
        }
        let now = Instant::now();
        let mut expired = Vec::new();
        let mut i = 0;
        while i < pending.gets.len() {
            if pending.gets[i].deadline <= now {
                expired.push(pending.gets.swap_remove(i));
            } else {
                i += 1;
            }
        }
        if !expired.is_empty() {
            drop(pending);
            for g in expired {
                shared.emit(|| ServerEvent::GetTimedOut {
                    var: g.req.var.clone(),
                    version: g.req.version,
                    bbox: g.req.bbox,
                });
                let msg = format!(
                    "{} v{} {} not available after {} ms",
                    g.req.var, g.req.version, g.req.bbox, g.req.timeout_ms
                );
                respond(&g.out, g.corr, &Message::err(ErrorCode::Timeout, msg));
            }
            pending = shared.pending.lock().unwrap();
            continue;
        }
        let next = pending.gets.iter().map(|g| g.deadline).min();
        pending = match next {
            Some(d) => shared.pending_cv.wait_timeout(pending, d - now).unwrap().0,
            None => shared.pending_cv.wait(pending).unwrap(),
        };
    }
}

struct PeerLink {
    addr: String,
    conn: Option<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
    next_corr: u64,
}

impl PeerLink {
    /// Sends every descriptor in `batch` back to back, then reads the acks.
    /// Returns how many leading descriptors were acknowledged, and the error
    /// that stopped delivery of the rest.
    fn send(&mut self, batch: &[ObjectDescriptor]) -> (usize, Option<String>) {
        if self.conn.is_none() {
            match self.connect() {
                Ok(c) => self.conn = Some(c),
                Err(e) => return (0, Some(e)),
            }
        }
        let (r, w) = self.conn.as_mut().expect("connected above");
        let first = self.next_corr + 1;
        let mut written = Ok(());
        for desc in batch {
            self.next_corr += 1;
            written = w.write_all(&wire::encode_frame(self.next_corr, &Message::Notify(desc.clone())));
            if written.is_err() {
                break;
            }
        }
        let mut acked = 0;
        let mut err = written.and_then(|_| w.flush()).err().map(|e| e.to_string());
        if err.is_none() {
            while acked < batch.len() {
                match wire::read_message(r) {
                    Ok(Some((c, Message::NotifyAck))) if c == first + acked as u64 => acked += 1,
                    Ok(Some((_, other))) => {
                        err = Some(format!("unexpected reply {other:?}"));
                        break;
                    }
                    Ok(None) => {
                        err = Some("peer closed the connection".into());
                        break;
                    }
                    Err(e) => {
                        err = Some(e.to_string());
                        break;
                    }
                }
            }
        }
        if err.is_some() {
            self.conn = None;
        }
        (acked, err)
    }

    fn connect(&self) -> Result<(BufReader<TcpStream>, BufWriter<TcpStream>), String> {
        let addr = self
            .addr
            .to_socket_addrs()
            .map_err(|e| e.to_string())?
            .next()
            .ok_or("peer address resolves to nothing")?;
        let s = TcpStream::connect_timeout(&addr, PEER_IO_TIMEOUT).map_err(|e| e.to_string())?;
        s.set_nodelay(true).ok();
        s.set_read_timeout(Some(PEER_IO_TIMEOUT)).ok();
        s.set_write_timeout(Some(PEER_IO_TIMEOUT)).ok();
        let w = s.try_clone().map_err(|e| e.to_string())?;
        Ok((BufReader::new(s), BufWriter::with_capacity(64 * 1024, w)))
    }
}

fn notify_loop(shared: Arc<Shared>, addr: String, rx: mpsc::Receiver<ObjectDescriptor>) {
    let mut link = PeerLink {
        addr,
        conn: None,
        next_corr: 0,
    };
    let counters = &shared.counters;
    while let Ok(desc) = rx.recv() {
        // Whatever queued up meanwhile goes out in the same round trip.
        let mut batch = vec![desc];
        batch.extend(rx.try_iter().take(NOTIFY_BATCH - 1));
        let mut delay = NOTIFY_BACKOFF;
        let attempts = if shared.shutting_down.load(Ordering::SeqCst) { 1 } else { NOTIFY_ATTEMPTS };
        for attempt in 1..=attempts {
            let (acked, err) = link.send(&batch);
            counters.notify_sent.fetch_add(acked as u64, Ordering::Relaxed);
            batch.drain(..acked);
            let Some(e) = err else { break };
            let left = batch.len() as u64;
            if attempt < attempts {
                debug!("NOTIFY to {} failed (attempt {attempt}): {e}", link.addr);
                counters.notify_retries.fetch_add(left, Ordering::Relaxed);
                if shared.shutting_down.load(Ordering::SeqCst) {
                    break;
                }
                thread::sleep(delay);
                delay *= 2;
            } else {
                for d in &batch {
                    warn!("giving up NOTIFY of {} v{} {} to {}: {e}", d.var, d.version, d.bbox, link.addr);
                }
                counters.notify_failures.fetch_add(left, Ordering::Relaxed);
            }
        }
    }
    if let Some((_, mut w)) = link.conn.take() {
        let _ = w.flush();
    }
}

/// Servers sharing one process on loopback ports, for tests and embedding.
pub struct LocalCluster {
    servers: Vec<Server>,
    addrs: Vec<String>,
    grid: DistGrid,
}

impl LocalCluster {
    /// Starts one server per `grid` shard on `127.0.0.1` with heap tiers of
    /// 1 GiB; `configure` may adjust each server's config before it starts.
    pub fn start(grid: DistGrid, mut configure: impl FnMut(&mut ServerConfig)) -> Result<Self, ServerError> {
        let n = grid.server_count() as usize;
        let listeners = (0..n)
            .map(|_| TcpListener::bind("127.0.0.1:0"))
            .collect::<io::Result<Vec<_>>>()?;
        let addrs = listeners
            .iter()
            .map(|l| l.local_addr().map(|a| a.to_string()))
            .collect::<io::Result<Vec<_>>>()?;
        let mut servers = Vec::with_capacity(n);
        for (i, listener) in listeners.into_iter().enumerate() {
            let mut cfg = ServerConfig::new(i as u32, addrs.clone(), grid.clone(), TierConfig::heap(1 << 30));
            configure(&mut cfg);
            let tier = open_tier(&cfg.tier)?;
            servers.push(Server::start_on(listener, cfg, tier)?);
        }
        Ok(Self { servers, addrs, grid })
    }

    pub fn addresses(&self) -> &[String] {
        &self.addrs
    }

    pub fn grid(&self) -> &DistGrid {
        &self.grid
    }

    pub fn servers(&self) -> &[Server] {
        &self.servers
    }

    pub fn session(&self) -> crate::client::StagingSession {
        crate::client::StagingSession::new(self.addrs.clone(), self.grid.clone())
            .expect("address count matches grid")
    }

    /// Waits until every peer notification queued so far has been delivered
    /// or given up on, or `timeout` passes. Returns true on quiescence.
    pub fn quiesce(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let peers = self.servers.len().saturating_sub(1) as u64;
        loop {
            let expected: u64 = self
                .servers
                .iter()
                .map(|s| s.shared.owned_registrations.load(Ordering::SeqCst) * peers)
                .sum();
            let done: u64 = self
                .servers
                .iter()
                .map(|s| {
                    let st = s.stat();
                    st.notify_sent + st.notify_failures
                })
                .sum();
            if done >= expected {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    pub fn shutdown(self) {
        for s in self.servers {
            s.shutdown();
        }
    }
}
