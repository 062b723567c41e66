//! Strong/weak scaling driver.
//!
//! The driver starts the servers, then `writers + readers` clients, and
//! steps them through each timestep over a rendezvous socket: all writers
//! put their partition of version `t`, then all readers get theirs and
//! check it against the reference pattern. A role's response time for a
//! timestep runs from the first client's start to the last client's finish.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::StagingSession;
use crate::directory::{default_block_extent, DistGrid, DEFAULT_MAX_VERSIONS};
use crate::geometry::{decompose_grid, NDBox, RegionBuffer};
use crate::protocol::server::{default_workers, LocalCluster, ServerConfig};
use crate::protocol::wire::{read_message, write_frame, BarrierMsg, Message};
use crate::tier::{TierConfig, TierSpec};

use super::pattern::{fill_pattern, verify_pattern};
use super::report::{Role, ScalingMode, ScalingRow, Status, Timestep};

/// Strong-scaling total at desk scale.
pub const DESK_STRONG_BYTES: u64 = 64 << 20;
/// Weak-scaling bytes per client at desk scale.
pub const DESK_WEAK_BYTES: u64 = 512 << 10;
pub const FULL_STRONG_BYTES: u64 = 4 << 30;
pub const FULL_WEAK_BYTES: u64 = 8 << 20;

const PHASE_HELLO: u8 = 1;
const PHASE_WRITE: u8 = 2;
const PHASE_WROTE: u8 = 3;
const PHASE_READ: u8 = 4;
const PHASE_READ_DONE: u8 = 5;
const PHASE_EXIT: u8 = 6;
/// Writers build the pattern of the coming timestep outside any timed phase.
const PHASE_STAGE: u8 = 7;
const PHASE_STAGED: u8 = 8;

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("scaling configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot start servers: {0}")]
    Servers(String),
    #[error("client failure: {0}")]
    Client(String),
}

pub type Result<T> = std::result::Result<T, ScalingError>;

/// How servers and clients are run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Launch {
    /// Servers and clients are child processes of this executable.
    Processes { exe: PathBuf },
    /// Everything runs in this process; for tests and embedding.
    Threads,
}

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    pub mode: ScalingMode,
    pub writers: u32,
    pub readers: u32,
    pub servers: u32,
    pub timesteps: u32,
    /// Total bytes per timestep (strong) or bytes per client (weak).
    pub bytes: u64,
    pub element_size: u32,
    pub tier: TierSpec,
    /// Per-server tier capacity; derived from the data volume when `None`.
    pub capacity: Option<u64>,
    pub workers: usize,
    pub max_versions: usize,
    pub timeout_ms: u32,
    pub var: String,
    pub launch: Launch,
    /// Directory for server configs and logs; a temporary one when `None`.
    pub work_dir: Option<PathBuf>,
}

impl ScalingConfig {
    pub fn new(mode: ScalingMode, writers: u32, readers: u32, servers: u32) -> Self {
        Self {
            mode,
            writers,
            readers,
            servers,
            timesteps: 10,
            bytes: match mode {
                ScalingMode::Strong => DESK_STRONG_BYTES,
                ScalingMode::Weak => DESK_WEAK_BYTES,
            },
            element_size: 8,
            tier: TierSpec::Heap,
            capacity: None,
            workers: default_workers(),
            max_versions: DEFAULT_MAX_VERSIONS,
            timeout_ms: 120_000,
            var: "field".into(),
            launch: Launch::Threads,
            work_dir: None,
        }
    }

    /// Bytes moved per timestep by all clients of `role`.
    pub fn role_bytes(&self, role: Role) -> u64 {
        match self.mode {
            ScalingMode::Strong => self.bytes,
            ScalingMode::Weak => {
                self.bytes
                    * match role {
                        Role::Writer => self.writers as u64,
                        Role::Reader => self.readers as u64,
                    }
            }
        }
    }
}

/// Global domain and per-client boxes of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub global: NDBox,
    pub block: Vec<u64>,
    pub writer_boxes: Vec<NDBox>,
    pub reader_boxes: Vec<NDBox>,
}

/// Divisor `n1` of `elements` with `n1 % col_div == 0` and
/// `(elements / n1) % row_div == 0`, closest to a square domain.
fn pick_columns(elements: u64, row_div: u64, col_div: u64) -> Option<u64> {
    let mut best: Option<(f64, u64)> = None;
    let mut n1 = col_div;
    while n1 <= elements {
        if elements % n1 == 0 && (elements / n1) % row_div == 0 {
            let skew = ((elements / n1) as f64 / n1 as f64).ln().abs();
            if best.is_none_or(|(s, _)| skew < s) {
                best = Some((skew, n1));
            }
        }
        n1 += col_div;
    }
    best.map(|(_, n1)| n1)
}

/// Strong mode: the `n0 x n1` domain is cut into `writers` row slabs for
/// writing and `readers` column slabs for reading. Weak mode: each writer
/// owns an `a x n1` slab; with `m = min(writers, readers)`, reader `r` reads
/// column part `r mod m` (of `m`) across the first `m` slabs.
pub fn plan_layout(cfg: &ScalingConfig) -> Result<Layout> {
    let bad = |m: String| Err(ScalingError::Config(m));
    if cfg.writers == 0 || cfg.readers == 0 || cfg.servers == 0 {
        return bad("writers, readers and servers must all be at least 1".into());
    }
    if cfg.element_size == 0 || cfg.bytes % cfg.element_size as u64 != 0 {
        return bad(format!("{} bytes is not a whole number of {}-byte elements", cfg.bytes, cfg.element_size));
    }
    let (w, r) = (cfg.writers as u64, cfg.readers as u64);
    let elements = cfg.bytes / cfg.element_size as u64;
    let (global, writer_boxes, reader_boxes) = match cfg.mode {
        ScalingMode::Strong => {
            if elements % w != 0 || elements % r != 0 {
                return bad(format!(
                    "total of {elements} elements is not divisible by {w} writers and {r} readers"
                ));
            }
            let n1 = pick_columns(elements, w, r).ok_or_else(|| {
                ScalingError::Config(format!("no {w}-row by {r}-column decomposition of {elements} elements"))
            })?;
            let global = NDBox::from_extents(&[elements / n1, n1]).expect("non-empty");
            let wb = decompose_grid(&global, &[w, 1]).expect("w divides n0");
            let rb = decompose_grid(&global, &[1, r]).expect("r divides n1");
            (global, wb, rb)
        }
        ScalingMode::Weak => {
            let m = w.min(r);
            let n1 = pick_columns(elements, 1, m).ok_or_else(|| {
                ScalingError::Config(format!("{elements} elements per client cannot be split into {m} column parts"))
            })?;
            let a = elements / n1;
            let global = NDBox::from_extents(&[w * a, n1]).expect("non-empty");
            let wb = decompose_grid(&global, &[w, 1]).expect("exact");
            let top = NDBox::new(&[0, 0], &[m * a, n1]).expect("non-empty");
            let parts = decompose_grid(&top, &[1, m]).expect("m divides n1");
            let rb = (0..r).map(|i| parts[(i % m) as usize]).collect();
            (global, wb, rb)
        }
    };
    let block = default_block_extent(&global, cfg.servers);
    Ok(Layout {
        global,
        block,
        writer_boxes,
        reader_boxes,
    })
}

/// Everything a client needs; passed to client processes as JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientJob {
    pub writer: bool,
    pub id: u32,
    pub barrier: String,
    pub servers: Vec<String>,
    pub global: Vec<u64>,
    pub block: Vec<u64>,
    pub lower: Vec<u64>,
    pub upper: Vec<u64>,
    pub var: String,
    pub element_size: u32,
    pub timeout_ms: u32,
}

fn now_ns() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

fn proto_err(e: impl std::fmt::Display) -> ScalingError {
    ScalingError::Client(e.to_string())
}

/// Client side of a run: obeys the driver until told to exit.
pub fn run_client(job: &ClientJob) -> Result<()> {
    let global = NDBox::from_extents(&job.global).map_err(proto_err)?;
    let region = NDBox::new(&job.lower, &job.upper).map_err(proto_err)?;
    let grid = DistGrid::new(global, job.block.clone(), job.servers.len() as u32).map_err(proto_err)?;
    let mut session = StagingSession::new(job.servers.clone(), grid)
        .map_err(proto_err)?
        .with_element_size(job.element_size)
        .with_timeout_ms(job.timeout_ms);
    session.connect_all().map_err(proto_err)?;
    let esize = job.element_size as usize;

    let stream = TcpStream::connect(&job.barrier)?;
    stream.set_nodelay(true)?;
    let mut rd = BufReader::new(stream.try_clone()?);
    let mut wr = BufWriter::new(stream);
    let role = if job.writer { 0 } else { 1 };
    let hello = BarrierMsg {
        phase: PHASE_HELLO,
        role,
        client_id: job.id,
        ok: true,
        ..Default::default()
    };
    write_frame(&mut wr, 0, &Message::Barrier(hello)).map_err(proto_err)?;

    let mut staged: Option<(u32, RegionBuffer)> = None;
    loop {
        let msg = match read_message(&mut rd).map_err(proto_err)? {
            Some((_, Message::Barrier(b))) => b,
            Some((_, other)) => return Err(proto_err(format!("unexpected driver message {other:?}"))),
            None => return Ok(()),
        };
        let t = msg.timestep;
        let mut reply = BarrierMsg {
            role,
            client_id: job.id,
            timestep: t,
            bytes: region.volume() * esize as u64,
            ..Default::default()
        };
        match msg.phase {
            PHASE_STAGE => {
                staged = Some((t, fill_pattern(&job.var, t, &global, &region, esize)));
                reply.phase = PHASE_STAGED;
                reply.ok = true;
                write_frame(&mut wr, 0, &Message::Barrier(reply)).map_err(proto_err)?;
            }
            PHASE_WRITE => {
                let buf = match staged.take() {
                    Some((v, b)) if v == t => b,
                    _ => fill_pattern(&job.var, t, &global, &region, esize),
                };
                reply.start_ns = now_ns();
                let r = session.put(&job.var, t, &buf);
                reply.end_ns = now_ns();
                reply.phase = PHASE_WROTE;
                match r {
                    Ok(_) => reply.ok = true,
                    Err(e) => reply.detail = format!("writer {} put v{t} {region}: {e}", job.id),
                }
                write_frame(&mut wr, 0, &Message::Barrier(reply)).map_err(proto_err)?;
            }
            PHASE_READ => {
                reply.start_ns = now_ns();
                let r = session.get(&job.var, t, &region, job.timeout_ms);
                reply.end_ns = now_ns();
                reply.phase = PHASE_READ_DONE;
                match r {
                    Ok(buf) => match verify_pattern(&job.var, t, &global, &buf) {
                        Ok(()) => reply.ok = true,
                        Err(m) => reply.detail = format!("reader {}: {m}", job.id),
                    },
                    Err(e) => reply.detail = format!("reader {} get v{t} {region}: {e}", job.id),
                }
                write_frame(&mut wr, 0, &Message::Barrier(reply)).map_err(proto_err)?;
            }
            PHASE_EXIT => return Ok(()),
            p => return Err(proto_err(format!("unknown barrier phase {p}"))),
        }
    }
}

/// Result of a scaling run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    /// Per-timestep rows (writer then reader for each timestep), followed
    /// by one `mean` row per role.
    pub rows: Vec<ScalingRow>,
    /// Client-reported failures, first per timestep and role.
    pub failures: Vec<String>,
}

impl ScalingReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.status == Status::Passed)
    }

    pub fn mean(&self, role: Role) -> Option<&ScalingRow> {
        self.rows.iter().find(|r| r.role == role && r.timestep == Timestep::Mean)
    }
}

struct BarrierConn {
    rd: BufReader<TcpStream>,
    wr: BufWriter<TcpStream>,
}

impl BarrierConn {
    fn send(&mut self, phase: u8, timestep: u32) -> Result<()> {
        let m = BarrierMsg {
            phase,
            timestep,
            ok: true,
            ..Default::default()
        };
        write_frame(&mut self.wr, 0, &Message::Barrier(m)).map_err(ScalingError::Io)
    }

    fn recv(&mut self) -> Result<BarrierMsg> {
        match read_message(&mut self.rd).map_err(proto_err)? {
            Some((_, Message::Barrier(b))) => Ok(b),
            Some((_, other)) => Err(proto_err(format!("unexpected client message {other:?}"))),
            None => Err(proto_err("client disconnected")),
        }
    }
}

/// Servers and clients of one run, torn down on drop.
enum Fleet {
    Processes {
        servers: Vec<Child>,
        clients: Vec<Child>,
    },
    Threads {
        cluster: Option<LocalCluster>,
        clients: Vec<thread::JoinHandle<Result<()>>>,
    },
}

impl Fleet {
    /// Fails if any client has already exited unsuccessfully.
    fn check_clients(&mut self) -> Result<()> {
        match self {
            Fleet::Processes { clients, .. } => {
                for c in clients.iter_mut() {
                    if let Some(st) = c.try_wait()? {
                        if !st.success() {
                            return Err(ScalingError::Client(format!("client process exited with {st}")));
                        }
                    }
                }
            }
            Fleet::Threads { clients, .. } => {
                if clients.iter().any(|h| h.is_finished()) {
                    for h in std::mem::take(clients) {
                        if h.is_finished() {
                            h.join().map_err(|_| proto_err("client thread panicked"))??;
                        }
                    }
                    return Err(proto_err("client exited before the run finished"));
                }
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        match self {
            Fleet::Processes { servers, clients } => {
                for mut c in clients.drain(..) {
                    let st = wait_timeout(&mut c, Duration::from_secs(30))?;
                    if !st.is_some_and(|s| s.success()) {
                        warn!("client process ended with {st:?}");
                    }
                }
                for mut s in servers.drain(..) {
                    terminate(&mut s)?;
                }
            }
            Fleet::Threads { cluster, clients } => {
                for h in clients.drain(..) {
                    h.join().map_err(|_| proto_err("client thread panicked"))??;
                }
                if let Some(c) = cluster.take() {
                    c.shutdown();
                }
            }
        }
        Ok(())
    }
}

impl Drop for Fleet {
    fn drop(&mut self) {
        if let Fleet::Processes { servers, clients } = self {
            for c in clients.iter_mut().chain(servers.iter_mut()) {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

fn wait_timeout(c: &mut Child, limit: Duration) -> Result<Option<std::process::ExitStatus>> {
    let deadline = Instant::now() + limit;
    loop {
        if let Some(st) = c.try_wait()? {
            return Ok(Some(st));
        }
        if Instant::now() >= deadline {
            let _ = c.kill();
            c.wait()?;
            return Ok(None);
        }
        thread::sleep(Duration::from_millis(10));
    }
}

/// SIGTERM, then SIGKILL if the server has not drained within 10 s.
fn terminate(c: &mut Child) -> Result<()> {
    // SAFETY: plain kill(2) on a child we spawned and have not yet reaped.
    unsafe {
        libc::kill(c.id() as libc::pid_t, libc::SIGTERM);
    }
    if wait_timeout(c, Duration::from_secs(10))?.is_none() {
        warn!("server {} ignored SIGTERM; killed", c.id());
    }
    Ok(())
}

/// Reserves `n` loopback ports by binding and releasing them.
pub fn pick_ports(n: usize) -> std::io::Result<Vec<SocketAddr>> {
    let ls = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<std::io::Result<Vec<_>>>()?;
    ls.iter().map(|l| l.local_addr()).collect()
}

/// Blocks until every address accepts connections.
pub fn wait_for_listeners(addrs: &[String], limit: Duration) -> bool {
    let deadline = Instant::now() + limit;
    addrs.iter().all(|a| loop {
        if TcpStream::connect(a).is_ok() {
            break true;
        }
        if Instant::now() >= deadline {
            break false;
        }
        thread::sleep(Duration::from_millis(20));
    })
}

/// Per-server tier spec: mmap paths get a `.<server id>` suffix.
pub fn server_tier(spec: &TierSpec, id: u32) -> TierSpec {
    spec.map_path(|p| {
        let mut s = p.clone().into_os_string();
        s.push(format!(".{id}"));
        PathBuf::from(s)
    })
}

fn server_capacity(cfg: &ScalingConfig) -> u64 {
    let per_version = cfg.role_bytes(Role::Writer);
    let versions = cfg.timesteps.min(cfg.max_versions as u32).max(1) as u64;
    // Meta chunks and allocator slack on top of the payload.
    per_version * versions + per_version / 8 + (16 << 20)
}

fn server_configs(cfg: &ScalingConfig, layout: &Layout, addrs: &[String]) -> Result<Vec<(ServerConfig, TierSpec)>> {
    let grid = DistGrid::new(layout.global, layout.block.clone(), cfg.servers).map_err(proto_err)?;
    let capacity = cfg.capacity.unwrap_or_else(|| server_capacity(cfg));
    (0..cfg.servers)
        .map(|i| {
            let spec = server_tier(&cfg.tier, i);
            let tier: TierConfig = spec
                .clone()
                .into_config(capacity)
                .map_err(|e| ScalingError::Config(e.to_string()))?;
            if let Some(p) = &tier.backing_path {
                // A scaling run starts from empty staging.
                if p.exists() {
                    info!("removing stale tier file {}", p.display());
                    std::fs::remove_file(p)?;
                }
            }
            let mut sc = ServerConfig::new(i, addrs.to_vec(), grid.clone(), tier);
            sc.workers = cfg.workers;
            sc.max_versions = cfg.max_versions;
            Ok((sc, spec))
        })
        .collect()
}

fn client_jobs(cfg: &ScalingConfig, layout: &Layout, servers: &[String], barrier: &str) -> Vec<ClientJob> {
    let job = |writer: bool, id: usize, b: &NDBox| ClientJob {
        writer,
        id: id as u32,
        barrier: barrier.to_string(),
        servers: servers.to_vec(),
        global: layout.global.extents(),
        block: layout.block.clone(),
        lower: b.lower().to_vec(),
        upper: b.upper().to_vec(),
        var: cfg.var.clone(),
        element_size: cfg.element_size,
        timeout_ms: cfg.timeout_ms,
    };
    let w = layout.writer_boxes.iter().enumerate().map(|(i, b)| job(true, i, b));
    let r = layout.reader_boxes.iter().enumerate().map(|(i, b)| job(false, i, b));
    w.chain(r).collect()
}

fn launch(cfg: &ScalingConfig, layout: &Layout, barrier: &str) -> Result<Fleet> {
    match &cfg.launch {
        Launch::Threads => {
            let mut i = 0;
            let placeholder: Vec<String> = (0..cfg.servers).map(|_| String::new()).collect();
            let configs = server_configs(cfg, layout, &placeholder)?;
            let grid = configs[0].0.grid.clone();
            let cluster = LocalCluster::start(grid, |sc| {
                sc.tier = configs[i].0.tier.clone();
                sc.workers = cfg.workers;
                sc.max_versions = cfg.max_versions;
                i += 1;
            })
            .map_err(|e| ScalingError::Servers(e.to_string()))?;
            let jobs = client_jobs(cfg, layout, cluster.addresses(), barrier);
            let clients = jobs
                .into_iter()
                .map(|job| {
                    thread::Builder::new()
                        .name(format!("{}-{}", if job.writer { "writer" } else { "reader" }, job.id))
                        .spawn(move || run_client(&job))
                        .map_err(ScalingError::Io)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Fleet::Threads {
                cluster: Some(cluster),
                clients,
            })
        }
        Launch::Processes { exe } => {
            let work = work_dir(cfg)?;
            let addrs: Vec<String> = pick_ports(cfg.servers as usize)?.iter().map(|a| a.to_string()).collect();
            let mut fleet = Fleet::Processes {
                servers: Vec::new(),
                clients: Vec::new(),
            };
            for (sc, spec) in server_configs(cfg, layout, &addrs)? {
                let path = work.join(format!("server-{}.conf", sc.server_id));
                std::fs::write(&path, sc.to_config_string(&spec))?;
                let log = std::fs::File::create(work.join(format!("server-{}.log", sc.server_id)))?;
                let child = Command::new(exe)
                    .arg("server")
                    .arg("--config")
                    .arg(&path)
                    .stdin(Stdio::null())
                    .stdout(Stdio::null())
                    .stderr(log)
                    .spawn()?;
                if let Fleet::Processes { servers, .. } = &mut fleet {
                    servers.push(child);
                }
            }
            if !wait_for_listeners(&addrs, Duration::from_secs(30)) {
                return Err(ScalingError::Servers(format!(
                    "servers did not come up; see logs in {}",
                    work.display()
                )));
            }
            for job in client_jobs(cfg, layout, &addrs, barrier) {
                let json = serde_json::to_string(&job).expect("job serialises");
                let child = Command::new(exe)
                    .arg("scaling-client")
                    .arg("--job")
                    .arg(json)
                    .stdin(Stdio::null())
                    .stdout(Stdio::null())
                    .spawn()?;
                if let Fleet::Processes { clients, .. } = &mut fleet {
                    clients.push(child);
                }
            }
            Ok(fleet)
        }
    }
}

fn work_dir(cfg: &ScalingConfig) -> Result<PathBuf> {
    let dir = match &cfg.work_dir {
        Some(d) => d.clone(),
        None => std::env::temp_dir().join(format!("stagespace-scaling-{}", std::process::id())),
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Accepts one rendezvous connection per client, indexed by role and id.
fn gather(
    listener: &TcpListener,
    cfg: &ScalingConfig,
    fleet: &mut Fleet,
) -> Result<(Vec<BarrierConn>, Vec<BarrierConn>)> {
    let (nw, nr) = (cfg.writers as usize, cfg.readers as usize);
    let mut writers: Vec<Option<BarrierConn>> = (0..nw).map(|_| None).collect();
    let mut readers: Vec<Option<BarrierConn>> = (0..nr).map(|_| None).collect();
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + Duration::from_secs(60 + (nw + nr) as u64);
    let mut joined = 0;
    while joined < nw + nr {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                s.set_nodelay(true)?;
                s.set_read_timeout(Some(Duration::from_millis(cfg.timeout_ms as u64) + Duration::from_secs(120)))?;
                let mut c = BarrierConn {
                    rd: BufReader::new(s.try_clone()?),
                    wr: BufWriter::new(s),
                };
                let hello = c.recv()?;
                let slot = match (hello.phase, hello.role) {
                    (PHASE_HELLO, 0) => writers.get_mut(hello.client_id as usize),
                    (PHASE_HELLO, 1) => readers.get_mut(hello.client_id as usize),
                    _ => None,
                };
                match slot {
                    Some(s @ None) => *s = Some(c),
                    _ => return Err(proto_err(format!("unexpected hello {hello:?}"))),
                }
                joined += 1;
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                fleet.check_clients()?;
                if Instant::now() >= deadline {
                    return Err(proto_err(format!("only {joined} of {} clients checked in", nw + nr)));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let unwrap = |v: Vec<Option<BarrierConn>>| v.into_iter().map(|c| c.expect("all joined")).collect();
    Ok((unwrap(writers), unwrap(readers)))
}

/// Runs one phase on every client of a role; returns (response time, ok, first failure).
fn phase(conns: &mut [BarrierConn], go: u8, done: u8, t: u32) -> Result<(f64, bool, Option<String>)> {
    for c in conns.iter_mut() {
        c.send(go, t)?;
    }
    let mut first = u64::MAX;
    let mut last = 0u64;
    let mut ok = true;
    let mut failure = None;
    for c in conns.iter_mut() {
        let m = c.recv()?;
        if m.phase != done || m.timestep != t {
            return Err(proto_err(format!("out-of-step reply {m:?}")));
        }
        first = first.min(m.start_ns);
        last = last.max(m.end_ns);
        if !m.ok {
            ok = false;
            failure.get_or_insert(m.detail);
        }
    }
    Ok((last.saturating_sub(first) as f64 / 1e9, ok, failure))
}

/// Runs a full scaling experiment.
pub fn run_scaling(cfg: &ScalingConfig) -> Result<ScalingReport> {
    if cfg.timesteps == 0 {
        return Err(ScalingError::Config("timesteps must be at least 1".into()));
    }
    let layout = plan_layout(cfg)?;
    info!(
        "{:?} scaling: domain {}, {} writers, {} readers, {} servers",
        cfg.mode, layout.global, cfg.writers, cfg.readers, cfg.servers
    );
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let barrier = listener.local_addr()?.to_string();
    let mut fleet = launch(cfg, &layout, &barrier)?;
    let (mut writers, mut readers) = gather(&listener, cfg, &mut fleet)?;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut times = [Vec::new(), Vec::new()];
    let mut all_ok = [true, true];
    for t in 0..cfg.timesteps {
        phase(&mut writers, PHASE_STAGE, PHASE_STAGED, t)?;
        for (k, role) in [Role::Writer, Role::Reader].into_iter().enumerate() {
            let (conns, go, done) = match role {
                Role::Writer => (&mut writers, PHASE_WRITE, PHASE_WROTE),
                Role::Reader => (&mut readers, PHASE_READ, PHASE_READ_DONE),
            };
            let (secs, ok, failure) = phase(conns, go, done, t)?;
            debug!("t={t} {role:?}: {secs:.4}s ok={ok}");
            failures.extend(failure);
            times[k].push(secs);
            all_ok[k] &= ok;
            rows.push(row(cfg, role, Timestep::Step(t), secs, ok));
        }
    }
    for c in writers.iter_mut().chain(readers.iter_mut()) {
        c.send(PHASE_EXIT, 0)?;
    }
    drop((writers, readers));
    fleet.finish()?;
    for (k, role) in [Role::Writer, Role::Reader].into_iter().enumerate() {
        let mean = times[k].iter().sum::<f64>() / times[k].len() as f64;
        rows.push(row(cfg, role, Timestep::Mean, mean, all_ok[k]));
    }
    Ok(ScalingReport { rows, failures })
}

fn row(cfg: &ScalingConfig, role: Role, timestep: Timestep, secs: f64, ok: bool) -> ScalingRow {
    ScalingRow {
        mode: cfg.mode,
        role,
        clients: match role {
            Role::Writer => cfg.writers,
            Role::Reader => cfg.readers,
        },
        servers: cfg.servers,
        timestep,
        bytes: cfg.role_bytes(role),
        response_time_s: secs,
        status: if ok { Status::Passed } else { Status::Failed },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strong_layout_partitions_domain_both_ways() {
        let cfg = ScalingConfig::new(ScalingMode::Strong, 64, 64, 4);
        let l = plan_layout(&cfg).unwrap();
        assert_eq!(l.global.volume() * 8, 64 << 20);
        let (n0, n1) = (l.global.extent(0), l.global.extent(1));
        // Both 2048x4096 and 4096x2048 are equally square; either is fine.
        assert_eq!(n0.max(n1), 2 * n0.min(n1));
        assert_eq!(l.writer_boxes.len(), 64);
        assert_eq!(l.reader_boxes.len(), 64);
        assert!(l.writer_boxes.iter().all(|b| b.extent(1) == n1 && b.extent(0) == n0 / 64));
        assert!(l.reader_boxes.iter().all(|b| b.extent(0) == n0 && b.extent(1) == n1 / 64));
        for boxes in [&l.writer_boxes, &l.reader_boxes] {
            assert!(crate::geometry::covers(&l.global, boxes).unwrap());
        }
    }

    #[test]
    fn weak_layout_keeps_bytes_per_client() {
        for (w, r) in [(1, 1), (4, 16), (16, 4), (64, 64)] {
            let cfg = ScalingConfig::new(ScalingMode::Weak, w, r, 2);
            let l = plan_layout(&cfg).unwrap();
            for b in l.writer_boxes.iter().chain(&l.reader_boxes) {
                assert_eq!(b.volume() * 8, 512 << 10, "w={w} r={r} box {b}");
                assert!(l.global.contains_box(b));
            }
            assert_eq!(l.global.volume() * 8, w as u64 * (512 << 10));
        }
    }

    #[test]
    fn rejects_indivisible_strong_totals() {
        let mut cfg = ScalingConfig::new(ScalingMode::Strong, 3, 4, 1);
        cfg.bytes = 8 * 100;
        assert!(plan_layout(&cfg).is_err());
        cfg.writers = 0;
        assert!(plan_layout(&cfg).is_err());
    }

    #[test]
    fn mmap_paths_are_per_server() {
        let spec: TierSpec = "delayed:slow:mmap:/tmp/t.bin".parse().unwrap();
        assert_eq!(server_tier(&spec, 3).to_string(), "delayed:400:4000:mmap:/tmp/t.bin.3");
        assert_eq!(server_tier(&TierSpec::Heap, 1), TierSpec::Heap);
    }
}
