//! Writer/reader library.
//!
//! A [`StagingSession`] splits each put or get along distribution-block
//! boundaries, sends every piece straight to the server owning it, and keeps
//! all pieces in flight at once: one connection per server, requests
//! pipelined and matched to replies by correlation id.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::directory::{DirectoryError, DistGrid};
use crate::geometry::{copy_region_raw, GeometryError, NDBox, RegionBuffer};
use crate::protocol::wire::{self, ErrorCode, GetRequest, Message, ServerStat};
use crate::protocol::ProtocolError;

pub const DEFAULT_TIMEOUT_MS: u32 = 60_000;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("session needs {grid} server addresses, got {given}")]
    ServerCount { grid: u32, given: usize },
    #[error(transparent)]
    Directory(#[from] DirectoryError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("cannot reach server {server} at {addr}: {source}")]
    Connect {
        server: u32,
        addr: String,
        source: io::Error,
    },
    #[error("connection to server {server} failed: {source}")]
    Transport { server: u32, source: ProtocolError },
    #[error("server {server} sent an unexpected reply: {detail}")]
    UnexpectedReply { server: u32, detail: String },
    #[error("server {server} rejected {}: {code:?}: {message}", describe(.bbox))]
    Remote {
        server: u32,
        bbox: Option<NDBox>,
        code: ErrorCode,
        message: String,
    },
    #[error("put completed on {} of {} pieces; first failure: {}", .completed.len(), .completed.len() + .failures.len(), .failures[0])]
    PartialPut {
        completed: Vec<(u32, NDBox)>,
        failures: Vec<ClientError>,
    },
}

impl ClientError {
    /// Error code of the remote rejection behind this error, if any.
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Remote { code, .. } => Some(*code),
            ClientError::PartialPut { failures, .. } => failures.iter().find_map(|f| f.code()),
            _ => None,
        }
    }

    pub fn is_timeout(&self) -> bool {
        self.code() == Some(ErrorCode::Timeout)
    }
}

fn describe(b: &Option<NDBox>) -> String {
    b.map_or_else(|| "request".into(), |b| b.to_string())
}

pub type Result<T> = std::result::Result<T, ClientError>;

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

enum Request<'a> {
    Put {
        var: &'a str,
        version: u32,
        element_size: u32,
        bbox: NDBox,
        data: Cow<'a, [u8]>,
    },
    Get(GetRequest),
    Stat,
}

impl Request<'_> {
    fn bbox(&self) -> Option<NDBox> {
        match self {
            Request::Put { bbox, .. } => Some(*bbox),
            Request::Get(g) => Some(g.bbox),
            Request::Stat => None,
        }
    }
}

/// Client handle onto a set of staging servers. Not shared between threads.
pub struct StagingSession {
    servers: Vec<String>,
    grid: DistGrid,
    element_size: u32,
    timeout_ms: u32,
    conns: Vec<Option<Conn>>,
    next_corr: u64,
}

impl StagingSession {
    /// `servers[i]` is the address of server `i`. Connections open lazily.
    pub fn new(servers: Vec<String>, grid: DistGrid) -> Result<Self> {
        if servers.len() != grid.server_count() as usize {
            return Err(ClientError::ServerCount {
                grid: grid.server_count(),
                given: servers.len(),
            });
        }
        let conns = servers.iter().map(|_| None).collect();
        Ok(Self {
            servers,
            grid,
            element_size: 8,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            conns,
            next_corr: 0,
        })
    }

    pub fn with_element_size(mut self, element_size: u32) -> Self {
        self.element_size = element_size;
        self
    }

    /// Default timeout used by [`get_default`](Self::get_default).
    pub fn with_timeout_ms(mut self, timeout_ms: u32) -> Self {
        self.timeout_ms = timeout_ms;
        self
    }

    pub fn grid(&self) -> &DistGrid {
        &self.grid
    }

    pub fn servers(&self) -> &[String] {
        &self.servers
    }

    pub fn element_size(&self) -> u32 {
        self.element_size
    }

    pub fn timeout_ms(&self) -> u32 {
        self.timeout_ms
    }

    /// Opens any connection not yet open.
    pub fn connect_all(&mut self) -> Result<()> {
        for s in 0..self.servers.len() {
            if self.conns[s].is_none() {
                self.conns[s] = Some(self.connect(s as u32)?);
            }
        }
        Ok(())
    }

    fn connect(&self, server: u32) -> Result<Conn> {
        let addr = &self.servers[server as usize];
        let err = |source| ClientError::Connect {
            server,
            addr: addr.clone(),
            source,
        };
        let sa = addr
            .to_socket_addrs()
            .map_err(err)?
            .next()
            .ok_or_else(|| err(io::Error::new(io::ErrorKind::NotFound, "address resolves to nothing")))?;
        let s = TcpStream::connect_timeout(&sa, CONNECT_TIMEOUT).map_err(err)?;
        s.set_nodelay(true).map_err(err)?;
        let w = s.try_clone().map_err(err)?;
        Ok(Conn {
            reader: BufReader::with_capacity(256 * 1024, s),
            writer: BufWriter::with_capacity(256 * 1024, w),
        })
    }

    /// Stores `buf` as `(var, version)`. Returns the `(server, box)` pieces
    /// sent, one PUT each. Pieces that succeeded stay stored when others fail.
    pub fn put(&mut self, var: &str, version: u32, buf: &RegionBuffer) -> Result<Vec<(u32, NDBox)>> {
        if buf.element_size() as u32 != self.element_size {
            return Err(GeometryError::ElementSize(buf.element_size(), self.element_size as usize).into());
        }
        let pieces = self.grid.split_by_owner(var, buf.bbox())?;
        let esize = buf.element_size();
        let mut batches: BTreeMap<u32, Vec<Request>> = BTreeMap::new();
        for (owner, sub) in &pieces {
            let data = if sub == buf.bbox() {
                Cow::Borrowed(buf.bytes())
            } else {
                let mut d = vec![0u8; sub.volume() as usize * esize];
                copy_region_raw(buf.bbox(), buf.bytes(), sub, &mut d, esize, sub)?;
                Cow::Owned(d)
            };
            batches.entry(*owner).or_default().push(Request::Put {
                var,
                version,
                element_size: self.element_size,
                bbox: *sub,
                data,
            });
        }
        let mut completed = Vec::new();
        let mut failures = Vec::new();
        for (server, replies) in self.exchange(batches) {
            for (bbox, reply) in replies {
                let bbox = bbox.expect("puts carry a box");
                match reply.and_then(|m| expect_ack(server, bbox, m)) {
                    Ok(()) => completed.push((server, bbox)),
                    Err(e) => failures.push(e),
                }
            }
        }
        if failures.is_empty() {
            Ok(pieces)
        } else if completed.is_empty() && failures.len() == 1 {
            Err(failures.pop().expect("one failure"))
        } else {
            Err(ClientError::PartialPut { completed, failures })
        }
    }

    /// Reads `(var, version)` over `bbox`, waiting up to `timeout_ms` for
    /// every piece to become available.
    pub fn get(&mut self, var: &str, version: u32, bbox: &NDBox, timeout_ms: u32) -> Result<RegionBuffer> {
        let pieces = self.grid.split_by_owner(var, bbox)?;
        let esize = self.element_size as usize;
        let mut batches: BTreeMap<u32, Vec<Request>> = BTreeMap::new();
        for (owner, sub) in &pieces {
            batches.entry(*owner).or_default().push(Request::Get(GetRequest {
                var: var.to_string(),
                version,
                element_size: self.element_size,
                bbox: *sub,
                timeout_ms,
            }));
        }
        let single = pieces.len() == 1;
        let mut out: Option<Vec<u8>> = None;
        let mut first_err: Option<ClientError> = None;
        let mut filled = Vec::with_capacity(pieces.len());
        for (server, replies) in self.exchange(batches) {
            for (sub, reply) in replies {
                let sub = sub.expect("gets carry a box");
                let data = match reply.and_then(|m| expect_data(server, sub, esize, m)) {
                    Ok(d) => d,
                    Err(e) => {
                        // A timeout anywhere fails the whole get as a timeout.
                        if first_err.as_ref().is_none_or(|f| !f.is_timeout() && e.is_timeout()) {
                            first_err = Some(e);
                        }
                        continue;
                    }
                };
                if single {
                    out = Some(data);
                } else {
                    let dst = out.get_or_insert_with(|| vec![0u8; bbox.volume() as usize * esize]);
                    copy_region_raw(&sub, &data, bbox, dst, esize, &sub)?;
                }
                filled.push(sub);
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        debug_assert_eq!(crate::geometry::covers(bbox, &filled), Ok(true));
        let bytes = out.unwrap_or_default();
        Ok(RegionBuffer::new(*bbox, esize, bytes)?)
    }

    /// [`get`](Self::get) with the session's default timeout.
    pub fn get_default(&mut self, var: &str, version: u32, bbox: &NDBox) -> Result<RegionBuffer> {
        self.get(var, version, bbox, self.timeout_ms)
    }

    /// STAT from every server, reported per server.
    pub fn stat(&mut self) -> Vec<Result<ServerStat>> {
        let batches: BTreeMap<u32, Vec<Request>> =
            (0..self.servers.len() as u32).map(|s| (s, vec![Request::Stat])).collect();
        self.exchange(batches)
            .into_iter()
            .map(|(server, mut replies)| {
                let (_, reply) = replies.pop().expect("one reply per STAT");
                match reply? {
                    Message::StatResp(s) => Ok(s),
                    Message::Err(e) => Err(ClientError::Remote {
                        server,
                        bbox: None,
                        code: e.code,
                        message: e.message,
                    }),
                    other => Err(unexpected(server, &other)),
                }
            })
            .collect()
    }

    /// Sends each server's requests pipelined on its connection, all servers
    /// concurrently. Replies come back in request order per server.
    #[allow(clippy::type_complexity)]
    fn exchange(&mut self, batches: BTreeMap<u32, Vec<Request>>) -> Vec<(u32, Vec<(Option<NDBox>, Result<Message>)>)> {
        let mut jobs = Vec::new();
        let mut results = Vec::new();
        for (server, reqs) in batches {
            let conn = match self.conns[server as usize].take() {
                Some(c) => c,
                None => match self.connect(server) {
                    Ok(c) => c,
                    Err(e) => {
                        let replies = reqs
                            .iter()
                            .map(|r| (r.bbox(), Err(connect_error_copy(&e))))
                            .collect();
                        results.push((server, replies));
                        continue;
                    }
                },
            };
            let first = self.next_corr + 1;
            self.next_corr += reqs.len() as u64;
            jobs.push((server, first, conn, reqs));
        }
        let finished: Vec<_> = thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .into_iter()
                .map(|(server, first, conn, reqs)| {
                    scope.spawn(move || {
                        let (conn, replies) = run_batch(server, first, conn, reqs);
                        (server, conn, replies)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("batch thread panicked")).collect()
        });
        for (server, conn, replies) in finished {
            self.conns[server as usize] = conn;
            results.push((server, replies));
        }
        results.sort_by_key(|(s, _)| *s);
        results
    }
}

fn connect_error_copy(e: &ClientError) -> ClientError {
    match e {
        ClientError::Connect { server, addr, source } => ClientError::Connect {
            server: *server,
            addr: addr.clone(),
            source: io::Error::new(source.kind(), source.to_string()),
        },
        _ => unreachable!("connect() only fails with Connect"),
    }
}

/// Writes every request from a helper thread while reading replies here.
/// The connection is returned only if it is still in sync.
#[allow(clippy::type_complexity)]
fn run_batch(
    server: u32,
    first_corr: u64,
    conn: Conn,
    reqs: Vec<Request>,
) -> (Option<Conn>, Vec<(Option<NDBox>, Result<Message>)>) {
    let Conn { mut reader, mut writer } = conn;
    let n = reqs.len();
    let boxes: Vec<Option<NDBox>> = reqs.iter().map(|r| r.bbox()).collect();
    let mut replies: Vec<Option<Result<Message>>> = (0..n).map(|_| None).collect();
    let mut healthy = true;
    thread::scope(|scope| {
        let writer_ref = &mut writer;
        let sender = scope.spawn(move || -> io::Result<()> {
            for (i, req) in reqs.iter().enumerate() {
                let corr = first_corr + i as u64;
                let r = match req {
                    Request::Put {
                        var,
                        version,
                        element_size,
                        bbox,
                        data,
                    } => wire::write_put(writer_ref, corr, var, *version, *element_size, bbox, data),
                    Request::Get(g) => wire::write_frame(writer_ref, corr, &Message::Get(g.clone())),
                    Request::Stat => wire::write_frame(writer_ref, corr, &Message::Stat),
                };
                if let Err(e) = r {
                    let _ = writer_ref.get_ref().shutdown(Shutdown::Both);
                    return Err(e);
                }
            }
            Ok(())
        });
        let mut received = 0;
        while received < n {
            match wire::read_message(&mut reader) {
                Ok(Some((corr, msg))) => {
                    let idx = corr.wrapping_sub(first_corr);
                    if idx >= n as u64 || replies[idx as usize].is_some() {
                        healthy = false;
                        let detail = format!("reply with unknown correlation id {corr}");
                        for r in replies.iter_mut().filter(|r| r.is_none()) {
                            *r = Some(Err(ClientError::UnexpectedReply {
                                server,
                                detail: detail.clone(),
                            }));
                        }
                        break;
                    }
                    replies[idx as usize] = Some(Ok(msg));
                    received += 1;
                }
                Ok(None) => {
                    healthy = false;
                    fill_transport(&mut replies, server, || {
                        ProtocolError::Frame(wire::FrameError::Truncated)
                    });
                    break;
                }
                Err(e) => {
                    healthy = false;
                    let text = e.to_string();
                    fill_transport(&mut replies, server, || {
                        ProtocolError::Frame(wire::FrameError::Io(io::Error::other(text.clone())))
                    });
                    break;
                }
            }
        }
        if !healthy {
            let _ = reader.get_ref().shutdown(Shutdown::Both);
        }
        if let Ok(Err(_)) = sender.join() {
            healthy = false;
        }
    });
    let conn = healthy.then_some(Conn { reader, writer });
    let replies = boxes
        .into_iter()
        .zip(replies)
        .map(|(b, r)| (b, r.expect("every slot filled")))
        .collect();
    (conn, replies)
}

fn fill_transport(
    replies: &mut [Option<Result<Message>>],
    server: u32,
    err: impl Fn() -> ProtocolError,
) {
    for r in replies.iter_mut().filter(|r| r.is_none()) {
        *r = Some(Err(ClientError::Transport { server, source: err() }));
    }
}

fn unexpected(server: u32, m: &Message) -> ClientError {
    ClientError::UnexpectedReply {
        server,
        detail: format!("message type {}", m.msg_type()),
    }
}

fn remote(server: u32, bbox: NDBox, e: wire::ErrorReply) -> ClientError {
    ClientError::Remote {
        server,
        bbox: Some(bbox),
        code: e.code,
        message: e.message,
    }
}

fn expect_ack(server: u32, bbox: NDBox, m: Message) -> Result<()> {
    match m {
        Message::PutAck => Ok(()),
        Message::Err(e) => Err(remote(server, bbox, e)),
        other => Err(unexpected(server, &other)),
    }
}

fn expect_data(server: u32, bbox: NDBox, esize: usize, m: Message) -> Result<Vec<u8>> {
    match m {
        Message::GetResp(d) if d.len() as u64 == bbox.volume() * esize as u64 => Ok(d),
        Message::GetResp(d) => Err(ClientError::UnexpectedReply {
            server,
            detail: format!("{} bytes for {bbox}", d.len()),
        }),
        Message::Err(e) => Err(remote(server, bbox, e)),
        other => Err(unexpected(server, &other)),
    }
}
