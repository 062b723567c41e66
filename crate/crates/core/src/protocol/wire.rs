//! Length-prefixed binary framing.
//!
//! Every frame is `"STG1" | u8 msg_type | u64 correlation id | u64 payload_len
//! | payload`, integers little-endian. Payload layouts are given on the
//! [`Message`] variants.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::directory::ObjectDescriptor;
use crate::geometry::{GeometryError, NDBox, MAX_DIMS};
use crate::tier::{ChunkHandle, TierStats};

pub const MAGIC: &[u8; 4] = b"STG1";
pub const HEADER_LEN: usize = 21;
/// Frames announcing a larger payload are rejected as corrupt.
pub const MAX_PAYLOAD: u64 = 16 << 30;

pub mod msg_type {
    pub const PUT: u8 = 1;
    pub const PUT_ACK: u8 = 2;
    pub const GET: u8 = 3;
    pub const GET_RESP: u8 = 4;
    pub const NOTIFY: u8 = 5;
    pub const NOTIFY_ACK: u8 = 6;
    pub const STAT: u8 = 7;
    pub const STAT_RESP: u8 = 8;
    pub const BARRIER: u8 = 9;
    pub const ERR: u8 = 255;
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("stream ended inside a frame")]
    Truncated,
    #[error("payload length {0} exceeds the frame limit")]
    TooLarge(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("malformed {kind} payload: {reason}")]
    Malformed { kind: &'static str, reason: String },
}

/// Error codes carried by ERR frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    StagingFull,
    NotOwner,
    Timeout,
    ESize,
    Shutdown,
    BadRequest,
    UnknownType,
    Internal,
    Other(u16),
}

impl ErrorCode {
    pub fn as_u16(self) -> u16 {
        match self {
            ErrorCode::StagingFull => 1,
            ErrorCode::NotOwner => 2,
            ErrorCode::Timeout => 3,
            ErrorCode::ESize => 4,
            ErrorCode::Shutdown => 5,
            ErrorCode::BadRequest => 6,
            ErrorCode::UnknownType => 7,
            ErrorCode::Internal => 8,
            ErrorCode::Other(c) => c,
        }
    }

    pub fn from_u16(c: u16) -> Self {
        match c {
            1 => ErrorCode::StagingFull,
            2 => ErrorCode::NotOwner,
            3 => ErrorCode::Timeout,
            4 => ErrorCode::ESize,
            5 => ErrorCode::Shutdown,
            6 => ErrorCode::BadRequest,
            7 => ErrorCode::UnknownType,
            8 => ErrorCode::Internal,
            c => ErrorCode::Other(c),
        }
    }
}

/// `var | u32 version | u32 element_size | box | data`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutRequest {
    pub var: String,
    pub version: u32,
    pub element_size: u32,
    pub bbox: NDBox,
    pub data: Vec<u8>,
}

/// `var | u32 version | u32 element_size | box | u32 timeout_ms`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetRequest {
    pub var: String,
    pub version: u32,
    pub element_size: u32,
    pub bbox: NDBox,
    /// 0 fails immediately when the box is not yet covered.
    pub timeout_ms: u32,
}

/// STAT_RESP body: `u32 server_id` then ten u64 counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ServerStat {
    pub server_id: u32,
    pub tier: TierStats,
    pub descriptor_count: u64,
    pub pending_gets: u64,
    pub notify_retries: u64,
    pub notify_failures: u64,
    pub notify_sent: u64,
}

/// ERR body: `u16 code | u16 len | UTF-8 message`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorReply {
    pub code: ErrorCode,
    pub message: String,
}

/// Rendezvous message used by the benchmark driver.
///
/// `u8 phase | u8 role | u32 client_id | u32 timestep | u64 start_ns |
/// u64 end_ns | u64 bytes | u8 ok | u16 len | UTF-8 detail`
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BarrierMsg {
    pub phase: u8,
    pub role: u8,
    pub client_id: u32,
    pub timestep: u32,
    pub start_ns: u64,
    pub end_ns: u64,
    pub bytes: u64,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Put(PutRequest),
    PutAck,
    Get(GetRequest),
    /// Row-major bytes over the requested box.
    GetResp(Vec<u8>),
    /// `var | u32 version | u32 element_size | box | u32 owner | u64 offset | u64 length | u64 generation`
    Notify(ObjectDescriptor),
    NotifyAck,
    Stat,
    StatResp(ServerStat),
    Barrier(BarrierMsg),
    Err(ErrorReply),
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            Message::Put(_) => PUT,
            Message::PutAck => PUT_ACK,
            Message::Get(_) => GET,
            Message::GetResp(_) => GET_RESP,
            Message::Notify(_) => NOTIFY,
            Message::NotifyAck => NOTIFY_ACK,
            Message::Stat => STAT,
            Message::StatResp(_) => STAT_RESP,
            Message::Barrier(_) => BARRIER,
            Message::Err(_) => ERR,
        }
    }

    pub fn err(code: ErrorCode, message: impl Into<String>) -> Self {
        Message::Err(ErrorReply {
            code,
            message: message.into(),
        })
    }

    /// Payload bytes, excluding any bulk data tail (see [`Message::bulk`]).
    fn encode_head(&self, out: &mut Vec<u8>) {
        match self {
            Message::Put(p) => {
                put_var(out, &p.var);
                out.extend_from_slice(&p.version.to_le_bytes());
                out.extend_from_slice(&p.element_size.to_le_bytes());
                put_box(out, &p.bbox);
            }
            Message::Get(g) => {
                put_var(out, &g.var);
                out.extend_from_slice(&g.version.to_le_bytes());
                out.extend_from_slice(&g.element_size.to_le_bytes());
                put_box(out, &g.bbox);
                out.extend_from_slice(&g.timeout_ms.to_le_bytes());
            }
            Message::Notify(d) => {
                put_var(out, &d.var);
                out.extend_from_slice(&d.version.to_le_bytes());
                out.extend_from_slice(&d.element_size.to_le_bytes());
                put_box(out, &d.bbox);
                out.extend_from_slice(&d.owner.to_le_bytes());
                out.extend_from_slice(&d.handle.offset.to_le_bytes());
                out.extend_from_slice(&d.handle.length.to_le_bytes());
                out.extend_from_slice(&d.handle.generation.to_le_bytes());
            }
            Message::StatResp(s) => {
                out.extend_from_slice(&s.server_id.to_le_bytes());
                for v in [
                    s.tier.used_bytes,
                    s.tier.capacity_bytes,
                    s.tier.chunk_count,
                    s.tier.cumulative_read_bytes,
                    s.tier.cumulative_write_bytes,
                    s.descriptor_count,
                    s.pending_gets,
                    s.notify_retries,
                    s.notify_failures,
                    s.notify_sent,
                ] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::Barrier(b) => {
                out.push(b.phase);
                out.push(b.role);
                out.extend_from_slice(&b.client_id.to_le_bytes());
                out.extend_from_slice(&b.timestep.to_le_bytes());
                out.extend_from_slice(&b.start_ns.to_le_bytes());
                out.extend_from_slice(&b.end_ns.to_le_bytes());
                out.extend_from_slice(&b.bytes.to_le_bytes());
                out.push(b.ok as u8);
                put_str16(out, &b.detail);
            }
            Message::Err(e) => {
                out.extend_from_slice(&e.code.as_u16().to_le_bytes());
                put_str16(out, &e.message);
            }
            Message::PutAck | Message::NotifyAck | Message::Stat | Message::GetResp(_) => {}
        }
    }

    /// Bulk data appended after the head without copying.
    fn bulk(&self) -> &[u8] {
        match self {
            Message::Put(p) => &p.data,
            Message::GetResp(d) => d,
            _ => &[],
        }
    }

    pub fn decode(msg_type: u8, payload: &[u8]) -> Result<Message, PayloadError> {
        let (mut msg, bulk_at) = Self::decode_head(msg_type, payload)?;
        if let Some(at) = bulk_at {
            *msg.bulk_mut() = payload[at..].to_vec();
        }
        Ok(msg)
    }

    fn bulk_mut(&mut self) -> &mut Vec<u8> {
        match self {
            Message::Put(p) => &mut p.data,
            Message::GetResp(d) => d,
            _ => unreachable!("only PUT and GET_RESP carry bulk data"),
        }
    }

    /// Decodes everything but the bulk data of PUT and GET_RESP, whose
    /// payload offset is returned instead.
    fn decode_head(msg_type: u8, payload: &[u8]) -> Result<(Message, Option<usize>), PayloadError> {
        use msg_type::*;
        let mut bulk_at = None;
        let mut r = Cursor::new(payload, msg_type);
        let msg = match msg_type {
            PUT => {
                let var = r.var()?;
                let version = r.u32()?;
                let element_size = r.u32()?;
                let bbox = r.ndbox()?;
                let data_len = r.rest().len();
                let expected = bbox.volume().checked_mul(element_size as u64);
                if expected != Some(data_len as u64) {
                    return Err(r.bad(format!(
                        "{data_len} data bytes for box {bbox} with element size {element_size}"
                    )));
                }
                bulk_at = Some(payload.len() - data_len);
                Message::Put(PutRequest {
                    var,
                    version,
                    element_size,
                    bbox,
                    data: Vec::new(),
                })
            }
            PUT_ACK => Message::PutAck,
            GET => Message::Get(GetRequest {
                var: r.var()?,
                version: r.u32()?,
                element_size: r.u32()?,
                bbox: r.ndbox()?,
                timeout_ms: r.u32()?,
            }),
            GET_RESP => {
                bulk_at = Some(r.pos);
                r.rest();
                Message::GetResp(Vec::new())
            }
            NOTIFY => Message::Notify(ObjectDescriptor {
                var: r.var()?,
                version: r.u32()?,
                element_size: r.u32()?,
                bbox: r.ndbox()?,
                owner: r.u32()?,
                handle: ChunkHandle {
                    offset: r.u64()?,
                    length: r.u64()?,
                    generation: r.u64()?,
                },
            }),
            NOTIFY_ACK => Message::NotifyAck,
            STAT => Message::Stat,
            STAT_RESP => {
                let server_id = r.u32()?;
                let mut v = [0u64; 10];
                for x in &mut v {
                    *x = r.u64()?;
                }
                Message::StatResp(ServerStat {
                    server_id,
                    tier: TierStats {
                        used_bytes: v[0],
                        capacity_bytes: v[1],
                        chunk_count: v[2],
                        cumulative_read_bytes: v[3],
                        cumulative_write_bytes: v[4],
                    },
                    descriptor_count: v[5],
                    pending_gets: v[6],
                    notify_retries: v[7],
                    notify_failures: v[8],
                    notify_sent: v[9],
                })
            }
            BARRIER => Message::Barrier(BarrierMsg {
                phase: r.u8()?,
                role: r.u8()?,
                client_id: r.u32()?,
                timestep: r.u32()?,
                start_ns: r.u64()?,
                end_ns: r.u64()?,
                bytes: r.u64()?,
                ok: r.u8()? != 0,
                detail: r.str16()?,
            }),
            ERR => Message::Err(ErrorReply {
                code: ErrorCode::from_u16(r.u16()?),
                message: r.str16()?,
            }),
            t => return Err(PayloadError::UnknownType(t)),
        };
        r.finish()?;
        Ok((msg, bulk_at))
    }
}

fn put_var(out: &mut Vec<u8>, var: &str) {
    let bytes = var.as_bytes();
    assert!(bytes.len() <= 255, "variable names are limited to 255 bytes");
    out.push(bytes.len() as u8);
    out.extend_from_slice(bytes);
}

fn put_str16(out: &mut Vec<u8>, s: &str) {
    let mut end = s.len().min(u16::MAX as usize);
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    out.extend_from_slice(&(end as u16).to_le_bytes());
    out.extend_from_slice(&s.as_bytes()[..end]);
}

/// `u8 ndims | ndims * (u64 lower, u64 upper)`
pub fn put_box(out: &mut Vec<u8>, b: &NDBox) {
    out.push(b.ndims() as u8);
    for d in 0..b.ndims() {
        out.extend_from_slice(&b.lower()[d].to_le_bytes());
        out.extend_from_slice(&b.upper()[d].to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    msg_type: u8,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], msg_type: u8) -> Self {
        Self { buf, pos: 0, msg_type }
    }

    fn bad(&self, reason: impl Into<String>) -> PayloadError {
        let kind = match self.msg_type {
            msg_type::PUT => "PUT",
            msg_type::GET => "GET",
            msg_type::NOTIFY => "NOTIFY",
            msg_type::STAT_RESP => "STAT_RESP",
            msg_type::BARRIER => "BARRIER",
            msg_type::ERR => "ERR",
            _ => "message",
        };
        PayloadError::Malformed {
            kind,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        if self.buf.len() - self.pos < n {
            return Err(self.bad(format!("needs {n} more bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PayloadError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PayloadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<String, PayloadError> {
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.bad("invalid UTF-8"))
    }

    fn var(&mut self) -> Result<String, PayloadError> {
        let n = self.u8()? as usize;
        self.utf8(n)
    }

    fn str16(&mut self) -> Result<String, PayloadError> {
        let n = self.u16()? as usize;
        self.utf8(n)
    }

    fn ndbox(&mut self) -> Result<NDBox, PayloadError> {
        let n = self.u8()? as usize;
        if n == 0 || n > MAX_DIMS {
            return Err(self.bad(GeometryError::UnsupportedDims(n).to_string()));
        }
        let mut lower = [0u64; MAX_DIMS];
        let mut upper = [0u64; MAX_DIMS];
        for d in 0..n {
            lower[d] = self.u64()?;
            upper[d] = self.u64()?;
        }
        NDBox::new(&lower[..n], &upper[..n]).map_err(|e| self.bad(e.to_string()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn finish(&self) -> Result<(), PayloadError> {
        if self.pos != self.buf.len() {
            return Err(self.bad(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// A frame whose payload has not been interpreted yet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub msg_type: u8,
    pub corr: u64,
    pub payload: Vec<u8>,
}

impl RawFrame {
    pub fn decode(&self) -> Result<Message, PayloadError> {
        Message::decode(self.msg_type, &self.payload)
    }

    /// Like [`decode`](Self::decode), but bulk data reuses the payload buffer.
    pub fn into_message(self) -> Result<Message, PayloadError> {
        let (mut msg, bulk_at) = Message::decode_head(self.msg_type, &self.payload)?;
        if let Some(at) = bulk_at {
            let mut payload = self.payload;
            payload.drain(..at);
            *msg.bulk_mut() = payload;
        }
        Ok(msg)
    }
}

/// Serialises `msg` into one contiguous frame.
pub fn encode_frame(corr: u64, msg: &Message) -> Vec<u8> {
    let mut head = Vec::with_capacity(64);
    msg.encode_head(&mut head);
    let bulk = msg.bulk();
    let mut out = Vec::with_capacity(HEADER_LEN + head.len() + bulk.len());
    out.extend_from_slice(&frame_header(msg.msg_type(), corr, (head.len() + bulk.len()) as u64));
    out.extend_from_slice(&head);
    out.extend_from_slice(bulk);
    out
}

fn frame_header(msg_type: u8, corr: u64, payload_len: u64) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(MAGIC);
    h[4] = msg_type;
    h[5..13].copy_from_slice(&corr.to_le_bytes());
    h[13..21].copy_from_slice(&payload_len.to_le_bytes());
    h
}

/// Writes `msg` as one frame; bulk data is written straight from the message.
pub fn write_frame(w: &mut impl Write, corr: u64, msg: &Message) -> io::Result<()> {
    let mut head = Vec::with_capacity(HEADER_LEN + 64);
    head.extend_from_slice(&[0; HEADER_LEN]);
    msg.encode_head(&mut head);
    write_with_bulk(w, msg.msg_type(), corr, head, msg.bulk())
}

/// Writes a PUT frame whose data is borrowed from the caller.
pub fn write_put(
    w: &mut impl Write,
    corr: u64,
    var: &str,
    version: u32,
    element_size: u32,
    bbox: &NDBox,
    data: &[u8],
) -> io::Result<()> {
    let mut head = Vec::with_capacity(HEADER_LEN + 64);
    head.extend_from_slice(&[0; HEADER_LEN]);
    put_var(&mut head, var);
    head.extend_from_slice(&version.to_le_bytes());
    head.extend_from_slice(&element_size.to_le_bytes());
    put_box(&mut head, bbox);
    write_with_bulk(w, msg_type::PUT, corr, head, data)
}

/// `head` starts with `HEADER_LEN` placeholder bytes.
fn write_with_bulk(
    w: &mut impl Write,
    msg_type: u8,
    corr: u64,
    mut head: Vec<u8>,
    bulk: &[u8],
) -> io::Result<()> {
    let payload_len = (head.len() - HEADER_LEN + bulk.len()) as u64;
    head[..HEADER_LEN].copy_from_slice(&frame_header(msg_type, corr, payload_len));
    if bulk.len() < 64 * 1024 {
        head.extend_from_slice(bulk);
        w.write_all(&head)?;
    } else {
        w.write_all(&head)?;
        w.write_all(bulk)?;
    }
    w.flush()
}

/// Reads one frame. `Ok(None)` means the stream ended cleanly between frames.
pub fn read_frame(r: &mut impl Read) -> Result<Option<RawFrame>, FrameError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(FrameError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
        if got >= 4 && &header[..4] != MAGIC {
            return Err(FrameError::BadMagic(header[..4].try_into().unwrap()));
        }
    }
    let msg_type = header[4];
    let corr = u64::from_le_bytes(header[5..13].try_into().unwrap());
    let len = u64::from_le_bytes(header[13..21].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(FrameError::TooLarge(len));
    }
    let mut payload = Vec::with_capacity(len.min(256 << 20) as usize);
    r.take(len).read_to_end(&mut payload)?;
    if payload.len() as u64 != len {
        return Err(FrameError::Truncated);
    }
    Ok(Some(RawFrame {
        msg_type,
        corr,
        payload,
    }))
}

/// Reads and decodes one frame.
pub fn read_message(r: &mut impl Read) -> Result<Option<(u64, Message)>, ProtocolError> {
    match read_frame(r)? {
        None => Ok(None),
        Some(f) => Ok(Some((f.corr, f.into_message()?))),
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Payload(#[from] PayloadError),
}
