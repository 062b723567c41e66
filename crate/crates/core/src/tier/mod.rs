//! Chunk storage tiers.
//!
//! A tier stores opaque chunk payloads addressed by [`ChunkHandle`]s. Three
//! backends exist: [`HeapTier`] keeps chunks in process memory, [`MmapTier`]
//! keeps them in a memory-mapped file with a persisted handle table, and
//! [`DelayedTier`] wraps either one and injects an affine per-operation and
//! per-MiB latency on reads and writes.

mod arena;
mod delayed;
mod heap;
mod mmap;

use std::fmt;
use std::io;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

pub use delayed::DelayedTier;
pub use heap::HeapTier;
pub use mmap::{MmapTier, MAGIC as MMAP_MAGIC};

#[derive(Debug, Error)]
pub enum TierError {
    #[error("tier I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("tier configuration error: {0}")]
    Config(String),
    #[error("tier capacity exhausted: requested {requested} bytes with {used} of {capacity} in use")]
    Capacity { requested: u64, used: u64, capacity: u64 },
    #[error("tier usage error: {0}")]
    Usage(String),
    #[error("chunk lifecycle error: {0}")]
    Lifecycle(String),
    #[error("corrupt tier file: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, TierError>;

/// Location of one chunk inside a tier's arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChunkHandle {
    pub offset: u64,
    pub length: u64,
    pub generation: u64,
}

impl ChunkHandle {
    pub fn end(&self) -> u64 {
        self.offset + self.length
    }

    pub fn overlaps(&self, other: &ChunkHandle) -> bool {
        self.offset < other.end() && other.offset < self.end()
    }
}

/// 16-byte tag stored with each chunk in the persisted table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ChunkKey(pub [u8; 16]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TierStats {
    pub used_bytes: u64,
    pub capacity_bytes: u64,
    pub chunk_count: u64,
    pub cumulative_read_bytes: u64,
    pub cumulative_write_bytes: u64,
}

pub trait Tier: Send + Sync {
    /// Short backend name, e.g. `heap`.
    fn name(&self) -> &'static str;

    fn allocate(&self, length: u64) -> Result<ChunkHandle> {
        self.allocate_keyed(length, ChunkKey::default())
    }

    fn allocate_keyed(&self, length: u64, key: ChunkKey) -> Result<ChunkHandle>;

    fn write_chunk(&self, handle: &ChunkHandle, bytes: &[u8]) -> Result<()>;

    /// [`write_chunk`](Self::write_chunk) for callers that can give up their
    /// buffer; tiers that keep bytes in memory may store it as is.
    fn write_chunk_owned(&self, handle: &ChunkHandle, bytes: Vec<u8>) -> Result<()> {
        self.write_chunk(handle, &bytes)
    }

    /// Makes the chunk and its table entry durable. No-op for volatile tiers.
    fn flush_chunk(&self, handle: &ChunkHandle) -> Result<()>;

    /// Runs `f` over the chunk's current bytes without copying them out.
    fn visit_chunk(&self, handle: &ChunkHandle, f: &mut dyn FnMut(&[u8])) -> Result<()>;

    fn read_chunk(&self, handle: &ChunkHandle) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.visit_chunk(handle, &mut |b| out.extend_from_slice(b))?;
        Ok(out)
    }

    fn read_chunk_into(&self, handle: &ChunkHandle, buf: &mut [u8]) -> Result<()> {
        if buf.len() as u64 != handle.length {
            return Err(TierError::Usage(format!(
                "read buffer holds {} bytes, chunk has {}",
                buf.len(),
                handle.length
            )));
        }
        self.visit_chunk(handle, &mut |b| buf.copy_from_slice(b))
    }

    /// Releases the chunk's arena space and table entry.
    fn free_chunk(&self, handle: &ChunkHandle) -> Result<()>;

    /// Live chunks in allocation order.
    fn entries(&self) -> Vec<(ChunkHandle, ChunkKey)>;

    fn stats(&self) -> TierStats;

    /// True if flushed chunks survive a process restart.
    fn is_persistent(&self) -> bool;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TierKind {
    Heap,
    MmapFile,
    Delayed(Box<TierKind>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TierConfig {
    pub kind: TierKind,
    pub backing_path: Option<PathBuf>,
    pub capacity_bytes: u64,
    pub delay_per_op: Duration,
    pub delay_per_mib: Duration,
}

impl TierConfig {
    pub fn heap(capacity_bytes: u64) -> Self {
        Self {
            kind: TierKind::Heap,
            backing_path: None,
            capacity_bytes,
            delay_per_op: Duration::ZERO,
            delay_per_mib: Duration::ZERO,
        }
    }

    pub fn mmap(path: impl Into<PathBuf>, capacity_bytes: u64) -> Self {
        Self {
            kind: TierKind::MmapFile,
            backing_path: Some(path.into()),
            ..Self::heap(capacity_bytes)
        }
    }

    /// Wraps this configuration in a latency-injecting tier.
    pub fn delayed(self, per_op: Duration, per_mib: Duration) -> Self {
        Self {
            kind: TierKind::Delayed(Box::new(self.kind)),
            delay_per_op: per_op,
            delay_per_mib: per_mib,
            ..self
        }
    }

    /// Parses a tier spec string: `heap`, `mmap:<path>`,
    /// `delayed:<op_us>:<mib_us>[:<inner>]`, `delayed:fast[:<inner>]` or
    /// `delayed:slow[:<inner>]`.
    pub fn parse(spec: &str, capacity_bytes: u64) -> Result<Self> {
        TierSpec::from_str(spec)?.into_config(capacity_bytes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity_bytes == 0 {
            return Err(TierError::Config("capacity_bytes must be > 0".into()));
        }
        let base = match &self.kind {
            TierKind::Delayed(inner) => {
                if matches!(**inner, TierKind::Delayed(_)) {
                    return Err(TierError::Config("delayed tiers cannot be nested".into()));
                }
                &**inner
            }
            k => k,
        };
        if *base == TierKind::MmapFile && self.backing_path.is_none() {
            return Err(TierError::Config("mmap tier requires a backing path".into()));
        }
        Ok(())
    }

    /// Same configuration without the latency wrapper.
    pub fn base(&self) -> TierConfig {
        match &self.kind {
            TierKind::Delayed(inner) => TierConfig {
                kind: (**inner).clone(),
                delay_per_op: Duration::ZERO,
                delay_per_mib: Duration::ZERO,
                ..self.clone()
            },
            _ => self.clone(),
        }
    }
}

/// Opens (or creates) the tier described by `config`.
pub fn open_tier(config: &TierConfig) -> Result<Arc<dyn Tier>> {
    config.validate()?;
    match &config.kind {
        TierKind::Heap => Ok(Arc::new(HeapTier::new(config.capacity_bytes))),
        TierKind::MmapFile => {
            let path = config.backing_path.as_ref().expect("validated");
            Ok(Arc::new(MmapTier::open(path, config.capacity_bytes)?))
        }
        TierKind::Delayed(_) => {
            let inner = open_tier(&config.base())?;
            Ok(Arc::new(DelayedTier::new(
                inner,
                config.delay_per_op,
                config.delay_per_mib,
            )))
        }
    }
}

/// Parsed form of a tier spec string, before a capacity is attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TierSpec {
    Heap,
    Mmap(PathBuf),
    Delayed {
        per_op: Duration,
        per_mib: Duration,
        inner: Box<TierSpec>,
    },
}

impl TierSpec {
    /// Latency preset standing in for the faster block device.
    pub const FAST: (Duration, Duration) = (Duration::from_micros(200), Duration::from_micros(1000));
    /// Latency preset standing in for the slower block device.
    pub const SLOW: (Duration, Duration) = (Duration::from_micros(400), Duration::from_micros(4000));

    pub fn delayed(per_op: Duration, per_mib: Duration, inner: TierSpec) -> Self {
        TierSpec::Delayed {
            per_op,
            per_mib,
            inner: Box::new(inner),
        }
    }

    pub fn into_config(self, capacity_bytes: u64) -> Result<TierConfig> {
        let cfg = match self {
            TierSpec::Heap => TierConfig::heap(capacity_bytes),
            TierSpec::Mmap(p) => TierConfig::mmap(p, capacity_bytes),
            TierSpec::Delayed {
                per_op,
                per_mib,
                inner,
            } => {
                if matches!(*inner, TierSpec::Delayed { .. }) {
                    return Err(TierError::Config("delayed tiers cannot be nested".into()));
                }
                inner.into_config(capacity_bytes)?.delayed(per_op, per_mib)
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces an mmap path with `f(path)`, e.g. to give each server its own file.
    pub fn map_path(&self, f: impl Fn(&PathBuf) -> PathBuf) -> TierSpec {
        match self {
            TierSpec::Heap => TierSpec::Heap,
            TierSpec::Mmap(p) => TierSpec::Mmap(f(p)),
            TierSpec::Delayed {
                per_op,
                per_mib,
                inner,
            } => TierSpec::Delayed {
                per_op: *per_op,
                per_mib: *per_mib,
                inner: Box::new(inner.map_path(f)),
            },
        }
    }
}

impl FromStr for TierSpec {
    type Err = TierError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || TierError::Config(format!("unrecognised tier spec {s:?}"));
        if s == "heap" {
            return Ok(TierSpec::Heap);
        }
        if let Some(path) = s.strip_prefix("mmap:") {
            if path.is_empty() {
                return Err(bad());
            }
            return Ok(TierSpec::Mmap(PathBuf::from(path)));
        }
        let Some(rest) = s.strip_prefix("delayed:") else {
            return Err(bad());
        };
        let preset_inner = |r: &'_ str| -> Result<Option<String>> {
            match r {
                "" => Ok(None),
                r => r.strip_prefix(':').map(|x| Some(x.to_string())).ok_or_else(bad),
            }
        };
        let (per_op, per_mib, inner) = if let Some(r) = rest.strip_prefix("fast") {
            (Self::FAST.0, Self::FAST.1, preset_inner(r)?)
        } else if let Some(r) = rest.strip_prefix("slow") {
            (Self::SLOW.0, Self::SLOW.1, preset_inner(r)?)
        } else {
            let mut parts = rest.splitn(3, ':');
            let op: u64 = parts.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            let mib: u64 = parts.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            (
                Duration::from_micros(op),
                Duration::from_micros(mib),
                parts.next().map(str::to_string),
            )
        };
        let inner = match inner {
            None => TierSpec::Heap,
            Some(r) => r.parse()?,
        };
        if matches!(inner, TierSpec::Delayed { .. }) {
            return Err(TierError::Config("delayed tiers cannot be nested".into()));
        }
        Ok(TierSpec::delayed(per_op, per_mib, inner))
    }
}

impl fmt::Display for TierSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TierSpec::Heap => f.write_str("heap"),
            TierSpec::Mmap(p) => write!(f, "mmap:{}", p.display()),
            TierSpec::Delayed {
                per_op,
                per_mib,
                inner,
            } => write!(
                f,
                "delayed:{}:{}:{}",
                per_op.as_micros(),
                per_mib.as_micros(),
                inner
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_tier_specs() {
        assert_eq!("heap".parse::<TierSpec>().unwrap(), TierSpec::Heap);
        assert_eq!(
            "mmap:/tmp/x.tier".parse::<TierSpec>().unwrap(),
            TierSpec::Mmap("/tmp/x.tier".into())
        );
        let d: TierSpec = "delayed:200:1000".parse().unwrap();
        assert_eq!(
            d,
            TierSpec::delayed(Duration::from_micros(200), Duration::from_micros(1000), TierSpec::Heap)
        );
        let d: TierSpec = "delayed:slow:mmap:/a/b".parse().unwrap();
        assert_eq!(
            d,
            TierSpec::delayed(TierSpec::SLOW.0, TierSpec::SLOW.1, TierSpec::Mmap("/a/b".into()))
        );
        let d: TierSpec = "delayed:7:9:heap".parse().unwrap();
        assert_eq!(d.to_string(), "delayed:7:9:heap");
        assert_eq!(d.to_string().parse::<TierSpec>().unwrap(), d);
        assert_eq!("delayed:fast".parse::<TierSpec>().unwrap().to_string(), "delayed:200:1000:heap");
        for bad in ["", "ram", "mmap:", "delayed:", "delayed:1", "delayed:x:1", "delayed:1:1:delayed:1:1"] {
            assert!(bad.parse::<TierSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(TierConfig::heap(0).validate().is_err());
        let mut c = TierConfig::mmap("/tmp/x", 10);
        c.backing_path = None;
        assert!(c.validate().is_err());
        let nested = TierConfig::heap(10)
            .delayed(Duration::ZERO, Duration::ZERO)
            .delayed(Duration::ZERO, Duration::ZERO);
        assert!(nested.validate().is_err());
        assert_eq!(
            TierConfig::heap(10).delayed(Duration::from_micros(5), Duration::ZERO).base(),
            TierConfig::heap(10)
        );
    }
}
