//! FIO-style throughput and latency measurement against a raw file or a tier.
//!
//! `jobs` workers each own a handle onto the target and keep `qd` operations
//! outstanding by running `qd` issuer threads. SEQ workers walk disjoint
//! contiguous stripes; RAND issuers pick uniform `bs`-aligned offsets over the
//! whole extent with no revisit tracking.

use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::{FileExt, OpenOptionsExt};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use log::warn;
use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use thiserror::Error;

use crate::tier::{open_tier, ChunkHandle, Tier, TierError, TierSpec};

use super::report::{AccessPattern, DevbenchRow, RwMix};

const MIB: f64 = 1024.0 * 1024.0;
const DIRECT_ALIGN: usize = 4096;

#[derive(Debug, Error)]
pub enum DevbenchError {
    #[error("devbench configuration error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Tier(#[from] TierError),
}

pub type Result<T> = std::result::Result<T, DevbenchError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DevbenchTarget {
    File(PathBuf),
    Tier(TierSpec),
}

impl FromStr for DevbenchTarget {
    type Err = String;

    /// Tier specs (`heap`, `mmap:...`, `delayed:...`) select a tier; anything
    /// else is a file path.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let is_tier = s == "heap" || s.starts_with("mmap:") || s.starts_with("delayed:");
        if is_tier {
            s.parse().map(DevbenchTarget::Tier).map_err(|e: TierError| e.to_string())
        } else if s.is_empty() {
            Err("empty target".into())
        } else {
            Ok(DevbenchTarget::File(PathBuf::from(s)))
        }
    }
}

#[derive(Debug, Clone)]
pub struct DevbenchConfig {
    pub target: DevbenchTarget,
    pub pattern: AccessPattern,
    pub rw: RwMix,
    /// Transfer size in bytes.
    pub bs: u64,
    pub jobs: u32,
    pub qd: u32,
    /// Zero means unbounded.
    pub runtime: Duration,
    /// Zero means unbounded.
    pub total_bytes: u64,
    pub seed: u64,
    /// Accessed extent: file size, or prefilled tier bytes.
    pub size: u64,
    /// Attempt O_DIRECT on file targets.
    pub direct: bool,
}

impl DevbenchConfig {
    pub fn new(target: DevbenchTarget) -> Self {
        Self {
            target,
            pattern: AccessPattern::Seq,
            rw: RwMix::Read,
            bs: 4096,
            jobs: 1,
            qd: 1,
            runtime: Duration::from_secs(5),
            total_bytes: 0,
            seed: 0,
            size: 256 << 20,
            direct: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DevbenchError::Config(m));
        if self.bs < 512 {
            return fail(format!("transfer size {} is below 512 bytes", self.bs));
        }
        if self.jobs == 0 || self.qd == 0 {
            return fail("jobs and qd must be at least 1".into());
        }
        if self.runtime.is_zero() && self.total_bytes == 0 {
            return fail("runtime and total_bytes cannot both be unbounded".into());
        }
        let blocks = self.size / self.bs;
        if blocks == 0 {
            return fail(format!("target extent {} is smaller than one {}-byte transfer", self.size, self.bs));
        }
        if self.pattern == AccessPattern::Seq && blocks < self.jobs as u64 {
            return fail(format!(
                "target extent {} holds {blocks} transfers, fewer than {} sequential stripes",
                self.size, self.jobs
            ));
        }
        Ok(())
    }
}

/// An opened, prefilled target reusable across cells.
pub struct PreparedTarget {
    kind: TargetKind,
    size: u64,
}

enum TargetKind {
    File { path: PathBuf, direct_ok: bool },
    Tier { tier: Arc<dyn Tier>, bs: u64, handles: Vec<ChunkHandle> },
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> DevbenchError + '_ {
    move |source| DevbenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl PreparedTarget {
    /// Opens `target` and makes sure `size` bytes are present. Tier targets
    /// are cut into `bs`-sized chunks, so they are tied to one transfer size.
    pub fn prepare(target: &DevbenchTarget, size: u64, bs: u64, seed: u64) -> Result<Self> {
        match target {
            DevbenchTarget::File(path) => {
                let f = OpenOptions::new()
                    .read(true)
                    .write(true)
                    .create(true)
                    .truncate(false)
                    .open(path)
                    .map_err(io_err(path))?;
                let len = f.metadata().map_err(io_err(path))?.len();
                if len < size {
                    prefill_file(&f, len, size, seed).map_err(io_err(path))?;
                }
                drop(f);
                let direct_ok = open_direct(path).is_ok();
                Ok(Self {
                    kind: TargetKind::File {
                        path: path.clone(),
                        direct_ok,
                    },
                    size,
                })
            }
            DevbenchTarget::Tier(spec) => {
                // Prefill the undelayed tier, then wrap it.
                let config = spec.clone().into_config(size + size / 8 + (1 << 20))?;
                let inner = open_tier(&config.base())?;
                let mut rng = StdRng::seed_from_u64(seed);
                let mut buf = vec![0u8; bs as usize];
                let mut handles = Vec::with_capacity((size / bs) as usize);
                for _ in 0..size / bs {
                    rng.fill_bytes(&mut buf);
                    let h = inner.allocate(bs)?;
                    inner.write_chunk(&h, &buf)?;
                    handles.push(h);
                }
                let tier: Arc<dyn Tier> = if config.delay_per_op.is_zero() && config.delay_per_mib.is_zero() {
                    inner
                } else {
                    Arc::new(crate::tier::DelayedTier::new(inner, config.delay_per_op, config.delay_per_mib))
                };
                Ok(Self {
                    kind: TargetKind::Tier { tier, bs, handles },
                    size,
                })
            }
        }
    }

    pub fn size(&self) -> u64 {
        self.size
    }
}

fn prefill_file(f: &File, from: u64, to: u64, seed: u64) -> io::Result<()> {
    let mut rng = StdRng::seed_from_u64(seed ^ 0xf111);
    let mut buf = vec![0u8; 1 << 20];
    let mut off = from;
    while off < to {
        let n = ((to - off) as usize).min(buf.len());
        rng.fill_bytes(&mut buf[..n]);
        f.write_all_at(&buf[..n], off)?;
        off += n as u64;
    }
    f.sync_all()
}

fn open_direct(path: &Path) -> io::Result<File> {
    OpenOptions::new()
        .read(true)
        .write(true)
        .custom_flags(libc::O_DIRECT)
        .open(path)
}

/// A `len`-byte buffer starting on a `DIRECT_ALIGN` boundary.
struct AlignedBuf {
    storage: Vec<u8>,
    start: usize,
    len: usize,
}

impl AlignedBuf {
    fn new(len: usize, rng: &mut StdRng) -> Self {
        let mut storage = vec![0u8; len + DIRECT_ALIGN];
        let start = storage.as_ptr().align_offset(DIRECT_ALIGN);
        rng.fill_bytes(&mut storage[start..start + len]);
        Self { storage, start, len }
    }

    fn as_slice(&self) -> &[u8] {
        &self.storage[self.start..self.start + self.len]
    }

    fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.storage[self.start..self.start + self.len]
    }
}

/// Per-worker access to the target.
enum WorkerHandle {
    File(File),
    Tier(Arc<dyn Tier>),
}

struct Issuer {
    worker: u32,
    pattern: AccessPattern,
    read_percent: u32,
    bs: u64,
    blocks: u64,
    stripe_start: u64,
    stripe_blocks: u64,
    cursor: Arc<AtomicU64>,
    rng: StdRng,
}

impl Issuer {
    fn next_block(&mut self) -> u64 {
        match self.pattern {
            AccessPattern::Seq => {
                self.stripe_start + self.cursor.fetch_add(1, Ordering::Relaxed) % self.stripe_blocks
            }
            AccessPattern::Rand => self.rng.random_range(0..self.blocks),
        }
    }

    fn next_is_read(&mut self) -> bool {
        match self.read_percent {
            100 => true,
            0 => false,
            p => self.rng.random_range(0..100) < p,
        }
    }
}

/// Runs one cell on a freshly prepared target.
pub fn run_devbench(config: &DevbenchConfig) -> Result<DevbenchRow> {
    config.validate()?;
    let target = PreparedTarget::prepare(&config.target, config.size, config.bs, config.seed)?;
    run_on(&target, config)
}

/// Runs one cell on `target`, which must have been prepared with at least
/// `config.size` bytes (and, for tiers, with `config.bs`).
pub fn run_on(target: &PreparedTarget, config: &DevbenchConfig) -> Result<DevbenchRow> {
    config.validate()?;
    if config.size > target.size {
        return Err(DevbenchError::Config(format!(
            "cell extent {} exceeds prepared extent {}",
            config.size, target.size
        )));
    }
    let blocks = config.size / config.bs;
    let mut direct = false;
    let mut handles = Vec::with_capacity(config.jobs as usize);
    for _ in 0..config.jobs {
        handles.push(match &target.kind {
            TargetKind::File { path, direct_ok } => {
                let want_direct = config.direct && *direct_ok && config.bs as usize % DIRECT_ALIGN == 0;
                let f = if want_direct {
                    direct = true;
                    open_direct(path).map_err(io_err(path))?
                } else {
                    OpenOptions::new()
                        .read(true)
                        .write(true)
                        .open(path)
                        .map_err(io_err(path))?
                };
                WorkerHandle::File(f)
            }
            TargetKind::Tier { tier, bs, .. } => {
                if *bs != config.bs {
                    return Err(DevbenchError::Config(format!(
                        "tier target was prepared for {bs}-byte transfers, cell uses {}",
                        config.bs
                    )));
                }
                WorkerHandle::Tier(tier.clone())
            }
        });
    }
    if config.direct && !direct {
        if let TargetKind::File { path, .. } = &target.kind {
            warn!("O_DIRECT unavailable for {} with bs={}; using buffered I/O", path.display(), config.bs);
        }
    }
    let tier_handles: &[ChunkHandle] = match &target.kind {
        TargetKind::Tier { handles, .. } => handles,
        TargetKind::File { .. } => &[],
    };

    let budget = if config.total_bytes == 0 { u64::MAX } else { config.total_bytes / config.bs };
    let tickets = AtomicU64::new(0);
    let threads = (config.jobs * config.qd) as usize;
    let start_line = Barrier::new(threads + 1);
    let stripe_blocks = blocks / config.jobs as u64;
    let read_percent = config.rw.read_percent();

    let (latencies, errors, started, finished) = thread::scope(|scope| {
        let mut joins = Vec::with_capacity(threads);
        for (w, handle) in handles.iter().enumerate() {
            let cursor = Arc::new(AtomicU64::new(0));
            for q in 0..config.qd {
                let mut issuer = Issuer {
                    worker: w as u32,
                    pattern: config.pattern,
                    read_percent,
                    bs: config.bs,
                    blocks,
                    stripe_start: w as u64 * stripe_blocks,
                    stripe_blocks,
                    cursor: cursor.clone(),
                    rng: StdRng::seed_from_u64(config.seed ^ ((w as u64) << 32 | q as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
                };
                let (tickets, start_line) = (&tickets, &start_line);
                let runtime = config.runtime;
                joins.push(scope.spawn(move || {
                    let mut buf = AlignedBuf::new(issuer.bs as usize, &mut issuer.rng);
                    let mut lat = Vec::with_capacity(1 << 14);
                    start_line.wait();
                    let t_start = Instant::now();
                    let deadline = (!runtime.is_zero()).then(|| t_start + runtime);
                    let mut err = None;
                    loop {
                        if deadline.is_some_and(|d| Instant::now() >= d) {
                            break;
                        }
                        if tickets.fetch_add(1, Ordering::Relaxed) >= budget {
                            break;
                        }
                        let block = issuer.next_block();
                        let read = issuer.next_is_read();
                        let t0 = Instant::now();
                        let r = do_op(handle, tier_handles, block, issuer.bs, read, &mut buf);
                        lat.push(t0.elapsed());
                        if let Err(e) = r {
                            err = Some(format!("worker {}: {e}", issuer.worker));
                            lat.pop();
                            break;
                        }
                    }
                    (lat, err, t_start, Instant::now())
                }));
            }
        }
        start_line.wait();
        let mut all = Vec::new();
        let mut errors = Vec::new();
        let mut first = None::<Instant>;
        let mut last = None::<Instant>;
        for j in joins {
            let (lat, err, s, f) = j.join().expect("issuer panicked");
            all.extend(lat);
            errors.extend(err);
            first = Some(first.map_or(s, |x| x.min(s)));
            last = Some(last.map_or(f, |x| x.max(f)));
        }
        (all, errors, first.expect("at least one issuer"), last.expect("at least one issuer"))
    });
    if let Some(e) = errors.into_iter().next() {
        return Err(DevbenchError::Io {
            path: PathBuf::from("<target>"),
            source: io::Error::other(e),
        });
    }
    let elapsed_s = finished.duration_since(started).as_secs_f64().max(1e-9);
    Ok(summarize(config, direct, latencies, elapsed_s))
}

fn do_op(
    handle: &WorkerHandle,
    tier_handles: &[ChunkHandle],
    block: u64,
    bs: u64,
    read: bool,
    buf: &mut AlignedBuf,
) -> std::result::Result<(), String> {
    match handle {
        WorkerHandle::File(f) => {
            let off = block * bs;
            if read {
                f.read_exact_at(buf.as_mut_slice(), off).map_err(|e| e.to_string())
            } else {
                f.write_all_at(buf.as_slice(), off).map_err(|e| e.to_string())
            }
        }
        WorkerHandle::Tier(t) => {
            let h = &tier_handles[block as usize];
            if read {
                t.read_chunk_into(h, buf.as_mut_slice()).map_err(|e| e.to_string())
            } else {
                t.write_chunk(h, buf.as_slice()).map_err(|e| e.to_string())
            }
        }
    }
}

fn summarize(config: &DevbenchConfig, direct: bool, mut lat: Vec<Duration>, elapsed_s: f64) -> DevbenchRow {
    let ops = lat.len() as u64;
    let bytes_moved = ops * config.bs;
    let (mean_lat_us, p99_lat_us) = if lat.is_empty() {
        (0.0, 0.0)
    } else {
        let total: f64 = lat.iter().map(|d| d.as_secs_f64()).sum();
        lat.sort_unstable();
        (total / ops as f64 * 1e6, nearest_rank(&lat, 99.0).as_secs_f64() * 1e6)
    };
    DevbenchRow {
        pattern: config.pattern,
        rw: config.rw,
        bs: config.bs,
        jobs: config.jobs,
        qd: config.qd,
        direct,
        mib_per_s: bytes_moved as f64 / MIB / elapsed_s,
        iops: ops as f64 / elapsed_s,
        mean_lat_us,
        p99_lat_us,
        ops,
        bytes_moved,
        elapsed_s,
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn nearest_rank<T: Copy>(sorted: &[T], pct: f64) -> T {
    assert!(!sorted.is_empty());
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Grid axes for [`run_grid`].
#[derive(Debug, Clone)]
pub struct DevbenchGrid {
    pub patterns: Vec<AccessPattern>,
    pub rws: Vec<RwMix>,
    pub bss: Vec<u64>,
    pub jobs: Vec<u32>,
    pub qds: Vec<u32>,
}

impl DevbenchGrid {
    pub fn cells(&self) -> usize {
        self.patterns.len() * self.rws.len() * self.bss.len() * self.jobs.len() * self.qds.len()
    }
}

/// Runs every cell of `grid`, with all other settings from `base`. File
/// targets are prepared once; tier targets once per transfer size.
/// `on_row` sees each row as it completes.
pub fn run_grid(
    base: &DevbenchConfig,
    grid: &DevbenchGrid,
    mut on_row: impl FnMut(&DevbenchRow),
) -> Result<Vec<DevbenchRow>> {
    let mut rows = Vec::with_capacity(grid.cells());
    let mut prepared: Option<(u64, PreparedTarget)> = None;
    for &bs in &grid.bss {
        let reuse = match (&base.target, &prepared) {
            (DevbenchTarget::File(_), Some(_)) => true,
            (DevbenchTarget::Tier(_), Some((b, _))) => *b == bs,
            _ => false,
        };
        if !reuse {
            drop(prepared.take());
            prepared = Some((bs, PreparedTarget::prepare(&base.target, base.size, bs, base.seed)?));
        }
        let target = &prepared.as_ref().expect("prepared above").1;
        for &pattern in &grid.patterns {
            for &rw in &grid.rws {
                for &jobs in &grid.jobs {
                    for &qd in &grid.qds {
                        let cfg = DevbenchConfig {
                            pattern,
                            rw,
                            bs,
                            jobs,
                            qd,
                            ..base.clone()
                        };
                        let row = run_on(target, &cfg)?;
                        on_row(&row);
                        rows.push(row);
                    }
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<u32> = (1..=100).collect();
        assert_eq!(nearest_rank(&v, 99.0), 99);
        assert_eq!(nearest_rank(&v, 50.0), 50);
        assert_eq!(nearest_rank(&v, 100.0), 100);
        assert_eq!(nearest_rank(&[7], 99.0), 7);
        assert_eq!(nearest_rank(&[1, 2, 3], 0.0), 1);
    }

    #[test]
    fn target_parsing() {
        assert_eq!("heap".parse::<DevbenchTarget>().unwrap(), DevbenchTarget::Tier(TierSpec::Heap));
        assert!(matches!("delayed:fast".parse::<DevbenchTarget>().unwrap(), DevbenchTarget::Tier(_)));
        assert_eq!(
            "/tmp/dev.bin".parse::<DevbenchTarget>().unwrap(),
            DevbenchTarget::File("/tmp/dev.bin".into())
        );
        assert!("delayed:zzz".parse::<DevbenchTarget>().is_err());
    }

    #[test]
    fn validation() {
        let mut c = DevbenchConfig::new(DevbenchTarget::Tier(TierSpec::Heap));
        c.size = 1 << 20;
        assert!(c.validate().is_ok());
        c.bs = 256;
        assert!(c.validate().is_err());
        c.bs = 4096;
        c.runtime = Duration::ZERO;
        assert!(c.validate().is_err());
        c.total_bytes = 1 << 20;
        c.jobs = 512;
        assert!(c.validate().is_err(), "256 blocks cannot feed 512 stripes");
        c.pattern = AccessPattern::Rand;
        assert!(c.validate().is_ok());
    }
}
