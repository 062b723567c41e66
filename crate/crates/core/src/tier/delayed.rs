use std::sync::Arc;
use std::time::Duration;

use super::{ChunkHandle, ChunkKey, Result, Tier, TierStats};

const MIB: f64 = 1024.0 * 1024.0;

/// Latency-injecting wrapper: every read and write of `n` bytes is followed
/// by a sleep of `per_op + per_mib * n / MiB` on top of the inner tier's own
/// time. Results are those of the inner tier, unchanged.
pub struct DelayedTier {
    inner: Arc<dyn Tier>,
    per_op: Duration,
    per_mib: Duration,
}

impl DelayedTier {
    pub fn new(inner: Arc<dyn Tier>, per_op: Duration, per_mib: Duration) -> Self {
        Self {
            inner,
            per_op,
            per_mib,
        }
    }

    pub fn inner(&self) -> &Arc<dyn Tier> {
        &self.inner
    }

    /// Injected latency for a transfer of `bytes`.
    pub fn latency(&self, bytes: u64) -> Duration {
        self.per_op + self.per_mib.mul_f64(bytes as f64 / MIB)
    }

    fn inject(&self, bytes: u64) {
        let d = self.latency(bytes);
        if !d.is_zero() {
            std::thread::sleep(d);
        }
    }
}

impl Tier for DelayedTier {
    fn name(&self) -> &'static str {
        "delayed"
    }

    fn allocate_keyed(&self, length: u64, key: ChunkKey) -> Result<ChunkHandle> {
        self.inner.allocate_keyed(length, key)
    }

    fn write_chunk(&self, handle: &ChunkHandle, bytes: &[u8]) -> Result<()> {
        let r = self.inner.write_chunk(handle, bytes);
        self.inject(bytes.len() as u64);
        r
    }

    fn write_chunk_owned(&self, handle: &ChunkHandle, bytes: Vec<u8>) -> Result<()> {
        let n = bytes.len() as u64;
        let r = self.inner.write_chunk_owned(handle, bytes);
        self.inject(n);
        r
    }

    fn flush_chunk(&self, handle: &ChunkHandle) -> Result<()> {
        self.inner.flush_chunk(handle)
    }

    fn visit_chunk(&self, handle: &ChunkHandle, f: &mut dyn FnMut(&[u8])) -> Result<()> {
        let r = self.inner.visit_chunk(handle, f);
        self.inject(handle.length);
        r
    }

    fn free_chunk(&self, handle: &ChunkHandle) -> Result<()> {
        self.inner.free_chunk(handle)
    }

    fn entries(&self) -> Vec<(ChunkHandle, ChunkKey)> {
        self.inner.entries()
    }

    fn stats(&self) -> TierStats {
        self.inner.stats()
    }

    fn is_persistent(&self) -> bool {
        self.inner.is_persistent()
    }
}
