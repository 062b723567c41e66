use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use super::arena::Arena;
use super::{ChunkHandle, ChunkKey, Result, Tier, TierError, TierStats};

type Cell = Arc<RwLock<Option<Vec<u8>>>>;

struct Slot {
    handle: ChunkHandle,
    key: ChunkKey,
    cell: Cell,
}

struct Table {
    arena: Arena,
    next_generation: u64,
    slots: BTreeMap<u64, Slot>,
}

/// Volatile tier holding each chunk in its own heap allocation. Offsets are
/// virtual: they come from the same arena allocator as the mmap tier so that
/// capacity accounting behaves identically.
pub struct HeapTier {
    table: Mutex<Table>,
    read_bytes: AtomicU64,
    write_bytes: AtomicU64,
}

impl HeapTier {
    pub fn new(capacity_bytes: u64) -> Self {
        Self {
            table: Mutex::new(Table {
                arena: Arena::new(capacity_bytes),
                next_generation: 1,
                slots: BTreeMap::new(),
            }),
            read_bytes: AtomicU64::new(0),
            write_bytes: AtomicU64::new(0),
        }
    }

    fn cell(&self, handle: &ChunkHandle) -> Result<Cell> {
        let table = self.table.lock().unwrap();
        match table.slots.get(&handle.generation) {
            Some(slot) if slot.handle == *handle => Ok(slot.cell.clone()),
            _ => Err(TierError::Lifecycle(format!("stale chunk handle {handle:?}"))),
        }
    }
}

impl Tier for HeapTier {
    fn name(&self) -> &'static str {
        "heap"
    }

    fn allocate_keyed(&self, length: u64, key: ChunkKey) -> Result<ChunkHandle> {
        let mut table = self.table.lock().unwrap();
        let offset = table.arena.reserve(length)?;
        let handle = ChunkHandle {
            offset,
            length,
            generation: table.next_generation,
        };
        table.next_generation += 1;
        table.slots.insert(
            handle.generation,
            Slot {
                handle,
                key,
                cell: Arc::new(RwLock::new(None)),
            },
        );
        Ok(handle)
    }

    fn write_chunk(&self, handle: &ChunkHandle, bytes: &[u8]) -> Result<()> {
        if bytes.len() as u64 != handle.length {
            return Err(TierError::Usage(format!(
                "write of {} bytes to a {}-byte chunk",
                bytes.len(),
                handle.length
            )));
        }
        let cell = self.cell(handle)?;
        let mut data = cell.write().unwrap();
        match data.as_mut() {
            Some(existing) => existing.copy_from_slice(bytes),
            None => *data = Some(bytes.to_vec()),
        }
        self.write_bytes.fetch_add(handle.length, Ordering::Relaxed);
        Ok(())
    }

    fn write_chunk_owned(&self, handle: &ChunkHandle, bytes: Vec<u8>) -> Result<()> {
        if bytes.len() as u64 != handle.length {
            return self.write_chunk(handle, &bytes);
        }
        let cell = self.cell(handle)?;
        *cell.write().unwrap() = Some(bytes);
        self.write_bytes.fetch_add(handle.length, Ordering::Relaxed);
        Ok(())
    }

    fn flush_chunk(&self, handle: &ChunkHandle) -> Result<()> {
        self.cell(handle).map(|_| ())
    }

    fn visit_chunk(&self, handle: &ChunkHandle, f: &mut dyn FnMut(&[u8])) -> Result<()> {
        let cell = self.cell(handle)?;
        let data = cell.read().unwrap();
        let bytes = data
            .as_deref()
            .ok_or_else(|| TierError::Lifecycle(format!("chunk {handle:?} was never written")))?;
        f(bytes);
        self.read_bytes.fetch_add(handle.length, Ordering::Relaxed);
        Ok(())
    }

    fn free_chunk(&self, handle: &ChunkHandle) -> Result<()> {
        let mut table = self.table.lock().unwrap();
        match table.slots.get(&handle.generation) {
            Some(slot) if slot.handle == *handle => {}
            _ => return Err(TierError::Lifecycle(format!("stale chunk handle {handle:?}"))),
        }
        table.slots.remove(&handle.generation);
        table.arena.release(handle.offset, handle.length);
        Ok(())
    }

    fn entries(&self) -> Vec<(ChunkHandle, ChunkKey)> {
        let table = self.table.lock().unwrap();
        table.slots.values().map(|s| (s.handle, s.key)).collect()
    }

    fn stats(&self) -> TierStats {
        let table = self.table.lock().unwrap();
        TierStats {
            used_bytes: table.arena.used(),
            capacity_bytes: table.arena.capacity(),
            chunk_count: table.slots.len() as u64,
            cumulative_read_bytes: self.read_bytes.load(Ordering::Relaxed),
            cumulative_write_bytes: self.write_bytes.load(Ordering::Relaxed),
        }
    }

    fn is_persistent(&self) -> bool {
        false
    }
}
