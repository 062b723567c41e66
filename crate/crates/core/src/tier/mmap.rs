//! Memory-mapped file tier.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! 0      16-byte magic "STAGESPACE-TIER1"
//! 16     u64 arena capacity in bytes
//! 24     u64 number of persisted table entries
//! 32     table: slots * (u64 offset, u64 length, u64 generation, [u8; 16] key)
//! ...    arena, starting at the next 4096-byte boundary
//! ```
//!
//! The slot count is a pure function of the persisted capacity. Entries
//! `[0, count)` are live; a table entry is written only when its chunk is
//! flushed, so anything found in the table after a restart has durable bytes.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use memmap2::{MmapMut, MmapOptions};

use super::arena::Arena;
use super::{ChunkHandle, ChunkKey, Result, Tier, TierError, TierStats};

pub const MAGIC: &[u8; 16] = b"STAGESPACE-TIER1";
const HEADER_LEN: u64 = 32;
const ENTRY_LEN: u64 = 40;
const PAGE: u64 = 4096;

pub(crate) fn table_slots(capacity: u64) -> u64 {
    (capacity / 4096).clamp(1024, 1 << 22)
}

pub(crate) fn data_start(capacity: u64) -> u64 {
    (HEADER_LEN + table_slots(capacity) * ENTRY_LEN).next_multiple_of(PAGE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CellState {
    Empty,
    Written,
    Freed,
}

struct Slot {
    handle: ChunkHandle,
    key: ChunkKey,
    cell: Arc<RwLock<CellState>>,
    persisted: Option<usize>,
}

struct Table {
    arena: Arena,
    next_generation: u64,
    slots: BTreeMap<u64, Slot>,
    /// Generation stored in each persisted table slot.
    persisted: Vec<u64>,
}

struct MapBase(*mut u8);

// SAFETY: the pointer refers to the mapping owned by the same `MmapTier`;
// every access goes through the locking discipline described on `MmapTier`.
unsafe impl Send for MapBase {}
unsafe impl Sync for MapBase {}

/// Tier backed by a memory-mapped file.
///
/// Header and table bytes are only touched with the table mutex held. Chunk
/// bytes are only touched with that chunk's cell lock held (shared for reads,
/// exclusive for writes), and live chunks never overlap, so no two threads
/// ever hold conflicting references to the same bytes.
pub struct MmapTier {
    path: PathBuf,
    map: MmapMut,
    base: MapBase,
    map_len: u64,
    data_start: u64,
    table: Mutex<Table>,
    read_bytes: AtomicU64,
    write_bytes: AtomicU64,
}

impl MmapTier {
    /// Opens `path`, creating and sizing it when missing or empty.
    pub fn open(path: impl AsRef<Path>, capacity_bytes: u64) -> Result<Self> {
        let path = path.as_ref();
        if capacity_bytes == 0 {
            return Err(TierError::Config("capacity_bytes must be > 0".into()));
        }
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        let len = file.metadata()?.len();
        let fresh = len == 0;
        let capacity = if fresh {
            capacity_bytes
        } else {
            let mut header = [0u8; HEADER_LEN as usize];
            if len < HEADER_LEN {
                return Err(TierError::Corrupt(format!("{} is too short", path.display())));
            }
            file.read_exact(&mut header)?;
            if &header[..16] != MAGIC {
                return Err(TierError::Corrupt(format!("{} has no tier header", path.display())));
            }
            let persisted = u64::from_le_bytes(header[16..24].try_into().unwrap());
            if capacity_bytes < persisted {
                return Err(TierError::Config(format!(
                    "capacity {capacity_bytes} is smaller than the persisted arena of {persisted} bytes"
                )));
            }
            persisted
        };
        let map_len = data_start(capacity) + capacity;
        if fresh {
            file.set_len(map_len)?;
        } else if len < map_len {
            return Err(TierError::Corrupt(format!(
                "{} holds {len} bytes, layout needs {map_len}",
                path.display()
            )));
        }
        let mut map = map_file(&file, map_len)?;
        let base = MapBase(map.as_mut_ptr());
        let tier = Self {
            path: path.to_path_buf(),
            map,
            base,
            map_len,
            data_start: data_start(capacity),
            table: Mutex::new(Table {
                arena: Arena::new(capacity),
                next_generation: 1,
                slots: BTreeMap::new(),
                persisted: Vec::new(),
            }),
            read_bytes: AtomicU64::new(0),
            write_bytes: AtomicU64::new(0),
        };
        if fresh {
            let mut header = [0u8; HEADER_LEN as usize];
            header[..16].copy_from_slice(MAGIC);
            header[16..24].copy_from_slice(&capacity.to_le_bytes());
            tier.put_bytes(0, &header);
            tier.map.flush_range(0, HEADER_LEN as usize)?;
        } else {
            tier.load_table(capacity)?;
        }
        Ok(tier)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn load_table(&self, capacity: u64) -> Result<()> {
        let count = self.get_u64(24);
        if count > table_slots(capacity) {
            return Err(TierError::Corrupt(format!("table count {count} exceeds slot count")));
        }
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for s in 0..count {
            let (handle, key) = self.get_entry(s as usize);
            if handle.length == 0 || handle.end() > capacity {
                return Err(TierError::Corrupt(format!("entry {s} is out of range: {handle:?}")));
            }
            // A crash while compacting the table can leave a duplicated entry.
            if seen.insert(handle.generation) {
                entries.push((handle, key));
            }
        }
        let mut by_offset: Vec<ChunkHandle> = entries.iter().map(|(h, _)| *h).collect();
        by_offset.sort_by_key(|h| h.offset);
        if by_offset.windows(2).any(|w| w[0].overlaps(&w[1])) {
            return Err(TierError::Corrupt("persisted chunks overlap".into()));
        }
        let extents: Vec<(u64, u64)> = by_offset.iter().map(|h| (h.offset, h.length)).collect();
        let mut table = self.table.lock().unwrap();
        table.arena = Arena::rebuild(capacity, &extents);
        table.next_generation = entries.iter().map(|(h, _)| h.generation).max().unwrap_or(0) + 1;
        for (i, (handle, key)) in entries.iter().enumerate() {
            table.persisted.push(handle.generation);
            table.slots.insert(
                handle.generation,
                Slot {
                    handle: *handle,
                    key: *key,
                    cell: Arc::new(RwLock::new(CellState::Written)),
                    persisted: Some(i),
                },
            );
        }
        if entries.len() as u64 != count {
            for (i, (handle, key)) in entries.iter().enumerate() {
                self.put_entry(i, handle, key);
            }
            self.put_bytes(24, &(entries.len() as u64).to_le_bytes());
            self.map.flush_range(0, self.data_start as usize)?;
        }
        Ok(())
    }

    fn put_bytes(&self, at: u64, bytes: &[u8]) {
        assert!(at + bytes.len() as u64 <= self.map_len);
        // SAFETY: in bounds (asserted); callers hold the lock guarding this range.
        unsafe {
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), self.base.0.add(at as usize), bytes.len());
        }
    }

    fn get_bytes(&self, at: u64, len: u64) -> &[u8] {
        assert!(at + len <= self.map_len);
        // SAFETY: in bounds (asserted); callers hold the lock guarding this range.
        unsafe { std::slice::from_raw_parts(self.base.0.add(at as usize), len as usize) }
    }

    fn get_u64(&self, at: u64) -> u64 {
        u64::from_le_bytes(self.get_bytes(at, 8).try_into().unwrap())
    }

    fn entry_at(slot: usize) -> u64 {
        HEADER_LEN + slot as u64 * ENTRY_LEN
    }

    fn get_entry(&self, slot: usize) -> (ChunkHandle, ChunkKey) {
        let at = Self::entry_at(slot);
        let handle = ChunkHandle {
            offset: self.get_u64(at),
            length: self.get_u64(at + 8),
            generation: self.get_u64(at + 16),
        };
        let key = ChunkKey(self.get_bytes(at + 24, 16).try_into().unwrap());
        (handle, key)
    }

    fn put_entry(&self, slot: usize, handle: &ChunkHandle, key: &ChunkKey) {
        let mut buf = [0u8; ENTRY_LEN as usize];
        buf[0..8].copy_from_slice(&handle.offset.to_le_bytes());
        buf[8..16].copy_from_slice(&handle.length.to_le_bytes());
        buf[16..24].copy_from_slice(&handle.generation.to_le_bytes());
        buf[24..40].copy_from_slice(&key.0);
        self.put_bytes(Self::entry_at(slot), &buf);
    }

    fn flush_table(&self, slot: usize) -> Result<()> {
        self.map.flush_range(Self::entry_at(slot) as usize, ENTRY_LEN as usize)?;
        self.map.flush_range(0, HEADER_LEN as usize)?;
        Ok(())
    }

    fn cell(&self, handle: &ChunkHandle) -> Result<Arc<RwLock<CellState>>> {
        let table = self.table.lock().unwrap();
        match table.slots.get(&handle.generation) {
            Some(slot) if slot.handle == *handle => Ok(slot.cell.clone()),
            _ => Err(TierError::Lifecycle(format!("stale chunk handle {handle:?}"))),
        }
    }
}

fn map_file(file: &File, len: u64) -> Result<MmapMut> {
    // SAFETY: the file is opened read-write by this process; concurrent
    // modification by other processes is outside the tier's contract.
    let map = unsafe { MmapOptions::new().len(len as usize).map_mut(file)? };
    Ok(map)
}

impl Tier for MmapTier {
    fn name(&self) -> &'static str {
        "mmap"
    }

    fn allocate_keyed(&self, length: u64, key: ChunkKey) -> Result<ChunkHandle> {
        let mut table = self.table.lock().unwrap();
        if table.slots.len() as u64 >= table_slots(table.arena.capacity()) {
            return Err(TierError::Capacity {
                requested: length,
                used: table.arena.used(),
                capacity: table.arena.capacity(),
            });
        }
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
                cell: Arc::new(RwLock::new(CellState::Empty)),
                persisted: None,
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
        let mut state = cell.write().unwrap();
        if *state == CellState::Freed {
            return Err(TierError::Lifecycle(format!("chunk {handle:?} was freed")));
        }
        self.put_bytes(self.data_start + handle.offset, bytes);
        *state = CellState::Written;
        self.write_bytes.fetch_add(handle.length, Ordering::Relaxed);
        Ok(())
    }

    fn flush_chunk(&self, handle: &ChunkHandle) -> Result<()> {
        let cell = self.cell(handle)?;
        {
            let state = cell.read().unwrap();
            if *state != CellState::Written {
                return Err(TierError::Lifecycle(format!("chunk {handle:?} has not been written")));
            }
            self.map
                .flush_range((self.data_start + handle.offset) as usize, handle.length as usize)?;
        }
        let mut table = self.table.lock().unwrap();
        let table = &mut *table;
        let Some(slot) = table.slots.get_mut(&handle.generation) else {
            return Err(TierError::Lifecycle(format!("chunk {handle:?} was freed")));
        };
        if slot.persisted.is_none() {
            let s = table.persisted.len();
            self.put_entry(s, &slot.handle, &slot.key);
            self.put_bytes(24, &((s + 1) as u64).to_le_bytes());
            table.persisted.push(handle.generation);
            slot.persisted = Some(s);
            self.flush_table(s)?;
        }
        Ok(())
    }

    fn visit_chunk(&self, handle: &ChunkHandle, f: &mut dyn FnMut(&[u8])) -> Result<()> {
        let cell = self.cell(handle)?;
        let state = cell.read().unwrap();
        if *state != CellState::Written {
            return Err(TierError::Lifecycle(format!("chunk {handle:?} has not been written")));
        }
        f(self.get_bytes(self.data_start + handle.offset, handle.length));
        self.read_bytes.fetch_add(handle.length, Ordering::Relaxed);
        Ok(())
    }

    fn free_chunk(&self, handle: &ChunkHandle) -> Result<()> {
        let slot = {
            let mut table = self.table.lock().unwrap();
            match table.slots.get(&handle.generation) {
                Some(slot) if slot.handle == *handle => {}
                _ => return Err(TierError::Lifecycle(format!("stale chunk handle {handle:?}"))),
            }
            let slot = table.slots.remove(&handle.generation).unwrap();
            if let Some(s) = slot.persisted {
                let last = table.persisted.len() - 1;
                if s != last {
                    let moved = table.persisted[last];
                    let m = table.slots.get_mut(&moved).expect("persisted slot is live");
                    m.persisted = Some(s);
                    self.put_entry(s, &m.handle, &m.key);
                    table.persisted[s] = moved;
                }
                table.persisted.pop();
                self.put_bytes(24, &(table.persisted.len() as u64).to_le_bytes());
                self.flush_table(s)?;
            }
            slot
        };
        // Drain in-flight readers and writers before the range can be reused.
        *slot.cell.write().unwrap() = CellState::Freed;
        self.table
            .lock()
            .unwrap()
            .arena
            .release(handle.offset, handle.length);
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
        true
    }
}
