//! Offset allocator shared by the heap and mmap tiers.
//!
//! Bump allocation plus a first-fit list of released extents. Released
//! extents are split on reuse but never coalesced, except that an extent
//! ending at the bump pointer gives its space back to the bump region.

use super::{Result, TierError};

#[derive(Debug, Clone)]
pub(crate) struct Arena {
    capacity: u64,
    bump: u64,
    free: Vec<(u64, u64)>,
    used: u64,
}

impl Arena {
    pub fn new(capacity: u64) -> Self {
        Self {
            capacity,
            bump: 0,
            free: Vec::new(),
            used: 0,
        }
    }

    /// Rebuilds allocator state from the extents of live chunks.
    pub fn rebuild(capacity: u64, live: &[(u64, u64)]) -> Self {
        let mut sorted = live.to_vec();
        sorted.sort_unstable();
        let mut arena = Self::new(capacity);
        let mut cursor = 0;
        for &(off, len) in &sorted {
            if off > cursor {
                arena.free.push((cursor, off - cursor));
            }
            cursor = cursor.max(off + len);
            arena.used += len;
        }
        arena.bump = cursor;
        arena
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn reserve(&mut self, len: u64) -> Result<u64> {
        let exhausted = || TierError::Capacity {
            requested: len,
            used: self.used,
            capacity: self.capacity,
        };
        if len == 0 {
            return Err(TierError::Usage("chunk length must be > 0".into()));
        }
        if self.used.checked_add(len).is_none_or(|u| u > self.capacity) {
            return Err(exhausted());
        }
        if let Some(i) = self.free.iter().position(|&(_, l)| l >= len) {
            let (off, l) = self.free[i];
            if l == len {
                self.free.swap_remove(i);
            } else {
                self.free[i] = (off + len, l - len);
            }
            self.used += len;
            return Ok(off);
        }
        if self.bump + len > self.capacity {
            return Err(exhausted());
        }
        let off = self.bump;
        self.bump += len;
        self.used += len;
        Ok(off)
    }

    pub fn release(&mut self, off: u64, len: u64) {
        self.used -= len;
        if off + len == self.bump {
            self.bump = off;
            // Pull the bump pointer back over any free extents now at the tail.
            while let Some(i) = self.free.iter().position(|&(o, l)| o + l == self.bump) {
                self.bump = self.free.swap_remove(i).0;
            }
        } else {
            self.free.push((off, len));
        }
    }
}
