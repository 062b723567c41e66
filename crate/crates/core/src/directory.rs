//! Metadata layer: which server owns which distribution block, and which
//! stored chunks exist for each `(variable, version)`.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::geometry::{self, GeometryError, NDBox};
use crate::tier::ChunkHandle;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DirectoryError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("block coordinates {coords:?} lie outside the {blocks:?} block grid")]
    BlockOutOfRange { coords: Vec<u64>, blocks: Vec<u64> },
    #[error("box {0} is not inside the global domain {1}")]
    OutsideDomain(NDBox, NDBox),
    #[error("invalid distribution grid: {0}")]
    InvalidGrid(String),
}

pub type Result<T> = std::result::Result<T, DirectoryError>;

/// Spatial sharding of the global domain into equal distribution blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistGrid {
    global: NDBox,
    block_extent: Vec<u64>,
    server_count: u32,
}

impl DistGrid {
    pub fn new(global: NDBox, block_extent: Vec<u64>, server_count: u32) -> Result<Self> {
        if server_count == 0 {
            return Err(DirectoryError::InvalidGrid("server_count must be >= 1".into()));
        }
        if block_extent.len() != global.ndims() {
            return Err(GeometryError::DimMismatch(global.ndims(), block_extent.len()).into());
        }
        for (d, &b) in block_extent.iter().enumerate() {
            if b == 0 || global.extent(d) % b != 0 {
                return Err(DirectoryError::InvalidGrid(format!(
                    "block extent {b} does not divide extent {} of dimension {d}",
                    global.extent(d)
                )));
            }
        }
        Ok(Self {
            global,
            block_extent,
            server_count,
        })
    }

    /// Grid with the default block size: per dimension, the largest divisor
    /// of the extent not exceeding `extent / (4 * server_count)`.
    pub fn with_default_blocks(global: NDBox, server_count: u32) -> Result<Self> {
        let block = default_block_extent(&global, server_count);
        Self::new(global, block, server_count)
    }

    pub fn global(&self) -> &NDBox {
        &self.global
    }

    pub fn block_extent(&self) -> &[u64] {
        &self.block_extent
    }

    pub fn server_count(&self) -> u32 {
        self.server_count
    }

    pub fn blocks_per_dim(&self) -> Vec<u64> {
        (0..self.global.ndims())
            .map(|d| self.global.extent(d) / self.block_extent[d])
            .collect()
    }

    pub fn block_count(&self) -> u64 {
        self.blocks_per_dim().iter().product()
    }

    fn check_coords(&self, coords: &[u64]) -> Result<()> {
        let blocks = self.blocks_per_dim();
        if coords.len() != blocks.len() || coords.iter().zip(&blocks).any(|(c, b)| c >= b) {
            return Err(DirectoryError::BlockOutOfRange {
                coords: coords.to_vec(),
                blocks,
            });
        }
        Ok(())
    }

    pub fn block_box(&self, coords: &[u64]) -> Result<NDBox> {
        self.check_coords(coords)?;
        let lower: Vec<u64> = (0..coords.len())
            .map(|d| self.global.lower()[d] + coords[d] * self.block_extent[d])
            .collect();
        let upper: Vec<u64> = lower.iter().zip(&self.block_extent).map(|(l, e)| l + e).collect();
        Ok(NDBox::new(&lower, &upper)?)
    }

    /// Server owning block `coords` of `var`. Independent of version.
    pub fn shard_owner(&self, var: &str, coords: &[u64]) -> Result<u32> {
        self.check_coords(coords)?;
        Ok((block_hash(var, coords) % self.server_count as u64) as u32)
    }

    /// Coordinates of every block intersecting `b`, row-major.
    pub fn blocks_of(&self, b: &NDBox) -> Result<Vec<Vec<u64>>> {
        if !self.global.contains_box(b) {
            return Err(DirectoryError::OutsideDomain(*b, self.global));
        }
        let n = b.ndims();
        let lo: Vec<u64> = (0..n)
            .map(|d| (b.lower()[d] - self.global.lower()[d]) / self.block_extent[d])
            .collect();
        let hi: Vec<u64> = (0..n)
            .map(|d| (b.upper()[d] - self.global.lower()[d]).div_ceil(self.block_extent[d]))
            .collect();
        let range = NDBox::new(&lo, &hi)?;
        let mut out = Vec::with_capacity(range.volume() as usize);
        range.for_each_point(|p| out.push(p.to_vec()));
        Ok(out)
    }

    /// `b` split along block boundaries into `(owner, sub-box)` pieces, with
    /// adjacent same-owner pieces merged wherever their union is a box.
    pub fn split_by_owner(&self, var: &str, b: &NDBox) -> Result<Vec<(u32, NDBox)>> {
        let mut pieces = Vec::new();
        for coords in self.blocks_of(b)? {
            let owner = self.shard_owner(var, &coords)?;
            let sub = self
                .block_box(&coords)?
                .intersect(b)?
                .expect("blocks_of only returns intersecting blocks");
            pieces.push((owner, sub));
        }
        // Merge runs along the last dimension first, then outward.
        for d in (0..b.ndims()).rev() {
            pieces.sort_by(|(oa, a), (ob, bx)| {
                oa.cmp(ob)
                    .then_with(|| key_except(a, d).cmp(&key_except(bx, d)))
                    .then_with(|| a.lower()[d].cmp(&bx.lower()[d]))
            });
            let mut merged: Vec<(u32, NDBox)> = Vec::with_capacity(pieces.len());
            for (owner, sub) in pieces {
                if let Some((last_owner, last)) = merged.last_mut() {
                    if *last_owner == owner && last.upper()[d] == sub.lower()[d] {
                        if let Some(m) = last.merge(&sub) {
                            *last = m;
                            continue;
                        }
                    }
                }
                merged.push((owner, sub));
            }
            pieces = merged;
        }
        pieces.sort_by(|(oa, a), (ob, bx)| oa.cmp(ob).then_with(|| a.cmp(bx)));
        Ok(pieces)
    }
}

fn key_except(b: &NDBox, d: usize) -> Vec<(u64, u64)> {
    (0..b.ndims())
        .filter(|&i| i != d)
        .map(|i| (b.lower()[i], b.upper()[i]))
        .collect()
}

pub fn default_block_extent(global: &NDBox, server_count: u32) -> Vec<u64> {
    let split = 4 * server_count.max(1) as u64;
    (0..global.ndims())
        .map(|d| {
            let extent = global.extent(d);
            let target = (extent / split).max(1);
            (1..=target).rev().find(|b| extent % b == 0).unwrap_or(1)
        })
        .collect()
}

/// FNV-1a over the variable name and block coordinates, followed by a
/// 64-bit avalanche so that the low bits used by `mod` are well mixed.
pub fn block_hash(var: &str, coords: &[u64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    };
    var.bytes().for_each(&mut eat);
    eat(0xff);
    for c in coords {
        c.to_le_bytes().into_iter().for_each(&mut eat);
    }
    mix64(h)
}

/// splitmix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Metadata for one stored chunk.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObjectDescriptor {
    pub var: String,
    pub version: u32,
    pub bbox: NDBox,
    pub element_size: u32,
    pub owner: u32,
    /// Meaningful only on the owning server.
    pub handle: ChunkHandle,
}

impl ObjectDescriptor {
    pub fn payload_len(&self) -> u64 {
        self.bbox.volume() * self.element_size as u64
    }

    fn same_key(&self, other: &ObjectDescriptor) -> bool {
        self.var == other.var && self.version == other.version && self.bbox == other.bbox
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RegisterOutcome {
    /// Prior descriptor with the same `(var, version, box)`, if any.
    pub replaced: Option<ObjectDescriptor>,
    /// Descriptors dropped because the variable exceeded `max_versions`.
    pub evicted: Vec<ObjectDescriptor>,
}

pub const DEFAULT_MAX_VERSIONS: usize = 10;

/// Registry of descriptors per variable and version, in register order.
///
/// When a variable holds more than `max_versions` distinct versions, the
/// oldest (lowest-numbered) version is evicted as a whole.
#[derive(Debug, Clone)]
pub struct Directory {
    vars: HashMap<String, BTreeMap<u32, Vec<ObjectDescriptor>>>,
    max_versions: usize,
    count: usize,
}

impl Default for Directory {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_VERSIONS)
    }
}

impl Directory {
    pub fn new(max_versions: usize) -> Self {
        Self {
            vars: HashMap::new(),
            max_versions: max_versions.max(1),
            count: 0,
        }
    }

    pub fn max_versions(&self) -> usize {
        self.max_versions
    }

    pub fn register(&mut self, desc: ObjectDescriptor) -> RegisterOutcome {
        let mut outcome = RegisterOutcome::default();
        let versions = self.vars.entry(desc.var.clone()).or_default();
        let list = versions.entry(desc.version).or_default();
        if let Some(i) = list.iter().position(|d| d.same_key(&desc)) {
            outcome.replaced = Some(list.remove(i));
            self.count -= 1;
        }
        list.push(desc);
        self.count += 1;
        while versions.len() > self.max_versions {
            let (_, dropped) = versions.pop_first().expect("non-empty");
            self.count -= dropped.len();
            outcome.evicted.extend(dropped);
        }
        outcome
    }

    /// Descriptors of `(var, version)` intersecting `b`, in register order.
    pub fn query(&self, var: &str, version: u32, b: &NDBox) -> Vec<ObjectDescriptor> {
        self.query_iter(var, version, b).cloned().collect()
    }

    fn query_iter<'a>(
        &'a self,
        var: &str,
        version: u32,
        b: &'a NDBox,
    ) -> impl Iterator<Item = &'a ObjectDescriptor> + 'a {
        self.vars
            .get(var)
            .and_then(|v| v.get(&version))
            .into_iter()
            .flatten()
            .filter(move |d| d.bbox.intersects(b))
    }

    /// Like [`query`](Self::query), restricted to descriptors owned by `owner`.
    pub fn query_owned(&self, var: &str, version: u32, b: &NDBox, owner: u32) -> Vec<ObjectDescriptor> {
        self.query_iter(var, version, b)
            .filter(|d| d.owner == owner)
            .cloned()
            .collect()
    }

    pub fn is_covered(&self, var: &str, version: u32, b: &NDBox) -> bool {
        let boxes: Vec<NDBox> = self.query_iter(var, version, b).map(|d| d.bbox).collect();
        geometry::covers(b, &boxes).unwrap_or(false)
    }

    pub fn is_covered_owned(&self, var: &str, version: u32, b: &NDBox, owner: u32) -> bool {
        let boxes: Vec<NDBox> = self
            .query_iter(var, version, b)
            .filter(|d| d.owner == owner)
            .map(|d| d.bbox)
            .collect();
        geometry::covers(b, &boxes).unwrap_or(false)
    }

    /// Element size fixed by the first registration of `(var, version)`.
    pub fn element_size_of(&self, var: &str, version: u32) -> Option<u32> {
        self.vars
            .get(var)?
            .get(&version)?
            .first()
            .map(|d| d.element_size)
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Every descriptor, in a canonical order suitable for diffing directories.
    pub fn snapshot(&self) -> Vec<ObjectDescriptor> {
        let mut all: Vec<ObjectDescriptor> = self
            .vars
            .values()
            .flat_map(|v| v.values().flatten().cloned())
            .collect();
        all.sort_by(|a, b| {
            (&a.var, a.version, a.bbox, a.owner, a.handle.generation)
                .cmp(&(&b.var, b.version, b.bbox, b.owner, b.handle.generation))
        });
        all
    }
}
