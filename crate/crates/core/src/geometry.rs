//! Axis-aligned integer boxes over a row-major element grid.
//!
//! Boxes are half-open: `lower[d]` is inclusive, `upper[d]` exclusive. At most
//! [`MAX_DIMS`] dimensions are supported. Buffers are laid out row-major with
//! the last dimension contiguous, and that convention is shared by the wire
//! format, the tiers and the client assembly code.

use std::fmt;

use thiserror::Error;

pub const MAX_DIMS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("dimension count {0} is outside 1..={MAX_DIMS}")]
    UnsupportedDims(usize),
    #[error("empty or inverted box in dimension {dim}: [{lower}, {upper})")]
    EmptyBox { dim: usize, lower: u64, upper: u64 },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("extent {extent} of dimension {dim} is not divisible by {parts} parts")]
    NotDivisible { dim: usize, extent: u64, parts: u64 },
    #[error("region {region} is not contained in {container}")]
    NotContained { region: NDBox, container: NDBox },
    #[error("element size mismatch: {0} vs {1}")]
    ElementSize(usize, usize),
    #[error("buffer holds {actual} bytes, box needs {expected}")]
    BufferLength { expected: usize, actual: usize },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Half-open N-dimensional integer box, `1 <= ndims <= 3`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NDBox {
    ndims: u8,
    lower: [u64; MAX_DIMS],
    upper: [u64; MAX_DIMS],
}

impl NDBox {
    pub fn new(lower: &[u64], upper: &[u64]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(GeometryError::DimMismatch(lower.len(), upper.len()));
        }
        let n = lower.len();
        if n == 0 || n > MAX_DIMS {
            return Err(GeometryError::UnsupportedDims(n));
        }
        let mut b = NDBox {
            ndims: n as u8,
            lower: [0; MAX_DIMS],
            upper: [0; MAX_DIMS],
        };
        for d in 0..n {
            if lower[d] >= upper[d] {
                return Err(GeometryError::EmptyBox {
                    dim: d,
                    lower: lower[d],
                    upper: upper[d],
                });
            }
            b.lower[d] = lower[d];
            b.upper[d] = upper[d];
        }
        Ok(b)
    }

    /// Box anchored at the origin with the given extents.
    pub fn from_extents(extents: &[u64]) -> Result<Self> {
        let zeros = vec![0; extents.len()];
        Self::new(&zeros, extents)
    }

    #[inline]
    pub fn ndims(&self) -> usize {
        self.ndims as usize
    }

    #[inline]
    pub fn lower(&self) -> &[u64] {
        &self.lower[..self.ndims()]
    }

    #[inline]
    pub fn upper(&self) -> &[u64] {
        &self.upper[..self.ndims()]
    }

    #[inline]
    pub fn extent(&self, d: usize) -> u64 {
        self.upper[d] - self.lower[d]
    }

    pub fn extents(&self) -> Vec<u64> {
        (0..self.ndims()).map(|d| self.extent(d)).collect()
    }

    /// Number of grid elements in the box.
    pub fn volume(&self) -> u64 {
        (0..self.ndims()).map(|d| self.extent(d)).product()
    }

    fn check_dims(&self, other: &NDBox) -> Result<()> {
        if self.ndims != other.ndims {
            return Err(GeometryError::DimMismatch(self.ndims(), other.ndims()));
        }
        Ok(())
    }

    /// Maximal box contained in both, or `None` when the interiors are disjoint.
    pub fn intersect(&self, other: &NDBox) -> Result<Option<NDBox>> {
        self.check_dims(other)?;
        let mut out = *self;
        for d in 0..self.ndims() {
            out.lower[d] = self.lower[d].max(other.lower[d]);
            out.upper[d] = self.upper[d].min(other.upper[d]);
            if out.lower[d] >= out.upper[d] {
                return Ok(None);
            }
        }
        Ok(Some(out))
    }

    pub fn intersects(&self, other: &NDBox) -> bool {
        matches!(self.intersect(other), Ok(Some(_)))
    }

    /// True if `other` lies entirely inside `self`.
    pub fn contains_box(&self, other: &NDBox) -> bool {
        self.ndims == other.ndims
            && (0..self.ndims())
                .all(|d| self.lower[d] <= other.lower[d] && other.upper[d] <= self.upper[d])
    }

    pub fn contains_point(&self, p: &[u64]) -> bool {
        p.len() == self.ndims() && (0..self.ndims()).all(|d| self.lower[d] <= p[d] && p[d] < self.upper[d])
    }

    /// Row-major offset (in elements) of the global point `p` within this box.
    #[inline]
    pub fn linear_index(&self, p: &[u64]) -> u64 {
        let mut idx = 0;
        for d in 0..self.ndims() {
            idx = idx * self.extent(d) + (p[d] - self.lower[d]);
        }
        idx
    }

    /// `self` minus `cut`, as at most `2 * ndims` disjoint boxes.
    pub fn subtract(&self, cut: &NDBox) -> Result<Vec<NDBox>> {
        let Some(inter) = self.intersect(cut)? else {
            return Ok(vec![*self]);
        };
        let mut out = Vec::new();
        let mut rest = *self;
        for d in 0..self.ndims() {
            if rest.lower[d] < inter.lower[d] {
                let mut slab = rest;
                slab.upper[d] = inter.lower[d];
                out.push(slab);
                rest.lower[d] = inter.lower[d];
            }
            if inter.upper[d] < rest.upper[d] {
                let mut slab = rest;
                slab.lower[d] = inter.upper[d];
                out.push(slab);
                rest.upper[d] = inter.upper[d];
            }
        }
        Ok(out)
    }

    /// If `self` and `other` together form exactly one box, return it.
    pub fn merge(&self, other: &NDBox) -> Option<NDBox> {
        if self.ndims != other.ndims {
            return None;
        }
        let n = self.ndims();
        let differing: Vec<usize> = (0..n)
            .filter(|&d| self.lower[d] != other.lower[d] || self.upper[d] != other.upper[d])
            .collect();
        match differing.as_slice() {
            [] => Some(*self),
            &[d] => {
                let mut m = *self;
                if self.upper[d] == other.lower[d] {
                    m.upper[d] = other.upper[d];
                    Some(m)
                } else if other.upper[d] == self.lower[d] {
                    m.lower[d] = other.lower[d];
                    Some(m)
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    /// Calls `f` with every point of the box in row-major order.
    pub fn for_each_point(&self, mut f: impl FnMut(&[u64])) {
        let n = self.ndims();
        let mut p = self.lower;
        loop {
            f(&p[..n]);
            let mut d = n;
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                p[d] += 1;
                if p[d] < self.upper[d] {
                    break;
                }
                p[d] = self.lower[d];
            }
        }
    }
}

impl fmt::Display for NDBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in 0..self.ndims() {
            if d > 0 {
                f.write_str("x")?;
            }
            write!(f, "[{},{})", self.lower[d], self.upper[d])?;
        }
        Ok(())
    }
}

impl fmt::Debug for NDBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

pub fn intersect(a: &NDBox, b: &NDBox) -> Result<Option<NDBox>> {
    a.intersect(b)
}

pub fn volume(b: &NDBox) -> u64 {
    b.volume()
}

/// True iff every element of `target` lies in at least one of `pieces`.
/// Pieces may overlap and may extend beyond `target`.
pub fn covers(target: &NDBox, pieces: &[NDBox]) -> Result<bool> {
    let mut remaining = vec![*target];
    for piece in pieces {
        target.check_dims(piece)?;
        let mut next = Vec::with_capacity(remaining.len());
        for r in &remaining {
            next.extend(r.subtract(piece)?);
        }
        remaining = next;
        if remaining.is_empty() {
            return Ok(true);
        }
    }
    Ok(remaining.is_empty())
}

/// Splits `global` into `product(parts_per_dim)` equal boxes, row-major over
/// part coordinates. Every extent must be divisible by its part count.
pub fn decompose_grid(global: &NDBox, parts_per_dim: &[u64]) -> Result<Vec<NDBox>> {
    let n = global.ndims();
    if parts_per_dim.len() != n {
        return Err(GeometryError::DimMismatch(n, parts_per_dim.len()));
    }
    let mut step = [0u64; MAX_DIMS];
    for d in 0..n {
        let parts = parts_per_dim[d];
        let extent = global.extent(d);
        if parts == 0 || extent % parts != 0 {
            return Err(GeometryError::NotDivisible { dim: d, extent, parts });
        }
        step[d] = extent / parts;
    }
    let part_grid = NDBox::from_extents(parts_per_dim)?;
    let mut out = Vec::with_capacity(part_grid.volume() as usize);
    part_grid.for_each_point(|pc| {
        let mut b = *global;
        for d in 0..n {
            b.lower[d] = global.lower[d] + pc[d] * step[d];
            b.upper[d] = b.lower[d] + step[d];
        }
        out.push(b);
    });
    Ok(out)
}

/// A row-major payload covering `bbox`.
#[derive(Clone, PartialEq, Eq)]
pub struct RegionBuffer {
    bbox: NDBox,
    element_size: usize,
    bytes: Vec<u8>,
}

impl RegionBuffer {
    pub fn new(bbox: NDBox, element_size: usize, bytes: Vec<u8>) -> Result<Self> {
        let expected = bbox.volume() as usize * element_size;
        if bytes.len() != expected {
            return Err(GeometryError::BufferLength {
                expected,
                actual: bytes.len(),
            });
        }
        Ok(Self {
            bbox,
            element_size,
            bytes,
        })
    }

    pub fn zeroed(bbox: NDBox, element_size: usize) -> Self {
        Self::filled(bbox, element_size, 0)
    }

    pub fn filled(bbox: NDBox, element_size: usize, byte: u8) -> Self {
        let len = bbox.volume() as usize * element_size;
        Self {
            bbox,
            element_size,
            bytes: vec![byte; len],
        }
    }

    pub fn bbox(&self) -> &NDBox {
        &self.bbox
    }

    pub fn element_size(&self) -> usize {
        self.element_size
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    /// Bytes of the element at global point `p`.
    pub fn element(&self, p: &[u64]) -> &[u8] {
        let off = self.bbox.linear_index(p) as usize * self.element_size;
        &self.bytes[off..off + self.element_size]
    }
}

impl fmt::Debug for RegionBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegionBuffer")
            .field("bbox", &self.bbox)
            .field("element_size", &self.element_size)
            .field("len", &self.bytes.len())
            .finish()
    }
}

/// Copies `region` from `src` into `dst`, returning the element count.
pub fn copy_region(src: &RegionBuffer, dst: &mut RegionBuffer, region: &NDBox) -> Result<u64> {
    if src.element_size != dst.element_size {
        return Err(GeometryError::ElementSize(src.element_size, dst.element_size));
    }
    copy_region_raw(
        &src.bbox,
        &src.bytes,
        &dst.bbox,
        &mut dst.bytes,
        src.element_size,
        region,
    )
}

/// Slice-level form of [`copy_region`]; `src` and `dst` are row-major over
/// their boxes with `element_size`-byte elements.
pub fn copy_region_raw(
    src_box: &NDBox,
    src: &[u8],
    dst_box: &NDBox,
    dst: &mut [u8],
    element_size: usize,
    region: &NDBox,
) -> Result<u64> {
    for (container, len) in [(src_box, src.len()), (dst_box, dst.len())] {
        let expected = container.volume() as usize * element_size;
        if len != expected {
            return Err(GeometryError::BufferLength { expected, actual: len });
        }
        if !container.contains_box(region) {
            return Err(GeometryError::NotContained {
                region: *region,
                container: *container,
            });
        }
    }
    let n = region.ndims();
    let last = n - 1;
    let run = region.extent(last) as usize * element_size;
    if n == 1 {
        let s = src_box.linear_index(region.lower()) as usize * element_size;
        let d = dst_box.linear_index(region.lower()) as usize * element_size;
        dst[d..d + run].copy_from_slice(&src[s..s + run]);
        return Ok(region.volume());
    }
    // Walk the rows (every dimension but the last) and copy each contiguous run.
    let mut rows = *region;
    rows.upper[last] = rows.lower[last] + 1;
    rows.for_each_point(|p| {
        let s = src_box.linear_index(p) as usize * element_size;
        let d = dst_box.linear_index(p) as usize * element_size;
        dst[d..d + run].copy_from_slice(&src[s..s + run]);
    });
    Ok(region.volume())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn b2(l0: u64, u0: u64, l1: u64, u1: u64) -> NDBox {
        NDBox::new(&[l0, l1], &[u0, u1]).unwrap()
    }

    fn voxels(b: &NDBox) -> HashSet<Vec<u64>> {
        let mut s = HashSet::new();
        b.for_each_point(|p| {
            s.insert(p.to_vec());
        });
        s
    }

    fn arb_box(ndims: usize) -> impl Strategy<Value = NDBox> {
        proptest::collection::vec((0u64..8, 1u64..=8), ndims).prop_map(|v| {
            let lower: Vec<u64> = v.iter().map(|(l, _)| *l).collect();
            let upper: Vec<u64> = v.iter().map(|(l, e)| l + e).collect();
            NDBox::new(&lower, &upper).unwrap()
        })
    }

    #[test]
    fn rejects_empty_and_oversized() {
        assert!(matches!(NDBox::new(&[1], &[1]), Err(GeometryError::EmptyBox { .. })));
        assert!(matches!(NDBox::new(&[3], &[1]), Err(GeometryError::EmptyBox { .. })));
        assert!(matches!(
            NDBox::new(&[0; 4], &[1; 4]),
            Err(GeometryError::UnsupportedDims(4))
        ));
        assert!(matches!(NDBox::new(&[], &[]), Err(GeometryError::UnsupportedDims(0))));
    }

    #[test]
    fn intersect_examples() {
        let a = b2(0, 4, 0, 4);
        assert_eq!(a.intersect(&a).unwrap(), Some(a));
        assert_eq!(a.intersect(&b2(4, 8, 0, 4)).unwrap(), None);
        let one = NDBox::new(&[0], &[4]).unwrap();
        assert_eq!(a.intersect(&one), Err(GeometryError::DimMismatch(2, 1)));
    }

    #[test]
    fn volume_examples() {
        assert_eq!(b2(0, 1, 0, 1).volume(), 1);
        assert_eq!(NDBox::from_extents(&[64, 64, 64]).unwrap().volume(), 262144);
    }

    #[test]
    fn covers_examples() {
        let b = b2(0, 4, 0, 4);
        assert!(covers(&b, &[b]).unwrap());
        assert!(!covers(&b, &[b2(0, 2, 0, 4), b2(2, 4, 0, 2)]).unwrap());
        assert!(covers(&b, &[b2(0, 2, 0, 4), b2(2, 4, 0, 2), b2(1, 4, 1, 4)]).unwrap());
        assert!(!covers(&b, &[]).unwrap());
    }

    #[test]
    fn decompose_examples() {
        let parts = decompose_grid(&b2(0, 8, 0, 8), &[2, 2]).unwrap();
        assert_eq!(parts, vec![b2(0, 4, 0, 4), b2(0, 4, 4, 8), b2(4, 8, 0, 4), b2(4, 8, 4, 8)]);
        assert!(matches!(
            decompose_grid(&b2(0, 7, 0, 8), &[2, 2]),
            Err(GeometryError::NotDivisible { dim: 0, .. })
        ));
        // 4 GiB of 8-byte elements across 64 writers: 8 Mi elements (64 MiB) each.
        let global = NDBox::from_extents(&[4096, 131072]).unwrap();
        assert_eq!(global.volume() * 8, 4 << 30);
        let parts = decompose_grid(&global, &[64, 1]).unwrap();
        assert_eq!(parts.len(), 64);
        assert!(parts.iter().all(|p| p.volume() == 8 << 20 && p.volume() * 8 == 64 << 20));
    }

    #[test]
    fn copy_region_counts() {
        let bb = b2(0, 4, 0, 4);
        let src = RegionBuffer::new(bb, 1, (1..=16).collect()).unwrap();
        let mut dst = RegionBuffer::zeroed(bb, 1);
        assert_eq!(copy_region(&src, &mut dst, &bb).unwrap(), 16);
        assert_eq!(dst, src);

        let mut dst = RegionBuffer::zeroed(bb, 1);
        assert_eq!(copy_region(&src, &mut dst, &b2(1, 3, 1, 3)).unwrap(), 4);
        assert_eq!(dst.bytes().iter().filter(|&&x| x == 0).count(), 12);
        assert_eq!(dst.element(&[1, 1]), &[6]);
        assert_eq!(dst.element(&[2, 2]), &[11]);

        let err = copy_region(&src, &mut dst, &b2(3, 5, 0, 1)).unwrap_err();
        assert!(matches!(err, GeometryError::NotContained { .. }));
        let mut wrong = RegionBuffer::zeroed(bb, 2);
        assert!(matches!(
            copy_region(&src, &mut wrong, &bb),
            Err(GeometryError::ElementSize(1, 2))
        ));
    }

    #[test]
    fn merge_only_exact_unions() {
        assert_eq!(b2(0, 2, 0, 4).merge(&b2(2, 4, 0, 4)), Some(b2(0, 4, 0, 4)));
        assert_eq!(b2(0, 2, 0, 4).merge(&b2(3, 4, 0, 4)), None);
        assert_eq!(b2(0, 2, 0, 4).merge(&b2(2, 4, 0, 3)), None);
    }

    proptest! {
        #[test]
        fn intersect_matches_voxels(a in arb_box(3), b in arb_box(3)) {
            let expected: HashSet<_> = voxels(&a).intersection(&voxels(&b)).cloned().collect();
            let got = a.intersect(&b).unwrap().map(|x| voxels(&x)).unwrap_or_default();
            prop_assert_eq!(got, expected);
            prop_assert_eq!(a.intersect(&b).unwrap(), b.intersect(&a).unwrap());
            if let Some(i) = a.intersect(&b).unwrap() {
                prop_assert_eq!(i.intersect(&i).unwrap(), Some(i));
                prop_assert!(a.contains_box(&i) && b.contains_box(&i));
                prop_assert!(i.volume() <= a.volume().min(b.volume()));
            }
        }

        #[test]
        fn subtract_partitions(a in arb_box(2), b in arb_box(2)) {
            let parts = a.subtract(&b).unwrap();
            let mut seen = HashSet::new();
            for p in &parts {
                for v in voxels(p) {
                    prop_assert!(seen.insert(v));
                }
            }
            let expected: HashSet<_> = voxels(&a).difference(&voxels(&b)).cloned().collect();
            prop_assert_eq!(seen, expected);
        }

        #[test]
        fn copy_back_restores(a in arb_box(2), b in arb_box(2), seed in any::<u8>()) {
            if let Some(region) = a.intersect(&b).unwrap() {
                let src = RegionBuffer::new(a, 2, (0..a.volume() * 2).map(|i| (i as u8).wrapping_add(seed)).collect()).unwrap();
                let orig = RegionBuffer::new(b, 2, (0..b.volume() * 2).map(|i| (i as u8).wrapping_mul(3)).collect()).unwrap();
                let mut dst = orig.clone();
                copy_region(&src, &mut dst, &region).unwrap();
                let mut back = src.clone();
                copy_region(&dst, &mut back, &region).unwrap();
                prop_assert_eq!(&back, &src);
                copy_region(&orig, &mut dst, &region).unwrap();
                prop_assert_eq!(dst, orig);
            }
        }
    }
}
