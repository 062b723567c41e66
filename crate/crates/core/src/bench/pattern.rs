//! Position-dependent reference data.
//!
//! Element `g` (row-major linear index in the global domain) of `(var,
//! version)` is derived from a 64-bit mix of the variable hash, the version
//! and `g`, so any misplaced, stale or foreign element is detected on read.

use crate::directory::mix64;
use crate::geometry::{NDBox, RegionBuffer};

pub fn var_hash(var: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in var.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}

/// 64-bit word `word` of the element at global linear index `index`.
#[inline]
pub fn pattern_word(var_hash: u64, version: u32, index: u64, word: u64) -> u64 {
    let seed = var_hash ^ mix64((version as u64) << 32 | 0x5eed);
    mix64(seed ^ mix64(index.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ word))
}

/// Writes the bytes of element `index` into `out` (`out.len()` = element size).
#[inline]
fn element_bytes(vh: u64, version: u32, index: u64, out: &mut [u8]) {
    for (w, chunk) in out.chunks_mut(8).enumerate() {
        let v = pattern_word(vh, version, index, w as u64).to_le_bytes();
        chunk.copy_from_slice(&v[..chunk.len()]);
    }
}

/// Visits every element of `region` with its global linear index and its
/// byte offset inside a row-major buffer over `region`.
fn for_each_element(global: &NDBox, region: &NDBox, mut f: impl FnMut(u64, usize)) {
    let last = region.ndims() - 1;
    let run = region.extent(last);
    let mut rows = *region;
    let mut upper = rows.upper().to_vec();
    upper[last] = rows.lower()[last] + 1;
    rows = NDBox::new(rows.lower(), &upper).expect("non-empty row box");
    let mut local = 0usize;
    rows.for_each_point(|p| {
        let g0 = global.linear_index(p);
        for k in 0..run {
            f(g0 + k, local);
            local += 1;
        }
    });
}

/// Buffer over `region` holding the reference data.
pub fn fill_pattern(var: &str, version: u32, global: &NDBox, region: &NDBox, element_size: usize) -> RegionBuffer {
    assert!(global.contains_box(region), "{region} outside {global}");
    let vh = var_hash(var);
    let mut buf = RegionBuffer::zeroed(*region, element_size);
    let bytes = buf.bytes_mut();
    for_each_element(global, region, |g, i| {
        element_bytes(vh, version, g, &mut bytes[i * element_size..(i + 1) * element_size]);
    });
    buf
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternMismatch {
    pub var: String,
    pub version: u32,
    /// Global coordinate of the first wrong element.
    pub coord: Vec<u64>,
    pub mismatched_elements: u64,
}

impl std::fmt::Display for PatternMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} v{}: first mismatch at {:?} ({} elements wrong)",
            self.var, self.version, self.coord, self.mismatched_elements
        )
    }
}

/// Checks every element of `buf` against the reference data.
pub fn verify_pattern(var: &str, version: u32, global: &NDBox, buf: &RegionBuffer) -> Result<(), PatternMismatch> {
    let vh = var_hash(var);
    let esize = buf.element_size();
    let bytes = buf.bytes();
    let mut expect = vec![0u8; esize];
    let mut first: Option<u64> = None;
    let mut bad = 0u64;
    for_each_element(global, buf.bbox(), |g, i| {
        element_bytes(vh, version, g, &mut expect);
        if bytes[i * esize..(i + 1) * esize] != expect[..] {
            bad += 1;
            first.get_or_insert(g);
        }
    });
    match first {
        None => Ok(()),
        Some(g) => Err(PatternMismatch {
            var: var.to_string(),
            version,
            coord: unlinearize(global, g),
            mismatched_elements: bad,
        }),
    }
}

fn unlinearize(global: &NDBox, mut g: u64) -> Vec<u64> {
    let n = global.ndims();
    let mut c = vec![0; n];
    for d in (0..n).rev() {
        let e = global.extent(d);
        c[d] = global.lower()[d] + g % e;
        g /= e;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_region_matches_slice_of_full_fill() {
        let global = NDBox::from_extents(&[6, 10]).unwrap();
        let full = fill_pattern("a", 3, &global, &global, 8);
        let sub = NDBox::new(&[1, 2], &[4, 9]).unwrap();
        let part = fill_pattern("a", 3, &global, &sub, 8);
        sub.for_each_point(|p| assert_eq!(part.element(p), full.element(p)));
        assert!(verify_pattern("a", 3, &global, &part).is_ok());
    }

    #[test]
    fn detects_wrong_version_var_and_position() {
        let global = NDBox::from_extents(&[4, 4]).unwrap();
        let sub = NDBox::new(&[0, 0], &[2, 4]).unwrap();
        let buf = fill_pattern("a", 1, &global, &sub, 8);
        assert!(verify_pattern("a", 2, &global, &buf).is_err());
        assert!(verify_pattern("b", 1, &global, &buf).is_err());
        let shifted = RegionBuffer::new(NDBox::new(&[2, 0], &[4, 4]).unwrap(), 8, buf.bytes().to_vec()).unwrap();
        let err = verify_pattern("a", 1, &global, &shifted).unwrap_err();
        assert_eq!(err.coord, vec![2, 0]);
        assert_eq!(err.mismatched_elements, 8);
    }

    #[test]
    fn odd_element_sizes() {
        let global = NDBox::from_extents(&[5]).unwrap();
        let mut buf = fill_pattern("v", 0, &global, &global, 12);
        assert!(verify_pattern("v", 0, &global, &buf).is_ok());
        buf.bytes_mut()[12 * 3 + 11] ^= 1;
        assert_eq!(verify_pattern("v", 0, &global, &buf).unwrap_err().coord, vec![3]);
    }
}
