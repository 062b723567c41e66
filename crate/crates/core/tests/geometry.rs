use std::collections::HashSet;

use proptest::prelude::*;

use stagespace::geometry::{copy_region, covers, decompose_grid, NDBox, RegionBuffer, GeometryError};

fn arb_box(ndims: usize) -> impl Strategy<Value = NDBox> {
    prop::collection::vec((0u64..8, 1u64..=8), ndims).prop_map(|v| {
        let lo: Vec<u64> = v.iter().map(|x| x.0).collect();
        let hi: Vec<u64> = v.iter().map(|x| (x.0 + x.1).min(8).max(x.0 + 1)).collect();
        NDBox::new(&lo, &hi).unwrap()
    })
}

fn voxels(b: &NDBox) -> HashSet<Vec<u64>> {
    let mut s = HashSet::new();
    b.for_each_point(|p| {
        s.insert(p.to_vec());
    });
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn covers_matches_voxels(
        (target, pieces) in (1usize..=3).prop_flat_map(|n| (arb_box(n), prop::collection::vec(arb_box(n), 0..6)))
    ) {
        let mut union = HashSet::new();
        for p in &pieces {
            union.extend(voxels(p));
        }
        prop_assert_eq!(covers(&target, &pieces).unwrap(), voxels(&target).is_subset(&union));
    }

    #[test]
    fn volume_and_containment_match_voxels(a in arb_box(3), b in arb_box(3)) {
        let (va, vb) = (voxels(&a), voxels(&b));
        prop_assert_eq!(a.volume() as usize, va.len());
        prop_assert_eq!(a.contains_box(&b), vb.is_subset(&va));
        prop_assert_eq!(a.intersects(&b), !va.is_disjoint(&vb));
        let merged = a.merge(&b);
        let union: HashSet<_> = va.union(&vb).cloned().collect();
        if let Some(m) = merged {
            prop_assert_eq!(voxels(&m), union);
        }
    }

    #[test]
    fn copy_region_moves_exactly_the_region(a in arb_box(3), b in arb_box(3), es in 1usize..5) {
        let Some(region) = a.intersect(&b).unwrap() else { return Ok(()); };
        let mut src = RegionBuffer::zeroed(a, es);
        a.for_each_point(|p| {
            let tag = (a.linear_index(p) as u8).wrapping_mul(31).wrapping_add(1);
            let i = a.linear_index(p) as usize * es;
            src.bytes_mut()[i..i + es].fill(tag);
        });
        let mut dst = RegionBuffer::filled(b, es, 0);
        prop_assert_eq!(copy_region(&src, &mut dst, &region).unwrap(), region.volume());
        let mut ok = true;
        b.for_each_point(|p| {
            let want: Vec<u8> = if region.contains_point(p) {
                src.element(p).to_vec()
            } else {
                vec![0; es]
            };
            ok &= dst.element(p) == &want[..];
        });
        prop_assert!(ok);
    }
}

#[test]
fn decomposition_partitions_the_domain() {
    let global = NDBox::new(&[2, 0, 4], &[14, 6, 12]).unwrap();
    for parts in [[1, 1, 1], [3, 2, 4], [12, 6, 8], [2, 3, 1]] {
        let boxes = decompose_grid(&global, &parts).unwrap();
        assert_eq!(boxes.len() as u64, parts.iter().product::<u64>());
        let mut seen = HashSet::new();
        for b in &boxes {
            assert!(global.contains_box(b));
            for v in voxels(b) {
                assert!(seen.insert(v), "overlap in {parts:?}");
            }
        }
        assert_eq!(seen, voxels(&global));
    }
    assert!(matches!(
        decompose_grid(&global, &[5, 1, 1]),
        Err(GeometryError::NotDivisible { dim: 0, .. })
    ));
}

#[test]
fn region_buffer_checks_lengths() {
    let b = NDBox::from_extents(&[3, 4]).unwrap();
    assert!(RegionBuffer::new(b, 8, vec![0; 96]).is_ok());
    assert!(matches!(
        RegionBuffer::new(b, 8, vec![0; 95]),
        Err(GeometryError::BufferLength { expected: 96, actual: 95 })
    ));
}
