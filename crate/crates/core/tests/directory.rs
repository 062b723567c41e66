use std::collections::HashSet;

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use stagespace::directory::{Directory, DirectoryError, DistGrid, ObjectDescriptor};
use stagespace::geometry::NDBox;
use stagespace::tier::ChunkHandle;

fn random_box(rng: &mut StdRng, extents: &[u64]) -> NDBox {
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for &e in extents {
        let a = rng.random_range(0..e);
        let b = rng.random_range(a + 1..=e);
        lo.push(a);
        hi.push(b);
    }
    NDBox::new(&lo, &hi).unwrap()
}

fn desc(var: &str, version: u32, bbox: NDBox, generation: u64) -> ObjectDescriptor {
    ObjectDescriptor {
        var: var.into(),
        version,
        bbox,
        element_size: 8,
        owner: (generation % 3) as u32,
        handle: ChunkHandle {
            offset: generation * 4096,
            length: bbox.volume() * 8,
            generation,
        },
    }
}

fn voxels(b: &NDBox) -> HashSet<Vec<u64>> {
    let mut s = HashSet::new();
    b.for_each_point(|p| {
        s.insert(p.to_vec());
    });
    s
}

#[test]
fn single_server_owns_everything() {
    let g = DistGrid::new(NDBox::from_extents(&[64, 64]).unwrap(), vec![8, 8], 1).unwrap();
    for c in g.blocks_of(g.global()).unwrap() {
        assert_eq!(g.shard_owner("x", &c).unwrap(), 0);
    }
}

#[test]
fn owner_is_deterministic_and_version_free() {
    let g = DistGrid::new(NDBox::from_extents(&[64, 64]).unwrap(), vec![8, 8], 7).unwrap();
    let again = g.clone();
    for c in g.blocks_of(g.global()).unwrap() {
        let o = g.shard_owner("temp", &c).unwrap();
        assert!(o < 7);
        assert_eq!(o, again.shard_owner("temp", &c).unwrap());
    }
    assert!(matches!(
        g.shard_owner("temp", &[8, 0]),
        Err(DirectoryError::BlockOutOfRange { .. })
    ));
}

/// Histogram of owners over 64x64 = 4096 blocks and 4 servers.
#[test]
fn shard_balance_over_4096_blocks() {
    let g = DistGrid::new(NDBox::from_extents(&[4096, 4096]).unwrap(), vec![64, 64], 4).unwrap();
    for var in ["field", "pressure", "v"] {
        let mut counts = [0u32; 4];
        for c in g.blocks_of(g.global()).unwrap() {
            counts[g.shard_owner(var, &c).unwrap() as usize] += 1;
        }
        assert_eq!(counts.iter().sum::<u32>(), 4096);
        for c in counts {
            assert!((922..=1126).contains(&c), "{var}: {counts:?}");
        }
    }
}

#[test]
fn blocks_of_examples() {
    let g = DistGrid::new(NDBox::from_extents(&[16, 16]).unwrap(), vec![4, 4], 2).unwrap();
    let one = NDBox::new(&[4, 8], &[8, 12]).unwrap();
    assert_eq!(g.blocks_of(&one).unwrap(), vec![vec![1, 2]]);
    let four = NDBox::new(&[3, 3], &[5, 5]).unwrap();
    assert_eq!(
        g.blocks_of(&four).unwrap(),
        vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]
    );
    let outside = NDBox::new(&[10, 10], &[17, 12]).unwrap();
    assert!(matches!(g.blocks_of(&outside), Err(DirectoryError::OutsideDomain(..))));
}

#[test]
fn blocks_of_matches_brute_force_scan() {
    let mut rng = StdRng::seed_from_u64(11);
    let g = DistGrid::new(NDBox::from_extents(&[24, 18, 10]).unwrap(), vec![4, 3, 5], 3).unwrap();
    let all: Vec<Vec<u64>> = {
        let blocks = NDBox::from_extents(&g.blocks_per_dim()).unwrap();
        let mut v = Vec::new();
        blocks.for_each_point(|p| v.push(p.to_vec()));
        v
    };
    for _ in 0..2000 {
        let b = random_box(&mut rng, &[24, 18, 10]);
        let expected: Vec<Vec<u64>> = all
            .iter()
            .filter(|c| g.block_box(c).unwrap().intersect(&b).unwrap().is_some())
            .cloned()
            .collect();
        assert_eq!(g.blocks_of(&b).unwrap(), expected, "box {b}");
    }
}

#[test]
fn register_query_and_replace() {
    let mut d = Directory::default();
    let b = NDBox::new(&[0, 0], &[4, 4]).unwrap();
    d.register(desc("t", 1, b, 1));
    assert_eq!(d.query("t", 1, &b).len(), 1);
    let out = d.register(desc("t", 1, b, 2));
    assert_eq!(out.replaced.unwrap().handle.generation, 1);
    let q = d.query("t", 1, &b);
    assert_eq!(q.len(), 1);
    assert_eq!(q[0].handle.generation, 2);
    assert!(d.query("unknown", 1, &b).is_empty());
    assert!(d.query("t", 0, &b).is_empty(), "versions are isolated");
}

#[test]
fn coverage_examples() {
    let mut d = Directory::default();
    let full = NDBox::from_extents(&[8, 8]).unwrap();
    let half = NDBox::new(&[0, 0], &[4, 8]).unwrap();
    d.register(desc("h", 0, half, 1));
    assert!(!d.is_covered("h", 0, &full));
    assert!(d.is_covered("h", 0, &half));
    assert!(d.is_covered("h", 0, &NDBox::new(&[1, 1], &[3, 7]).unwrap()));
    d.register(desc("f", 0, full, 2));
    assert!(d.is_covered("f", 0, &NDBox::new(&[5, 2], &[8, 3]).unwrap()));
}

#[test]
fn ring_eviction_drops_oldest_version() {
    let mut d = Directory::new(3);
    let b = NDBox::from_extents(&[2]).unwrap();
    for v in 0..3 {
        assert!(d.register(desc("r", v, b, v as u64)).evicted.is_empty());
    }
    let out = d.register(desc("r", 3, b, 3));
    assert_eq!(out.evicted.len(), 1);
    assert_eq!(out.evicted[0].version, 0);
    assert!(d.query("r", 0, &b).is_empty());
    // A late descriptor for an already-evicted version is accepted, then evicted.
    let late = d.register(desc("r", 0, b, 9));
    assert_eq!(late.evicted.len(), 1);
    assert_eq!(late.evicted[0].version, 0);
    assert_eq!(d.len(), 3);
}

/// 10^4 random registrations; every query and coverage answer is checked
/// against a linear scan of everything registered so far.
#[test]
fn ten_thousand_registrations_match_linear_scan() {
    let mut rng = StdRng::seed_from_u64(0xd1);
    let mut d = Directory::new(usize::MAX);
    let mut log: Vec<ObjectDescriptor> = Vec::new();
    let vars = ["a", "b", "c"];
    let extents = [8u64, 8];
    for g in 0..10_000u64 {
        let var = vars[rng.random_range(0..3)];
        let version = rng.random_range(0..5);
        let b = random_box(&mut rng, &extents);
        let dsc = desc(var, version, b, g);
        if let Some(i) = log
            .iter()
            .position(|o| o.var == dsc.var && o.version == version && o.bbox == b)
        {
            log.remove(i);
        }
        log.push(dsc.clone());
        d.register(dsc);
        if g % 50 == 0 {
            let qvar = vars[rng.random_range(0..3)];
            let qver = rng.random_range(0..5);
            let qb = random_box(&mut rng, &extents);
            let got = d.query(qvar, qver, &qb);
            let expected: Vec<&ObjectDescriptor> = log
                .iter()
                .filter(|o| o.var == qvar && o.version == qver && o.bbox.intersects(&qb))
                .collect();
            assert_eq!(got.len(), expected.len());
            for e in expected {
                assert!(got.contains(e));
            }
        }
    }
    assert_eq!(d.len(), log.len());
    let mut snap = d.snapshot();
    let mut all = log.clone();
    let key = |o: &ObjectDescriptor| (o.var.clone(), o.version, o.bbox, o.handle.generation);
    snap.sort_by_key(key);
    all.sort_by_key(key);
    assert_eq!(snap, all);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    /// is_covered agrees with marking voxels of every registered box.
    #[test]
    fn coverage_matches_voxel_marking(
        puts in prop::collection::vec((0u64..6, 1u64..7, 0u64..6, 1u64..7), 0..6),
        q in (0u64..6, 1u64..7, 0u64..6, 1u64..7),
    ) {
        let mk = |(a, da, b, db): (u64, u64, u64, u64)| {
            NDBox::new(&[a, b], &[(a + da).min(6), (b + db).min(6)]).ok()
        };
        let mut d = Directory::default();
        let mut marked = HashSet::new();
        for (i, p) in puts.into_iter().enumerate() {
            if let Some(b) = mk(p) {
                marked.extend(voxels(&b));
                d.register(desc("p", 0, b, i as u64));
            }
        }
        if let Some(qb) = mk(q) {
            let expected = voxels(&qb).is_subset(&marked);
            prop_assert_eq!(d.is_covered("p", 0, &qb), expected);
        }
    }

    /// Coverage, once established, survives further registrations.
    #[test]
    fn coverage_is_monotone(
        boxes in prop::collection::vec((0u64..5, 1u64..6), 1..8),
    ) {
        let mut d = Directory::new(usize::MAX);
        let target = NDBox::new(&[1], &[4]).unwrap();
        let mut covered = false;
        for (i, (a, len)) in boxes.into_iter().enumerate() {
            let b = NDBox::new(&[a], &[(a + len).min(6)]).unwrap();
            d.register(desc("m", 0, b, i as u64));
            let now = d.is_covered("m", 0, &target);
            prop_assert!(!covered || now);
            covered = now;
        }
    }
}
