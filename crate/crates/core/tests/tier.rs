use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand::rngs::StdRng;
use stagespace::tier::{
    open_tier, ChunkHandle, ChunkKey, DelayedTier, HeapTier, MmapTier, Tier, TierConfig, TierError,
    MMAP_MAGIC,
};

const MIB: u64 = 1 << 20;

fn all_tiers(dir: &tempfile::TempDir, capacity: u64) -> Vec<Arc<dyn Tier>> {
    vec![
        open_tier(&TierConfig::heap(capacity)).unwrap(),
        open_tier(&TierConfig::mmap(dir.path().join("t.tier"), capacity)).unwrap(),
        open_tier(&TierConfig::heap(capacity).delayed(Duration::from_micros(10), Duration::ZERO)).unwrap(),
    ]
}

fn random_bytes(rng: &mut StdRng, n: usize) -> Vec<u8> {
    let mut v = vec![0u8; n];
    rng.fill_bytes(&mut v);
    v
}

#[test]
fn heap_open_is_empty() {
    let t = open_tier(&TierConfig::heap(64 * MIB)).unwrap();
    let s = t.stats();
    assert_eq!((s.used_bytes, s.chunk_count, s.capacity_bytes), (0, 0, 64 * MIB));
}

#[test]
fn roundtrip_and_last_writer_on_every_kind() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = StdRng::seed_from_u64(1);
    for t in all_tiers(&dir, 8 * MIB) {
        let h = t.allocate(MIB).unwrap();
        let a = random_bytes(&mut rng, MIB as usize);
        t.write_chunk(&h, &a).unwrap();
        assert_eq!(t.read_chunk(&h).unwrap(), a, "{}", t.name());
        let b = random_bytes(&mut rng, MIB as usize);
        t.write_chunk(&h, &b).unwrap();
        t.flush_chunk(&h).unwrap();
        assert_eq!(t.read_chunk(&h).unwrap(), b, "{}", t.name());
    }
}

#[test]
fn lifecycle_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for t in all_tiers(&dir, MIB) {
        let h = t.allocate(100).unwrap();
        assert!(matches!(t.read_chunk(&h), Err(TierError::Lifecycle(_))), "{}", t.name());
        assert!(matches!(t.write_chunk(&h, &[0; 99]), Err(TierError::Usage(_))));
        assert!(matches!(t.allocate(0), Err(TierError::Usage(_))));
        t.write_chunk(&h, &[1; 100]).unwrap();
        let stale = ChunkHandle { generation: h.generation + 1000, ..h };
        assert!(matches!(t.read_chunk(&stale), Err(TierError::Lifecycle(_))));
        t.free_chunk(&h).unwrap();
        assert!(matches!(t.read_chunk(&h), Err(TierError::Lifecycle(_))));
        assert!(matches!(t.write_chunk(&h, &[1; 100]), Err(TierError::Lifecycle(_))));
        assert!(matches!(t.free_chunk(&h), Err(TierError::Lifecycle(_))));
    }
}

#[test]
fn allocation_boundary() {
    let dir = tempfile::tempdir().unwrap();
    for t in all_tiers(&dir, 1000) {
        let a = t.allocate(100).unwrap();
        let b = t.allocate(100).unwrap();
        assert!(!a.overlaps(&b));
        for _ in 0..8 {
            t.allocate(100).unwrap();
        }
        assert!(matches!(t.allocate(1), Err(TierError::Capacity { .. })), "{}", t.name());
        assert_eq!(t.stats().used_bytes, 1000);
    }
}

/// Random allocate/free sequences: live handles never overlap, usage never
/// exceeds capacity, and the stats match a shadow ledger.
#[test]
fn allocation_overlap_and_stats_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = StdRng::seed_from_u64(7);
    for t in all_tiers(&dir, 64 * 1024) {
        let mut live: Vec<ChunkHandle> = Vec::new();
        let (mut used, mut wrote, mut read) = (0u64, 0u64, 0u64);
        for _ in 0..2000 {
            match rng.random_range(0..4) {
                0 | 1 => {
                    let len = rng.random_range(1..4096);
                    match t.allocate(len) {
                        Ok(h) => {
                            used += len;
                            live.push(h);
                        }
                        Err(TierError::Capacity { .. }) => {}
                        Err(e) => panic!("{e}"),
                    }
                }
                2 if !live.is_empty() => {
                    let h = live.swap_remove(rng.random_range(0..live.len()));
                    t.free_chunk(&h).unwrap();
                    used -= h.length;
                }
                _ if !live.is_empty() => {
                    let h = live[rng.random_range(0..live.len())];
                    t.write_chunk(&h, &vec![3; h.length as usize]).unwrap();
                    wrote += h.length;
                    t.read_chunk(&h).unwrap();
                    read += h.length;
                }
                _ => {}
            }
            for (i, a) in live.iter().enumerate() {
                for b in &live[i + 1..] {
                    assert!(!a.overlaps(b), "{a:?} overlaps {b:?}");
                }
                assert!(a.end() <= 64 * 1024);
            }
            let s = t.stats();
            assert_eq!(s.used_bytes, used);
            assert!(s.used_bytes <= s.capacity_bytes);
            assert_eq!(s.chunk_count, live.len() as u64);
            assert_eq!(s.cumulative_write_bytes, wrote);
            assert_eq!(s.cumulative_read_bytes, read);
        }
    }
}

#[test]
fn stats_after_one_write() {
    let t = HeapTier::new(1 << 20);
    let h = t.allocate(100).unwrap();
    t.write_chunk(&h, &[9; 100]).unwrap();
    let s = t.stats();
    assert_eq!((s.used_bytes, s.chunk_count, s.cumulative_write_bytes), (100, 1, 100));
}

#[test]
fn concurrent_writers_on_distinct_handles() {
    let dir = tempfile::tempdir().unwrap();
    for t in all_tiers(&dir, 16 * MIB) {
        let handles: Vec<ChunkHandle> = (0..8).map(|_| t.allocate(256 * 1024).unwrap()).collect();
        std::thread::scope(|s| {
            for (i, h) in handles.iter().enumerate() {
                let t = &t;
                s.spawn(move || {
                    let mut rng = StdRng::seed_from_u64(i as u64);
                    for _ in 0..20 {
                        let data = random_bytes(&mut rng, h.length as usize);
                        t.write_chunk(h, &data).unwrap();
                        assert_eq!(t.read_chunk(h).unwrap(), data);
                    }
                });
            }
        });
        // Final contents equal the last payload each thread wrote.
        for (i, h) in handles.iter().enumerate() {
            let mut rng = StdRng::seed_from_u64(i as u64);
            let mut last = Vec::new();
            for _ in 0..20 {
                last = random_bytes(&mut rng, h.length as usize);
            }
            assert_eq!(t.read_chunk(h).unwrap(), last);
        }
    }
}

#[test]
fn concurrent_readers_of_one_handle() {
    let dir = tempfile::tempdir().unwrap();
    for t in all_tiers(&dir, 4 * MIB) {
        let h = t.allocate(MIB).unwrap();
        let data = random_bytes(&mut StdRng::seed_from_u64(3), MIB as usize);
        t.write_chunk(&h, &data).unwrap();
        let sum: u64 = data.iter().map(|&b| b as u64).sum();
        std::thread::scope(|s| {
            for _ in 0..64 {
                s.spawn(|| {
                    let got = t.read_chunk(&h).unwrap();
                    assert_eq!(got.iter().map(|&b| b as u64).sum::<u64>(), sum);
                    assert_eq!(got, data);
                });
            }
        });
    }
}

#[test]
fn isolation_between_handles() {
    let dir = tempfile::tempdir().unwrap();
    for t in all_tiers(&dir, MIB) {
        let a = t.allocate(64).unwrap();
        let b = t.allocate(64).unwrap();
        t.write_chunk(&b, &[2; 64]).unwrap();
        t.write_chunk(&a, &[1; 64]).unwrap();
        assert_eq!(t.read_chunk(&b).unwrap(), vec![2; 64]);
    }
}

#[test]
fn mmap_reopen_preserves_table() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.tier");
    let first = MmapTier::open(&path, 4 * MIB).unwrap().entries();
    let second = MmapTier::open(&path, 4 * MIB).unwrap().entries();
    assert!(first.is_empty());
    assert_eq!(first, second);

    let mut raw = std::fs::read(&path).unwrap();
    assert_eq!(&raw[..16], MMAP_MAGIC);
    assert_eq!(u64::from_le_bytes(raw[16..24].try_into().unwrap()), 4 * MIB);

    let key = ChunkKey([7; 16]);
    let (h, unflushed) = {
        let t = MmapTier::open(&path, 4 * MIB).unwrap();
        let h = t.allocate_keyed(3000, key).unwrap();
        t.write_chunk(&h, &[5; 3000]).unwrap();
        t.flush_chunk(&h).unwrap();
        let u = t.allocate(10).unwrap();
        t.write_chunk(&u, &[1; 10]).unwrap();
        (h, u)
    };
    let t = MmapTier::open(&path, 4 * MIB).unwrap();
    assert_eq!(t.entries(), vec![(h, key)]);
    assert_eq!(t.read_chunk(&h).unwrap(), vec![5; 3000]);
    assert!(t.read_chunk(&unflushed).is_err());
    let again = MmapTier::open(&path, 4 * MIB).unwrap().entries();
    assert_eq!(again, t.entries());
    drop(t);

    // Header fields on disk.
    raw = std::fs::read(&path).unwrap();
    assert_eq!(u64::from_le_bytes(raw[24..32].try_into().unwrap()), 1);
    assert_eq!(u64::from_le_bytes(raw[32..40].try_into().unwrap()), h.offset);
    assert_eq!(u64::from_le_bytes(raw[40..48].try_into().unwrap()), 3000);
    assert_eq!(u64::from_le_bytes(raw[48..56].try_into().unwrap()), h.generation);
    assert_eq!(&raw[56..72], &[7; 16]);
}

#[test]
fn mmap_free_compacts_persisted_table() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tier");
    let kept = {
        let t = MmapTier::open(&path, MIB).unwrap();
        let hs: Vec<_> = (0..5u8)
            .map(|i| {
                let h = t.allocate_keyed(100, ChunkKey([i; 16])).unwrap();
                t.write_chunk(&h, &[i; 100]).unwrap();
                t.flush_chunk(&h).unwrap();
                h
            })
            .collect();
        t.free_chunk(&hs[1]).unwrap();
        t.free_chunk(&hs[4]).unwrap();
        vec![hs[0], hs[2], hs[3]]
    };
    let t = MmapTier::open(&path, MIB).unwrap();
    let mut got: Vec<_> = t.entries().into_iter().map(|(h, _)| h).collect();
    got.sort_by_key(|h| h.generation);
    assert_eq!(got, kept);
    for h in &kept {
        let b = t.read_chunk(h).unwrap();
        assert_eq!(b[0] as u64, h.generation - 1);
    }
    assert_eq!(t.stats().used_bytes, 300);
    // Reused space after reopen must not collide with live chunks.
    let n = t.allocate(100).unwrap();
    assert!(kept.iter().all(|h| !h.overlaps(&n)));
    assert!(kept.iter().all(|h| h.generation != n.generation));
}

#[test]
fn mmap_capacity_checks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cap.tier");
    drop(MmapTier::open(&path, 2 * MIB).unwrap());
    assert!(matches!(MmapTier::open(&path, MIB), Err(TierError::Config(_))));
    let t = MmapTier::open(&path, 4 * MIB).unwrap();
    assert_eq!(t.stats().capacity_bytes, 2 * MIB);

    let junk = dir.path().join("junk");
    std::fs::write(&junk, b"not a tier file at all, definitely").unwrap();
    assert!(matches!(MmapTier::open(&junk, MIB), Err(TierError::Corrupt(_))));
    assert_eq!(std::fs::read(&junk).unwrap(), b"not a tier file at all, definitely");

    let unwritable = dir.path().join("missing-dir").join("x.tier");
    assert!(matches!(MmapTier::open(&unwritable, MIB), Err(TierError::Io(_))));
}

const CHILD_ENV: &str = "STAGESPACE_TIER_CHILD";

/// Child half of `mmap_survives_sigkill_after_flush`; idle unless spawned by it.
#[test]
fn crash_child() {
    let Ok(path) = std::env::var(CHILD_ENV) else {
        return;
    };
    let t = MmapTier::open(&path, 8 * MIB).unwrap();
    let data = random_bytes(&mut StdRng::seed_from_u64(99), 3 * MIB as usize);
    let h = t.allocate(data.len() as u64).unwrap();
    t.write_chunk(&h, &data).unwrap();
    t.flush_chunk(&h).unwrap();
    println!("FLUSHED {} {} {}", h.offset, h.length, h.generation);
    std::thread::sleep(Duration::from_secs(60));
}

#[test]
fn mmap_survives_sigkill_after_flush() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("crash.tier");
    let mut child = Command::new(std::env::current_exe().unwrap())
        .args(["--exact", "crash_child", "--nocapture", "--test-threads=1"])
        .env(CHILD_ENV, &path)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let handle = loop {
        let line = lines.next().expect("child exited early").unwrap();
        if let Some(at) = line.find("FLUSHED ") {
            let rest = &line[at + 8..];
            let v: Vec<u64> = rest.split(' ').map(|x| x.parse().unwrap()).collect();
            break ChunkHandle { offset: v[0], length: v[1], generation: v[2] };
        }
    };
    child.kill().unwrap();
    child.wait().unwrap();
    let t = MmapTier::open(&path, 8 * MIB).unwrap();
    let expected = random_bytes(&mut StdRng::seed_from_u64(99), 3 * MIB as usize);
    assert_eq!(t.read_chunk(&handle).unwrap(), expected);
}

#[test]
fn owned_writes_match_borrowed_writes() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = StdRng::seed_from_u64(2);
    let mut tiers = all_tiers(&dir, 8 * MIB);
    tiers.push(open_tier(&TierConfig::heap(8 * MIB).delayed(Duration::from_micros(50), Duration::ZERO)).unwrap());
    for t in tiers {
        let h = t.allocate(MIB).unwrap();
        let a = random_bytes(&mut rng, MIB as usize);
        t.write_chunk_owned(&h, a.clone()).unwrap();
        assert_eq!(t.read_chunk(&h).unwrap(), a, "{}", t.name());
        let b = random_bytes(&mut rng, MIB as usize);
        t.write_chunk_owned(&h, b.clone()).unwrap();
        assert_eq!(t.read_chunk(&h).unwrap(), b, "{}", t.name());
        assert!(t.write_chunk_owned(&h, vec![0; 10]).is_err(), "{}", t.name());
        assert_eq!(t.stats().cumulative_write_bytes, 2 * MIB, "{}", t.name());
    }
}

#[test]
fn delayed_write_takes_per_op_latency() {
    let t = open_tier(&TierConfig::heap(MIB).delayed(Duration::from_micros(200), Duration::ZERO)).unwrap();
    let h = t.allocate(16).unwrap();
    for _ in 0..10 {
        let start = Instant::now();
        t.write_chunk(&h, &[0; 16]).unwrap();
        let took = start.elapsed();
        assert!(took >= Duration::from_micros(200), "{took:?}");
        assert!(took < Duration::from_millis(100), "{took:?}");
    }
}

#[test]
fn delayed_read_scales_with_size() {
    let inner: Arc<dyn Tier> = Arc::new(HeapTier::new(8 * MIB));
    let t = DelayedTier::new(inner, Duration::ZERO, Duration::from_micros(1000));
    let h = t.allocate(4 * MIB).unwrap();
    t.write_chunk(&h, &vec![1; 4 * MIB as usize]).unwrap();
    let start = Instant::now();
    t.read_chunk(&h).unwrap();
    let took = start.elapsed();
    assert!(took >= Duration::from_millis(4), "{took:?}");
    assert!(took < Duration::from_millis(200), "{took:?}");
}

/// The delay wrapper never changes results: replay one random op sequence on
/// a bare heap tier and a delayed heap tier and compare every outcome.
#[test]
fn delayed_is_transparent() {
    let bare: Arc<dyn Tier> = Arc::new(HeapTier::new(32 * 1024));
    let wrapped = DelayedTier::new(Arc::new(HeapTier::new(32 * 1024)), Duration::from_micros(1), Duration::ZERO);
    let mut rng = StdRng::seed_from_u64(5);
    let mut live: Vec<ChunkHandle> = Vec::new();
    let mut written: HashMap<u64, bool> = HashMap::new();
    for _ in 0..500 {
        let op = rng.random_range(0..4);
        if op == 0 || live.is_empty() {
            let len = rng.random_range(1..3000);
            let a = bare.allocate(len).map_err(|e| e.to_string());
            let b = wrapped.allocate(len).map_err(|e| e.to_string());
            assert_eq!(a, b);
            if let Ok(h) = a {
                live.push(h);
            }
        } else {
            let i = rng.random_range(0..live.len());
            let h = live[i];
            match op {
                1 => {
                    let data = random_bytes(&mut rng, h.length as usize);
                    bare.write_chunk(&h, &data).unwrap();
                    wrapped.write_chunk(&h, &data).unwrap();
                    written.insert(h.generation, true);
                }
                2 => {
                    let a = bare.read_chunk(&h).map_err(|e| e.to_string());
                    let b = wrapped.read_chunk(&h).map_err(|e| e.to_string());
                    assert_eq!(a, b);
                }
                _ => {
                    bare.free_chunk(&h).unwrap();
                    wrapped.free_chunk(&h).unwrap();
                    live.swap_remove(i);
                }
            }
        }
        assert_eq!(bare.stats(), wrapped.stats());
        assert_eq!(bare.entries(), wrapped.entries());
    }
}
