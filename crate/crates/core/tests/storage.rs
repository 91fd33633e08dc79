mod common;

use std::collections::BTreeMap;
use std::fs::OpenOptions;

use fhesql::crypto::{Ciphertext, FheBackend, KeyMaterial, PlainScalar, SimBackend};
use fhesql::storage::{BlobHash, BlobStore, BlobStoreConfig, HybridStore};
use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_segments(bytes: u64) -> BlobStoreConfig {
    BlobStoreConfig {
        segment_bytes: bytes,
        sync_writes: false,
        ..BlobStoreConfig::default()
    }
}

fn bytes_of(len: usize, seed: u64) -> Vec<u8> {
    let mut b = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut b);
    b
}

fn live_map(s: &BlobStore) -> BTreeMap<BlobHash, Vec<u8>> {
    s.live_hashes()
        .into_iter()
        .map(|h| (h, s.get_blob(&h).unwrap().to_vec()))
        .collect()
}

#[test]
fn roundtrip_across_size_classes() {
    let dir = tempfile::tempdir().unwrap();
    let s = BlobStore::open(dir.path(), small_segments(8 << 20)).unwrap();
    let sizes = [
        1usize,
        2,
        100,
        4095,
        64 << 10,
        100 << 10,
        256 << 10,
        1 << 20,
        (4 << 20) - 1,
        4 << 20,
    ];
    let mut hashes = Vec::new();
    for (i, &n) in sizes.iter().enumerate() {
        let b = bytes_of(n, i as u64);
        let h = s.put_blob(&b).unwrap();
        assert_eq!(h, BlobHash::of(&b));
        assert_eq!(s.put_blob(&b).unwrap(), h, "same content, same hash");
        hashes.push((h, b));
    }
    s.clear_cache();
    for (h, b) in &hashes {
        assert_eq!(s.get_blob(h).unwrap().as_ref(), b.as_slice());
    }
    drop(s);
    let s = BlobStore::open(dir.path(), small_segments(8 << 20)).unwrap();
    for (h, b) in &hashes {
        assert_eq!(s.get_blob(h).unwrap().as_ref(), b.as_slice());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_sizes_roundtrip(lens in proptest::collection::vec(1usize..=(4 << 20), 1..4), seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let s = BlobStore::open(dir.path(), small_segments(2 << 20)).unwrap();
        let blobs: Vec<Vec<u8>> = lens.iter().enumerate().map(|(i, &n)| bytes_of(n, seed ^ i as u64)).collect();
        let hs: Vec<BlobHash> = blobs.iter().map(|b| s.put_blob(b).unwrap()).collect();
        s.clear_cache();
        for (h, b) in hs.iter().zip(&blobs) {
            prop_assert_eq!(s.get_blob(h).unwrap().to_vec(), b.clone());
        }
    }
}

#[test]
fn compaction_reclaims_a_fully_dead_segment() {
    let dir = tempfile::tempdir().unwrap();
    let s = BlobStore::open(dir.path(), small_segments(1 << 20)).unwrap();
    let doomed: Vec<Vec<u8>> = (0..20).map(|i| bytes_of(1000 + i, i as u64)).collect();
    let hs: Vec<BlobHash> = doomed.iter().map(|b| s.put_blob(b).unwrap()).collect();
    s.seal_active().unwrap();
    let keep: Vec<BlobHash> = (0..10).map(|i| s.put_blob(&bytes_of(500, 100 + i)).unwrap()).collect();
    let first = s.segments()[0];
    assert!(first.sealed);
    let payload: u64 = doomed.iter().map(|b| b.len() as u64).sum();
    assert_eq!(first.live_bytes, payload);
    for h in &hs {
        s.delete_blob(h).unwrap();
    }
    let before = live_map(&s);
    let reclaimed = s.compact().unwrap();
    assert_eq!(reclaimed, payload);
    assert!(s.segments().iter().all(|g| g.id != first.id));
    assert_eq!(live_map(&s), before);
    assert_eq!(s.live_hashes(), {
        let mut k = keep.clone();
        k.sort();
        k
    });
}

#[derive(Debug, Clone)]
enum BlobOp {
    Put(usize, u64),
    Delete(usize),
    Seal,
    Compact,
    Reopen,
}

fn blob_op() -> impl Strategy<Value = BlobOp> {
    prop_oneof![
        5 => (1usize..6000, 0u64..40).prop_map(|(n, s)| BlobOp::Put(n, s)),
        3 => (0usize..64).prop_map(BlobOp::Delete),
        1 => Just(BlobOp::Seal),
        2 => Just(BlobOp::Compact),
        1 => Just(BlobOp::Reopen),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Compaction keeps exactly the live set, across seals and reopens.
    #[test]
    fn blob_ops_match_model(ops in proptest::collection::vec(blob_op(), 1..60)) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BlobStoreConfig { compaction_threshold: 0.3, ..small_segments(16 << 10) };
        let mut s = BlobStore::open(dir.path(), cfg).unwrap();
        let mut model: BTreeMap<BlobHash, Vec<u8>> = BTreeMap::new();
        for op in ops {
            match op {
                BlobOp::Put(n, seed) => {
                    let b = bytes_of(n, seed);
                    model.insert(s.put_blob(&b).unwrap(), b);
                }
                BlobOp::Delete(i) => {
                    if let Some(h) = model.keys().nth(i % model.len().max(1)).copied() {
                        s.delete_blob(&h).unwrap();
                        model.remove(&h);
                    }
                }
                BlobOp::Seal => s.seal_active().unwrap(),
                BlobOp::Compact => {
                    let before = live_map(&s);
                    s.compact().unwrap();
                    prop_assert_eq!(live_map(&s), before);
                }
                BlobOp::Reopen => {
                    drop(s);
                    s = BlobStore::open(dir.path(), cfg).unwrap();
                }
            }
            prop_assert_eq!(&live_map(&s), &model);
            for g in s.segments() {
                prop_assert!(g.live_bytes + g.dead_bytes <= g.file_bytes);
            }
        }
    }
}

struct Cells {
    b: SimBackend,
    k: KeyMaterial,
}

impl Cells {
    fn new() -> Cells {
        let b = SimBackend::with_seed(3);
        let k = b.keygen(128).unwrap();
        Cells { b, k }
    }

    fn row(&self, a: u32, c: u32) -> Vec<Ciphertext> {
        vec![
            self.b.encrypt(&self.k, PlainScalar::u32(a)).unwrap(),
            self.b.encrypt(&self.k, PlainScalar::u32(c)).unwrap(),
        ]
    }

    fn values(&self, s: &HybridStore, table: &str) -> BTreeMap<u64, (u32, u32)> {
        let (_, rows) = s.load_table(table).unwrap();
        rows.iter()
            .map(|r| {
                let d = |c: &Ciphertext| self.b.decrypt(&self.k, c).unwrap().value();
                (r.row_id, (d(&r.cells[0]), d(&r.cells[1])))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum RowOp {
    Insert(u32, u32),
    InsertZero,
    Delete(usize),
    Compact,
    Reopen,
}

fn row_op() -> impl Strategy<Value = RowOp> {
    prop_oneof![
        5 => (any::<u32>(), any::<u32>()).prop_map(|(a, b)| RowOp::Insert(a, b)),
        1 => Just(RowOp::InsertZero),
        3 => (0usize..32).prop_map(RowOp::Delete),
        2 => Just(RowOp::Compact),
        1 => Just(RowOp::Reopen),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Every metadata entry resolves after any interleaving of inserts,
    /// deletes, compactions and reopens.
    #[test]
    fn row_ops_keep_indirection_intact(ops in proptest::collection::vec(row_op(), 1..50)) {
        let cells = Cells::new();
        let dir = tempfile::tempdir().unwrap();
        let cfg = fhesql::storage::StoreConfig { blob: BlobStoreConfig { compaction_threshold: 0.1, ..small_segments(2048) } };
        let mut s = HybridStore::open(dir.path(), cfg).unwrap();
        s.create_table(common::u32_schema("t", 2)).unwrap();
        let mut model: BTreeMap<u64, (u32, u32)> = BTreeMap::new();
        let zero = cells.b.trivial_encrypt(PlainScalar::u32(0)).unwrap();
        for op in ops {
            match op {
                RowOp::Insert(a, c) => {
                    let id = s.insert_row("t", cells.row(a, c), "o").unwrap();
                    model.insert(id, (a, c));
                }
                RowOp::InsertZero => {
                    // deterministic cells share blobs across rows
                    let id = s.insert_row("t", vec![zero.clone(), zero.clone()], "o").unwrap();
                    model.insert(id, (0, 0));
                }
                RowOp::Delete(i) => {
                    if let Some(id) = model.keys().nth(i % model.len().max(1)).copied() {
                        s.delete_row("t", id).unwrap();
                        model.remove(&id);
                    }
                }
                RowOp::Compact => {
                    s.blobs().seal_active().unwrap();
                    s.compact().unwrap();
                }
                RowOp::Reopen => {
                    drop(s);
                    s = HybridStore::open(dir.path(), cfg).unwrap();
                    prop_assert!(s.recovery_report().dangling.is_empty());
                }
            }
            let report = s.check_integrity().unwrap();
            prop_assert!(report.is_clean(), "{:?}", report);
            prop_assert_eq!(s.catalog("t").unwrap().row_count, model.len() as u64);
        }
        prop_assert_eq!(cells.values(&s, "t"), model);
    }
}

#[test]
fn crash_after_blob_write_before_metadata_commit() {
    let cells = Cells::new();
    let dir = tempfile::tempdir().unwrap();
    {
        let s = HybridStore::open(dir.path(), common::store_config()).unwrap();
        s.create_table(common::u32_schema("t", 2)).unwrap();
        s.insert_row("t", cells.row(1, 2), "o").unwrap();
        // the write path stops here: both cell blobs are in the blob store,
        // the metadata transaction never ran
        for c in cells.row(3, 4) {
            s.blobs().put_blob(&c.to_bytes()).unwrap();
        }
        assert_eq!(s.check_integrity().unwrap().orphan_blobs, 2);
    }
    let s = HybridStore::open(dir.path(), common::store_config()).unwrap();
    let rec = s.recovery_report();
    assert!(rec.dangling.is_empty());
    assert_eq!(rec.orphan_blobs, 2);
    assert!(s.check_integrity().unwrap().is_clean());
    assert_eq!(cells.values(&s, "t"), BTreeMap::from([(0, (1, 2))]));
}

#[test]
fn torn_segment_tail_drops_only_the_affected_row() {
    let cells = Cells::new();
    let dir = tempfile::tempdir().unwrap();
    {
        let s = HybridStore::open(dir.path(), common::store_config()).unwrap();
        s.create_table(common::u32_schema("t", 2)).unwrap();
        s.insert_row("t", cells.row(1, 2), "o").unwrap();
        s.insert_row("t", cells.row(5, 6), "o").unwrap();
    }
    // cut into the last record, as if the final append never reached the disk
    let seg = std::fs::read_dir(dir.path().join("blobs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy() != "tombstones.log")
        .max_by_key(|p| std::fs::metadata(p).unwrap().len())
        .unwrap();
    let f = OpenOptions::new().write(true).open(&seg).unwrap();
    let len = f.metadata().unwrap().len();
    f.set_len(len - 3).unwrap();
    drop(f);

    let s = HybridStore::open(dir.path(), common::store_config()).unwrap();
    assert_eq!(s.recovery_report().dangling.len(), 1);
    assert_eq!(s.recovery_report().dropped_rows, vec![("t".to_string(), 1)]);
    let report = s.check_integrity().unwrap();
    assert!(report.is_clean(), "{report:?}");
    assert_eq!(cells.values(&s, "t"), BTreeMap::from([(0, (1, 2))]));
}

#[test]
fn hot_reads_come_from_memory() {
    use fhesql::storage::CacheTier;
    let dir = tempfile::tempdir().unwrap();
    let s = BlobStore::open(dir.path(), small_segments(8 << 20)).unwrap();
    let h = s.put_blob(&bytes_of(256 << 10, 1)).unwrap();
    s.clear_cache();
    assert_eq!(s.get_blob_traced(&h).unwrap().1, CacheTier::Cold);
    s.get_blob(&h).unwrap();
    assert_eq!(s.get_blob_traced(&h).unwrap().1, CacheTier::Hot);
}
