//! `.subp` bytes on disk: golden file, corruption handling and storage accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subp::bsr::{encode, storage_footprint, LayerRecord};
use subp::controller::prune_step;
use subp::format::{deserialize, read_file, serialize, write_file};
use subp::{BlockMask, BlockPartition, BsrModel, Criterion, Error, Tensor};

#[rustfmt::skip]
const GOLDEN: [u8; 61] = [
    b'S', b'U', b'B', b'P', b'1', b'x', b'N', 0,
    1, 0, 0, 0,             // version
    1, 0, 0, 0,             // layer count
    1,                      // kind: bsr
    2, 0, 0, 0,             // N
    2, 0, 0, 0,             // C_out
    2, 0, 0, 0,             // C_in
    1, 0, 0, 0,             // Kh
    1, 0, 0, 0,             // Kw
    1, 0, 0, 0,             // K
    1, 0, 0, 0,             // col_indices[0]
    0x00, 0x00, 0x80, 0x3f, // 1.0
    0x00, 0x00, 0x00, 0xc0, // -2.0
    0x00, 0x00, 0x00, 0x3f, // bias 0.5
    0x00, 0x00, 0x00, 0x00, // bias 0.0
];

fn golden_model() -> BsrModel {
    let w = Tensor::from_vec(&[2, 2, 1, 1], vec![0.0, 1.0, 0.0, -2.0]).unwrap();
    let mask = BlockMask::from_rows(BlockPartition::of(&w, 2, "only").unwrap(), &[vec![1]]).unwrap();
    BsrModel { layers: vec![LayerRecord::Bsr(encode(&w, &[0.5, 0.0], &mask).unwrap())] }
}

#[test]
fn golden_bytes() {
    let bytes = serialize(&golden_model()).unwrap();
    assert_eq!(bytes, GOLDEN);
    assert_eq!(deserialize(&GOLDEN).unwrap(), golden_model());
}

#[test]
fn empty_model_is_header_only() {
    let bytes = serialize(&BsrModel { layers: vec![] }).unwrap();
    assert_eq!(bytes.len(), 16);
    assert!(deserialize(&bytes).unwrap().layers.is_empty());
}

#[test]
fn file_round_trip() {
    let dir = std::env::temp_dir().join(format!("subp-format-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.subp");
    write_file(&path, &golden_model()).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), GOLDEN);
    assert_eq!(read_file(&path).unwrap(), golden_model());
    std::fs::remove_dir_all(&dir).unwrap();
}

fn offset_of(bytes: &[u8]) -> usize {
    match deserialize(bytes) {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn corruption_is_reported_with_offsets() {
    let mut bad = GOLDEN;
    bad[0] = b'X';
    assert_eq!(offset_of(&bad), 0);
    let mut bad = GOLDEN;
    bad[8] = 2;
    assert_eq!(offset_of(&bad), 8);
    let mut bad = GOLDEN;
    bad[16] = 9;
    assert_eq!(offset_of(&bad), 16);
    // Column index out of range.
    let mut bad = GOLDEN;
    bad[41] = 7;
    assert_eq!(offset_of(&bad), 41);
    // Truncation anywhere past the magic reports where the read started.
    for cut in [4, 10, 20, 45, 60] {
        assert!(offset_of(&GOLDEN[..cut]) <= cut);
    }
    let mut long = GOLDEN.to_vec();
    long.push(0);
    assert_eq!(offset_of(&long), 61);
    assert!(deserialize(&[]).is_err());
}

#[test]
fn value_bytes_scale_with_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = Tensor::from_vec(&[32, 16, 3, 3], (0..32 * 16 * 9).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    let part = BlockPartition::of(&w, 4, "l").unwrap();
    let full = storage_footprint(&encode(&w, &[0.0; 32], &BlockMask::ones(part)).unwrap());
    assert_eq!(full.value_bytes, full.dense_bytes);
    for p in [0.25, 0.5, 0.75] {
        let (mask, _) = prune_step(&w, &part, p, Criterion::Bpar, 1.0, true).unwrap();
        let fp = storage_footprint(&encode(&w, &[0.0; 32], &mask).unwrap());
        assert_eq!(fp.value_bytes as f64 / fp.dense_bytes as f64, 1.0 - p);
        assert_eq!(fp.dense_bytes, 4 * 32 * 16 * 9);
        assert_eq!(fp.index_bytes * 4 * 9, fp.value_bytes);
    }
}

#[test]
fn index_overhead_shrinks_with_block_height() {
    let mut last = f64::INFINITY;
    for n in [2, 4, 8, 16, 32] {
        let w = Tensor::zeros(&[32, 8, 3, 3]);
        let part = BlockPartition::of(&w, n, "l").unwrap();
        let rows: Vec<Vec<usize>> = (0..part.num_row_groups()).map(|_| vec![0, 3, 5, 6]).collect();
        let fp = storage_footprint(&encode(&w, &[0.0; 32], &BlockMask::from_rows(part, &rows).unwrap()).unwrap());
        let overhead = fp.index_bytes as f64 / fp.value_bytes as f64;
        assert_eq!(overhead, 1.0 / (n * 9) as f64);
        if n == 16 {
            assert_eq!(overhead, 1.0 / 144.0);
        }
        assert!(overhead < last);
        last = overhead;
    }
}
