//! Block-sparse kernels against a dense-masked oracle, worker invariance and
//! workload accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subp::bench::{bench_kernel, skewed_mask, BenchConfig, BenchMode};
use subp::bsr::{decode, encode};
use subp::conv::{conv2d_forward, im2col, ConvLayerParams};
use subp::controller::prune_step;
use subp::infer::{bsr_conv2d, bsr_matmul, bsr_matmul_report, ragged_matmul_report, schedule_row_groups, RaggedBsrLayer};
use subp::mask::apply_mask;
use subp::{BlockMask, BlockPartition, Criterion, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// `patches (P, D) x masked_w^T (D, C_out) + bias` in f64.
fn dense_oracle(patches: &Tensor, masked: &Tensor, bias: &[f32]) -> Vec<f64> {
    let [p, d] = patches.dims2().unwrap();
    let c_out = masked.shape()[0];
    let mut out = vec![0.0f64; p * c_out];
    for i in 0..p {
        for o in 0..c_out {
            let mut acc = bias[o] as f64;
            for x in 0..d {
                acc += patches.data()[i * d + x] as f64 * masked.data()[o * d + x] as f64;
            }
            out[i * c_out + o] = acc;
        }
    }
    out
}

fn assert_close(got: &[f32], want: &[f64]) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((*g as f64 - w).abs() <= 1e-5 * w.abs().max(1.0), "{g} vs {w}");
    }
}

/// `(c_out, c_in, k, batch, h, w, stride)`; `c_out` divisible by every tested N.
const SHAPES: [(usize, usize, usize, usize, usize, usize, usize); 3] =
    [(32, 8, 3, 2, 6, 6, 1), (48, 12, 1, 1, 5, 7, 1), (64, 5, 3, 2, 7, 7, 2)];

#[test]
fn kernels_match_dense_masked_oracle_over_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for (c_out, c_in, k, b, h, w, stride) in SHAPES {
        for n in [2, 4, 8, 16] {
            for p in [0.25, 0.5, 0.75] {
                let weights = random(&[c_out, c_in, k, k], &mut rng);
                let bias: Vec<f32> = (0..c_out).map(|_| rng.random_range(-0.5..0.5)).collect();
                let part = BlockPartition::of(&weights, n, "l").unwrap();
                let (mask, _) = prune_step(&weights, &part, p, Criterion::Bpar, 1.0, true).unwrap();
                let layer = encode(&weights, &bias, &mask).unwrap();
                let masked = apply_mask(&weights, &mask).unwrap();
                let x = random(&[b, c_in, h, w], &mut rng);
                let pad = k / 2;

                let patches = im2col(&x, (k, k), stride, pad).unwrap();
                let want = dense_oracle(&patches, &masked, &bias);
                let one = bsr_matmul(&layer, &patches, 1).unwrap();
                assert_close(one.data(), &want);
                for workers in [2, 4] {
                    assert_eq!(bsr_matmul(&layer, &patches, workers).unwrap(), one);
                }

                let bias64 = bias.iter().map(|&v| v as f64).collect();
                let dense = ConvLayerParams::new(masked.cast::<f64>(), bias64, stride, pad).unwrap();
                let want_conv = conv2d_forward(&dense, &x.cast::<f64>()).unwrap();
                let conv1 = bsr_conv2d(&layer, &x, stride, pad, 1).unwrap();
                assert_eq!(conv1.shape(), want_conv.shape());
                assert_close(conv1.data(), want_conv.data());
                for workers in [2, 4] {
                    assert_eq!(bsr_conv2d(&layer, &x, stride, pad, workers).unwrap(), conv1);
                }
            }
        }
    }
}

#[test]
fn all_ones_mask_equals_dense_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let weights = random(&[8, 6, 3, 3], &mut rng);
    let bias = vec![0.25; 8];
    let part = BlockPartition::of(&weights, 4, "l").unwrap();
    let layer = encode(&weights, &bias, &BlockMask::ones(part)).unwrap();
    assert_eq!(layer.kept_per_group, 6);
    // Values are the block vectors laid end to end, row group by row group.
    let mut blocks = Vec::new();
    for j in 0..2 {
        for k in 0..6 {
            blocks.extend(subp::mask::vectorize(&part, &weights, j, k).unwrap().0);
        }
    }
    assert_eq!(layer.values, blocks);
    let x = random(&[1, 6, 5, 5], &mut rng);
    let dense = conv2d_forward(&ConvLayerParams::new(weights, bias, 1, 1).unwrap(), &x).unwrap();
    let sparse = bsr_conv2d(&layer, &x, 1, 1, 3).unwrap();
    for (a, b) in sparse.data().iter().zip(dense.data()) {
        assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
    }
}

#[test]
fn single_block_touches_only_its_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let weights = random(&[12, 3, 3, 3], &mut rng);
    let part = BlockPartition::of(&weights, 4, "l").unwrap();
    let mut mask = BlockMask::zeros(part);
    mask.set(1, 2, true);
    let ragged = RaggedBsrLayer::from_mask(&weights, &[0.0; 12], &mask).unwrap();
    let patches = im2col(&random(&[1, 3, 4, 4], &mut rng), (3, 3), 1, 1).unwrap();
    let (out, report) = ragged_matmul_report(&ragged, &patches, 2).unwrap();
    assert_eq!(report.total_blocks(), 1);
    for row in out.data().chunks(12) {
        for (o, v) in row.iter().enumerate() {
            if !(4..8).contains(&o) {
                assert_eq!(*v, 0.0);
            }
        }
    }
    assert!(out.data().chunks(12).any(|r| r[4..8].iter().any(|v| *v != 0.0)));
}

#[test]
fn zero_input_gives_bias_and_one_by_one_is_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let weights = random(&[8, 4, 1, 1], &mut rng);
    let bias: Vec<f32> = (0..8).map(|o| o as f32).collect();
    let mask = BlockMask::from_rows(BlockPartition::of(&weights, 4, "l").unwrap(), &[vec![0, 2], vec![1, 3]]).unwrap();
    let layer = encode(&weights, &bias, &mask).unwrap();
    assert_eq!(layer.col_indices, vec![0, 2, 1, 3]);
    let zero = bsr_conv2d(&layer, &Tensor::zeros(&[1, 4, 3, 3]), 1, 0, 2).unwrap();
    for (i, v) in zero.data().iter().enumerate() {
        assert_eq!(*v, bias[i / 9]);
    }
    // 1x1 conv on a 1x1 image is the matmul itself.
    let x = random(&[5, 4, 1, 1], &mut rng);
    let conv = bsr_conv2d(&layer, &x, 1, 0, 1).unwrap();
    let mm = bsr_matmul(&layer, &Tensor::from_vec(&[5, 4], x.data().to_vec()).unwrap(), 1).unwrap();
    assert_eq!(conv.data(), mm.data());
    let dec = decode(&layer).unwrap();
    assert_close(mm.data(), &dense_oracle(&Tensor::from_vec(&[5, 4], x.into_data()).unwrap(), &dec, &bias));
}

#[test]
fn contiguous_schedule() {
    let sizes = |g, w| schedule_row_groups(g, w).iter().map(|r| r.len()).collect::<Vec<_>>();
    assert_eq!(sizes(8, 2), vec![4, 4]);
    assert_eq!(sizes(7, 2), vec![4, 3]);
    for g in 1..40 {
        for w in 1..9 {
            let ranges = schedule_row_groups(g, w);
            let lens: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
            assert_eq!(lens.iter().sum::<usize>(), g);
            assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
            assert!(ranges.windows(2).all(|p| p[0].end == p[1].start));
        }
    }
}

#[test]
fn uniform_workload_is_balanced() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let weights = random(&[32, 16, 3, 3], &mut rng);
    let part = BlockPartition::of(&weights, 4, "l").unwrap();
    let (mask, _) = prune_step(&weights, &part, 0.5, Criterion::L1, 0.0, true).unwrap();
    let layer = encode(&weights, &[0.0; 32], &mask).unwrap();
    let patches = im2col(&random(&[1, 16, 4, 4], &mut rng), (3, 3), 1, 1).unwrap();
    let (_, report) = bsr_matmul_report(&layer, &patches, 2).unwrap();
    let blocks: Vec<usize> = report.workers.iter().map(|w| w.blocks).collect();
    assert_eq!(blocks, vec![32, 32]);
    for workers in 1..8 {
        let (_, r) = bsr_matmul_report(&layer, &patches, workers).unwrap();
        assert_eq!(r.total_blocks(), 64);
        let g = 8usize;
        let bound = 8 * (g.div_ceil(workers) - g / workers);
        assert!(r.max_blocks() - r.min_blocks() <= bound);
    }
}

#[test]
fn constructed_skew_is_imbalanced() {
    // One row group fully dense, the other empty.
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let weights = random(&[8, 6, 3, 3], &mut rng);
    let part = BlockPartition::of(&weights, 4, "l").unwrap();
    let mask = skewed_mask(part, 6);
    assert_eq!(mask.row_counts(), vec![6, 0]);
    let ragged = RaggedBsrLayer::from_mask(&weights, &[0.0; 8], &mask).unwrap();
    let patches = im2col(&random(&[1, 6, 4, 4], &mut rng), (3, 3), 1, 1).unwrap();
    let (out, report) = ragged_matmul_report(&ragged, &patches, 2).unwrap();
    assert_eq!((report.max_blocks(), report.min_blocks()), (6, 0));
    assert!(encode(&weights, &[0.0; 8], &mask).is_err());
    let want = dense_oracle(&patches, &apply_mask(&weights, &mask).unwrap(), &[0.0; 8]);
    assert_close(out.data(), &want);
}

#[test]
fn bench_modes_report_work() {
    let cfg = |mode, p, workers| BenchConfig {
        shape: "32,16,3,3,6,6".parse().unwrap(),
        n: 4,
        p,
        mode,
        workers,
        warmup: 1,
        repeats: 3,
        seed: 3,
    };
    for p in [0.25, 0.5, 0.75] {
        let dense = bench_kernel(&cfg(BenchMode::Dense, p, 2)).unwrap();
        let uniform = bench_kernel(&cfg(BenchMode::Uniform, p, 2)).unwrap();
        assert_eq!(dense.flops as f64 * (1.0 - p), uniform.flops as f64);
        assert_eq!(uniform.report.min_blocks(), uniform.report.max_blocks());
    }
    let skew = bench_kernel(&cfg(BenchMode::Skewed, 0.5, 2)).unwrap();
    assert!(skew.report.max_blocks() >= 2 * skew.report.min_blocks().max(1));
    let nonuniform = bench_kernel(&cfg(BenchMode::NonUniform, 0.5, 2)).unwrap();
    assert_eq!(nonuniform.report.total_blocks(), 64);
    assert_eq!(skew.csv_row().split(',').count(), subp::bench::CSV_HEADER.split(',').count());
}
