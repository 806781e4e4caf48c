//! Multithreaded block-sparse inference.
//!
//! Work is split across workers by contiguous ranges of row groups; a worker
//! owns the output rows of its groups outright, so no accumulation crosses
//! workers and results do not depend on the worker count. Inside a row group
//! blocks are accumulated in ascending column order.

use std::ops::Range;
use std::time::{Duration, Instant};

use crate::bsr::{BsrLayer, BsrModel, LayerRecord};
use crate::conv::{axpy, im2col_raw, ConvGeometry};
use crate::error::{Error, Result};
use crate::loss::argmax_rows;
use crate::mask::BlockMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Contiguous chunks of row groups; the first `groups % workers` chunks get one extra.
pub fn schedule_row_groups(groups: usize, workers: usize) -> Vec<Range<usize>> {
    let workers = workers.max(1);
    let (base, extra) = (groups / workers, groups % workers);
    let mut start = 0;
    (0..workers)
        .map(|w| {
            let len = base + usize::from(w < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkerLoad {
    pub row_groups: Range<usize>,
    /// Non-zero blocks processed.
    pub blocks: usize,
    /// Block multiply-accumulates: one per stored block per patch.
    pub block_macs: u64,
    pub elapsed: Duration,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorkloadReport {
    pub workers: Vec<WorkerLoad>,
}

impl WorkloadReport {
    pub fn total_blocks(&self) -> usize {
        self.workers.iter().map(|w| w.blocks).sum()
    }

    pub fn min_blocks(&self) -> usize {
        self.workers.iter().map(|w| w.blocks).min().unwrap_or(0)
    }

    pub fn max_blocks(&self) -> usize {
        self.workers.iter().map(|w| w.blocks).max().unwrap_or(0)
    }

    /// `max / min` per-worker block count; infinite when some worker has none.
    pub fn imbalance(&self) -> f64 {
        let (lo, hi) = (self.min_blocks(), self.max_blocks());
        if lo == 0 {
            if hi == 0 { 1.0 } else { f64::INFINITY }
        } else {
            hi as f64 / lo as f64
        }
    }
}

/// Block-sparse layer with explicit row pointers, so row groups may keep
/// different numbers of blocks. Used as the non-uniform baseline only.
#[derive(Clone, Debug, PartialEq)]
pub struct RaggedBsrLayer<T> {
    pub n: usize,
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub row_ptr: Vec<usize>,
    pub col_indices: Vec<u32>,
    pub values: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> RaggedBsrLayer<T> {
    pub fn from_mask(weights: &Tensor<T>, bias: &[T], mask: &BlockMask) -> Result<Self> {
        let part = *mask.partition();
        if weights.shape() != part.shape() || bias.len() != part.c_out {
            return Err(Error::shape("weights or bias do not match the mask grid"));
        }
        let mut row_ptr = vec![0];
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for j in 0..part.num_row_groups() {
            for c in mask.kept_indices(j) {
                col_indices.push(c as u32);
                values.extend(crate::mask::block_slice_copy(&part, weights.data(), j, c));
            }
            row_ptr.push(col_indices.len());
        }
        Ok(RaggedBsrLayer {
            n: part.n,
            c_out: part.c_out,
            c_in: part.c_in,
            kh: part.kh,
            kw: part.kw,
            row_ptr,
            col_indices,
            values,
            bias: bias.to_vec(),
        })
    }

    pub fn num_row_groups(&self) -> usize {
        self.c_out / self.n
    }
}

/// Borrowed view shared by the uniform and ragged kernels.
struct BlockRows<'a, T> {
    n: usize,
    taps: usize,
    d: usize,
    row_ptr: Box<dyn Fn(usize) -> Range<usize> + Sync + 'a>,
    col_indices: &'a [u32],
    values: &'a [T],
    bias: &'a [T],
}

fn transpose<T: Scalar>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

/// Computes the channel-major output `(C_out, P)` from transposed patches `(D, P)`.
fn run_blocks<T: Scalar>(rows: &BlockRows<'_, T>, patches_t: &[T], p: usize, groups: usize, workers: usize) -> (Vec<T>, WorkloadReport) {
    debug_assert_eq!(patches_t.len(), rows.d * p);
    let mut out = vec![T::zero(); groups * rows.n * p];
    let ranges = schedule_row_groups(groups, workers);
    let group_len = rows.n * p;

    let work = |range: Range<usize>, dst: &mut [T]| -> WorkerLoad {
        let started = Instant::now();
        let mut blocks = 0;
        for (local, j) in range.clone().enumerate() {
            let out_group = &mut dst[local * group_len..(local + 1) * group_len];
            for r in 0..rows.n {
                out_group[r * p..(r + 1) * p].fill(rows.bias[j * rows.n + r]);
            }
            for b in (rows.row_ptr)(j) {
                let c = rows.col_indices[b] as usize;
                let block = &rows.values[b * rows.n * rows.taps..(b + 1) * rows.n * rows.taps];
                for r in 0..rows.n {
                    let dst_row = &mut out_group[r * p..(r + 1) * p];
                    for e in 0..rows.taps {
                        let src = &patches_t[(c * rows.taps + e) * p..(c * rows.taps + e + 1) * p];
                        axpy(block[r * rows.taps + e], src, dst_row);
                    }
                }
                blocks += 1;
            }
        }
        WorkerLoad { row_groups: range, blocks, block_macs: (blocks * p) as u64, elapsed: started.elapsed() }
    };

    let mut chunks = Vec::with_capacity(ranges.len());
    let mut rest = out.as_mut_slice();
    for r in &ranges {
        let (head, tail) = rest.split_at_mut(r.len() * group_len);
        chunks.push(head);
        rest = tail;
    }
    let loads = if ranges.len() == 1 {
        vec![work(ranges[0].clone(), chunks.pop().expect("one chunk"))]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = ranges
                .iter()
                .cloned()
                .zip(chunks)
                .map(|(range, dst)| {
                    let work = &work;
                    s.spawn(move || work(range, dst))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    (out, WorkloadReport { workers: loads })
}

fn uniform_rows<T: Scalar>(layer: &BsrLayer<T>) -> BlockRows<'_, T> {
    let k = layer.kept_per_group;
    BlockRows {
        n: layer.n,
        taps: layer.kh * layer.kw,
        d: layer.c_in * layer.kh * layer.kw,
        row_ptr: Box::new(move |j| j * k..(j + 1) * k),
        col_indices: &layer.col_indices,
        values: &layer.values,
        bias: &layer.bias,
    }
}

fn check_patches<T: Scalar>(patches: &Tensor<T>, d: usize) -> Result<usize> {
    let [p, cols] = patches.dims2()?;
    if cols != d {
        return Err(Error::shape(format!("patches have {cols} columns, layer expects {d}")));
    }
    Ok(p)
}

/// `patches (P, C_in*Kh*Kw) -> (P, C_out)` using only the stored blocks.
pub fn bsr_matmul<T: Scalar>(layer: &BsrLayer<T>, patches: &Tensor<T>, workers: usize) -> Result<Tensor<T>> {
    Ok(bsr_matmul_report(layer, patches, workers)?.0)
}

pub fn bsr_matmul_report<T: Scalar>(layer: &BsrLayer<T>, patches: &Tensor<T>, workers: usize) -> Result<(Tensor<T>, WorkloadReport)> {
    layer.validate()?;
    let d = layer.c_in * layer.kh * layer.kw;
    let p = check_patches(patches, d)?;
    let pt = transpose(patches.data(), p, d);
    let (out_cm, report) = run_blocks(&uniform_rows(layer), &pt, p, layer.num_row_groups(), workers);
    Ok((Tensor::from_vec(&[p, layer.c_out], transpose(&out_cm, layer.c_out, p))?, report))
}

/// Same contract as `bsr_matmul` for the ragged layout.
pub fn ragged_matmul_report<T: Scalar>(layer: &RaggedBsrLayer<T>, patches: &Tensor<T>, workers: usize) -> Result<(Tensor<T>, WorkloadReport)> {
    let d = layer.c_in * layer.kh * layer.kw;
    let p = check_patches(patches, d)?;
    let pt = transpose(patches.data(), p, d);
    let rows = BlockRows {
        n: layer.n,
        taps: layer.kh * layer.kw,
        d,
        row_ptr: Box::new(|j| layer.row_ptr[j]..layer.row_ptr[j + 1]),
        col_indices: &layer.col_indices,
        values: &layer.values,
        bias: &layer.bias,
    };
    let (out_cm, report) = run_blocks(&rows, &pt, p, layer.num_row_groups(), workers);
    Ok((Tensor::from_vec(&[p, layer.c_out], transpose(&out_cm, layer.c_out, p))?, report))
}

/// Channel-major kernels over pre-transposed patches; used by the benchmark so
/// that layout conversion stays outside the timed region.
pub mod raw {
    use super::*;

    pub fn transpose_patches<T: Scalar>(patches: &Tensor<T>) -> Result<Vec<T>> {
        let [p, d] = patches.dims2()?;
        Ok(transpose(patches.data(), p, d))
    }

    pub fn bsr<T: Scalar>(layer: &BsrLayer<T>, patches_t: &[T], p: usize, workers: usize) -> (Vec<T>, WorkloadReport) {
        run_blocks(&uniform_rows(layer), patches_t, p, layer.num_row_groups(), workers)
    }

    pub fn ragged<T: Scalar>(layer: &RaggedBsrLayer<T>, patches_t: &[T], p: usize, workers: usize) -> (Vec<T>, WorkloadReport) {
        let rows = BlockRows {
            n: layer.n,
            taps: layer.kh * layer.kw,
            d: layer.c_in * layer.kh * layer.kw,
            row_ptr: Box::new(|j| layer.row_ptr[j]..layer.row_ptr[j + 1]),
            col_indices: &layer.col_indices,
            values: &layer.values,
            bias: &layer.bias,
        };
        run_blocks(&rows, patches_t, p, layer.num_row_groups(), workers)
    }

    /// Dense `(C_out, D) x (D, P)` with the same loop structure, split over
    /// groups of `n` output channels. Every group counts as `c_in` blocks.
    pub fn dense<T: Scalar>(
        weights: &[T],
        bias: &[T],
        n: usize,
        c_in: usize,
        patches_t: &[T],
        p: usize,
        workers: usize,
    ) -> (Vec<T>, WorkloadReport) {
        let c_out = bias.len();
        let d = weights.len() / c_out;
        let mut out = vec![T::zero(); c_out * p];
        let ranges = schedule_row_groups(c_out / n, workers);
        let work = |range: Range<usize>, dst: &mut [T]| -> WorkerLoad {
            let started = Instant::now();
            for (local, o) in (range.start * n..range.end * n).enumerate() {
                let row = &mut dst[local * p..(local + 1) * p];
                row.fill(bias[o]);
                for (c, &w) in weights[o * d..(o + 1) * d].iter().enumerate() {
                    axpy(w, &patches_t[c * p..(c + 1) * p], row);
                }
            }
            let blocks = range.len() * c_in;
            WorkerLoad { row_groups: range, blocks, block_macs: (blocks * p) as u64, elapsed: started.elapsed() }
        };
        let mut chunks = Vec::new();
        let mut rest = out.as_mut_slice();
        for r in &ranges {
            let (head, tail) = rest.split_at_mut(r.len() * n * p);
            chunks.push(head);
            rest = tail;
        }
        let loads = if ranges.len() == 1 {
            vec![work(ranges[0].clone(), chunks.pop().expect("one chunk"))]
        } else {
            std::thread::scope(|s| {
                let hs: Vec<_> = ranges
                    .iter()
                    .cloned()
                    .zip(chunks)
                    .map(|(range, dst)| {
                        let work = &work;
                        s.spawn(move || work(range, dst))
                    })
                    .collect();
                hs.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        (out, WorkloadReport { workers: loads })
    }
}

fn channel_major_to_nchw<T: Scalar>(out_cm: &[T], c_out: usize, geo: &ConvGeometry) -> Vec<T> {
    let pix = geo.out_h * geo.out_w;
    let p = geo.batch * pix;
    let mut out = vec![T::zero(); out_cm.len()];
    for co in 0..c_out {
        for b in 0..geo.batch {
            out[(b * c_out + co) * pix..(b * c_out + co + 1) * pix].copy_from_slice(&out_cm[co * p + b * pix..co * p + (b + 1) * pix]);
        }
    }
    out
}

/// Sparse convolution: im2col followed by the block-sparse product, NCHW in and out.
pub fn bsr_conv2d<T: Scalar>(layer: &BsrLayer<T>, input: &Tensor<T>, stride: usize, padding: usize, workers: usize) -> Result<Tensor<T>> {
    layer.validate()?;
    let shape = input.dims4()?;
    if shape[1] != layer.c_in {
        return Err(Error::shape(format!("input has {} channels, layer expects {}", shape[1], layer.c_in)));
    }
    let geo = ConvGeometry::new(shape, (layer.kh, layer.kw), stride, padding)?;
    let patches = im2col_raw(input.data(), &geo);
    let pt = transpose(&patches, geo.patches(), geo.patch_len());
    let (out_cm, _) = run_blocks(&uniform_rows(layer), &pt, geo.patches(), layer.num_row_groups(), workers);
    Tensor::from_vec(&[geo.batch, layer.c_out, geo.out_h, geo.out_w], channel_major_to_nchw(&out_cm, layer.c_out, &geo))
}

impl<T: Scalar> BsrModel<T> {
    /// Logits for an NCHW batch. Dense convs run through the dense path, BSR convs
    /// through `bsr_conv2d`; the last record is the classifier.
    pub fn forward(&self, input: &Tensor<T>, workers: usize) -> Result<Tensor<T>> {
        self.validate()?;
        let Some((classifier, convs)) = self.layers.split_last() else {
            return Err(Error::Input("model has no layers".into()));
        };
        if convs.is_empty() {
            return Err(Error::Input("model needs at least one conv layer before the classifier".into()));
        }
        let mut x = input.clone();
        for layer in convs {
            let [_, _, kh, _] = layer.shape();
            let pad = (kh - 1) / 2;
            x = match layer {
                LayerRecord::Bsr(b) => bsr_conv2d(b, &x, 1, pad, workers)?,
                LayerRecord::Dense(d) => {
                    let params = crate::conv::ConvLayerParams::new(d.weights()?, d.bias.clone(), 1, pad)?;
                    crate::conv::conv2d_forward(&params, &x)?
                }
            };
            for v in x.data_mut() {
                *v = v.max(T::zero());
            }
        }
        let [batch, c, h, w] = x.dims4()?;
        let [classes, c_in, kh, kw] = classifier.shape();
        if (kh, kw) != (1, 1) {
            return Err(Error::shape("classifier record must be 1x1"));
        }
        if c_in != c {
            return Err(Error::shape("classifier input does not match the last conv"));
        }
        let (weights, bias) = match classifier {
            LayerRecord::Dense(d) => (d.values.clone(), d.bias.clone()),
            LayerRecord::Bsr(b) => (crate::bsr::decode(b)?.into_data(), b.bias.clone()),
        };
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let mut logits = vec![T::zero(); batch * classes];
        for b in 0..batch {
            let feat: Vec<T> = (0..c).map(|ch| x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum::<T>() * inv).collect();
            for o in 0..classes {
                logits[b * classes + o] = bias[o] + crate::conv::dot(&feat, &weights[o * c..(o + 1) * c]);
            }
        }
        Tensor::from_vec(&[batch, classes], logits)
    }

    pub fn predict(&self, input: &Tensor<T>, workers: usize) -> Result<Vec<usize>> {
        argmax_rows(&self.forward(input, workers)?)
    }
}
