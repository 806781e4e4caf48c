//! 1xN block partition of a convolution weight tensor and the block mask.
//!
//! Block `(j, k)` covers output channels `j*N .. (j+1)*N` at input channel `k`,
//! i.e. `W[jN..(j+1)N, k, :, :]`. A mask holds one bit per block.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockPartition {
    pub n: usize,
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
}

impl BlockPartition {
    pub fn new(shape: [usize; 4], n: usize, layer: &str) -> Result<Self> {
        let [c_out, c_in, kh, kw] = shape;
        if n == 0 {
            return Err(Error::Config(format!("layer {layer}: block size N must be >= 1")));
        }
        if c_out % n != 0 {
            let divisors: Vec<String> =
                (1..=c_out).filter(|d| c_out % d == 0).map(|d| d.to_string()).collect();
            return Err(Error::Config(format!(
                "layer {layer}: {c_out} output channels are not divisible by N={n}; valid N values: {}",
                divisors.join(", ")
            )));
        }
        Ok(BlockPartition { n, c_out, c_in, kh, kw })
    }

    pub fn of<T: Scalar>(weights: &Tensor<T>, n: usize, layer: &str) -> Result<Self> {
        Self::new(weights.dims4()?, n, layer)
    }

    pub fn num_row_groups(&self) -> usize {
        self.c_out / self.n
    }

    pub fn num_cols(&self) -> usize {
        self.c_in
    }

    pub fn num_blocks(&self) -> usize {
        self.num_row_groups() * self.c_in
    }

    pub fn block_len(&self) -> usize {
        self.n * self.kh * self.kw
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kh, self.kw]
    }

    fn check_weights<T: Scalar>(&self, weights: &Tensor<T>) -> Result<()> {
        if weights.shape() != self.shape() {
            return Err(Error::shape(format!(
                "weights {:?} do not match partition shape {:?}",
                weights.shape(),
                self.shape()
            )));
        }
        Ok(())
    }

    /// Flat offset of the first tap of output channel `o`, input channel `k`.
    #[inline]
    fn offset(&self, o: usize, k: usize) -> usize {
        (o * self.c_in + k) * self.kh * self.kw
    }
}

/// Flattened 1xN block: output channel major, then kernel row, then kernel column.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockVector<T>(pub Vec<T>);

impl<T> BlockVector<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn vectorize<T: Scalar>(
    partition: &BlockPartition,
    weights: &Tensor<T>,
    j: usize,
    k: usize,
) -> Result<BlockVector<T>> {
    partition.check_weights(weights)?;
    if j >= partition.num_row_groups() || k >= partition.c_in {
        return Err(Error::Input(format!(
            "block ({j}, {k}) outside a {}x{} block grid",
            partition.num_row_groups(),
            partition.c_in
        )));
    }
    Ok(BlockVector(block_slice_copy(partition, weights.data(), j, k)))
}

pub(crate) fn block_slice_copy<T: Copy>(p: &BlockPartition, w: &[T], j: usize, k: usize) -> Vec<T> {
    let taps = p.kh * p.kw;
    let mut out = Vec::with_capacity(p.block_len());
    for r in 0..p.n {
        let off = p.offset(j * p.n + r, k);
        out.extend_from_slice(&w[off..off + taps]);
    }
    out
}

/// All block vectors of row group `j`, in input-channel order.
pub fn row_blocks<T: Scalar>(
    partition: &BlockPartition,
    weights: &Tensor<T>,
    j: usize,
) -> Result<Vec<BlockVector<T>>> {
    (0..partition.c_in).map(|k| vectorize(partition, weights, j, k)).collect()
}

/// Inverse of `vectorize` over the whole grid; `blocks` is row-group-major.
pub fn assemble<T: Scalar>(partition: &BlockPartition, blocks: &[BlockVector<T>]) -> Result<Tensor<T>> {
    if blocks.len() != partition.num_blocks() {
        return Err(Error::shape(format!("expected {} blocks, got {}", partition.num_blocks(), blocks.len())));
    }
    let taps = partition.kh * partition.kw;
    let mut w = Tensor::zeros(&partition.shape());
    for (idx, b) in blocks.iter().enumerate() {
        if b.len() != partition.block_len() {
            return Err(Error::shape(format!("block {idx} has length {}", b.len())));
        }
        let (j, k) = (idx / partition.c_in, idx % partition.c_in);
        for r in 0..partition.n {
            let off = partition.offset(j * partition.n + r, k);
            w.data_mut()[off..off + taps].copy_from_slice(&b.0[r * taps..(r + 1) * taps]);
        }
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    partition: BlockPartition,
    bits: Vec<bool>,
}

impl BlockMask {
    pub fn ones(partition: BlockPartition) -> Self {
        BlockMask { partition, bits: vec![true; partition.num_blocks()] }
    }

    pub fn zeros(partition: BlockPartition) -> Self {
        BlockMask { partition, bits: vec![false; partition.num_blocks()] }
    }

    pub fn from_bits(partition: BlockPartition, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != partition.num_blocks() {
            return Err(Error::shape(format!(
                "mask has {} bits, block grid has {}",
                bits.len(),
                partition.num_blocks()
            )));
        }
        Ok(BlockMask { partition, bits })
    }

    /// Builds a mask from the kept input-channel indices of every row group.
    pub fn from_rows(partition: BlockPartition, rows: &[Vec<usize>]) -> Result<Self> {
        if rows.len() != partition.num_row_groups() {
            return Err(Error::shape(format!("expected {} rows, got {}", partition.num_row_groups(), rows.len())));
        }
        let mut mask = BlockMask::zeros(partition);
        for (j, row) in rows.iter().enumerate() {
            for &k in row {
                if k >= partition.c_in {
                    return Err(Error::Input(format!("column {k} out of range in row group {j}")));
                }
                mask.set(j, k, true);
            }
        }
        Ok(mask)
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> bool {
        self.bits[j * self.partition.c_in + k]
    }

    #[inline]
    pub fn set(&mut self, j: usize, k: usize, on: bool) {
        self.bits[j * self.partition.c_in + k] = on;
    }

    pub fn row(&self, j: usize) -> &[bool] {
        let c = self.partition.c_in;
        &self.bits[j * c..(j + 1) * c]
    }

    pub fn kept_indices(&self, j: usize) -> Vec<usize> {
        self.row(j).iter().enumerate().filter(|(_, &b)| b).map(|(k, _)| k).collect()
    }

    pub fn row_counts(&self) -> Vec<usize> {
        (0..self.partition.num_row_groups()).map(|j| self.row(j).iter().filter(|&&b| b).count()).collect()
    }

    pub fn kept_blocks(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.kept_blocks() as f64 / self.partition.num_blocks() as f64
    }

    /// Common per-row count if every row group keeps the same number of blocks.
    pub fn uniform_count(&self) -> Option<usize> {
        let counts = self.row_counts();
        let first = *counts.first()?;
        counts.iter().all(|&c| c == first).then_some(first)
    }

    /// Per-weight gate in the `(C_out, C_in, Kh, Kw)` layout.
    pub fn element_gate(&self) -> Vec<bool> {
        let p = &self.partition;
        let taps = p.kh * p.kw;
        let mut gate = Vec::with_capacity(p.c_out * p.c_in * taps);
        for o in 0..p.c_out {
            let row = self.row(o / p.n);
            for &on in row {
                gate.extend(std::iter::repeat_n(on, taps));
            }
        }
        gate
    }

    /// Checks that every row group keeps exactly `expected` blocks.
    pub fn check_row_counts(&self, expected: usize) -> Result<()> {
        let offenders: Vec<String> = self
            .row_counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != expected)
            .map(|(j, c)| format!("{j} (keeps {c})"))
            .collect();
        if offenders.is_empty() {
            Ok(())
        } else {
            Err(Error::Invariant(format!(
                "row groups not keeping {expected} blocks: {}",
                offenders.join(", ")
            )))
        }
    }
}

/// Number of blocks a row group keeps at prune rate `p`: `ceil(C_in * (1 - p))`.
pub fn kept_per_group(c_in: usize, p: f64) -> usize {
    // The small slack absorbs representation error such as 10 * (1 - 0.7) = 3.0000000000000004.
    let exact = c_in as f64 * (1.0 - p);
    ((exact - 1e-9).ceil().max(0.0) as usize).min(c_in)
}

pub fn assert_uniform(mask: &BlockMask, p: f64) -> Result<usize> {
    let kept = kept_per_group(mask.partition.c_in, p);
    mask.check_row_counts(kept)?;
    Ok(kept)
}

/// Multiplies every weight of block `(j, k)` by `M[j, k]`; the input is not modified.
pub fn apply_mask<T: Scalar>(weights: &Tensor<T>, mask: &BlockMask) -> Result<Tensor<T>> {
    mask.partition.check_weights(weights)?;
    let mut out = weights.clone();
    apply_mask_in_place(out.data_mut(), mask);
    Ok(out)
}

pub(crate) fn apply_mask_in_place<T: Scalar>(w: &mut [T], mask: &BlockMask) {
    let p = &mask.partition;
    let taps = p.kh * p.kw;
    for o in 0..p.c_out {
        let row = mask.row(o / p.n);
        for (k, &on) in row.iter().enumerate() {
            if !on {
                let off = p.offset(o, k);
                w[off..off + taps].fill(T::zero());
            }
        }
    }
}
