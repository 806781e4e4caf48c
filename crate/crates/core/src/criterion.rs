//! Block importance scores: plain l1 magnitude and BPAR (block pruning via
//! angular redundancy), which rewards magnitude and penalises blocks that
//! point in the same direction as the rest of their row group.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::{block_slice_copy, BlockPartition, BlockVector};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Criterion {
    L1,
    #[default]
    Bpar,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::L1 => "l1",
            Criterion::Bpar => "bpar",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Criterion::L1),
            "bpar" => Ok(Criterion::Bpar),
            other => Err(Error::Config(format!("unknown criterion '{other}' (expected l1 or bpar)"))),
        }
    }
}

/// Cosine similarity. If either vector is all zero the angle is taken as 0, so the result is 1.
pub fn cosine_sim<T: Scalar>(a: &BlockVector<T>, b: &BlockVector<T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine of vectors with lengths {} and {}", a.len(), b.len())));
    }
    Ok(cosine_raw(a.as_slice(), b.as_slice(), l2(a.as_slice()), l2(b.as_slice())))
}

fn l2<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn l1<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|x| x.abs()).sum()
}

#[inline]
fn cosine_raw<T: Scalar>(a: &[T], b: &[T], na: T, nb: T) -> T {
    if na == T::zero() || nb == T::zero() {
        return T::one();
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    // Rounding can push |cos| slightly past 1 for parallel vectors.
    (dot / (na * nb)).max(-T::one()).min(T::one())
}

pub fn l1_scores<T: Scalar>(row: &[BlockVector<T>]) -> Vec<T> {
    row.iter().map(|b| l1(b.as_slice())).collect()
}

/// BPAR scores for one row group.
///
/// `S_k = |b_k|_1 / sum_m |b_m|_1 - lambda * sum_m |cos(b_k, b_m)| / sum_n sum_m |cos(b_n, b_m)|`,
/// with the diagonal `m = k` included in both sums.
pub fn bpar_scores<T: Scalar>(row: &[BlockVector<T>], lambda: T) -> Result<Vec<T>> {
    let slices: Vec<&[T]> = row.iter().map(|b| b.as_slice()).collect();
    bpar_row(&slices, lambda, 0)
}

fn bpar_row<T: Scalar>(row: &[&[T]], lambda: T, j: usize) -> Result<Vec<T>> {
    let n = row.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let len = row[0].len();
    if row.iter().any(|b| b.len() != len) {
        return Err(Error::shape(format!("row group {j} mixes block lengths")));
    }
    let norms1: Vec<T> = row.iter().map(|b| l1(b)).collect();
    let total1: T = norms1.iter().copied().sum();
    if total1 == T::zero() {
        return Err(Error::DegenerateRow { row: j });
    }
    let norms2: Vec<T> = row.iter().map(|b| l2(b)).collect();
    let mut redundancy = vec![T::zero(); n];
    for k in 0..n {
        redundancy[k] += T::one();
        for m in k + 1..n {
            let c = cosine_raw(row[k], row[m], norms2[k], norms2[m]).abs();
            redundancy[k] += c;
            redundancy[m] += c;
        }
    }
    let total_red: T = redundancy.iter().copied().sum();
    Ok((0..n).map(|k| norms1[k] / total1 - lambda * redundancy[k] / total_red).collect())
}

/// Scores for every block of a layer, row-group-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<T>,
    pub criterion: Criterion,
    pub lambda: f64,
}

impl<T: Scalar> ScoreMatrix<T> {
    pub fn row(&self, j: usize) -> &[T] {
        &self.values[j * self.cols..(j + 1) * self.cols]
    }

    pub fn get(&self, j: usize, k: usize) -> T {
        self.values[j * self.cols + k]
    }
}

/// Scores every block of `weights`; pruned blocks are scored from their stored values too.
pub fn score_layer<T: Scalar>(
    weights: &Tensor<T>,
    partition: &BlockPartition,
    criterion: Criterion,
    lambda: f64,
) -> Result<ScoreMatrix<T>> {
    if weights.shape() != partition.shape() {
        return Err(Error::shape(format!(
            "weights {:?} do not match partition {:?}",
            weights.shape(),
            partition.shape()
        )));
    }
    let rows = partition.num_row_groups();
    let cols = partition.c_in;
    let mut values = Vec::with_capacity(rows * cols);
    for j in 0..rows {
        let blocks: Vec<Vec<T>> = (0..cols).map(|k| block_slice_copy(partition, weights.data(), j, k)).collect();
        match criterion {
            Criterion::L1 => values.extend(blocks.iter().map(|b| l1(b))),
            Criterion::Bpar => {
                let slices: Vec<&[T]> = blocks.iter().map(|b| b.as_slice()).collect();
                values.extend(bpar_row(&slices, T::lit(lambda), j)?);
            }
        }
    }
    Ok(ScoreMatrix { rows, cols, values, criterion, lambda })
}
