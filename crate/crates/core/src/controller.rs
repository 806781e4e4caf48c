//! Soft uniform block pruning controller.
//!
//! At every update epoch inside `(t_s, t_e]` each prunable layer is pruned to its
//! top-scoring blocks per row group, then a decaying number of pruned blocks is
//! sampled back in with probabilities `softmax(score / tau)`. Pruned weights are
//! kept in storage so that they can be scored and regrown later.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::criterion::{score_layer, Criterion, ScoreMatrix};
use crate::error::{Error, Result};
use crate::mask::{kept_per_group, BlockMask, BlockPartition};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SubpSchedule {
    /// Target prune rate.
    pub p: f64,
    /// Regrow factor right after `t_s`.
    pub delta0: f64,
    pub t_s: usize,
    pub t_e: usize,
    /// Softmax temperature for regrow sampling.
    pub tau: f64,
    /// Weight of the angular redundancy term in BPAR.
    pub lambda: f64,
    pub update_period: usize,
    pub criterion: Criterion,
    /// `false` selects the layer-wide (non-uniform) baseline.
    pub uniform: bool,
}

impl Default for SubpSchedule {
    fn default() -> Self {
        SubpSchedule {
            p: 0.5,
            delta0: 0.2,
            t_s: 10,
            t_e: 180,
            tau: 1.0,
            lambda: 1.0,
            update_period: 1,
            criterion: Criterion::Bpar,
            uniform: true,
        }
    }
}

impl SubpSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.p > 0.0 && self.p < 1.0) {
            return bad(format!("prune rate p={} must lie in (0, 1)", self.p));
        }
        if !(self.delta0 >= 0.0 && self.delta0 <= self.p) {
            return bad(format!("delta0={} must lie in [0, p={}]", self.delta0, self.p));
        }
        if self.t_s >= self.t_e {
            return bad(format!("t_s={} must be smaller than t_e={}", self.t_s, self.t_e));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau={} must be positive", self.tau));
        }
        if !self.lambda.is_finite() {
            return bad("lambda must be finite".into());
        }
        if self.update_period == 0 {
            return bad("update_period must be >= 1".into());
        }
        Ok(())
    }

    /// Whether a prune/regrow event happens at epoch `t`. `t_e` always updates so
    /// the final mask sits exactly at the target sparsity.
    pub fn is_update_epoch(&self, t: usize) -> bool {
        t > self.t_s && t <= self.t_e && (t.is_multiple_of(self.update_period) || t == self.t_e)
    }
}

/// Regrow factor at epoch `t`.
pub fn delta_schedule(t: usize, s: &SubpSchedule) -> f64 {
    if t <= s.t_s {
        1.0 - s.p
    } else if t <= s.t_e {
        let frac = (t - s.t_s) as f64 / (s.t_e - s.t_s) as f64;
        s.delta0 * (1.0 - frac).powi(3)
    } else {
        0.0
    }
}

/// Blocks regrown per row group: `floor(delta * C_in)`, capped by the number pruned.
pub fn regrow_count(c_in: usize, p: f64, delta: f64) -> usize {
    let pruned = c_in - kept_per_group(c_in, p);
    (((delta * c_in as f64) + 1e-9).floor().max(0.0) as usize).min(pruned)
}

/// Row-group block count right after an update at regrow factor `delta`.
pub fn expected_row_count(c_in: usize, p: f64, delta: f64) -> usize {
    kept_per_group(c_in, p) + regrow_count(c_in, p, delta)
}

/// Indices of the `k` largest scores in rank order; equal scores rank by lower index.
pub fn arg_top_k<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Prune stage: keeps the top `ceil(C_in (1 - p))` blocks of every row group
/// (uniform), or the top `ceil(G C_in (1 - p))` blocks of the whole layer.
pub fn prune_step<T: Scalar>(
    weights: &Tensor<T>,
    partition: &BlockPartition,
    p: f64,
    criterion: Criterion,
    lambda: f64,
    uniform: bool,
) -> Result<(BlockMask, ScoreMatrix<T>)> {
    let scores = score_layer(weights, partition, criterion, lambda)?;
    let mask = if uniform {
        let keep = kept_per_group(partition.c_in, p);
        let rows: Vec<Vec<usize>> =
            (0..partition.num_row_groups()).map(|j| arg_top_k(scores.row(j), keep)).collect();
        BlockMask::from_rows(*partition, &rows)?
    } else {
        let keep = kept_per_group(partition.num_blocks(), p);
        let mut bits = vec![false; partition.num_blocks()];
        for i in arg_top_k(&scores.values, keep) {
            bits[i] = true;
        }
        BlockMask::from_bits(*partition, bits)?
    };
    Ok((mask, scores))
}

/// Draws `count` distinct entries of `candidates` with probabilities
/// proportional to `exp(score / tau)`, renormalising after every draw.
pub fn sample_without_replacement<R: Rng>(
    candidates: &[usize],
    scores: &[f64],
    tau: f64,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    debug_assert_eq!(candidates.len(), scores.len());
    let count = count.min(candidates.len());
    if count == 0 {
        return Vec::new();
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pool: Vec<(usize, f64)> =
        candidates.iter().zip(scores).map(|(&c, &s)| (c, ((s - max) / tau).exp())).collect();
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = pool.iter().map(|(_, w)| w).sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = pool.len() - 1;
        for (i, (_, w)) in pool.iter().enumerate() {
            if u < *w {
                chosen = i;
                break;
            }
            u -= w;
        }
        picked.push(pool.remove(chosen).0);
    }
    picked
}

/// Regrow stage: samples pruned blocks back into `mask` and returns what was regrown
/// per row group (a single entry with flat block indices in non-uniform mode).
pub fn regrow_step<T: Scalar, R: Rng>(
    mask: &mut BlockMask,
    scores: &ScoreMatrix<T>,
    p: f64,
    delta: f64,
    tau: f64,
    uniform: bool,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let part = *mask.partition();
    if uniform {
        let r = regrow_count(part.c_in, p, delta);
        (0..part.num_row_groups())
            .map(|j| {
                let pruned: Vec<usize> = (0..part.c_in).filter(|&k| !mask.get(j, k)).collect();
                let s: Vec<f64> = pruned.iter().map(|&k| scores.get(j, k).as_f64()).collect();
                let regrown = sample_without_replacement(&pruned, &s, tau, r, rng);
                for &k in &regrown {
                    mask.set(j, k, true);
                }
                regrown
            })
            .collect()
    } else {
        let pruned: Vec<usize> = (0..part.num_blocks()).filter(|&i| !mask.bits()[i]).collect();
        let s: Vec<f64> = pruned.iter().map(|&i| scores.values[i].as_f64()).collect();
        let r = (((delta * part.num_blocks() as f64) + 1e-9).floor() as usize).min(pruned.len());
        let regrown = sample_without_replacement(&pruned, &s, tau, r, rng);
        for &i in &regrown {
            mask.set(i / part.c_in, i % part.c_in, true);
        }
        vec![regrown]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerMaskState {
    pub name: String,
    /// Prune rate for this layer.
    pub p: f64,
    pub mask: BlockMask,
    /// Active block indices per row group; always equal to the set bits of `mask`.
    pub retained: Vec<Vec<usize>>,
}

impl LayerMaskState {
    fn sync_retained(&mut self) {
        self.retained = (0..self.mask.partition().num_row_groups()).map(|j| self.mask.kept_indices(j)).collect();
    }
}

#[derive(Clone, Debug)]
pub struct MaskState {
    pub layers: Vec<LayerMaskState>,
    rng: ChaCha8Rng,
}

/// What one `epoch_update` did.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochUpdate {
    pub epoch: usize,
    pub updated: bool,
    pub delta: f64,
    /// Per layer, per row group regrown indices (empty when nothing ran).
    pub regrown: Vec<Vec<Vec<usize>>>,
}

impl MaskState {
    /// All-ones masks for the given `(name, partition, p)` layers.
    pub fn new(layers: Vec<(String, BlockPartition, f64)>, seed: u64) -> Self {
        let layers = layers
            .into_iter()
            .map(|(name, part, p)| {
                let mut l = LayerMaskState { name, p, mask: BlockMask::ones(part), retained: Vec::new() };
                l.sync_retained();
                l
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x5ab9);
        MaskState { layers, rng }
    }

    pub fn masks(&self) -> Vec<&BlockMask> {
        self.layers.iter().map(|l| &l.mask).collect()
    }

    pub fn densities(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.mask.density()).collect()
    }

    /// Applies the schedule at the start of epoch `t`. `weights` holds the
    /// stored (unmasked) weights of each prunable layer, in layer order.
    pub fn epoch_update<T: Scalar>(
        &mut self,
        weights: &[&Tensor<T>],
        schedule: &SubpSchedule,
        t: usize,
    ) -> Result<EpochUpdate> {
        if weights.len() != self.layers.len() {
            return Err(Error::shape(format!("{} weight tensors for {} masked layers", weights.len(), self.layers.len())));
        }
        let delta = delta_schedule(t, schedule);
        let mut report = EpochUpdate { epoch: t, updated: false, delta, regrown: Vec::new() };
        if t <= schedule.t_s {
            for l in &mut self.layers {
                l.mask = BlockMask::ones(*l.mask.partition());
                l.sync_retained();
            }
            return Ok(report);
        }
        if !schedule.is_update_epoch(t) {
            return Ok(report);
        }
        // Score and prune every layer first, then draw regrowth in layer order.
        let mut pruned = Vec::with_capacity(self.layers.len());
        for (l, w) in self.layers.iter().zip(weights) {
            pruned.push(prune_step(*w, l.mask.partition(), l.p, schedule.criterion, schedule.lambda, schedule.uniform)?);
        }
        for (l, (mut mask, scores)) in self.layers.iter_mut().zip(pruned) {
            let regrown = regrow_step(&mut mask, &scores, l.p, delta, schedule.tau, schedule.uniform, &mut self.rng);
            l.mask = mask;
            l.sync_retained();
            report.regrown.push(regrown);
        }
        report.updated = true;
        Ok(report)
    }
}
