//! Training loop: masked forward/backward with momentum SGD, and the SUBP
//! prune/regrow update at every epoch boundary.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Samples};
use crate::error::{Error, Result};
use crate::mask::{BlockMask, BlockPartition};
use crate::model::{TinyNet, TinyNetSpec};
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::scalar::Scalar;
use crate::controller::{EpochUpdate, MaskState, SubpSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct PruneConfig {
    /// Block height (output channels per block).
    pub n: usize,
    pub schedule: SubpSchedule,
    /// Per-layer prune rates for the prunable convs; `None` uses `schedule.p` everywhere.
    pub layer_p: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub arch: TinyNetSpec,
    /// `total_epochs` is overridden by `epochs`.
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` trains the dense baseline.
    pub prune: Option<PruneConfig>,
}

impl TrainConfig {
    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.sgd.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if let Some(pc) = &self.prune {
            pc.schedule.validate()?;
            self.partitions(pc.n)?;
            if let Some(ps) = &pc.layer_p {
                if ps.len() != self.arch.prunable().len() {
                    return Err(Error::Config(format!(
                        "layer_p has {} entries for {} prunable layers",
                        ps.len(),
                        self.arch.prunable().len()
                    )));
                }
                if let Some(bad) = ps.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
                    return Err(Error::Config(format!("layer prune rate {bad} must lie in (0, 1)")));
                }
            }
        }
        Ok(())
    }

    /// Block partitions of the prunable convs.
    pub fn partitions(&self, n: usize) -> Result<Vec<BlockPartition>> {
        self.arch
            .prunable()
            .map(|i| {
                let c_in = self.arch.channels[i - 1];
                let shape = [self.arch.channels[i], c_in, crate::model::KERNEL, crate::model::KERNEL];
                BlockPartition::new(shape, n, &TinyNetSpec::conv_name(i))
            })
            .collect()
    }

    pub fn layer_rates(&self) -> Vec<f64> {
        match &self.prune {
            Some(PruneConfig { layer_p: Some(ps), .. }) => ps.clone(),
            Some(pc) => vec![pc.schedule.p; self.arch.prunable().len()],
            None => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Validation top-1 accuracy in `[0, 1]` after the epoch.
    pub top1: f64,
    /// Block density of each prunable conv during the epoch (1.0 when dense).
    pub densities: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput<T> {
    pub model: TinyNet<T>,
    pub masks: Option<MaskState>,
    pub log: Vec<EpochMetrics>,
    /// Result of the controller update at the start of every epoch.
    pub updates: Vec<EpochUpdate>,
    /// Masks in force during every epoch.
    pub trajectory: Vec<Vec<BlockMask>>,
}

impl<T: Scalar> TrainOutput<T> {
    pub fn final_masks(&self) -> Option<Vec<BlockMask>> {
        self.masks.as_ref().map(|m| m.masks().into_iter().cloned().collect())
    }

    pub fn final_top1(&self) -> f64 {
        self.log.last().map_or(0.0, |m| m.top1)
    }
}

/// Top-1 accuracy and predictions of `model` on `samples`.
pub fn evaluate<T: Scalar>(model: &TinyNet<T>, masks: Option<&[BlockMask]>, samples: &Samples) -> Result<(f64, Vec<usize>)> {
    let mut preds = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, _) = samples.batch::<T>(chunk);
        preds.extend(model.predict(&x, masks)?);
    }
    let correct = preds.iter().zip(&samples.labels).filter(|(p, y)| p == y).count();
    Ok((correct as f64 / samples.len().max(1) as f64, preds))
}

/// Trains a TinyNet from scratch (or from `init`) under the SUBP schedule.
pub fn train_subp<T: Scalar>(config: &TrainConfig, data: &Dataset, init: Option<TinyNet<T>>) -> Result<TrainOutput<T>> {
    config.validate()?;
    if data.train.image_shape[0] != config.arch.image_channels || data.classes != config.arch.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} channels and {} classes, architecture expects {} and {}",
            data.train.image_shape[0], data.classes, config.arch.image_channels, config.arch.num_classes
        )));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("dataset splits must be non-empty".into()));
    }
    let mut model = match init {
        Some(m) => {
            if m.spec != config.arch {
                return Err(Error::Config("initial weights do not match the architecture".into()));
            }
            m
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(3);
            TinyNet::init(config.arch.clone(), &mut rng)?
        }
    };
    let mut masks = match &config.prune {
        Some(pc) => {
            let layers = config
                .partitions(pc.n)?
                .into_iter()
                .zip(config.layer_rates())
                .zip(config.arch.prunable())
                .map(|((part, p), i)| (TinyNetSpec::conv_name(i), part, p))
                .collect();
            Some(MaskState::new(layers, config.seed))
        }
        None => None,
    };
    let sgd = SgdConfig { total_epochs: config.epochs as f64, ..config.sgd.clone() };
    let smoothing = T::lit(sgd.label_smoothing);
    let mut opt = SgdState::new(&model.params_mut());
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle.set_stream(2);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let steps = data.train.len().div_ceil(config.batch_size);

    let mut out = TrainOutput { model: model.clone(), masks: None, log: Vec::new(), updates: Vec::new(), trajectory: Vec::new() };
    for t in 0..config.epochs {
        let current: Option<Vec<BlockMask>> = match (&mut masks, &config.prune) {
            (Some(state), Some(pc)) => {
                let up = state.epoch_update(&model.prunable_weights(), &pc.schedule, t)?;
                out.updates.push(up);
                Some(state.masks().into_iter().cloned().collect())
            }
            _ => None,
        };
        let gates = model.param_gates(current.as_deref());
        let gate_refs: Vec<Option<&[bool]>> = gates.iter().map(|g| g.as_deref()).collect();

        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, y) = data.train.batch::<T>(chunk);
            let (loss, _, grads) = model.loss_and_grads(&x, &y, smoothing, current.as_deref())?;
            loss_sum += loss.as_f64() * chunk.len() as f64;
            let epoch_pos = t as f64 + step as f64 / steps as f64;
            sgd_step(&mut model.params_mut(), &grads.as_slices(), &gate_refs, &mut opt, &sgd, epoch_pos);
        }
        let (top1, _) = evaluate(&model, current.as_deref(), &data.val)?;
        let densities = match &current {
            Some(ms) => ms.iter().map(|m| m.density()).collect(),
            None => Vec::new(),
        };
        out.log.push(EpochMetrics { epoch: t, loss: loss_sum / data.train.len() as f64, top1, densities });
        if let Some(ms) = current {
            out.trajectory.push(ms);
        }
    }
    out.model = model;
    out.masks = masks;
    Ok(out)
}
