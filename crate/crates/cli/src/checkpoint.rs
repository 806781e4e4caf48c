//! JSON checkpoint: dense stored weights plus the block masks in force at the end of training.

use std::path::Path;

use serde::{Deserialize, Serialize};
use subp::conv::ConvLayerParams;
use subp::model::{Linear, TinyNet, TinyNetSpec, KERNEL};
use subp::{BlockMask, BlockPartition, Model, Tensor};

use crate::error::{CliError, Result};

pub const CHECKPOINT_FORMAT: &str = "subp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvRecord {
    /// `[C_out, C_in, Kh, Kw]`.
    pub shape: [usize; 4],
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub layer: String,
    pub n: usize,
    /// Kept input-channel indices per row group.
    pub rows: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub image_channels: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    /// Block height used when exporting.
    pub n: usize,
    pub convs: Vec<ConvRecord>,
    /// `[classes, features]` row-major.
    pub classifier: ConvRecord,
    /// One entry per prunable conv; absent for dense runs.
    pub masks: Option<Vec<MaskRecord>>,
}

impl Checkpoint {
    pub fn new(model: &Model, masks: Option<&[BlockMask]>, n: usize) -> Self {
        let conv = |c: &ConvLayerParams<f32>| ConvRecord {
            shape: c.weights.dims4().expect("conv weights are 4-D"),
            weights: c.weights.data().to_vec(),
            bias: c.bias.clone(),
        };
        let [classes, features] = model.classifier.weights.dims2().expect("classifier weights are 2-D");
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            image_channels: model.spec.image_channels,
            channels: model.spec.channels.clone(),
            num_classes: model.spec.num_classes,
            n,
            convs: model.convs.iter().map(conv).collect(),
            classifier: ConvRecord {
                shape: [classes, features, 1, 1],
                weights: model.classifier.weights.data().to_vec(),
                bias: model.classifier.bias.clone(),
            },
            masks: masks.map(|ms| {
                ms.iter()
                    .enumerate()
                    .map(|(i, m)| MaskRecord {
                        layer: TinyNetSpec::conv_name(i + 1),
                        n: m.partition().n,
                        rows: (0..m.partition().num_row_groups()).map(|j| m.kept_indices(j)).collect(),
                    })
                    .collect()
            }),
        }
    }

    pub fn model(&self) -> subp::Result<Model> {
        let spec = TinyNetSpec { image_channels: self.image_channels, channels: self.channels.clone(), num_classes: self.num_classes };
        let convs = self
            .convs
            .iter()
            .map(|c| ConvLayerParams::new(Tensor::from_vec(&c.shape, c.weights.clone())?, c.bias.clone(), 1, KERNEL / 2))
            .collect::<subp::Result<Vec<_>>>()?;
        let [classes, features, _, _] = self.classifier.shape;
        let classifier = Linear {
            weights: Tensor::from_vec(&[classes, features], self.classifier.weights.clone())?,
            bias: self.classifier.bias.clone(),
        };
        TinyNet::from_parts(spec, convs, classifier)
    }

    pub fn masks(&self) -> subp::Result<Option<Vec<BlockMask>>> {
        let Some(records) = &self.masks else { return Ok(None) };
        if records.len() + 1 != self.convs.len() {
            return Err(subp::Error::Config(format!("{} masks for {} prunable convs", records.len(), self.convs.len().saturating_sub(1))));
        }
        records
            .iter()
            .zip(&self.convs[1..])
            .map(|(r, c)| BlockMask::from_rows(BlockPartition::new(c.shape, r.n, &r.layer)?, &r.rows))
            .collect::<subp::Result<Vec<_>>>()
            .map(Some)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| CliError::Checkpoint { path: path.into(), message: e.to_string() })?;
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |message: String| CliError::Checkpoint { path: path.into(), message };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        // Surface shape problems at load time.
        ck.model().map_err(|e| bad(e.to_string()))?;
        ck.masks().map_err(|e| bad(e.to_string()))?;
        Ok(ck)
    }
}
