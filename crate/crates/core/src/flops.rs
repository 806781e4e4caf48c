//! FLOPs with one multiply-accumulate counted as one operation.

use crate::error::{Error, Result};
use crate::mask::BlockMask;
use crate::model::TinyNet;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsReport {
    /// One entry per conv, then one for the classifier.
    pub per_layer: Vec<u64>,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.per_layer.iter().sum()
    }

    /// FLOPs of the prunable convs only (every conv after the first).
    pub fn prunable(&self) -> u64 {
        let n = self.per_layer.len();
        self.per_layer[1..n - 1].iter().sum()
    }
}

/// Per-image FLOPs for an input of shape `(C, H, W)`. Masked convs count only kept blocks.
pub fn flops_report<T: Scalar>(
    model: &TinyNet<T>,
    input_shape: [usize; 3],
    masks: Option<&[BlockMask]>,
) -> Result<FlopsReport> {
    let [c, mut h, mut w] = input_shape;
    if let Some(m) = masks {
        if m.len() != model.spec.prunable().len() {
            return Err(Error::shape(format!("{} masks for {} prunable layers", m.len(), model.spec.prunable().len())));
        }
        for (i, mask) in m.iter().enumerate() {
            if mask.uniform_count().is_none() {
                return Err(Error::Invariant(format!("mask of conv{} is not uniform", i + 2)));
            }
        }
    }
    let mut per_layer = Vec::new();
    let mut shape = [1, c, h, w];
    for (i, conv) in model.convs.iter().enumerate() {
        let geo = conv.geometry(shape)?;
        let (kh, kw) = conv.kernel();
        let out_px = (geo.out_h * geo.out_w) as u64;
        let weights = match masks {
            Some(m) if i >= 1 => {
                let mask = &m[i - 1];
                (mask.kept_blocks() * mask.partition().n * kh * kw) as u64
            }
            _ => (conv.out_channels() * conv.in_channels() * kh * kw) as u64,
        };
        per_layer.push(weights * out_px);
        h = geo.out_h;
        w = geo.out_w;
        shape = [1, conv.out_channels(), h, w];
    }
    per_layer.push(model.classifier.weights.len() as u64);
    Ok(FlopsReport { per_layer })
}

pub fn count_flops<T: Scalar>(model: &TinyNet<T>, input_shape: [usize; 3], masks: Option<&[BlockMask]>) -> Result<u64> {
    Ok(flops_report(model, input_shape, masks)?.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::ConvLayerParams;
    use crate::mask::BlockPartition;
    use crate::model::{Linear, TinyNetSpec};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_mac_layer() {
        let spec = TinyNetSpec { image_channels: 1, channels: vec![1], num_classes: 2 };
        let conv = ConvLayerParams::new(Tensor::<f32>::zeros(&[1, 1, 1, 1]), vec![0.0], 1, 0).unwrap();
        let fc = Linear { weights: Tensor::zeros(&[2, 1]), bias: vec![0.0; 2] };
        let net = TinyNet::from_parts(spec, vec![conv], fc).unwrap();
        let r = flops_report(&net, [1, 1, 1], None).unwrap();
        assert_eq!(r.per_layer[0], 1);
    }

    #[test]
    fn hand_count_three_layers() {
        let spec = TinyNetSpec { image_channels: 3, channels: vec![8, 16, 16], num_classes: 10 };
        let net = TinyNet::<f32>::init(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // 3x3 same convs on 8x8: 64 output pixels each.
        let expect = 8 * 3 * 9 * 64 + 16 * 8 * 9 * 64 + 16 * 16 * 9 * 64 + 16 * 10;
        assert_eq!(count_flops(&net, [3, 8, 8], None).unwrap(), expect as u64);

        let ones: Vec<BlockMask> = net
            .prunable_weights()
            .iter()
            .map(|w| BlockMask::ones(BlockPartition::of(*w, 4, "c").unwrap()))
            .collect();
        assert_eq!(count_flops(&net, [3, 8, 8], Some(&ones)).unwrap(), expect as u64);

        let half: Vec<BlockMask> = ones
            .iter()
            .map(|m| {
                let rows: Vec<Vec<usize>> = (0..m.partition().num_row_groups()).map(|_| (0..m.partition().c_in / 2).collect()).collect();
                BlockMask::from_rows(*m.partition(), &rows).unwrap()
            })
            .collect();
        let dense = flops_report(&net, [3, 8, 8], None).unwrap();
        let sparse = flops_report(&net, [3, 8, 8], Some(&half)).unwrap();
        assert_eq!(sparse.per_layer[1] * 2, dense.per_layer[1]);
        assert_eq!(sparse.prunable() * 2, dense.prunable());
        assert_eq!(sparse.per_layer[0], dense.per_layer[0]);
    }

    #[test]
    fn non_uniform_mask_rejected() {
        let spec = TinyNetSpec { image_channels: 1, channels: vec![2, 2], num_classes: 2 };
        let net = TinyNet::<f32>::init(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let part = BlockPartition::of(&net.convs[1].weights, 1, "c").unwrap();
        let m = BlockMask::from_rows(part, &[vec![0], vec![0, 1]]).unwrap();
        assert!(matches!(count_flops(&net, [1, 4, 4], Some(&[m])), Err(Error::Invariant(_))));
    }
}
