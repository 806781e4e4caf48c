//! TinyNet: `k` blocks of `conv3x3 (stride 1, same padding) -> relu`, global
//! average pooling and a linear classifier.
//!
//! Every conv except the first may be pruned; those layers need an output
//! channel count divisible by the block size.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::{backward_from_patches, col2im_raw, forward_from_patches, im2col_raw, ConvGeometry, ConvLayerParams};
use crate::error::{Error, Result};
use crate::loss::{argmax_rows, smoothed_cross_entropy};
use crate::mask::{apply_mask, BlockMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TinyNetSpec {
    pub image_channels: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub num_classes: usize,
}

impl TinyNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.num_classes < 2 {
            return Err(Error::Config("need >= 1 image channel and >= 2 classes".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channels must be a non-empty list of positive counts".into()));
        }
        Ok(())
    }

    pub fn conv_name(i: usize) -> String {
        format!("conv{}", i + 1)
    }

    /// Conv indices eligible for pruning (all but the first).
    pub fn prunable(&self) -> std::ops::Range<usize> {
        1..self.channels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `(out, in)`.
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyNet<T> {
    pub spec: TinyNetSpec,
    pub convs: Vec<ConvLayerParams<T>>,
    pub classifier: Linear<T>,
}

/// Gradients in the same order as `TinyNet::params_mut`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub conv_weights: Vec<Vec<T>>,
    pub conv_bias: Vec<Vec<T>>,
    pub fc_weights: Vec<T>,
    pub fc_bias: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn as_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for (w, b) in self.conv_weights.iter().zip(&self.conv_bias) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out.push(&self.fc_weights);
        out.push(&self.fc_bias);
        out
    }
}

struct Cache<T> {
    geos: Vec<ConvGeometry>,
    patches: Vec<Vec<T>>,
    /// Post-relu outputs of every conv block.
    outputs: Vec<Vec<T>>,
    features: Vec<T>,
    effective: Vec<Vec<T>>,
}

fn normal<T: Scalar, R: Rng>(len: usize, std: f64, rng: &mut R) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| T::lit(dist.sample(rng))).collect()
}

impl<T: Scalar> TinyNet<T> {
    /// He-normal convolutions, zero biases.
    pub fn init<R: Rng>(spec: TinyNetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::new();
        let mut c_in = spec.image_channels;
        for &c_out in &spec.channels {
            let fan_in = c_in * KERNEL * KERNEL;
            let w = normal(c_out * fan_in, (2.0 / fan_in as f64).sqrt(), rng);
            convs.push(ConvLayerParams::new(
                Tensor::from_vec(&[c_out, c_in, KERNEL, KERNEL], w)?,
                vec![T::zero(); c_out],
                1,
                KERNEL / 2,
            )?);
            c_in = c_out;
        }
        let fc = normal(spec.num_classes * c_in, (1.0 / c_in as f64).sqrt(), rng);
        let classifier = Linear {
            weights: Tensor::from_vec(&[spec.num_classes, c_in], fc)?,
            bias: vec![T::zero(); spec.num_classes],
        };
        Ok(TinyNet { spec, convs, classifier })
    }

    /// Assembles a model from stored parameters, checking that shapes chain.
    pub fn from_parts(spec: TinyNetSpec, convs: Vec<ConvLayerParams<T>>, classifier: Linear<T>) -> Result<Self> {
        spec.validate()?;
        if convs.len() != spec.channels.len() {
            return Err(Error::shape(format!("{} conv layers for {} channel entries", convs.len(), spec.channels.len())));
        }
        let mut c_in = spec.image_channels;
        for (i, c) in convs.iter().enumerate() {
            if c.in_channels() != c_in || c.out_channels() != spec.channels[i] {
                return Err(Error::shape(format!("conv{} has shape {:?}", i + 1, c.weights.shape())));
            }
            c_in = c.out_channels();
        }
        if classifier.weights.shape() != [spec.num_classes, c_in] || classifier.bias.len() != spec.num_classes {
            return Err(Error::shape(format!("classifier has shape {:?}", classifier.weights.shape())));
        }
        Ok(TinyNet { spec, convs, classifier })
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for c in self.convs.iter_mut() {
            let ConvLayerParams { weights, bias, .. } = c;
            out.push(weights.data_mut());
            out.push(bias.as_mut_slice());
        }
        let Linear { weights, bias } = &mut self.classifier;
        out.push(weights.data_mut());
        out.push(bias.as_mut_slice());
        out
    }

    /// Stored weights of the prunable convs, in layer order.
    pub fn prunable_weights(&self) -> Vec<&Tensor<T>> {
        self.spec.prunable().map(|i| &self.convs[i].weights).collect()
    }

    fn check_masks(&self, masks: Option<&[BlockMask]>) -> Result<()> {
        if let Some(m) = masks {
            if m.len() != self.spec.prunable().len() {
                return Err(Error::shape(format!("{} masks for {} prunable layers", m.len(), self.spec.prunable().len())));
            }
            for (mask, i) in m.iter().zip(self.spec.prunable()) {
                if mask.partition().shape() != self.convs[i].weights.shape() {
                    return Err(Error::shape(format!("mask for conv{} has the wrong shape", i + 1)));
                }
            }
        }
        Ok(())
    }

    /// Effective weights `W * M` of conv `i` (the stored weights when unmasked).
    pub fn effective_weights(&self, i: usize, masks: Option<&[BlockMask]>) -> Result<Tensor<T>> {
        match masks {
            Some(m) if i >= 1 => apply_mask(&self.convs[i].weights, &m[i - 1]),
            _ => Ok(self.convs[i].weights.clone()),
        }
    }

    fn run(&self, input: &Tensor<T>, masks: Option<&[BlockMask]>) -> Result<(Tensor<T>, Cache<T>)> {
        self.check_masks(masks)?;
        let mut shape = input.dims4()?;
        let batch = shape[0];
        let mut cache = Cache { geos: vec![], patches: vec![], outputs: vec![], features: vec![], effective: vec![] };
        let mut x = input.data().to_vec();
        for (i, conv) in self.convs.iter().enumerate() {
            let geo = conv.geometry(shape)?;
            let w = self.effective_weights(i, masks)?.into_data();
            let patches = im2col_raw(&x, &geo);
            let mut y = forward_from_patches(&w, &conv.bias, &patches, &geo);
            for v in y.iter_mut() {
                *v = v.max(T::zero());
            }
            shape = [batch, conv.out_channels(), geo.out_h, geo.out_w];
            cache.geos.push(geo);
            cache.patches.push(patches);
            cache.effective.push(w);
            cache.outputs.push(y.clone());
            x = y;
        }
        let [_, c, h, w] = shape;
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let features: Vec<T> =
            (0..batch * c).map(|i| x[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * inv).collect();
        let classes = self.spec.num_classes;
        let mut logits = vec![T::zero(); batch * classes];
        for b in 0..batch {
            let f = &features[b * c..(b + 1) * c];
            for o in 0..classes {
                logits[b * classes + o] =
                    self.classifier.bias[o] + crate::conv::dot(f, &self.classifier.weights.data()[o * c..(o + 1) * c]);
            }
        }
        cache.features = features;
        Ok((Tensor::from_vec(&[batch, classes], logits)?, cache))
    }

    /// Logits for an NCHW batch, with optional masks on the prunable convs.
    pub fn forward(&self, input: &Tensor<T>, masks: Option<&[BlockMask]>) -> Result<Tensor<T>> {
        Ok(self.run(input, masks)?.0)
    }

    pub fn predict(&self, input: &Tensor<T>, masks: Option<&[BlockMask]>) -> Result<Vec<usize>> {
        argmax_rows(&self.forward(input, masks)?)
    }

    /// Smoothed cross-entropy loss, logits and gradients with respect to the stored
    /// parameters. Gradients of masked blocks are zero.
    pub fn loss_and_grads(
        &self,
        input: &Tensor<T>,
        labels: &[usize],
        smoothing: T,
        masks: Option<&[BlockMask]>,
    ) -> Result<(T, Tensor<T>, Gradients<T>)> {
        let (logits, cache) = self.run(input, masks)?;
        let (loss, g_logits) = smoothed_cross_entropy(&logits, labels, smoothing)?;
        let batch = labels.len();
        let classes = self.spec.num_classes;
        let c = self.classifier.weights.shape()[1];
        let fcw = self.classifier.weights.data();
        let mut g_fcw = vec![T::zero(); classes * c];
        let mut g_fcb = vec![T::zero(); classes];
        let mut g_feat = vec![T::zero(); batch * c];
        for b in 0..batch {
            let f = &cache.features[b * c..(b + 1) * c];
            for o in 0..classes {
                let g = g_logits.data()[b * classes + o];
                g_fcb[o] += g;
                crate::conv::axpy(g, f, &mut g_fcw[o * c..(o + 1) * c]);
                crate::conv::axpy(g, &fcw[o * c..(o + 1) * c], &mut g_feat[b * c..(b + 1) * c]);
            }
        }
        let last = cache.geos.last().expect("at least one conv");
        let plane = last.out_h * last.out_w;
        let inv = T::one() / T::lit(plane as f64);
        let mut g_y: Vec<T> = g_feat.iter().flat_map(|&g| std::iter::repeat_n(g * inv, plane)).collect();

        let n = self.convs.len();
        let mut conv_weights = vec![Vec::new(); n];
        let mut conv_bias = vec![Vec::new(); n];
        for i in (0..n).rev() {
            for (g, &y) in g_y.iter_mut().zip(&cache.outputs[i]) {
                if y <= T::zero() {
                    *g = T::zero();
                }
            }
            let geo = &cache.geos[i];
            let (mut gw, gb, gp) = backward_from_patches(&cache.effective[i], &cache.patches[i], &g_y, geo, i > 0);
            if let (Some(m), true) = (masks, i >= 1) {
                for (g, on) in gw.iter_mut().zip(m[i - 1].element_gate()) {
                    if !on {
                        *g = T::zero();
                    }
                }
            }
            conv_weights[i] = gw;
            conv_bias[i] = gb;
            if i > 0 {
                g_y = col2im_raw(&gp, geo);
            }
        }
        Ok((loss, logits, Gradients { conv_weights, conv_bias, fc_weights: g_fcw, fc_bias: g_fcb }))
    }

    /// Element gates for the optimizer, aligned with `params_mut`.
    pub fn param_gates(&self, masks: Option<&[BlockMask]>) -> Vec<Option<Vec<bool>>> {
        let mut out = Vec::new();
        for i in 0..self.convs.len() {
            let gate = match masks {
                Some(m) if i >= 1 => Some(m[i - 1].element_gate()),
                _ => None,
            };
            out.push(gate);
            out.push(None);
        }
        out.push(None);
        out.push(None);
        out
    }
}

/// Loss and logits of a batch.
pub fn model_forward_loss<T: Scalar>(
    model: &TinyNet<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    smoothing: T,
    masks: Option<&[BlockMask]>,
) -> Result<(T, Tensor<T>)> {
    let logits = model.forward(batch, masks)?;
    let (loss, _) = smoothed_cross_entropy(&logits, labels, smoothing)?;
    Ok((loss, logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BlockPartition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> TinyNetSpec {
        TinyNetSpec { image_channels: 2, channels: vec![4, 4], num_classes: 3 }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = TinyNet::<f32>::init(spec(), &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let again = TinyNet::<f32>::init(spec(), &mut rng).unwrap();
        assert_eq!(net, again);
        let x = Tensor::from_vec(&[2, 2, 5, 5], (0..100).map(|v| (v as f32 * 0.37).sin()).collect()).unwrap();
        let y = net.forward(&x, None).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.all_finite());
    }

    #[test]
    fn label_range_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = TinyNet::<f32>::init(spec(), &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(matches!(model_forward_loss(&net, &x, &[3], 0.0, None), Err(Error::Input(_))));
    }

    #[test]
    fn masked_gradients_vanish_on_pruned_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = TinyNet::<f64>::init(spec(), &mut rng).unwrap();
        let part = BlockPartition::of(&net.convs[1].weights, 2, "conv2").unwrap();
        let mask = BlockMask::from_rows(part, &[vec![0, 3], vec![1, 2]]).unwrap();
        let x = Tensor::from_vec(&[2, 2, 4, 4], (0..64).map(|v| (v as f64 * 0.91).cos()).collect()).unwrap();
        let masks = [mask.clone()];
        let (_, _, g) = net.loss_and_grads(&x, &[0, 2], 0.1, Some(&masks)).unwrap();
        for (gv, on) in g.conv_weights[1].iter().zip(mask.element_gate()) {
            if !on {
                assert_eq!(*gv, 0.0);
            }
        }
        assert!(g.conv_weights[1].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn from_parts_checks_chaining() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = TinyNet::<f32>::init(spec(), &mut rng).unwrap();
        let mut s = spec();
        s.channels = vec![4, 8];
        assert!(TinyNet::from_parts(s, net.convs.clone(), net.classifier.clone()).is_err());
        assert!(TinyNet::from_parts(spec(), net.convs, net.classifier).is_ok());
    }
}
