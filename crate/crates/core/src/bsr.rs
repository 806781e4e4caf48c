//! Block Sparse Row encoding of uniformly 1xN-sparse convolutions.
//!
//! Every row group keeps the same number `K` of blocks, so row pointers are
//! implicit (`row_ptr[j] = j * K`). Column indices are stored row-group-major
//! and ascending; block values follow in the same order, each block flattened
//! output-channel-major then kernel row then kernel column.

use crate::error::{Error, Result};
use crate::mask::{block_slice_copy, BlockMask};
use crate::conv::ConvLayerParams;
use crate::model::{Linear, TinyNet, TinyNetSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BsrLayer<T> {
    pub n: usize,
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub kept_per_group: usize,
    pub col_indices: Vec<u32>,
    pub values: Vec<T>,
    pub bias: Vec<T>,
}

/// Unpruned layer, stored densely in `(C_out, C_in, Kh, Kw)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub values: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerRecord<T> {
    Dense(DenseLayer<T>),
    Bsr(BsrLayer<T>),
}

/// A TinyNet in deployable form: every record but the last is a conv block
/// (stride 1, `(k - 1) / 2` zero padding, relu); the last is the linear
/// classifier stored as a 1x1 dense layer applied after global average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct BsrModel<T> {
    pub layers: Vec<LayerRecord<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StorageFootprint {
    pub value_bytes: usize,
    pub index_bytes: usize,
    pub dense_bytes: usize,
}

impl<T> LayerRecord<T> {
    /// `(C_out, C_in, Kh, Kw)`.
    pub fn shape(&self) -> [usize; 4] {
        match self {
            LayerRecord::Dense(d) => [d.c_out, d.c_in, d.kh, d.kw],
            LayerRecord::Bsr(b) => [b.c_out, b.c_in, b.kh, b.kw],
        }
    }

    pub fn bias(&self) -> &[T] {
        match self {
            LayerRecord::Dense(d) => &d.bias,
            LayerRecord::Bsr(b) => &b.bias,
        }
    }
}

impl<T: Scalar> DenseLayer<T> {
    pub fn from_tensor(weights: &Tensor<T>, bias: &[T]) -> Result<Self> {
        let [c_out, c_in, kh, kw] = match weights.shape() {
            [a, b] => [*a, *b, 1, 1],
            _ => weights.dims4()?,
        };
        if bias.len() != c_out {
            return Err(Error::shape(format!("bias has {} entries for {c_out} outputs", bias.len())));
        }
        Ok(DenseLayer { c_out, c_in, kh, kw, values: weights.data().to_vec(), bias: bias.to_vec() })
    }

    pub fn weights(&self) -> Result<Tensor<T>> {
        Tensor::from_vec(&[self.c_out, self.c_in, self.kh, self.kw], self.values.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_out == 0 || self.c_in == 0 || self.kh == 0 || self.kw == 0 {
            return Err(Error::format(0, "dense layer with a zero dimension"));
        }
        if self.values.len() != self.c_out * self.c_in * self.kh * self.kw || self.bias.len() != self.c_out {
            return Err(Error::format(0, "dense layer value count does not match its header"));
        }
        Ok(())
    }
}

impl<T: Scalar> BsrLayer<T> {
    pub fn num_row_groups(&self) -> usize {
        self.c_out / self.n
    }

    pub fn block_len(&self) -> usize {
        self.n * self.kh * self.kw
    }

    pub fn num_blocks(&self) -> usize {
        self.col_indices.len()
    }

    /// Column indices of row group `j`.
    pub fn row_cols(&self, j: usize) -> &[u32] {
        let k = self.kept_per_group;
        &self.col_indices[j * k..(j + 1) * k]
    }

    /// Values of the `i`-th stored block.
    pub fn block(&self, i: usize) -> &[T] {
        let l = self.block_len();
        &self.values[i * l..(i + 1) * l]
    }

    /// Structural checks; `base` is added to reported offsets (byte position of the
    /// first column index when validating a parsed file).
    pub(crate) fn validate_at(&self, base: usize) -> Result<()> {
        if self.n == 0 || self.c_out == 0 || self.c_in == 0 || self.kh == 0 || self.kw == 0 {
            return Err(Error::format(base, "bsr layer with a zero dimension"));
        }
        if !self.c_out.is_multiple_of(self.n) {
            return Err(Error::format(base, format!("C_out={} not divisible by N={}", self.c_out, self.n)));
        }
        if self.kept_per_group > self.c_in {
            return Err(Error::format(base, format!("K={} exceeds C_in={}", self.kept_per_group, self.c_in)));
        }
        let groups = self.num_row_groups();
        if self.col_indices.len() != groups * self.kept_per_group {
            return Err(Error::format(base, "column index count does not match G*K"));
        }
        for j in 0..groups {
            let row = self.row_cols(j);
            for (i, &c) in row.iter().enumerate() {
                let at = base + 4 * (j * self.kept_per_group + i);
                if c as usize >= self.c_in {
                    return Err(Error::format(at, format!("column index {c} >= C_in={}", self.c_in)));
                }
                if i > 0 && row[i - 1] >= c {
                    return Err(Error::format(at, format!("column indices of row group {j} are not strictly ascending")));
                }
            }
        }
        if self.values.len() != self.num_blocks() * self.block_len() || self.bias.len() != self.c_out {
            return Err(Error::format(base, "value or bias count does not match the header"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_at(0)
    }
}

/// Packs the kept blocks of a uniformly masked layer.
pub fn encode<T: Scalar>(weights: &Tensor<T>, bias: &[T], mask: &BlockMask) -> Result<BsrLayer<T>> {
    let part = *mask.partition();
    if weights.shape() != part.shape() {
        return Err(Error::shape(format!("weights {:?} do not match mask grid {:?}", weights.shape(), part.shape())));
    }
    if bias.len() != part.c_out {
        return Err(Error::shape(format!("bias has {} entries for {} outputs", bias.len(), part.c_out)));
    }
    let k = mask.uniform_count().ok_or_else(|| {
        Error::Invariant(format!("mask is not uniform: row counts {:?}", mask.row_counts()))
    })?;
    let mut col_indices = Vec::with_capacity(part.num_row_groups() * k);
    let mut values = Vec::with_capacity(part.num_row_groups() * k * part.block_len());
    for j in 0..part.num_row_groups() {
        for c in mask.kept_indices(j) {
            col_indices.push(c as u32);
            values.extend(block_slice_copy(&part, weights.data(), j, c));
        }
    }
    Ok(BsrLayer {
        n: part.n,
        c_out: part.c_out,
        c_in: part.c_in,
        kh: part.kh,
        kw: part.kw,
        kept_per_group: k,
        col_indices,
        values,
        bias: bias.to_vec(),
    })
}

/// Dense weights with zeros everywhere except the stored blocks.
pub fn decode<T: Scalar>(layer: &BsrLayer<T>) -> Result<Tensor<T>> {
    layer.validate()?;
    let taps = layer.kh * layer.kw;
    let mut w = Tensor::zeros(&[layer.c_out, layer.c_in, layer.kh, layer.kw]);
    let data = w.data_mut();
    for j in 0..layer.num_row_groups() {
        for (i, &c) in layer.row_cols(j).iter().enumerate() {
            let block = layer.block(j * layer.kept_per_group + i);
            for r in 0..layer.n {
                let off = ((j * layer.n + r) * layer.c_in + c as usize) * taps;
                data[off..off + taps].copy_from_slice(&block[r * taps..(r + 1) * taps]);
            }
        }
    }
    Ok(w)
}

pub fn storage_footprint<T: Scalar>(layer: &BsrLayer<T>) -> StorageFootprint {
    let blocks = layer.num_blocks();
    StorageFootprint {
        value_bytes: 4 * blocks * layer.block_len(),
        index_bytes: 4 * blocks,
        dense_bytes: 4 * layer.c_out * layer.c_in * layer.kh * layer.kw,
    }
}

impl<T: Scalar> BsrModel<T> {
    /// Exports a trained model: the first conv and the classifier stay dense,
    /// masked convs are encoded (unmasked prunable convs become K = C_in).
    pub fn from_model(model: &TinyNet<T>, masks: Option<&[BlockMask]>, n: usize) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, conv) in model.convs.iter().enumerate() {
            if i == 0 {
                layers.push(LayerRecord::Dense(DenseLayer::from_tensor(&conv.weights, &conv.bias)?));
                continue;
            }
            let mask = match masks {
                Some(m) => m[i - 1].clone(),
                None => BlockMask::ones(crate::mask::BlockPartition::of(&conv.weights, n, &format!("conv{}", i + 1))?),
            };
            layers.push(LayerRecord::Bsr(encode(&conv.weights, &conv.bias, &mask)?));
        }
        layers.push(LayerRecord::Dense(DenseLayer::from_tensor(&model.classifier.weights, &model.classifier.bias)?));
        Ok(BsrModel { layers })
    }

    /// Decodes every record back into a dense `TinyNet` (pruned blocks become zeros).
    pub fn to_dense(&self) -> Result<TinyNet<T>> {
        self.validate()?;
        let Some((classifier, convs)) = self.layers.split_last() else {
            return Err(Error::Input("model has no layers".into()));
        };
        let mut params = Vec::with_capacity(convs.len());
        for layer in convs {
            let weights = match layer {
                LayerRecord::Dense(d) => d.weights()?,
                LayerRecord::Bsr(b) => decode(b)?,
            };
            let pad = (weights.shape()[2] - 1) / 2;
            params.push(ConvLayerParams::new(weights, layer.bias().to_vec(), 1, pad)?);
        }
        let [classes, c_in, kh, kw] = classifier.shape();
        if kh != 1 || kw != 1 {
            return Err(Error::shape("classifier record must be 1x1"));
        }
        let fc = match classifier {
            LayerRecord::Dense(d) => d.values.clone(),
            LayerRecord::Bsr(b) => decode(b)?.into_data(),
        };
        let spec = TinyNetSpec {
            image_channels: params.first().map_or(c_in, |c| c.in_channels()),
            channels: params.iter().map(|c| c.out_channels()).collect(),
            num_classes: classes,
        };
        let linear = Linear { weights: Tensor::from_vec(&[classes, c_in], fc)?, bias: classifier.bias().to_vec() };
        TinyNet::from_parts(spec, params, linear)
    }

    /// Checks each record and that input channels chain from layer to layer.
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerRecord::Dense(d) => d.validate()?,
                LayerRecord::Bsr(b) => b.validate()?,
            }
            if i > 0 {
                let prev = self.layers[i - 1].shape()[0];
                if l.shape()[1] != prev {
                    return Err(Error::shape(format!("layer {i} expects {} inputs, previous layer has {prev} outputs", l.shape()[1])));
                }
            }
        }
        Ok(())
    }
}
