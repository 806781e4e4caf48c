//! Deterministic synthetic image classification data and its raw binary layout.
//!
//! Each class owns a random template image; samples are the template plus
//! Gaussian noise, clamped to `[0, 1]`. The first 80% of every class go to the
//! training split, the rest to validation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bytes::{put_f32s, put_u32, to_u32, ByteReader};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"SUBPDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub image_channels: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { image_size: 8, image_channels: 3, classes: 8, samples_per_class: 100, noise: 0.5, seed: 0 }
    }
}

/// A set of equally shaped images with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    /// `(C, H, W)` of every image.
    pub image_shape: [usize; 3],
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// NCHW batch of the given sample indices.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend(self.images[i * len..(i + 1) * len].iter().map(|&v| T::lit(v as f64)));
        }
        let [c, h, w] = self.image_shape;
        let t = Tensor::from_vec(&[indices.len(), c, h, w], data).expect("consistent batch");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn all<T: Scalar>(&self) -> (Tensor<T>, Vec<usize>) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Samples,
    pub val: Samples,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_channels == 0 {
            return Err(Error::Config("image_size and image_channels must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.samples_per_class < 5 {
            return Err(Error::Config("need at least 5 samples per class for an 80/20 split".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be a non-negative number".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let shape = [self.image_channels, self.image_size, self.image_size];
        let len: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        let templates: Vec<Vec<f32>> =
            (0..self.classes).map(|_| (0..len).map(|_| rng.random::<f32>()).collect()).collect();
        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::Config(e.to_string()))?;
        let n_train = self.samples_per_class * 4 / 5;
        let mut train = Samples { image_shape: shape, images: Vec::new(), labels: Vec::new() };
        let mut val = train.clone();
        for (c, tpl) in templates.iter().enumerate() {
            for i in 0..self.samples_per_class {
                let split = if i < n_train { &mut train } else { &mut val };
                split.images.extend(tpl.iter().map(|&t| (t as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32));
                split.labels.push(c);
            }
        }
        Ok(Dataset { classes: self.classes, train, val })
    }
}

impl Dataset {
    /// Raw layout: magic, version, then u32 `classes, C, H, W, train_count, val_count`,
    /// then per sample (training split first) a u32 label and `C*H*W` f32 values.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut out, DATASET_VERSION);
        put_u32(&mut out, to_u32(self.classes, "classes")?);
        for d in self.train.image_shape {
            put_u32(&mut out, to_u32(d, "image dimension")?);
        }
        put_u32(&mut out, to_u32(self.train.len(), "train count")?);
        put_u32(&mut out, to_u32(self.val.len(), "val count")?);
        for split in [&self.train, &self.val] {
            let len = split.image_len();
            for (i, &label) in split.labels.iter().enumerate() {
                put_u32(&mut out, to_u32(label, "label")?);
                put_f32s(&mut out, &split.images[i * len..(i + 1) * len]);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8, "magic")? != DATASET_MAGIC {
            return Err(Error::format(0, "bad dataset magic"));
        }
        let at = r.offset();
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return Err(Error::format(at, format!("unsupported dataset version {version}")));
        }
        let classes = r.u32("classes")? as usize;
        let shape = [r.u32("channels")? as usize, r.u32("height")? as usize, r.u32("width")? as usize];
        let counts = [r.u32("train count")? as usize, r.u32("val count")? as usize];
        let len: usize = shape.iter().product();
        let mut splits = Vec::new();
        for count in counts {
            let mut s = Samples { image_shape: shape, images: Vec::new(), labels: Vec::new() };
            for _ in 0..count {
                let at = r.offset();
                let label = r.u32("label")? as usize;
                if label >= classes {
                    return Err(Error::format(at, format!("label {label} out of range for {classes} classes")));
                }
                s.labels.push(label);
                s.images.extend(r.f32_vec(len, "image")?);
            }
            splits.push(s);
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.offset(), "trailing bytes after dataset"));
        }
        let val = splits.pop().expect("two splits");
        let train = splits.pop().expect("two splits");
        Ok(Dataset { classes, train, val })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec { image_size: 4, image_channels: 2, classes: 3, samples_per_class: 10, noise: 0.2, seed: 9 }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = small().generate().unwrap();
        assert_eq!(a, small().generate().unwrap());
        assert_eq!(a.train.len(), 24);
        assert_eq!(a.val.len(), 6);
        for c in 0..3 {
            assert_eq!(a.train.labels.iter().filter(|&&l| l == c).count(), 8);
            assert_eq!(a.val.labels.iter().filter(|&&l| l == c).count(), 2);
        }
        assert!(a.train.images.iter().all(|v| (0.0..=1.0).contains(v)));
        let b = SyntheticSpec { seed: 10, ..small() }.generate().unwrap();
        assert_ne!(a.train.images, b.train.images);
    }

    #[test]
    fn raw_layout_round_trip() {
        let d = small().generate().unwrap();
        let bytes = d.to_bytes().unwrap();
        assert_eq!(bytes.len(), 8 + 4 * 7 + 30 * (4 + 4 * 32));
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), d);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    }

    #[test]
    fn batch_extraction() {
        let d = small().generate().unwrap();
        let (x, y) = d.train.batch::<f64>(&[0, 9]);
        assert_eq!(x.shape(), &[2, 2, 4, 4]);
        assert_eq!(y, vec![0, 1]);
        assert_eq!(x.data()[0], d.train.images[0] as f64);
    }
}
