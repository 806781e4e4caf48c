//! im2col lowering and the dense convolution used for training.
//!
//! Patch columns are ordered input-channel-major: all `Kh*Kw` taps of input
//! channel 0, then channel 1, and so on. Sparse inference relies on this.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights `(C_out, C_in, Kh, Kw)`, per-output-channel bias, stride and zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerParams<T> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: [usize; 4],
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, channels, height, width] = input_shape;
        let (kh, kw) = kernel;
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape("stride and kernel dimensions must be positive"));
        }
        if height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(Error::shape(format!(
                "kernel {}x{} does not fit input {}x{} with padding {}",
                kh, kw, height, width, padding
            )));
        }
        Ok(ConvGeometry {
            batch,
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            padding,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn patches(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Input coordinate for output position `o` and kernel tap `k`, or `None` in the padding.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding).filter(|&i| i < extent)
    }
}

impl<T: Scalar> ConvLayerParams<T> {
    pub fn new(weights: Tensor<T>, bias: Vec<T>, stride: usize, padding: usize) -> Result<Self> {
        let [c_out, c_in, kh, kw] = weights.dims4()?;
        if c_out == 0 || c_in == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape(format!("degenerate weight shape {:?}", weights.shape())));
        }
        if bias.len() != c_out {
            return Err(Error::shape(format!("bias has {} entries, expected {}", bias.len(), c_out)));
        }
        Ok(ConvLayerParams { weights, bias, stride, padding })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    pub fn geometry(&self, input_shape: [usize; 4]) -> Result<ConvGeometry> {
        if input_shape[1] != self.in_channels() {
            return Err(Error::shape(format!(
                "input has {} channels, layer expects {}",
                input_shape[1],
                self.in_channels()
            )));
        }
        ConvGeometry::new(input_shape, self.kernel(), self.stride, self.padding)
    }
}

/// Lowers an NCHW input into a `(patches, C_in*Kh*Kw)` matrix.
pub fn im2col<T: Scalar>(
    input: &Tensor<T>,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(input.dims4()?, kernel, stride, padding)?;
    let data = im2col_raw(input.data(), &geo);
    Tensor::from_vec(&[geo.patches(), geo.patch_len()], data)
}

pub(crate) fn im2col_raw<T: Scalar>(input: &[T], geo: &ConvGeometry) -> Vec<T> {
    let d = geo.patch_len();
    let mut out = vec![T::zero(); geo.patches() * d];
    let plane = geo.height * geo.width;
    let mut row = 0;
    for b in 0..geo.batch {
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let dst = &mut out[row * d..(row + 1) * d];
                for c in 0..geo.channels {
                    let src = &input[(b * geo.channels + c) * plane..][..plane];
                    for ky in 0..geo.kh {
                        let Some(iy) = geo.source(oy, ky, geo.height) else { continue };
                        for kx in 0..geo.kw {
                            if let Some(ix) = geo.source(ox, kx, geo.width) {
                                dst[(c * geo.kh + ky) * geo.kw + kx] = src[iy * geo.width + ix];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Adjoint of `im2col_raw`: scatters patch gradients back onto the input grid.
pub(crate) fn col2im_raw<T: Scalar>(cols: &[T], geo: &ConvGeometry) -> Vec<T> {
    let d = geo.patch_len();
    let plane = geo.height * geo.width;
    let mut out = vec![T::zero(); geo.batch * geo.channels * plane];
    let mut row = 0;
    for b in 0..geo.batch {
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let src = &cols[row * d..(row + 1) * d];
                for c in 0..geo.channels {
                    let dst = &mut out[(b * geo.channels + c) * plane..][..plane];
                    for ky in 0..geo.kh {
                        let Some(iy) = geo.source(oy, ky, geo.height) else { continue };
                        for kx in 0..geo.kw {
                            if let Some(ix) = geo.source(ox, kx, geo.width) {
                                dst[iy * geo.width + ix] += src[(c * geo.kh + ky) * geo.kw + kx];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Forward convolution: `im2col(input) x reshape(W)^T + bias`, returned as NCHW.
pub fn conv2d_forward<T: Scalar>(params: &ConvLayerParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let geo = params.geometry(input.dims4()?)?;
    let patches = im2col_raw(input.data(), &geo);
    let out = forward_from_patches(params.weights.data(), &params.bias, &patches, &geo);
    Tensor::from_vec(&[geo.batch, params.out_channels(), geo.out_h, geo.out_w], out)
}

pub(crate) fn forward_from_patches<T: Scalar>(
    weights: &[T],
    bias: &[T],
    patches: &[T],
    geo: &ConvGeometry,
) -> Vec<T> {
    let d = geo.patch_len();
    let c_out = bias.len();
    let pix = geo.out_h * geo.out_w;
    let mut out = vec![T::zero(); geo.batch * c_out * pix];
    for b in 0..geo.batch {
        for q in 0..pix {
            let patch = &patches[(b * pix + q) * d..][..d];
            for co in 0..c_out {
                out[(b * c_out + co) * pix + q] = bias[co] + dot(patch, &weights[co * d..(co + 1) * d]);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub input: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    params: &ConvLayerParams<T>,
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let geo = params.geometry(input.dims4()?)?;
    let expected = [geo.batch, params.out_channels(), geo.out_h, geo.out_w];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "grad_out shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            expected
        )));
    }
    let patches = im2col_raw(input.data(), &geo);
    let (gw, gb, gp) = backward_from_patches(params.weights.data(), &patches, grad_out.data(), &geo, true);
    Ok(ConvGrads {
        weights: Tensor::from_vec(params.weights.shape(), gw)?,
        bias: gb,
        input: Tensor::from_vec(input.shape(), col2im_raw(&gp, &geo))?,
    })
}

/// Returns `(grad_weights, grad_bias, grad_patches)`; `grad_patches` is empty unless requested.
pub(crate) fn backward_from_patches<T: Scalar>(
    weights: &[T],
    patches: &[T],
    grad_out: &[T],
    geo: &ConvGeometry,
    want_input: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = geo.patch_len();
    let c_out = weights.len() / d;
    let pix = geo.out_h * geo.out_w;
    let mut gw = vec![T::zero(); weights.len()];
    let mut gb = vec![T::zero(); c_out];
    let mut gp = if want_input { vec![T::zero(); patches.len()] } else { Vec::new() };
    for b in 0..geo.batch {
        for co in 0..c_out {
            let g_row = &grad_out[(b * c_out + co) * pix..][..pix];
            let w_row = &weights[co * d..(co + 1) * d];
            for (q, &g) in g_row.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let p = b * pix + q;
                gb[co] += g;
                axpy(g, &patches[p * d..(p + 1) * d], &mut gw[co * d..(co + 1) * d]);
                if want_input {
                    axpy(g, w_row, &mut gp[p * d..(p + 1) * d]);
                }
            }
        }
    }
    (gw, gb, gp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct sliding-window extraction, independent of `ConvGeometry::source`.
    fn brute_patches(x: &Tensor<f64>, kh: usize, kw: usize, s: usize, pad: usize) -> Vec<Vec<f64>> {
        let [b, c, h, w] = x.dims4().unwrap();
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let at = |bb: usize, cc: usize, y: usize, xx: usize| -> f64 {
            if y < pad || xx < pad || y - pad >= h || xx - pad >= w {
                0.0
            } else {
                x.data()[((bb * c + cc) * h + y - pad) * w + xx - pad]
            }
        };
        let mut rows = Vec::new();
        for bb in 0..b {
            let mut y = 0;
            while y + kh <= ph {
                let mut xx = 0;
                while xx + kw <= pw {
                    let mut row = Vec::new();
                    for cc in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                row.push(at(bb, cc, y + i, xx + j));
                            }
                        }
                    }
                    rows.push(row);
                    xx += s;
                }
                y += s;
            }
        }
        rows
    }

    #[test]
    fn single_patch_is_flattened_input() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let p = im2col(&x, (3, 3), 1, 0).unwrap();
        assert_eq!(p.shape(), &[1, 9]);
        assert_eq!(p.data(), x.data());
    }

    #[test]
    fn stride_two_tiles_quadrants() {
        let x = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let p = im2col(&x, (2, 2), 2, 0).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(
            p.data(),
            &[0., 1., 4., 5., 2., 3., 6., 7., 8., 9., 12., 13., 10., 11., 14., 15.]
        );
    }

    #[test]
    fn two_channel_patches_match_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 2, 3, 3], &mut rng);
        let p = im2col(&x, (2, 2), 1, 0).unwrap();
        assert_eq!(p.shape(), &[4, 8]);
        let oracle: Vec<f64> = brute_patches(&x, 2, 2, 1, 0).concat();
        assert_eq!(p.data(), &oracle[..]);
    }

    #[test]
    fn padded_strided_patches_match_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 5, 4], &mut rng);
        for (k, s, pad) in [(3, 1, 1), (3, 2, 1), (2, 2, 0), (1, 1, 0), (3, 3, 2)] {
            let p = im2col(&x, (k, k), s, pad).unwrap();
            assert_eq!(p.data(), &brute_patches(&x, k, k, s, pad).concat()[..], "k={k} s={s} pad={pad}");
        }
    }

    #[test]
    fn incompatible_kernel_is_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(matches!(im2col(&x, (3, 3), 1, 0), Err(Error::Shape(_))));
        assert!(matches!(im2col(&x, (1, 1), 0, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_kernel_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 4, 4], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let id = ConvLayerParams::new(w, vec![0.0; 3], 1, 0).unwrap();
        assert_eq!(conv2d_forward(&id, &x).unwrap(), x);

        let zero = ConvLayerParams::new(Tensor::zeros(&[2, 3, 3, 3]), vec![0.5, -1.5], 1, 1).unwrap();
        let y = conv2d_forward(&zero, &x).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let co = (i / 16) % 2;
            assert_eq!(*v, [0.5, -1.5][co]);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let p = ConvLayerParams::new(Tensor::<f32>::zeros(&[2, 3, 3, 3]), vec![0.0; 2], 1, 1).unwrap();
        let x = Tensor::zeros(&[1, 4, 5, 5]);
        assert!(matches!(conv2d_forward(&p, &x), Err(Error::Shape(_))));
        assert!(ConvLayerParams::new(Tensor::<f32>::zeros(&[2, 3, 3, 3]), vec![0.0; 3], 1, 1).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let p = ConvLayerParams::new(random(&[3, 2, 3, 3], &mut rng), vec![0.1; 3], 1, 1).unwrap();
        let g = conv2d_backward(&p, &x, &Tensor::zeros(&[1, 3, 4, 4])).unwrap();
        assert!(g.weights.data().iter().all(|v| *v == 0.0));
        assert!(g.bias.iter().all(|v| *v == 0.0));
        assert!(g.input.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_pixel_grad_recovers_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let p = ConvLayerParams::new(random(&[2, 2, 3, 3], &mut rng), vec![0.0; 2], 1, 0).unwrap();
        // Output is 2x2; put gradient 2.5 on output channel 1, pixel (1, 0).
        let mut go = Tensor::zeros(&[1, 2, 2, 2]);
        go.data_mut()[4 + 2] = 2.5;
        let g = conv2d_backward(&p, &x, &go).unwrap();
        let gw = g.weights.data();
        assert!(gw[..18].iter().all(|v| *v == 0.0));
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let expect = 2.5 * x.data()[(c * 4 + 1 + i) * 4 + j];
                    assert_eq!(gw[18 + (c * 3 + i) * 3 + j], expect);
                }
            }
        }
        assert_eq!(g.bias, vec![0.0, 2.5]);
    }

    #[test]
    fn grad_out_shape_checked() {
        let p = ConvLayerParams::new(Tensor::<f32>::zeros(&[2, 1, 3, 3]), vec![0.0; 2], 1, 1).unwrap();
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(conv2d_backward(&p, &x, &Tensor::zeros(&[1, 2, 3, 3])).is_err());
    }
}
