//! The `.subp` container: a little-endian serialization of [`BsrModel`].
//!
//! ```text
//! magic "SUBP1xN\0" | version u32 | layer count u32
//! per layer: kind u8 (0 dense, 1 bsr)
//!   dense: C_out C_in Kh Kw (u32)          | values f32[C_out*C_in*Kh*Kw] | bias f32[C_out]
//!   bsr:   N C_out C_in Kh Kw K (u32)      | col_indices u32[G*K] | values f32[G*K*N*Kh*Kw] | bias f32[C_out]
//! ```

use std::path::Path;

use crate::bsr::{BsrLayer, BsrModel, DenseLayer, LayerRecord};
use crate::bytes::{put_f32s, put_u32, to_u32, ByteReader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SUBP1xN\0";
pub const VERSION: u32 = 1;

const KIND_DENSE: u8 = 0;
const KIND_BSR: u8 = 1;

pub fn serialize(model: &BsrModel<f32>) -> Result<Vec<u8>> {
    model.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(model.layers.len(), "layer count")?);
    for layer in &model.layers {
        match layer {
            LayerRecord::Dense(d) => {
                out.push(KIND_DENSE);
                for v in [d.c_out, d.c_in, d.kh, d.kw] {
                    put_u32(&mut out, to_u32(v, "dense header")?);
                }
                put_f32s(&mut out, &d.values);
                put_f32s(&mut out, &d.bias);
            }
            LayerRecord::Bsr(b) => {
                out.push(KIND_BSR);
                for v in [b.n, b.c_out, b.c_in, b.kh, b.kw, b.kept_per_group] {
                    put_u32(&mut out, to_u32(v, "bsr header")?);
                }
                for &c in &b.col_indices {
                    put_u32(&mut out, c);
                }
                put_f32s(&mut out, &b.values);
                put_f32s(&mut out, &b.bias);
            }
        }
    }
    Ok(out)
}

fn product(dims: &[usize], at: usize) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(at, "header dimensions overflow"))
}

pub fn deserialize(bytes: &[u8]) -> Result<BsrModel<f32>> {
    let mut r = ByteReader::new(bytes);
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, not a .subp file"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(8, format!("unsupported format version {version}")));
    }
    let count = r.u32("layer count")? as usize;
    let mut layers: Vec<LayerRecord<f32>> = Vec::new();
    for li in 0..count {
        let start = r.offset();
        let record = match r.u8("layer kind")? {
            KIND_DENSE => {
                let mut h = [0usize; 4];
                for v in h.iter_mut() {
                    *v = r.u32("dense header")? as usize;
                }
                let [c_out, c_in, kh, kw] = h;
                let n_vals = product(&h, start)?;
                let d = DenseLayer {
                    c_out,
                    c_in,
                    kh,
                    kw,
                    values: r.f32_vec(n_vals, "dense values")?,
                    bias: r.f32_vec(c_out, "bias")?,
                };
                d.validate().map_err(|_| Error::format(start, format!("layer {li}: invalid dense header")))?;
                LayerRecord::Dense(d)
            }
            KIND_BSR => {
                let mut h = [0usize; 6];
                for v in h.iter_mut() {
                    *v = r.u32("bsr header")? as usize;
                }
                let [n, c_out, c_in, kh, kw, k] = h;
                if n == 0 || c_out % n != 0 {
                    return Err(Error::format(start + 1, format!("layer {li}: C_out={c_out} not divisible by N={n}")));
                }
                let idx_at = r.offset();
                let n_idx = product(&[c_out / n, k], start)?;
                let col_indices = r.u32_vec(n_idx, "column indices")?;
                let n_vals = product(&[n_idx, n, kh, kw], start)?;
                let b = BsrLayer {
                    n,
                    c_out,
                    c_in,
                    kh,
                    kw,
                    kept_per_group: k,
                    col_indices,
                    values: r.f32_vec(n_vals, "block values")?,
                    bias: r.f32_vec(c_out, "bias")?,
                };
                b.validate_at(idx_at)?;
                LayerRecord::Bsr(b)
            }
            other => return Err(Error::format(start, format!("layer {li}: unknown layer kind {other}"))),
        };
        if let Some(prev) = layers.last() {
            if record.shape()[1] != prev.shape()[0] {
                return Err(Error::format(start, format!("layer {li}: input channels do not chain")));
            }
        }
        layers.push(record);
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), "trailing bytes after the last layer"));
    }
    Ok(BsrModel { layers })
}

pub fn write_file(path: impl AsRef<Path>, model: &BsrModel<f32>) -> Result<()> {
    std::fs::write(path, serialize(model)?)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<BsrModel<f32>> {
    deserialize(&std::fs::read(path)?)
}
