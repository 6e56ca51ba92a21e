//! GQTF tensor container and synthetic weight/activation generators.
//!
//! Layout (little-endian, no padding, no trailing bytes):
//!
//! ```text
//! "GQTF" | u32 version = 1 | u8 ndim | ndim x u64 dims | prod(dims) x f32
//! ```

use std::fs;
use std::path::Path;

use crate::rng::NormalStream;
use crate::{Error, Result};

pub const GQTF_MAGIC: [u8; 4] = *b"GQTF";
pub const GQTF_VERSION: u32 = 1;

/// Dense row-major f32 tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 2 {
            return Err(Error::DimensionMismatch(format!(
                "tensor rank must be 1 or 2, got {}",
                dims.len()
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "dims {:?} need {} elements, got {}",
                dims,
                expected,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            dims: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Row count; a rank-1 tensor is treated as a single row.
    pub fn rows(&self) -> usize {
        if self.dims.len() == 2 {
            self.dims[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap_or(&0)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

pub fn encode_tensor(t: &TensorF32) -> Result<Vec<u8>> {
    if let Some(i) = t.first_non_finite() {
        return Err(Error::NonFinite(i));
    }
    let mut buf = Vec::with_capacity(9 + 8 * t.dims.len() + 4 * t.data.len());
    buf.extend_from_slice(&GQTF_MAGIC);
    buf.extend_from_slice(&GQTF_VERSION.to_le_bytes());
    buf.push(t.dims.len() as u8);
    for &d in &t.dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<TensorF32> {
    let mut cur = ByteCursor::new(bytes);
    let magic = cur.array::<4>()?;
    if magic != GQTF_MAGIC {
        return Err(Error::BadMagic {
            expected: GQTF_MAGIC,
            found: magic,
        });
    }
    let version = cur.u32()?;
    if version != GQTF_VERSION {
        return Err(Error::VersionMismatch {
            expected: GQTF_VERSION,
            found: version,
        });
    }
    let ndim = cur.u8()? as usize;
    if ndim == 0 || ndim > 2 {
        return Err(Error::Malformed(format!("unsupported ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(
            usize::try_from(cur.u64()?).map_err(|_| Error::Malformed("dim overflow".into()))?,
        );
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Malformed("element count overflow".into()))?;
    let payload = count
        .checked_mul(4)
        .ok_or_else(|| Error::Malformed("payload size overflow".into()))?;
    let remaining = cur.remaining();
    if remaining < payload {
        return Err(Error::TruncatedPayload {
            expected: payload as u64,
            found: remaining as u64,
        });
    }
    if remaining > payload {
        return Err(Error::TrailingBytes((remaining - payload) as u64));
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in cur.rest().chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::NonFinite(i));
        }
        data.push(v);
    }
    TensorF32::new(dims, data)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorF32> {
    decode_tensor(&fs::read(path)?)
}

/// Writes `t` to `path`. Validation happens before the file is opened.
pub fn write_tensor(path: impl AsRef<Path>, t: &TensorF32) -> Result<()> {
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Pseudo-normal `rows x cols` matrix with standard deviation `scale`.
pub fn gen_weights(rows: usize, cols: usize, seed: u64, scale: f32) -> Result<TensorF32> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidConfig(
            "gen_weights needs rows, cols >= 1".into(),
        ));
    }
    let mut rng = NormalStream::new(seed);
    let scale = scale as f64;
    let data = (0..rows * cols)
        .map(|_| (scale * rng.next_normal()) as f32)
        .collect();
    TensorF32::matrix(rows, cols, data)
}

/// Feature-major `cols x nsamples` activations whose features follow an
/// AR(1) chain with coefficient `rho` inside each sample.
///
/// Per sample: `x[0] = e0`, `x[i] = rho x[i-1] + sqrt(1 - rho^2) e_i`, with
/// `e` drawn from the normal stream sample by sample, feature by feature.
pub fn gen_activations(cols: usize, nsamples: usize, seed: u64, rho: f32) -> Result<TensorF32> {
    if cols == 0 || nsamples == 0 {
        return Err(Error::InvalidConfig(
            "gen_activations needs cols, nsamples >= 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!(
            "rho must lie in [0, 1), got {rho}"
        )));
    }
    let rho = rho as f64;
    let innov = (1.0 - rho * rho).sqrt();
    let mut rng = NormalStream::new(seed);
    let mut data = vec![0f32; cols * nsamples];
    for s in 0..nsamples {
        let mut prev = rng.next_normal();
        data[s] = prev as f32;
        for f in 1..cols {
            prev = rho * prev + innov * rng.next_normal();
            data[f * nsamples + s] = prev as f32;
        }
    }
    TensorF32::matrix(cols, nsamples, data)
}

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::TruncatedPayload {
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}
