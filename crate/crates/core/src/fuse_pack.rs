//! Fused binary-coding rows and the GQTQ bit-plane container.
//!
//! A codebook level `a + sum(e_i d_i)` (`e_i in {0, 1}`) on the grid
//! `S * level + z` equals `beta + sum(b_i * alpha_i)` with `b_i = 2 e_i - 1`,
//! `alpha_i = S d_i / 2` and `beta = S (a + sum(d_i) / 2) + z`, so inference
//! needs only the coefficients and one sign bit per plane.
//!
//! GQTQ layout, little-endian:
//!
//! ```text
//! "GQTQ" | u32 version = 1 | u32 rows | u32 cols | u8 m
//! rows x (m x f32 alpha_hat, f32 beta)
//! rows x m planes x ceil(cols / 8) bytes, bit j of a plane in byte j / 8,
//!   bit position j % 8 (LSB first), 1 means +1; pad bits are 0
//! ```

use std::fs;
use std::path::Path;

use crate::gptq_engine::{QuantizedLayer, RowGrid};
use crate::quant_core::RowPlan;
use crate::tensor_store::ByteCursor;
use crate::{Error, Result, TensorF32};

pub const GQTQ_MAGIC: [u8; 4] = *b"GQTQ";
pub const GQTQ_VERSION: u32 = 1;
pub const GQTQ_HEADER_BYTES: usize = 4 + 4 + 4 + 4 + 1;

/// `beta + sum_i (+-alpha_hat_i)`, in weight units.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRow {
    pub alpha_hat: Vec<f64>,
    pub beta: f64,
}

impl FusedRow {
    pub fn bits(&self) -> u32 {
        self.alpha_hat.len() as u32
    }

    /// Value selected by `mask`; bit `i` set picks `+alpha_hat[i]`.
    pub fn value(&self, mask: u32) -> f64 {
        self.beta
            + self
                .alpha_hat
                .iter()
                .enumerate()
                .map(|(i, a)| if mask >> i & 1 == 1 { *a } else { -*a })
                .sum::<f64>()
    }

    /// All `2^m` representable values, ascending.
    pub fn levels(&self) -> Vec<f64> {
        let mut v: Vec<f64> = (0..1u32 << self.alpha_hat.len())
            .map(|m| self.value(m))
            .collect();
        v.sort_by(f64::total_cmp);
        v
    }
}

pub fn fuse_plan(plan: &RowPlan) -> FusedRow {
    if plan.degenerate {
        return FusedRow {
            alpha_hat: Vec::new(),
            beta: plan.float_levels[0] as f64,
        };
    }
    let cb = &plan.codebook;
    let half_sum: f64 = cb.deltas().iter().map(|&d| d as f64 / 2.0).sum();
    FusedRow {
        alpha_hat: cb
            .deltas()
            .iter()
            .map(|&d| plan.scale * d as f64 / 2.0)
            .collect(),
        beta: plan.scale * (cb.base() as f64 + half_sum) + plan.zero,
    }
}

/// Fused coefficients plus `masks[r]`, the sign mask of the `r`-th level.
pub fn fuse_grid(grid: &RowGrid) -> (FusedRow, Vec<u32>) {
    match grid {
        RowGrid::Plan(p) => {
            let masks = if p.degenerate {
                vec![0]
            } else {
                p.codebook.rank_masks()
            };
            (fuse_plan(p), masks)
        }
        RowGrid::Binary(b) => (
            FusedRow {
                alpha_hat: b.alphas.clone(),
                beta: 0.0,
            },
            b.masks.clone(),
        ),
    }
}

pub fn plane_bytes(cols: usize) -> usize {
    cols.div_ceil(8)
}

/// Bit-plane packed binary-coding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBCMatrix {
    rows: usize,
    cols: usize,
    bits: u32,
    /// `rows x bits`; rows with fewer bits are zero-padded.
    alphas: Vec<f32>,
    betas: Vec<f32>,
    /// `rows x bits x plane_bytes(cols)`.
    planes: Vec<u8>,
}

impl PackedBCMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        bits: u32,
        alphas: Vec<f32>,
        betas: Vec<f32>,
        planes: Vec<u8>,
    ) -> Result<Self> {
        let m = bits as usize;
        if bits > 32 {
            return Err(Error::Malformed(format!("{bits} planes per row")));
        }
        if alphas.len() != rows * m || betas.len() != rows {
            return Err(Error::DimensionMismatch(
                "coefficient count does not match shape".into(),
            ));
        }
        if planes.len() != rows * m * plane_bytes(cols) {
            return Err(Error::DimensionMismatch(format!(
                "expected {} plane bytes, got {}",
                rows * m * plane_bytes(cols),
                planes.len()
            )));
        }
        let p = Self {
            rows,
            cols,
            bits,
            alphas,
            betas,
            planes,
        };
        p.check_padding()?;
        Ok(p)
    }

    fn check_padding(&self) -> Result<()> {
        let rem = self.cols % 8;
        if rem == 0 {
            return Ok(());
        }
        let mask = !((1u8 << rem) - 1);
        let pb = plane_bytes(self.cols);
        for (i, plane) in self.planes.chunks_exact(pb).enumerate() {
            if plane[pb - 1] & mask != 0 {
                return Err(Error::Malformed(format!("nonzero pad bits in plane {i}")));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn alphas(&self, r: usize) -> &[f32] {
        let m = self.bits as usize;
        &self.alphas[r * m..(r + 1) * m]
    }

    pub fn beta(&self, r: usize) -> f32 {
        self.betas[r]
    }

    /// Plane `i` of row `r`.
    pub fn plane(&self, r: usize, i: usize) -> &[u8] {
        let pb = plane_bytes(self.cols);
        let off = (r * self.bits as usize + i) * pb;
        &self.planes[off..off + pb]
    }

    pub fn planes(&self) -> &[u8] {
        &self.planes
    }

    pub fn fused_row(&self, r: usize) -> FusedRow {
        FusedRow {
            alpha_hat: self.alphas(r).iter().map(|&a| a as f64).collect(),
            beta: self.beta(r) as f64,
        }
    }

    /// Sign mask of element `(r, c)`.
    pub fn mask(&self, r: usize, c: usize) -> u32 {
        (0..self.bits as usize)
            .map(|i| ((self.plane(r, i)[c / 8] >> (c % 8)) & 1) as u32)
            .enumerate()
            .fold(0, |acc, (i, b)| acc | b << i)
    }

    pub fn serialized_len(&self) -> usize {
        serialized_len(self.rows, self.cols, self.bits)
    }
}

/// Exact GQTQ file size for a `rows x cols` matrix with `bits` planes.
pub fn serialized_len(rows: usize, cols: usize, bits: u32) -> usize {
    let m = bits as usize;
    GQTQ_HEADER_BYTES + rows * (4 * (m + 1) + m * plane_bytes(cols))
}

pub fn pack(layer: &QuantizedLayer) -> Result<PackedBCMatrix> {
    let (rows, cols) = (layer.rows, layer.cols);
    let m = layer.bits as usize;
    let pb = plane_bytes(cols);
    let mut alphas = vec![0f32; rows * m];
    let mut betas = vec![0f32; rows];
    let mut planes = vec![0u8; rows * m * pb];
    for r in 0..rows {
        let (fused, masks) = fuse_grid(&layer.grids[r]);
        if fused.alpha_hat.len() > m {
            return Err(Error::CorruptCodebook(format!(
                "row {r} needs {} planes, layer has {m}",
                fused.alpha_hat.len()
            )));
        }
        for (dst, &a) in alphas[r * m..].iter_mut().zip(&fused.alpha_hat) {
            *dst = a as f32;
        }
        betas[r] = fused.beta as f32;
        let row_planes = &mut planes[r * m * pb..(r + 1) * m * pb];
        for c in 0..cols {
            let idx = layer.indices[r * cols + c] as usize;
            let mask = *masks.get(idx).ok_or_else(|| {
                Error::CorruptCodebook(format!(
                    "row {r} col {c}: index {idx} has no sign decomposition"
                ))
            })?;
            for i in 0..fused.alpha_hat.len() {
                if mask >> i & 1 == 1 {
                    row_planes[i * pb + c / 8] |= 1 << (c % 8);
                }
            }
        }
    }
    PackedBCMatrix::new(rows, cols, m as u32, alphas, betas, planes)
}

/// Recovers level indices from the sign bits using the layer's grids.
pub fn unpack_indices(p: &PackedBCMatrix, grids: &[RowGrid]) -> Result<Vec<u8>> {
    if grids.len() != p.rows() {
        return Err(Error::DimensionMismatch(
            "grid count differs from packed rows".into(),
        ));
    }
    let mut out = Vec::with_capacity(p.rows() * p.cols());
    for (r, grid) in grids.iter().enumerate() {
        let (_, masks) = fuse_grid(grid);
        let mut rank_of = vec![u8::MAX; 1 << p.bits()];
        for (rank, &mask) in masks.iter().enumerate().rev() {
            rank_of[mask as usize] = rank as u8;
        }
        for c in 0..p.cols() {
            let mask = p.mask(r, c);
            match rank_of.get(mask as usize) {
                Some(&rank) if rank != u8::MAX => out.push(rank),
                _ => {
                    return Err(Error::CorruptCodebook(format!(
                        "row {r} col {c}: sign mask {mask:#b} is not a codebook level"
                    )))
                }
            }
        }
    }
    Ok(out)
}

/// `w_rc = beta_r + sum_i alpha_ri * (+-1)` straight from the packed form.
pub fn dequantize_packed(p: &PackedBCMatrix) -> TensorF32 {
    let (rows, cols) = (p.rows(), p.cols());
    let mut data = vec![0f32; rows * cols];
    for r in 0..rows {
        let beta = p.beta(r);
        let alphas = p.alphas(r);
        let out = &mut data[r * cols..(r + 1) * cols];
        out.fill(beta);
        for (i, &a) in alphas.iter().enumerate() {
            let plane = p.plane(r, i);
            for (chunk, &byte) in out.chunks_mut(8).zip(plane) {
                for (k, o) in chunk.iter_mut().enumerate() {
                    let sign = ((byte >> k) & 1) as f32 * 2.0 - 1.0;
                    *o += a * sign;
                }
            }
        }
    }
    TensorF32::matrix(rows, cols, data).expect("shape is consistent")
}

pub fn encode_packed(p: &PackedBCMatrix) -> Result<Vec<u8>> {
    let too_big = |what: &str| Error::Malformed(format!("{what} does not fit in u32"));
    let rows = u32::try_from(p.rows).map_err(|_| too_big("rows"))?;
    let cols = u32::try_from(p.cols).map_err(|_| too_big("cols"))?;
    let bits = u8::try_from(p.bits).map_err(|_| Error::Malformed("bits exceed u8".into()))?;
    if let Some(i) = p.alphas.iter().chain(&p.betas).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let m = p.bits as usize;
    let mut buf = Vec::with_capacity(p.serialized_len());
    buf.extend_from_slice(&GQTQ_MAGIC);
    buf.extend_from_slice(&GQTQ_VERSION.to_le_bytes());
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    buf.push(bits);
    for r in 0..p.rows {
        for a in &p.alphas[r * m..(r + 1) * m] {
            buf.extend_from_slice(&a.to_le_bytes());
        }
        buf.extend_from_slice(&p.betas[r].to_le_bytes());
    }
    buf.extend_from_slice(&p.planes);
    Ok(buf)
}

pub fn decode_packed(bytes: &[u8]) -> Result<PackedBCMatrix> {
    let mut cur = ByteCursor::new(bytes);
    let magic = cur.array::<4>()?;
    if magic != GQTQ_MAGIC {
        return Err(Error::BadMagic {
            expected: GQTQ_MAGIC,
            found: magic,
        });
    }
    let version = cur.u32()?;
    if version != GQTQ_VERSION {
        return Err(Error::VersionMismatch {
            expected: GQTQ_VERSION,
            found: version,
        });
    }
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let bits = cur.u8()? as u32;
    let m = bits as usize;
    let body = serialized_len(rows, cols, bits) - GQTQ_HEADER_BYTES;
    let remaining = cur.remaining();
    if remaining < body {
        return Err(Error::TruncatedPayload {
            expected: body as u64,
            found: remaining as u64,
        });
    }
    if remaining > body {
        return Err(Error::TrailingBytes((remaining - body) as u64));
    }
    let mut alphas = Vec::with_capacity(rows * m);
    let mut betas = Vec::with_capacity(rows);
    for _ in 0..rows {
        for _ in 0..m {
            alphas.push(cur.f32()?);
        }
        betas.push(cur.f32()?);
    }
    if let Some(i) = alphas.iter().chain(&betas).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let planes = cur.rest().to_vec();
    PackedBCMatrix::new(rows, cols, bits, alphas, betas, planes)
}

pub fn serialize(p: &PackedBCMatrix, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_packed(p)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn deserialize(path: impl AsRef<Path>) -> Result<PackedBCMatrix> {
    decode_packed(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib_stats::HessianState;
    use crate::gptq_engine::{quantize_layer, EngineConfig, MethodTag, QuantMethod};
    use crate::quant_core::{grid_levels, Codebook, PlanConfig};
    use crate::tensor_store::{gen_activations, gen_weights};

    fn plan(n: u32, cb: Codebook, scale: f64, zero: f64) -> RowPlan {
        RowPlan {
            inter_bits: n,
            bits: cb.bits(),
            scale,
            base_scale: scale,
            zero,
            float_levels: grid_levels(&cb, scale, zero),
            codebook: cb,
            degenerate: false,
        }
    }

    #[test]
    fn fused_two_step_example() {
        for s in [1.0, 0.37] {
            for z in [0.0, -1.2] {
                let f = fuse_plan(&plan(3, Codebook::new(0, vec![1, 6]).unwrap(), s, z));
                assert!((f.alpha_hat[0] - 0.5 * s).abs() <= 1e-12);
                assert!((f.alpha_hat[1] - 3.0 * s).abs() <= 1e-12);
                assert!((f.beta - (3.5 * s + z)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn linear_grid_as_binary_code() {
        let s = 0.8;
        let f = fuse_plan(&plan(2, Codebook::full_grid(2), s, 0.0));
        assert_eq!(f.alpha_hat, vec![0.5 * s, s]);
        let lv = f.levels();
        let shifted: Vec<f64> = lv.iter().map(|v| v - lv[2]).collect();
        let expect = [-2.0 * s, -s, 0.0, s];
        for (a, b) in shifted.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_bit_direct() {
        let f = fuse_plan(&plan(1, Codebook::new(0, vec![1]).unwrap(), 1.0, 0.0));
        assert_eq!(f.alpha_hat, vec![0.5]);
        assert_eq!(f.beta, 0.5);
        assert_eq!(f.value(1), 1.0);
    }

    #[test]
    fn degenerate_plan_fuses_to_constant() {
        let p =
            crate::quant_core::build_row_plan(&[1.5; 4], &[1.0; 4], PlanConfig::default()).unwrap();
        let f = fuse_plan(&p);
        assert_eq!(f.bits(), 0);
        assert_eq!(f.beta, 1.5);
    }

    fn layer(tag: MethodTag, rows: usize, cols: usize, seed: u64) -> QuantizedLayer {
        let w = gen_weights(rows, cols, seed, 1.0).unwrap();
        let x = gen_activations(cols, 2 * cols, seed + 1, 0.5).unwrap();
        let h = HessianState::from_activations(&x, 0.01).unwrap();
        quantize_layer(
            &w,
            &h,
            &QuantMethod::with_defaults(tag, 3),
            &EngineConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn pack_unpack_exact() {
        for tag in MethodTag::ALL {
            let l = layer(tag, 9, 21, 3);
            let p = pack(&l).unwrap();
            let idx = unpack_indices(&p, &l.grids).unwrap();
            assert_eq!(idx, l.indices, "{tag}");
            let via_levels: Vec<f32> = (0..l.rows * l.cols)
                .map(|e| l.grids[e / l.cols].levels()[idx[e] as usize])
                .collect();
            assert_eq!(via_levels, l.dequantized.data());
        }
    }

    #[test]
    fn all_max_level_is_all_ones() {
        let row: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let w = TensorF32::matrix(1, 8, row.clone()).unwrap();
        let mut l = crate::gptq_engine::rtn_layer(&w, &QuantMethod::RtnLinear { bits: 3 }).unwrap();
        l.indices = vec![7; 8];
        let p = pack(&l).unwrap();
        assert!(p.planes().iter().all(|&b| b == 0xFF));
    }

    #[test]
    fn padding_is_zero() {
        let l = layer(MethodTag::Gptqt, 4, 5, 9);
        let p = pack(&l).unwrap();
        assert_eq!(plane_bytes(5), 1);
        assert!(p.planes().iter().all(|&b| b & 0b1110_0000 == 0));
        assert_eq!(p.planes().len(), 4 * 3);
    }

    #[test]
    fn fused_dequant_matches_two_step() {
        let l = layer(MethodTag::Gptqt, 64, 64, 17);
        let p = pack(&l).unwrap();
        let d = dequantize_packed(&p);
        let max = l
            .dequantized
            .data()
            .iter()
            .fold(0f32, |m, v| m.max(v.abs()));
        for (a, b) in d.data().iter().zip(l.dequantized.data()) {
            assert!((a - b).abs() <= 1e-5 * max);
        }
    }

    #[test]
    fn constant_row_packs() {
        let mut data = vec![0.25f32; 8];
        data.extend((0..8).map(|i| i as f32));
        let w = TensorF32::matrix(2, 8, data).unwrap();
        let x = gen_activations(8, 16, 1, 0.2).unwrap();
        let h = HessianState::from_activations(&x, 0.01).unwrap();
        let l = quantize_layer(
            &w,
            &h,
            &QuantMethod::with_defaults(MethodTag::Gptqt, 3),
            &EngineConfig::default(),
        )
        .unwrap();
        let p = pack(&l).unwrap();
        assert_eq!(p.alphas(0), &[0.0, 0.0, 0.0]);
        let d = dequantize_packed(&p);
        assert!(d.row(0).iter().all(|&v| v == 0.25));
        assert_eq!(unpack_indices(&p, &l.grids).unwrap(), l.indices);
    }

    #[test]
    fn serialize_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gqtq");
        let p = pack(&layer(MethodTag::Gptqt, 7, 13, 2)).unwrap();
        serialize(&p, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), serialized_len(7, 13, 3));
        let back = deserialize(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode_packed(&back).unwrap(), bytes);
    }

    #[test]
    fn decode_errors() {
        let p = pack(&layer(MethodTag::GptqLinear, 3, 10, 4)).unwrap();
        let bytes = encode_packed(&p).unwrap();
        assert!(matches!(
            decode_packed(&bytes[..bytes.len() - 1]),
            Err(Error::TruncatedPayload { .. })
        ));
        assert!(matches!(
            decode_packed(&bytes[..10]),
            Err(Error::TruncatedPayload { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_packed(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_packed(&bad),
            Err(Error::VersionMismatch { .. })
        ));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode_packed(&bad), Err(Error::TrailingBytes(1))));
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] |= 0x80;
        assert!(matches!(decode_packed(&bad), Err(Error::Malformed(_))));
    }

    #[test]
    fn empty_container() {
        let p = PackedBCMatrix::new(0, 16, 3, vec![], vec![], vec![]).unwrap();
        let bytes = encode_packed(&p).unwrap();
        assert_eq!(bytes.len(), GQTQ_HEADER_BYTES);
        assert_eq!(decode_packed(&bytes).unwrap(), p);
    }

    #[test]
    fn storage_budget() {
        let l = layer(MethodTag::Gptqt, 32, 100, 5);
        let p = pack(&l).unwrap();
        let n = encode_packed(&p).unwrap().len();
        assert!(n <= 32 * (3 * plane_bytes(100) + 4 * 4) + GQTQ_HEADER_BYTES);
    }
}
