//! Layer driver: per-row grids first, then column-by-column quantization with
//! inverse-Hessian error compensation.
//!
//! Grids are frozen from the original weights before the column loop starts,
//! so later columns are snapped to grids that were fitted to weights they no
//! longer hold. Every method differs only in how it builds those grids and
//! whether compensation runs.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib_stats::HessianState;
use crate::quant_core::{
    bcq_als, codebook_errors, fit_linear, fit_range, nearest_index, quantize_linear, row_min_max,
    row_proxy_error, BinaryCode, LinearParams, Objective, PlanConfig, RowPlan, RowPlanner,
};
use crate::{Error, Result, TensorF32};

pub const DEFAULT_BLOCK: usize = 128;
pub const DEFAULT_ALS_ITERS: usize = 10;
pub const DEFAULT_CLIP_GRID: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodTag {
    RtnLinear,
    GptqLinear,
    GptqMinMse,
    BcqPlain,
    GptqBcq,
    Gptqt,
}

impl MethodTag {
    pub const ALL: [MethodTag; 6] = [
        MethodTag::RtnLinear,
        MethodTag::GptqLinear,
        MethodTag::GptqMinMse,
        MethodTag::BcqPlain,
        MethodTag::GptqBcq,
        MethodTag::Gptqt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodTag::RtnLinear => "rtn",
            MethodTag::GptqLinear => "gptq",
            MethodTag::GptqMinMse => "gptq-minmse",
            MethodTag::BcqPlain => "bcq",
            MethodTag::GptqBcq => "gptq-bcq",
            MethodTag::Gptqt => "gptqt",
        }
    }

    /// Whether the column loop propagates rounding error.
    pub fn compensates(self) -> bool {
        !matches!(self, MethodTag::RtnLinear | MethodTag::BcqPlain)
    }
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        let tag = match norm.as_str() {
            "rtn" | "rtn-linear" => MethodTag::RtnLinear,
            "gptq" | "gptq-linear" => MethodTag::GptqLinear,
            "gptq-minmse" | "minmse" => MethodTag::GptqMinMse,
            "bcq" | "bcq-plain" => MethodTag::BcqPlain,
            "gptq-bcq" | "gptq+bcq" => MethodTag::GptqBcq,
            "gptqt" => MethodTag::Gptqt,
            _ => return Err(Error::InvalidConfig(format!("unknown method {s:?}"))),
        };
        Ok(tag)
    }
}

/// Whether the GPTQT codebook is chosen per row or shared across the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CodebookScope {
    #[default]
    PerRow,
    PerLayer,
}

/// Scoring used by the GPTQT search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scoring {
    #[default]
    DiagonalHessian,
    /// Full `delta H delta^T`; quadratic in the row length.
    FullHessian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantMethod {
    RtnLinear {
        bits: u32,
    },
    GptqLinear {
        bits: u32,
    },
    GptqMinMse {
        bits: u32,
        clip_grid: usize,
    },
    BcqPlain {
        bits: u32,
        iters: usize,
    },
    GptqBcq {
        bits: u32,
        iters: usize,
    },
    Gptqt {
        plan: PlanConfig,
        scope: CodebookScope,
        scoring: Scoring,
    },
}

impl QuantMethod {
    /// Method `tag` at final width `bits`, other knobs at their defaults.
    pub fn with_defaults(tag: MethodTag, bits: u32) -> Self {
        match tag {
            MethodTag::RtnLinear => QuantMethod::RtnLinear { bits },
            MethodTag::GptqLinear => QuantMethod::GptqLinear { bits },
            MethodTag::GptqMinMse => QuantMethod::GptqMinMse {
                bits,
                clip_grid: DEFAULT_CLIP_GRID,
            },
            MethodTag::BcqPlain => QuantMethod::BcqPlain {
                bits,
                iters: DEFAULT_ALS_ITERS,
            },
            MethodTag::GptqBcq => QuantMethod::GptqBcq {
                bits,
                iters: DEFAULT_ALS_ITERS,
            },
            MethodTag::Gptqt => QuantMethod::gptqt(PlanConfig {
                bits,
                ..PlanConfig::default()
            }),
        }
    }

    pub fn gptqt(plan: PlanConfig) -> Self {
        QuantMethod::Gptqt {
            plan,
            scope: CodebookScope::PerRow,
            scoring: Scoring::DiagonalHessian,
        }
    }

    pub fn tag(&self) -> MethodTag {
        match self {
            QuantMethod::RtnLinear { .. } => MethodTag::RtnLinear,
            QuantMethod::GptqLinear { .. } => MethodTag::GptqLinear,
            QuantMethod::GptqMinMse { .. } => MethodTag::GptqMinMse,
            QuantMethod::BcqPlain { .. } => MethodTag::BcqPlain,
            QuantMethod::GptqBcq { .. } => MethodTag::GptqBcq,
            QuantMethod::Gptqt { .. } => MethodTag::Gptqt,
        }
    }

    /// Final bit-width of the stored representation.
    pub fn bits(&self) -> u32 {
        match *self {
            QuantMethod::RtnLinear { bits }
            | QuantMethod::GptqLinear { bits }
            | QuantMethod::GptqMinMse { bits, .. }
            | QuantMethod::BcqPlain { bits, .. }
            | QuantMethod::GptqBcq { bits, .. } => bits,
            QuantMethod::Gptqt { plan, .. } => plan.bits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bits = self.bits();
        if !(1..=8).contains(&bits) {
            return Err(Error::InvalidConfig(format!(
                "bits must be in 1..=8, got {bits}"
            )));
        }
        match self {
            QuantMethod::GptqMinMse { clip_grid: 0, .. } => {
                Err(Error::InvalidConfig("clip grid must be >= 1".into()))
            }
            QuantMethod::Gptqt { plan, .. } => plan.validate(),
            _ => Ok(()),
        }
    }
}

/// Column visiting order in the compensation loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColumnOrder {
    #[default]
    Natural,
    /// Largest Hessian diagonal first.
    DescendingHessianDiag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineConfig {
    pub block: usize,
    pub order: ColumnOrder,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            block: DEFAULT_BLOCK,
            order: ColumnOrder::Natural,
        }
    }
}

/// Binary-coding grid `{sum_i e_i alpha_i}` with positive ascending alphas.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryLevels {
    pub alphas: Vec<f64>,
    /// All `2^m` sums, ascending; equal sums are kept.
    pub levels: Vec<f32>,
    /// `masks[r]`: bit `i` set means `+alphas[i]` in `levels[r]`.
    pub masks: Vec<u32>,
}

impl BinaryLevels {
    pub fn from_code(code: &BinaryCode) -> Self {
        let mut alphas: Vec<f64> = code.alphas.iter().map(|a| a.abs()).collect();
        alphas.sort_by(f64::total_cmp);
        let m = alphas.len();
        let mut pairs: Vec<(f64, u32)> = (0..1u32 << m)
            .map(|mask| {
                let v = alphas
                    .iter()
                    .enumerate()
                    .map(|(i, a)| if mask >> i & 1 == 1 { *a } else { -*a })
                    .sum();
                (v, mask)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Self {
            alphas,
            levels: pairs.iter().map(|p| p.0 as f32).collect(),
            masks: pairs.iter().map(|p| p.1).collect(),
        }
    }
}

/// Frozen quantization grid of one row.
#[derive(Debug, Clone, PartialEq)]
pub enum RowGrid {
    Plan(RowPlan),
    Binary(BinaryLevels),
}

impl RowGrid {
    pub fn levels(&self) -> &[f32] {
        match self {
            RowGrid::Plan(p) => &p.float_levels,
            RowGrid::Binary(b) => &b.levels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuantizedLayer {
    pub method: MethodTag,
    pub bits: u32,
    pub rows: usize,
    pub cols: usize,
    /// Row-major index into each row's ascending level list.
    pub indices: Vec<u8>,
    pub grids: Vec<RowGrid>,
    pub dequantized: TensorF32,
    /// Diagonal proxy error `sum_j (w_q - w)^2 H_jj` per row; plain squared
    /// error for layers quantized without calibration data.
    pub row_errors: Vec<f64>,
    pub plan_time: Duration,
    pub quant_time: Duration,
}

impl QuantizedLayer {
    pub fn weight_mse(&self, original: &TensorF32) -> f64 {
        let n = original.data().len().max(1) as f64;
        original
            .data()
            .iter()
            .zip(self.dequantized.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / n
    }

    pub fn proxy_error(&self) -> f64 {
        self.row_errors.iter().sum()
    }
}

/// Shrinks `[min, max]` by `gamma = 1 - i / grid` for `i in 0..grid` and keeps
/// the range with the lowest round-trip MSE; the larger `gamma` wins ties.
pub fn minmse_clip_fit(row: &[f32], n: u32, grid: usize) -> Result<LinearParams> {
    if grid == 0 {
        return Err(Error::InvalidConfig("clip grid must be >= 1".into()));
    }
    let base = fit_linear(row, n)?;
    if base.scale == 0.0 {
        return Ok(base);
    }
    let (lo, hi) = row_min_max(row);
    let mut best = (base, f64::INFINITY);
    for i in 0..grid {
        let gamma = 1.0 - i as f64 / grid as f64;
        let p = fit_range(gamma * lo, gamma * hi, n);
        let mse: f64 = quantize_linear(row, &p)
            .iter()
            .zip(row)
            .map(|(&q, &w)| (p.dequant(q) as f32 as f64 - w as f64).powi(2))
            .sum();
        if mse < best.1 {
            best = (p, mse);
        }
    }
    Ok(best.0)
}

fn check_shapes(w: &TensorF32) -> Result<()> {
    if w.dims().len() != 2 || w.rows() == 0 || w.cols() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "weights must be a non-empty matrix, got dims {:?}",
            w.dims()
        )));
    }
    Ok(())
}

fn build_grids(
    w: &TensorF32,
    method: &QuantMethod,
    hdiag: &[f64],
    full_h: Option<&[f64]>,
) -> Result<Vec<RowGrid>> {
    let rows: Vec<&[f32]> = (0..w.rows()).map(|r| w.row(r)).collect();
    match *method {
        QuantMethod::RtnLinear { bits } | QuantMethod::GptqLinear { bits } => rows
            .par_iter()
            .map(|row| Ok(RowGrid::Plan(RowPlan::linear(&fit_linear(row, bits)?))))
            .collect(),
        QuantMethod::GptqMinMse { bits, clip_grid } => rows
            .par_iter()
            .map(|row| {
                Ok(RowGrid::Plan(RowPlan::linear(&minmse_clip_fit(
                    row, bits, clip_grid,
                )?)))
            })
            .collect(),
        QuantMethod::BcqPlain { bits, iters } | QuantMethod::GptqBcq { bits, iters } => rows
            .par_iter()
            .map(|row| {
                Ok(RowGrid::Binary(BinaryLevels::from_code(&bcq_als(
                    row, bits, iters,
                )?)))
            })
            .collect(),
        QuantMethod::Gptqt {
            plan,
            scope,
            scoring,
        } => {
            let planner = RowPlanner::new(plan)?;
            let obj = match (scoring, full_h) {
                (Scoring::FullHessian, Some(h)) => Objective::Full(h),
                (Scoring::FullHessian, None) => {
                    return Err(Error::InvalidConfig(
                        "full-Hessian scoring needs calibration data".into(),
                    ))
                }
                (Scoring::DiagonalHessian, _) => Objective::Diagonal(hdiag),
            };
            match scope {
                CodebookScope::PerRow => rows
                    .par_iter()
                    .map(|row| Ok(RowGrid::Plan(planner.plan(row, obj)?)))
                    .collect(),
                CodebookScope::PerLayer => plan_shared_codebook(&planner, &rows, obj),
            }
        }
    }
}

fn plan_shared_codebook(
    planner: &RowPlanner,
    rows: &[&[f32]],
    obj: Objective<'_>,
) -> Result<Vec<RowGrid>> {
    let n = planner.config().inter_bits;
    let per_row: Vec<Option<Vec<f64>>> = rows
        .par_iter()
        .map(|row| {
            let p = fit_linear(row, n)?;
            Ok((p.scale > 0.0).then(|| codebook_errors(row, obj, &p, planner.candidates())))
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; planner.candidates().len()];
    for errs in per_row.iter().flatten() {
        for (t, e) in total.iter_mut().zip(errs) {
            *t += e;
        }
    }
    let mut best = 0;
    for (i, &e) in total.iter().enumerate() {
        if e < total[best] {
            best = i;
        }
    }
    let cb = planner.candidates()[best].clone();
    rows.par_iter()
        .map(|row| {
            let p = fit_linear(row, n)?;
            if p.scale == 0.0 {
                return Ok(RowGrid::Plan(planner.plan(row, obj)?));
            }
            Ok(RowGrid::Plan(planner.plan_with_codebook(
                row,
                obj,
                &p,
                cb.clone(),
            )?))
        })
        .collect()
}

/// One compensation step: snaps column `col` to `quantized` and moves the
/// scaled error onto the later columns through row `col` of the upper
/// inverse factor `u` (`k x k`, row-major).
pub fn compensate_step(w: &mut [f64], col: usize, quantized: f64, u: &[f64]) {
    let k = w.len();
    let urow = &u[col * k..(col + 1) * k];
    let err = (w[col] - quantized) / urow[col];
    w[col] = quantized;
    for j in col + 1..k {
        w[j] -= err * urow[j];
    }
}

/// Quantizes one row in place against `levels`, deferring updates outside
/// the current block of `block` columns. Returns level indices.
pub fn quantize_row_compensated(w: &mut [f64], levels: &[f32], u: &[f64], block: usize) -> Vec<u8> {
    let k = w.len();
    let block = block.max(1);
    let mut idx = vec![0u8; k];
    let mut errs = vec![0.0; block];
    let mut start = 0;
    while start < k {
        let end = (start + block).min(k);
        for i in start..end {
            let li = nearest_index(levels, w[i] as f32);
            idx[i] = li as u8;
            let q = levels[li] as f64;
            let urow = &u[i * k..(i + 1) * k];
            let err = (w[i] - q) / urow[i];
            w[i] = q;
            for j in i + 1..end {
                w[j] -= err * urow[j];
            }
            errs[i - start] = err;
        }
        if end < k {
            for i in start..end {
                let e = errs[i - start];
                let urow = &u[i * k..(i + 1) * k];
                for j in end..k {
                    w[j] -= e * urow[j];
                }
            }
        }
        start = end;
    }
    idx
}

fn assemble(
    w: &TensorF32,
    method: &QuantMethod,
    grids: Vec<RowGrid>,
    indices: Vec<u8>,
    hdiag: &[f64],
    plan_time: Duration,
    quant_time: Duration,
) -> Result<QuantizedLayer> {
    let (rows, cols) = (w.rows(), w.cols());
    let mut data = vec![0f32; rows * cols];
    for r in 0..rows {
        let levels = grids[r].levels();
        for c in 0..cols {
            data[r * cols + c] = levels[indices[r * cols + c] as usize];
        }
    }
    let dequantized = TensorF32::matrix(rows, cols, data)?;
    let row_errors = (0..rows)
        .map(|r| {
            w.row(r)
                .iter()
                .zip(dequantized.row(r))
                .zip(hdiag)
                .map(|((&a, &b), &h)| (b as f64 - a as f64).powi(2) * h)
                .sum()
        })
        .collect();
    Ok(QuantizedLayer {
        method: method.tag(),
        bits: method.bits(),
        rows,
        cols,
        indices,
        grids,
        dequantized,
        row_errors,
        plan_time,
        quant_time,
    })
}

fn nearest_indices(w: &TensorF32, grids: &[RowGrid]) -> Vec<u8> {
    (0..w.rows())
        .into_par_iter()
        .flat_map_iter(|r| {
            let levels = grids[r].levels();
            w.row(r)
                .iter()
                .map(move |&v| nearest_index(levels, v) as u8)
        })
        .collect()
}

/// Quantizes a layer with calibration statistics. Methods without
/// compensation use the Hessian only for row error reporting.
pub fn quantize_layer(
    w: &TensorF32,
    hess: &HessianState,
    method: &QuantMethod,
    cfg: &EngineConfig,
) -> Result<QuantizedLayer> {
    method.validate()?;
    check_shapes(w)?;
    if !hess.is_finalized() {
        return Err(Error::NotFinalized);
    }
    if hess.k() != w.cols() {
        return Err(Error::DimensionMismatch(format!(
            "hessian has {} features, weights have {} columns",
            hess.k(),
            w.cols()
        )));
    }
    if cfg.block == 0 {
        return Err(Error::InvalidConfig("block must be >= 1".into()));
    }
    let hdiag = hess.hdiag()?;
    let t0 = Instant::now();
    let grids = build_grids(w, method, &hdiag, Some(hess.h()))?;
    let plan_time = t0.elapsed();

    let t1 = Instant::now();
    let indices = if method.tag().compensates() {
        let k = w.cols();
        let perm: Vec<usize> = match cfg.order {
            ColumnOrder::Natural => (0..k).collect(),
            ColumnOrder::DescendingHessianDiag => {
                let mut p: Vec<usize> = (0..k).collect();
                p.sort_by(|&a, &b| hdiag[b].total_cmp(&hdiag[a]));
                p
            }
        };
        let permuted;
        let u: &[f64] = match cfg.order {
            ColumnOrder::Natural => hess.hinv_chol()?,
            ColumnOrder::DescendingHessianDiag => {
                permuted = hess.permuted_hinv_chol(&perm)?;
                &permuted
            }
        };
        let per_row: Vec<Vec<u8>> = (0..w.rows())
            .into_par_iter()
            .map(|r| {
                let row = w.row(r);
                let mut buf: Vec<f64> = perm.iter().map(|&c| row[c] as f64).collect();
                let pidx = quantize_row_compensated(&mut buf, grids[r].levels(), u, cfg.block);
                let mut out = vec![0u8; k];
                for (i, &c) in perm.iter().enumerate() {
                    out[c] = pidx[i];
                }
                out
            })
            .collect();
        per_row.concat()
    } else {
        nearest_indices(w, &grids)
    };
    let quant_time = t1.elapsed();
    assemble(w, method, grids, indices, &hdiag, plan_time, quant_time)
}

/// Round-to-nearest without calibration data: `RtnLinear` or `BcqPlain`.
pub fn rtn_layer(w: &TensorF32, method: &QuantMethod) -> Result<QuantizedLayer> {
    method.validate()?;
    check_shapes(w)?;
    if method.tag().compensates() {
        return Err(Error::InvalidConfig(format!(
            "rtn_layer accepts rtn or bcq, got {}",
            method.tag()
        )));
    }
    let ones = vec![1.0; w.cols()];
    let t0 = Instant::now();
    let grids = build_grids(w, method, &ones, None)?;
    let plan_time = t0.elapsed();
    let t1 = Instant::now();
    let indices = nearest_indices(w, &grids);
    let quant_time = t1.elapsed();
    assemble(w, method, grids, indices, &ones, plan_time, quant_time)
}

/// `||(W_dq - W) X||_F / ||W X||_F` for feature-major `X`.
pub fn layer_output_error(w: &TensorF32, w_dq: &TensorF32, x: &TensorF32) -> Result<f64> {
    if w.dims() != w_dq.dims() {
        return Err(Error::DimensionMismatch(format!(
            "weights {:?} vs dequantized {:?}",
            w.dims(),
            w_dq.dims()
        )));
    }
    if x.dims().len() != 2 || x.rows() != w.cols() {
        return Err(Error::DimensionMismatch(format!(
            "activations {:?} do not match {} weight columns",
            x.dims(),
            w.cols()
        )));
    }
    let (rows, k, ns) = (w.rows(), w.cols(), x.cols());
    let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let (num, den) = (0..rows)
        .into_par_iter()
        .map(|r| {
            let wr = w.row(r);
            let dr = w_dq.row(r);
            let mut y = vec![0.0; ns];
            let mut e = vec![0.0; ns];
            for c in 0..k {
                let a = wr[c] as f64;
                let d = dr[c] as f64 - a;
                let xrow = &xs[c * ns..(c + 1) * ns];
                for s in 0..ns {
                    y[s] += a * xrow[s];
                    e[s] += d * xrow[s];
                }
            }
            (
                e.iter().map(|v| v * v).sum::<f64>(),
                y.iter().map(|v| v * v).sum::<f64>(),
            )
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    if den == 0.0 {
        return Err(Error::Degenerate("reference output W X is zero".into()));
    }
    Ok((num / den).sqrt())
}

/// `sum_r delta_r H delta_r^T` with `delta = W_dq - W`.
pub fn layer_proxy_loss(w: &TensorF32, w_dq: &TensorF32, h: &[f64]) -> f64 {
    let k = w.cols();
    (0..w.rows())
        .into_par_iter()
        .map(|r| {
            let d: Vec<f64> = w
                .row(r)
                .iter()
                .zip(w_dq.row(r))
                .map(|(&a, &b)| b as f64 - a as f64)
                .collect();
            (0..k)
                .map(|i| d[i] * (0..k).map(|j| h[i * k + j] * d[j]).sum::<f64>())
                .sum::<f64>()
        })
        .sum()
}

/// Diagonal proxy error of a dequantized row.
pub fn dequantized_row_error(row: &[f32], dq: &[f32], hdiag: &[f64]) -> f64 {
    row_proxy_error(row, dq, hdiag)
}
