//! Per-row quantization math.
//!
//! A row is first fitted with an `n`-bit linear grid `S * q + z`. The second
//! step keeps `2^m` of those `2^n` integers, chosen among the subsets that
//! form a binary-coding tree `{a + sum(eps_i * d_i)}`, and re-searches the
//! scale with the chosen subset held fixed. Greedy and alternating
//! least-squares binary coding are provided as baselines.

use std::collections::HashSet;

use crate::{Error, Result};

pub const DEFAULT_INTER_BITS: u32 = 5;
pub const DEFAULT_FINAL_BITS: u32 = 3;
pub const DEFAULT_RANGE_BITS: u32 = 1;
pub const DEFAULT_GRID_POINTS: usize = 64;

/// Largest intermediate width accepted by [`enumerate_codebooks`].
pub const MAX_ENUM_BITS: u32 = 6;

/// Linear grid `dequant(q) = scale * q + zero` over `q in 0..2^bits`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearParams {
    pub bits: u32,
    pub scale: f64,
    pub zero: f64,
}

impl LinearParams {
    pub fn max_int(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn dequant(&self, q: u32) -> f64 {
        self.scale * q as f64 + self.zero
    }

    /// Same grid with a different scale, zero-point kept.
    pub fn with_scale(&self, scale: f64) -> Self {
        Self { scale, ..*self }
    }
}

pub(crate) fn row_min_max(row: &[f32]) -> (f64, f64) {
    row.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        })
}

pub fn fit_linear(row: &[f32], n: u32) -> Result<LinearParams> {
    if row.is_empty() {
        return Err(Error::InvalidConfig("cannot fit an empty row".into()));
    }
    if !(1..=16).contains(&n) {
        return Err(Error::InvalidConfig(format!(
            "linear bit-width {n} out of range"
        )));
    }
    let (lo, hi) = row_min_max(row);
    Ok(fit_range(lo, hi, n))
}

pub(crate) fn fit_range(lo: f64, hi: f64, n: u32) -> LinearParams {
    let steps = ((1u64 << n) - 1) as f64;
    let scale = if hi > lo { (hi - lo) / steps } else { 0.0 };
    LinearParams {
        bits: n,
        scale,
        zero: lo,
    }
}

/// `clamp(round((w - z) / S), 0, 2^n - 1)`, rounding half away from zero.
pub fn quantize_linear(row: &[f32], p: &LinearParams) -> Vec<u32> {
    row.iter().map(|&w| quantize_one(w as f64, p)).collect()
}

fn quantize_one(w: f64, p: &LinearParams) -> u32 {
    if p.scale == 0.0 {
        return 0;
    }
    let q = ((w - p.zero) / p.scale).round();
    q.clamp(0.0, p.max_int() as f64) as u32
}

/// Binary-coded row `w ~ sum_i alpha_i * b_i` with `b_i in {-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryCode {
    pub alphas: Vec<f64>,
    /// One sign row per bit, each the length of the input row.
    pub signs: Vec<Vec<i8>>,
}

impl BinaryCode {
    pub fn dequantize(&self) -> Vec<f64> {
        let len = self.signs.first().map_or(0, Vec::len);
        let mut out = vec![0.0; len];
        for (a, b) in self.alphas.iter().zip(&self.signs) {
            for (o, &s) in out.iter_mut().zip(b) {
                *o += a * s as f64;
            }
        }
        out
    }

    pub fn mse(&self, row: &[f32]) -> f64 {
        let dq = self.dequantize();
        row.iter()
            .zip(&dq)
            .map(|(&w, &d)| (w as f64 - d).powi(2))
            .sum::<f64>()
            / row.len().max(1) as f64
    }
}

/// Greedy residual binary coding; `sign(0) = +1`.
pub fn greedy_bc(row: &[f32], nbits: u32) -> Result<BinaryCode> {
    if row.is_empty() || nbits == 0 {
        return Err(Error::InvalidConfig(
            "greedy_bc needs a non-empty row and nbits >= 1".into(),
        ));
    }
    let len = row.len() as f64;
    let mut residual: Vec<f64> = row.iter().map(|&v| v as f64).collect();
    let mut alphas = Vec::with_capacity(nbits as usize);
    let mut signs = Vec::with_capacity(nbits as usize);
    for _ in 0..nbits {
        let b: Vec<i8> = residual
            .iter()
            .map(|&r| if r >= 0.0 { 1 } else { -1 })
            .collect();
        let alpha = residual.iter().map(|r| r.abs()).sum::<f64>() / len;
        for (r, &s) in residual.iter_mut().zip(&b) {
            *r -= alpha * s as f64;
        }
        alphas.push(alpha);
        signs.push(b);
    }
    Ok(BinaryCode { alphas, signs })
}

/// Alternating optimization of signs and coefficients, starting from
/// [`greedy_bc`]. `iters = 0` returns the greedy code.
pub fn bcq_als(row: &[f32], nbits: u32, iters: usize) -> Result<BinaryCode> {
    Ok(bcq_als_traced(row, nbits, iters)?.0)
}

/// Like [`bcq_als`], also returning the weight MSE before the first and after
/// every completed iteration.
pub fn bcq_als_traced(row: &[f32], nbits: u32, iters: usize) -> Result<(BinaryCode, Vec<f64>)> {
    if nbits > 16 {
        return Err(Error::InvalidConfig(format!(
            "bcq_als nbits {nbits} too large"
        )));
    }
    let mut code = greedy_bc(row, nbits)?;
    let mut trace = vec![code.mse(row)];
    let m = nbits as usize;
    let w: Vec<f64> = row.iter().map(|&v| v as f64).collect();
    for _ in 0..iters {
        // signs: exhaustive over the 2^m codewords for every element
        let words: Vec<(u32, f64)> = (0..1u32 << m)
            .map(|mask| (mask, mask_value(mask, &code.alphas)))
            .collect();
        for (j, &wj) in w.iter().enumerate() {
            let mut best = (words[0].0, f64::INFINITY);
            for &(mask, v) in &words {
                let e = (wj - v).abs();
                if e < best.1 {
                    best = (mask, e);
                }
            }
            for (i, b) in code.signs.iter_mut().enumerate() {
                b[j] = if best.0 >> i & 1 == 1 { 1 } else { -1 };
            }
        }
        // coefficients: (B^T B)^-1 B^T w
        let mut gram = vec![0.0; m * m];
        let mut rhs = vec![0.0; m];
        for i in 0..m {
            for k in i..m {
                let g: f64 = code.signs[i]
                    .iter()
                    .zip(&code.signs[k])
                    .map(|(&a, &b)| (a * b) as f64)
                    .sum();
                gram[i * m + k] = g;
                gram[k * m + i] = g;
            }
            rhs[i] = code.signs[i]
                .iter()
                .zip(&w)
                .map(|(&s, &x)| s as f64 * x)
                .sum();
        }
        match solve_spd(&gram, &rhs, m) {
            Some(alphas) => code.alphas = alphas,
            None => {
                trace.push(code.mse(row));
                break;
            }
        }
        trace.push(code.mse(row));
    }
    Ok((code, trace))
}

fn mask_value(mask: u32, alphas: &[f64]) -> f64 {
    alphas
        .iter()
        .enumerate()
        .map(|(i, a)| if mask >> i & 1 == 1 { *a } else { -*a })
        .sum()
}

/// Solves `a x = b` for small symmetric positive definite `a`; `None` when
/// `a` is singular or numerically indefinite.
fn solve_spd(a: &[f64], b: &[f64], m: usize) -> Option<Vec<f64>> {
    let scale = (0..m).map(|i| a[i * m + i]).fold(0.0, f64::max);
    let mut l = vec![0.0f64; m * m];
    for j in 0..m {
        let d = a[j * m + j] - (0..j).map(|p| l[j * m + p].powi(2)).sum::<f64>();
        if !(d > 1e-12 * scale) {
            return None;
        }
        let djj = d.sqrt();
        l[j * m + j] = djj;
        for i in j + 1..m {
            let s: f64 = (0..j).map(|p| l[i * m + p] * l[j * m + p]).sum();
            l[i * m + j] = (a[i * m + j] - s) / djj;
        }
    }
    let mut y = vec![0.0; m];
    for i in 0..m {
        y[i] = (b[i] - (0..i).map(|p| l[i * m + p] * y[p]).sum::<f64>()) / l[i * m + i];
    }
    let mut x = vec![0.0; m];
    for i in (0..m).rev() {
        x[i] = (y[i] - (i + 1..m).map(|p| l[p * m + i] * x[p]).sum::<f64>()) / l[i * m + i];
    }
    Some(x)
}

/// A binary-coding tree over the intermediate integer axis: levels
/// `{base + sum(e_i * d_i) : e_i in {0, 1}}` with distinct subset sums.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Codebook {
    base: u32,
    deltas: Vec<u32>,
    levels: Vec<u32>,
}

impl Codebook {
    pub fn new(base: u32, deltas: Vec<u32>) -> Result<Self> {
        if deltas.contains(&0) {
            return Err(Error::CorruptCodebook("zero delta".into()));
        }
        if deltas.len() > 16 {
            return Err(Error::CorruptCodebook("too many deltas".into()));
        }
        let mut levels: Vec<u32> = (0..1u32 << deltas.len())
            .map(|mask| base + mask_sum(mask, &deltas))
            .collect();
        levels.sort_unstable();
        if levels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::CorruptCodebook(format!(
                "subset sums of {deltas:?} are not distinct"
            )));
        }
        Ok(Self {
            base,
            deltas,
            levels,
        })
    }

    /// All `2^n` integers: `base = 0`, `d = (1, 2, 4, ...)`.
    pub fn full_grid(n: u32) -> Self {
        Self::new(0, (0..n).map(|i| 1 << i).collect()).expect("powers of two have distinct sums")
    }

    /// Single level at `base`, used by constant rows.
    pub fn single(base: u32) -> Self {
        Self {
            base,
            deltas: Vec::new(),
            levels: vec![base],
        }
    }

    pub fn bits(&self) -> u32 {
        self.deltas.len() as u32
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn deltas(&self) -> &[u32] {
        &self.deltas
    }

    /// Sorted ascending.
    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn top(&self) -> u32 {
        *self.levels.last().expect("codebook has at least one level")
    }

    /// Level selected by `mask`; bit `i` set means `e_i = +1`.
    pub fn level_of_mask(&self, mask: u32) -> u32 {
        self.base + mask_sum(mask, &self.deltas)
    }

    /// `masks[r]` is the selector mask producing `levels()[r]`.
    pub fn rank_masks(&self) -> Vec<u32> {
        let mut pairs: Vec<(u32, u32)> = (0..1u32 << self.deltas.len())
            .map(|mask| (self.level_of_mask(mask), mask))
            .collect();
        pairs.sort_unstable();
        pairs.into_iter().map(|(_, m)| m).collect()
    }
}

fn mask_sum(mask: u32, deltas: &[u32]) -> u32 {
    deltas
        .iter()
        .enumerate()
        .filter(|(i, _)| mask >> i & 1 == 1)
        .map(|(_, d)| d)
        .sum()
}

/// Every binary-coding tree with `m` bits inside the `n`-bit integer axis.
///
/// Order: delta tuples `d_1 <= ... <= d_m` in lexicographic order, and for
/// each tuple every base `a` ascending. Level-sets are unique.
pub fn enumerate_codebooks(n: u32, m: u32) -> Result<Vec<Codebook>> {
    if !(1 <= m && m < n && n <= MAX_ENUM_BITS) {
        return Err(Error::InvalidConfig(format!(
            "codebook enumeration needs 1 <= m < n <= {MAX_ENUM_BITS}, got n={n}, m={m}"
        )));
    }
    let top = (1u32 << n) - 1;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut deltas = Vec::with_capacity(m as usize);
    enumerate_deltas(m as usize, top, 1, 0, &mut deltas, &mut |ds| {
        let Ok(cb) = Codebook::new(0, ds.to_vec()) else {
            return;
        };
        let span = cb.top();
        for a in 0..=top - span {
            let shifted = Codebook {
                base: a,
                deltas: cb.deltas.clone(),
                levels: cb.levels.iter().map(|l| l + a).collect(),
            };
            if seen.insert(shifted.levels.clone()) {
                out.push(shifted);
            }
        }
    });
    Ok(out)
}

fn enumerate_deltas(
    m: usize,
    top: u32,
    start: u32,
    sum: u32,
    deltas: &mut Vec<u32>,
    emit: &mut impl FnMut(&[u32]),
) {
    if deltas.len() == m {
        emit(deltas);
        return;
    }
    let mut d = start;
    while sum + d <= top {
        deltas.push(d);
        enumerate_deltas(m, top, d, sum + d, deltas, emit);
        deltas.pop();
        d += 1;
    }
}

/// Maps every integer to its nearest codebook level; ties go to the smaller level.
pub fn round_to_codebook(ints: &[u32], cb: &Codebook) -> Vec<u32> {
    let levels = cb.levels();
    ints.iter()
        .map(|&v| {
            let i = levels.partition_point(|&l| l < v);
            if i == levels.len() {
                levels[i - 1]
            } else if i == 0 || levels[i] == v || levels[i] - v < v - levels[i - 1] {
                levels[i]
            } else {
                levels[i - 1]
            }
        })
        .collect()
}

/// Index of the level nearest to `w` in ascending `levels`; ties go to the smaller level.
pub fn nearest_index(levels: &[f32], w: f32) -> usize {
    let i = levels.partition_point(|&l| l < w);
    if i == levels.len() {
        return i - 1;
    }
    if i == 0 {
        return 0;
    }
    let up = levels[i] as f64 - w as f64;
    let down = w as f64 - levels[i - 1] as f64;
    if up < down {
        i
    } else {
        i - 1
    }
}

/// `sum_j (nearest(w_j) - w_j)^2 * h_j`.
pub fn row_proxy_error(row: &[f32], levels: &[f32], hdiag: &[f64]) -> f64 {
    debug_assert_eq!(row.len(), hdiag.len());
    row.iter()
        .zip(hdiag)
        .map(|(&w, &h)| {
            let d = levels[nearest_index(levels, w)] as f64 - w as f64;
            d * d * h
        })
        .sum()
}

/// `delta H delta^T` with `delta_j = nearest(w_j) - w_j` and dense `k x k` `h`.
pub fn row_proxy_error_full(row: &[f32], levels: &[f32], h: &[f64]) -> f64 {
    let k = row.len();
    debug_assert_eq!(h.len(), k * k);
    let delta: Vec<f64> = row
        .iter()
        .map(|&w| levels[nearest_index(levels, w)] as f64 - w as f64)
        .collect();
    (0..k)
        .map(|i| delta[i] * (0..k).map(|j| h[i * k + j] * delta[j]).sum::<f64>())
        .sum()
}

/// Output-error proxy used to score candidate grids for one row.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Per-coordinate weights `H_jj`.
    Diagonal(&'a [f64]),
    /// Full dense Hessian; `O(k^2)` per candidate, meant for small rows.
    Full(&'a [f64]),
}

impl Objective<'_> {
    pub fn error(&self, row: &[f32], levels: &[f32]) -> f64 {
        match self {
            Objective::Diagonal(h) => row_proxy_error(row, levels, h),
            Objective::Full(h) => row_proxy_error_full(row, levels, h),
        }
    }

    fn check_len(&self, k: usize) -> Result<()> {
        let ok = match self {
            Objective::Diagonal(h) => h.len() == k,
            Objective::Full(h) => h.len() == k * k,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "objective does not match row length {k}"
            )))
        }
    }
}

/// Float grid `scale * level + zero` for a codebook, ascending.
pub fn grid_levels(cb: &Codebook, scale: f64, zero: f64) -> Vec<f32> {
    cb.levels()
        .iter()
        .map(|&l| (scale * l as f64 + zero) as f32)
        .collect()
}

/// Sorted row with prefix sums of `h`, `h w`, `h w^2`, plus the count of
/// weights at or below each half-integer point of the linear grid. Scores a
/// diagonal-objective codebook in `O(2^m)`.
struct GridScorer {
    p0: Vec<f64>,
    p1: Vec<f64>,
    p2: Vec<f64>,
    /// `below[t]`: weights `<= zero + scale * t / 2`, for `t in 0..=2 * max_int`.
    below: Vec<usize>,
    scale: f64,
    zero: f64,
}

impl GridScorer {
    fn new(row: &[f32], hdiag: &[f64], p: &LinearParams) -> Self {
        let mut pairs: Vec<(f64, f64)> = row
            .iter()
            .zip(hdiag)
            .map(|(&w, &h)| (w as f64, h))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let k = pairs.len();
        let mut p0 = vec![0.0; k + 1];
        let mut p1 = vec![0.0; k + 1];
        let mut p2 = vec![0.0; k + 1];
        for (i, &(w, h)) in pairs.iter().enumerate() {
            p0[i + 1] = p0[i] + h;
            p1[i + 1] = p1[i] + h * w;
            p2[i + 1] = p2[i] + h * w * w;
        }
        let points = 2 * p.max_int() as usize + 1;
        let below = (0..points)
            .map(|t| {
                let thr = (p.zero + p.scale * t as f64 / 2.0) as f32 as f64;
                pairs.partition_point(|&(w, _)| w <= thr)
            })
            .collect();
        Self {
            p0,
            p1,
            p2,
            below,
            scale: p.scale,
            zero: p.zero,
        }
    }

    fn score(&self, cb: &Codebook) -> f64 {
        let levels = cb.levels();
        let k = self.p0.len() - 1;
        let mut lo = 0;
        let mut err = 0.0;
        for (i, &l) in levels.iter().enumerate() {
            let hi = if i + 1 < levels.len() {
                self.below[(l + levels[i + 1]) as usize]
            } else {
                k
            };
            if hi > lo {
                let v = (self.scale * l as f64 + self.zero) as f32 as f64;
                let s0 = self.p0[hi] - self.p0[lo];
                let s1 = self.p1[hi] - self.p1[lo];
                let s2 = self.p2[hi] - self.p2[lo];
                err += s2 - 2.0 * v * s1 + v * v * s0;
            }
            lo = hi;
        }
        err.max(0.0)
    }
}

/// Proxy error of every candidate codebook on the grid `p`.
pub fn codebook_errors(
    row: &[f32],
    obj: Objective<'_>,
    p: &LinearParams,
    candidates: &[Codebook],
) -> Vec<f64> {
    match obj {
        Objective::Diagonal(h) => {
            let scorer = GridScorer::new(row, h, p);
            candidates.iter().map(|cb| scorer.score(cb)).collect()
        }
        Objective::Full(_) => candidates
            .iter()
            .map(|cb| obj.error(row, &grid_levels(cb, p.scale, p.zero)))
            .collect(),
    }
}

fn argmin_first(errs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &e) in errs.iter().enumerate() {
        if e < errs[best] {
            best = i;
        }
    }
    best
}

/// Codebook with the lowest diagonal proxy error at `p`'s grid; first wins ties.
pub fn search_codebook(row: &[f32], hdiag: &[f64], p: &LinearParams, m: u32) -> Result<Codebook> {
    if row.len() != hdiag.len() {
        return Err(Error::DimensionMismatch(
            "row and hdiag lengths differ".into(),
        ));
    }
    let candidates = enumerate_codebooks(p.bits, m)?;
    let errs = codebook_errors(row, Objective::Diagonal(hdiag), p, &candidates);
    Ok(candidates[argmin_first(&errs)].clone())
}

/// Closed scale interval explored for an `n`-bit row of range `span`.
///
/// The upper end uses `max(n - range_bits, 1)` bits so the interval stays finite.
pub fn reexplore_interval(span: f64, n: u32, range_bits: u32) -> (f64, f64) {
    let lo_bits = n + range_bits;
    let hi_bits = n.saturating_sub(range_bits).max(1);
    (
        span / ((1u64 << lo_bits) - 1) as f64,
        span / ((1u64 << hi_bits) - 1) as f64,
    )
}

/// Candidate scales: the base scale first, then `grid_points` uniformly
/// spaced points over the interval (its midpoint when `grid_points == 1`).
pub fn reexplore_candidates(
    p: &LinearParams,
    span: f64,
    range_bits: u32,
    grid_points: usize,
) -> Vec<f64> {
    let mut out = vec![p.scale];
    if range_bits == 0 || p.scale == 0.0 {
        return out;
    }
    let (lo, hi) = reexplore_interval(span, p.bits, range_bits);
    if grid_points == 1 {
        out.push(0.5 * (lo + hi));
    } else {
        let step = (hi - lo) / (grid_points - 1) as f64;
        out.extend((0..grid_points).map(|i| lo + step * i as f64));
    }
    out
}

fn check_grid_points(grid_points: usize) -> Result<()> {
    if grid_points == 0 {
        Err(Error::InvalidConfig("grid_points must be >= 1".into()))
    } else {
        Ok(())
    }
}

/// Scale with the lowest proxy error for codebook `cb`, zero-point fixed.
pub fn reexplore_scale(
    row: &[f32],
    obj: Objective<'_>,
    cb: &Codebook,
    p: &LinearParams,
    range_bits: u32,
    grid_points: usize,
) -> Result<f64> {
    check_grid_points(grid_points)?;
    obj.check_len(row.len())?;
    let (lo, hi) = row_min_max(row);
    let mut best = (p.scale, f64::INFINITY);
    for s in reexplore_candidates(p, hi - lo, range_bits, grid_points) {
        let e = obj.error(row, &grid_levels(cb, s, p.zero));
        if e < best.1 {
            best = (s, e);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchOrder {
    /// Codebook at the base scale, then scale with the codebook fixed.
    Sequential,
    /// Best codebook at every candidate scale; ablation only.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanConfig {
    pub inter_bits: u32,
    pub bits: u32,
    pub range_bits: u32,
    pub grid_points: usize,
    pub order: SearchOrder,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            inter_bits: DEFAULT_INTER_BITS,
            bits: DEFAULT_FINAL_BITS,
            range_bits: DEFAULT_RANGE_BITS,
            grid_points: DEFAULT_GRID_POINTS,
            order: SearchOrder::Sequential,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bits >= self.inter_bits {
            return Err(Error::InvalidConfig(format!(
                "final bits ({}) must be below intermediate bits ({})",
                self.bits, self.inter_bits
            )));
        }
        if self.bits == 0 || self.inter_bits > MAX_ENUM_BITS {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= bits < inter_bits <= {MAX_ENUM_BITS}"
            )));
        }
        check_grid_points(self.grid_points)
    }
}

/// Quantization grid of one output row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPlan {
    pub inter_bits: u32,
    pub bits: u32,
    /// Scale after re-exploration.
    pub scale: f64,
    /// Scale from the first-step linear fit.
    pub base_scale: f64,
    pub zero: f64,
    pub codebook: Codebook,
    /// `scale * level + zero` for every codebook level, ascending.
    pub float_levels: Vec<f32>,
    /// Constant row collapsed to one level.
    pub degenerate: bool,
}

impl RowPlan {
    fn from_parts(
        inter_bits: u32,
        bits: u32,
        base: &LinearParams,
        scale: f64,
        codebook: Codebook,
    ) -> Self {
        let float_levels = grid_levels(&codebook, scale, base.zero);
        Self {
            inter_bits,
            bits,
            scale,
            base_scale: base.scale,
            zero: base.zero,
            codebook,
            float_levels,
            degenerate: false,
        }
    }

    fn constant(inter_bits: u32, bits: u32, zero: f64) -> Self {
        Self {
            inter_bits,
            bits,
            scale: 0.0,
            base_scale: 0.0,
            zero,
            codebook: Codebook::single(0),
            float_levels: vec![zero as f32],
            degenerate: true,
        }
    }

    /// Plain linear grid over all `2^bits` integers.
    pub fn linear(p: &LinearParams) -> Self {
        if p.scale == 0.0 {
            return Self::constant(p.bits, p.bits, p.zero);
        }
        Self::from_parts(p.bits, p.bits, p, p.scale, Codebook::full_grid(p.bits))
    }

    pub fn linear_params(&self) -> LinearParams {
        LinearParams {
            bits: self.inter_bits,
            scale: self.scale,
            zero: self.zero,
        }
    }
}

/// Reusable planner holding the enumerated codebooks for one `(n, m)`.
#[derive(Debug, Clone)]
pub struct RowPlanner {
    cfg: PlanConfig,
    candidates: Vec<Codebook>,
}

impl RowPlanner {
    pub fn new(cfg: PlanConfig) -> Result<Self> {
        cfg.validate()?;
        let candidates = enumerate_codebooks(cfg.inter_bits, cfg.bits)?;
        Ok(Self { cfg, candidates })
    }

    pub fn config(&self) -> &PlanConfig {
        &self.cfg
    }

    pub fn candidates(&self) -> &[Codebook] {
        &self.candidates
    }

    /// Codebook chosen for `row` at its base scale, with its proxy error.
    pub fn best_codebook(&self, row: &[f32], obj: Objective<'_>, p: &LinearParams) -> (usize, f64) {
        let errs = codebook_errors(row, obj, p, &self.candidates);
        let i = argmin_first(&errs);
        (i, errs[i])
    }

    pub fn plan(&self, row: &[f32], obj: Objective<'_>) -> Result<RowPlan> {
        obj.check_len(row.len())?;
        let base = fit_linear(row, self.cfg.inter_bits)?;
        if base.scale == 0.0 {
            return Ok(RowPlan::constant(
                self.cfg.inter_bits,
                self.cfg.bits,
                base.zero,
            ));
        }
        match self.cfg.order {
            SearchOrder::Sequential => {
                let (idx, _) = self.best_codebook(row, obj, &base);
                self.plan_with_codebook(row, obj, &base, self.candidates[idx].clone())
            }
            SearchOrder::Joint => self.plan_joint(row, obj, &base),
        }
    }

    /// Re-explores the scale for a fixed codebook and assembles the plan.
    pub fn plan_with_codebook(
        &self,
        row: &[f32],
        obj: Objective<'_>,
        base: &LinearParams,
        codebook: Codebook,
    ) -> Result<RowPlan> {
        let scale = reexplore_scale(
            row,
            obj,
            &codebook,
            base,
            self.cfg.range_bits,
            self.cfg.grid_points,
        )?;
        Ok(RowPlan::from_parts(
            self.cfg.inter_bits,
            self.cfg.bits,
            base,
            scale,
            codebook,
        ))
    }

    fn plan_joint(&self, row: &[f32], obj: Objective<'_>, base: &LinearParams) -> Result<RowPlan> {
        let (lo, hi) = row_min_max(row);
        let mut best: Option<(f64, usize, f64)> = None;
        for s in reexplore_candidates(base, hi - lo, self.cfg.range_bits, self.cfg.grid_points) {
            let p = base.with_scale(s);
            let (idx, _) = self.best_codebook(row, obj, &p);
            let e = obj.error(row, &grid_levels(&self.candidates[idx], s, base.zero));
            if best.is_none_or(|b| e < b.2) {
                best = Some((s, idx, e));
            }
        }
        let (s, idx, _) = best.expect("candidate list is never empty");
        Ok(RowPlan::from_parts(
            self.cfg.inter_bits,
            self.cfg.bits,
            base,
            s,
            self.candidates[idx].clone(),
        ))
    }
}

/// One-shot plan for a single row; see [`RowPlanner`] to amortize enumeration.
pub fn build_row_plan(row: &[f32], hdiag: &[f64], cfg: PlanConfig) -> Result<RowPlan> {
    RowPlanner::new(cfg)?.plan(row, Objective::Diagonal(hdiag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NormalStream;

    fn random_row(len: usize, seed: u64) -> Vec<f32> {
        let mut s = NormalStream::new(seed);
        (0..len).map(|_| s.next_normal() as f32).collect()
    }

    fn ones(k: usize) -> Vec<f64> {
        vec![1.0; k]
    }

    #[test]
    fn fit_linear_examples() {
        let p = fit_linear(&[0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!((p.scale, p.zero), (1.0, 0.0));
        let p = fit_linear(&[-1.0, -1.0, -1.0], 3).unwrap();
        assert_eq!((p.scale, p.zero), (0.0, -1.0));
        let p = fit_linear(&[-3.1, 3.1], 5).unwrap();
        assert!((p.scale - 0.2).abs() < 1e-7);
        assert!((p.zero + 3.1).abs() < 1e-6);
        assert!(fit_linear(&[], 3).is_err());
    }

    #[test]
    fn quantize_linear_examples() {
        let p = LinearParams {
            bits: 2,
            scale: 1.0,
            zero: 0.0,
        };
        assert_eq!(quantize_linear(&[0.0, 1.0, 2.0, 3.0], &p), vec![0, 1, 2, 3]);
        assert_eq!(quantize_linear(&[0.49, 0.51], &p), vec![0, 1]);
        assert_eq!(quantize_linear(&[10.0], &p), vec![3]);
        assert_eq!(quantize_linear(&[0.5, 1.5, -3.0], &p), vec![1, 2, 0]);
        let flat = LinearParams {
            bits: 2,
            scale: 0.0,
            zero: 4.0,
        };
        assert_eq!(quantize_linear(&[4.0, 4.0], &flat), vec![0, 0]);
    }

    #[test]
    fn greedy_examples() {
        let c = greedy_bc(&[1.0, -1.0, 1.0, 1.0], 1).unwrap();
        assert_eq!(c.signs[0], vec![1, -1, 1, 1]);
        assert_eq!(c.alphas, vec![1.0]);
        assert_eq!(c.mse(&[1.0, -1.0, 1.0, 1.0]), 0.0);

        let c = greedy_bc(&[0.5, -0.5], 1).unwrap();
        assert_eq!(c.alphas, vec![0.5]);
        assert_eq!(c.dequantize(), vec![0.5, -0.5]);

        let c = greedy_bc(&[3.0, 1.0], 2).unwrap();
        assert_eq!(c.alphas, vec![2.0, 1.0]);
        assert_eq!(c.signs, vec![vec![1, 1], vec![1, -1]]);
        assert_eq!(c.dequantize(), vec![3.0, 1.0]);
    }

    #[test]
    fn greedy_sign_of_zero_is_positive() {
        let c = greedy_bc(&[0.0, -2.0], 1).unwrap();
        assert_eq!(c.signs[0], vec![1, -1]);
        assert_eq!(c.alphas, vec![1.0]);
    }

    #[test]
    fn als_two_by_two_solve() {
        let gram = [2.0, 0.0, 0.0, 2.0];
        // B = [[+1,+1],[+1,-1]], w = [3,1]: B^T w = [4, 2]
        let x = solve_spd(&gram, &[4.0, 2.0], 2).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
        let c = bcq_als(&[3.0, 1.0], 2, 3).unwrap();
        assert!(c.mse(&[3.0, 1.0]) < 1e-20);
    }

    #[test]
    fn als_zero_iters_is_greedy() {
        let row = random_row(33, 1);
        assert_eq!(bcq_als(&row, 3, 0).unwrap(), greedy_bc(&row, 3).unwrap());
    }

    #[test]
    fn als_monotone() {
        let row = random_row(32, 9);
        let (_, trace) = bcq_als_traced(&row, 2, 10).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{trace:?}");
        }
    }

    #[test]
    fn als_singular_gram_stops() {
        // every element identical: all bit rows equal after re-sign, gram singular
        let row = vec![1.0f32; 8];
        let c = bcq_als(&row, 2, 5).unwrap();
        assert!(c.alphas.iter().all(|a| a.is_finite()));
        assert!(c.mse(&row) < 1e-12);
    }

    #[test]
    fn enumerate_small() {
        let cbs = enumerate_codebooks(2, 1).unwrap();
        let sets: Vec<Vec<u32>> = cbs.iter().map(|c| c.levels().to_vec()).collect();
        assert_eq!(
            sets,
            vec![
                vec![0, 1],
                vec![1, 2],
                vec![2, 3],
                vec![0, 2],
                vec![1, 3],
                vec![0, 3]
            ]
        );
        let cbs = enumerate_codebooks(3, 2).unwrap();
        assert_eq!(cbs.len(), 22);
        assert!(cbs.iter().any(|c| c.levels() == [0, 1, 6, 7]));
    }

    #[test]
    fn enumerate_guard() {
        assert!(enumerate_codebooks(3, 3).is_err());
        assert!(enumerate_codebooks(7, 3).is_err());
        assert!(enumerate_codebooks(3, 0).is_err());
    }

    #[test]
    fn enumerate_contains_uniform_subgrid() {
        for n in 2..=6 {
            for m in 1..n {
                let deltas: Vec<u32> = (0..m).map(|i| 1 << (n - m + i)).collect();
                let sub = Codebook::new(0, deltas).unwrap();
                if sub.top() < 1 << n {
                    let cbs = enumerate_codebooks(n, m).unwrap();
                    assert!(
                        cbs.iter().any(|c| c.levels() == sub.levels()),
                        "n={n} m={m}"
                    );
                }
            }
        }
    }

    #[test]
    fn round_to_codebook_examples() {
        let cb = Codebook::new(0, vec![1, 6]).unwrap();
        assert_eq!(cb.levels(), &[0, 1, 6, 7]);
        assert_eq!(
            round_to_codebook(&[0, 2, 3, 1, 1, 6, 5], &cb),
            vec![0, 1, 1, 1, 1, 6, 6]
        );
        assert_eq!(round_to_codebook(&[0, 1, 6, 7], &cb), vec![0, 1, 6, 7]);
        let tie = Codebook::new(1, vec![4]).unwrap();
        assert_eq!(round_to_codebook(&[3], &tie), vec![1]);
        assert_eq!(round_to_codebook(&[0, 9], &tie), vec![1, 5]);
    }

    #[test]
    fn codebook_rejects_duplicate_sums() {
        assert!(Codebook::new(0, vec![1, 1]).is_err());
        assert!(Codebook::new(0, vec![1, 2, 3]).is_err());
        assert!(Codebook::new(0, vec![0]).is_err());
    }

    #[test]
    fn rank_masks_decompose() {
        let cb = Codebook::new(2, vec![1, 6]).unwrap();
        let masks = cb.rank_masks();
        for (r, &mask) in masks.iter().enumerate() {
            assert_eq!(cb.level_of_mask(mask), cb.levels()[r]);
        }
    }

    #[test]
    fn nearest_index_ties_down() {
        let l = [0.0f32, 1.0, 3.0];
        assert_eq!(nearest_index(&l, -5.0), 0);
        assert_eq!(nearest_index(&l, 0.5), 0);
        assert_eq!(nearest_index(&l, 0.51), 1);
        assert_eq!(nearest_index(&l, 2.0), 1);
        assert_eq!(nearest_index(&l, 9.0), 2);
        assert_eq!(nearest_index(&l, 3.0), 2);
    }

    #[test]
    fn proxy_error_examples() {
        assert_eq!(row_proxy_error(&[0.0, 1.0], &[0.0, 1.0], &[3.0, 5.0]), 0.0);
        assert_eq!(row_proxy_error(&[0.0, 1.0], &[0.0], &[1.0, 4.0]), 4.0);
        let e = row_proxy_error(&[0.2, 0.9], &[0.0, 1.0], &ones(2));
        assert!((e - (0.04 + 0.01)).abs() < 1e-7);
    }

    #[test]
    fn full_objective_reduces_to_diagonal() {
        let row = random_row(6, 4);
        let levels = [-1.0f32, 0.0, 1.0];
        let d = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut full = vec![0.0; 36];
        for i in 0..6 {
            full[i * 6 + i] = d[i];
        }
        let a = row_proxy_error(&row, &levels, &d);
        let b = row_proxy_error_full(&row, &levels, &full);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn grid_scorer_matches_naive() {
        let row = random_row(64, 3);
        let mut s = NormalStream::new(77);
        let h: Vec<f64> = (0..64).map(|_| 0.5 + s.next_uniform()).collect();
        let p = fit_linear(&row, 4).unwrap();
        let cands = enumerate_codebooks(4, 2).unwrap();
        let fast = codebook_errors(&row, Objective::Diagonal(&h), &p, &cands);
        for (cb, f) in cands.iter().zip(fast) {
            let naive = row_proxy_error(&row, &grid_levels(cb, p.scale, p.zero), &h);
            assert!(
                (f - naive).abs() <= 1e-9 * naive.max(1e-9),
                "{f} vs {naive}"
            );
        }
    }

    #[test]
    fn search_perfect_fit() {
        // weights exactly on {0, 1, 6, 7} * 0.25 - 1, endpoints present
        let row: Vec<f32> = [0u32, 1, 6, 7, 7, 0, 6, 1]
            .iter()
            .map(|&l| l as f32 * 0.25 - 1.0)
            .collect();
        let p = fit_linear(&row, 3).unwrap();
        let cb = search_codebook(&row, &ones(8), &p, 2).unwrap();
        assert_eq!(cb.levels(), &[0, 1, 6, 7]);
        let e = row_proxy_error(&row, &grid_levels(&cb, p.scale, p.zero), &ones(8));
        assert_eq!(e, 0.0);
    }

    #[test]
    fn search_is_argmin() {
        let row: Vec<f32> = (0..40).map(|i| i as f32 / 39.0).collect();
        let h = ones(40);
        let p = fit_linear(&row, 4).unwrap();
        let cb = search_codebook(&row, &h, &p, 3).unwrap();
        let chosen = row_proxy_error(&row, &grid_levels(&cb, p.scale, p.zero), &h);
        for c in enumerate_codebooks(4, 3).unwrap() {
            let e = row_proxy_error(&row, &grid_levels(&c, p.scale, p.zero), &h);
            assert!(chosen <= e + 1e-12);
        }
    }

    #[test]
    fn search_bimodal_one_bit() {
        let row = [0.0f32, 0.01, 0.02, 0.98, 0.99, 1.0, 0.0, 1.0];
        let h = ones(8);
        let p = fit_linear(&row, 3).unwrap();
        // brute force over all 1-bit codebooks
        let mut best = (vec![], f64::INFINITY);
        for c in enumerate_codebooks(3, 1).unwrap() {
            let e = row_proxy_error(&row, &grid_levels(&c, p.scale, p.zero), &h);
            if e < best.1 {
                best = (c.levels().to_vec(), e);
            }
        }
        assert_eq!(best.0, vec![0, 7]);
        assert_eq!(search_codebook(&row, &h, &p, 1).unwrap().levels(), &[0, 7]);
    }

    #[test]
    fn reexplore_disabled() {
        let row = random_row(16, 5);
        let p = fit_linear(&row, 5).unwrap();
        let cb = Codebook::new(3, vec![4, 9, 14]).unwrap();
        let s = reexplore_scale(&row, Objective::Diagonal(&ones(16)), &cb, &p, 0, 64).unwrap();
        assert_eq!(s, p.scale);
    }

    #[test]
    fn reexplore_interval_example() {
        let (lo, hi) = reexplore_interval(6.2, 5, 1);
        assert_eq!(lo, 6.2 / 63.0);
        assert_eq!(hi, 6.2 / 15.0);
        let (_, hi) = reexplore_interval(1.0, 3, 5);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn reexplore_candidates_contain_base_and_ends() {
        let p = LinearParams {
            bits: 5,
            scale: 0.2,
            zero: -3.1,
        };
        let c = reexplore_candidates(&p, 6.2, 1, 64);
        assert_eq!(c.len(), 65);
        assert_eq!(c[0], 0.2);
        assert_eq!(c[1], 6.2 / 63.0);
        assert!((c[64] - 6.2 / 15.0).abs() < 1e-15);
        assert_eq!(reexplore_candidates(&p, 6.2, 1, 1).len(), 2);
    }

    #[test]
    fn reexplore_never_hurts() {
        for seed in 0..20 {
            let row = random_row(48, seed);
            let h = ones(48);
            let p = fit_linear(&row, 5).unwrap();
            let cb = search_codebook(&row, &h, &p, 3).unwrap();
            let s = reexplore_scale(&row, Objective::Diagonal(&h), &cb, &p, 1, 16).unwrap();
            let at_base = row_proxy_error(&row, &grid_levels(&cb, p.scale, p.zero), &h);
            let at_hat = row_proxy_error(&row, &grid_levels(&cb, s, p.zero), &h);
            assert!(at_hat <= at_base);
        }
    }

    #[test]
    fn plan_structure() {
        let row = random_row(64, 12);
        let plan = build_row_plan(&row, &ones(64), PlanConfig::default()).unwrap();
        assert_eq!(plan.float_levels.len(), 8);
        assert!(plan.float_levels.windows(2).all(|w| w[0] < w[1]));
        let (lo, hi) = row_min_max(&row);
        let (a, b) = reexplore_interval(hi - lo, 5, 1);
        assert!(plan.scale == plan.base_scale || (a..=b).contains(&plan.scale));
        assert!(!plan.degenerate);
    }

    #[test]
    fn plan_range_dominance() {
        let row = random_row(64, 13);
        let h = ones(64);
        let r0 = build_row_plan(
            &row,
            &h,
            PlanConfig {
                range_bits: 0,
                ..Default::default()
            },
        )
        .unwrap();
        let r1 = build_row_plan(&row, &h, PlanConfig::default()).unwrap();
        assert_eq!(r0.codebook, r1.codebook);
        assert!(
            row_proxy_error(&row, &r1.float_levels, &h)
                <= row_proxy_error(&row, &r0.float_levels, &h)
        );
    }

    #[test]
    fn plan_bimodal_codebook() {
        let row: Vec<f32> = [0.0, 0.1, 0.9, 1.0].iter().map(|v| v * 7.0).collect();
        let h = ones(4);
        let cfg = PlanConfig {
            inter_bits: 3,
            bits: 2,
            range_bits: 0,
            ..Default::default()
        };
        let p = fit_linear(&row, 3).unwrap();
        let mut best = (vec![], f64::INFINITY);
        for c in enumerate_codebooks(3, 2).unwrap() {
            let e = row_proxy_error(&row, &grid_levels(&c, p.scale, p.zero), &h);
            if e < best.1 {
                best = (c.levels().to_vec(), e);
            }
        }
        assert_eq!(best.0, vec![0, 1, 6, 7]);
        let plan = build_row_plan(&row, &h, cfg).unwrap();
        assert_eq!(plan.codebook.levels(), &[0, 1, 6, 7]);
    }

    #[test]
    fn plan_constant_row() {
        let plan = build_row_plan(&[2.5; 6], &ones(6), PlanConfig::default()).unwrap();
        assert!(plan.degenerate);
        assert_eq!(plan.float_levels, vec![2.5]);
    }

    #[test]
    fn plan_rejects_bad_config() {
        let cfg = PlanConfig {
            inter_bits: 4,
            bits: 4,
            ..Default::default()
        };
        assert!(build_row_plan(&[0.0, 1.0], &ones(2), cfg).is_err());
        let cfg = PlanConfig {
            grid_points: 0,
            ..Default::default()
        };
        assert!(build_row_plan(&[0.0, 1.0], &ones(2), cfg).is_err());
        assert!(build_row_plan(&[0.0, 1.0], &ones(3), PlanConfig::default()).is_err());
    }

    #[test]
    fn joint_search_not_worse() {
        let row = random_row(40, 21);
        let h = ones(40);
        let cfg = PlanConfig {
            inter_bits: 4,
            bits: 2,
            grid_points: 8,
            ..Default::default()
        };
        let seq = build_row_plan(&row, &h, cfg).unwrap();
        let joint = build_row_plan(
            &row,
            &h,
            PlanConfig {
                order: SearchOrder::Joint,
                ..cfg
            },
        )
        .unwrap();
        let es = row_proxy_error(&row, &seq.float_levels, &h);
        let ej = row_proxy_error(&row, &joint.float_levels, &h);
        assert!(ej <= es * (1.0 + 1e-9));
    }

    #[test]
    fn full_objective_plan_runs() {
        let row = random_row(6, 2);
        let mut h = vec![0.0; 36];
        for i in 0..6 {
            for j in 0..6 {
                h[i * 6 + j] = 0.5f64.powi((i as i32 - j as i32).abs()) * 2.0;
            }
        }
        let cfg = PlanConfig {
            inter_bits: 4,
            bits: 2,
            grid_points: 8,
            ..Default::default()
        };
        let plan = RowPlanner::new(cfg)
            .unwrap()
            .plan(&row, Objective::Full(&h))
            .unwrap();
        assert_eq!(plan.float_levels.len(), 4);
    }

    #[test]
    fn linear_plan_is_full_grid() {
        let p = fit_linear(&[0.0, 3.0], 2).unwrap();
        let plan = RowPlan::linear(&p);
        assert_eq!(plan.float_levels, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(plan.codebook.deltas(), &[1, 2]);
    }
}
