//! Matrix-vector products on packed binary-coding weights.
//!
//! For every group of `g` consecutive activations a table holds all `2^g`
//! signed sums `sum_j (+-1) x_j`, indexed by the sign bits of a weight plane.
//! A row then costs one lookup per group per plane instead of one multiply per
//! weight, and the offset `beta_r * sum(x)` is added once.

use std::time::Instant;

use rayon::prelude::*;

use crate::fuse_pack::{dequantize_packed, plane_bytes, PackedBCMatrix};
use crate::rng::NormalStream;
use crate::{Error, Result};

pub const DEFAULT_GROUP_SIZE: usize = 8;
pub const MIN_GROUP_SIZE: usize = 4;
pub const MAX_GROUP_SIZE: usize = 16;

#[derive(Debug, Clone)]
pub struct GroupLut {
    group_size: usize,
    len: usize,
    tables: Vec<f32>,
    total: f32,
}

impl GroupLut {
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    /// Length of the activation vector the tables were built from.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn groups(&self) -> usize {
        self.len.div_ceil(self.group_size)
    }

    pub fn table(&self, g: usize) -> &[f32] {
        let n = 1 << self.group_size;
        &self.tables[g * n..(g + 1) * n]
    }

    /// Sum of all activations.
    pub fn total(&self) -> f32 {
        self.total
    }
}

/// Builds one table per group of `group_size` activations; the last group is
/// zero-padded.
///
/// Entry `t` is `table[t without its top bit] + 2 x_top`, starting from
/// `table[0] = -sum(group)`. The group sums are needed for the offset term
/// anyway, so the table itself costs `2^g - 1` additions.
pub fn build_lut(x: &[f32], group_size: usize) -> Result<GroupLut> {
    if !(MIN_GROUP_SIZE..=MAX_GROUP_SIZE).contains(&group_size) {
        return Err(Error::InvalidConfig(format!(
            "group size {group_size} outside {MIN_GROUP_SIZE}..={MAX_GROUP_SIZE}"
        )));
    }
    let n = 1usize << group_size;
    let groups = x.len().div_ceil(group_size);
    let mut tables = vec![0f32; groups * n];
    let mut total = 0f64;
    let mut twice = vec![0f32; group_size];
    for (g, table) in tables.chunks_exact_mut(n).enumerate() {
        let chunk = &x[g * group_size..x.len().min((g + 1) * group_size)];
        twice.fill(0.0);
        let mut gsum = 0f32;
        for (j, &v) in chunk.iter().enumerate() {
            twice[j] = 2.0 * v;
            gsum += v;
        }
        total += gsum as f64;
        table[0] = -gsum;
        #[cfg(debug_assertions)]
        let mut additions = 0usize;
        for t in 1..n {
            let hb = (usize::BITS - 1 - t.leading_zeros()) as usize;
            table[t] = table[t ^ (1 << hb)] + twice[hb];
            #[cfg(debug_assertions)]
            {
                additions += 1;
            }
        }
        #[cfg(debug_assertions)]
        debug_assert_eq!(additions, n - 1);
    }
    Ok(GroupLut {
        group_size,
        len: x.len(),
        tables,
        total: total as f32,
    })
}

/// Reads `width` bits starting at bit `off` of an LSB-first plane; bits past
/// the end read as zero.
fn read_bits(plane: &[u8], off: usize, width: usize) -> usize {
    let first = off / 8;
    let last = (off + width - 1) / 8;
    let mut v = 0u32;
    for (k, b) in (first..=last).enumerate() {
        v |= (*plane.get(b).unwrap_or(&0) as u32) << (8 * k);
    }
    ((v >> (off % 8)) & ((1u32 << width) - 1)) as usize
}

fn row_dot(p: &PackedBCMatrix, lut: &GroupLut, r: usize) -> f32 {
    let g = lut.group_size;
    let n = 1 << g;
    let mut y = 0f32;
    for (i, &alpha) in p.alphas(r).iter().enumerate() {
        let plane = p.plane(r, i);
        let mut s = 0f32;
        if g == 8 {
            for (tab, &b) in lut.tables.chunks_exact(256).zip(plane) {
                s += tab[b as usize];
            }
        } else {
            for gi in 0..lut.groups() {
                s += lut.tables[gi * n + read_bits(plane, gi * g, g)];
            }
        }
        y += alpha * s;
    }
    y + p.beta(r) * lut.total
}

fn check_len(p: &PackedBCMatrix, len: usize) -> Result<()> {
    if len != p.cols() {
        return Err(Error::DimensionMismatch(format!(
            "vector has {len} entries, matrix has {} columns",
            p.cols()
        )));
    }
    Ok(())
}

pub fn matvec_with_lut(p: &PackedBCMatrix, lut: &GroupLut) -> Result<Vec<f32>> {
    check_len(p, lut.len())?;
    Ok((0..p.rows()).map(|r| row_dot(p, lut, r)).collect())
}

/// Same as [`matvec_with_lut`] with output rows spread over the rayon pool.
pub fn matvec_with_lut_par(p: &PackedBCMatrix, lut: &GroupLut) -> Result<Vec<f32>> {
    check_len(p, lut.len())?;
    Ok((0..p.rows())
        .into_par_iter()
        .map(|r| row_dot(p, lut, r))
        .collect())
}

pub fn matvec_lut(p: &PackedBCMatrix, x: &[f32]) -> Result<Vec<f32>> {
    check_len(p, x.len())?;
    matvec_with_lut(p, &build_lut(x, DEFAULT_GROUP_SIZE)?)
}

pub fn matvec_dense(w: &[f32], rows: usize, cols: usize, x: &[f32]) -> Vec<f32> {
    w.chunks_exact(cols.max(1))
        .take(rows)
        .map(|row| {
            let mut acc = [0f32; 8];
            let mut rc = row.chunks_exact(8);
            let mut xc = x.chunks_exact(8);
            for (a, b) in (&mut rc).zip(&mut xc) {
                for k in 0..8 {
                    acc[k] += a[k] * b[k];
                }
            }
            let tail: f32 = rc
                .remainder()
                .iter()
                .zip(xc.remainder())
                .map(|(a, b)| a * b)
                .sum();
            acc.iter().sum::<f32>() + tail
        })
        .collect()
}

/// Dequantize the whole matrix, then multiply.
pub fn matvec_reference(p: &PackedBCMatrix, x: &[f32]) -> Result<Vec<f32>> {
    check_len(p, x.len())?;
    if p.cols() == 0 {
        return Ok(vec![0.0; p.rows()]);
    }
    let w = dequantize_packed(p);
    Ok(matvec_dense(w.data(), p.rows(), p.cols(), x))
}

/// `max|a - b| / max|b|`, or `max|a|` when `b` is identically zero.
pub fn max_rel_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .fold(0f64, |m, (x, y)| m.max((*x as f64 - *y as f64).abs()));
    let scale = b.iter().fold(0f64, |m, y| m.max((*y as f64).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Deterministic random packed matrix: positive alphas, random offsets and
/// uniformly random sign bits.
pub fn random_packed(rows: usize, cols: usize, bits: u32, seed: u64) -> PackedBCMatrix {
    let mut rng = NormalStream::new(seed);
    let m = bits as usize;
    let alphas: Vec<f32> = (0..rows * m)
        .map(|k| (0.02 * (1u32 << (k % m.max(1))) as f64 * (0.5 + rng.next_uniform())) as f32)
        .collect();
    let betas: Vec<f32> = (0..rows)
        .map(|_| (0.01 * rng.next_normal()) as f32)
        .collect();
    let pb = plane_bytes(cols);
    let mut planes = vec![0u8; rows * m * pb];
    for plane in planes.chunks_exact_mut(pb.max(1)) {
        for (k, byte) in plane.iter_mut().enumerate() {
            let valid = (cols - 8 * k).min(8);
            let mask = if valid == 8 { 0xFF } else { (1u8 << valid) - 1 };
            *byte = (rng.next_u64() as u8) & mask;
        }
    }
    PackedBCMatrix::new(rows, cols, bits, alphas, betas, planes)
        .expect("generated shape is consistent")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchPath {
    Dense,
    DequantMatvec,
    Lut,
}

impl BenchPath {
    pub const ALL: [BenchPath; 3] = [BenchPath::Dense, BenchPath::DequantMatvec, BenchPath::Lut];

    pub fn name(self) -> &'static str {
        match self {
            BenchPath::Dense => "dense",
            BenchPath::DequantMatvec => "dequant-matvec",
            BenchPath::Lut => "lut",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub reps: usize,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            reps: 5,
            seed: 0,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    pub path: BenchPath,
    pub median_secs: f64,
    /// Throughput relative to the dequantize-then-multiply path.
    pub speedup_vs_dequant: f64,
    /// Agreement with the dequantize-then-multiply result.
    pub max_rel_diff: f64,
}

pub const BENCH_TOLERANCE: f64 = 1e-4;

fn median_time(reps: usize, mut f: impl FnMut() -> Vec<f32>) -> f64 {
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[reps / 2]
}

pub fn bench(sizes: &[(usize, usize)], bits: u32, reps: usize) -> Result<Vec<BenchRow>> {
    bench_with(
        sizes,
        bits,
        &BenchOptions {
            reps,
            ..BenchOptions::default()
        },
    )
}

pub fn bench_with(
    sizes: &[(usize, usize)],
    bits: u32,
    opts: &BenchOptions,
) -> Result<Vec<BenchRow>> {
    if opts.reps < 3 {
        return Err(Error::InvalidConfig(format!(
            "reps must be at least 3, got {}",
            opts.reps
        )));
    }
    let mut out = Vec::with_capacity(sizes.len() * 3);
    for (k, &(rows, cols)) in sizes.iter().enumerate() {
        let seed = opts.seed.wrapping_add(k as u64);
        let p = random_packed(rows, cols, bits, seed);
        let mut rng = NormalStream::new(seed ^ 0x5eed);
        let x: Vec<f32> = (0..cols).map(|_| rng.next_normal() as f32).collect();
        let dense = dequantize_packed(&p);

        let dense_mv = || {
            if opts.parallel {
                dense
                    .data()
                    .par_chunks(cols.max(1))
                    .map(|row| matvec_dense(row, 1, cols, &x)[0])
                    .collect()
            } else {
                matvec_dense(dense.data(), rows, cols, &x)
            }
        };
        let dequant_mv = || matvec_reference(&p, &x).expect("shape checked");
        let lut_mv = || {
            let lut = build_lut(&x, DEFAULT_GROUP_SIZE).expect("default group size");
            if opts.parallel {
                matvec_with_lut_par(&p, &lut).expect("shape checked")
            } else {
                matvec_with_lut(&p, &lut).expect("shape checked")
            }
        };

        let reference = dequant_mv();
        let diffs = [
            max_rel_diff(&dense_mv(), &reference),
            0.0,
            max_rel_diff(&lut_mv(), &reference),
        ];
        if let Some(d) = diffs.iter().find(|d| !(**d <= BENCH_TOLERANCE)) {
            return Err(Error::Degenerate(format!(
                "kernel paths disagree on {rows}x{cols}: relative difference {d:e}"
            )));
        }

        let times = [
            median_time(opts.reps, dense_mv),
            median_time(opts.reps, dequant_mv),
            median_time(opts.reps, lut_mv),
        ];
        for (j, path) in BenchPath::ALL.into_iter().enumerate() {
            out.push(BenchRow {
                rows,
                cols,
                bits,
                path,
                median_secs: times[j],
                speedup_vs_dequant: times[1] / times[j].max(f64::MIN_POSITIVE),
                max_rel_diff: diffs[j],
            });
        }
    }
    Ok(out)
}
