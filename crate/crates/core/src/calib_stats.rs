//! Layer-wise proxy Hessian `H = 2 X X^T` and its damped inverse factor.

use rayon::prelude::*;

use crate::{Error, Result, TensorF32};

pub const DEFAULT_DAMP_PCT: f64 = 0.01;
pub const DEFAULT_MAX_FEATURES: usize = 8192;

/// Accumulated calibration statistics for one linear layer.
///
/// `h` is dense `k x k`, row-major, f64. After [`HessianState::finalize`] the
/// damped matrix and the upper Cholesky factor of its inverse are frozen.
#[derive(Debug, Clone)]
pub struct HessianState {
    k: usize,
    h: Vec<f64>,
    nsamples: usize,
    damping_lambda: f64,
    hinv_chol: Option<Vec<f64>>,
}

impl HessianState {
    pub fn new(k: usize) -> Result<Self> {
        Self::with_feature_cap(k, DEFAULT_MAX_FEATURES)
    }

    pub fn with_feature_cap(k: usize, cap: usize) -> Result<Self> {
        if k == 0 || k > cap {
            return Err(Error::InvalidConfig(format!(
                "feature count {k} outside 1..={cap}"
            )));
        }
        Ok(Self {
            k,
            h: vec![0.0; k * k],
            nsamples: 0,
            damping_lambda: 0.0,
            hinv_chol: None,
        })
    }

    /// Builds, accumulates and finalizes in one go.
    pub fn from_activations(x: &TensorF32, damp_pct: f64) -> Result<Self> {
        let mut s = Self::new(x.rows())?;
        s.accumulate(x)?;
        s.finalize(damp_pct)?;
        Ok(s)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn nsamples(&self) -> usize {
        self.nsamples
    }

    pub fn damping_lambda(&self) -> f64 {
        self.damping_lambda
    }

    pub fn is_finalized(&self) -> bool {
        self.hinv_chol.is_some()
    }

    /// The accumulated matrix; damped once finalized.
    pub fn h(&self) -> &[f64] {
        &self.h
    }

    /// Adds `2 X X^T` for a `k x m` feature-major batch.
    pub fn accumulate(&mut self, x: &TensorF32) -> Result<()> {
        if self.is_finalized() {
            return Err(Error::AlreadyFinalized);
        }
        if x.dims().len() != 2 || x.rows() != self.k {
            return Err(Error::DimensionMismatch(format!(
                "activations have dims {:?}, expected {} feature rows",
                x.dims(),
                self.k
            )));
        }
        let k = self.k;
        let m = x.cols();
        if m == 0 {
            return Ok(());
        }
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|i| x.row(i).iter().map(|&v| v as f64).collect())
            .collect();
        self.h.par_chunks_mut(k).enumerate().for_each(|(i, hrow)| {
            let xi = &rows[i];
            for (j, hij) in hrow.iter_mut().enumerate() {
                let dot: f64 = xi.iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                *hij += 2.0 * dot;
            }
        });
        self.nsamples += m;
        Ok(())
    }

    /// Adds `damp_pct * mean(diag H)` to the diagonal and factors the inverse.
    pub fn finalize(&mut self, damp_pct: f64) -> Result<()> {
        if self.is_finalized() {
            return Err(Error::AlreadyFinalized);
        }
        if self.nsamples == 0 {
            return Err(Error::InvalidConfig(
                "finalize needs at least one sample".into(),
            ));
        }
        if !(damp_pct > 0.0) || !damp_pct.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "damp_pct must be > 0, got {damp_pct}"
            )));
        }
        let k = self.k;
        let mean_diag = (0..k).map(|i| self.h[i * k + i]).sum::<f64>() / k as f64;
        let lambda = damp_pct * mean_diag;
        let mut damped = self.h.clone();
        for i in 0..k {
            damped[i * k + i] += lambda;
        }
        let factor = inverse_upper_factor(&damped, k)?;
        self.h = damped;
        self.damping_lambda = lambda;
        self.hinv_chol = Some(factor);
        Ok(())
    }

    /// Diagonal of the damped Hessian.
    pub fn hdiag(&self) -> Result<Vec<f64>> {
        if !self.is_finalized() {
            return Err(Error::NotFinalized);
        }
        Ok((0..self.k).map(|i| self.h[i * self.k + i]).collect())
    }

    /// Upper-triangular `U` with `U^T U = H^-1`, row-major `k x k`.
    pub fn hinv_chol(&self) -> Result<&[f64]> {
        self.hinv_chol.as_deref().ok_or(Error::NotFinalized)
    }

    /// Inverse factor of the damped Hessian after permuting features by
    /// `perm` (new position `i` holds old feature `perm[i]`).
    pub fn permuted_hinv_chol(&self, perm: &[usize]) -> Result<Vec<f64>> {
        if !self.is_finalized() {
            return Err(Error::NotFinalized);
        }
        let k = self.k;
        if perm.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "permutation length {} != {k}",
                perm.len()
            )));
        }
        let mut p = vec![0.0; k * k];
        for (i, &pi) in perm.iter().enumerate() {
            for (j, &pj) in perm.iter().enumerate() {
                p[i * k + j] = self.h[pi * k + pj];
            }
        }
        inverse_upper_factor(&p, k)
    }
}

/// Lower Cholesky factor `L` with `L L^T = a`.
pub fn cholesky_lower(a: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= l[j * k + p] * l[j * k + p];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Cholesky { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[j * k + j] = djj;
        let (head, tail) = l.split_at_mut((j + 1) * k);
        let lj = &head[j * k..j * k + j];
        tail.par_chunks_mut(k).enumerate().for_each(|(off, li)| {
            let i = j + 1 + off;
            let s: f64 = li[..j].iter().zip(lj).map(|(a, b)| a * b).sum();
            li[j] = (a[i * k + j] - s) / djj;
        });
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix.
fn invert_lower(l: &[f64], k: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|c| {
            let mut col = vec![0.0; k];
            col[c] = 1.0 / l[c * k + c];
            for i in c + 1..k {
                let s: f64 = (c..i).map(|p| l[i * k + p] * col[p]).sum();
                col[i] = -s / l[i * k + i];
            }
            col
        })
        .collect();
    let mut out = vec![0.0; k * k];
    for (c, col) in cols.iter_mut().enumerate() {
        for i in c..k {
            out[i * k + c] = col[i];
        }
    }
    out
}

/// `U` upper-triangular with `U^T U = a^-1`, for symmetric positive definite `a`.
pub fn inverse_upper_factor(a: &[f64], k: usize) -> Result<Vec<f64>> {
    let l = cholesky_lower(a, k)?;
    let linv = invert_lower(&l, k);
    // a^-1 = L^-T L^-1
    let mut inv = vec![0.0; k * k];
    inv.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            let start = i.max(j);
            *v = (start..k).map(|p| linv[p * k + i] * linv[p * k + j]).sum();
        }
    });
    let li = cholesky_lower(&inv, k)?;
    let mut u = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            u[i * k + j] = li[j * k + i];
        }
    }
    Ok(u)
}
