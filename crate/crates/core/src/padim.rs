//! Per-position Gaussian modelling of patch descriptors (PaDiM), with a full
//! covariance or a diagonal (Lite) variant.
//!
//! Statistics are held in f64. Full-mode scoring goes through a Cholesky
//! factor computed whenever the covariance changes, never an explicit inverse.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::{dim_u32, Cursor};
use crate::patchcore::{AnomalyMap, PatchGrid};

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const GAUS_MAGIC: &[u8; 4] = b"GAUS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovMode {
    Full,
    Diag,
}

impl CovMode {
    /// Entries stored per position for the spread statistic.
    pub fn spread_len(self, d: usize) -> usize {
        match self {
            CovMode::Full => d * d,
            CovMode::Diag => d,
        }
    }

    /// Retained bytes per position at f32 precision.
    pub fn bytes_per_position(self, d: usize) -> u64 {
        let d = d as u64;
        match self {
            CovMode::Full => 4 * d + 4 * d * d,
            CovMode::Diag => 8 * d,
        }
    }

    fn to_byte(self) -> u8 {
        match self {
            CovMode::Full => 0,
            CovMode::Diag => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub mode: CovMode,
    pub n_samples: usize,
    pub epsilon: f64,
    /// `positions * d`, position-major.
    pub mean: Vec<f64>,
    /// Full: `positions * d * d` row-major covariances. Diag: `positions * d` variances.
    pub spread: Vec<f64>,
    /// Full mode only: row-major lower Cholesky factors.
    chol: Vec<f64>,
}

fn cholesky_block(cov: &[f64], d: usize, position: usize) -> Result<Vec<f64>> {
    let m = DMatrix::from_row_slice(d, d, cov);
    let l = m.cholesky().ok_or_else(|| Error::Numeric {
        module: "padim",
        position,
        detail: "covariance is not positive definite".into(),
    })?;
    let l = l.l();
    let mut out = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..=r {
            out[r * d + c] = l[(r, c)];
        }
    }
    Ok(out)
}

impl GaussianField {
    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    /// Builds a field from precomputed statistics and factorizes it.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        h: usize,
        w: usize,
        d: usize,
        mode: CovMode,
        n_samples: usize,
        epsilon: f64,
        mean: Vec<f64>,
        spread: Vec<f64>,
    ) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::arg("field dims must be positive"));
        }
        if n_samples == 0 {
            return Err(Error::arg("field needs at least one sample"));
        }
        let p = h * w;
        if mean.len() != p * d || spread.len() != p * mode.spread_len(d) {
            return Err(Error::arg("field statistics do not match dims"));
        }
        if let Some(i) = mean.iter().chain(&spread).position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                module: "padim",
                position: i / d.max(1) % p,
                detail: "non-finite statistic".into(),
            });
        }
        let mut field = GaussianField {
            h,
            w,
            d,
            mode,
            n_samples,
            epsilon,
            mean,
            spread,
            chol: Vec::new(),
        };
        field.refactorize()?;
        Ok(field)
    }

    pub(crate) fn refactorize(&mut self) -> Result<()> {
        let d = self.d;
        match self.mode {
            CovMode::Full => {
                let blocks: Vec<Vec<f64>> = self
                    .spread
                    .par_chunks(d * d)
                    .enumerate()
                    .map(|(p, cov)| cholesky_block(cov, d, p))
                    .collect::<Result<_>>()?;
                self.chol = blocks.concat();
            }
            CovMode::Diag => {
                if let Some(i) = self.spread.iter().position(|&v| v <= 0.0) {
                    return Err(Error::Numeric {
                        module: "padim",
                        position: i / d,
                        detail: format!("variance {} is not positive", self.spread[i]),
                    });
                }
                self.chol.clear();
            }
        }
        Ok(())
    }

    #[inline]
    pub fn mean_at(&self, p: usize) -> &[f64] {
        &self.mean[p * self.d..(p + 1) * self.d]
    }

    #[inline]
    pub fn spread_at(&self, p: usize) -> &[f64] {
        let s = self.mode.spread_len(self.d);
        &self.spread[p * s..(p + 1) * s]
    }

    /// Diagonal of every position's covariance (the variances in diag mode).
    pub fn variances(&self) -> Vec<f64> {
        match self.mode {
            CovMode::Diag => self.spread.clone(),
            CovMode::Full => (0..self.positions())
                .flat_map(|p| {
                    let cov = self.spread_at(p);
                    (0..self.d).map(move |k| cov[k * self.d + k])
                })
                .collect(),
        }
    }

    /// Full field reduced to its diagonal.
    pub fn to_diag(&self) -> GaussianField {
        GaussianField {
            mode: CovMode::Diag,
            spread: self.variances(),
            chol: Vec::new(),
            ..self.clone()
        }
    }

    /// Score of one descriptor at position `p`: `sqrt(r' S^-1 r)` in full mode,
    /// `sum_k r_k^2 / var_k` (no square root) in diag mode.
    pub fn score_at(&self, p: usize, x: &[f32]) -> f64 {
        let d = self.d;
        let mu = self.mean_at(p);
        match self.mode {
            CovMode::Diag => {
                let var = self.spread_at(p);
                x.iter()
                    .zip(mu)
                    .zip(var)
                    .map(|((&xi, m), v)| {
                        let r = xi as f64 - m;
                        r * r / v
                    })
                    .sum()
            }
            CovMode::Full => {
                let l = &self.chol[p * d * d..(p + 1) * d * d];
                let mut y = vec![0.0; d];
                let mut acc = 0.0;
                for i in 0..d {
                    let mut s = x[i] as f64 - mu[i];
                    for k in 0..i {
                        s -= l[i * d + k] * y[k];
                    }
                    y[i] = s / l[i * d + i];
                    acc += y[i] * y[i];
                }
                acc.sqrt()
            }
        }
    }

    /// Vector operations per scored position: one for diag, `d` for the
    /// triangular solve in full mode.
    pub fn score_ops_per_position(&self) -> u64 {
        match self.mode {
            CovMode::Diag => 1,
            CovMode::Full => self.d as u64,
        }
    }

    /// Retained bytes at f32 precision.
    pub fn bytes(&self) -> u64 {
        self.positions() as u64 * self.mode.bytes_per_position(self.d)
    }

    pub fn check_grid(&self, grid: &PatchGrid) -> Result<()> {
        if (grid.h, grid.w, grid.d) != (self.h, self.w, self.d) {
            return Err(Error::arg(format!(
                "grid {}x{}x{} does not match field {}x{}x{}",
                grid.h, grid.w, grid.d, self.h, self.w, self.d
            )));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &GaussianField) -> Result<()> {
        if (self.h, self.w, self.d, self.mode) != (other.h, other.w, other.d, other.mode) {
            return Err(Error::arg(format!(
                "field {}x{}x{} {:?} does not match {}x{}x{} {:?}",
                other.h, other.w, other.d, other.mode, self.h, self.w, self.d, self.mode
            )));
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut sink: W) -> Result<()> {
        let mut out = Vec::with_capacity(64 + self.mean.len() * 4 + self.spread.len() * 4);
        out.extend_from_slice(GAUS_MAGIC);
        out.push(self.mode.to_byte());
        for dim in [self.h, self.w, self.d] {
            out.extend_from_slice(&dim_u32(dim)?.to_le_bytes());
        }
        out.extend_from_slice(&(self.epsilon as f32).to_le_bytes());
        out.extend_from_slice(&(self.n_samples as u64).to_le_bytes());
        let s = self.mode.spread_len(self.d);
        for p in 0..self.positions() {
            for v in self.mean_at(p) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for v in &self.spread[p * s..(p + 1) * s] {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        sink.write_all(&out)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write(&mut out)?;
        Ok(out)
    }

    pub fn read<R: Read>(mut source: R) -> Result<Self> {
        let mut buf = Vec::new();
        source.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Decodes a GAUS file. Statistics come back at f32 precision.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(buf);
        c.magic(GAUS_MAGIC)?;
        let mode = match c.u8("header")? {
            0 => CovMode::Full,
            1 => CovMode::Diag,
            other => return Err(Error::Format(format!("unknown GAUS mode byte {other}"))),
        };
        let h = c.u32("header")? as usize;
        let w = c.u32("header")? as usize;
        let d = c.u32("header")? as usize;
        let epsilon = c.f32("header")? as f64;
        let n_samples = c.u64("header")? as usize;
        let s = mode.spread_len(d);
        let p = h * w;
        let mut mean = Vec::with_capacity(p * d);
        let mut spread = Vec::with_capacity(p * s);
        for _ in 0..p {
            mean.extend(c.f32s(d, "field mean")?.into_iter().map(f64::from));
            spread.extend(c.f32s(s, "field spread")?.into_iter().map(f64::from));
        }
        c.finish("GAUS payload")?;
        Self::from_parts(h, w, d, mode, n_samples, epsilon, mean, spread)
    }
}

fn check_grids(grids: &[PatchGrid]) -> Result<(usize, usize, usize)> {
    let first = grids.first().ok_or_else(|| Error::arg("no training grids"))?;
    let dims = (first.h, first.w, first.d);
    if let Some(g) = grids.iter().find(|g| (g.h, g.w, g.d) != dims) {
        return Err(Error::arg(format!(
            "grid {} is {}x{}x{}, expected {}x{}x{}",
            g.image_id, g.h, g.w, g.d, dims.0, dims.1, dims.2
        )));
    }
    Ok(dims)
}

/// Fits a Gaussian at every position with the default regularizer.
pub fn fit(train_grids: &[PatchGrid], mode: CovMode) -> Result<GaussianField> {
    fit_with_epsilon(train_grids, mode, DEFAULT_EPSILON)
}

/// Mean with divisor N; covariance (or variance) with divisor N-1, plus `epsilon` on the diagonal.
pub fn fit_with_epsilon(train_grids: &[PatchGrid], mode: CovMode, epsilon: f64) -> Result<GaussianField> {
    let (h, w, d) = check_grids(train_grids)?;
    let n = train_grids.len();
    if n < 2 {
        return Err(Error::arg(format!("fit needs at least 2 samples, got {n}")));
    }
    let nf = n as f64;
    let per_pos: Vec<(Vec<f64>, Vec<f64>)> = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let mut mu = vec![0.0; d];
            for g in train_grids {
                for (m, &x) in mu.iter_mut().zip(g.descriptor(p)) {
                    *m += x as f64;
                }
            }
            mu.iter_mut().for_each(|m| *m /= nf);
            let mut spread = vec![0.0; mode.spread_len(d)];
            let mut r = vec![0.0; d];
            for g in train_grids {
                for ((ri, &x), m) in r.iter_mut().zip(g.descriptor(p)).zip(&mu) {
                    *ri = x as f64 - m;
                }
                match mode {
                    CovMode::Full => {
                        for i in 0..d {
                            for j in 0..d {
                                spread[i * d + j] += r[i] * r[j];
                            }
                        }
                    }
                    CovMode::Diag => {
                        for (s, ri) in spread.iter_mut().zip(&r) {
                            *s += ri * ri;
                        }
                    }
                }
            }
            spread.iter_mut().for_each(|s| *s /= nf - 1.0);
            for k in 0..d {
                match mode {
                    CovMode::Full => spread[k * d + k] += epsilon,
                    CovMode::Diag => spread[k] += epsilon,
                }
            }
            (mu, spread)
        })
        .collect();
    let mut mean = Vec::with_capacity(h * w * d);
    let mut spread = Vec::with_capacity(h * w * mode.spread_len(d));
    for (m, s) in per_pos {
        mean.extend(m);
        spread.extend(s);
    }
    GaussianField::from_parts(h, w, d, mode, n, epsilon, mean, spread)
}

/// Feature-resolution scores; `image_score` is the largest position score.
pub fn score(grid: &PatchGrid, field: &GaussianField) -> Result<AnomalyMap> {
    field.check_grid(grid)?;
    let scores: Vec<f32> = (0..grid.positions())
        .into_par_iter()
        .map(|p| field.score_at(p, grid.descriptor(p)) as f32)
        .collect();
    let image_score = scores.iter().copied().fold(0.0, f32::max);
    Ok(AnomalyMap {
        height: grid.h,
        width: grid.w,
        scores,
        image_score,
    })
}
