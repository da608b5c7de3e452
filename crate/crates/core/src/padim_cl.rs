//! Continual PaDiM: exact fusion of per-task Gaussians, the unweighted
//! legacy fusion kept as a baseline, and per-task field lists scored by
//! minimum.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::padim::{CovMode, GaussianField};
use crate::patchcore::{AnomalyMap, PatchGrid};

/// Running exact fusion of per-task fields.
///
/// Population (divide-by-N) statistics are the fused state. The exposed
/// [`field`](FusedField::field) converts back to the per-task fit convention
/// (N-1 divisor plus epsilon) so that scoring matches a single joint fit.
#[derive(Debug, Clone)]
pub struct FusedField {
    field: GaussianField,
    cumulative_n: usize,
    population: Vec<f64>,
}

fn diag_index(mode: CovMode, d: usize, k: usize) -> usize {
    match mode {
        CovMode::Full => k * d + k,
        CovMode::Diag => k,
    }
}

/// Fit-convention spread to population convention: `(S - eps I)(N-1)/N`.
fn to_population(field: &GaussianField) -> Vec<f64> {
    let (d, mode, n) = (field.d, field.mode, field.n_samples as f64);
    let s = mode.spread_len(d);
    let mut pop = field.spread.clone();
    for block in pop.chunks_mut(s) {
        for k in 0..d {
            block[diag_index(mode, d, k)] -= field.epsilon;
        }
        block.iter_mut().for_each(|v| *v *= (n - 1.0) / n);
    }
    pop
}

impl FusedField {
    pub fn new(first: GaussianField) -> Result<Self> {
        if first.n_samples < 2 {
            return Err(Error::arg("fused field needs a fit over at least 2 samples"));
        }
        Ok(FusedField {
            population: to_population(&first),
            cumulative_n: first.n_samples,
            field: first,
        })
    }

    /// Field used for scoring.
    pub fn field(&self) -> &GaussianField {
        &self.field
    }

    pub fn cumulative_n(&self) -> usize {
        self.cumulative_n
    }

    pub fn mean(&self) -> &[f64] {
        &self.field.mean
    }

    /// Population-convention covariances (or variances), position-major.
    pub fn population_spread(&self) -> &[f64] {
        &self.population
    }

    /// Merges a newly fitted task field, weighting by sample counts and
    /// correcting for the shift of each component mean.
    pub fn fuse_exact(&mut self, new_field: &GaussianField) -> Result<()> {
        self.field.same_shape(new_field)?;
        if new_field.n_samples < 2 {
            return Err(Error::arg(format!(
                "new field has {} samples, need at least 2",
                new_field.n_samples
            )));
        }
        if new_field.epsilon != self.field.epsilon {
            return Err(Error::arg("fields were fitted with different epsilon"));
        }
        let (d, mode) = (self.field.d, self.field.mode);
        let s = mode.spread_len(d);
        let n0 = self.cumulative_n as f64;
        let n1 = new_field.n_samples as f64;
        let n = n0 + n1;
        let new_pop = to_population(new_field);

        let merged: Vec<(Vec<f64>, Vec<f64>)> = (0..self.field.positions())
            .into_par_iter()
            .map(|p| {
                let mu0 = &self.field.mean[p * d..(p + 1) * d];
                let mu1 = new_field.mean_at(p);
                let mu: Vec<f64> = mu0.iter().zip(mu1).map(|(a, b)| (n0 * a + n1 * b) / n).collect();
                let d0: Vec<f64> = mu0.iter().zip(&mu).map(|(a, m)| a - m).collect();
                let d1: Vec<f64> = mu1.iter().zip(&mu).map(|(a, m)| a - m).collect();
                let s0 = &self.population[p * s..(p + 1) * s];
                let s1 = &new_pop[p * s..(p + 1) * s];
                let mut out = vec![0.0; s];
                match mode {
                    CovMode::Full => {
                        for i in 0..d {
                            for j in 0..d {
                                let k = i * d + j;
                                out[k] = (n0 * (s0[k] + d0[i] * d0[j]) + n1 * (s1[k] + d1[i] * d1[j])) / n;
                            }
                        }
                    }
                    CovMode::Diag => {
                        for k in 0..d {
                            out[k] = (n0 * (s0[k] + d0[k] * d0[k]) + n1 * (s1[k] + d1[k] * d1[k])) / n;
                        }
                    }
                }
                (mu, out)
            })
            .collect();

        let mut mean = Vec::with_capacity(self.field.mean.len());
        let mut population = Vec::with_capacity(self.population.len());
        for (m, sp) in merged {
            mean.extend(m);
            population.extend(sp);
        }
        let total = self.cumulative_n + new_field.n_samples;
        let eps = self.field.epsilon;
        let mut spread: Vec<f64> = population.iter().map(|v| v * n / (n - 1.0)).collect();
        for block in spread.chunks_mut(s) {
            for k in 0..d {
                block[diag_index(mode, d, k)] += eps;
            }
        }
        let field = GaussianField::from_parts(
            self.field.h,
            self.field.w,
            d,
            mode,
            total,
            eps,
            mean,
            spread,
        )?;
        self.field = field;
        self.population = population;
        self.cumulative_n = total;
        Ok(())
    }
}

fn invert_blocks(field: &GaussianField, spread: &[f64]) -> Result<Vec<f64>> {
    let d = field.d;
    match field.mode {
        CovMode::Diag => Ok(spread.iter().map(|v| 1.0 / v).collect()),
        CovMode::Full => {
            let blocks: Vec<Vec<f64>> = spread
                .par_chunks(d * d)
                .enumerate()
                .map(|(p, block)| {
                    let m = DMatrix::from_row_slice(d, d, block);
                    let inv = m.cholesky().map(|c| c.inverse()).ok_or_else(|| Error::Numeric {
                        module: "padim_cl",
                        position: p,
                        detail: "matrix is not positive definite".into(),
                    })?;
                    // symmetrize, then row-major
                    let sym = (&inv + inv.transpose()) * 0.5;
                    Ok(sym.transpose().as_slice().to_vec())
                })
                .collect::<Result<_>>()?;
            Ok(blocks.concat())
        }
    }
}

/// Unweighted running average of per-task means and precisions.
///
/// Ignores sample counts, so it is biased whenever tasks differ in size.
#[derive(Debug, Clone)]
pub struct LegacyFusion {
    template: GaussianField,
    tasks: usize,
    total_n: usize,
    mean: Vec<f64>,
    precision: Vec<f64>,
}

impl LegacyFusion {
    pub fn new(first: GaussianField) -> Result<Self> {
        let precision = invert_blocks(&first, &first.spread)?;
        Ok(LegacyFusion {
            tasks: 1,
            total_n: first.n_samples,
            mean: first.mean.clone(),
            precision,
            template: first,
        })
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn fuse_legacy(&mut self, new_field: &GaussianField) -> Result<()> {
        self.template.same_shape(new_field)?;
        let t = (self.tasks + 1) as f64;
        let new_prec = invert_blocks(new_field, &new_field.spread)?;
        for (m, x) in self.mean.iter_mut().zip(&new_field.mean) {
            *m += (x - *m) / t;
        }
        for (p, x) in self.precision.iter_mut().zip(&new_prec) {
            *p += (x - *p) / t;
        }
        self.tasks += 1;
        self.total_n += new_field.n_samples;
        Ok(())
    }

    /// Scoring field obtained by inverting the averaged precision.
    pub fn to_field(&self) -> Result<GaussianField> {
        let spread = invert_blocks(&self.template, &self.precision)?;
        GaussianField::from_parts(
            self.template.h,
            self.template.w,
            self.template.d,
            self.template.mode,
            self.total_n,
            self.template.epsilon,
            self.mean.clone(),
            spread,
        )
    }
}

/// One field per task, scored by the per-position minimum.
#[derive(Debug, Clone, Default)]
pub struct FieldList {
    pub names: Vec<String>,
    pub fields: Vec<GaussianField>,
}

#[derive(Serialize, Deserialize)]
struct FieldIndex {
    mode: CovMode,
    tasks: Vec<String>,
}

impl FieldList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn push(&mut self, name: &str, field: GaussianField) -> Result<()> {
        if let Some(first) = self.fields.first() {
            first.same_shape(&field)?;
        }
        if self.names.iter().any(|n| n == name) {
            return Err(Error::arg(format!("task {name} already has a field")));
        }
        self.names.push(name.to_string());
        self.fields.push(field);
        Ok(())
    }

    pub fn bytes(&self) -> u64 {
        self.fields.iter().map(GaussianField::bytes).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let first = self.fields.first().ok_or_else(|| Error::arg("cannot save an empty field list"))?;
        fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
        for (i, f) in self.fields.iter().enumerate() {
            let path = dir.join(format!("field_{i:02}.gaus"));
            fs::write(&path, f.to_bytes()?).map_err(|e| Error::path(&path, e))?;
        }
        let index = FieldIndex {
            mode: first.mode,
            tasks: self.names.clone(),
        };
        let path = dir.join("index.json");
        fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::path(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let raw = fs::read(&path).map_err(|e| Error::path(&path, e))?;
        let index: FieldIndex = serde_json::from_slice(&raw)?;
        let mut list = FieldList::new();
        for (i, name) in index.tasks.iter().enumerate() {
            let path = dir.join(format!("field_{i:02}.gaus"));
            let bytes = fs::read(&path).map_err(|e| Error::path(&path, e))?;
            let field = GaussianField::from_bytes(&bytes)?;
            if field.mode != index.mode {
                return Err(Error::Format(format!("{} mode differs from index", path.display())));
            }
            list.push(name, field)?;
        }
        Ok(list)
    }
}

/// Per-position minimum score over the task fields and the task attaining
/// it (lowest index on ties). `image_score` is the largest position score.
pub fn score_multimodal(grid: &PatchGrid, list: &FieldList) -> Result<(AnomalyMap, Vec<usize>)> {
    if list.is_empty() {
        return Err(Error::arg("field list is empty"));
    }
    for f in &list.fields {
        f.check_grid(grid)?;
    }
    let (scores, argmin): (Vec<f32>, Vec<usize>) = (0..grid.positions())
        .into_par_iter()
        .map(|p| {
            let x = grid.descriptor(p);
            let mut best = (f64::INFINITY, 0);
            for (t, f) in list.fields.iter().enumerate() {
                let s = f.score_at(p, x);
                if s < best.0 {
                    best = (s, t);
                }
            }
            (best.0 as f32, best.1)
        })
        .unzip();
    let image_score = scores.iter().copied().fold(0.0, f32::max);
    Ok((
        AnomalyMap {
            height: grid.h,
            width: grid.w,
            scores,
            image_score,
        },
        argmin,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldVariant {
    Uni,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryConfig {
    pub tasks: u64,
    pub d: u64,
    pub h: u64,
    pub w: u64,
    pub mode: CovMode,
    pub variant: FieldVariant,
}

/// Retained bytes of a continual Gaussian model at f32 precision.
pub fn memory_report(cfg: MemoryConfig) -> u64 {
    let per_position = cfg.mode.bytes_per_position(cfg.d as usize);
    let fields = match cfg.variant {
        FieldVariant::Uni => 1,
        FieldVariant::Multi => cfg.tasks,
    };
    fields * cfg.h * cfg.w * per_position
}
