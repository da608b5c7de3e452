//! Seeded synthetic scenarios: one Gaussian cluster per task, with square
//! anomalous regions shifted away from the cluster.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::{FeatureMap, Label, LayerStack, Mask};
use crate::scenario::{Scenario, TaskData};

const CENTER_RETRIES: usize = 100_000;

fn default_image_scale() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_tasks: usize,
    /// Channel count of each layer; layer `j` has spatial size `ceil(grid / 2^j)`.
    pub d_per_layer: Vec<usize>,
    pub grid: [usize; 2],
    pub normals_per_task: usize,
    pub anomalies_per_task: usize,
    /// Normal images in each test set; defaults to `max(anomalies_per_task, 1)`.
    #[serde(default)]
    pub test_normals_per_task: Option<usize>,
    pub cluster_separation: f32,
    pub anomaly_offset: f32,
    pub seed: u64,
    /// Image pixels per layer-0 grid cell.
    #[serde(default = "default_image_scale")]
    pub image_scale: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_tasks", self.num_tasks),
            ("grid[0]", self.grid[0]),
            ("grid[1]", self.grid[1]),
            ("normals_per_task", self.normals_per_task),
            ("image_scale", self.image_scale),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{field} must be >= 1")));
            }
        }
        if self.d_per_layer.is_empty() || self.d_per_layer.contains(&0) {
            return Err(Error::config("d_per_layer must be a nonempty list of positive ints"));
        }
        if self.test_normals_per_task == Some(0) && self.anomalies_per_task == 0 {
            return Err(Error::config("test_normals_per_task must be >= 1 when there are no anomalies"));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return Err(Error::config("cluster_separation must be > 0"));
        }
        if !(self.anomaly_offset > 0.0 && self.anomaly_offset.is_finite()) {
            return Err(Error::config("anomaly_offset must be > 0"));
        }
        Ok(())
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid[0] * self.image_scale, self.grid[1] * self.image_scale)
    }

    fn layer_dims(&self, j: usize) -> (usize, usize) {
        let f = 1usize << j;
        (self.grid[0].div_ceil(f), self.grid[1].div_ceil(f))
    }

    fn test_normals(&self) -> usize {
        self.test_normals_per_task
            .unwrap_or_else(|| self.anomalies_per_task.max(1))
    }
}

/// Axis-aligned square in layer-0 grid coordinates.
#[derive(Clone, Copy)]
struct Region {
    y0: usize,
    x0: usize,
    side: usize,
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn normal(&mut self) -> f32 {
        self.rng.sample::<f32, _>(StandardNormal)
    }

    fn unit_vector(&mut self, d: usize) -> Vec<f32> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                return v.iter().map(|x| (x / n) as f32).collect();
            }
        }
    }

    /// One center per task per layer, pairwise at least `cluster_separation` apart on every layer.
    fn centers(&mut self) -> Result<Vec<Vec<Vec<f32>>>> {
        let sep = self.spec.cluster_separation as f64;
        let half = sep * self.spec.num_tasks.max(2) as f64;
        let mut centers: Vec<Vec<Vec<f32>>> = Vec::with_capacity(self.spec.num_tasks);
        for t in 0..self.spec.num_tasks {
            let mut placed = false;
            for _ in 0..CENTER_RETRIES {
                let cand: Vec<Vec<f32>> = self
                    .spec
                    .d_per_layer
                    .iter()
                    .map(|&d| {
                        (0..d)
                            .map(|_| self.rng.random_range(-half..half) as f32)
                            .collect()
                    })
                    .collect();
                let far_enough = centers.iter().all(|other| {
                    other.iter().zip(&cand).all(|(a, b)| {
                        let d2: f64 = a
                            .iter()
                            .zip(b)
                            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                            .sum();
                        d2.sqrt() >= sep
                    })
                });
                if far_enough {
                    centers.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::config(format!(
                    "cluster_separation {} unattainable for task {} with d_per_layer {:?} after {} retries",
                    self.spec.cluster_separation,
                    t + 1,
                    self.spec.d_per_layer,
                    CENTER_RETRIES
                )));
            }
        }
        Ok(centers)
    }

    fn stack(
        &mut self,
        id: String,
        center: &[Vec<f32>],
        anomaly: Option<Region>,
    ) -> Result<LayerStack> {
        let label = if anomaly.is_some() {
            Label::Anomalous
        } else {
            Label::Normal
        };
        let mut layers = Vec::with_capacity(center.len());
        for (j, c) in center.iter().enumerate() {
            let (h, w) = self.spec.layer_dims(j);
            let d = c.len();
            let mut data = vec![0f32; d * h * w];
            for k in 0..d {
                for p in 0..h * w {
                    data[k * h * w + p] = c[k] + self.normal();
                }
            }
            if let Some(r) = anomaly {
                let dir = self.unit_vector(d);
                let f = 1usize << j;
                let (ys, ye) = (r.y0 / f, (r.y0 + r.side - 1) / f);
                let (xs, xe) = (r.x0 / f, (r.x0 + r.side - 1) / f);
                for y in ys..=ye {
                    for x in xs..=xe {
                        for k in 0..d {
                            data[(k * h + y) * w + x] += self.spec.anomaly_offset * dir[k];
                        }
                    }
                }
            }
            layers.push(FeatureMap::new(id.clone(), d, h, w, data, label)?);
        }
        if let Some(r) = anomaly {
            let (ih, iw) = self.spec.image_size();
            let s = self.spec.image_scale;
            let mut mask = Mask::zeros(ih, iw);
            for y in r.y0 * s..(r.y0 + r.side) * s {
                for x in r.x0 * s..(r.x0 + r.side) * s {
                    mask.set(y, x, true);
                }
            }
            let first = layers.remove(0).with_mask(mask)?;
            layers.insert(0, first);
        }
        LayerStack::new(id, layers)
    }

    fn region(&mut self) -> Region {
        let [h, w] = self.spec.grid;
        let side = (h.min(w) / 3).max(1);
        Region {
            y0: self.rng.random_range(0..=h - side),
            x0: self.rng.random_range(0..=w - side),
            side,
        }
    }
}

/// Builds the scenario in memory. A pure function of `spec`.
pub fn synthesize(spec: &SynthSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut g = Generator {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let centers = g.centers()?;
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for (t, center) in centers.iter().enumerate() {
        let name = format!("t{:02}", t + 1);
        let mut train = Vec::with_capacity(spec.normals_per_task);
        for i in 0..spec.normals_per_task {
            train.push(g.stack(format!("{name}_train_{i:04}"), center, None)?);
        }
        let mut test = Vec::new();
        for i in 0..spec.test_normals() {
            test.push(g.stack(format!("{name}_test_{i:04}"), center, None)?);
        }
        for i in 0..spec.anomalies_per_task {
            let r = g.region();
            let idx = spec.test_normals() + i;
            test.push(g.stack(format!("{name}_test_{idx:04}"), center, Some(r))?);
        }
        tasks.push(TaskData { name, train, test });
    }
    Scenario::new(spec.image_size(), tasks)
}

/// Synthesizes and writes the FMAP tree plus `manifest.json` under `dir`.
pub fn generate_synthetic(spec: &SynthSpec, dir: &Path) -> Result<(Scenario, PathBuf)> {
    let scenario = synthesize(spec)?;
    let path = scenario.write_to(dir)?;
    Ok((scenario, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(num_tasks: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            num_tasks,
            d_per_layer: vec![4, 3],
            grid: [6, 6],
            normals_per_task: 3,
            anomalies_per_task: 2,
            test_normals_per_task: None,
            cluster_separation: 10.0,
            anomaly_offset: 10.0,
            seed,
            image_scale: 4,
        }
    }

    fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(p) = stack.pop() {
            for e in std::fs::read_dir(&p).unwrap() {
                let e = e.unwrap().path();
                if e.is_dir() {
                    stack.push(e);
                } else {
                    let rel = e.strip_prefix(dir).unwrap().display().to_string();
                    out.push((rel, std::fs::read(&e).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn deterministic_tree() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let s = SynthSpec { seed: 7, ..spec(2, 7) };
        generate_synthetic(&s, a.path()).unwrap();
        generate_synthetic(&s, b.path()).unwrap();
        let (ta, tb) = (tree(a.path()), tree(b.path()));
        assert!(!ta.is_empty());
        assert_eq!(ta, tb);
    }

    #[test]
    fn prototypes_are_separated() {
        let s = synthesize(&spec(2, 3)).unwrap();
        let proto = |t: usize| -> Vec<f64> {
            let train = &s.tasks[t].train;
            let n = train[0].last_layer().data.len();
            let mut acc = vec![0f64; n];
            for st in train {
                for (a, v) in acc.iter_mut().zip(&st.last_layer().data) {
                    *a += *v as f64 / train.len() as f64;
                }
            }
            acc
        };
        let (p0, p1) = (proto(0), proto(1));
        let d: f64 = p0.iter().zip(&p1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(d >= 10.0, "prototype distance {d}");
    }

    #[test]
    fn no_anomalies_means_no_masks() {
        let s = synthesize(&SynthSpec {
            anomalies_per_task: 0,
            ..spec(2, 1)
        })
        .unwrap();
        for t in &s.tasks {
            assert!(!t.test.is_empty());
            assert!(t.test.iter().all(|st| st.label() == Label::Normal && st.mask().is_none()));
        }
    }

    #[test]
    fn masks_match_image_size() {
        let s = synthesize(&spec(1, 2)).unwrap();
        let anomalous: Vec<_> = s.tasks[0].test.iter().filter(|st| st.mask().is_some()).collect();
        assert_eq!(anomalous.len(), 2);
        for st in anomalous {
            let m = st.mask().unwrap();
            assert_eq!((m.height, m.width), (24, 24));
            assert_eq!(m.count_ones(), 8 * 8);
        }
    }

    #[test]
    fn invalid_specs() {
        let err = synthesize(&SynthSpec {
            num_tasks: 0,
            ..spec(1, 0)
        })
        .unwrap_err();
        assert!(err.to_string().contains("num_tasks"));
        let err = synthesize(&SynthSpec {
            anomaly_offset: f32::NAN,
            ..spec(1, 0)
        })
        .unwrap_err();
        assert!(err.to_string().contains("anomaly_offset"));
    }
}
