//! Single-task PatchCore: memory bank construction and nearest-neighbor scoring.

mod grid;
mod render;

use std::io::{Read, Write};

use rayon::prelude::*;

pub use grid::{build_patch_grid, resize_bilinear, PatchGrid};
pub use render::{gaussian_blur, gaussian_kernel, render_map, AnomalyMap, DEFAULT_SIGMA};

use crate::coreset::{gonzalez, l2, OrderedCoreset, Points};
use crate::error::{Error, Result};
use crate::fmap::{dim_u32, Cursor};

pub const DEFAULT_POOLING: usize = 3;
pub const DEFAULT_NEIGHBORS: usize = 9;

pub const BANK_MAGIC: &[u8; 4] = b"BANK";
pub const BANK_VERSION: u16 = 1;

/// Greedy-ordered patch vectors of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub d: usize,
    pub vectors: Vec<f32>,
    pub task_name: String,
    pub gonzalez_seed: usize,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.vectors.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn points(&self) -> Points<'_> {
        Points::new(&self.vectors, self.d).expect("bank invariants hold")
    }

    #[inline]
    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    pub fn bytes(&self) -> usize {
        self.vectors.len() * 4
    }

    /// Subsamples `pool` to `target` vectors in greedy order.
    pub fn from_pool(
        pool: Points<'_>,
        target: usize,
        task_name: impl Into<String>,
        seed: usize,
    ) -> Result<(Self, OrderedCoreset)> {
        if target > pool.len() {
            return Err(Error::arg(format!(
                "bank target {target} exceeds pool of {} patches",
                pool.len()
            )));
        }
        let coreset = gonzalez(pool, target, seed)?;
        Ok((Self::gather(pool, &coreset.indices, task_name, seed), coreset))
    }

    pub(crate) fn gather(
        pool: Points<'_>,
        indices: &[usize],
        task_name: impl Into<String>,
        seed: usize,
    ) -> Self {
        let mut vectors = Vec::with_capacity(indices.len() * pool.dim());
        for &i in indices {
            vectors.extend_from_slice(pool.get(i));
        }
        MemoryBank {
            d: pool.dim(),
            vectors,
            task_name: task_name.into(),
            gonzalez_seed: seed,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(32 + self.task_name.len() + self.bytes());
        self.write(&mut out)?;
        Ok(out)
    }

    pub fn write<W: Write>(&self, mut sink: W) -> Result<()> {
        if self.task_name.len() > u16::MAX as usize {
            return Err(Error::arg("task name longer than 65535 bytes"));
        }
        let mut header = Vec::new();
        header.extend_from_slice(BANK_MAGIC);
        header.extend_from_slice(&BANK_VERSION.to_le_bytes());
        header.extend_from_slice(&dim_u32(self.d)?.to_le_bytes());
        header.extend_from_slice(&dim_u32(self.len())?.to_le_bytes());
        header.extend_from_slice(&(self.task_name.len() as u16).to_le_bytes());
        header.extend_from_slice(self.task_name.as_bytes());
        header.extend_from_slice(&dim_u32(self.gonzalez_seed)?.to_le_bytes());
        sink.write_all(&header)?;
        let mut body = Vec::with_capacity(self.bytes());
        for v in &self.vectors {
            body.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&body)?;
        Ok(())
    }

    pub fn read<R: Read>(mut source: R) -> Result<Self> {
        let mut buf = Vec::new();
        source.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(buf);
        c.magic(BANK_MAGIC)?;
        let version = c.u16("header")?;
        if version != BANK_VERSION {
            return Err(Error::Format(format!("unsupported BANK version {version}")));
        }
        let d = c.u32("header")? as usize;
        let count = c.u32("header")? as usize;
        let task_name = c.string("task name")?;
        let gonzalez_seed = c.u32("header")? as usize;
        if d == 0 {
            return Err(Error::Format("bank dimension is 0".into()));
        }
        let vectors = c.f32s(d * count, "bank vectors")?;
        c.finish("BANK payload")?;
        if let Some(index) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                index,
                value: vectors[index],
            });
        }
        Ok(MemoryBank {
            d,
            vectors,
            task_name,
            gonzalez_seed,
        })
    }
}

/// Concatenates every grid's descriptors in order.
pub fn pool_patches(grids: &[PatchGrid]) -> Result<(Vec<f32>, usize)> {
    let first = grids
        .first()
        .ok_or_else(|| Error::arg("no training grids"))?;
    let d = first.d;
    let mut pool = Vec::with_capacity(grids.iter().map(|g| g.descriptors.len()).sum());
    for g in grids {
        if g.d != d {
            return Err(Error::arg(format!(
                "grid {} has d={}, expected {d}",
                g.image_id, g.d
            )));
        }
        pool.extend_from_slice(&g.descriptors);
    }
    Ok((pool, d))
}

/// Pools every training patch in order and keeps a `target_size` greedy coreset (seed 0).
pub fn build_bank(
    train_grids: &[PatchGrid],
    target_size: usize,
    task_name: &str,
) -> Result<MemoryBank> {
    let (pool, d) = pool_patches(train_grids)?;
    let (bank, _) = MemoryBank::from_pool(Points::new(&pool, d)?, target_size, task_name, 0)?;
    Ok(bank)
}

/// Nearest bank vector to `q` (ties to the lowest index) and its distance.
#[inline]
pub fn nearest(bank: &MemoryBank, q: &[f32]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for i in 0..bank.len() {
        let d = l2(q, bank.vector(i));
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Distance evaluations spent by one `score_grid` call: a nearest-neighbor
/// scan per position plus one scan to find the neighborhood of `m*`.
pub fn score_grid_ops(positions: usize, bank_len: usize) -> u64 {
    (positions as u64 + 1) * bank_len as u64
}

/// Per-position nearest-neighbor distances plus the reweighted image score.
///
/// With `s*` the largest per-position distance, `m_test*` its patch and `m*`
/// that patch's nearest bank vector, the image score is
/// `(1 - exp(s*) / sum_{m in N_b(m*)} exp(|m_test* - m|)) * s*`, where
/// `N_b(m*)` holds the `b` bank vectors nearest to `m*`, `m*` included.
pub fn score_grid(grid: &PatchGrid, bank: &MemoryBank, b_neighbors: usize) -> Result<AnomalyMap> {
    if grid.d != bank.d {
        return Err(Error::arg(format!(
            "grid d={} does not match bank d={}",
            grid.d, bank.d
        )));
    }
    if b_neighbors == 0 || b_neighbors > bank.len() {
        return Err(Error::arg(format!(
            "b_neighbors={b_neighbors} must be in 1..={}",
            bank.len()
        )));
    }
    let nn: Vec<(usize, f64)> = (0..grid.positions())
        .into_par_iter()
        .map(|p| nearest(bank, grid.descriptor(p)))
        .collect();

    let mut star_pos = 0;
    for (p, &(_, d)) in nn.iter().enumerate() {
        if d > nn[star_pos].1 {
            star_pos = p;
        }
    }
    let (m_star, s_star) = nn[star_pos];
    let m_test = grid.descriptor(star_pos);

    // b nearest bank vectors to m*, m* itself first
    let anchor = bank.vector(m_star);
    let mut neigh: Vec<(f64, bool, usize)> = (0..bank.len())
        .map(|i| (l2(anchor, bank.vector(i)), i != m_star, i))
        .collect();
    neigh.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    neigh.truncate(b_neighbors);

    // every distance is >= s*, so exp(d - s*) >= 1 and the sum cannot underflow
    let denom: f64 = neigh
        .iter()
        .map(|&(_, _, i)| (l2(m_test, bank.vector(i)) - s_star).exp())
        .sum();
    let image_score = (1.0 - 1.0 / denom) * s_star;

    Ok(AnomalyMap {
        height: grid.h,
        width: grid.w,
        scores: nn.iter().map(|&(_, d)| d as f32).collect(),
        image_score: image_score.max(0.0) as f32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_from(points: &[f32], h: usize, w: usize, d: usize) -> PatchGrid {
        PatchGrid::new("g", h, w, d, points.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-3.0f32..3.0)).collect()
    }

    #[test]
    fn patches_in_bank_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random(&mut rng, 9 * 4);
        let grid = grid_from(&data, 3, 3, 4);
        let bank = build_bank(std::slice::from_ref(&grid), 9, "t").unwrap();
        let map = score_grid(&grid, &bank, 3).unwrap();
        assert!(map.scores.iter().all(|&s| s == 0.0));
        assert_eq!(map.image_score, 0.0);
    }

    #[test]
    fn single_neighbor_zeroes_image_score() {
        let bank = MemoryBank {
            d: 1,
            vectors: vec![0.0, 5.0],
            task_name: "t".into(),
            gonzalez_seed: 0,
        };
        let grid = grid_from(&[2.0], 1, 1, 1);
        let map = score_grid(&grid, &bank, 1).unwrap();
        assert_eq!(map.scores, vec![2.0]);
        assert_eq!(map.image_score, 0.0);
    }

    #[test]
    fn reweighting_hand_computed() {
        // m_test = 2, m* = 0 (s* = 2); N_2(m*) = {0, 5}; |2 - 5| = 3
        let bank = MemoryBank {
            d: 1,
            vectors: vec![0.0, 5.0, 40.0],
            task_name: "t".into(),
            gonzalez_seed: 0,
        };
        let grid = grid_from(&[2.0], 1, 1, 1);
        let map = score_grid(&grid, &bank, 2).unwrap();
        let expect = (1.0 - 2f64.exp() / (2f64.exp() + 3f64.exp())) * 2.0;
        assert!((map.image_score as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn huge_distances_do_not_overflow() {
        let bank = MemoryBank {
            d: 1,
            vectors: vec![0.0, 1e4],
            task_name: "t".into(),
            gonzalez_seed: 0,
        };
        let grid = grid_from(&[5e3 - 1.0], 1, 1, 1);
        let map = score_grid(&grid, &bank, 2).unwrap();
        assert!(map.image_score.is_finite());
        assert!(map.image_score > 0.0);
    }

    #[test]
    fn errors() {
        let bank = MemoryBank {
            d: 2,
            vectors: vec![0.0, 1.0],
            task_name: "t".into(),
            gonzalez_seed: 0,
        };
        assert!(score_grid(&grid_from(&[1.0], 1, 1, 1), &bank, 1).is_err());
        assert!(score_grid(&grid_from(&[1.0, 2.0], 1, 1, 2), &bank, 2).is_err());
        let g = grid_from(&[0.0; 8], 2, 2, 2);
        assert!(build_bank(&[g], 5, "t").is_err());
    }

    #[test]
    fn pool_size_and_full_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = grid_from(&random(&mut rng, 100 * 3), 10, 10, 3);
        assert_eq!(build_bank(std::slice::from_ref(&g), 10, "t").unwrap().len(), 10);
        let full = build_bank(std::slice::from_ref(&g), 100, "t").unwrap();
        let mut a: Vec<u32> = full.vectors.iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = g.descriptors.iter().map(|v| v.to_bits()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_training_images_same_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = grid_from(&random(&mut rng, 16 * 2), 4, 4, 2);
        let (p1, d) = pool_patches(std::slice::from_ref(&g)).unwrap();
        let (p2, _) = pool_patches(&[g.clone(), g.clone()]).unwrap();
        let c1 = gonzalez(Points::new(&p1, d).unwrap(), 6, 0).unwrap();
        let c2 = gonzalez(Points::new(&p2, d).unwrap(), 6, 0).unwrap();
        assert_eq!(c1.radii, c2.radii);
        let b1 = build_bank(std::slice::from_ref(&g), 6, "t").unwrap();
        let b2 = build_bank(&[g.clone(), g], 6, "t").unwrap();
        assert_eq!(b1.vectors, b2.vectors);
    }

    #[test]
    fn bank_bytes_roundtrip() {
        let bank = MemoryBank {
            d: 3,
            vectors: vec![1.0, -2.0, 3.5, 0.0, 0.25, 9.0],
            task_name: "screw".into(),
            gonzalez_seed: 0,
        };
        let bytes = bank.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"BANK");
        assert_eq!(MemoryBank::from_bytes(&bytes).unwrap(), bank);
        assert!(MemoryBank::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    proptest! {
        #[test]
        fn scores_match_pairwise_oracle_and_are_order_free(
            seed in 0u64..500, n in 2usize..60, d in 1usize..6
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank_data = random(&mut rng, n * d);
            let grid = grid_from(&random(&mut rng, 9 * d), 3, 3, d);
            let bank = MemoryBank { d, vectors: bank_data.clone(), task_name: "t".into(), gonzalez_seed: 0 };
            let map = score_grid(&grid, &bank, 2.min(n)).unwrap();
            for p in 0..9 {
                let mut best = f64::INFINITY;
                for i in 0..n {
                    let mut s = 0.0f64;
                    for k in 0..d {
                        let diff = grid.descriptor(p)[k] as f64 - bank_data[i * d + k] as f64;
                        s += diff * diff;
                    }
                    best = best.min(s.sqrt());
                }
                prop_assert!((map.scores[p] as f64 - best).abs() < 1e-5);
            }
            prop_assert!(map.image_score >= 0.0 && map.image_score <= map.max_score() + 1e-6);

            // reversed bank: per-position scores unchanged
            let mut rev = Vec::with_capacity(bank_data.len());
            for i in (0..n).rev() {
                rev.extend_from_slice(&bank_data[i * d..(i + 1) * d]);
            }
            let rbank = MemoryBank { vectors: rev, ..bank.clone() };
            prop_assert_eq!(&score_grid(&grid, &rbank, 2.min(n)).unwrap().scores, &map.scores);

            // superset bank never increases a score
            let mut sup = bank_data.clone();
            sup.extend(random(&mut rng, d));
            let sbank = MemoryBank { vectors: sup, ..bank };
            let smap = score_grid(&grid, &sbank, 2).unwrap();
            prop_assert!(smap.scores.iter().zip(&map.scores).all(|(a, b)| a <= b));
        }
    }
}
