//! Farthest-first (Gonzalez) k-center coresets.
//!
//! The greedy insertion order is kept: every prefix of a coreset built with
//! `k` centers is exactly the coreset that would have been built with the
//! prefix length, so shrinking a bank is a truncation.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many points the farthest-point scan runs serially.
const PAR_THRESHOLD: usize = 4096;

/// A flat row-major set of `dim`-dimensional f32 vectors.
#[derive(Debug, Clone, Copy)]
pub struct Points<'a> {
    data: &'a [f32],
    dim: usize,
}

impl<'a> Points<'a> {
    pub fn new(data: &'a [f32], dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("point dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::arg(format!(
                "{} values do not divide into {dim}-dim points",
                data.len()
            )));
        }
        Ok(Points { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Euclidean distance accumulated in f64.
#[inline]
pub fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderedCoreset {
    /// Source indices in greedy insertion order.
    pub indices: Vec<usize>,
    /// `radii[k - 1]` is the covering radius of the first `k` centers.
    pub radii: Vec<f32>,
    pub source_size: usize,
    pub seed_index: usize,
}

impl OrderedCoreset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Distance evaluations spent building this coreset (one scan per center).
    pub fn distance_ops(&self) -> u64 {
        self.source_size as u64 * self.indices.len() as u64
    }
}

/// Lexicographic max on (distance, lowest index).
#[inline]
fn better(a: (f64, usize), b: (f64, usize)) -> (f64, usize) {
    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

/// Updates `min_dist` against `center` and returns the farthest remaining point.
fn relax(points: Points<'_>, center: &[f32], min_dist: &mut [f64]) -> (f64, usize) {
    let scan = |offset: usize, chunk: &mut [f64]| {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (j, md) in chunk.iter_mut().enumerate() {
            let i = offset + j;
            let d = l2(points.get(i), center);
            if d < *md {
                *md = d;
            }
            best = better(best, (*md, i));
        }
        best
    };
    if min_dist.len() < PAR_THRESHOLD {
        scan(0, min_dist)
    } else {
        let chunk = PAR_THRESHOLD / 4;
        min_dist
            .par_chunks_mut(chunk)
            .enumerate()
            .map(|(c, slice)| scan(c * chunk, slice))
            .reduce(|| (f64::NEG_INFINITY, usize::MAX), better)
    }
}

/// Greedy farthest-first traversal from `seed_index`, selecting `k` centers.
///
/// Ties in the farthest-point choice go to the lowest source index, so the
/// result is independent of how the scan is partitioned across threads.
pub fn gonzalez(points: Points<'_>, k: usize, seed_index: usize) -> Result<OrderedCoreset> {
    let n = points.len();
    if n == 0 {
        return Err(Error::arg("gonzalez on an empty point set"));
    }
    if k == 0 || k > n {
        return Err(Error::arg(format!("k={k} must be in 1..={n}")));
    }
    if seed_index >= n {
        return Err(Error::arg(format!("seed_index {seed_index} out of range for {n} points")));
    }
    let mut min_dist = vec![f64::INFINITY; n];
    let mut indices = Vec::with_capacity(k);
    let mut radii = Vec::with_capacity(k);
    let mut next = seed_index;
    for _ in 0..k {
        indices.push(next);
        // chosen centers never win the scan again
        min_dist[next] = f64::NEG_INFINITY;
        let (radius, far) = relax(points, points.get(next), &mut min_dist);
        radii.push(radius.max(0.0) as f32);
        next = far;
    }
    Ok(OrderedCoreset {
        indices,
        radii,
        source_size: n,
        seed_index,
    })
}

/// Keeps the first `k_new` centers. By the prefix property this equals
/// `gonzalez(points, k_new, seed)` exactly.
pub fn truncate(coreset: &OrderedCoreset, k_new: usize) -> Result<OrderedCoreset> {
    if k_new == 0 || k_new > coreset.len() {
        return Err(Error::arg(format!(
            "k_new={k_new} must be in 1..={}",
            coreset.len()
        )));
    }
    Ok(OrderedCoreset {
        indices: coreset.indices[..k_new].to_vec(),
        radii: coreset.radii[..k_new].to_vec(),
        source_size: coreset.source_size,
        seed_index: coreset.seed_index,
    })
}

/// Covering radius of `centers` over all points: max over points of the
/// min distance to any center.
pub fn covering_radius(points: Points<'_>, centers: &[usize]) -> f64 {
    (0..points.len())
        .map(|i| {
            centers
                .iter()
                .map(|&c| l2(points.get(i), points.get(c)))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

pub const BRUTEFORCE_MAX_POINTS: usize = 14;
pub const BRUTEFORCE_MAX_K: usize = 5;

/// Exact k-center optimum by enumerating every `k`-subset. Oracle-sized
/// instances only.
pub fn optimal_kcenter_bruteforce(points: Points<'_>, k: usize) -> Result<(f64, Vec<usize>)> {
    let n = points.len();
    if n == 0 || k == 0 || k > n {
        return Err(Error::arg(format!("k={k} must be in 1..={n}")));
    }
    if n > BRUTEFORCE_MAX_POINTS || k > BRUTEFORCE_MAX_K {
        return Err(Error::arg(format!(
            "instance too large for enumeration (n={n} > {BRUTEFORCE_MAX_POINTS} or k={k} > {BRUTEFORCE_MAX_K})"
        )));
    }
    let mut subset: Vec<usize> = (0..k).collect();
    let mut best = (f64::INFINITY, subset.clone());
    loop {
        let r = covering_radius(points, &subset);
        if r < best.0 {
            best = (r, subset.clone());
        }
        // next combination in lexicographic order
        let mut i = k;
        while i > 0 && subset[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        subset[i - 1] += 1;
        for j in i..k {
            subset[j] = subset[j - 1] + 1;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> Vec<f32> {
        (0..n).map(|i| i as f32).collect()
    }

    #[test]
    fn two_points() {
        let data = [0.0, 10.0];
        let c = gonzalez(Points::new(&data, 1).unwrap(), 2, 0).unwrap();
        assert_eq!(c.indices, vec![0, 1]);
        assert_eq!(c.radii, vec![10.0, 0.0]);
    }

    #[test]
    fn line_of_ten() {
        let data = line(10);
        let p = Points::new(&data, 1).unwrap();
        let c = gonzalez(p, 2, 0).unwrap();
        assert_eq!(c.indices, vec![0, 9]);
        assert_eq!(c.radii, vec![9.0, 4.0]);
        // brute-force min-over-centers oracle
        assert_eq!(covering_radius(p, &[0]), 9.0);
        assert_eq!(covering_radius(p, &[0, 9]), 4.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // points 1 and 2 are both at distance 1 from the seed
        let data = [0.0, 1.0, -1.0];
        let c = gonzalez(Points::new(&data, 1).unwrap(), 2, 0).unwrap();
        assert_eq!(c.indices, vec![0, 1]);
    }

    #[test]
    fn duplicates_never_repeat_indices() {
        let data = [1.0, 1.0, 1.0, 2.0];
        let c = gonzalez(Points::new(&data, 1).unwrap(), 4, 0).unwrap();
        assert_eq!(c.indices, vec![0, 3, 1, 2]);
        assert_eq!(c.radii, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn full_coverage_radius_zero() {
        let data = line(7);
        let c = gonzalez(Points::new(&data, 1).unwrap(), 7, 3).unwrap();
        assert_eq!(*c.radii.last().unwrap(), 0.0);
        assert_eq!(c.indices[0], 3);
    }

    #[test]
    fn argument_errors() {
        let data = line(3);
        let p = Points::new(&data, 1).unwrap();
        assert!(gonzalez(p, 4, 0).is_err());
        assert!(gonzalez(p, 0, 0).is_err());
        assert!(gonzalez(p, 1, 3).is_err());
        assert!(gonzalez(Points::new(&[], 1).unwrap(), 1, 0).is_err());
        let c = gonzalez(p, 2, 0).unwrap();
        assert!(truncate(&c, 3).is_err());
        assert!(truncate(&c, 0).is_err());
        assert!(Points::new(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn truncate_identity_and_seed() {
        let data = line(9);
        let c = gonzalez(Points::new(&data, 1).unwrap(), 5, 4).unwrap();
        assert_eq!(truncate(&c, 5).unwrap(), c);
        assert_eq!(truncate(&c, 1).unwrap().indices, vec![4]);
    }

    #[test]
    fn bruteforce_small_cases() {
        let data = line(3);
        let p = Points::new(&data, 1).unwrap();
        let (r, subset) = optimal_kcenter_bruteforce(p, 1).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(subset, vec![1]);
        assert_eq!(optimal_kcenter_bruteforce(p, 3).unwrap().0, 0.0);
        let big = line(15);
        assert!(optimal_kcenter_bruteforce(Points::new(&big, 1).unwrap(), 2).is_err());
    }

    #[test]
    fn parallel_scan_matches_serial() {
        // large enough to take the rayon path; duplicates force ties
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data: Vec<f32> = (0..6000 * 3).map(|_| rng.random_range(0..4) as f32).collect();
        data.extend_from_slice(&[0.0; 30]);
        let p = Points::new(&data, 3).unwrap();
        let fast = gonzalez(p, 40, 0).unwrap();
        let mut min_dist = vec![f64::INFINITY; p.len()];
        let mut serial = vec![0usize];
        for _ in 1..40 {
            let c = *serial.last().unwrap();
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for i in 0..p.len() {
                min_dist[i] = min_dist[i].min(l2(p.get(i), p.get(c)));
                best = better(best, (min_dist[i], i));
            }
            serial.push(best.1);
        }
        assert_eq!(fast.indices, serial);
    }

    proptest! {
        #[test]
        fn radii_non_increasing_and_exact(
            seed in 0u64..1000, n in 2usize..60, d in 1usize..6, k in 1usize..20
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let p = Points::new(&data, d).unwrap();
            let k = k.min(n);
            let c = gonzalez(p, k, seed as usize % n).unwrap();
            prop_assert!(c.radii.windows(2).all(|w| w[1] <= w[0]));
            let mut seen = std::collections::HashSet::new();
            prop_assert!(c.indices.iter().all(|i| seen.insert(*i)));
            for m in 1..=k {
                let exact = covering_radius(p, &c.indices[..m]) as f32;
                prop_assert_eq!(c.radii[m - 1], exact);
            }
        }

        #[test]
        fn two_approximation(seed in 0u64..1000, n in 2usize..10, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n * 2).map(|_| rng.random_range(-5.0..5.0)).collect();
            let p = Points::new(&data, 2).unwrap();
            let k = k.min(n);
            let c = gonzalez(p, k, 0).unwrap();
            let (opt, _) = optimal_kcenter_bruteforce(p, k).unwrap();
            prop_assert!(c.radii[k - 1] as f64 <= 2.0 * opt + 1e-6);
        }
    }
}
