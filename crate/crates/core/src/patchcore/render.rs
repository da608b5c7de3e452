use super::grid::resize_bilinear;
use crate::error::{Error, Result};

/// Default smoothing applied to upsampled anomaly maps.
pub const DEFAULT_SIGMA: f32 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f32>,
    pub image_score: f32,
}

impl AnomalyMap {
    pub fn max_score(&self) -> f32 {
        self.scores.iter().copied().fold(0.0, f32::max)
    }
}

/// Half-sample symmetric reflection (`c b a | a b c | c b a`), valid for any offset.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with reflect-padded borders.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * row[reflect(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Upsamples feature-resolution scores to `image_size` and smooths them.
/// The image score is carried over unchanged.
pub fn render_map(
    feature: &AnomalyMap,
    image_size: (usize, usize),
    sigma: f32,
) -> Result<AnomalyMap> {
    let (oh, ow) = image_size;
    if oh == 0 || ow == 0 {
        return Err(Error::arg("render target must be non-empty"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg(format!("sigma={sigma} must be > 0")));
    }
    if feature.scores.len() != feature.height * feature.width || feature.scores.is_empty() {
        return Err(Error::arg("feature map dims do not match its scores"));
    }
    let plane: Vec<f64> = feature.scores.iter().map(|&v| v as f64).collect();
    let up = resize_bilinear(&plane, feature.height, feature.width, oh, ow);
    let blurred = gaussian_blur(&up, oh, ow, sigma as f64);
    Ok(AnomalyMap {
        height: oh,
        width: ow,
        scores: blurred.into_iter().map(|v| v.max(0.0) as f32).collect(),
        image_score: feature.image_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(h: usize, w: usize, scores: Vec<f32>) -> AnomalyMap {
        AnomalyMap {
            height: h,
            width: w,
            scores,
            image_score: 0.5,
        }
    }

    #[test]
    fn constant_stays_constant() {
        let out = render_map(&fmap(3, 3, vec![2.0; 9]), (24, 24), 4.0).unwrap();
        assert!(out.scores.iter().all(|v| (v - 2.0).abs() < 1e-5));
        assert_eq!(out.image_score, 0.5);
    }

    #[test]
    fn kernel_is_normalized_and_sized() {
        let k = gaussian_kernel(4.0);
        assert_eq!(k.len(), 2 * 16 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(gaussian_kernel(0.3).len(), 2 * 2 + 1);
    }

    #[test]
    fn interior_spike_mass_preserved() {
        let n = 64;
        let mut scores = vec![0.0; n * n];
        scores[32 * n + 32] = 1.0;
        let out = render_map(&fmap(n, n, scores), (n, n), 4.0).unwrap();
        let total: f64 = out.scores.iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn isolated_peak_keeps_argmax() {
        let n = 48;
        let mut scores = vec![0.0; n * n];
        scores[20 * n + 27] = 5.0;
        let out = render_map(&fmap(n, n, scores), (n, n), 4.0).unwrap();
        let argmax = out
            .scores
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0;
        assert_eq!(argmax, 20 * n + 27);
    }

    #[test]
    fn reflection_wraps_large_offsets() {
        assert_eq!(reflect(-1, 3), 0);
        assert_eq!(reflect(-3, 3), 2);
        assert_eq!(reflect(3, 3), 2);
        assert_eq!(reflect(7, 3), 1);
        // blur wider than the image still preserves a constant
        let out = gaussian_blur(&[1.0; 4], 2, 2, 4.0);
        assert!(out.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn bad_arguments() {
        assert!(render_map(&fmap(1, 1, vec![1.0]), (0, 4), 4.0).is_err());
        assert!(render_map(&fmap(1, 1, vec![1.0]), (4, 4), 0.0).is_err());
    }
}
