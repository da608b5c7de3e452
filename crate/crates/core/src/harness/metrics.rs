//! Threshold-free and best-threshold detection metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::Mask;
use crate::patchcore::AnomalyMap;

fn class_counts(scores: &[f32], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Data {
            index: i,
            value: scores[i],
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Best F1 over thresholds placed at the lowest score and at every midpoint
/// between adjacent distinct scores (`score >= threshold` is positive). Ties
/// go to the lower threshold.
pub fn f1_best_threshold(scores: &[f32], labels: &[bool]) -> Result<(f64, f64)> {
    let (pos, _) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // walk distinct scores upward; before group g everything at or above it is predicted positive
    let mut tp = pos;
    let mut fp = labels.len() - pos;
    let mut best = (-1.0f64, 0.0f64);
    let mut prev: Option<f32> = None;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let threshold = match prev {
            None => s as f64,
            Some(p) => (p as f64 + s as f64) / 2.0,
        };
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + (pos - tp)) as f64;
        if f1 > best.0 {
            best = (f1, threshold);
        }
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        prev = Some(s);
    }
    Ok(best)
}

/// Area under the ROC curve via the rank-sum statistic with average ranks for ties.
pub fn auroc(scores: &[f32], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub pixel_f1: f64,
    pub pixel_auroc: f64,
}

/// Pools every pixel of every map into one score/label vector.
pub fn pixel_metrics(maps: &[AnomalyMap], masks: &[Mask]) -> Result<PixelMetrics> {
    if maps.len() != masks.len() {
        return Err(Error::arg(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    let total: usize = maps.iter().map(|m| m.scores.len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (i, (map, mask)) in maps.iter().zip(masks).enumerate() {
        if (map.height, map.width) != (mask.height, mask.width) || map.scores.len() != map.height * map.width {
            return Err(Error::arg(format!(
                "map {i} is {}x{}, mask is {}x{}",
                map.height, map.width, mask.height, mask.width
            )));
        }
        scores.extend_from_slice(&map.scores);
        labels.extend_from_slice(&mask.bits);
    }
    Ok(PixelMetrics {
        pixel_f1: f1_best_threshold(&scores, &labels)?.0,
        pixel_auroc: auroc(&scores, &labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f1_at(scores: &[f32], labels: &[bool], t: f64) -> f64 {
        let (mut tp, mut fp, mut fneg) = (0, 0, 0);
        for (&s, &l) in scores.iter().zip(labels) {
            match (s as f64 >= t, l) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    }

    #[test]
    fn separated_scores() {
        let labels = [false, false, true, true];
        let (f1, t) = f1_best_threshold(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap();
        assert_eq!(f1, 1.0);
        assert!((t - 0.5).abs() < 1e-7);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 0.0);
    }

    #[test]
    fn interleaved_example() {
        let (f1, t) = f1_best_threshold(&[1.0, 2.0, 3.0, 4.0], &[false, true, false, true]).unwrap();
        assert!((f1 - 0.8).abs() < 1e-12);
        assert!(t > 1.0 && t <= 2.0);
    }

    #[test]
    fn all_equal_scores_predict_everything_positive() {
        let (f1, _) = f1_best_threshold(&[0.5; 4], &[true, false, false, false]).unwrap();
        assert!((f1 - 2.0 / 5.0).abs() < 1e-12);
        assert_eq!(auroc(&[0.5; 4], &[true, false, false, false]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_a_metric_error() {
        assert!(matches!(f1_best_threshold(&[1.0, 2.0], &[true, true]), Err(Error::Metric(_))));
        assert!(matches!(auroc(&[1.0, 2.0], &[false, false]), Err(Error::Metric(_))));
        assert!(auroc(&[1.0], &[true, false]).is_err());
    }

    #[test]
    fn random_auroc_is_near_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let scores: Vec<f32> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        assert!((auroc(&scores, &labels).unwrap() - 0.5).abs() < 0.05);
    }

    fn map(h: usize, w: usize, scores: Vec<f32>) -> AnomalyMap {
        AnomalyMap { height: h, width: w, scores, image_score: 0.0 }
    }

    #[test]
    fn pixel_map_equal_to_mask() {
        let mut mask = Mask::zeros(2, 2);
        mask.set(0, 1, true);
        let m = map(2, 2, vec![0.0, 1.0, 0.0, 0.0]);
        let out = pixel_metrics(&[m, map(2, 2, vec![0.0; 4])], &[mask, Mask::zeros(2, 2)]).unwrap();
        assert_eq!(out.pixel_f1, 1.0);
        assert_eq!(out.pixel_auroc, 1.0);
    }

    #[test]
    fn checker_mask_with_uniform_map() {
        let mut mask = Mask::zeros(2, 2);
        mask.set(0, 0, true);
        mask.set(1, 1, true);
        let out = pixel_metrics(&[map(2, 2, vec![0.3; 4])], &[mask]).unwrap();
        assert!((out.pixel_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_errors() {
        assert!(matches!(
            pixel_metrics(&[map(2, 2, vec![0.3; 4])], &[Mask::zeros(2, 2)]),
            Err(Error::Metric(_))
        ));
        assert!(pixel_metrics(&[map(2, 2, vec![0.3; 4])], &[Mask::zeros(1, 4)]).is_err());
    }

    proptest! {
        #[test]
        fn f1_matches_every_candidate_threshold(
            raw in prop::collection::vec((0u8..20, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f32> = raw.iter().map(|r| r.0 as f32 / 4.0).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let mut distinct: Vec<f32> = scores.clone();
            distinct.sort_by(f32::total_cmp);
            distinct.dedup();
            let mut cands = vec![distinct[0] as f64];
            cands.extend(distinct.windows(2).map(|w| (w[0] as f64 + w[1] as f64) / 2.0));
            let mut best = (-1.0, 0.0);
            for &t in &cands {
                let f = f1_at(&scores, &labels, t);
                if f > best.0 {
                    best = (f, t);
                }
            }
            let got = f1_best_threshold(&scores, &labels).unwrap();
            prop_assert_eq!(got, best);
        }
    }
}
