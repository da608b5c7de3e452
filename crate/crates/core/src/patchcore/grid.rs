use crate::coreset::Points;
use crate::error::{Error, Result};
use crate::fmap::{FeatureMap, LayerStack};

/// Per-position patch descriptors of one image, position-major:
/// descriptor of `(y, x)` is `descriptors[(y * w + x) * d..][..d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub image_id: String,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub descriptors: Vec<f32>,
}

impl PatchGrid {
    pub fn new(
        image_id: impl Into<String>,
        h: usize,
        w: usize,
        d: usize,
        descriptors: Vec<f32>,
    ) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::arg("patch grid dims must be positive"));
        }
        if descriptors.len() != h * w * d {
            return Err(Error::arg(format!(
                "patch grid holds {} values, expected {}x{}x{}",
                descriptors.len(),
                h,
                w,
                d
            )));
        }
        if descriptors.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("patch grid contains non-finite values"));
        }
        Ok(PatchGrid {
            image_id: image_id.into(),
            h,
            w,
            d,
            descriptors,
        })
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn descriptor(&self, pos: usize) -> &[f32] {
        &self.descriptors[pos * self.d..(pos + 1) * self.d]
    }

    pub fn points(&self) -> Points<'_> {
        Points::new(&self.descriptors, self.d).expect("grid invariants hold")
    }
}

/// Source coordinate and blend weight for one output index under
/// half-pixel (align-corners = false) bilinear sampling.
fn sample_axis(out: usize, len_in: usize, len_out: usize) -> (usize, usize, f64) {
    let scale = len_in as f64 / len_out as f64;
    let src = ((out as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len_in - 1);
    let i1 = (i0 + 1).min(len_in - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize of one `ih x iw` plane, align-corners = false.
pub fn resize_bilinear(plane: &[f64], ih: usize, iw: usize, oh: usize, ow: usize) -> Vec<f64> {
    if ih == oh && iw == ow {
        return plane.to_vec();
    }
    let cols: Vec<_> = (0..ow).map(|x| sample_axis(x, iw, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = sample_axis(y, ih, oh);
        for &(x0, x1, fx) in &cols {
            let top = plane[y0 * iw + x0] * (1.0 - fx) + plane[y0 * iw + x1] * fx;
            let bot = plane[y1 * iw + x0] * (1.0 - fx) + plane[y1 * iw + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn layer_planes(map: &FeatureMap, oh: usize, ow: usize) -> impl Iterator<Item = Vec<f64>> + '_ {
    let (h, w) = (map.height, map.width);
    (0..map.channels).map(move |c| {
        let plane: Vec<f64> = map.data[c * h * w..(c + 1) * h * w]
            .iter()
            .map(|&v| v as f64)
            .collect();
        resize_bilinear(&plane, h, w, oh, ow)
    })
}

/// Builds patch descriptors: every layer is bilinearly resized to the first
/// layer's grid, channels are concatenated, then each position is averaged
/// over its `p x p` neighborhood (stride 1). Border windows average only the
/// in-bounds cells.
pub fn build_patch_grid(stack: &LayerStack, pooling_p: usize) -> Result<PatchGrid> {
    if pooling_p == 0 || pooling_p.is_multiple_of(2) {
        return Err(Error::arg(format!("pooling_p={pooling_p} must be odd and >= 1")));
    }
    let first = stack
        .layers
        .first()
        .ok_or_else(|| Error::arg("stack has no layers"))?;
    let (h, w) = (first.height, first.width);
    let d = stack
        .layers
        .iter()
        .try_fold(0usize, |acc, l| acc.checked_add(l.channels))
        .ok_or_else(|| Error::arg("descriptor dimension overflows"))?;
    let total = d
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|&v| v <= isize::MAX as usize / 8)
        .ok_or_else(|| Error::arg(format!("patch grid {d}x{h}x{w} overflows")))?;

    // channel-major cube d x h x w
    let mut cube = Vec::with_capacity(total);
    for layer in &stack.layers {
        for plane in layer_planes(layer, h, w) {
            cube.extend(plane);
        }
    }

    let r = (pooling_p / 2) as isize;
    let mut descriptors = vec![0f32; total];
    for y in 0..h {
        let ys = (y as isize - r).max(0) as usize;
        let ye = ((y as isize + r) as usize).min(h - 1);
        for x in 0..w {
            let xs = (x as isize - r).max(0) as usize;
            let xe = ((x as isize + r) as usize).min(w - 1);
            let count = ((ye - ys + 1) * (xe - xs + 1)) as f64;
            let out = &mut descriptors[(y * w + x) * d..(y * w + x + 1) * d];
            for (c, o) in out.iter_mut().enumerate() {
                let plane = &cube[c * h * w..(c + 1) * h * w];
                let mut acc = 0.0;
                for yy in ys..=ye {
                    for xx in xs..=xe {
                        acc += plane[yy * w + xx];
                    }
                }
                *o = (acc / count) as f32;
            }
        }
    }
    PatchGrid::new(stack.image_id.clone(), h, w, d, descriptors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fmap::Label;

    fn map(c: usize, h: usize, w: usize, data: Vec<f32>) -> FeatureMap {
        FeatureMap::new("x", c, h, w, data, Label::Normal).unwrap()
    }

    #[test]
    fn p1_is_identity() {
        let data: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let stack = LayerStack::new("x", vec![map(3, 2, 2, data.clone())]).unwrap();
        let g = build_patch_grid(&stack, 1).unwrap();
        assert_eq!(g.d, 3);
        for pos in 0..4 {
            let expect: Vec<f32> = (0..3).map(|c| data[c * 4 + pos]).collect();
            assert_eq!(g.descriptor(pos), &expect[..]);
        }
    }

    #[test]
    fn constant_layer_pools_to_constant() {
        let stack = LayerStack::new("x", vec![map(2, 5, 4, vec![3.25; 40])]).unwrap();
        for p in [1, 3, 5, 7] {
            let g = build_patch_grid(&stack, p).unwrap();
            assert!(g.descriptors.iter().all(|&v| v == 3.25), "p={p}");
        }
    }

    #[test]
    fn coarse_layer_broadcasts() {
        let stack = LayerStack::new(
            "x",
            vec![map(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]), map(1, 1, 1, vec![7.0])],
        )
        .unwrap();
        let g = build_patch_grid(&stack, 1).unwrap();
        assert_eq!(g.d, 2);
        assert_eq!(
            g.descriptors,
            vec![1.0, 7.0, 2.0, 7.0, 3.0, 7.0, 4.0, 7.0]
        );
    }

    #[test]
    fn bilinear_half_pixel_weights() {
        // 1x2 -> 1x4: src x = (o + 0.5) / 2 - 0.5 -> -0.25(clamped 0), 0.25, 0.75, 1.25(clamped)
        let out = resize_bilinear(&[0.0, 4.0], 1, 2, 1, 4);
        assert_eq!(out, vec![0.0, 1.0, 3.0, 4.0]);
        // 2x2 -> 1x1 samples the center: mean of the four
        let out = resize_bilinear(&[1.0, 2.0, 3.0, 4.0], 2, 2, 1, 1);
        assert_eq!(out, vec![2.5]);
    }

    #[test]
    fn pooling_averages_in_bounds_cells() {
        let stack = LayerStack::new("x", vec![map(1, 1, 3, vec![0.0, 3.0, 6.0])]).unwrap();
        let g = build_patch_grid(&stack, 3).unwrap();
        assert_eq!(g.descriptors, vec![1.5, 3.0, 4.5]);
    }

    #[test]
    fn even_pooling_rejected() {
        let stack = LayerStack::new("x", vec![map(1, 1, 1, vec![0.0])]).unwrap();
        assert!(build_patch_grid(&stack, 2).is_err());
        assert!(build_patch_grid(&stack, 0).is_err());
    }
}
