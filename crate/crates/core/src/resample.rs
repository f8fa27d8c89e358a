//! Scale-driven subsampling of feature maps and bilinear image resizing.

use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FeatureMap;

/// Halving rate `r` of the safe-subsampling rule: a map is halved every time
/// sigma grows by `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleRule {
    pub r: f64,
}

impl SubsampleRule {
    pub fn new(r: f64) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::Config(format!("subsample r must be positive, got {r}")));
        }
        Ok(SubsampleRule { r })
    }
}

impl Default for SubsampleRule {
    fn default() -> Self {
        SubsampleRule { r: 4.0 }
    }
}

/// `max(1, round(s * 0.5^(sigma / r)))`.
pub fn safe_size(s: usize, sigma: f64, rule: SubsampleRule) -> usize {
    let scaled = s as f64 * 0.5f64.powf(sigma / rule.r);
    (scaled.round() as usize).max(1)
}

/// Sparse area-averaging weights from `src` samples onto `dst` samples:
/// for each output index, `(first source index, weights)`.
fn area_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = (o + 1) as f64 * ratio;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            let weights = (first..last)
                .map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    overlap / ratio
                })
                .collect();
            (first, weights)
        })
        .collect()
}

/// Area-averaging resample to `target_h x target_w`.
pub fn downsample(map: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    let (b, c, h, w) = map.dim();
    if target_h == 0 || target_w == 0 || target_h > h || target_w > w {
        return Err(Error::Resample(format!(
            "cannot area-downsample {h}x{w} to {target_h}x{target_w}"
        )));
    }
    if (target_h, target_w) == (h, w) {
        return Ok(map.clone());
    }
    let wy = area_weights(h, target_h);
    let wx = area_weights(w, target_w);
    let mut out = Array4::zeros((b, c, target_h, target_w));
    let mut rows = vec![0.0; w];
    for n in 0..b {
        for ch in 0..c {
            let src = map.index_axis(Axis(0), n);
            let src = src.index_axis(Axis(0), ch);
            for (oy, (y0, ky)) in wy.iter().enumerate() {
                rows.fill(0.0);
                for (dy, &k) in ky.iter().enumerate() {
                    for (x, r) in rows.iter_mut().enumerate() {
                        *r += k * src[[y0 + dy, x]];
                    }
                }
                for (ox, (x0, kx)) in wx.iter().enumerate() {
                    out[[n, ch, oy, ox]] = kx.iter().enumerate().map(|(dx, &k)| k * rows[x0 + dx]).sum();
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`downsample`]: spreads `upstream` back onto an `h x w` grid.
pub fn downsample_backward(upstream: &FeatureMap, h: usize, w: usize) -> Result<FeatureMap> {
    let (b, c, th, tw) = upstream.dim();
    if th > h || tw > w || th == 0 || tw == 0 {
        return Err(Error::Resample(format!(
            "upstream {th}x{tw} is not a downsampling of {h}x{w}"
        )));
    }
    if (th, tw) == (h, w) {
        return Ok(upstream.clone());
    }
    let wy = area_weights(h, th);
    let wx = area_weights(w, tw);
    let mut out = Array4::zeros((b, c, h, w));
    for n in 0..b {
        for ch in 0..c {
            for (oy, (y0, ky)) in wy.iter().enumerate() {
                for (ox, (x0, kx)) in wx.iter().enumerate() {
                    let g = upstream[[n, ch, oy, ox]];
                    for (dy, &a) in ky.iter().enumerate() {
                        for (dx, &bw) in kx.iter().enumerate() {
                            out[[n, ch, y0 + dy, x0 + dx]] += g * a * bw;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear resize of a `[C, H, W]` image by `factor`, with half-pixel
/// centre alignment and edge clamping. Output sides are `round(factor * side)`.
pub fn resize_bilinear(image: ArrayView3<'_, f64>, factor: f64) -> Result<Array3<f64>> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::Resample(format!("resize factor must be positive, got {factor}")));
    }
    let (c, h, w) = image.dim();
    let oh = (h as f64 * factor).round() as usize;
    let ow = (w as f64 * factor).round() as usize;
    if oh == 0 || ow == 0 {
        return Err(Error::Resample(format!(
            "resizing {h}x{w} by {factor} gives a degenerate {oh}x{ow} image"
        )));
    }
    if (oh, ow) == (h, w) {
        return Ok(image.to_owned());
    }
    let taps = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = image[[ch, y0, x0]] * (1.0 - fx) + image[[ch, y0, x1]] * fx;
                let bottom = image[[ch, y1, x0]] * (1.0 - fx) + image[[ch, y1, x1]] * fx;
                out[[ch, oy, ox]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn safe_size_examples() {
        let rule = SubsampleRule::new(4.0).unwrap();
        assert_eq!(safe_size(32, 4.0, rule), 16);
        assert_eq!(safe_size(32, 1e-9, rule), 32);
        // 28 / sqrt(2) = 19.799
        assert_eq!(safe_size(28, 2.0, rule), 20);
        assert_eq!(safe_size(3, 40.0, rule), 1);
        assert!(SubsampleRule::new(0.0).is_err());
    }

    #[test]
    fn constant_stays_constant() {
        let m = Array4::from_elem((2, 3, 9, 7), 0.25);
        let d = downsample(&m, 4, 5).unwrap();
        assert_eq!(d.shape(), &[2, 3, 4, 5]);
        assert!(d.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn checkerboard_averages_to_half() {
        let m = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, x)| ((x + y) % 2) as f64);
        let d = downsample(&m, 2, 2).unwrap();
        assert!(d.iter().all(|&v| v == 0.5));
    }

    /// Integrates each output cell's source rectangle by brute-force
    /// overlap of unit pixels.
    fn overlap_oracle(m: &Array4<f64>, th: usize, tw: usize) -> Array4<f64> {
        let (_, _, h, w) = m.dim();
        let (ry, rx) = (h as f64 / th as f64, w as f64 / tw as f64);
        Array4::from_shape_fn((1, 1, th, tw), |(_, _, oy, ox)| {
            let (y0, y1) = (oy as f64 * ry, (oy + 1) as f64 * ry);
            let (x0, x1) = (ox as f64 * rx, (ox + 1) as f64 * rx);
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let oy_ = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                    let ox_ = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                    acc += oy_ * ox_ * m[[0, 0, y, x]];
                }
            }
            acc / (ry * rx)
        })
    }

    #[test]
    fn matches_overlap_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Array::from_shape_simple_fn((1, 1, 6, 6), || rng.random::<f64>());
        let d = downsample(&m, 4, 4).unwrap();
        let o = overlap_oracle(&m, 4, 4);
        for (a, b) in d.iter().zip(o.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_preserved_when_divisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Array::from_shape_simple_fn((1, 2, 12, 8), || rng.random::<f64>());
        let d = downsample(&m, 4, 2).unwrap();
        assert!((d.mean().unwrap() - m.mean().unwrap()).abs() < 1e-14);
    }

    #[test]
    fn upsampling_rejected() {
        assert!(downsample(&Array4::zeros((1, 1, 4, 4)), 5, 4).is_err());
        assert!(downsample(&Array4::zeros((1, 1, 4, 4)), 0, 4).is_err());
    }

    #[test]
    fn backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array::from_shape_simple_fn((2, 2, 11, 9), || rng.random_range(-1.0..1.0));
        let u = Array::from_shape_simple_fn((2, 2, 7, 4), || rng.random_range(-1.0..1.0));
        let lhs = (&downsample(&x, 7, 4).unwrap() * &u).sum();
        let rhs = (&downsample_backward(&u, 11, 9).unwrap() * &x).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn resize_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Array::from_shape_simple_fn((3, 5, 6), || rng.random::<f64>());
        assert_eq!(resize_bilinear(img.view(), 1.0).unwrap(), img);
    }

    #[test]
    fn resize_ramp() {
        let img = Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = resize_bilinear(img.view(), 2.0).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4]);
        for y in 0..4 {
            assert_eq!(out.row_of(y), out.row_of(0));
            for x in 1..4 {
                assert!(out[[0, y, x]] >= out[[0, y, x - 1]]);
            }
        }
        assert_eq!(out[[0, 0, 0]], 0.0);
        assert_eq!(out[[0, 0, 3]], 1.0);
        assert_eq!(out[[0, 0, 1]], 0.25);
    }

    trait RowOf {
        fn row_of(&self, y: usize) -> Vec<f64>;
    }
    impl RowOf for Array3<f64> {
        fn row_of(&self, y: usize) -> Vec<f64> {
            self.index_axis(Axis(0), 0).row(y).to_vec()
        }
    }

    #[test]
    fn resize_delta_mass() {
        let mut img = Array3::zeros((1, 9, 9));
        img[[0, 4, 4]] = 1.0;
        let out = resize_bilinear(img.view(), 4.0).unwrap();
        assert_eq!(out.shape(), &[1, 36, 36]);
        let mass = out.sum();
        assert!((mass / 16.0 - 1.0).abs() < 0.05, "{mass}");
    }

    #[test]
    fn resize_errors() {
        let img = Array3::<f64>::zeros((1, 3, 3));
        assert!(resize_bilinear(img.view(), 0.0).is_err());
        assert!(resize_bilinear(img.view(), 0.1).is_err());
        assert!(resize_bilinear(img.view(), f64::NAN).is_err());
    }
}
