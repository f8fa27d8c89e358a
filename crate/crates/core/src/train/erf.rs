use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::{FeatureMap, Model};

/// Effective receptive field of the spatial trunk (every layer before the
/// global pool or dense head) at output position `(y, x)`.
///
/// A unit gradient is placed on every channel at that position and
/// back-propagated with batch norm in eval mode. The result is the absolute
/// input gradient averaged over input channels and batch, `[H, W]`.
pub fn erf_map(model: &mut Model, input: &FeatureMap, location: (usize, usize)) -> Result<Array2<f64>> {
    let trunk = model.trunk_len();
    if trunk == 0 {
        return Err(Error::Shape("model has no spatial layers".into()));
    }
    let out = model.forward_range(input, false, trunk)?;
    let (_, _, oh, ow) = out.dim();
    if location.0 >= oh || location.1 >= ow {
        return Err(Error::Shape(format!(
            "location {location:?} outside the {oh}x{ow} output"
        )));
    }
    let mut up = FeatureMap::zeros(out.raw_dim());
    up.slice_mut(ndarray::s![.., .., location.0, location.1]).fill(1.0);
    let grad = model
        .backward_range(&up, true, trunk)?
        .expect("input gradient requested");
    model.zero_grad();
    let (b, c, _, _) = grad.dim();
    Ok(grad
        .mapv(f64::abs)
        .sum_axis(Axis(0))
        .sum_axis(Axis(0))
        / (b * c) as f64)
}

/// Spread `sum w r^2 / sum w` of a non-negative map about its centroid, in
/// squared pixels. Zero for an all-zero map.
pub fn second_moment(map: ArrayView2<'_, f64>) -> f64 {
    let total = map.sum();
    if total <= 0.0 {
        return 0.0;
    }
    let (mut cy, mut cx) = (0.0, 0.0);
    for ((y, x), v) in map.indexed_iter() {
        cy += y as f64 * v;
        cx += x as f64 * v;
    }
    cy /= total;
    cx /= total;
    map.indexed_iter()
        .map(|((y, x), v)| v * ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)))
        .sum::<f64>()
        / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::gaussian;
    use crate::nn::{Layer, NJetConfig, NJetConv};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blur_model(sigma: f64) -> Model {
        let cfg = NJetConfig {
            order: 0,
            init_sigma: sigma,
            ..NJetConfig::default()
        };
        let mut l = NJetConv::new(1, 1, cfg, &mut ChaCha8Rng::seed_from_u64(0));
        l.alphas.value.fill(1.0);
        Model::new("blur", 2, vec![Layer::NJet(l)])
    }

    #[test]
    fn single_blur_layer_gives_its_footprint() {
        let sigma = 1.5;
        let mut m = blur_model(sigma);
        let x = FeatureMap::zeros((1, 1, 21, 21));
        let map = erf_map(&mut m, &x, (10, 8)).unwrap();
        let r = 2 * (2.0 * sigma).ceil() as i64;
        for ((y, x), &v) in map.indexed_iter() {
            let (dy, dx) = (y as i64 - 10, x as i64 - 8);
            let want = if dy.abs() <= r / 2 && dx.abs() <= r / 2 {
                gaussian(dy as f64, sigma) * gaussian(dx as f64, sigma)
            } else {
                0.0
            };
            assert!((v - want).abs() < 1e-14, "({y},{x}) {v} {want}");
        }
    }

    #[test]
    fn zero_alpha_gives_zero_map() {
        let mut m = blur_model(1.0);
        if let Layer::NJet(l) = &mut m.layers[0] {
            l.alphas.value.fill(0.0);
        }
        let map = erf_map(&mut m, &FeatureMap::zeros((1, 1, 9, 9)), (4, 4)).unwrap();
        assert!(map.iter().all(|&v| v == 0.0));
        assert_eq!(second_moment(map.view()), 0.0);
    }

    #[test]
    fn wider_blur_has_larger_moment() {
        let x = FeatureMap::zeros((1, 1, 31, 31));
        let m1 = second_moment(erf_map(&mut blur_model(1.0), &x, (15, 15)).unwrap().view());
        let m2 = second_moment(erf_map(&mut blur_model(2.0), &x, (15, 15)).unwrap().view());
        // Separable footprint truncated at radius ceil(2 sigma).
        let oracle = |sigma: f64| {
            let r = (2.0 * sigma).ceil() as i64;
            let (mut w, mut wd2) = (0.0, 0.0);
            for d in -r..=r {
                let g = gaussian(d as f64, sigma);
                w += g;
                wd2 += g * (d * d) as f64;
            }
            2.0 * wd2 / w
        };
        assert!((m1 - oracle(1.0)).abs() < 1e-12, "{m1}");
        assert!((m2 - oracle(2.0)).abs() < 1e-12, "{m2}");
        assert!(m2 > 3.0 * m1, "{m1} {m2}");
    }

    #[test]
    fn location_out_of_range() {
        let mut m = blur_model(1.0);
        assert!(erf_map(&mut m, &FeatureMap::zeros((1, 1, 5, 5)), (5, 0)).is_err());
    }
}
