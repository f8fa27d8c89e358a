//! Property tests of the invariants each module promises.

use ndarray::{Array3, Array4};
use njet::basis::{gauss_deriv_1d, sample_basis, sample_basis_with, BasisSpec, SampleOptions};
use njet::data::{make_multiscale, synth_blobs_with, BlobConfig};
use njet::fit::{fit_patch, reconstruct};
use njet::resample::{downsample, safe_size, SubsampleRule};
use njet::synthesis::{grad_alpha, synthesize};
use njet::train::{build_model, train, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random3(seed: u64, shape: (usize, usize, usize)) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

fn random4(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

fn max_abs<'a>(it: impl IntoIterator<Item = &'a f64>) -> f64 {
    it.into_iter().fold(0.0, |a, v| a.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filters_are_outer_products(order in 0usize..6, sigma in 0.3f64..5.0, k in 1.0f64..4.0) {
        let basis = sample_basis(&BasisSpec::new(order, sigma, k).unwrap()).unwrap();
        let half = (basis.size() / 2) as f64;
        let one_d = |m: usize, p: usize| sigma.powi(m as i32) * gauss_deriv_1d(m, p as f64 - half, sigma);
        for (idx, &(i, j)) in basis.index_map.iter().enumerate() {
            let f = basis.filter(idx);
            let scale = max_abs(f.iter()).max(f64::MIN_POSITIVE);
            for ((y, x), &v) in f.indexed_iter() {
                prop_assert!((v - one_d(i, x) * one_d(j, y)).abs() <= 1e-14 * scale);
            }
        }
    }

    #[test]
    fn transposed_orders_are_transposed_filters(order in 0usize..6, sigma in 0.3f64..5.0) {
        let basis = sample_basis(&BasisSpec::new(order, sigma, 2.0).unwrap()).unwrap();
        for (idx, &(i, j)) in basis.index_map.iter().enumerate() {
            let t = basis.index_of(j, i).unwrap();
            let transposed = basis.filter(t).t().to_owned();
            prop_assert_eq!(basis.filter(idx), transposed.view());
        }
    }

    #[test]
    fn dsigma_matches_central_differences(order in 0usize..5, sigma in 0.5f64..4.0, k in 1.5f64..3.0) {
        let spec = BasisSpec::new(order, sigma, k).unwrap();
        let basis = sample_basis(&spec).unwrap();
        let opts = SampleOptions::pinned(basis.size());
        let h = 1e-5;
        let up = sample_basis_with(&BasisSpec { sigma: sigma + h, ..spec }, &opts).unwrap();
        let down = sample_basis_with(&BasisSpec { sigma: sigma - h, ..spec }, &opts).unwrap();
        let numeric = (&up.filters - &down.filters) / (2.0 * h);
        for (&a, &n) in basis.dsigma.iter().zip(numeric.iter()) {
            if a.abs() > 1e-8 {
                prop_assert!((a - n).abs() / a.abs() < 1e-5, "analytic {} numeric {}", a, n);
            }
        }
    }

    #[test]
    fn odd_orders_sum_to_zero(order in 1usize..7, sigma in 0.3f64..6.0, k in 1.0f64..4.0) {
        let basis = sample_basis(&BasisSpec::new(order, sigma, k).unwrap()).unwrap();
        for (idx, &(i, j)) in basis.index_map.iter().enumerate() {
            if i % 2 == 1 || j % 2 == 1 {
                let f = basis.filter(idx);
                let mass: f64 = f.iter().map(|v| v.abs()).sum();
                prop_assert!(f.sum().abs() <= 1e-12 * mass);
            }
        }
    }

    #[test]
    fn synthesis_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, sigma in 0.5f64..3.0) {
        let basis = sample_basis(&BasisSpec::new(3, sigma, 2.0).unwrap()).unwrap();
        let x = random3(seed, (2, 3, basis.len()));
        let y = random3(seed ^ 1, (2, 3, basis.len()));
        let lhs = synthesize((&x * a + &y * b).view(), &basis).unwrap().filters;
        let rhs = synthesize(x.view(), &basis).unwrap().filters * a + synthesize(y.view(), &basis).unwrap().filters * b;
        let scale = max_abs(rhs.iter()).max(1.0);
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((l - r).abs() <= 1e-13 * scale);
        }
    }

    #[test]
    fn grad_alpha_is_the_adjoint(seed in any::<u64>(), sigma in 0.5f64..3.0, order in 0usize..5) {
        let basis = sample_basis(&BasisSpec::new(order, sigma, 2.0).unwrap()).unwrap();
        let s = basis.size();
        let u = random4(seed, (3, 2, s, s));
        let v = random3(seed ^ 7, (3, 2, basis.len()));
        let lhs = (&u * &synthesize(v.view(), &basis).unwrap().filters).sum();
        let rhs = (&grad_alpha(u.view(), &basis).unwrap() * &v).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-12));
    }

    #[test]
    fn safe_size_is_monotone(s in 1usize..200, sigma in 0.01f64..10.0, r in 0.1f64..10.0, ds in 0.0f64..5.0, dr in 0.0f64..5.0) {
        let rule = SubsampleRule::new(r).unwrap();
        let wider = SubsampleRule::new(r + dr).unwrap();
        prop_assert!(safe_size(s, sigma + ds, rule) <= safe_size(s, sigma, rule));
        prop_assert!(safe_size(s, sigma, wider) >= safe_size(s, sigma, rule));
        prop_assert!(safe_size(s, sigma, rule) >= 1);
    }

    #[test]
    fn downsample_keeps_mean_when_divisible(seed in any::<u64>(), th in 1usize..6, tw in 1usize..6, fh in 1usize..4, fw in 1usize..4) {
        let x = random4(seed, (2, 2, th * fh, tw * fw));
        let y = downsample(&x, th, tw).unwrap();
        prop_assert!((x.mean().unwrap() - y.mean().unwrap()).abs() < 1e-13);
    }

    #[test]
    fn residual_never_grows_with_order(seed in any::<u64>(), sigma in 1.0f64..2.5) {
        let size = BasisSpec::new(0, sigma, 2.0).unwrap().size();
        let patch = random3(seed, (1, size, size));
        let mut last = f64::INFINITY;
        for order in 0..=4 {
            let r = fit_patch(patch.view(), sigma, order, 2.0, 1).unwrap().residual;
            prop_assert!(r <= last + 1e-12);
            last = r;
        }
    }

    #[test]
    fn fit_then_reconstruct_is_a_projection(seed in any::<u64>(), order in 0usize..4, sigma in 1.0f64..2.5) {
        let size = BasisSpec::new(order, sigma, 2.0).unwrap().size();
        let patch = random3(seed, (2, size, size));
        let once = reconstruct(fit_patch(patch.view(), sigma, order, 2.0, 0).unwrap().alphas.view(), sigma, order, 2.0).unwrap();
        let twice = reconstruct(fit_patch(once.view(), sigma, order, 2.0, 0).unwrap().alphas.view(), sigma, order, 2.0).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn blob_pixels_stay_in_unit_range(
        seed in any::<u64>(),
        scale in 0.5f64..2.5,
        noise in 0.0f64..1.0,
        background in 0.0f64..1.0,
        amplitude in 0.0f64..2.0,
    ) {
        let cfg = BlobConfig { radius: 1.0, amplitude, background, noise };
        let ds = synth_blobs_with(4, 16, scale, seed, &cfg).unwrap();
        prop_assert!(ds.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn multiscale_commutes_with_slicing(seed in any::<u64>(), factor in 0.5f64..3.0, start in 0usize..6, len in 1usize..6) {
        let ds = synth_blobs_with(12, 16, 1.0, seed, &BlobConfig::noisy()).unwrap();
        let range = start..start + len;
        let a = make_multiscale(&ds, factor).unwrap().slice(range.clone());
        let b = make_multiscale(&ds.slice(range), factor).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn training_losses_repeat_bitwise() {
    let ds = synth_blobs_with(24, 16, 1.0, 3, &BlobConfig::noisy()).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        order: 2,
        learning_rate: 0.003,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let model = build_model(&cfg, ds.image_dims(), 2, 1.0).unwrap();
        train(model, &ds, None, &cfg).unwrap().1.batch_losses
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 3);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
