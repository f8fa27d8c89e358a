//! Least-squares projection of image patches onto a Gaussian derivative
//! basis.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::basis::{sample_basis, BasisSpec, BasisStack};
use crate::error::{Error, Result};
use crate::synthesis::synthesize;

/// Gram condition number above which a small ridge is added.
pub const RIDGE_CONDITION: f64 = 1e12;
const RIDGE_FACTOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchFit {
    /// `[C, M]`, one coefficient vector per channel.
    pub alphas: Array2<f64>,
    /// Root-mean-square error over the evaluated pixels of all channels.
    pub residual: f64,
    /// Condition number of the (unregularized) Gram matrix.
    pub condition: f64,
    pub ridge: bool,
}

pub fn fit_patch(
    patch: ArrayView3<'_, f64>,
    sigma: f64,
    order: usize,
    extent_k: f64,
    border_ignore: usize,
) -> Result<PatchFit> {
    let basis = sample_basis(&BasisSpec::new(order, sigma, extent_k)?)?;
    fit_patch_with(patch, &basis, border_ignore)
}

/// Fits against a prebuilt basis, e.g. one sampled with a size override.
pub fn fit_patch_with(patch: ArrayView3<'_, f64>, basis: &BasisStack, border_ignore: usize) -> Result<PatchFit> {
    let (channels, h, w) = patch.dim();
    let size = basis.size();
    if h != size || w != size {
        return Err(Error::Shape(format!(
            "patch is {h}x{w}, basis filters are {size}x{size}"
        )));
    }
    if 2 * border_ignore >= size {
        return Err(Error::Shape(format!(
            "border of {border_ignore} leaves no pixels of a {size}x{size} patch"
        )));
    }
    if patch.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("patch".into()));
    }
    let inner = border_ignore..size - border_ignore;
    let m = basis.len();
    let pixels = inner.len() * inner.len();
    let design = basis
        .filters
        .slice(s![.., inner.clone(), inner.clone()])
        .to_shape((m, pixels))
        .expect("basis reshape")
        .to_owned();
    let gram = design.dot(&design.t());
    let mut g = DMatrix::from_fn(m, m, |r, c| gram[[r, c]]);

    let eig = SymmetricEigen::new(g.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let lmin = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v.abs()));
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    let ridge = condition > RIDGE_CONDITION;
    if ridge {
        let lambda = RIDGE_FACTOR * g.trace() / m as f64;
        for d in 0..m {
            g[(d, d)] += lambda;
        }
    }
    let chol = g
        .cholesky()
        .filter(|_| lmax > 0.0)
        .ok_or(Error::SingularGram { condition })?;

    let mut alphas = Array2::zeros((channels, m));
    let mut sq = 0.0;
    for c in 0..channels {
        let target = patch.slice(s![c, inner.clone(), inner.clone()]);
        let target = target.to_shape(pixels).expect("patch reshape");
        let rhs = design.dot(&target);
        let sol = chol.solve(&DVector::from_iterator(m, rhs.iter().copied()));
        let a = ndarray::Array1::from_iter(sol.iter().copied());
        let recon = a.dot(&design);
        sq += recon.iter().zip(target.iter()).map(|(r, t)| (r - t).powi(2)).sum::<f64>();
        alphas.row_mut(c).assign(&a);
    }
    Ok(PatchFit {
        alphas,
        residual: (sq / (channels * pixels) as f64).sqrt(),
        condition,
        ridge,
    })
}

/// Patch `[C, s, s]` synthesized from per-channel coefficients `[C, M]`.
pub fn reconstruct(alphas: ArrayView2<'_, f64>, sigma: f64, order: usize, extent_k: f64) -> Result<Array3<f64>> {
    let basis = sample_basis(&BasisSpec::new(order, sigma, extent_k)?)?;
    reconstruct_with(alphas, &basis)
}

pub fn reconstruct_with(alphas: ArrayView2<'_, f64>, basis: &BasisStack) -> Result<Array3<f64>> {
    let synth = synthesize(alphas.insert_axis(Axis(1)), basis)?;
    Ok(synth.filters.index_axis_move(Axis(1), 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{sample_basis_with, SampleOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patch(seed: u64, c: usize, s: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, s, s), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn basis_member_gives_one_hot() {
        let basis = sample_basis(&BasisSpec::new(3, 1.5, 2.0).unwrap()).unwrap();
        for m in 0..basis.len() {
            let patch = basis.filter(m).insert_axis(Axis(0)).to_owned();
            let fit = fit_patch(patch.view(), 1.5, 3, 2.0, 0).unwrap();
            assert!(fit.residual < 1e-10);
            for (n, a) in fit.alphas.row(0).iter().enumerate() {
                let want = if n == m { 1.0 } else { 0.0 };
                assert!((a - want).abs() < 1e-8, "m={m} n={n} a={a}");
            }
        }
    }

    #[test]
    fn zero_patch() {
        let fit = fit_patch(Array3::zeros((2, 9, 9)).view(), 2.0, 3, 2.0, 1).unwrap();
        assert!(fit.alphas.iter().all(|&a| a == 0.0));
        assert_eq!(fit.residual, 0.0);
        let r = reconstruct(Array2::zeros((2, 10)).view(), 2.0, 3, 2.0).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    /// Minimizer of the design-matrix residual through an SVD, never
    /// forming the Gram matrix.
    fn dense_oracle(basis: &BasisStack, patch: ArrayView2<'_, f64>, border: usize) -> Vec<f64> {
        let s = basis.size();
        let inner: Vec<(usize, usize)> = (border..s - border)
            .flat_map(|y| (border..s - border).map(move |x| (y, x)))
            .collect();
        let a = DMatrix::from_fn(inner.len(), basis.len(), |r, m| {
            basis.filters[[m, inner[r].0, inner[r].1]]
        });
        let b = DVector::from_fn(inner.len(), |r, _| patch[[inner[r].0, inner[r].1]]);
        let svd = a.svd(true, true);
        svd.solve(&b, 1e-14).unwrap().iter().copied().collect()
    }

    #[test]
    fn matches_dense_oracle() {
        let basis = sample_basis(&BasisSpec::new(3, 2.0, 2.0).unwrap()).unwrap();
        for seed in 0..5 {
            let patch = random_patch(seed, 1, 9);
            for border in [0, 1] {
                let fit = fit_patch(patch.view(), 2.0, 3, 2.0, border).unwrap();
                let want = dense_oracle(&basis, patch.slice(s![0, .., ..]), border);
                for (a, b) in fit.alphas.row(0).iter().zip(&want) {
                    assert!((a - b).abs() < 1e-8, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn residual_non_increasing_in_order() {
        for seed in 0..20 {
            let patch = random_patch(100 + seed, 1, 9);
            let r: Vec<f64> = (0..=4)
                .map(|n| fit_patch(patch.view(), 2.0, n, 2.0, 1).unwrap().residual)
                .collect();
            for w in r.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{r:?}");
            }
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let patch = random_patch(7, 3, 9);
        let fit = fit_patch(patch.view(), 2.0, 2, 2.0, 0).unwrap();
        let once = reconstruct(fit.alphas.view(), 2.0, 2, 2.0).unwrap();
        let again = fit_patch(once.view(), 2.0, 2, 2.0, 0).unwrap();
        let twice = reconstruct(again.alphas.view(), 2.0, 2, 2.0).unwrap();
        assert!(once.iter().zip(twice.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(again.residual < 1e-9);
    }

    #[test]
    fn channels_fit_independently() {
        let patch = random_patch(8, 3, 9);
        let joint = fit_patch(patch.view(), 2.0, 3, 2.0, 1).unwrap();
        for c in 0..3 {
            let single = fit_patch(patch.slice(s![c..c + 1, .., ..]), 2.0, 3, 2.0, 1).unwrap();
            assert_eq!(single.alphas.row(0), joint.alphas.row(c));
        }
    }

    #[test]
    fn smooth_rgb_patch_beats_constant() {
        // 11x11 at sigma 5 with k = 1.
        let patch = Array3::from_shape_fn((3, 11, 11), |(c, y, x)| {
            let (y, x) = (y as f64 / 10.0, x as f64 / 10.0);
            0.4 + 0.2 * c as f64 * x - 0.3 * y * y + 0.1 * (6.0 * x + c as f64).sin()
        });
        let fit = fit_patch(patch.view(), 5.0, 3, 1.0, 1).unwrap();
        let inner = patch.slice(s![.., 1..10, 1..10]);
        let mut sq = 0.0;
        for c in 0..3 {
            let ch = inner.index_axis(Axis(0), c);
            let mean = ch.mean().unwrap();
            sq += ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        }
        let constant = (sq / inner.len() as f64).sqrt();
        assert!(fit.residual < constant, "{} vs {constant}", fit.residual);
    }

    #[test]
    fn size_errors() {
        let patch = random_patch(1, 1, 7);
        assert!(matches!(fit_patch(patch.view(), 2.0, 2, 2.0, 0), Err(Error::Shape(_))));
        assert!(matches!(fit_patch(patch.view(), 1.5, 2, 2.0, 4), Err(Error::Shape(_))));
        let pinned = sample_basis_with(&BasisSpec::new(2, 2.0, 2.0).unwrap(), &SampleOptions::pinned(7)).unwrap();
        assert!(fit_patch_with(patch.view(), &pinned, 0).is_ok());
    }

    #[test]
    fn high_order_large_sigma_uses_ridge() {
        // Order 8 on a 5x5 grid: 45 filters, 25 pixels.
        let basis = sample_basis_with(&BasisSpec::new(8, 4.0, 2.0).unwrap(), &SampleOptions::pinned(5)).unwrap();
        match fit_patch_with(random_patch(3, 1, 5).view(), &basis, 0) {
            Ok(fit) => assert!(fit.ridge && fit.condition > RIDGE_CONDITION),
            Err(Error::SingularGram { condition }) => assert!(condition > RIDGE_CONDITION),
            Err(e) => panic!("{e}"),
        }
    }
}
