//! Scale-normalized Gaussian derivative bases.
//!
//! A [`BasisStack`] holds every 2D derivative `G^{i,j}(x, y; sigma)` with
//! `i + j <= order`, sampled on an integer grid of odd size
//! `s = 2 * ceil(k * sigma) + 1`, each multiplied by `sigma^(i+j)`. Alongside
//! the filters it carries their exact partial derivative with respect to
//! `sigma`, taken with the grid held fixed.
//!
//! All basis arithmetic is done in `f64`.

use std::f64::consts::{PI, SQRT_2};

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest filter side accepted by [`sample_basis`].
pub const DEFAULT_SIZE_CAP: usize = 63;

/// Order, scale and spatial extent of a Gaussian derivative basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub order: usize,
    pub sigma: f64,
    pub extent_k: f64,
}

impl BasisSpec {
    pub fn new(order: usize, sigma: f64, extent_k: f64) -> Result<Self> {
        let spec = BasisSpec {
            order,
            sigma,
            extent_k,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidBasis(format!(
                "sigma must be positive and finite, got {}",
                self.sigma
            )));
        }
        if !(self.extent_k.is_finite() && self.extent_k > 0.0) {
            return Err(Error::InvalidBasis(format!(
                "extent k must be positive and finite, got {}",
                self.extent_k
            )));
        }
        Ok(())
    }

    /// Side length of the sampled filters.
    pub fn size(&self) -> usize {
        filter_size(self.sigma, self.extent_k)
    }

    /// Number of basis filters, `(N + 1)(N + 2) / 2`.
    pub fn basis_count(&self) -> usize {
        basis_count(self.order)
    }
}

/// Knobs for [`sample_basis_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    /// Multiply each order-`i` derivative by `sigma^i`.
    pub normalize: bool,
    pub size_cap: usize,
    /// Sample on a grid of this (odd) size instead of the one derived from
    /// sigma. Used to pin the grid across finite-difference stencils.
    pub size_override: Option<usize>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            normalize: true,
            size_cap: DEFAULT_SIZE_CAP,
            size_override: None,
        }
    }
}

impl SampleOptions {
    pub fn pinned(size: usize) -> Self {
        SampleOptions {
            size_override: Some(size),
            ..Default::default()
        }
    }
}

/// Sampled basis filters and their sigma-derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisStack {
    pub spec: BasisSpec,
    /// `[M, s, s]`, indexed `[m, y, x]`.
    pub filters: Array3<f64>,
    /// `[M, s, s]`, d(filters)/d(sigma) at fixed grid positions.
    pub dsigma: Array3<f64>,
    /// Derivative orders `(i, j)` (x then y) of each filter.
    pub index_map: Vec<(usize, usize)>,
}

impl BasisStack {
    pub fn len(&self) -> usize {
        self.index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_map.is_empty()
    }

    pub fn size(&self) -> usize {
        self.filters.shape()[1]
    }

    pub fn filter(&self, m: usize) -> ArrayView2<'_, f64> {
        self.filters.index_axis(ndarray::Axis(0), m)
    }

    pub fn index_of(&self, i: usize, j: usize) -> Option<usize> {
        self.index_map.iter().position(|&p| p == (i, j))
    }

    /// Gram matrix of the flattened filters, `[M, M]`.
    pub fn gram(&self) -> Array2<f64> {
        let m = self.len();
        let flat = self
            .filters
            .view()
            .into_shape_with_order((m, self.size() * self.size()))
            .expect("basis filters are contiguous");
        flat.dot(&flat.t())
    }
}

pub fn basis_count(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Derivative order pairs with `i + j <= order`, ascending in total order,
/// ties broken by ascending `i`.
pub fn index_map(order: usize) -> Vec<(usize, usize)> {
    let mut map = Vec::with_capacity(basis_count(order));
    for total in 0..=order {
        for i in 0..=total {
            map.push((i, total - i));
        }
    }
    map
}

/// Physicists' Hermite polynomial `H_m(x)` by the three-term recursion.
pub fn hermite(m: usize, x: f64) -> f64 {
    let mut prev = 1.0;
    if m == 0 {
        return prev;
    }
    let mut cur = 2.0 * x;
    for i in 2..=m {
        let next = 2.0 * x * cur - 2.0 * (i - 1) as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// `H_0(x) ..= H_max(x)`.
fn hermite_all(max: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(max + 1);
    out.push(1.0);
    if max >= 1 {
        out.push(2.0 * x);
    }
    for i in 2..=max {
        let next = 2.0 * x * out[i - 1] - 2.0 * (i - 1) as f64 * out[i - 2];
        out.push(next);
    }
    out
}

pub fn gaussian(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}

/// `m`-th derivative of the 1D Gaussian with respect to `x`.
pub fn gauss_deriv_1d(m: usize, x: f64, sigma: f64) -> f64 {
    let scale = sigma * SQRT_2;
    (-1.0 / scale).powi(m as i32) * hermite(m, x / scale) * gaussian(x, sigma)
}

/// All derivatives `G^0 ..= G^max` at one point.
fn gauss_derivs_1d(max: usize, x: f64, sigma: f64) -> Vec<f64> {
    let scale = sigma * SQRT_2;
    let g = gaussian(x, sigma);
    let mut coeff = 1.0;
    hermite_all(max, x / scale)
        .into_iter()
        .map(|h| {
            let v = coeff * h * g;
            coeff *= -1.0 / scale;
            v
        })
        .collect()
}

/// `2 * ceil(k * sigma) + 1`.
pub fn filter_size(sigma: f64, extent_k: f64) -> usize {
    let half = (extent_k * sigma).ceil();
    2 * half as usize + 1
}

pub fn sample_basis(spec: &BasisSpec) -> Result<BasisStack> {
    sample_basis_with(spec, &SampleOptions::default())
}

pub fn sample_basis_with(spec: &BasisSpec, opts: &SampleOptions) -> Result<BasisStack> {
    spec.validate()?;
    let size = match opts.size_override {
        Some(s) => {
            if s % 2 == 0 {
                return Err(Error::InvalidBasis(format!(
                    "grid size override must be odd, got {s}"
                )));
            }
            s
        }
        None => {
            let half = (spec.extent_k * spec.sigma).ceil();
            if half > opts.size_cap as f64 {
                return Err(Error::SizeCap {
                    size: usize::MAX,
                    cap: opts.size_cap,
                    sigma: spec.sigma,
                });
            }
            spec.size()
        }
    };
    if size > opts.size_cap {
        return Err(Error::SizeCap {
            size,
            cap: opts.size_cap,
            sigma: spec.sigma,
        });
    }

    let (values, derivs) = sample_1d(spec.order, spec.sigma, size, opts.normalize);
    let index_map = index_map(spec.order);
    let m = index_map.len();
    let mut filters = Array3::zeros((m, size, size));
    let mut dsigma = Array3::zeros((m, size, size));
    for (idx, &(i, j)) in index_map.iter().enumerate() {
        for y in 0..size {
            for x in 0..size {
                filters[[idx, y, x]] = values[i][x] * values[j][y];
                dsigma[[idx, y, x]] = derivs[i][x] * values[j][y] + values[i][x] * derivs[j][y];
            }
        }
    }
    Ok(BasisStack {
        spec: *spec,
        filters,
        dsigma,
        index_map,
    })
}

/// Sampled 1D bases `n_i(x)` for `i <= order` and their sigma-derivatives.
///
/// Uses the diffusion identity `dG^i/dsigma = sigma * G^{i+2}`, so the
/// normalized derivative is `i sigma^{i-1} G^i + sigma^{i+1} G^{i+2}`.
pub(crate) fn sample_1d(
    order: usize,
    sigma: f64,
    size: usize,
    normalize: bool,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let half = (size / 2) as isize;
    let mut values = vec![vec![0.0; size]; order + 1];
    let mut derivs = vec![vec![0.0; size]; order + 1];
    for (col, offset) in (-half..=half).enumerate() {
        let g = gauss_derivs_1d(order + 2, offset as f64, sigma);
        for i in 0..=order {
            if normalize {
                let si = sigma.powi(i as i32);
                values[i][col] = si * g[i];
                let lead = if i == 0 {
                    0.0
                } else {
                    i as f64 * sigma.powi(i as i32 - 1) * g[i]
                };
                derivs[i][col] = lead + si * sigma * g[i + 2];
            } else {
                values[i][col] = g[i];
                derivs[i][col] = sigma * g[i + 2];
            }
        }
    }
    (values, derivs)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Hand-expanded closed forms, independent of the recursion.
    fn hermite_closed(m: usize, x: f64) -> f64 {
        match m {
            0 => 1.0,
            1 => 2.0 * x,
            2 => 4.0 * x * x - 2.0,
            3 => 8.0 * x.powi(3) - 12.0 * x,
            4 => 16.0 * x.powi(4) - 48.0 * x * x + 12.0,
            5 => 32.0 * x.powi(5) - 160.0 * x.powi(3) + 120.0 * x,
            _ => unreachable!(),
        }
    }

    #[test]
    fn hermite_examples() {
        assert_eq!(hermite(0, 7.3), 1.0);
        assert_eq!(hermite(1, 2.0), 4.0);
        assert_eq!(hermite(3, 1.0), -4.0);
    }

    #[test]
    fn hermite_matches_closed_forms() {
        for m in 0..=5 {
            for &x in &[-2.3, -0.7, 0.0, 0.4, 1.9] {
                let a = hermite(m, x);
                let b = hermite_closed(m, x);
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "m={m} x={x}");
            }
        }
    }

    #[test]
    fn gauss_deriv_examples() {
        for &s in &[0.3, 1.0, 4.2] {
            assert_eq!(gauss_deriv_1d(1, 0.0, s), 0.0);
        }
        let inv_sqrt_2pi = 1.0 / (2.0 * PI).sqrt();
        assert!((gauss_deriv_1d(0, 0.0, 1.0) - inv_sqrt_2pi).abs() < 1e-15);
        assert!((gauss_deriv_1d(0, 0.0, 1.0) - 0.3989423).abs() < 1e-7);

        // finite difference of G^0
        let h = 1e-5;
        let fd = (gauss_deriv_1d(0, 1.0 + h, 1.0) - gauss_deriv_1d(0, 1.0 - h, 1.0)) / (2.0 * h);
        let d1 = gauss_deriv_1d(1, 1.0, 1.0);
        assert!((d1 - fd).abs() < 1e-9);
        assert!((d1 - -0.2419707).abs() < 1e-7);
    }

    #[test]
    fn higher_derivatives_match_finite_differences() {
        let h = 1e-4;
        for m in 1..=5 {
            for &x in &[-1.7, 0.3, 2.2] {
                let sigma = 1.3;
                let fd = (gauss_deriv_1d(m - 1, x + h, sigma) - gauss_deriv_1d(m - 1, x - h, sigma))
                    / (2.0 * h);
                let an = gauss_deriv_1d(m, x, sigma);
                assert!((an - fd).abs() < 1e-7 * an.abs().max(1.0), "m={m} x={x}");
            }
        }
    }

    #[test]
    fn filter_size_examples() {
        assert_eq!(filter_size(1.0, 2.0), 5);
        assert_eq!(filter_size(1.5, 2.0), 7);
        assert_eq!(filter_size(0.4, 2.0), 3);
    }

    #[test]
    fn index_map_order() {
        assert_eq!(
            index_map(2),
            vec![(0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0)]
        );
        assert_eq!(index_map(3).len(), 10);
    }

    #[test]
    fn order_three_has_ten_filters() {
        let b = sample_basis(&BasisSpec::new(3, 1.0, 2.0).unwrap()).unwrap();
        assert_eq!(b.len(), 10);
        assert_eq!(b.filters.shape(), &[10, 5, 5]);
    }

    #[test]
    fn order_zero_sum_near_one() {
        // Independent summation over the 9-point grid.
        let oracle: f64 = (-4..=4)
            .map(|x: i32| (-(x * x) as f64 / 2.0).exp() / (2.0 * PI).sqrt())
            .sum::<f64>()
            .powi(2);
        let b = sample_basis(&BasisSpec::new(0, 1.0, 4.0).unwrap()).unwrap();
        let sum = b.filters.sum();
        assert!((sum - oracle).abs() < 1e-14);
        assert!((0.9995..=1.0).contains(&sum), "{sum}");
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(BasisSpec::new(2, 0.0, 2.0).is_err());
        assert!(BasisSpec::new(2, -1.0, 2.0).is_err());
        assert!(BasisSpec::new(2, 1.0, 0.0).is_err());
        assert!(BasisSpec::new(2, f64::NAN, 2.0).is_err());
    }

    #[test]
    fn size_cap_is_an_error() {
        let spec = BasisSpec::new(1, 16.0, 2.0).unwrap();
        match sample_basis(&spec) {
            Err(Error::SizeCap { size: 65, cap: 63, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(sample_basis(&BasisSpec::new(1, 15.5, 2.0).unwrap()).is_ok());
        let huge = BasisSpec::new(1, 1e300, 2.0).unwrap();
        assert!(matches!(sample_basis(&huge), Err(Error::SizeCap { .. })));
        let opts = SampleOptions {
            size_cap: 101,
            ..Default::default()
        };
        assert_eq!(sample_basis_with(&spec, &opts).unwrap().size(), 65);
    }

    #[test]
    fn pinned_grid() {
        let spec = BasisSpec::new(2, 1.0, 2.0).unwrap();
        let b = sample_basis_with(&spec, &SampleOptions::pinned(9)).unwrap();
        assert_eq!(b.size(), 9);
        assert!(sample_basis_with(&spec, &SampleOptions::pinned(8)).is_err());
    }

    #[test]
    fn unnormalized_branch_has_plain_derivatives() {
        let spec = BasisSpec::new(2, 2.0, 2.0).unwrap();
        let opts = SampleOptions {
            normalize: false,
            ..Default::default()
        };
        let b = sample_basis_with(&spec, &opts).unwrap();
        let m = b.index_of(2, 0).unwrap();
        let c = b.size() / 2;
        let expected = gauss_deriv_1d(2, 1.0, 2.0) * gauss_deriv_1d(0, 0.0, 2.0);
        assert!((b.filters[[m, c, c + 1]] - expected).abs() < 1e-15);
    }
}
