use ndarray::{Array1, Array3, ArrayD, ArrayView3, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv2d_backward, conv2d_forward, Padding};
use super::{FeatureMap, Param, ParamKind};
use crate::basis::{sample_basis_with, BasisSpec, BasisStack, SampleOptions, DEFAULT_SIZE_CAP};
use crate::error::{Error, Result};
use crate::synthesis::{grad_alpha, grad_sigma, synthesize, SynthesizedFilters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NJetConfig {
    pub order: usize,
    pub extent_k: f64,
    pub init_sigma: f64,
    pub size_cap: usize,
}

impl Default for NJetConfig {
    fn default() -> Self {
        NJetConfig {
            order: 3,
            extent_k: 2.0,
            init_sigma: 1.0,
            size_cap: DEFAULT_SIZE_CAP,
        }
    }
}

#[derive(Debug, Clone)]
struct Cache {
    input: FeatureMap,
    basis: BasisStack,
    synth: SynthesizedFilters,
}

/// Convolution whose filters are Gaussian-derivative combinations with a
/// single learned scale shared by the whole layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NJetConv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub order: usize,
    pub extent_k: f64,
    pub size_cap: usize,
    /// sigma = exp(log_sigma).
    pub log_sigma: Param,
    /// `[C_out, C_in, M]`.
    pub alphas: Param,
    pub bias: Param,
    /// Holds the grid size fixed regardless of sigma.
    #[serde(skip)]
    pub pinned_size: Option<usize>,
    #[serde(skip)]
    cache: Option<Cache>,
}

impl NJetConv {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, config: NJetConfig, rng: &mut R) -> Self {
        let m = crate::basis::basis_count(config.order);
        let bound = (6.0 / ((in_channels * m + out_channels * m) as f64)).sqrt();
        let alphas = Array3::from_shape_simple_fn((out_channels, in_channels, m), || {
            rng.random_range(-bound..=bound)
        });
        NJetConv {
            in_channels,
            out_channels,
            order: config.order,
            extent_k: config.extent_k,
            size_cap: config.size_cap,
            log_sigma: Param::new(
                ArrayD::from_elem(ndarray::IxDyn(&[1]), config.init_sigma.ln()),
                ParamKind::LogSigma,
            ),
            alphas: Param::new(alphas.into_dyn(), ParamKind::Alpha),
            bias: Param::new(Array1::zeros(out_channels).into_dyn(), ParamKind::Bias),
            pinned_size: None,
            cache: None,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.value[[0]].exp()
    }

    pub fn set_sigma(&mut self, sigma: f64) {
        self.log_sigma.value[[0]] = sigma.ln();
    }

    pub fn basis_spec(&self) -> BasisSpec {
        BasisSpec {
            order: self.order,
            sigma: self.sigma(),
            extent_k: self.extent_k,
        }
    }

    /// Current filter side length.
    pub fn filter_size(&self) -> usize {
        self.pinned_size.unwrap_or_else(|| self.basis_spec().size())
    }

    pub fn alphas(&self) -> ArrayView3<'_, f64> {
        self.alphas
            .value
            .view()
            .into_dimensionality()
            .expect("alphas are rank 3")
    }

    pub fn basis(&self) -> Result<BasisStack> {
        let opts = SampleOptions {
            normalize: true,
            size_cap: self.size_cap,
            size_override: self.pinned_size,
        };
        sample_basis_with(&self.basis_spec(), &opts)
    }

    /// Effective filters for the current parameters.
    pub fn synthesize(&self) -> Result<SynthesizedFilters> {
        synthesize(self.alphas(), &self.basis()?)
    }

    pub fn forward(&mut self, input: &FeatureMap, _train: bool) -> Result<FeatureMap> {
        if input.dim().1 != self.in_channels {
            return Err(Error::Shape(format!(
                "N-Jet layer expects {} input channels, got {}",
                self.in_channels,
                input.dim().1
            )));
        }
        let basis = self.basis()?;
        let synth = synthesize(self.alphas(), &basis)?;
        let bias = self.bias.value.view().into_dimensionality().expect("rank 1");
        let out = conv2d_forward(input, synth.filters.view(), bias, Padding::Same)?;
        self.cache = Some(Cache {
            input: input.clone(),
            basis,
            synth,
        });
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &FeatureMap, need_input_grad: bool) -> Result<Option<FeatureMap>> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache("njet"))?;
        let grads = conv2d_backward(
            upstream,
            &cache.input,
            cache.synth.filters.view(),
            Padding::Same,
            need_input_grad,
        )?;
        let dfilters: ArrayView4<'_, f64> = grads.dfilters.view();
        let d_alpha = grad_alpha(dfilters, &cache.basis)?;
        let d_sigma = grad_sigma(dfilters, &cache.synth)?;
        let sigma = self.sigma();
        self.alphas.grad += &d_alpha.into_dyn();
        self.log_sigma.grad[[0]] += d_sigma * sigma;
        self.bias.grad += &grads.dbias.into_dyn();
        Ok(grads.dinput)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.log_sigma, &mut self.alphas, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(c_in: usize, c_out: usize, order: usize, sigma: f64, k: f64, seed: u64) -> NJetConv {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NJetConv::new(
            c_in,
            c_out,
            NJetConfig {
                order,
                extent_k: k,
                init_sigma: sigma,
                size_cap: DEFAULT_SIZE_CAP,
            },
            &mut rng,
        )
    }

    #[test]
    fn reports_filter_size() {
        let l = layer(1, 1, 3, 1.0, 2.0, 0);
        assert_eq!(l.filter_size(), 5);
        assert!((l.sigma() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn init_bound_and_zero_bias() {
        let l = layer(3, 8, 3, 1.0, 2.0, 1);
        let bound = (6.0f64 / (3.0 * 10.0 + 8.0 * 10.0)).sqrt();
        assert!(l.alphas.value.iter().all(|a| a.abs() <= bound));
        assert!(l.bias.value.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn order_zero_is_a_blur() {
        let mut l = layer(2, 2, 0, 1.5, 4.0, 2);
        l.alphas.value.fill(0.0);
        l.alphas.value[[0, 0, 0]] = 1.0;
        l.alphas.value[[1, 1, 0]] = 1.0;
        let x = random(3, (1, 2, 20, 20));
        let y = l.forward(&x, true).unwrap();
        let b = l.basis().unwrap();
        let g = b.filter(0);
        let s = b.size() as isize;
        let p = s / 2;
        for c in 0..2 {
            for (yy, xx) in [(10isize, 10isize), (0, 0), (19, 5)] {
                let mut acc = 0.0;
                for ky in 0..s {
                    for kx in 0..s {
                        let iy = yy + ky - p;
                        let ix = xx + kx - p;
                        if (0..20).contains(&iy) && (0..20).contains(&ix) {
                            acc += g[[ky as usize, kx as usize]] * x[[0, c, iy as usize, ix as usize]];
                        }
                    }
                }
                assert!((y[[0, c, yy as usize, xx as usize]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn order_zero_preserves_mean() {
        // Below sigma ~ 0.55 the unrenormalized integer-grid samples carry
        // more than 2% extra mass (1 + 2 exp(-2 pi^2 sigma^2) per axis).
        for &sigma in &[0.6, 1.0, 1.5, 2.0] {
            let mut l = layer(1, 1, 0, sigma, 3.0, 3);
            l.alphas.value.fill(1.0);
            // zero margin wider than the filter radius keeps padding out of it
            let mut x = Array4::zeros((1, 1, 40, 40));
            x.slice_mut(ndarray::s![.., .., 8..32, 8..32])
                .assign(&random(4, (1, 1, 24, 24)).mapv(|v: f64| v + 2.0));
            let y = l.forward(&x, true).unwrap();
            let (mx, my) = (x.mean().unwrap(), y.mean().unwrap());
            assert!((my - mx).abs() / mx < 0.02, "sigma {sigma}: {mx} vs {my}");
        }
    }

    #[test]
    fn backward_before_forward() {
        let mut l = layer(1, 1, 1, 1.0, 2.0, 0);
        assert!(matches!(
            l.backward(&Array4::zeros((1, 1, 4, 4)), true),
            Err(Error::NoForwardCache(_))
        ));
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut l = layer(2, 3, 2, 1.2, 2.0, 5);
        let x = random(6, (2, 2, 7, 7));
        l.forward(&x, true).unwrap();
        l.backward(&Array4::zeros((2, 3, 7, 7)), true).unwrap();
        assert!(l.alphas.grad.iter().all(|&v| v == 0.0));
        assert_eq!(l.log_sigma.grad[[0]], 0.0);
        assert!(l.bias.grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_upstream_is_patch_projection() {
        let mut l = layer(2, 1, 2, 1.0, 2.0, 7);
        let x = random(8, (1, 2, 9, 9));
        l.forward(&x, true).unwrap();
        let (py, px) = (4usize, 3usize);
        let mut up = Array4::zeros((1, 1, 9, 9));
        up[[0, 0, py, px]] = 1.0;
        l.backward(&up, false).unwrap();
        let b = l.basis().unwrap();
        let s = b.size();
        let p = s / 2;
        for c in 0..2 {
            for m in 0..b.len() {
                let mut acc = 0.0;
                for ky in 0..s {
                    for kx in 0..s {
                        let iy = (py + ky) as isize - p as isize;
                        let ix = (px + kx) as isize - p as isize;
                        if (0..9).contains(&iy) && (0..9).contains(&ix) {
                            acc += b.filters[[m, ky, kx]] * x[[0, c, iy as usize, ix as usize]];
                        }
                    }
                }
                assert!((l.alphas.grad[[0, c, m]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_sigma_chain_rule() {
        let mut l = layer(1, 2, 3, 1.7, 2.0, 9);
        let x = random(10, (1, 1, 8, 8));
        let up = random(11, (1, 2, 8, 8));
        l.forward(&x, true).unwrap();
        l.backward(&up, false).unwrap();
        let cache = l.cache.as_ref().unwrap();
        let g = conv2d_backward(&up, &x, cache.synth.filters.view(), Padding::Same, false).unwrap();
        let dsigma = grad_sigma(g.dfilters.view(), &cache.synth).unwrap();
        assert!((l.log_sigma.grad[[0]] - dsigma * l.sigma()).abs() < 1e-13);
    }

    fn check_layer_grads(c_in: usize, c_out: usize, hw: (usize, usize), order: usize, sigma: f64, seed: u64) {
        let mut l = layer(c_in, c_out, order, sigma, 2.0, seed);
        let size = l.filter_size();
        l.pinned_size = Some(size);
        let x = random(seed + 1, (2, c_in, hw.0, hw.1)).into_dyn();
        let w = random(seed + 2, (2, c_out, hw.0, hw.1));
        let x4: Array4<f64> = x.clone().into_dimensionality().unwrap();
        l.forward(&x4, true).unwrap();
        let dx = l.backward(&w, true).unwrap().unwrap().into_dyn();

        let base = l.clone();
        let loss_x = |xx: &ArrayD<f64>| {
            let mut m = base.clone();
            let y = m.forward(&xx.clone().into_dimensionality().unwrap(), true).unwrap();
            (&y * &w).sum()
        };
        assert_close(&dx, &numeric_grad(&x, loss_x), 1e-5, "dinput");

        let loss_p = |field: fn(&mut NJetConv) -> &mut Param, v: &ArrayD<f64>| {
            let mut m = base.clone();
            field(&mut m).value = v.clone();
            let y = m.forward(&x4, true).unwrap();
            (&y * &w).sum()
        };
        let fields: [(fn(&mut NJetConv) -> &mut Param, &str); 3] = [
            (|m| &mut m.alphas, "alphas"),
            (|m| &mut m.log_sigma, "log_sigma"),
            (|m| &mut m.bias, "bias"),
        ];
        for (field, name) in fields {
            let mut probe = base.clone();
            let value = field(&mut probe).value.clone();
            let analytic = field(&mut probe).grad.clone();
            let numeric = numeric_grad(&value, |v| loss_p(field, v));
            assert_close(&analytic, &numeric, 1e-5, name);
        }
        assert_eq!(l.filter_size(), size);
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_layer_grads(1, 2, (6, 7), 2, 1.0, 20);
        check_layer_grads(2, 3, (5, 5), 3, 1.3, 30);
        check_layer_grads(3, 1, (8, 6), 1, 0.7, 40);
    }

    #[test]
    fn sum_loss_log_sigma_gradcheck() {
        let mut l = layer(1, 1, 2, 1.0, 2.0, 50);
        l.pinned_size = Some(5);
        let x = random(51, (1, 1, 10, 10));
        let y = l.forward(&x, true).unwrap();
        l.backward(&Array4::ones(y.raw_dim()), false).unwrap();
        let h = 1e-5;
        let at = |ls: f64| {
            let mut m = l.clone();
            m.log_sigma.value[[0]] = ls;
            m.forward(&x, true).unwrap().sum()
        };
        let ls = l.log_sigma.value[[0]];
        let fd = (at(ls + h) - at(ls - h)) / (2.0 * h);
        assert!(rel_err(l.log_sigma.grad[[0]], fd) < 1e-4);
    }
}
