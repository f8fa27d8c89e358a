use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureMap, Param, ParamKind};
use crate::error::{Error, Result};

/// Fully connected layer over the flattened `[C, H, W]` input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`.
    pub weights: Param,
    pub bias: Param,
    #[serde(skip)]
    cache: Option<(Array2<f64>, (usize, usize, usize, usize))>,
}

impl Dense {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (in_features + out_features) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((out_features, in_features), || rng.random_range(-bound..=bound));
        Dense {
            in_features,
            out_features,
            weights: Param::new(w.into_dyn(), ParamKind::Weight),
            bias: Param::new(Array1::zeros(out_features).into_dyn(), ParamKind::Bias),
            cache: None,
        }
    }

    fn w(&self) -> ArrayView2<'_, f64> {
        self.weights.value.view().into_dimensionality().expect("rank 2")
    }

    pub fn forward(&mut self, input: &FeatureMap) -> Result<FeatureMap> {
        let dims = input.dim();
        let (b, c, h, w) = dims;
        if c * h * w != self.in_features {
            return Err(Error::Shape(format!(
                "dense layer expects {} features, input {:?} has {}",
                self.in_features,
                input.shape(),
                c * h * w
            )));
        }
        let flat = input
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, self.in_features))
            .expect("contiguous input");
        let bias: ndarray::ArrayView1<'_, f64> = self.bias.value.view().into_dimensionality().expect("rank 1");
        let out = flat.dot(&self.w().t()) + &bias;
        self.cache = Some((flat, dims));
        Ok(out
            .into_shape_with_order((b, self.out_features, 1, 1))
            .expect("dense output"))
    }

    pub fn backward(&mut self, upstream: &FeatureMap) -> Result<FeatureMap> {
        let (flat, dims) = self.cache.as_ref().ok_or(Error::NoForwardCache("dense"))?;
        let b = dims.0;
        if upstream.shape() != [b, self.out_features, 1, 1] {
            return Err(Error::Shape("dense upstream does not match forward".into()));
        }
        let up = upstream
            .view()
            .into_shape_with_order((b, self.out_features))
            .expect("contiguous upstream");
        self.weights.grad += &up.t().dot(flat).into_dyn();
        self.bias.grad += &up.sum_axis(ndarray::Axis(0)).into_dyn();
        let din = up.dot(&self.w());
        Ok(din.into_shape_with_order(*dims).expect("input shape"))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weights, &mut self.bias]
    }
}
