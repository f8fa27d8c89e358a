//! Hand-differentiated layers and a sequential model.
//!
//! Every layer caches what its backward pass needs during `forward`, and
//! `backward` accumulates parameter gradients into [`Param::grad`].

mod activation;
mod checkpoint;
mod conv;
mod dense;
mod loss;
mod njet;
mod norm;
mod pool;

pub use activation::Relu;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvGrads, Padding};
pub use dense::Dense;
pub use loss::softmax_xent;
pub use njet::{NJetConv, NJetConfig};
pub use norm::BatchNorm;
pub use pool::{GlobalAvgPool, MaxPool, SafeSubsample};

use ndarray::{Array2, Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `[batch, channels, height, width]`.
pub type FeatureMap = Array4<f64>;

/// Optimizer treatment of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Gaussian-basis mixing coefficients; the only kind that gets L2 decay.
    Alpha,
    LogSigma,
    Weight,
    Bias,
    Scale,
    Shift,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Alpha => "alpha",
            ParamKind::LogSigma => "log_sigma",
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Scale => "scale",
            ParamKind::Shift => "shift",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub kind: ParamKind,
    pub value: ArrayD<f64>,
    #[serde(skip)]
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>, kind: ParamKind) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { kind, value, grad }
    }

    pub fn zero_grad(&mut self) {
        if self.grad.shape() != self.value.shape() {
            self.grad = ArrayD::zeros(self.value.raw_dim());
        } else {
            self.grad.fill(0.0);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    NJet(NJetConv),
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Relu(Relu),
    MaxPool(MaxPool),
    SafeSubsample(SafeSubsample),
    GlobalAvgPool(GlobalAvgPool),
    Dense(Dense),
}

impl Layer {
    fn name(&self) -> &'static str {
        match self {
            Layer::NJet(_) => "njet",
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu(_) => "relu",
            Layer::MaxPool(_) => "max_pool",
            Layer::SafeSubsample(_) => "safe_subsample",
            Layer::GlobalAvgPool(_) => "global_avg_pool",
            Layer::Dense(_) => "dense",
        }
    }

    /// Whether the layer collapses the spatial layout.
    fn is_head(&self) -> bool {
        matches!(self, Layer::GlobalAvgPool(_) | Layer::Dense(_))
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::NJet(l) => l.params_mut(),
            Layer::Conv(l) => l.params_mut(),
            Layer::BatchNorm(l) => l.params_mut(),
            Layer::Dense(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }
}

/// A feed-forward stack of layers ending in class logits `[B, K, 1, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub arch: String,
    pub class_count: usize,
    pub layers: Vec<Layer>,
}

impl Model {
    pub fn new(arch: impl Into<String>, class_count: usize, layers: Vec<Layer>) -> Self {
        Model {
            arch: arch.into(),
            class_count,
            layers,
        }
    }

    pub fn forward(&mut self, input: &FeatureMap, train: bool) -> Result<FeatureMap> {
        self.forward_range(input, train, self.layers.len())
    }

    /// Runs the first `end` layers.
    pub fn forward_range(&mut self, input: &FeatureMap, train: bool, end: usize) -> Result<FeatureMap> {
        let mut x = input.clone();
        let mut last_sigma = None;
        for layer in &mut self.layers[..end] {
            x = match layer {
                Layer::NJet(l) => {
                    let y = l.forward(&x, train)?;
                    last_sigma = Some(l.sigma());
                    y
                }
                Layer::Conv(l) => l.forward(&x, train)?,
                Layer::BatchNorm(l) => l.forward(&x, train)?,
                Layer::Relu(l) => l.forward(&x),
                Layer::MaxPool(l) => l.forward(&x)?,
                Layer::SafeSubsample(l) => l.forward(&x, last_sigma)?,
                Layer::GlobalAvgPool(l) => l.forward(&x),
                Layer::Dense(l) => l.forward(&x)?,
            };
        }
        Ok(x)
    }

    /// Back-propagates through all layers. Returns the input gradient only
    /// when `need_input_grad` is set.
    pub fn backward(&mut self, upstream: &FeatureMap, need_input_grad: bool) -> Result<Option<FeatureMap>> {
        let end = self.layers.len();
        self.backward_range(upstream, need_input_grad, end)
    }

    /// Back-propagates through the first `end` layers, starting from the
    /// gradient of their output.
    pub fn backward_range(
        &mut self,
        upstream: &FeatureMap,
        need_input_grad: bool,
        end: usize,
    ) -> Result<Option<FeatureMap>> {
        let mut grad = upstream.clone();
        for (idx, layer) in self.layers[..end].iter_mut().enumerate().rev() {
            let need = idx > 0 || need_input_grad;
            let next = match layer {
                Layer::NJet(l) => l.backward(&grad, need)?,
                Layer::Conv(l) => l.backward(&grad, need)?,
                Layer::BatchNorm(l) => Some(l.backward(&grad)?),
                Layer::Relu(l) => Some(l.backward(&grad)?),
                Layer::MaxPool(l) => Some(l.backward(&grad)?),
                Layer::SafeSubsample(l) => Some(l.backward(&grad)?),
                Layer::GlobalAvgPool(l) => Some(l.backward(&grad)?),
                Layer::Dense(l) => Some(l.backward(&grad)?),
            };
            match next {
                Some(g) => grad = g,
                None if idx == 0 => return Ok(None),
                None => return Err(Error::NoForwardCache(layer.name())),
            }
        }
        Ok(Some(grad))
    }

    /// Index one past the last layer that keeps a spatial layout.
    pub fn trunk_len(&self) -> usize {
        self.layers
            .iter()
            .position(Layer::is_head)
            .unwrap_or(self.layers.len())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn njet_layers(&self) -> impl Iterator<Item = &NJetConv> {
        self.layers.iter().filter_map(|l| match l {
            Layer::NJet(n) => Some(n),
            _ => None,
        })
    }

    pub fn njet_layers_mut(&mut self) -> impl Iterator<Item = &mut NJetConv> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::NJet(n) => Some(n),
            _ => None,
        })
    }

    /// Logits as `[B, K]`.
    pub fn logits(&mut self, input: &FeatureMap, train: bool) -> Result<Array2<f64>> {
        let out = self.forward(input, train)?;
        let (b, k, h, w) = out.dim();
        if h != 1 || w != 1 || k != self.class_count {
            return Err(Error::Shape(format!(
                "model output {:?} is not [batch, {}, 1, 1]",
                out.shape(),
                self.class_count
            )));
        }
        Ok(out.into_shape_with_order((b, k)).expect("contiguous logits"))
    }
}
