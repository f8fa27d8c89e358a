//! Network builders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::basis::DEFAULT_SIZE_CAP;
use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm, Conv2d, Dense, GlobalAvgPool, Layer, MaxPool, Model, NJetConfig, NJetConv, Padding, Relu,
    SafeSubsample,
};
use crate::resample::SubsampleRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// One 16-filter convolution, batch norm, ReLU, a max pool whose window
    /// and stride grow with the input scale, and a dense softmax head.
    Toy,
    TwoLayer,
    FourLayer,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Toy => "toy",
            Arch::TwoLayer => "two_layer",
            Arch::FourLayer => "four_layer",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Arch::Toy),
            "two_layer" => Ok(Arch::TwoLayer),
            "four_layer" => Ok(Arch::FourLayer),
            _ => Err(Error::Config(format!(
                "unknown architecture {s:?} (toy, two_layer, four_layer)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    NJet,
    /// Fixed-size pixel filters of side `kernel_size`.
    Standard,
}

impl std::str::FromStr for ConvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "njet" => Ok(ConvKind::NJet),
            "standard" => Ok(ConvKind::Standard),
            _ => Err(Error::Config(format!("unknown convolution {s:?} (njet, standard)"))),
        }
    }
}

const TOY_FILTERS: usize = 16;
const TWO_LAYER_WIDTHS: [usize; 2] = [16, 32];
const FOUR_LAYER_WIDTHS: [usize; 4] = [16, 32, 32, 64];

/// Builds the network for `config.arch` on inputs of shape `(C, H, W)`.
///
/// `scale` is the resize factor of the data relative to its native size;
/// only the toy network uses it, to set its pooling window to
/// `round(2 * scale)`.
pub fn build_model(
    config: &TrainConfig,
    input: (usize, usize, usize),
    class_count: usize,
    scale: f64,
) -> Result<Model> {
    config.validate()?;
    let (channels, h, w) = input;
    if channels == 0 || h == 0 || w == 0 || class_count < 2 {
        return Err(Error::Config(format!(
            "cannot build a network for input {input:?} with {class_count} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let njet = NJetConfig {
        order: config.order,
        extent_k: config.extent_k,
        init_sigma: config.init_sigma,
        size_cap: DEFAULT_SIZE_CAP,
    };
    let mut conv = |cin: usize, cout: usize| match config.conv {
        ConvKind::NJet => Layer::NJet(NJetConv::new(cin, cout, njet, &mut rng)),
        ConvKind::Standard => Layer::Conv(Conv2d::new(cin, cout, config.kernel_size, Padding::Same, &mut rng)),
    };
    let mut layers = Vec::new();
    let features = match config.arch {
        Arch::Toy => {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(Error::Config(format!("scale must be positive, got {scale}")));
            }
            let window = ((2.0 * scale).round() as usize).max(1);
            if window > h || window > w {
                return Err(Error::Config(format!("pool window {window} exceeds input {h}x{w}")));
            }
            layers.push(conv(channels, TOY_FILTERS));
            layers.push(Layer::BatchNorm(BatchNorm::new(TOY_FILTERS)));
            layers.push(Layer::Relu(Relu::new()));
            layers.push(Layer::MaxPool(MaxPool::new(window, window)));
            let (oh, ow) = ((h - window) / window + 1, (w - window) / window + 1);
            TOY_FILTERS * oh * ow
        }
        Arch::TwoLayer | Arch::FourLayer => {
            let widths: &[usize] = if config.arch == Arch::TwoLayer {
                &TWO_LAYER_WIDTHS
            } else {
                &FOUR_LAYER_WIDTHS
            };
            let mut cin = channels;
            for (i, &cout) in widths.iter().enumerate() {
                layers.push(conv(cin, cout));
                layers.push(Layer::BatchNorm(BatchNorm::new(cout)));
                layers.push(Layer::Relu(Relu::new()));
                if let (ConvKind::NJet, Some(r)) = (config.conv, config.subsample_r) {
                    layers.push(Layer::SafeSubsample(SafeSubsample::new(SubsampleRule::new(r)?)));
                }
                if i + 1 < widths.len() {
                    layers.push(Layer::MaxPool(MaxPool::new(2, 2)));
                }
                cin = cout;
            }
            layers.push(Layer::GlobalAvgPool(GlobalAvgPool::new()));
            cin
        }
    };
    layers.push(Layer::Dense(Dense::new(features, class_count, &mut rng)));
    Ok(Model::new(config.arch.name(), class_count, layers))
}
