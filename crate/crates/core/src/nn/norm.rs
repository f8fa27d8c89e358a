use ndarray::{Array1, Array4, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{FeatureMap, Param, ParamKind};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
enum Cache {
    Train { xhat: FeatureMap, inv_std: Vec<f64> },
    Eval { inv_std: Vec<f64> },
}

/// Per-channel batch normalization over `B x H x W` with learnable scale
/// and shift and running statistics for evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub channels: usize,
    pub scale: Param,
    pub shift: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Number of running-statistic updates so far.
    #[serde(default)]
    pub updates: u64,
    #[serde(skip)]
    cache: Option<Cache>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            scale: Param::new(Array1::ones(channels).into_dyn(), ParamKind::Scale),
            shift: Param::new(Array1::zeros(channels).into_dyn(), ParamKind::Shift),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            updates: 0,
            cache: None,
        }
    }

    fn gamma(&self) -> ArrayView1<'_, f64> {
        self.scale.value.view().into_dimensionality().expect("rank 1")
    }

    fn beta(&self) -> ArrayView1<'_, f64> {
        self.shift.value.view().into_dimensionality().expect("rank 1")
    }

    pub fn forward(&mut self, input: &FeatureMap, train: bool) -> Result<FeatureMap> {
        let (b, c, h, w) = input.dim();
        if c != self.channels {
            return Err(Error::Shape(format!(
                "batch norm has {} channels, input has {c}",
                self.channels
            )));
        }
        let count = (b * h * w) as f64;
        let mut out = Array4::zeros(input.raw_dim());
        if train {
            let mut xhat = Array4::zeros(input.raw_dim());
            let mut inv_std = vec![0.0; c];
            // Cumulative average until it would weigh a batch below the
            // momentum, so short runs do not keep the initial statistics.
            let momentum = RUNNING_MOMENTUM.max(1.0 / (self.updates + 1) as f64);
            self.updates += 1;
            for ch in 0..c {
                let plane = input.slice(ndarray::s![.., ch, .., ..]);
                let mean = plane.sum() / count;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
                let is = 1.0 / (var + BN_EPS).sqrt();
                inv_std[ch] = is;
                let (g, bt) = (self.gamma()[ch], self.beta()[ch]);
                xhat.slice_mut(ndarray::s![.., ch, .., ..])
                    .zip_mut_with(&plane, |xh, &v| *xh = (v - mean) * is);
                out.slice_mut(ndarray::s![.., ch, .., ..])
                    .zip_mut_with(&xhat.slice(ndarray::s![.., ch, .., ..]), |o, &xh| *o = g * xh + bt);
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                self.running_mean[ch] += momentum * (mean - self.running_mean[ch]);
                self.running_var[ch] += momentum * (unbiased - self.running_var[ch]);
            }
            self.cache = Some(Cache::Train { xhat, inv_std });
        } else {
            let mut inv_std = vec![0.0; c];
            for ch in 0..c {
                let is = 1.0 / (self.running_var[ch] + BN_EPS).sqrt();
                inv_std[ch] = is;
                let (g, bt, mean) = (self.gamma()[ch], self.beta()[ch], self.running_mean[ch]);
                out.slice_mut(ndarray::s![.., ch, .., ..])
                    .zip_mut_with(&input.slice(ndarray::s![.., ch, .., ..]), |o, &v| {
                        *o = g * (v - mean) * is + bt
                    });
            }
            self.cache = Some(Cache::Eval { inv_std });
        }
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &FeatureMap) -> Result<FeatureMap> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache("batch_norm"))?;
        let (b, c, h, w) = upstream.dim();
        let count = (b * h * w) as f64;
        let gamma = self.gamma().to_owned();
        let mut din = Array4::zeros(upstream.raw_dim());
        let mut dscale = Array1::zeros(c);
        let mut dshift = Array1::zeros(c);
        match cache {
            Cache::Train { xhat, inv_std } => {
                if xhat.shape() != upstream.shape() {
                    return Err(Error::Shape("batch norm upstream does not match forward".into()));
                }
                for ch in 0..c {
                    let dy = upstream.slice(ndarray::s![.., ch, .., ..]);
                    let xh = xhat.slice(ndarray::s![.., ch, .., ..]);
                    let sum_dy = dy.sum();
                    let sum_dy_xh: f64 = dy.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                    dscale[ch] = sum_dy_xh;
                    dshift[ch] = sum_dy;
                    let k = gamma[ch] * inv_std[ch] / count;
                    let mut d = din.slice_mut(ndarray::s![.., ch, .., ..]);
                    ndarray::Zip::from(&mut d).and(&dy).and(&xh).for_each(|o, &g, &x| {
                        *o = k * (count * g - sum_dy - x * sum_dy_xh);
                    });
                }
            }
            Cache::Eval { inv_std } => {
                // Parameter gradients are not needed in eval mode.
                for ch in 0..c {
                    let k = gamma[ch] * inv_std[ch];
                    din.slice_mut(ndarray::s![.., ch, .., ..])
                        .zip_mut_with(&upstream.slice(ndarray::s![.., ch, .., ..]), |o, &g| *o = k * g);
                }
                return Ok(din);
            }
        }
        self.scale.grad += &dscale.into_dyn();
        self.shift.grad += &dshift.into_dyn();
        Ok(din)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.scale, &mut self.shift]
    }
}
