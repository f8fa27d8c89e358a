use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::resample::{downsample, downsample_backward, safe_size, SubsampleRule};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
    #[serde(skip)]
    cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool {
    pub fn new(window: usize, stride: usize) -> Self {
        MaxPool {
            window,
            stride,
            cache: None,
        }
    }

    pub fn forward(&mut self, input: &FeatureMap) -> Result<FeatureMap> {
        let (b, c, h, w) = input.dim();
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Shape("max pool window and stride must be positive".into()));
        }
        if self.window > h || self.window > w {
            return Err(Error::Shape(format!(
                "max pool window {} larger than input {h}x{w}",
                self.window
            )));
        }
        let oh = (h - self.window) / self.stride + 1;
        let ow = (w - self.window) / self.stride + 1;
        let mut out = Array4::zeros((b, c, oh, ow));
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for n in 0..b {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
                        for dy in 0..self.window {
                            for dx in 0..self.window {
                                let (y, x) = (oy * self.stride + dy, ox * self.stride + dx);
                                let v = input[[n, ch, y, x]];
                                if v > best {
                                    best = v;
                                    at = (y, x);
                                }
                            }
                        }
                        out[[n, ch, oy, ox]] = best;
                        argmax.push(at.0 * w + at.1);
                    }
                }
            }
        }
        self.cache = Some((argmax, (b, c, h, w)));
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &FeatureMap) -> Result<FeatureMap> {
        let (argmax, dims) = self.cache.as_ref().ok_or(Error::NoForwardCache("max_pool"))?;
        let (b, c, h, w) = *dims;
        if upstream.len() != argmax.len() {
            return Err(Error::Shape("max pool upstream does not match forward".into()));
        }
        let mut din = Array4::zeros((b, c, h, w));
        let (_, _, oh, ow) = upstream.dim();
        for n in 0..b {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let flat = ((n * c + ch) * oh + oy) * ow + ox;
                        let pos = argmax[flat];
                        din[[n, ch, pos / w, pos % w]] += upstream[[n, ch, oy, ox]];
                    }
                }
            }
        }
        Ok(din)
    }
}

/// Mean over the spatial dimensions, `[B, C, H, W] -> [B, C, 1, 1]`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GlobalAvgPool {
    #[serde(skip)]
    cache: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, input: &FeatureMap) -> FeatureMap {
        let (b, c, h, w) = input.dim();
        self.cache = Some((h, w));
        let area = (h * w) as f64;
        Array4::from_shape_fn((b, c, 1, 1), |(n, ch, _, _)| {
            input
                .slice(ndarray::s![n, ch, .., ..])
                .iter()
                .sum::<f64>()
                / area
        })
    }

    pub fn backward(&mut self, upstream: &FeatureMap) -> Result<FeatureMap> {
        let (h, w) = self.cache.ok_or(Error::NoForwardCache("global_avg_pool"))?;
        let (b, c, _, _) = upstream.dim();
        let area = (h * w) as f64;
        Ok(Array4::from_shape_fn((b, c, h, w), |(n, ch, _, _)| {
            upstream[[n, ch, 0, 0]] / area
        }))
    }
}

/// Area-averaging subsample whose target size follows the sigma of the
/// preceding N-Jet layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafeSubsample {
    pub rule: SubsampleRule,
    #[serde(skip)]
    cache: Option<(usize, usize)>,
}

impl SafeSubsample {
    pub fn new(rule: SubsampleRule) -> Self {
        SafeSubsample { rule, cache: None }
    }

    pub fn forward(&mut self, input: &FeatureMap, sigma: Option<f64>) -> Result<FeatureMap> {
        let (_, _, h, w) = input.dim();
        self.cache = Some((h, w));
        match sigma {
            Some(s) => downsample(input, safe_size(h, s, self.rule), safe_size(w, s, self.rule)),
            None => Ok(input.clone()),
        }
    }

    pub fn backward(&mut self, upstream: &FeatureMap) -> Result<FeatureMap> {
        let (h, w) = self.cache.ok_or(Error::NoForwardCache("safe_subsample"))?;
        downsample_backward(upstream, h, w)
    }
}
