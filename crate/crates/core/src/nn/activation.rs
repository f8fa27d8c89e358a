use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Relu {
    #[serde(skip)]
    mask: Option<FeatureMap>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, input: &FeatureMap) -> FeatureMap {
        self.mask = Some(input.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        input.mapv(|v| v.max(0.0))
    }

    pub fn backward(&mut self, upstream: &FeatureMap) -> Result<FeatureMap> {
        let mask = self.mask.as_ref().ok_or(Error::NoForwardCache("relu"))?;
        if mask.shape() != upstream.shape() {
            return Err(Error::Shape("relu upstream does not match forward".into()));
        }
        Ok(upstream * mask)
    }
}
