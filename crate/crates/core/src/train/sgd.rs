use ndarray::ArrayD;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{Param, ParamKind};

/// Momentum buffers, one per parameter tensor, in `Model::params_mut`
/// order.
#[derive(Debug, Clone, Default)]
pub struct Velocity {
    buffers: Vec<ArrayD<f64>>,
}

impl Velocity {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn buffers(&self) -> &[ArrayD<f64>] {
        &self.buffers
    }
}

/// One momentum-SGD update:
///
/// ```text
/// v <- mu v - lr g
/// p <- p + v            (alpha: additionally - lr lambda p)
/// ```
///
/// `lr` is `learning_rate * sigma_lr_scale` for log-sigma parameters.
pub fn sgd_step(params: &mut [&mut Param], velocity: &mut Velocity, config: &TrainConfig) -> Result<()> {
    if velocity.buffers.is_empty() {
        velocity.buffers = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
    }
    if velocity.buffers.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} velocity buffers for {} parameters",
            velocity.buffers.len(),
            params.len()
        )));
    }
    for (idx, (p, v)) in params.iter_mut().zip(&mut velocity.buffers).enumerate() {
        if p.grad.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::Shape(format!("parameter {idx} ({:?}) shape mismatch", p.kind)));
        }
        if let Some(g) = p.grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient {g} in parameter {idx} ({:?})",
                p.kind
            )));
        }
        let lr = match p.kind {
            ParamKind::LogSigma => config.learning_rate * config.sigma_lr_scale,
            _ => config.learning_rate,
        };
        let mu = config.momentum;
        v.zip_mut_with(&p.grad, |v, &g| *v = mu * *v - lr * g);
        if p.kind == ParamKind::Alpha && config.alpha_l2 > 0.0 {
            let decay = config.learning_rate * config.alpha_l2;
            p.value.zip_mut_with(v, |w, &dv| *w += dv - decay * *w);
        } else {
            p.value.zip_mut_with(v, |w, &dv| *w += dv);
        }
    }
    Ok(())
}
