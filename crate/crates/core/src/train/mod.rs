//! Momentum-SGD training, evaluation and effective receptive fields.

mod arch;
mod erf;
mod sgd;

pub use arch::{build_model, Arch, ConvKind};
pub use erf::{erf_map, second_moment};
pub use sgd::{sgd_step, Velocity};

use std::path::Path;

use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{softmax_xent, Model};

/// Training hyper-parameters plus the network options that
/// [`build_model`] reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight decay applied to N-Jet mixing coefficients only.
    pub alpha_l2: f64,
    /// Multiplier on the learning rate of log-sigma parameters.
    pub sigma_lr_scale: f64,
    pub seed: u64,
    /// Insert a safe-subsampling layer after each N-Jet block of the deeper
    /// networks.
    pub subsample_r: Option<f64>,
    pub arch: Arch,
    pub conv: ConvKind,
    /// Side of standard convolution filters.
    pub kernel_size: usize,
    /// N-Jet basis order.
    pub order: usize,
    pub init_sigma: f64,
    pub extent_k: f64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 10,
            batch_size: 32,
            alpha_l2: 1e-4,
            sigma_lr_scale: 1.0,
            seed: 0,
            subsample_r: None,
            arch: Arch::Toy,
            conv: ConvKind::NJet,
            kernel_size: 3,
            order: 4,
            init_sigma: 1.0,
            extent_k: 2.0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.alpha_l2.is_finite() && self.alpha_l2 >= 0.0) {
            return bad("alpha_l2 must be finite and non-negative");
        }
        if !(self.sigma_lr_scale.is_finite() && self.sigma_lr_scale >= 0.0) {
            return bad("sigma_lr_scale must be finite and non-negative");
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return bad("kernel_size must be odd");
        }
        if !(self.init_sigma.is_finite() && self.init_sigma > 0.0) {
            return bad("init_sigma must be positive");
        }
        if !(self.extent_k.is_finite() && self.extent_k > 0.0) {
            return bad("extent_k must be positive");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if let Some(r) = self.subsample_r {
            crate::resample::SubsampleRule::new(r)?;
        }
        Ok(())
    }
}

/// One row per epoch and N-Jet layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaRow {
    pub epoch: usize,
    pub layer: usize,
    pub sigma: f64,
    pub filter_size: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SigmaTrace {
    pub rows: Vec<SigmaRow>,
    pub epochs: Vec<EpochStats>,
    /// Mean loss of every mini-batch in order.
    pub batch_losses: Vec<f64>,
}

impl SigmaTrace {
    /// Sigma of every N-Jet layer after the last epoch.
    pub fn final_sigmas(&self) -> Vec<f64> {
        let last = self.rows.iter().map(|r| r.epoch).max().unwrap_or(0);
        self.rows.iter().filter(|r| r.epoch == last).map(|r| r.sigma).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }

    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.epochs)
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn check_classes(model: &Model, ds: &LabeledDataset) -> Result<()> {
    if model.class_count != ds.class_count {
        return Err(Error::Config(format!(
            "model predicts {} classes, dataset has {}",
            model.class_count, ds.class_count
        )));
    }
    Ok(())
}

fn correct(logits: &ndarray::Array2<f64>, labels: &[usize]) -> usize {
    logits
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &label)| argmax(row.iter().copied()) == label)
        .count()
}

/// Index of the first maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Trains `model` for `config.epochs` epochs of seeded, shuffled
/// mini-batches. Accuracy in the trace is measured on `eval` when given,
/// otherwise it is the running training accuracy.
pub fn train(
    mut model: Model,
    dataset: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<(Model, SigmaTrace)> {
    config.validate()?;
    check_classes(&model, dataset)?;
    if let Some(e) = eval {
        check_classes(&model, e)?;
    }
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let pool = thread_pool(config.threads)?;
    let trace = pool.install(|| run_epochs(&mut model, dataset, eval, config))?;
    Ok((model, trace))
}

fn run_epochs(
    model: &mut Model,
    dataset: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<SigmaTrace> {
    // Separate stream from the one that initialized the weights.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut velocity = Velocity::new();
    let mut trace = SigmaTrace::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 1..=config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut loss_sum, mut hits, mut batches) = (0.0, 0, 0);
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = dataset.select(chunk);
            model.zero_grad();
            let logits = model.logits(&x, true)?;
            let (loss, dlogits) = softmax_xent(logits.view(), &y)?;
            hits += correct(&logits, &y);
            let (b, k) = dlogits.dim();
            let up = dlogits.into_shape_with_order((b, k, 1, 1)).expect("logit gradient");
            model.backward(&up, false)?;
            sgd_step(&mut model.params_mut(), &mut velocity, config)?;
            loss_sum += loss;
            batches += 1;
            trace.batch_losses.push(loss);
        }
        for (layer, l) in model.njet_layers().enumerate() {
            let sigma = l.sigma();
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(Error::NonFinite(format!("sigma {sigma} of N-Jet layer {layer}")));
            }
        }
        let accuracy = match eval {
            Some(e) => evaluate_in_pool(model, e)?,
            None => hits as f64 / dataset.len() as f64,
        };
        let loss = loss_sum / batches as f64;
        trace.epochs.push(EpochStats { epoch, loss, accuracy });
        for (layer, l) in model.njet_layers().enumerate() {
            trace.rows.push(SigmaRow {
                epoch,
                layer,
                sigma: l.sigma(),
                filter_size: l.filter_size(),
                loss,
                accuracy,
            });
        }
    }
    Ok(trace)
}

const EVAL_BATCH: usize = 100;

/// Fraction of samples whose arg-max logit equals the label, with batch
/// norm in eval mode.
pub fn evaluate(model: &mut Model, dataset: &LabeledDataset, threads: usize) -> Result<f64> {
    check_classes(model, dataset)?;
    thread_pool(threads)?.install(|| evaluate_in_pool(model, dataset))
}

fn evaluate_in_pool(model: &mut Model, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut hits = 0;
    for start in (0..dataset.len()).step_by(EVAL_BATCH) {
        let part = dataset.slice(start..start + EVAL_BATCH);
        let logits = model.logits(&part.images, false)?;
        hits += correct(&logits, &part.labels);
    }
    Ok(hits as f64 / dataset.len() as f64)
}

/// Class predictions, eval mode.
pub fn predict(model: &mut Model, images: &Array4<f64>) -> Result<Vec<usize>> {
    let logits = model.logits(images, false)?;
    Ok(logits.axis_iter(Axis(0)).map(|r| argmax(r.iter().copied())).collect())
}
