//! Central finite-difference checks of every hand-written backward pass.

use ndarray::{Array, ArrayD, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::basis::{sample_basis_with, BasisSpec, SampleOptions};
use crate::error::Result;
use crate::nn::{
    softmax_xent, BatchNorm, Conv2d, Dense, FeatureMap, GlobalAvgPool, Layer, MaxPool, Model, NJetConfig,
    NJetConv, Padding, Relu, SafeSubsample,
};
use crate::resample::{safe_size, SubsampleRule};
use crate::synthesis::{grad_alpha, grad_sigma, synthesize};

/// `|a - b| / max(|a|, |b|, 1e-3)`. The floor keeps entries whose true
/// gradient is zero from being judged on round-off alone.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central differences of `f` at every entry of `x`, step
/// `1e-6 * max(|x_i|, 1)`.
pub fn numeric_grad(x: &ArrayD<f64>, mut f: impl FnMut(&ArrayD<f64>) -> Result<f64>) -> Result<ArrayD<f64>> {
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for (idx, gi) in g.indexed_iter_mut() {
        let orig = probe[&idx];
        let h = 1e-6 * orig.abs().max(1.0);
        probe[&idx] = orig + h;
        let up = f(&probe)?;
        probe[&idx] = orig - h;
        let down = f(&probe)?;
        probe[&idx] = orig;
        *gi = (up - down) / (2.0 * h);
    }
    Ok(g)
}

pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub layer: String,
    /// Which gradient: `input`, `param0`, ..., `alpha`, `sigma`.
    pub target: String,
    pub shape: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

fn random<D: Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(rng: &mut ChaCha8Rng, shape: Sh) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

fn weighted_sum(model: &Model, x: &FeatureMap, w: &FeatureMap) -> Result<f64> {
    let mut m = model.clone();
    Ok((&m.forward(x, true)? * w).sum())
}

/// Checks the input gradient and every parameter gradient of `model` for
/// the loss `sum(w * model(x))` in training mode.
pub fn check_model(name: &str, model: &Model, x: &FeatureMap, rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let mut m = model.clone();
    let y = m.forward(x, true)?;
    let w: FeatureMap = random(rng, y.raw_dim());
    m.zero_grad();
    let dx = m.backward(&w, true)?.expect("input gradient requested").into_dyn();
    let shape = format!("{:?}", x.shape());
    let mut reports = Vec::new();
    let num = numeric_grad(&x.clone().into_dyn(), |v| {
        weighted_sum(model, &v.clone().into_dimensionality().expect("rank 4"), &w)
    })?;
    reports.push(GradReport {
        layer: name.into(),
        target: "input".into(),
        shape: shape.clone(),
        entries: num.len(),
        max_rel_err: max_rel_err(&dx, &num),
    });
    let analytic: Vec<(String, ArrayD<f64>)> = m
        .params_mut()
        .into_iter()
        .map(|p| (p.kind.name().to_string(), p.grad.clone()))
        .collect();
    for (pi, (kind, grad)) in analytic.into_iter().enumerate() {
        let mut base = model.clone();
        base.zero_grad();
        let value = base.params_mut()[pi].value.clone();
        let num = numeric_grad(&value, |v| {
            let mut probe = base.clone();
            probe.params_mut()[pi].value = v.clone();
            weighted_sum(&probe, x, &w)
        })?;
        reports.push(GradReport {
            layer: name.into(),
            target: kind,
            shape: shape.clone(),
            entries: num.len(),
            max_rel_err: max_rel_err(&grad, &num),
        });
    }
    Ok(reports)
}

const SHAPES: [(usize, usize, usize, usize); 3] = [(2, 2, 7, 7), (1, 3, 6, 9), (3, 1, 8, 5)];

/// Finite-difference checks of every layer kind, the loss, and the
/// synthesis gradients on three seeded shapes each. N-Jet layers keep
/// their grid size pinned across the stencil.
pub fn run_all(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (si, &(b, c, h, w)) in SHAPES.iter().enumerate() {
        let x: FeatureMap = random(&mut rng, (b, c, h, w));
        let cout = 2 + si;
        let sigma = rng.random_range(0.7..1.6);
        let njet_cfg = NJetConfig {
            order: 1 + si,
            init_sigma: sigma,
            ..NJetConfig::default()
        };
        let mut njet = NJetConv::new(c, cout, njet_cfg, &mut rng);
        njet.pinned_size = Some(njet.filter_size());
        njet.bias.value = random(&mut rng, cout).into_dyn();

        let mut conv = Conv2d::new(c, cout, 3, Padding::Same, &mut rng);
        conv.bias.value = random(&mut rng, cout).into_dyn();
        let mut valid = Conv2d::new(c, cout, 3, Padding::Valid, &mut rng);
        valid.bias.value = random(&mut rng, cout).into_dyn();
        let mut bn = BatchNorm::new(c);
        bn.scale.value = random(&mut rng, c).mapv(|v: f64| 1.0 + 0.5 * v).into_dyn();
        bn.shift.value = random(&mut rng, c).into_dyn();
        let mut dense = Dense::new(c * h * w, cout, &mut rng);
        dense.bias.value = random(&mut rng, cout).into_dyn();
        let mut subsample_src = njet.clone();
        subsample_src.set_sigma(stable_subsample_sigma(h, w, 2.0 + si as f64));
        subsample_src.pinned_size = Some(5);

        let cases: Vec<(&str, Vec<Layer>)> = vec![
            ("njet", vec![Layer::NJet(njet)]),
            ("conv_same", vec![Layer::Conv(conv)]),
            ("conv_valid", vec![Layer::Conv(valid)]),
            ("batch_norm", vec![Layer::BatchNorm(bn)]),
            ("relu", vec![Layer::Relu(Relu::new())]),
            ("max_pool", vec![Layer::MaxPool(MaxPool::new(2, 2))]),
            ("global_avg_pool", vec![Layer::GlobalAvgPool(GlobalAvgPool::new())]),
            ("dense", vec![Layer::Dense(dense)]),
            (
                "njet+safe_subsample",
                vec![
                    Layer::NJet(subsample_src),
                    Layer::SafeSubsample(SafeSubsample::new(SubsampleRule::default())),
                ],
            ),
        ];
        for (name, layers) in cases {
            let model = Model::new(name, 2, layers);
            reports.extend(check_model(name, &model, &x, &mut rng)?);
        }
        reports.push(check_loss(&mut rng, b + 1, cout)?);
        reports.extend(check_synthesis(&mut rng, si)?);
    }
    Ok(reports)
}

/// First sigma from `start` whose subsampled size does not change under
/// a finite-difference step, so the output shape stays fixed.
fn stable_subsample_sigma(h: usize, w: usize, start: f64) -> f64 {
    let rule = SubsampleRule::default();
    let stable = |s: f64| {
        safe_size(h, s * 0.999, rule) == safe_size(h, s * 1.001, rule)
            && safe_size(w, s * 0.999, rule) == safe_size(w, s * 1.001, rule)
    };
    (0..100).map(|i| start + 0.05 * i as f64).find(|&s| stable(s)).unwrap_or(start)
}

fn check_loss(rng: &mut ChaCha8Rng, batch: usize, classes: usize) -> Result<GradReport> {
    let logits = random(rng, (batch, classes)).mapv(|v: f64| 3.0 * v);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let (_, d) = softmax_xent(logits.view(), &labels)?;
    let num = numeric_grad(&logits.clone().into_dyn(), |v| {
        let v = v.view().into_dimensionality().expect("rank 2");
        Ok(softmax_xent(v, &labels)?.0)
    })?;
    Ok(GradReport {
        layer: "softmax_xent".into(),
        target: "input".into(),
        shape: format!("{:?}", logits.shape()),
        entries: num.len(),
        max_rel_err: max_rel_err(&d.into_dyn(), &num),
    })
}

/// dF/dalpha and dF/dsigma of `L = sum(U * F(alpha, sigma))`.
fn check_synthesis(rng: &mut ChaCha8Rng, si: usize) -> Result<Vec<GradReport>> {
    let order = 2 + si;
    let sigma = rng.random_range(0.8..2.5);
    let spec = BasisSpec::new(order, sigma, 2.0)?;
    let opts = SampleOptions::pinned(spec.size());
    let basis = sample_basis_with(&spec, &opts)?;
    let (cout, cin) = (1 + si, 2);
    let alphas = random(rng, (cout, cin, basis.len()));
    let s = basis.size();
    let up = random(rng, (cout, cin, s, s));
    let synth = synthesize(alphas.view(), &basis)?;
    let shape = format!("{:?}", alphas.shape());

    let da = grad_alpha(up.view(), &basis)?.into_dyn();
    let num_a = numeric_grad(&alphas.clone().into_dyn(), |a| {
        let a = a.view().into_dimensionality().expect("rank 3");
        Ok((&synthesize(a, &basis)?.filters * &up).sum())
    })?;
    let ds = ArrayD::from_elem(ndarray::IxDyn(&[1]), grad_sigma(up.view(), &synth)?);
    let num_s = numeric_grad(&ArrayD::from_elem(ndarray::IxDyn(&[1]), sigma), |v| {
        let b = sample_basis_with(&BasisSpec::new(order, v[[0]], 2.0)?, &opts)?;
        Ok((&synthesize(alphas.view(), &b)?.filters * &up).sum())
    })?;
    Ok(vec![
        GradReport {
            layer: "synthesis".into(),
            target: "alpha".into(),
            shape: shape.clone(),
            entries: num_a.len(),
            max_rel_err: max_rel_err(&da, &num_a),
        },
        GradReport {
            layer: "synthesis".into(),
            target: "sigma".into(),
            shape,
            entries: 1,
            max_rel_err: max_rel_err(&ds, &num_s),
        },
    ])
}

/// Largest error per layer name, in first-seen order.
pub fn worst_per_layer(reports: &[GradReport]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for r in reports {
        match out.iter_mut().find(|(n, _)| *n == r.layer) {
            Some((_, e)) => *e = e.max(r.max_rel_err),
            None => out.push((r.layer.clone(), r.max_rel_err)),
        }
    }
    out
}
