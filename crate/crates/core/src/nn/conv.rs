//! Direct 2D cross-correlation with zero padding, and its exact adjoint.

use ndarray::{Array1, Array4, ArrayView1, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FeatureMap, Param, ParamKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// `(s - 1) / 2` zeros on every side; output keeps the input size.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    pad: usize,
}

impl Geometry {
    fn new(in_h: usize, in_w: usize, size: usize, padding: Padding) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::Shape(format!("filter size {size} is not odd")));
        }
        let pad = match padding {
            Padding::Same => (size - 1) / 2,
            Padding::Valid => 0,
        };
        if in_h + 2 * pad < size || in_w + 2 * pad < size {
            return Err(Error::Shape(format!(
                "filter {size}x{size} larger than padded input {}x{}",
                in_h + 2 * pad,
                in_w + 2 * pad
            )));
        }
        Ok(Geometry {
            in_h,
            in_w,
            out_h: in_h + 2 * pad - size + 1,
            out_w: in_w + 2 * pad - size + 1,
            pad,
        })
    }

    /// Output columns `x` for which `x + kx - pad` is a valid input column.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.out_w);
        let hi = (self.in_w + self.pad).saturating_sub(kx).min(self.out_w);
        (lo, hi.max(lo))
    }

    #[inline]
    fn row_range(&self, ky: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(ky).min(self.out_h);
        let hi = (self.in_h + self.pad).saturating_sub(ky).min(self.out_h);
        (lo, hi.max(lo))
    }
}

fn check_shapes(
    input: &ArrayView4<'_, f64>,
    filters: &ArrayView4<'_, f64>,
    bias: Option<&ArrayView1<'_, f64>>,
) -> Result<()> {
    let (_, c_in, _, _) = input.dim();
    let (c_out, f_in, fh, fw) = filters.dim();
    if f_in != c_in {
        return Err(Error::Shape(format!(
            "input has {c_in} channels, filters expect {f_in}"
        )));
    }
    if fh != fw {
        return Err(Error::Shape(format!("filters must be square, got {fh}x{fw}")));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::Shape(format!(
                "bias has {} entries for {c_out} output channels",
                b.len()
            )));
        }
    }
    Ok(())
}

/// One sample: `[C_in, H, W]` into `[C_out, H', W']`.
fn forward_sample(
    input: ArrayView3<'_, f64>,
    filters: &ArrayView4<'_, f64>,
    bias: &ArrayView1<'_, f64>,
    g: &Geometry,
    out: &mut [f64],
) {
    let (c_out, c_in, s, _) = filters.dim();
    let plane = g.out_h * g.out_w;
    let input = input.as_standard_layout();
    let inp = input.as_slice().expect("standard layout");
    for o in 0..c_out {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for c in 0..c_in {
            let in_plane = &inp[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..s {
                let (y0, y1) = g.row_range(ky);
                for kx in 0..s {
                    let w = filters[[o, c, ky, kx]];
                    if w == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.col_range(kx);
                    let shift = kx as isize - g.pad as isize;
                    // an empty column range can put `start` outside the plane
                    let rows = if x0 < x1 { y0..y1 } else { 0..0 };
                    for y in rows {
                        let iy = y + ky - g.pad;
                        let dst = &mut out_plane[y * g.out_w + x0..y * g.out_w + x1];
                        let start = (iy * g.in_w) as isize + x0 as isize + shift;
                        let src = &in_plane[start as usize..start as usize + (x1 - x0)];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d += w * v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    input: &FeatureMap,
    filters: ArrayView4<'_, f64>,
    bias: ArrayView1<'_, f64>,
    padding: Padding,
) -> Result<FeatureMap> {
    check_shapes(&input.view(), &filters, Some(&bias))?;
    let (batch, _, in_h, in_w) = input.dim();
    let c_out = filters.dim().0;
    let g = Geometry::new(in_h, in_w, filters.dim().2, padding)?;
    let mut out = Array4::zeros((batch, c_out, g.out_h, g.out_w));
    let per_sample = c_out * g.out_h * g.out_w;
    out.as_slice_mut()
        .expect("fresh array is contiguous")
        .par_chunks_mut(per_sample)
        .enumerate()
        .for_each(|(b, chunk)| {
            forward_sample(input.index_axis(Axis(0), b), &filters, &bias, &g, chunk);
        });
    Ok(out)
}

/// Gradients of [`conv2d_forward`].
pub struct ConvGrads {
    pub dinput: Option<FeatureMap>,
    pub dfilters: Array4<f64>,
    pub dbias: Array1<f64>,
}

/// Per-sample work for the backward pass. Filter gradients are returned per
/// sample and summed by the caller in sample order.
fn backward_sample(
    upstream: ArrayView3<'_, f64>,
    input: ArrayView3<'_, f64>,
    filters: &ArrayView4<'_, f64>,
    g: &Geometry,
    dinput: Option<&mut [f64]>,
) -> Vec<f64> {
    let (c_out, c_in, s, _) = filters.dim();
    let up = upstream.as_standard_layout();
    let up = up.as_slice().expect("standard layout");
    let input = input.as_standard_layout();
    let inp = input.as_slice().expect("standard layout");
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut dfilt = vec![0.0; c_out * c_in * s * s];

    for o in 0..c_out {
        let up_plane = &up[o * out_plane..(o + 1) * out_plane];
        for c in 0..c_in {
            let x_plane = &inp[c * in_plane..(c + 1) * in_plane];
            for ky in 0..s {
                let (y0, y1) = g.row_range(ky);
                for kx in 0..s {
                    let (x0, x1) = g.col_range(kx);
                    let shift = kx as isize - g.pad as isize;
                    let mut acc = 0.0;
                    // an empty column range can put `start` outside the plane
                    let rows = if x0 < x1 { y0..y1 } else { 0..0 };
                    for y in rows {
                        let iy = y + ky - g.pad;
                        let u = &up_plane[y * g.out_w + x0..y * g.out_w + x1];
                        let start = ((iy * g.in_w) as isize + x0 as isize + shift) as usize;
                        let v = &x_plane[start..start + (x1 - x0)];
                        acc += u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dfilt[((o * c_in + c) * s + ky) * s + kx] = acc;
                }
            }
        }
    }

    if let Some(din) = dinput {
        din.fill(0.0);
        for c in 0..c_in {
            let d_plane = &mut din[c * in_plane..(c + 1) * in_plane];
            for o in 0..c_out {
                let up_plane = &up[o * out_plane..(o + 1) * out_plane];
                for ky in 0..s {
                    let (y0, y1) = g.row_range(ky);
                    for kx in 0..s {
                        let w = filters[[o, c, ky, kx]];
                        if w == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.col_range(kx);
                        let shift = kx as isize - g.pad as isize;
                        // an empty column range can put `start` outside the plane
                        let rows = if x0 < x1 { y0..y1 } else { 0..0 };
                        for y in rows {
                            let iy = y + ky - g.pad;
                            let u = &up_plane[y * g.out_w + x0..y * g.out_w + x1];
                            let start = ((iy * g.in_w) as isize + x0 as isize + shift) as usize;
                            let d = &mut d_plane[start..start + (x1 - x0)];
                            for (dv, uv) in d.iter_mut().zip(u) {
                                *dv += w * uv;
                            }
                        }
                    }
                }
            }
        }
    }
    dfilt
}

pub fn conv2d_backward(
    upstream: &FeatureMap,
    input: &FeatureMap,
    filters: ArrayView4<'_, f64>,
    padding: Padding,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    check_shapes(&input.view(), &filters, None)?;
    let (batch, c_in, in_h, in_w) = input.dim();
    let (c_out, _, s, _) = filters.dim();
    let g = Geometry::new(in_h, in_w, s, padding)?;
    if upstream.dim() != (batch, c_out, g.out_h, g.out_w) {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match forward output {:?}",
            upstream.shape(),
            [batch, c_out, g.out_h, g.out_w]
        )));
    }

    let mut dinput = need_input_grad.then(|| Array4::zeros((batch, c_in, in_h, in_w)));
    let per_sample_in = c_in * in_h * in_w;
    let partials: Vec<Vec<f64>> = match dinput.as_mut() {
        Some(d) => d
            .as_slice_mut()
            .expect("fresh array is contiguous")
            .par_chunks_mut(per_sample_in)
            .enumerate()
            .map(|(b, chunk)| {
                backward_sample(
                    upstream.index_axis(Axis(0), b),
                    input.index_axis(Axis(0), b),
                    &filters,
                    &g,
                    Some(chunk),
                )
            })
            .collect(),
        None => (0..batch)
            .into_par_iter()
            .map(|b| {
                backward_sample(
                    upstream.index_axis(Axis(0), b),
                    input.index_axis(Axis(0), b),
                    &filters,
                    &g,
                    None,
                )
            })
            .collect(),
    };

    let mut dfilters = Array4::zeros((c_out, c_in, s, s));
    {
        let df = dfilters.as_slice_mut().expect("fresh array is contiguous");
        for p in &partials {
            for (d, v) in df.iter_mut().zip(p) {
                *d += v;
            }
        }
    }
    let mut dbias = Array1::zeros(c_out);
    for b in 0..batch {
        for o in 0..c_out {
            dbias[o] += upstream.index_axis(Axis(0), b).index_axis(Axis(0), o).sum();
        }
    }
    Ok(ConvGrads {
        dinput,
        dfilters,
        dbias,
    })
}

/// Standard pixel-basis convolution layer with a fixed filter size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub padding: Padding,
    pub weights: Param,
    pub bias: Param,
    #[serde(skip)]
    cache: Option<FeatureMap>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        size: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let fan = ((in_channels + out_channels) * size * size) as f64;
        let bound = (6.0 / fan).sqrt();
        let weights = Array4::from_shape_simple_fn((out_channels, in_channels, size, size), || {
            rng.random_range(-bound..=bound)
        });
        Conv2d {
            in_channels,
            out_channels,
            size,
            padding,
            weights: Param::new(weights.into_dyn(), ParamKind::Weight),
            bias: Param::new(Array1::zeros(out_channels).into_dyn(), ParamKind::Bias),
            cache: None,
        }
    }

    fn filters(&self) -> ArrayView4<'_, f64> {
        self.weights
            .value
            .view()
            .into_dimensionality()
            .expect("conv weights are rank 4")
    }

    pub fn forward(&mut self, input: &FeatureMap, _train: bool) -> Result<FeatureMap> {
        let bias = self.bias.value.view().into_dimensionality().expect("rank 1");
        let out = conv2d_forward(input, self.filters(), bias, self.padding)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &FeatureMap, need_input_grad: bool) -> Result<Option<FeatureMap>> {
        let input = self.cache.as_ref().ok_or(Error::NoForwardCache("conv2d"))?;
        let grads = conv2d_backward(upstream, input, self.filters(), self.padding, need_input_grad)?;
        self.weights.grad += &grads.dfilters.into_dyn();
        self.bias.grad += &grads.dbias.into_dyn();
        Ok(grads.dinput)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weights, &mut self.bias]
    }
}
