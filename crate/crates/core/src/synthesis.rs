//! Effective filters as linear combinations of a basis stack, and the
//! gradients of those filters with respect to the mixing coefficients and
//! the shared scale.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Axis};

use crate::basis::BasisStack;
use crate::error::{Error, Result};

/// Filters `[C_out, C_in, s, s]` synthesized from coefficients
/// `[C_out, C_in, M]`, with their derivative with respect to sigma.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedFilters {
    pub filters: Array4<f64>,
    pub dfilters_dsigma: Array4<f64>,
}

impl SynthesizedFilters {
    pub fn size(&self) -> usize {
        self.filters.shape()[2]
    }
}

fn flat_basis(stack: &Array3<f64>) -> ndarray::ArrayView2<'_, f64> {
    let m = stack.shape()[0];
    let ss = stack.shape()[1] * stack.shape()[2];
    stack
        .view()
        .into_shape_with_order((m, ss))
        .expect("basis stacks are contiguous")
}

pub fn synthesize(alphas: ArrayView3<'_, f64>, basis: &BasisStack) -> Result<SynthesizedFilters> {
    let (c_out, c_in, m) = alphas.dim();
    if m != basis.len() {
        return Err(Error::Shape(format!(
            "alpha has {m} coefficients per filter, basis has {}",
            basis.len()
        )));
    }
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("alpha coefficients".into()));
    }
    let s = basis.size();
    let coeffs = alphas
        .to_shape((c_out * c_in, m))
        .expect("reshape of alpha tensor");
    let filters = coeffs
        .dot(&flat_basis(&basis.filters))
        .into_shape_with_order((c_out, c_in, s, s))
        .expect("synthesized filter shape");
    let dfilters_dsigma = coeffs
        .dot(&flat_basis(&basis.dsigma))
        .into_shape_with_order((c_out, c_in, s, s))
        .expect("synthesized filter shape");
    Ok(SynthesizedFilters {
        filters,
        dfilters_dsigma,
    })
}

/// `[o, c, m] = sum_{y,x} upstream[o, c, y, x] * basis[m, y, x]`.
pub fn grad_alpha(upstream: ArrayView4<'_, f64>, basis: &BasisStack) -> Result<Array3<f64>> {
    let (c_out, c_in, sh, sw) = upstream.dim();
    let s = basis.size();
    if sh != s || sw != s {
        return Err(Error::Shape(format!(
            "upstream filters are {sh}x{sw}, basis is {s}x{s}"
        )));
    }
    let up = upstream
        .to_shape((c_out * c_in, s * s))
        .expect("reshape of upstream gradient");
    Ok(up
        .dot(&flat_basis(&basis.filters).t())
        .into_shape_with_order((c_out, c_in, basis.len()))
        .expect("alpha gradient shape"))
}

/// Full contraction of `upstream` with `dfilters_dsigma`, summed in index
/// order.
pub fn grad_sigma(upstream: ArrayView4<'_, f64>, synthesized: &SynthesizedFilters) -> Result<f64> {
    if upstream.shape() != synthesized.dfilters_dsigma.shape() {
        return Err(Error::Shape(format!(
            "upstream {:?} vs filters {:?}",
            upstream.shape(),
            synthesized.dfilters_dsigma.shape()
        )));
    }
    let mut total = 0.0;
    for (u, d) in upstream
        .axis_iter(Axis(0))
        .zip(synthesized.dfilters_dsigma.axis_iter(Axis(0)))
    {
        for (a, b) in u.iter().zip(d.iter()) {
            total += a * b;
        }
    }
    Ok(total)
}
