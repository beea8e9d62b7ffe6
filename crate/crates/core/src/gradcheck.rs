//! Central finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of a gradient check. `worst` names the coordinate with the largest
/// relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordinateGradient>,
    pub tolerance: f64,
}

/// Analytic and central-difference derivative at one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateGradient {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CoordinateGradient {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

impl GradCheckReport {
    pub fn from_pairs(pairs: &[CoordinateGradient], tolerance: f64) -> Self {
        let mut report = Self {
            checked: pairs.len(),
            max_rel_err: 0.0,
            worst: None,
            tolerance,
        };
        for p in pairs {
            let err = p.relative_error();
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(*p);
            }
        }
        report
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every coordinate of `params`. `f` returns the scalar value and its
/// analytic gradient with respect to `params`.
pub fn check_gradients<F>(f: F, params: &Tensor<f64>, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    let all: Vec<usize> = (0..params.len()).collect();
    check_gradients_at(f, params, tol, &all)
}

/// Like [`check_gradients`] but only perturbs the listed coordinates.
pub fn check_gradients_at<F>(
    mut f: F,
    params: &Tensor<f64>,
    tol: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    let (_, analytic) = f(params)?;
    let pairs = gradient_pairs(|p| f(p).map(|(v, _)| v), &analytic, params, coords)?;
    Ok(GradCheckReport::from_pairs(&pairs, tol))
}

/// Central differences of `value` at `coords`, paired with `analytic`. Only
/// the scalar is evaluated at perturbed points.
pub fn gradient_pairs<F>(
    mut value: F,
    analytic: &Tensor<f64>,
    params: &Tensor<f64>,
    coords: &[usize],
) -> Result<Vec<CoordinateGradient>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    params.expect_same_shape(analytic, "check_gradients")?;
    let mut probe = params.clone();
    let mut pairs = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= params.len() {
            return Err(Error::invalid("gradient check coordinate out of range"));
        }
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let plus = value(&probe)?;
        probe[i] = orig - FD_STEP;
        let minus = value(&probe)?;
        probe[i] = orig;
        pairs.push(CoordinateGradient {
            index: i,
            analytic: analytic[i],
            numeric: (plus - minus) / (2.0 * FD_STEP),
        });
    }
    Ok(pairs)
}
