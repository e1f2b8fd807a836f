//! Central-difference verification of analytic gradients.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// One evaluation of the function under test.
#[derive(Debug, Clone)]
pub struct Probe {
    pub value: f64,
    /// Analytic gradients, one per parameter tensor.
    pub grads: Vec<Tensor>,
    /// Distance of the evaluation to the nearest kink (see [`crate::tape::Tape::kink_margin`]).
    pub kink_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, element)` holding the largest error.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rejected_probes: usize,
    pub checked: usize,
    /// Elements whose analytic and numeric values are both within the
    /// finite-difference round-off bound (structurally zero gradients).
    pub below_noise: usize,
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("non-finite {kind} gradient for tensor {tensor}, element {element}")]
    NonFinite { kind: &'static str, tensor: usize, element: usize },
    #[error("no kink-free probe found after {0} attempts")]
    NoSmoothProbe(usize),
    #[error("probe returned {got} gradients for {expected} parameters")]
    Arity { expected: usize, got: usize },
    #[error(transparent)]
    Eval(#[from] TensorError),
}

/// Probes closer than this many steps to a kink are rejected.
pub const KINK_STEPS: f64 = 10.0;
/// Multiple of `ε·|f| / step` below which a central difference is round-off.
pub const ROUNDOFF_FACTOR: f64 = 100.0;
const MAX_PROBES: usize = 50;

/// Max over all parameter elements of `|analytic - numeric| / (|numeric| + 1e-12)`.
///
/// Elements where both derivatives are below the round-off level of the
/// central difference, `ROUNDOFF_FACTOR · ε · max(|f(x±h)|) / h`, count as
/// exact: the quotient above is meaningless when the true derivative is 0.
///
/// If the probe point lies within `KINK_STEPS · step` of a kink it is moved by a
/// small random perturbation and re-evaluated.
pub fn grad_check<F, R>(mut f: F, params: &[Tensor], step: f64, rng: &mut R) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&[Tensor]) -> Result<Probe, TensorError>,
    R: Rng,
{
    let mut point = params.to_vec();
    let mut rejected = 0;
    let probe = loop {
        let probe = f(&point)?;
        if probe.kink_margin >= KINK_STEPS * step {
            break probe;
        }
        rejected += 1;
        if rejected >= MAX_PROBES {
            return Err(GradCheckError::NoSmoothProbe(rejected));
        }
        for t in &mut point {
            for v in t.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += 1e-3 * (1.0 + v.abs()) * z;
            }
        }
    };
    if probe.grads.len() != point.len() {
        return Err(GradCheckError::Arity { expected: point.len(), got: probe.grads.len() });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        rejected_probes: rejected,
        checked: 0,
        below_noise: 0,
    };
    for ti in 0..point.len() {
        for ei in 0..point[ti].len() {
            let analytic = probe.grads[ti].data()[ei];
            if !analytic.is_finite() {
                return Err(GradCheckError::NonFinite { kind: "analytic", tensor: ti, element: ei });
            }
            let orig = point[ti].data()[ei];
            point[ti].data_mut()[ei] = orig + step;
            let up = f(&point)?.value;
            point[ti].data_mut()[ei] = orig - step;
            let down = f(&point)?.value;
            point[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(GradCheckError::NonFinite { kind: "numeric", tensor: ti, element: ei });
            }
            let noise = ROUNDOFF_FACTOR * f64::EPSILON * up.abs().max(down.abs()) / step;
            report.checked += 1;
            if numeric.abs() <= noise && analytic.abs() <= 2.0 * noise {
                report.below_noise += 1;
                continue;
            }
            let err = (analytic - numeric).abs() / (numeric.abs() + 1e-12);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ei);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
