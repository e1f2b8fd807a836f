//! Closed-form p-Wasserstein distance between quantile embeddings.
//!
//! For one-dimensional distributions the p-Wasserstein distance is the `L_p`
//! distance between quantile functions. With piecewise-linear quantile
//! functions on shared breakpoints, each segment contributes
//! `∫ |ā r + b̄|^p dr`, which has the antiderivative
//! `G(r) = (ā r + b̄)|ā r + b̄|^p / (ā (p + 1))`.

use thiserror::Error;

use crate::quantile::{QuantileEmbedding, QuantileVars};
use crate::tape::{Tape, Var};
use crate::tensor::TensorError;

/// Slopes below this magnitude use the constant-integrand limit.
pub const DEGENERATE_SLOPE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("distance order p must be at least 1, got {0}")]
    InvalidOrder(u32),
    #[error("embeddings differ in layout: {0}")]
    Mismatch(String),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistanceConfig {
    p: u32,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        DistanceConfig { p: 1 }
    }
}

impl DistanceConfig {
    pub fn new(p: u32) -> Result<Self, MetricError> {
        if p == 0 {
            return Err(MetricError::InvalidOrder(p));
        }
        Ok(DistanceConfig { p })
    }

    pub fn p(&self) -> u32 {
        self.p
    }
}

/// `G(r) = (ā r + b̄)|ā r + b̄|^p / (ā (p + 1))`.
pub fn antiderivative(abar: f64, bbar: f64, r: f64, p: u32) -> f64 {
    let z = abar * r + bbar;
    z * z.abs().powi(p as i32) / (abar * (p + 1) as f64)
}

/// `∫_lo^hi |abar·r + bbar|^p dr`.
///
/// Equals `G(hi) - G(lo)`. When the integrand keeps its sign on the interval
/// the difference is evaluated through the factored form
/// `(hi - lo) / (p + 1) · Σ_k |z_lo|^(p-k) |z_hi|^k`, which is the same
/// quantity without the cancellation `G` suffers for small `ā`.
pub fn segment_integral(abar: f64, bbar: f64, lo: f64, hi: f64, p: u32) -> f64 {
    let width = hi - lo;
    if abar.abs() < DEGENERATE_SLOPE {
        return bbar.abs().powi(p as i32) * width;
    }
    let (zl, zh) = (abar * lo + bbar, abar * hi + bbar);
    if zl * zh < 0.0 {
        return antiderivative(abar, bbar, hi, p) - antiderivative(abar, bbar, lo, p);
    }
    let (al, ah) = (zl.abs(), zh.abs());
    let sum: f64 = (0..=p).map(|k| al.powi((p - k) as i32) * ah.powi(k as i32)).sum();
    width * sum / (p + 1) as f64
}

/// Partial derivatives of [`segment_integral`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentGrad {
    pub d_abar: f64,
    pub d_bbar: f64,
    pub d_lo: f64,
    pub d_hi: f64,
}

pub fn segment_integral_grad(abar: f64, bbar: f64, lo: f64, hi: f64, p: u32) -> SegmentGrad {
    let pi = p as i32;
    let width = hi - lo;
    if abar.abs() < DEGENERATE_SLOPE {
        let mag = bbar.abs().powi(pi);
        let d_bbar = if bbar == 0.0 { 0.0 } else { p as f64 * bbar.abs().powi(pi - 1) * bbar.signum() * width };
        return SegmentGrad { d_abar: 0.0, d_bbar, d_lo: -mag, d_hi: mag };
    }
    let (zl, zh) = (abar * lo + bbar, abar * hi + bbar);
    let (al, ah) = (zl.abs(), zh.abs());
    let (pl, ph) = (al.powi(pi), ah.powi(pi));
    if zl * zh < 0.0 {
        let value = antiderivative(abar, bbar, hi, p) - antiderivative(abar, bbar, lo, p);
        return SegmentGrad {
            d_abar: (hi * ph - lo * pl - value) / abar,
            d_bbar: (ph - pl) / abar,
            d_lo: -pl,
            d_hi: ph,
        };
    }
    // Same sign s on the whole interval; |z(t)| = (1 - t)|z_lo| + t|z_hi|.
    let s = if zl + zh >= 0.0 { 1.0 } else { -1.0 };
    let mut base = 0.0;
    let mut weighted = 0.0;
    for k in 0..p {
        let term = al.powi(pi - 1 - k as i32) * ah.powi(k as i32);
        base += term;
        weighted += (k + 1) as f64 * term;
    }
    let d_bbar = s * width * base;
    let d_abar = lo * d_bbar + s * width * width * weighted / (p + 1) as f64;
    SegmentGrad { d_abar, d_bbar, d_lo: -pl, d_hi: ph }
}

fn check_layout(e1: &QuantileEmbedding, e2: &QuantileEmbedding) -> Result<(), MetricError> {
    if e1.k() != e2.k() {
        return Err(MetricError::Mismatch(format!("{} vs {} filters", e1.k(), e2.k())));
    }
    if e1.breakpoints() != e2.breakpoints() {
        return Err(MetricError::Mismatch("breakpoints differ".into()));
    }
    Ok(())
}

/// `Σ_k (Σ_i ∫_{σ_i}^{σ_{i+1}} |ā_{ik} r + b̄_{ik}|^p dr)^{1/p}` in closed form.
pub fn wasserstein_distance(e1: &QuantileEmbedding, e2: &QuantileEmbedding, cfg: DistanceConfig) -> Result<f64, MetricError> {
    wasserstein_distance_with(e1, e2, cfg, segment_integral)
}

/// Closed-form distance with a caller-supplied segment integrator.
pub fn wasserstein_distance_with(
    e1: &QuantileEmbedding,
    e2: &QuantileEmbedding,
    cfg: DistanceConfig,
    integral: impl Fn(f64, f64, f64, f64, u32) -> f64,
) -> Result<f64, MetricError> {
    check_layout(e1, e2)?;
    let p = cfg.p();
    let bp = e1.breakpoints();
    let mut total = 0.0;
    for f in 0..e1.k() {
        let (a1, b1, a2, b2) = (e1.slopes(f), e1.intercepts(f), e2.slopes(f), e2.intercepts(f));
        let inner: f64 = (0..a1.len()).map(|i| integral(a1[i] - a2[i], b1[i] - b2[i], bp[i], bp[i + 1], p)).sum();
        total += if p == 1 { inner } else { inner.powf(1.0 / p as f64) };
    }
    Ok(total)
}

/// Composite-trapezoid evaluation of the same distance with `nodes` points per filter.
pub fn wasserstein_oracle(e1: &QuantileEmbedding, e2: &QuantileEmbedding, cfg: DistanceConfig, nodes: usize) -> Result<f64, MetricError> {
    check_layout(e1, e2)?;
    if nodes < 2 {
        return Err(MetricError::Mismatch(format!("need at least 2 quadrature nodes, got {}", nodes)));
    }
    let p = cfg.p() as i32;
    let bp = e1.breakpoints();
    let h = 1.0 / (nodes - 1) as f64;
    let mut total = 0.0;
    for f in 0..e1.k() {
        let (a1, b1, a2, b2) = (e1.slopes(f), e1.intercepts(f), e2.slopes(f), e2.intercepts(f));
        let mut seg = 0;
        let mut acc = 0.0;
        for j in 0..nodes {
            let r = if j == nodes - 1 { 1.0 } else { j as f64 * h };
            while seg + 1 < a1.len() && r > bp[seg + 1] {
                seg += 1;
            }
            let diff = (a1[seg] * r + b1[seg]) - (a2[seg] * r + b2[seg]);
            let w = if j == 0 || j == nodes - 1 { 0.5 } else { 1.0 };
            acc += w * diff.abs().powi(p);
        }
        let inner = acc * h;
        total += if p == 1 { inner } else { inner.powf(1.0 / p as f64) };
    }
    Ok(total)
}

/// The distance on the tape; both embeddings must share `breakpoints`.
pub fn wasserstein_distance_on_tape(
    tape: &mut Tape,
    e1: &QuantileVars,
    e2: &QuantileVars,
    breakpoints: Var,
    cfg: DistanceConfig,
) -> Result<Var, MetricError> {
    let width = tape.value(breakpoints).len();
    let abar = tape.sub(e1.a, e2.a)?;
    let bbar = tape.sub(e1.b, e2.b)?;
    let lo = tape.slice_last(breakpoints, 0, width - 1)?;
    let hi = tape.slice_last(breakpoints, 1, width)?;
    let integrals = tape.segment_integral(abar, bbar, lo, hi, cfg.p())?;
    let per_filter = tape.sum_last(integrals)?;
    let per_filter = if cfg.p() == 1 { per_filter } else { tape.pow(per_filter, 1.0 / cfg.p() as f64)? };
    Ok(tape.sum(per_filter)?)
}

/// Jensen-Shannon divergence (natural log) of two densities on a shared grid.
pub fn js_divergence(h1: &[f64], h2: &[f64]) -> Result<f64, MetricError> {
    if h1.len() != h2.len() || h1.is_empty() {
        return Err(MetricError::InvalidDensity(format!("grids of {} and {} bins", h1.len(), h2.len())));
    }
    for (name, h) in [("first", h1), ("second", h2)] {
        if h.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(MetricError::InvalidDensity(format!("{} density has negative or non-finite mass", name)));
        }
        let total: f64 = h.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MetricError::InvalidDensity(format!("{} density sums to {}", name, total)));
        }
    }
    let kl_to_mid = |p: &[f64], q: &[f64]| -> f64 {
        p.iter()
            .zip(q)
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(&pi, &qi)| pi * (2.0 * pi / (pi + qi)).ln())
            .sum()
    };
    Ok(0.5 * kl_to_mid(h1, h2) + 0.5 * kl_to_mid(h2, h1))
}
