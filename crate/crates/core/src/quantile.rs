//! Quantile layer: piecewise-linear quantile functions with learnable
//! sampling points.
//!
//! A sample set is first turned into its empirical quantile function, which
//! is interpolated linearly over `N` segments (`interp_quantile`). That curve
//! is then resampled at `M` learnable levels `σ(α_1) < … < σ(α_M)` plus the
//! fixed borders 0 and 1, giving `M + 1` line segments whose count no longer
//! depends on the sample size.

use thiserror::Error;

use crate::tape::{interp_segment, sigmoid, softplus, Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Minimum increment between consecutive raw sampling points.
pub const ALPHA_GAP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantileError {
    #[error("empty sample set")]
    EmptySamples,
    #[error("quantile level {0} outside the admissible range")]
    LevelOutOfRange(f64),
    #[error("filter {0} has no activations (sequence shorter than the receptive field?)")]
    EmptyFilter(usize),
    #[error("need at least one sampling point")]
    NoSamplingPoints,
    #[error("embedding layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    xs
}

/// Smallest 1-based `n` in `1..=count` with `r <= n / count`.
///
/// This is the empirical-quantile index and also the interpolation segment
/// containing `r`, with shared boundaries assigned to the left segment.
pub fn segment_index(r: f64, count: usize) -> usize {
    let nf = count as f64;
    let mut s = ((r * nf).ceil() as usize).clamp(1, count);
    while s > 1 && r <= (s - 1) as f64 / nf {
        s -= 1;
    }
    while s < count && r > s as f64 / nf {
        s += 1;
    }
    s
}

/// Empirical quantile `inf{x : r <= F̂(x)}` for `r` in `(0, 1]`.
pub fn empirical_quantile(samples: &[f64], r: f64) -> Result<f64, QuantileError> {
    if samples.is_empty() {
        return Err(QuantileError::EmptySamples);
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(QuantileError::LevelOutOfRange(r));
    }
    let xs = sorted(samples);
    Ok(xs[segment_index(r, xs.len()) - 1])
}

/// Linear interpolation of the empirical quantile function, `r` in `[0, 1]`.
///
/// Level `(n - 1) / N` maps to the `n`-th smallest sample; the last segment is
/// flat at the maximum.
pub fn interp_quantile(samples: &[f64], r: f64) -> Result<f64, QuantileError> {
    if samples.is_empty() {
        return Err(QuantileError::EmptySamples);
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(QuantileError::LevelOutOfRange(r));
    }
    let xs = sorted(samples);
    Ok(interp_segment(&xs, segment_index(r, xs.len()), r))
}

/// Learnable sampling points, stored unconstrained.
///
/// `α_1 = θ_1` and `α_{i+1} = α_i + softplus(θ_{i+1}) + ALPHA_GAP`, so the
/// levels `σ(α_i)` are strictly increasing for any raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaParams {
    raw: Vec<f64>,
}

impl AlphaParams {
    /// Sampling points placed at levels `i / (M + 1)`.
    pub fn uniform(m: usize) -> Result<Self, QuantileError> {
        if m == 0 {
            return Err(QuantileError::NoSamplingPoints);
        }
        let logit = |u: f64| (u / (1.0 - u)).ln();
        let alphas: Vec<f64> = (1..=m).map(|i| logit(i as f64 / (m + 1) as f64)).collect();
        let mut raw = vec![alphas[0]];
        for w in alphas.windows(2) {
            raw.push(inverse_softplus(w[1] - w[0] - ALPHA_GAP));
        }
        Ok(AlphaParams { raw })
    }

    pub fn from_raw(raw: Vec<f64>) -> Result<Self, QuantileError> {
        if raw.is_empty() {
            return Err(QuantileError::NoSamplingPoints);
        }
        Ok(AlphaParams { raw })
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn m(&self) -> usize {
        self.raw.len()
    }

    pub fn alphas(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.raw
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                acc += if i == 0 { t } else { softplus(t) + ALPHA_GAP };
                acc
            })
            .collect()
    }

    /// Interior levels `σ(α_1..α_M)`.
    pub fn levels(&self) -> Vec<f64> {
        self.alphas().into_iter().map(sigmoid).collect()
    }

    /// `[0, σ(α_1), …, σ(α_M), 1]`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut bp = Vec::with_capacity(self.m() + 2);
        bp.push(0.0);
        bp.extend(self.levels());
        bp.push(1.0);
        bp
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Breakpoints `[0, σ(α_1), …, σ(α_M), 1]` computed on the tape from the raw
/// parameters, so gradients reach them.
pub fn breakpoints_on_tape(tape: &mut Tape, raw: Var) -> Result<Var, TensorError> {
    let m = tape.value(raw).len();
    let increments = if m == 1 {
        raw
    } else {
        let first = tape.slice_last(raw, 0, 1)?;
        let rest = tape.slice_last(raw, 1, m)?;
        let sp = tape.softplus(rest)?;
        let sp = tape.add_const(sp, ALPHA_GAP)?;
        tape.concat_last(&[first, sp])?
    };
    let alphas = tape.cumsum(increments)?;
    let levels = tape.sigmoid(alphas)?;
    let zero = tape.constant(Tensor::vector(vec![0.0]))?;
    let one = tape.constant(Tensor::vector(vec![1.0]))?;
    tape.concat_last(&[zero, levels, one])
}

/// One line segment `a·r + b` on `[r_lo, r_hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileSegment {
    pub a: f64,
    pub b: f64,
    pub r_lo: f64,
    pub r_hi: f64,
}

impl QuantileSegment {
    pub fn eval(&self, r: f64) -> f64 {
        self.a * r + self.b
    }
}

/// `K` piecewise-linear quantile functions sharing one set of breakpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileEmbedding {
    k: usize,
    breakpoints: Vec<f64>,
    slopes: Vec<f64>,
    intercepts: Vec<f64>,
}

impl QuantileEmbedding {
    /// `slopes` and `intercepts` are row-major `[K, M + 1]`.
    pub fn new(k: usize, breakpoints: Vec<f64>, slopes: Vec<f64>, intercepts: Vec<f64>) -> Result<Self, QuantileError> {
        if breakpoints.len() < 2 {
            return Err(QuantileError::Layout("need at least two breakpoints".into()));
        }
        let segs = breakpoints.len() - 1;
        if slopes.len() != k * segs || intercepts.len() != k * segs {
            return Err(QuantileError::Layout(format!(
                "{} filters x {} segments, got {} slopes and {} intercepts",
                k,
                segs,
                slopes.len(),
                intercepts.len()
            )));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(QuantileError::Layout("breakpoints must be strictly increasing".into()));
        }
        Ok(QuantileEmbedding { k, breakpoints, slopes, intercepts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of interior sampling points.
    pub fn m(&self) -> usize {
        self.breakpoints.len() - 2
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn slopes(&self, filter: usize) -> &[f64] {
        let s = self.m() + 1;
        &self.slopes[filter * s..(filter + 1) * s]
    }

    pub fn intercepts(&self, filter: usize) -> &[f64] {
        let s = self.m() + 1;
        &self.intercepts[filter * s..(filter + 1) * s]
    }

    pub fn segments(&self, filter: usize) -> Vec<QuantileSegment> {
        self.slopes(filter)
            .iter()
            .zip(self.intercepts(filter))
            .zip(self.breakpoints.windows(2))
            .map(|((&a, &b), w)| QuantileSegment { a, b, r_lo: w[0], r_hi: w[1] })
            .collect()
    }

    /// Index of the segment containing `r` (left segment at shared breakpoints).
    pub fn segment_at(&self, r: f64) -> usize {
        self.breakpoints[1..=self.m()].partition_point(|&u| u < r)
    }

    /// `Q̄(r)` for one filter.
    pub fn eval(&self, filter: usize, r: f64) -> f64 {
        let i = self.segment_at(r);
        self.slopes(filter)[i] * r + self.intercepts(filter)[i]
    }

    /// `Q̄` at the interior breakpoints, filter-major: a `K·M` vector.
    pub fn flatten(&self) -> Vec<f64> {
        let m = self.m();
        let mut out = Vec::with_capacity(self.k * m);
        for f in 0..self.k {
            let (a, b) = (self.slopes(f), self.intercepts(f));
            for i in 1..=m {
                // right end of segment i - 1
                out.push(a[i - 1] * self.breakpoints[i] + b[i - 1]);
            }
        }
        out
    }
}

/// `(a_i, b_i)` for each of the `M + 1` segments of one sample set.
pub fn segment_coeffs(samples: &[f64], alphas: &AlphaParams) -> Result<Vec<(f64, f64)>, QuantileError> {
    if samples.is_empty() {
        return Err(QuantileError::EmptySamples);
    }
    let xs = sorted(samples);
    let bp = alphas.breakpoints();
    let q: Vec<f64> = bp.iter().map(|&r| interp_segment(&xs, segment_index(r, xs.len()), r)).collect();
    Ok(bp
        .windows(2)
        .zip(q.windows(2))
        .map(|(u, qv)| {
            let a = (qv[1] - qv[0]) / (u[1] - u[0]);
            (a, qv[0] - a * u[0])
        })
        .collect())
}

/// Embeds `K` (possibly different-length) activation sequences without a tape.
pub fn embed_values(activations: &[Vec<f64>], alphas: &AlphaParams) -> Result<QuantileEmbedding, QuantileError> {
    let mut slopes = Vec::new();
    let mut intercepts = Vec::new();
    for (f, acts) in activations.iter().enumerate() {
        if acts.is_empty() {
            return Err(QuantileError::EmptyFilter(f));
        }
        for (a, b) in segment_coeffs(acts, alphas)? {
            slopes.push(a);
            intercepts.push(b);
        }
    }
    QuantileEmbedding::new(activations.len(), alphas.breakpoints(), slopes, intercepts)
}

/// Tape handles for an embedded sequence.
#[derive(Debug, Clone, Copy)]
pub struct QuantileVars {
    /// Slopes `[K, M + 1]`.
    pub a: Var,
    /// Intercepts `[K, M + 1]`.
    pub b: Var,
    /// `Q̃` at all breakpoints, `[K, M + 2]`.
    pub q: Var,
}

impl QuantileVars {
    pub fn to_embedding(&self, tape: &Tape, breakpoints: Var) -> Result<QuantileEmbedding, QuantileError> {
        let a = tape.value(self.a);
        QuantileEmbedding::new(
            a.shape()[0],
            tape.value(breakpoints).data().to_vec(),
            a.data().to_vec(),
            tape.value(self.b).data().to_vec(),
        )
    }
}

/// Quantile layer on the tape: `activations: [K, T]`, `breakpoints: [M + 2]`.
pub fn embed(tape: &mut Tape, activations: Var, breakpoints: Var) -> Result<QuantileVars, QuantileError> {
    let shape = tape.value(activations).shape().to_vec();
    if shape.len() != 2 {
        return Err(QuantileError::Layout(format!("activations must be [K, T], got {:?}", shape)));
    }
    if shape[1] == 0 {
        return Err(QuantileError::EmptyFilter(0));
    }
    let width = tape.value(breakpoints).len();
    let sorted = tape.sort_gather(activations)?;
    let q = tape.interp_quantile(sorted, breakpoints)?;
    let q_lo = tape.slice_last(q, 0, width - 1)?;
    let q_hi = tape.slice_last(q, 1, width)?;
    let u_lo = tape.slice_last(breakpoints, 0, width - 1)?;
    let u_hi = tape.slice_last(breakpoints, 1, width)?;
    let dq = tape.sub(q_hi, q_lo)?;
    let du = tape.sub(u_hi, u_lo)?;
    let a = tape.div(dq, du)?;
    let au = tape.mul(a, u_lo)?;
    let b = tape.sub(q_lo, au)?;
    Ok(QuantileVars { a, b, q })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empirical_quantile_examples() {
        assert_eq!(empirical_quantile(&[3.0, 1.0, 2.0], 0.5).unwrap(), 2.0);
        assert_eq!(empirical_quantile(&[3.0, 1.0, 2.0], 1.0).unwrap(), 3.0);
        assert_eq!(empirical_quantile(&[], 0.5), Err(QuantileError::EmptySamples));
        assert!(empirical_quantile(&[1.0], 0.0).is_err());
        assert!(empirical_quantile(&[1.0], 1.5).is_err());
    }

    #[test]
    fn empirical_quantile_matches_infimum_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..200).map(|_| rng.random_range(-5.0..5.0)).collect();
        let n = samples.len() as f64;
        for _ in 0..50 {
            let r: f64 = 1.0 - rng.random::<f64>();
            // inf{x in samples : r <= F̂(x)}
            let mut best = f64::INFINITY;
            for &x in &samples {
                let f = samples.iter().filter(|&&s| s <= x).count() as f64 / n;
                if r <= f && x < best {
                    best = x;
                }
            }
            assert_eq!(empirical_quantile(&samples, r).unwrap(), best, "r = {r}");
        }
        // grid levels where r·N is not exact in floating point
        let grid: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(empirical_quantile(&grid, 0.3).unwrap(), 3.0);
    }

    #[test]
    fn interp_quantile_examples() {
        assert_eq!(interp_quantile(&[0.0, 1.0], 0.25).unwrap(), 0.5);
        assert_eq!(interp_quantile(&[0.0, 1.0], 0.75).unwrap(), 1.0);
        let xs = [4.0, -2.0, 7.5, 0.0];
        assert_eq!(interp_quantile(&xs, 0.0).unwrap(), -2.0);
        assert_eq!(interp_quantile(&xs, 1.0).unwrap(), 7.5);
        assert!(interp_quantile(&xs, -0.1).is_err());
    }

    #[test]
    fn interp_quantile_hits_sorted_samples_on_grid() {
        let xs = [5.0, 1.0, 3.0, 2.0, 4.0];
        for n in 1..=5 {
            let r = (n - 1) as f64 / 5.0;
            assert!((interp_quantile(&xs, r).unwrap() - n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_alphas_give_even_levels() {
        let alphas = AlphaParams::uniform(4).unwrap();
        for (i, l) in alphas.levels().iter().enumerate() {
            assert!((l - (i + 1) as f64 / 5.0).abs() < 1e-12);
        }
        assert_eq!(alphas.breakpoints().first(), Some(&0.0));
        assert_eq!(alphas.breakpoints().last(), Some(&1.0));
    }

    #[test]
    fn arbitrary_raw_values_keep_levels_strictly_increasing() {
        let alphas = AlphaParams::from_raw(vec![0.3, -20.0, -50.0, 4.0, -3.0]).unwrap();
        let bp = alphas.breakpoints();
        assert!(bp.windows(2).all(|w| w[1] > w[0]), "{bp:?}");
    }

    #[test]
    fn segment_coeffs_two_samples() {
        let alphas = AlphaParams::from_raw(vec![0.0]).unwrap();
        let c = segment_coeffs(&[0.0, 1.0], &alphas).unwrap();
        assert_eq!(c, vec![(2.0, 0.0), (0.0, 1.0)]);
    }

    #[test]
    fn segment_coeffs_constant_samples() {
        let alphas = AlphaParams::uniform(5).unwrap();
        for (a, b) in segment_coeffs(&[2.5; 17], &alphas).unwrap() {
            assert_eq!(a, 0.0);
            assert_eq!(b, 2.5);
        }
    }

    #[test]
    fn flatten_two_samples() {
        let alphas = AlphaParams::from_raw(vec![0.0]).unwrap();
        let e = embed_values(&[vec![0.0, 1.0]], &alphas).unwrap();
        assert_eq!(e.flatten(), vec![1.0]);
    }

    #[test]
    fn empty_filter_is_rejected() {
        let alphas = AlphaParams::uniform(2).unwrap();
        assert_eq!(embed_values(&[vec![1.0], vec![]], &alphas), Err(QuantileError::EmptyFilter(1)));
    }

    #[test]
    fn tape_breakpoints_match_plain() {
        let alphas = AlphaParams::from_raw(vec![-0.7, 0.2, -1.5, 0.9]).unwrap();
        let mut tape = Tape::new();
        let raw = tape.param(Tensor::vector(alphas.raw().to_vec())).unwrap();
        let bp = breakpoints_on_tape(&mut tape, raw).unwrap();
        assert_eq!(tape.value(bp).data(), alphas.breakpoints().as_slice());
    }

    #[test]
    fn tape_embedding_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..23).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let alphas = AlphaParams::uniform(6).unwrap();
        let plain = embed_values(&rows, &alphas).unwrap();

        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(3, 23, rows.concat()).unwrap()).unwrap();
        let raw = tape.param(Tensor::vector(alphas.raw().to_vec())).unwrap();
        let bp = breakpoints_on_tape(&mut tape, raw).unwrap();
        let vars = embed(&mut tape, x, bp).unwrap();
        assert_eq!(vars.to_embedding(&tape, bp).unwrap(), plain);
    }
}
