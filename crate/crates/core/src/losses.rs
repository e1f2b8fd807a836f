//! N-pair batches and the training losses.
//!
//! A batch holds one anchor `s_i` and one positive `s_i⁺` for each of `N`
//! distinct classes. The negatives are the `N(N−1)` pairs `(s_i, s_j⁺)`,
//! `j ≠ i`, so the loss needs `2N` embeddings but has `N(N−1)` terms:
//!
//! `L = Σ_i Σ_{j≠i} softplus(d(s_i, s_i⁺) − d(s_i, s_j⁺))`.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::tape::{softplus, Tape, Var};
use crate::tensor::TensorError;
use crate::wasserstein::MetricError;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("cannot build a batch of {n} pairs: {eligible} classes have at least 2 sequences")]
    InsufficientClasses { n: usize, eligible: usize },
    #[error("batch size N must be at least 1")]
    EmptyBatch,
    #[error("distance matrix must be {n}x{n}, got {rows} rows")]
    MissingEmbedding { n: usize, rows: usize },
    #[error("embedding {0} has zero norm")]
    ZeroNorm(usize),
    #[error("vector embeddings have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// `(subject index, sequence index)` into a [`Dataset`].
pub type Instance = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NPairBatch {
    pub anchors: Vec<Instance>,
    pub positives: Vec<Instance>,
}

impl NPairBatch {
    pub fn n(&self) -> usize {
        self.anchors.len()
    }

    /// Anchors followed by positives.
    pub fn instances(&self) -> Vec<Instance> {
        self.anchors.iter().chain(&self.positives).copied().collect()
    }

    /// `(i, j)` for the negative pair `(s_i, s_j⁺)`.
    pub fn negatives(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.anchors.iter().map(|a| a.0).collect()
    }
}

/// Subjects with at least two sequences.
pub fn eligible_classes(data: &Dataset) -> Vec<usize> {
    data.subjects().iter().enumerate().filter(|(_, s)| s.sequences.len() >= 2).map(|(i, _)| i).collect()
}

fn pair_for<R: Rng>(data: &Dataset, class: usize, rng: &mut R) -> (Instance, Instance) {
    let picked = index::sample(rng, data.subjects()[class].sequences.len(), 2);
    ((class, picked.index(0)), (class, picked.index(1)))
}

fn batch_from_classes<R: Rng>(data: &Dataset, classes: &[usize], rng: &mut R) -> NPairBatch {
    let (anchors, positives) = classes.iter().map(|&c| pair_for(data, c, rng)).unzip();
    NPairBatch { anchors, positives }
}

/// One batch of `n` distinct classes drawn uniformly, two distinct
/// sequences per class.
pub fn sample_npair_batch<R: Rng>(data: &Dataset, n: usize, rng: &mut R) -> Result<NPairBatch, LossError> {
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let eligible = eligible_classes(data);
    if eligible.len() < n {
        return Err(LossError::InsufficientClasses { n, eligible: eligible.len() });
    }
    let classes: Vec<usize> = index::sample(rng, eligible.len(), n).iter().map(|i| eligible[i]).collect();
    Ok(batch_from_classes(data, &classes, rng))
}

/// Epoch-balanced batches addressed by step number.
///
/// Epoch `e` is a fresh permutation of the eligible classes cut into
/// `⌊C/N⌋` batches (the `C mod N` leftover classes sit that epoch out), so a
/// batch depends only on the seed and the step, and resumed runs see the
/// same batches as uninterrupted ones.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    eligible: Vec<usize>,
    n: usize,
    seed: u64,
}

impl BatchSchedule {
    pub fn new(data: &Dataset, n: usize, seed: u64) -> Result<Self, LossError> {
        if n == 0 {
            return Err(LossError::EmptyBatch);
        }
        let eligible = eligible_classes(data);
        if eligible.len() < n {
            return Err(LossError::InsufficientClasses { n, eligible: eligible.len() });
        }
        Ok(BatchSchedule { eligible, n, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.eligible.len() / self.n
    }

    /// Batch for a zero-based step.
    pub fn batch(&self, data: &Dataset, step: u64) -> NPairBatch {
        let per_epoch = self.batches_per_epoch() as u64;
        let (epoch, slot) = (step / per_epoch, (step % per_epoch) as usize);
        let mut order = self.eligible.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * epoch);
        order.shuffle(&mut rng);
        let classes = &order[slot * self.n..(slot + 1) * self.n];
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * step + 1);
        batch_from_classes(data, classes, &mut rng)
    }
}

fn check_square(dist: &[Vec<f64>]) -> Result<usize, LossError> {
    let n = dist.len();
    if let Some(row) = dist.iter().find(|r| r.len() != n) {
        return Err(LossError::MissingEmbedding { n, rows: row.len() });
    }
    Ok(n)
}

/// N-pair loss from `dist[i][j] = d(s_i, s_j⁺)`.
pub fn npair_loss(dist: &[Vec<f64>]) -> Result<f64, LossError> {
    let n = check_square(dist)?;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if j != i {
                total += softplus(dist[i][i] - dist[i][j]);
            }
        }
    }
    Ok(total)
}

/// The hinge precursor `Σ max(0, d⁺ − d⁻)`, bounded above by [`npair_loss`].
pub fn npair_hinge(dist: &[Vec<f64>]) -> Result<f64, LossError> {
    let n = check_square(dist)?;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if j != i {
                total += (dist[i][i] - dist[i][j]).max(0.0);
            }
        }
    }
    Ok(total)
}

/// N-pair loss on the tape from scalar distance variables.
pub fn npair_loss_on_tape(tape: &mut Tape, dist: &[Vec<Var>]) -> Result<Var, LossError> {
    let n = dist.len();
    if let Some(row) = dist.iter().find(|r| r.len() != n) {
        return Err(LossError::MissingEmbedding { n, rows: row.len() });
    }
    let mut terms = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if j != i {
                let diff = tape.sub(dist[i][i], dist[i][j])?;
                terms.push(tape.softplus(diff)?);
            }
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(crate::tensor::Tensor::scalar(0.0))?);
    }
    let stacked = tape.stack(&terms)?;
    Ok(tape.sum(stacked)?)
}

/// `d(u, v) = −cos(u, v)`.
pub fn negative_cosine(u: &[f64], v: &[f64]) -> Result<f64, LossError> {
    if u.len() != v.len() {
        return Err(LossError::LengthMismatch(u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 {
        return Err(LossError::ZeroNorm(0));
    }
    if nv == 0.0 {
        return Err(LossError::ZeroNorm(1));
    }
    Ok(-u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

/// Cosine N-pair loss on plain vectors.
pub fn cosine_npair_loss(anchors: &[Vec<f64>], positives: &[Vec<f64>]) -> Result<f64, LossError> {
    if anchors.len() != positives.len() {
        return Err(LossError::MissingEmbedding { n: anchors.len(), rows: positives.len() });
    }
    let dist = anchors
        .iter()
        .map(|a| positives.iter().map(|p| negative_cosine(a, p)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    npair_loss(&dist)
}

/// `−cos(u, v)` on the tape.
pub fn negative_cosine_on_tape(tape: &mut Tape, u: Var, v: Var) -> Result<Var, LossError> {
    for (i, x) in [u, v].into_iter().enumerate() {
        if tape.value(x).data().iter().all(|&e| e == 0.0) {
            return Err(LossError::ZeroNorm(i));
        }
    }
    let uv = tape.mul(u, v)?;
    let dot = tape.sum(uv)?;
    let uu = tape.mul(u, u)?;
    let uu = tape.sum(uu)?;
    let vv = tape.mul(v, v)?;
    let vv = tape.sum(vv)?;
    let norms = tape.mul(uu, vv)?;
    let norms = tape.pow(norms, 0.5)?;
    let cos = tape.div(dot, norms)?;
    Ok(tape.mul_const(cos, -1.0)?)
}

/// `−ln p[label]` of a probability vector.
pub fn crossentropy_loss(probabilities: &[f64], label: usize) -> Result<f64, LossError> {
    if label >= probabilities.len() {
        return Err(LossError::LabelOutOfRange { label, classes: probabilities.len() });
    }
    let total: f64 = probabilities.iter().sum();
    if probabilities.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > 1e-9 {
        return Err(LossError::InvalidProbabilities(format!("entries must lie in [0, 1] and sum to 1 (sum {})", total)));
    }
    Ok(-probabilities[label].ln())
}

/// `−ln softmax(logits)[label]` via log-sum-exp.
pub fn crossentropy_from_logits(logits: &[f64], label: usize) -> Result<f64, LossError> {
    if label >= logits.len() {
        return Err(LossError::LabelOutOfRange { label, classes: logits.len() });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}
