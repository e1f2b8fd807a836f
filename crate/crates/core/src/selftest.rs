//! Built-in oracle suites: closed-form distance against quadrature, gradient
//! checks through the whole model, and quantile-layer convergence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, SequenceRecord, Subject};
use crate::gradcheck::{grad_check, GradCheckError, GradCheckReport, Probe};
use crate::losses::sample_npair_batch;
use crate::model::{LayerSpec, Method, Model, ModelConfig, NetworkConfig};
use crate::quantile::{embed_values, AlphaParams, QuantileEmbedding};
use crate::tensor::TensorError;
use crate::train::batch_loss;
use crate::wasserstein::{segment_integral, wasserstein_distance_with, wasserstein_oracle, DistanceConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Random embedding with `k` filters and `m` learned levels.
pub fn random_embedding<R: Rng>(rng: &mut R, k: usize, alphas: &AlphaParams) -> QuantileEmbedding {
    let len = rng.random_range(2..40);
    let acts: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let scale = rng.random_range(0.1..3.0);
            let shift = rng.random_range(-2.0..2.0);
            (0..len).map(|_| shift + scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect()
        })
        .collect();
    embed_values(&acts, alphas).expect("non-empty activations")
}

pub fn random_alphas<R: Rng>(rng: &mut R, m: usize) -> AlphaParams {
    AlphaParams::from_raw((0..m).map(|_| rng.random_range(-3.0..3.0)).collect()).expect("m >= 1")
}

/// Largest relative error of the closed form against trapezoid quadrature
/// over `pairs` random embedding pairs (`K ≤ 8`, `M ≤ 16`, `p ∈ {1, 2}`).
pub fn closed_form_vs_quadrature(
    pairs: usize,
    nodes: usize,
    seed: u64,
    integral: impl Fn(f64, f64, f64, f64, u32) -> f64 + Copy,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let k = rng.random_range(1..=8);
        let m = rng.random_range(1..=16);
        let cfg = DistanceConfig::new(1 + (i % 2) as u32).expect("p >= 1");
        let alphas = random_alphas(&mut rng, m);
        let e1 = random_embedding(&mut rng, k, &alphas);
        let e2 = random_embedding(&mut rng, k, &alphas);
        let closed = wasserstein_distance_with(&e1, &e2, cfg, integral).expect("same layout");
        let quad = wasserstein_oracle(&e1, &e2, cfg, nodes).expect("same layout");
        worst = worst.max((closed - quad).abs() / quad.abs().max(1e-300));
    }
    worst
}

/// Tiny two-layer network (`K = 4`) used for gradient checks.
pub fn tiny_network(input_dim: usize, seed: u64) -> NetworkConfig {
    NetworkConfig {
        input_dim,
        layers: vec![LayerSpec { channels: 4, kernel_width: 3, stride: 1 }, LayerSpec { channels: 4, kernel_width: 3, stride: 1 }],
        prelu_init: 0.25,
        seed,
    }
}

/// `classes` subjects with `per_class` Gaussian sequences of length `t`.
pub fn random_dataset(classes: usize, per_class: usize, t: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = (0..classes)
        .map(|c| {
            let id = format!("c{}", c);
            let sequences = (0..per_class)
                .map(|q| {
                    let data = (0..t * d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    SequenceRecord::new(id.clone(), format!("{}_{}", id, q), t, d, data)
                })
                .collect();
            Subject { id, sequences }
        })
        .collect();
    Dataset::new(subjects).expect("generated ids are unique")
}

/// Central-difference check of the full batch loss on a tiny model
/// (`K = 4`, `M = 4`, `T = 32`, `N = 3`) over every parameter.
pub fn model_grad_check(method: Method, seed: u64, step: f64) -> Result<GradCheckReport, GradCheckError> {
    let data = random_dataset(3, 2, 32, 1, seed);
    let config = ModelConfig { network: tiny_network(1, seed), method, m: 4, distance: DistanceConfig::default(), n_classes: 3 };
    let model = Model::init(config.clone()).map_err(|e| GradCheckError::Eval(TensorError::Invalid { op: "init", detail: e.to_string() }))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_npair_batch(&data, 3, &mut rng).expect("3 classes with 2 sequences");
    let eval = |params: &[crate::tensor::Tensor]| -> Result<Probe, TensorError> {
        let to_err = |e: &dyn std::fmt::Display| TensorError::Invalid { op: "batch_loss", detail: e.to_string() };
        let m = Model::from_parts(config.clone(), params.to_vec()).map_err(|e| to_err(&e))?;
        let r = batch_loss(&m, &data, &batch).map_err(|e| to_err(&e))?;
        Ok(Probe { value: r.loss, grads: r.grads, kink_margin: r.kink_margin })
    };
    grad_check(eval, model.params(), step, &mut rng)
}

/// Largest absolute gap between `Q̄` of `samples` standard-normal draws and
/// the normal quantile at the interior breakpoints.
pub fn quantile_convergence(samples: usize, m: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..samples).map(|_| StandardNormal.sample(&mut rng)).collect();
    let alphas = AlphaParams::uniform(m).expect("m >= 1");
    let emb = embed_values(&[draws], &alphas).expect("non-empty");
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let bp = emb.breakpoints();
    (1..bp.len() - 1).map(|i| (emb.eval(0, bp[i]) - normal.inverse_cdf(bp[i])).abs()).fold(0.0, f64::max)
}

/// Runs every suite with the production integrator.
pub fn run_all() -> Vec<SuiteResult> {
    run_all_with(segment_integral)
}

/// Runs every suite; `integral` replaces the closed-form segment integral
/// in the quadrature suite.
pub fn run_all_with(integral: impl Fn(f64, f64, f64, f64, u32) -> f64 + Copy) -> Vec<SuiteResult> {
    let mut out = Vec::new();

    let err = closed_form_vs_quadrature(40, 1_000_000, 1, integral);
    out.push(SuiteResult { name: "closed-form vs quadrature", passed: err <= 1e-6, detail: format!("max relative error {:.3e} (limit 1e-6)", err) });

    for method in Method::ALL {
        let (passed, detail) = match model_grad_check(method, 7, 1e-5) {
            Ok(r) => (r.max_rel_error <= 1e-4, format!("{}: max relative error {:.3e} over {} parameters (limit 1e-4)", method, r.max_rel_error, r.checked)),
            Err(e) => (false, format!("{}: {}", method, e)),
        };
        out.push(SuiteResult { name: "gradient check", passed, detail });
    }

    let gap = quantile_convergence(100_000, 16, 0);
    out.push(SuiteResult { name: "quantile convergence", passed: gap <= 0.01, detail: format!("max gap {:.4} to the normal quantile (limit 0.01)", gap) });
    out
}
