//! Adam training loop shared by the four method variants.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{train_count, DataError, Dataset};
use crate::eval::{run_protocol, EvalError, ModelBackend, ProtocolConfig, Scenario};
use crate::kv::{KvError, KvMap};
use crate::losses::{negative_cosine_on_tape, npair_loss_on_tape, BatchSchedule, LossError, NPairBatch};
use crate::model::{HeadVars, Method, Model, ModelConfig, ModelError, NetworkConfig};
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};
use crate::wasserstein::{wasserstein_distance_on_tape, DistanceConfig, MetricError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(u64),
    #[error("dataset too small: {0}")]
    TooSmall(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    /// Target step count; a resumed run stops at the same total.
    pub iterations: u64,
    pub batch_n: usize,
    pub p: u32,
    pub m: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub checkpoint_interval: u64,
    /// L2 penalty on the PReLU slopes (0 disables it).
    pub prelu_decay: f64,
    pub network: NetworkConfig,
}

impl TrainConfig {
    pub fn new(method: Method, network: NetworkConfig) -> Self {
        TrainConfig {
            method,
            learning_rate: 1e-4,
            iterations: 2000,
            batch_n: 8,
            p: 1,
            m: 16,
            seed: 0,
            validation_fraction: 0.2,
            checkpoint_interval: 100,
            prelu_decay: 0.0,
            network,
        }
    }

    /// Laptop-scale run on the desk network: learning rate 1e-3, 2000 steps,
    /// validation every 250 steps.
    pub fn desk(method: Method, input_dim: usize) -> Self {
        TrainConfig { learning_rate: 1e-3, checkpoint_interval: 250, ..TrainConfig::new(method, NetworkConfig::desk(input_dim)) }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(TrainError::Config("iterations must be at least 1".into()));
        }
        if self.method != Method::QuantileClass && self.batch_n < 2 {
            return Err(TrainError::Config("batch_n must be at least 2 for metric methods".into()));
        }
        if self.batch_n == 0 {
            return Err(TrainError::Config("batch_n must be at least 1".into()));
        }
        if self.p == 0 {
            return Err(TrainError::Config("p must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(TrainError::Config("m must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(TrainError::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(TrainError::Config("checkpoint_interval must be at least 1".into()));
        }
        if !(self.prelu_decay >= 0.0 && self.prelu_decay.is_finite()) {
            return Err(TrainError::Config("prelu_decay must be non-negative".into()));
        }
        self.network.validate()?;
        Ok(())
    }

    /// Parses `key = value` text; network keys are described in
    /// [`NetworkConfig::from_kv`]. `input_dim` defaults to the data's `D`.
    pub fn from_kv(text: &str, input_dim: usize) -> Result<Self, TrainError> {
        let mut kv = KvMap::parse(text)?;
        let method = match kv.take_str("method") {
            Some(s) => s.parse::<Method>().map_err(|reason| KvError::InvalidValue { key: "method".into(), reason })?,
            None => Method::QuantileWasserstein,
        };
        let network = NetworkConfig::from_kv(&mut kv, input_dim)?;
        let d = TrainConfig::new(method, network);
        let cfg = TrainConfig {
            learning_rate: kv.take_or("learning_rate", d.learning_rate)?,
            iterations: kv.take_or("iterations", d.iterations)?,
            batch_n: kv.take_or("batch_n", d.batch_n)?,
            p: kv.take_or("p", d.p)?,
            m: kv.take_or("m", d.m)?,
            seed: kv.take_or("seed", d.seed)?,
            validation_fraction: kv.take_or("validation_fraction", d.validation_fraction)?,
            checkpoint_interval: kv.take_or("checkpoint_interval", d.checkpoint_interval)?,
            prelu_decay: kv.take_or("prelu_decay", d.prelu_decay)?,
            ..d
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, n_classes: usize) -> Result<ModelConfig, TrainError> {
        Ok(ModelConfig {
            network: self.network.clone(),
            method: self.method,
            m: self.m,
            distance: DistanceConfig::new(self.p)?,
            n_classes,
        })
    }
}

/// Adam moments, one pair of tensors per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { m: zeros(), v: zeros(), step: 0 }
    }
}

/// Bias-corrected Adam update in place. Nothing changes if any gradient is
/// non-finite.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], names: &[String], state: &mut AdamState, lr: f64) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Config(format!("{} parameters, {} gradients, {} moments", params.len(), grads.len(), state.m.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(TrainError::Config(format!("shape mismatch for `{}`", names.get(i).map_or("?", |s| s))));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(names.get(i).cloned().unwrap_or_else(|| i.to_string())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
            *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + EPSILON);
        }
    }
    Ok(())
}

/// Loss, gradients in declaration order and forward-pass count for one batch.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub forward_passes: usize,
    pub kink_margin: f64,
}

/// Forward and backward pass over one batch of `2N` instances on a single
/// tape. For the classifier the loss is the mean cross-entropy of the `2N`
/// instances with their subject index as label.
pub fn batch_loss(model: &Model, data: &Dataset, batch: &NPairBatch) -> Result<StepResult, TrainError> {
    let mut tape = Tape::new();
    let pv = model.register(&mut tape)?;
    let bp = model.breakpoints(&mut tape, &pv)?;
    let instances = batch.instances();
    let mut heads = Vec::with_capacity(instances.len());
    for &(s, q) in &instances {
        let input = data.subjects()[s].sequences[q].input()?;
        let act = model.forward(&mut tape, &pv, &input)?;
        heads.push(model.head(&mut tape, act, bp)?);
    }
    let n = batch.n();
    let loss = match model.method() {
        Method::QuantileClass => {
            let mut terms = Vec::with_capacity(2 * n);
            for (h, &(s, _)) in heads.iter().zip(&instances) {
                let HeadVars::Vector(flat) = *h else { unreachable!("classifier head is a vector") };
                let logits = model.logits(&mut tape, &pv, flat)?;
                terms.push(tape.softmax_cross_entropy(logits, s)?);
            }
            let stacked = tape.stack(&terms)?;
            let total = tape.sum(stacked)?;
            tape.mul_const(total, 1.0 / terms.len() as f64)?
        }
        method => {
            let mut dist = vec![Vec::with_capacity(n); n];
            for (i, row) in dist.iter_mut().enumerate() {
                for j in 0..n {
                    let d = match (heads[i], heads[n + j]) {
                        (HeadVars::Quantile(a), HeadVars::Quantile(b)) => {
                            wasserstein_distance_on_tape(&mut tape, &a, &b, bp.expect("quantile method has breakpoints"), model.config().distance)?
                        }
                        (HeadVars::Vector(a), HeadVars::Vector(b)) => negative_cosine_on_tape(&mut tape, a, b)?,
                        _ => unreachable!("{method}: heads of one model agree"),
                    };
                    row.push(d);
                }
            }
            npair_loss_on_tape(&mut tape, &dist)?
        }
    };
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let grads = pv.vars.iter().map(|&v| grads.wrt(v)).collect::<Result<Vec<_>, _>>()?;
    // Counted from the tape itself: every forward pass records one
    // convolution per layer.
    let forward_passes = tape.op_count("conv1d") / model.config().network.layers.len();
    Ok(StepResult { loss: value, grads, forward_passes, kink_margin: tape.kink_margin() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: u64,
    pub loss: f64,
    pub val_auc: Option<f64>,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iter,loss,val_auc\n");
    for r in rows {
        match r.val_auc {
            Some(a) => out.push_str(&format!("{},{},{}\n", r.iter, r.loss, a)),
            None => out.push_str(&format!("{},{},\n", r.iter, r.loss)),
        }
    }
    out
}

/// Model plus optimizer state: what a checkpoint stores.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best state by validation AUC (the final state without validation).
    pub best: TrainState,
    pub best_val_auc: Option<f64>,
    pub last: TrainState,
    pub trace: Vec<TraceRow>,
    pub forward_passes: usize,
    /// Set when training stopped early; the trace is still valid up to it.
    pub error: Option<String>,
}

/// Subject-disjoint training/validation split of the training subjects.
pub fn validation_split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Option<Dataset>), TrainError> {
    let n_val = train_count(data.n_subjects(), fraction);
    if n_val == 0 {
        return Ok((data.clone(), None));
    }
    if n_val < 2 || n_val >= data.n_subjects() {
        return Err(TrainError::TooSmall(format!(
            "validation fraction {} of {} subjects gives {} validation subjects; need at least 2 and a non-empty training side",
            fraction,
            data.n_subjects(),
            n_val
        )));
    }
    let mut ids: Vec<String> = data.subject_ids().into_iter().map(String::from).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5641_4c49_4441_5445));
    let val: BTreeSet<String> = ids[..n_val].iter().cloned().collect();
    let train: BTreeSet<String> = ids[n_val..].iter().cloned().collect();
    Ok((data.select(&train), Some(data.select(&val))))
}

/// Verification AUC at `n = 1` with every subject enrolled, one repeat.
pub fn validation_auc(model: &Model, data: &Dataset, seed: u64) -> Result<f64, TrainError> {
    let cfg = ProtocolConfig { scenarios: vec![Scenario::Verification], ns: vec![1], fractions: Some(vec![1.0]), repeats: 1, seed };
    let report = run_protocol(data, &ModelBackend { model }, &cfg)?;
    Ok(report.cells[0].mean)
}

/// Runs Adam from `resume` (or a fresh initialisation) until
/// `config.iterations` total steps. `on_row` sees every trace row as it is
/// produced.
pub fn train(data: &Dataset, config: &TrainConfig, resume: Option<TrainState>, mut on_row: impl FnMut(&TraceRow)) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let dim = data.dim().ok_or_else(|| TrainError::TooSmall("dataset is empty".into()))?;
    if dim != config.network.input_dim {
        return Err(TrainError::Config(format!("network input_dim {} but data has D = {}", config.network.input_dim, dim)));
    }
    let (train_set, val_set) = validation_split(data, config.validation_fraction, config.seed)?;
    let schedule = BatchSchedule::new(&train_set, config.batch_n, config.seed)?;
    let mut state = match resume {
        Some(s) => {
            if s.model.config().method != config.method {
                return Err(TrainError::Config(format!("checkpoint method {} differs from config method {}", s.model.config().method, config.method)));
            }
            s
        }
        None => {
            let model = Model::init(config.model_config(train_set.n_subjects())?)?;
            let adam = AdamState::new(model.params());
            TrainState { model, adam }
        }
    };
    if let Some(min) = data.min_len() {
        let need = state.model.config().network.min_input_len();
        if min < need {
            return Err(ModelError::SequenceTooShort { len: min, min: need }.into());
        }
    }
    let slope_params: Vec<usize> = state.model.names().iter().enumerate().filter(|(_, n)| n.starts_with("prelu")).map(|(i, _)| i).collect();

    let mut trace = Vec::new();
    let mut best = state.clone();
    let mut best_auc = None;
    let mut forward_passes = 0;
    let mut error = None;
    while state.adam.step < config.iterations {
        let step = state.adam.step;
        let batch = schedule.batch(&train_set, step);
        let result = match batch_loss(&state.model, &train_set, &batch) {
            Ok(r) => r,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        };
        forward_passes += result.forward_passes;
        if !result.loss.is_finite() {
            error = Some(TrainError::NonFiniteLoss(step + 1).to_string());
            break;
        }
        let mut grads = result.grads;
        if config.prelu_decay > 0.0 {
            for &i in &slope_params {
                for (g, &w) in grads[i].data_mut().iter_mut().zip(state.model.params()[i].data()) {
                    *g += config.prelu_decay * w;
                }
            }
        }
        let names = state.model.names().to_vec();
        if let Err(e) = adam_step(state.model.params_mut(), &grads, &names, &mut state.adam, config.learning_rate) {
            error = Some(e.to_string());
            break;
        }
        let iter = state.adam.step;
        let mut row = TraceRow { iter, loss: result.loss, val_auc: None };
        if let Some(val) = &val_set {
            if iter % config.checkpoint_interval == 0 || iter == config.iterations {
                let auc = validation_auc(&state.model, val, config.seed)?;
                row.val_auc = Some(auc);
                // Ties go to the later, longer-trained checkpoint.
                if best_auc.is_none_or(|b| auc >= b) {
                    best_auc = Some(auc);
                    best = state.clone();
                }
            }
        }
        on_row(&row);
        trace.push(row);
    }
    if val_set.is_none() || best_auc.is_none() {
        best = state.clone();
    }
    Ok(TrainOutcome { best, best_val_auc: best_auc, last: state, trace, forward_passes, error })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let grads = vec![Tensor::vector(vec![3.0, -0.01, 1e3])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &["w".into()], &mut state, 0.1).unwrap();
        let moved: Vec<f64> = params[0].data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| b - a).collect();
        for (d, g) in moved.iter().zip(grads[0].data()) {
            assert!((d - 0.1 * g.signum()).abs() < 1e-6, "{d}");
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::zeros(&[2])], &["w".into()], &mut state, 0.1).unwrap();
        assert_eq!(params[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &[Tensor::scalar(0.0), Tensor::scalar(f64::NAN)], &["a".into(), "b".into()], &mut state, 0.1).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient for parameter `b`");
        assert_eq!(state.step, 0);
    }

    #[test]
    fn adam_on_parabola() {
        // scalar re-derivation of the update as the oracle
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut oracle = Vec::new();
        for t in 1..=100 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            oracle.push(x);
        }
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params);
        let mut path = Vec::new();
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * params[0].item());
            adam_step(&mut params, &[g], &["x".into()], &mut state, 0.1).unwrap();
            path.push(params[0].item());
        }
        for (a, b) in path.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        // momentum overshoots zero, so |x| only shrinks monotonically on the approach
        assert!(path[..10].windows(2).all(|w| w[1].abs() < w[0].abs()));
        assert!(path[99].abs() < 0.05);
    }

    #[test]
    fn config_parsing() {
        let cfg = TrainConfig::from_kv("method = max-npl\nlearning_rate = 0.001\npreset = tiny\nbatch_n = 3\n", 2).unwrap();
        assert_eq!(cfg.method, Method::MaxNpl);
        assert_eq!(cfg.network.input_dim, 2);
        assert_eq!(cfg.network.k(), 4);
        assert!(TrainConfig::from_kv("learning_rate = 0", 1).is_err());
        assert!(TrainConfig::from_kv("batch_n = 1", 1).is_err());
        assert!(TrainConfig::from_kv("bogus = 1", 1).is_err());
    }

    #[test]
    fn trace_format() {
        let rows = [TraceRow { iter: 1, loss: 0.5, val_auc: None }, TraceRow { iter: 2, loss: 0.25, val_auc: Some(0.75) }];
        assert_eq!(trace_csv(&rows), "iter,loss,val_auc\n1,0.5,\n2,0.25,0.75\n");
    }
}
