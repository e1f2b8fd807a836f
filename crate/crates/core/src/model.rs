//! Convolutional feature extractor and the aggregation heads.
//!
//! The network is a stack of valid 1-D convolutions, each followed by a
//! PReLU, mapping a `T × D` sequence to `K` activation sequences. Heads:
//!
//! - quantile embedding (piecewise-linear quantile function per filter),
//! - flattened quantile embedding (`K·M` vector),
//! - global max pooling (`K` vector),
//! - a dense softmax classifier on the flattened embedding (training only).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kv::{join, KvError, KvMap};
use crate::quantile::{self, AlphaParams, QuantileEmbedding, QuantileError, QuantileVars};
use crate::tape::{softmax, Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::wasserstein::{wasserstein_distance, DistanceConfig, MetricError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sequence of length {len} is shorter than the minimum {min} for this network")]
    SequenceTooShort { len: usize, min: usize },
    #[error("sequence has {got} channels, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quantile(#[from] QuantileError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// The four training/aggregation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Quantile embedding trained with the Wasserstein N-pair loss.
    QuantileWasserstein,
    /// Flattened quantile embedding trained with the cosine N-pair loss.
    QuantileNpl,
    /// Max-pooled embedding trained with the cosine N-pair loss.
    MaxNpl,
    /// Flattened quantile embedding trained as a softmax classifier.
    QuantileClass,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::QuantileWasserstein, Method::QuantileNpl, Method::MaxNpl, Method::QuantileClass];

    pub fn name(&self) -> &'static str {
        match self {
            Method::QuantileWasserstein => "quantile-wasserstein",
            Method::QuantileNpl => "quantile-npl",
            Method::MaxNpl => "max-npl",
            Method::QuantileClass => "quantile-class",
        }
    }

    pub fn uses_quantiles(&self) -> bool {
        !matches!(self, Method::MaxNpl)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{}` (expected one of quantile-wasserstein, quantile-npl, max-npl, quantile-class)", s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel_width: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub prelu_init: f64,
    pub seed: u64,
}

impl NetworkConfig {
    /// Sixteen convolutions in eight blocks of two (kernel 3), the second of
    /// each block with stride 2; channels start at 32, double per block and
    /// are capped at 128.
    pub fn sixteen_layer(input_dim: usize) -> Self {
        let mut layers = Vec::new();
        for block in 0..8 {
            let channels = (32usize << block).min(128);
            layers.push(LayerSpec { channels, kernel_width: 3, stride: 1 });
            layers.push(LayerSpec { channels, kernel_width: 3, stride: 2 });
        }
        NetworkConfig { input_dim, layers, prelu_init: 0.25, seed: 0 }
    }

    /// Two layers, `K = 4`.
    pub fn tiny(input_dim: usize) -> Self {
        NetworkConfig {
            input_dim,
            layers: vec![
                LayerSpec { channels: 4, kernel_width: 3, stride: 1 },
                LayerSpec { channels: 4, kernel_width: 3, stride: 1 },
            ],
            prelu_init: 0.25,
            seed: 0,
        }
    }

    /// Four layers (`K = 16`, overall stride 4) sized for laptop-scale runs
    /// on the synthetic data.
    pub fn desk(input_dim: usize) -> Self {
        let spec = |channels, kernel_width, stride| LayerSpec { channels, kernel_width, stride };
        NetworkConfig {
            input_dim,
            layers: vec![spec(8, 9, 1), spec(8, 5, 2), spec(16, 5, 1), spec(16, 5, 2)],
            prelu_init: 0.25,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::Config("input_dim must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(ModelError::Config("need at least one convolution layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.channels == 0 || l.kernel_width == 0 || l.stride == 0 {
                return Err(ModelError::Config(format!("layer {}: channels, kernel width and stride must be positive", i)));
            }
        }
        if !self.prelu_init.is_finite() {
            return Err(ModelError::Config("prelu_init must be finite".into()));
        }
        Ok(())
    }

    /// Number of output filters `K`.
    pub fn k(&self) -> usize {
        self.layers.last().map_or(0, |l| l.channels)
    }

    /// Input span that influences one output position.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for l in &self.layers {
            rf += (l.kernel_width - 1) * jump;
            jump *= l.stride;
        }
        rf
    }

    /// Output length for input length `t`, or `None` when too short.
    pub fn output_len(&self, t: usize) -> Option<usize> {
        let mut len = t;
        for l in &self.layers {
            if len < l.kernel_width {
                return None;
            }
            len = (len - l.kernel_width) / l.stride + 1;
        }
        Some(len)
    }

    /// Shortest admissible input length.
    pub fn min_input_len(&self) -> usize {
        let mut len = 1;
        for l in self.layers.iter().rev() {
            len = (len - 1) * l.stride + l.kernel_width;
        }
        len
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_dim", self.input_dim.to_string()),
            ("channels", join(&self.layers.iter().map(|l| l.channels).collect::<Vec<_>>())),
            ("kernel_widths", join(&self.layers.iter().map(|l| l.kernel_width).collect::<Vec<_>>())),
            ("strides", join(&self.layers.iter().map(|l| l.stride).collect::<Vec<_>>())),
            ("prelu_init", format!("{:?}", self.prelu_init)),
            ("init_seed", self.seed.to_string()),
        ]
    }

    /// Reads `preset` (`sixteen-layer`, `desk` or `tiny`) and/or explicit
    /// `channels`, `kernel_widths`, `strides` lists.
    pub fn from_kv(kv: &mut KvMap, default_input_dim: usize) -> Result<Self, ModelError> {
        let input_dim = kv.take_or("input_dim", default_input_dim)?;
        let mut cfg = match kv.take_str("preset").as_deref() {
            None | Some("sixteen-layer") => NetworkConfig::sixteen_layer(input_dim),
            Some("desk") => NetworkConfig::desk(input_dim),
            Some("tiny") => NetworkConfig::tiny(input_dim),
            Some(other) => {
                return Err(KvError::InvalidValue { key: "preset".into(), reason: format!("unknown preset `{}`", other) }.into())
            }
        };
        let channels = kv.take_list::<usize>("channels")?;
        let widths = kv.take_list::<usize>("kernel_widths")?;
        let strides = kv.take_list::<usize>("strides")?;
        if let Some(channels) = channels {
            let n = channels.len();
            let widths = widths.unwrap_or_else(|| vec![3; n]);
            let strides = strides.unwrap_or_else(|| vec![1; n]);
            if widths.len() != n || strides.len() != n {
                return Err(KvError::InvalidValue {
                    key: "kernel_widths".into(),
                    reason: format!("{} channels but {} kernel widths and {} strides", n, widths.len(), strides.len()),
                }
                .into());
            }
            cfg.layers = (0..n).map(|i| LayerSpec { channels: channels[i], kernel_width: widths[i], stride: strides[i] }).collect();
        } else if widths.is_some() || strides.is_some() {
            return Err(KvError::Missing("channels".into()).into());
        }
        cfg.prelu_init = kv.take_or("prelu_init", cfg.prelu_init)?;
        cfg.seed = kv.take_or("init_seed", cfg.seed)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub network: NetworkConfig,
    pub method: Method,
    /// Number of interior quantile sampling points.
    pub m: usize,
    pub distance: DistanceConfig,
    /// Classifier outputs; only used by [`Method::QuantileClass`].
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.network.validate()?;
        if self.method.uses_quantiles() && self.m == 0 {
            return Err(ModelError::Config("m must be at least 1".into()));
        }
        if self.method == Method::QuantileClass && self.n_classes < 2 {
            return Err(ModelError::Config("classifier needs at least 2 classes".into()));
        }
        Ok(())
    }
}

/// Network weights plus head parameters, in declaration order:
/// per layer `conv{i}.weight`, `conv{i}.bias`, `prelu{i}.slope`, then
/// `alpha.raw` for quantile methods, then `head.weight`, `head.bias` for the
/// classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Parameters registered on one tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

/// Per-instance head output on the tape.
#[derive(Debug, Clone, Copy)]
pub enum HeadVars {
    Quantile(QuantileVars),
    Vector(Var),
}

/// Embedding of one sequence detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    Quantile(QuantileEmbedding),
    Vector(Vec<f64>),
}

impl Representation {
    /// Wasserstein distance for quantile embeddings, negative cosine
    /// similarity for vectors (zero-norm vectors have similarity 0).
    pub fn distance(&self, other: &Representation, cfg: DistanceConfig) -> Result<f64, ModelError> {
        match (self, other) {
            (Representation::Quantile(a), Representation::Quantile(b)) => Ok(wasserstein_distance(a, b, cfg)?),
            (Representation::Vector(a), Representation::Vector(b)) => {
                if a.len() != b.len() {
                    return Err(ModelError::Config(format!("vector lengths {} and {}", a.len(), b.len())));
                }
                Ok(-cosine_similarity(a, b))
            }
            _ => Err(ModelError::Config("cannot compare quantile and vector embeddings".into())),
        }
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Converts row-major `T × D` data to a channels-first `[D, T]` tensor.
pub fn channels_first(data: &[f64], t: usize, d: usize) -> Result<Tensor, TensorError> {
    if data.len() != t * d {
        return Err(TensorError::ShapeMismatch { op: "channels_first", detail: format!("{} values for {}x{}", data.len(), t, d) });
    }
    let mut out = vec![0.0; data.len()];
    for ti in 0..t {
        for di in 0..d {
            out[di * t + ti] = data[ti * d + di];
        }
    }
    Tensor::matrix(d, t, out)
}

/// Class probabilities of the dense softmax head.
pub fn classifier_head(flat: &[f64], weight: &Tensor, bias: &[f64]) -> Result<Vec<f64>, ModelError> {
    if weight.shape().len() != 2 || weight.shape()[1] != flat.len() || weight.shape()[0] != bias.len() || bias.len() < 2 {
        return Err(ModelError::Config(format!("head weight {:?} for {} features and {} classes", weight.shape(), flat.len(), bias.len())));
    }
    let logits: Vec<f64> = (0..bias.len()).map(|c| bias[c] + weight.row(c).iter().zip(flat).map(|(w, x)| w * x).sum::<f64>()).collect();
    Ok(softmax(&logits))
}

impl Model {
    /// Fresh parameters: fan-in scaled uniform kernels, zero biases,
    /// constant PReLU slopes, evenly spaced quantile levels.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.network.seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut cin = config.network.input_dim;
        for (i, l) in config.network.layers.iter().enumerate() {
            let fan_in = (cin * l.kernel_width) as f64;
            let bound = (3.0 / fan_in).sqrt();
            let w: Vec<f64> = (0..l.channels * cin * l.kernel_width).map(|_| rng.random_range(-bound..bound)).collect();
            names.push(format!("conv{}.weight", i));
            params.push(Tensor::new(vec![l.channels, cin, l.kernel_width], w)?);
            names.push(format!("conv{}.bias", i));
            params.push(Tensor::zeros(&[l.channels]));
            names.push(format!("prelu{}.slope", i));
            params.push(Tensor::filled(&[l.channels], config.network.prelu_init));
            cin = l.channels;
        }
        if config.method.uses_quantiles() {
            names.push("alpha.raw".into());
            params.push(Tensor::vector(AlphaParams::uniform(config.m)?.raw().to_vec()));
        }
        if config.method == Method::QuantileClass {
            let features = config.network.k() * config.m;
            let bound = (3.0 / features as f64).sqrt();
            let w: Vec<f64> = (0..config.n_classes * features).map(|_| rng.random_range(-bound..bound)).collect();
            names.push("head.weight".into());
            params.push(Tensor::matrix(config.n_classes, features, w)?);
            names.push("head.bias".into());
            params.push(Tensor::zeros(&[config.n_classes]));
        }
        Ok(Model { config, names, params })
    }

    /// Rebuilds a model from stored parameters; shapes must match the config.
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self, ModelError> {
        let template = Model::init(config)?;
        if template.params.len() != params.len() {
            return Err(ModelError::Config(format!("expected {} parameter tensors, got {}", template.params.len(), params.len())));
        }
        for ((name, t), p) in template.names.iter().zip(&template.params).zip(&params) {
            if t.shape() != p.shape() {
                return Err(ModelError::Config(format!("{}: expected shape {:?}, got {:?}", name, t.shape(), p.shape())));
            }
        }
        Ok(Model { config: template.config, names: template.names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn alpha_index(&self) -> Option<usize> {
        self.config.method.uses_quantiles().then(|| 3 * self.config.network.layers.len())
    }

    fn head_index(&self) -> Option<usize> {
        (self.config.method == Method::QuantileClass).then(|| 3 * self.config.network.layers.len() + 1)
    }

    pub fn alphas(&self) -> Option<AlphaParams> {
        self.alpha_index().map(|i| AlphaParams::from_raw(self.params[i].data().to_vec()).expect("alpha tensor is non-empty"))
    }

    /// Registers every parameter on `tape`, in declaration order.
    pub fn register(&self, tape: &mut Tape) -> Result<ParamVars, ModelError> {
        let vars = self.params.iter().map(|p| tape.param(p.clone())).collect::<Result<Vec<_>, _>>()?;
        Ok(ParamVars { vars })
    }

    /// Breakpoints on the tape; `None` for max pooling.
    pub fn breakpoints(&self, tape: &mut Tape, pv: &ParamVars) -> Result<Option<Var>, ModelError> {
        match self.alpha_index() {
            Some(i) => Ok(Some(quantile::breakpoints_on_tape(tape, pv.vars[i])?)),
            None => Ok(None),
        }
    }

    /// `Γ`: `[D, T]` channels-first input to `[K, T']` activations.
    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, input: &Tensor) -> Result<Var, ModelError> {
        let shape = input.shape();
        if shape.len() != 2 || shape[0] != self.config.network.input_dim {
            return Err(ModelError::InputDim { expected: self.config.network.input_dim, got: shape.first().copied().unwrap_or(0) });
        }
        let min = self.config.network.min_input_len();
        if shape[1] < min {
            return Err(ModelError::SequenceTooShort { len: shape[1], min });
        }
        let mut x = tape.constant(input.clone())?;
        for (i, l) in self.config.network.layers.iter().enumerate() {
            let y = tape.conv1d(x, pv.vars[3 * i], pv.vars[3 * i + 1], l.stride)?;
            x = tape.prelu(y, pv.vars[3 * i + 2])?;
        }
        Ok(x)
    }

    /// Aggregation head applied to the activations of one sequence.
    pub fn head(&self, tape: &mut Tape, activations: Var, breakpoints: Option<Var>) -> Result<HeadVars, ModelError> {
        match (self.config.method, breakpoints) {
            (Method::MaxNpl, _) => Ok(HeadVars::Vector(tape.max_last(activations)?)),
            (Method::QuantileWasserstein, Some(bp)) => Ok(HeadVars::Quantile(quantile::embed(tape, activations, bp)?)),
            (_, Some(bp)) => {
                let qv = quantile::embed(tape, activations, bp)?;
                Ok(HeadVars::Vector(flatten_on_tape(tape, &qv)?))
            }
            (_, None) => Err(ModelError::Config("quantile head without breakpoints".into())),
        }
    }

    /// Classifier logits for a flattened embedding.
    pub fn logits(&self, tape: &mut Tape, pv: &ParamVars, flat: Var) -> Result<Var, ModelError> {
        let h = self.head_index().ok_or_else(|| ModelError::Config("model has no classifier head".into()))?;
        Ok(tape.matvec(pv.vars[h], flat, pv.vars[h + 1])?)
    }

    pub fn head_params(&self) -> Option<(&Tensor, &Tensor)> {
        self.head_index().map(|h| (&self.params[h], &self.params[h + 1]))
    }

    /// Embedding used at test time: the quantile embedding for the
    /// Wasserstein variant, the flattened or pooled vector otherwise.
    pub fn represent(&self, input: &Tensor) -> Result<Representation, ModelError> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape)?;
        let bp = self.breakpoints(&mut tape, &pv)?;
        let act = self.forward(&mut tape, &pv, input)?;
        Ok(match self.head(&mut tape, act, bp)? {
            HeadVars::Quantile(qv) => Representation::Quantile(qv.to_embedding(&tape, bp.expect("quantile head has breakpoints"))?),
            HeadVars::Vector(v) => Representation::Vector(tape.value(v).data().to_vec()),
        })
    }

    /// Raw filter activations, one vector per filter.
    pub fn activations(&self, input: &Tensor) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape)?;
        let act = self.forward(&mut tape, &pv, input)?;
        let t = tape.value(act);
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    pub fn config_pairs(&self) -> Vec<(&'static str, String)> {
        let mut pairs = vec![("method", self.config.method.to_string())];
        pairs.extend(self.config.network.to_pairs());
        pairs.push(("m", self.config.m.to_string()));
        pairs.push(("p", self.config.distance.p().to_string()));
        pairs.push(("n_classes", self.config.n_classes.to_string()));
        pairs
    }
}

/// `Q̄` at the interior breakpoints, flattened filter-major to `[K·M]`.
pub fn flatten_on_tape(tape: &mut Tape, qv: &QuantileVars) -> Result<Var, TensorError> {
    let shape = tape.value(qv.q).shape().to_vec();
    let (k, width) = (shape[0], shape[1]);
    let interior = tape.slice_last(qv.q, 1, width - 1)?;
    tape.reshape(interior, vec![k * (width - 2)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(method: Method, network: NetworkConfig) -> ModelConfig {
        ModelConfig { network, method, m: 4, distance: DistanceConfig::default(), n_classes: 3 }
    }

    #[test]
    fn receptive_field_and_lengths() {
        let net = NetworkConfig::sixteen_layer(6);
        assert_eq!(net.layers.len(), 16);
        assert_eq!(net.k(), 128);
        let min = net.min_input_len();
        assert_eq!(net.output_len(min), Some(1));
        assert_eq!(net.output_len(min - 1), None);
        assert!(net.receptive_field() <= min);
        let tiny = NetworkConfig::tiny(1);
        assert_eq!(tiny.receptive_field(), 5);
        assert_eq!(tiny.output_len(32), Some(28));
    }

    #[test]
    fn identity_network_passes_input_through() {
        let network = NetworkConfig {
            input_dim: 1,
            layers: vec![LayerSpec { channels: 1, kernel_width: 1, stride: 1 }],
            prelu_init: 1.0,
            seed: 0,
        };
        let mut model = Model::init(config(Method::MaxNpl, network)).unwrap();
        model.params_mut()[0] = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let input = Tensor::matrix(1, 5, vec![-1.0, 2.0, -3.0, 0.5, 0.0]).unwrap();
        assert_eq!(model.activations(&input).unwrap(), vec![input.data().to_vec()]);
    }

    #[test]
    fn convolution_is_local() {
        let model = Model::init(config(Method::MaxNpl, NetworkConfig::tiny(2).with_seed(4))).unwrap();
        let a: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut b = a.clone();
        // change samples from time step 15 on (rows of a T×D layout)
        for v in &mut b[30..] {
            *v += 1.0;
        }
        let ya = model.activations(&channels_first(&a, 20, 2).unwrap()).unwrap();
        let yb = model.activations(&channels_first(&b, 20, 2).unwrap()).unwrap();
        // output t sees inputs t..t+4
        for f in 0..4 {
            assert_eq!(ya[f][..11], yb[f][..11]);
            assert_ne!(ya[f][11..], yb[f][11..]);
        }
    }

    #[test]
    fn too_short_sequence_is_rejected() {
        let model = Model::init(config(Method::QuantileWasserstein, NetworkConfig::tiny(1))).unwrap();
        let input = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(model.represent(&input), Err(ModelError::SequenceTooShort { len: 4, min: 5 })));
    }

    #[test]
    fn max_pool_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 5.0, 2.0, 7.0, 7.0, 7.0]).unwrap()).unwrap();
        let y = tape.max_last(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0]);
    }

    #[test]
    fn classifier_head_examples() {
        let zero = Tensor::zeros(&[4, 3]);
        let p = classifier_head(&[1.0, 2.0, 3.0], &zero, &[0.0; 4]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = classifier_head(&[], &Tensor::zeros(&[3, 0]), &[10.0, 0.0, 0.0]).unwrap();
        let argmax = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 0);
    }

    #[test]
    fn representations_per_method() {
        let input = channels_first(&(0..30).map(|i| (i as f64).cos()).collect::<Vec<_>>(), 30, 1).unwrap();
        for method in Method::ALL {
            let model = Model::init(config(method, NetworkConfig::tiny(1))).unwrap();
            match (method, model.represent(&input).unwrap()) {
                (Method::QuantileWasserstein, Representation::Quantile(e)) => {
                    assert_eq!((e.k(), e.m()), (4, 4));
                }
                (Method::MaxNpl, Representation::Vector(v)) => assert_eq!(v.len(), 4),
                (_, Representation::Vector(v)) => assert_eq!(v.len(), 16),
                (m, r) => panic!("{m}: unexpected {r:?}"),
            }
        }
    }

    #[test]
    fn flatten_on_tape_matches_embedding_flatten() {
        let model = Model::init(config(Method::QuantileWasserstein, NetworkConfig::tiny(1).with_seed(9))).unwrap();
        let input = channels_first(&(0..30).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>(), 30, 1).unwrap();
        let mut tape = Tape::new();
        let pv = model.register(&mut tape).unwrap();
        let bp = model.breakpoints(&mut tape, &pv).unwrap().unwrap();
        let act = model.forward(&mut tape, &pv, &input).unwrap();
        let qv = quantile::embed(&mut tape, act, bp).unwrap();
        let flat = flatten_on_tape(&mut tape, &qv).unwrap();
        let e = qv.to_embedding(&tape, bp).unwrap();
        for (x, y) in tape.value(flat).data().iter().zip(e.flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("maxpool".parse::<Method>().is_err());
    }

    #[test]
    fn from_parts_checks_shapes() {
        let cfg = config(Method::QuantileClass, NetworkConfig::tiny(1));
        let model = Model::init(cfg.clone()).unwrap();
        assert_eq!(model.names().last().unwrap(), "head.bias");
        let mut params = model.params().to_vec();
        params[0] = Tensor::zeros(&[1]);
        assert!(Model::from_parts(cfg, params).is_err());
    }
}
