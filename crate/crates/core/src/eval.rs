//! Enrollment-based evaluation: verification, identification and imposter
//! rejection, each resampled over several repeats.
//!
//! Per repeat every test subject keeps five sequences aside as observed
//! sequences and enrolls the rest. An episode is an `n`-subset of one
//! subject's observed sequences; its distance to subject `j` is
//! `d_j = (1/n) Σ_i min_k d(s_i, s_jk)` over `j`'s enrolled sequences.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{Model, ModelError, Representation};

/// Observed sequences held out per subject.
pub const HELD_OUT: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty enrollment")]
    EmptyEnrollment,
    #[error("no {0} scores")]
    EmptyClass(&'static str),
    #[error("subject `{id}` has {count} sequences; at least 2 are needed")]
    TooFewSequences { id: String, count: usize },
    #[error("n = {n} exceeds the {held_out} held-out sequences of subject `{id}`")]
    NTooLarge { n: usize, held_out: usize, id: String },
    #[error("scenario needs at least {need} test subjects, have {have}")]
    TooFewSubjects { need: usize, have: usize },
    #[error("invalid protocol setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Verification,
    Identification,
    Imposter,
}

impl Scenario {
    pub fn short(&self) -> &'static str {
        match self {
            Scenario::Verification => "v",
            Scenario::Identification => "id",
            Scenario::Imposter => "imp",
        }
    }

    pub fn metric(&self) -> &'static str {
        match self {
            Scenario::Identification => "accuracy",
            _ => "auc",
        }
    }

    /// Enrolled-fraction grid used when none is given.
    pub fn default_fractions(&self) -> Vec<f64> {
        match self {
            Scenario::Imposter => vec![0.1, 0.25, 0.5],
            _ => vec![0.1, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "v" | "verification" => Ok(Scenario::Verification),
            "id" | "identification" => Ok(Scenario::Identification),
            "imp" | "imposter" => Ok(Scenario::Imposter),
            _ => Err(format!("unknown scenario `{}` (expected v, id or imp)", s)),
        }
    }
}

/// Symmetric distances between all sequences of a dataset, in canonical
/// order (subject by subject).
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    offsets: Vec<usize>,
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(data: &Dataset, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let mut offsets = Vec::with_capacity(data.n_subjects() + 1);
        let mut n = 0;
        for s in data.subjects() {
            offsets.push(n);
            n += s.sequences.len();
        }
        offsets.push(n);
        let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| (0..n).map(|j| if j < i { 0.0 } else { f(i, j) }).collect()).collect();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                values[i * n + j] = rows[i][j];
                values[j * n + i] = rows[i][j];
            }
        }
        DistanceMatrix { offsets, n, values }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Distance between sequence `a` of subject `sa` and sequence `b` of subject `sb`.
    pub fn get(&self, sa: usize, a: usize, sb: usize, b: usize) -> f64 {
        self.values[(self.offsets[sa] + a) * self.n + self.offsets[sb] + b]
    }

    pub fn flat(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Source of sequence distances for the protocol.
pub trait DistanceBackend: Sync {
    fn matrix(&self, data: &Dataset) -> Result<DistanceMatrix, EvalError>;

    /// Stochastic backends return fresh distances for every repeat so that
    /// repeats are independent; deterministic ones keep the default.
    fn repeat_matrix(&self, _data: &Dataset, _repeat: usize) -> Option<Result<DistanceMatrix, EvalError>> {
        None
    }
}

/// Distances from a trained model: Wasserstein for quantile embeddings,
/// negative cosine similarity for vector embeddings.
pub struct ModelBackend<'a> {
    pub model: &'a Model,
}

impl ModelBackend<'_> {
    pub fn representations(&self, data: &Dataset) -> Result<Vec<Representation>, EvalError> {
        let seqs: Vec<_> = data.subjects().iter().flat_map(|s| s.sequences.iter()).collect();
        Ok(seqs
            .par_iter()
            .map(|r| {
                let input = r.input().map_err(ModelError::from)?;
                self.model.represent(&input)
            })
            .collect::<Result<Vec<_>, ModelError>>()?)
    }
}

impl DistanceBackend for ModelBackend<'_> {
    fn matrix(&self, data: &Dataset) -> Result<DistanceMatrix, EvalError> {
        let reps = self.representations(data)?;
        let cfg = self.model.config().distance;
        // Representations of one model always share a layout, so this cannot fail.
        Ok(DistanceMatrix::from_fn(data, |i, j| reps[i].distance(&reps[j], cfg).expect("embeddings share a layout")))
    }
}

/// 0 within a subject, 1 across subjects.
pub struct OracleBackend;

impl DistanceBackend for OracleBackend {
    fn matrix(&self, data: &Dataset) -> Result<DistanceMatrix, EvalError> {
        let owner: Vec<usize> = data.subjects().iter().enumerate().flat_map(|(i, s)| std::iter::repeat_n(i, s.sequences.len())).collect();
        Ok(DistanceMatrix::from_fn(data, |i, j| if owner[i] == owner[j] { 0.0 } else { 1.0 }))
    }
}

/// Independent uniform distances, fixed by the seed and redrawn per repeat.
pub struct RandomBackend {
    pub seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomBackend {
    fn draw(&self, data: &Dataset, stream: u64) -> DistanceMatrix {
        let key = splitmix(splitmix(self.seed) ^ stream);
        DistanceMatrix::from_fn(data, |i, j| {
            if i == j {
                return 0.0;
            }
            let z = splitmix(key ^ ((i as u64) << 32 | j as u64));
            (z >> 11) as f64 / (1u64 << 53) as f64
        })
    }
}

impl DistanceBackend for RandomBackend {
    fn matrix(&self, data: &Dataset) -> Result<DistanceMatrix, EvalError> {
        Ok(self.draw(data, 0))
    }

    fn repeat_matrix(&self, data: &Dataset, repeat: usize) -> Option<Result<DistanceMatrix, EvalError>> {
        Some(Ok(self.draw(data, repeat as u64 + 1)))
    }
}

/// `d_j` from `rows[i][k] = d(observed_i, enrolled_k)`.
pub fn subject_distance(rows: &[Vec<f64>]) -> Result<f64, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::Invalid("no observed sequences".into()));
    }
    let mut total = 0.0;
    for row in rows {
        if row.is_empty() {
            return Err(EvalError::EmptyEnrollment);
        }
        total += row.iter().copied().fold(f64::INFINITY, f64::min);
    }
    Ok(total / rows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Acceptance threshold `d ≤ threshold`; `None` for the origin.
    pub threshold: Option<f64>,
}

/// `P(genuine < imposter) + ½ P(genuine = imposter)`.
pub fn rank_auc(genuine: &[f64], imposter: &[f64]) -> Result<f64, EvalError> {
    if genuine.is_empty() {
        return Err(EvalError::EmptyClass("genuine"));
    }
    if imposter.is_empty() {
        return Err(EvalError::EmptyClass("imposter"));
    }
    let mut sorted = imposter.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &g in genuine {
        let below_or_eq = sorted.partition_point(|&x| x <= g);
        let below = sorted.partition_point(|&x| x < g);
        wins += (sorted.len() - below_or_eq) as f64 + 0.5 * (below_or_eq - below) as f64;
    }
    Ok(wins / (genuine.len() * imposter.len()) as f64)
}

/// ROC for accepting `d ≤ t` over every distinct observed score, from
/// `(0, 0)` to `(1, 1)`.
pub fn roc_curve(genuine: &[f64], imposter: &[f64]) -> Result<Vec<RocPoint>, EvalError> {
    if genuine.is_empty() {
        return Err(EvalError::EmptyClass("genuine"));
    }
    if imposter.is_empty() {
        return Err(EvalError::EmptyClass("imposter"));
    }
    let mut all: Vec<(f64, bool)> = genuine.iter().map(|&g| (g, true)).chain(imposter.iter().map(|&i| (i, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (ng, ni) = (genuine.len() as f64, imposter.len() as f64);
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: None }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < all.len() {
        let t = all[k].0;
        while k < all.len() && all[k].0 == t {
            if all[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint { fpr: fp as f64 / ni, tpr: tp as f64 / ng, threshold: Some(t) });
    }
    Ok(points)
}

/// Trapezoidal area under a ROC curve.
pub fn roc_area(points: &[RocPoint]) -> f64 {
    points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// Enrollment/observed partition of one repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrollmentSplit {
    pub enrolled: Vec<Vec<usize>>,
    pub observed: Vec<Vec<usize>>,
    /// Some subject had fewer than `HELD_OUT + 1` sequences.
    pub reduced_holdout: bool,
}

impl EnrollmentSplit {
    pub fn draw(data: &Dataset, seed: u64, repeat: usize) -> Result<Self, EvalError> {
        let mut rng = cell_rng(seed, &[0, repeat as u64]);
        let mut enrolled = Vec::new();
        let mut observed = Vec::new();
        let mut reduced = false;
        for s in data.subjects() {
            let count = s.sequences.len();
            if count < 2 {
                return Err(EvalError::TooFewSequences { id: s.id.clone(), count });
            }
            let held = HELD_OUT.min(count - 1);
            reduced |= held < HELD_OUT;
            let mut order: Vec<usize> = (0..count).collect();
            order.shuffle(&mut rng);
            let mut obs = order[..held].to_vec();
            let mut enr = order[held..].to_vec();
            obs.sort_unstable();
            enr.sort_unstable();
            observed.push(obs);
            enrolled.push(enr);
        }
        Ok(EnrollmentSplit { enrolled, observed, reduced_holdout: reduced })
    }
}

fn cell_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = seed;
    for &p in path {
        h = h.wrapping_mul(0x100_0000_01B3).wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// All `n`-subsets of `items`, in lexicographic order.
pub fn combinations(items: &[usize], n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(n);
    fn rec(items: &[usize], n: usize, start: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == n {
            out.push(current.clone());
            return;
        }
        for i in start..items.len() {
            if items.len() - i < n - current.len() {
                break;
            }
            current.push(items[i]);
            rec(items, n, i + 1, current, out);
            current.pop();
        }
    }
    rec(items, n, 0, &mut current, &mut out);
    out
}

/// Number of subjects enrolled for a fraction: `max(1, ⌊f·S + ½⌋)`.
pub fn enrolled_count(n_subjects: usize, fraction: f64) -> usize {
    ((fraction * n_subjects as f64 + 0.5).floor() as usize).max(1)
}

struct Episodes<'a> {
    data: &'a Dataset,
    dist: &'a DistanceMatrix,
    split: &'a EnrollmentSplit,
    n: usize,
}

impl Episodes<'_> {
    fn of(&self, subject: usize) -> Result<Vec<Vec<usize>>, EvalError> {
        let obs = &self.split.observed[subject];
        if self.n == 0 {
            return Err(EvalError::Invalid("n must be at least 1".into()));
        }
        if self.n > obs.len() {
            return Err(EvalError::NTooLarge { n: self.n, held_out: obs.len(), id: self.data.subjects()[subject].id.clone() });
        }
        Ok(combinations(obs, self.n))
    }

    fn d(&self, subject: usize, episode: &[usize], claimed: usize) -> Result<f64, EvalError> {
        let enr = &self.split.enrolled[claimed];
        let rows: Vec<Vec<f64>> = episode.iter().map(|&o| enr.iter().map(|&e| self.dist.get(subject, o, claimed, e)).collect()).collect();
        subject_distance(&rows)
    }
}

/// Outcome of one scenario cell in one repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatOutcome {
    pub value: f64,
    pub roc: Option<Vec<RocPoint>>,
    /// Identification with a single enrolled subject (accuracy 1 by convention).
    pub degenerate: bool,
}

fn choose(rng: &mut ChaCha8Rng, pool: &[usize], k: usize) -> Vec<usize> {
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), k.min(pool.len())).iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

/// Runs one scenario for one repeat on a precomputed distance matrix.
pub fn evaluate_repeat(
    data: &Dataset,
    dist: &DistanceMatrix,
    split: &EnrollmentSplit,
    scenario: Scenario,
    n: usize,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RepeatOutcome, EvalError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvalError::Invalid(format!("enrolled fraction {} outside (0, 1]", fraction)));
    }
    let s = data.n_subjects();
    let ep = Episodes { data, dist, split, n };
    let all: Vec<usize> = (0..s).collect();
    match scenario {
        Scenario::Verification => {
            if s < 2 {
                return Err(EvalError::TooFewSubjects { need: 2, have: s });
            }
            let enrolled = choose(rng, &all, enrolled_count(s, fraction));
            let (mut genuine, mut imposter) = (Vec::new(), Vec::new());
            for i in 0..s {
                for episode in ep.of(i)? {
                    for &j in &enrolled {
                        let d = ep.d(i, &episode, j)?;
                        if i == j {
                            genuine.push(d);
                        } else {
                            imposter.push(d);
                        }
                    }
                }
            }
            let roc = roc_curve(&genuine, &imposter)?;
            Ok(RepeatOutcome { value: rank_auc(&genuine, &imposter)?, roc: Some(roc), degenerate: false })
        }
        Scenario::Identification => {
            if s < 1 {
                return Err(EvalError::TooFewSubjects { need: 1, have: s });
            }
            let enrolled = choose(rng, &all, enrolled_count(s, fraction));
            let (mut correct, mut total) = (0usize, 0usize);
            for &i in &enrolled {
                for episode in ep.of(i)? {
                    let mut best = (f64::INFINITY, usize::MAX);
                    for &j in &enrolled {
                        let d = ep.d(i, &episode, j)?;
                        if d < best.0 {
                            best = (d, j);
                        }
                    }
                    correct += usize::from(best.1 == i);
                    total += 1;
                }
            }
            let degenerate = enrolled.len() == 1;
            let value = if degenerate { 1.0 } else { correct as f64 / total as f64 };
            Ok(RepeatOutcome { value, roc: None, degenerate })
        }
        Scenario::Imposter => {
            if s < 2 {
                return Err(EvalError::TooFewSubjects { need: 2, have: s });
            }
            let imposters = choose(rng, &all, s / 2);
            let rest: Vec<usize> = all.iter().copied().filter(|i| imposters.binary_search(i).is_err()).collect();
            let enrolled = choose(rng, &rest, enrolled_count(s, fraction));
            let score = |i: usize, episode: &[usize]| -> Result<f64, EvalError> {
                let mut m = f64::INFINITY;
                for &j in &enrolled {
                    m = m.min(ep.d(i, episode, j)?);
                }
                Ok(m)
            };
            let (mut genuine, mut imposter) = (Vec::new(), Vec::new());
            for &i in &enrolled {
                for episode in ep.of(i)? {
                    genuine.push(score(i, &episode)?);
                }
            }
            for &i in &imposters {
                for episode in ep.of(i)? {
                    imposter.push(score(i, &episode)?);
                }
            }
            let roc = roc_curve(&genuine, &imposter)?;
            Ok(RepeatOutcome { value: rank_auc(&genuine, &imposter)?, roc: Some(roc), degenerate: false })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub scenarios: Vec<Scenario>,
    pub ns: Vec<usize>,
    /// Per-scenario default grid when `None`.
    pub fractions: Option<Vec<f64>>,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig { scenarios: vec![Scenario::Verification], ns: vec![1], fractions: Some(vec![1.0]), repeats: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub scenario: Scenario,
    pub n: usize,
    pub enrolled_fraction: f64,
    pub metric: &'static str,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
    /// One curve per repeat; empty for identification.
    pub roc: Vec<Vec<RocPoint>>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub cells: Vec<Cell>,
    /// Some subject had too few sequences for the full hold-out.
    pub reduced_holdout: bool,
}

/// Sample mean and standard error of the mean (`0` for a single value).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    (mean, (var / r).sqrt())
}

/// Every requested scenario × n × fraction cell over `repeats` resampled splits.
pub fn run_protocol(data: &Dataset, backend: &dyn DistanceBackend, cfg: &ProtocolConfig) -> Result<EvalReport, EvalError> {
    match backend.repeat_matrix(data, 0) {
        None => run_protocol_on(data, &backend.matrix(data)?, cfg),
        Some(first) => {
            let mut matrices = vec![first?];
            for r in 1..cfg.repeats {
                matrices.push(backend.repeat_matrix(data, r).expect("backend redraws every repeat")?);
            }
            run_protocol_with(data, |r| &matrices[r], cfg)
        }
    }
}

/// Runs the protocol on one precomputed matrix shared by all repeats.
pub fn run_protocol_on(data: &Dataset, dist: &DistanceMatrix, cfg: &ProtocolConfig) -> Result<EvalReport, EvalError> {
    run_protocol_with(data, |_| dist, cfg)
}

fn run_protocol_with<'a>(data: &Dataset, dist: impl Fn(usize) -> &'a DistanceMatrix, cfg: &ProtocolConfig) -> Result<EvalReport, EvalError> {
    if cfg.repeats == 0 {
        return Err(EvalError::Invalid("repeats must be at least 1".into()));
    }
    let splits = (0..cfg.repeats).map(|r| EnrollmentSplit::draw(data, cfg.seed, r)).collect::<Result<Vec<_>, _>>()?;
    let mut cells = Vec::new();
    for &scenario in &cfg.scenarios {
        let fractions = cfg.fractions.clone().unwrap_or_else(|| scenario.default_fractions());
        for &n in &cfg.ns {
            for (fi, &fraction) in fractions.iter().enumerate() {
                let mut values = Vec::with_capacity(cfg.repeats);
                let mut roc = Vec::new();
                let mut degenerate = false;
                for (r, split) in splits.iter().enumerate() {
                    let mut rng = cell_rng(cfg.seed, &[1, scenario as u64, fi as u64, r as u64]);
                    let out = evaluate_repeat(data, dist(r), split, scenario, n, fraction, &mut rng)?;
                    values.push(out.value);
                    roc.extend(out.roc);
                    degenerate |= out.degenerate;
                }
                let (mean, std_error) = mean_and_se(&values);
                cells.push(Cell { scenario, n, enrolled_fraction: fraction, metric: scenario.metric(), values, mean, std_error, roc, degenerate });
            }
        }
    }
    Ok(EvalReport { cells, reduced_holdout: splits.iter().any(|s| s.reduced_holdout) })
}

impl EvalReport {
    /// `scenario,n,enrolled_fraction,repeat,metric,value`, one row per repeat.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,n,enrolled_fraction,repeat,metric,value\n");
        for c in &self.cells {
            for (r, v) in c.values.iter().enumerate() {
                out.push_str(&format!("{},{},{},{},{},{}\n", c.scenario, c.n, c.enrolled_fraction, r, c.metric, v));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
