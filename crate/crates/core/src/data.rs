//! Sequence datasets: manifest + raw binary files, subject-disjoint splits,
//! and a synthetic generator whose subjects differ only in amplitude shape.
//!
//! On-disk layout: `manifest.json`
//! (`{"subjects":[{"id":..,"sequences":[{"file":..,"T":..,"D":..}]}]}`) next
//! to one file per sequence holding `T·D` little-endian `f64` values in
//! row-major `T × D` order, without header.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kv::{KvError, KvMap};
use crate::model::channels_first;
use crate::tensor::{Tensor, TensorError};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed manifest: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("{path}: expected {expected} bytes for {t}x{d} values, found {found}")]
    Length { path: PathBuf, expected: u64, found: u64, t: usize, d: usize },
    #[error("{path}: non-finite value at row {row}, column {col}")]
    NonFinite { path: PathBuf, row: usize, col: usize },
    #[error("duplicate {what} `{id}`")]
    Duplicate { what: &'static str, id: String },
    #[error("sequence `{id}` has D = {got}, dataset has D = {expected}")]
    DimMismatch { id: String, expected: usize, got: usize },
    #[error("sequence `{0}` is empty")]
    Empty(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Kv(#[from] KvError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub subject_id: String,
    pub seq_id: String,
    pub t: usize,
    pub d: usize,
    /// Row-major `T × D`.
    pub data: Vec<f64>,
    pub source: String,
}

impl SequenceRecord {
    pub fn new(subject_id: impl Into<String>, seq_id: impl Into<String>, t: usize, d: usize, data: Vec<f64>) -> Self {
        SequenceRecord { subject_id: subject_id.into(), seq_id: seq_id.into(), t, d, data, source: String::new() }
    }

    /// Channels-first `[D, T]` network input.
    pub fn input(&self) -> Result<Tensor, TensorError> {
        channels_first(&self.data, self.t, self.d)
    }

    /// Values of channel `c` over time.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.t).map(|i| self.data[i * self.d + c]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub sequences: Vec<SequenceRecord>,
}

/// Subjects sorted by id, each subject's sequences sorted by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    subjects: Vec<Subject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSubject {
    id: String,
    sequences: Vec<ManifestSequence>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSequence {
    file: String,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "D")]
    d: usize,
}

impl Dataset {
    /// Validates ids, dimensions and values, then orders canonically.
    pub fn new(mut subjects: Vec<Subject>) -> Result<Self, DataError> {
        subjects.sort_by(|a, b| a.id.cmp(&b.id));
        let mut dim = None;
        for w in subjects.windows(2) {
            if w[0].id == w[1].id {
                return Err(DataError::Duplicate { what: "subject", id: w[0].id.clone() });
            }
        }
        // Sequence ids double as file names, so they are unique dataset-wide.
        let mut seen = BTreeSet::new();
        for s in &mut subjects {
            s.sequences.sort_by(|a, b| a.seq_id.cmp(&b.seq_id));
            for r in &s.sequences {
                if !seen.insert(r.seq_id.as_str()) {
                    return Err(DataError::Duplicate { what: "sequence", id: r.seq_id.clone() });
                }
            }
            for r in &s.sequences {
                if r.t == 0 || r.d == 0 {
                    return Err(DataError::Empty(r.seq_id.clone()));
                }
                let expected = *dim.get_or_insert(r.d);
                if r.d != expected {
                    return Err(DataError::DimMismatch { id: r.seq_id.clone(), expected, got: r.d });
                }
                if let Some(i) = r.data.iter().position(|v| !v.is_finite()) {
                    return Err(DataError::NonFinite { path: PathBuf::from(&r.source), row: i / r.d, col: i % r.d });
                }
            }
        }
        Ok(Dataset { subjects })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_sequences(&self) -> usize {
        self.subjects.iter().map(|s| s.sequences.len()).sum()
    }

    pub fn dim(&self) -> Option<usize> {
        self.subjects.iter().flat_map(|s| s.sequences.first()).map(|r| r.d).next()
    }

    pub fn min_len(&self) -> Option<usize> {
        self.subjects.iter().flat_map(|s| s.sequences.iter().map(|r| r.t)).min()
    }

    pub fn subject_ids(&self) -> Vec<&str> {
        self.subjects.iter().map(|s| s.id.as_str()).collect()
    }

    /// Keeps only the named subjects.
    pub fn select(&self, ids: &BTreeSet<String>) -> Dataset {
        Dataset { subjects: self.subjects.iter().filter(|s| ids.contains(&s.id)).cloned().collect() }
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|source| DataError::Io { path: path.clone(), source })?;
        let manifest: ManifestFile = serde_json::from_str(&text).map_err(|source| DataError::Manifest { path, source })?;
        let mut subjects = Vec::new();
        for ms in manifest.subjects {
            let sequences = ms
                .sequences
                .par_iter()
                .map(|seq| {
                    let file = dir.join(&seq.file);
                    let data = read_values(&file, seq.t, seq.d)?;
                    Ok(SequenceRecord {
                        subject_id: ms.id.clone(),
                        seq_id: seq.file.clone(),
                        t: seq.t,
                        d: seq.d,
                        data,
                        source: file.display().to_string(),
                    })
                })
                .collect::<Result<Vec<_>, DataError>>()?;
            subjects.push(Subject { id: ms.id, sequences });
        }
        Dataset::new(subjects)
    }

    /// Writes the manifest and one binary file per sequence. Sequence ids
    /// become file names, so they must be valid relative paths.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
        let mut manifest = ManifestFile { subjects: Vec::new() };
        for s in &self.subjects {
            let mut entries = Vec::new();
            for r in &s.sequences {
                let path = dir.join(&r.seq_id);
                let bytes: Vec<u8> = r.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                fs::write(&path, bytes).map_err(|source| DataError::Io { path, source })?;
                entries.push(ManifestSequence { file: r.seq_id.clone(), t: r.t, d: r.d });
            }
            manifest.subjects.push(ManifestSubject { id: s.id.clone(), sequences: entries });
        }
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|source| DataError::Io { path, source })
    }
}

/// Reads `t·d` little-endian `f64` values from `path`.
pub fn read_values(path: &Path, t: usize, d: usize) -> Result<Vec<f64>, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let expected = 8 * (t * d) as u64;
    if bytes.len() as u64 != expected {
        return Err(DataError::Length { path: path.to_path_buf(), expected, found: bytes.len() as u64, t, d });
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFinite { path: path.to_path_buf(), row: i / d.max(1), col: i % d.max(1) });
    }
    Ok(values)
}

/// Reads a standalone sequence file; `T` is inferred from the length.
pub fn read_sequence(path: &Path, d: usize) -> Result<SequenceRecord, DataError> {
    let len = fs::metadata(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?.len();
    let row = 8 * d as u64;
    if d == 0 || len == 0 || len % row != 0 {
        return Err(DataError::Length { path: path.to_path_buf(), expected: row * (len / row.max(1)).max(1), found: len, t: (len / row.max(1)) as usize, d });
    }
    let t = (len / row) as usize;
    let data = read_values(path, t, d)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(SequenceRecord { subject_id: String::new(), seq_id: name, t, d, data, source: path.display().to_string() })
}

/// Number of training subjects for a fraction: `floor(f·S + 0.5)`.
pub fn train_count(n_subjects: usize, fraction: f64) -> usize {
    (fraction * n_subjects as f64 + 0.5).floor() as usize
}

/// Partitions subjects (never sequences) into `(train, test)`.
pub fn split_by_subject(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    let n = data.n_subjects();
    if n < 2 {
        return Err(DataError::Split(format!("need at least 2 subjects, have {}", n)));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(DataError::Split(format!("train fraction {} outside [0, 1]", train_fraction)));
    }
    let n_train = train_count(n, train_fraction);
    if n_train == 0 || n_train == n {
        return Err(DataError::Split(format!("fraction {} of {} subjects leaves one side empty", train_fraction, n)));
    }
    let mut ids: Vec<String> = data.subject_ids().into_iter().map(String::from).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train: BTreeSet<String> = ids[..n_train].iter().cloned().collect();
    let test: BTreeSet<String> = ids[n_train..].iter().cloned().collect();
    Ok((data.select(&train), data.select(&test)))
}

/// Parameters of the synthetic generator.
///
/// Every subject draws bump amplitudes from a symmetric two-component
/// mixture centred on the shared mean `mean`, with a subject-specific
/// component offset and spread, plus shared atoms at `mean ± clip`. All
/// amplitudes are clipped to `[mean - clip, mean + clip]`, so subjects share
/// the same mean amplitude and the same extreme values.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub sequences_per_subject: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub d: usize,
    pub noise: f64,
    pub width_min: usize,
    pub width_max: usize,
    /// Slot length; bumps occupy disjoint slots.
    pub slot: usize,
    /// Fraction of slots holding a bump.
    pub fill: f64,
    pub mean: f64,
    pub clip: f64,
    /// Probability of drawing one of the shared extreme atoms.
    pub anchor: f64,
    pub offset_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_subjects: 30,
            sequences_per_subject: 20,
            t_min: 480,
            t_max: 544,
            d: 1,
            noise: 0.05,
            width_min: 4,
            width_max: 7,
            slot: 8,
            fill: 0.9,
            mean: 1.0,
            clip: 0.9,
            anchor: 0.05,
            offset_max: 0.7,
            scale_min: 0.02,
            scale_max: 0.2,
            seed: 0,
        }
    }
}

/// Amplitude distribution of one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Signature {
    pub mean: f64,
    pub offset: f64,
    pub scale: f64,
    pub clip: f64,
    pub anchor: f64,
}

impl Signature {
    /// Deviation from the mean; symmetric about 0 and within `±clip`.
    pub fn sample_deviation<R: Rng>(&self, rng: &mut R) -> f64 {
        if rng.random::<f64>() < self.anchor {
            return if rng.random::<bool>() { self.clip } else { -self.clip };
        }
        let z: f64 = StandardNormal.sample(rng);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        (sign * self.offset + self.scale * z).clamp(-self.clip, self.clip)
    }

    /// Antithetic amplitude pairs `mean ± δ`: every pair averages to `mean`.
    pub fn sample_pairs<R: Rng>(&self, pairs: usize, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * pairs);
        for _ in 0..pairs {
            let dev = self.sample_deviation(rng);
            out.push(self.mean + dev);
            out.push(self.mean - dev);
        }
        out
    }

    /// Mean amplitude. The deviation law is symmetric, so this is `mean`.
    pub fn expected_amplitude(&self) -> f64 {
        self.mean
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |field: &str, why: &str| Err(DataError::Spec(format!("{}: {}", field, why)));
        if self.n_subjects == 0 {
            return fail("n_subjects", "must be positive");
        }
        if self.sequences_per_subject == 0 {
            return fail("sequences_per_subject", "must be positive");
        }
        if self.d == 0 {
            return fail("d", "must be positive");
        }
        if self.t_min == 0 || self.t_max < self.t_min {
            return fail("t_max", "need 0 < t_min <= t_max");
        }
        if self.width_min < 2 || self.width_max < self.width_min {
            return fail("width_max", "need 2 <= width_min <= width_max");
        }
        if self.slot < self.width_max {
            return fail("slot", "must be at least width_max");
        }
        if self.t_min < 2 * self.slot {
            return fail("t_min", "must hold at least two slots");
        }
        if !(0.0..=1.0).contains(&self.fill) {
            return fail("fill", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.anchor) {
            return fail("anchor", "must lie in [0, 1]");
        }
        for (name, v) in [("noise", self.noise), ("clip", self.clip), ("offset_max", self.offset_max), ("scale_min", self.scale_min), ("scale_max", self.scale_max)] {
            if !v.is_finite() || v < 0.0 {
                return fail(name, "must be finite and non-negative");
            }
        }
        if !self.mean.is_finite() {
            return fail("mean", "must be finite");
        }
        if self.scale_max < self.scale_min {
            return fail("scale_max", "must be at least scale_min");
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self, DataError> {
        let mut kv = KvMap::parse(text)?;
        let d = SynthSpec::default();
        let spec = SynthSpec {
            n_subjects: kv.take_or("n_subjects", d.n_subjects)?,
            sequences_per_subject: kv.take_or("sequences_per_subject", d.sequences_per_subject)?,
            t_min: kv.take_or("t_min", d.t_min)?,
            t_max: kv.take_or("t_max", d.t_max)?,
            d: kv.take_or("d", d.d)?,
            noise: kv.take_or("noise", d.noise)?,
            width_min: kv.take_or("width_min", d.width_min)?,
            width_max: kv.take_or("width_max", d.width_max)?,
            slot: kv.take_or("slot", d.slot)?,
            fill: kv.take_or("fill", d.fill)?,
            mean: kv.take_or("mean", d.mean)?,
            clip: kv.take_or("clip", d.clip)?,
            anchor: kv.take_or("anchor", d.anchor)?,
            offset_max: kv.take_or("offset_max", d.offset_max)?,
            scale_min: kv.take_or("scale_min", d.scale_min)?,
            scale_max: kv.take_or("scale_max", d.scale_max)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    /// Per-subject signatures, drawn from the spec seed.
    pub fn signatures(&self) -> Vec<Signature> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_subjects)
            .map(|_| Signature {
                mean: self.mean,
                offset: rng.random_range(0.0..=self.offset_max),
                scale: rng.random_range(self.scale_min..=self.scale_max),
                clip: self.clip,
                anchor: self.anchor,
            })
            .collect()
    }
}

/// Raised-cosine bump of the given width, zero at both ends.
pub fn raised_cosine(width: usize) -> Vec<f64> {
    (0..width).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (width - 1) as f64).cos()).collect()
}

/// One synthetic sequence plus the amplitudes of its bumps.
pub fn generate_sequence<R: Rng>(spec: &SynthSpec, signature: &Signature, rng: &mut R) -> (Vec<f64>, usize, Vec<f64>) {
    let t = rng.random_range(spec.t_min..=spec.t_max);
    let d = spec.d;
    let mut data: Vec<f64> = (0..t * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            spec.noise * z
        })
        .collect();
    let n_slots = t / spec.slot;
    let pairs = ((spec.fill * n_slots as f64) as usize) / 2;
    let amplitudes = signature.sample_pairs(pairs, rng);
    let mut slots: Vec<usize> = (0..n_slots).collect();
    slots.shuffle(rng);
    for (&slot, &amp) in slots.iter().zip(&amplitudes) {
        let width = rng.random_range(spec.width_min..=spec.width_max);
        let start = slot * spec.slot + rng.random_range(0..=spec.slot - width);
        let channel = rng.random_range(0..d);
        for (i, v) in raised_cosine(width).into_iter().enumerate() {
            data[(start + i) * d + channel] += amp * v;
        }
    }
    (data, t, amplitudes)
}

/// Generates the dataset; subjects are named `s000`, `s001`, ...
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let signatures = spec.signatures();
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for (si, sig) in signatures.iter().enumerate() {
        let id = format!("s{:03}", si);
        let mut sequences = Vec::with_capacity(spec.sequences_per_subject);
        for qi in 0..spec.sequences_per_subject {
            let stream = (si as u64) << 32 | qi as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(stream + 1);
            let (data, t, _) = generate_sequence(spec, sig, &mut rng);
            sequences.push(SequenceRecord {
                subject_id: id.clone(),
                seq_id: format!("{}_{:03}.bin", id, qi),
                t,
                d: spec.d,
                data,
                source: "synthetic".into(),
            });
        }
        subjects.push(Subject { id, sequences });
    }
    Dataset::new(subjects)
}

/// Leave-one-out identification accuracy of a nearest-class-mean rule on a
/// scalar per-sequence feature (thresholds at midpoints between class means).
pub fn scalar_feature_accuracy(data: &Dataset, feature: impl Fn(&SequenceRecord) -> f64) -> f64 {
    let feats: Vec<Vec<f64>> = data.subjects().iter().map(|s| s.sequences.iter().map(&feature).collect()).collect();
    let sums: Vec<f64> = feats.iter().map(|f| f.iter().sum()).collect();
    let mut correct = 0usize;
    let mut total = 0usize;
    for (si, fs) in feats.iter().enumerate() {
        for &x in fs {
            let mut best = (f64::INFINITY, usize::MAX);
            for (sj, fj) in feats.iter().enumerate() {
                let (sum, count) = if si == sj { (sums[sj] - x, fj.len() - 1) } else { (sums[sj], fj.len()) };
                if count == 0 {
                    continue;
                }
                let gap = (x - sum / count as f64).abs();
                if gap < best.0 {
                    best = (gap, sj);
                }
            }
            correct += usize::from(best.1 == si);
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}

pub fn sequence_mean(r: &SequenceRecord) -> f64 {
    r.data.iter().sum::<f64>() / r.data.len() as f64
}

pub fn sequence_max(r: &SequenceRecord) -> f64 {
    r.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec { n_subjects: 3, sequences_per_subject: 4, t_min: 64, t_max: 80, ..SynthSpec::default() }
    }

    #[test]
    fn raised_cosine_shape() {
        let b = raised_cosine(5);
        assert!(b[0].abs() < 1e-15 && b[4].abs() < 1e-15);
        assert!((b[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn antithetic_pairs_average_to_the_mean() {
        let sig = Signature { mean: 1.0, offset: 0.3, scale: 0.2, clip: 0.9, anchor: 0.1 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let amps = sig.sample_pairs(1000, &mut rng);
        for pair in amps.chunks(2) {
            assert!(((pair[0] + pair[1]) / 2.0 - 1.0).abs() < 1e-15);
        }
        assert!(amps.iter().all(|a| (0.1 - 1e-12..=1.9 + 1e-12).contains(a)));
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_sequences(), 12);
        let c = generate_synthetic(&SynthSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_rounds_half_up() {
        assert_eq!(train_count(7, 0.5), 4);
        assert_eq!(train_count(10, 0.5), 5);
    }

    #[test]
    fn spec_errors_name_the_field() {
        let err = SynthSpec::from_kv("fill = 2").unwrap_err();
        assert!(err.to_string().contains("fill"), "{err}");
        let err = SynthSpec::from_kv("colour = red").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn duplicate_sequences_are_rejected() {
        let r = SequenceRecord::new("a", "x.bin", 1, 1, vec![0.0]);
        let res = Dataset::new(vec![Subject { id: "a".into(), sequences: vec![r.clone(), r] }]);
        assert!(matches!(res, Err(DataError::Duplicate { what: "sequence", .. })));
    }
}
