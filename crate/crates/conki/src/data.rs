//! Samples, datasets, sentiment intervals, and the synthetic generator.

use crate::error::{Error, Result};
use crate::nn::positional_encoding;
use crate::rng::{normal, stream, Stream};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Row-major f32 feature matrix, the storage type of the on-disk container.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "feature matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(FeatMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column means as f64, the probe-feature summary of a sequence.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.cols];
        for r in 0..self.rows {
            for (a, &v) in acc.iter_mut().zip(&self.data[r * self.cols..(r + 1) * self.cols]) {
                *a += v as f64;
            }
        }
        let inv = 1.0 / self.rows as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        acc
    }
}

/// One video clip: token ids plus two feature sequences and a scalar label.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub sample_id: String,
    pub text_tokens: Vec<u32>,
    pub vision_feats: FeatMatrix,
    pub audio_feats: FeatMatrix,
    pub label: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRange {
    pub y_min: f64,
    pub y_max: f64,
}

impl LabelRange {
    pub fn new(y_min: f64, y_max: f64) -> Result<Self> {
        if !y_min.is_finite() || !y_max.is_finite() || y_min >= y_max {
            return Err(Error::InvalidConfig(format!(
                "label range [{y_min}, {y_max}] is not a valid interval"
            )));
        }
        Ok(LabelRange { y_min, y_max })
    }
}

impl Default for LabelRange {
    fn default() -> Self {
        LabelRange {
            y_min: -3.0,
            y_max: 3.0,
        }
    }
}

/// Integer sentiment bucket; only [`round_to_interval`] constructs these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SentimentInterval(i64);

impl SentimentInterval {
    pub fn value(self) -> i64 {
        self.0
    }
}

impl std::fmt::Display for SentimentInterval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Clamp `y` into the label range, then round to the nearest integer with
/// ties away from zero.
pub fn round_to_interval(y: f64, range: LabelRange) -> Result<SentimentInterval> {
    if !y.is_finite() {
        return Err(Error::InvalidInput(format!("cannot round non-finite {y}")));
    }
    let clamped = y.clamp(range.y_min, range.y_max);
    Ok(SentimentInterval(clamped.round() as i64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub vocab_size: u32,
    pub d_v: usize,
    pub d_a: usize,
    pub label_range: LabelRange,
    pub generator_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<MultimodalSample>,
    pub valid: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[MultimodalSample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Check every documented invariant: unique ids, shared dims and vocab,
    /// finite features, labels in range, non-empty sequences.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for split in Split::ALL {
            for s in self.split(split) {
                if !seen.insert(s.sample_id.clone()) {
                    return Err(Error::Format(format!(
                        "duplicate sample_id {:?}",
                        s.sample_id
                    )));
                }
                self.validate_sample(s)?;
            }
        }
        Ok(())
    }

    fn validate_sample(&self, s: &MultimodalSample) -> Result<()> {
        let id = &s.sample_id;
        if s.text_tokens.is_empty() || s.vision_feats.rows() == 0 || s.audio_feats.rows() == 0 {
            return Err(Error::Format(format!("sample {id:?} has an empty sequence")));
        }
        if let Some(&t) = s.text_tokens.iter().find(|&&t| t >= self.meta.vocab_size) {
            return Err(Error::Format(format!(
                "sample {id:?} token {t} >= vocab {}",
                self.meta.vocab_size
            )));
        }
        if s.vision_feats.cols() != self.meta.d_v {
            return Err(Error::Format(format!(
                "sample {id:?} vision dim {} != d_v {}",
                s.vision_feats.cols(),
                self.meta.d_v
            )));
        }
        if s.audio_feats.cols() != self.meta.d_a {
            return Err(Error::Format(format!(
                "sample {id:?} audio dim {} != d_a {}",
                s.audio_feats.cols(),
                self.meta.d_a
            )));
        }
        if !s.vision_feats.is_finite() || !s.audio_feats.is_finite() {
            return Err(Error::Format(format!(
                "sample {id:?} has non-finite features"
            )));
        }
        if !s.label.is_finite()
            || s.label < self.meta.label_range.y_min
            || s.label > self.meta.label_range.y_max
        {
            return Err(Error::Format(format!(
                "sample {id:?} label {} outside range",
                s.label
            )));
        }
        Ok(())
    }
}

/// Number of quantization bins used to turn a latent sentiment into a token
/// codebook row.
pub const TEXT_CODE_BINS: u32 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub l_t: usize,
    pub l_v: usize,
    pub l_a: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub vocab_size: u32,
    pub label_range: LabelRange,
    pub seed: u64,
    /// Gaussian noise level applied to every modality.
    pub sigma: f64,
    /// Make the label the only cross-modal common content: each modality
    /// observes it through its own nuisance, so no single modality
    /// identifies the label alone.
    pub shared_motive: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_train: 64,
            n_valid: 16,
            n_test: 16,
            l_t: 12,
            l_v: 10,
            l_a: 10,
            d_v: 8,
            d_a: 8,
            vocab_size: 64,
            label_range: LabelRange::default(),
            seed: 0,
            sigma: 0.1,
            shared_motive: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_train", self.n_train),
            ("n_valid", self.n_valid),
            ("n_test", self.n_test),
            ("l_t", self.l_t),
            ("l_v", self.l_v),
            ("l_a", self.l_a),
            ("d_v", self.d_v),
            ("d_a", self.d_a),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.vocab_size == 0 {
            return Err(Error::InvalidConfig("vocab_size must be positive".into()));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "sigma {} must be finite and >= 0",
                self.sigma
            )));
        }
        LabelRange::new(self.label_range.y_min, self.label_range.y_max)?;
        Ok(())
    }
}

/// Modality structure drawn once per dataset: token codebook plus fixed
/// projection directions for the dense modalities.
struct GeneratorStructure {
    codebook: Vec<Vec<u32>>,
    vision_dir: Vec<f64>,
    audio_dir: Vec<f64>,
    vision_pos: Vec<f64>,
    audio_pos: Vec<f64>,
}

/// Strength of the per-modality nuisance in shared-motive datasets.
const MODALITY_NUISANCE: f64 = 1.0;

fn unit_direction(rng: &mut ChaCha12Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|e| *e /= norm);
    v
}

fn build_structure(cfg: &GeneratorConfig) -> GeneratorStructure {
    let mut rng = stream(cfg.seed, Stream::GenStructure);
    let bins = TEXT_CODE_BINS.min(cfg.vocab_size);
    let mut codebook = Vec::with_capacity(bins as usize);
    for q in 0..bins {
        let mut row = Vec::with_capacity(cfg.l_t);
        // First token marks the bin so the code stays linearly identifiable.
        row.push(q % cfg.vocab_size);
        for _ in 1..cfg.l_t {
            row.push(rng.random_range(0..cfg.vocab_size));
        }
        codebook.push(row);
    }
    let vision_dir = unit_direction(&mut rng, cfg.d_v);
    let audio_dir = unit_direction(&mut rng, cfg.d_a);
    let pos_scale = 0.3;
    let vision_pos = positional_encoding(cfg.l_v, cfg.d_v)
        .data()
        .iter()
        .map(|v| v * pos_scale)
        .collect();
    let audio_pos = positional_encoding(cfg.l_a, cfg.d_a)
        .data()
        .iter()
        .map(|v| v * pos_scale)
        .collect();
    GeneratorStructure {
        codebook,
        vision_dir,
        audio_dir,
        vision_pos,
        audio_pos,
    }
}

fn sentiment_bin(s: f64, range: LabelRange, bins: u32) -> usize {
    let t = (s - range.y_min) / (range.y_max - range.y_min);
    let idx = (t * bins as f64).floor() as i64;
    idx.clamp(0, bins as i64 - 1) as usize
}

fn dense_features(
    signal: f64,
    len: usize,
    dim: usize,
    dir: &[f64],
    pos: &[f64],
    sigma: f64,
    rng: &mut ChaCha12Rng,
) -> FeatMatrix {
    let mut m = FeatMatrix::zeros(len, dim);
    for r in 0..len {
        for c in 0..dim {
            let v = signal * dir[c] + pos[r * dim + c] + sigma * normal(rng);
            m.set(r, c, v as f32);
        }
    }
    m
}

fn generate_split(
    cfg: &GeneratorConfig,
    structure: &GeneratorStructure,
    split: Split,
    n: usize,
    purpose: Stream,
) -> Vec<MultimodalSample> {
    let mut rng = stream(cfg.seed, purpose);
    let bins = structure.codebook.len() as u32;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let s = rng.random_range(cfg.label_range.y_min..=cfg.label_range.y_max);
        // In shared-motive datasets the label is the only content shared
        // across modalities: each modality observes the label corrupted by
        // its own nuisance along the signal direction, so no single modality
        // identifies the label and cross-modal agreement carries the motive.
        // The nuisance draws always happen so that toggling the flag does
        // not reshuffle the downstream noise stream.
        let gamma = if cfg.shared_motive { MODALITY_NUISANCE } else { 0.0 };
        let nuisance_t = gamma * normal(&mut rng);
        let nuisance_v = gamma * normal(&mut rng);
        let nuisance_a = gamma * normal(&mut rng);

        let text_jitter = normal(&mut rng);
        let q = sentiment_bin(
            s + nuisance_t + cfg.sigma * text_jitter,
            cfg.label_range,
            bins,
        );
        let text_tokens = structure.codebook[q].clone();

        let vision_feats = dense_features(
            s + nuisance_v,
            cfg.l_v,
            cfg.d_v,
            &structure.vision_dir,
            &structure.vision_pos,
            cfg.sigma,
            &mut rng,
        );
        let audio_feats = dense_features(
            s + nuisance_a,
            cfg.l_a,
            cfg.d_a,
            &structure.audio_dir,
            &structure.audio_pos,
            cfg.sigma,
            &mut rng,
        );
        samples.push(MultimodalSample {
            sample_id: format!("{}-{:05}", split.name(), i),
            text_tokens,
            vision_feats,
            audio_feats,
            label: s,
        });
    }
    samples
}

/// Build a dataset whose every modality is a noisy deterministic function of
/// a latent sentiment drawn uniformly over the label range; the label equals
/// the latent exactly. Bit-reproducible from the seed.
pub fn generate_synthetic_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let structure = build_structure(cfg);
    let dataset = Dataset {
        meta: DatasetMeta {
            vocab_size: cfg.vocab_size,
            d_v: cfg.d_v,
            d_a: cfg.d_a,
            label_range: cfg.label_range,
            generator_seed: Some(cfg.seed),
        },
        train: generate_split(cfg, &structure, Split::Train, cfg.n_train, Stream::GenTrain),
        valid: generate_split(cfg, &structure, Split::Valid, cfg.n_valid, Stream::GenValid),
        test: generate_split(cfg, &structure, Split::Test, cfg.n_test, Stream::GenTest),
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_basics() {
        let r = LabelRange::default();
        assert_eq!(round_to_interval(0.0, r).unwrap().value(), 0);
        assert_eq!(round_to_interval(3.7, r).unwrap().value(), 3);
        assert_eq!(round_to_interval(-4.2, r).unwrap().value(), -3);
        assert!(round_to_interval(f64::NAN, r).is_err());
        assert!(round_to_interval(f64::INFINITY, r).is_err());
    }

    #[test]
    fn round_ties_away_from_zero() {
        // Enumerate every half-integer in range against the tie rule.
        let r = LabelRange::default();
        for (y, want) in [
            (0.5, 1),
            (1.5, 2),
            (2.5, 3),
            (-0.5, -1),
            (-1.5, -2),
            (-2.5, -3),
        ] {
            assert_eq!(round_to_interval(y, r).unwrap().value(), want, "y={y}");
        }
    }

    proptest! {
        #[test]
        fn round_monotone_and_idempotent(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let r = LabelRange::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let ra = round_to_interval(lo, r).unwrap();
            let rb = round_to_interval(hi, r).unwrap();
            prop_assert!(ra.value() <= rb.value());
            // Stable under repeated application.
            let again = round_to_interval(ra.value() as f64, r).unwrap();
            prop_assert_eq!(again.value(), ra.value());
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = GeneratorConfig {
            seed: 7,
            ..GeneratorConfig::default()
        };
        let a = generate_synthetic_dataset(&cfg).unwrap();
        let b = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&GeneratorConfig {
            seed: 8,
            ..cfg
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generator_counts_and_unique_ids() {
        let cfg = GeneratorConfig {
            n_train: 64,
            n_valid: 5,
            n_test: 3,
            ..GeneratorConfig::default()
        };
        let d = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(d.train.len(), 64);
        assert_eq!(d.valid.len(), 5);
        assert_eq!(d.test.len(), 3);
        let ids: std::collections::BTreeSet<_> = d
            .train
            .iter()
            .chain(&d.valid)
            .chain(&d.test)
            .map(|s| s.sample_id.clone())
            .collect();
        assert_eq!(ids.len(), 72);
    }

    #[test]
    fn generator_rejects_bad_config() {
        let cfg = GeneratorConfig {
            n_train: 0,
            ..GeneratorConfig::default()
        };
        assert!(generate_synthetic_dataset(&cfg).is_err());
        let cfg = GeneratorConfig {
            d_v: 0,
            ..GeneratorConfig::default()
        };
        assert!(generate_synthetic_dataset(&cfg).is_err());
        let cfg = GeneratorConfig {
            sigma: -0.5,
            ..GeneratorConfig::default()
        };
        assert!(generate_synthetic_dataset(&cfg).is_err());
    }

    /// Least-squares oracle: solve the normal equations directly.
    fn linear_probe_r2(features: &[Vec<f64>], targets: &[f64]) -> f64 {
        let n = features.len();
        let d = features[0].len() + 1;
        // Normal equations with a tiny ridge for rank-deficient designs.
        let mut ata = vec![0.0f64; d * d];
        let mut atb = vec![0.0f64; d];
        let augmented = |row: &Vec<f64>| {
            let mut x = row.clone();
            x.push(1.0);
            x
        };
        for (row, &y) in features.iter().zip(targets) {
            let x = augmented(row);
            for i in 0..d {
                for j in 0..d {
                    ata[i * d + j] += x[i] * x[j];
                }
                atb[i] += x[i] * y;
            }
        }
        for i in 0..d {
            ata[i * d + i] += 1e-9;
        }
        // Gaussian elimination with partial pivoting.
        let mut beta = atb.clone();
        for col in 0..d {
            let mut pivot = col;
            for r in col + 1..d {
                if ata[r * d + col].abs() > ata[pivot * d + col].abs() {
                    pivot = r;
                }
            }
            for j in 0..d {
                ata.swap(col * d + j, pivot * d + j);
            }
            beta.swap(col, pivot);
            let p = ata[col * d + col];
            for r in 0..d {
                if r == col {
                    continue;
                }
                let f = ata[r * d + col] / p;
                for j in 0..d {
                    ata[r * d + j] -= f * ata[col * d + j];
                }
                beta[r] -= f * beta[col];
            }
        }
        for i in 0..d {
            beta[i] /= ata[i * d + i];
        }
        let mean_y = targets.iter().sum::<f64>() / n as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for (row, &y) in features.iter().zip(targets) {
            let x = augmented(row);
            let pred: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            ss_res += (y - pred) * (y - pred);
            ss_tot += (y - mean_y) * (y - mean_y);
        }
        1.0 - ss_res / ss_tot
    }

    #[test]
    fn noiseless_signal_recoverable_from_each_modality() {
        let cfg = GeneratorConfig {
            n_train: 256,
            sigma: 0.0,
            seed: 11,
            ..GeneratorConfig::default()
        };
        let d = generate_synthetic_dataset(&cfg).unwrap();
        let labels: Vec<f64> = d.train.iter().map(|s| s.label).collect();

        let vision: Vec<Vec<f64>> = d.train.iter().map(|s| s.vision_feats.mean_rows()).collect();
        assert!(linear_probe_r2(&vision, &labels) > 0.99);

        let audio: Vec<Vec<f64>> = d.train.iter().map(|s| s.audio_feats.mean_rows()).collect();
        assert!(linear_probe_r2(&audio, &labels) > 0.99);

        let text: Vec<Vec<f64>> = d
            .train
            .iter()
            .map(|s| {
                let mut hist = vec![0.0f64; cfg.vocab_size as usize];
                for &t in &s.text_tokens {
                    hist[t as usize] += 1.0 / s.text_tokens.len() as f64;
                }
                hist
            })
            .collect();
        assert!(linear_probe_r2(&text, &labels) > 0.99);
    }
}
