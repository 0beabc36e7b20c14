//! Forward inference through the simulated optical network, in-situ
//! training by simultaneous perturbation, a digital reference model and
//! the vowel dataset plumbing.

use std::f64::consts::{PI, TAU};
use std::io::Read;
use std::path::Path;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::{
    encode_channel, physical_transfer_matrix, ErrorConfig, HardwareErrorModel, ReadoutNoise,
};
use crate::nofu::{nofu_apply, NofuParams};
use crate::unitary::{
    clements_decompose, haar_with_rng, wrap_phase, ComplexMatrix, MeshProgram,
};

/// Number of classes and features of the vowel task.
pub const NUM_CLASSES: usize = 6;
pub const NUM_FEATURES: usize = 6;
pub const TRAIN_SIZE: usize = 540;
pub const TEST_SIZE: usize = 294;
pub const TRAINING_SCHEMA_VERSION: u32 = 1;

/// One labelled, max-normalized feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub label: usize,
    pub features: [f64; NUM_FEATURES],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VowelDataset {
    /// Class names in label order.
    pub classes: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn max_normalize(raw: [f64; NUM_FEATURES]) -> Option<[f64; NUM_FEATURES]> {
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) || raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return None;
    }
    Some(raw.map(|v| v / max))
}

/// Shuffles with `seed` and splits off `train_len` training samples; the
/// rest (at most [`TEST_SIZE`] when the full 834 are present) is the test set.
pub fn split_samples(mut samples: Vec<Sample>, train_len: usize, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    let train_len = train_len.min(samples.len());
    let test = samples.split_off(train_len);
    (samples, test)
}

fn default_train_len(n: usize) -> usize {
    if n >= TRAIN_SIZE + TEST_SIZE {
        TRAIN_SIZE
    } else {
        (n * TRAIN_SIZE + (TRAIN_SIZE + TEST_SIZE) / 2) / (TRAIN_SIZE + TEST_SIZE)
    }
}

/// Reads `label,f1,f2,f3,f1_50,f2_50,f3_50` rows (formants in hertz). A
/// non-numeric first row is taken as a header.
pub fn read_vowel_csv<R: Read>(reader: R, seed: u64) -> Result<VowelDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut classes: Vec<String> = Vec::new();
    let mut samples = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(k + 1, |p| p.line() as usize);
        if record.len() != 1 + NUM_FEATURES {
            return Err(Error::MalformedRow {
                line,
                message: format!("expected {} fields, found {}", 1 + NUM_FEATURES, record.len()),
            });
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().skip(1).map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if samples.is_empty() && classes.is_empty() && k == 0 => continue,
            Err(e) => {
                return Err(Error::MalformedRow {
                    line,
                    message: format!("non-numeric feature: {e}"),
                })
            }
        };
        let raw: [f64; NUM_FEATURES] = values.try_into().expect("length checked");
        let features = max_normalize(raw).ok_or_else(|| Error::MalformedRow {
            line,
            message: "features must be finite, non-negative and not all zero".into(),
        })?;
        let name = record[0].to_string();
        let label = match classes.iter().position(|c| *c == name) {
            Some(l) => l,
            None => {
                if classes.len() == NUM_CLASSES {
                    return Err(Error::MalformedRow {
                        line,
                        message: format!("more than {NUM_CLASSES} classes (new label {name:?})"),
                    });
                }
                classes.push(name);
                classes.len() - 1
            }
        };
        samples.push(Sample { label, features });
    }
    if samples.is_empty() {
        return Err(Error::Dataset("no samples found".into()));
    }
    let train_len = default_train_len(samples.len());
    let (train, test) = split_samples(samples, train_len, seed);
    Ok(VowelDataset { classes, train, test })
}

pub fn ingest_vowel_csv(path: &Path, seed: u64) -> Result<VowelDataset> {
    let file = std::fs::File::open(path)?;
    read_vowel_csv(file, seed)
}

/// Mean formants (Hz) at steady state, and their drift by mid-vowel, for the
/// six vowels of the bundled synthetic set.
const SYNTHETIC_VOWELS: [(&str, [f64; 3], [f64; 3]); NUM_CLASSES] = [
    ("iy", [342.0, 2322.0, 3000.0], [0.0, 0.01, 0.0]),
    ("ih", [427.0, 2034.0, 2684.0], [0.03, -0.02, 0.0]),
    ("eh", [580.0, 1799.0, 2605.0], [0.04, -0.03, 0.0]),
    ("aa", [768.0, 1333.0, 2522.0], [0.0, 0.02, 0.0]),
    ("ah", [623.0, 1200.0, 2550.0], [0.02, 0.03, 0.0]),
    ("uw", [378.0, 997.0, 2343.0], [0.0, -0.05, 0.0]),
];

/// Parameters of the synthetic formant generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub samples_per_class: usize,
    /// Relative spread of the speaker's vocal-tract scale.
    pub speaker_spread: f64,
    /// Relative jitter of each formant.
    pub formant_jitter: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples_per_class: (TRAIN_SIZE + TEST_SIZE) / NUM_CLASSES,
            speaker_spread: 0.12,
            formant_jitter: 0.07,
        }
    }
}

/// Formant-like six-class data, split like the real set.
pub fn synthetic_vowels(cfg: &SyntheticConfig, seed: u64) -> Result<VowelDataset> {
    if cfg.samples_per_class == 0 {
        return Err(Error::Dataset("synthetic set needs at least one sample per class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speaker = Normal::new(1.0, cfg.speaker_spread).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let jitter = Normal::new(0.0, cfg.formant_jitter).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut samples = Vec::with_capacity(cfg.samples_per_class * NUM_CLASSES);
    for (label, (_, steady, drift)) in SYNTHETIC_VOWELS.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            let scale = speaker.sample(&mut rng).max(0.5);
            let mut raw = [0.0; NUM_FEATURES];
            for f in 0..3 {
                let s = steady[f] * scale * (1.0 + jitter.sample(&mut rng));
                raw[f] = s.max(1.0);
                raw[f + 3] = (s * (1.0 + drift[f]) * (1.0 + 0.3 * jitter.sample(&mut rng))).max(1.0);
            }
            let features = max_normalize(raw).expect("positive formants");
            samples.push(Sample { label, features });
        }
    }
    let train_len = default_train_len(samples.len());
    let (train, test) = split_samples(samples, train_len, rng.gen());
    Ok(VowelDataset {
        classes: SYNTHETIC_VOWELS.iter().map(|v| v.0.to_string()).collect(),
        train,
        test,
    })
}

/// Writes a dataset back out in the raw CSV layout (normalized features).
pub fn write_vowel_csv<W: std::io::Write>(data: &VowelDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["label", "f1_steady", "f2_steady", "f3_steady", "f1_50", "f2_50", "f3_50"])?;
    for s in data.train.iter().chain(&data.test) {
        let mut row = vec![data.classes[s.label].clone()];
        row.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Accuracy and confusion matrix, rows are true labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

/// Scores predictions given as per-class probabilities.
pub fn evaluate_predictions(samples: &[Sample], predictions: &[Vec<f64>]) -> Result<Evaluation> {
    if samples.len() != predictions.len() {
        return Err(Error::Dimension("one prediction per sample expected".into()));
    }
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (s, p) in samples.iter().zip(predictions) {
        confusion[s.label][argmax(p)] += 1;
    }
    let correct: usize = (0..NUM_CLASSES).map(|i| confusion[i][i]).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / samples.len() as f64,
        confusion,
    })
}

/// Clamp used to keep `log` finite.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Cross-entropy of one probability vector against a label.
pub fn cross_entropy(probabilities: &[f64], label: usize) -> f64 {
    -probabilities[label].max(PROBABILITY_FLOOR).ln()
}

/// Phase resolution of every stored parameter.
pub const QUANTIZATION_BITS: u32 = 16;

pub fn quantization_step() -> f64 {
    TAU / (1u64 << QUANTIZATION_BITS) as f64
}

/// Number of trainable parameters: `M N²` mesh phases plus a tap fraction
/// and a detuning for each of the `N (M − 1)` nonlinear units.
pub fn num_params(size: usize, layers: usize) -> usize {
    layers * size * size + 2 * size * layers.saturating_sub(1)
}

/// Physical description of the simulated network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiconnConfig {
    pub size: usize,
    pub layers: usize,
    /// Optical power per channel for a unit input amplitude (W).
    pub input_power: f64,
    /// One static error model per mesh.
    pub errors: Vec<HardwareErrorModel>,
    /// Template for every nonlinear unit; tap fraction and detuning come from Θ.
    pub nofu: NofuParams,
    pub readout_noise: ReadoutNoise,
    /// Ring heater range: a setting of `0..2π` sweeps the detuning over
    /// `±detuning_span` linewidths.
    pub detuning_span: f64,
}

impl FiconnConfig {
    pub fn ideal(size: usize, layers: usize) -> Self {
        Self {
            size,
            layers,
            input_power: 2e-3,
            errors: (0..layers).map(|_| HardwareErrorModel::ideal(size)).collect(),
            nofu: NofuParams::default(),
            readout_noise: ReadoutNoise::none(),
            detuning_span: 2.0,
        }
    }

    /// Meshes drawn from the calibrated direct-programming error preset.
    pub fn with_default_errors(size: usize, layers: usize, seed: u64) -> Result<Self> {
        let cfg = ErrorConfig::direct_programming_preset();
        let errors = (0..layers)
            .map(|l| HardwareErrorModel::random(size, &cfg, seed.wrapping_add(l as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { errors, ..Self::ideal(size, layers) })
    }

    /// Detuning phase for a ring heater setting.
    pub fn detuning_phase(&self, setting: f64) -> f64 {
        (setting / PI - 1.0) * self.detuning_span * self.nofu.linewidth()
    }

    /// Ring heater setting giving `linewidths` of detuning, clamped to range.
    pub fn ring_setting(&self, linewidths: f64) -> f64 {
        PI * (1.0 + linewidths / self.detuning_span).clamp(0.0, 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.detuning_span > 0.0) {
            return Err(Error::InvalidArgument("detuning span must be positive".into()));
        }
        if self.size < 2 || self.layers < 1 {
            return Err(Error::InvalidArgument("network needs N ≥ 2 and M ≥ 1".into()));
        }
        if self.errors.len() != self.layers || self.errors.iter().any(|e| e.size != self.size) {
            return Err(Error::Dimension("one error model of matching size per layer".into()));
        }
        if !(self.input_power > 0.0) {
            return Err(Error::InvalidArgument("input power must be positive".into()));
        }
        self.nofu.validate()
    }
}

/// Flat parameter vector Θ on the quantization grid.
///
/// Layout: `N²` heater phases per mesh in canonical heater order, then for
/// each nonlinear unit the phase of its tap MZI (`β = sin²(φ/2)`) and the
/// setting of its ring heater. Keeping every entry a phase lets one
/// perturbation size serve all of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub schema_version: u32,
    pub size: usize,
    pub layers: usize,
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn new(size: usize, layers: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != num_params(size, layers) {
            return Err(Error::Dimension(format!(
                "{} parameters, expected {}",
                theta.len(),
                num_params(size, layers)
            )));
        }
        let mut p = Self { schema_version: TRAINING_SCHEMA_VERSION, size, layers, theta };
        p.quantize();
        Ok(p)
    }

    /// Haar-random meshes and the given tap fraction and detuning (in
    /// linewidths) on every nonlinear unit.
    pub fn initial(cfg: &FiconnConfig, beta: f64, detuning_linewidths: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(num_params(cfg.size, cfg.layers));
        for _ in 0..cfg.layers {
            let u = haar_with_rng(cfg.size, &mut rng)?;
            theta.extend(clements_decompose(&u)?.heater_phases());
        }
        for _ in 0..cfg.size * (cfg.layers - 1) {
            theta.push(2.0 * beta.clamp(0.0, 1.0).sqrt().asin());
            theta.push(cfg.ring_setting(detuning_linewidths));
        }
        Self::new(cfg.size, cfg.layers, theta)
    }

    fn mesh_len(&self) -> usize {
        self.size * self.size
    }

    pub fn mesh_phases(&self, layer: usize) -> &[f64] {
        let n2 = self.mesh_len();
        &self.theta[layer * n2..(layer + 1) * n2]
    }

    fn nofu_offset(&self) -> usize {
        self.layers * self.mesh_len()
    }

    /// `(tap phase, ring heater setting)` of unit `channel` after mesh `layer`.
    pub fn nofu(&self, layer: usize, channel: usize) -> (f64, f64) {
        let k = self.nofu_offset() + 2 * (layer * self.size + channel);
        (self.theta[k], self.theta[k + 1])
    }

    /// Ring heater settings clamp to `[0, 2π]` instead of wrapping.
    fn is_ring_setting(&self, k: usize) -> bool {
        k >= self.nofu_offset() && (k - self.nofu_offset()) % 2 == 1
    }

    /// Snaps every entry onto the 16-bit grid; phases wrap, ring settings clamp.
    pub fn quantize(&mut self) {
        let step = quantization_step();
        let levels = (1u64 << QUANTIZATION_BITS) as f64;
        for k in 0..self.theta.len() {
            let v = self.theta[k];
            self.theta[k] = if self.is_ring_setting(k) {
                (v.clamp(0.0, TAU) / step).round().min(levels) * step
            } else {
                let q = (wrap_phase(v) / step).round();
                (if q >= levels { 0.0 } else { q }) * step
            };
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        if p.schema_version != TRAINING_SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found: p.schema_version, expected: TRAINING_SCHEMA_VERSION });
        }
        Self::new(p.size, p.layers, p.theta)
    }
}

/// Total readout below this fraction of one channel's input power counts
/// as dark; the transmitter cannot null a channel more deeply than rounding.
const DARK_FRACTION: f64 = 1e-24;

/// A network with its meshes and nonlinear units resolved for fast batches.
pub struct Ficonn {
    size: usize,
    meshes: Vec<ComplexMatrix>,
    units: Vec<Vec<NofuParams>>,
    field_scale: f64,
    noise: ReadoutNoise,
}

impl Ficonn {
    pub fn new(params: &ModelParams, cfg: &FiconnConfig) -> Result<Self> {
        cfg.validate()?;
        if params.size != cfg.size || params.layers != cfg.layers {
            return Err(Error::Dimension("parameters do not match the network shape".into()));
        }
        let meshes = (0..cfg.layers)
            .map(|l| {
                let program = MeshProgram::from_heater_phases(cfg.size, params.mesh_phases(l))?;
                physical_transfer_matrix(&program, &cfg.errors[l])
            })
            .collect::<Result<Vec<_>>>()?;
        let units = (0..cfg.layers - 1)
            .map(|l| {
                (0..cfg.size)
                    .map(|c| {
                        let (tap, ring) = params.nofu(l, c);
                        NofuParams {
                            tap_fraction: (tap / 2.0).sin().powi(2),
                            static_detuning: cfg.nofu.detuning_for_phase(cfg.detuning_phase(ring)),
                            ..cfg.nofu.clone()
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            size: cfg.size,
            meshes,
            units,
            field_scale: cfg.input_power.sqrt(),
            noise: cfg.readout_noise,
        })
    }

    /// Ideal transmitter: each feature becomes a real field amplitude.
    fn transmit(&self, x: &[f64]) -> Result<DVector<Complex64>> {
        if x.len() != self.size {
            return Err(Error::Dimension(format!("{} features for {} channels", x.len(), self.size)));
        }
        let mut a = DVector::zeros(self.size);
        for (m, &v) in x.iter().enumerate() {
            let p = encode_channel(v)?;
            a[m] = Complex64::i() * Complex64::from_polar((p.theta1 / 2.0).cos(), p.theta1 / 2.0 + p.theta2)
                * self.field_scale;
        }
        Ok(a)
    }

    /// Output fields before detection.
    pub fn output_fields(&self, x: &[f64]) -> Result<DVector<Complex64>> {
        let mut a = self.transmit(x)?;
        for (l, u) in self.meshes.iter().enumerate() {
            a = u * a;
            if let Some(units) = self.units.get(l) {
                for (z, p) in a.iter_mut().zip(units) {
                    *z = nofu_apply(*z, p)?;
                }
            }
        }
        Ok(a)
    }

    /// Output intensities normalized by their sum.
    pub fn probabilities<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let out = self.output_fields(x)?;
        let v: Vec<f64> = out.iter().map(|z| self.noise.apply(z.norm_sqr(), rng).max(0.0)).collect();
        let total: f64 = v.iter().sum();
        if !(total > DARK_FRACTION * self.field_scale * self.field_scale) {
            return Err(Error::InvalidArgument("degenerate readout: all output channels dark".into()));
        }
        Ok(v.into_iter().map(|p| p / total).collect())
    }

    /// Summed cross-entropy and the per-sample predictions over a split.
    pub fn batch<R: Rng + ?Sized>(&self, samples: &[Sample], rng: &mut R) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut total = 0.0;
        let mut preds = Vec::with_capacity(samples.len());
        for s in samples {
            let p = match self.probabilities(&s.features, rng) {
                Ok(p) => p,
                Err(Error::InvalidArgument(_)) => vec![1.0 / self.size as f64; self.size],
                Err(e) => return Err(e),
            };
            total += cross_entropy(&p, s.label);
            preds.push(p);
        }
        Ok((total, preds))
    }
}

/// `V_norm` for one feature vector.
pub fn forward(x: &[f64], params: &ModelParams, cfg: &FiconnConfig) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ficonn::new(params, cfg)?.probabilities(x, &mut rng)
}

/// Mean cross-entropy of a batch.
pub fn loss(samples: &[Sample], params: &ModelParams, cfg: &FiconnConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (sum, _) = Ficonn::new(params, cfg)?.batch(samples, &mut rng)?;
    Ok(sum / samples.len() as f64)
}

pub fn evaluate(samples: &[Sample], params: &ModelParams, cfg: &FiconnConfig) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, preds) = Ficonn::new(params, cfg)?.batch(samples, &mut rng)?;
    evaluate_predictions(samples, &preds)
}

/// Result of one simultaneous-perturbation step.
#[derive(Clone, Debug, PartialEq)]
pub struct SpsaStep {
    pub theta: Vec<f64>,
    pub delta: Vec<f64>,
    pub loss_plus: f64,
    pub loss_minus: f64,
    /// `[L(Θ+Δ) − L(Θ−Δ)] / (2‖Δ‖)`.
    pub derivative: f64,
}

/// Draws `Δ ∈ {±δ}ᴺ`, evaluates the loss twice and steps
/// `Θ → Θ − η ∇_Δ L · Δ`.
pub fn spsa_step<F, R>(theta: &[f64], mut loss: F, learning_rate: f64, perturbation: f64, rng: &mut R) -> Result<SpsaStep>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    if theta.is_empty() {
        return Err(Error::InvalidArgument("no parameters to perturb".into()));
    }
    let delta: Vec<f64> = theta
        .iter()
        .map(|_| if rng.gen::<bool>() { perturbation } else { -perturbation })
        .collect();
    let plus: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t + d).collect();
    let minus: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t - d).collect();
    let loss_plus = loss(&plus)?;
    let loss_minus = loss(&minus)?;
    let norm = perturbation * (theta.len() as f64).sqrt();
    let derivative = (loss_plus - loss_minus) / (2.0 * norm);
    let theta = theta
        .iter()
        .zip(&delta)
        .map(|(t, d)| t - learning_rate * derivative * d)
        .collect();
    Ok(SpsaStep { theta, delta, loss_plus, loss_minus, derivative })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Sum over the training set, as the hardware loop accumulates it.
    Sum,
    Mean,
}

/// Asymptotically optimal gain exponent for simultaneous perturbation.
pub const SPSA_GAIN_EXPONENT: f64 = 0.602;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub perturbation: f64,
    pub epochs: usize,
    pub seed: u64,
    pub reduction: LossReduction,
    /// Tap fraction and detuning (in linewidths) every unit starts from.
    pub initial_beta: f64,
    pub initial_detuning: f64,
    /// When set, the learning rate at 1-based epoch `k` decays as `η / (1 + (k-1)/τ)^0.602`.
    #[serde(default)]
    pub decay_epochs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            perturbation: 0.05,
            epochs: 20_000,
            seed: 0,
            reduction: LossReduction::Sum,
            initial_beta: 0.5,
            initial_detuning: 1.5,
            decay_epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(self.perturbation > 0.0) {
            return Err(Error::InvalidArgument("need η ≥ 0 and δ > 0".into()));
        }
        if matches!(self.decay_epochs, Some(t) if !(t > 0.0)) {
            return Err(Error::InvalidArgument("decay constant must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at 1-based epoch `k`.
    pub fn learning_rate_at(&self, k: usize) -> f64 {
        match self.decay_epochs {
            Some(tau) => self.learning_rate / (1.0 + k.saturating_sub(1) as f64 / tau).powf(SPSA_GAIN_EXPONENT),
            None => self.learning_rate,
        }
    }
}

/// Training-set passes, split by purpose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    /// Passes the optimizer itself needs.
    pub training: usize,
    /// Extra passes made only to log metrics.
    pub monitor: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the training set.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Cumulative counts after this epoch.
    pub passes: PassCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub schema_version: u32,
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        if s.schema_version != TRAINING_SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found: s.schema_version, expected: TRAINING_SCHEMA_VERSION });
        }
        Ok(s)
    }

    /// `epoch,train_loss,train_acc,test_acc` rows.
    pub fn write_history_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        write_history_csv(&self.history, writer)
    }
}

pub fn write_history_csv<W: std::io::Write>(history: &[EpochRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "train_loss", "train_acc", "test_acc"])?;
    for r in history {
        w.write_record(&[
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.train_accuracy.to_string(),
            r.test_accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn check_dataset(data: &VowelDataset, size: usize) -> Result<()> {
    if size != NUM_FEATURES {
        return Err(Error::Dimension(format!(
            "the vowel task needs a {NUM_FEATURES}-mode network, got {size}"
        )));
    }
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Dataset("training and test splits must be non-empty".into()));
    }
    if data.train.iter().chain(&data.test).any(|s| s.label >= NUM_CLASSES) {
        return Err(Error::Dataset("label out of range".into()));
    }
    Ok(())
}

/// Evaluates Θ on the training set, counting one pass.
struct Objective<'a> {
    data: &'a VowelDataset,
    cfg: &'a FiconnConfig,
    template: ModelParams,
    reduction: LossReduction,
    noise_rng: ChaCha8Rng,
    passes: PassCounts,
}

impl<'a> Objective<'a> {
    fn params(&self, theta: &[f64]) -> Result<ModelParams> {
        ModelParams::new(self.template.size, self.template.layers, theta.to_vec())
    }

    fn train_pass(&mut self, theta: &[f64], monitor: bool) -> Result<(f64, Vec<Vec<f64>>)> {
        let net = Ficonn::new(&self.params(theta)?, self.cfg)?;
        if monitor {
            self.passes.monitor += 1;
        } else {
            self.passes.training += 1;
        }
        net.batch(&self.data.train, &mut self.noise_rng)
    }

    fn reduce(&self, sum: f64) -> f64 {
        match self.reduction {
            LossReduction::Sum => sum,
            LossReduction::Mean => sum / self.data.train.len() as f64,
        }
    }

    fn record(&mut self, epoch: usize, theta: &[f64], train: (f64, Vec<Vec<f64>>)) -> Result<EpochRecord> {
        let net = Ficonn::new(&self.params(theta)?, self.cfg)?;
        self.passes.test += 1;
        let (_, test_preds) = net.batch(&self.data.test, &mut self.noise_rng)?;
        Ok(EpochRecord {
            epoch,
            train_loss: train.0 / self.data.train.len() as f64,
            train_accuracy: evaluate_predictions(&self.data.train, &train.1)?.accuracy,
            test_accuracy: evaluate_predictions(&self.data.test, &test_preds)?.accuracy,
            passes: self.passes,
        })
    }
}

/// In-situ training: each epoch perturbs every parameter at once, runs the
/// training set at `Θ ± Δ`, updates, and runs it once more at the new `Θ`.
pub fn train(data: &VowelDataset, cfg: &FiconnConfig, tc: &TrainConfig, init: Option<ModelParams>) -> Result<TrainState> {
    tc.validate()?;
    check_dataset(data, cfg.size)?;
    let mut params = match init {
        Some(p) => p,
        None => ModelParams::initial(cfg, tc.initial_beta, tc.initial_detuning, tc.seed)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_5b5a);
    let mut obj = Objective {
        data,
        cfg,
        template: params.clone(),
        reduction: tc.reduction,
        noise_rng: ChaCha8Rng::seed_from_u64(tc.seed ^ 0x0015_e000),
        passes: PassCounts::default(),
    };
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        let step = spsa_step(
            &params.theta,
            |t| {
                let (sum, _) = obj.train_pass(t, false)?;
                Ok(obj.reduce(sum))
            },
            tc.learning_rate_at(epoch),
            tc.perturbation,
            &mut rng,
        )?;
        params = ModelParams::new(params.size, params.layers, step.theta)?;
        let current = obj.train_pass(&params.theta, false)?;
        history.push(obj.record(epoch, &params.theta, current)?);
    }
    Ok(TrainState { schema_version: TRAINING_SCHEMA_VERSION, params, history })
}

/// Baseline that perturbs one parameter at a time: `2N` training passes per
/// epoch for the gradient, plus one monitoring pass for the log.
pub fn forward_difference_train(
    data: &VowelDataset,
    cfg: &FiconnConfig,
    tc: &TrainConfig,
    init: Option<ModelParams>,
) -> Result<TrainState> {
    tc.validate()?;
    check_dataset(data, cfg.size)?;
    let mut params = match init {
        Some(p) => p,
        None => ModelParams::initial(cfg, tc.initial_beta, tc.initial_detuning, tc.seed)?,
    };
    let mut obj = Objective {
        data,
        cfg,
        template: params.clone(),
        reduction: tc.reduction,
        noise_rng: ChaCha8Rng::seed_from_u64(tc.seed ^ 0x0015_e000),
        passes: PassCounts::default(),
    };
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        let grad = finite_difference_gradient(&params.theta, tc.perturbation, |t| {
            let (sum, _) = obj.train_pass(t, false)?;
            Ok(obj.reduce(sum))
        })?;
        let theta: Vec<f64> = params.theta.iter().zip(&grad).map(|(t, g)| t - tc.learning_rate_at(epoch) * g).collect();
        params = ModelParams::new(params.size, params.layers, theta)?;
        let current = obj.train_pass(&params.theta, true)?;
        history.push(obj.record(epoch, &params.theta, current)?);
    }
    Ok(TrainState { schema_version: TRAINING_SCHEMA_VERSION, params, history })
}

/// Central differences, one parameter at a time.
pub fn finite_difference_gradient<F>(theta: &[f64], step: f64, mut loss: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut t = theta.to_vec();
    let mut g = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        t[i] = theta[i] + step;
        let lp = loss(&t)?;
        t[i] = theta[i] - step;
        let lm = loss(&t)?;
        t[i] = theta[i];
        g.push((lp - lm) / (2.0 * step));
    }
    Ok(g)
}

/// Probabilities for a whole split from a trained state.
pub fn predict(samples: &[Sample], params: &ModelParams, cfg: &FiconnConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(Ficonn::new(params, cfg)?.batch(samples, &mut rng)?.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DigitalConfig {
    pub layers: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DigitalConfig {
    fn default() -> Self {
        Self { layers: 3, activation: Activation::Tanh, learning_rate: 0.01, epochs: 3000, seed: 0 }
    }
}

/// Bias-free real network with the same weight count as the optical meshes,
/// softmax output, trained full-batch with Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DigitalModel {
    pub activation: Activation,
    /// Row-major `N × N` weight matrices.
    pub weights: Vec<Vec<f64>>,
}

impl DigitalModel {
    pub fn random(layers: usize, activation: Activation, seed: u64) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidArgument("digital model needs at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = Normal::new(0.0, (1.0 / NUM_FEATURES as f64).sqrt()).expect("positive sigma");
        let weights = (0..layers)
            .map(|_| (0..NUM_FEATURES * NUM_FEATURES).map(|_| init.sample(&mut rng)).collect())
            .collect();
        Ok(Self { activation, weights })
    }

    pub fn num_weights(&self) -> usize {
        self.weights.iter().map(Vec::len).sum()
    }

    /// Activations of every layer, input first; the last entry holds logits.
    fn activations(&self, x: &[f64; NUM_FEATURES]) -> Vec<[f64; NUM_FEATURES]> {
        let n = NUM_FEATURES;
        let mut acts = vec![*x];
        for (l, w) in self.weights.iter().enumerate() {
            let prev = acts[l];
            let mut z = [0.0; NUM_FEATURES];
            for i in 0..n {
                z[i] = (0..n).map(|j| w[i * n + j] * prev[j]).sum();
            }
            if l + 1 < self.weights.len() {
                z = z.map(|v| self.activation.apply(v));
            }
            acts.push(z);
        }
        acts
    }

    pub fn probabilities(&self, x: &[f64; NUM_FEATURES]) -> Vec<f64> {
        softmax(self.activations(x).last().expect("at least one layer"))
    }

    /// Mean cross-entropy and its gradient over a batch.
    pub fn loss_and_gradient(&self, samples: &[Sample]) -> (f64, Vec<Vec<f64>>) {
        let n = NUM_FEATURES;
        let depth = self.weights.len();
        let mut grad = vec![vec![0.0; n * n]; depth];
        let mut total = 0.0;
        for s in samples {
            let acts = self.activations(&s.features);
            let p = softmax(&acts[depth]);
            total += cross_entropy(&p, s.label);
            let mut delta: Vec<f64> = p.clone();
            delta[s.label] -= 1.0;
            for l in (0..depth).rev() {
                let input = &acts[l];
                for i in 0..n {
                    for j in 0..n {
                        grad[l][i * n + j] += delta[i] * input[j];
                    }
                }
                if l > 0 {
                    let w = &self.weights[l];
                    delta = (0..n)
                        .map(|j| {
                            let back: f64 = (0..n).map(|i| w[i * n + j] * delta[i]).sum();
                            back * self.activation.slope(input[j])
                        })
                        .collect();
                }
            }
        }
        let scale = 1.0 / samples.len().max(1) as f64;
        for g in grad.iter_mut().flatten() {
            *g *= scale;
        }
        (total * scale, grad)
    }

    pub fn predict(&self, samples: &[Sample]) -> Vec<Vec<f64>> {
        samples.iter().map(|s| self.probabilities(&s.features)).collect()
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Trains the digital reference and logs the same per-epoch record.
pub fn train_digital(data: &VowelDataset, cfg: &DigitalConfig) -> Result<(DigitalModel, Vec<EpochRecord>)> {
    check_dataset(data, NUM_FEATURES)?;
    let mut model = DigitalModel::random(cfg.layers, cfg.activation, cfg.seed)?;
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m: Vec<Vec<f64>> = model.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut v = m.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut passes = PassCounts::default();
    for epoch in 1..=cfg.epochs {
        let (_, grad) = model.loss_and_gradient(&data.train);
        let t = epoch as i32;
        for l in 0..model.weights.len() {
            for k in 0..grad[l].len() {
                let g = grad[l][k];
                m[l][k] = b1 * m[l][k] + (1.0 - b1) * g;
                v[l][k] = b2 * v[l][k] + (1.0 - b2) * g * g;
                let mh = m[l][k] / (1.0 - b1.powi(t));
                let vh = v[l][k] / (1.0 - b2.powi(t));
                model.weights[l][k] -= cfg.learning_rate * mh / (vh.sqrt() + eps);
            }
        }
        passes.training += 1;
        passes.test += 1;
        let train_preds = model.predict(&data.train);
        let test_preds = model.predict(&data.test);
        let train_loss = data
            .train
            .iter()
            .zip(&train_preds)
            .map(|(s, p)| cross_entropy(p, s.label))
            .sum::<f64>()
            / data.train.len() as f64;
        history.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy: evaluate_predictions(&data.train, &train_preds)?.accuracy,
            test_accuracy: evaluate_predictions(&data.test, &test_preds)?.accuracy,
            passes,
        });
    }
    Ok((model, history))
}
