//! Digital twin: a parametric physical mesh fit to device input/output data,
//! then used to find commanded phases that undo the device's errors.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_10, TAU};

use crate::error::{Error, Result};
use crate::hardware::{
    crosstalk_support, db_to_amplitude, ErrorConfig, HardwareErrorModel, MeshFactors,
    ReadoutNoise, SplitterError, HARDWARE_SCHEMA_VERSION,
};
use crate::optim::{minimize, LbfgsOptions};
use crate::unitary::{
    clements_decompose, haar_with_rng, normalized_fidelity, wrap_phase, ComplexMatrix,
    MeshLayout, MeshProgram,
};

/// What the twin is fit against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitObjective {
    /// Photodiode powers only.
    Powers,
    /// Complex fields from the coherent receiver.
    Fields,
}

/// One programmed matrix and the device response to a set of inputs.
#[derive(Clone, Debug)]
pub struct TwinRecord {
    pub program: MeshProgram,
    /// Input fields, one column per vector.
    pub inputs: ComplexMatrix,
    pub fields: ComplexMatrix,
    pub powers: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct TwinFitDataset {
    pub size: usize,
    pub records: Vec<TwinRecord>,
}

impl TwinFitDataset {
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::InvalidArgument("twin dataset has no records".into()));
        }
        for (k, r) in self.records.iter().enumerate() {
            let n = self.size;
            let v = r.inputs.ncols();
            if r.program.size != n
                || r.inputs.nrows() != n
                || r.fields.shape() != (n, v)
                || r.powers.shape() != (n, v)
            {
                return Err(Error::Dimension(format!("record {k} has inconsistent shapes")));
            }
        }
        Ok(())
    }
}

/// Random unit-norm complex input vectors, one per column.
pub fn random_inputs<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> ComplexMatrix {
    let mut x = ComplexMatrix::from_fn(n, count, |_, _| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    for mut col in x.column_iter_mut() {
        let norm = col.norm();
        col /= Complex64::new(norm, 0.0);
    }
    x
}

/// Drives the simulated device and records what its detectors report.
pub fn measure_record<R: Rng + ?Sized>(
    truth: &HardwareErrorModel,
    program: &MeshProgram,
    inputs: &ComplexMatrix,
    noise: &ReadoutNoise,
    rng: &mut R,
) -> Result<TwinRecord> {
    let factors = MeshFactors::physical(program, truth)?;
    let mut out = inputs.clone();
    factors.forward(&mut out);
    let powers = out.map(|z| noise.apply(z.norm_sqr(), rng));
    let fields = out.map(|z| noise.apply_complex(z, rng));
    Ok(TwinRecord {
        program: program.clone(),
        inputs: inputs.clone(),
        fields,
        powers,
    })
}

/// The data-collection run: Haar-random programs, random input vectors.
pub fn collect_dataset(
    truth: &HardwareErrorModel,
    programs: usize,
    vectors: usize,
    noise: &ReadoutNoise,
    seed: u64,
) -> Result<TwinFitDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = truth.size;
    let mut records = Vec::with_capacity(programs);
    for _ in 0..programs {
        let u = haar_with_rng(n, &mut rng)?;
        let program = clements_decompose(&u)?;
        let inputs = random_inputs(n, vectors, &mut rng);
        records.push(measure_record(truth, &program, &inputs, noise, &mut rng)?);
    }
    Ok(TwinFitDataset { size: n, records })
}

/// Note attached to every fitted twin about what the data cannot pin down.
pub const GAUGE_NOTE: &str = "global output phase is unobservable from power data and is \
fixed by the receiver local oscillator in field mode; per-MZI losses are only constrained \
through products along optical paths, so individual values may trade off without changing \
predictions";

/// Physical mesh model with a flat parameter vector:
/// `[ε₀, ε₁ per MZI | loss dB per MZI | static offset per heater | crosstalk per coupled pair]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinModel {
    pub size: usize,
    /// Zero-drive phases `Φ₀`, taken from calibration and not fit.
    pub static_phases: Vec<f64>,
    /// Coupled heater pairs `(victim, aggressor)` whose coefficients are fit.
    pub support: Vec<(usize, usize)>,
    pub params: Vec<f64>,
}

impl TwinModel {
    /// Zero errors and unit transmissions, with crosstalk fit on the
    /// default neighbor support.
    pub fn initial(size: usize, static_phases: Vec<f64>) -> Result<Self> {
        Self::initial_with_support(size, static_phases, crosstalk_support(size))
    }

    pub fn initial_with_support(
        size: usize,
        static_phases: Vec<f64>,
        support: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let layout = MeshLayout::new(size);
        if static_phases.len() != layout.num_heaters() {
            return Err(Error::Dimension(format!(
                "expected {} static phases, got {}",
                layout.num_heaters(),
                static_phases.len()
            )));
        }
        let count = 3 * layout.num_mzis() + layout.num_heaters() + support.len();
        Ok(Self {
            size,
            static_phases,
            support,
            params: vec![0.0; count],
        })
    }

    /// Twin whose parameters equal a known error model on the given support.
    pub fn from_error_model(model: &HardwareErrorModel, support: Vec<(usize, usize)>) -> Result<Self> {
        model.validate()?;
        let mut twin = Self::initial_with_support(model.size, model.static_phases.clone(), support)?;
        let mzis = twin.num_mzis();
        let heaters = twin.num_heaters();
        for k in 0..mzis {
            twin.params[2 * k] = model.splitter_errors[k][0].deviation;
            twin.params[2 * k + 1] = model.splitter_errors[k][1].deviation;
            twin.params[2 * mzis + k] = model.component_loss_db[k];
        }
        twin.params[3 * mzis..3 * mzis + heaters].copy_from_slice(&model.phase_offsets);
        for (p, &(i, j)) in twin.support.clone().iter().enumerate() {
            twin.params[3 * mzis + heaters + p] = model.crosstalk.get(i, j);
        }
        Ok(twin)
    }

    fn num_mzis(&self) -> usize {
        self.size * (self.size - 1) / 2
    }

    fn num_heaters(&self) -> usize {
        self.size * self.size
    }

    fn offsets(&self) -> &[f64] {
        let m = self.num_mzis();
        &self.params[3 * m..3 * m + self.num_heaters()]
    }

    fn crosstalk_coeffs(&self) -> &[f64] {
        let m = self.num_mzis();
        &self.params[3 * m + self.num_heaters()..]
    }

    /// Actual phases for given heater drives.
    fn actual_from_drives(&self, drives: &[f64]) -> Vec<f64> {
        let offsets = self.offsets();
        let mut actual: Vec<f64> = (0..drives.len())
            .map(|h| self.static_phases[h] + drives[h] + offsets[h])
            .collect();
        for (&(i, j), &c) in self.support.iter().zip(self.crosstalk_coeffs()) {
            actual[i] += c * drives[j];
        }
        actual
    }

    fn factors_from_drives(&self, drives: &[f64]) -> MeshFactors {
        let m = self.num_mzis();
        let layout = MeshLayout::new(self.size);
        MeshFactors {
            size: self.size,
            sites: layout.sites().to_vec(),
            phases: self.actual_from_drives(drives),
            eps: (0..m).map(|k| [self.params[2 * k], self.params[2 * k + 1]]).collect(),
            amplitude: (0..m).map(|k| db_to_amplitude(self.params[2 * m + k])).collect(),
        }
    }

    pub fn drives(&self, program: &MeshProgram) -> Vec<f64> {
        program
            .heater_phases()
            .iter()
            .zip(&self.static_phases)
            .map(|(c, s)| wrap_phase(c - s))
            .collect()
    }

    pub fn factors(&self, program: &MeshProgram) -> Result<MeshFactors> {
        program.validate()?;
        if program.size != self.size {
            return Err(Error::Dimension("program and twin sizes differ".into()));
        }
        Ok(self.factors_from_drives(&self.drives(program)))
    }

    pub fn predict_matrix(&self, program: &MeshProgram) -> Result<ComplexMatrix> {
        Ok(self.factors(program)?.transfer_matrix())
    }

    /// Converts to the hardware schema. Negative fitted losses are clamped
    /// to zero because the schema only admits passive devices.
    pub fn to_error_model(&self) -> HardwareErrorModel {
        let m = self.num_mzis();
        let mut model = HardwareErrorModel::ideal(self.size);
        model.static_phases = self.static_phases.clone();
        for k in 0..m {
            model.splitter_errors[k] = [
                SplitterError { deviation: self.params[2 * k] },
                SplitterError { deviation: self.params[2 * k + 1] },
            ];
            model.component_loss_db[k] = self.params[2 * m + k].max(0.0);
        }
        model.phase_offsets = self.offsets().to_vec();
        for (&(i, j), &c) in self.support.iter().zip(self.crosstalk_coeffs()) {
            model.crosstalk.set(i, j, c);
        }
        model
    }

    /// Maps a gradient over factor parameters onto the twin parameters.
    fn accumulate(
        &self,
        grad: &crate::hardware::FactorGradient,
        drives: &[f64],
        out: &mut [f64],
    ) {
        let m = self.num_mzis();
        let heaters = self.num_heaters();
        for k in 0..m {
            out[2 * k] += grad.eps[k][0];
            out[2 * k + 1] += grad.eps[k][1];
            let amp = db_to_amplitude(self.params[2 * m + k]);
            out[2 * m + k] += grad.amplitude[k] * (-LN_10 / 20.0) * amp;
        }
        for h in 0..heaters {
            out[3 * m + h] += grad.phases[h];
        }
        for (p, &(i, j)) in self.support.iter().enumerate() {
            out[3 * m + heaters + p] += grad.phases[i] * drives[j];
        }
    }

    /// Mean squared residual over the records and its gradient.
    pub fn loss_and_gradient(
        &self,
        records: &[TwinRecord],
        objective: FitObjective,
    ) -> (f64, Vec<f64>) {
        let count: usize = records.iter().map(|r| r.inputs.len()).sum();
        let scale = 1.0 / count.max(1) as f64;
        let zero = || (0.0, vec![0.0; self.params.len()]);
        records
            .par_iter()
            .map(|r| {
                let drives = self.drives(&r.program);
                let factors = self.factors_from_drives(&drives);
                let mut out = r.inputs.clone();
                let trace = factors.forward_traced(&mut out);
                let mut lambda = ComplexMatrix::zeros(out.nrows(), out.ncols());
                let mut loss = 0.0;
                for idx in 0..out.len() {
                    let o = out[idx];
                    match objective {
                        FitObjective::Fields => {
                            let d = o - r.fields[idx];
                            loss += d.norm_sqr();
                            lambda[idx] = d * (2.0 * scale);
                        }
                        FitObjective::Powers => {
                            let d = o.norm_sqr() - r.powers[idx];
                            loss += d * d;
                            lambda[idx] = o * (4.0 * d * scale);
                        }
                    }
                }
                let g = factors.backward(&trace, &lambda);
                let mut grad = vec![0.0; self.params.len()];
                self.accumulate(&g, &drives, &mut grad);
                (loss * scale, grad)
            })
            .reduce(zero, |(la, mut ga), (lb, gb)| {
                ga.iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
                (la + lb, ga)
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinFitOptions {
    pub objective: FitObjective,
    pub lbfgs: LbfgsOptions,
    /// Mean squared residual regarded as a successful fit.
    pub tolerance: f64,
    /// Records at the end of the dataset kept out of the fit.
    pub holdout: usize,
}

impl Default for TwinFitOptions {
    fn default() -> Self {
        Self {
            objective: FitObjective::Fields,
            lbfgs: LbfgsOptions {
                max_iterations: 3000,
                gradient_tolerance: 1e-12,
                value_tolerance: 1e-15,
                memory: 20,
                ..LbfgsOptions::default()
            },
            tolerance: 1e-3,
            holdout: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinFitReport {
    pub iterations: usize,
    pub evaluations: usize,
    pub residual: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Mean and spread of held-out matrix fidelity (field records only).
    pub held_out_fidelity: Option<(f64, f64)>,
    pub gauge_note: String,
}

/// A fitted twin as persisted: hardware schema plus fit metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinArtifact {
    pub schema_version: u32,
    pub error_model: HardwareErrorModel,
    pub twin: TwinModel,
    pub report: TwinFitReport,
}

impl TwinArtifact {
    pub fn new(twin: TwinModel, report: TwinFitReport) -> Self {
        Self {
            schema_version: HARDWARE_SCHEMA_VERSION,
            error_model: twin.to_error_model(),
            twin,
            report,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(text)?;
        if a.schema_version != HARDWARE_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: a.schema_version,
                expected: HARDWARE_SCHEMA_VERSION,
            });
        }
        Ok(a)
    }
}

/// Least-squares estimate `Y X⁺` of the matrix behind one field record.
pub fn estimate_matrix(record: &TwinRecord) -> Result<ComplexMatrix> {
    let x = &record.inputs;
    if x.ncols() < x.nrows() {
        return Err(Error::InvalidArgument(
            "need at least as many input vectors as modes to estimate a matrix".into(),
        ));
    }
    let gram = x * x.adjoint();
    let inv = gram
        .try_inverse()
        .ok_or(Error::Singular { condition: f64::INFINITY })?;
    Ok(&record.fields * x.adjoint() * inv)
}

/// Mean and standard deviation of twin-vs-measured fidelity over records.
pub fn prediction_fidelity(twin: &TwinModel, records: &[TwinRecord]) -> Result<(f64, f64)> {
    let values: Vec<f64> = records
        .iter()
        .map(|r| {
            let measured = estimate_matrix(r)?;
            normalized_fidelity(&measured, &twin.predict_matrix(&r.program)?)
        })
        .collect::<Result<_>>()?;
    Ok(mean_std(&values))
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fits the twin parameters to the dataset by L-BFGS.
pub fn fit_twin(
    data: &TwinFitDataset,
    init: &TwinModel,
    opts: &TwinFitOptions,
) -> Result<(TwinModel, TwinFitReport)> {
    data.validate()?;
    if init.size != data.size {
        return Err(Error::Dimension("twin and dataset sizes differ".into()));
    }
    if opts.holdout >= data.records.len() {
        return Err(Error::InvalidArgument(
            "holdout leaves no records to fit".into(),
        ));
    }
    let split = data.records.len() - opts.holdout;
    let (train, held) = data.records.split_at(split);
    let mut model = init.clone();
    let result = minimize(
        |p: &[f64]| {
            let mut m = model.clone();
            m.params.copy_from_slice(p);
            m.loss_and_gradient(train, opts.objective)
        },
        &init.params,
        &opts.lbfgs,
    );
    model.params = result.x.clone();
    let converged = result.converged() || result.value <= opts.tolerance;
    if result.value > opts.tolerance {
        return Err(Error::NoConvergence {
            iterations: result.iterations,
            gradient_norm: result.gradient_norm,
        });
    }
    let held_out_fidelity = if held.is_empty() || opts.objective == FitObjective::Powers {
        None
    } else {
        Some(prediction_fidelity(&model, held)?)
    };
    let report = TwinFitReport {
        iterations: result.iterations,
        evaluations: result.evaluations,
        residual: result.value,
        gradient_norm: result.gradient_norm,
        converged,
        held_out_fidelity,
        gauge_note: GAUGE_NOTE.to_string(),
    };
    log::info!(
        "twin fit: {} iterations, residual {:.3e}, held-out {:?}",
        report.iterations,
        report.residual,
        report.held_out_fidelity
    );
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOptions {
    pub lbfgs: LbfgsOptions,
    /// Below this twin-predicted fidelity the target is reported infeasible.
    pub min_fidelity: f64,
}

impl Default for CorrectionOptions {
    fn default() -> Self {
        Self {
            lbfgs: LbfgsOptions {
                max_iterations: 400,
                gradient_tolerance: 1e-10,
                value_tolerance: 1e-13,
                ..LbfgsOptions::default()
            },
            min_fidelity: 0.5,
        }
    }
}

/// `1 − |Tr(U†T)|² / (N ‖T‖²)` and its gradient with respect to the heater
/// drives.
fn correction_objective(twin: &TwinModel, target: &ComplexMatrix, drives: &[f64]) -> (f64, Vec<f64>) {
    let n = target.nrows();
    let factors = twin.factors_from_drives(drives);
    let mut t = ComplexMatrix::identity(n, n);
    let trace = factors.forward_traced(&mut t);
    let tau: Complex64 = target.iter().zip(t.iter()).map(|(u, v)| u.conj() * v).sum();
    let s: f64 = t.iter().map(|v| v.norm_sqr()).sum();
    let nf = n as f64;
    let f = tau.norm_sqr() / (nf * s);
    let lambda = ComplexMatrix::from_fn(n, n, |r, c| {
        -(target[(r, c)] * tau * (2.0 / (nf * s)) - t[(r, c)] * (2.0 * tau.norm_sqr() / (nf * s * s)))
    });
    let g = factors.backward(&trace, &lambda);
    // actual_i = Φ₀ᵢ + dᵢ + Σⱼ Mᵢⱼ dⱼ + δᵢ, so ∂/∂dⱼ = g_j + Σᵢ g_i Mᵢⱼ
    let mut grad = g.phases.clone();
    for (&(i, j), &c) in twin.support.iter().zip(twin.crosstalk_coeffs()) {
        grad[j] += g.phases[i] * c;
    }
    (1.0 - f, grad)
}

/// Twin-predicted fidelity of a commanded program (loss-normalized).
pub fn twin_fidelity(twin: &TwinModel, target: &ComplexMatrix, program: &MeshProgram) -> Result<f64> {
    normalized_fidelity(target, &twin.predict_matrix(program)?)
}

/// Commanded phases that realize `target` on the device the twin describes.
///
/// Starts from the ideal decomposition with the known offsets and crosstalk
/// inverted, then polishes the heater drives against the full twin. The
/// direct decomposition is returned instead whenever the twin predicts it
/// does better.
pub fn corrected_program(
    target: &ComplexMatrix,
    twin: &TwinModel,
    opts: &CorrectionOptions,
) -> Result<MeshProgram> {
    let direct = clements_decompose(target)?;
    if direct.size != twin.size {
        return Err(Error::Dimension("target and twin sizes differ".into()));
    }
    let wanted = direct.heater_phases();
    let heaters = wanted.len();
    // first-order inverse: drive so that Φ₀ + M d + δ hits the ideal phase
    let mut rhs: Vec<f64> = (0..heaters)
        .map(|h| wrap_phase(wanted[h] - twin.offsets()[h] - twin.static_phases[h]))
        .collect();
    let mut drives = rhs.clone();
    for _ in 0..3 {
        drives = solve_drives(twin, &rhs);
        let mut changed = false;
        for h in 0..heaters {
            if drives[h] < 0.0 {
                rhs[h] += TAU;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut best_drives = drives.clone();
    for _round in 0..3 {
        let r = minimize(
            |d: &[f64]| correction_objective(twin, target, d),
            &best_drives,
            &opts.lbfgs,
        );
        best_drives = r.x;
        // physical drives live in [0, 2π); re-anchor any that left and retry
        let outside = best_drives.iter().any(|d| !(0.0..TAU).contains(d));
        if !outside {
            break;
        }
        for d in best_drives.iter_mut() {
            *d = wrap_phase(*d);
        }
    }
    let commanded: Vec<f64> = best_drives
        .iter()
        .zip(&twin.static_phases)
        .map(|(d, s)| wrap_phase(s + d))
        .collect();
    let corrected = MeshProgram::from_heater_phases(twin.size, &commanded)?;
    let f_corr = twin_fidelity(twin, target, &corrected)?;
    let f_direct = twin_fidelity(twin, target, &direct)?;
    let (best, f_best) = if f_corr >= f_direct {
        (corrected, f_corr)
    } else {
        (direct, f_direct)
    };
    if f_best < opts.min_fidelity {
        return Err(Error::Infeasible { best_fidelity: f_best });
    }
    Ok(best)
}

/// Drives `d` with `d + Σ M d = rhs` on the twin's crosstalk support.
fn solve_drives(twin: &TwinModel, rhs: &[f64]) -> Vec<f64> {
    if twin.support.is_empty() || twin.crosstalk_coeffs().iter().all(|c| *c == 0.0) {
        return rhs.to_vec();
    }
    let n = rhs.len();
    let mut m = DMatrix::<f64>::identity(n, n);
    for (&(i, j), &c) in twin.support.iter().zip(twin.crosstalk_coeffs()) {
        m[(i, j)] += c;
    }
    match m.lu().solve(&nalgebra::DVector::from_column_slice(rhs)) {
        Some(d) => d.iter().copied().collect(),
        None => rhs.to_vec(),
    }
}

/// Where the benchmark's twin comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TwinSource {
    /// Use the true error model (an oracle twin).
    Truth,
    /// Fit a twin to data collected from the device.
    Fit {
        programs: usize,
        vectors: usize,
        noise: ReadoutNoise,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub size: usize,
    pub matrices: usize,
    pub errors: ErrorConfig,
    pub seed: u64,
    pub twin: TwinSource,
}

impl BenchmarkConfig {
    /// 500 Haar matrices on a 6x6 device drawn from the direct-programming preset.
    pub fn fidelity_histogram() -> Self {
        Self {
            size: 6,
            matrices: 500,
            errors: ErrorConfig::direct_programming_preset(),
            seed: 2024,
            twin: TwinSource::Fit {
                programs: 60,
                vectors: 20,
                noise: ReadoutNoise::none(),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub fidelity_direct: f64,
    pub fidelity_corrected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub rows: Vec<BenchmarkRow>,
    pub twin_report: Option<TwinFitReport>,
}

impl BenchmarkResult {
    pub fn direct_stats(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.fidelity_direct).collect::<Vec<_>>())
    }

    pub fn corrected_stats(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.fidelity_corrected).collect::<Vec<_>>())
    }
}

/// Programs Haar matrices directly and through the twin, and measures both
/// on the simulated device.
pub fn fidelity_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkResult> {
    let truth = HardwareErrorModel::random(config.size, &config.errors, config.seed)?;
    let support = crosstalk_support(config.size);
    let (twin, twin_report) = match &config.twin {
        TwinSource::Truth => (TwinModel::from_error_model(&truth, support)?, None),
        TwinSource::Fit {
            programs,
            vectors,
            noise,
        } => {
            let data = collect_dataset(
                &truth,
                programs + 5,
                *vectors,
                noise,
                config.seed.wrapping_add(1),
            )?;
            let init = TwinModel::initial(config.size, truth.static_phases.clone())?;
            let opts = TwinFitOptions {
                holdout: 5,
                tolerance: 1.0,
                ..TwinFitOptions::default()
            };
            let (twin, report) = fit_twin(&data, &init, &opts)?;
            (twin, Some(report))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let targets: Vec<ComplexMatrix> = (0..config.matrices)
        .map(|_| haar_with_rng(config.size, &mut rng))
        .collect::<Result<_>>()?;
    let opts = CorrectionOptions {
        min_fidelity: 0.0,
        ..CorrectionOptions::default()
    };
    let rows = targets
        .par_iter()
        .map(|u| {
            let direct = clements_decompose(u)?;
            let corrected = corrected_program(u, &twin, &opts)?;
            let measure = |p: &MeshProgram| {
                normalized_fidelity(u, &crate::hardware::physical_transfer_matrix(p, &truth)?)
            };
            Ok(BenchmarkRow {
                fidelity_direct: measure(&direct)?,
                fidelity_corrected: measure(&corrected)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkResult { rows, twin_report })
}
