//! Physical device models: heater calibration curves, erroneous MZI meshes,
//! thermal crosstalk, the transmitter and the coherent receiver.
//!
//! A commanded heater phase `Φ'` is what the controller believes it sets. The
//! heater drive is `d = wrap(Φ' − Φ₀)` where `Φ₀` is the zero-current phase
//! known from calibration, and the phase the light actually sees is
//! `Φ₀ + M·d + δ` with `M` the crosstalk matrix and `δ` any residual static
//! offset the calibration missed.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_4, PI, TAU};

use crate::constants;
use crate::error::{Error, Result};
use crate::unitary::{wrap_phase, ComplexMatrix, MeshLayout, MeshProgram, MziPhases, MziSite};

pub const HARDWARE_SCHEMA_VERSION: u32 = 1;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Which MZI output port a photodiode watches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Port {
    Bar,
    Cross,
}

impl Port {
    /// Sign in front of the cosine: `T = A ± B cos(...)`.
    pub fn sign(self) -> f64 {
        match self {
            Port::Cross => 1.0,
            Port::Bar => -1.0,
        }
    }
}

/// Electrical and optical calibration of one thermal phase shifter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseShifterCal {
    pub schema_version: u32,
    /// `a₁..a₄` of `V(I) = a₄I⁴ + a₃I³ + a₂I² + a₁I`.
    pub v_coeffs: [f64; 4],
    /// `p₀..p₄` of `θ(I) = p₄I⁴ + ... + p₁I + p₀`.
    pub phase_coeffs: [f64; 5],
    /// Dissipated power for a π shift (W).
    pub p_pi: f64,
    pub a: f64,
    pub b: f64,
    /// Current compliance of the driver (A).
    pub max_current: f64,
}

fn check_current(current: f64) -> Result<()> {
    if !(current >= 0.0) || !current.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "heater current must be finite and non-negative, got {current}"
        )));
    }
    Ok(())
}

impl PhaseShifterCal {
    /// Builds a calibration from the electrical fit. The quartic phase map is
    /// the least-squares projection of `p₀ + π I V(I) / P_π` onto `p₁..p₄`
    /// over the compliance range; it is exact whenever `a₄ = 0`.
    pub fn new(
        v_coeffs: [f64; 4],
        p_pi: f64,
        p0: f64,
        a: f64,
        b: f64,
        max_current: f64,
    ) -> Result<Self> {
        if !(max_current > 0.0) {
            return Err(Error::InvalidArgument("max_current must be positive".into()));
        }
        let mut cal = Self {
            schema_version: HARDWARE_SCHEMA_VERSION,
            v_coeffs,
            phase_coeffs: [p0, 0.0, 0.0, 0.0, 0.0],
            p_pi,
            a,
            b,
            max_current,
        };
        cal.validate()?;
        cal.phase_coeffs = project_phase_polynomial(&cal);
        Ok(cal)
    }

    /// Ohmic heater with resistance `r` and the given `P_π`, ideal extinction.
    pub fn ohmic(resistance: f64, p_pi: f64, p0: f64, max_current: f64) -> Result<Self> {
        Self::new([resistance, 0.0, 0.0, 0.0], p_pi, p0, 0.5, 0.5, max_current)
    }

    pub fn validate(&self) -> Result<()> {
        const SLACK: f64 = 1e-12;
        if self.schema_version != HARDWARE_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: HARDWARE_SCHEMA_VERSION,
            });
        }
        let finite = self.v_coeffs.iter().chain(&self.phase_coeffs).all(|c| c.is_finite());
        if !finite || !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::InvalidArgument("non-finite calibration coefficient".into()));
        }
        if !(self.p_pi > 0.0) {
            return Err(Error::InvalidArgument(format!("P_pi must be positive, got {}", self.p_pi)));
        }
        if !(self.b > 0.0) {
            return Err(Error::InvalidArgument(format!("B must be positive, got {}", self.b)));
        }
        if self.a - self.b < -SLACK || self.a + self.b > 1.0 + SLACK {
            return Err(Error::InvalidArgument(format!(
                "transmission range [{}, {}] is not physical",
                self.a - self.b,
                self.a + self.b
            )));
        }
        Ok(())
    }

    pub fn p0(&self) -> f64 {
        self.phase_coeffs[0]
    }

    pub fn heater_voltage(&self, current: f64) -> Result<f64> {
        check_current(current)?;
        let [a1, a2, a3, a4] = self.v_coeffs;
        Ok((((a4 * current + a3) * current + a2) * current + a1) * current)
    }

    pub fn dissipated_power(&self, current: f64) -> Result<f64> {
        Ok(current * self.heater_voltage(current)?)
    }

    /// Phase from the electrical form, `p₀ + π I V(I) / P_π`.
    pub fn electrical_phase(&self, current: f64) -> Result<f64> {
        Ok(self.p0() + PI * self.dissipated_power(current)? / self.p_pi)
    }

    pub fn transmission_curve(&self, current: f64, port: Port) -> Result<f64> {
        let phase = self.electrical_phase(current)?;
        Ok(self.a + port.sign() * self.b * phase.cos())
    }

    pub fn phase_from_current(&self, current: f64) -> Result<f64> {
        check_current(current)?;
        let p = &self.phase_coeffs;
        Ok((((p[4] * current + p[3]) * current + p[2]) * current + p[1]) * current + p[0])
    }

    /// Reachable absolute phase range over `[0, max_current]`.
    pub fn phase_range(&self) -> (f64, f64) {
        let lo = self.p0();
        let hi = self
            .phase_from_current(self.max_current)
            .expect("max_current validated positive");
        (lo.min(hi), lo.max(hi))
    }

    /// Inverts [`phase_from_current`](Self::phase_from_current) by bisection.
    pub fn current_for_phase(&self, target: f64) -> Result<f64> {
        let (min, max) = self.phase_range();
        if !target.is_finite() || target < min - 1e-12 || target > max + 1e-12 {
            return Err(Error::Unreachable { target, min, max });
        }
        let f = |i: f64| self.phase_from_current(i).map(|p| p - target);
        let (mut lo, mut hi) = (0.0, self.max_current);
        let mut f_lo = f(lo)?;
        if f_lo.abs() < 1e-13 {
            return Ok(0.0);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let f_mid = f(mid)?;
            if f_mid == 0.0 || (hi - lo) < 1e-18 {
                return Ok(mid);
            }
            if f_mid.signum() == f_lo.signum() {
                lo = mid;
                f_lo = f_mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Current giving `target` modulo 2π, choosing the smallest drive.
    pub fn current_for_wrapped_phase(&self, target: f64) -> Result<f64> {
        let absolute = self.p0() + wrap_phase(target - self.p0());
        self.current_for_phase(absolute)
    }

    /// `1/(A − B)`; `None` when the extinction is unbounded.
    pub fn extinction_ratio(&self) -> Option<f64> {
        let floor = self.a - self.b;
        if floor <= 1e-15 {
            None
        } else {
            Some(1.0 / floor)
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cal: Self = serde_json::from_str(text)?;
        cal.validate()?;
        Ok(cal)
    }
}

fn project_phase_polynomial(cal: &PhaseShifterCal) -> [f64; 5] {
    const SAMPLES: usize = 65;
    let scale = cal.max_current;
    let mut design = DMatrix::<f64>::zeros(SAMPLES, 4);
    let mut rhs = DVector::<f64>::zeros(SAMPLES);
    for s in 0..SAMPLES {
        let u = s as f64 / (SAMPLES - 1) as f64;
        let current = u * scale;
        for k in 0..4 {
            design[(s, k)] = u.powi(k as i32 + 1);
        }
        let [a1, a2, a3, a4] = cal.v_coeffs;
        let v = (((a4 * current + a3) * current + a2) * current + a1) * current;
        rhs[s] = PI * current * v / cal.p_pi;
    }
    let q = design
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .expect("svd with both factors computed");
    let mut p = [cal.phase_coeffs[0], 0.0, 0.0, 0.0, 0.0];
    for k in 0..4 {
        p[k + 1] = q[k] / scale.powi(k as i32 + 1);
    }
    p
}

/// Deviation of a directional coupler from the ideal 50-50 angle π/4.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitterError {
    pub deviation: f64,
}

impl SplitterError {
    /// `[[cos κ, i sin κ], [i sin κ, cos κ]]` with `κ = π/4 + ε`.
    pub fn coupler(self) -> [Complex64; 4] {
        coupler(self.deviation)
    }
}

fn coupler(eps: f64) -> [Complex64; 4] {
    let (s, c) = (FRAC_PI_4 + eps).sin_cos();
    [
        Complex64::new(c, 0.0),
        Complex64::new(0.0, s),
        Complex64::new(0.0, s),
        Complex64::new(c, 0.0),
    ]
}

fn coupler_derivative(eps: f64) -> [Complex64; 4] {
    let (s, c) = (FRAC_PI_4 + eps).sin_cos();
    [
        Complex64::new(-s, 0.0),
        Complex64::new(0.0, c),
        Complex64::new(0.0, c),
        Complex64::new(-s, 0.0),
    ]
}

/// Linear phase coupling between heater channels, `M_ii = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkMatrix {
    channels: usize,
    /// Row-major entries.
    entries: Vec<f64>,
}

impl CrosstalkMatrix {
    pub fn identity(channels: usize) -> Self {
        let mut entries = vec![0.0; channels * channels];
        for i in 0..channels {
            entries[i * channels + i] = 1.0;
        }
        Self { channels, entries }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let channels = rows.len();
        if rows.iter().any(|r| r.len() != channels) {
            return Err(Error::Dimension("crosstalk matrix must be square".into()));
        }
        let m = Self {
            channels,
            entries: rows.iter().flatten().copied().collect(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.len() != self.channels * self.channels {
            return Err(Error::Dimension("crosstalk entry count mismatch".into()));
        }
        if self.entries.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidArgument("non-finite crosstalk entry".into()));
        }
        for i in 0..self.channels {
            if (self.get(i, i) - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "crosstalk diagonal must be 1, M[{i}][{i}] = {}",
                    self.get(i, i)
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.channels + j]
    }

    /// Sets an off-diagonal coefficient. The diagonal is fixed at 1.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert_ne!(i, j, "crosstalk diagonal is fixed");
        self.entries[i * self.channels + j] = value;
    }

    pub fn is_identity(&self) -> bool {
        (0..self.channels).all(|i| (0..self.channels).all(|j| i == j || self.get(i, j) == 0.0))
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.channels, self.channels, &self.entries)
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.channels)
            .map(|i| (0..self.channels).map(|j| self.get(i, j) * v[j]).sum())
            .collect()
    }

    /// 2-norm condition number.
    pub fn condition_number(&self) -> f64 {
        let sv = self.to_matrix().singular_values();
        let max = sv.max();
        let min = sv.min();
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

/// Largest condition number accepted before a crosstalk matrix counts as singular.
pub const MAX_CROSSTALK_CONDITION: f64 = 1e10;

/// `Φ = M⁻¹(Φ' − Φ₀) + Φ₀`: settings that land on `desired` under crosstalk.
pub fn apply_crosstalk_correction(
    desired: &[f64],
    m: &CrosstalkMatrix,
    static0: &[f64],
) -> Result<Vec<f64>> {
    let n = m.channels();
    if desired.len() != n || static0.len() != n {
        return Err(Error::Dimension(format!(
            "crosstalk correction needs {n} phases, got {} desired and {} static",
            desired.len(),
            static0.len()
        )));
    }
    let condition = m.condition_number();
    if !(condition < MAX_CROSSTALK_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let rhs = DVector::from_iterator(n, desired.iter().zip(static0).map(|(d, s)| d - s));
    let solution = m
        .to_matrix()
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular { condition })?;
    Ok(solution.iter().zip(static0).map(|(x, s)| x + s).collect())
}

/// Heater pairs that couple thermally: the two heaters of one MZI, and
/// like heaters of vertically adjacent MZIs in the same column. Phase-screen
/// heaters are treated as isolated.
pub fn crosstalk_support(n: usize) -> Vec<(usize, usize)> {
    let layout = MeshLayout::new(n);
    let mut pairs = Vec::new();
    for (k, site) in layout.sites().iter().enumerate() {
        pairs.push((2 * k, 2 * k + 1));
        pairs.push((2 * k + 1, 2 * k));
        if let Some(below) = layout.index_of(site.column, site.top + 2) {
            for h in 0..2 {
                pairs.push((2 * k + h, 2 * below + h));
                pairs.push((2 * below + h, 2 * k + h));
            }
        }
    }
    pairs
}

/// Error distribution used to draw a random [`HardwareErrorModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorConfig {
    /// Standard deviation of each coupler deviation (rad).
    pub splitter_sigma: f64,
    pub loss_db_mean: f64,
    pub loss_db_sigma: f64,
    /// Residual static offsets the calibration did not remove (rad, std).
    pub offset_sigma: f64,
    /// Standard deviation of each coupled crosstalk coefficient.
    pub crosstalk_sigma: f64,
}

impl ErrorConfig {
    pub fn ideal() -> Self {
        Self {
            splitter_sigma: 0.0,
            loss_db_mean: 0.0,
            loss_db_sigma: 0.0,
            offset_sigma: 0.0,
            crosstalk_sigma: 0.0,
        }
    }

    /// Calibrated so that direct Clements programming of 6x6 Haar matrices
    /// averages a fidelity of about 0.90.
    pub fn direct_programming_preset() -> Self {
        Self {
            splitter_sigma: 0.06,
            loss_db_mean: constants::MZI_LOSS_DB,
            loss_db_sigma: constants::MZI_LOSS_DB_SIGMA,
            offset_sigma: 0.16,
            crosstalk_sigma: 0.02,
        }
    }

    /// The synthetic device used for twin-fit checks: 0.02 rad couplers,
    /// 0.22 dB per MZI and random static offsets.
    pub fn twin_preset() -> Self {
        Self {
            splitter_sigma: 0.02,
            loss_db_mean: constants::MZI_LOSS_DB,
            loss_db_sigma: 0.0,
            offset_sigma: 0.3,
            crosstalk_sigma: 0.0,
        }
    }
}

/// Static imperfections of one physical mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareErrorModel {
    pub schema_version: u32,
    pub size: usize,
    /// Input and output coupler of each MZI, canonical MZI order.
    pub splitter_errors: Vec<[SplitterError; 2]>,
    pub component_loss_db: Vec<f64>,
    /// Zero-drive phase `Φ₀` of each heater, known to the controller.
    pub static_phases: Vec<f64>,
    /// Residual static phase the controller does not know about.
    pub phase_offsets: Vec<f64>,
    /// Heater-by-heater coupling, canonical heater order.
    pub crosstalk: CrosstalkMatrix,
}

impl HardwareErrorModel {
    pub fn ideal(size: usize) -> Self {
        let layout = MeshLayout::new(size);
        let heaters = layout.num_heaters();
        Self {
            schema_version: HARDWARE_SCHEMA_VERSION,
            size,
            splitter_errors: vec![[SplitterError::default(); 2]; layout.num_mzis()],
            component_loss_db: vec![0.0; layout.num_mzis()],
            static_phases: vec![0.0; heaters],
            phase_offsets: vec![0.0; heaters],
            crosstalk: CrosstalkMatrix::identity(heaters),
        }
    }

    pub fn random(size: usize, config: &ErrorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with_rng(size, config, &mut rng)
    }

    pub fn random_with_rng<R: Rng + ?Sized>(
        size: usize,
        config: &ErrorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument("mesh size must be at least 2".into()));
        }
        let normal = |sigma: f64| {
            Normal::new(0.0, sigma.max(0.0))
                .map_err(|e| Error::InvalidArgument(format!("bad standard deviation: {e}")))
        };
        let split = normal(config.splitter_sigma)?;
        let loss = normal(config.loss_db_sigma)?;
        let offset = normal(config.offset_sigma)?;
        let xt = normal(config.crosstalk_sigma)?;
        let mut model = Self::ideal(size);
        for pair in &mut model.splitter_errors {
            for s in pair.iter_mut() {
                // keep generated couplers well inside the physical range
                s.deviation = split.sample(rng).clamp(-0.7, 0.7);
            }
        }
        for l in &mut model.component_loss_db {
            *l = (config.loss_db_mean + loss.sample(rng)).max(0.0);
        }
        for p in &mut model.static_phases {
            *p = rng.gen_range(0.0..TAU);
        }
        for p in &mut model.phase_offsets {
            *p = offset.sample(rng);
        }
        if config.crosstalk_sigma > 0.0 {
            for (i, j) in crosstalk_support(size) {
                model.crosstalk.set(i, j, xt.sample(rng));
            }
        }
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != HARDWARE_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: HARDWARE_SCHEMA_VERSION,
            });
        }
        let layout = MeshLayout::new(self.size);
        let (mzis, heaters) = (layout.num_mzis(), layout.num_heaters());
        if self.splitter_errors.len() != mzis
            || self.component_loss_db.len() != mzis
            || self.static_phases.len() != heaters
            || self.phase_offsets.len() != heaters
            || self.crosstalk.channels() != heaters
        {
            return Err(Error::Dimension(format!(
                "error model does not match a {0}x{0} mesh ({mzis} MZIs, {heaters} heaters)",
                self.size
            )));
        }
        if self.component_loss_db.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidArgument("losses must be non-negative".into()));
        }
        self.crosstalk.validate()
    }

    /// Phases the light actually sees for a commanded program.
    pub fn actual_phases(&self, program: &MeshProgram) -> Result<Vec<f64>> {
        self.validate()?;
        program.validate()?;
        if program.size != self.size {
            return Err(Error::Dimension(format!(
                "program is {0}x{0} but error model is {1}x{1}",
                program.size, self.size
            )));
        }
        let commanded = program.heater_phases();
        let drive = self.drives(&commanded);
        let mixed = if self.crosstalk.is_identity() {
            drive
        } else {
            self.crosstalk.apply(&drive)
        };
        Ok(mixed
            .iter()
            .zip(&self.static_phases)
            .zip(&self.phase_offsets)
            .map(|((m, s), o)| s + m + o)
            .collect())
    }

    /// Heater drives `wrap(Φ' − Φ₀)` for commanded phases.
    pub fn drives(&self, commanded: &[f64]) -> Vec<f64> {
        commanded
            .iter()
            .zip(&self.static_phases)
            .map(|(c, s)| wrap_phase(c - s))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Amplitude transmission for a loss in dB.
pub fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(-db / 20.0)
}

/// One concrete mesh: actual phases, coupler angles and loss amplitudes.
///
/// The MZI at site `k` applies, in order, coupler `ε₀`, `θ₁` on the upper
/// arm, coupler `ε₁`, `θ₂` on the upper output, then the loss amplitude.
/// With zero errors that product is exactly the ideal MZI matrix.
#[derive(Clone, Debug)]
pub struct MeshFactors {
    pub size: usize,
    pub sites: Vec<MziSite>,
    /// Heater phases in canonical heater order.
    pub phases: Vec<f64>,
    pub eps: Vec<[f64; 2]>,
    pub amplitude: Vec<f64>,
}

/// Gradients of a real loss with respect to every factor parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorGradient {
    pub phases: Vec<f64>,
    pub eps: Vec<[f64; 2]>,
    pub amplitude: Vec<f64>,
}

/// States recorded by a forward pass for the adjoint sweep.
pub struct ForwardTrace {
    input: ComplexMatrix,
    /// Rows `(top, top+1)` of the state just before each MZI.
    before: Vec<[Vec<Complex64>; 2]>,
}

impl MeshFactors {
    pub fn ideal(program: &MeshProgram) -> Result<Self> {
        program.validate()?;
        let layout = MeshLayout::new(program.size);
        Ok(Self {
            size: program.size,
            sites: layout.sites().to_vec(),
            phases: program.heater_phases(),
            eps: vec![[0.0; 2]; layout.num_mzis()],
            amplitude: vec![1.0; layout.num_mzis()],
        })
    }

    pub fn physical(program: &MeshProgram, errors: &HardwareErrorModel) -> Result<Self> {
        let phases = errors.actual_phases(program)?;
        let layout = MeshLayout::new(program.size);
        Ok(Self {
            size: program.size,
            sites: layout.sites().to_vec(),
            phases,
            eps: errors
                .splitter_errors
                .iter()
                .map(|p| [p[0].deviation, p[1].deviation])
                .collect(),
            amplitude: errors.component_loss_db.iter().map(|&l| db_to_amplitude(l)).collect(),
        })
    }

    fn screen(&self) -> &[f64] {
        &self.phases[2 * self.sites.len()..]
    }

    fn mzi_stages(&self, k: usize) -> MziStages {
        MziStages {
            b0: coupler(self.eps[k][0]),
            p1: Complex64::from_polar(1.0, self.phases[2 * k]),
            b1: coupler(self.eps[k][1]),
            p2: Complex64::from_polar(1.0, self.phases[2 * k + 1]),
            t: self.amplitude[k],
        }
    }

    /// Propagates every column of `x` through the mesh in place.
    pub fn forward(&self, x: &mut ComplexMatrix) {
        self.run_forward(x, None);
    }

    pub fn forward_traced(&self, x: &mut ComplexMatrix) -> ForwardTrace {
        let mut before = Vec::with_capacity(self.sites.len());
        let input = x.clone();
        self.run_forward(x, Some(&mut before));
        ForwardTrace { input, before }
    }

    fn run_forward(&self, x: &mut ComplexMatrix, mut record: Option<&mut Vec<[Vec<Complex64>; 2]>>) {
        let cols = x.ncols();
        for (m, &phi) in self.screen().iter().enumerate() {
            let z = Complex64::from_polar(1.0, phi);
            for c in 0..cols {
                x[(m, c)] *= z;
            }
        }
        for (k, site) in self.sites.iter().enumerate() {
            let m = site.top;
            if let Some(rec) = record.as_deref_mut() {
                rec.push([
                    (0..cols).map(|c| x[(m, c)]).collect(),
                    (0..cols).map(|c| x[(m + 1, c)]).collect(),
                ]);
            }
            let st = self.mzi_stages(k);
            for c in 0..cols {
                let (top, bottom) = st.apply(x[(m, c)], x[(m + 1, c)]);
                x[(m, c)] = top;
                x[(m + 1, c)] = bottom;
            }
        }
    }

    pub fn transfer_matrix(&self) -> ComplexMatrix {
        let mut u = ComplexMatrix::identity(self.size, self.size);
        self.forward(&mut u);
        u
    }

    /// Adjoint sweep. `lambda` holds `∂L/∂Re(out) + i ∂L/∂Im(out)` for every
    /// output entry; the returned gradient satisfies
    /// `dL = Σ Re(conj(λ) · d out)` for each parameter.
    pub fn backward(&self, trace: &ForwardTrace, lambda: &ComplexMatrix) -> FactorGradient {
        let cols = lambda.ncols();
        let mut lam = lambda.clone();
        let mut grad = FactorGradient {
            phases: vec![0.0; self.phases.len()],
            eps: vec![[0.0; 2]; self.sites.len()],
            amplitude: vec![0.0; self.sites.len()],
        };
        for (k, site) in self.sites.iter().enumerate().rev() {
            let m = site.top;
            let st = self.mzi_stages(k);
            let db0 = coupler_derivative(self.eps[k][0]);
            let db1 = coupler_derivative(self.eps[k][1]);
            let (mut g_t, mut g_t2, mut g_e1, mut g_t1, mut g_e0) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for c in 0..cols {
                let u0 = (trace.before[k][0][c], trace.before[k][1][c]);
                let u1 = mul2(&st.b0, u0);
                let u2 = (st.p1 * u1.0, u1.1);
                let u3 = mul2(&st.b1, u2);
                let u4 = (st.p2 * u3.0, u3.1);
                let l = (lam[(m, c)], lam[(m + 1, c)]);
                g_t += (l.0.conj() * u4.0 + l.1.conj() * u4.1).re;
                let l4 = (l.0 * st.t, l.1 * st.t);
                g_t2 += (l4.0.conj() * I * u4.0).re;
                let l3 = (l4.0 * st.p2.conj(), l4.1);
                let du3 = mul2(&db1, u2);
                g_e1 += (l3.0.conj() * du3.0 + l3.1.conj() * du3.1).re;
                let l2 = mul2_adjoint(&st.b1, l3);
                g_t1 += (l2.0.conj() * I * u2.0).re;
                let l1 = (l2.0 * st.p1.conj(), l2.1);
                let du1 = mul2(&db0, u0);
                g_e0 += (l1.0.conj() * du1.0 + l1.1.conj() * du1.1).re;
                let l0 = mul2_adjoint(&st.b0, l1);
                lam[(m, c)] = l0.0;
                lam[(m + 1, c)] = l0.1;
            }
            grad.amplitude[k] = g_t;
            grad.phases[2 * k] = g_t1;
            grad.phases[2 * k + 1] = g_t2;
            grad.eps[k] = [g_e0, g_e1];
        }
        let offset = 2 * self.sites.len();
        for (m, &phi) in self.screen().iter().enumerate() {
            let z = I * Complex64::from_polar(1.0, phi);
            let mut g = 0.0;
            for c in 0..cols {
                g += (lam[(m, c)].conj() * z * trace.input[(m, c)]).re;
            }
            grad.phases[offset + m] = g;
        }
        grad
    }
}

struct MziStages {
    b0: [Complex64; 4],
    p1: Complex64,
    b1: [Complex64; 4],
    p2: Complex64,
    t: f64,
}

impl MziStages {
    fn apply(&self, top: Complex64, bottom: Complex64) -> (Complex64, Complex64) {
        let u1 = mul2(&self.b0, (top, bottom));
        let u3 = mul2(&self.b1, (self.p1 * u1.0, u1.1));
        (self.p2 * u3.0 * self.t, u3.1 * self.t)
    }
}

fn mul2(b: &[Complex64; 4], v: (Complex64, Complex64)) -> (Complex64, Complex64) {
    (b[0] * v.0 + b[1] * v.1, b[2] * v.0 + b[3] * v.1)
}

fn mul2_adjoint(b: &[Complex64; 4], v: (Complex64, Complex64)) -> (Complex64, Complex64) {
    (
        b[0].conj() * v.0 + b[2].conj() * v.1,
        b[1].conj() * v.0 + b[3].conj() * v.1,
    )
}

/// Transfer matrix of a commanded program on an imperfect device.
pub fn physical_transfer_matrix(
    program: &MeshProgram,
    errors: &HardwareErrorModel,
) -> Result<ComplexMatrix> {
    Ok(MeshFactors::physical(program, errors)?.transfer_matrix())
}

/// Output fields of the imperfect mesh for one input field vector.
pub fn simulate_physical_mesh(
    program: &MeshProgram,
    errors: &HardwareErrorModel,
    input_fields: &DVector<Complex64>,
) -> Result<DVector<Complex64>> {
    if input_fields.len() != program.size {
        return Err(Error::Dimension(format!(
            "input has {} modes, mesh has {}",
            input_fields.len(),
            program.size
        )));
    }
    let factors = MeshFactors::physical(program, errors)?;
    let mut x = ComplexMatrix::from_column_slice(program.size, 1, input_fields.as_slice());
    factors.forward(&mut x);
    Ok(DVector::from_column_slice(x.as_slice()))
}

/// Per-channel settings of the transmitter MZIs plus a common carrier phase.
///
/// Each channel injects light into the lower port of its MZI and uses the
/// upper output, so the emitted field is `i e^{i(θ₁/2 + θ₂)} cos(θ₁/2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransmitterState {
    pub channels: Vec<MziPhases>,
    pub output_phase: f64,
}

impl TransmitterState {
    /// All channels dark.
    pub fn new(channels: usize) -> Self {
        Self {
            channels: vec![MziPhases::BAR; channels],
            output_phase: 0.0,
        }
    }

    /// Fields emitted for the current channel settings.
    pub fn fields(&self) -> DVector<Complex64> {
        let carrier = Complex64::from_polar(1.0, self.output_phase);
        DVector::from_iterator(
            self.channels.len(),
            self.channels.iter().map(|p| {
                carrier
                    * I
                    * Complex64::from_polar((p.theta1 / 2.0).cos(), p.theta1 / 2.0 + p.theta2)
            }),
        )
    }
}

/// Phases that encode amplitude `|x|` and sign of `x` on one channel.
pub fn encode_channel(x: f64) -> Result<MziPhases> {
    if !x.is_finite() || x.abs() > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "transmitter amplitude must lie in [-1, 1], got {x}"
        )));
    }
    let amp = x.abs().min(1.0);
    let theta1 = 2.0 * amp.acos();
    let sign_phase = if x < 0.0 { PI } else { 0.0 };
    Ok(MziPhases::new(theta1, sign_phase - theta1 / 2.0 - PI / 2.0))
}

/// Programs `x` into the transmitter through per-channel calibrations and
/// returns the emitted fields. `cals[2m]` drives `θ₁` and `cals[2m+1]` drives
/// `θ₂` of channel `m`; the realized phases are written back into `tx`.
pub fn transmit(
    x: &[f64],
    tx: &mut TransmitterState,
    cals: &[PhaseShifterCal],
) -> Result<DVector<Complex64>> {
    let n = tx.channels.len();
    if x.len() != n || cals.len() != 2 * n {
        return Err(Error::Dimension(format!(
            "transmitter has {n} channels; got {} values and {} calibrations",
            x.len(),
            cals.len()
        )));
    }
    for (m, &value) in x.iter().enumerate() {
        let target = encode_channel(value)?;
        let mut realized = [0.0; 2];
        for (h, phase) in [target.theta1, target.theta2].into_iter().enumerate() {
            let cal = &cals[2 * m + h];
            let current = cal.current_for_wrapped_phase(phase)?;
            realized[h] = cal.phase_from_current(current)?;
        }
        tx.channels[m] = MziPhases::new(realized[0], realized[1]);
    }
    Ok(tx.fields())
}

/// Local oscillator and per-channel quadrature settings of the receiver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiverState {
    pub lo_amplitude: f64,
    pub lo_phase: f64,
    pub quadrature_phases: Vec<f64>,
    /// Photodiode responsivity (A/W).
    pub responsivity: f64,
}

impl ReceiverState {
    pub fn new(channels: usize) -> Self {
        Self {
            lo_amplitude: 1.0,
            lo_phase: 0.0,
            quadrature_phases: vec![0.0; channels],
            responsivity: constants::RESPONSIVITY,
        }
    }
}

/// What the receiver reports for one channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    /// `R |b|²`.
    pub intensity: f64,
    /// `2 R |E_LO| Re(b e^{-i(φ_LO + φ_q)})`, the balanced difference current.
    pub quadrature: f64,
}

pub fn receive(fields: &DVector<Complex64>, rx: &ReceiverState) -> Result<Vec<Readout>> {
    if fields.len() != rx.quadrature_phases.len() {
        return Err(Error::Dimension(format!(
            "receiver has {} channels, got {} fields",
            rx.quadrature_phases.len(),
            fields.len()
        )));
    }
    if !(rx.lo_amplitude > 0.0) {
        return Err(Error::InvalidArgument(
            "local oscillator power must be positive for quadrature readout".into(),
        ));
    }
    Ok(fields
        .iter()
        .zip(&rx.quadrature_phases)
        .map(|(b, &q)| Readout {
            intensity: rx.responsivity * b.norm_sqr(),
            quadrature: 2.0
                * rx.responsivity
                * rx.lo_amplitude
                * (b * Complex64::from_polar(1.0, -(rx.lo_phase + q))).re,
        })
        .collect())
}

/// Field recovered from the quadratures at `φ_q = 0` and `φ_q = π/2`.
pub fn field_from_quadratures(q0: f64, q90: f64, rx: &ReceiverState) -> Complex64 {
    let scale = 2.0 * rx.responsivity * rx.lo_amplitude;
    Complex64::new(q0, q90) / scale * Complex64::from_polar(1.0, rx.lo_phase)
}

/// Optional Gaussian readout noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReadoutNoise {
    /// Additive standard deviation, in readout units.
    pub additive: f64,
    /// Relative standard deviation.
    pub multiplicative: f64,
}

impl ReadoutNoise {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_none(&self) -> bool {
        self.additive == 0.0 && self.multiplicative == 0.0
    }

    pub fn apply<R: Rng + ?Sized>(&self, value: f64, rng: &mut R) -> f64 {
        if self.is_none() {
            return value;
        }
        let g1: f64 = rng.sample(rand_distr::StandardNormal);
        let g2: f64 = rng.sample(rand_distr::StandardNormal);
        value * (1.0 + self.multiplicative * g1) + self.additive * g2
    }

    pub fn apply_complex<R: Rng + ?Sized>(&self, value: Complex64, rng: &mut R) -> Complex64 {
        if self.is_none() {
            return value;
        }
        let g: [f64; 4] = std::array::from_fn(|_| rng.sample(rand_distr::StandardNormal));
        let rel = Complex64::new(g[0], g[1]) * (self.multiplicative / std::f64::consts::SQRT_2);
        let add = Complex64::new(g[2], g[3]) * (self.additive / std::f64::consts::SQRT_2);
        value * (Complex64::new(1.0, 0.0) + rel) + add
    }
}
