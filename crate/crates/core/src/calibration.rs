//! Calibration of a phase-shifter mesh and of the transmitter crosstalk
//! from nothing but photodiode powers, heater voltages and coherent readouts.
//!
//! The simulated devices here expose a read-only measurement interface: every
//! method takes `&self` and the hidden truth is never touched by the
//! calibration routines. Noise draws go through an internal locked RNG.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI, TAU};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3, Vector4};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::constants::THERMAL_P_PI;
use crate::error::{Error, Result};
use crate::hardware::{
    apply_crosstalk_correction, CrosstalkMatrix, MeshFactors, PhaseShifterCal, Port, ReadoutNoise,
};
use crate::unitary::{wrap_phase, wrap_signed, ComplexMatrix, MeshLayout, MeshProgram};

/// `T = a + s·b·cos(ω x + phase)` with `s` given by the port.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineFit {
    pub a: f64,
    pub b: f64,
    /// Angular frequency in rad per unit of `x`.
    pub omega: f64,
    pub phase: f64,
    pub port: Port,
    pub residual_rms: f64,
}

impl CosineFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.a + self.port.sign() * self.b * (self.omega * x + self.phase).cos()
    }
}

/// Residual rms above which a sweep fit is rejected.
pub const MAX_FIT_RESIDUAL: f64 = 0.05;

/// Fits a cosine to a transmission sweep. The frequency is seeded from a
/// fine-grid periodogram, then all four parameters are refined by
/// Levenberg–Marquardt.
pub fn fit_cosine(x: &[f64], t: &[f64], port: Port) -> Result<CosineFit> {
    if x.len() != t.len() {
        return Err(Error::Dimension(format!("{} abscissae, {} samples", x.len(), t.len())));
    }
    if x.len() < 8 {
        return Err(Error::InvalidArgument(format!(
            "a cosine fit needs at least 8 samples, got {}",
            x.len()
        )));
    }
    if x.iter().chain(t).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite sample in sweep".into()));
    }
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    if !(span > 0.0) {
        return Err(Error::InvalidArgument("sweep has zero span".into()));
    }
    // work on u in [0, 1]
    let u: Vec<f64> = x.iter().map(|v| (v - lo) / span).collect();
    let s = port.sign();

    let linear = |w: f64| -> Option<(f64, f64, f64, f64)> {
        let mut ata = Matrix3::zeros();
        let mut atb = Vector3::zeros();
        for (&ui, &ti) in u.iter().zip(t) {
            let row = Vector3::new(1.0, (w * ui).cos(), (w * ui).sin());
            ata += row * row.transpose();
            atb += row * ti;
        }
        let sol = ata.try_inverse()? * atb;
        let rss: f64 = u
            .iter()
            .zip(t)
            .map(|(&ui, &ti)| {
                let m = sol[0] + sol[1] * (w * ui).cos() + sol[2] * (w * ui).sin();
                (m - ti).powi(2)
            })
            .sum();
        Some((rss, sol[0], sol[1], sol[2]))
    };

    let max_cycles = (x.len() as f64 / 4.0).min(12.0);
    let mut best: Option<(f64, f64, f64, f64, f64)> = None;
    let mut f = 0.25;
    while f <= max_cycles {
        let w = TAU * f;
        if let Some((rss, a, c, sn)) = linear(w) {
            if best.map_or(true, |b| rss < b.0) {
                best = Some((rss, w, a, c, sn));
            }
        }
        f += 0.01;
    }
    let (_, w0, a0, c0, s0) = best.ok_or_else(|| Error::FitDivergence {
        reason: "periodogram found no frequency".into(),
        residual: f64::INFINITY,
    })?;
    // c cos + sn sin = s b cos(w u + p)  =>  c = s b cos p, sn = -s b sin p
    let b0 = (c0 * c0 + s0 * s0).sqrt();
    let p0 = (-s0 * s).atan2(c0 * s);
    let mut q = Vector4::new(a0, b0, w0, p0);

    let residuals = |q: &Vector4<f64>| -> Vec<f64> {
        u.iter()
            .zip(t)
            .map(|(&ui, &ti)| q[0] + s * q[1] * (q[2] * ui + q[3]).cos() - ti)
            .collect()
    };
    let cost = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut r = residuals(&q);
    let mut c = cost(&r);
    let mut lambda = 1e-3;
    for _ in 0..200 {
        let mut jtj = Matrix4::zeros();
        let mut jtr = Vector4::zeros();
        for (&ui, &ri) in u.iter().zip(&r) {
            let th = q[2] * ui + q[3];
            let row = Vector4::new(1.0, s * th.cos(), -s * q[1] * ui * th.sin(), -s * q[1] * th.sin());
            jtj += row * row.transpose();
            jtr += row * ri;
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut damped = jtj;
            for k in 0..4 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(inv) = damped.try_inverse() else {
                lambda *= 10.0;
                continue;
            };
            let trial = q - inv * jtr;
            let rt = residuals(&trial);
            let ct = cost(&rt);
            if ct < c {
                let rel = (c - ct) / c.max(1e-300);
                q = trial;
                r = rt;
                c = ct;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel < 1e-14 {
                    lambda = -1.0;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved || lambda < 0.0 {
            break;
        }
    }
    if q[1] < 0.0 {
        q[1] = -q[1];
        q[3] += PI;
    }
    if q[2] < 0.0 {
        // cos is even: flip frequency and phase together
        q[2] = -q[2];
        q[3] = -q[3];
    }
    let residual_rms = (c / u.len() as f64).sqrt();
    if !residual_rms.is_finite() || residual_rms > MAX_FIT_RESIDUAL || !(q[1] > 0.0) || !(q[2] > 0.0) {
        return Err(Error::FitDivergence {
            reason: "cosine model does not describe the sweep".into(),
            residual: residual_rms,
        });
    }
    let omega = q[2] / span;
    Ok(CosineFit {
        a: q[0],
        b: q[1],
        omega,
        phase: wrap_phase(q[3] - omega * lo),
        port,
        residual_rms,
    })
}

/// Least-squares fit of `V(I) = a₄I⁴ + a₃I³ + a₂I² + a₁I`.
pub fn fit_voltage(currents: &[f64], volts: &[f64]) -> Result<[f64; 4]> {
    if currents.len() != volts.len() {
        return Err(Error::Dimension("current and voltage counts differ".into()));
    }
    if currents.len() < 4 {
        return Err(Error::InvalidArgument("a quartic voltage fit needs 4 samples".into()));
    }
    let scale = currents.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument("voltage sweep has no nonzero current".into()));
    }
    let design = DMatrix::from_fn(currents.len(), 4, |r, k| (currents[r] / scale).powi(k as i32 + 1));
    let rhs = DVector::from_column_slice(volts);
    let q = design
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Calibration(e.to_string()))?;
    Ok(std::array::from_fn(|k| q[k] / scale.powi(k as i32 + 1)))
}

/// Golden-section maximization after a coarse scan of `[lo, hi]`.
fn maximize_scalar<F>(mut f: F, lo: f64, hi: f64, coarse: usize, iterations: usize) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let step = (hi - lo) / coarse as f64;
    let mut best = (lo, f(lo)?);
    for k in 1..=coarse {
        let x = lo + k as f64 * step;
        let v = f(x)?;
        if v > best.1 {
            best = (x, v);
        }
    }
    let (mut a, mut b) = ((best.0 - step).max(lo), (best.0 + step).min(hi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    for _ in 0..iterations {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    let (x, v) = if fc > fd { (c, fc) } else { (d, fd) };
    Ok(if v >= best.1 { (x, v) } else { best })
}

/// Parameters of a randomly drawn phases-only mesh device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshDeviceConfig {
    /// Linear heater resistance (Ω) and its relative spread.
    pub resistance: f64,
    pub resistance_spread: f64,
    /// Nonlinear `V(I)` coefficients, in units of `a₁/I_max^k`.
    pub nonlinearity: [f64; 3],
    pub p_pi: f64,
    pub p_pi_spread: f64,
    /// Driver compliance current (A).
    pub max_current: f64,
    /// Coupler-angle standard deviation; zero for the phases-only device.
    pub splitter_sigma: f64,
    pub noise: ReadoutNoise,
}

impl Default for MeshDeviceConfig {
    fn default() -> Self {
        Self {
            resistance: 200.0,
            resistance_spread: 0.05,
            nonlinearity: [0.08, 0.02, 0.005],
            p_pi: THERMAL_P_PI,
            p_pi_spread: 0.1,
            max_current: 17e-3,
            splitter_sigma: 0.0,
            noise: ReadoutNoise::none(),
        }
    }
}

fn random_heater<R: Rng + ?Sized>(cfg: &MeshDeviceConfig, rng: &mut R) -> Result<PhaseShifterCal> {
    let r = cfg.resistance * (1.0 + cfg.resistance_spread * rng.gen_range(-1.0..1.0));
    let imax = cfg.max_current;
    let [n2, n3, n4] = cfg.nonlinearity;
    let v = [r, r * n2 / imax, r * n3 / imax.powi(2), r * n4 / imax.powi(3)];
    let p_pi = cfg.p_pi * (1.0 + cfg.p_pi_spread * rng.gen_range(-1.0..1.0));
    PhaseShifterCal::new(v, p_pi, rng.gen_range(0.0..TAU), 0.5, 0.5, imax)
}

/// A simulated mesh driven by heater currents.
pub struct MeshDevice {
    size: usize,
    layout: MeshLayout,
    heaters: Vec<PhaseShifterCal>,
    eps: Vec<[f64; 2]>,
    noise: ReadoutNoise,
    max_current: f64,
    rng: Mutex<ChaCha8Rng>,
}

impl Clone for MeshDevice {
    fn clone(&self) -> Self {
        Self {
            size: self.size,
            layout: self.layout.clone(),
            heaters: self.heaters.clone(),
            eps: self.eps.clone(),
            noise: self.noise,
            max_current: self.max_current,
            rng: Mutex::new(self.rng.lock().expect("rng lock").clone()),
        }
    }
}

impl MeshDevice {
    /// Builds a device from explicit heater truths in canonical heater order.
    pub fn new(size: usize, heaters: Vec<PhaseShifterCal>, noise: ReadoutNoise, seed: u64) -> Result<Self> {
        let layout = MeshLayout::new(size);
        if heaters.len() != layout.num_heaters() {
            return Err(Error::Dimension(format!(
                "{} heaters for a mesh with {}",
                heaters.len(),
                layout.num_heaters()
            )));
        }
        let max_current = heaters.iter().map(|h| h.max_current).fold(f64::INFINITY, f64::min);
        Ok(Self {
            size,
            eps: vec![[0.0; 2]; layout.num_mzis()],
            layout,
            heaters,
            noise,
            max_current,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    pub fn random(size: usize, cfg: &MeshDeviceConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = MeshLayout::new(size);
        let heaters = (0..layout.num_heaters())
            .map(|_| random_heater(cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut dev = Self::new(size, heaters, cfg.noise, rng.gen())?;
        if cfg.splitter_sigma > 0.0 {
            let normal = Normal::new(0.0, cfg.splitter_sigma)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for e in &mut dev.eps {
                *e = [normal.sample(&mut rng), normal.sample(&mut rng)];
            }
        }
        Ok(dev)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn num_heaters(&self) -> usize {
        self.heaters.len()
    }

    /// Driver compliance shared by all heaters.
    pub fn max_current(&self) -> f64 {
        self.max_current
    }

    /// Hidden per-heater truth, exposed for validation only.
    pub fn ground_truth(&self) -> &[PhaseShifterCal] {
        &self.heaters
    }

    fn check_currents(&self, currents: &[f64]) -> Result<()> {
        if currents.len() != self.heaters.len() {
            return Err(Error::Dimension(format!(
                "{} currents for {} heaters",
                currents.len(),
                self.heaters.len()
            )));
        }
        Ok(())
    }

    fn factors(&self, currents: &[f64]) -> Result<MeshFactors> {
        self.check_currents(currents)?;
        let phases = self
            .heaters
            .iter()
            .zip(currents)
            .map(|(h, &i)| h.electrical_phase(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(MeshFactors {
            size: self.size,
            sites: self.layout.sites().to_vec(),
            phases,
            eps: self.eps.clone(),
            amplitude: vec![1.0; self.layout.num_mzis()],
        })
    }

    fn propagate(&self, currents: &[f64], input: &DVector<Complex64>) -> Result<DVector<Complex64>> {
        if input.len() != self.size {
            return Err(Error::Dimension(format!("input has {} modes, mesh has {}", input.len(), self.size)));
        }
        let f = self.factors(currents)?;
        let mut x = ComplexMatrix::from_column_slice(self.size, 1, input.as_slice());
        f.forward(&mut x);
        Ok(DVector::from_column_slice(x.as_slice()))
    }

    /// Electrical readback of one heater.
    pub fn heater_voltage(&self, heater: usize, current: f64) -> Result<f64> {
        let h = self
            .heaters
            .get(heater)
            .ok_or_else(|| Error::InvalidArgument(format!("no heater {heater}")))?;
        let v = h.heater_voltage(current)?;
        Ok(self.noise.apply(v, &mut *self.rng.lock().expect("rng lock")))
    }

    /// Photodiode power at every output port.
    pub fn output_powers(&self, currents: &[f64], input: &DVector<Complex64>) -> Result<Vec<f64>> {
        let out = self.propagate(currents, input)?;
        let mut rng = self.rng.lock().expect("rng lock");
        Ok(out.iter().map(|z| self.noise.apply(z.norm_sqr(), &mut *rng)).collect())
    }

    /// Coherent-receiver readout of every output field.
    pub fn output_fields(&self, currents: &[f64], input: &DVector<Complex64>) -> Result<DVector<Complex64>> {
        let out = self.propagate(currents, input)?;
        let mut rng = self.rng.lock().expect("rng lock");
        Ok(out.map(|z| self.noise.apply_complex(z, &mut *rng)))
    }

    /// Noise-free transfer matrix at the given currents, for validation.
    pub fn transfer_matrix(&self, currents: &[f64]) -> Result<ComplexMatrix> {
        Ok(self.factors(currents)?.transfer_matrix())
    }
}

fn unit_input(n: usize, port: usize) -> DVector<Complex64> {
    let mut v = DVector::zeros(n);
    v[port] = Complex64::new(1.0, 0.0);
    v
}

fn sweep_grid(max_current: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|k| max_current * k as f64 / (points - 1) as f64)
        .collect()
}

/// A single optical path through the mesh with the state each MZI must take.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub input: usize,
    pub output: usize,
    /// `(mzi index, port)` in propagation order.
    pub steps: Vec<(usize, Port)>,
}

/// Every route leaving `input`.
pub fn routes_from(layout: &MeshLayout, input: usize) -> Vec<Route> {
    fn walk(layout: &MeshLayout, column: usize, mode: usize, steps: &mut Vec<(usize, Port)>, input: usize, out: &mut Vec<Route>) {
        let n = layout.size();
        if column == n {
            out.push(Route { input, output: mode, steps: steps.clone() });
            return;
        }
        let here = layout
            .index_of(column, mode)
            .map(|k| (k, mode + 1))
            .or_else(|| mode.checked_sub(1).and_then(|t| layout.index_of(column, t)).map(|k| (k, mode - 1)));
        match here {
            None => walk(layout, column + 1, mode, steps, input, out),
            Some((k, other)) => {
                for (port, next) in [(Port::Bar, mode), (Port::Cross, other)] {
                    steps.push((k, port));
                    walk(layout, column + 1, next, steps, input, out);
                    steps.pop();
                }
            }
        }
    }
    let mut out = Vec::new();
    if input < layout.size() {
        walk(layout, 0, input, &mut Vec::new(), input, &mut out);
    }
    out
}

/// All routes between a pair of ports.
pub fn routes_between(layout: &MeshLayout, input: usize, output: usize) -> Vec<Route> {
    routes_from(layout, input)
        .into_iter()
        .filter(|r| r.output == output)
        .collect()
}

/// Sweep resolution and optimizer effort for the calibration protocols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub sweep_points: usize,
    /// Passes of the round-robin power maximization.
    pub round_robin_passes: usize,
    pub golden_iterations: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            sweep_points: 100,
            round_robin_passes: 3,
            golden_iterations: 40,
        }
    }
}

fn theta1(k: usize) -> usize {
    2 * k
}

fn theta2(k: usize) -> usize {
    2 * k + 1
}

/// Drives the only route between `input` and `output` by maximizing the
/// output power one heater at a time. Returns the MZIs left in the cross
/// state; `currents` holds the optimized internal drives afterwards.
pub fn route_diagonal(
    device: &MeshDevice,
    input: usize,
    output: usize,
    currents: &mut [f64],
    opts: &CalibrationOptions,
) -> Result<Vec<usize>> {
    let layout = MeshLayout::new(device.size());
    let routes = routes_between(&layout, input, output);
    let route = match routes.as_slice() {
        [only] => only.clone(),
        [] => {
            return Err(Error::InvalidArgument(format!("no route from input {input} to output {output}")))
        }
        many => {
            return Err(Error::InvalidArgument(format!(
                "{} routes join input {input} and output {output}; round-robin needs a unique path",
                many.len()
            )))
        }
    };
    device.check_currents(currents)?;
    let probe = unit_input(device.size(), input);
    let imax = device.max_current();
    for _ in 0..opts.round_robin_passes {
        for &(k, _) in &route.steps {
            let h = theta1(k);
            let (best, _) = maximize_scalar(
                |i| {
                    let mut c = currents.to_vec();
                    c[h] = i;
                    Ok(device.output_powers(&c, &probe)?[output])
                },
                0.0,
                imax,
                24,
                opts.golden_iterations,
            )?;
            currents[h] = best;
        }
    }
    Ok(route
        .steps
        .iter()
        .filter(|(_, p)| *p == Port::Cross)
        .map(|&(k, _)| k)
        .collect())
}

/// Raw data of one heater sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepData {
    pub currents: Vec<f64>,
    pub volts: Vec<f64>,
    pub signal: Vec<f64>,
}

/// Sweeps one heater while the rest stay at `base`, reading `signal`.
pub fn sweep_heater<F>(
    device: &MeshDevice,
    heater: usize,
    base: &[f64],
    points: usize,
    mut signal: F,
) -> Result<SweepData>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if points < 8 {
        return Err(Error::InvalidArgument("a sweep needs at least 8 points".into()));
    }
    device.check_currents(base)?;
    let grid = sweep_grid(device.max_current(), points);
    let mut c = base.to_vec();
    let mut out = Vec::with_capacity(points);
    let mut volts = Vec::with_capacity(points);
    for &i in &grid {
        c[heater] = i;
        out.push(signal(&c)?);
        volts.push(device.heater_voltage(heater, i)?);
    }
    Ok(SweepData { currents: grid, volts, signal: out })
}

fn dissipated(v: &[f64; 4], i: f64) -> f64 {
    i * (((v[3] * i + v[2]) * i + v[1]) * i + v[0]) * i
}

fn fitted_cal(v: [f64; 4], fit: &CosineFit, p0: f64, max_current: f64) -> Result<PhaseShifterCal> {
    let a = fit.a.clamp(1e-9, 1.0);
    let b = fit.b.min(a).min(1.0 - a).max(1e-9);
    PhaseShifterCal::new(v, PI / fit.omega, p0, a, b, max_current)
}

/// Calibrates the internal phase of MZI `k` from a transmission sweep along
/// `route`, with all other route MZIs held at `base`.
pub fn calibrate_internal(
    device: &MeshDevice,
    k: usize,
    route: &Route,
    base: &[f64],
    points: usize,
) -> Result<(PhaseShifterCal, CosineFit)> {
    let port = route
        .steps
        .iter()
        .find(|(m, _)| *m == k)
        .map(|&(_, p)| p)
        .ok_or_else(|| Error::InvalidArgument(format!("MZI {k} is not on the route")))?;
    let probe = unit_input(device.size(), route.input);
    let data = sweep_heater(device, theta1(k), base, points, |c| {
        Ok(device.output_powers(c, &probe)?[route.output])
    })?;
    let v = fit_voltage(&data.currents, &data.volts)?;
    let x: Vec<f64> = data.currents.iter().map(|&i| dissipated(&v, i)).collect();
    let fit = fit_cosine(&x, &data.signal, port)?;
    let cal = fitted_cal(v, &fit, fit.phase, device.max_current())?;
    Ok((cal, fit))
}

/// Calibrates every internal phase: the main diagonal by round-robin power
/// maximization, then each remaining MZI along a route whose other MZIs are
/// already known.
pub fn calibrate_all_internal(
    device: &MeshDevice,
    opts: &CalibrationOptions,
) -> Result<(Vec<PhaseShifterCal>, Vec<CosineFit>)> {
    let n = device.size();
    let layout = MeshLayout::new(n);
    let m = layout.num_mzis();
    let mut cals: Vec<Option<(PhaseShifterCal, CosineFit)>> = vec![None; m];
    if m == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut currents = vec![0.0; device.num_heaters()];
    let diag_route = routes_between(&layout, 0, n - 1)
        .pop()
        .ok_or_else(|| Error::Calibration("mesh has no diagonal route".into()))?;
    route_diagonal(device, 0, n - 1, &mut currents, opts)?;
    for &(k, _) in &diag_route.steps {
        cals[k] = Some(calibrate_internal(device, k, &diag_route, &currents, opts.sweep_points)?);
    }
    let all_routes: Vec<Route> = (0..n).flat_map(|i| routes_from(&layout, i)).collect();
    while cals.iter().any(Option::is_none) {
        // shortest route with exactly one unknown MZI
        let pick = all_routes
            .iter()
            .filter_map(|r| {
                let unknown: Vec<usize> = r
                    .steps
                    .iter()
                    .map(|s| s.0)
                    .filter(|&k| cals[k].is_none())
                    .collect();
                (unknown.len() == 1).then(|| (r, unknown[0]))
            })
            .min_by_key(|(r, _)| r.steps.len());
        let Some((route, k)) = pick else {
            return Err(Error::Calibration("no route isolates a remaining MZI".into()));
        };
        let mut base = vec![0.0; device.num_heaters()];
        for &(j, port) in &route.steps {
            if let Some((cal, _)) = &cals[j] {
                let target = if port == Port::Cross { 0.0 } else { PI };
                base[theta1(j)] = cal.current_for_wrapped_phase(target)?;
            }
        }
        cals[k] = Some(calibrate_internal(device, k, route, &base, opts.sweep_points)?);
    }
    Ok(cals.into_iter().map(|c| c.expect("all calibrated")).unzip())
}

/// First splitter of a meta-MZI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaSplitter {
    /// Equal-amplitude coherent light injected into both input ports.
    Reference,
    Mzi(usize),
}

/// Second splitter of a meta-MZI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaCombiner {
    Mzi(usize),
    /// The two output fields are combined digitally after coherent detection.
    Receiver,
}

/// Two MZIs at 50:50 on the same mode pair, with the MZIs between them in
/// the bar state. The arms carry the external heaters listed in `upper` and
/// `lower`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaMzi {
    pub top: usize,
    pub splitter: MetaSplitter,
    pub combiner: MetaCombiner,
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
}

/// Every meta-MZI of an `n`-mode mesh. Together they touch each external
/// heater at least once.
pub fn meta_mzi_configs(n: usize) -> Vec<MetaMzi> {
    let layout = MeshLayout::new(n);
    let screen = |m: usize| 2 * layout.num_mzis() + m;
    let mut out = Vec::new();
    for t in 0..n.saturating_sub(1) {
        let columns: Vec<usize> = (0..n).filter(|&c| layout.index_of(c, t).is_some()).collect();
        // lower arm picks up θ₂ of a bar MZI whose upper mode is t+1
        let middle = |c: usize| layout.index_of(c, t + 1).map(theta2);
        let first = columns[0];
        let mut lower = vec![screen(t + 1)];
        if first == 1 {
            lower.extend(middle(0));
        }
        out.push(MetaMzi {
            top: t,
            splitter: MetaSplitter::Reference,
            combiner: MetaCombiner::Mzi(layout.index_of(first, t).expect("column listed")),
            upper: vec![screen(t)],
            lower,
        });
        for (ci, &c) in columns.iter().enumerate() {
            let k = layout.index_of(c, t).expect("column listed");
            let combiner = match columns.get(ci + 1) {
                Some(&next) => MetaCombiner::Mzi(layout.index_of(next, t).expect("column listed")),
                None => MetaCombiner::Receiver,
            };
            let lower = if c + 1 < n { middle(c + 1).into_iter().collect() } else { Vec::new() };
            out.push(MetaMzi {
                top: t,
                splitter: MetaSplitter::Mzi(k),
                combiner,
                upper: vec![theta2(k)],
                lower,
            });
        }
    }
    out
}

/// `Σ coeff · φ = value (mod 2π)` over unknown static phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseEquation {
    pub terms: Vec<(usize, f64)>,
    pub value: f64,
}

/// One meta-MZI measurement: the phase relation and the swept heater's fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaMziResult {
    /// Terms are heater indices.
    pub equation: PhaseEquation,
    pub swept: usize,
    pub v_coeffs: [f64; 4],
    pub fit: CosineFit,
}

fn meta_internal_targets(n: usize, meta: &MetaMzi) -> Vec<f64> {
    let layout = MeshLayout::new(n);
    let mut targets = vec![PI; layout.num_mzis()];
    if let MetaSplitter::Mzi(k) = meta.splitter {
        targets[k] = FRAC_PI_2;
    }
    if let MetaCombiner::Mzi(k) = meta.combiner {
        targets[k] = FRAC_PI_2;
    }
    targets
}

fn meta_input(n: usize, meta: &MetaMzi) -> DVector<Complex64> {
    match meta.splitter {
        MetaSplitter::Reference => {
            let mut v = DVector::zeros(n);
            v[meta.top] = Complex64::new(FRAC_1_SQRT_2, 0.0);
            v[meta.top + 1] = Complex64::new(FRAC_1_SQRT_2, 0.0);
            v
        }
        MetaSplitter::Mzi(_) => unit_input(n, meta.top),
    }
}

fn meta_signal(meta: &MetaMzi, fields: &DVector<Complex64>) -> f64 {
    match meta.combiner {
        MetaCombiner::Mzi(_) => fields[meta.top].norm_sqr(),
        MetaCombiner::Receiver => 0.5 * (fields[meta.top] + fields[meta.top + 1]).norm_sqr(),
    }
}

/// Measures one meta-MZI by sweeping `swept`, one of its arm heaters, with
/// every other external heater undriven. The internal phases come from
/// `internal` (one calibration per MZI).
pub fn calibrate_external_meta_mzi(
    device: &MeshDevice,
    internal: &[PhaseShifterCal],
    meta: &MetaMzi,
    swept: usize,
    points: usize,
) -> Result<MetaMziResult> {
    let n = device.size();
    let layout = MeshLayout::new(n);
    if internal.len() != layout.num_mzis() {
        return Err(Error::Dimension(format!(
            "{} internal calibrations for {} MZIs",
            internal.len(),
            layout.num_mzis()
        )));
    }
    let (same, other) = if meta.upper.contains(&swept) {
        (&meta.upper, &meta.lower)
    } else if meta.lower.contains(&swept) {
        (&meta.lower, &meta.upper)
    } else {
        return Err(Error::InvalidArgument(format!("heater {swept} is not on an arm of this meta-MZI")));
    };
    let targets = meta_internal_targets(n, meta);
    let mut base = vec![0.0; device.num_heaters()];
    for (k, (&t, cal)) in targets.iter().zip(internal).enumerate() {
        base[theta1(k)] = cal.current_for_wrapped_phase(t)?;
    }
    let probe = meta_input(n, meta);
    let needs_fields = meta.combiner == MetaCombiner::Receiver;
    let data = sweep_heater(device, swept, &base, points, |c| {
        if needs_fields {
            Ok(meta_signal(meta, &device.output_fields(c, &probe)?))
        } else {
            Ok(device.output_powers(c, &probe)?[meta.top])
        }
    })?;
    let v = fit_voltage(&data.currents, &data.volts)?;
    let x: Vec<f64> = data.currents.iter().map(|&i| dissipated(&v, i)).collect();
    let fit = fit_cosine(&x, &data.signal, Port::Cross)?;

    // the same response predicted with every external phase at zero
    let model = |delta: f64| {
        let mut phases = vec![0.0; layout.num_heaters()];
        for (k, &t) in targets.iter().enumerate() {
            phases[theta1(k)] = t;
        }
        phases[swept] = delta;
        let f = MeshFactors {
            size: n,
            sites: layout.sites().to_vec(),
            phases,
            eps: vec![[0.0; 2]; layout.num_mzis()],
            amplitude: vec![1.0; layout.num_mzis()],
        };
        let mut x = ComplexMatrix::from_column_slice(n, 1, probe.as_slice());
        f.forward(&mut x);
        meta_signal(meta, &DVector::from_column_slice(x.as_slice()))
    };
    let (p0, p1, p2) = (model(0.0), model(FRAC_PI_2), model(PI));
    let offset = 0.5 * (p0 + p2);
    let psi_model = (offset - p1).atan2(0.5 * (p0 - p2));

    let mut terms: Vec<(usize, f64)> = same.iter().map(|&h| (h, 1.0)).collect();
    terms.extend(other.iter().map(|&h| (h, -1.0)));
    Ok(MetaMziResult {
        equation: PhaseEquation {
            terms,
            value: wrap_phase(fit.phase - psi_model),
        },
        swept,
        v_coeffs: v,
        fit,
    })
}

/// Solution of a modular phase system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSolution {
    /// Wrapped into `[0, 2π)`; anchors are exactly zero.
    pub phases: Vec<f64>,
    pub rank: usize,
    /// Rms of the wrapped equation residuals.
    pub residual_rms: f64,
}

fn matrix_rank(a: &DMatrix<f64>) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let tol = 1e-9 * sv.max().max(1.0);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Solves `A φ = b (mod 2π)` in the least-squares sense with the `anchors`
/// fixed to zero as gauge. Duplicate equations are merged by circular mean.
pub fn solve_external_phases(
    equations: &[PhaseEquation],
    unknowns: usize,
    anchors: &[usize],
) -> Result<PhaseSolution> {
    if anchors.iter().any(|&a| a >= unknowns) {
        return Err(Error::InvalidArgument("anchor index out of range".into()));
    }
    // merge rows that constrain the same combination, normalized so the
    // first coefficient is positive
    let mut merged: BTreeMap<Vec<(usize, i64)>, (f64, f64)> = BTreeMap::new();
    for eq in equations {
        let mut terms = eq.terms.clone();
        if terms.iter().any(|&(u, c)| u >= unknowns || !c.is_finite()) {
            return Err(Error::InvalidArgument("equation references an unknown out of range".into()));
        }
        terms.sort_by_key(|t| t.0);
        let flip = terms.first().map_or(1.0, |t| t.1.signum());
        let key: Vec<(usize, i64)> = terms
            .iter()
            .map(|&(u, c)| (u, (flip * c * 1e9).round() as i64))
            .collect();
        let z = Complex64::from_polar(1.0, flip * eq.value);
        let e = merged.entry(key).or_insert((0.0, 0.0));
        e.0 += z.re;
        e.1 += z.im;
    }
    let rows: Vec<(Vec<(usize, f64)>, f64)> = merged
        .into_iter()
        .map(|(k, (re, im))| (k.into_iter().map(|(u, c)| (u, c as f64 / 1e9)).collect(), im.atan2(re)))
        .collect();

    let free: Vec<usize> = (0..unknowns).filter(|u| !anchors.contains(u)).collect();
    let col_of: Vec<Option<usize>> = (0..unknowns).map(|u| free.iter().position(|&f| f == u)).collect();
    let a = DMatrix::from_fn(rows.len(), free.len(), |r, c| {
        rows[r].0.iter().filter(|t| t.0 == free[c]).map(|t| t.1).sum()
    });
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let rank = matrix_rank(&a);
    if rank < free.len() {
        return Err(Error::RankDeficient {
            rank,
            unknowns,
            gauge: anchors.len(),
        });
    }

    // exact solve on a maximal independent subset, then Gauss-Newton on the
    // wrapped residuals of all rows
    let mut chosen: Vec<usize> = Vec::new();
    for r in 0..rows.len() {
        let mut trial = chosen.clone();
        trial.push(r);
        let sub = DMatrix::from_fn(trial.len(), free.len(), |i, c| a[(trial[i], c)]);
        if matrix_rank(&sub) == trial.len() {
            chosen = trial;
        }
        if chosen.len() == free.len() {
            break;
        }
    }
    let sub_a = DMatrix::from_fn(chosen.len(), free.len(), |i, c| a[(chosen[i], c)]);
    let sub_b = DVector::from_iterator(chosen.len(), chosen.iter().map(|&r| b[r]));
    let mut x = sub_a
        .lu()
        .solve(&sub_b)
        .ok_or(Error::Singular { condition: f64::INFINITY })?;
    let pinv = a
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Calibration(e.to_string()))?;
    let wrapped = |x: &DVector<f64>| (&a * x - &b).map(wrap_signed);
    for _ in 0..50 {
        let dx = &pinv * wrapped(&x);
        x -= &dx;
        if dx.amax() < 1e-13 {
            break;
        }
    }
    let r = wrapped(&x);
    let residual_rms = if r.is_empty() { 0.0 } else { (r.norm_squared() / r.len() as f64).sqrt() };
    let phases = col_of
        .iter()
        .map(|c| c.map_or(0.0, |c| wrap_phase(x[c])))
        .collect();
    Ok(PhaseSolution { phases, rank, residual_rms })
}

pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeaterRole {
    Internal,
    External,
    Screen,
}

/// Fit quality for one heater.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeaterReport {
    pub heater: usize,
    pub role: HeaterRole,
    pub p_pi: f64,
    pub p0: f64,
    /// Worst sweep-fit residual among the sweeps that touched this heater.
    pub residual_rms: f64,
    pub sweeps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub heaters: Vec<HeaterReport>,
    pub equations: usize,
    pub rank: usize,
    pub gauge: usize,
    pub phase_residual_rms: f64,
}

/// Fitted calibration of every heater of a mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshCalibration {
    pub schema_version: u32,
    pub size: usize,
    pub heaters: Vec<PhaseShifterCal>,
    pub report: CalibrationReport,
}

impl MeshCalibration {
    /// Currents realizing `program` modulo 2π on every heater.
    pub fn currents_for(&self, program: &MeshProgram) -> Result<Vec<f64>> {
        if program.size != self.size {
            return Err(Error::Dimension(format!(
                "program for {} modes, calibration for {}",
                program.size, self.size
            )));
        }
        program.validate()?;
        program
            .heater_phases()
            .iter()
            .zip(&self.heaters)
            .map(|(&p, cal)| cal.current_for_wrapped_phase(p))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cal: Self = serde_json::from_str(text)?;
        if cal.schema_version != CALIBRATION_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: cal.schema_version,
                expected: CALIBRATION_SCHEMA_VERSION,
            });
        }
        let expected = MeshLayout::new(cal.size).num_heaters();
        if cal.heaters.len() != expected {
            return Err(Error::Dimension(format!("{} heaters, layout has {expected}", cal.heaters.len())));
        }
        for h in &cal.heaters {
            h.validate()?;
        }
        Ok(cal)
    }
}

/// Full protocol: internal phases by routing and sweeps, then every external
/// phase from meta-MZI measurements solved jointly. The global phase (a
/// common shift of the phase screen) is the only gauge and is fixed by
/// setting screen heater 0 to zero.
pub fn calibrate_mesh(device: &MeshDevice, opts: &CalibrationOptions) -> Result<MeshCalibration> {
    let n = device.size();
    if n < 2 {
        return Err(Error::InvalidArgument("calibration needs at least two modes".into()));
    }
    let layout = MeshLayout::new(n);
    let m = layout.num_mzis();
    let (internal, internal_fits) = calibrate_all_internal(device, opts)?;

    let mut results = Vec::new();
    for meta in meta_mzi_configs(n) {
        for &h in meta.upper.iter().chain(&meta.lower) {
            results.push(calibrate_external_meta_mzi(device, &internal, &meta, h, opts.sweep_points)?);
        }
    }
    // unknowns are the external heaters in heater order
    let externals: Vec<usize> = (0..layout.num_heaters()).filter(|&h| h >= 2 * m || h % 2 == 1).collect();
    let unknown_of = |h: usize| externals.iter().position(|&e| e == h).expect("external heater");
    let equations: Vec<PhaseEquation> = results
        .iter()
        .map(|r| PhaseEquation {
            terms: r.equation.terms.iter().map(|&(h, c)| (unknown_of(h), c)).collect(),
            value: r.equation.value,
        })
        .collect();
    let anchor = unknown_of(2 * m);
    let solution = solve_external_phases(&equations, externals.len(), &[anchor])?;

    let mut heaters = vec![None; layout.num_heaters()];
    let mut reports = Vec::with_capacity(layout.num_heaters());
    for (k, (cal, fit)) in internal.into_iter().zip(internal_fits).enumerate() {
        reports.push(HeaterReport {
            heater: theta1(k),
            role: HeaterRole::Internal,
            p_pi: cal.p_pi,
            p0: cal.p0(),
            residual_rms: fit.residual_rms,
            sweeps: 1,
        });
        heaters[theta1(k)] = Some(cal);
    }
    for (u, &h) in externals.iter().enumerate() {
        let sweeps: Vec<&MetaMziResult> = results.iter().filter(|r| r.swept == h).collect();
        if sweeps.is_empty() {
            return Err(Error::Calibration(format!("heater {h} was never swept")));
        }
        let p_pi = sweeps.iter().map(|r| PI / r.fit.omega).sum::<f64>() / sweeps.len() as f64;
        let residual = sweeps.iter().map(|r| r.fit.residual_rms).fold(0.0, f64::max);
        let p0 = solution.phases[u];
        let cal = PhaseShifterCal::new(sweeps[0].v_coeffs, p_pi, p0, 0.5, 0.5, device.max_current())?;
        reports.push(HeaterReport {
            heater: h,
            role: if h >= 2 * m { HeaterRole::Screen } else { HeaterRole::External },
            p_pi,
            p0,
            residual_rms: residual,
            sweeps: sweeps.len(),
        });
        heaters[h] = Some(cal);
    }
    reports.sort_by_key(|r| r.heater);
    Ok(MeshCalibration {
        schema_version: CALIBRATION_SCHEMA_VERSION,
        size: n,
        heaters: heaters.into_iter().map(|h| h.expect("every heater calibrated")).collect(),
        report: CalibrationReport {
            heaters: reports,
            equations: equations.len(),
            rank: solution.rank,
            gauge: 1,
            phase_residual_rms: solution.residual_rms,
        },
    })
}

/// A bank of transmitter MZIs whose internal heaters heat each other.
///
/// Channel `i` sees `θᵢ = p₀ᵢ + Σⱼ Mᵢⱼ dⱼ`, where `dⱼ = π Pⱼ / P_π,ⱼ` is the
/// drive phase of heater `j`, and is read at its cross port.
pub struct TransmitterDevice {
    heaters: Vec<PhaseShifterCal>,
    crosstalk: CrosstalkMatrix,
    noise: ReadoutNoise,
    rng: Mutex<ChaCha8Rng>,
}

impl TransmitterDevice {
    pub fn new(heaters: Vec<PhaseShifterCal>, crosstalk: CrosstalkMatrix, noise: ReadoutNoise, seed: u64) -> Result<Self> {
        if heaters.len() != crosstalk.channels() {
            return Err(Error::Dimension(format!(
                "{} heaters, crosstalk matrix for {} channels",
                heaters.len(),
                crosstalk.channels()
            )));
        }
        crosstalk.validate()?;
        Ok(Self {
            heaters,
            crosstalk,
            noise,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    /// Random device whose nearest-neighbour coupling has standard deviation
    /// `sigma`, falling off with the square of the channel distance.
    pub fn random(channels: usize, sigma: f64, noise: ReadoutNoise, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MeshDeviceConfig::default();
        let heaters = (0..channels)
            .map(|_| random_heater(&cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let normal = Normal::new(0.0, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut m = CrosstalkMatrix::identity(channels);
        for i in 0..channels {
            for j in 0..channels {
                if i != j {
                    let d = i.abs_diff(j) as f64;
                    m.set(i, j, sigma / (d * d) * normal.sample(&mut rng));
                }
            }
        }
        Self::new(heaters, m, noise, rng.gen())
    }

    pub fn channels(&self) -> usize {
        self.heaters.len()
    }

    pub fn max_current(&self) -> f64 {
        self.heaters.iter().map(|h| h.max_current).fold(f64::INFINITY, f64::min)
    }

    /// Hidden truth, exposed for validation only.
    pub fn ground_truth(&self) -> (&[PhaseShifterCal], &CrosstalkMatrix) {
        (&self.heaters, &self.crosstalk)
    }

    /// Actual internal phases at the given currents.
    fn phases(&self, currents: &[f64]) -> Result<Vec<f64>> {
        if currents.len() != self.channels() {
            return Err(Error::Dimension(format!("{} currents for {} channels", currents.len(), self.channels())));
        }
        let drives = self
            .heaters
            .iter()
            .zip(currents)
            .map(|(h, &i)| Ok(PI * h.dissipated_power(i)? / h.p_pi))
            .collect::<Result<Vec<f64>>>()?;
        let coupled = self.crosstalk.apply(&drives);
        Ok(self.heaters.iter().zip(coupled).map(|(h, d)| h.p0() + d).collect())
    }

    /// Cross-port transmission of every channel.
    pub fn cross_transmissions(&self, currents: &[f64]) -> Result<Vec<f64>> {
        let phases = self.phases(currents)?;
        let mut rng = self.rng.lock().expect("rng lock");
        Ok(self
            .heaters
            .iter()
            .zip(phases)
            .map(|(h, p)| self.noise.apply(h.a + h.b * p.cos(), &mut *rng))
            .collect())
    }

    pub fn heater_voltage(&self, channel: usize, current: f64) -> Result<f64> {
        let h = self
            .heaters
            .get(channel)
            .ok_or_else(|| Error::InvalidArgument(format!("no channel {channel}")))?;
        let v = h.heater_voltage(current)?;
        Ok(self.noise.apply(v, &mut *self.rng.lock().expect("rng lock")))
    }
}

fn transmitter_sweep(
    device: &TransmitterDevice,
    channel: usize,
    base: &[f64],
    points: usize,
    v: Option<[f64; 4]>,
) -> Result<([f64; 4], CosineFit)> {
    let grid = sweep_grid(device.max_current(), points.max(8));
    let mut c = base.to_vec();
    let mut t = Vec::with_capacity(grid.len());
    let mut volts = Vec::with_capacity(grid.len());
    for &i in &grid {
        c[channel] = i;
        t.push(device.cross_transmissions(&c)?[channel]);
        if v.is_none() {
            volts.push(device.heater_voltage(channel, i)?);
        }
    }
    let v = match v {
        Some(v) => v,
        None => fit_voltage(&grid, &volts)?,
    };
    let x: Vec<f64> = grid.iter().map(|&i| dissipated(&v, i)).collect();
    Ok((v, fit_cosine(&x, &t, Port::Cross)?))
}

/// Single-channel calibrations with every other heater undriven.
pub fn calibrate_transmitter(device: &TransmitterDevice, points: usize) -> Result<Vec<PhaseShifterCal>> {
    let base = vec![0.0; device.channels()];
    (0..device.channels())
        .map(|ch| {
            let (v, fit) = transmitter_sweep(device, ch, &base, points, None)?;
            fitted_cal(v, &fit, fit.phase, device.max_current())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkOptions {
    /// Drive phases applied to the aggressor while the victim is swept.
    pub aggressor_phases: Vec<f64>,
    pub sweep_points: usize,
}

impl Default for CrosstalkOptions {
    fn default() -> Self {
        Self {
            aggressor_phases: (0..5).map(|k| k as f64 * 0.4 * PI).collect(),
            sweep_points: 60,
        }
    }
}

/// Smallest aggressor span accepted for the slope fit (rad).
pub const MIN_AGGRESSOR_SPAN: f64 = 0.5;

/// Measures `Mᵢⱼ` as the slope of victim `i`'s fitted static phase against
/// the drive phase of aggressor `j`.
pub fn measure_crosstalk_matrix(
    device: &TransmitterDevice,
    cals: &[PhaseShifterCal],
    opts: &CrosstalkOptions,
) -> Result<CrosstalkMatrix> {
    let n = device.channels();
    if cals.len() != n {
        return Err(Error::Dimension(format!("{} calibrations for {n} channels", cals.len())));
    }
    let settings = &opts.aggressor_phases;
    let (lo, hi) = settings
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if settings.len() < 2 || !(hi - lo >= MIN_AGGRESSOR_SPAN) {
        return Err(Error::InvalidArgument(format!(
            "aggressor sweep spans {:.3} rad; at least {MIN_AGGRESSOR_SPAN} rad over two settings is needed for a stable slope",
            (hi - lo).max(0.0)
        )));
    }
    if settings.iter().any(|&s| s < 0.0) {
        return Err(Error::InvalidArgument("aggressor drive phases must be non-negative".into()));
    }
    let mut m = CrosstalkMatrix::identity(n);
    for i in 0..n {
        let v_victim = cals[i].v_coeffs;
        for j in (0..n).filter(|&j| j != i) {
            let mut phases = Vec::with_capacity(settings.len());
            for &d in settings {
                let mut base = vec![0.0; n];
                base[j] = cals[j].current_for_phase(cals[j].p0() + d)?;
                let (_, fit) = transmitter_sweep(device, i, &base, opts.sweep_points, Some(v_victim))?;
                phases.push(fit.phase);
            }
            // unwrap against the first setting, then least-squares slope
            let y: Vec<f64> = phases.iter().map(|&p| wrap_signed(p - phases[0])).collect();
            let mx = settings.iter().sum::<f64>() / settings.len() as f64;
            let my = y.iter().sum::<f64>() / y.len() as f64;
            let sxy: f64 = settings.iter().zip(&y).map(|(x, y)| (x - mx) * (y - my)).sum();
            let sxx: f64 = settings.iter().map(|x| (x - mx).powi(2)).sum();
            m.set(i, j, sxy / sxx);
        }
    }
    Ok(m)
}

/// Victim-phase statistics in units of π.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkBenchmark {
    pub victim: usize,
    pub target: f64,
    pub trials: usize,
    pub uncorrected_mean: f64,
    pub uncorrected_std: f64,
    pub corrected_mean: f64,
    pub corrected_std: f64,
}

fn absolute_targets(cals: &[PhaseShifterCal], desired: &[f64]) -> Vec<f64> {
    cals.iter()
        .zip(desired)
        .map(|(c, &d)| c.p0() + wrap_phase(d - c.p0()))
        .collect()
}

fn corrected_currents(cals: &[PhaseShifterCal], m: &CrosstalkMatrix, desired: &[f64]) -> Result<Vec<f64>> {
    let static0: Vec<f64> = cals.iter().map(|c| c.p0()).collect();
    let mut target = absolute_targets(cals, desired);
    for _ in 0..=cals.len() {
        let settings = apply_crosstalk_correction(&target, m, &static0)?;
        match settings.iter().zip(cals).position(|(&s, c)| s < c.phase_range().0) {
            // a negative drive is unreachable; ask for the same phase one turn up
            Some(k) => target[k] += TAU,
            None => {
                return settings
                    .iter()
                    .zip(cals)
                    .map(|(&s, c)| c.current_for_phase(s))
                    .collect()
            }
        }
    }
    Err(Error::Calibration("crosstalk-corrected drives stay out of range".into()))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Sets the victim to `target` while every other channel takes a random
/// phase, with and without crosstalk correction, and reads the victim phase
/// back from its cross-port transmission.
pub fn crosstalk_benchmark(
    device: &TransmitterDevice,
    cals: &[PhaseShifterCal],
    measured: &CrosstalkMatrix,
    victim: usize,
    target: f64,
    trials: usize,
    seed: u64,
) -> Result<CrosstalkBenchmark> {
    let n = device.channels();
    if victim >= n || cals.len() != n {
        return Err(Error::InvalidArgument(format!("victim {victim} or calibration count invalid for {n} channels")));
    }
    if trials < 2 {
        return Err(Error::InvalidArgument("benchmark needs at least two trials".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let readback = |currents: &[f64]| -> Result<f64> {
        let t = device.cross_transmissions(currents)?[victim];
        let c = &cals[victim];
        Ok(((t - c.a) / c.b).clamp(-1.0, 1.0).acos() / PI)
    };
    let (mut raw, mut fixed) = (Vec::with_capacity(trials), Vec::with_capacity(trials));
    for _ in 0..trials {
        let desired: Vec<f64> = (0..n)
            .map(|k| if k == victim { target } else { rng.gen_range(0.0..TAU) })
            .collect();
        let plain = absolute_targets(cals, &desired)
            .iter()
            .zip(cals)
            .map(|(&p, c)| c.current_for_phase(p))
            .collect::<Result<Vec<_>>>()?;
        raw.push(readback(&plain)?);
        fixed.push(readback(&corrected_currents(cals, measured, &desired)?)?);
    }
    let (um, us) = mean_std(&raw);
    let (cm, cs) = mean_std(&fixed);
    Ok(CrosstalkBenchmark {
        victim,
        target: target / PI,
        trials,
        uncorrected_mean: um,
        uncorrected_std: us,
        corrected_mean: cm,
        corrected_std: cs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unitary::{clements_decompose, fidelity, haar_random_unitary};
    use approx::assert_abs_diff_eq;

    fn synthetic(a: f64, b: f64, p_pi: f64, p0: f64, port: Port, points: usize) -> (Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..points).map(|k| 0.06 * k as f64 / (points - 1) as f64).collect();
        let t = x
            .iter()
            .map(|&x| a + port.sign() * b * (PI * x / p_pi + p0).cos())
            .collect();
        (x, t)
    }

    #[test]
    fn cosine_fit_recovers_known_parameters() {
        for (port, p0) in [(Port::Cross, 0.3), (Port::Bar, 4.0), (Port::Cross, 6.1)] {
            let (x, t) = synthetic(0.48, 0.47, 0.026, p0, port, 100);
            let fit = fit_cosine(&x, &t, port).unwrap();
            let p_pi = PI / fit.omega;
            assert!((p_pi / 0.026 - 1.0).abs() < 5e-3, "P_pi {p_pi}");
            assert!(wrap_signed(fit.phase - p0).abs() < 1e-2, "p0 {}", fit.phase);
            assert_abs_diff_eq!(fit.a, 0.48, epsilon = 1e-6);
            assert_abs_diff_eq!(fit.b, 0.47, epsilon = 1e-6);
        }
    }

    #[test]
    fn flat_sweep_is_rejected() {
        let x: Vec<f64> = (0..50).map(|k| k as f64).collect();
        let mut t = vec![0.5; 50];
        for (k, v) in t.iter_mut().enumerate() {
            *v += if k % 2 == 0 { 0.2 } else { -0.2 } * ((k * 7919) % 13) as f64 / 13.0;
        }
        assert!(matches!(fit_cosine(&x, &t, Port::Cross), Err(Error::FitDivergence { .. })));
    }

    #[test]
    fn voltage_fit_is_exact_for_a_quartic() {
        let v = [210.0, 900.0, 3.0e4, -1.0e6];
        let i: Vec<f64> = (0..30).map(|k| 17e-3 * k as f64 / 29.0).collect();
        let volts: Vec<f64> = i.iter().map(|&i| dissipated(&v, i) / i.max(1e-300)).collect();
        let fit = fit_voltage(&i[1..], &volts[1..]).unwrap();
        for k in 0..4 {
            assert!((fit[k] / v[k] - 1.0).abs() < 1e-6, "{k}: {} vs {}", fit[k], v[k]);
        }
    }

    #[test]
    fn every_route_reaches_one_output_and_diagonal_is_unique() {
        let layout = MeshLayout::new(6);
        assert_eq!(routes_between(&layout, 0, 5).len(), 1);
        assert!(routes_between(&layout, 0, 5)[0].steps.iter().all(|s| s.1 == Port::Cross));
        let total: usize = (0..6).map(|i| routes_from(&layout, i).len()).sum();
        let per_output: usize = (0..6)
            .flat_map(|i| (0..6).map(move |o| (i, o)))
            .map(|(i, o)| routes_between(&layout, i, o).len())
            .sum();
        assert_eq!(total, per_output);
    }

    #[test]
    fn round_robin_rejects_ambiguous_pairs_and_routes_the_diagonal() {
        let dev = MeshDevice::random(4, &MeshDeviceConfig::default(), 1).unwrap();
        let mut currents = vec![0.0; dev.num_heaters()];
        let opts = CalibrationOptions::default();
        assert!(matches!(
            route_diagonal(&dev, 1, 1, &mut currents, &opts),
            Err(Error::InvalidArgument(_))
        ));
        let crossed = route_diagonal(&dev, 0, 3, &mut currents, &opts).unwrap();
        assert_eq!(crossed.len(), 3);
        let p = dev.output_powers(&currents, &unit_input(4, 0)).unwrap();
        assert!(p[3] > 0.999, "{p:?}");
    }

    #[test]
    fn two_heaters_one_measurement() {
        let eq = PhaseEquation { terms: vec![(1, 1.0), (0, -1.0)], value: 0.7 };
        let s = solve_external_phases(&[eq], 2, &[0]).unwrap();
        assert_eq!(s.phases[0], 0.0);
        assert_abs_diff_eq!(s.phases[1], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn underdetermined_system_reports_rank() {
        let eq = PhaseEquation { terms: vec![(0, 1.0), (1, -1.0)], value: 0.1 };
        let err = solve_external_phases(&[eq], 3, &[0]).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { rank: 1, unknowns: 3, gauge: 1 }), "{err}");
    }

    #[test]
    fn noisy_overdetermined_matches_normal_equations() {
        // φ1, φ2 with φ0 anchored; small values so no wrapping is involved
        let rows = [
            (vec![(1, 1.0)], 0.30),
            (vec![(2, 1.0)], 0.52),
            (vec![(2, 1.0), (1, -1.0)], 0.19),
            (vec![(1, 1.0), (2, 1.0)], 0.85),
        ];
        let eqs: Vec<PhaseEquation> = rows
            .iter()
            .map(|(t, v)| PhaseEquation { terms: t.clone(), value: *v })
            .collect();
        let s = solve_external_phases(&eqs, 3, &[0]).unwrap();
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_column_slice(&[0.30, 0.52, 0.19, 0.85]);
        let x = (a.transpose() * &a).try_inverse().unwrap() * a.transpose() * b;
        assert_abs_diff_eq!(s.phases[1], x[0], epsilon = 1e-10);
        assert_abs_diff_eq!(s.phases[2], x[1], epsilon = 1e-10);
    }

    #[test]
    fn meta_mzis_touch_every_external_heater() {
        for n in 2..8 {
            let layout = MeshLayout::new(n);
            let configs = meta_mzi_configs(n);
            for h in 0..layout.num_heaters() {
                let external = h >= 2 * layout.num_mzis() || h % 2 == 1;
                let touched = configs.iter().any(|c| c.upper.contains(&h) || c.lower.contains(&h));
                assert_eq!(touched, external, "n {n} heater {h}");
            }
        }
    }

    #[test]
    fn mesh_calibration_recovers_phases_without_touching_the_device() {
        let dev = MeshDevice::random(6, &MeshDeviceConfig::default(), 11).unwrap();
        let before = dev.ground_truth().to_vec();
        let cal = calibrate_mesh(&dev, &CalibrationOptions::default()).unwrap();
        assert_eq!(dev.ground_truth(), before.as_slice());
        assert_eq!(cal.report.rank, 20);
        let m = MeshLayout::new(6).num_mzis();
        let gauge = wrap_signed(cal.heaters[2 * m].p0() - before[2 * m].p0());
        for (h, (c, t)) in cal.heaters.iter().zip(&before).enumerate() {
            let shift = if h >= 2 * m { gauge } else { 0.0 };
            let err = wrap_signed(c.p0() - t.p0() - shift).abs();
            assert!(err < 5e-3, "heater {h}: {err}");
            assert!((c.p_pi / t.p_pi - 1.0).abs() < 5e-3, "heater {h} P_pi");
        }
        for s in 0..5 {
            let u = haar_random_unitary(6, s).unwrap();
            let currents = cal.currents_for(&clements_decompose(&u).unwrap()).unwrap();
            assert!(fidelity(&u, &dev.transfer_matrix(&currents).unwrap()).unwrap() > 0.999);
        }
        let back = MeshCalibration::from_json(&cal.to_json().unwrap()).unwrap();
        assert_eq!(back, cal);
    }

    #[test]
    fn crosstalk_matrix_is_measured_and_corrected() {
        let dev = TransmitterDevice::random(4, 0.01, ReadoutNoise::none(), 5).unwrap();
        let cals = calibrate_transmitter(&dev, 100).unwrap();
        let m = measure_crosstalk_matrix(&dev, &cals, &CrosstalkOptions::default()).unwrap();
        let (_, truth) = dev.ground_truth();
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(m.get(i, j), truth.get(i, j), epsilon = 1e-5);
            }
        }
        let b = crosstalk_benchmark(&dev, &cals, &m, 1, FRAC_PI_2, 50, 2).unwrap();
        assert!(b.corrected_std * 3.0 < b.uncorrected_std);
        assert_abs_diff_eq!(b.corrected_mean, 0.5, epsilon = 1e-3);
    }

    #[test]
    fn narrow_aggressor_sweep_is_flagged() {
        let dev = TransmitterDevice::random(3, 0.01, ReadoutNoise::none(), 5).unwrap();
        let cals = calibrate_transmitter(&dev, 60).unwrap();
        let opts = CrosstalkOptions { aggressor_phases: vec![0.0, 0.1, 0.2], sweep_points: 40 };
        assert!(matches!(
            measure_crosstalk_matrix(&dev, &cals, &opts),
            Err(Error::InvalidArgument(_))
        ));
    }
}
