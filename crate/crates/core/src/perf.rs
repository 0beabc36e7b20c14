//! Closed-form latency, throughput and energy models.
//!
//! Two accounting styles coexist. The single-inference bound charges every
//! component for one propagation delay; the batched model charges power
//! against the streaming throughput `2 f (M N² + (M − 1) N)`.

use serde::{Deserialize, Serialize};

use crate::constants::{
    component_watts, CAVITY_LIFETIME, CHIP_LATENCY, CHIP_WAVEGUIDE_LENGTH, GROUP_INDEX, SPEED_OF_LIGHT, THERMAL_P_PI,
};
use crate::error::{Error, Result};

/// Operations per inference: `2 M N²` multiply-accumulates plus `2 (M − 1) N`
/// nonlinear operations.
pub fn op_count(modes: u64, layers: u64) -> u64 {
    2 * layers * modes * modes + 2 * layers.saturating_sub(1) * modes
}

/// The large-`N` approximation `2 M N²`.
pub fn op_count_approx(modes: u64, layers: u64) -> u64 {
    2 * layers * modes * modes
}

/// Mean thermal heater power: internal shifters need up to π, external up
/// to 2π, so on average 1.5 `P_π`.
pub fn thermal_phase_shifter_power() -> f64 {
    1.5 * THERMAL_P_PI
}

/// Optical path from transmitter to receiver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySpec {
    pub waveguide_length: f64,
    pub group_index: f64,
    pub cavity_lifetime: f64,
    /// Number of ring cavities the light traverses.
    pub cavities: u32,
}

impl LatencySpec {
    /// The fabricated three-layer chip.
    pub fn chip() -> Self {
        Self {
            waveguide_length: CHIP_WAVEGUIDE_LENGTH,
            group_index: GROUP_INDEX,
            cavity_lifetime: CAVITY_LIFETIME,
            cavities: 2,
        }
    }

    /// Compact layout: each of the `M` meshes is `N` devices of
    /// `device_length` deep, and nothing else adds path.
    pub fn optimized(modes: u32, layers: u32, device_length: f64) -> Self {
        Self {
            waveguide_length: (modes * layers) as f64 * device_length,
            group_index: GROUP_INDEX,
            cavity_lifetime: CAVITY_LIFETIME,
            cavities: layers.saturating_sub(1),
        }
    }
}

/// Device length assumed for projected layouts (m).
pub const PROJECTED_DEVICE_LENGTH: f64 = 500e-6;

/// Propagation delay `L n_g / c` plus the cavity lifetimes.
pub fn latency(spec: &LatencySpec) -> f64 {
    spec.waveguide_length * spec.group_index / SPEED_OF_LIGHT + spec.cavities as f64 * spec.cavity_lifetime
}

/// Whether signals stay optical between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutMode {
    /// Inline nonlinear units; one transmitter and one receiver bank.
    Receiverless,
    /// Every layer is read out electronically, so each layer pays for a
    /// receiver bank and the nonlinear units draw nothing.
    Intermediate,
}

/// Per-component powers of an `N`-mode, `M`-layer system (watts).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub modes: u32,
    pub layers: u32,
    pub p_ps: f64,
    pub p_nofu: f64,
    pub p_tx: f64,
    pub p_icr: f64,
    pub clock: f64,
    pub latency: LatencySpec,
    pub readout: ReadoutMode,
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modes < 2 || self.layers < 1 {
            return Err(Error::InvalidArgument("need N ≥ 2 and M ≥ 1".into()));
        }
        let powers = [self.p_ps, self.p_nofu, self.p_tx, self.p_icr];
        if powers.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument("component powers must be finite and non-negative".into()));
        }
        if !(self.clock > 0.0) {
            return Err(Error::InvalidArgument("clock must be positive".into()));
        }
        Ok(())
    }

    fn n(&self) -> f64 {
        self.modes as f64
    }

    fn m(&self) -> f64 {
        self.layers as f64
    }

    /// `M N² P_PS + M N P_NOFU + N (P_TX + P_ICR)`, counting one nonlinear
    /// unit per mode and layer as the single-inference bound does.
    pub fn total_power(&self) -> f64 {
        let (n, m) = (self.n(), self.m());
        m * n * n * self.p_ps + m * n * self.p_nofu + n * (self.p_tx + self.p_icr)
    }

    /// Power with the actual unit counts: `(M − 1) N` nonlinear units and,
    /// for intermediate readout, a receiver bank per layer.
    pub fn bill_of_power(&self) -> f64 {
        let (n, m) = (self.n(), self.m());
        let shifters = m * n * n * self.p_ps;
        match self.readout {
            ReadoutMode::Receiverless => shifters + (m - 1.0) * n * self.p_nofu + n * (self.p_tx + self.p_icr),
            ReadoutMode::Intermediate => shifters + n * self.p_tx + m * n * self.p_icr,
        }
    }
}

/// Single-inference bound `(τ/2) [P_PS + P_NOFU/N + (P_TX + P_ICR)/(M N)]`.
pub fn energy_per_op_latency_mode(spec: &SystemSpec) -> Result<f64> {
    spec.validate()?;
    let (n, m) = (spec.n(), spec.m());
    let tau = latency(&spec.latency);
    Ok(tau / 2.0 * (spec.p_ps + spec.p_nofu / n + (spec.p_tx + spec.p_icr) / (m * n)))
}

/// The same bound written as `τ P_total / (2 M N²)`.
pub fn energy_per_op_total_form(spec: &SystemSpec) -> Result<f64> {
    spec.validate()?;
    let tau = latency(&spec.latency);
    Ok(tau * spec.total_power() / op_count_approx(spec.modes as u64, spec.layers as u64) as f64)
}

/// Streaming approximation `(1/2f) [P_PS + P_NOFU/N + (P_TX + P_ICR)/(M N)]`.
pub fn energy_per_op_batched(spec: &SystemSpec) -> Result<f64> {
    spec.validate()?;
    let (n, m) = (spec.n(), spec.m());
    let shared = match spec.readout {
        ReadoutMode::Receiverless => spec.p_nofu / n + (spec.p_tx + spec.p_icr) / (m * n),
        ReadoutMode::Intermediate => (spec.p_tx + m * spec.p_icr) / (m * n),
    };
    Ok((spec.p_ps + shared) / (2.0 * spec.clock))
}

/// Streaming energy with exact unit and operation counts.
pub fn energy_per_op_streaming(spec: &SystemSpec) -> Result<f64> {
    spec.validate()?;
    Ok(spec.bill_of_power() / (spec.clock * op_count(spec.modes as u64, spec.layers as u64) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub ops_per_second: f64,
    /// Time from the first input to the last output (s).
    pub total_latency: f64,
}

/// `W` inputs streamed at `f`: the last result arrives after `τ + (W − 1)/f`.
pub fn throughput(spec: &SystemSpec, batch: u64) -> Result<Throughput> {
    spec.validate()?;
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must hold at least one input".into()));
    }
    let total_latency = latency(&spec.latency) + (batch - 1) as f64 / spec.clock;
    let ops = batch as f64 * op_count(spec.modes as u64, spec.layers as u64) as f64;
    Ok(Throughput { ops_per_second: ops / total_latency, total_latency })
}

/// Streaming rate `2 f (M N² + (M − 1) N)`.
pub fn peak_throughput(spec: &SystemSpec) -> f64 {
    spec.clock * op_count(spec.modes as u64, spec.layers as u64) as f64
}

/// Component counts and powers behind the fabricated chip's energy budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChipBudget {
    /// Thermal shifters, counting the transmitter as well as the meshes.
    pub phase_shifters: u32,
    pub phase_shifter_power: f64,
    pub nofus: u32,
    pub nofu_power: f64,
    /// High-speed channels, each with a DAC, TIA and ADC.
    pub channels: u32,
    pub channel_power: f64,
    /// Slow DACs holding the model parameters.
    pub weight_dacs: u32,
    pub weight_dac_power: f64,
    /// Inference delay the budget is charged over (s).
    pub latency: f64,
    pub ops: u64,
}

impl ChipBudget {
    pub fn fabricated() -> Self {
        Self {
            phase_shifters: 144,
            phase_shifter_power: thermal_phase_shifter_power(),
            nofus: 12,
            nofu_power: component_watts("nofu_injection", 1e9),
            channels: 12,
            channel_power: component_watts("dac_tx_1ghz", 1e9)
                + component_watts("tia_1ghz", 1e9)
                + component_watts("adc_1ghz", 1e9),
            weight_dacs: 132,
            weight_dac_power: component_watts("dac_weights", 1e9),
            latency: CHIP_LATENCY,
            ops: op_count(6, 3),
        }
    }
}

/// Energy per operation by subsystem (J).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub phase_shifters: f64,
    pub nofu: f64,
    pub electronics: f64,
    pub total: f64,
}

pub fn energy_breakdown(budget: &ChipBudget) -> EnergyBreakdown {
    let per_op = budget.latency / budget.ops as f64;
    let phase_shifters = budget.phase_shifters as f64 * budget.phase_shifter_power * per_op;
    let nofu = budget.nofus as f64 * budget.nofu_power * per_op;
    let electronics = (budget.channels as f64 * budget.channel_power
        + budget.weight_dacs as f64 * budget.weight_dac_power)
        * per_op;
    EnergyBreakdown { phase_shifters, nofu, electronics, total: phase_shifters + nofu + electronics }
}

/// Weight phase shifter technologies of the projected systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseShifterTech {
    Thermal,
    /// Undercut heaters dissipate an order of magnitude less.
    UndercutThermal,
    Mems,
}

impl PhaseShifterTech {
    pub fn power(self) -> f64 {
        match self {
            PhaseShifterTech::Thermal => thermal_phase_shifter_power(),
            PhaseShifterTech::UndercutThermal => thermal_phase_shifter_power() / 10.0,
            PhaseShifterTech::Mems => component_watts("ps_mems", 0.0),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PhaseShifterTech::Thermal => "thermal",
            PhaseShifterTech::UndercutThermal => "undercut thermal",
            PhaseShifterTech::Mems => "MEMS",
        }
    }
}

/// Clock of the projected high-speed systems (Hz).
pub const PROJECTED_CLOCK: f64 = 50e9;

/// Projected `N`-mode, three-layer system: depletion-mode nonlinear units
/// and 50 GHz converters. `include_weight_dacs` adds the slow DAC behind
/// each phase shifter.
pub fn projected_system(modes: u32, layers: u32, tech: PhaseShifterTech, readout: ReadoutMode, include_weight_dacs: bool) -> SystemSpec {
    let f = PROJECTED_CLOCK;
    let weight_dac = if include_weight_dacs { component_watts("dac_weights", f) } else { 0.0 };
    SystemSpec {
        modes,
        layers,
        p_ps: tech.power() + weight_dac,
        p_nofu: component_watts("nofu_depletion", f),
        p_tx: component_watts("dac_tx_50ghz", f),
        p_icr: component_watts("tia_50ghz", f) + component_watts("adc_50ghz", f),
        clock: f,
        latency: LatencySpec::optimized(modes, layers, PROJECTED_DEVICE_LENGTH),
        readout,
    }
}

/// One row of the performance table. Energies in J/OP, latency in s,
/// throughput in OP/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRow {
    pub modes: u32,
    pub phase_shifter: PhaseShifterTech,
    pub e_op: f64,
    pub e_total: f64,
    pub latency: f64,
    pub ops_per_second: f64,
}

/// The fabricated chip (single-inference bound) followed by projected
/// streaming systems.
pub fn performance_table() -> Vec<PerformanceRow> {
    let chip = ChipBudget::fabricated();
    let b = energy_breakdown(&chip);
    let tau = chip.latency;
    let mut rows = vec![PerformanceRow {
        modes: 6,
        phase_shifter: PhaseShifterTech::Thermal,
        e_op: b.phase_shifters,
        e_total: b.total,
        latency: tau,
        ops_per_second: chip.ops as f64 / tau,
    }];
    for (modes, tech) in [
        (6, PhaseShifterTech::UndercutThermal),
        (6, PhaseShifterTech::Mems),
        (64, PhaseShifterTech::Mems),
        (128, PhaseShifterTech::Mems),
        (256, PhaseShifterTech::Mems),
    ] {
        let spec = projected_system(modes, 3, tech, ReadoutMode::Receiverless, false);
        let on_chip = SystemSpec { p_tx: 0.0, p_icr: 0.0, ..spec.clone() };
        rows.push(PerformanceRow {
            modes,
            phase_shifter: tech,
            e_op: energy_per_op_streaming(&on_chip).expect("valid preset"),
            e_total: energy_per_op_streaming(&spec).expect("valid preset"),
            latency: latency(&spec.latency),
            ops_per_second: peak_throughput(&spec),
        });
    }
    rows
}

/// One point of the scaling sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub modes: u32,
    pub layers: u32,
    pub readout: ReadoutMode,
    pub energy_per_op: f64,
}

/// Streaming energy of MEMS systems (weight DACs included) over `N` and `M`.
pub fn scaling_sweep(modes: &[u32], layers: &[u32]) -> Result<Vec<ScalingPoint>> {
    let mut out = Vec::with_capacity(2 * modes.len() * layers.len());
    for readout in [ReadoutMode::Receiverless, ReadoutMode::Intermediate] {
        for &m in layers {
            for &n in modes {
                let spec = projected_system(n, m, PhaseShifterTech::Mems, readout, true);
                out.push(ScalingPoint { modes: n, layers: m, readout, energy_per_op: energy_per_op_streaming(&spec)? });
            }
        }
    }
    Ok(out)
}

/// Smallest `N` whose streaming energy falls below `target` (J/OP).
pub fn threshold_modes(layers: u32, readout: ReadoutMode, target: f64, max_modes: u32) -> Option<u32> {
    (2..=max_modes).find(|&n| {
        let spec = projected_system(n, layers, PhaseShifterTech::Mems, readout, true);
        energy_per_op_streaming(&spec).map_or(false, |e| e < target)
    })
}

pub fn write_scaling_csv<W: std::io::Write>(points: &[ScalingPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["modes", "layers", "readout", "energy_per_op_j"])?;
    for p in points {
        let readout = match p.readout {
            ReadoutMode::Receiverless => "receiverless",
            ReadoutMode::Intermediate => "intermediate",
        };
        w.write_record(&[p.modes.to_string(), p.layers.to_string(), readout.to_string(), p.energy_per_op.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table_csv<W: std::io::Write>(rows: &[PerformanceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["modes", "phase_shifter", "e_op_j", "e_total_j", "latency_s", "tops"])?;
    for r in rows {
        w.write_record(&[
            r.modes.to_string(),
            r.phase_shifter.label().to_string(),
            r.e_op.to_string(),
            r.e_total.to_string(),
            r.latency.to_string(),
            (r.ops_per_second / 1e12).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
