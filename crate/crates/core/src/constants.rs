//! Physical constants and the versioned default preset shared by every module.
//!
//! Anything numeric that comes from a datasheet or a measurement lives here so
//! the rest of the crate never hard-codes wattages or device figures inline.

use serde::{Deserialize, Serialize};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Bumped whenever any preset value below changes meaning.
pub const PRESET_VERSION: u32 = 1;

/// Operating wavelength of the photonic circuit (m).
pub const WAVELENGTH: f64 = 1564e-9;

/// Heater power for a π shift on the thermal phase shifters (W).
pub const THERMAL_P_PI: f64 = 25e-3;

/// Photodiode responsivity assumed throughout (A/W).
pub const RESPONSIVITY: f64 = 1.0;

/// Measured insertion loss per MZI (dB) and its spread.
pub const MZI_LOSS_DB: f64 = 0.22;
pub const MZI_LOSS_DB_SIGMA: f64 = 0.05;

/// Crosstalk coefficient measured between transmitter channels 1 and 2.
pub const TX_CROSSTALK_M12: f64 = -0.00735;

/// Loaded quality factor and bias of the nonlinear unit.
pub const NOFU_Q: f64 = 8293.0;
pub const NOFU_BIAS_VOLTAGE: f64 = 0.8;
/// Photocurrent that detunes the ring by one linewidth (A).
pub const NOFU_LINEWIDTH_CURRENT: f64 = 75e-6;
/// Carrier lifetime of the injection-mode modulator (s).
pub const NOFU_CARRIER_LIFETIME: f64 = 1e-9;
/// Depletion-mode capacitance and drive swing.
pub const NOFU_DEPLETION_CAPACITANCE: f64 = 200e-15;
pub const NOFU_DEPLETION_VOLTAGE: f64 = 0.3;

/// Ridge-waveguide group index used for latency estimates.
pub const GROUP_INDEX: f64 = 4.2;
/// Transmitter-to-receiver waveguide length of the fabricated chip (m).
pub const CHIP_WAVEGUIDE_LENGTH: f64 = 29.8e-3;
/// Quoted end-to-end delay of the chip, used in its energy budget (s).
pub const CHIP_LATENCY: f64 = 435e-12;
/// Cavity photon lifetime entering the latency budget once per NOFU stage (s).
pub const CAVITY_LIFETIME: f64 = 6.6e-12;

/// One row of the component power table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentPower {
    pub key: &'static str,
    pub description: &'static str,
    /// Power in watts; `None` when the entry is only given per clock cycle.
    pub watts: Option<f64>,
    /// Energy per clock cycle in joules, when that is how the entry is quoted.
    pub joules_per_cycle: Option<f64>,
}

const fn watts(key: &'static str, description: &'static str, w: f64) -> ComponentPower {
    ComponentPower {
        key,
        description,
        watts: Some(w),
        joules_per_cycle: None,
    }
}

/// Literature and measured component powers used by the energy model.
pub const COMPONENT_POWERS: [ComponentPower; 12] = [
    watts("dac_tx_1ghz", "Digital-to-analog conversion (transmitter, 1 GHz)", 26e-3),
    watts("dac_tx_50ghz", "Digital-to-analog conversion (transmitter, 50 GHz)", 560e-3),
    watts("dac_weights", "Digital-to-analog conversion (weights)", 27.5e-6),
    watts("resonant_modulator_tx", "Resonant modulator (transmitter), 0.9 fJ/bit at 25 Gb/s", 22.5e-6),
    watts("ps_thermal", "Phase shifter (weights, thermal)", 37.5e-3),
    watts("ps_mems", "Phase shifter (weights, MEMS)", 75e-6),
    watts("nofu_injection", "NOFU (injection mode)", 60e-6),
    ComponentPower {
        key: "nofu_depletion",
        description: "NOFU (depletion mode)",
        watts: None,
        joules_per_cycle: Some(18e-15),
    },
    watts("tia_1ghz", "Transimpedance amplifier (receiver, 1 GHz)", 57e-3),
    watts("tia_50ghz", "Transimpedance amplifier (receiver, 50 GHz)", 313e-3),
    watts("adc_1ghz", "Analog-to-digital conversion (receiver, 1 GHz)", 2.55e-3),
    watts("adc_50ghz", "Analog-to-digital conversion (receiver, 50 GHz)", 150e-3),
];

/// Looks up a component by key. Panics on unknown keys, which are programming errors.
pub fn component(key: &str) -> &'static ComponentPower {
    COMPONENT_POWERS
        .iter()
        .find(|c| c.key == key)
        .unwrap_or_else(|| panic!("unknown component key {key}"))
}

/// Watts drawn by a component at clock `f_clock` (per-cycle entries are scaled).
pub fn component_watts(key: &str, f_clock: f64) -> f64 {
    let c = component(key);
    match (c.watts, c.joules_per_cycle) {
        (Some(w), _) => w,
        (None, Some(j)) => j * f_clock,
        (None, None) => 0.0,
    }
}
