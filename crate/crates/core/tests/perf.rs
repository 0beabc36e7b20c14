use cdnn::perf::*;
use proptest::prelude::*;

/// `value` rounds to `reported` at a last-digit resolution of `unit`.
fn rounds_to(value: f64, reported: f64, unit: f64) -> bool {
    (value - reported).abs() <= 0.5 * unit + 1e-12 * reported.abs()
}

fn chip_spec() -> SystemSpec {
    SystemSpec {
        modes: 6,
        layers: 3,
        p_ps: 37.5e-3,
        p_nofu: 60e-6,
        p_tx: 26e-3,
        p_icr: 59.55e-3,
        clock: 1e9,
        latency: LatencySpec::chip(),
        readout: ReadoutMode::Receiverless,
    }
}

#[test]
fn operation_counts() {
    assert_eq!(op_count(6, 3), 240);
    assert_eq!(op_count(9, 1), 2 * 81);
    for n in 40..200u64 {
        let ratio = op_count_approx(n, 3) as f64 / op_count(n, 3) as f64;
        assert!(ratio > 0.9 && ratio <= 1.0);
    }
}

#[test]
fn chip_latency_is_near_the_quoted_delay() {
    let tau = latency(&LatencySpec::chip());
    // 29.8 mm × 4.2 / c = 417.5 ps, plus 13.2 ps in the two rings.
    assert!((tau - (29.8e-3 * 4.2 / 299_792_458.0 + 13.2e-12)).abs() < 1e-18);
    assert!((tau / 435e-12 - 1.0).abs() < 0.02);
    let bare = LatencySpec { waveguide_length: 0.0, ..LatencySpec::chip() };
    assert!((latency(&bare) - 13.2e-12).abs() < 1e-24);
}

#[test]
fn optimized_layout_latencies() {
    for (n, reported, unit) in [(6, 140e-12, 10e-12), (64, 1.4e-9, 0.1e-9), (128, 2.7e-9, 0.1e-9), (256, 5.4e-9, 0.1e-9)] {
        let tau = latency(&LatencySpec::optimized(n, 3, PROJECTED_DEVICE_LENGTH));
        assert!(rounds_to(tau, reported, unit), "N={n}: {tau:e}");
    }
}

#[test]
fn chip_energy_breakdown() {
    let b = energy_breakdown(&ChipBudget::fabricated());
    assert!(rounds_to(b.phase_shifters, 9.8e-12, 0.1e-12));
    assert!(rounds_to(b.nofu, 1.3e-15, 0.1e-15));
    assert!(rounds_to(b.electronics, 1.9e-12, 0.1e-12));
    assert!(rounds_to(b.total, 11.7e-12, 0.1e-12));
    // Hand arithmetic: 144 × 37.5 mW × 435 ps / 240.
    assert!((b.phase_shifters - 144.0 * 37.5e-3 * 435e-12 / 240.0).abs() < 1e-24);
}

#[test]
fn single_inference_forms_agree() {
    let spec = chip_spec();
    let a = energy_per_op_latency_mode(&spec).unwrap();
    let b = energy_per_op_total_form(&spec).unwrap();
    assert!((a - b).abs() <= 1e-12 * a);
}

#[test]
fn batching_amortizes_the_delay() {
    let spec = projected_system(6, 3, PhaseShifterTech::Mems, ReadoutMode::Receiverless, false);
    let one = throughput(&spec, 1).unwrap();
    assert_eq!(one.total_latency, latency(&spec.latency));
    let many = throughput(&spec, 1_000_000).unwrap();
    assert!((many.total_latency - (latency(&spec.latency) + 999_999.0 / 50e9)).abs() < 1e-15);
    assert!((many.ops_per_second / peak_throughput(&spec) - 1.0).abs() < 1e-3);
    assert!(throughput(&spec, 0).is_err());
}

#[test]
fn projected_rows_match_the_table() {
    let rows = performance_table();
    // (E_OP, unit) (E_total, unit) (TOPS, unit) for the five projected rows.
    let reported = [
        ((35e-15, 1e-15), (546e-15, 1e-15), (12.0, 1.0)),
        ((1.6e-15, 0.1e-15), (513e-15, 1e-15), (12.0, 1.0)),
        ((0.84e-15, 0.01e-15), (54e-15, 1e-15), (1240.0, 10.0)),
        ((0.79e-15, 0.01e-15), (27e-15, 1e-15), (4940.0, 10.0)),
        ((0.77e-15, 0.01e-15), (14e-15, 1e-15), (19700.0, 100.0)),
    ];
    for (row, ((e, eu), (t, tu), (ops, ou))) in rows[1..].iter().zip(reported) {
        assert!(rounds_to(row.e_op, e, eu), "N={} E_OP {:e}", row.modes, row.e_op);
        assert!(rounds_to(row.e_total, t, tu), "N={} E_total {:e}", row.modes, row.e_total);
        assert!(rounds_to(row.ops_per_second / 1e12, ops, ou), "N={} TOPS {}", row.modes, row.ops_per_second / 1e12);
    }
    let chip = &rows[0];
    assert!(rounds_to(chip.e_op, 9.8e-12, 0.1e-12));
    assert!(rounds_to(chip.e_total, 11.7e-12, 0.1e-12));
    assert!(rounds_to(chip.latency, 435e-12, 1e-12));
}

/// 240 operations in 435 ps is 0.552 TOPS; the table prints 0.53.
#[test]
#[ignore = "reported chip throughput is inconsistent with its own op count and latency"]
fn chip_throughput_matches_the_table() {
    let chip = &performance_table()[0];
    assert!(rounds_to(chip.ops_per_second / 1e12, 0.53, 0.01), "{}", chip.ops_per_second / 1e12);
}

#[test]
fn scaling_thresholds() {
    use ReadoutMode::*;
    assert_eq!(threshold_modes(3, Receiverless, 100e-15, 2000), Some(34));
    assert_eq!(threshold_modes(3, Receiverless, 10e-15, 2000), Some(380));
    assert_eq!(threshold_modes(10, Receiverless, 10e-15, 2000), Some(114));
    let n = threshold_modes(10, Intermediate, 10e-15, 2000).unwrap();
    assert!((n as f64 / 575.0 - 1.0).abs() < 0.02, "{n}");
    // "nearly twice as many modes" for three layers at 100 fJ/OP.
    let r = threshold_modes(3, Intermediate, 100e-15, 2000).unwrap() as f64 / 34.0;
    assert!(r > 1.7 && r < 2.0, "{r}");
    // Ten layers and ten modes already beat 1 pJ/OP.
    let ten = projected_system(10, 10, PhaseShifterTech::Mems, Receiverless, true);
    assert!(energy_per_op_streaming(&ten).unwrap() < 1e-12);
}

#[test]
fn sweep_csv_has_fixed_columns() {
    let pts = scaling_sweep(&[8, 16], &[3, 10]).unwrap();
    assert_eq!(pts.len(), 8);
    let mut buf = Vec::new();
    write_scaling_csv(&pts, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("modes,layers,readout,energy_per_op_j"));
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn component_table_entries() {
    use cdnn::constants::{component, component_watts};
    assert_eq!(component("dac_tx_1ghz").watts, Some(26e-3));
    assert_eq!(component("ps_mems").watts, Some(75e-6));
    assert!((thermal_phase_shifter_power() - 37.5e-3).abs() < 1e-15);
    assert!((component_watts("nofu_depletion", 50e9) - 0.9e-3).abs() < 1e-15);
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = chip_spec();
    spec.p_ps = -1.0;
    assert!(energy_per_op_batched(&spec).is_err());
    let spec = SystemSpec { modes: 1, ..chip_spec() };
    assert!(energy_per_op_streaming(&spec).is_err());
}

proptest! {
    #[test]
    fn batched_energy_falls_with_size(n in 2u32..2000, m in 1u32..20) {
        let e = |n, m| energy_per_op_batched(&projected_system(n, m, PhaseShifterTech::Mems, ReadoutMode::Receiverless, true)).unwrap();
        prop_assert!(e(n + 1, m) < e(n, m));
        prop_assert!(e(n, m + 1) < e(n, m));
        // Shifter-dominated limit.
        let floor = (75e-6 + 27.5e-6) / (2.0 * 50e9);
        prop_assert!(e(n, m) > floor);
    }

    #[test]
    fn latency_forms_agree(p_ps in 0.0..0.1f64, p_nofu in 0.0..1e-3f64, p_tx in 0.0..1.0f64, n in 2u32..300, m in 1u32..12) {
        let spec = SystemSpec { modes: n, layers: m, p_ps, p_nofu, p_tx, ..chip_spec() };
        let a = energy_per_op_latency_mode(&spec).unwrap();
        let b = energy_per_op_total_form(&spec).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-30));
    }
}
