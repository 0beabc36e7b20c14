use std::f64::consts::{LN_2, PI, TAU};
use std::io::Cursor;

use cdnn::training::*;
use cdnn::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_dataset() -> VowelDataset {
    let cfg = SyntheticConfig { samples_per_class: 3, ..Default::default() };
    synthetic_vowels(&cfg, 5).unwrap()
}

/// Mesh phases with every MZI in the bar state and zero external phases.
fn bar_mesh(n: usize) -> Vec<f64> {
    let m = n * (n - 1) / 2;
    let mut v = Vec::with_capacity(n * n);
    for _ in 0..m {
        v.push(PI);
        v.push(0.0);
    }
    v.extend(std::iter::repeat(0.0).take(n));
    v
}

#[test]
fn parameter_count_matches_network_shape() {
    assert_eq!(num_params(6, 3), 132);
    assert_eq!(num_params(4, 1), 16);
    assert!((quantization_step() - TAU / 65536.0).abs() < 1e-18);
}

#[test]
fn wrong_parameter_length_is_rejected() {
    assert!(matches!(ModelParams::new(6, 3, vec![0.0; 131]), Err(Error::Dimension(_))));
}

#[test]
fn bar_meshes_with_untapped_units_pass_intensities_through() {
    // β = 0 leaves identical linear rings on every channel, so the normalized
    // readout equals the normalized input intensities.
    let cfg = FiconnConfig::ideal(6, 3);
    let mut theta = Vec::new();
    for _ in 0..3 {
        theta.extend(bar_mesh(6));
    }
    for _ in 0..12 {
        theta.push(0.0);
        theta.push(PI * 1.3);
    }
    let params = ModelParams::new(6, 3, theta).unwrap();
    let x = [0.2, 1.0, 0.5, 0.0, 0.7, 0.35];
    let v = forward(&x, &params, &cfg).unwrap();
    let total: f64 = x.iter().map(|a| a * a).sum();
    for (vi, xi) in v.iter().zip(&x) {
        assert!((vi - xi * xi / total).abs() < 1e-9, "{vi} vs {}", xi * xi / total);
    }
}

#[test]
fn dark_input_is_flagged() {
    let cfg = FiconnConfig::ideal(6, 3);
    let params = ModelParams::initial(&cfg, 0.5, 1.0, 1).unwrap();
    assert!(matches!(forward(&[0.0; 6], &params, &cfg), Err(Error::InvalidArgument(_))));
}

#[test]
fn loss_matches_scalar_recomputation() {
    let data = tiny_dataset();
    let cfg = FiconnConfig::with_default_errors(6, 3, 2).unwrap();
    let params = ModelParams::initial(&cfg, 0.5, 1.5, 9).unwrap();
    let mut expected = 0.0;
    for s in &data.train {
        let v = forward(&s.features, &params, &cfg).unwrap();
        expected -= v[s.label].ln();
    }
    expected /= data.train.len() as f64;
    let got = loss(&data.train, &params, &cfg).unwrap();
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn cross_entropy_reference_values() {
    assert!((cross_entropy(&[1.0 / 6.0; 6], 3) - 6f64.ln()).abs() < 1e-12);
    assert!(cross_entropy(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0], 1).abs() < 1e-12);
    assert!((cross_entropy(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0], 0) - LN_2).abs() < 1e-12);
    assert!(cross_entropy(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0], 0).is_finite());
}

#[test]
fn spsa_step_is_exact_on_a_quadratic() {
    // L(Θ+Δ) − L(Θ−Δ) = 4 Δ·(Θ − Θ*) holds exactly for ‖Θ − Θ*‖².
    let target: Vec<f64> = (0..10).map(|i| 0.1 * i as f64).collect();
    let theta = vec![0.3; 10];
    let mut evals = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let step = spsa_step(
        &theta,
        |t| {
            evals += 1;
            Ok(t.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum())
        },
        0.1,
        0.05,
        &mut rng,
    )
    .unwrap();
    assert_eq!(evals, 2);
    let norm = (step.delta.iter().map(|d| d * d).sum::<f64>()).sqrt();
    assert!((norm - 0.05 * 10f64.sqrt()).abs() < 1e-15);
    let dot: f64 = step.delta.iter().zip(theta.iter().zip(&target)).map(|(d, (t, s))| d * (t - s)).sum();
    assert!((step.derivative - 4.0 * dot / (2.0 * norm)).abs() < 1e-12);
    for i in 0..10 {
        let expected = theta[i] - 0.1 * step.derivative * step.delta[i];
        assert!((step.theta[i] - expected).abs() < 1e-15);
    }
}

#[test]
fn spsa_step_leaves_constant_loss_alone() {
    let theta = vec![1.0, 2.0, 3.0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let step = spsa_step(&theta, |_| Ok(7.0), 0.5, 0.05, &mut rng).unwrap();
    assert_eq!(step.derivative, 0.0);
    assert_eq!(step.theta, theta);
}

#[test]
fn spsa_mean_update_is_scaled_gradient() {
    let n = 132;
    let (mu, delta) = (0.002, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let target: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
    let theta: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
    let grad: Vec<f64> = theta.iter().zip(&target).map(|(t, s)| 2.0 * (t - s)).collect();
    let samples = 100_000;
    let mut mean = vec![0.0; n];
    for _ in 0..samples {
        let step = spsa_step(
            &theta,
            |t| Ok(t.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum()),
            mu,
            delta,
            &mut rng,
        )
        .unwrap();
        for i in 0..n {
            mean[i] += (step.theta[i] - theta[i]) / samples as f64;
        }
    }
    let eta = mu * delta / (n as f64).sqrt();
    let expected: Vec<f64> = grad.iter().map(|g| -eta * g).collect();
    let dot: f64 = mean.iter().zip(&expected).map(|(a, b)| a * b).sum();
    let na = mean.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = expected.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(dot / (na * nb) > 0.99, "cosine {}", dot / (na * nb));
    assert!((na / nb - 1.0).abs() < 0.05, "magnitude ratio {}", na / nb);
}

#[test]
fn finite_differences_match_analytic_gradient() {
    // Central differences of a cubic carry an O(δ²) error of exactly δ².
    let theta = [0.3, -1.2, 2.0];
    let h = 1e-3;
    let g = finite_difference_gradient(&theta, h, |t| Ok(t.iter().map(|x| x * x * x / 3.0).sum())).unwrap();
    for (gi, t) in g.iter().zip(&theta) {
        assert!((gi - (t * t + h * h / 3.0)).abs() < 1e-9);
    }
}

#[test]
fn both_optimizers_reach_the_quadratic_minimum() {
    let target = [0.4, -0.3, 1.1, 0.0, 2.2];
    let f = |t: &[f64]| -> cdnn::Result<f64> { Ok(t.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum()) };
    let mut fd = vec![0.0; 5];
    for _ in 0..200 {
        let g = finite_difference_gradient(&fd, 0.05, f).unwrap();
        fd.iter_mut().zip(&g).for_each(|(t, g)| *t -= 0.1 * g);
    }
    let mut sp = vec![0.0; 5];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..4000 {
        sp = spsa_step(&sp, f, 0.2, 0.05, &mut rng).unwrap().theta;
    }
    for i in 0..5 {
        assert!((fd[i] - target[i]).abs() < 1e-6);
        assert!((sp[i] - target[i]).abs() < 1e-3, "{} vs {}", sp[i], target[i]);
    }
}

#[test]
fn pass_counts_per_epoch() {
    let data = tiny_dataset();
    let cfg = FiconnConfig::with_default_errors(6, 3, 1).unwrap();
    let tc = TrainConfig { epochs: 3, ..Default::default() };
    let state = train(&data, &cfg, &tc, None).unwrap();
    for (k, r) in state.history.iter().enumerate() {
        assert_eq!(r.passes.training, 3 * (k + 1));
        assert_eq!(r.passes.monitor, 0);
    }
    let tc = TrainConfig { epochs: 2, ..Default::default() };
    let state = forward_difference_train(&data, &cfg, &tc, None).unwrap();
    for (k, r) in state.history.iter().enumerate() {
        assert_eq!(r.passes.training, 2 * 132 * (k + 1));
        assert_eq!(r.passes.monitor, k + 1);
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = tiny_dataset();
    let cfg = FiconnConfig::with_default_errors(6, 3, 1).unwrap();
    let tc = TrainConfig { epochs: 4, learning_rate: 0.0, ..Default::default() };
    let init = ModelParams::initial(&cfg, tc.initial_beta, tc.initial_detuning, 8).unwrap();
    let state = train(&data, &cfg, &tc, Some(init.clone())).unwrap();
    assert_eq!(state.params, init);
    let acc: Vec<f64> = state.history.iter().map(|r| r.test_accuracy).collect();
    assert!(acc.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn training_is_deterministic() {
    let data = tiny_dataset();
    let cfg = FiconnConfig::with_default_errors(6, 3, 1).unwrap();
    let tc = TrainConfig { epochs: 5, seed: 21, ..Default::default() };
    let a = train(&data, &cfg, &tc, None).unwrap();
    let b = train(&data, &cfg, &tc, None).unwrap();
    assert_eq!(a, b);
    let c = train(&data, &cfg, &TrainConfig { seed: 22, ..tc }, None).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn train_rejects_wrong_network_width() {
    let data = tiny_dataset();
    let cfg = FiconnConfig::ideal(4, 2);
    assert!(matches!(train(&data, &cfg, &TrainConfig::default(), None), Err(Error::Dimension(_))));
}

#[test]
fn state_and_history_serialize() {
    let data = tiny_dataset();
    let cfg = FiconnConfig::ideal(6, 3);
    let state = train(&data, &cfg, &TrainConfig { epochs: 2, ..Default::default() }, None).unwrap();
    let back = TrainState::from_json(&state.to_json().unwrap()).unwrap();
    assert_eq!(back, state);
    let mut buf = Vec::new();
    state.write_history_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,train_acc,test_acc");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("2,"));

    let mut stale: serde_json::Value = serde_json::from_str(&state.params.to_json().unwrap()).unwrap();
    stale["schema_version"] = 99.into();
    assert!(matches!(ModelParams::from_json(&stale.to_string()), Err(Error::SchemaVersion { .. })));
}

#[test]
fn evaluation_counts_the_confusion_matrix() {
    let data = tiny_dataset();
    let perfect: Vec<Vec<f64>> = data
        .test
        .iter()
        .map(|s| {
            let mut p = vec![0.0; 6];
            p[s.label] = 1.0;
            p
        })
        .collect();
    let e = evaluate_predictions(&data.test, &perfect).unwrap();
    assert_eq!(e.accuracy, 1.0);
    for i in 0..6 {
        for j in 0..6 {
            if i != j {
                assert_eq!(e.confusion[i][j], 0);
            }
        }
    }
}

#[test]
fn random_predictor_scores_one_sixth() {
    // Binomial oracle: n = 6000, p = 1/6 gives σ ≈ 0.0048.
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples: Vec<Sample> = (0..6000).map(|k| Sample { label: k % 6, features: [1.0; 6] }).collect();
    let preds: Vec<Vec<f64>> = samples.iter().map(|_| (0..6).map(|_| rng.gen::<f64>()).collect()).collect();
    let e = evaluate_predictions(&samples, &preds).unwrap();
    assert!((e.accuracy - 1.0 / 6.0).abs() < 4.0 * 0.0048);
    let trace: usize = (0..6).map(|i| e.confusion[i][i]).sum();
    assert_eq!(trace as f64 / 6000.0, e.accuracy);
}

#[test]
fn csv_ingest_splits_and_normalizes() {
    let data = synthetic_vowels(&SyntheticConfig::default(), 3).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (TRAIN_SIZE, TEST_SIZE));
    let mut buf = Vec::new();
    write_vowel_csv(&data, &mut buf).unwrap();
    let back = read_vowel_csv(Cursor::new(buf), 1).unwrap();
    assert_eq!(back.train.len() + back.test.len(), 834);
    assert_eq!(back.train.len(), TRAIN_SIZE);
    for s in back.train.iter().chain(&back.test) {
        let max = s.features.iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
    }
}

#[test]
fn csv_ingest_errors() {
    let header_only = "label,f1,f2,f3,f1_50,f2_50,f3_50\n";
    assert!(matches!(read_vowel_csv(Cursor::new(header_only), 0), Err(Error::Dataset(_))));
    let bad = "label,f1,f2,f3,f1_50,f2_50,f3_50\niy,300,2300,3000,310,2310,3000\niy,300,oops,3000,310,2310,3000\n";
    match read_vowel_csv(Cursor::new(bad), 0) {
        Err(Error::MalformedRow { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
    let short = "iy,300,2300\n";
    assert!(matches!(read_vowel_csv(Cursor::new(short), 0), Err(Error::MalformedRow { line: 1, .. })));
    let many: String = (0..7).map(|k| format!("v{k},300,2300,3000,310,2310,3000\n")).collect();
    assert!(matches!(read_vowel_csv(Cursor::new(many), 0), Err(Error::MalformedRow { line: 7, .. })));
}

#[test]
fn digital_gradient_matches_finite_differences() {
    let data = tiny_dataset();
    for act in [Activation::Tanh, Activation::Relu] {
        let model = DigitalModel::random(3, act, 4).unwrap();
        assert_eq!(model.num_weights(), 108);
        let (_, grad) = model.loss_and_gradient(&data.train);
        let h = 1e-6;
        for (l, k) in [(0, 3), (1, 17), (2, 35)] {
            let mut plus = model.clone();
            plus.weights[l][k] += h;
            let mut minus = model.clone();
            minus.weights[l][k] -= h;
            let fd = (plus.loss_and_gradient(&data.train).0 - minus.loss_and_gradient(&data.train).0) / (2.0 * h);
            assert!((fd - grad[l][k]).abs() < 1e-6, "{act:?} {l} {k}: {fd} vs {}", grad[l][k]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quantized_parameters_sit_on_the_grid(raw in prop::collection::vec(-20.0..20.0f64, 132)) {
        let p = ModelParams::new(6, 3, raw).unwrap();
        let step = quantization_step();
        for (k, t) in p.theta.iter().enumerate() {
            let q = t / step;
            prop_assert!((q - q.round()).abs() < 1e-6);
            prop_assert!(*t >= 0.0 && *t <= TAU, "entry {k} = {t}");
        }
        let mut again = p.clone();
        again.quantize();
        prop_assert_eq!(again, p);
    }

    #[test]
    fn readout_is_a_distribution(x in prop::array::uniform6(0.05..1.0f64), seed in 0u64..50) {
        let cfg = FiconnConfig::with_default_errors(6, 3, seed).unwrap();
        let params = ModelParams::initial(&cfg, 0.5, 1.5, seed).unwrap();
        let v = forward(&x, &params, &cfg).unwrap();
        prop_assert!(v.iter().all(|p| *p >= 0.0));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
