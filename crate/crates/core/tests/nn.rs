use dsse::nn::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Small random model with non-trivial normalization.
fn random_model(l: usize, t: usize, k: usize, seed: u64) -> NnModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = NnModel::init(l, t, k, seed);
    m.b = DVector::from_fn(t, |_, _| rng.random_range(-1.0..1.0));
    m.in_mean = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
    m.in_std = (0..l).map(|_| rng.random_range(0.5..2.0)).collect();
    m.out_mean = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    m.out_std = (0..k).map(|_| rng.random_range(0.1..1.5)).collect();
    m
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Output-zero model: normalization is identity and every combiner vanishes.
fn zero_model(l: usize, k: usize) -> NnModel {
    let mut m = NnModel::init(l, 2, k, 0);
    m.a.fill(0.0);
    m
}

#[test]
fn single_neuron_at_zero_outputs_half() {
    let mut m = NnModel::init(3, 1, 4, 9);
    m.w.fill(0.0);
    m.a.fill(0.0);
    m.a[(0, 0)] = 1.0;
    assert_eq!(m.forward(&[0.3, -1.0, 2.0]).unwrap(), vec![0.5, 0.0, 0.0, 0.0]);
}

#[test]
fn zero_combiners_return_output_means() {
    let mut m = random_model(4, 3, 5, 1);
    m.a.fill(0.0);
    assert_eq!(m.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap(), m.out_mean);
}

#[test]
fn forward_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..20 {
        let (l, t, k) = (7, 6, 5);
        let m = random_model(l, t, k, seed);
        let z = random_vec(l, &mut rng);
        let zn: Vec<f64> = (0..l).map(|i| (z[i] - m.in_mean[i]) / m.in_std[i]).collect();
        let expect: Vec<f64> = (0..k)
            .map(|i| {
                let y: f64 = (0..t)
                    .map(|n| {
                        let pre: f64 = (0..l).map(|j| m.w[(n, j)] * zn[j]).sum::<f64>() + m.b[n];
                        m.a[(i, n)] * logistic(pre)
                    })
                    .sum();
                y * m.out_std[i] + m.out_mean[i]
            })
            .collect();
        let got = m.forward(&z).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() <= 1e-12 * (1.0 + e.abs()), "{g} vs {e}");
        }
    }
}

#[test]
fn length_mismatch_is_an_error() {
    let m = NnModel::init(4, 3, 2, 0);
    assert!(matches!(m.forward(&[1.0; 3]), Err(NnError::InputLength { got: 3, expected: 4 })));
    assert!(matches!(
        hinge_loss(&m, &[0.0; 4], &[0.0; 3], 0.1),
        Err(NnError::TargetLength { .. })
    ));
    assert!(matches!(loss_gradient(&m, &[], 0.0), Err(NnError::EmptyBatch)));
}

#[test]
fn hinge_loss_hand_values() {
    let m = zero_model(2, 3);
    let z = [0.4, -0.1];
    // g = 0 exactly, so ‖v − g‖² is exact in floating point
    assert_eq!(hinge_loss(&m, &z, &[0.5, 0.0, 0.0], 0.5).unwrap(), 0.0);
    assert_eq!(hinge_loss(&m, &z, &[0.0, 0.0, 0.0], 0.5).unwrap(), 0.0);
    assert_eq!(hinge_loss(&m, &z, &[1.0, 0.5, 0.0], 0.5).unwrap(), 1.0);
    assert_eq!(conventional_loss(&m, &z, &[1.0, 0.5, 0.0]).unwrap(), 1.25);
    assert_eq!(conventional_loss(&m, &z, &[0.0; 3]).unwrap(), 0.0);
}

#[test]
fn conventional_loss_matches_hand_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = random_model(5, 4, 6, 3);
    let z = random_vec(5, &mut rng);
    let v = random_vec(6, &mut rng);
    let g = m.forward(&z).unwrap();
    let expect: f64 = v.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum();
    assert!((conventional_loss(&m, &z, &v).unwrap() - expect).abs() < 1e-12 * expect);
}

proptest! {
    #[test]
    fn hinge_is_monotone_in_epsilon_and_reduces_to_squared_loss(
        seed in 0u64..1000,
        e1 in 0.0f64..3.0,
        e2 in 0.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_model(4, 3, 5, seed);
        let z = random_vec(4, &mut rng);
        let v = random_vec(5, &mut rng);
        prop_assert_eq!(hinge_loss(&m, &z, &v, 0.0).unwrap(), conventional_loss(&m, &z, &v).unwrap());
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(hinge_loss(&m, &z, &v, hi).unwrap() <= hinge_loss(&m, &z, &v, lo).unwrap());
    }
}

fn mean_loss(m: &NnModel, batch: &[(Vec<f64>, Vec<f64>)], eps: f64) -> f64 {
    batch.iter().map(|(z, v)| hinge_loss(m, z, v, eps).unwrap()).sum::<f64>() / batch.len() as f64
}

/// Central differences over every parameter, compared relative to the
/// largest gradient entry of the same block.
fn check_fd(m: &NnModel, batch: &[(Vec<f64>, Vec<f64>)], eps: f64) {
    let g = loss_gradient(m, batch, eps).unwrap();
    let h = 1e-6;
    let blocks: [(&str, &[f64], fn(&mut NnModel) -> &mut [f64]); 3] = [
        ("W", g.w.as_slice(), |m| m.w.as_mut_slice()),
        ("b", g.b.as_slice(), |m| m.b.as_mut_slice()),
        ("A", g.a.as_slice(), |m| m.a.as_mut_slice()),
    ];
    for (name, analytic, field) in blocks {
        let scale = analytic.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-300);
        for i in 0..analytic.len() {
            let mut p = m.clone();
            field(&mut p)[i] += h;
            let up = mean_loss(&p, batch, eps);
            field(&mut p)[i] -= 2.0 * h;
            let down = mean_loss(&p, batch, eps);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - analytic[i]).abs() <= 1e-5 * scale,
                "{name}[{i}]: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..5 {
        let (l, t, k) = (10, 8, 6);
        let m = random_model(l, t, k, seed);
        let batch: Vec<_> = (0..6).map(|_| (random_vec(l, &mut rng), random_vec(k, &mut rng))).collect();
        check_fd(&m, &batch, 0.0);
        // ε small enough that every sample stays outside the ball (no kink)
        let min_err = batch
            .iter()
            .map(|(z, v)| conventional_loss(&m, z, v).unwrap())
            .fold(f64::INFINITY, f64::min);
        check_fd(&m, &batch, 0.5 * min_err.sqrt());
    }
}

#[test]
fn single_sample_eps_zero_is_squared_loss_backprop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random_model(3, 2, 2, 5);
    let z = random_vec(3, &mut rng);
    let v = random_vec(2, &mut rng);
    let g = loss_gradient(&m, &[(z.clone(), v.clone())], 0.0).unwrap();
    // hand backprop for one sample
    let zn: Vec<f64> = (0..3).map(|i| (z[i] - m.in_mean[i]) / m.in_std[i]).collect();
    let h: Vec<f64> = (0..2)
        .map(|n| logistic((0..3).map(|j| m.w[(n, j)] * zn[j]).sum::<f64>() + m.b[n]))
        .collect();
    let out = m.forward(&z).unwrap();
    let dy: Vec<f64> = (0..2).map(|i| -2.0 * (v[i] - out[i]) * m.out_std[i]).collect();
    for i in 0..2 {
        for n in 0..2 {
            assert!((g.a[(i, n)] - dy[i] * h[n]).abs() < 1e-12);
        }
    }
    for n in 0..2 {
        let dp = (0..2).map(|i| m.a[(i, n)] * dy[i]).sum::<f64>() * h[n] * (1.0 - h[n]);
        assert!((g.b[n] - dp).abs() < 1e-12);
        for j in 0..3 {
            assert!((g.w[(n, j)] - dp * zn[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn samples_inside_ball_have_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = random_model(4, 3, 3, 6);
    let batch: Vec<_> = (0..5).map(|_| (random_vec(4, &mut rng), random_vec(3, &mut rng))).collect();
    let g = loss_gradient(&m, &batch, 100.0).unwrap();
    assert!(g.w.iter().chain(g.b.iter()).chain(g.a.iter()).all(|x| *x == 0.0));
}

fn columns(data: &[(Vec<f64>, Vec<f64>)]) -> (DMatrix<f64>, DMatrix<f64>) {
    let l = data[0].0.len();
    let k = data[0].1.len();
    (
        DMatrix::from_fn(l, data.len(), |i, j| data[j].0[i]),
        DMatrix::from_fn(k, data.len(), |i, j| data[j].1[i]),
    )
}

/// Ten samples of a smooth nonlinear map.
fn tiny_data() -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<_> = (0..10)
        .map(|_| {
            let z = random_vec(6, &mut rng);
            let v = vec![z[0] * z[1], z[2].sin(), z[3] - 0.5 * z[4], z[5].cos()];
            (z, v)
        })
        .collect();
    columns(&data)
}

#[test]
fn plateau_step_leaves_parameters_unchanged() {
    let (z, v) = tiny_data();
    let cfg = TrainConfig {
        epsilon: 1e3,
        hidden: 8,
        epochs: 3,
        batch_size: 4,
        seed: 11,
        ..TrainConfig::default()
    };
    let (m, trace) = train_on(&z, &v, &z, &v, [0; 32], &cfg).unwrap();
    let init = NnModel::init(6, 8, 4, 11);
    assert_eq!(m.w, init.w);
    assert_eq!(m.a, init.a);
    assert_eq!(m.b, init.b);
    assert!(trace.epochs.iter().all(|e| e.train_loss == 0.0));
}

#[test]
fn memorizes_ten_samples() {
    let (z, v) = tiny_data();
    let cfg = TrainConfig {
        hidden: 64,
        epochs: 5000,
        batch_size: 10,
        lr: 1e-2,
        patience: 200,
        seed: 1,
        ..TrainConfig::default()
    };
    let (m, trace) = train_on(&z, &v, &z, &v, [0; 32], &cfg).unwrap();
    let final_loss = batch_hinge_loss(&m, &z, &v, 0.0);
    assert!(final_loss <= 1e-4, "{final_loss} after {} epochs", trace.epochs.len());
}

#[test]
fn wide_ball_needs_few_neurons() {
    let (z, v) = tiny_data();
    let cfg = TrainConfig {
        epsilon: 1.0,
        hidden: 8,
        epochs: 2000,
        batch_size: 10,
        lr: 1e-2,
        patience: 200,
        seed: 1,
        ..TrainConfig::default()
    };
    let (m, _) = train_on(&z, &v, &z, &v, [0; 32], &cfg).unwrap();
    assert_eq!(batch_hinge_loss(&m, &z, &v, 1.0), 0.0);
}

#[test]
fn training_is_deterministic_and_keeps_best_epoch() {
    let (z, v) = tiny_data();
    let (zv, vv) = (z.columns(0, 3).into_owned(), v.columns(0, 3).into_owned());
    let cfg = TrainConfig {
        hidden: 16,
        epochs: 300,
        batch_size: 3,
        lr: 1e-2,
        patience: 5,
        seed: 3,
        ..TrainConfig::default()
    };
    let (a, ta) = train_on(&z, &v, &zv, &vv, [0; 32], &cfg).unwrap();
    let (b, tb) = train_on(&z, &v, &zv, &vv, [0; 32], &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let best = ta.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    let kept = ta.epochs.iter().find(|e| e.epoch == ta.best_epoch).unwrap();
    assert_eq!(kept.val_loss, best);
    assert_eq!(batch_hinge_loss(&a, &zv, &vv, 0.0), best);
}

#[test]
fn save_load_round_trip_is_bitwise() {
    let mut m = random_model(5, 4, 3, 8);
    m.fingerprint[3] = 7;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    m.save(&path).unwrap();
    let back = NnModel::load(&path).unwrap();
    assert_eq!(back, m);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let z = random_vec(5, &mut rng);
        assert_eq!(back.forward(&z).unwrap(), m.forward(&z).unwrap());
    }
    assert!(NnModel::load_checked(&path, &m.fingerprint).is_ok());
    assert!(matches!(NnModel::load_checked(&path, &[0; 32]), Err(NnError::Fingerprint)));
}

#[test]
fn damaged_model_files_are_rejected() {
    let m = random_model(3, 2, 2, 9);
    let text = m.to_json();
    assert!(matches!(NnModel::from_json(&text[..text.len() / 2]), Err(NnError::Corrupt(_))));
    let v2 = text.replace("nnmodel/1", "nnmodel/2");
    assert!(matches!(NnModel::from_json(&v2), Err(NnError::Version(_))));
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["b"] = serde_json::json!([1.0]);
    assert!(matches!(NnModel::from_json(&doc.to_string()), Err(NnError::Corrupt(_))));
}

#[test]
fn model_file_layout() {
    let m = random_model(3, 2, 4, 10);
    let doc: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
    assert_eq!(doc["schema"], "nnmodel/1");
    assert_eq!(doc["L"], 3);
    assert_eq!(doc["T"], 2);
    assert_eq!(doc["K_out"], 4);
    assert_eq!(doc["activation"], "logistic");
    // row-major: second entry is W[0][1]
    assert_eq!(doc["W"][1].as_f64().unwrap(), m.w[(0, 1)]);
    assert_eq!(doc["A"][2].as_f64().unwrap(), m.a[(1, 0)]);
}
