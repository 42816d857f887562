//! The library's vectorized forward/backward against the scalar reference
//! implementation in `common`: same formulas, independent code.

mod common;

use adasin::geometry::{angular_logits_from_raw, AngularLogits, ClassWeights, EmbeddingBatch};
use adasin::losses::{backward, forward, update_t, AdaptiveState, LossConfig, Method};
use common::{oracle_ema, oracle_loss, OracleParams, XorShift};
use ndarray::Array2;

fn params_for(method: Method, t: f64) -> (LossConfig, OracleParams) {
    let m = if method == Method::SphereFace { 2.0 } else { 0.5 };
    let config = LossConfig { method, s: 64.0, m, h: 0.85, alpha: 0.5, t_fixed: 0.2 };
    let oracle = OracleParams { s: 64.0, m, h: 0.85, t, t_fixed: 0.2 };
    (config, oracle)
}

#[test]
fn forward_matches_scalar_oracle_on_random_cosines() {
    let b = 6;
    let n = 5;
    for method in Method::ALL {
        let mut rng = XorShift(0x1234_5678_9abc_def0 ^ method.name().len() as u64);
        for trial in 0..25 {
            let rows: Vec<Vec<f64>> =
                (0..b).map(|_| (0..n).map(|_| rng.range(-0.95, 0.95)).collect()).collect();
            let labels: Vec<usize> = (0..b).map(|_| rng.index(n)).collect();
            let t = rng.range(-0.2, 0.9);
            let (config, oracle_params) = params_for(method, t);

            let cosines = Array2::from_shape_fn((b, n), |(i, j)| rows[i][j]);
            let angles = cosines.mapv(|c| c.clamp(-1.0 + 1e-7, 1.0 - 1e-7).acos());
            let logits = AngularLogits { cosines, angles };
            let state = AdaptiveState { t, k: 1 };
            let result = forward(&config, &state, &logits, &labels).unwrap();

            let (oracle_value, oracle_probs) =
                oracle_loss(&rows, &labels, method.name(), &oracle_params, None);

            let scale = oracle_value.abs().max(1.0);
            assert!(
                (result.loss - oracle_value).abs() / scale < 1e-12,
                "{method} trial {trial}: library {} vs oracle {}",
                result.loss,
                oracle_value
            );
            for i in 0..b {
                assert!(
                    (result.probs[i] - oracle_probs[i]).abs() < 1e-12,
                    "{method} trial {trial} sample {i}: prob {} vs {}",
                    result.probs[i],
                    oracle_probs[i]
                );
                // With s = 64 a dominant target logit can round the
                // probability to exactly 1.0.
                assert!(result.probs[i] > 0.0 && result.probs[i] <= 1.0);
            }
        }
    }
}

/// Build a batch with exact positive angles against random unit class
/// weights, plus the scalar cosine matrix for the oracle.
fn build_instance(
    rng: &mut XorShift,
    thetas: &[f64],
    dim: usize,
    n_classes: usize,
) -> (Array2<f64>, Array2<f64>, Vec<usize>, Vec<Vec<f64>>) {
    // Random unit columns.
    let mut weights = Array2::zeros((dim, n_classes));
    for j in 0..n_classes {
        loop {
            let col: Vec<f64> = (0..dim).map(|_| rng.range(-1.0, 1.0)).collect();
            let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.3 {
                for (k, x) in col.iter().enumerate() {
                    weights[[k, j]] = x / norm;
                }
                break;
            }
        }
    }
    let labels: Vec<usize> = (0..thetas.len()).map(|i| i % n_classes).collect();
    let mut features = Array2::zeros((thetas.len(), dim));
    for (i, (&theta, &y)) in thetas.iter().zip(labels.iter()).enumerate() {
        loop {
            let z: Vec<f64> = (0..dim).map(|_| rng.range(-1.0, 1.0)).collect();
            let dot: f64 = z.iter().enumerate().map(|(k, v)| v * weights[[k, y]]).sum();
            let v: Vec<f64> = z
                .iter()
                .enumerate()
                .map(|(k, val)| val - dot * weights[[k, y]])
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.3 {
                for k in 0..dim {
                    features[[i, k]] = theta.cos() * weights[[k, y]] + theta.sin() * v[k] / norm;
                }
                break;
            }
        }
    }
    let cosines: Vec<Vec<f64>> = (0..thetas.len())
        .map(|i| {
            (0..n_classes)
                .map(|j| (0..dim).map(|k| features[[i, k]] * weights[[k, j]]).sum())
                .collect()
        })
        .collect();
    (features, weights, labels, cosines)
}

fn scalar_cosines(features: &Array2<f64>, weights: &Array2<f64>) -> Vec<Vec<f64>> {
    (0..features.nrows())
        .map(|i| {
            (0..weights.ncols())
                .map(|j| {
                    (0..features.ncols())
                        .map(|k| features[[i, k]] * weights[[k, j]])
                        .sum()
                })
                .collect()
        })
        .collect()
}

#[test]
fn backward_matches_oracle_finite_differences() {
    let thetas = [0.4, 1.5, 0.5, 1.6, 0.45, 1.55];
    let dim = 6;
    let n_classes = 4;
    let t = 0.3;
    let step = 1e-5;

    for method in Method::ALL {
        let mut rng = XorShift(0x9e37_79b9_7f4a_7c15 ^ (method.name().len() as u64) << 3);
        let (features, weights_raw, labels, base_cosines) =
            build_instance(&mut rng, &thetas, dim, n_classes);
        let (config, oracle_params) = params_for(method, t);

        let logits = angular_logits_from_raw(&features.view(), &weights_raw.view());
        let state = AdaptiveState { t, k: 1 };
        let result = forward(&config, &state, &logits, &labels).unwrap();

        // The coefficient each sample would use, computed scalar-side so the
        // probe shares nothing with the library.
        let phi: Vec<f64> = base_cosines
            .iter()
            .zip(labels.iter())
            .map(|(row, &y)| {
                let theta = row[y].clamp(-1.0 + 1e-7, 1.0 - 1e-7).acos();
                t + 0.85 * (theta / 2.0).sin()
            })
            .collect();

        let batch = EmbeddingBatch::new(features.clone(), labels.clone()).unwrap();
        let class_weights = ClassWeights::new(weights_raw.clone()).unwrap();
        let (grad_features, grad_weights) = backward(
            &config,
            &state,
            &logits,
            &labels,
            &batch,
            &class_weights,
            &result,
        )
        .unwrap();

        let oracle_at = |f: &Array2<f64>, w: &Array2<f64>| {
            oracle_loss(&scalar_cosines(f, w), &labels, method.name(), &oracle_params, Some(&phi)).0
        };

        let check = |analytic: f64, fd: f64, what: String| {
            let scaled = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-2);
            assert!(
                scaled < 1e-4,
                "{method} {what}: analytic {analytic} vs fd {fd} (scaled err {scaled:.2e})"
            );
        };

        let mut f = features.clone();
        for i in 0..f.nrows() {
            for k in 0..f.ncols() {
                let original = f[[i, k]];
                f[[i, k]] = original + step;
                let up = oracle_at(&f, &weights_raw);
                f[[i, k]] = original - step;
                let down = oracle_at(&f, &weights_raw);
                f[[i, k]] = original;
                check(
                    grad_features[[i, k]],
                    (up - down) / (2.0 * step),
                    format!("feature [{i},{k}]"),
                );
            }
        }
        let mut w = weights_raw.clone();
        for k in 0..w.nrows() {
            for j in 0..w.ncols() {
                let original = w[[k, j]];
                w[[k, j]] = original + step;
                let up = oracle_at(&features, &w);
                w[[k, j]] = original - step;
                let down = oracle_at(&features, &w);
                w[[k, j]] = original;
                check(
                    grad_weights[[k, j]],
                    (up - down) / (2.0 * step),
                    format!("weight [{k},{j}]"),
                );
            }
        }
    }
}

#[test]
fn ema_matches_scalar_loop() {
    let mut rng = XorShift(7);
    for &alpha in &[0.99, 0.5, 0.01] {
        let batches: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..8).map(|_| rng.range(-1.0, 1.0)).collect())
            .collect();
        let mut state = AdaptiveState::new();
        for batch in &batches {
            state = update_t(&state, batch, alpha).unwrap();
        }
        let expected = oracle_ema(&batches, alpha);
        assert!(
            (state.t - expected).abs() < 1e-14,
            "alpha {alpha}: {} vs {expected}",
            state.t
        );
        assert_eq!(state.k, 30);
    }
}
