//! Property-based invariants: identities that must hold for arbitrary
//! inputs, as opposed to the pinned-value checks elsewhere.

use adasin::eval::verify_from_scores;
use adasin::geometry::{difficulty, normalize_rows, AngularLogits};
use adasin::losses::{
    classify_hard, forward, update_t, AdaptiveState, LossConfig, Method,
};
use ndarray::Array2;
use proptest::prelude::*;

const COS_EPS: f64 = 1e-7;

fn logits_from_rows(rows: &[Vec<f64>]) -> AngularLogits {
    let (b, n) = (rows.len(), rows[0].len());
    let cosines = Array2::from_shape_fn((b, n), |(i, j)| {
        rows[i][j].clamp(-1.0 + COS_EPS, 1.0 - COS_EPS)
    });
    let angles = cosines.mapv(f64::acos);
    AngularLogits { cosines, angles }
}

/// A rectangular batch of cosines with one label per row.
fn labeled_batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..7, 2usize..7).prop_flat_map(|(b, n)| {
        (
            prop::collection::vec(prop::collection::vec(-0.97f64..0.97, n), b),
            prop::collection::vec(0..n, b),
        )
    })
}

fn feature_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..8, 2usize..10).prop_flat_map(|(b, d)| {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), b)
    })
}

proptest! {
    #[test]
    fn normalized_rows_have_unit_norm_and_stay_put(rows in feature_matrix()) {
        for row in &rows {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(norm > 1e-3);
        }
        let matrix = Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j]);
        let once = normalize_rows(&matrix.view()).unwrap();
        for row in once.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12, "row norm {norm}");
        }
        let twice = normalize_rows(&once.view()).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            prop_assert!((a - b).abs() < 1e-12, "renormalizing moved {a} to {b}");
        }
    }

    #[test]
    fn difficulty_is_monotone_and_bounded(a in 0.0..std::f64::consts::PI, b in 0.0..std::f64::consts::PI) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let d_lo = difficulty(lo).unwrap();
        let d_hi = difficulty(hi).unwrap();
        prop_assert!((0.0..=1.0).contains(&d_lo));
        prop_assert!((0.0..=1.0).contains(&d_hi));
        prop_assert!(d_lo <= d_hi, "difficulty({lo}) = {d_lo} > difficulty({hi}) = {d_hi}");
    }

    /// With no margin (multiplier 1 for the multiplicative variant) and
    /// labels at each row's argmax — so no pair is hard — every method is
    /// plain softmax.
    #[test]
    fn zero_margin_on_confident_batches_is_softmax(
        (rows, _) in labeled_batch(),
        t in -0.2f64..0.95,
    ) {
        let mut labels = Vec::with_capacity(rows.len());
        for row in &rows {
            let (argmax, best) = row
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .map(|(j, &v)| (j, v))
                .unwrap();
            let runner_up = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != argmax)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(best - runner_up > 1e-9);
            labels.push(argmax);
        }
        let logits = logits_from_rows(&rows);
        let state = AdaptiveState { t, k: 1 };
        let softmax = forward(
            &LossConfig { method: Method::Softmax, m: 0.0, alpha: 0.5, ..LossConfig::default() },
            &state,
            &logits,
            &labels,
        )
        .unwrap();
        for method in Method::ALL {
            let m = if method == Method::SphereFace { 1.0 } else { 0.0 };
            let config = LossConfig { method, m, alpha: 0.5, ..LossConfig::default() };
            let result = forward(&config, &state, &logits, &labels).unwrap();
            prop_assert!(
                (result.loss - softmax.loss).abs() <= 1e-12,
                "{method}: {} vs softmax {}",
                result.loss,
                softmax.loss
            );
        }
    }

    /// Relabeling the classes (permuting the class axis) changes nothing.
    #[test]
    fn losses_are_invariant_under_class_permutation(
        (rows, labels) in labeled_batch(),
        t in -0.2f64..0.95,
        perm_seed in any::<u64>(),
    ) {
        let n = rows[0].len();
        // Fisher-Yates off a splitmix-style stream.
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let j = (s >> 33) as usize % (i + 1);
            perm.swap(i, j);
        }
        let permuted_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| {
                let mut out = vec![0.0; n];
                for (j, &v) in row.iter().enumerate() {
                    out[perm[j]] = v;
                }
                out
            })
            .collect();
        let permuted_labels: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();

        let logits = logits_from_rows(&rows);
        let permuted = logits_from_rows(&permuted_rows);
        let state = AdaptiveState { t, k: 1 };
        for method in Method::ALL {
            let m = if method == Method::SphereFace { 2.0 } else { 0.4 };
            let config = LossConfig { method, m, alpha: 0.5, ..LossConfig::default() };
            let base = forward(&config, &state, &logits, &labels).unwrap();
            let relabeled = forward(&config, &state, &permuted, &permuted_labels).unwrap();
            prop_assert!(
                (base.loss - relabeled.loss).abs() <= 1e-12,
                "{method}: {} vs {} after permutation",
                base.loss,
                relabeled.loss
            );
        }
    }

    /// The reported loss is exactly the mean negative log of the reported
    /// per-sample probabilities, and every probability lands in (0, 1].
    #[test]
    fn probabilities_reproduce_the_loss(
        (rows, labels) in labeled_batch(),
        t in -0.2f64..0.95,
    ) {
        let logits = logits_from_rows(&rows);
        let state = AdaptiveState { t, k: 1 };
        for method in Method::ALL {
            let m = if method == Method::SphereFace { 2.0 } else { 0.4 };
            let config = LossConfig { method, m, alpha: 0.5, ..LossConfig::default() };
            let result = forward(&config, &state, &logits, &labels).unwrap();
            let mut mean = 0.0;
            for &p in &result.probs {
                prop_assert!(p > 0.0 && p <= 1.0, "{method}: probability {p}");
                mean -= p.ln();
            }
            mean /= result.probs.len() as f64;
            prop_assert!(
                (result.loss - mean).abs() <= 1e-12 * mean.abs().max(1.0),
                "{method}: loss {} vs -mean log prob {}",
                result.loss,
                mean
            );
        }
    }

    /// Iterating the EMA equals its closed expansion over the batch means.
    #[test]
    fn ema_matches_the_closed_expansion(
        alpha in 0.01f64..0.99,
        rs in prop::collection::vec(-1.0f64..1.0, 1..50),
    ) {
        let mut state = AdaptiveState::new();
        for (i, &r) in rs.iter().enumerate() {
            state = update_t(&state, &[r], alpha).unwrap();
            let k = i + 1;
            let mut expansion = 0.0;
            for j in 1..=k {
                expansion += alpha * (1.0 - alpha).powi((k - j) as i32) * rs[j - 1];
            }
            prop_assert!(
                (state.t - expansion).abs() <= 1e-12,
                "k={k}: iterated {} vs expansion {expansion}",
                state.t
            );
        }
    }

    /// Growing the margin can only grow the hard set.
    #[test]
    fn harder_margins_only_add_hard_pairs(
        (rows, labels) in labeled_batch(),
        m_a in 0.0f64..1.5,
        m_b in 0.0f64..1.5,
    ) {
        let (m_small, m_large) = if m_a <= m_b { (m_a, m_b) } else { (m_b, m_a) };
        let logits = logits_from_rows(&rows);
        let (small_flags, small_pos) = classify_hard(&logits, &labels, m_small).unwrap();
        let (large_flags, large_pos) = classify_hard(&logits, &labels, m_large).unwrap();
        for (i, (&s, &l)) in small_flags.iter().zip(large_flags.iter()).enumerate() {
            prop_assert!(!s || l, "pair {i} hard at margin {m_small} but easy at {m_large}");
        }
        for (s, l) in small_pos.iter().zip(&large_pos) {
            prop_assert!(!s || *l);
        }
    }
}

// ---------------------------------------------------------------------------
// Verification-protocol invariants
// ---------------------------------------------------------------------------

/// Scores with at least five negatives and one positive, pairwise separated
/// enough that affine transforms cannot collapse two of them.
fn score_set() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((-1.0f64..1.0, any::<bool>()), 12..80).prop_filter(
        "needs >=5 negatives, >=1 positive, distinct scores",
        |scores| {
            let n_neg = scores.iter().filter(|(_, same)| !*same).count();
            let n_pos = scores.len() - n_neg;
            if n_neg < 5 || n_pos < 1 {
                return false;
            }
            let mut values: Vec<f64> = scores.iter().map(|(s, _)| *s).collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            values.windows(2).all(|w| w[1] - w[0] > 1e-9)
        },
    )
}

proptest! {
    /// TAR is non-decreasing in the FAR budget, and the achieved FAR never
    /// exceeds it.
    #[test]
    fn tar_grows_with_the_far_budget(scores in score_set()) {
        let n_neg = scores.iter().filter(|(_, same)| !*same).count();
        let levels = [1.0 / n_neg as f64, 0.3, 0.7, 1.0];
        let report = verify_from_scores(&scores, &levels).unwrap();
        for (entry, &level) in report.entries.iter().zip(&levels) {
            prop_assert!(
                entry.far_actual <= level + 1e-15,
                "achieved FAR {} exceeds budget {level}",
                entry.far_actual
            );
        }
        for pair in report.entries.windows(2) {
            prop_assert!(
                pair[0].tar <= pair[1].tar,
                "TAR fell from {} to {} as the budget grew",
                pair[0].tar,
                pair[1].tar
            );
            prop_assert!(pair[0].threshold >= pair[1].threshold);
        }
    }

    /// Every reported rate is invariant under a strictly increasing affine
    /// transform of the scores (the ranking is all that matters). The scale
    /// is a power of two so the transform is exact in floating point.
    #[test]
    fn verification_depends_only_on_the_ranking(
        scores in score_set(),
        scale_exp in -2i32..3,
        shift in -2i32..3,
    ) {
        let n_neg = scores.iter().filter(|(_, same)| !*same).count();
        let levels = [1.0 / n_neg as f64, 0.5, 1.0];
        let base = verify_from_scores(&scores, &levels).unwrap();
        let a = 2.0f64.powi(scale_exp);
        let transformed: Vec<(f64, bool)> =
            scores.iter().map(|&(s, same)| (a * s + shift as f64, same)).collect();
        let mapped = verify_from_scores(&transformed, &levels).unwrap();
        prop_assert_eq!(base.n_positive, mapped.n_positive);
        prop_assert_eq!(base.n_negative, mapped.n_negative);
        prop_assert_eq!(base.best_accuracy, mapped.best_accuracy);
        for (b, m) in base.entries.iter().zip(&mapped.entries) {
            prop_assert_eq!(b.tar, m.tar, "TAR changed under an order-preserving transform");
            prop_assert_eq!(b.far_actual, m.far_actual);
        }
    }
}
