//! Evaluation tooling: pairwise verification (TAR at fixed FAR levels plus a
//! best-accuracy sweep), compactness summaries over training logs, and a
//! finite-difference harness that checks the analytical gradients of every
//! loss in the family.
//!
//! The gradient checker differences the *assembled* loss while holding the
//! per-sample modulation coefficients fixed at their base values, matching
//! the definition of those coefficients as constants during
//! differentiation. Instances whose perturbation window straddles a branch
//! flip or a cosine clamp are detected and resampled, because a central
//! difference across a kink measures nothing.

use crate::data::PairList;
use crate::geometry::{
    angular_logits, angular_logits_from_raw, difficulty, ClassWeights, EmbeddingBatch,
    GeometryError, COS_EPS,
};
use crate::losses::{
    backward, classify_hard, forward, forward_with_phi, modulation_coefficient, AdaptiveState,
    LossConfig, LossError, Method,
};
use crate::textio::derive_seed;
use crate::trainer::TrainLogRecord;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("not enough pairs: {0}")]
    InsufficientPairs(String),
    #[error("empty training log")]
    EmptyLog,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("could not sample a clean gradcheck instance: {0}")]
    ResamplingFailed(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// One operating point: the requested FAR level, the threshold that realizes
/// it, the achieved FAR at that threshold, and the TAR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FarEntry {
    pub level: f64,
    pub threshold: f64,
    pub far_actual: f64,
    pub tar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub n_positive: usize,
    pub n_negative: usize,
    pub entries: Vec<FarEntry>,
    /// Best (TP + TN) / total over every candidate threshold.
    pub best_accuracy: f64,
    pub best_threshold: f64,
}

/// Cosine scores for each pair, tagged with the ground truth.
pub fn pair_scores(features: &Array2<f64>, pairs: &PairList) -> Result<Vec<(f64, bool)>, EvalError> {
    let n = features.nrows();
    pairs
        .pairs
        .iter()
        .map(|p| {
            if p.a >= n || p.b >= n {
                return Err(EvalError::Shape(format!(
                    "pair ({}, {}) indexes a dataset of {n}",
                    p.a, p.b
                )));
            }
            let score = features
                .row(p.a)
                .iter()
                .zip(features.row(p.b).iter())
                .map(|(x, y)| x * y)
                .sum::<f64>();
            Ok((score, p.same))
        })
        .collect()
}

/// Evaluate TAR at each requested FAR level over precomputed scores, with an
/// exhaustive accuracy sweep. The accept rule is `score >= threshold`; at
/// each level the threshold is the smallest observed score whose FAR does
/// not exceed the level, which maximizes TAR among observed thresholds.
pub fn verify_from_scores(
    scores: &[(f64, bool)],
    far_levels: &[f64],
) -> Result<VerificationReport, EvalError> {
    let mut pos: Vec<f64> = scores.iter().filter(|(_, same)| *same).map(|(s, _)| *s).collect();
    let mut neg: Vec<f64> = scores.iter().filter(|(_, same)| !*same).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::InsufficientPairs(format!(
            "{} positive and {} negative pairs; need both",
            pos.len(),
            neg.len()
        )));
    }
    for &(score, _) in scores {
        if !score.is_finite() {
            return Err(EvalError::Shape(format!("non-finite pair score {score}")));
        }
    }
    pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
    neg.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // Count of elements >= x in an ascending-sorted list.
    let count_geq = |sorted: &[f64], x: f64| sorted.len() - sorted.partition_point(|&v| v < x);

    let mut all: Vec<f64> = pos.iter().chain(neg.iter()).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();

    let mut entries = Vec::with_capacity(far_levels.len());
    for &level in far_levels {
        if !(0.0..=1.0).contains(&level) || !level.is_finite() {
            return Err(EvalError::InsufficientPairs(format!(
                "FAR level {level} outside [0, 1]"
            )));
        }
        let floor = 1.0 / neg.len() as f64;
        if level < floor {
            return Err(EvalError::InsufficientPairs(format!(
                "FAR level {level:e} is below 1/{} = {floor:e}; add negative pairs",
                neg.len()
            )));
        }
        // FAR is non-increasing in the threshold, so scan ascending and take
        // the first score that satisfies the budget.
        let threshold = *all
            .iter()
            .find(|&&tau| count_geq(&neg, tau) as f64 / neg.len() as f64 <= level)
            .expect("the maximum observed score always satisfies any level >= 1/n_neg");
        let far_actual = count_geq(&neg, threshold) as f64 / neg.len() as f64;
        let tar = count_geq(&pos, threshold) as f64 / pos.len() as f64;
        entries.push(FarEntry { level, threshold, far_actual, tar });
    }

    // Accuracy sweep: every observed score as threshold, plus one rejecting
    // everything.
    let total = (pos.len() + neg.len()) as f64;
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut best_threshold = f64::INFINITY;
    let mut candidates = all.clone();
    candidates.push(all.last().unwrap() + 1.0);
    for &tau in &candidates {
        let tp = count_geq(&pos, tau);
        let tn = neg.len() - count_geq(&neg, tau);
        let accuracy = (tp + tn) as f64 / total;
        if accuracy > best_accuracy {
            best_accuracy = accuracy;
            best_threshold = tau;
        }
    }

    Ok(VerificationReport {
        n_positive: pos.len(),
        n_negative: neg.len(),
        entries,
        best_accuracy,
        best_threshold,
    })
}

/// Score `pairs` by embedding cosine and evaluate the protocol. `features`
/// rows are expected to be unit norm (they are embeddings).
pub fn verify(
    features: &Array2<f64>,
    pairs: &PairList,
    far_levels: &[f64],
) -> Result<VerificationReport, EvalError> {
    let scores = pair_scores(features, pairs)?;
    verify_from_scores(&scores, far_levels)
}

// ---------------------------------------------------------------------------
// Compactness
// ---------------------------------------------------------------------------

/// Head/tail comparison of the compactness diagnostics in a training log.
/// Head and tail are each the first/last fifth of the records (at least one).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompactnessSummary {
    pub n_records: usize,
    pub head_difficulty: f64,
    pub tail_difficulty: f64,
    pub head_hard_fraction: f64,
    pub tail_hard_fraction: f64,
    pub head_mean_pos_cos: f64,
    pub tail_mean_pos_cos: f64,
}

pub fn compactness_from_log(records: &[TrainLogRecord]) -> Result<CompactnessSummary, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let window = (records.len() / 5).max(1);
    let mean_over = |slice: &[TrainLogRecord], f: fn(&TrainLogRecord) -> f64| {
        slice.iter().map(f).sum::<f64>() / slice.len() as f64
    };
    let head = &records[..window];
    let tail = &records[records.len() - window..];
    Ok(CompactnessSummary {
        n_records: records.len(),
        head_difficulty: mean_over(head, |r| r.mean_difficulty),
        tail_difficulty: mean_over(tail, |r| r.mean_difficulty),
        head_hard_fraction: mean_over(head, |r| r.hard_fraction),
        tail_hard_fraction: mean_over(tail, |r| r.hard_fraction),
        head_mean_pos_cos: mean_over(head, |r| r.mean_pos_cos),
        tail_mean_pos_cos: mean_over(tail, |r| r.mean_pos_cos),
    })
}

/// Mean `sin(theta_pos / 2)` of a batch against given class weights.
pub fn mean_difficulty(batch: &EmbeddingBatch, weights: &ClassWeights) -> Result<f64, EvalError> {
    let logits = angular_logits(batch, weights)?;
    let mut sum = 0.0;
    for (i, &y) in batch.labels().iter().enumerate() {
        sum += difficulty(logits.angles[[i, y]])?;
    }
    Ok(sum / batch.len() as f64)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// How the positive angles of a gradcheck batch are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratum {
    /// Positive angles in (0.25, 0.6): the margined positive usually wins.
    Easy,
    /// Positive angles in (1.2, 1.9): hard branches engage.
    Hard,
    /// Alternating easy/hard draws.
    Mixed,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Easy, Stratum::Hard, Stratum::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Easy => "easy",
            Stratum::Hard => "hard",
            Stratum::Mixed => "mixed",
        }
    }
}

/// Dimensions, tolerances, and shared hyperparameters of a gradcheck run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckSpec {
    pub batch_size: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub seed: u64,
    /// Central-difference step.
    pub fd_step: f64,
    /// Bound on `|analytic - fd| / max(|analytic|, |fd|, 1e-2)`: relative
    /// error with an absolute floor of `1e-2 * tolerance`.
    pub tolerance: f64,
    /// Curriculum value in effect during the check.
    pub t: f64,
    pub s: f64,
    pub m: f64,
    /// Integer multiplier used when checking the multiplicative-margin loss.
    pub sphere_m: f64,
    pub h: f64,
    pub t_fixed: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            batch_size: 8,
            n_classes: 5,
            dim: 8,
            seed: 0,
            fd_step: 1e-5,
            tolerance: 1e-4,
            t: 0.3,
            s: 64.0,
            m: 0.5,
            sphere_m: 2.0,
            h: 0.85,
            t_fixed: 0.2,
        }
    }
}

impl GradcheckSpec {
    pub fn loss_config(&self, method: Method) -> LossConfig {
        LossConfig {
            method,
            s: self.s,
            m: if method == Method::SphereFace { self.sphere_m } else { self.m },
            h: self.h,
            // Unused by the check itself (the state is pinned), but must
            // validate.
            alpha: 0.5,
            t_fixed: self.t_fixed,
        }
    }
}

/// Result of checking one (method, stratum) block: every feature and weight
/// entry of one clean instance, differenced centrally.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub method: Method,
    pub stratum: Stratum,
    pub n_entries: usize,
    pub max_scaled_err: f64,
    pub mean_scaled_err: f64,
    pub n_failures: usize,
    /// Instances discarded before a clean one was found.
    pub n_resampled: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub fd_step: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.n_failures == 0)
    }

    pub fn worst_block(&self) -> Option<&BlockReport> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_scaled_err.partial_cmp(&b.max_scaled_err).unwrap())
    }
}

/// True when a finite-difference step around this instance could cross a
/// non-differentiable point: a cosine near the clamp, a margin argument near
/// the ends of `[0, pi]`, or a negative cosine near its hard/easy threshold.
fn is_degenerate_for_fd(
    config: &LossConfig,
    t: f64,
    logits: &crate::geometry::AngularLogits,
    labels: &[usize],
) -> Result<bool, EvalError> {
    const CLAMP_WINDOW: f64 = 5e-3;
    const ARG_WINDOW: f64 = 1e-2;
    const BRANCH_WINDOW: f64 = 1e-3;
    let (b, n) = (logits.batch_size(), logits.n_classes());
    for i in 0..b {
        for j in 0..n {
            if logits.cosines[[i, j]].abs() >= 1.0 - COS_EPS - CLAMP_WINDOW {
                return Ok(true);
            }
        }
    }
    let branchy = config.method.modulates_margin() || config.method.reweights_hard_negatives();
    for (i, &y) in labels.iter().enumerate() {
        let theta = logits.angles[[i, y]];
        match config.method {
            Method::SphereFace => {
                let arg = config.m * theta;
                if arg < ARG_WINDOW || (arg - PI).abs() < ARG_WINDOW {
                    return Ok(true);
                }
            }
            Method::Softmax | Method::CosFace => {}
            _ => {
                let mut margins = vec![config.m];
                if config.method.modulates_margin() {
                    margins.push(modulation_coefficient(t, theta, config.h)? * config.m);
                }
                for margin in margins {
                    let arg = theta + margin;
                    if arg < ARG_WINDOW || (arg - PI).abs() < ARG_WINDOW {
                        return Ok(true);
                    }
                }
            }
        }
        if branchy {
            let threshold = (theta + config.m).clamp(0.0, PI).cos();
            for j in 0..n {
                if j != y && (threshold - logits.cosines[[i, j]]).abs() < BRANCH_WINDOW {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

fn draw_theta(stratum: Stratum, index: usize, rng: &mut impl Rng) -> f64 {
    let easy = |rng: &mut dyn rand::RngCore| 0.25 + (0.6 - 0.25) * rng.random::<f64>();
    let hard = |rng: &mut dyn rand::RngCore| 1.2 + (1.9 - 1.2) * rng.random::<f64>();
    match stratum {
        Stratum::Easy => easy(rng),
        Stratum::Hard => hard(rng),
        Stratum::Mixed => {
            if index % 2 == 0 {
                easy(rng)
            } else {
                hard(rng)
            }
        }
    }
}

struct Instance {
    features: Array2<f64>,
    weights: ClassWeights,
    labels: Vec<usize>,
    n_resampled: usize,
}

/// Draw an instance whose positive angles follow the stratum, rejecting
/// draws that are degenerate for differencing, and (for methods with branch
/// behavior) draws that fail the stratum's hardness requirement.
fn sample_instance(
    spec: &GradcheckSpec,
    config: &LossConfig,
    stratum: Stratum,
    seed: u64,
) -> Result<Instance, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const MAX_ATTEMPTS: usize = 200;
    for attempt in 0..MAX_ATTEMPTS {
        let raw = Array2::from_shape_fn((spec.dim, spec.n_classes), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let weights = ClassWeights::new(raw)?;
        let labels: Vec<usize> = (0..spec.batch_size).map(|i| i % spec.n_classes).collect();

        let mut features = Array2::zeros((spec.batch_size, spec.dim));
        for (i, &y) in labels.iter().enumerate() {
            let theta = draw_theta(stratum, i, &mut rng);
            // Unit vector at exactly `theta` from the class direction:
            // cos(theta) * w_y + sin(theta) * v, with v a unit vector
            // orthogonal to w_y.
            let w = weights.matrix().column(y);
            let z: Vec<f64> = (0..spec.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let dot = z.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>();
            let mut v: Vec<f64> = z.iter().zip(w.iter()).map(|(a, b)| a - dot * b).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            for x in &mut v {
                *x /= norm;
            }
            for j in 0..spec.dim {
                features[[i, j]] = theta.cos() * w[j] + theta.sin() * v[j];
            }
        }

        let logits = angular_logits_from_raw(&features.view(), &weights.matrix().view());
        if is_degenerate_for_fd(config, spec.t, &logits, &labels)? {
            continue;
        }
        if config.method.modulates_margin() || config.method.reweights_hard_negatives() {
            let (_, pos_hard) = classify_hard(&logits, &labels, config.m)?;
            let ok = match stratum {
                Stratum::Easy => pos_hard.iter().all(|&h| !h),
                Stratum::Hard => pos_hard.iter().all(|&h| h),
                Stratum::Mixed => true,
            };
            if !ok {
                continue;
            }
        }
        return Ok(Instance { features, weights, labels, n_resampled: attempt });
    }
    Err(EvalError::ResamplingFailed(format!(
        "{MAX_ATTEMPTS} attempts for {} / {}",
        config.method,
        stratum.name()
    )))
}

/// Check one (method, stratum) block: compare the analytical gradient of
/// every feature and weight entry against a central difference of the loss
/// with the modulation coefficients frozen.
pub fn gradcheck_block(
    spec: &GradcheckSpec,
    method: Method,
    stratum: Stratum,
) -> Result<BlockReport, EvalError> {
    let config = spec.loss_config(method);
    config.validate()?;
    let seed = derive_seed(spec.seed, &format!("gradcheck-{}-{}", method, stratum.name()));
    let instance = sample_instance(spec, &config, stratum, seed)?;
    let state = AdaptiveState { t: spec.t, k: 1 };

    let base_logits =
        angular_logits_from_raw(&instance.features.view(), &instance.weights.matrix().view());
    let base = forward(&config, &state, &base_logits, &instance.labels)?;
    let phi = base.per_sample_phi.clone();

    let batch = EmbeddingBatch::new(instance.features.clone(), instance.labels.clone())?;
    let (grad_features, grad_weights) = backward(
        &config,
        &state,
        &base_logits,
        &instance.labels,
        &batch,
        &instance.weights,
        &base,
    )?;

    let loss_at = |features: &Array2<f64>, weights: &Array2<f64>| -> Result<f64, EvalError> {
        let logits = angular_logits_from_raw(&features.view(), &weights.view());
        Ok(forward_with_phi(&config, &state, &logits, &instance.labels, &phi)?.loss)
    };

    let mut max_err: f64 = 0.0;
    let mut err_sum = 0.0;
    let mut n_entries = 0usize;
    let mut n_failures = 0usize;
    let mut check = |analytic: f64, fd: f64| {
        let scaled = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-2);
        max_err = max_err.max(scaled);
        err_sum += scaled;
        n_entries += 1;
        if scaled > spec.tolerance {
            n_failures += 1;
        }
    };

    let mut features = instance.features.clone();
    let weights_matrix = instance.weights.matrix().clone();
    for i in 0..features.nrows() {
        for j in 0..features.ncols() {
            let original = features[[i, j]];
            features[[i, j]] = original + spec.fd_step;
            let up = loss_at(&features, &weights_matrix)?;
            features[[i, j]] = original - spec.fd_step;
            let down = loss_at(&features, &weights_matrix)?;
            features[[i, j]] = original;
            check(grad_features[[i, j]], (up - down) / (2.0 * spec.fd_step));
        }
    }
    let mut weights_matrix = weights_matrix;
    for i in 0..weights_matrix.nrows() {
        for j in 0..weights_matrix.ncols() {
            let original = weights_matrix[[i, j]];
            weights_matrix[[i, j]] = original + spec.fd_step;
            let up = loss_at(&instance.features, &weights_matrix)?;
            weights_matrix[[i, j]] = original - spec.fd_step;
            let down = loss_at(&instance.features, &weights_matrix)?;
            weights_matrix[[i, j]] = original;
            check(grad_weights[[i, j]], (up - down) / (2.0 * spec.fd_step));
        }
    }

    Ok(BlockReport {
        method,
        stratum,
        n_entries,
        max_scaled_err: max_err,
        mean_scaled_err: err_sum / n_entries as f64,
        n_failures,
        n_resampled: instance.n_resampled,
    })
}

/// Check every method over every stratum.
pub fn gradcheck_all(spec: &GradcheckSpec) -> Result<GradcheckReport, EvalError> {
    let mut blocks = Vec::with_capacity(Method::ALL.len() * Stratum::ALL.len());
    for method in Method::ALL {
        for stratum in Stratum::ALL {
            blocks.push(gradcheck_block(spec, method, stratum)?);
        }
    }
    Ok(GradcheckReport { fd_step: spec.fd_step, tolerance: spec.tolerance, blocks })
}
