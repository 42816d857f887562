//! The angular-margin loss family and its exact gradients.
//!
//! Every method assembles per-sample logits from the same ingredients: a
//! target-class term `T` built from the positive angle, and negative-class
//! terms `N_j` built from the other cosines. The assembled logits are scaled
//! by `s` and pushed through a softmax cross-entropy. Methods differ only in
//! the `T`/`N` forms and in whether they treat hard pairs (a negative cosine
//! that beats the margined positive) specially.
//!
//! The AdaSin variants modulate both sides by a per-sample coefficient
//! `phi = t + h * sin(theta_pos / 2)`, where `t` is an exponential moving
//! average of batch positive cosines ([`AdaptiveState`]) and the sine term
//! measures how far the sample sits from its class center. `phi` is treated
//! as a constant during differentiation; the analytical gradients below and
//! the finite-difference harness in [`crate::eval`] both respect that.

use crate::geometry::{difficulty, AngularLogits, ClassWeights, EmbeddingBatch};
use ndarray::Array2;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite logit for sample {sample}, class {class}")]
    NonFiniteLogit { sample: usize, class: usize },
    #[error("loss result does not match inputs: {0}")]
    StateMismatch(String),
    #[error("{0}")]
    DomainError(String),
    #[error("no boundary cosine in [-1, 1]: {0}")]
    NoRealRoot(String),
    #[error("empty angle history")]
    EmptyHistory,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// The loss methods. `AdaSinT` applies the modulation only to the positive
/// margin, `AdaSinN` only to hard negatives; `AdaSin` applies both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Softmax,
    SphereFace,
    CosFace,
    ArcFace,
    MvArcSoftmax,
    CurricularFace,
    AdaSin,
    AdaSinT,
    AdaSinN,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Softmax,
        Method::SphereFace,
        Method::CosFace,
        Method::ArcFace,
        Method::MvArcSoftmax,
        Method::CurricularFace,
        Method::AdaSin,
        Method::AdaSinT,
        Method::AdaSinN,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Softmax => "softmax",
            Method::SphereFace => "sphereface",
            Method::CosFace => "cosface",
            Method::ArcFace => "arcface",
            Method::MvArcSoftmax => "mv-arc-softmax",
            Method::CurricularFace => "curricular",
            Method::AdaSin => "adasin",
            Method::AdaSinT => "adasin-t",
            Method::AdaSinN => "adasin-n",
        }
    }

    /// Methods whose positive margin is modulated per sample.
    pub fn modulates_margin(self) -> bool {
        matches!(self, Method::AdaSin | Method::AdaSinT)
    }

    /// Methods whose hard negatives are modulated per sample.
    pub fn modulates_negatives(self) -> bool {
        matches!(self, Method::AdaSin | Method::AdaSinN)
    }

    /// Methods that compute the per-sample modulation coefficient at all.
    pub fn uses_modulation(self) -> bool {
        matches!(self, Method::AdaSin | Method::AdaSinT | Method::AdaSinN)
    }

    /// Methods that give hard negative pairs a different logit than easy ones.
    pub fn reweights_hard_negatives(self) -> bool {
        matches!(
            self,
            Method::MvArcSoftmax | Method::CurricularFace | Method::AdaSin | Method::AdaSinN
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "softmax" => Ok(Method::Softmax),
            "sphereface" => Ok(Method::SphereFace),
            "cosface" => Ok(Method::CosFace),
            "arcface" => Ok(Method::ArcFace),
            "mv-arc-softmax" | "mvarcsoftmax" | "mv-softmax" => Ok(Method::MvArcSoftmax),
            "curricular" | "curricularface" => Ok(Method::CurricularFace),
            // "adasin-d" is the dual variant, i.e. the full method.
            "adasin" | "adasin-d" => Ok(Method::AdaSin),
            "adasin-t" => Ok(Method::AdaSinT),
            "adasin-n" => Ok(Method::AdaSinN),
            other => Err(LossError::UnknownMethod(other.to_string())),
        }
    }
}

/// Hyperparameters shared across the family. `m` is the additive angular
/// margin for every method except SphereFace, where it is an integer angle
/// multiplier; `t_fixed` is only read by MvArcSoftmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub method: Method,
    /// Logit scale.
    pub s: f64,
    /// Angular margin (SphereFace: integer multiplier).
    pub m: f64,
    /// Weight of the sine difficulty term inside the modulation coefficient.
    pub h: f64,
    /// EMA weight on the current batch mean when updating `t`.
    pub alpha: f64,
    /// Fixed hard-negative emphasis for MvArcSoftmax.
    pub t_fixed: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            method: Method::AdaSin,
            s: 64.0,
            m: 0.5,
            h: 0.85,
            alpha: 0.99,
            t_fixed: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.s.is_finite() && self.s > 0.0) {
            return Err(LossError::InvalidConfig(format!("s must be positive, got {}", self.s)));
        }
        if !(self.m.is_finite() && self.m >= 0.0) {
            return Err(LossError::InvalidConfig(format!(
                "m must be non-negative, got {}",
                self.m
            )));
        }
        if self.method == Method::SphereFace {
            let rounded = self.m.round();
            if self.m < 1.0 || (self.m - rounded).abs() > 1e-9 {
                return Err(LossError::InvalidConfig(format!(
                    "sphereface needs an integer multiplier m >= 1, got {}",
                    self.m
                )));
            }
        }
        if !(self.h.is_finite() && self.h > 0.0 && self.h <= 1.0) {
            return Err(LossError::InvalidConfig(format!(
                "h must lie in (0, 1], got {}",
                self.h
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(LossError::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !self.t_fixed.is_finite() || self.t_fixed < 0.0 {
            return Err(LossError::InvalidConfig(format!(
                "t_fixed must be finite and non-negative, got {}",
                self.t_fixed
            )));
        }
        Ok(())
    }
}

/// The adaptive curriculum scalar: an exponential moving average of batch
/// mean positive cosines, starting at 0 before any batch has been seen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveState {
    /// Current EMA value.
    pub t: f64,
    /// Number of batches folded in so far.
    pub k: u64,
}

impl AdaptiveState {
    pub fn new() -> Self {
        Self { t: 0.0, k: 0 }
    }
}

impl Default for AdaptiveState {
    fn default() -> Self {
        Self::new()
    }
}

/// Fold one batch of positive cosines into the EMA:
/// `t_new = alpha * mean(cosines) + (1 - alpha) * t_old`.
///
/// Note the convention: `alpha` weights the *current* batch mean, so the
/// default `alpha = 0.99` makes `t` track the latest batch almost exactly.
/// Pass a small `alpha` (or use [`update_t_weight_on_history`]) for the
/// smoother convention that weights history instead.
pub fn update_t(
    state: &AdaptiveState,
    positive_cosines: &[f64],
    alpha: f64,
) -> Result<AdaptiveState, LossError> {
    if positive_cosines.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mean = positive_cosines.iter().sum::<f64>() / positive_cosines.len() as f64;
    Ok(AdaptiveState {
        t: alpha * mean + (1.0 - alpha) * state.t,
        k: state.k + 1,
    })
}

/// The reversed EMA convention: `alpha` weights the history,
/// `t_new = (1 - alpha) * mean + alpha * t_old`.
pub fn update_t_weight_on_history(
    state: &AdaptiveState,
    positive_cosines: &[f64],
    alpha: f64,
) -> Result<AdaptiveState, LossError> {
    update_t(state, positive_cosines, 1.0 - alpha)
}

/// The per-sample modulation coefficient `t + h * sin(theta_pos / 2)`.
/// Below 1 it softens the margin and hard negatives; above 1 it amplifies
/// them. It crosses 1 as training tightens clusters and `t` grows.
pub fn modulation_coefficient(t: f64, theta_pos: f64, h: f64) -> Result<f64, LossError> {
    let d = difficulty(theta_pos).map_err(|e| LossError::DomainError(e.to_string()))?;
    Ok(t + h * d)
}

/// Classify every (sample, negative class) pair as hard or easy.
///
/// Pair `(i, j)` is hard when the margined positive cannot beat class j:
/// `cos(theta_pos + m) < cos(theta_j)`. Ties count as easy. Returns the
/// `B x n` pair flags and the per-sample positive flag, which is true when
/// any negative beats the margined positive (equivalently: when the best
/// negative does).
pub fn classify_hard(
    logits: &AngularLogits,
    labels: &[usize],
    m: f64,
) -> Result<(Array2<bool>, Vec<bool>), LossError> {
    let (b, n) = (logits.batch_size(), logits.n_classes());
    check_labels(labels, b, n)?;
    let mut flags = Array2::from_elem((b, n), false);
    let mut pos_hard = vec![false; b];
    for (i, &y) in labels.iter().enumerate() {
        let threshold = ((logits.angles[[i, y]] + m).clamp(0.0, PI)).cos();
        for j in 0..n {
            if j == y {
                continue;
            }
            if threshold < logits.cosines[[i, j]] {
                flags[[i, j]] = true;
                pos_hard[i] = true;
            }
        }
    }
    Ok((flags, pos_hard))
}

/// Everything `forward` produces. The gradient fields stay `None` until
/// [`backward`] fills them in; `forward` alone never sees the feature or
/// weight matrices it would need.
#[derive(Debug, Clone)]
pub struct LossResult {
    /// Mean negative log-probability of the true classes.
    pub loss: f64,
    /// Per-sample probability of the true class, in (0, 1] (a dominant
    /// target logit can round to exactly 1).
    pub probs: Vec<f64>,
    /// d loss / d features (B x d), populated by `backward`.
    pub grad_features: Option<Array2<f64>>,
    /// d loss / d weights (d x n), populated by `backward`.
    pub grad_weights: Option<Array2<f64>>,
    /// Hard flags per (sample, negative class) pair.
    pub hard_flags: Array2<bool>,
    /// Per-sample positive-branch hardness.
    pub pos_hard: Vec<bool>,
    /// Per-sample modulation diagnostic. For the AdaSin variants this is the
    /// coefficient `t + h * sin(theta_pos / 2)` actually used in assembly.
    /// For CurricularFace it is the mean of `t + cos(theta_j)` over the
    /// sample's hard pairs, for MvArcSoftmax `t_fixed + 1` when any pair is
    /// hard; NaN when the method applies no modulation to the sample.
    pub per_sample_phi: Vec<f64>,
    /// `sin(theta_pos / 2)` per sample.
    pub per_sample_difficulty: Vec<f64>,
}

/// Assemble the method's logits and evaluate the scaled softmax
/// cross-entropy, together with per-sample diagnostics.
pub fn forward(
    config: &LossConfig,
    state: &AdaptiveState,
    logits: &AngularLogits,
    labels: &[usize],
) -> Result<LossResult, LossError> {
    forward_impl(config, state, logits, labels, None)
}

/// [`forward`] with the per-sample modulation coefficients pinned to given
/// values instead of recomputed from the inputs. Finite-difference probes
/// need this: the coefficient is defined to be a constant during
/// differentiation, so the function being differenced must hold it fixed.
pub fn forward_with_phi(
    config: &LossConfig,
    state: &AdaptiveState,
    logits: &AngularLogits,
    labels: &[usize],
    phi: &[f64],
) -> Result<LossResult, LossError> {
    forward_impl(config, state, logits, labels, Some(phi))
}

fn check_labels(labels: &[usize], b: usize, n: usize) -> Result<(), LossError> {
    if labels.len() != b {
        return Err(LossError::ShapeMismatch(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(LossError::ShapeMismatch(format!(
            "label {bad} out of range for {n} classes"
        )));
    }
    Ok(())
}

/// `cos(theta + margin)` with the argument clamped into `[0, pi]`.
fn cos_plus(theta: f64, margin: f64) -> f64 {
    (theta + margin).clamp(0.0, PI).cos()
}

/// Derivative of `cos(clamp(theta + margin))` with respect to `cos(theta)`:
/// `sin(theta + margin) / sin(theta)` in the interior, 0 where the clamp is
/// active. `sin(theta)` is bounded away from 0 by the cosine clamp.
fn arc_chain(theta: f64, margin: f64) -> f64 {
    let arg = theta + margin;
    if arg <= 0.0 || arg >= PI {
        0.0
    } else {
        arg.sin() / theta.sin()
    }
}

/// Unscaled target-class logit.
fn positive_value(config: &LossConfig, theta: f64, cos: f64, phi: f64, pos_hard: bool) -> f64 {
    match config.method {
        Method::Softmax => cos,
        Method::CosFace => cos - config.m,
        Method::SphereFace => (config.m * theta).clamp(0.0, PI).cos(),
        Method::ArcFace | Method::MvArcSoftmax | Method::CurricularFace | Method::AdaSinN => {
            cos_plus(theta, config.m)
        }
        Method::AdaSin | Method::AdaSinT => {
            if pos_hard {
                cos_plus(theta, phi * config.m)
            } else {
                cos_plus(theta, config.m)
            }
        }
    }
}

/// Derivative of the unscaled target logit with respect to `cos(theta)`.
fn positive_chain(config: &LossConfig, theta: f64, phi: f64, pos_hard: bool) -> f64 {
    match config.method {
        Method::Softmax | Method::CosFace => 1.0,
        Method::SphereFace => {
            let arg = config.m * theta;
            if arg <= 0.0 || arg >= PI {
                0.0
            } else {
                config.m * arg.sin() / theta.sin()
            }
        }
        Method::ArcFace | Method::MvArcSoftmax | Method::CurricularFace | Method::AdaSinN => {
            arc_chain(theta, config.m)
        }
        Method::AdaSin | Method::AdaSinT => {
            if pos_hard {
                arc_chain(theta, phi * config.m)
            } else {
                arc_chain(theta, config.m)
            }
        }
    }
}

/// Unscaled negative-class logit.
fn negative_value(config: &LossConfig, t: f64, cos: f64, phi: f64, hard: bool) -> f64 {
    if !hard {
        return cos;
    }
    match config.method {
        Method::MvArcSoftmax => (config.t_fixed + 1.0) * cos + config.t_fixed,
        Method::CurricularFace => (t + cos) * cos,
        Method::AdaSin | Method::AdaSinN => phi * cos,
        _ => cos,
    }
}

/// Derivative of the unscaled negative logit with respect to `cos(theta_j)`.
fn negative_chain(config: &LossConfig, t: f64, cos: f64, phi: f64, hard: bool) -> f64 {
    if !hard {
        return 1.0;
    }
    match config.method {
        Method::MvArcSoftmax => config.t_fixed + 1.0,
        Method::CurricularFace => t + 2.0 * cos,
        Method::AdaSin | Method::AdaSinN => phi,
        _ => 1.0,
    }
}

struct Assembly {
    /// Scaled logits, B x n.
    scaled: Array2<f64>,
    hard_flags: Array2<bool>,
    pos_hard: Vec<bool>,
    /// Coefficients used in assembly (NaN outside the AdaSin variants).
    phi: Vec<f64>,
}

fn assemble(
    config: &LossConfig,
    state: &AdaptiveState,
    logits: &AngularLogits,
    labels: &[usize],
    phi_override: Option<&[f64]>,
) -> Result<Assembly, LossError> {
    config.validate()?;
    let (b, n) = (logits.batch_size(), logits.n_classes());
    if b == 0 {
        return Err(LossError::EmptyBatch);
    }
    check_labels(labels, b, n)?;

    let (hard_flags, pos_hard) = classify_hard(logits, labels, config.m)?;

    let phi: Vec<f64> = match phi_override {
        Some(values) => {
            if values.len() != b {
                return Err(LossError::ShapeMismatch(format!(
                    "{} modulation coefficients for batch of {b}",
                    values.len()
                )));
            }
            values.to_vec()
        }
        None if config.method.uses_modulation() => labels
            .iter()
            .enumerate()
            .map(|(i, &y)| modulation_coefficient(state.t, logits.angles[[i, y]], config.h))
            .collect::<Result<_, _>>()?,
        None => vec![f64::NAN; b],
    };

    let mut scaled = Array2::zeros((b, n));
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..n {
            let value = if j == y {
                positive_value(config, logits.angles[[i, y]], logits.cosines[[i, y]], phi[i], pos_hard[i])
            } else {
                negative_value(config, state.t, logits.cosines[[i, j]], phi[i], hard_flags[[i, j]])
            };
            let scaled_value = config.s * value;
            if !scaled_value.is_finite() {
                return Err(LossError::NonFiniteLogit { sample: i, class: j });
            }
            scaled[[i, j]] = scaled_value;
        }
    }

    Ok(Assembly { scaled, hard_flags, pos_hard, phi })
}

/// Row-wise softmax probabilities, computed with the usual max-shift.
fn softmax_rows(scaled: &Array2<f64>) -> Array2<f64> {
    let (b, n) = scaled.dim();
    let mut probs = Array2::zeros((b, n));
    for i in 0..b {
        let row_max = (0..n).map(|j| scaled[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..n {
            let e = (scaled[[i, j]] - row_max).exp();
            probs[[i, j]] = e;
            denom += e;
        }
        for j in 0..n {
            probs[[i, j]] /= denom;
        }
    }
    probs
}

fn forward_impl(
    config: &LossConfig,
    state: &AdaptiveState,
    logits: &AngularLogits,
    labels: &[usize],
    phi_override: Option<&[f64]>,
) -> Result<LossResult, LossError> {
    let assembly = assemble(config, state, logits, labels, phi_override)?;
    let (b, n) = assembly.scaled.dim();

    let mut probs = Vec::with_capacity(b);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row_max = (0..n)
            .map(|j| assembly.scaled[[i, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..n {
            denom += (assembly.scaled[[i, j]] - row_max).exp();
        }
        let log_p = (assembly.scaled[[i, y]] - row_max) - denom.ln();
        probs.push(log_p.exp());
        loss -= log_p;
    }
    loss /= b as f64;

    let per_sample_difficulty: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| difficulty(logits.angles[[i, y]]).map_err(|e| LossError::DomainError(e.to_string())))
        .collect::<Result<_, _>>()?;

    // Diagnostic coefficient per sample; see `LossResult::per_sample_phi`.
    let per_sample_phi: Vec<f64> = match config.method {
        Method::AdaSin | Method::AdaSinT | Method::AdaSinN => assembly.phi.clone(),
        Method::CurricularFace => labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let mut sum = 0.0;
                let mut count = 0usize;
                for j in 0..n {
                    if j != y && assembly.hard_flags[[i, j]] {
                        sum += state.t + logits.cosines[[i, j]];
                        count += 1;
                    }
                }
                if count == 0 { f64::NAN } else { sum / count as f64 }
            })
            .collect(),
        Method::MvArcSoftmax => assembly
            .pos_hard
            .iter()
            .map(|&hard| if hard { config.t_fixed + 1.0 } else { f64::NAN })
            .collect(),
        _ => vec![f64::NAN; b],
    };

    Ok(LossResult {
        loss,
        probs,
        grad_features: None,
        grad_weights: None,
        hard_flags: assembly.hard_flags,
        pos_hard: assembly.pos_hard,
        per_sample_phi,
        per_sample_difficulty,
    })
}

/// Exact gradients of the loss with respect to the (normalized) feature rows
/// and class-weight columns.
///
/// `result` must come from a `forward` call on the same inputs; its
/// modulation coefficients are reused so that differentiation treats them as
/// constants. The probabilities are recomputed and compared as a consistency
/// check before any gradient is returned.
pub fn backward(
    config: &LossConfig,
    state: &AdaptiveState,
    logits: &AngularLogits,
    labels: &[usize],
    batch: &EmbeddingBatch,
    weights: &ClassWeights,
    result: &LossResult,
) -> Result<(Array2<f64>, Array2<f64>), LossError> {
    let (b, n) = (logits.batch_size(), logits.n_classes());
    if batch.len() != b || batch.dim() != weights.dim() || weights.n_classes() != n {
        return Err(LossError::StateMismatch(format!(
            "batch {}x{}, weights {}x{}, logits {}x{}",
            batch.len(),
            batch.dim(),
            weights.dim(),
            weights.n_classes(),
            b,
            n
        )));
    }
    if result.probs.len() != b {
        return Err(LossError::StateMismatch(format!(
            "result carries {} probabilities for batch of {b}",
            result.probs.len()
        )));
    }

    // Re-assemble with the result's own coefficients and verify the result
    // actually describes these inputs.
    let phi_for_assembly: Option<Vec<f64>> = if config.method.uses_modulation() {
        Some(result.per_sample_phi.clone())
    } else {
        None
    };
    let assembly = assemble(config, state, logits, labels, phi_for_assembly.as_deref())?;
    let probs_full = softmax_rows(&assembly.scaled);
    for (i, &y) in labels.iter().enumerate() {
        if (probs_full[[i, y]] - result.probs[i]).abs() > 1e-12 {
            return Err(LossError::StateMismatch(format!(
                "sample {i}: recomputed probability {} vs result {}",
                probs_full[[i, y]],
                result.probs[i]
            )));
        }
    }

    // d loss / d assembled_cosine, entry by entry:
    //   (softmax - onehot) / B  *  s  *  d(assembled) / d(cosine).
    // Entries whose underlying dot product saturated the clamp get zero:
    // the clamp makes the forward locally constant in that direction.
    let inv_b = 1.0 / b as f64;
    let mut grad_cos = Array2::zeros((b, n));
    for (i, &y) in labels.iter().enumerate() {
        let theta_y = logits.angles[[i, y]];
        for j in 0..n {
            let softmax_grad = (probs_full[[i, j]] - if j == y { 1.0 } else { 0.0 }) * inv_b;
            let chain = if logits.is_clamped(i, j) {
                0.0
            } else if j == y {
                positive_chain(config, theta_y, assembly.phi[i], assembly.pos_hard[i])
            } else {
                negative_chain(
                    config,
                    state.t,
                    logits.cosines[[i, j]],
                    assembly.phi[i],
                    assembly.hard_flags[[i, j]],
                )
            };
            grad_cos[[i, j]] = softmax_grad * config.s * chain;
        }
    }

    // cosine(i, j) = feature_i . weight_j, so the gradients are plain
    // matrix products against the other operand.
    let grad_features = grad_cos.dot(&weights.matrix().t());
    let grad_weights = batch.features().t().dot(&grad_cos);

    Ok((grad_features, grad_weights))
}
