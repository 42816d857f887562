//! A small deterministic SGD loop tying the pieces together: backbone
//! embeddings, class weights on the sphere, one of the margin losses, and
//! the adaptive curriculum state.
//!
//! Every iteration produces a full [`IterationTrace`]; the coarser
//! [`TrainLogRecord`] stream (every `log_interval` iterations plus the final
//! one) is what the CLI writes to `train_log.csv`. Runs with the same
//! dataset and config are bit-for-bit reproducible.

use crate::data::Dataset;
use crate::geometry::{angular_logits, ClassWeights, EmbeddingBatch, GeometryError};
use crate::losses::{
    backward, forward, update_t, AdaptiveState, LossConfig, LossError, LossResult, Method,
};
use crate::model::{Backbone, ModelError};
use crate::textio::derive_seed;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("dataset problem: {0}")]
    Data(String),
    #[error("training diverged at iteration {iteration}: {cause}")]
    Divergence { iteration: u64, cause: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Backbone shape. The input width always comes from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    /// Width of the optional hidden tanh layer.
    pub hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { embedding_dim: 16, hidden: Some(32) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by
    /// `lr_factor`. An epoch appearing twice drops the rate twice.
    pub lr_drops: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations between coarse log records.
    pub log_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            epochs: 12,
            batch_size: 128,
            lr: 0.1,
            lr_drops: vec![4, 8, 10],
            lr_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            log_interval: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate()?;
        if self.model.embedding_dim < 2 {
            return Err(TrainError::Config(format!(
                "embedding_dim must be >= 2, got {}",
                self.model.embedding_dim
            )));
        }
        if self.model.hidden == Some(0) {
            return Err(TrainError::Config("hidden width must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(self.lr_factor.is_finite() && self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(TrainError::Config(format!(
                "lr_factor must lie in (0, 1], got {}",
                self.lr_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(TrainError::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.log_interval == 0 {
            return Err(TrainError::Config("log_interval must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch` (0-based): the base rate times
/// `lr_factor` once per drop epoch already reached.
pub fn learning_rate(config: &TrainConfig, epoch: usize) -> f64 {
    let drops = config.lr_drops.iter().filter(|&&d| d <= epoch).count();
    config.lr * config.lr_factor.powi(drops as i32)
}

/// One SGD-with-momentum update, in place:
/// `v = momentum * v + grad + weight_decay * param; param -= lr * v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] + grads[i] + weight_decay * params[i];
        params[i] -= lr * velocity[i];
    }
    Ok(())
}

/// Min/mean/max of the hard-pair (and modulated-margin) coefficients the
/// method actually applied in one iteration. `count == 0` means the method
/// applied none (plain softmax, or no hard pairs this batch).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModulationStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

impl ModulationStats {
    fn empty() -> Self {
        Self { min: f64::NAN, mean: 0.0, max: f64::NAN, count: 0 }
    }

    fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::empty();
        }
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        Self { min, mean: sum / values.len() as f64, max, count: values.len() }
    }
}

/// Collect every multiplicative coefficient the method applied this batch:
/// hard-negative reweights for the methods that have them, plus the margin
/// modulation where the positive branch is modulated.
pub fn modulation_stats(
    config: &LossConfig,
    t: f64,
    cosines: &Array2<f64>,
    result: &LossResult,
) -> ModulationStats {
    let mut values = Vec::new();
    let (b, n) = result.hard_flags.dim();
    for i in 0..b {
        if config.method.modulates_margin() && result.pos_hard[i] {
            values.push(result.per_sample_phi[i]);
        }
        for j in 0..n {
            if !result.hard_flags[[i, j]] {
                continue;
            }
            match config.method {
                Method::MvArcSoftmax => values.push(config.t_fixed + 1.0),
                Method::CurricularFace => values.push(t + cosines[[i, j]]),
                Method::AdaSin | Method::AdaSinN => values.push(result.per_sample_phi[i]),
                _ => {}
            }
        }
    }
    ModulationStats::from_values(&values)
}

/// Coarse log record, one per `log_interval` iterations. `t` is the
/// curriculum state *before* this iteration's update, so the first record
/// always shows the initial value 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub t: f64,
    /// Batch mean positive cosine.
    pub mean_pos_cos: f64,
    /// Batch mean of `sin(theta_pos / 2)`.
    pub mean_difficulty: f64,
    /// Fraction of batch samples whose positive branch was hard.
    pub hard_fraction: f64,
    /// Mean applied coefficient ([`ModulationStats::mean`]; 0 when none).
    pub mean_phi: f64,
}

/// Everything about one iteration, kept for every iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationTrace {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub t_pre: f64,
    pub t_post: f64,
    /// Batch mean positive cosine (the EMA update input).
    pub batch_mean_cos: f64,
    /// Conservative positive angle: min(pi/2, smallest positive angle in the
    /// batch). Feeding these into [`crate::boundary::phi_bounds`] bounds
    /// every coefficient of the matching iteration.
    pub theta_conservative: f64,
    pub mean_difficulty: f64,
    pub hard_fraction: f64,
    pub modulation: ModulationStats,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub backbone: Backbone,
    pub weights: ClassWeights,
    pub state: AdaptiveState,
    pub log: Vec<TrainLogRecord>,
    pub trace: Vec<IterationTrace>,
}

struct Velocities {
    layers: Vec<(Array2<f64>, Array1<f64>)>,
    class_weights: Array2<f64>,
}

/// Run the full training loop on `dataset`.
///
/// Iteration order: sample batch, embed, measure angles, fold the batch mean
/// positive cosine into the curriculum state, evaluate the loss with the
/// updated state, backpropagate, SGD-update backbone and class weights, and
/// re-project the class weights onto the sphere.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let n_samples = dataset.labels.len();
    if n_samples == 0 {
        return Err(TrainError::Data("dataset is empty".into()));
    }
    if dataset.features.nrows() != n_samples {
        return Err(TrainError::Data(format!(
            "{} feature rows but {} labels",
            dataset.features.nrows(),
            n_samples
        )));
    }
    let n_classes = dataset.labels.iter().max().map_or(0, |&m| m + 1);
    if n_classes < 2 {
        return Err(TrainError::Data("need at least 2 classes".into()));
    }

    let d_in = dataset.features.ncols();
    let mut backbone_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "backbone"));
    let mut backbone = Backbone::new(
        d_in,
        config.model.hidden,
        config.model.embedding_dim,
        &mut backbone_rng,
    );
    let mut weight_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "class-weights"));
    let init = Array2::from_shape_fn((config.model.embedding_dim, n_classes), |_| {
        use rand::Rng;
        weight_rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let mut weights = ClassWeights::new(init)?;

    let mut velocities = Velocities {
        layers: backbone
            .layers()
            .iter()
            .map(|l| (Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.len())))
            .collect(),
        class_weights: Array2::zeros(weights.matrix().dim()),
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..n_samples).collect();

    let mut state = AdaptiveState::new();
    let mut log = Vec::new();
    let mut trace = Vec::new();
    let mut iteration: u64 = 0;
    let total_iterations =
        (config.epochs * n_samples.div_ceil(config.batch_size)) as u64;

    for epoch in 0..config.epochs {
        let lr = learning_rate(config, epoch);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            iteration += 1;

            let input = Array2::from_shape_fn((chunk.len(), d_in), |(i, j)| {
                dataset.features[[chunk[i], j]]
            });
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();

            let diverged = |cause: String| TrainError::Divergence { iteration, cause };
            let cache = backbone
                .forward_cached(&input)
                .map_err(|e| diverged(e.to_string()))?;
            let batch = EmbeddingBatch::new(cache.embeddings.clone(), labels.clone())
                .map_err(|e| diverged(e.to_string()))?;
            let logits = angular_logits(&batch, &weights)?;

            let pos_cosines: Vec<f64> = labels
                .iter()
                .enumerate()
                .map(|(i, &y)| logits.cosines[[i, y]])
                .collect();
            let batch_mean_cos = pos_cosines.iter().sum::<f64>() / pos_cosines.len() as f64;
            let theta_conservative = labels
                .iter()
                .enumerate()
                .map(|(i, &y)| logits.angles[[i, y]])
                .fold(f64::INFINITY, f64::min)
                .min(PI / 2.0);

            let t_pre = state.t;
            state = update_t(&state, &pos_cosines, config.loss.alpha)?;

            let result = match forward(&config.loss, &state, &logits, &labels) {
                Ok(r) => r,
                Err(LossError::NonFiniteLogit { sample, class }) => {
                    return Err(diverged(format!(
                        "non-finite logit for sample {sample}, class {class}"
                    )))
                }
                Err(e) => return Err(e.into()),
            };
            if !result.loss.is_finite() {
                return Err(diverged(format!("loss {}", result.loss)));
            }

            let (grad_features, grad_weights) =
                backward(&config.loss, &state, &logits, &labels, &batch, &weights, &result)?;
            let layer_grads = backbone.backward(&cache, &grad_features)?;

            for (layer, (grads, (vw, vb))) in backbone
                .layers_mut()
                .iter_mut()
                .zip(layer_grads.iter().zip(velocities.layers.iter_mut()))
            {
                sgd_step(
                    layer.weight.as_slice_mut().expect("standard layout"),
                    grads.weight.as_slice().expect("standard layout"),
                    vw.as_slice_mut().expect("standard layout"),
                    lr,
                    config.momentum,
                    config.weight_decay,
                )?;
                sgd_step(
                    layer.bias.as_slice_mut().expect("standard layout"),
                    grads.bias.as_slice().expect("standard layout"),
                    vb.as_slice_mut().expect("standard layout"),
                    lr,
                    config.momentum,
                    config.weight_decay,
                )?;
            }
            sgd_step(
                weights.matrix_mut().as_slice_mut().expect("standard layout"),
                grad_weights.as_slice().expect("standard layout"),
                velocities.class_weights.as_slice_mut().expect("standard layout"),
                lr,
                config.momentum,
                config.weight_decay,
            )?;
            weights
                .renormalize_columns()
                .map_err(|e| diverged(e.to_string()))?;

            let modulation = modulation_stats(&config.loss, state.t, &logits.cosines, &result);
            let mean_difficulty = result.per_sample_difficulty.iter().sum::<f64>()
                / result.per_sample_difficulty.len() as f64;
            let hard_fraction = result.pos_hard.iter().filter(|&&h| h).count() as f64
                / result.pos_hard.len() as f64;

            trace.push(IterationTrace {
                iteration,
                epoch,
                lr,
                loss: result.loss,
                t_pre,
                t_post: state.t,
                batch_mean_cos,
                theta_conservative,
                mean_difficulty,
                hard_fraction,
                modulation,
            });
            if (iteration - 1) % config.log_interval as u64 == 0 || iteration == total_iterations
            {
                log.push(TrainLogRecord {
                    iteration,
                    epoch,
                    lr,
                    loss: result.loss,
                    t: t_pre,
                    mean_pos_cos: batch_mean_cos,
                    mean_difficulty,
                    hard_fraction,
                    mean_phi: modulation.mean,
                });
            }
        }
    }

    Ok(TrainOutcome { backbone, weights, state, log, trace })
}
