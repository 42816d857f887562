//! Command-line surface: dataset generation, training runs, multi-method
//! comparisons, verification, and gradient checking.
//!
//! Exit codes: 0 on success, 1 when an operation fails (I/O, divergence, a
//! gradcheck tolerance violation), 2 for usage errors (unknown method,
//! invalid parameter values, malformed config files).
//!
//! Training hyperparameters resolve in three layers: built-in defaults,
//! then a `--config` file of `key=value` lines, then explicit flags. The
//! resolved values are written back into the run directory as
//! `config.resolved`, which can itself be passed to `--config` to reproduce
//! the run bit for bit.

use crate::data::{generate, make_pairs, manifest, read_dataset, read_pairs, write_dataset, write_pairs, Dataset, PairList, SyntheticSpec};
use crate::eval::{gradcheck_block, verify, GradcheckSpec, Stratum, VerificationReport};
use crate::geometry::ClassWeights;
use crate::losses::Method;
use crate::model::{Backbone, Layer};
use crate::textio::{fmt_f64, parse_f64, parse_flat_config, parse_u64, parse_usize, write_flat_config};
use crate::trainer::{train, IterationTrace, TrainConfig, TrainError, TrainLogRecord, TrainOutcome};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Errors split by exit code: usage problems exit 2, operational failures 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) => msg,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "adasin",
    version,
    about = "Angular-margin softmax losses with an adaptive sine curriculum, on synthetic hypersphere data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory (plus a verification pair list).
    Gen(GenArgs),
    /// Train one loss on a dataset and write a run directory.
    Train(TrainArgs),
    /// Train several losses (and seeds) and tabulate verification results.
    Compare(CompareArgs),
    /// Verify a trained run against a pair list.
    Eval(EvalArgs),
    /// Check analytical gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    /// Cluster tightness; noise variance is 1/concentration.
    #[arg(long, default_value_t = 35.0)]
    pub concentration: f64,
    /// Fraction of samples drawn with 10x the noise variance.
    #[arg(long, default_value_t = 0.3)]
    pub hard_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Same-class verification pairs to sample.
    #[arg(long, default_value_t = 1500)]
    pub pos_pairs: usize,
    /// Cross-class verification pairs to sample.
    #[arg(long, default_value_t = 1500)]
    pub neg_pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub pairs_seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Dataset directory (from `gen`).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss method: softmax, sphereface, cosface, arcface, mv-arc-softmax,
    /// curricular, adasin, adasin-t, adasin-n.
    #[arg(long)]
    pub loss: Option<String>,
    /// key=value file applied between defaults and flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Logit scale.
    #[arg(long)]
    pub s: Option<f64>,
    /// Angular margin (multiplier for sphereface).
    #[arg(long)]
    pub m: Option<f64>,
    /// Sine-term weight of the modulation coefficient.
    #[arg(long)]
    pub h: Option<f64>,
    /// EMA momentum on the current batch mean.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fixed hard-negative weight for mv-arc-softmax.
    #[arg(long)]
    pub t_fixed: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated epochs at which the rate drops (empty for none).
    #[arg(long)]
    pub lr_drops: Option<String>,
    /// Multiplier applied at each drop epoch.
    #[arg(long)]
    pub lr_factor: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Iterations between train-log records.
    #[arg(long)]
    pub log_interval: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Hidden layer width, or "none" for a single-layer backbone.
    #[arg(long)]
    pub hidden: Option<String>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated list of at least two losses.
    #[arg(long)]
    pub losses: String,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0")]
    pub seeds: String,
    /// key=value file applied between defaults and flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// FAR levels for the verification table.
    #[arg(long, default_value = "1e-2,1e-3")]
    pub far: String,
    #[arg(long, default_value_t = 1500)]
    pub pos_pairs: usize,
    #[arg(long, default_value_t = 1500)]
    pub neg_pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub pairs_seed: u64,
    // Shared hyperparameter overrides (same precedence as `train`).
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub m: Option<f64>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub t_fixed: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_drops: Option<String>,
    #[arg(long)]
    pub lr_factor: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub log_interval: Option<usize>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory holding weights.txt (from `train`).
    #[arg(long)]
    pub run: PathBuf,
    /// Pair list file; sampled from the dataset when omitted.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 1500)]
    pub pos_pairs: usize,
    #[arg(long, default_value_t = 1500)]
    pub neg_pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub pairs_seed: u64,
    /// Comma-separated FAR levels.
    #[arg(long, default_value = "1e-2,1e-3")]
    pub far: String,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// "all" or a comma-separated subset of methods.
    #[arg(long, default_value = "all")]
    pub methods: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub fd_step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Curriculum value pinned during the check.
    #[arg(long, default_value_t = 0.3)]
    pub t: f64,
}

// ---------------------------------------------------------------------------
// Config resolution
// ---------------------------------------------------------------------------

fn parse_method(name: &str) -> Result<Method, CliError> {
    Method::from_str(name).map_err(|e| usage(e.to_string()))
}

fn parse_lr_drops(text: &str) -> Result<Vec<usize>, CliError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|part| parse_usize(part.trim()).map_err(usage))
        .collect()
}

fn parse_hidden(text: &str) -> Result<Option<usize>, CliError> {
    let trimmed = text.trim();
    if trimmed.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_usize(trimmed).map(Some).map_err(usage)
    }
}

/// Serialize a resolved config as the flat map written to `config.resolved`.
pub fn config_to_map(config: &TrainConfig) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    map.insert("method".into(), config.loss.method.name().into());
    map.insert("s".into(), fmt_f64(config.loss.s));
    map.insert("m".into(), fmt_f64(config.loss.m));
    map.insert("h".into(), fmt_f64(config.loss.h));
    map.insert("alpha".into(), fmt_f64(config.loss.alpha));
    map.insert("t_fixed".into(), fmt_f64(config.loss.t_fixed));
    map.insert("epochs".into(), config.epochs.to_string());
    map.insert("batch_size".into(), config.batch_size.to_string());
    map.insert("lr".into(), fmt_f64(config.lr));
    map.insert(
        "lr_drops".into(),
        config.lr_drops.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
    );
    map.insert("lr_factor".into(), fmt_f64(config.lr_factor));
    map.insert("momentum".into(), fmt_f64(config.momentum));
    map.insert("weight_decay".into(), fmt_f64(config.weight_decay));
    map.insert("log_interval".into(), config.log_interval.to_string());
    map.insert("seed".into(), config.seed.to_string());
    map.insert("embedding_dim".into(), config.model.embedding_dim.to_string());
    map.insert(
        "hidden".into(),
        config.model.hidden.map_or_else(|| "none".into(), |w| w.to_string()),
    );
    map
}

/// Apply `key=value` entries onto a config. Unknown keys are rejected so
/// typos cannot silently fall back to defaults.
pub fn apply_map_to_config(
    config: &mut TrainConfig,
    map: &BTreeMap<String, String>,
) -> Result<(), CliError> {
    for (key, value) in map {
        match key.as_str() {
            "method" => config.loss.method = parse_method(value)?,
            "s" => config.loss.s = parse_f64(value).map_err(usage)?,
            "m" => config.loss.m = parse_f64(value).map_err(usage)?,
            "h" => config.loss.h = parse_f64(value).map_err(usage)?,
            "alpha" => config.loss.alpha = parse_f64(value).map_err(usage)?,
            "t_fixed" => config.loss.t_fixed = parse_f64(value).map_err(usage)?,
            "epochs" => config.epochs = parse_usize(value).map_err(usage)?,
            "batch_size" => config.batch_size = parse_usize(value).map_err(usage)?,
            "lr" => config.lr = parse_f64(value).map_err(usage)?,
            "lr_drops" => config.lr_drops = parse_lr_drops(value)?,
            "lr_factor" => config.lr_factor = parse_f64(value).map_err(usage)?,
            "momentum" => config.momentum = parse_f64(value).map_err(usage)?,
            "weight_decay" => config.weight_decay = parse_f64(value).map_err(usage)?,
            "log_interval" => config.log_interval = parse_usize(value).map_err(usage)?,
            "seed" => config.seed = parse_u64(value).map_err(usage)?,
            "embedding_dim" => config.model.embedding_dim = parse_usize(value).map_err(usage)?,
            "hidden" => config.model.hidden = parse_hidden(value)?,
            other => return Err(usage(format!("unknown config key {other:?}"))),
        }
    }
    Ok(())
}

struct TrainOverrides<'a> {
    loss: Option<&'a str>,
    config: Option<&'a Path>,
    s: Option<f64>,
    m: Option<f64>,
    h: Option<f64>,
    alpha: Option<f64>,
    t_fixed: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    lr_drops: Option<&'a str>,
    lr_factor: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    log_interval: Option<usize>,
    seed: Option<u64>,
    embedding_dim: Option<usize>,
    hidden: Option<&'a str>,
}

fn resolve_config(overrides: &TrainOverrides) -> Result<TrainConfig, CliError> {
    let mut config = TrainConfig::default();
    if let Some(path) = overrides.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| runtime(format!("reading {}: {e}", path.display())))?;
        let map = parse_flat_config(&text).map_err(usage)?;
        apply_map_to_config(&mut config, &map)?;
    }
    if let Some(name) = overrides.loss {
        config.loss.method = parse_method(name)?;
    }
    if let Some(v) = overrides.s {
        config.loss.s = v;
    }
    if let Some(v) = overrides.m {
        config.loss.m = v;
    }
    if let Some(v) = overrides.h {
        config.loss.h = v;
    }
    if let Some(v) = overrides.alpha {
        config.loss.alpha = v;
    }
    if let Some(v) = overrides.t_fixed {
        config.loss.t_fixed = v;
    }
    if let Some(v) = overrides.epochs {
        config.epochs = v;
    }
    if let Some(v) = overrides.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = overrides.lr {
        config.lr = v;
    }
    if let Some(text) = overrides.lr_drops {
        config.lr_drops = parse_lr_drops(text)?;
    }
    if let Some(v) = overrides.lr_factor {
        config.lr_factor = v;
    }
    if let Some(v) = overrides.momentum {
        config.momentum = v;
    }
    if let Some(v) = overrides.weight_decay {
        config.weight_decay = v;
    }
    if let Some(v) = overrides.log_interval {
        config.log_interval = v;
    }
    if let Some(v) = overrides.seed {
        config.seed = v;
    }
    if let Some(v) = overrides.embedding_dim {
        config.model.embedding_dim = v;
    }
    if let Some(text) = overrides.hidden {
        config.model.hidden = parse_hidden(text)?;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

impl TrainArgs {
    fn overrides(&self) -> TrainOverrides<'_> {
        TrainOverrides {
            loss: self.loss.as_deref(),
            config: self.config.as_deref(),
            s: self.s,
            m: self.m,
            h: self.h,
            alpha: self.alpha,
            t_fixed: self.t_fixed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_drops: self.lr_drops.as_deref(),
            lr_factor: self.lr_factor,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            log_interval: self.log_interval,
            seed: self.seed,
            embedding_dim: self.embedding_dim,
            hidden: self.hidden.as_deref(),
        }
    }
}

impl CompareArgs {
    fn overrides(&self) -> TrainOverrides<'_> {
        TrainOverrides {
            loss: None,
            config: self.config.as_deref(),
            s: self.s,
            m: self.m,
            h: self.h,
            alpha: self.alpha,
            t_fixed: self.t_fixed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_drops: self.lr_drops.as_deref(),
            lr_factor: self.lr_factor,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            log_interval: self.log_interval,
            seed: None,
            embedding_dim: self.embedding_dim,
            hidden: self.hidden.as_deref(),
        }
    }
}

// ---------------------------------------------------------------------------
// Run directory files
// ---------------------------------------------------------------------------

fn write_train_log(path: &Path, records: &[TrainLogRecord]) -> Result<(), CliError> {
    let mut out = String::from(
        "# adasin train log v1\niteration,epoch,lr,loss,t,mean_pos_cos,mean_difficulty,hard_fraction,mean_phi\n",
    );
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.epoch,
            fmt_f64(r.lr),
            fmt_f64(r.loss),
            fmt_f64(r.t),
            fmt_f64(r.mean_pos_cos),
            fmt_f64(r.mean_difficulty),
            fmt_f64(r.hard_fraction),
            fmt_f64(r.mean_phi),
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(runtime)
}

fn write_phi_trace(path: &Path, trace: &[IterationTrace]) -> Result<(), CliError> {
    let mut out = String::from(
        "# adasin modulation trace v1\niteration,epoch,t_pre,t_post,batch_mean_cos,theta_conservative,coeff_min,coeff_mean,coeff_max,coeff_count\n",
    );
    for tr in trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            tr.iteration,
            tr.epoch,
            fmt_f64(tr.t_pre),
            fmt_f64(tr.t_post),
            fmt_f64(tr.batch_mean_cos),
            fmt_f64(tr.theta_conservative),
            fmt_f64(tr.modulation.min),
            fmt_f64(tr.modulation.mean),
            fmt_f64(tr.modulation.max),
            tr.modulation.count,
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(runtime)
}

/// Serialize backbone layers and class weights as labeled matrix blocks.
pub fn write_weights(path: &Path, backbone: &Backbone, weights: &ClassWeights) -> Result<(), CliError> {
    let mut out = String::from("# adasin weights v1\n");
    writeln!(out, "n_layers={}", backbone.layers().len()).expect("string write");
    for (idx, layer) in backbone.layers().iter().enumerate() {
        writeln!(out, "[layer{idx}.weight {}x{}]", layer.weight.nrows(), layer.weight.ncols())
            .expect("string write");
        for row in layer.weight.rows() {
            let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
            writeln!(out, "{}", line.join(",")).expect("string write");
        }
        writeln!(out, "[layer{idx}.bias {}]", layer.bias.len()).expect("string write");
        let line: Vec<String> = layer.bias.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(out, "{}", line.join(",")).expect("string write");
    }
    writeln!(
        out,
        "[class_weights {}x{}]",
        weights.matrix().nrows(),
        weights.matrix().ncols()
    )
    .expect("string write");
    for row in weights.matrix().rows() {
        let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(out, "{}", line.join(",")).expect("string write");
    }
    std::fs::write(path, out).map_err(runtime)
}

/// Parse a file written by [`write_weights`].
pub fn read_weights(path: &Path) -> Result<(Backbone, ClassWeights), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| runtime(format!("reading {}: {e}", path.display())))?;
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .peekable();

    let header = lines
        .next()
        .ok_or_else(|| runtime("weights file is empty"))?;
    let n_layers: usize = header
        .strip_prefix("n_layers=")
        .ok_or_else(|| runtime(format!("expected n_layers=, got {header:?}")))
        .and_then(|v| parse_usize(v).map_err(runtime))?;

    let parse_row = |line: &str| -> Result<Vec<f64>, CliError> {
        line.split(',').map(|f| parse_f64(f.trim()).map_err(runtime)).collect()
    };
    let expect_section = |line: Option<&str>, prefix: &str| -> Result<(usize, Option<usize>), CliError> {
        let line = line.ok_or_else(|| runtime(format!("missing section {prefix:?}")))?;
        let inner = line
            .strip_prefix('[')
            .and_then(|l| l.strip_suffix(']'))
            .ok_or_else(|| runtime(format!("expected a [section], got {line:?}")))?;
        let (name, shape) = inner
            .rsplit_once(' ')
            .ok_or_else(|| runtime(format!("malformed section header {line:?}")))?;
        if name != prefix {
            return Err(runtime(format!("expected section {prefix:?}, got {name:?}")));
        }
        match shape.split_once('x') {
            Some((r, c)) => Ok((
                parse_usize(r).map_err(runtime)?,
                Some(parse_usize(c).map_err(runtime)?),
            )),
            None => Ok((parse_usize(shape).map_err(runtime)?, None)),
        }
    };

    let mut layers = Vec::with_capacity(n_layers);
    for idx in 0..n_layers {
        let (rows, cols) = expect_section(lines.next(), &format!("layer{idx}.weight"))?;
        let cols = cols.ok_or_else(|| runtime("weight section needs RxC shape"))?;
        let mut weight = Array2::zeros((rows, cols));
        for r in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| runtime(format!("layer {idx} weight row {r} missing")))?;
            let values = parse_row(line)?;
            if values.len() != cols {
                return Err(runtime(format!(
                    "layer {idx} weight row {r} has {} values, expected {cols}",
                    values.len()
                )));
            }
            for (c, v) in values.into_iter().enumerate() {
                weight[[r, c]] = v;
            }
        }
        let (bias_len, extra) = expect_section(lines.next(), &format!("layer{idx}.bias"))?;
        if extra.is_some() {
            return Err(runtime("bias section takes a flat length"));
        }
        let line = lines
            .next()
            .ok_or_else(|| runtime(format!("layer {idx} bias row missing")))?;
        let values = parse_row(line)?;
        if values.len() != bias_len {
            return Err(runtime(format!(
                "layer {idx} bias has {} values, expected {bias_len}",
                values.len()
            )));
        }
        layers.push(Layer { weight, bias: Array1::from_vec(values) });
    }

    let (rows, cols) = expect_section(lines.next(), "class_weights")?;
    let cols = cols.ok_or_else(|| runtime("class_weights section needs RxC shape"))?;
    let mut matrix = Array2::zeros((rows, cols));
    for r in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| runtime(format!("class_weights row {r} missing")))?;
        let values = parse_row(line)?;
        if values.len() != cols {
            return Err(runtime(format!(
                "class_weights row {r} has {} values, expected {cols}",
                values.len()
            )));
        }
        for (c, v) in values.into_iter().enumerate() {
            matrix[[r, c]] = v;
        }
    }
    if lines.next().is_some() {
        return Err(runtime("trailing content after class_weights block"));
    }

    let backbone = Backbone::from_layers(layers).map_err(runtime)?;
    let weights = ClassWeights::from_unit_columns(matrix).map_err(runtime)?;
    Ok((backbone, weights))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn run_gen(args: &GenArgs) -> Result<i32, CliError> {
    let spec = SyntheticSpec {
        n_classes: args.classes,
        dim: args.dim,
        samples_per_class: args.per_class,
        concentration: args.concentration,
        hard_fraction: args.hard_fraction,
        seed: args.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let dataset = generate(&spec).map_err(runtime)?;
    let pairs = if args.pos_pairs + args.neg_pairs > 0 {
        let pairs = make_pairs(&dataset, args.pos_pairs, args.neg_pairs, args.pairs_seed)
            .map_err(|e| usage(e.to_string()))?;
        Some(pairs)
    } else {
        None
    };
    write_dataset(&args.out, &dataset).map_err(runtime)?;
    if let Some(pairs) = &pairs {
        write_pairs(&args.out.join("pairs.csv"), pairs).map_err(runtime)?;
    }
    let info = manifest(&dataset);
    println!(
        "wrote {} samples ({} classes x {}, dim {}) to {}",
        info.n_samples,
        spec.n_classes,
        spec.samples_per_class,
        spec.dim,
        args.out.display()
    );
    println!(
        "center cosines: max {:.4}, mean {:.4}; checksum {:016x}",
        info.center_cos_max, info.center_cos_mean, info.checksum
    );
    if let Some(pairs) = &pairs {
        println!("pairs.csv: {} positive, {} negative", pairs.n_positive(), pairs.n_negative());
    }
    Ok(0)
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    read_dataset(path).map_err(|e| runtime(format!("loading dataset {}: {e}", path.display())))
}

fn train_once(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome, CliError> {
    match train(dataset, config) {
        Ok(outcome) => Ok(outcome),
        Err(e @ TrainError::Divergence { .. }) => Err(runtime(e)),
        Err(e @ TrainError::Config(_)) => Err(usage(e.to_string())),
        Err(e) => Err(runtime(e)),
    }
}

fn run_train(args: &TrainArgs) -> Result<i32, CliError> {
    let config = resolve_config(&args.overrides())?;
    let dataset = load_dataset(&args.data)?;
    let outcome = train_once(&dataset, &config)?;

    std::fs::create_dir_all(&args.out).map_err(runtime)?;
    std::fs::write(
        args.out.join("config.resolved"),
        write_flat_config("adasin resolved train config v1", &config_to_map(&config)),
    )
    .map_err(runtime)?;
    write_train_log(&args.out.join("train_log.csv"), &outcome.log)?;
    write_phi_trace(&args.out.join("phi_trace.csv"), &outcome.trace)?;
    write_weights(&args.out.join("weights.txt"), &outcome.backbone, &outcome.weights)?;

    let last = outcome.trace.last().expect("at least one iteration");
    println!(
        "{}: {} iterations, final loss {:.6}, t {:.4}, hard fraction {:.3}",
        config.loss.method, last.iteration, last.loss, last.t_post, last.hard_fraction
    );
    println!("run directory: {}", args.out.display());
    Ok(0)
}

fn parse_far_levels(text: &str) -> Result<Vec<f64>, CliError> {
    let levels: Result<Vec<f64>, CliError> = text
        .split(',')
        .map(|part| parse_f64(part.trim()).map_err(usage))
        .collect();
    let levels = levels?;
    if levels.is_empty() {
        return Err(usage("need at least one FAR level"));
    }
    Ok(levels)
}

fn pairs_for(
    dataset: &Dataset,
    pairs_path: Option<&Path>,
    pos: usize,
    neg: usize,
    seed: u64,
) -> Result<PairList, CliError> {
    match pairs_path {
        Some(path) => read_pairs(path).map_err(runtime),
        None => make_pairs(dataset, pos, neg, seed).map_err(|e| usage(e.to_string())),
    }
}

/// Embed every dataset sample with the trained backbone.
fn embed_all(backbone: &Backbone, dataset: &Dataset) -> Result<Array2<f64>, CliError> {
    Ok(backbone.forward_cached(&dataset.features).map_err(runtime)?.embeddings)
}

fn format_report(report: &VerificationReport) -> String {
    let mut out = String::new();
    writeln!(out, "pairs: {} positive, {} negative", report.n_positive, report.n_negative)
        .expect("string write");
    for entry in &report.entries {
        writeln!(
            out,
            "TAR {:.4} at FAR<={:.1e} (threshold {:.6}, achieved FAR {:.2e})",
            entry.tar, entry.level, entry.threshold, entry.far_actual
        )
        .expect("string write");
    }
    writeln!(
        out,
        "best accuracy {:.4} at threshold {:.6}",
        report.best_accuracy, report.best_threshold
    )
    .expect("string write");
    out
}

fn run_eval(args: &EvalArgs) -> Result<i32, CliError> {
    let far_levels = parse_far_levels(&args.far)?;
    let dataset = load_dataset(&args.data)?;
    let (backbone, _weights) = read_weights(&args.run.join("weights.txt"))?;
    let pairs = pairs_for(
        &dataset,
        args.pairs.as_deref(),
        args.pos_pairs,
        args.neg_pairs,
        args.pairs_seed,
    )?;
    let embeddings = embed_all(&backbone, &dataset)?;
    let report = verify(&embeddings, &pairs, &far_levels).map_err(runtime)?;
    let text = format_report(&report);
    print!("{text}");
    std::fs::write(args.run.join("verification.txt"), &text).map_err(runtime)?;
    Ok(0)
}

fn run_compare(args: &CompareArgs) -> Result<i32, CliError> {
    let methods: Result<Vec<Method>, CliError> = args
        .losses
        .split(',')
        .map(|part| parse_method(part.trim()))
        .collect();
    let mut methods = methods?;
    {
        let mut seen = std::collections::BTreeSet::new();
        methods.retain(|m| seen.insert(m.name()));
    }
    if methods.len() < 2 {
        return Err(usage("compare needs at least two distinct losses (--losses a,b)"));
    }
    let seeds: Result<Vec<u64>, CliError> = args
        .seeds
        .split(',')
        .map(|part| parse_u64(part.trim()).map_err(usage))
        .collect();
    let seeds = seeds?;
    if seeds.is_empty() {
        return Err(usage("need at least one seed"));
    }
    let far_levels = parse_far_levels(&args.far)?;

    let base = resolve_config(&args.overrides())?;
    let dataset = load_dataset(&args.data)?;
    let pairs = make_pairs(&dataset, args.pos_pairs, args.neg_pairs, args.pairs_seed)
        .map_err(|e| usage(e.to_string()))?;

    std::fs::create_dir_all(&args.out).map_err(runtime)?;
    let mut csv = String::from("# adasin comparison v1\nmethod,seed,final_loss,final_t");
    for level in &far_levels {
        write!(csv, ",tar_at_{level:e}").expect("string write");
    }
    csv.push_str(",best_accuracy\n");

    println!(
        "{:<16} {:>6} {:>12} {:>8} {} {:>10}",
        "method",
        "seed",
        "final_loss",
        "t",
        far_levels
            .iter()
            .map(|l| format!("{:>12}", format!("tar@{l:.0e}")))
            .collect::<Vec<_>>()
            .join(" "),
        "best_acc"
    );
    for &method in &methods {
        for &seed in &seeds {
            let mut config = base.clone();
            config.loss.method = method;
            config.seed = seed;
            config.validate().map_err(|e| usage(e.to_string()))?;
            let outcome = train_once(&dataset, &config)?;
            let embeddings = embed_all(&outcome.backbone, &dataset)?;
            let report = verify(&embeddings, &pairs, &far_levels).map_err(runtime)?;
            let last = outcome.trace.last().expect("at least one iteration");

            write!(csv, "{},{},{},{}", method.name(), seed, fmt_f64(last.loss), fmt_f64(last.t_post))
                .expect("string write");
            for entry in &report.entries {
                write!(csv, ",{}", fmt_f64(entry.tar)).expect("string write");
            }
            writeln!(csv, ",{}", fmt_f64(report.best_accuracy)).expect("string write");

            println!(
                "{:<16} {:>6} {:>12.6} {:>8.4} {} {:>10.4}",
                method.name(),
                seed,
                last.loss,
                last.t_post,
                report
                    .entries
                    .iter()
                    .map(|e| format!("{:>12.4}", e.tar))
                    .collect::<Vec<_>>()
                    .join(" "),
                report.best_accuracy
            );
        }
    }
    std::fs::write(args.out.join("comparison.csv"), csv).map_err(runtime)?;
    println!("comparison table: {}", args.out.join("comparison.csv").display());
    Ok(0)
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<i32, CliError> {
    let methods: Vec<Method> = if args.methods.trim().eq_ignore_ascii_case("all") {
        Method::ALL.to_vec()
    } else {
        args.methods
            .split(',')
            .map(|part| parse_method(part.trim()))
            .collect::<Result<_, _>>()?
    };
    let spec = GradcheckSpec {
        batch_size: args.batch_size,
        n_classes: args.classes,
        dim: args.dim,
        seed: args.seed,
        fd_step: args.fd_step,
        tolerance: args.tolerance,
        t: args.t,
        ..GradcheckSpec::default()
    };
    let mut blocks = Vec::new();
    for method in methods {
        for stratum in Stratum::ALL {
            blocks.push(gradcheck_block(&spec, method, stratum).map_err(runtime)?);
        }
    }
    let mut failed = false;
    println!(
        "{:<16} {:<6} {:>8} {:>12} {:>12} {:>9} {:>10}",
        "method", "stratum", "entries", "max_err", "mean_err", "failures", "resampled"
    );
    for block in &blocks {
        if block.n_failures > 0 {
            failed = true;
        }
        println!(
            "{:<16} {:<6} {:>8} {:>12.3e} {:>12.3e} {:>9} {:>10}",
            block.method.name(),
            block.stratum.name(),
            block.n_entries,
            block.max_scaled_err,
            block.mean_scaled_err,
            block.n_failures,
            block.n_resampled
        );
    }
    if failed {
        println!("FAIL: at least one gradient entry exceeded tolerance {:.1e}", spec.tolerance);
        Ok(1)
    } else {
        println!("ok: all entries within tolerance {:.1e}", spec.tolerance);
        Ok(0)
    }
}

/// Dispatch a parsed command line. Returns the process exit code.
pub fn run(cli: Cli) -> Result<i32, CliError> {
    match &cli.command {
        Command::Gen(args) => run_gen(args),
        Command::Train(args) => run_train(args),
        Command::Compare(args) => run_compare(args),
        Command::Eval(args) => run_eval(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}
