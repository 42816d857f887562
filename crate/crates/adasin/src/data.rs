//! Synthetic hypersphere classes: random unit centers with Gaussian clouds
//! around them, a controllable fraction of extra-noisy "hard" samples, and a
//! verification pair sampler. Everything is reproducible from a single seed
//! via labeled sub-streams, and datasets round-trip exactly through a plain
//! text directory format.

use crate::geometry::normalize_rows;
use crate::textio::{
    derive_seed, fmt_f64, fnv1a64, parse_f64, parse_flat_config, parse_u64, parse_usize,
    write_flat_config,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Parameters of a synthetic dataset. `concentration` plays the role of a
/// cluster tightness: samples are centers plus Gaussian noise of variance
/// `1 / concentration` per coordinate (hard samples: `10 / concentration`),
/// re-projected onto the sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub concentration: f64,
    pub hard_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_classes < 2 {
            return Err(DataError::Spec(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.dim < 2 {
            return Err(DataError::Spec(format!("need dim >= 2, got {}", self.dim)));
        }
        if self.samples_per_class == 0 {
            return Err(DataError::Spec("samples_per_class must be positive".into()));
        }
        if !(self.concentration.is_finite() && self.concentration > 0.0) {
            return Err(DataError::Spec(format!(
                "concentration must be positive, got {}",
                self.concentration
            )));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) || !self.hard_fraction.is_finite() {
            return Err(DataError::Spec(format!(
                "hard_fraction must lie in [0, 1], got {}",
                self.hard_fraction
            )));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_classes * self.samples_per_class
    }

    /// Number of extra-noisy samples per class.
    pub fn hard_per_class(&self) -> usize {
        (self.hard_fraction * self.samples_per_class as f64).floor() as usize
    }
}

/// A generated dataset: unit-norm feature rows in class-major order, the
/// class centers they were drawn around, and the per-sample hard flag.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub hard: Vec<bool>,
    /// `n_classes x dim`, unit rows.
    pub centers: Array2<f64>,
    pub spec: SyntheticSpec,
}

fn random_unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draw the dataset described by `spec`. Class centers come from one seeded
/// stream, each class's samples from its own labeled stream, so adding
/// classes never perturbs existing ones.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let (n, d, per_class) = (spec.n_classes, spec.dim, spec.samples_per_class);

    let mut center_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "centers"));
    let mut centers = Array2::zeros((n, d));
    for c in 0..n {
        let v = random_unit_vector(d, &mut center_rng);
        for (j, x) in v.into_iter().enumerate() {
            centers[[c, j]] = x;
        }
    }

    let easy_sigma = (1.0 / spec.concentration).sqrt();
    let hard_sigma = (10.0 / spec.concentration).sqrt();
    let hard_per_class = spec.hard_per_class();

    let mut features = Array2::zeros((spec.n_samples(), d));
    let mut labels = Vec::with_capacity(spec.n_samples());
    let mut hard = Vec::with_capacity(spec.n_samples());
    for c in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("class-{c}")));
        for s in 0..per_class {
            let is_hard = s < hard_per_class;
            let sigma = if is_hard { hard_sigma } else { easy_sigma };
            let row = c * per_class + s;
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                features[[row, j]] = centers[[c, j]] + sigma * z;
            }
            labels.push(c);
            hard.push(is_hard);
        }
    }
    let features = normalize_rows(&features.view())
        .map_err(|e| DataError::Spec(format!("degenerate sample: {e}")))?;

    Ok(Dataset { features, labels, hard, centers, spec: *spec })
}

/// Summary statistics plus an integrity checksum over the serialized samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub n_samples: usize,
    /// Largest pairwise cosine between class centers (closest pair).
    pub center_cos_max: f64,
    /// Mean pairwise cosine between class centers.
    pub center_cos_mean: f64,
    /// FNV-1a over the canonical sample serialization.
    pub checksum: u64,
}

fn sample_lines(dataset: &Dataset) -> Vec<String> {
    dataset
        .labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut fields = vec![label.to_string(), (dataset.hard[i] as u8).to_string()];
            fields.extend(dataset.features.row(i).iter().map(|&v| fmt_f64(v)));
            fields.join(",")
        })
        .collect()
}

pub fn manifest(dataset: &Dataset) -> Manifest {
    let n = dataset.spec.n_classes;
    let mut max_cos = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in 0..n {
        for b in (a + 1)..n {
            let cos = dataset
                .centers
                .row(a)
                .iter()
                .zip(dataset.centers.row(b).iter())
                .map(|(x, y)| x * y)
                .sum::<f64>();
            max_cos = max_cos.max(cos);
            sum += cos;
            count += 1;
        }
    }
    let checksum = fnv1a64(sample_lines(dataset).join("\n").as_bytes());
    Manifest {
        spec: dataset.spec,
        n_samples: dataset.spec.n_samples(),
        center_cos_max: max_cos,
        center_cos_mean: sum / count as f64,
        checksum,
    }
}

/// A verification pair: indices into the dataset plus the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Debug, Clone, Default)]
pub struct PairList {
    pub pairs: Vec<Pair>,
}

impl PairList {
    pub fn n_positive(&self) -> usize {
        self.pairs.iter().filter(|p| p.same).count()
    }

    pub fn n_negative(&self) -> usize {
        self.pairs.len() - self.n_positive()
    }
}

/// Sample `n_pos` distinct same-class and `n_neg` distinct cross-class
/// index pairs, uniformly and reproducibly.
pub fn make_pairs(
    dataset: &Dataset,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<PairList, DataError> {
    let per_class = dataset.spec.samples_per_class;
    let n_classes = dataset.spec.n_classes;
    let total = dataset.spec.n_samples();
    let pos_population = n_classes * per_class * (per_class - 1) / 2;
    let neg_population = (total * total - n_classes * per_class * per_class) / 2;
    if n_pos > pos_population {
        return Err(DataError::InsufficientData(format!(
            "{n_pos} same-class pairs requested but only {pos_population} exist"
        )));
    }
    if n_neg > neg_population {
        return Err(DataError::InsufficientData(format!(
            "{n_neg} cross-class pairs requested but only {neg_population} exist"
        )));
    }

    let mut pairs = Vec::with_capacity(n_pos + n_neg);

    let mut pos_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pairs-pos"));
    if n_pos > 0 {
        if 3 * n_pos >= pos_population {
            // Dense request: enumerate and subsample to avoid rejection stalls.
            let mut all = Vec::with_capacity(pos_population);
            for c in 0..n_classes {
                let base = c * per_class;
                for i in 0..per_class {
                    for j in (i + 1)..per_class {
                        all.push((base + i, base + j));
                    }
                }
            }
            all.shuffle(&mut pos_rng);
            all.truncate(n_pos);
            pairs.extend(all.into_iter().map(|(a, b)| Pair { a, b, same: true }));
        } else {
            let mut seen = BTreeSet::new();
            while seen.len() < n_pos {
                let c = pos_rng.random_range(0..n_classes);
                let i = pos_rng.random_range(0..per_class);
                let j = pos_rng.random_range(0..per_class);
                if i == j {
                    continue;
                }
                let a = c * per_class + i.min(j);
                let b = c * per_class + i.max(j);
                if seen.insert((a, b)) {
                    pairs.push(Pair { a, b, same: true });
                }
            }
        }
    }

    let mut neg_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pairs-neg"));
    if n_neg > 0 {
        if 3 * n_neg >= neg_population {
            let mut all = Vec::with_capacity(neg_population);
            for a in 0..total {
                for b in (a + 1)..total {
                    if dataset.labels[a] != dataset.labels[b] {
                        all.push((a, b));
                    }
                }
            }
            all.shuffle(&mut neg_rng);
            all.truncate(n_neg);
            pairs.extend(all.into_iter().map(|(a, b)| Pair { a, b, same: false }));
        } else {
            let mut seen = BTreeSet::new();
            while seen.len() < n_neg {
                let a = neg_rng.random_range(0..total);
                let b = neg_rng.random_range(0..total);
                if dataset.labels[a] == dataset.labels[b] {
                    continue;
                }
                let key = (a.min(b), a.max(b));
                if seen.insert(key) {
                    pairs.push(Pair { a: key.0, b: key.1, same: false });
                }
            }
        }
    }

    Ok(PairList { pairs })
}

const MANIFEST_FILE: &str = "manifest.txt";
const SAMPLES_FILE: &str = "samples.csv";
const CENTERS_FILE: &str = "centers.csv";

/// Write `dataset` into `dir` as `manifest.txt`, `samples.csv`, and
/// `centers.csv`. Floats are serialized with 17 significant digits, so a
/// read-back is bit-identical.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let info = manifest(dataset);

    let mut entries = BTreeMap::new();
    entries.insert("n_classes".to_string(), dataset.spec.n_classes.to_string());
    entries.insert("dim".to_string(), dataset.spec.dim.to_string());
    entries.insert(
        "samples_per_class".to_string(),
        dataset.spec.samples_per_class.to_string(),
    );
    entries.insert(
        "concentration".to_string(),
        fmt_f64(dataset.spec.concentration),
    );
    entries.insert("hard_fraction".to_string(), fmt_f64(dataset.spec.hard_fraction));
    entries.insert("seed".to_string(), dataset.spec.seed.to_string());
    entries.insert("n_samples".to_string(), info.n_samples.to_string());
    entries.insert("center_cos_max".to_string(), fmt_f64(info.center_cos_max));
    entries.insert("center_cos_mean".to_string(), fmt_f64(info.center_cos_mean));
    entries.insert("checksum".to_string(), format!("{:016x}", info.checksum));
    std::fs::write(
        dir.join(MANIFEST_FILE),
        write_flat_config("adasin dataset manifest v1", &entries),
    )?;

    let mut samples = String::from("# adasin samples v1\n# columns: label,hard,x0..\n");
    samples.push_str(&sample_lines(dataset).join("\n"));
    samples.push('\n');
    std::fs::write(dir.join(SAMPLES_FILE), samples)?;

    let mut centers = String::from("# adasin centers v1\n# columns: class,x0..\n");
    for c in 0..dataset.spec.n_classes {
        let mut fields = vec![c.to_string()];
        fields.extend(dataset.centers.row(c).iter().map(|&v| fmt_f64(v)));
        centers.push_str(&fields.join(","));
        centers.push('\n');
    }
    std::fs::write(dir.join(CENTERS_FILE), centers)?;

    Ok(())
}

fn data_lines(content: &str) -> impl Iterator<Item = (usize, &str)> {
    content
        .lines()
        .enumerate()
        .map(|(i, line)| (i + 1, line.trim()))
        .filter(|(_, line)| !line.is_empty() && !line.starts_with('#'))
}

/// Read a dataset directory written by [`write_dataset`], verifying the
/// sample checksum.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let entries = parse_flat_config(&manifest_text).map_err(DataError::Parse)?;
    let get = |key: &str| {
        entries
            .get(key)
            .ok_or_else(|| DataError::Parse(format!("manifest missing key {key}")))
    };
    let spec = SyntheticSpec {
        n_classes: parse_usize(get("n_classes")?).map_err(DataError::Parse)?,
        dim: parse_usize(get("dim")?).map_err(DataError::Parse)?,
        samples_per_class: parse_usize(get("samples_per_class")?).map_err(DataError::Parse)?,
        concentration: parse_f64(get("concentration")?).map_err(DataError::Parse)?,
        hard_fraction: parse_f64(get("hard_fraction")?).map_err(DataError::Parse)?,
        seed: parse_u64(get("seed")?).map_err(DataError::Parse)?,
    };
    spec.validate()?;
    let expected_checksum = u64::from_str_radix(get("checksum")?, 16)
        .map_err(|e| DataError::Parse(format!("bad checksum: {e}")))?;

    let samples_text = std::fs::read_to_string(dir.join(SAMPLES_FILE))?;
    let mut features = Array2::zeros((spec.n_samples(), spec.dim));
    let mut labels = Vec::with_capacity(spec.n_samples());
    let mut hard = Vec::with_capacity(spec.n_samples());
    for (line_no, line) in data_lines(&samples_text) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != spec.dim + 2 {
            return Err(DataError::Parse(format!(
                "samples.csv line {line_no}: {} fields, expected {}",
                fields.len(),
                spec.dim + 2
            )));
        }
        let row = labels.len();
        if row >= spec.n_samples() {
            return Err(DataError::Parse(format!(
                "samples.csv has more than {} rows",
                spec.n_samples()
            )));
        }
        labels.push(parse_usize(fields[0]).map_err(DataError::Parse)?);
        hard.push(match fields[1] {
            "0" => false,
            "1" => true,
            other => {
                return Err(DataError::Parse(format!(
                    "samples.csv line {line_no}: hard flag {other:?}"
                )))
            }
        });
        for (j, field) in fields[2..].iter().enumerate() {
            features[[row, j]] = parse_f64(field).map_err(DataError::Parse)?;
        }
    }
    if labels.len() != spec.n_samples() {
        return Err(DataError::Parse(format!(
            "samples.csv has {} rows, manifest says {}",
            labels.len(),
            spec.n_samples()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= spec.n_classes) {
        return Err(DataError::Parse(format!("label {bad} out of range")));
    }

    let centers_text = std::fs::read_to_string(dir.join(CENTERS_FILE))?;
    let mut centers = Array2::zeros((spec.n_classes, spec.dim));
    let mut n_centers = 0usize;
    for (line_no, line) in data_lines(&centers_text) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != spec.dim + 1 {
            return Err(DataError::Parse(format!(
                "centers.csv line {line_no}: {} fields, expected {}",
                fields.len(),
                spec.dim + 1
            )));
        }
        let class = parse_usize(fields[0]).map_err(DataError::Parse)?;
        if class >= spec.n_classes {
            return Err(DataError::Parse(format!("center class {class} out of range")));
        }
        for (j, field) in fields[1..].iter().enumerate() {
            centers[[class, j]] = parse_f64(field).map_err(DataError::Parse)?;
        }
        n_centers += 1;
    }
    if n_centers != spec.n_classes {
        return Err(DataError::Parse(format!(
            "centers.csv has {n_centers} rows, expected {}",
            spec.n_classes
        )));
    }

    let dataset = Dataset { features, labels, hard, centers, spec };
    let actual = fnv1a64(sample_lines(&dataset).join("\n").as_bytes());
    if actual != expected_checksum {
        return Err(DataError::Parse(format!(
            "sample checksum {actual:016x} does not match manifest {expected_checksum:016x}"
        )));
    }
    Ok(dataset)
}

/// Write a pair list next to the dataset it indexes.
pub fn write_pairs(path: &Path, pairs: &PairList) -> Result<(), DataError> {
    let mut out = String::from("# adasin pairs v1\n# columns: index_a,index_b,same\n");
    for pair in &pairs.pairs {
        out.push_str(&format!("{},{},{}\n", pair.a, pair.b, pair.same as u8));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<PairList, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (line_no, line) in data_lines(&text) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(DataError::Parse(format!(
                "pairs line {line_no}: {} fields, expected 3",
                fields.len()
            )));
        }
        let a = parse_usize(fields[0]).map_err(DataError::Parse)?;
        let b = parse_usize(fields[1]).map_err(DataError::Parse)?;
        let same = match fields[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(DataError::Parse(format!(
                    "pairs line {line_no}: same flag {other:?}"
                )))
            }
        };
        pairs.push(Pair { a, b, same });
    }
    Ok(PairList { pairs })
}
