//! Experiment orchestration: training loops for the three modes, restart
//! selection, evaluation, sweeps, mode comparison and on-disk reports.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::baseline::{kmeans, Metric};
use crate::constraints::{flip_constraints, make_batches, make_dense_batches, sample_from_labels, Batch, ConstraintSet};
use crate::dataio::{gen_blobs, load_mnist_dir, normalize, normalize_global, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{contingency, dominant_clusters, hungarian_accuracy, nmi, purity, Assignment, ContingencyTable};
use crate::network::{backward, forward, init_params, mlp_specs, sgd_step, NetworkParams};
use crate::numeric::{argmax_row, Matrix, Rng};
use crate::pairloss::{
    all_pairs_loss, batch_loss_and_logit_grad, cross_entropy_loss_and_grad, hinge_embedding_loss_and_grad, LossConfig,
    ProbBatch, Reduction,
};

/// Clusters holding at least this fraction of the samples count as dominant.
pub const DOMINANT_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    ClusterKl,
    ClassifyXent,
    EmbedHinge,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::ClusterKl => "cluster_kl",
            Mode::ClassifyXent => "classify_xent",
            Mode::EmbedHinge => "embed_hinge",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster_kl" => Ok(Mode::ClusterKl),
            "classify_xent" => Ok(Mode::ClassifyXent),
            "embed_hinge" => Ok(Mode::EmbedHinge),
            _ => Err(Error::invalid(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// Gaussian blobs on a square grid in 2D.
    Blobs,
    /// MNIST IDX files in a directory.
    Mnist,
    /// `label,f1,...` CSV files.
    Csv,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Blobs => "blobs",
            Source::Mnist => "mnist",
            Source::Csv => "csv",
        })
    }
}

impl FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Source::Blobs),
            "mnist" => Ok(Source::Mnist),
            "csv" => Ok(Source::Csv),
            _ => Err(Error::invalid(format!("unknown data source {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Per-feature zero mean and unit variance.
    Feature,
    /// One mean and standard deviation shared by all features.
    Global,
    None,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Feature => "feature",
            Normalization::Global => "global",
            Normalization::None => "none",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(Normalization::Feature),
            "global" => Ok(Normalization::Global),
            "none" => Ok(Normalization::None),
            _ => Err(Error::invalid(format!("unknown normalization {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub source: Source,
    pub seed: u64,
    /// Training samples per class (MNIST subset size, or blob count).
    pub per_class: Option<usize>,
    /// Test samples per class; `None` keeps the whole test set (MNIST).
    pub test_per_class: Option<usize>,
    pub dir: PathBuf,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub blob_classes: usize,
    pub blob_sigma: f64,
    pub blob_spacing: f64,
    /// Statistics are always fitted on the training split.
    pub normalization: Normalization,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            source: Source::Blobs,
            seed: 0,
            per_class: Some(100),
            test_per_class: Some(50),
            dir: PathBuf::from("data/mnist"),
            train_csv: None,
            test_csv: None,
            blob_classes: 4,
            blob_sigma: 0.2,
            blob_spacing: 5.0,
            normalization: Normalization::Feature,
        }
    }
}

/// Where pairwise constraints come from.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSpec {
    /// Sampled constraint count; `None` uses every pair implied by the labels.
    pub count: Option<usize>,
    pub noise: f64,
    pub seed: u64,
    /// Pre-built constraint file, used instead of sampling.
    pub file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub hidden: Vec<usize>,
    /// Output nodes (clusters) in cluster and classification modes; number of
    /// k-means clusters in embedding mode.
    pub k: usize,
    pub mode: Mode,
    pub loss: LossConfig,
    pub lr: f64,
    pub momentum: f64,
    pub batch_tuples: usize,
    /// Samples per batch for classification and for full-constraint batches.
    pub batch_size: usize,
    pub epochs: usize,
    pub constraints: ConstraintSpec,
    pub restarts: usize,
    pub seed: u64,
    pub embed_dim: usize,
    pub hinge_margin: f64,
    pub kmeans_restarts: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSpec::default(),
            hidden: vec![500],
            k: 10,
            mode: Mode::ClusterKl,
            loss: LossConfig::default(),
            lr: 0.05,
            momentum: 0.9,
            batch_tuples: 256,
            batch_size: 64,
            epochs: 100,
            constraints: ConstraintSpec {
                count: None,
                noise: 0.0,
                seed: 0,
                file: None,
            },
            restarts: 5,
            seed: 0,
            embed_dim: 32,
            hinge_margin: 2.0,
            kmeans_restarts: 10,
            out_dir: None,
        }
    }
}

/// Every key accepted by [`ExperimentConfig::set`], in output order.
pub const CONFIG_KEYS: &[&str] = &[
    "data",
    "data_seed",
    "per_class",
    "test_per_class",
    "data_dir",
    "train_csv",
    "test_csv",
    "blob_classes",
    "blob_sigma",
    "blob_spacing",
    "normalization",
    "hidden",
    "k",
    "mode",
    "margin",
    "epsilon",
    "reduction",
    "lr",
    "momentum",
    "batch_tuples",
    "batch_size",
    "epochs",
    "constraints",
    "noise",
    "constraint_seed",
    "constraint_file",
    "restarts",
    "seed",
    "embed_dim",
    "hinge_margin",
    "kmeans_restarts",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::invalid(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_opt_count(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "all" | "full" => Ok(None),
        _ => parse(key, value).map(Some),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_opt<T: fmt::Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), |x| x.to_string())
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(String::new, |p| p.display().to_string())
}

impl ExperimentConfig {
    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let d = &mut self.data;
        match key {
            "data" => d.source = value.parse()?,
            "data_seed" => d.seed = parse(key, value)?,
            "per_class" => d.per_class = parse_opt_count(key, value)?,
            "test_per_class" => d.test_per_class = parse_opt_count(key, value)?,
            "data_dir" => d.dir = PathBuf::from(value),
            "train_csv" => d.train_csv = opt_path(value),
            "test_csv" => d.test_csv = opt_path(value),
            "blob_classes" => d.blob_classes = parse(key, value)?,
            "blob_sigma" => d.blob_sigma = parse(key, value)?,
            "blob_spacing" => d.blob_spacing = parse(key, value)?,
            "normalization" => d.normalization = value.parse()?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "k" => self.k = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "margin" => self.loss.margin = parse(key, value)?,
            "epsilon" => self.loss.epsilon = parse(key, value)?,
            "reduction" => {
                self.loss.reduction = match value {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    _ => return Err(Error::invalid(format!("reduction must be sum or mean, got {value:?}"))),
                }
            }
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "batch_tuples" => self.batch_tuples = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "constraints" => self.constraints.count = parse_opt_count(key, value)?,
            "noise" => self.constraints.noise = parse(key, value)?,
            "constraint_seed" => self.constraints.seed = parse(key, value)?,
            "constraint_file" => self.constraints.file = opt_path(value),
            "restarts" => self.restarts = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "hinge_margin" => self.hinge_margin = parse(key, value)?,
            "kmeans_restarts" => self.kmeans_restarts = parse(key, value)?,
            "out_dir" => self.out_dir = opt_path(value),
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.data;
        Some(match key {
            "data" => d.source.to_string(),
            "data_seed" => d.seed.to_string(),
            "per_class" => show_opt(&d.per_class, "all"),
            "test_per_class" => show_opt(&d.test_per_class, "all"),
            "data_dir" => d.dir.display().to_string(),
            "train_csv" => show_path(&d.train_csv),
            "test_csv" => show_path(&d.test_csv),
            "blob_classes" => d.blob_classes.to_string(),
            "blob_sigma" => d.blob_sigma.to_string(),
            "blob_spacing" => d.blob_spacing.to_string(),
            "normalization" => d.normalization.to_string(),
            "hidden" => self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
            "k" => self.k.to_string(),
            "mode" => self.mode.to_string(),
            "margin" => self.loss.margin.to_string(),
            "epsilon" => self.loss.epsilon.to_string(),
            "reduction" => match self.loss.reduction {
                Reduction::Sum => "sum".into(),
                Reduction::Mean => "mean".into(),
            },
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "batch_tuples" => self.batch_tuples.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "constraints" => show_opt(&self.constraints.count, "all"),
            "noise" => self.constraints.noise.to_string(),
            "constraint_seed" => self.constraints.seed.to_string(),
            "constraint_file" => show_path(&self.constraints.file),
            "restarts" => self.restarts.to_string(),
            "seed" => self.seed.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "hinge_margin" => self.hinge_margin.to_string(),
            "kmeans_restarts" => self.kmeans_restarts.to_string(),
            "out_dir" => show_path(&self.out_dir),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Every field as `key = value` lines, readable by [`apply_text`](Self::apply_text).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be at least 1"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "need lr > 0 and momentum in [0, 1), got {} and {}",
                self.lr, self.momentum
            )));
        }
        if self.batch_tuples == 0 || self.batch_size < 2 {
            return Err(Error::invalid("batch_tuples must be >= 1 and batch_size >= 2"));
        }
        if !(0.0..=1.0).contains(&self.constraints.noise) {
            return Err(Error::invalid(format!("noise must lie in [0, 1], got {}", self.constraints.noise)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        match self.mode {
            Mode::ClusterKl => self.loss.validate(self.k),
            Mode::ClassifyXent => Ok(()),
            Mode::EmbedHinge if self.embed_dim == 0 || !(self.hinge_margin > 0.0) => {
                Err(Error::invalid("embed_hinge needs embed_dim >= 1 and hinge_margin > 0"))
            }
            Mode::EmbedHinge => Ok(()),
        }
    }

    /// Network output width for this mode.
    pub fn output_dim(&self) -> usize {
        match self.mode {
            Mode::EmbedHinge => self.embed_dim,
            _ => self.k,
        }
    }
}

fn blob_centers(classes: usize, spacing: f64) -> Matrix {
    let side = (classes as f64).sqrt().ceil() as usize;
    let data = (0..classes)
        .flat_map(|c| [spacing * (c % side) as f64, spacing * (c / side) as f64])
        .collect();
    Matrix::new(classes, 2, data).expect("classes >= 1")
}

/// Training and (if available) test sets for `spec`, normalized with
/// training statistics.
pub fn load_data(spec: &DataSpec) -> Result<(Dataset, Option<Dataset>)> {
    let (train, test) = match spec.source {
        Source::Blobs => {
            if spec.blob_classes == 0 {
                return Err(Error::invalid("blob_classes must be at least 1"));
            }
            let centers = blob_centers(spec.blob_classes, spec.blob_spacing);
            let rng = Rng::new(spec.seed);
            let per_class = spec.per_class.unwrap_or(100);
            let train = gen_blobs(&centers, spec.blob_sigma, per_class, &mut rng.derive(0))?;
            let test = match spec.test_per_class {
                Some(0) => None,
                n => Some(gen_blobs(&centers, spec.blob_sigma, n.unwrap_or(per_class), &mut rng.derive(1))?),
            };
            (train, test)
        }
        Source::Mnist => {
            let (train, test) = load_mnist_dir(&spec.dir)?;
            let train = match spec.per_class {
                Some(n) => train.subset_per_class(n, spec.seed)?,
                None => train,
            };
            let test = match spec.test_per_class {
                Some(0) => None,
                Some(n) => Some(test.subset_per_class(n, spec.seed)?),
                None => Some(test),
            };
            (train, test)
        }
        Source::Csv => {
            let read = |p: &Path| -> Result<Dataset> { Dataset::read_csv(std::io::BufReader::new(fs::File::open(p)?)) };
            let train_path = spec
                .train_csv
                .as_deref()
                .ok_or_else(|| Error::invalid("csv source needs train_csv"))?;
            let train = read(train_path)?;
            let test = spec.test_csv.as_deref().map(read).transpose()?;
            (train, test)
        }
    };
    let norm = match spec.normalization {
        Normalization::None => return Ok((train, test)),
        Normalization::Feature => normalize,
        Normalization::Global => normalize_global,
    };
    let test = test.map(|t| norm(&train, &t)).transpose()?;
    Ok((norm(&train, &train)?, test))
}

/// Constraint set for a training set with labels, per `spec`; `None` when
/// every label-implied pair should be used.
pub fn build_constraints(spec: &ConstraintSpec, labels: &[usize]) -> Result<Option<ConstraintSet>> {
    let rng = Rng::new(spec.seed);
    let set = if let Some(path) = &spec.file {
        let set = ConstraintSet::read(std::io::BufReader::new(fs::File::open(path)?))?;
        if set.n_samples() > labels.len() {
            return Err(Error::invalid(format!(
                "constraint file covers {} samples but the training set has {}",
                set.n_samples(),
                labels.len()
            )));
        }
        set
    } else {
        match spec.count {
            Some(m) => sample_from_labels(labels, m, &mut rng.derive(0))?,
            None if spec.noise > 0.0 => {
                return Err(Error::invalid("noise needs a finite constraint count"));
            }
            None => return Ok(None),
        }
    };
    if spec.noise > 0.0 {
        return flip_constraints(&set, spec.noise, &mut rng.derive(1)).map(Some);
    }
    Ok(Some(set))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub assignments: Vec<usize>,
    pub table: ContingencyTable,
    pub purity: f64,
    pub nmi: f64,
    pub hungarian: Assignment,
    pub dominant_clusters: usize,
}

/// Metrics of a hard clustering against labels.
pub fn evaluate_assignments(assignments: Vec<usize>, labels: &[usize], k: usize, classes: usize) -> Result<Evaluation> {
    let table = contingency(&assignments, labels, k, classes)?;
    Ok(Evaluation {
        purity: purity(&table)?,
        nmi: nmi(&table),
        hungarian: hungarian_accuracy(&table),
        dominant_clusters: dominant_clusters(&table, DOMINANT_FRACTION),
        assignments,
        table,
    })
}

pub fn predict(params: &NetworkParams, x: &Matrix) -> Result<Vec<usize>> {
    let trace = forward(params, x)?;
    trace.logits().row_iter().map(argmax_row).collect()
}

/// Argmax cluster per sample, then contingency, purity, NMI, assignment
/// accuracy and dominant clusters.
pub fn evaluate(params: &NetworkParams, data: &Dataset, k: usize) -> Result<Evaluation> {
    let labels = data.labels()?;
    evaluate_assignments(predict(params, &data.features)?, labels, k, data.class_count)
}

fn nearest_centroid(points: &Matrix, centroids: &Matrix) -> Vec<usize> {
    points
        .row_iter()
        .map(|p| {
            centroids
                .row_iter()
                .map(|c| p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, d)| if d < acc.1 { (i, d) } else { acc })
                .0
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestartRecord {
    pub index: usize,
    /// Per epoch: summed batch losses, or their mean under mean reduction.
    pub epoch_losses: Vec<f64>,
    /// Training objective over the whole training set after the last epoch.
    pub final_loss: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: NetworkParams,
    /// k-means centroids in embedding space (embedding mode only).
    pub centroids: Option<Matrix>,
}

impl TrainedModel {
    pub fn assign(&self, x: &Matrix) -> Result<Vec<usize>> {
        match &self.centroids {
            Some(c) => Ok(nearest_centroid(forward(&self.params, x)?.logits(), c)),
            None => predict(&self.params, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Constraints used for training, `None` for labels or all label pairs.
    pub constraint_count: Option<usize>,
    pub similar_count: Option<usize>,
    pub restarts: Vec<RestartRecord>,
    pub chosen: usize,
    pub train: Evaluation,
    pub test: Option<Evaluation>,
    /// Test accuracy: argmax against labels for classification, otherwise the
    /// cluster-to-class map fitted on the training set applied to test.
    pub test_accuracy: Option<f64>,
    pub wall_clock: Duration,
    pub model: TrainedModel,
}

struct Prepared<'a> {
    cfg: &'a ExperimentConfig,
    train: &'a Dataset,
    labels: Option<&'a [usize]>,
    constraints: Option<ConstraintSet>,
}

impl Prepared<'_> {
    fn batches(&self, rng: &mut Rng) -> Result<Vec<Batch>> {
        match (self.cfg.mode, &self.constraints, self.labels) {
            (Mode::ClassifyXent, _, _) => {
                let mut order: Vec<usize> = (0..self.train.len()).collect();
                rng.shuffle(&mut order);
                Ok(order
                    .chunks(self.cfg.batch_size)
                    .map(|c| {
                        let mut samples = c.to_vec();
                        samples.sort_unstable();
                        Batch { samples, tuples: Vec::new() }
                    })
                    .collect())
            }
            (_, Some(set), _) => make_batches(set, self.cfg.batch_tuples, rng),
            (_, None, Some(labels)) => make_dense_batches(labels, self.cfg.batch_size, rng),
            (_, None, None) => Err(Error::invalid("no constraint source")),
        }
    }

    fn batch_loss(&self, logits: &Matrix, batch: &Batch) -> Result<(f64, Matrix)> {
        match self.cfg.mode {
            Mode::ClusterKl => batch_loss_and_logit_grad(logits, &batch.tuples, &self.cfg.loss),
            Mode::EmbedHinge => hinge_embedding_loss_and_grad(logits, &batch.tuples, self.cfg.hinge_margin),
            Mode::ClassifyXent => {
                let labels = self.labels.expect("checked");
                let y: Vec<usize> = batch.samples.iter().map(|&s| labels[s]).collect();
                cross_entropy_loss_and_grad(logits, &y)
            }
        }
    }

    /// Full training objective for restart selection.
    fn final_loss(&self, params: &NetworkParams) -> Result<f64> {
        let out = forward(params, &self.train.features)?;
        let out = out.logits();
        let cfg = self.cfg;
        Ok(match (cfg.mode, &self.constraints) {
            (Mode::ClassifyXent, _) => cross_entropy_loss_and_grad(out, self.labels.expect("checked"))?.0,
            (Mode::ClusterKl, Some(set)) => batch_loss_and_logit_grad(out, set.tuples(), &cfg.loss)?.0,
            (Mode::EmbedHinge, Some(set)) => hinge_embedding_loss_and_grad(out, set.tuples(), cfg.hinge_margin)?.0,
            (Mode::ClusterKl, None) => {
                let labels = self.labels.expect("checked");
                let total = all_pairs_loss(&ProbBatch::from_logits(out, cfg.loss.epsilon), labels, cfg.loss.margin)?;
                match cfg.loss.reduction {
                    Reduction::Sum => total,
                    Reduction::Mean => total / pair_count(labels.len()).max(1) as f64,
                }
            }
            (Mode::EmbedHinge, None) => all_pairs_hinge(out, self.labels.expect("checked"), cfg.hinge_margin),
        })
    }
}

fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

fn all_pairs_hinge(e: &Matrix, labels: &[usize], margin: f64) -> f64 {
    let mut total = 0.0;
    for a in 0..e.rows() {
        for b in a + 1..e.rows() {
            let sq: f64 = e.row(a).iter().zip(e.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
            total += if labels[a] == labels[b] {
                sq
            } else {
                (margin - sq.sqrt()).max(0.0).powi(2)
            };
        }
    }
    total
}

fn train_restart(prep: &Prepared<'_>, index: usize) -> (NetworkParams, RestartRecord) {
    let cfg = prep.cfg;
    let mut rng = Rng::new(cfg.seed).derive(index as u64);
    let mut dims = vec![prep.train.dim()];
    dims.extend(&cfg.hidden);
    dims.push(cfg.output_dim());
    let mut params = init_params(&mlp_specs(&dims), &mut rng).expect("validated dims");
    let mut record = RestartRecord {
        index,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        final_loss: None,
        failure: None,
    };
    let outcome = (|| -> Result<f64> {
        for _ in 0..cfg.epochs {
            let batches = prep.batches(&mut rng)?;
            let mut total = 0.0;
            for batch in &batches {
                let x = prep.train.features.select_rows(&batch.samples)?;
                let trace = forward(&params, &x)?;
                let (loss, dlogits) = prep.batch_loss(trace.logits(), batch)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                total += loss;
                let grads = backward(&params, &trace, &dlogits)?;
                sgd_step(&mut params, &grads, cfg.lr, cfg.momentum)?;
            }
            if cfg.loss.reduction == Reduction::Mean && !batches.is_empty() {
                total /= batches.len() as f64;
            }
            record.epoch_losses.push(total);
        }
        let loss = prep.final_loss(&params)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("final training loss"));
        }
        Ok(loss)
    })();
    match outcome {
        Ok(loss) => record.final_loss = Some(loss),
        Err(e) => record.failure = Some(e.to_string()),
    }
    (params, record)
}

/// Trains `cfg.restarts` networks and reports the one with the lowest final
/// training loss, evaluated on the training set and the test set.
pub fn train(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let (train, test) = load_data(&cfg.data)?;
    train_on(cfg, &train, test.as_ref())
}

/// [`train`] on already loaded data.
pub fn train_on(cfg: &ExperimentConfig, train: &Dataset, test: Option<&Dataset>) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let labels = train.labels.as_deref();
    let constraints = match (cfg.mode, labels) {
        (Mode::ClassifyXent, None) => return Err(Error::invalid("classify_xent needs labels")),
        (Mode::ClassifyXent, Some(_)) => None,
        (_, Some(l)) => build_constraints(&cfg.constraints, l)?,
        (_, None) => match &cfg.constraints.file {
            Some(_) => build_constraints(&cfg.constraints, &vec![0; train.len()])?,
            None => return Err(Error::invalid("clustering without labels needs a constraint file")),
        },
    };
    if cfg.mode == Mode::ClassifyXent && cfg.k < train.class_count {
        return Err(Error::invalid(format!(
            "classification needs k >= {} classes, got {}",
            train.class_count, cfg.k
        )));
    }
    let prep = Prepared {
        cfg,
        train,
        labels,
        constraints,
    };

    let mut best: Option<(f64, NetworkParams)> = None;
    let mut chosen = 0;
    let mut restarts = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let (params, record) = train_restart(&prep, r);
        if let Some(loss) = record.final_loss {
            if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                best = Some((loss, params));
                chosen = r;
            }
        }
        restarts.push(record);
    }
    let (_, params) = best.ok_or_else(|| {
        Error::invalid(format!(
            "all {} restarts diverged: {}",
            cfg.restarts,
            restarts.last().and_then(|r| r.failure.clone()).unwrap_or_default()
        ))
    })?;

    let centroids = match cfg.mode {
        Mode::EmbedHinge => {
            let emb = forward(&params, &train.features)?;
            let mut rng = Rng::new(cfg.seed).derive(u64::MAX);
            Some(kmeans(emb.logits(), cfg.k, Metric::Euclidean, cfg.kmeans_restarts, &mut rng)?.centroids)
        }
        _ => None,
    };
    let model = TrainedModel { params, centroids };

    let score = |data: &Dataset| -> Result<Option<Evaluation>> {
        match &data.labels {
            Some(l) => evaluate_assignments(model.assign(&data.features)?, l, cfg.k, data.class_count).map(Some),
            None => Ok(None),
        }
    };
    let train_eval = score(train)?.ok_or_else(|| Error::invalid("training set has no labels to evaluate"))?;
    let test_eval = test.map(score).transpose()?.flatten();
    let test_accuracy = match (&test_eval, test) {
        (Some(ev), Some(t)) => {
            let labels = t.labels()?;
            Some(match cfg.mode {
                Mode::ClassifyXent => {
                    ev.assignments.iter().zip(labels).filter(|(a, y)| a == y).count() as f64 / labels.len() as f64
                }
                _ => train_eval.hungarian.accuracy_on(&ev.assignments, labels),
            })
        }
        _ => None,
    };

    Ok(RunReport {
        config: cfg.clone(),
        train_samples: train.len(),
        test_samples: test.map_or(0, Dataset::len),
        constraint_count: prep.constraints.as_ref().map(ConstraintSet::len),
        similar_count: prep.constraints.as_ref().map(ConstraintSet::similar_count),
        restarts,
        chosen,
        train: train_eval,
        test: test_eval,
        test_accuracy,
        wall_clock: start.elapsed(),
        model,
    })
}

fn metric_rows(ev: &Evaluation) -> [(&'static str, f64); 4] {
    [
        ("purity", ev.purity),
        ("nmi", ev.nmi),
        ("hungarian_accuracy", ev.hungarian.accuracy),
        ("dominant_clusters", ev.dominant_clusters as f64),
    ]
}

impl RunReport {
    /// `scope,name,value` rows. Contains no timing, so identical runs produce
    /// identical text.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scope,name,value\n");
        let mut row = |scope: &str, name: &str, value: String| {
            let _ = writeln!(s, "{scope},{name},{value}");
        };
        row("run", "mode", self.config.mode.to_string());
        row("run", "k", self.config.k.to_string());
        row("run", "train_samples", self.train_samples.to_string());
        row("run", "test_samples", self.test_samples.to_string());
        row("run", "constraints", show_opt(&self.constraint_count, "all"));
        row("run", "similar_constraints", show_opt(&self.similar_count, "all"));
        row("run", "chosen_restart", self.chosen.to_string());
        row("run", "selection", "min_final_training_loss".into());
        for r in &self.restarts {
            let scope = format!("restart_{}", r.index);
            row(&scope, "final_loss", show_opt(&r.final_loss, ""));
            row(&scope, "status", r.failure.as_ref().map_or("ok".into(), |f| format!("failed: {}", f.replace(',', ";"))));
            for (e, loss) in r.epoch_losses.iter().enumerate() {
                row(&scope, &format!("epoch_{}", e + 1), loss.to_string());
            }
        }
        for (split, ev) in [("train", Some(&self.train)), ("test", self.test.as_ref())] {
            if let Some(ev) = ev {
                for (name, v) in metric_rows(ev) {
                    row(split, name, v.to_string());
                }
            }
        }
        if let Some(acc) = self.test_accuracy {
            row("test", "accuracy", acc.to_string());
        }
        s
    }

    /// Contingency tables of both splits: `split,cluster,<class columns>`.
    pub fn contingency_csv(&self) -> String {
        let mut s = String::new();
        for (split, ev) in [("train", Some(&self.train)), ("test", self.test.as_ref())] {
            let Some(ev) = ev else { continue };
            for (n, line) in ev.table.to_csv().lines().enumerate() {
                if n == 0 && !s.is_empty() {
                    continue;
                }
                let prefix = if n == 0 { "split" } else { split };
                let _ = writeln!(s, "{prefix},{line}");
            }
        }
        s
    }

    /// Full configuration plus run provenance; loadable as a config file.
    pub fn manifest(&self) -> String {
        let mut s = format!("# pairclust {}\n", env!("CARGO_PKG_VERSION"));
        s.push_str(&self.config.to_text());
        let _ = writeln!(s, "# chosen_restart = {}", self.chosen);
        let seeds: Vec<String> = (0..self.config.restarts)
            .map(|r| Rng::new(self.config.seed).derive(r as u64).seed().to_string())
            .collect();
        let _ = writeln!(s, "# restart_seeds = {}", seeds.join(","));
        let _ = writeln!(s, "# wall_clock_secs = {:.3}", self.wall_clock.as_secs_f64());
        s
    }

    /// Writes `report.csv`, `contingency.csv`, `manifest` and `model.bin`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("contingency.csv"), self.contingency_csv())?;
        fs::write(dir.join("manifest"), self.manifest())?;
        self.model.params.save(std::io::BufWriter::new(fs::File::create(dir.join("model.bin"))?))?;
        if let Some(c) = &self.model.centroids {
            let mut text = String::new();
            for row in c.row_iter() {
                let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                let _ = writeln!(text, "{}", cells.join(","));
            }
            fs::write(dir.join("centroids.csv"), text)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    ConstraintCount,
    NoiseRate,
    K,
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constraints" | "constraint_count" => Ok(SweepAxis::ConstraintCount),
            "noise" | "noise_rate" => Ok(SweepAxis::NoiseRate),
            "k" => Ok(SweepAxis::K),
            _ => Err(Error::invalid(format!("unknown sweep axis {s:?}"))),
        }
    }
}

impl SweepAxis {
    fn key(self) -> &'static str {
        match self {
            SweepAxis::ConstraintCount => "constraints",
            SweepAxis::NoiseRate => "noise",
            SweepAxis::K => "k",
        }
    }
}

/// Default constraint-count grid for sweeps.
pub const DEFAULT_CONSTRAINT_GRID: &[&str] = &["300", "1200", "12000"];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis_value: String,
    pub split: String,
    pub metric: String,
    pub value: Option<f64>,
    pub error: Option<String>,
}

/// Long-format sweep table: `axis_value,split,metric,value,error`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("axis_value,split,metric,value,error\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.axis_value,
            r.split,
            r.metric,
            show_opt(&r.value, ""),
            r.error.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    s
}

/// Rows describing one finished run, as emitted by [`sweep`].
pub fn report_rows(axis_value: &str, report: &RunReport) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    let mut push = |split: &str, metric: &str, value: f64| {
        rows.push(SweepRow {
            axis_value: axis_value.to_string(),
            split: split.to_string(),
            metric: metric.to_string(),
            value: Some(value),
            error: None,
        })
    };
    for (split, ev) in [("train", Some(&report.train)), ("test", report.test.as_ref())] {
        if let Some(ev) = ev {
            for (name, v) in metric_rows(ev) {
                push(split, name, v);
            }
        }
    }
    if let Some(acc) = report.test_accuracy {
        push("test", "accuracy", acc);
    }
    rows
}

/// One train-and-evaluate per value of `axis`, other settings shared. A
/// failing point becomes a single row carrying its error. When the base config
/// has an output directory each point writes into `<axis>_<value>` below it.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    let (train, test) = load_data(&base.data)?;
    let mut rows = Vec::new();
    for value in values {
        let run = || -> Result<RunReport> {
            let mut cfg = base.clone();
            cfg.set(axis.key(), value)?;
            if let Some(dir) = &base.out_dir {
                cfg.out_dir = Some(dir.join(format!("{}_{value}", axis.key())));
            }
            let report = train_on(&cfg, &train, test.as_ref())?;
            if let Some(dir) = &cfg.out_dir {
                report.write_to(dir)?;
            }
            Ok(report)
        };
        match run() {
            Ok(report) => rows.extend(report_rows(value, &report)),
            Err(e) => rows.push(SweepRow {
                axis_value: value.clone(),
                split: String::new(),
                metric: String::new(),
                value: None,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub per_class: Option<usize>,
    pub train_samples: usize,
    pub clustering: f64,
    pub classification: f64,
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("per_class,train_samples,clustering_accuracy,classification_accuracy,difference\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            show_opt(&r.per_class, "all"),
            r.train_samples,
            r.clustering,
            r.classification,
            r.clustering - r.classification
        );
    }
    s
}

/// Test accuracy of clustering (train-fitted cluster-to-class map) against
/// classification on the same data, backbone and seeds, for each training
/// size. An empty `per_class` list uses the configured size.
pub fn compare_modes(
    cluster: &ExperimentConfig,
    classify: &ExperimentConfig,
    per_class: &[usize],
) -> Result<Vec<CompareRow>> {
    if cluster.mode != Mode::ClusterKl || classify.mode != Mode::ClassifyXent {
        return Err(Error::invalid("compare needs a cluster_kl and a classify_xent config"));
    }
    if cluster.hidden != classify.hidden || cluster.data != classify.data || cluster.seed != classify.seed {
        return Err(Error::invalid("compared configs must share data, backbone and seeds"));
    }
    let sizes: Vec<Option<usize>> = if per_class.is_empty() {
        vec![cluster.data.per_class]
    } else {
        per_class.iter().copied().map(Some).collect()
    };
    let mut rows = Vec::new();
    for size in sizes {
        let mut a = cluster.clone();
        let mut b = classify.clone();
        a.data.per_class = size;
        b.data.per_class = size;
        let (train, test) = load_data(&a.data)?;
        let test = test.ok_or_else(|| Error::invalid("compare needs a test set"))?;
        let ra = train_on(&a, &train, Some(&test))?;
        let rb = train_on(&b, &train, Some(&test))?;
        rows.push(CompareRow {
            per_class: size,
            train_samples: train.len(),
            clustering: ra.test_accuracy.expect("labeled test set"),
            classification: rb.test_accuracy.expect("labeled test set"),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, Layer};

    fn blobs_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(
            "data = blobs\nper_class = 50\ntest_per_class = 25\nhidden = 16\nk = 8\n\
             constraints = 200\nepochs = 5\nrestarts = 2\nlr = 0.01",
        )
        .unwrap();
        cfg
    }

    #[test]
    fn config_text_round_trips() {
        let mut cfg = blobs_cfg();
        cfg.set("reduction", "mean").unwrap();
        cfg.set("out_dir", "runs/x").unwrap();
        cfg.set("hidden", "").unwrap();
        let mut back = ExperimentConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.set("bogus", "1").is_err());
        assert!(cfg.set("k", "ten").is_err());
        assert!(matches!(
            ExperimentConfig::default().apply_text("k = 3\nno equals"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for (key, value) in [("lr", "0"), ("momentum", "1"), ("restarts", "0"), ("k", "0"), ("noise", "1.5")] {
            let mut cfg = blobs_cfg();
            cfg.set(key, value).unwrap();
            assert!(cfg.validate().is_err(), "{key} = {value}");
        }
    }

    #[test]
    fn zero_epochs_reports_the_initial_network() {
        let mut cfg = blobs_cfg();
        cfg.epochs = 0;
        cfg.restarts = 1;
        let report = train(&cfg).unwrap();
        let (tr, _) = load_data(&cfg.data).unwrap();
        let mut dims = vec![2];
        dims.extend(&cfg.hidden);
        dims.push(cfg.k);
        let init = init_params(&mlp_specs(&dims), &mut Rng::new(cfg.seed).derive(0)).unwrap();
        assert_eq!(report.train, evaluate(&init, &tr, cfg.k).unwrap());
        assert!(report.restarts[0].epoch_losses.is_empty());
    }

    #[test]
    fn chosen_restart_has_minimal_final_loss() {
        let report = train(&blobs_cfg()).unwrap();
        let losses: Vec<f64> = report.restarts.iter().map(|r| r.final_loss.unwrap()).collect();
        let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(losses[report.chosen], min);
    }

    #[test]
    fn divergence_is_recorded_not_fatal() {
        let mut cfg = blobs_cfg();
        cfg.lr = 1e300;
        cfg.momentum = 0.0;
        cfg.restarts = 1;
        let err = train(&cfg).unwrap_err();
        assert!(err.to_string().contains("diverged"), "{err}");
    }

    #[test]
    fn zero_network_puts_everything_in_cluster_zero() {
        let zero = NetworkParams::from_layers(vec![
            Layer::from_parts(Activation::Relu, Matrix::zeros(3, 2), vec![0.0; 3]).unwrap(),
            Layer::from_parts(Activation::Identity, Matrix::zeros(4, 3), vec![0.0; 4]).unwrap(),
        ])
        .unwrap();
        let (tr, _) = load_data(&blobs_cfg().data).unwrap();
        let ev = evaluate(&zero, &tr, 4).unwrap();
        assert!(ev.assignments.iter().all(|&a| a == 0));
        assert_eq!(ev.nmi, 0.0);
        assert_eq!(ev.dominant_clusters, 1);
    }

    #[test]
    fn classification_requires_labels() {
        let mut cfg = blobs_cfg();
        cfg.mode = Mode::ClassifyXent;
        let (tr, _) = load_data(&cfg.data).unwrap();
        let unlabeled = Dataset::new(tr.features.clone(), None, tr.class_count).unwrap();
        assert!(train_on(&cfg, &unlabeled, None).is_err());
        cfg.mode = Mode::ClusterKl;
        assert!(train_on(&cfg, &unlabeled, None).is_err());
    }

    #[test]
    fn noise_without_count_is_rejected() {
        let spec = ConstraintSpec {
            count: None,
            noise: 0.1,
            seed: 0,
            file: None,
        };
        assert!(build_constraints(&spec, &[0, 1, 0]).is_err());
    }

    #[test]
    fn sweep_reports_failures_as_rows() {
        let mut cfg = blobs_cfg();
        cfg.restarts = 1;
        cfg.epochs = 1;
        let rows = sweep(&cfg, SweepAxis::ConstraintCount, &["50".into(), "999999".into()]).unwrap();
        assert!(rows.iter().any(|r| r.axis_value == "50" && r.metric == "purity"));
        let bad: Vec<_> = rows.iter().filter(|r| r.axis_value == "999999").collect();
        assert_eq!(bad.len(), 1);
        assert!(bad[0].error.is_some() && bad[0].value.is_none());
        assert!(sweep(&cfg, SweepAxis::K, &[]).is_err());
    }
}
