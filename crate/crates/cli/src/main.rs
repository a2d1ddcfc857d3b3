use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pairclust::baseline::{embed, kmeans, Metric};
use pairclust::gradcheck::{run_suite, DEFAULT_STEP};
use pairclust::network::NetworkParams;
use pairclust::numeric::{Matrix, Rng};
use pairclust::runner::{
    build_constraints, compare_csv, compare_modes, evaluate, evaluate_assignments, load_data, sweep, sweep_csv,
    ExperimentConfig, Mode, Normalization, SweepAxis, DEFAULT_CONSTRAINT_GRID,
};

/// Tolerance of the finite-difference suite.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(version, about = "Clustering networks trained from pairwise constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with random restarts and write report.csv, contingency.csv, manifest and model.bin.
    Train(ConfigArgs),
    /// Evaluate a saved network on the configured data.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train once per value of one axis and write a long-format CSV.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_parser = ["constraints", "noise", "k"])]
        axis: String,
        /// Comma-separated values; constraint sweeps default to 300,1200,12000.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Test accuracy of clustering against classification on the same backbone.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        classify_lr: Option<f64>,
        #[arg(long)]
        classify_epochs: Option<usize>,
        /// Training sizes per class; defaults to the configured size.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Sample (and optionally corrupt) a constraint file from labeled data.
    GenConstraints {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a Gaussian blob dataset as CSV.
    GenBlobs {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        #[arg(long, default_value_t = 5.0)]
        spacing: f64,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare every analytic gradient with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        configs: usize,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
    },
    /// k-means on raw features, or on a layer of a saved network.
    KmeansBaseline {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        /// 0-based layer whose output is clustered (default: last).
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
        metric: MetricArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Euclidean,
    Cosine,
}

macro_rules! config_flags {
    ($($field:ident => $key:literal),* $(,)?) => {
        /// Experiment settings. A `--config` file supplies defaults; flags override it.
        #[derive(Args, Default)]
        struct ConfigArgs {
            /// Plain-text `key = value` file.
            #[arg(long)]
            config: Option<PathBuf>,
            $(
                #[arg(long)]
                $field: Option<String>,
            )*
        }

        impl ConfigArgs {
            fn overrides(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(if let Some(v) = &self.$field {
                    out.push(($key, v.as_str()));
                })*
                out
            }
        }
    };
}

config_flags! {
    data => "data",
    data_seed => "data_seed",
    per_class => "per_class",
    test_per_class => "test_per_class",
    data_dir => "data_dir",
    train_csv => "train_csv",
    test_csv => "test_csv",
    blob_classes => "blob_classes",
    blob_sigma => "blob_sigma",
    blob_spacing => "blob_spacing",
    normalization => "normalization",
    hidden => "hidden",
    k => "k",
    mode => "mode",
    margin => "margin",
    epsilon => "epsilon",
    reduction => "reduction",
    lr => "lr",
    momentum => "momentum",
    batch_tuples => "batch_tuples",
    batch_size => "batch_size",
    epochs => "epochs",
    constraints => "constraints",
    noise => "noise",
    constraint_seed => "constraint_seed",
    constraint_file => "constraint_file",
    restarts => "restarts",
    seed => "seed",
    embed_dim => "embed_dim",
    hinge_margin => "hinge_margin",
    kmeans_restarts => "kmeans_restarts",
    out_dir => "out_dir",
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        for (key, value) in self.overrides() {
            cfg.set(key, value).with_context(|| format!("--{}", key.replace('_', "-")))?;
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/latest"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn summary_line(split: &str, ev: &pairclust::runner::Evaluation) -> String {
    format!(
        "{split}: purity {:.4}  nmi {:.4}  hungarian {:.4}  dominant {}",
        ev.purity, ev.nmi, ev.hungarian.accuracy, ev.dominant_clusters
    )
}

fn train_cmd(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let report = pairclust::runner::train(&cfg)?;
    let dir = out_dir(&cfg);
    report.write_to(&dir)?;
    println!(
        "restart {} chosen of {} ({:.1}s)",
        report.chosen,
        cfg.restarts,
        report.wall_clock.as_secs_f64()
    );
    println!("{}", summary_line("train", &report.train));
    if let Some(test) = &report.test {
        println!("{}", summary_line("test", test));
    }
    if let Some(acc) = report.test_accuracy {
        println!("test accuracy {acc:.4}");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn eval_cmd(args: &ConfigArgs, model: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let file = fs::File::open(model).with_context(|| format!("opening {}", model.display()))?;
    let params = NetworkParams::load(BufReader::new(file))?;
    let (train, test) = load_data(&cfg.data)?;
    let k = params.output_dim();
    let mut out = io::stdout().lock();
    writeln!(out, "split,metric,value")?;
    for (split, data) in [("train", Some(&train)), ("test", test.as_ref())] {
        let Some(data) = data else { continue };
        let ev = evaluate(&params, data, k)?;
        writeln!(out, "{split},purity,{}", ev.purity)?;
        writeln!(out, "{split},nmi,{}", ev.nmi)?;
        writeln!(out, "{split},hungarian_accuracy,{}", ev.hungarian.accuracy)?;
        writeln!(out, "{split},dominant_clusters,{}", ev.dominant_clusters)?;
    }
    Ok(())
}

fn sweep_cmd(args: &ConfigArgs, axis: &str, values: &[String]) -> Result<()> {
    let cfg = args.resolve()?;
    let axis: SweepAxis = axis.parse()?;
    let values: Vec<String> = match (values.is_empty(), axis) {
        (false, _) => values.to_vec(),
        (true, SweepAxis::ConstraintCount) => DEFAULT_CONSTRAINT_GRID.iter().map(|s| s.to_string()).collect(),
        (true, _) => bail!("--values is required for this axis"),
    };
    let rows = sweep(&cfg, axis, &values)?;
    let path = out_dir(&cfg).join("sweep.csv");
    write_file(&path, &sweep_csv(&rows))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn compare_cmd(args: &ConfigArgs, lr: Option<f64>, epochs: Option<usize>, sizes: &[usize]) -> Result<()> {
    let mut cluster = args.resolve()?;
    cluster.mode = Mode::ClusterKl;
    let mut classify = cluster.clone();
    classify.mode = Mode::ClassifyXent;
    classify.k = classify.k.max(10);
    if let Some(lr) = lr {
        classify.lr = lr;
    }
    if let Some(epochs) = epochs {
        classify.epochs = epochs;
    }
    let rows = compare_modes(&cluster, &classify, sizes)?;
    let text = compare_csv(&rows);
    let path = out_dir(&cluster).join("compare.csv");
    write_file(&path, &text)?;
    print!("{text}");
    Ok(())
}

fn gen_constraints_cmd(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let (train, _) = load_data(&cfg.data)?;
    let labels = train.labels()?;
    let set = match build_constraints(&cfg.constraints, labels)? {
        Some(set) => set,
        None => pairclust::constraints::constraints_from_labels(labels),
    };
    write_file(out, &set.to_text())?;
    println!(
        "wrote {} constraints ({} similar) over {} samples to {}",
        set.len(),
        set.similar_count(),
        set.n_samples(),
        out.display()
    );
    Ok(())
}

fn gen_blobs_cmd(classes: usize, sigma: f64, spacing: f64, per_class: usize, seed: u64, out: &Path) -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.data.blob_classes = classes;
    cfg.data.blob_sigma = sigma;
    cfg.data.blob_spacing = spacing;
    cfg.data.per_class = Some(per_class);
    cfg.data.test_per_class = Some(0);
    cfg.data.seed = seed;
    cfg.data.normalization = Normalization::None;
    let (data, _) = load_data(&cfg.data)?;
    write_file(out, &data.to_csv())?;
    println!("wrote {} points to {}", data.len(), out.display());
    Ok(())
}

fn gradcheck_cmd(seed: u64, configs: usize, step: f64) -> Result<bool> {
    let report = run_suite(seed, configs, step)?;
    let mut ok = true;
    for (name, err) in [
        ("pair_kl", report.pair_kl),
        ("cross_entropy", report.cross_entropy),
        ("hinge_embedding", report.hinge_embedding),
        ("backward", report.backward),
    ] {
        let pass = err < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!("{name:<16} max relative error {err:.3e}  {}", if pass { "ok" } else { "FAIL" });
    }
    println!("{} random configurations, step {step:e}", report.configs);
    Ok(ok)
}

fn kmeans_cmd(args: &ConfigArgs, model: Option<&Path>, layer: Option<usize>, metric: MetricArg) -> Result<()> {
    let cfg = args.resolve()?;
    let (train, _) = load_data(&cfg.data)?;
    let points: Matrix = match model {
        Some(path) => {
            let params = NetworkParams::load(BufReader::new(fs::File::open(path)?))?;
            let layer = layer.unwrap_or(params.layers().len() - 1);
            embed(&params, &train.features, layer)?
        }
        None => train.features.clone(),
    };
    let metric = match metric {
        MetricArg::Euclidean => Metric::Euclidean,
        MetricArg::Cosine => Metric::Cosine,
    };
    let result = kmeans(&points, cfg.k, metric, cfg.kmeans_restarts, &mut Rng::new(cfg.seed))?;
    println!("inertia {}", result.inertia);
    if let Some(labels) = &train.labels {
        let ev = evaluate_assignments(result.assignments, labels, cfg.k, train.class_count)?;
        println!("{}", summary_line("train", &ev));
    }
    Ok(())
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => train_cmd(args)?,
        Command::Eval { config, model } => eval_cmd(config, model)?,
        Command::Sweep { config, axis, values } => sweep_cmd(config, axis, values)?,
        Command::Compare {
            config,
            classify_lr,
            classify_epochs,
            sizes,
        } => compare_cmd(config, *classify_lr, *classify_epochs, sizes)?,
        Command::GenConstraints { config, out } => gen_constraints_cmd(config, out)?,
        Command::GenBlobs {
            classes,
            sigma,
            spacing,
            per_class,
            seed,
            out,
        } => gen_blobs_cmd(*classes, *sigma, *spacing, *per_class, *seed, out)?,
        Command::Gradcheck { seed, configs, step } => {
            if !gradcheck_cmd(*seed, *configs, *step)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::KmeansBaseline {
            config,
            model,
            layer,
            metric,
        } => kmeans_cmd(config, model.as_deref(), *layer, *metric)?,
    }
    Ok(ExitCode::SUCCESS)
}
