//! Experiment harness for dual-view correlation-reduction graph clustering.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use dualgc::cluster::{argmax_rows, soft_assign};
use dualgc::config::{build_config, FileConfig, Overrides};
use dualgc::dataset;
use dualgc::encoder::{encode_views, load_checkpoint, save_checkpoint};
use dualgc::graph::{sbm_generate, Graph};
use dualgc::metrics::MetricSummary;
use dualgc::report::{dump_embeddings, similarity_heatmap};
use dualgc::trainer::{self, pretrain, run_ablation, train_multi, AblationFlags, TrainConfig};
use dualgc::{augment, metrics};

#[derive(Parser)]
#[command(
    name = "dualgc",
    version,
    about = "Attributed-graph node clustering via dual-view correlation reduction"
)]
struct Cli {
    /// TOML experiment file, applied beneath any flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset bundle and write run artifacts.
    Train(TrainArgs),
    /// Score a prediction file against a reference file.
    Evaluate(EvaluateArgs),
    /// Train a set of loss-term variants over shared seeds.
    Ablate(AblateArgs),
    /// Run reconstruction pretraining only and save the encoder.
    Pretrain(PretrainArgs),
    /// Ingest a public dataset dump into the bundle layout.
    ConvertDataset(ConvertArgs),
    /// Generate a stochastic-block-model bundle with Gaussian features.
    GenerateSbm(SbmArgs),
    /// Produce diagnostic artifacts from a trained checkpoint.
    #[command(subcommand)]
    Report(ReportCommand),
}

/// Hyperparameter flags shared by the training-style subcommands.
#[derive(Args, Clone, Default)]
struct HyperArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Fine-tuning epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "knn-k")]
    knn_k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long = "confidence-fraction")]
    confidence_fraction: Option<f64>,
    /// Sample-correlation target: affinity or identity.
    #[arg(long = "sample-target")]
    sample_target: Option<String>,
}

impl HyperArgs {
    fn overrides(&self) -> anyhow::Result<Overrides> {
        Ok(Overrides {
            seed: self.seed,
            epochs: self.epochs,
            lambda: self.lambda,
            gamma: self.gamma,
            alpha: self.alpha,
            knn_k: self.knn_k,
            learning_rate: self.lr,
            clusters: self.clusters,
            confidence_fraction: self.confidence_fraction,
            sample_target: self.sample_target.as_deref().map(str::parse).transpose()?,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset bundle directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Seeds to train, one run each.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory for run artifacts.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reference labels, one per line.
    #[arg(long)]
    truth: PathBuf,
    /// Predicted labels, one per line.
    #[arg(long)]
    pred: PathBuf,
    /// Emit a single JSON object instead of the plain record.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Variant names, e.g. B,B-P,B-I,B-P-I.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "B,B-P,B-I,B-P-I,B-R,B-A,B-R-A"
    )]
    variants: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint path for the pretrained encoder.
    #[arg(long, default_value = "runs/pretrain.ckpt")]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct ConvertArgs {
    /// Directory holding `<name>.txt`, `<name>_graph.txt`, `<name>_label.txt`.
    #[arg(long)]
    input: PathBuf,
    /// Dataset name (file prefix and bundle meta name).
    #[arg(long)]
    name: String,
    /// Bundle output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SbmArgs {
    /// Nodes per block.
    #[arg(long, value_delimiter = ',', default_value = "100,100,100")]
    blocks: Vec<usize>,
    #[arg(long = "p-in", default_value_t = 0.2)]
    p_in: f64,
    #[arg(long = "p-out", default_value_t = 0.01)]
    p_out: f64,
    /// Euclidean distance between any two block feature means.
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    /// Per-coordinate feature noise.
    #[arg(long, default_value_t = 0.3)]
    std: f64,
    /// Feature dimensionality (must be at least the block count).
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Store features as a binary matrix instead of CSV.
    #[arg(long)]
    binary: bool,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Class-ordered cosine similarity heatmap (PNG plus CSV sidecar).
    Heatmap(ReportArgs),
    /// Embedding dump with a label column.
    Embeddings(ReportArgs),
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let file = match &cli.config {
        Some(path) => {
            FileConfig::load(path).with_context(|| format!("loading config {}", path.display()))?
        }
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Train(args) => cmd_train(&file, args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(&file, args),
        Command::Pretrain(args) => cmd_pretrain(&file, args),
        Command::ConvertDataset(args) => {
            dataset::convert_public(&args.input, &args.name, &args.out).with_context(|| {
                format!(
                    "converting {}/{{{name},{name}_graph,{name}_label}}.txt",
                    args.input.display(),
                    name = args.name
                )
            })?;
            println!("converted {} into {}", args.name, args.out.display());
            Ok(())
        }
        Command::GenerateSbm(args) => cmd_generate_sbm(args),
        Command::Report(cmd) => cmd_report(&file, cmd),
    }
}

/// Resolve the bundle directory, its graph, and its declared name.
fn load_dataset(file: &FileConfig, flag: Option<&Path>) -> anyhow::Result<(Graph, Option<String>)> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| file.dataset.clone())
        .context("no dataset given: pass --dataset or set `dataset` in the config file")?;
    let graph =
        dataset::load_bundle(&dir).with_context(|| format!("loading bundle {}", dir.display()))?;
    let name = dataset::read_meta(&dir.join("meta"))?.name;
    Ok((graph, name))
}

fn resolve_config(
    file: &FileConfig,
    name: Option<&str>,
    hyper: &HyperArgs,
) -> anyhow::Result<TrainConfig> {
    Ok(build_config(file, name, &hyper.overrides()?)?)
}

fn resolve_seeds(file: &FileConfig, flag: Option<Vec<u64>>) -> Vec<u64> {
    flag.or_else(|| file.seeds.clone())
        .unwrap_or_else(|| vec![0, 1, 2, 3, 4])
}

fn fmt_summary(name: &str, s: &MetricSummary) -> String {
    format!("{name} {:.4}±{:.4}", s.mean, s.std)
}

fn cmd_train(file: &FileConfig, args: TrainArgs) -> anyhow::Result<()> {
    let (graph, name) = load_dataset(file, args.dataset.as_deref())?;
    let mut cfg = resolve_config(file, name.as_deref(), &args.hyper)?;
    let out = file.out.clone().unwrap_or(args.out);
    std::fs::create_dir_all(&out)?;
    cfg.checkpoint = Some(out.join("model.ckpt"));
    let seeds = resolve_seeds(file, args.seeds);

    let (reports, summary) = train_multi(&graph, &cfg, &seeds)?;
    trainer::write_report_jsonl(&reports, &out.join("report.jsonl"))?;
    trainer::write_predictions_csv(&reports[0].predictions, &out.join("predictions.csv"))?;
    if seeds.len() > 1 {
        for r in &reports {
            trainer::write_predictions_csv(
                &r.predictions,
                &out.join(format!("predictions_seed{}.csv", r.seed)),
            )?;
        }
    }
    for r in &reports {
        match &r.metrics {
            Some(m) => println!(
                "seed {}: acc {:.4} nmi {:.4} ari {:.4} f1 {:.4} ({:.1}s)",
                r.seed, m.acc, m.nmi, m.ari, m.f1, r.wall_clock_secs
            ),
            None => println!(
                "seed {}: {} predictions ({:.1}s, unlabeled)",
                r.seed,
                r.predictions.len(),
                r.wall_clock_secs
            ),
        }
    }
    if let Some(summary) = summary {
        trainer::write_metrics_json(&summary, &out.join("metrics.json"))?;
        println!(
            "{} | {} | {} | {}",
            fmt_summary("acc", &summary.acc),
            fmt_summary("nmi", &summary.nmi),
            fmt_summary("ari", &summary.ari),
            fmt_summary("f1", &summary.f1),
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let truth = dataset::read_labels(&args.truth)?;
    let pred = dataset::read_labels(&args.pred)?;
    let m = metrics::evaluate(&truth, &pred)?;
    if args.json {
        println!("{}", serde_json::to_string(&m)?);
    } else {
        println!(
            "acc {:.4} nmi {:.4} ari {:.4} f1 {:.4}",
            m.acc, m.nmi, m.ari, m.f1
        );
    }
    Ok(())
}

fn cmd_ablate(file: &FileConfig, args: AblateArgs) -> anyhow::Result<()> {
    let (graph, name) = load_dataset(file, args.dataset.as_deref())?;
    let cfg = resolve_config(file, name.as_deref(), &args.hyper)?;
    let seeds = resolve_seeds(file, args.seeds);
    let variants = args
        .variants
        .iter()
        .map(|v| AblationFlags::variant(v))
        .collect::<Result<Vec<_>, _>>()?;

    let rows = run_ablation(&graph, &cfg, &variants, &seeds)?;
    let out = file.out.clone().unwrap_or(args.out);
    std::fs::create_dir_all(&out)?;
    let mut text = serde_json::to_string_pretty(&rows)?;
    text.push('\n');
    std::fs::write(out.join("ablation.json"), text)?;
    for row in &rows {
        println!(
            "{:<8} {} | {} | {} | {}",
            row.variant,
            fmt_summary("acc", &row.metrics.acc),
            fmt_summary("nmi", &row.metrics.nmi),
            fmt_summary("ari", &row.metrics.ari),
            fmt_summary("f1", &row.metrics.f1),
        );
    }
    println!("table in {}", out.join("ablation.json").display());
    Ok(())
}

fn cmd_pretrain(file: &FileConfig, args: PretrainArgs) -> anyhow::Result<()> {
    let (graph, name) = load_dataset(file, args.dataset.as_deref())?;
    let cfg = resolve_config(file, name.as_deref(), &args.hyper)?;
    let views = augment::make_views(&graph, cfg.alpha, cfg.knn_k, cfg.noise_std, cfg.seed)?;
    let (state, records) = pretrain(&graph, &views, &cfg)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_checkpoint(&state, None, &args.out)?;
    match records.last() {
        Some(r) => println!(
            "pretrained {} epochs, final reconstruction loss {:.6}",
            records.len(),
            r.l_rec
        ),
        None => println!("pretraining skipped (0 epochs); saved the initialization"),
    }
    println!("checkpoint at {}", args.out.display());
    Ok(())
}

fn cmd_generate_sbm(args: SbmArgs) -> anyhow::Result<()> {
    let k = args.blocks.len();
    if args.dim < k {
        bail!("--dim {} must be at least the block count {k}", args.dim);
    }
    // Scaled one-hot means: any two block means sit `separation` apart.
    let scale = args.separation / 2f64.sqrt();
    let means: Vec<Vec<f64>> = (0..k)
        .map(|b| {
            let mut m = vec![0.0; args.dim];
            m[b] = scale;
            m
        })
        .collect();
    let graph = sbm_generate(
        &args.blocks,
        args.p_in,
        args.p_out,
        &means,
        args.std,
        args.seed,
    )?;
    dataset::save_bundle(&graph, &args.out, Some("sbm"), args.binary)?;
    println!(
        "wrote {} nodes / {} edges / {} blocks to {}",
        graph.num_nodes(),
        graph.num_edges(),
        k,
        args.out.display()
    );
    Ok(())
}

fn cmd_report(file: &FileConfig, cmd: ReportCommand) -> anyhow::Result<()> {
    let (heatmap, args) = match cmd {
        ReportCommand::Heatmap(args) => (true, args),
        ReportCommand::Embeddings(args) => (false, args),
    };
    let (graph, name) = load_dataset(file, Some(&args.dataset))?;
    let cfg = resolve_config(file, name.as_deref(), &args.hyper)?;
    let (state, centers) = load_checkpoint(&args.checkpoint)?;
    let views = augment::make_views(&graph, cfg.alpha, cfg.knn_k, cfg.noise_std, cfg.seed)?;
    let lat = encode_views(&state, &views.x1, &views.x2, &views.a_f, &views.a_d)?;

    // Order by ground truth when available, otherwise by the checkpoint's
    // cluster assignment.
    let labels: Vec<usize> = match graph.labels() {
        Some(l) => l.to_vec(),
        None => match &centers {
            Some(c) => argmax_rows(&soft_assign(&lat.z_fused, c)),
            None => bail!(
                "dataset is unlabeled and the checkpoint stores no centers; \
                 nothing to order the report by"
            ),
        },
    };
    if heatmap {
        similarity_heatmap(&lat.z_fused, &labels, &args.out)?;
        println!(
            "heatmap at {} (matrix sidecar {})",
            args.out.display(),
            args.out.with_extension("csv").display()
        );
    } else {
        dump_embeddings(&lat.z_fused, &labels, &args.out)?;
        println!("embeddings at {}", args.out.display());
    }
    Ok(())
}
