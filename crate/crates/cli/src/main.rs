//! `pcp`: command-line harness around the cluster-purification engine.
//!
//! Subcommands: `gen-data` (synthetic embedding benchmark), `train`
//! (two-stage episodic training), `eval` (episode-averaged accuracy with a
//! 95% interval), `sweep` (one axis, paired episodes), and `ablate` (the
//! fixed ladder of component ablations). Every run writes its resolved
//! configuration to `<out>/run_config.json` and the same flags plus the
//! same seed always produce byte-identical outputs — nothing here touches
//! clocks or ambient randomness.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pcp_core::embedding::{generate_synthetic, EmbeddingDataset, Split, SyntheticConfig};
use pcp_core::eval::{evaluate, run_sweep, EvalConfig, SweepValues};
use pcp_core::pcp::{
    AblationMode, PcpConfig, ITERATIONS_DEFAULT, LAMBDA_DEFAULT, TOP_L_DEFAULT,
};
use pcp_core::simnet::SimilarityNet;
use pcp_core::trainer::{train_stage1, train_stage2, TrainConfig};

#[derive(Parser)]
#[command(
    name = "pcp",
    about = "Transductive few-shot classification by progressive cluster purification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-cluster embedding dataset.
    GenData(GenDataArgs),
    /// Train the classification net, then the relation net (two stages).
    Train(TrainArgs),
    /// Evaluate trained nets: mean episode accuracy with a 95% interval.
    Eval(EvalArgs),
    /// Evaluate every value along one axis with paired episodes.
    Sweep(SweepArgs),
    /// Run the ablation ladder from plain prototypes to full purification.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator settings as JSON; defaults to the calibrated benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the generator seed from --config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training split, one JSON object per line.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    /// Support shots per class at evaluation time. Training episodes use
    /// the higher-shot convention (5 for 1-shot, 10 for 5-shot) unless
    /// --train-shots overrides it.
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long)]
    train_shots: Option<usize>,
    /// Query samples per class per episode.
    #[arg(long, default_value_t = 15)]
    queries: usize,
    #[arg(long, default_value_t = 20_000)]
    stage1_episodes: usize,
    #[arg(long, default_value_t = 10_000)]
    stage2_episodes: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Episodes between validation passes; 0 keeps the final parameters.
    #[arg(long, default_value_t = 2_000)]
    validation_interval: usize,
    /// Episodes per validation pass; 0 keeps the final parameters.
    #[arg(long, default_value_t = 200)]
    validation_episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// L2-normalize every embedding after loading.
    #[arg(long)]
    normalize_embeddings: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by eval, sweep, and ablate.
#[derive(Args)]
struct ProtocolArgs {
    /// Evaluation split, one JSON object per line.
    #[arg(long)]
    dataset: PathBuf,
    /// Classification-net checkpoint (stage-1 output).
    #[arg(long)]
    model_classifier: PathBuf,
    /// Relation-net checkpoint (stage-2 output).
    #[arg(long)]
    model_relation: PathBuf,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    /// Query samples per class per episode.
    #[arg(long, default_value_t = 15)]
    queries: usize,
    /// Purification iterations after the initial classification.
    #[arg(long, default_value_t = ITERATIONS_DEFAULT)]
    iterations: usize,
    /// Cluster members folded into each refined prototype.
    #[arg(long, default_value_t = TOP_L_DEFAULT)]
    top_l: usize,
    /// Weight of the rival-cluster penalty in the fused degree.
    #[arg(long, default_value_t = LAMBDA_DEFAULT)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    mode: ModeArg,
    #[arg(long, default_value_t = 10_000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// L2-normalize every embedding after loading.
    #[arg(long)]
    normalize_embeddings: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    protocol: ProtocolArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Axis to sweep; the matching protocol flag is ignored.
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated axis values, strictly increasing (mode names for
    /// --axis ablation).
    #[arg(long)]
    values: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    protocol: ProtocolArgs,
}

/// Mirror of the engine's ablation modes with kebab-case flag spellings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Baseline,
    RefAll,
    SelByScore,
    IntraPosOnly,
    Full,
}

impl From<ModeArg> for AblationMode {
    fn from(arg: ModeArg) -> Self {
        match arg {
            ModeArg::Baseline => AblationMode::Baseline,
            ModeArg::RefAll => AblationMode::RefAll,
            ModeArg::SelByScore => AblationMode::SelByScore,
            ModeArg::IntraPosOnly => AblationMode::IntraPosOnly,
            ModeArg::Full => AblationMode::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    Iterations,
    TopL,
    Lambda,
    Ablation,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args.protocol),
        Command::Sweep(args) => sweep(args),
        Command::Ablate(args) => ablate(args.protocol),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

/// Creates the output directory, logs the resolved configuration to stderr,
/// and records it as `run_config.json`.
fn prepare_out_dir<C: Serialize>(out: &Path, resolved: &C) -> anyhow::Result<()> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let json = serde_json::to_string_pretty(resolved)?;
    eprintln!("resolved configuration:\n{json}");
    fs::write(out.join("run_config.json"), json + "\n")
        .with_context(|| format!("writing {}", out.join("run_config.json").display()))?;
    Ok(())
}

fn load_dataset(path: &Path, split: Split, normalize: bool) -> anyhow::Result<EmbeddingDataset> {
    let dataset = EmbeddingDataset::load(path, split)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(if normalize { dataset.l2_normalized() } else { dataset })
}

fn load_net(path: &Path, role: &str) -> anyhow::Result<SimilarityNet> {
    SimilarityNet::load_checkpoint(path)
        .with_context(|| format!("loading {role} checkpoint {}", path.display()))
}

fn wrote(path: &Path) {
    eprintln!("wrote {}", path.display());
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let mut config = match &args.config {
        Some(path) => SyntheticConfig::load(path)
            .with_context(|| format!("loading generator config {}", path.display()))?,
        None => SyntheticConfig::benchmark(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }

    #[derive(Serialize)]
    struct Resolved<'a> {
        command: &'static str,
        config: &'a SyntheticConfig,
        out: &'a Path,
    }
    prepare_out_dir(&args.out, &Resolved {
        command: "gen-data",
        config: &config,
        out: &args.out,
    })?;

    let (train, test) = generate_synthetic(&config)?;
    let train_path = args.out.join("train.jsonl");
    let test_path = args.out.join("test.jsonl");
    let config_path = args.out.join("config.json");
    train.write(&train_path)?;
    test.write(&test_path)?;
    config.write(&config_path)?;
    wrote(&train_path);
    wrote(&test_path);
    wrote(&config_path);
    eprintln!(
        "generated {} train classes / {} test classes, {} samples per class, dimension {}",
        config.train_classes, config.test_classes, config.samples_per_class, config.dimension
    );
    Ok(())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let train_shots = args
        .train_shots
        .unwrap_or_else(|| TrainConfig::higher_shot_for(args.shots));
    let config = TrainConfig {
        ways: args.ways,
        train_shots,
        eval_shots: args.shots,
        queries: args.queries,
        episodes_stage1: args.stage1_episodes,
        episodes_stage2: args.stage2_episodes,
        learning_rate: args.learning_rate,
        seed: args.seed,
        validation_interval: args.validation_interval,
        validation_episodes: args.validation_episodes,
        ..TrainConfig::default()
    };
    config.validate()?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        command: &'static str,
        dataset: &'a Path,
        normalize_embeddings: bool,
        config: &'a TrainConfig,
        out: &'a Path,
    }
    prepare_out_dir(&args.out, &Resolved {
        command: "train",
        dataset: &args.dataset,
        normalize_embeddings: args.normalize_embeddings,
        config: &config,
        out: &args.out,
    })?;

    let dataset = load_dataset(&args.dataset, Split::Train, args.normalize_embeddings)?;
    let (classifier, mut log) = train_stage1(&dataset, &config)?;
    eprintln!("stage 1 done: {} episodes", config.episodes_stage1);
    let (relation, log2) = train_stage2(&dataset, &classifier, &config)?;
    eprintln!("stage 2 done: {} episodes", config.episodes_stage2);
    log.extend(log2);

    let classifier_path = args.out.join("classifier.json");
    let relation_path = args.out.join("relation.json");
    let log_path = args.out.join("train_log.csv");
    classifier.save_checkpoint(&classifier_path)?;
    relation.save_checkpoint(&relation_path)?;
    log.write_csv(&log_path)?;
    wrote(&classifier_path);
    wrote(&relation_path);
    wrote(&log_path);
    Ok(())
}

impl ProtocolArgs {
    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            ways: self.ways,
            shots: self.shots,
            queries: self.queries,
            episodes: self.episodes,
            seed: self.seed,
            pcp: PcpConfig {
                iterations: self.iterations,
                top_l: self.top_l,
                lambda: self.lambda,
                mode: self.mode.into(),
            },
        }
    }

    fn load_inputs(&self) -> anyhow::Result<(EmbeddingDataset, SimilarityNet, SimilarityNet)> {
        let dataset = load_dataset(&self.dataset, Split::Test, self.normalize_embeddings)?;
        let classifier = load_net(&self.model_classifier, "classifier")?;
        let relation = load_net(&self.model_relation, "relation")?;
        Ok((dataset, classifier, relation))
    }
}

#[derive(Serialize)]
struct ResolvedProtocol<'a> {
    command: &'static str,
    dataset: &'a Path,
    model_classifier: &'a Path,
    model_relation: &'a Path,
    normalize_embeddings: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    axis: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    values: Option<&'a str>,
    config: EvalConfig,
    out: &'a Path,
}

impl<'a> ResolvedProtocol<'a> {
    fn new(command: &'static str, args: &'a ProtocolArgs) -> Self {
        Self {
            command,
            dataset: &args.dataset,
            model_classifier: &args.model_classifier,
            model_relation: &args.model_relation,
            normalize_embeddings: args.normalize_embeddings,
            axis: None,
            values: None,
            config: args.eval_config(),
            out: &args.out,
        }
    }
}

fn eval(args: ProtocolArgs) -> anyhow::Result<()> {
    prepare_out_dir(&args.out, &ResolvedProtocol::new("eval", &args))?;
    let (dataset, classifier, relation) = args.load_inputs()?;
    let report = evaluate(&dataset, &classifier, &relation, &args.eval_config())?;

    let report_path = args.out.join("report.json");
    let episodes_path = args.out.join("episodes.csv");
    report.write_json(&report_path)?;
    report.write_episodes_csv(&episodes_path)?;
    wrote(&report_path);
    wrote(&episodes_path);
    eprintln!(
        "accuracy {:.4} ± {:.4} over {} episodes",
        report.mean(),
        report.ci95(),
        report.n_episodes()
    );
    Ok(())
}

fn parse_values<T>(raw: &str, axis: &str) -> anyhow::Result<Vec<T>>
where
    T: std::str::FromStr,
    T::Err: Display,
{
    raw.split(',')
        .map(|piece| {
            let piece = piece.trim();
            piece.parse::<T>().map_err(|e| {
                anyhow::anyhow!("invalid {axis} value \"{piece}\": {e}")
            })
        })
        .collect()
}

fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let values = match args.axis {
        AxisArg::Iterations => SweepValues::Iterations(parse_values(&args.values, "iterations")?),
        AxisArg::TopL => SweepValues::TopL(parse_values(&args.values, "top-l")?),
        AxisArg::Lambda => SweepValues::Lambda(parse_values(&args.values, "lambda")?),
        AxisArg::Ablation => SweepValues::Ablation(
            args.values
                .split(',')
                .map(|piece| piece.trim().replace('-', "_").parse::<AblationMode>())
                .collect::<Result<_, _>>()
                .map_err(|e| anyhow::anyhow!("invalid ablation value: {e}"))?,
        ),
    };

    let mut resolved = ResolvedProtocol::new("sweep", &args.protocol);
    resolved.axis = Some(values.axis_name());
    resolved.values = Some(&args.values);
    prepare_out_dir(&args.protocol.out, &resolved)?;

    let (dataset, classifier, relation) = args.protocol.load_inputs()?;
    let report = run_sweep(
        &dataset,
        &classifier,
        &relation,
        &args.protocol.eval_config(),
        &values,
    )?;
    write_sweep_outputs(&args.protocol.out, "sweep.csv", &report)
}

fn ablate(args: ProtocolArgs) -> anyhow::Result<()> {
    let mut resolved = ResolvedProtocol::new("ablate", &args);
    resolved.axis = Some("ablation");
    prepare_out_dir(&args.out, &resolved)?;

    let (dataset, classifier, relation) = args.load_inputs()?;
    let report = run_sweep(
        &dataset,
        &classifier,
        &relation,
        &args.eval_config(),
        &SweepValues::Ablation(AblationMode::LADDER.to_vec()),
    )?;
    write_sweep_outputs(&args.out, "ablate.csv", &report)
}

fn write_sweep_outputs(
    out: &Path,
    csv_name: &str,
    report: &pcp_core::eval::SweepReport,
) -> anyhow::Result<()> {
    let csv_path = out.join(csv_name);
    report.write_csv(&csv_path)?;
    wrote(&csv_path);
    for point in report.points() {
        let path = out.join(format!("point_{}_{}.json", report.axis(), point.value));
        point.report.write_json(&path)?;
        wrote(&path);
        eprintln!(
            "{}={}: accuracy {:.4} ± {:.4}",
            report.axis(),
            point.value,
            point.report.mean(),
            point.report.ci95()
        );
    }
    Ok(())
}
