//! `hubless`: synthesize data, train, evaluate, diagnose hubness, and
//! cross-validate from the command line.
//!
//! Exit codes: 0 on success, 1 for invalid arguments or configuration, 2 for
//! unreadable or malformed input files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hubless_core::calibration::{mc_cross_validate, Aggregation, CvSpec};
use hubless_core::dataio::{
    generate_synthetic, labels_path_for, load_embedding_table, load_feature_bank,
    load_feature_bank_with_labels, load_manifest, save_embedding_table, save_feature_bank,
    save_manifest, EmbeddingTable, FeatureBank, SplitManifest, SynthSpec,
};
use hubless_core::hubness::{hubness_report, Metric};
use hubless_core::inference::{embed, evaluate_gzsl, evaluate_zsl, ClassPrototypes};
use hubless_core::losses::{Direction, SkewnessForm, TrainConfig};
use hubless_core::trainer::{load_run, prepare_bank, prepare_table, save_run, train, TrainRun};
use hubless_core::Error;

#[derive(Parser)]
#[command(name = "hubless", version, about = "Zero-shot classification with a hubness-reducing projection")]
struct Cli {
    /// Worker threads for data-parallel work.
    #[arg(long, global = true, env = "HUBLESS_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic clustered dataset.
    Synth(SynthArgs),
    /// Train the projection network on seen classes.
    Train(TrainArgs),
    /// Zero-shot or generalized zero-shot evaluation of a trained run.
    Eval(EvalArgs),
    /// Hubness report of queries against class prototypes.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo cross-validation of alpha, lambda and beta.
    Cv(CvArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    classes_seen: usize,
    #[arg(long, default_value_t = 10)]
    classes_unseen: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 300)]
    semantic_dim: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = SynthSpec::default().cluster_spread)]
    spread: f64,
    #[arg(long, default_value_t = SynthSpec::default().semantic_noise)]
    noise: f64,
}

#[derive(Args)]
struct BankArgs {
    /// Feature bank (FBNK).
    #[arg(long)]
    features: PathBuf,
    /// Label file; defaults to `<features>.labels`.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Class embeddings, one `name v1 .. vd` line per class.
    #[arg(long)]
    embeddings: PathBuf,
    /// JSON split manifest `{"seen": [..], "unseen": [..]}`.
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Normalize {
    None,
    Features,
    Embeddings,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Sem2feat,
    Feat2sem,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Sem2feat => Direction::SemToFeat,
            DirectionArg::Feat2sem => Direction::FeatToSem,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    L2,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::L2 => Metric::L2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    PerInstance,
    PerClass,
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.7)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    #[arg(long, default_value_t = 0.6)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, value_enum, default_value = "embeddings")]
    normalize: Normalize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    final_relu: bool,
    /// Hidden layer sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [512usize, 768])]
    hidden: Vec<usize>,
    #[arg(long, value_enum, default_value = "sem2feat")]
    direction: DirectionArg,
    #[arg(long, value_enum, default_value = "per-instance")]
    skewness_form: FormArg,
}

impl HyperArgs {
    fn config(&self) -> TrainConfig {
        let (normalize_features, normalize_embeddings) = match self.normalize {
            Normalize::None => (false, false),
            Normalize::Features => (true, false),
            Normalize::Embeddings => (false, true),
            Normalize::Both => (true, true),
        };
        TrainConfig {
            alpha: self.alpha,
            lambda: self.lambda,
            beta: self.beta,
            batch_size: self.batch_size,
            tau: self.tau,
            lr: self.lr,
            epochs: self.epochs,
            seed: self.seed,
            hidden: self.hidden.clone(),
            final_relu: self.final_relu,
            normalize_features,
            normalize_embeddings,
            skewness_form: match self.skewness_form {
                FormArg::PerInstance => SkewnessForm::PerInstance,
                FormArg::PerClass => SkewnessForm::PerClass,
            },
            direction: self.direction.into(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    bank: BankArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained run directory.
    #[arg(long)]
    run: PathBuf,
    /// Unseen-class test bank.
    #[command(flatten)]
    bank: BankArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Evaluate over seen and unseen classes together.
    #[arg(long, requires = "seen_features")]
    gzsl: bool,
    /// Seen-class penalty; defaults to the run's configured value.
    #[arg(long)]
    beta: Option<f64>,
    /// Seen-class test bank for generalized evaluation.
    #[arg(long)]
    seen_features: Option<PathBuf>,
    #[arg(long)]
    seen_labels: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassSet {
    Seen,
    Unseen,
    All,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Query bank.
    #[command(flatten)]
    bank: BankArgs,
    /// Trained run whose projection produces the prototypes.
    #[arg(long, conflicts_with = "prototypes")]
    run: Option<PathBuf>,
    /// Bank whose rows are used directly as prototypes.
    #[arg(long)]
    prototypes: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Which manifest classes provide prototypes.
    #[arg(long, value_enum, default_value = "unseen")]
    classes: ClassSet,
    #[arg(long, default_value_t = 1)]
    j: usize,
    #[arg(long, value_enum, default_value = "cosine")]
    metric: MetricArg,
    /// Must match the run's direction when `--run` is given.
    #[arg(long, value_enum)]
    direction: Option<DirectionArg>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    bank: BankArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    #[arg(long)]
    proxy_unseen: Option<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = CvSpec::default().grid_alpha)]
    grid_alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = CvSpec::default().grid_lambda)]
    grid_lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = CvSpec::default().grid_beta)]
    grid_beta: Vec<f64>,
    /// Pick the grid value with the best mean score instead of averaging
    /// per-repeat winners.
    #[arg(long)]
    argmax_mean: bool,
}

fn load_bank(args: &BankArgs) -> Result<FeatureBank, Error> {
    match &args.labels {
        Some(labels) => load_feature_bank_with_labels(&args.features, labels),
        None => load_feature_bank(&args.features),
    }
}

fn load_data(args: &DataArgs) -> Result<(EmbeddingTable, SplitManifest), Error> {
    let table = load_embedding_table(&args.embeddings, false)?;
    let manifest = load_manifest(&args.manifest)?;
    manifest.validate(&table)?;
    Ok((table, manifest))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<(), Error> {
    let spec = SynthSpec {
        p_seen: args.classes_seen,
        q_unseen: args.classes_unseen,
        m: args.dim,
        instances_per_class: args.per_class,
        cluster_spread: args.spread,
        semantic_dim: args.semantic_dim,
        semantic_noise: args.noise,
        seed: args.seed,
    };
    let data = generate_synthetic(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    let seen = args.out.join("seen.fbnk");
    let unseen = args.out.join("unseen.fbnk");
    save_feature_bank(&data.seen, &seen)?;
    save_feature_bank(&data.unseen, &unseen)?;
    save_embedding_table(&data.table, args.out.join("embeddings.txt"))?;
    save_manifest(&data.manifest, args.out.join("manifest.json"))?;
    for p in [&seen, &unseen] {
        eprintln!("wrote {} and {}", p.display(), labels_path_for(p).display());
    }
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<(), Error> {
    let cfg = args.hyper.config();
    cfg.validate()?;
    let bank = load_bank(&args.bank)?;
    let (table, manifest) = load_data(&args.data)?;
    let run = train(&bank, &table, &manifest, &cfg)?;
    save_run(&run, &args.out)?;
    match run.log.last() {
        Some(e) => println!(
            "epoch {} L_S {} L_U {} L_T {} hist_gap {} seen_top1 {} skew_j1 {}",
            e.epoch,
            e.l_s,
            e.l_u,
            e.l_t,
            e.hist_gap,
            e.seen_top1,
            e.skew_j1.map(|s| s.to_string()).unwrap_or_else(|| "null".into())
        ),
        None => println!("epoch 0"),
    }
    Ok(())
}

fn run_config_echo(run: &TrainRun) -> Result<serde_json::Value, Error> {
    Ok(serde_json::to_value(&run.config)?)
}

fn run_eval(args: &EvalArgs) -> Result<(), Error> {
    let run = load_run(&args.run)?;
    let cfg = &run.config;
    let (table, manifest) = load_data(&args.data)?;
    let table = prepare_table(&table, cfg)?;
    let unseen_bank = prepare_bank(&load_bank(&args.bank)?, cfg)?;
    let unseen = ClassPrototypes::from_table(&table, &manifest.unseen)?;
    let mut report = if args.gzsl {
        let seen_path = args.seen_features.as_ref().expect("enforced by clap");
        let seen_bank = match &args.seen_labels {
            Some(l) => load_feature_bank_with_labels(seen_path, l)?,
            None => load_feature_bank(seen_path)?,
        };
        let seen_bank = prepare_bank(&seen_bank, cfg)?;
        let seen = ClassPrototypes::from_table(&table, &manifest.seen)?;
        let beta = args.beta.unwrap_or(cfg.beta);
        evaluate_gzsl(&seen_bank, &unseen_bank, &seen, &unseen, &run.weights, cfg.direction, beta)?
    } else {
        evaluate_zsl(&unseen_bank, &unseen, &run.weights, cfg.direction)?
    };
    report.config_echo = run_config_echo(&run)?;
    print_json(&report)
}

fn class_names(manifest: &SplitManifest, set: ClassSet) -> Vec<String> {
    match set {
        ClassSet::Seen => manifest.seen.clone(),
        ClassSet::Unseen => manifest.unseen.clone(),
        ClassSet::All => manifest.all_classes(),
    }
}

fn run_diagnose(args: &DiagnoseArgs) -> Result<(), Error> {
    let queries = load_bank(&args.bank)?;
    let need = |p: &Option<PathBuf>, flag: &str| -> Result<PathBuf, Error> {
        p.clone()
            .ok_or_else(|| Error::Config(format!("--{flag} is required unless --prototypes is given")))
    };
    let (queries, prototypes, names) = if let Some(path) = &args.prototypes {
        let protos = load_feature_bank(path)?;
        let names: Vec<String> = (0..protos.len()).map(|r| protos.label_name(r).to_string()).collect();
        (queries.features().clone(), protos.features().clone(), names)
    } else {
        let data = DataArgs {
            embeddings: need(&args.embeddings, "embeddings")?,
            manifest: need(&args.manifest, "manifest")?,
        };
        let (table, manifest) = load_data(&data)?;
        let names = class_names(&manifest, args.classes);
        match &args.run {
            Some(dir) => {
                let run = load_run(dir)?;
                if let Some(d) = args.direction {
                    if Direction::from(d) != run.config.direction {
                        return Err(Error::Config(format!(
                            "--direction {} does not match the run's direction {}",
                            Direction::from(d),
                            run.config.direction
                        )));
                    }
                }
                let table = prepare_table(&table, &run.config)?;
                let bank = prepare_bank(&queries, &run.config)?;
                let semantics = table.matrix_for(&names)?;
                let (q, p) = embed(&run.weights, run.config.direction, bank.features(), &semantics)?;
                (q, p, names)
            }
            None => {
                // Without a run, features are compared with raw semantic
                // vectors directly, which needs matching dimensions.
                let mut table = table;
                table.normalize()?;
                let semantics = table.matrix_for(&names)?;
                (queries.features().clone(), semantics, names)
            }
        }
    };
    let report = hubness_report(&queries, &prototypes, args.j, args.metric.into())?.with_names(&names);
    print_json(&report)
}

fn run_cv(args: &CvArgs) -> Result<(), Error> {
    let base = args.hyper.config();
    let spec = CvSpec {
        repeats: args.repeats,
        holdout_fraction: args.holdout,
        proxy_unseen_count: args.proxy_unseen,
        grid_alpha: args.grid_alpha.clone(),
        grid_lambda: args.grid_lambda.clone(),
        grid_beta: args.grid_beta.clone(),
        seed: args.hyper.seed,
        aggregation: if args.argmax_mean {
            Aggregation::ArgmaxOfMeanScore
        } else {
            Aggregation::MeanOfWinners
        },
    };
    let bank = load_bank(&args.bank)?;
    let (table, manifest) = load_data(&args.data)?;
    let report = mc_cross_validate(&bank, &table, &manifest, &base, &spec)?;
    print_json(&report)
}

fn exit_code(err: &Error) -> u8 {
    if err.is_io_or_format() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Diagnose(a) => run_diagnose(a),
        Command::Cv(a) => run_cv(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
