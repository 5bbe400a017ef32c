//! Command line driver: synthetic data generation, training, evaluation
//! and exports.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use unimatch_core::dataio::{
    self, generate_synthetic, load_checkpoint, load_dataset, save_checkpoint, save_dataset,
    DataError, Split, SyntheticConfig,
};
use unimatch_core::network::NetworkConfig;
use unimatch_core::training::{
    evaluate, predict_matchings, prepare_dataset, train, write_metrics, Ablation, EvalOptions,
    LossWeights, OptimizerKind, PreparedInstance, Schedule, TrainError, TrainOptions, TrainSetup,
    TrainState,
};

#[derive(Parser)]
#[command(
    name = "unimatch",
    about = "Joint multi-graph matching and sparse 3D universe learning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic keypoint dataset.
    Synth(SynthArgs),
    /// Train universe points and the matching network.
    Train(TrainArgs),
    /// Evaluate a checkpoint: accuracy, cycle consistency, reconstruction.
    Eval(EvalArgs),
    /// Export learned geometry or predicted matchings.
    Export(ExportArgs),
}

#[derive(Args)]
struct CommonOut {
    /// Output directory (default: $UNIMATCH_OUT_DIR or the working
    /// directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonOut {
    fn dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("UNIMATCH_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Number of object categories.
    #[arg(long, default_value_t = 1)]
    categories: usize,
    /// Universe points per category.
    #[arg(long, default_value_t = 10)]
    points: usize,
    /// Training instances per category.
    #[arg(long)]
    instances: usize,
    /// Test instances per category.
    #[arg(long, default_value_t = 0)]
    test_instances: usize,
    /// Per-instance deformation amplitude.
    #[arg(long, default_value_t = 0.1)]
    amplitude: f64,
    /// Keypoint noise sigma in normalized units.
    #[arg(long, default_value_t = 0.005)]
    noise: f64,
    /// Per-point occlusion probability.
    #[arg(long, default_value_t = 0.0)]
    occlusion: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    dataset: PathBuf,
    /// Resume from a checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Optional TOML config file (flags take precedence).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Warm start iterations (reconstruction loss only).
    #[arg(long)]
    warm_start: Option<usize>,
    /// Total iterations including the warm start.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,

    /// Matching loss weight.
    #[arg(long)]
    w_match: Option<f64>,
    /// Deformed reconstruction loss weight.
    #[arg(long)]
    w_def: Option<f64>,
    /// Static reconstruction loss weight (main phase).
    #[arg(long)]
    w_rec: Option<f64>,
    /// Offset regularizer weight.
    #[arg(long)]
    w_off: Option<f64>,
    /// One-to-one regularizer weight.
    #[arg(long)]
    w_reg: Option<f64>,

    #[arg(long)]
    gnn_latent: Option<usize>,
    #[arg(long)]
    gnn_hidden: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Freeze universe edge topology to the static points.
    #[arg(long)]
    freeze_universe_topology: bool,

    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Ablation toggles; repeatable.
    #[arg(long = "ablate", value_enum)]
    ablate: Vec<AblateArg>,

    #[arg(long, default_value_t = 50)]
    log_every: usize,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblateArg {
    /// Disable the deformation module (offsets forced to zero).
    NoDeform,
    /// Skip the reconstruction-only warm start phase.
    NoWarmStart,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Which split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Triple sample count for large categories.
    #[arg(long, default_value_t = 1000)]
    triples: usize,
    #[arg(long, default_value_t = 0)]
    triple_seed: u64,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// What to export.
    #[arg(long, value_enum)]
    what: ExportWhat,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Include composed pairwise matchings in the matchings export.
    #[arg(long)]
    pairwise: bool,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportWhat {
    Geometry,
    Matchings,
}

enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

fn classify_train_error(e: TrainError) -> CliError {
    match &e {
        TrainError::InvalidSchedule(_) | TrainError::InvalidWeights(_) => {
            CliError::Usage(e.to_string())
        }
        TrainError::Network(unimatch_core::network::NetworkError::InvalidConfig(_)) => {
            CliError::Usage(e.to_string())
        }
        TrainError::Data(_) | TrainError::MissingLabels { .. } | TrainError::EmptyTrainSplit => {
            CliError::Data(e.to_string())
        }
        TrainError::Graph(_) | TrainError::Match(_) | TrainError::SetupMismatch(_) => {
            CliError::Data(e.to_string())
        }
        TrainError::Autodiff(_)
        | TrainError::Geometry(_)
        | TrainError::Network(_)
        | TrainError::Diverged { .. }
        | TrainError::NonFiniteParams { .. } => CliError::Numerical(e.to_string()),
    }
}

fn classify_data_error(e: DataError) -> CliError {
    match &e {
        DataError::Config(_) => CliError::Usage(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Export(args) => cmd_export(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let config = SyntheticConfig {
        categories: args.categories,
        points_per_category: args.points,
        train_instances: args.instances,
        test_instances: args.test_instances,
        deformation_amplitude: args.amplitude,
        noise_sigma: args.noise,
        occlusion_probability: args.occlusion,
        seed: args.seed,
    };
    let manifest = generate_synthetic(&config).map_err(classify_data_error)?;
    let dir = args.out.dir();
    ensure_dir(&dir)?;
    let path = dir.join("dataset.json");
    save_dataset(&manifest, &path).map_err(classify_data_error)?;
    let train = manifest
        .instances
        .iter()
        .filter(|i| i.split == Split::Train)
        .count();
    println!(
        "wrote {}: {} categories, {} universe points each, {} instances ({} train / {} test)",
        path.display(),
        manifest.categories.len(),
        args.points,
        manifest.instances.len(),
        train,
        manifest.instances.len() - train,
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let file = match &args.config {
        Some(path) => config::load(path).map_err(CliError::Usage)?,
        None => config::FileConfig::default(),
    };

    let manifest = load_dataset(&args.dataset).map_err(classify_data_error)?;
    let dataset = prepare_dataset(&manifest).map_err(classify_train_error)?;

    let out_dir = args
        .out
        .out
        .clone()
        .or_else(|| file.out_dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os("UNIMATCH_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&out_dir)?;

    let threads = args.threads.or(file.threads).unwrap_or(1);
    let options = TrainOptions {
        threads,
        log_every: args.log_every,
        checkpoint_every: args.checkpoint_every,
        checkpoint_dir: Some(out_dir.clone()),
    };

    let mut state = if let Some(resume) = &args.resume {
        let data = load_checkpoint(resume).map_err(classify_data_error)?;
        let mut state = TrainState::from_checkpoint(&data).map_err(classify_train_error)?;
        if let Some(total) = args.iterations {
            state.setup.schedule.total_iterations = total;
            state
                .setup
                .schedule
                .validate()
                .map_err(classify_train_error)?;
        }
        state
    } else {
        let paper = Schedule::paper_defaults();
        let no_warm_start = args.ablate.contains(&AblateArg::NoWarmStart);
        let schedule = Schedule {
            warm_start_iterations: if no_warm_start {
                0
            } else {
                args.warm_start
                    .or(file.schedule.warm_start)
                    .unwrap_or(paper.warm_start_iterations)
            },
            total_iterations: args
                .iterations
                .or(file.schedule.iterations)
                .unwrap_or(paper.total_iterations),
            batch_size: args
                .batch_size
                .or(file.schedule.batch_size)
                .unwrap_or(paper.batch_size),
            initial_lr: args.lr.or(file.schedule.lr).unwrap_or(paper.initial_lr),
            decay_factor: args
                .decay_factor
                .or(file.schedule.decay_factor)
                .unwrap_or(paper.decay_factor),
            decay_every: args
                .decay_every
                .or(file.schedule.decay_every)
                .unwrap_or(paper.decay_every),
        };
        let main = LossWeights::main_phase();
        let weights = LossWeights {
            matching: args.w_match.or(file.weights.matching).unwrap_or(main.matching),
            deformed_recon: args
                .w_def
                .or(file.weights.deformed_recon)
                .unwrap_or(main.deformed_recon),
            static_recon: args
                .w_rec
                .or(file.weights.static_recon)
                .unwrap_or(main.static_recon),
            offset: args.w_off.or(file.weights.offset).unwrap_or(main.offset),
            one_to_one: args
                .w_reg
                .or(file.weights.one_to_one)
                .unwrap_or(main.one_to_one),
        };
        let defaults = NetworkConfig::default();
        let network = NetworkConfig {
            encoder_widths: file
                .network
                .encoder_widths
                .unwrap_or(defaults.encoder_widths),
            deform_widths: file.network.deform_widths.unwrap_or(defaults.deform_widths),
            offset_hidden: file
                .network
                .offset_hidden
                .unwrap_or(defaults.offset_hidden),
            gnn_latent: args
                .gnn_latent
                .or(file.network.gnn_latent)
                .unwrap_or(defaults.gnn_latent),
            gnn_hidden: args
                .gnn_hidden
                .or(file.network.gnn_hidden)
                .unwrap_or(defaults.gnn_hidden),
            gnn_rounds: args
                .rounds
                .or(file.network.gnn_rounds)
                .unwrap_or(defaults.gnn_rounds),
            score_hidden: file.network.score_hidden.unwrap_or(defaults.score_hidden),
            score_prior: file.network.score_prior.unwrap_or(defaults.score_prior),
            freeze_universe_topology: args.freeze_universe_topology
                || file.network.freeze_universe_topology.unwrap_or(false),
            cond_cap: file.network.cond_cap.unwrap_or(defaults.cond_cap),
        };
        let optimizer = match args.optimizer {
            Some(OptimizerArg::Adam) => OptimizerKind::Adam,
            Some(OptimizerArg::Sgd) => OptimizerKind::Sgd,
            None => match file.optimizer.as_deref() {
                Some("sgd") => OptimizerKind::Sgd,
                Some("adam") | None => OptimizerKind::Adam,
                Some(other) => {
                    return Err(CliError::Usage(format!("unknown optimizer '{other}'")))
                }
            },
        };
        let setup = TrainSetup {
            categories: manifest.category_sizes(),
            network,
            schedule,
            weights,
            seed: args.seed.or(file.seed).unwrap_or(0),
            optimizer,
            ablation: Ablation {
                no_deform: args.ablate.contains(&AblateArg::NoDeform),
            },
        };
        TrainState::initialize(setup).map_err(classify_train_error)?
    };

    check_categories(&manifest, &state, &dataset)?;

    println!(
        "training: {} iterations ({} warm start), batch {}, lr {}, {} thread(s)",
        state.setup.schedule.total_iterations,
        state.setup.schedule.warm_start_iterations,
        state.setup.schedule.batch_size,
        state.setup.schedule.initial_lr,
        threads,
    );
    let metrics = train(&mut state, &dataset, &options).map_err(classify_train_error)?;

    let metrics_path = out_dir.join("metrics.jsonl");
    write_metrics(&metrics, &metrics_path).map_err(classify_train_error)?;
    let checkpoint_path = out_dir.join("checkpoint.ckpt");
    save_checkpoint(&state.to_checkpoint(), &checkpoint_path).map_err(classify_data_error)?;

    if let Some(last) = metrics.last() {
        println!(
            "finished at iteration {}: loss {:.6}{}",
            state.iteration,
            last.loss_total,
            last.train_accuracy
                .map(|a| format!(", train accuracy {a:.1}%"))
                .unwrap_or_default()
        );
    } else {
        println!("finished: initialized checkpoint only (0 iterations)");
    }
    println!("checkpoint: {}", checkpoint_path.display());
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

/// Re-indexes prepared instances onto the model's category order, erroring
/// on categories the checkpoint does not know.
fn remap_categories(
    manifest: &unimatch_core::DatasetManifest,
    state: &TrainState,
    dataset: &mut [PreparedInstance],
) -> Result<(), CliError> {
    let mapping: Vec<usize> = manifest
        .categories
        .iter()
        .map(|c| {
            state.model.category_by_name(&c.name).ok_or_else(|| {
                CliError::Data(format!(
                    "dataset category '{}' is unknown to the checkpoint",
                    c.name
                ))
            })
        })
        .collect::<Result<_, _>>()?;
    for inst in dataset.iter_mut() {
        inst.category = mapping[inst.category];
    }
    Ok(())
}

fn check_categories(
    manifest: &unimatch_core::DatasetManifest,
    state: &TrainState,
    _dataset: &[PreparedInstance],
) -> Result<(), CliError> {
    for c in &manifest.categories {
        if state.model.category_by_name(&c.name).is_none() {
            return Err(CliError::Data(format!(
                "dataset category '{}' is unknown to the model",
                c.name
            )));
        }
    }
    Ok(())
}

fn load_state_and_dataset(
    checkpoint: &Path,
    dataset_path: &Path,
) -> Result<(TrainState, Vec<PreparedInstance>), CliError> {
    let data = load_checkpoint(checkpoint).map_err(classify_data_error)?;
    let state = TrainState::from_checkpoint(&data).map_err(classify_train_error)?;
    let manifest = load_dataset(dataset_path).map_err(classify_data_error)?;
    let mut dataset = prepare_dataset(&manifest).map_err(classify_train_error)?;
    remap_categories(&manifest, &state, &mut dataset)?;
    Ok((state, dataset))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (state, dataset) = load_state_and_dataset(&args.checkpoint, &args.dataset)?;
    let options = EvalOptions {
        split: args.split.into(),
        sampled_triples: args.triples,
        triple_seed: args.triple_seed,
        ..EvalOptions::default()
    };
    let report = evaluate(&state, &dataset, &options).map_err(classify_train_error)?;

    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    println!("split: {} ({} instances)", report.split, report.instances);
    for cat in &report.per_category {
        println!(
            "  {}: accuracy {}%, cycle score {}% ({} triples), recon static {} deformed {}",
            cat.name,
            fmt(cat.mean_accuracy),
            fmt(cat.cycle_consistency_score),
            cat.cycle_triples,
            fmt(cat.static_recon_error),
            fmt(cat.deformed_recon_error),
        );
    }
    println!(
        "overall: accuracy {}%, cycle score {}% ({} triples)",
        fmt(report.mean_accuracy),
        fmt(report.cycle_consistency_score),
        report.cycle_triples,
    );
    println!(
        "reconstruction error: static {}, deformed {}",
        fmt(report.static_recon_error),
        fmt(report.deformed_recon_error),
    );

    let dir = args.out.dir();
    ensure_dir(&dir)?;
    let path = dir.join("eval_report.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    println!("report: {}", path.display());
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), CliError> {
    let (state, dataset) = load_state_and_dataset(&args.checkpoint, &args.dataset)?;
    let dir = args.out.dir();
    ensure_dir(&dir)?;
    let split: Split = args.split.into();

    match args.what {
        ExportWhat::Geometry => {
            for (c, cat) in state.model.categories.iter().enumerate() {
                let universe = state.store.get(cat.universe).tensor();
                let static_points: Vec<[f64; 3]> = (0..cat.d)
                    .map(|k| [universe.get(0, k), universe.get(1, k), universe.get(2, k)])
                    .collect();
                let mut deformed = Vec::new();
                for inst in dataset.iter().filter(|i| i.split == split && i.category == c) {
                    let mut tape = unimatch_core::Tape::new();
                    let fwd = unimatch_core::network::forward_instance(
                        &mut tape,
                        &state.store,
                        &state.model,
                        c,
                        &inst.keypoints,
                        state.setup.ablation.no_deform,
                    )
                    .map_err(|e| CliError::Numerical(e.to_string()))?;
                    deformed.push(dataio::DeformedInstanceGeometry {
                        instance_id: inst.id.clone(),
                        points: (0..cat.d)
                            .map(|k| {
                                [
                                    fwd.deformed.get(0, k),
                                    fwd.deformed.get(1, k),
                                    fwd.deformed.get(2, k),
                                ]
                            })
                            .collect(),
                    });
                }
                let written =
                    dataio::export_geometry(&cat.name, &static_points, &deformed, &dir)
                        .map_err(classify_data_error)?;
                println!("category {}: {} files", cat.name, written.len());
            }
        }
        ExportWhat::Matchings => {
            let per_category =
                predict_matchings(&state, &dataset, split).map_err(classify_train_error)?;
            for (name, multi) in per_category {
                if multi.is_empty() {
                    continue;
                }
                let path = dir.join(format!("matchings_{name}.json"));
                dataio::export_matchings(&multi, args.pairwise, &path)
                    .map_err(classify_data_error)?;
                println!("category {name}: {} instances -> {}", multi.len(), path.display());
            }
        }
    }
    Ok(())
}
