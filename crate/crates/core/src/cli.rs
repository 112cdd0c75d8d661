//! The `cssda` command line: `train`, `eval`, `synth`, `ablate`, `sweep`.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Activation};
use crate::data::{
    infer_vocab, load_embeddings, load_labels, save_embeddings, save_labels, split_scheme, synth_with_holdout, Dataset,
    SynthParams,
};
use crate::error::{Error, Result};
use crate::evaluation::{emit_report, evaluate, median, ReportFormat};
use crate::model::InferenceRoute;
use crate::training::{train_run_with, EpochLog, Mode, TrainingConfig};

#[derive(Debug, Parser)]
#[command(name = "cssda", version, about = "Conditional semi-supervised adversarial text classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled set and write a metrics report.
    Eval(EvalArgs),
    /// Write a synthetic Gaussian-cluster dataset.
    Synth(SynthArgs),
    /// Compare full training against ablated modes.
    Ablate(AblateArgs),
    /// Train and evaluate across labeled fractions.
    Sweep(SweepArgs),
}

/// Training inputs and hyperparameter overrides shared by every training
/// command. Flags win over values in `--config`.
#[derive(Debug, Clone, Args)]
pub struct TrainingFlags {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Flat JSON file with training config fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_d: Option<f64>,
    #[arg(long)]
    pub lr_g: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub leaky_slope: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub training: TrainingFlags,
    #[arg(long)]
    pub labeled_fraction: Option<f64>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch log as JSON lines; written to stderr when omitted.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub format: ReportFormat,
    #[arg(long, value_enum, default_value_t = InferenceRoute::Generator)]
    pub infer: InferenceRoute,
    /// Leaky ReLU slope the checkpoint was trained with.
    #[arg(long, default_value_t = 0.2)]
    pub leaky_slope: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 10.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sd: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub labels_out: PathBuf,
    /// Held-out samples per class, drawn from the same clusters.
    #[arg(long, requires_all = ["test_out", "test_labels_out"])]
    pub test_per_class: Option<usize>,
    #[arg(long, requires = "test_per_class")]
    pub test_out: Option<PathBuf>,
    #[arg(long, requires = "test_per_class")]
    pub test_labels_out: Option<PathBuf>,
}

/// Held-out data and seeds for the comparison commands.
#[derive(Debug, Clone, Args)]
pub struct ComparisonFlags {
    #[command(flatten)]
    pub training: TrainingFlags,
    #[arg(long)]
    pub test_embeddings: PathBuf,
    #[arg(long)]
    pub test_labels: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long, value_enum, default_value_t = InferenceRoute::Generator)]
    pub infer: InferenceRoute,
    /// Comparison table (CSV).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub comparison: ComparisonFlags,
    /// Modes compared against `full`.
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    pub mode: Vec<Mode>,
    #[arg(long)]
    pub labeled_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub comparison: ComparisonFlags,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
    pub fractions: Vec<f64>,
    #[arg(long)]
    pub mode: Option<Mode>,
}

/// Exit status and message of one command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub message: String,
}

impl CommandOutcome {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERIC: i32 = 3;

    fn ok() -> Self {
        Self {
            exit_code: Self::OK,
            message: String::new(),
        }
    }
}

impl From<Error> for CommandOutcome {
    fn from(e: Error) -> Self {
        let exit_code = match e {
            Error::Argument(_) | Error::Config(_) => Self::USAGE,
            Error::Data(_) | Error::Format(_) | Error::Io(_) => Self::DATA,
            Error::Numeric(_) => Self::NUMERIC,
        };
        Self {
            exit_code,
            message: e.to_string(),
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let exit_code = if e.use_stderr() { CommandOutcome::USAGE } else { CommandOutcome::OK };
            return CommandOutcome {
                exit_code,
                message: e.render().to_string(),
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    };
    result.map_or_else(CommandOutcome::from, |()| CommandOutcome::ok())
}

pub fn load_dataset(embeddings: &Path, labels: &Path) -> Result<Dataset> {
    let rows = load_embeddings(embeddings)?;
    let vocab = infer_vocab(labels)?;
    let map = load_labels(labels, &vocab)?;
    Dataset::assemble(rows, &map, vocab)
}

fn load_config(flags: &TrainingFlags) -> Result<TrainingConfig> {
    let mut config = match &flags.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        None => TrainingConfig::default(),
    };
    macro_rules! overlay {
        ($($field:ident),*) => {$(
            if let Some(v) = flags.$field {
                config.$field = v;
            }
        )*};
    }
    overlay!(epochs, batch_size, lr_d, lr_g, leaky_slope, dropout);
    if flags.hidden.is_some() {
        config.hidden = flags.hidden;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut config = load_config(&args.training)?;
    if let Some(f) = args.labeled_fraction {
        config.labeled_fraction = f;
    }
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    if !config.mode.is_conditional() {
        return Err(Error::Config(format!(
            "{} models have no checkpoint layout; use ablate to evaluate them",
            config.mode
        )));
    }
    let data = load_dataset(&args.training.embeddings, &args.training.labels)?;
    let data = split_scheme(&data, config.labeled_fraction, config.seed)?;
    eprintln!(
        "training {} on {} samples ({} labeled), {} epochs",
        config.mode,
        data.len(),
        data.labeled_count(),
        config.epochs
    );
    let mut log_file = args.log.as_deref().map(File::create).transpose()?.map(BufWriter::new);
    let mut log_error = None;
    let (trained, logs) = train_run_with(&data, &config, |log| {
        let line = epoch_line(log);
        match log_file.as_mut() {
            Some(f) => {
                if let Err(e) = writeln!(f, "{line}") {
                    log_error.get_or_insert(e);
                }
            }
            None => eprintln!("{line}"),
        }
    })?;
    if let Some(e) = log_error {
        return Err(e.into());
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    save_checkpoint(&trained, &args.out)?;
    if let Some(last) = logs.last() {
        println!("{}", serde_json::to_string(&last.losses).expect("losses serialize"));
    }
    Ok(())
}

fn epoch_line(log: &EpochLog) -> String {
    serde_json::to_string(log).expect("epoch log serializes")
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let data = load_dataset(&args.embeddings, &args.labels)?;
    let activation = Activation {
        leaky_slope: args.leaky_slope,
        ..Activation::default()
    };
    let model = load_checkpoint(&args.model, activation)?;
    if model.k() != data.vocab().k() {
        return Err(Error::Data(format!(
            "checkpoint has {} classes but the labels file defines {}",
            model.k(),
            data.vocab().k()
        )));
    }
    let report = evaluate(&model, &data, args.infer)?;
    emit_report(&report, &args.report, args.format)?;
    println!("balanced_accuracy {}", report.balanced_accuracy);
    println!("macro_f_score {}", report.macro_f_score);
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let params = SynthParams {
        k: args.classes,
        dim: args.dim,
        per_class: args.per_class,
        separation: args.separation,
        noise_sd: args.noise_sd,
        seed: args.seed,
    };
    let (train, test) = synth_with_holdout(&params, args.test_per_class.unwrap_or(0))?;
    save_embeddings(&args.out, &train.embeddings())?;
    save_labels(&args.labels_out, &train)?;
    if let (Some(test), Some(out), Some(labels_out)) = (test, &args.test_out, &args.test_labels_out) {
        save_embeddings(out, &test.embeddings())?;
        save_labels(labels_out, &test)?;
    }
    eprintln!("wrote {} samples of dimension {}", train.len(), train.dim());
    Ok(())
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub mode: Mode,
    pub labeled_fraction: f64,
    pub balanced_accuracy: Vec<f64>,
    pub macro_f_score: Vec<f64>,
    pub numeric_error_count: usize,
}

impl ArmResult {
    pub fn median_balanced_accuracy(&self) -> f64 {
        median(&self.balanced_accuracy)
    }
}

/// Trains and evaluates one configuration once per seed. The labeled split
/// is redrawn with each seed.
pub fn run_arm(train: &Dataset, test: &Dataset, config: &TrainingConfig, seeds: &[u64]) -> Result<ArmResult> {
    if seeds.is_empty() {
        return Err(Error::Argument("at least one seed is required".into()));
    }
    let mut result = ArmResult {
        mode: config.mode,
        labeled_fraction: config.labeled_fraction,
        balanced_accuracy: Vec::new(),
        macro_f_score: Vec::new(),
        numeric_error_count: 0,
    };
    for &seed in seeds {
        let config = TrainingConfig { seed, ..config.clone() };
        let split = split_scheme(train, config.labeled_fraction, seed)?;
        let (trained, logs) = train_run_with(&split, &config, |_| {})?;
        let report = evaluate(&trained.model, test, trained.route)?;
        eprintln!(
            "{} fraction {} seed {seed}: balanced accuracy {:.4}",
            config.mode, config.labeled_fraction, report.balanced_accuracy
        );
        result.balanced_accuracy.push(report.balanced_accuracy);
        result.macro_f_score.push(report.macro_f_score);
        result.numeric_error_count += logs.iter().map(|l| l.numeric_error_count).sum::<usize>();
    }
    Ok(result)
}

pub fn comparison_csv(rows: &[ArmResult]) -> String {
    let mut out = String::from("mode,labeled_fraction,seeds,balanced_accuracy,macro_f_score,numeric_error_count\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.mode,
            r.labeled_fraction,
            r.balanced_accuracy.len(),
            median(&r.balanced_accuracy),
            median(&r.macro_f_score),
            r.numeric_error_count
        ));
    }
    out
}

fn comparison_inputs(flags: &ComparisonFlags) -> Result<(TrainingConfig, Dataset, Dataset)> {
    let config = TrainingConfig {
        infer: flags.infer,
        ..load_config(&flags.training)?
    };
    let train = load_dataset(&flags.training.embeddings, &flags.training.labels)?;
    let test = load_dataset(&flags.test_embeddings, &flags.test_labels)?;
    if train.vocab() != test.vocab() {
        return Err(Error::Data("training and test label sets differ".into()));
    }
    Ok((config, train, test))
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let (mut config, train, test) = comparison_inputs(&args.comparison)?;
    if let Some(f) = args.labeled_fraction {
        config.labeled_fraction = f;
    }
    let mut modes = vec![Mode::Full];
    modes.extend(args.mode.iter().copied().filter(|&m| m != Mode::Full));
    let rows = modes
        .into_iter()
        .map(|mode| run_arm(&train, &test, &TrainingConfig { mode, ..config.clone() }, &args.comparison.seeds))
        .collect::<Result<Vec<_>>>()?;
    std::fs::write(&args.comparison.out, comparison_csv(&rows))?;
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let (mut config, train, test) = comparison_inputs(&args.comparison)?;
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    let rows = args
        .fractions
        .iter()
        .map(|&labeled_fraction| {
            let config = TrainingConfig {
                labeled_fraction,
                ..config.clone()
            };
            config.validate()?;
            run_arm(&train, &test, &config, &args.comparison.seeds)
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::write(&args.comparison.out, comparison_csv(&rows))?;
    Ok(())
}
