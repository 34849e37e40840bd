use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cnn_svm::dataset::{default_sources, fetch_dataset, load_split, pad_images, DatasetName, PixelScale, SplitKind};
use cnn_svm::experiment::{
    evaluate, load_model, parse_settings, save_model, train_with, write_metrics, RunSummary, TrainConfig,
};
use cnn_svm::objectives::HeadKind;
use cnn_svm::Error;

const DATA_DIR_ENV: &str = "CNN_SVM_DATA_DIR";
const MODEL_FILE: &str = "model.bin";

#[derive(Parser)]
#[command(name = "cnn-svm", version, about = "Train and evaluate CNNs with a softmax or SVM head on MNIST-style data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, evaluate it on the test split and write metrics
    Train(Box<TrainArgs>),
    /// Report the accuracy of a saved model
    Evaluate(EvaluateArgs),
    /// Download the dataset files and verify their checksums
    FetchData(FetchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Settings file of key=value lines; command-line flags take precedence
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// mnist or fashion-mnist [default: mnist]
    #[arg(long, value_name = "NAME")]
    dataset: Option<DatasetName>,
    /// svm (squared hinge), l1-svm or softmax [default: svm]
    #[arg(long, value_name = "KIND")]
    head: Option<HeadKind>,
    /// Mini-batch size [default: 128]
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Dropout probability on the hidden layer [default: 0.5]
    #[arg(long, value_name = "P")]
    dropout_p: Option<f64>,
    /// Adam learning rate [default: 0.001]
    #[arg(long, value_name = "RATE")]
    learning_rate: Option<f64>,
    /// Number of optimizer steps [default: 10000]
    #[arg(long, value_name = "N")]
    steps: Option<u64>,
    /// SVM penalty C, ignored by the softmax head [default: 1]
    #[arg(long, value_name = "C")]
    svm_c: Option<f64>,
    /// Seed for initialization, batch order and dropout [default: 1]
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Input side length, 28 or 32 (zero-padded) [default: 28]
    #[arg(long, value_name = "N")]
    input_extent: Option<usize>,
    /// Max-pool stride, 1 or 2 [default: 2]
    #[arg(long, value_name = "N")]
    pool_stride: Option<usize>,
    /// Record training metrics every N steps [default: 100]
    #[arg(long, value_name = "N")]
    log_every: Option<u64>,
    /// Directory for metrics and the model file [default: runs]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Root directory of the datasets [default: data]
    #[arg(long, value_name = "DIR", env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    /// Use raw 0-255 pixel values instead of scaling to [0, 1] [default: false]
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    raw_pixels: Option<bool>,
    /// Filters in the first convolution [default: 32]
    #[arg(long, value_name = "N")]
    conv1_filters: Option<usize>,
    /// Filters in the second convolution [default: 64]
    #[arg(long, value_name = "N")]
    conv2_filters: Option<usize>,
    /// Units in the hidden dense layer [default: 1024]
    #[arg(long, value_name = "N")]
    hidden_units: Option<usize>,
    /// Train on the first N training samples only [default: all]
    #[arg(long, value_name = "N")]
    train_limit: Option<usize>,
    /// Batch size for test evaluation [default: 500]
    #[arg(long, value_name = "N")]
    eval_batch_size: Option<usize>,
    /// Fill the wall_ms column of metrics.csv [default: false]
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    record_wall_time: Option<bool>,
    /// Write curves.svg [default: true]
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    plot: Option<bool>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Model written by `train`
    #[arg(long, value_name = "FILE")]
    model_file: PathBuf,
    /// mnist or fashion-mnist
    #[arg(long, value_name = "NAME", default_value = "mnist")]
    dataset: DatasetName,
    /// Which split to score
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Root directory of the datasets
    #[arg(long, value_name = "DIR", env = DATA_DIR_ENV, default_value = "data")]
    data_dir: PathBuf,
    /// Samples per evaluation batch
    #[arg(long, value_name = "N", default_value_t = 500)]
    batch_size: usize,
    /// Use raw 0-255 pixel values
    #[arg(long)]
    raw_pixels: bool,
}

#[derive(Args)]
struct FetchArgs {
    /// mnist or fashion-mnist
    #[arg(long, value_name = "NAME", default_value = "mnist")]
    dataset: DatasetName,
    /// Root directory of the datasets
    #[arg(long, value_name = "DIR", env = DATA_DIR_ENV, default_value = "data")]
    data_dir: PathBuf,
    /// Mirror to download from instead of the default
    #[arg(long, value_name = "URL")]
    base_url: Option<String>,
}

/// Failures that end the process, with their exit code.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            e => Failure::Runtime(e),
        }
    }
}

fn build_config(args: &TrainArgs) -> Result<(TrainConfig, bool), Failure> {
    let mut cfg = TrainConfig::default();
    let mut c_given = args.svm_c.is_some();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let settings = parse_settings(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        for (key, value) in settings {
            c_given |= key.replace('-', "_").eq_ignore_ascii_case("svm_c");
            cfg.set(&key, &value).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        }
    }
    let a = args;
    macro_rules! apply {
        ($($field:ident),*) => {
            $(if let Some(v) = &a.$field {
                cfg.$field = v.clone();
            })*
        };
    }
    apply!(
        dataset,
        head,
        batch_size,
        dropout_p,
        learning_rate,
        steps,
        svm_c,
        seed,
        input_extent,
        pool_stride,
        log_every,
        out_dir,
        data_dir,
        raw_pixels,
        conv1_filters,
        conv2_filters,
        hidden_units,
        eval_batch_size,
        record_wall_time,
        plot
    );
    if a.train_limit.is_some() {
        cfg.train_limit = a.train_limit;
    }
    cfg.validate()?;
    Ok((cfg, c_given))
}

fn train(args: &TrainArgs) -> Result<(), Failure> {
    let (cfg, c_given) = build_config(args)?;
    if c_given && cfg.head == HeadKind::SoftmaxCe {
        eprintln!("warning: svm_c = {} is ignored by the softmax head", cfg.svm_c);
    }

    let mut train_split = cfg.load(SplitKind::Train)?;
    if let Some(limit) = cfg.train_limit {
        train_split = train_split.take(limit)?;
    }
    let test_split = cfg.load(SplitKind::Test)?;
    eprintln!(
        "training {} on {} ({} samples) for {} steps",
        cfg.head.as_str(),
        cfg.dataset.as_str(),
        train_split.len(),
        cfg.steps
    );

    let outcome = train_with(&cfg, &train_split, |r, _| {
        eprintln!("step {:>6}  accuracy {:.4}  loss {:.6}", r.step, r.train_accuracy, r.loss_total);
    })?;
    let test_accuracy = evaluate(&outcome.model, &test_split, cfg.eval_batch_size)?;
    let summary = RunSummary::new(&outcome.records, Some(test_accuracy), outcome.optimizer_steps, cfg.clone());
    let files = write_metrics(&outcome.records, &summary, &cfg.out_dir, cfg.plot)?;
    let model_path = cfg.out_dir.join(MODEL_FILE);
    save_model(&model_path, &outcome.model, cfg.head)?;

    if let Some(acc) = summary.mean_train_accuracy {
        println!("mean_train_accuracy {acc:.9}");
    }
    if let Some(loss) = summary.mean_train_loss {
        println!("mean_train_loss {loss:.9}");
    }
    println!("test_accuracy {test_accuracy:.6}");
    println!("metrics {}", files.csv.display());
    println!("model {}", model_path.display());
    Ok(())
}

fn evaluate_saved(args: &EvaluateArgs) -> Result<(), Failure> {
    let saved = load_model(&args.model_file)?;
    let kind = match args.split {
        SplitArg::Train => SplitKind::Train,
        SplitArg::Test => SplitKind::Test,
    };
    let scale = if args.raw_pixels { PixelScale::Raw } else { PixelScale::Unit };
    let split = load_split(&args.data_dir, args.dataset, kind, scale)?;
    let split = pad_images(&split, saved.model.arch().input_extent)?;
    let acc = evaluate(&saved.model, &split, args.batch_size.max(1))?;
    println!("head {}", saved.head.as_str());
    println!("samples {}", split.len());
    println!("accuracy {acc:.6}");
    Ok(())
}

fn fetch(args: &FetchArgs) -> Result<(), Failure> {
    let sources = default_sources(args.dataset, args.base_url.as_deref());
    for path in fetch_dataset(&args.data_dir, args.dataset, &sources)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match &cli.command {
        Command::Train(args) => train(args),
        Command::Evaluate(args) => evaluate_saved(args),
        Command::FetchData(args) => fetch(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
