//! `ktformer` command-line pipeline: synthetic data generation,
//! featurization, training and evaluation.

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ktformer::checkpoint::Checkpoint;
use ktformer::container::{load_dataset, save_dataset};
use ktformer::data::{filter_and_group, parse_interactions, parse_questions};
use ktformer::eval::{per_user_auc, report_from_scores, score_events};
use ktformer::features::{EncodedDataset, QuestionTable, DEFAULT_MAX_SEQ};
use ktformer::synthetic::{generate, SyntheticSpec};
use ktformer::train::{train_on_dataset, EpochRecord, SplitMode, TrainConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "ktformer", version, about = "Knowledge tracing with a lag-aware encoder-decoder transformer")]
struct Cli {
    /// Seed for data generation and training; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Training configuration JSON; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic interaction log with a known lag effect.
    GenSynthetic(GenArgs),
    /// Encode interaction and question CSVs into a windowed dataset file.
    Featurize(FeaturizeArgs),
    /// Train a model on an encoded dataset.
    Train(TrainArgs),
    /// Score an encoded dataset with a checkpoint.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for interactions.csv, questions.csv and truth.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    questions: usize,
    #[arg(long, default_value_t = 100)]
    min_events: usize,
    #[arg(long, default_value_t = 300)]
    max_events: usize,
    #[arg(long, default_value_t = 1.0)]
    ability_std: f64,
    #[arg(long, default_value_t = 1.0)]
    difficulty_std: f64,
    /// Log-odds bonus for answering within a minute of the previous interaction.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    gamma: f64,
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    interactions: PathBuf,
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Window length; defaults to `max_seq` of the config file, else 100.
    #[arg(long)]
    max_seq: Option<usize>,
    /// Offset between consecutive windows; defaults to the window length.
    #[arg(long)]
    stride: Option<usize>,
    /// Replace every lag-time id with bucket 0.
    #[arg(long)]
    ablate_lag: bool,
    /// Keep lecture rows (not supported).
    #[arg(long, hide = true)]
    keep_lectures: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Users,
    Rows,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for config.json, history.csv and checkpoints.
    #[arg(long)]
    run_dir: PathBuf,
    /// Continue from a checkpoint; its configuration is used unless `--config` is given.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total number of epochs, counting those already in a resumed checkpoint.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    split_mode: Option<SplitArg>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Also write the report as JSON to this file.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write per-user AUC as CSV to this file.
    #[arg(long)]
    per_user: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        ensure!(n > 0, "--threads must be positive");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting worker pool")?;
    }
    let config = match &cli.config {
        Some(path) => Some(read_config(path)?),
        None => None,
    };
    match cli.command {
        Command::GenSynthetic(args) => gen_synthetic(args, cli.seed.unwrap_or(0)),
        Command::Featurize(args) => featurize(args, config.as_ref()),
        Command::Train(args) => train(args, config, cli.seed),
        Command::Eval(args) => eval(args),
    }
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    TrainConfig::from_json(&text).with_context(|| format!("config {}", path.display()))
}

fn gen_synthetic(args: GenArgs, seed: u64) -> Result<()> {
    let spec = SyntheticSpec {
        n_users: args.users,
        n_questions: args.questions,
        min_events: args.min_events,
        max_events: args.max_events,
        ability_std: args.ability_std,
        difficulty_std: args.difficulty_std,
        gamma: args.gamma,
        seed,
    };
    let log = generate(&spec)?;
    log.write_to_dir(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let oracle = log.truth.oracle_auc.map_or("undefined".to_string(), |a| format!("{a:.6}"));
    println!(
        "users {}  questions {}  events {}  bonus rate {:.3}  oracle auc {oracle}",
        spec.n_users, spec.n_questions, log.truth.n_events, log.truth.bonus_rate
    );
    Ok(())
}

fn featurize(args: FeaturizeArgs, config: Option<&TrainConfig>) -> Result<()> {
    if args.keep_lectures {
        bail!("--keep-lectures is not supported: lecture rows are always dropped");
    }
    let questions = {
        let file = File::open(&args.questions).with_context(|| format!("opening {}", args.questions.display()))?;
        parse_questions(BufReader::new(file)).with_context(|| format!("{}", args.questions.display()))?
    };
    let records = {
        let file =
            File::open(&args.interactions).with_context(|| format!("opening {}", args.interactions.display()))?;
        parse_interactions(BufReader::new(file)).with_context(|| format!("{}", args.interactions.display()))?
    };
    let histories = filter_and_group(records);
    let max_seq = args.max_seq.or(config.map(|c| c.max_seq)).unwrap_or(DEFAULT_MAX_SEQ);
    let stride = args.stride.unwrap_or(max_seq);
    let mut dataset = EncodedDataset::build(&histories, &QuestionTable::new(&questions), max_seq, stride)?;
    if args.ablate_lag {
        dataset.ablate_lag();
    }
    save_dataset(&args.out, &dataset).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "windows {}  users {}  events {}",
        dataset.windows.len(),
        dataset.n_users,
        dataset.n_events
    );
    Ok(())
}

fn train(args: TrainArgs, config: Option<TrainConfig>, seed: Option<u64>) -> Result<()> {
    let dataset = load_dataset(&args.dataset).with_context(|| format!("reading {}", args.dataset.display()))?;
    let resume = match &args.resume {
        Some(path) => Some(Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?),
        None => None,
    };
    let mut config = match (config, &resume) {
        (Some(c), _) => c,
        (None, Some(ck)) => ck.train.clone(),
        (None, None) => TrainConfig {
            max_seq: dataset.max_seq,
            ..TrainConfig::default()
        },
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(mode) = args.split_mode {
        config.split_mode = match mode {
            SplitArg::Users => SplitMode::Users,
            SplitArg::Rows => SplitMode::Rows,
        };
    }
    config.validate()?;

    let mut report = |r: &EpochRecord| {
        println!(
            "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  val_auc {:.6}  {:.1}s",
            r.epoch, r.train_loss, r.val_loss, r.val_auc, r.seconds
        );
    };
    let outcome = train_on_dataset(
        &config,
        &dataset,
        TrainOptions {
            run_dir: Some(args.run_dir.clone()),
            resume,
            threads: None,
            on_epoch: Some(&mut report),
        },
    )?;
    if let Some(best) = outcome.run.best_epoch() {
        println!("best epoch {} (val_auc {:.6})", best.epoch, best.val_auc);
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let checkpoint =
        Checkpoint::load(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let dataset = load_dataset(&args.dataset).with_context(|| format!("reading {}", args.dataset.display()))?;
    ensure!(
        checkpoint.model.vocab == dataset.vocab,
        "vocabulary mismatch: checkpoint has {} questions, dataset has {}",
        checkpoint.model.vocab.questions,
        dataset.vocab.questions
    );
    ensure!(
        checkpoint.model.max_seq == dataset.max_seq,
        "window length mismatch: checkpoint expects {}, dataset has {}",
        checkpoint.model.max_seq,
        dataset.max_seq
    );
    let events = score_events(&checkpoint.params, &dataset)?;
    let report = report_from_scores(&events)?;
    print!("{}", report.to_table());
    if let Some(path) = &args.json {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.per_user {
        let mut out = String::from("user_id,n_predictions,auc\n");
        for u in per_user_auc(&events) {
            let auc = u.auc.map_or(String::new(), |a| a.to_string());
            out.push_str(&format!("{},{},{auc}\n", u.user_id, u.n_predictions));
        }
        let mut file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
        file.write_all(out.as_bytes())?;
    }
    Ok(())
}
