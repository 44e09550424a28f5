use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mimic::api::{apply_defense, serve, RemoteOracle};
use mimic::composite::CompositeConfig;
use mimic::config::ExperimentConfig;
use mimic::data::{self, load_dataset, synth, DatasetFile, LabeledDataset, UnlabeledPool};
use mimic::metrics::{self, EvalReport};
use mimic::nn::io::{load_model, save_model};
use mimic::nn::NnError;
use mimic::oracle::{Counting, ModelOracle, Oracle, OracleError};
use mimic::trainer::{self, PipelineMode, RunConfig, TrainerError};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_CAPABILITY: u8 = 3;
pub const EXIT_TRANSPORT: u8 = 4;
pub const EXIT_DIVERGENCE: u8 = 5;

#[derive(Parser)]
#[command(name = "mimic", about = "Model-extraction workbench", version)]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config file's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Query a remote oracle instead of the local mentor file.
    #[arg(long, global = true)]
    oracle_url: Option<String>,
    /// Accepted for interface stability; computation is single-threaded
    /// to keep runs bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttackMode {
    /// Static query set, full probability targets.
    Soft,
    /// Static query set, argmax labels.
    Hard,
    /// Fresh convex mixtures every epoch, argmax labels.
    Composite,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic digit/letter corpora and their manifests.
    MakeData {
        #[arg(long, default_value_t = 8000)]
        train_n: usize,
        #[arg(long, default_value_t = 2000)]
        test_n: usize,
        #[arg(long, default_value_t = 50000)]
        pool_n: usize,
    },
    /// Train the victim network on its labeled data.
    MentorTrain,
    /// Serve the mentor as an HTTP oracle (blocks).
    Serve,
    /// Train a student against the mentor oracle.
    Attack {
        #[arg(long, value_enum)]
        mode: AttackMode,
    },
    /// Evaluate a saved model on the test set, with mentor comparison.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Measure a model's trigger activation rate on stamped probes.
    ProbeWatermark {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        probes: usize,
    },
    /// Merge run metrics into an epoch-aligned comparison table.
    Report {
        run_dirs: Vec<PathBuf>,
    },
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        let code = match &e {
            TrainerError::Config(_) => EXIT_CONFIG,
            TrainerError::SoftUnavailable | TrainerError::Oracle(OracleError::Capability(_)) => {
                EXIT_CAPABILITY
            }
            TrainerError::Oracle(OracleError::Transport(_)) => EXIT_TRANSPORT,
            TrainerError::Nn(NnError::Diverged { .. }) => EXIT_DIVERGENCE,
            _ => 1,
        };
        Self::new(code, e.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        let code = match &e {
            OracleError::Capability(_) => EXIT_CAPABILITY,
            OracleError::Transport(_) => EXIT_TRANSPORT,
            OracleError::Shape { .. } => EXIT_CONFIG,
        };
        Self::new(code, e.to_string())
    }
}

impl From<mimic::config::ConfigError> for CliError {
    fn from(e: mimic::config::ConfigError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<mimic::data::DataError> for CliError {
    fn from(e: mimic::data::DataError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<mimic::nn::io::ModelIoError> for CliError {
    fn from(e: mimic::nn::io::ModelIoError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<mimic::metrics::MetricsError> for CliError {
    fn from(e: mimic::metrics::MetricsError) -> Self {
        Self::new(1, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(1, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::MakeData {
            train_n,
            test_n,
            pool_n,
        } => cmd_make_data(&cli, *train_n, *test_n, *pool_n),
        Command::MentorTrain => cmd_mentor_train(&cli),
        Command::Serve => cmd_serve(&cli),
        Command::Attack { mode } => cmd_attack(&cli, *mode),
        Command::Eval { model } => cmd_eval(&cli, model),
        Command::ProbeWatermark { model, probes } => cmd_probe_watermark(&cli, model, *probes),
        Command::Report { run_dirs } => cmd_report(&cli, run_dirs),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("this command needs --config"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_labeled(path: &Path) -> Result<LabeledDataset, CliError> {
    match load_dataset(path)? {
        DatasetFile::Labeled(set) => Ok(set),
        DatasetFile::Pool(_) => Err(CliError::config(format!(
            "{} is an unlabeled pool; a labeled set is required here",
            path.display()
        ))),
    }
}

fn load_pool(path: &Path) -> Result<UnlabeledPool, CliError> {
    match load_dataset(path)? {
        DatasetFile::Pool(pool) => Ok(pool),
        DatasetFile::Labeled(set) => {
            // a labeled corpus is still a usable query pool; drop labels
            Ok(UnlabeledPool {
                images: set.images,
                name: set.name,
            })
        }
    }
}

/// Record what a command produced, one path per line.
fn write_file_manifest(out_dir: &Path, command: &str, files: &[PathBuf]) -> Result<(), CliError> {
    let mut text = String::new();
    for f in files {
        let _ = writeln!(text, "{}", f.display());
    }
    std::fs::write(out_dir.join(format!("{command}-files.txt")), text)?;
    Ok(())
}

fn cmd_make_data(cli: &Cli, train_n: usize, test_n: usize, pool_n: usize) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let dir = cfg.out_dir.join("data");
    std::fs::create_dir_all(&dir)?;
    let seed = cfg.seed;
    let train = synth::digit_dataset(train_n, mimic::seed::derive(seed, "train-data"), "train");
    let test = synth::digit_dataset(test_n, mimic::seed::derive(seed, "test-data"), "test");
    let pool = synth::letter_pool(pool_n, mimic::seed::derive(seed, "pool-data"), "pool");
    let mut files = vec![
        data::save_labeled(&train, &dir, "train")?,
        data::save_labeled(&test, &dir, "test")?,
        data::save_pool(&pool, &dir, "pool")?,
    ];
    files.sort();
    write_file_manifest(&cfg.out_dir, "make-data", &files)?;
    println!(
        "wrote {} train / {} test / {} pool images under {}",
        train_n,
        test_n,
        pool_n,
        dir.display()
    );
    Ok(())
}

fn cmd_mentor_train(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let train_path = cfg
        .data
        .train_manifest
        .as_ref()
        .ok_or_else(|| CliError::config("mentor-train needs data.train_manifest"))?;
    let train = load_labeled(train_path)?;
    let test = load_labeled(&cfg.data.test_manifest)?;
    let input_shape = train.images[0].shape().to_vec();
    let spec = cfg.mentor.arch.to_spec(input_shape, train.num_classes);

    let run = RunConfig {
        mode: PipelineMode::MentorTrain,
        composite: None,
        ..cfg.run.clone()
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    let outcome = trainer::train_mentor(&train, &test, spec, &run, None, "mentor")?;
    save_model(&outcome.model, &cfg.mentor.model_path)?;
    let metrics_path = cfg.out_dir.join("mentor-metrics.csv");
    std::fs::write(&metrics_path, outcome.history_csv())?;
    write_file_manifest(
        &cfg.out_dir,
        "mentor-train",
        &[cfg.mentor.model_path.clone(), metrics_path],
    )?;
    println!(
        "mentor accuracy {:.4} (best epoch {})",
        outcome.best_accuracy, outcome.best_epoch
    );
    Ok(())
}

fn cmd_serve(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let mentor = load_model(&cfg.mentor.model_path)?;
    let mut endpoint = cfg.endpoint.clone().unwrap_or_default();
    endpoint.apply_env().map_err(CliError::config)?;
    let handle = serve(Box::new(ModelOracle::new(mentor)), endpoint).map_err(CliError::config)?;
    println!("serving on {}", handle.url());
    handle.wait();
    Ok(())
}

/// Reshape the shared run section for the requested attack protocol.
fn attack_run_config(cfg: &ExperimentConfig, mode: AttackMode) -> RunConfig {
    let mut run = cfg.run.clone();
    match mode {
        AttackMode::Composite => {
            run.mode = PipelineMode::CompositeHard;
            run.augmentation = None;
            run.optimizer.l2_coefficient = 0.0;
            if run.composite.is_none() {
                run.composite = Some(CompositeConfig {
                    seed: cfg.seed,
                    ..CompositeConfig::default()
                });
            }
        }
        AttackMode::Soft | AttackMode::Hard => {
            run.mode = if mode == AttackMode::Soft {
                PipelineMode::StandardSoft
            } else {
                PipelineMode::StandardHard
            };
            run.composite = None;
        }
    }
    run
}

fn cmd_attack(cli: &Cli, mode: AttackMode) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let pool_path = cfg
        .data
        .pool_manifest
        .as_ref()
        .ok_or_else(|| CliError::config("attack needs data.pool_manifest"))?;
    let pool = load_pool(pool_path)?;
    let test = load_labeled(&cfg.data.test_manifest)?;
    let run = attack_run_config(&cfg, mode);

    // Local mentors are served through the same defense stack as the
    // wire endpoint, so "file oracle" and "URL oracle" behave alike.
    let oracle: Box<dyn Oracle> = match &cli.oracle_url {
        Some(url) => Box::new(RemoteOracle::connect(url, 3)?),
        None => {
            let mentor = load_model(&cfg.mentor.model_path)?;
            let endpoint = cfg.endpoint.clone().unwrap_or_default();
            apply_defense(Box::new(ModelOracle::new(mentor)), &endpoint)
                .map_err(CliError::config)?
        }
    };
    let counting = Counting::new(oracle);
    let info = counting.info();
    let student_spec = cfg.student.to_spec(info.input_shape.clone(), info.num_classes);

    std::fs::create_dir_all(&cfg.out_dir)?;
    let run_id = format!("student-{}", run.mode.as_str());
    let outcome = trainer::run_pipeline(&counting, &pool, &test, student_spec, &run, None, &run_id)?;

    let model_path = cfg.out_dir.join(format!("{run_id}.mimic"));
    save_model(&outcome.model, &model_path)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, outcome.history_csv())?;
    let summary_path = cfg.out_dir.join("summary.txt");
    let mut summary = String::new();
    let _ = writeln!(summary, "mode:{}", run.mode.as_str());
    let _ = writeln!(summary, "seed:{}", cfg.seed);
    let _ = writeln!(summary, "best_accuracy:{:.4}", outcome.best_accuracy);
    let _ = writeln!(summary, "final_accuracy:{:.4}", outcome.final_accuracy);
    if let Some(agreement) = outcome.history.last().and_then(|r| r.agreement) {
        let _ = writeln!(summary, "agreement:{agreement:.4}");
    }
    let _ = writeln!(summary, "queries:{}", counting.queries());
    std::fs::write(&summary_path, &summary)?;
    write_file_manifest(
        &cfg.out_dir,
        "attack",
        &[model_path, metrics_path, summary_path],
    )?;
    print!("{summary}");
    Ok(())
}

fn cmd_eval(cli: &Cli, model_path: &Path) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let test = load_labeled(&cfg.data.test_manifest)?;
    let student = load_model(model_path)?;
    let mentor = load_model(&cfg.mentor.model_path)?;
    let mentor_acc = metrics::accuracy(&mentor, &test)?;
    let student_acc = metrics::accuracy(&student, &test)?;
    let oracle = ModelOracle::new(mentor);
    let agreement = metrics::agreement(&student, &oracle, &test.images)?;

    let trigger = cfg.endpoint.as_ref().and_then(|e| e.trigger.clone());
    let (student_rate, mentor_rate) = match &trigger {
        Some(t) => {
            let probes: Vec<_> = test
                .images
                .iter()
                .zip(&test.labels)
                .filter(|(_, &l)| l != t.trigger_label)
                .map(|(x, _)| x.clone())
                .collect();
            let endpoint = cfg.endpoint.clone().unwrap();
            let wrapped = apply_defense(Box::new(oracle), &endpoint).map_err(CliError::config)?;
            (
                metrics::watermark_activation_rate(&student, t, &probes)?,
                metrics::watermark_activation_rate_oracle(&wrapped, t, &probes)?,
            )
        }
        None => (0.0, 0.0),
    };
    let report = EvalReport {
        test_accuracy: student_acc,
        mentor_accuracy: mentor_acc,
        relative_accuracy: metrics::relative_accuracy(student_acc, mentor_acc)?,
        agreement,
        trigger_activation_student: student_rate,
        trigger_activation_mentor: mentor_rate,
        n_eval: test.len(),
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    let text_path = cfg.out_dir.join("eval.txt");
    std::fs::write(&text_path, report.to_text())?;
    let csv_path = cfg.out_dir.join("eval.csv");
    std::fs::write(
        &csv_path,
        format!("{}\n{}\n", EvalReport::CSV_HEADER, report.to_csv_row()),
    )?;
    write_file_manifest(&cfg.out_dir, "eval", &[text_path, csv_path])?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_probe_watermark(cli: &Cli, model_path: &Path, probes: usize) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let trigger = cfg
        .endpoint
        .as_ref()
        .and_then(|e| e.trigger.clone())
        .ok_or_else(|| CliError::config("probe-watermark needs endpoint.trigger in the config"))?;
    let test = load_labeled(&cfg.data.test_manifest)?;
    let model = load_model(model_path)?;
    // stamping an image whose true class IS the trigger label says
    // nothing about the watermark; keep only off-class probes
    let base: Vec<_> = test
        .images
        .iter()
        .zip(&test.labels)
        .filter(|(_, &l)| l != trigger.trigger_label)
        .take(probes)
        .map(|(x, _)| x.clone())
        .collect();
    let rate = metrics::watermark_activation_rate(&model, &trigger, &base)?;
    println!("trigger_activation:{rate:.4}");
    println!("probes:{}", base.len());
    Ok(())
}

fn cmd_report(cli: &Cli, run_dirs: &[PathBuf]) -> Result<(), CliError> {
    if run_dirs.is_empty() {
        return Err(CliError::config("report needs at least one run directory"));
    }
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;

    let mut names = Vec::new();
    let mut columns: Vec<Vec<String>> = Vec::new();
    let mut summaries = Vec::new();
    for dir in run_dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let metrics_path = dir.join("metrics.csv");
        let text = std::fs::read_to_string(&metrics_path).map_err(|e| {
            CliError::config(format!("cannot read {}: {e}", metrics_path.display()))
        })?;
        let mut accs = Vec::new();
        for line in text.lines().skip(1) {
            // metrics.csv columns: epoch,lr,train_loss,test_accuracy,...
            let acc = line.split(',').nth(3).unwrap_or("").to_string();
            accs.push(acc);
        }
        let summary = std::fs::read_to_string(dir.join("summary.txt")).unwrap_or_default();
        summaries.push((name.clone(), summary));
        names.push(name);
        columns.push(accs);
    }
    let rows = columns.iter().map(Vec::len).max().unwrap_or(0);
    if columns.iter().any(|c| c.len() != rows) {
        eprintln!("warning: runs cover different epoch ranges; padding short columns");
    }
    let mut table = String::from("epoch");
    for n in &names {
        let _ = write!(table, ",{n}_accuracy");
    }
    table.push('\n');
    for e in 0..rows {
        let _ = write!(table, "{e}");
        for col in &columns {
            let _ = write!(table, ",{}", col.get(e).map(String::as_str).unwrap_or(""));
        }
        table.push('\n');
    }
    let table_path = out_dir.join("report.csv");
    std::fs::write(&table_path, &table)?;

    let mut summary_csv = String::from("run,mode,best_accuracy,final_accuracy,agreement,queries\n");
    for (name, text) in &summaries {
        let field = |key: &str| {
            text.lines()
                .find_map(|l| l.strip_prefix(&format!("{key}:")))
                .unwrap_or("")
                .to_string()
        };
        let _ = writeln!(
            summary_csv,
            "{name},{},{},{},{},{}",
            field("mode"),
            field("best_accuracy"),
            field("final_accuracy"),
            field("agreement"),
            field("queries"),
        );
    }
    let summary_path = out_dir.join("report-summary.csv");
    std::fs::write(&summary_path, &summary_csv)?;
    write_file_manifest(&out_dir, "report", &[table_path, summary_path])?;
    print!("{summary_csv}");
    Ok(())
}
