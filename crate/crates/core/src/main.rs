use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use skewprune::data::{self, SynthConfig, METADATA_FILE};
use skewprune::fl::{self, FlRunConfig};
use skewprune::metrics::{self, EffectsReport, F1Average, Snapshot};
use skewprune::trainer::{self, StageSchedule, TrainConfig};
use skewprune::{checkpoint, Error, Model, ModelConfig};

#[derive(Parser)]
#[command(name = "skewprune", version, about = "Skewness-guided structured pruning and FL simulation")]
struct Cli {
    /// Worker threads for client-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset utilities.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train a fresh model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: PathBuf,
    },
    /// Stage-by-stage skew pruning with fine-tuning.
    Prune(PruneArgs),
    /// Accuracy and F1 of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "macro")]
        f1: F1Arg,
    },
    /// Parameter, FLOP, memory and size figures.
    Report {
        #[arg(long, required_unless_present = "config", conflicts_with = "config")]
        ckpt: Option<PathBuf>,
        /// Report a freshly initialized model of this training config instead.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Federated-learning simulation.
    #[command(subcommand)]
    Fl(FlCommand),
}

#[derive(Subcommand)]
enum DataCommand {
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    schedule: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Subcommand)]
enum FlCommand {
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Before/after table of a finished run directory.
    Effects {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum F1Arg {
    Macro,
    Weighted,
}

impl From<F1Arg> for F1Average {
    fn from(a: F1Arg) -> Self {
        match a {
            F1Arg::Macro => F1Average::Macro,
            F1Arg::Weighted => F1Average::Weighted,
        }
    }
}

/// `train` and `report --config` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
}

/// `prune --schedule` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PruneFile {
    schedule: StageSchedule,
    #[serde(default)]
    train: TrainConfig,
}

/// `fl run --config` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlFile {
    model: ModelConfig,
    #[serde(default)]
    fl: FlRunConfig,
}

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn read_config<T: DeserializeOwned>(path: &Path) -> std::result::Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure {
        code: EXIT_USAGE,
        message: format!("cannot read config {}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| Failure {
        code: EXIT_USAGE,
        message: format!("invalid config {}: {e}", path.display()),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })?;
    Ok(())
}

fn load_data(dir: &Path, image_size: usize) -> skewprune::Result<data::Dataset> {
    data::load_directory(&dir.join(METADATA_FILE), dir, image_size)
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a C,
    artifacts: Vec<String>,
}

fn write_manifest<C: Serialize>(dir: &Path, command: &str, config: &C, artifacts: &[&str]) -> CmdResult {
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        },
    )
}

fn cmd_synth(config: &Path, out: &Path) -> CmdResult {
    let cfg: SynthConfig = read_config(config)?;
    let ds = data::generate(&cfg)?;
    data::write_directory(&ds, out)?;
    write_manifest(out, "data synth", &cfg, &[METADATA_FILE])?;
    println!("wrote {} samples to {}", ds.len(), out.display());
    Ok(())
}

fn cmd_train(config: &Path, data_dir: &Path, out: &Path, history: &Path) -> CmdResult {
    let cfg: TrainFile = read_config(config)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let ds = load_data(data_dir, cfg.model.image_size)?;
    let model = Model::new(cfg.model.clone())?;
    let (model, hist) = trainer::fit(&model, &ds, &cfg.train)?;
    let bytes = checkpoint::save(&model, out)?;
    #[derive(Serialize)]
    struct HistoryFile<'a> {
        config: &'a TrainFile,
        history: &'a trainer::History,
    }
    write_json(history, &HistoryFile { config: &cfg, history: &hist })?;
    println!(
        "trained {} epochs, final train accuracy {:.4}, checkpoint {} bytes",
        hist.epochs.len(),
        hist.final_train_accuracy.unwrap_or(0.0),
        bytes
    );
    Ok(())
}

fn cmd_prune(a: &PruneArgs) -> CmdResult {
    let cfg: PruneFile = read_config(&a.schedule)?;
    let model = checkpoint::load(&a.ckpt)?;
    cfg.schedule.validate(model.config().num_stages())?;
    let size = model.config().image_size;
    let calib = load_data(&a.calib, size)?;
    let train = load_data(&a.train, size)?;
    let (pruned, outcomes) = trainer::skew_prune_pipeline(&model, &calib, &train, &cfg.schedule, &cfg.train)?;
    let bytes = checkpoint::save(&pruned, &a.out)?;
    create_dir(&a.report)?;
    let mut artifacts = vec!["summary.json".to_string()];
    for o in &outcomes {
        let name = format!("stage_{}.txt", o.stage);
        let text: String = o.reports.iter().map(|r| r.to_text()).collect();
        fs::write(a.report.join(&name), text).map_err(|e| Error::Io {
            path: a.report.join(&name),
            source: e,
        })?;
        artifacts.push(name);
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        params_before: usize,
        params_after: usize,
        stages: &'a [trainer::StageOutcome],
    }
    write_json(
        &a.report.join("summary.json"),
        &Summary {
            params_before: model.count_params(),
            params_after: pruned.count_params(),
            stages: &outcomes,
        },
    )?;
    let refs: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    write_manifest(&a.report, "prune", &cfg, &refs)?;
    println!(
        "params {} -> {}, checkpoint {} bytes",
        model.count_params(),
        pruned.count_params(),
        bytes
    );
    Ok(())
}

fn cmd_eval(ckpt: &Path, data_dir: &Path, f1: F1Average) -> CmdResult {
    let model = checkpoint::load(ckpt)?;
    let ds = load_data(data_dir, model.config().image_size)?;
    let ev = trainer::evaluate(&model, &ds, f1)?;
    println!(
        "{}",
        serde_json::json!({ "samples": ds.len(), "accuracy": ev.accuracy, "f1": ev.f1, "f1_average": f1 })
    );
    Ok(())
}

fn cmd_report(ckpt: Option<&Path>, config: Option<&Path>) -> CmdResult {
    let model = match (ckpt, config) {
        (Some(p), _) => checkpoint::load(p)?,
        (None, Some(c)) => Model::new(read_config::<TrainFile>(c)?.model)?,
        (None, None) => unreachable!("clap requires one of --ckpt / --config"),
    };
    let cost = metrics::cost_report(&model)?;
    println!(
        "{}",
        serde_json::json!({
            "params": cost.params,
            "buffers": model.buffer_count(),
            "flops": model.count_flops(1),
            "gflops": cost.gflops,
            "memory_mb": cost.memory_mb,
            "size_mb": cost.size_mb,
            "size_bytes": cost.size_bytes,
            "flop_breakdown": model.flop_breakdown(1),
        })
    );
    Ok(())
}

fn cmd_fl_run(config: &Path, data_dir: &Path, out: &Path) -> CmdResult {
    let cfg: FlFile = read_config(config)?;
    cfg.model.validate()?;
    cfg.fl.validate(&cfg.model)?;
    let ds = load_data(data_dir, cfg.model.image_size)?;
    let outcome = fl::run(&cfg.fl, &ds, &cfg.model)?;
    create_dir(out)?;
    let rounds_path = out.join("rounds.jsonl");
    let mut lines = String::new();
    for r in &outcome.rounds {
        // reports go to their own files; the round line keeps the audits
        let mut v = serde_json::to_value(r).map_err(Error::from)?;
        if let Some(p) = v.get_mut("prune").and_then(|p| p.as_object_mut()) {
            p.remove("reports");
        }
        lines.push_str(&serde_json::to_string(&v).map_err(Error::from)?);
        lines.push('\n');
    }
    fs::write(&rounds_path, lines).map_err(|e| Error::Io {
        path: rounds_path.clone(),
        source: e,
    })?;
    let mut artifacts = vec!["rounds.jsonl".to_string(), "final.skpr".into(), "before.json".into(), "after.json".into()];
    for r in &outcome.rounds {
        if let Some(p) = &r.prune {
            let name = format!("prune_round_{}.txt", r.round);
            let text: String = p.reports.iter().map(|r| r.to_text()).collect();
            fs::write(out.join(&name), text).map_err(|e| Error::Io {
                path: out.join(&name),
                source: e,
            })?;
            artifacts.push(name);
        }
    }
    let bytes = checkpoint::save(&outcome.model, &out.join("final.skpr"))?;
    write_json(&out.join("before.json"), &outcome.before)?;
    write_json(&out.join("after.json"), &outcome.after)?;
    let refs: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    write_manifest(out, "fl run", &cfg, &refs)?;
    let last = outcome.rounds.last().expect("at least one round");
    println!(
        "{} rounds, final test accuracy {:.4}, final checkpoint {} bytes",
        outcome.rounds.len(),
        outcome.after.scores.map_or(last.test_accuracy, |s| s.accuracy),
        bytes
    );
    Ok(())
}

fn cmd_fl_effects(out: &Path) -> CmdResult {
    let read = |name: &str| -> std::result::Result<Snapshot, Failure> {
        let path = out.join(name);
        let text = fs::read_to_string(&path).map_err(|e| Failure::from(Error::Io { path: path.clone(), source: e }))?;
        serde_json::from_str(&text).map_err(|e| Failure::from(Error::from(e)))
    };
    let report: EffectsReport = metrics::effects(&read("before.json")?, &read("after.json")?);
    write_json(&out.join("effects.json"), &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Data(DataCommand::Synth { config, out }) => cmd_synth(&config, &out),
        Command::Train { config, data, out, history } => cmd_train(&config, &data, &out, &history),
        Command::Prune(a) => cmd_prune(&a),
        Command::Eval { ckpt, data, f1 } => cmd_eval(&ckpt, &data, f1.into()),
        Command::Report { ckpt, config } => cmd_report(ckpt.as_deref(), config.as_deref()),
        Command::Fl(FlCommand::Run { config, data, out }) => cmd_fl_run(&config, &data, &out),
        Command::Fl(FlCommand::Effects { out }) => cmd_fl_effects(&out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = f.message.replace('\n', " ");
            let _ = writeln!(std::io::stderr(), "error: {line}");
            ExitCode::from(f.code)
        }
    }
}
