//! Command-line surface: data generation, two-stage training, evaluation,
//! ablations, pair debugging, and representation dumps.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or data error. The
//! `CONKI_LOG_LEVEL` environment variable (`quiet`, `info`, `debug`) gates
//! stderr progress output; file outputs never contain timestamps so reruns
//! are byte-identical.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::container::{load_dataset, save_dataset};
use crate::contrastive::build_pairs;
use crate::data::{generate_synthetic_dataset, LabelRange, Split};
use crate::error::{Error, Result};
use crate::model::{ConkiModel, DataDims, Variant};
use crate::training::{self, dump_representations, evaluate, AblationSwitches};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "conki",
    version,
    about = "Multimodal sentiment analysis with knowledge-injection adapters and hierarchical contrastive learning"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multimodal dataset directory.
    GenData(GenDataArgs),
    /// Stage 1: pretrain adapters on an external dataset.
    Pretrain(PretrainArgs),
    /// Stage 2: fine-tune on the target dataset with pretrained adapters.
    Finetune(FinetuneArgs),
    /// Evaluate a model checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Run an ablated variant end-to-end and report metrics.
    Ablate(AblateArgs),
    /// Print the contrastive pairing matrix for a list of labels.
    PairDebug(PairDebugArgs),
    /// Dump per-sample representations for external analysis.
    DumpReps(DumpRepsArgs),
}

/// Shared configuration flags. Precedence: defaults, then `--config`, then
/// `--set` overrides, then the dedicated flags.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set training.lr_other=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for all randomness of this command.
    #[arg(long)]
    seed: Option<u64>,
    /// Contrastive loss weight (training.lambda).
    #[arg(long)]
    lambda: Option<f64>,
    /// Similarity temperature (training.tau).
    #[arg(long)]
    tau: Option<f64>,
    /// Epoch count for the stage this command runs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size (training.batch_size).
    #[arg(long)]
    batch_size: Option<usize>,
}

impl ConfigArgs {
    fn build(&self, stage_for_epochs: Option<u8>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for assignment in &self.set {
            cfg.apply_override(assignment)?;
        }
        if let Some(seed) = self.seed {
            cfg.training.seed = seed;
            cfg.generator.seed = seed;
        }
        if let Some(lambda) = self.lambda {
            cfg.training.lambda = lambda;
        }
        if let Some(tau) = self.tau {
            cfg.training.tau = tau;
        }
        if let Some(epochs) = self.epochs {
            match stage_for_epochs {
                Some(1) => cfg.training.epochs_stage1 = epochs,
                _ => cfg.training.epochs_stage2 = epochs,
            }
        }
        if let Some(batch) = self.batch_size {
            cfg.training.batch_size = batch;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// External dataset directory (stage-1 training data).
    #[arg(long, value_name = "DIR")]
    external: PathBuf,
    /// Checkpoint with backbone weights replacing the seed initialization.
    #[arg(long, value_name = "FILE")]
    backbone_ckpt: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Target dataset directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Adapter checkpoint produced by `pretrain`.
    #[arg(long, value_name = "FILE")]
    adapters: Option<PathBuf>,
    /// Fine-tune without pretrained adapters (the no-external ablation).
    #[arg(long)]
    no_external: bool,
    /// Checkpoint with backbone weights; pass the same file used at stage 1.
    #[arg(long, value_name = "FILE")]
    backbone_ckpt: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Model checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Dataset split: train, valid, or test.
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated switches: c1/no-external, c2/no-adapters, c3/no-pan,
    /// c4/no-cl, n1/no-n1.
    #[arg(long, value_name = "LIST")]
    ablate: String,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// External dataset; required unless the variant skips stage 1.
    #[arg(long, value_name = "DIR")]
    external: Option<PathBuf>,
    /// Checkpoint with backbone weights replacing the seed initialization.
    #[arg(long, value_name = "FILE")]
    backbone_ckpt: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PairDebugArgs {
    /// Comma-separated sentiment labels, one per sample.
    #[arg(long, value_name = "LIST", allow_hyphen_values = true)]
    labels: String,
    /// Label range as `min,max`.
    #[arg(
        long,
        value_name = "MIN,MAX",
        default_value = "-3,3",
        allow_hyphen_values = true
    )]
    range: String,
}

#[derive(Args, Debug)]
struct DumpRepsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Model checkpoint; omitted means a seed-initialized model.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum LogLevel {
    Quiet,
    Info,
    Debug,
}

fn log_level() -> LogLevel {
    match std::env::var("CONKI_LOG_LEVEL").as_deref() {
        Ok("quiet") | Ok("QUIET") => LogLevel::Quiet,
        Ok("debug") | Ok("DEBUG") => LogLevel::Debug,
        _ => LogLevel::Info,
    }
}

fn info(msg: &str) {
    if log_level() >= LogLevel::Info {
        eprintln!("{msg}");
    }
}

/// Print to stdout, tolerating a closed pipe (e.g. `conki pair-debug | head`).
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().write_all(text.as_bytes());
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful terminations.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

fn dispatch(cli: Cli) -> std::result::Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Pretrain(args) => pretrain(args),
        Command::Finetune(args) => run_finetune(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Ablate(args) => run_ablate(args),
        Command::PairDebug(args) => pair_debug(args),
        Command::DumpReps(args) => dump_reps(args),
    }
}

fn out_dir(cfg: &RunConfig, out: &Option<PathBuf>) -> PathBuf {
    out.clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.training.checkpoint_dir))
}

fn gen_data(args: GenDataArgs) -> std::result::Result<(), CliError> {
    let cfg = args.config.build(None)?;
    let dataset = generate_synthetic_dataset(&cfg.generator)?;
    save_dataset(&dataset, &args.out)?;
    info(&format!(
        "wrote {} train / {} valid / {} test samples to {}",
        dataset.train.len(),
        dataset.valid.len(),
        dataset.test.len(),
        args.out.display()
    ));
    Ok(())
}

fn pretrain(args: PretrainArgs) -> std::result::Result<(), CliError> {
    let cfg = args.config.build(Some(1))?;
    let external = load_dataset(&args.external)?;
    let backbone = match &args.backbone_ckpt {
        Some(path) => Some(load_checkpoint(path)?.1),
        None => None,
    };
    let outcome = training::pretrain_adapters_from(&cfg, &external, backbone.as_deref())?;
    let dir = out_dir(&cfg, &args.out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let hash = cfg.hash();
    save_checkpoint(
        &outcome.model.store,
        &hash,
        &dir.join("adapters.ckpt"),
        |n| n.starts_with("adapter."),
    )?;
    save_checkpoint(&outcome.model.store, &hash, &dir.join("stage1_model.ckpt"), |_| true)?;
    training::write_log(&dir.join("stage1_log.jsonl"), &outcome.log, &hash)?;
    info(&format!(
        "stage 1 done: best validation MAE {:.4}; artifacts in {}",
        outcome.best_val_mae,
        dir.display()
    ));
    Ok(())
}

fn run_finetune(args: FinetuneArgs) -> std::result::Result<(), CliError> {
    let cfg = args.config.build(Some(2))?;
    let target = load_dataset(&args.data)?;
    let dir = out_dir(&cfg, &args.out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let hash = cfg.hash();

    let backbone = match &args.backbone_ckpt {
        Some(path) => Some(load_checkpoint(path)?.1),
        None => None,
    };
    let (model, log, report) = match (&args.adapters, args.no_external) {
        (Some(path), false) => {
            let (_, records) = load_checkpoint(path)?;
            let outcome =
                training::finetune_from(&cfg, &target, &records, backbone.as_deref())?;
            (outcome.model, outcome.log, outcome.report)
        }
        (None, true) => {
            let outcome = training::ablate_from(
                &cfg,
                &AblationSwitches {
                    no_external: true,
                    ..AblationSwitches::default()
                },
                &target,
                None,
                backbone.as_deref(),
            )?;
            (outcome.model, outcome.log, outcome.report)
        }
        (Some(_), true) => {
            return Err(CliError::Usage(
                "--adapters and --no-external are mutually exclusive".into(),
            ))
        }
        (None, false) => {
            return Err(CliError::Usage(
                "fine-tuning needs pretrained adapters: pass --adapters FILE \
                 (from `conki pretrain`) or opt out with --no-external"
                    .into(),
            ))
        }
    };

    save_checkpoint(&model.store, &hash, &dir.join("model.ckpt"), |_| true)?;
    training::write_log(&dir.join("train_log.jsonl"), &log, &hash)?;
    let report_json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    std::fs::write(dir.join("metrics.json"), report_json.as_bytes())
        .map_err(|e| Error::io(dir.join("metrics.json"), e))?;
    emit(&format!(
        "{}\n{}",
        serde_json::to_string(&report).map_err(Error::from)?,
        report.table(cfg.metrics.decimals)
    ));
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> std::result::Result<(), CliError> {
    let cfg = args.config.build(None)?;
    let dataset = load_dataset(&args.data)?;
    let (_, records) = load_checkpoint(&args.model)?;
    let mut model = ConkiModel::build(
        &cfg,
        &DataDims::of(&dataset.meta),
        cfg.training.seed,
        Variant::FULL,
    )?;
    crate::checkpoint::apply_records(&mut model.store, &records, None)?;
    let samples = dataset.split(args.split);
    if samples.is_empty() {
        return Err(CliError::Run(Error::InvalidInput(format!(
            "split {:?} is empty",
            args.split.name()
        ))));
    }
    let report = evaluate(&model, &dataset, samples)?;
    emit(&format!(
        "{}\n{}",
        serde_json::to_string(&report).map_err(Error::from)?,
        report.table(cfg.metrics.decimals)
    ));
    Ok(())
}

fn run_ablate(args: AblateArgs) -> std::result::Result<(), CliError> {
    let cfg = args.config.build(Some(2))?;
    let switches = AblationSwitches::parse(&args.ablate)?;
    let target = load_dataset(&args.data)?;
    let external = match &args.external {
        Some(path) => Some(load_dataset(path)?),
        None => None,
    };
    if !switches.no_external && !switches.no_adapters && external.is_none() {
        return Err(CliError::Usage(
            "this ablation pretrains adapters: pass --external DIR or add the c1 switch".into(),
        ));
    }
    let backbone = match &args.backbone_ckpt {
        Some(path) => Some(load_checkpoint(path)?.1),
        None => None,
    };
    let outcome =
        training::ablate_from(&cfg, &switches, &target, external.as_ref(), backbone.as_deref())?;
    let dir = out_dir(&cfg, &args.out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let hash = cfg.hash();
    save_checkpoint(&outcome.model.store, &hash, &dir.join("model.ckpt"), |_| true)?;
    training::write_log(&dir.join("train_log.jsonl"), &outcome.log, &hash)?;
    let report_json = serde_json::to_string_pretty(&outcome.report).map_err(Error::from)?;
    std::fs::write(dir.join("metrics.json"), report_json.as_bytes())
        .map_err(|e| Error::io(dir.join("metrics.json"), e))?;
    emit(&format!(
        "{}\n{}",
        serde_json::to_string(&outcome.report).map_err(Error::from)?,
        outcome.report.table(cfg.metrics.decimals)
    ));
    Ok(())
}

fn parse_labels(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad label {s:?}")))
        })
        .collect()
}

fn pair_debug(args: PairDebugArgs) -> std::result::Result<(), CliError> {
    let labels = parse_labels(&args.labels)?;
    if labels.is_empty() {
        return Err(CliError::Usage("--labels needs at least one value".into()));
    }
    let (lo, hi) = args
        .range
        .split_once(',')
        .ok_or_else(|| CliError::Usage("--range must be MIN,MAX".into()))?;
    let range = LabelRange::new(
        lo.trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad range bound {lo:?}")))?,
        hi.trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad range bound {hi:?}")))?,
    )?;
    let partition = build_pairs(&labels, range)?;
    emit(&partition.matrix_text());
    info(&format!(
        "|P1|={} |P2|={} |N1|={} |N2|={} total={}",
        partition.p1.len(),
        partition.p2.len(),
        partition.n1.len(),
        partition.n2.len(),
        partition.total_pairs()
    ));
    Ok(())
}

fn dump_reps(args: DumpRepsArgs) -> std::result::Result<(), CliError> {
    let cfg = args.config.build(None)?;
    let dataset = load_dataset(&args.data)?;
    let mut model = ConkiModel::build(
        &cfg,
        &DataDims::of(&dataset.meta),
        cfg.training.seed,
        Variant::FULL,
    )?;
    if let Some(path) = &args.model {
        let (_, records) = load_checkpoint(path)?;
        crate::checkpoint::apply_records(&mut model.store, &records, None)?;
    }
    let samples = dataset.split(args.split);
    dump_representations(&model, &dataset, samples, &args.out)?;
    info(&format!(
        "dumped {} records to {}",
        samples.len(),
        args.out.display()
    ));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_parsing() {
        assert_eq!(parse_labels("1.2, 0.8 ,-2.0").unwrap(), vec![1.2, 0.8, -2.0]);
        assert!(parse_labels("1.2,x").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["conki", "definitely-not-a-command"]), 1);
        assert_eq!(run(["conki"]), 1);
        // Missing adapters checkpoint on finetune is a usage error.
        let dir = tempfile::tempdir().unwrap();
        let data = crate::data::generate_synthetic_dataset(&crate::data::GeneratorConfig {
            n_train: 2,
            n_valid: 1,
            n_test: 1,
            ..Default::default()
        })
        .unwrap();
        crate::container::save_dataset(&data, dir.path()).unwrap();
        assert_eq!(
            run([
                "conki",
                "finetune",
                "--data",
                dir.path().to_str().unwrap()
            ]),
            1
        );
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["conki", "--help"]), 0);
        assert_eq!(run(["conki", "pair-debug", "--help"]), 0);
    }

    #[test]
    fn missing_data_is_runtime_error() {
        assert_eq!(
            run([
                "conki",
                "pretrain",
                "--external",
                "/nonexistent/dataset/dir"
            ]),
            2
        );
    }
}
