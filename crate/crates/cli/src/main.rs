//! `air`: pretraining, finetuning, evaluation, verification and reports.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use air_core::checkpoint::Checkpoint;
use air_core::config::ExperimentConfig;
use air_core::eval::evaluate;
use air_core::finetune::{finetune, lp_aff, Classifier, FinetuneMode};
use air_core::report::write_report;
use air_core::train::{pretrain, TrainMode};
use air_core::verify::{run_suite, VerifyOptions};
use air_core::AirError;
use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

const ENCODER: &str = "encoder.ckpt";
const CONFIG_ECHO: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(
    name = "air",
    version,
    about = "Adversarial contrastive pretraining with invariance regularization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain an encoder; writes checkpoints and per-epoch metrics.
    Pretrain(Common),
    /// Train a classifier on top of a pretrained encoder.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        protocol: Option<Protocol>,
    },
    /// Evaluate finetuned classifiers: standard, robust and corruption accuracy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        protocol: Option<Protocol>,
    },
    /// Run the numerical identity suite; exits 1 if any check fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Number of independent passes.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Test hook: perturbs one decomposition term so the suite must fail.
        #[arg(long)]
        break_decomposition: bool,
    },
    /// Render CSV tables and loss curves from a finished run.
    Report(Common),
    /// Run several stages in order.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, value_delimiter = ',', required = true)]
        stage: Vec<Stage>,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment TOML; the desk configuration when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recompute outputs that already exist.
    #[arg(long)]
    force: bool,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Acl,
    Dynacl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Stage {
    Pretrain,
    Finetune,
    Eval,
    Verify,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Slf,
    Alf,
    Aff,
    LpAff,
}

impl Protocol {
    fn from_mode(mode: FinetuneMode) -> Self {
        match mode {
            FinetuneMode::Slf => Self::Slf,
            FinetuneMode::Alf => Self::Alf,
            FinetuneMode::Aff => Self::Aff,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Self::Slf => "slf",
            Self::Alf => "alf",
            Self::Aff => "aff",
            Self::LpAff => "lp_aff",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Self::Slf => "SLF",
            Self::Alf => "ALF",
            Self::Aff => "AFF",
            Self::LpAff => "LP-AFF",
        }
    }

    fn classifier_file(self) -> String {
        format!("classifier_{}.ckpt", self.tag())
    }

    const ALL: [Self; 4] = [Self::Slf, Self::Alf, Self::Aff, Self::LpAff];
}

/// Failure carrying the process exit code.
#[derive(Debug)]
enum Failure {
    Verification(String),
    Config(anyhow::Error),
    Missing(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Verification(_) => 1,
            Self::Runtime(_) => 1,
            Self::Config(_) => 2,
            Self::Missing(_) => 3,
        }
    }
}

impl From<AirError> for Failure {
    fn from(e: AirError) -> Self {
        match &e {
            AirError::Config(_)
            | AirError::Precondition(_)
            | AirError::SpecMismatch { .. }
            | AirError::Shape { .. } => Self::Config(e.into()),
            AirError::MissingArtifact(_) | AirError::Format { .. } => Self::Missing(e.into()),
            AirError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Self::Missing(e.into())
            }
            _ => Self::Runtime(e.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    command: &'a str,
    config: Option<&'a Path>,
    seed: u64,
    out: &'a Path,
    stages: &'a [Stage],
}

struct RunContext {
    common: Common,
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn context(common: &Common) -> Outcome<RunContext> {
    let mut cfg = match &common.config {
        Some(path) if !path.exists() => {
            return Err(Failure::Config(anyhow::anyhow!(
                "config file {} does not exist",
                path.display()
            )))
        }
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk().resolved()?,
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed)?;
    }
    if let Some(mode) = common.mode {
        cfg.train.mode = match mode {
            Mode::Acl => TrainMode::Acl,
            Mode::Dynacl => TrainMode::Dynacl,
        };
    }
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    Ok(RunContext {
        common: common.clone(),
        cfg,
        out,
    })
}

fn write_manifest(ctx: &RunContext, dir: &Path, command: &str, stages: &[Stage]) -> Outcome {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_ECHO), ctx.cfg.to_toml())?;
    let manifest = Manifest {
        name: &ctx.cfg.name,
        command,
        config: ctx.common.config.as_deref(),
        seed: ctx.cfg.seed,
        out: &ctx.out,
        stages,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join(format!("manifest_{command}.json")), json)?;
    Ok(())
}

fn cmd_pretrain(ctx: &RunContext) -> Outcome {
    let out = &ctx.out;
    let resolved = ctx.cfg.to_toml();
    if out.join(ENCODER).exists() && !ctx.common.force {
        let previous = std::fs::read_to_string(out.join(CONFIG_ECHO)).unwrap_or_default();
        if previous == resolved {
            eprintln!("pretrain: {} is up to date", out.display());
            return Ok(());
        }
        return Err(Failure::Config(anyhow::anyhow!(
            "{} holds a run with a different configuration; pass --force to replace it",
            out.display()
        )));
    }
    let train = ctx.cfg.train_set()?;
    let spec = ctx.cfg.model.spec(train.descriptor.sample_shape());
    let staging = staging_dir(out)?;
    write_manifest(ctx, &staging, "pretrain", &[Stage::Pretrain])?;
    eprintln!(
        "pretrain: {} samples, {} parameters, mode {:?}",
        train.len(),
        air_core::encoder::Encoder::new(spec.clone(), 0)?.num_params(),
        ctx.cfg.train.mode
    );
    let result = pretrain(&train, &spec, &ctx.cfg.train, Some(&staging), &mut |m| {
        eprintln!(
            "epoch {:>4}  mu {:.4}  omega {:.4}  lr {:.5}  acl {:.4}  sir {:.4e}  air {:.4e}  total {:.4}",
            m.epoch, m.mu, m.omega, m.lr, m.acl_loss, m.sir, m.air, m.total
        );
    });
    if let Err(e) = result {
        let kept = out.with_extension("failed");
        let _ = std::fs::remove_dir_all(&kept);
        let _ = std::fs::rename(&staging, &kept);
        eprintln!("pretrain: partial outputs kept in {}", kept.display());
        return Err(e.into());
    }
    if out.exists() {
        std::fs::remove_dir_all(out)?;
    }
    std::fs::rename(&staging, out)?;
    eprintln!("pretrain: wrote {}", out.join(ENCODER).display());
    Ok(())
}

/// Sibling directory that is renamed into place once a stage completes.
fn staging_dir(out: &Path) -> Outcome<PathBuf> {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let staging = out.with_file_name(format!(".{name}.staging-{}", std::process::id()));
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    std::fs::create_dir_all(&staging)?;
    Ok(staging)
}

fn require(path: &Path, what: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Missing(anyhow::anyhow!(
            "{what} {} not found",
            path.display()
        )))
    }
}

fn load_encoder(ctx: &RunContext) -> Outcome<air_core::encoder::Encoder> {
    let path = ctx.out.join(ENCODER);
    require(&path, "pretrained encoder")?;
    Ok(Checkpoint::load(&path, None)?.encoder(&path)?)
}

fn protocol_of(ctx: &RunContext, protocol: Option<Protocol>) -> Protocol {
    protocol.unwrap_or_else(|| Protocol::from_mode(ctx.cfg.finetune.mode))
}

fn cmd_finetune(ctx: &RunContext, protocol: Option<Protocol>) -> Outcome {
    let protocol = protocol_of(ctx, protocol);
    let path = ctx.out.join(protocol.classifier_file());
    if path.exists() && !ctx.common.force {
        eprintln!("finetune: {} exists", path.display());
        return Ok(());
    }
    let encoder = load_encoder(ctx)?;
    let train = ctx.cfg.train_set()?;
    let mut cfg = ctx.cfg.finetune.clone();
    let report = match protocol {
        Protocol::LpAff => {
            cfg.mode = FinetuneMode::Aff;
            let (report, clustering) = lp_aff(&encoder, &train, train.descriptor.classes, &cfg)?;
            eprintln!(
                "finetune: pseudo labels from {} clusters, inertia {:.4}",
                train.descriptor.classes, clustering.inertia
            );
            report
        }
        p => {
            cfg.mode = match p {
                Protocol::Slf => FinetuneMode::Slf,
                Protocol::Alf => FinetuneMode::Alf,
                _ => FinetuneMode::Aff,
            };
            finetune(&encoder, &train, &cfg)?
        }
    };
    for (e, loss) in report.losses.iter().enumerate() {
        eprintln!("finetune {} epoch {e:>3}  loss {loss:.4}", protocol.label());
    }
    write_manifest(ctx, &ctx.out, "finetune", &[Stage::Finetune])?;
    report.classifier.save(&path, cfg.epochs, cfg.seed)?;
    eprintln!("finetune: wrote {}", path.display());
    Ok(())
}

fn cmd_eval(ctx: &RunContext, protocol: Option<Protocol>) -> Outcome {
    let protocols: Vec<Protocol> = match protocol {
        Some(p) => vec![p],
        None => Protocol::ALL
            .into_iter()
            .filter(|p| ctx.out.join(p.classifier_file()).exists())
            .collect(),
    };
    if protocols.is_empty() {
        return Err(Failure::Missing(anyhow::anyhow!(
            "no finetuned classifier in {}",
            ctx.out.display()
        )));
    }
    let test = ctx.cfg.test_set()?;
    write_manifest(ctx, &ctx.out, "eval", &[Stage::Eval])?;
    for p in protocols {
        let path = ctx.out.join(p.classifier_file());
        let target = ctx.out.join(format!("eval_{}.json", p.tag()));
        if target.exists() && !ctx.common.force {
            eprintln!("eval: {} exists", target.display());
            continue;
        }
        require(&path, "classifier")?;
        let clf = Classifier::load(&path, None)?;
        let mut report = evaluate(&clf, &test, &ctx.cfg.eval)?;
        report.protocol = p.label().into();
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&target, json)?;
        println!(
            "{}  standard {:.4}  robust {:.4}  corruption {}",
            p.label(),
            report.standard_acc,
            report.robust_acc,
            report
                .corruption_mean()
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    Ok(())
}

fn cmd_verify(ctx: &RunContext, seeds: usize, break_decomposition: bool) -> Outcome {
    let opts = VerifyOptions {
        seed: ctx.cfg.seed,
        passes: seeds,
        break_decomposition,
        ..VerifyOptions::default()
    };
    let passes = run_suite(&opts)?;
    let mut lines = String::new();
    let mut failed = Vec::new();
    for (p, records) in passes.iter().enumerate() {
        for r in records {
            lines.push_str(&serde_json::to_string(r).expect("record serializes"));
            lines.push('\n');
            if !r.pass {
                failed.push(format!(
                    "pass {p}: {} ({:e} > {:e})",
                    r.check, r.max_error, r.tolerance
                ));
            }
        }
    }
    std::io::stdout().write_all(lines.as_bytes())?;
    if ctx.common.out.is_some() {
        write_manifest(ctx, &ctx.out, "verify", &[Stage::Verify])?;
        std::fs::write(ctx.out.join("verify.jsonl"), &lines)?;
    }
    if failed.is_empty() {
        eprintln!("verify: {} passes, all checks passed", passes.len());
        Ok(())
    } else {
        Err(Failure::Verification(failed.join("; ")))
    }
}

fn cmd_report(ctx: &RunContext) -> Outcome {
    let files = write_report(&ctx.out, &ctx.out.join("report"))?;
    eprintln!("report: wrote {}", files.metrics_csv.display());
    if let Some(p) = &files.results_csv {
        eprintln!("report: wrote {}", p.display());
    }
    eprintln!("report: wrote {}", files.loss_curve.display());
    Ok(())
}

fn configure_workers() -> Outcome {
    if let Ok(v) = std::env::var("AIR_NUM_WORKERS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("AIR_NUM_WORKERS={v} is not a count"))
            .map_err(Failure::Config)?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    configure_workers()?;
    match cli.command {
        Command::Pretrain(c) => cmd_pretrain(&context(&c)?),
        Command::Finetune { common, protocol } => cmd_finetune(&context(&common)?, protocol),
        Command::Eval { common, protocol } => cmd_eval(&context(&common)?, protocol),
        Command::Verify {
            common,
            seeds,
            break_decomposition,
        } => cmd_verify(&context(&common)?, seeds, break_decomposition),
        Command::Report(c) => cmd_report(&context(&c)?),
        Command::Run { common, stage } => {
            let ctx = context(&common)?;
            for s in stage {
                match s {
                    Stage::Pretrain => cmd_pretrain(&ctx)?,
                    Stage::Finetune => cmd_finetune(&ctx, None)?,
                    Stage::Eval => cmd_eval(&ctx, None)?,
                    Stage::Verify => cmd_verify(&ctx, 1, false)?,
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Verification(m) => eprintln!("verification failed: {m}"),
                Failure::Config(e) => eprintln!("config error: {e:#}"),
                Failure::Missing(e) => eprintln!("missing artifact: {e:#}"),
                Failure::Runtime(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
