use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use ndcl_cli::config::{parse_override, resolve, Resolved, RESOLVED_FILE};
use ndcl_cli::report::{load_run, ReportTable, METRICS_FILE};
use ndcl_core::audit::{run_audit, AuditTarget};
use ndcl_core::splits::{compute_stats, generate_plan_seeded, Regime, SplitSpec};
use ndcl_core::trainer::{evaluate_world, loss_log_to_text, run_world, MlpModel};
use toml::Value;

const CHECKPOINT_FILE: &str = "checkpoint.txt";
const LOSS_LOG_FILE: &str = "loss_log.tsv";

/// Exit status 2 marks usage and configuration problems, 1 a failed run or
/// audit.
struct CliError {
    code: u8,
    err: anyhow::Error,
}

fn usage(err: impl Into<anyhow::Error>) -> CliError {
    CliError { code: 2, err: err.into() }
}

fn failure(err: impl Into<anyhow::Error>) -> CliError {
    CliError { code: 1, err: err.into() }
}

type CmdResult = Result<(), CliError>;

#[derive(Parser)]
#[command(name = "ndcl", version, about = "Imbalanced domain generalization experiments with negative-dominant contrastive losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a class-by-domain sampling plan and print its imbalance ratios.
    GenerateSplits(SplitArgs),
    /// Train on a synthetic world; writes checkpoint, loss log, metrics and resolved config.
    Train(RunArgs),
    /// Compare analytic gradients with central differences.
    GradCheck(GradArgs),
    /// Re-evaluate a checkpoint on the target domain of its world.
    Eval(EvalArgs),
    /// Tabulate finished runs and correlate diagnostics with accuracy.
    Report(ReportArgs),
}

#[derive(Args)]
struct SplitArgs {
    /// mildgini, totalheavytail or duality.
    #[arg(long)]
    regime: String,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    domains: usize,
    /// Head-class count in the largest domain.
    #[arg(long, default_value_t = 500)]
    base: usize,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    tail: f64,
    /// Ratio of the largest to the smallest domain (duality only).
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    imbalance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_per_domain: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    /// mean or sum.
    #[arg(long)]
    reduction: Option<String>,
    /// prior-shift, plan, misalignment, absorption or balanced.
    #[arg(long)]
    world: Option<String>,
    /// Plan file for `--world plan`.
    #[arg(long)]
    plan: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Any other setting as a dotted key, e.g. `--set mining.rho=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> anyhow::Result<Vec<(String, Value)>> {
        let mut out = Vec::new();
        let mut push = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                out.push((key.to_string(), v));
            }
        };
        let int = |v: Option<u64>| v.map(|v| i64::try_from(v).map(Value::Integer)).transpose();
        push("seed", int(self.seed)?);
        push("train.variant", self.variant.clone().map(Value::String));
        push("train.alpha", self.alpha.map(Value::Float));
        push("train.beta", self.beta.map(Value::Float));
        push("train.iterations", int(self.iterations.map(|v| v as u64))?);
        push("train.batch_per_domain", int(self.batch_per_domain.map(|v| v as u64))?);
        push("train.lr", self.lr.map(Value::Float));
        push("train.reduction", self.reduction.clone().map(Value::String));
        push("world.kind", self.world.clone().map(Value::String));
        push("world.plan", self.plan.clone().map(Value::String));
        push("output.dir", self.out.clone().map(Value::String));
        for s in &self.set {
            out.push(parse_override(s)?);
        }
        Ok(out)
    }

    fn resolve(&self, fallback_config: Option<&Path>) -> Result<Resolved, CliError> {
        let file = self.config.as_deref().or(fallback_config);
        let overrides = self.overrides().map_err(usage)?;
        resolve(file, &overrides).map_err(usage)
    }
}

#[derive(Args)]
struct GradArgs {
    /// One of infonce-nd, supcon-nd, infonce, supcon, reweighted-ce,
    /// alignment, total; all when omitted.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the resolved config stored next to the checkpoint.
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, each holding a metrics file.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    std::fs::write(path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(usage)
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create directory {}", dir.display()))
        .map_err(usage)
}

fn generate_splits(a: &SplitArgs) -> CmdResult {
    let spec = SplitSpec {
        num_domains: a.domains,
        num_classes: a.classes,
        total_per_domain: a.base,
        regime: a.regime.parse::<Regime>().map_err(usage)?,
        tail_param: a.tail,
        domain_imbalance: a.imbalance,
        seed: a.seed,
    };
    spec.validate().map_err(usage)?;
    let plan = generate_plan_seeded(&spec).map_err(failure)?;
    write_file(&a.out, &plan.to_text())?;
    let stats = compute_stats(&plan).map_err(failure)?;
    println!("plan\t{}", a.out.display());
    println!("CR\t{:.4}", stats.cr);
    println!("DR\t{:.4}", stats.dr);
    for (d, e) in stats.ecr.iter().enumerate() {
        println!("ECR[{d}]\t{e:.4}");
    }
    Ok(())
}

fn train(a: &RunArgs) -> CmdResult {
    let resolved = a.resolve(None)?;
    let cfg = &resolved.config;
    let train_cfg = cfg.train_config().map_err(usage)?;
    let opts = cfg.eval_options().map_err(usage)?;
    let world = cfg.world().map_err(usage)?;
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    write_file(&dir.join(RESOLVED_FILE), &resolved.to_toml().map_err(failure)?)?;
    log::info!("training {} on {} for {} iterations", train_cfg.variant, world.name, train_cfg.iterations);
    let run = run_world(&world, &train_cfg, &opts)
        .with_context(|| format!("training {} with seed {}", train_cfg.variant, train_cfg.seed))
        .map_err(failure)?;
    write_file(&dir.join(CHECKPOINT_FILE), &run.output.model.to_text())?;
    write_file(&dir.join(LOSS_LOG_FILE), &loss_log_to_text(&run.output.log))?;
    write_file(&dir.join(METRICS_FILE), &run.report.to_text())?;
    println!("{}", run.report.summary());
    Ok(())
}

fn eval(a: &EvalArgs) -> CmdResult {
    let text = std::fs::read_to_string(&a.checkpoint)
        .with_context(|| format!("cannot read checkpoint {}", a.checkpoint.display()))
        .map_err(usage)?;
    let model = MlpModel::from_text(&text)
        .with_context(|| format!("malformed checkpoint {}", a.checkpoint.display()))
        .map_err(usage)?;
    let stored = a.checkpoint.parent().map(|d| d.join(RESOLVED_FILE)).filter(|p| p.exists());
    let resolved = a.run.resolve(stored.as_deref())?;
    let cfg = &resolved.config;
    let opts = cfg.eval_options().map_err(usage)?;
    let world = cfg.world().map_err(usage)?;
    let report = evaluate_world(&model, &world, cfg.seed, &opts).map_err(failure)?;
    if a.run.out.is_some() {
        let dir = cfg.output_dir();
        create_dir(&dir)?;
        write_file(&dir.join(RESOLVED_FILE), &resolved.to_toml().map_err(failure)?)?;
        write_file(&dir.join(METRICS_FILE), &report.to_text())?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn grad_check(a: &GradArgs) -> CmdResult {
    let targets = match &a.variant {
        Some(v) => vec![v.parse::<AuditTarget>().map_err(usage)?],
        None => AuditTarget::ALL.to_vec(),
    };
    if a.trials == 0 {
        return Err(usage(anyhow!("--trials must be positive")));
    }
    let report = run_audit(&targets, a.trials, a.seed);
    print!("{}", report.to_text());
    if report.passed() {
        return Ok(());
    }
    for row in report.rows.iter().filter(|r| !r.passed()) {
        let seeds: Vec<String> = row.failures.iter().map(u64::to_string).collect();
        eprintln!("{} failed for trial seeds {}", row.target, seeds.join(", "));
    }
    Err(failure(anyhow!("gradient audit failed")))
}

fn report(a: &ReportArgs) -> CmdResult {
    let mut rows = Vec::new();
    for dir in &a.runs {
        match load_run(dir) {
            Ok(row) => rows.push(row),
            Err(e) => eprintln!("warning: skipping {}: {e:#}", dir.display()),
        }
    }
    if rows.is_empty() {
        return Err(failure(anyhow!("no valid run directories")));
    }
    let table = ReportTable::new(rows);
    let text = table.to_text();
    if let Some(out) = &a.out {
        write_file(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenerateSplits(a) => generate_splits(a),
        Command::Train(a) => train(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.err);
            ExitCode::from(e.code)
        }
    }
}
