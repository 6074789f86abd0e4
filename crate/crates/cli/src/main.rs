use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lamole_cli::commands::{self, parse_split};
use lamole_cli::{load_config, ConfigError, RunConfig, RunError, SELFCHECK_TOLERANCE};

/// Explainable molecular property prediction on synthetic planted-motif data.
///
/// Config keys can be overridden with dotted flags anywhere on the command
/// line, e.g. `--train.margin 0.2` or `--seed=3`.
#[derive(Parser)]
#[command(name = "lamole", version, arg_required_else_help = true)]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset, registry and oracle.
    GenData,
    /// Masked-token pretraining; writes paths.pretrained.
    Pretrain,
    /// Fine-tune; writes metrics.csv and the checkpoint.
    Train,
    /// Write explanations.jsonl for one split.
    Explain(SplitArgs),
    /// Write eval_metrics.csv for every explanation method.
    Eval(SplitArgs),
    /// Run an editing campaign; writes history.csv, hits.json, population.jsonl.
    Edit,
    /// Compare gradients with finite differences.
    Selfcheck,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, default_value = "test")]
    split: String,
    /// Worker threads; output order does not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

/// Flags of the form `--a.b value` or `--a.b=value`, plus `--seed`.
fn split_overrides(argv: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let name = flag.split('=').next().unwrap_or_default();
        if !(name.contains('.') || name == "seed") {
            rest.push(arg);
            continue;
        }
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| format!("--{flag} needs a value"))?;
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::GenData => {
            let s = commands::gen_data(cfg).context("gen-data")?;
            println!("wrote {} records ({} annotated) to {}", s.records, s.annotated, cfg.paths.dataset.display());
        }
        Command::Pretrain => {
            let losses = commands::pretrain(cfg).context("pretrain")?;
            for (i, l) in losses.iter().enumerate() {
                println!("epoch {} mlm loss {l:.4}", i + 1);
            }
        }
        Command::Train => {
            let s = commands::train(cfg).context("train")?;
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!(
                "test accuracy {} exp_auc {} mean_ep {} ({} alignment steps)",
                fmt(s.test.accuracy),
                fmt(s.test.exp_auc),
                fmt(s.test.mean_ep),
                s.alignment_active_steps
            );
        }
        Command::Explain(a) => {
            let split = parse_split(&a.split)?;
            let reports = commands::explain(cfg, split, a.jobs).context("explain")?;
            println!("explained {} molecules", reports.len());
        }
        Command::Eval(a) => {
            let split = parse_split(&a.split)?;
            let rows = commands::eval(cfg, split, a.jobs).context("eval")?;
            for r in rows {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                println!(
                    "{:<15} auc {} ep {} fidelity {} spurious {}",
                    r.method,
                    fmt(r.exp_auc),
                    fmt(r.mean_ep),
                    fmt(r.mean_fidelity),
                    fmt(r.mean_spurious_ratio)
                );
            }
        }
        Command::Edit => {
            let r = commands::edit(cfg).context("edit")?;
            let last = r.history.last().expect("generation 0 is recorded");
            println!("hit ratio {:.3}, best fitness {:.4}", r.hit_ratio, last.best);
        }
        Command::Selfcheck => {
            let report = commands::selfcheck(cfg).context("selfcheck")?;
            for c in &report.checks {
                println!("{:<24} {:>6} {:.3e}", c.name, c.components, c.max_relative_error);
            }
            println!("max relative error {:.3e}", report.max_relative_error);
            if !report.passed(SELFCHECK_TOLERANCE) {
                return Err(RunError::SelfcheckFailed(report.max_relative_error).into());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|c| c.is::<ConfigError>() || matches!(c.downcast_ref::<RunError>(), Some(RunError::Config(_))));
    if config {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let (argv, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = load_config(cli.config.as_deref(), &overrides)
        .map_err(anyhow::Error::from)
        .and_then(|cfg| run(cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
