use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vat_scm::datagen::{generate, GenSpec};
use vat_scm::error::{Error, Result};
use vat_scm::inference::{leave_one_out, placebo_test};
use vat_scm::ingest::{infer_config, load_config, load_panel, write_panel_file, PipelineConfig};
use vat_scm::report::{self, write_atomic, FitSummary};
use vat_scm::{fit_weights, Execution, MonthKey, Panel};

/// Synthetic control estimates of tax pass-through on price-index panels.
#[derive(Debug, Parser)]
#[command(name = "vatscm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit donor weights and print them as CSV.
    Fit(RunArgs),
    /// Run the in-space placebo test and print per-unit RMSPE ratios and ranks.
    Placebo(RunArgs),
    /// Run leave-one-out refits and print the gap band.
    Loo(RunArgs),
    /// Generate a panel with known weights and effect as long-format CSV.
    Gen(GenArgs),
    /// Run the full pipeline and write every figure table, chart and summary.
    Report(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Pipeline config file (flat TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Long-format CSV input; overrides the config's data list. Repeatable.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Treated series id when running without a config; every other series
    /// becomes a donor.
    #[arg(long, default_value = vat_scm::datagen::TREATED_ID)]
    treated: String,
    /// Output file (fit, placebo, loo) or directory (report). Defaults to
    /// stdout, or the config's output_dir for report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run refits one after another instead of in parallel.
    #[arg(long)]
    sequential: bool,
    /// Rebase every series to 100 at the first pre-treatment month.
    #[arg(long)]
    rebase: bool,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    donors: usize,
    /// Index points added to the treated unit from --effect-from onward.
    #[arg(long, default_value_t = 0.0)]
    effect: f64,
    #[arg(long, default_value = "2024-01")]
    effect_from: String,
    /// Std. dev. of noise on the treated unit, index points.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "error": {
                    "kind": e.kind(),
                    "message": e.to_string(),
                    "exit_code": e.exit_code(),
                }
            });
            eprintln!("{payload}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(args) => {
            let (config, panel) = resolve(&args)?;
            let fit = fit_weights(&panel, &config.solver)?;
            emit(args.out.as_deref(), report::weights_table(&FitSummary::of(&fit)))
        }
        Command::Placebo(args) => {
            let (config, panel) = resolve(&args)?;
            let result = placebo_test(&panel, &config.inference_options())?;
            emit(args.out.as_deref(), report::placebo_table(&result.statistics))
        }
        Command::Loo(args) => {
            let (config, panel) = resolve(&args)?;
            let result = leave_one_out(&panel, &config.inference_options())?;
            emit(args.out.as_deref(), report::loo_table(&result))
        }
        Command::Gen(args) => {
            let from: MonthKey = args.effect_from.parse()?;
            let mut spec = GenSpec::new(args.donors, args.seed);
            spec.treated_noise_sd = args.noise;
            if args.effect != 0.0 {
                spec = spec.with_step_effect(from, args.effect);
            }
            let (panel, _) = generate(&spec)?;
            write_panel_file(&args.out, &panel)
        }
        Command::Report(args) => {
            let config = resolve_config(&args)?;
            let out = args.out.clone().unwrap_or_else(|| config.output_path());
            let bundle = report::run_pipeline_with(&config, &out)?;
            for row in bundle.monthly.iter().filter(|r| r.passthrough_rate.is_some()) {
                println!(
                    "{} {:<12} gap {:>8} pass-through {:>10}",
                    row.month,
                    row.phase.as_str(),
                    report::format::fmt_points(row.gap),
                    report::format::fmt_rate(row.passthrough_rate.unwrap_or_default()),
                );
            }
            println!(
                "treated placebo rank: {} of {}",
                bundle.placebo.treated_rank, bundle.placebo.ranked_units
            );
            println!("outputs written to {}", out.display());
            Ok(())
        }
    }
}

fn resolve_config(args: &RunArgs) -> Result<PipelineConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let mut cfg = load_config(path)?;
            if !args.data.is_empty() {
                cfg.data = args.data.iter().map(|p| p.display().to_string()).collect();
                cfg.base_dir = PathBuf::new();
            }
            cfg
        }
        None if !args.data.is_empty() => infer_config(&args.data, &args.treated)?,
        None => {
            return Err(Error::InvalidArgument(
                "either --config or --data is required".into(),
            ))
        }
    };
    if config.data.is_empty() {
        return Err(Error::Config {
            field: "data".into(),
            message: "no data files configured".into(),
        });
    }
    if args.sequential {
        config.execution = Execution::Sequential;
    }
    if args.rebase {
        config.rebase = true;
    }
    Ok(config)
}

fn resolve(args: &RunArgs) -> Result<(PipelineConfig, Panel)> {
    let config = resolve_config(args)?;
    let mut panel = load_panel(&config.data_paths(), &config)?;
    if config.rebase {
        panel = panel.rebased()?;
    }
    Ok((config, panel))
}

fn emit(out: Option<&Path>, text: String) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
