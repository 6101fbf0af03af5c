//! `exposim`: command-line driver for the exposure-correction simulator.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime or data errors. Failures print one `key=value` line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use exposure_core::config::ExperimentConfig;
use exposure_core::experiment::{
    choose, collect_sweeps, evaluate_on_logs, loop_log_name, run_closed_loop, sweep_and_select,
    write_sweep_outputs, write_trace_csv, ChosenGamma, SweepResult, TRACE_CSV,
};
use exposure_core::logging::{read_logs_csv, write_logs_csv};
use exposure_core::world::generate_world;
use exposure_core::Error;

#[derive(Debug, Parser)]
#[command(name = "exposim", version, about = "Exposure-aware retrieval simulator")]
struct Cli {
    /// TOML configuration file; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if missing; files are overwritten).
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,

    /// Run a single seed instead of the configured seed list.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Suppress the summary on stdout.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Static gamma sweep with grid search and the OPC baseline.
    Sweep,
    /// Closed feedback loop at one gamma; exports a trace and the logs.
    Loop {
        /// Serving gamma; defaults to the config's scoring.gamma.
        #[arg(long, allow_negative_numbers = true)]
        gamma: Option<f64>,
    },
    /// Train and sweep on an impression log file instead of simulated logs.
    Replay {
        /// CSV with header `round,user_id,item_id,label`.
        #[arg(long)]
        logs: PathBuf,
    },
    /// Write a world snapshot for the configured world.
    GenerateWorld,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " "))
}

fn error_line(e: &Error) -> String {
    match e {
        Error::Config { field, reason } => format!("error=config field={field} reason={}", quote(reason)),
        Error::Parse { path, line, reason } => format!(
            "error=parse path={} line={line} reason={}",
            quote(&path.display().to_string()),
            quote(reason)
        ),
        Error::Index { kind, index, len } => format!("error=index kind={kind} index={index} len={len}"),
        Error::EmptyInput(m) => format!("error=empty_input reason={}", quote(m)),
        Error::EmptyEvaluation(m) => format!("error=empty_evaluation reason={}", quote(m)),
        Error::NoFeasibleGamma(m) => format!("error=no_feasible_gamma reason={}", quote(m)),
        Error::InRound { round, source } => format!("round={round} {}", error_line(source)),
        other => format!("error=runtime reason={}", quote(&other.to_string())),
    }
}

fn is_usage(e: &Error) -> bool {
    match e {
        Error::Config { .. } => true,
        Error::InRound { source, .. } => is_usage(source),
        _ => false,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("error=config_file path={} reason={}", quote(&path.display().to_string()), quote(&e.to_string()))))?,
        None => String::new(),
    };
    let mut config = ExperimentConfig::from_toml_with_env(&text, std::env::vars())?;
    if let Some(seed) = cli.seed_override {
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn create_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Run(e.into()))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: &ExperimentConfig,
    fingerprints: serde_json::Value,
    artifacts: &[PathBuf],
) -> Result<(), Failure> {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let names: Vec<String> = artifacts
        .iter()
        .map(|p| p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()))
        .collect();
    let manifest = serde_json::json!({
        "tool": "exposim",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "created_unix": created,
        "config": config,
        "train_config_fingerprint": config.train.fingerprint(),
        "fingerprints": fingerprints,
        "artifacts": names,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Run(e.into()))?;
    std::fs::write(dir.join("manifest.json"), text + "\n").map_err(|e| Failure::Run(e.into()))
}

fn sweep_fingerprints(sweep: &SweepResult) -> serde_json::Value {
    let mut model = serde_json::Map::new();
    for r in &sweep.rows {
        model.insert(r.seed.to_string(), r.model_fingerprint.clone().into());
    }
    let opc: serde_json::Map<_, _> = sweep
        .opc
        .iter()
        .map(|r| (r.seed.to_string(), r.model_fingerprint.clone().into()))
        .collect();
    serde_json::json!({ "model": model, "opc": opc })
}

fn print_sweep(sweep: &SweepResult, chosen: &ChosenGamma) {
    println!("gamma  pos_recall  neg_recall  unique  dominance");
    for a in &sweep.aggregates {
        println!(
            "{:<6} {:<11.4} {:<11.4} {:<7.0} {:.4}",
            a.gamma, a.mean.positive_recall_at_k, a.mean.negative_recall_at_k, a.mean.unique_retrieved, a.mean.popular_dominance
        );
    }
    if let Some(a) = &sweep.opc_aggregate {
        println!(
            "opc    {:<11.4} {:<11.4} {:<7.0} {:.4}",
            a.mean.positive_recall_at_k, a.mean.negative_recall_at_k, a.mean.unique_retrieved, a.mean.popular_dominance
        );
    }
    println!("chosen gamma {} ({:?})", chosen.gamma, chosen.rule);
}

fn finish_sweep(cli: &Cli, command: &str, config: &ExperimentConfig, sweep: SweepResult, chosen: ChosenGamma) -> Result<(), Failure> {
    create_out(&cli.out)?;
    let paths = write_sweep_outputs(&cli.out, &sweep, &chosen)?;
    write_manifest(&cli.out, command, config, sweep_fingerprints(&sweep), &paths)?;
    if !cli.quiet {
        print_sweep(&sweep, &chosen);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Sweep => {
            let (sweep, chosen) = sweep_and_select(&config)?;
            finish_sweep(cli, "sweep", &config, sweep, chosen)
        }
        Command::Replay { logs } => {
            let records = read_logs_csv(logs)?;
            let seed = config.seeds[0];
            let sweep = collect_sweeps(vec![evaluate_on_logs(&config, seed, &records)?])?;
            let chosen = choose(&sweep, config.selection)?;
            finish_sweep(cli, "replay", &config, sweep, chosen)
        }
        Command::Loop { gamma } => {
            let gamma = gamma.unwrap_or(config.scoring.gamma);
            let runs = run_closed_loop(&config, gamma)?;
            create_out(&cli.out)?;
            let mut paths = vec![cli.out.join(TRACE_CSV)];
            write_trace_csv(&paths[0], &runs)?;
            for run in &runs {
                let path = cli.out.join(loop_log_name(run.seed));
                write_logs_csv(&path, &run.logs)?;
                paths.push(path);
            }
            write_manifest(&cli.out, "loop", &config, serde_json::json!({ "gamma": gamma }), &paths)?;
            if !cli.quiet {
                for run in &runs {
                    let last = run.rows.last().expect("at least one round");
                    println!(
                        "seed {} gamma {} rounds {} final_gini {:.4}",
                        run.seed,
                        run.gamma,
                        run.rows.len(),
                        last.exposure_gini
                    );
                }
            }
            Ok(())
        }
        Command::GenerateWorld => {
            let mut world_config = config.world.clone();
            if let Some(seed) = cli.seed_override {
                world_config.seed = seed;
            }
            let world = generate_world(&world_config)?;
            create_out(&cli.out)?;
            let path = cli.out.join("world.json");
            world.save_json(&path)?;
            write_manifest(&cli.out, "generate-world", &config, serde_json::json!({}), &[path.clone()])?;
            if !cli.quiet {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error=usage reason={}", quote(&first));
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(line)) => {
            eprintln!("{line}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(if is_usage(&e) { 1 } else { 2 })
        }
    }
}
