use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tapsim::experiment::{
    cmd_eval, cmd_generate_profiles, cmd_ingest, cmd_probe, cmd_report, Environment, ExperimentConfig, ExperimentError,
    ProbeKind,
};
use tapsim::tasks::TaskKind;

#[derive(Parser)]
#[command(name = "tapsim", version, about = "LLM user simulation experiments for recommender evaluation")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Backend override, e.g. `scripted`, `live` or `replay:strict`.
    #[arg(long, global = true)]
    backend_override: Option<String>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the dataset and write the split.
    Ingest,
    /// Profile generation.
    Profiles {
        #[command(subcommand)]
        action: ProfilesAction,
    },
    /// Evaluate one task family: discrimination, ranking or rating.
    Eval { family: TaskKind },
    /// Run a bias probe: position, popularity, attributes or history-sweep.
    Probe { kind: ProbeKind },
    /// Summarize the reports into tables.
    Report,
}

#[derive(Subcommand)]
enum ProfilesAction {
    /// Generate (or resume) every configured profile store.
    Generate,
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf), ExperimentError> {
    let mut config = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(o) = &cli.backend_override {
        config.backend.apply_override(o)?;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| ExperimentError::Config("no output directory; pass --out or set output_dir".into()))?;
    config.validate()?;
    Ok((config, out))
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    if let Command::Report = cli.command {
        let out = match &cli.out {
            Some(o) => o.clone(),
            None => load_config(cli)?.1,
        };
        print!("{}", cmd_report(&out)?);
        return Ok(());
    }
    let (config, out) = load_config(cli)?;
    match &cli.command {
        Command::Ingest => {
            let m = cmd_ingest(&config, &out)?;
            println!(
                "{}: {} users, {} items, {} interactions; {} eligible, {} skipped lines",
                m.name, m.users, m.items, m.interactions, m.eligible_users, m.skipped_lines
            );
        }
        Command::Profiles { action: ProfilesAction::Generate } => {
            let env = Environment::open(config, &out)?;
            for s in cmd_generate_profiles(&env)? {
                println!(
                    "{}: {} profiles of {} planned, {} skipped, {} failed",
                    s.generator,
                    s.profiles,
                    s.planned,
                    s.skipped,
                    s.failures.len()
                );
            }
        }
        Command::Eval { family } => {
            let env = Environment::open(config, &out)?;
            print_cells(&out, &cmd_eval(&env, *family)?);
        }
        Command::Probe { kind } => {
            let env = Environment::open(config, &out)?;
            print_cells(&out, &cmd_probe(&env, *kind)?);
        }
        Command::Report => unreachable!(),
    }
    Ok(())
}

fn print_cells(out: &Path, cells: &[tapsim::experiment::CellReport]) {
    for cell in cells {
        let t = cell.total();
        let metrics: Vec<String> = cell.metrics.iter().map(|m| format!("{}={:.4}±{:.4}", m.metric, m.mean, m.std)).collect();
        println!("{}  {}  (scored {}, skipped {}, errors {})", cell.id(), metrics.join(" "), t.scored, t.skipped, t.errors);
    }
    println!("reports written to {}", out.join("reports").display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
