use std::path::PathBuf;
use std::process::ExitCode;

use cdrloc::pipeline::{exit_code, run_until, RunConfig, RunReport, Stage, StageError};
use clap::{Args, Parser, Subcommand};

/// Home and work localization from call detail records.
#[derive(Parser, Debug)]
#[command(name = "cdrloc", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// `key = value` config file; flags below override it.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Directory holding the input CSV files.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Directory receiving the artifacts.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Any config key, e.g. `--set eps_m=800`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Print the effective config and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write a synthetic world into the data directory.
    Generate,
    /// Validate inputs and report rejected rows.
    Ingest,
    /// Entropy filter.
    Filter,
    /// Train and evaluate the segment classifier.
    Profile,
    /// Calibrate speed thresholds and flag load-shared records.
    Loadshare,
    /// Infer home and work anchors.
    Localize,
    /// Build origin-destination matrices.
    Odmatrix,
    /// Compare against reference data.
    Evaluate,
    /// Run every configured stage.
    Run,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Generate => Stage::Generate,
            Command::Ingest => Stage::Ingest,
            Command::Filter => Stage::Filter,
            Command::Profile => Stage::Profile,
            Command::Loadshare => Stage::Loadshare,
            Command::Localize => Stage::Localize,
            Command::Odmatrix => Stage::Odmatrix,
            Command::Evaluate => Stage::Evaluate,
            Command::Run => return None,
        })
    }
}

#[derive(Debug)]
enum Failure {
    Config(cdrloc::Error),
    Stage(StageError),
}

impl Failure {
    fn code(&self) -> u8 {
        let c = match self {
            Failure::Config(e) => exit_code(e),
            Failure::Stage(e) => e.exit_code(),
        };
        c.clamp(1, 255) as u8
    }
}

fn build_config(g: &GlobalOpts) -> Result<RunConfig, cdrloc::Error> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                cdrloc::Error::InvalidConfig(format!("cannot read {}: {e}", path.display()))
            })?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &g.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            cdrloc::Error::InvalidConfig(format!("--set expects KEY=VALUE, got `{kv}`"))
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(d) = &g.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(d) = &g.out_dir {
        cfg.out_dir = d.clone();
    }
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    if g.workers.is_some() {
        cfg.workers = g.workers;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Option<RunReport>, Failure> {
    let mut cfg = build_config(&cli.global).map_err(Failure::Config)?;
    if cli.global.print_config {
        print!("{}", cfg.to_text());
        return Ok(None);
    }
    let last = match cli.command.stage() {
        // `generate` only writes data; later stages need their own command.
        Some(Stage::Generate) => {
            cfg.stages = [Stage::Generate].into();
            Stage::Generate
        }
        Some(stage) => stage,
        None => cfg.stages.iter().copied().max().unwrap_or(Stage::Evaluate),
    };
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Failure::Config(cdrloc::Error::io(&cfg.out_dir, e)))?;
    run_until(&cfg, last).map(Some).map_err(Failure::Stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Usage errors share the invalid-configuration exit code.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli) {
        Ok(Some(report)) => {
            print!("{}", report.summary.to_text());
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("error: {e}"),
                Failure::Stage(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.code())
        }
    }
}
