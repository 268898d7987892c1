use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lowfreq::experiment::{self, CampaignStore, ReportOptions, StageGrid};
use lowfreq::market_data::read_prices_csv;
use lowfreq::synth::{self, SynthConfig};
use lowfreq::validation::{self, ReturnsMatrix, ValidationConfig};
use lowfreq::{Error, Result};

#[derive(Parser)]
#[command(name = "lowfreq", version, about = "Low-frequency trading research pipeline")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ValidationArgs {
    /// CSCV block count (even).
    #[arg(long, default_value_t = 16)]
    splits: usize,
    /// Keep zero-return columns of failed configs.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    include_failed: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a price CSV (date column, one column per asset) into a store.
    Ingest {
        #[arg(long)]
        store: PathBuf,
        csv: PathBuf,
    },
    /// Write synthetic prices into a store.
    Synth {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1200)]
        days: usize,
    },
    /// Train every SAE of the grid's first stage.
    Stage1 {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train, run and simulate every predictor of the second stage.
    Stage2 {
        #[arg(long)]
        store: PathBuf,
        /// Defaults to the grid recorded by stage1.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// CSCV, ONC and DSR over a returns matrix.
    Validate {
        /// Reads `<store>/returns.csv` with the store's failure flags.
        #[arg(long, required_unless_present = "returns")]
        store: Option<PathBuf>,
        /// Any returns CSV (header of config labels, optional leading t column).
        #[arg(long)]
        returns: Option<PathBuf>,
        /// Output directory (default: `<store>/validation` or next to the CSV).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        v: ValidationArgs,
    },
    /// Full campaign report with plot data and ablation tables.
    Report {
        #[arg(long)]
        store: PathBuf,
        /// File with one stage-2 id per line to restrict the report to.
        #[arg(long)]
        ids: Option<PathBuf>,
        #[command(flatten)]
        v: ValidationArgs,
    },
}

fn validation_config(v: &ValidationArgs) -> ValidationConfig {
    ValidationConfig { splits: v.splits, ..ValidationConfig::default() }
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Ingest { store, csv } => {
            let series = read_prices_csv(&csv)?;
            let store = CampaignStore::open(store)?;
            store.write_prices(&series)?;
            Ok(json!({ "assets": series.len(), "days": series.first().map_or(0, |s| s.len()) }))
        }
        Command::Synth { store, seed, days } => {
            let cfg = SynthConfig { seed, n_days: days, ..SynthConfig::default() };
            let series = synth::generate(&cfg)?;
            let store = CampaignStore::open(store)?;
            store.write_prices(&series)?;
            Ok(json!({ "assets": series.len(), "days": days, "prices": store.prices_path() }))
        }
        Command::Stage1 { grid, store, seed } => {
            let grid = StageGrid::load(grid)?;
            let store = CampaignStore::open(store)?;
            let manifest = experiment::run_stage1(&store, &grid, seed)?;
            let failed = manifest.entries.iter().filter(|e| e.meta.failed).count();
            Ok(json!({ "configs": manifest.entries.len(), "failed": failed, "selected": manifest.selected() }))
        }
        Command::Stage2 { store, grid, seed } => {
            let store = CampaignStore::open(store)?;
            let campaign = store
                .campaign()?
                .ok_or_else(|| Error::InvalidConfig("stage 1 has not been run on this store".into()))?;
            let grid = match grid {
                Some(p) => StageGrid::load(p)?,
                None => campaign.grid,
            };
            let (manifest, returns) = experiment::run_stage2(&store, &grid, seed.unwrap_or(campaign.seed))?;
            let failed = manifest.entries.iter().filter(|e| e.failed).count();
            Ok(json!({ "configs": manifest.entries.len(), "failed": failed, "days": returns.n_rows() }))
        }
        Command::Validate { store, returns, out, v } => {
            let (m, out) = match (returns, store) {
                (Some(path), _) => {
                    let out = out.unwrap_or_else(|| path.with_extension("validation"));
                    (ReturnsMatrix::read_csv(&path)?, out)
                }
                (None, Some(store)) => {
                    let store = CampaignStore::open(store)?;
                    let entries = experiment::read_stage2_manifest(&store)?.entries;
                    let out = out.unwrap_or_else(|| store.root().join("validation"));
                    (experiment::assemble_returns(&store, &entries)?, out)
                }
                (None, None) => unreachable!("clap requires one of --store/--returns"),
            };
            let m = if v.include_failed { m } else { m.without_failed() };
            let outcome = validation::validate(&m, &validation_config(&v))?;
            outcome.write(&out, m.labels())?;
            Ok(serde_json::to_value(&outcome.report)?)
        }
        Command::Report { store, ids, v } => {
            let store = CampaignStore::open(store)?;
            let ids = match ids {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    Some(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
                }
                None => None,
            };
            let opts = ReportOptions { validation: validation_config(&v), include_failed: v.include_failed, ids };
            Ok(serde_json::to_value(experiment::report(&store, &opts)?)?)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim() }));
            return ExitCode::from(2);
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        pool = pool.num_threads(n.max(1));
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| run(cli)),
        Err(e) => Err(Error::InvalidConfig(format!("thread pool: {e}"))),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
