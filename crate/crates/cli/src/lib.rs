//! Command-line front end for the `svchange` pipeline.

pub mod commands;
pub mod config;
pub mod run_report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use svchange::series::SplitRole;
use svchange::{Error, ErrorKind};

use crate::commands::Context;
use crate::config::{load_config, Override};
use crate::run_report::{write_report, Recorder};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_CLIENT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "svchange", version, about = "Street view change point detection pipeline")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for splitting, pair sampling, training and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Override any config key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl From<Role> for SplitRole {
    fn from(r: Role) -> Self {
        match r {
            Role::Train => SplitRole::Train,
            Role::Val => SplitRole::Val,
            Role::Test => SplitRole::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic corpus and its embedding store.
    Synth,
    /// Compute scene points from building footprints.
    Sample {
        #[arg(long)]
        footprints: Option<PathBuf>,
    },
    /// Assemble scene series from panorama metadata.
    FetchMetadata {
        #[arg(long)]
        footprints: Option<PathBuf>,
        /// Replay recorded metadata instead of calling the live service.
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
    /// Generate labeled chronological pairs.
    Pairs {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// `all` or `pairwise`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Partition scenes into train, validation and test sets.
    Split {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the pair classifier on the training split.
    Train {
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the classifier on one split.
    Evaluate {
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Role::Test)]
        split: Role,
    },
    /// Decode change points for every series.
    Detect {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Restrict detection to one split.
        #[arg(long, value_enum)]
        split: Option<Role>,
    },
    /// Join detections, permits and ACS data per census tract.
    Aggregate {
        #[arg(long)]
        tracts: Option<PathBuf>,
        #[arg(long)]
        permits: Option<PathBuf>,
        #[arg(long)]
        acs: Option<PathBuf>,
    },
    /// Correlate change proxies with demographic change.
    Correlate,
    /// Write the choropleth, tables and scatter data.
    Report {
        #[arg(long)]
        tracts: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Sample { .. } => "sample",
            Command::FetchMetadata { .. } => "fetch-metadata",
            Command::Pairs { .. } => "pairs",
            Command::Split { .. } => "split",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Detect { .. } => "detect",
            Command::Aggregate { .. } => "aggregate",
            Command::Correlate => "correlate",
            Command::Report { .. } => "report",
        }
    }

    fn overrides(&self, out: &mut Vec<Override>) {
        let mut path = |key: &str, p: &Option<PathBuf>| {
            if let Some(p) = p {
                out.push(Override::new(format!("paths.{key}"), p.display().to_string()));
            }
        };
        match self {
            Command::Synth | Command::Correlate => {}
            Command::Sample { footprints } => path("footprints", footprints),
            Command::FetchMetadata { footprints, fixture } => {
                path("footprints", footprints);
                path("metadata_fixture", fixture);
            }
            Command::Pairs { manifest, mode } => {
                path("manifest", manifest);
                if let Some(m) = mode {
                    out.push(Override::new("pairs.mode", m.as_str()));
                }
            }
            Command::Split { manifest } => path("manifest", manifest),
            Command::Train { embeddings, lr, epochs } => {
                path("embeddings", embeddings);
                if let Some(lr) = lr {
                    out.push(Override::new("train.learning_rate", *lr));
                }
                if let Some(e) = epochs {
                    out.push(Override::new("train.epochs", *e as i64));
                }
            }
            Command::Evaluate { embeddings, .. } => path("embeddings", embeddings),
            Command::Detect { manifest, embeddings, .. } => {
                path("manifest", manifest);
                path("embeddings", embeddings);
            }
            Command::Aggregate { tracts, permits, acs } => {
                path("tracts", tracts);
                path("permits", permits);
                path("acs", acs);
            }
            Command::Report { tracts } => path("tracts", tracts),
        }
    }
}

/// Collects overrides in increasing precedence: `--set`, global flags, then
/// command flags.
pub fn overrides(cli: &Cli) -> svchange::Result<Vec<Override>> {
    let mut out = cli
        .set
        .iter()
        .map(|s| Override::parse(s))
        .collect::<svchange::Result<Vec<_>>>()?;
    if let Some(dir) = &cli.out {
        out.push(Override::new("paths.out", dir.display().to_string()));
    }
    if let Some(seed) = cli.seed {
        let seed = seed as i64;
        for key in ["split.seed", "train.seed", "pairs.seed", "synthetic.params.seed"] {
            out.push(Override::new(key, seed));
        }
    }
    cli.command.overrides(&mut out);
    Ok(out)
}

pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Validation => EXIT_VALIDATION,
        ErrorKind::Io => EXIT_IO,
        ErrorKind::External => EXIT_CLIENT,
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("SVCHANGE_LOG")
        .format_timestamp_millis()
        .try_init();
}

fn execute(cli: &Cli, ctx: &mut Context) -> svchange::Result<()> {
    let out_dir = ctx.config.out_dir();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    match &cli.command {
        Command::Synth => commands::synth(ctx),
        Command::Sample { .. } => commands::sample(ctx),
        Command::FetchMetadata { .. } => commands::fetch_metadata(ctx),
        Command::Pairs { .. } => commands::pairs(ctx),
        Command::Split { .. } => commands::split(ctx),
        Command::Train { .. } => commands::train_cmd(ctx),
        Command::Evaluate { split, .. } => commands::evaluate_cmd(ctx, (*split).into()),
        Command::Detect { split, .. } => commands::detect(ctx, split.map(Into::into)),
        Command::Aggregate { .. } => commands::aggregate(ctx),
        Command::Correlate => commands::correlate(ctx),
        Command::Report { .. } => commands::report(ctx),
    }
}

/// Runs one command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    let name = cli.command.name();
    let config = match overrides(&cli).and_then(|ov| load_config(cli.config.as_deref(), &ov)) {
        Ok(c) => c,
        Err(e) => {
            log::error!("command={name} kind={:?} error={e}", e.kind());
            return exit_code(&e);
        }
    };
    let mut ctx = Context {
        config: &config,
        jobs: cli.jobs,
        rec: Recorder::new(name, config.digest()),
    };
    let result = execute(&cli, &mut ctx);
    let report = ctx.rec.finish(result.as_ref().err().map(ToString::to_string));
    if let Err(e) = write_report(&config.out_dir(), &report) {
        log::error!("command={name} could not write run report: {e}");
    }
    match result {
        Ok(()) => {
            log::info!("command={name} status=ok wall_time_s={:.3}", report.wall_time_s);
            EXIT_OK
        }
        Err(e) => {
            log::error!("command={name} kind={:?} error={e}", e.kind());
            exit_code(&e)
        }
    }
}
