//! Command-line surface. Exit codes: 0 success, 1 fatal error, 2 config
//! error.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{build_backends, Backends, Needs, ReplayModeName, RunConfig, StrategyName};

#[derive(Debug, Parser)]
#[command(name = "eavit", version, about = "Cascaded human-value identification")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub replay_mode: Option<ReplayModeName>,
    #[arg(long, global = true)]
    pub replay_store: Option<PathBuf>,
    /// Canonical JSONL dataset.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub value_system: Option<PathBuf>,
    #[arg(long, global = true)]
    pub limit: Option<usize>,
    #[arg(long, global = true)]
    pub p_low: Option<f64>,
    #[arg(long, global = true)]
    pub p_high: Option<f64>,
    /// Detector samples per text (L).
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[arg(long, global = true, value_enum)]
    pub strategy: Option<StrategyName>,
    /// Values per baseline call.
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Step-by-step variant of the LLM prompt.
    #[arg(long, global = true)]
    pub cot: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatagenMode {
    /// Add missing explanations to positive labels.
    Explain,
    /// Imitate explained records.
    Icl,
    /// Generate for the least frequent values.
    Targeted,
    /// Write Alpaca training records.
    Emit,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Identify values for every dataset instance.
    Identify,
    /// Identify with a pure-LLM batching baseline.
    Baseline,
    /// Training-data factory.
    Datagen {
        #[arg(value_enum)]
        mode: DatagenMode,
    },
    /// Score a results file against the dataset's gold labels.
    Eval {
        /// Defaults to `<output_dir>/results.jsonl`.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Measure output variance across repeated runs.
    Consistency {
        #[arg(long)]
        repeats: Option<usize>,
        /// Randomly chosen instances (seeded).
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Questionnaire persona study.
    Persona {
        #[arg(long)]
        wvs: Option<PathBuf>,
        #[arg(long)]
        topics: Option<PathBuf>,
    },
    /// Token usage summary of results files.
    TokenReport {
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Fatal(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(vec![msg.into()])
    }

    pub fn fatal(msg: impl Into<String>) -> Self {
        CliError::Fatal(msg.into())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Fatal(_) => ExitCode::from(1),
        }
    }
}

impl Overrides {
    pub fn apply(&self, c: &mut RunConfig) {
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.replay_mode {
            c.replay.mode = v;
        }
        if let Some(v) = &self.replay_store {
            c.replay.store = Some(v.clone());
        }
        if let Some(v) = &self.dataset {
            c.data.dataset = Some(v.clone());
        }
        if let Some(v) = &self.value_system {
            c.value_system = Some(v.clone());
        }
        if let Some(v) = self.limit {
            c.data.limit = Some(v);
        }
        if let Some(v) = self.p_low {
            c.thresholds.p_low = v;
        }
        if let Some(v) = self.p_high {
            c.thresholds.p_high = v;
        }
        if let Some(v) = self.samples {
            c.sampling.samples = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
        if self.sequential {
            c.sequential = true;
        }
        if let Some(v) = self.strategy {
            c.strategy = v;
        }
        if let Some(v) = self.batch_size {
            c.baseline.batch_size = Some(v);
        }
        if self.cot {
            c.baseline.cot = true;
            c.final_call.cot = true;
        }
    }
}

fn needs(command: &Command) -> Needs {
    let all = Needs {
        dataset: true,
        backends: true,
        wvs: false,
        repeats: false,
    };
    match command {
        Command::Identify | Command::Baseline => all,
        Command::Datagen { mode } => Needs {
            backends: *mode != DatagenMode::Emit,
            ..all
        },
        Command::Eval { .. } => Needs {
            backends: false,
            ..all
        },
        Command::Consistency { .. } => Needs {
            repeats: true,
            ..all
        },
        Command::Persona { .. } => Needs {
            dataset: false,
            wvs: true,
            ..all
        },
        Command::TokenReport { .. } => Needs::default(),
    }
}

/// Loads, overrides and validates the configuration, then runs the command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(CliError::config)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut config);
    match &cli.command {
        Command::Baseline => config.strategy = StrategyName::Baseline,
        Command::Consistency { repeats, instances } => {
            if let Some(r) = repeats {
                config.consistency.repeats = *r;
            }
            if let Some(n) = instances {
                config.consistency.instances = Some(*n);
            }
        }
        Command::Persona { wvs, topics } => {
            if let Some(p) = wvs {
                config.persona.wvs_answers = Some(p.clone());
            }
            if let Some(p) = topics {
                config.persona.topics = Some(p.clone());
            }
        }
        _ => {}
    }
    let errs = config.validate(needs(&cli.command));
    if !errs.is_empty() {
        return Err(CliError::Config(errs));
    }
    match cli.command {
        Command::Identify | Command::Baseline => commands::identify(&config),
        Command::Datagen { mode } => commands::datagen(&config, mode),
        Command::Eval { results } => commands::eval(&config, results),
        Command::Consistency { .. } => commands::consistency(&config),
        Command::Persona { .. } => commands::persona(&config),
        Command::TokenReport { results } => commands::token_report(&results),
    }
}

/// Entry point used by the binary.
pub fn main_with(cli: Cli) -> ExitCode {
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Config(errs) => {
                    for m in errs {
                        eprintln!("config error: {m}");
                    }
                }
                CliError::Fatal(m) => eprintln!("error: {m}"),
            }
            e.exit_code()
        }
    }
}
