use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use podec::experiments::commands::{self, load_config, CommonOptions};
use podec::experiments::{OutputFormat, Representation};
use podec::zoo::Strategy;

#[derive(Parser)]
#[command(name = "podec", version, about = "Representation search for policy decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Format of the rows file.
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: OutputFormat,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    s.parse().map_err(|e: podec::Error| e.to_string())
}

fn parse_representation(s: &str) -> Result<Representation, String> {
    s.parse().map_err(|e: podec::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: podec::Error| e.to_string())
}

/// Plant selection for commands that work on a single linear plant.
#[derive(Args, Clone)]
struct PlantArgs {
    /// Linearize this benchmark instead of sampling.
    #[arg(long)]
    system: Option<String>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
}

impl PlantArgs {
    fn apply(&self, s: &mut commands::PlantSource) {
        if self.system.is_some() {
            s.system = self.system.clone();
        }
        if let Some(v) = self.strategy {
            s.strategy = v;
        }
        if let Some(v) = self.m {
            s.m = v;
        }
        if let Some(v) = self.n {
            s.n = v;
        }
    }
}

#[derive(Args, Clone)]
struct PolicyArgs {
    #[arg(long)]
    system: Option<String>,
    /// `original` or `transformed`.
    #[arg(long, value_parser = parse_representation)]
    representation: Option<Representation>,
}

impl PolicyArgs {
    fn apply(&self, c: &mut commands::PolicyCommand) {
        if let Some(s) = &self.system {
            c.pipeline.system = s.clone();
        }
        if let Some(r) = self.representation {
            c.representation = r;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compare representations over sampled linear plants.
    Table1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Linearize, map, search, solve and roll out a benchmark.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        system: Option<String>,
    },
    /// Sample random linear plants.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        plant: PlantArgs,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Derive a representation map for one plant.
    Transform {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        plant: PlantArgs,
        /// `svd` or `balanced`.
        #[arg(long)]
        map: Option<String>,
    },
    /// Evaluate every decomposition of one plant.
    Enumerate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        plant: PlantArgs,
    },
    /// Genetic search over decompositions of one plant.
    Ga {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        plant: PlantArgs,
    },
    /// Policy iteration for the best decomposition of a benchmark.
    Pi {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Roll out decomposed policies from seeded initial states.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Directory written by `pi`.
        #[arg(long)]
        policies: Option<PathBuf>,
    },
}

impl Common {
    fn options(&self) -> CommonOptions {
        CommonOptions {
            config: self.config.clone(),
            seed: self.seed,
            out: self.out.clone(),
            format: self.format,
            jobs: self.jobs,
        }
    }
}

fn run(cli: Cli) -> podec::Result<()> {
    match cli.command {
        Command::Table1 { common, samples } => {
            let o = common.options();
            let mut cfg: podec::experiments::Table1Config = load_config(o.config.as_deref())?;
            if let Some(s) = samples {
                cfg.samples = s;
            }
            commands::table1(cfg, &o)
        }
        Command::Pipeline { common, system } => {
            let o = common.options();
            let mut cfg: podec::experiments::PipelineConfig = load_config(o.config.as_deref())?;
            if let Some(s) = system {
                cfg.system = s;
            }
            commands::pipeline(cfg, &o)
        }
        Command::Sample { common, plant, count } => {
            let o = common.options();
            let mut cfg: commands::SampleCommand = load_config(o.config.as_deref())?;
            plant.apply(&mut cfg.source);
            if let Some(c) = count {
                cfg.count = c;
            }
            commands::sample_plants(cfg, &o)
        }
        Command::Transform { common, plant, map } => {
            let o = common.options();
            let mut cfg: commands::TransformCommand = load_config(o.config.as_deref())?;
            plant.apply(&mut cfg.source);
            match map.as_deref() {
                None => {}
                Some("svd") => cfg.map = commands::MapKind::Svd,
                Some("balanced") => cfg.map = commands::MapKind::Balanced,
                Some(other) => return Err(podec::Error::InvalidConfig(format!("unknown map `{other}`"))),
            }
            commands::transform(cfg, &o)
        }
        Command::Enumerate { common, plant } => {
            let o = common.options();
            let mut cfg: commands::EnumerateCommand = load_config(o.config.as_deref())?;
            plant.apply(&mut cfg.source);
            commands::enumerate(cfg, &o)
        }
        Command::Ga { common, plant } => {
            let o = common.options();
            let mut cfg: commands::GaCommand = load_config(o.config.as_deref())?;
            plant.apply(&mut cfg.source);
            commands::ga(cfg, &o)
        }
        Command::Pi { common, policy } => {
            let o = common.options();
            let mut cfg: commands::PolicyCommand = load_config(o.config.as_deref())?;
            policy.apply(&mut cfg);
            commands::pi(cfg, &o)
        }
        Command::Rollout { common, policy, policies } => {
            let o = common.options();
            let mut cfg: commands::PolicyCommand = load_config(o.config.as_deref())?;
            policy.apply(&mut cfg);
            if policies.is_some() {
                cfg.policies = policies;
            }
            commands::rollout(cfg, &o)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
