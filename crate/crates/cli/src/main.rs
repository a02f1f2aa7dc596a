use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wni_trajgen::harness::{run_pipeline, threads_from_env, RunConfig, Stage, ALL_STAGES};
use wni_trajgen::par;
use wni_trajgen::{Error, Result};

/// Intent-guided trajectory generation and offline power allocation.
#[derive(Parser)]
#[command(name = "wni-trajgen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect water-filling expert trajectories and build the knowledge base.
    ExpertCollect(Common),
    /// Train the four chained noise predictors.
    TrainGdm(Common),
    /// Sample generated trajectories for every configured intent.
    Generate(Common),
    /// Train one BCQ learner per intent on the generated data.
    TrainOffline(Common),
    /// Train the online DDPG baseline for every (intent, power) cell.
    TrainBaseline(Common),
    /// Evaluate all schemes and write metrics.csv and summary.json.
    Evaluate(Common),
    /// Run several stages in order (all of them by default).
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Comma-separated stage names, e.g. "expert,train-gdm".
        #[arg(long)]
        stages: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory, one subdirectory per stage.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Restrict the run to one intent id.
    #[arg(long)]
    intent: Option<u8>,
    /// Restrict the run to one total power in watts.
    #[arg(long)]
    power: Option<f64>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(id) = self.intent {
            config.intents = vec![config.intent(id)?.clone()];
        }
        if let Some(p) = self.power {
            config.env.total_power_options = vec![p];
        }
        config.validate()?;
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<()> {
    let (common, stages) = match cli.command {
        Command::ExpertCollect(c) => (c, vec![Stage::Expert]),
        Command::TrainGdm(c) => (c, vec![Stage::TrainGdm]),
        Command::Generate(c) => (c, vec![Stage::Generate]),
        Command::TrainOffline(c) => (c, vec![Stage::TrainOffline]),
        Command::TrainBaseline(c) => (c, vec![Stage::TrainBaseline]),
        Command::Evaluate(c) => (c, vec![Stage::Evaluate]),
        Command::Pipeline { common, stages } => {
            let stages = match stages {
                Some(list) => Stage::parse_list(&list)?,
                None => ALL_STAGES.to_vec(),
            };
            if stages.is_empty() {
                return Err(Error::Config("--stages lists no stage".into()));
            }
            (common, stages)
        }
    };
    let config = common.config()?;
    let report = run_pipeline(&config, &stages, &common.out)?;
    for m in &report.manifests {
        println!(
            "{}: {} output(s) in {}",
            m.stage,
            m.outputs.len(),
            common.out.join(m.stage.to_string()).display()
        );
    }
    println!("config_hash={} seed={}", report.config_hash, config.seed);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    par::tune_allocator();
    par::init_threads(threads_from_env());
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
