//! `steerdec` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 component error.

mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use steerdec::experiment::{self, ExperimentConfig, Loaded, SCORER_URL_ENV};
use steerdec::{Direction, Error};

#[derive(Parser)]
#[command(name = "steerdec", version, about = "Decoding-time detoxification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic two-style corpora, labeled set and prompts.
    SynthData(train::SynthArgs),
    /// Train an n-gram or neural backbone on a corpus.
    TrainBackbone(train::BackboneArgs),
    /// Tune a soft prompt on a frozen neural backbone.
    TuneDetoxifier(train::TuneArgs),
    /// Train the proxy toxicity scorer on an annotated CSV.
    TrainScorer(train::ScorerArgs),
    /// Sample continuations and write the record file.
    Generate(ExperimentArgs),
    /// Sample, score and report every metric.
    Eval(ExperimentArgs),
    /// Sweep the control strength and recommend one.
    AlphaGrid(ExperimentArgs),
    /// Evaluate every generator against every detoxifier.
    PairingMatrix(ExperimentArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long, value_parser = parse_direction)]
    direction: Option<Direction>,
    /// Tolerance of the α-selection rule.
    #[arg(long)]
    delta: Option<f64>,
    /// Comma-separated α values for alpha-grid.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Score with an external HTTP endpoint instead of the configured scorer.
    #[arg(long, env = SCORER_URL_ENV)]
    scorer_url: Option<String>,
    /// Concurrent request cap for the external scorer.
    #[arg(long)]
    scorer_max_in_flight: Option<usize>,
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    match s {
        "suppress" => Ok(Direction::Suppress),
        "amplify" => Ok(Direction::Amplify),
        _ => Err(format!("expected `suppress` or `amplify`, got {s:?}")),
    }
}

/// Errors sorted by exit code.
pub enum Failure {
    Config(Error),
    Component(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Component(_) => 3,
        }
    }

    fn error(&self) -> &Error {
        match self {
            Failure::Config(e) | Failure::Component(e) => e,
        }
    }
}

/// Config-shaped errors raised while running still count as config errors.
pub fn classify(e: Error) -> Failure {
    match e.root() {
        Error::InvalidConfig(_) => Failure::Config(e),
        _ => Failure::Component(e),
    }
}

impl ExperimentArgs {
    fn config(&self) -> Result<ExperimentConfig, Failure> {
        let mut c = ExperimentConfig::load(&self.config).map_err(Failure::Config)?;
        c.seed = self.seed;
        if let Some(n) = &self.name {
            c.name = n.clone();
        }
        if let Some(d) = &self.output_dir {
            c.output_dir = d.clone();
        }
        let s = &mut c.steering;
        s.alpha = self.alpha.unwrap_or(s.alpha);
        s.top_p = self.top_p.unwrap_or(s.top_p);
        s.k_samples = self.k.unwrap_or(s.k_samples);
        s.max_new_tokens = self.max_new_tokens.unwrap_or(s.max_new_tokens);
        s.direction = self.direction.unwrap_or(s.direction);
        c.delta = self.delta.unwrap_or(c.delta);
        if let Some(a) = &self.alphas {
            c.alphas = Some(a.clone());
        }
        c.apply_scorer_url(self.scorer_url.clone());
        if let (Some(cap), experiment::ScorerRef::External(e)) = (self.scorer_max_in_flight, &mut c.scorer) {
            e.max_in_flight = cap;
        }
        c.validate().map_err(Failure::Config)?;
        Ok(c)
    }
}

type Runner = fn(&ExperimentConfig, &Loaded) -> steerdec::Result<Vec<PathBuf>>;

fn run_experiment(args: &ExperimentArgs, runner: Runner) -> Result<(), Failure> {
    let config = args.config()?;
    let loaded = Loaded::load(&config).map_err(classify)?;
    for path in runner(&config, &loaded).map_err(classify)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::SynthData(a) => train::synth_data(&a),
        Command::TrainBackbone(a) => train::train_backbone(&a),
        Command::TuneDetoxifier(a) => train::tune_detoxifier(&a),
        Command::TrainScorer(a) => train::train_scorer(&a),
        Command::Generate(a) => run_experiment(&a, experiment::run_generate),
        Command::Eval(a) => run_experiment(&a, experiment::run_eval_experiment),
        Command::AlphaGrid(a) => run_experiment(&a, experiment::run_alpha_grid),
        Command::PairingMatrix(a) => run_experiment(&a, experiment::run_pairing),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let kind = if f.code() == 2 { "configuration error" } else { "error" };
            eprintln!("steerdec: {kind}: {}", f.error());
            ExitCode::from(f.code())
        }
    }
}
