use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lcd_core::par::{self, Exec};
use lcd_core::pipeline::{Pipeline, PipelineConfig, PipelineError, Stage, StageSummary, SynthSuite};

/// Loop-closure detection pipeline.
#[derive(Parser, Debug)]
#[command(name = "lcd", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Working directory holding stage artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic sequences of the `[synth]` section.
    Synth,
    /// Fit the k-means vocabulary on the training split.
    FitVocab,
    /// Compute VLAD descriptors for every split.
    ExtractVlad,
    /// Build the retrieval index of every split.
    Index,
    /// Retrieve top-k cliques for every keyframe.
    Retrieve,
    /// Train the clique scoring model.
    Train,
    /// Score query edges of the validation and test cliques.
    Infer,
    /// Geometrically verify the highest-scoring candidate pairs.
    Verify,
    /// Compute AP / MR / RPE / ATE and the candidate sweep.
    Eval {
        /// Evaluate this score file instead of the inferred one.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Write SVG and CSV plots of the evaluation.
    Plot,
    /// Run every stage in order.
    #[command(alias = "all")]
    Run,
    /// Print a configuration template with every default filled in.
    DefaultConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| PipelineError::Config("--config <path> is required".into()))?;
    let cfg = PipelineConfig::load(path)?;
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn template() -> PipelineConfig {
    let suite = SynthSuite::default();
    let mut cfg = PipelineConfig { synth: Some(suite), ..Default::default() };
    cfg.model.desc_dim = cfg.synth.as_ref().unwrap().world.desc_dim;
    cfg
}

fn execute(cli: &Cli) -> Result<Vec<StageSummary>, PipelineError> {
    if let Command::DefaultConfig = cli.command {
        let mut cfg = template();
        if let Some(s) = cli.seed {
            cfg = cfg.with_seed(s);
        }
        print!("{}", cfg.to_toml_string());
        return Ok(Vec::new());
    }
    let pipeline = Pipeline::new(load_config(cli)?, &cli.out, Exec::Parallel)?;
    let stage = |s| pipeline.run(s).map(|r| vec![r]);
    match &cli.command {
        Command::Synth => stage(Stage::Synth),
        Command::FitVocab => stage(Stage::FitVocab),
        Command::ExtractVlad => stage(Stage::ExtractVlad),
        Command::Index => stage(Stage::Index),
        Command::Retrieve => stage(Stage::Retrieve),
        Command::Train => stage(Stage::Train),
        Command::Infer => stage(Stage::Infer),
        Command::Verify => stage(Stage::Verify),
        Command::Eval { scores: Some(p) } => pipeline.eval_scores(p).map(|r| vec![r]),
        Command::Eval { scores: None } => stage(Stage::Eval),
        Command::Plot => stage(Stage::Plot),
        Command::Run => pipeline.run_all(),
        Command::DefaultConfig => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match par::with_workers(cli.workers, || execute(&cli)) {
        Ok(summaries) => {
            for s in summaries {
                println!("{}", serde_json::to_string(&s).expect("summary serializes"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let err = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
