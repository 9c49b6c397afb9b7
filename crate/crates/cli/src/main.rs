use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fusiondx_core::pipeline::{resolve_output_dir, run_pipeline, run_stage, ExperimentConfig, PipelineError, Stage, OUTPUT_ENV};

/// Runs one stage of the fusiondx pipeline, or `all` of them in order.
///
/// Exit codes: 0 success, 2 bad config, 3 missing artifact, 4 numerical failure.
#[derive(Parser, Debug)]
#[command(name = "fusiondx", version)]
struct Args {
    /// synth-images, synth-cohort, extract, prep-tab, train-cnn, train-mlp,
    /// train-gbdt, train-fusion, evaluate, explain-gradcam, explain-shap or all
    stage: String,
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir, then
    /// $FUSIONDX_OUT/<config name>, then runs/<config name>.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(args: &Args) -> Result<(), PipelineError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let env_root = std::env::var(OUTPUT_ENV).ok();
    let out = resolve_output_dir(args.out.as_deref(), &config, &args.config, env_root.as_deref());
    let summaries = if args.stage == "all" {
        run_pipeline(&config, &out)?
    } else {
        vec![run_stage(&config, args.stage.parse::<Stage>()?, &out)?]
    };
    for s in summaries {
        println!("{}: {} files in {:.1}s", s.stage, s.outputs.len(), s.wall_seconds);
    }
    println!("output: {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
