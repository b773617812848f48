use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use groupcvr_core::model::Mode;
use groupcvr_core::pipeline::{Pipeline, RunConfig, Stage, StageOptions, StageOutcome};
use groupcvr_core::{Error, Result};

/// Semantic user grouping and a group-aware CVR model, as a staged pipeline.
///
/// Stages read their predecessors' artifacts from `paths.out_dir` and write
/// their own next to a manifest.json.
#[derive(Parser, Debug)]
#[command(name = "groupcvr", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model variant for train/eval (overrides `model.mode`).
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Dotted `key=value` override, e.g. `model.lambda=0.02`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Also write (x, y) series for level, k and lambda charts.
    #[arg(long, global = true)]
    plot_data: bool,
    /// Use the built-in stub encoder instead of the embedding service.
    #[arg(long, global = true)]
    offline: bool,
    /// Proceed when upstream artifacts came from a different config.
    #[arg(long, global = true)]
    allow_config_mismatch: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic world.
    Synth,
    /// Build profiles and embed them.
    Profile,
    /// Fit the residual-quantization codebooks and assign group codes.
    Group,
    /// Build per-group attribute and sequence priors.
    Priors,
    /// Train the configured mode.
    Train,
    /// Evaluate the trained model of the configured mode.
    Eval,
    /// Train and evaluate ablation variants against the full model.
    Ablate {
        /// Comma-separated mode names; all variants when omitted.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
    },
    /// Sweep codebook size and distillation weight.
    Sweep,
    /// Run synth through eval.
    Run,
    /// Print the effective config.
    Config,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(mode) = &common.mode {
        let m: Mode = mode.parse()?;
        overrides.push(format!("model.mode=\"{}\"", m.name()));
    }
    if common.offline {
        overrides.push("profiler.offline=true".into());
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn report(outcome: &StageOutcome, stage: &str) {
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(s) = &outcome.summary {
        println!("{}", s.trim_end());
    }
    eprintln!("{stage}: wrote {} files", outcome.outputs.len());
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.common)?;
    if let Command::Config = cli.command {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let options = StageOptions {
        allow_config_mismatch: cli.common.allow_config_mismatch,
        plot_data: cli.common.plot_data,
    };
    let pipe = Pipeline::new(config, options)?;
    let stage = match cli.command {
        Command::Synth => Stage::Synth,
        Command::Profile => Stage::Profile,
        Command::Group => Stage::Group,
        Command::Priors => Stage::Priors,
        Command::Train => Stage::Train,
        Command::Eval => Stage::Eval,
        Command::Sweep => Stage::Sweep,
        Command::Ablate { modes } if !modes.is_empty() => {
            let (outcome, _) = pipe.ablate_modes(&modes)?;
            report(&outcome, "ablate");
            return Ok(());
        }
        Command::Ablate { .. } => Stage::Ablate,
        Command::Run => {
            let (outcomes, _) = pipe.run_all()?;
            let names = ["synth", "profile", "group", "priors", "train", "eval"];
            for (o, name) in outcomes.iter().zip(names) {
                report(o, name);
            }
            return Ok(());
        }
        Command::Config => unreachable!("handled above"),
    };
    report(&pipe.run(stage)?, stage.name());
    Ok(())
}

/// One JSON object on stderr, so scripts can tell failures apart.
fn error_line(e: &Error) -> String {
    let mut obj = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    if let Error::MissingArtifact { stage, path } = e {
        obj["stage"] = (*stage).into();
        obj["path"] = path.display().to_string().into();
    }
    obj.to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
