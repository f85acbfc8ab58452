use aerobatch_cli::commands::{load_config, run, CliError, Command};
use aerobatch_cli::RunConfig;
use clap::{Parser, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sub {
    Dataset,
    Train,
    Scene,
    Generate,
    Postprocess,
    Ablate,
    Plot,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Dataset => Command::Dataset,
            Sub::Train => Command::Train,
            Sub::Scene => Command::Scene,
            Sub::Generate => Command::Generate,
            Sub::Postprocess => Command::Postprocess,
            Sub::Ablate => Command::Ablate,
            Sub::Plot => Command::Plot,
        }
    }
}

/// Diffusion-generated aerobatic trajectories.
#[derive(Debug, Parser)]
#[command(name = "aerobatch", version)]
struct Args {
    command: Sub,
    /// JSON run config, or a previous run's manifest.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the scenario, plan, dataset and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let result = (|| -> Result<_, CliError> {
        let cfg = match &args.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        }
        .with_seed(args.seed);
        cfg.validate()?;
        run(args.command.into(), &cfg, &args.out)
    })();
    match result {
        Ok(m) => {
            println!("{}", serde_json::to_string_pretty(&m.summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let doc = e.to_json();
            eprintln!("{}", serde_json::to_string_pretty(&doc).unwrap_or_default());
            if std::fs::create_dir_all(&args.out).is_ok() {
                let _ = std::fs::write(args.out.join("error.json"), doc.to_string());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
