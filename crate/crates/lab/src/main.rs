use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;
use vdm_lab::commands::{rerun, run_recorded};
use vdm_lab::{config, Result};

/// Toy diffusion-model lab: data, training, sampling, and figures.
#[derive(Parser)]
#[command(name = "vdm", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set diffusion.lr=0.002`.
    #[arg(long = "set", value_name = "KEY=JSON")]
    sets: Vec<String>,
    /// Run seed; required here or in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Diffusion,
    Vae,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Ancestral,
    Langevin,
    Annealed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Classifier,
    Cfg,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    GenData(Common),
    /// Train a diffusion model or a VAE.
    Train {
        model: Model,
        #[command(flatten)]
        common: Common,
    },
    /// Draw samples from a checkpoint or an oracle score.
    Sample {
        method: Method,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the ELBO of a checkpoint in both forms.
    Elbo(Common),
    /// Plot a score field as arrows.
    ScoreField(Common),
    /// Sweep guidance strength on a labeled mixture.
    GuideDemo {
        mode: Mode,
        #[command(flatten)]
        common: Common,
    },
    /// Langevin trajectories with and without noise on a fixed mixture.
    Fig4(Common),
    /// Repeat a recorded run and verify its outputs byte for byte.
    Rerun {
        manifest: PathBuf,
        /// Directory for the repeated outputs; the manifest's own by default.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn name<T: ValueEnum>(v: T) -> Value {
    Value::String(v.to_possible_value().expect("no skipped variants").get_name().to_string())
}

fn run_command(command: &str, common: Common, extra: Option<(&str, Value)>) -> Result<()> {
    let mut cfg = config::load(common.config.as_deref())?;
    if let Some((key, v)) = extra {
        config::set_path(&mut cfg, key, v)?;
    }
    for s in &common.sets {
        config::set(&mut cfg, s)?;
    }
    if let Some(seed) = common.seed {
        config::set_path(&mut cfg, "seed", seed.into())?;
    }
    let (_, run) = run_recorded(command, &cfg, &common.out)?;
    for line in &run.summary {
        println!("{line}");
    }
    for f in &run.outputs {
        println!("wrote {}", common.out.join(f).display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::GenData(c) => run_command("gen-data", c, None),
        Cmd::Train { model, common } => run_command("train", common, Some(("model", name(model)))),
        Cmd::Sample { method, common } => run_command("sample", common, Some(("method", name(method)))),
        Cmd::Elbo(c) => run_command("elbo", c, None),
        Cmd::ScoreField(c) => run_command("score-field", c, None),
        Cmd::GuideDemo { mode, common } => run_command("guide-demo", common, Some(("mode", name(mode)))),
        Cmd::Fig4(c) => run_command("fig4", c, None),
        Cmd::Rerun { manifest, out } => {
            let m = rerun(&manifest, out.as_deref())?;
            println!("reproduced {} outputs of `{}`", m.outputs.len(), m.command);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
