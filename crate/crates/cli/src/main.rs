use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use semitaco::harness::{
    cmd_eval, cmd_prepare, cmd_pretrain, cmd_synth, cmd_train, cmd_trainwv, exit_code, run_sweep, ExperimentConfig, Run,
    SweepSpec,
};

#[derive(Parser)]
#[command(name = "semitaco", version, about = "Semi-supervised Tacotron training on small paired corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Dotted-path override such as `train.seed=7`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy corpus if configured, validate manifests and cache features.
    Prepare(Common),
    /// Train skip-gram word vectors on the text corpus.
    Trainwv(Common),
    /// Pre-train the decoder on unpaired audio.
    Pretrain(Common),
    /// Fine-tune on paired data.
    Train(Common),
    /// Synthesize WAVs and alignment plots.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Text to synthesize; repeatable. Defaults to the evaluation manifest.
        #[arg(long)]
        text: Vec<String>,
    },
    /// Score the fine-tuned model on the evaluation manifest.
    Eval(Common),
    /// Train and evaluate every variant, paired amount and seed.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Sweep specification (JSON).
        #[arg(long)]
        sweep: PathBuf,
    },
}

fn load(c: &Common) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(&c.config, &c.overrides).with_context(|| format!("loading {}", c.config.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare(c) => cmd_prepare(&Run::open(load(&c)?)?)?,
        Command::Trainwv(c) => {
            cmd_trainwv(&Run::open(load(&c)?)?)?;
        }
        Command::Pretrain(c) => {
            cmd_pretrain(&Run::open(load(&c)?)?)?;
        }
        Command::Train(c) => {
            let out = cmd_train(&Run::open(load(&c)?)?)?;
            println!("best validation loss {:.5} at step {}", out.best_loss, out.best_step);
        }
        Command::Synth { common, text } => {
            for p in cmd_synth(&Run::open(load(&common)?)?, &text)? {
                println!("{}", p.display());
            }
        }
        Command::Eval(c) => {
            let run = Run::open(load(&c)?)?;
            let report = cmd_eval(&run)?;
            match report.mean() {
                Some(m) => println!("mean MCD {m:.3} dB over {} utterances", report.scores().len()),
                None => println!("no utterance scored"),
            }
        }
        Command::Sweep { common, sweep } => {
            let spec = SweepSpec::load(&sweep).with_context(|| format!("loading {}", sweep.display()))?;
            let out = run_sweep(&load(&common)?, &spec)?;
            println!("{}", out.csv.display());
            println!("{}", out.svg.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<semitaco::Error>().map_or(2, exit_code);
            ExitCode::from(code as u8)
        }
    }
}
