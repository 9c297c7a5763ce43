//! `pstory`: the persona story pipeline, one stage per subcommand.
//!
//! ```text
//! pstory synth-data        --config c.toml
//! pstory cluster-personas  --config c.toml
//! pstory train-classifiers --config c.toml
//! pstory train-generator   --config c.toml --variant sepc
//! pstory generate          --config c.toml --variant sepc --persona 2
//! pstory evaluate          --config c.toml --variant sepc
//! ```
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a data or
//! configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use pstory::model::VariantKind;
use pstory::Result;

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "pstory", version, about = "Persona-conditioned visual story generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic story and utterance corpus.
    SynthData(Common),
    /// Build the vocabulary, cluster personalities and select personas.
    ClusterPersonas(Common),
    /// Train one binary classifier per persona.
    TrainClassifiers(Common),
    /// Train a story generator.
    TrainGenerator(WithVariant),
    /// Generate stories for the test split.
    Generate(Generate),
    /// Score a generator on the test split.
    Evaluate(WithVariant),
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides every stage seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WithVariant {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<VariantKind>,
}

#[derive(Args)]
struct Generate {
    #[command(flatten)]
    inner: WithVariant,
    /// Target persona for every story, 0-based.
    #[arg(long)]
    persona: Option<usize>,
}

fn parse_variant(s: &str) -> std::result::Result<VariantKind, String> {
    s.parse().map_err(|_| "expected one of glocal, mpp, lepc, lepd, sepc, sepd".to_string())
}

fn resolve(common: &Common, variant: Option<VariantKind>, persona: Option<usize>) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.out = out.clone();
    }
    if let Some(v) = variant {
        cfg.run.variant = v;
    }
    if persona.is_some() {
        cfg.run.persona = persona;
    }
    cfg.resolve()
}

fn execute(command: Command) -> Result<()> {
    let (cfg, stem, run): (_, String, fn(&PipelineConfig) -> Result<()>) = match command {
        Command::SynthData(c) => (resolve(&c, None, None)?, "synth-data".into(), commands::synth_data),
        Command::ClusterPersonas(c) => (resolve(&c, None, None)?, "cluster-personas".into(), commands::cluster),
        Command::TrainClassifiers(c) => {
            (resolve(&c, None, None)?, "train-classifiers".into(), commands::train_classifiers)
        }
        Command::TrainGenerator(w) => {
            let cfg = resolve(&w.common, w.variant, None)?;
            let stem = format!("train-generator-{}", cfg.run.variant);
            (cfg, stem, commands::train)
        }
        Command::Generate(g) => {
            let cfg = resolve(&g.inner.common, g.inner.variant, g.persona)?;
            let stem = format!("generate-{}", cfg.run.variant);
            (cfg, stem, commands::generate)
        }
        Command::Evaluate(w) => {
            let cfg = resolve(&w.common, w.variant, None)?;
            let stem = format!("evaluate-{}", cfg.run.variant);
            (cfg, stem, commands::evaluate)
        }
    };
    commands::echo_config(&cfg, &stem)?;
    run(&cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            eprint!("{text}");
            // Value errors carry no usage line of their own.
            if !text.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(1);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
