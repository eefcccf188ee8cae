//! `adhoc`: batch front end for pretraining, difference-reward fitting,
//! zero-shot evaluation and reporting.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adhoc_core::experiment::{self, EvalOptions, ExperimentConfig, Method, RenderFormat};
use adhoc_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adhoc", version, about = "Zero-shot ad hoc teaming laboratory")]
struct Cli {
    /// Artifact directory shared by all stages.
    #[arg(long, global = true, env = "ADHOC_OUT", default_value = "adhoc-out")]
    out: PathBuf,
    /// Worker threads for rollouts, training and bootstrap.
    #[arg(long, global = true, env = "ADHOC_JOBS", default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: exp1, exp2, exp3 or pursuit.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path),
            (None, Some(name)) => ExperimentConfig::preset(name),
            (None, None) => Err(Error::config("pass --config FILE or --preset NAME")),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RenderArg {
    Svg,
    Ascii,
}

#[derive(Subcommand)]
enum Command {
    /// Train one learner per source team (and the Robust baseline).
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Attach difference-reward value functions to the library.
    FitDr {
        #[command(flatten)]
        config: ConfigArgs,
        /// Refit entries that already have values.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate methods with the target team and write result tables.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated subset of oracle,gpat,gpat_nodr,robust,plastic.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long, value_enum)]
        render: Option<RenderArg>,
    },
    /// Print the results table of an evaluated directory.
    Report,
    /// Print a preset as TOML.
    Config {
        #[arg(long, default_value = "exp1")]
        preset: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) => 2,
        Error::MissingArtifact(_) | Error::Load(_) | Error::Checksum => 3,
        _ => 4,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let out: &Path = &cli.out;
    let jobs = cli.jobs.max(1);
    match &cli.cmd {
        Command::Pretrain { config } => {
            let cfg = config.load()?;
            let outcome = experiment::run_pretrain(&cfg, out, jobs)?;
            if outcome.cache_hit {
                println!("pretrain: cache hit for {}, nothing to do", cfg.pretrain_hash());
            }
            for f in &outcome.files {
                println!("{}", f.display());
            }
        }
        Command::FitDr { config, force } => {
            let cfg = config.load()?;
            let outcome = experiment::run_fit_dr(&cfg, out, jobs, *force)?;
            if outcome.cache_hit {
                println!("fit-dr: libraries already fitted, nothing to do");
            }
            for f in &outcome.files {
                println!("{}", f.display());
            }
        }
        Command::Eval { config, methods, render } => {
            let cfg = config.load()?;
            let opts = EvalOptions {
                methods: methods.as_deref().map(Method::parse_list).transpose()?,
                render: render.map(|r| match r {
                    RenderArg::Svg => RenderFormat::Svg,
                    RenderArg::Ascii => RenderFormat::Ascii,
                }),
            };
            experiment::run_eval(&cfg, out, jobs, &opts)?;
            print!("{}", experiment::report(out)?);
        }
        Command::Report => print!("{}", experiment::report(out)?),
        Command::Config { preset } => print!("{}", ExperimentConfig::preset(preset)?.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_documented_exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), 2);
        assert_eq!(exit_code(&Error::Input("x".into())), 2);
        assert_eq!(exit_code(&Error::MissingArtifact(PathBuf::from("a.bin"))), 3);
        assert_eq!(exit_code(&Error::Checksum), 3);
        assert_eq!(exit_code(&Error::Load("x".into())), 3);
        assert_eq!(exit_code(&Error::Invariant("x".into())), 4);
        assert_eq!(exit_code(&Error::state("x")), 4);
    }
}
