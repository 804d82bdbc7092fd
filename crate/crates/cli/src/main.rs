use std::path::PathBuf;
use std::process::ExitCode;

use adob_core::error::{Error, Result};
use adob_core::harness::config::{ExperimentConfig, Mode};
use adob_core::harness::experiment::{run_experiment, ExperimentReport};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adob", version, about = "Adaptive-obfuscation federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured point without attacking it.
    Train(Common),
    /// Train once per repeat (ignoring any sweep) and run the attacks.
    Attack(Common),
    /// Run the full parameter sweep with attacks.
    Sweep(Common),
    /// Run the closed-form and Monte-Carlo theory checks.
    Theory(Common),
    /// Run the sweep and print the CAP score per attack and defense.
    Cap(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config, TOML or JSON.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output`, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sweep points trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn print_points(r: &ExperimentReport) {
    for p in &r.points {
        println!(
            "point {} seed {} value {} defense {} accuracy {:.4}",
            p.index, p.seed, p.param_value, p.defense, p.accuracy
        );
    }
}

fn print_rows(r: &ExperimentReport) {
    for row in &r.rows {
        println!(
            "{} {}={} seed {} defense {} accuracy {:.4} recovery_error {:.4}",
            row.attack, row.param_name, row.param_value, row.seed, row.defense, row.accuracy, row.recovery_error
        );
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(c) => {
            let (mut cfg, out) = load(&c)?;
            cfg.attacks.clear();
            print_points(&run_experiment(&cfg, &out, c.jobs)?);
        }
        Command::Attack(c) => {
            let (mut cfg, out) = load(&c)?;
            if cfg.attacks.is_empty() {
                return Err(Error::Config("no attacks configured".into()));
            }
            cfg.sweep = None;
            print_rows(&run_experiment(&cfg, &out, c.jobs)?);
        }
        Command::Sweep(c) => {
            let (cfg, out) = load(&c)?;
            if cfg.sweep.is_none() {
                return Err(Error::Config("no [sweep] table configured".into()));
            }
            print_rows(&run_experiment(&cfg, &out, c.jobs)?);
        }
        Command::Theory(c) => {
            let (cfg, out) = load(&c)?;
            if cfg.mode != Mode::TheoryCheck {
                return Err(Error::Config("theory needs mode = \"theory_check\"".into()));
            }
            let r = run_experiment(&cfg, &out, c.jobs)?;
            for t in &r.theory {
                println!(
                    "{} instances {} violations {} worst_margin {:e}",
                    t.check, t.instances, t.violations, t.worst_margin
                );
            }
            if r.theory.iter().any(|t| t.violations > 0) {
                return Err(Error::Numeric("theory checks reported violations".into()));
            }
        }
        Command::Cap(c) => {
            let (cfg, out) = load(&c)?;
            let r = run_experiment(&cfg, &out, c.jobs)?;
            for e in &r.cap {
                println!("{} {} cap {:.4} over {} points", e.attack, e.defense, e.cap, e.points);
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
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
    use clap::CommandFactory;
    use std::path::Path;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn seed_flag_overrides_config() {
        let dir = std::env::temp_dir().join(format!("adob-cli-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.toml");
        std::fs::write(&path, "mode = \"theory_check\"\nseed = 1\n").unwrap();
        let c = Common { config: path, seed: Some(9), out: None, jobs: 1 };
        let (cfg, out) = load(&c).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(out, Path::new("out"));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
