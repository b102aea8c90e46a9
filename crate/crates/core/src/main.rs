use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use safe_maddpg::env::StressMode;
use safe_maddpg::harness::{
    infeasibility_report, parse_config, pretrain, run_experiment, run_grid, summarize, ExperimentConfig,
};
use safe_maddpg::safety::Strategy;
use safe_maddpg::Result;

#[derive(Parser)]
#[command(name = "safe-maddpg", version, about = "Safe multi-agent DDPG experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect the random-policy dataset and train the constraint sensitivities.
    Pretrain(RunArgs),
    /// Train and test one strategy/case cell for every seed.
    Train(RunArgs),
    /// Run all strategies under the listed stress cases and write summary.csv.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated stress cases.
        #[arg(long, value_delimiter = ',', default_value = "ed,ui")]
        cases: Vec<StressMode>,
    },
    /// Aggregate finished runs into a summary table.
    Summarize {
        /// Directories holding run subdirectories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write summary.csv and summary.txt into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fraction of episodes with at least one infeasible projection step.
    ReportInfeasibility {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    case: Option<StressMode>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    test_episodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => parse_config(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.strategy {
            cfg.strategy = v;
        }
        if let Some(v) = self.case {
            cfg.stress_case = v;
        }
        if let Some(v) = self.seeds {
            cfg.n_seeds = v;
        }
        if let Some(v) = self.seed_base {
            cfg.seed_base = v;
        }
        if let Some(v) = self.episodes {
            cfg.episodes = v;
        }
        if let Some(v) = self.test_episodes {
            cfg.test_episodes = v;
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = args.resolve()?;
            let (_, report) = pretrain(&cfg)?;
            println!(
                "case {}: {} train / {} holdout records",
                cfg.stress_case, report.n_train, report.n_holdout
            );
            for (j, ((first, last), err)) in report
                .first_loss
                .iter()
                .zip(&report.final_loss)
                .zip(&report.holdout_error)
                .enumerate()
            {
                println!("  c{j}: loss {first:.3e} -> {last:.3e}, holdout |error| {err:.4}");
            }
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let start = Instant::now();
            for r in run_experiment(&cfg)? {
                let last = r.train.last().map_or(0, |m| m.cumulative_collisions);
                let test = r.test.last().map_or(0, |m| m.cumulative_collisions);
                println!(
                    "{}: {} training collisions, {} testing collisions -> {}",
                    r.run_id,
                    last,
                    test,
                    r.dir.display()
                );
            }
            println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
        }
        Command::Grid { run, cases } => {
            let cfg = run.resolve()?;
            let start = Instant::now();
            run_grid(&cfg, &cases)?;
            print!("{}", summarize(&[cfg.output_dir.clone()])?.to_text());
            println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
        }
        Command::Summarize { dirs, out } => {
            let summary = summarize(&dirs)?;
            print!("{}", summary.to_text());
            if let Some(out) = out {
                summary.write(&out)?;
            }
        }
        Command::ReportInfeasibility { dirs } => {
            for e in infeasibility_report(&dirs)? {
                println!(
                    "{:<14} {:<5} runs {:>3}  train {:>6.2}%  test {:>6.2}%",
                    e.strategy.to_string(),
                    e.case.to_string(),
                    e.n_runs,
                    100.0 * e.train_fraction,
                    100.0 * e.test_fraction
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
