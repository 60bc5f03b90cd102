use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use greg::experiment::{self, ExperimentConfig, Report};
use greg::referents::ReferentMode;

#[derive(Parser)]
#[command(name = "greg", about = "Graphical referential game with contrastive agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train agent pairs, one per seed, then evaluate them.
    Train(RunArgs),
    /// Re-evaluate the checkpoints of a finished run.
    Eval {
        #[arg(long)]
        out: PathBuf,
        /// Passes over the test contexts.
        #[arg(long)]
        passes: Option<usize>,
    },
    /// Lexicons, composition matrices, topographic maps and embeddings.
    Analyze {
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train with and without the motor system and compare.
    Ablate(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML experiment config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// one-hot, visual-shared or visual-unshared.
    #[arg(long)]
    mode: Option<ReferentMode>,
    /// descriptive or discriminative.
    #[arg(long)]
    generation: Option<String>,
    /// Seed list such as `0..10` or `1,4,7`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    mnist_path: Option<PathBuf>,
    #[arg(long)]
    no_dmp: bool,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("bad seed list {s:?}");
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        return Ok((a..b).collect());
    }
    s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.game.mode = m;
        }
        if let Some(g) = &self.generation {
            cfg.game.generation = g.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        if let Some(p) = &self.mnist_path {
            cfg.mnist_path = Some(p.clone());
        }
        cfg.game.no_dmp |= self.no_dmp;
        if self.rounds.is_some() {
            cfg.game.rounds = self.rounds;
        }
        if let Some(c) = self.candidates {
            cfg.game.candidates = c;
        }
        if let Some(s) = self.steps {
            cfg.game.production_steps = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_report(r: &Report) {
    print!("{}", r.markdown());
}

fn run(cli: Cli) -> Result<bool, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.config()?;
            let (manifest, report) = experiment::run_train(&cfg, &args.out)?;
            for r in &manifest.runs {
                eprintln!(
                    "seed {}: {} rounds, trailing success {:.3}{}",
                    r.seed,
                    r.summary.rounds,
                    r.summary.trailing_sr,
                    if r.summary.early_stopped { " (early stop)" } else { "" }
                );
            }
            print_report(&report);
        }
        Command::Eval { out, passes } => print_report(&experiment::run_eval(&out, passes)?),
        Command::Analyze { out } => {
            for (seed, rows) in experiment::run_analyze(&out)? {
                println!("seed {seed}");
                for r in rows {
                    println!("  rho[{},{}] = {:.4} (mean over draws {:.4})", r.i, r.j, r.rho, r.rho_mean);
                }
            }
        }
        Command::Gradcheck { points, seed } => {
            let results = experiment::gradcheck_suite(points, seed)?;
            let mut ok = true;
            for r in &results {
                println!("{} {} max relative error {:.2e}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.max_error);
                ok &= r.passed;
            }
            return Ok(ok);
        }
        Command::Ablate(args) => {
            let base = args.config()?;
            let mut rows = Vec::new();
            for no_dmp in [false, true] {
                let mut cfg = base.clone();
                cfg.game.no_dmp = no_dmp;
                let dir = args.out.join(cfg.game.channel_name());
                let (_, report) = experiment::run_train(&cfg, &dir)?;
                rows.push(report);
            }
            println!("{}", serde_json::to_string_pretty(&rows)?);
            for r in &rows {
                print_report(r);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4, 9").unwrap(), vec![4, 9]);
        assert!(parse_seeds("a..b").is_err());
    }
}
