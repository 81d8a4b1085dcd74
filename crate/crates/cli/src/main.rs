use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mactas::run::{self, ExploreScheme, Faults, RunConfig, SweepGrid};

#[derive(Parser)]
#[command(name = "mactas", version, about = "Train and evaluate communicating value-decomposition agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed, writing CSV metrics and checkpoints.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoints already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train one run per cell of a parameter grid and summarize them.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// JSON object with any of: layers, ffn_dim, dropout, temperature.
        #[arg(long)]
        grid: PathBuf,
    },
    /// Run the randomized invariant suite and print a JSON report.
    Check {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, hide = true)]
        fault: Vec<FaultArg>,
    },
    /// Greedy evaluation of a trained seed's checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restrict the run to this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Drop the residual connection around communication.
    #[arg(long)]
    no_residual: bool,
    #[arg(long, value_enum)]
    explore: Option<ExploreArg>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    comm: Option<CommArg>,
    #[arg(long)]
    total_env_steps: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExploreArg {
    EpsilonGreedy,
    Topk,
}

#[derive(Clone, Copy, ValueEnum)]
enum CommArg {
    None,
    Mactas,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    QmixNoAbs,
    CommNonzeroInit,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if self.no_residual {
            c.comm.residual = false;
        }
        match self.explore {
            Some(ExploreArg::Topk) => c.exploration.scheme = ExploreScheme::TopK,
            Some(ExploreArg::EpsilonGreedy) => c.exploration.scheme = ExploreScheme::EpsilonGreedy,
            None => {}
        }
        if let Some(t) = self.temperature {
            c.exploration.temperature = t;
        }
        if let Some(k) = self.k {
            c.exploration.k = k;
        }
        match self.comm {
            Some(CommArg::None) => c.comm.enabled = false,
            Some(CommArg::Mactas) => c.comm.enabled = true,
            None => {}
        }
        if let Some(n) = self.total_env_steps {
            c.total_env_steps = n;
        }
        c.validate().context("invalid configuration")?;
        Ok(c)
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { run, resume } => {
            let config = run.resolve()?;
            let report = run::cmd_train(&config, resume)?;
            for (seed, rows) in &report.rows {
                if let Some(last) = rows.last() {
                    println!(
                        "seed {seed}: env_step {} return {:.4} success {}",
                        last.env_step,
                        last.mean_test_return,
                        last.success_rate.map_or("-".into(), |s| format!("{s:.4}")),
                    );
                }
            }
            println!("wrote {}", report.out_dir.join(run::METRICS_FILE).display());
            Ok(true)
        }
        Command::Sweep { run, grid } => {
            let config = run.resolve()?;
            let text = std::fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let grid: SweepGrid = serde_json::from_str(&text).context("invalid sweep grid")?;
            let summary = run::cmd_sweep(&config, &grid)?;
            print_json(&summary)?;
            Ok(true)
        }
        Command::Check { seed, report, fault } => {
            let mut faults = Faults::default();
            for f in fault {
                match f {
                    FaultArg::QmixNoAbs => faults.qmix_no_abs = true,
                    FaultArg::CommNonzeroInit => faults.comm_nonzero_init = true,
                }
            }
            let result = run::run_checks(seed, faults);
            let text = serde_json::to_string_pretty(&result)?;
            if let Some(path) = report {
                std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{text}");
            for c in result.checks.iter().filter(|c| !c.passed) {
                eprintln!("FAILED {}: {} (threshold {})", c.name, c.metric, c.threshold);
            }
            Ok(result.passed)
        }
        Command::Eval { run, episodes } => {
            let config = run.resolve()?;
            let Some(&seed) = config.seeds.first().filter(|_| config.seeds.len() == 1) else {
                bail!("eval needs a single seed (use --seed)");
            };
            print_json(&run::cmd_eval(&config, seed, episodes)?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
