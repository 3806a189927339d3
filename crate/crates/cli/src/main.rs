use std::path::PathBuf;
use std::process::ExitCode;

use aggtree_cli::{
    cmd_balance, cmd_fit, cmd_gates, cmd_simulate, load_sim_config, parse_threads, CliError, Overrides,
    RunConfig, Selection, Stage, THREADS_ENV,
};
use clap::{Args, Parser, Subcommand};

/// Aggregation trees: nested groupings of estimated treatment effects with
/// honest group-level inference.
#[derive(Parser)]
#[command(name = "aggtree", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate CATEs, grow and prune the aggregation tree, pick a grouping.
    Fit(RunArgs),
    /// Estimate GATEs on the honest sample for a grouping from `fit`.
    Gates(RunArgs),
    /// Run a Monte Carlo study on synthetic populations.
    Simulate(SimArgs),
    /// Covariate balance between treatment arms.
    Balance(BalanceArgs),
}

#[derive(Args)]
#[group(multiple = false)]
struct GroupingArgs {
    /// Grouping with this many leaves.
    #[arg(long)]
    granularity: Option<usize>,
    /// Grouping optimal at this complexity parameter.
    #[arg(long)]
    alpha: Option<f64>,
    /// Grouping chosen by cross-validation.
    #[arg(long)]
    cv: bool,
}

impl GroupingArgs {
    fn selection(&self) -> Option<Selection> {
        match (self.granularity, self.alpha, self.cv) {
            (Some(leaves), _, _) => Some(Selection::ByLeafCount { leaves }),
            (_, Some(alpha), _) => Some(Selection::Explicit { alpha }),
            (_, _, true) => Some(Selection::Cv),
            _ => None,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    grouping: GroupingArgs,
    /// Confidence level for intervals.
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(
            &self.config,
            &Overrides {
                seed: self.seed,
                level: self.level,
                out: self.out.clone(),
            },
        )
    }
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "aggtree-sim-out")]
    out: PathBuf,
}

#[derive(Args)]
struct BalanceArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit(args) => {
            let cfg = args.load()?;
            let fit = cmd_fit(&cfg, args.grouping.selection())?;
            println!(
                "sequence leaf counts: {:?}; selected grouping has {} leaves",
                fit.sequence_leaf_counts, fit.selected.leaves
            );
            println!("wrote {} artifacts to {}", fit.artifacts.len(), fit.out_dir.display());
        }
        Command::Gates(args) => {
            let cfg = args.load()?;
            let out = cmd_gates(&cfg, args.grouping.selection())?;
            print!("{}", out.gates.to_text());
            if let Some(d) = &out.differences {
                println!();
                print!("{}", d.to_text());
            }
            println!("wrote {} artifacts to {}", out.artifacts.len(), out.out_dir.display());
        }
        Command::Simulate(args) => {
            let cfg = load_sim_config(&args.config, args.seed)?;
            let report = cmd_simulate(&cfg, &args.out, |p| {
                eprintln!("cell {}/{} done", p.done, p.total);
            })?;
            print!("{}", report.to_text());
        }
        Command::Balance(args) => {
            let cfg = RunConfig::load(
                &args.config,
                &Overrides {
                    out: args.out.clone(),
                    ..Default::default()
                },
            )?;
            print!("{}", cmd_balance(&cfg)?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match parse_threads(std::env::var(THREADS_ENV).ok().as_deref()) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        let e = CliError::internal(Stage::Config, e.to_string());
        eprintln!("{e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
