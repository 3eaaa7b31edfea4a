use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use headlab_cli::{parse_config, run, Experiment, Overrides};

#[derive(Parser)]
#[command(name = "headlab", version, about = "Multi-head attention training-dynamics laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the order-parameter flow.
    Flow(Common),
    /// Train the finite-dimensional model by online SGD.
    Sgd(Common),
    /// SGD and the flow started from its initial order parameters.
    Compare(Common),
    /// B-softmax at its optimal parameters against the Bayes risk.
    Bayes(Common),
    /// Train, then prune heads greedily.
    Prune(Common),
    /// Quadratic-form coefficients at the unspecialized point.
    Hessian(Common),
    /// Terminal losses over a grid.
    Sweep(Common),
    /// Per-head attention scores on sampled sequences.
    Maps(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Replaces the seed list of the config; repeatable.
    #[arg(long = "seed", value_name = "N")]
    seeds: Vec<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, env = "HEADLAB_THREADS", value_name = "N")]
    threads: Option<usize>,
    /// Redraw Monte-Carlo samples at every flow step.
    #[arg(long)]
    fresh_mc: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (exp, common) = match cli.command {
        Command::Flow(c) => (Experiment::Flow, c),
        Command::Sgd(c) => (Experiment::Sgd, c),
        Command::Compare(c) => (Experiment::Compare, c),
        Command::Bayes(c) => (Experiment::Bayes, c),
        Command::Prune(c) => (Experiment::Prune, c),
        Command::Hessian(c) => (Experiment::Hessian, c),
        Command::Sweep(c) => (Experiment::Sweep, c),
        Command::Maps(c) => (Experiment::Maps, c),
    };
    match execute(exp, common) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(exp: Experiment, common: Common) -> anyhow::Result<Vec<PathBuf>> {
    let mut config = parse_config(&common.config)?;
    Overrides { seeds: common.seeds, out: common.out, fresh_mc: common.fresh_mc }.apply(&mut config);
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    run(exp, &config, rayon::current_num_threads())
}
