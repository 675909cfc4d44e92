use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use balsim::harness::{self, check, load_scenario, RunOptions, Simulation};
use balsim::lcp::{solve_lcp, LcpOptions, LcpProblem};
use clap::{Parser, Subcommand};

mod serve;

#[derive(Parser)]
#[command(name = "balsim", version, about = "Virtual human simulation with static balance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario headless and write per-step metrics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Disable the balance constraint.
        #[arg(long)]
        no_balance: bool,
        /// Disable every virtual guide.
        #[arg(long)]
        no_guides: bool,
        /// Override the scenario duration, seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario in real time and stream state over WebSocket.
    Serve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Frames per second sent to clients.
        #[arg(long, default_value_t = serve::DEFAULT_RATE)]
        rate: f64,
    },
    /// Solve an LCP read from a text file (k, then M row by row, then q).
    SolveLcp {
        #[arg(long)]
        file: PathBuf,
    },
    /// Check analytic Jacobians and the LCP solver against reference methods.
    Check {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        problems: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BALANCE_SIM_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Run {
            scenario,
            no_balance,
            no_guides,
            duration,
            out,
        } => {
            let sc = load_scenario(&scenario)?;
            let opts = RunOptions {
                balance: no_balance.then_some(false),
                guides: no_guides.then_some(false),
                duration,
            };
            let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let (summary, _) = harness::run(sc, &opts, BufWriter::new(file))?;
            println!("{summary}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { scenario, port, rate } => {
            if !(rate > 0.0 && rate <= 1000.0) {
                bail!("--rate must lie in (0, 1000]");
            }
            let sc = load_scenario(&scenario)?;
            serve::serve(sc, port, rate)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::SolveLcp { file } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let p = LcpProblem::from_text(&text)?;
            let s = solve_lcp(&p, &LcpOptions::default());
            let fmt = |v: &nalgebra::DVector<f64>| v.iter().map(|x| format!("{x:.12e}")).collect::<Vec<_>>().join(" ");
            println!("status: {}", s.status);
            println!("z: {}", fmt(&s.z));
            println!("w: {}", fmt(&s.omega));
            println!("residual: {:.3e}", s.residual);
            println!("iterations: {}", s.iterations);
            Ok(if s.is_solved() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Check {
            scenario,
            samples,
            problems,
        } => {
            let sim = Simulation::new(load_scenario(&scenario)?)?;
            let report = check::self_check(&sim, samples, problems)?;
            print!("{report}");
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
