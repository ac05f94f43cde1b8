use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stint_cli::config::{Overrides, RunConfig};
use stint_cli::{commands, serve, CliResult};
use stint_core::controller::Variant;

#[derive(Parser)]
#[command(name = "stint", version, about = "Stint-time optimal energy management for electric race cars")]
struct Cli {
    /// JSON run configuration; defaults describe the synthetic reference stint.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Controller variant: fully_online, fixed_costate or fixed_costate_and_threshold.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Disturbance scenario: none, drafting, tire_degradation, full_course_yellow or suite.
    #[arg(long, global = true)]
    scenario: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the convex stint problem.
    Optimize,
    /// Solve and derive the lift-and-coast plan for every throttle map.
    Adapt,
    /// Run the closed-loop stint simulation.
    Simulate {
        /// Run every controller variant over the whole scenario suite.
        #[arg(long)]
        all_variants: bool,
    },
    /// Sweep lap count and charging time.
    Sweep,
    /// Serve a live session over TCP (JSON lines).
    Serve {
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 5.0)]
        timescale: f64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let overrides = Overrides { out: cli.out, seed: cli.seed, variant: cli.variant, scenario: cli.scenario };
    let resolved = RunConfig::load(cli.config.as_deref(), &overrides)?.resolve()?;
    match cli.command {
        Command::Optimize => {
            let sol = commands::optimize(&resolved)?;
            println!("optimal stint time {:.3} s", sol.t_pred);
        }
        Command::Adapt => {
            let ctx = commands::adapt(&resolved)?;
            for m in &ctx.plan.maps {
                println!("map {}: threshold {:.6e}, stint time {:.3} s", m.id, m.lambda_star, m.cost);
            }
        }
        Command::Simulate { all_variants } => commands::simulate(&resolved, all_variants)?,
        Command::Sweep => commands::sweep(&resolved)?,
        Command::Serve { port, host, timescale } => {
            if !(timescale > 0.0) {
                return Err(stint_cli::CliError::Config("timescale must be positive".into()));
            }
            let ctx = resolved.prepare()?;
            let listener = TcpListener::bind((host.as_str(), port))?;
            println!("listening on {}", listener.local_addr()?);
            serve::serve(listener, resolved, ctx, timescale)?;
            return Ok(());
        }
    }
    println!("results in {}", resolved.config.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
