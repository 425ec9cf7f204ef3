use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tdcd::config::SimConfig;
use tdcd::harness;
use tdcd::synthetic::{SyntheticSpec, Task};

#[derive(Parser)]
#[command(name = "tdcd", about = "Tiered decentralized coordinate descent simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write trace, metrics and a config snapshot.
    Run {
        config: PathBuf,
        /// Output directory.
        #[arg(short, long, default_value = "run")]
        out: PathBuf,
    },
    /// Run every value of the config's [sweep] axis and write summary.csv.
    Sweep {
        config: PathBuf,
        #[arg(short, long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Write a synthetic dataset (.csv or binary) plus <out>.meta.json.
    GenData {
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        features: usize,
        #[arg(long, value_enum, default_value_t = TaskArg::LeastSquares)]
        task: TaskArg,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 4.0)]
        margin: f64,
        /// Eigenvalue spread of XᵀX.
        #[arg(long)]
        condition: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        correlation: f64,
        #[arg(long)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Gradient, reduction and bound self-checks.
    Check,
    Version,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    LeastSquares,
    Logistic,
}

fn load(path: &Path) -> Result<SimConfig, tdcd::Error> {
    let mut cfg = SimConfig::load(path)?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let base = std::fs::canonicalize(base)?;
    cfg.resolve_paths(&base);
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {}: {e}", config.display());
                    return ExitCode::from(1);
                }
            };
            match harness::run(&cfg, &out) {
                Ok(o) => {
                    for w in &o.trace.warnings {
                        eprintln!("warning: {w}");
                    }
                    println!(
                        "{} rounds, clock {}, final loss {:.6e}",
                        o.trace.rounds.len(),
                        o.trace.final_state.clock,
                        o.trace.final_state.loss
                    );
                    ExitCode::SUCCESS
                }
                Err(f) => {
                    eprintln!("error: {f}");
                    ExitCode::from(f.exit_code() as u8)
                }
            }
        }
        Command::Sweep { config, out } => {
            let summary = load(&config).and_then(|cfg| harness::sweep(&cfg, Some(&out)));
            match summary {
                Ok(s) => {
                    for r in &s.rows {
                        println!(
                            "{}={} {} final_loss={} clock_to_target={}",
                            r.axis.as_str(),
                            r.value,
                            r.status.as_str(),
                            r.final_loss.map_or("-".into(), |l| format!("{l:.6e}")),
                            r.clock_to_target.map_or("-".into(), |c| c.to_string()),
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::GenData {
            samples,
            features,
            task,
            noise,
            margin,
            condition,
            correlation,
            seed,
            out,
        } => {
            let spec = SyntheticSpec {
                samples,
                features,
                task: match task {
                    TaskArg::LeastSquares => Task::LeastSquares { noise },
                    TaskArg::Logistic => Task::Logistic { margin },
                },
                condition,
                correlation,
            };
            match harness::generate_to_file(&spec, seed, &out) {
                Ok(_) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Check => match harness::check() {
            Ok(lines) => {
                for l in &lines {
                    println!("{} {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
                }
                if lines.iter().all(|l| l.passed) {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
        Command::Version => {
            println!("tdcd {}", env!("CARGO_PKG_VERSION"));
            ExitCode::SUCCESS
        }
    }
}
