use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use thrustvec_core::config::{Mode, ScenarioConfig};
use thrustvec_core::interference::valid_range;
use thrustvec_core::model::{forward_kinematics, FlightForm, JointVector, N_JOINTS, N_ROTORS};
use thrustvec_core::sim::{run_scenario, Summary};
use thrustvec_core::Error;

/// Simulation and analysis driver for the vectorable-thrust quadruped.
#[derive(Parser, Debug)]
#[command(name = "thrustvec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the flight form-sequence scenario.
    Fly(Common),
    /// Run the crawl gait scenario.
    Crawl(Common),
    /// Print the per-rotor vectoring ranges for a joint configuration as JSON.
    Ranges {
        #[command(flatten)]
        common: Common,
        /// Flight form 1 (flat), 2 (bent) or 3 (folded).
        #[arg(long, conflicts_with = "q")]
        form: Option<u8>,
        /// Sixteen comma-separated joint angles [rad].
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        q: Option<Vec<f64>>,
    },
    /// Run the configured scenario over several seeds in parallel.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at the configured one.
        #[arg(long, default_value_t = 4)]
        runs: u64,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Flight,
    Crawl,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Scenario configuration (JSON); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for trajectories and summaries.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop the interference constraints from flight allocation.
    #[arg(long)]
    no_interference: bool,
    #[arg(long)]
    cycles: Option<usize>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_defaults: bool,
}

/// Failures map onto the stable exit codes: 1 runtime, 2 config.
enum Failure {
    Runtime(anyhow::Error),
    Config(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(common: &Common, mode: Mode) -> Result<ScenarioConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ScenarioConfig::from_file(path).map_err(|e| Failure::Config(e.into()))?,
        None => ScenarioConfig { mode, ..Default::default() },
    };
    cfg.mode = mode;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.no_interference {
        cfg.use_interference = false;
    }
    if let Some(c) = common.cycles {
        cfg.cycles = c;
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Fly(common) => scenario(&common, Mode::Flight),
        Command::Crawl(common) => scenario(&common, Mode::Crawl),
        Command::Ranges { common, form, q } => ranges(&common, form, q),
        Command::Sweep { common, runs, mode } => {
            let mode = match mode {
                Some(ModeArg::Crawl) => Mode::Crawl,
                Some(ModeArg::Flight) => Mode::Flight,
                None => common
                    .config
                    .as_ref()
                    .map(|p| ScenarioConfig::from_file(p).map(|c| c.mode))
                    .transpose()
                    .map_err(|e| Failure::Config(e.into()))?
                    .unwrap_or(Mode::Flight),
            };
            sweep(&common, mode, runs)
        }
    }
}

fn scenario(common: &Common, mode: Mode) -> Result<ExitCode, Failure> {
    let cfg = load(common, mode)?;
    if common.dump_defaults {
        print!("{}", cfg.to_json_string());
        return Ok(ExitCode::SUCCESS);
    }
    let traj = run_scenario(&cfg).map_err(runtime)?;
    traj.write_artifacts(&cfg.output_dir, cfg.sim.record_timing)
        .map_err(runtime)
        .with_context(|| format!("writing artifacts to {}", cfg.output_dir.display()))?;
    let s = &traj.summary;
    println!("{}", summary_line(s));
    info!("artifacts written to {}", cfg.output_dir.display());
    if s.violations > 0 {
        warn!("{} downwash violations", s.violations);
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn runtime(e: Error) -> anyhow::Error {
    anyhow::Error::new(e)
}

fn summary_line(s: &Summary) -> String {
    match s.displacement {
        Some(d) => format!(
            "{}: {} ticks, displacement [{:.4}, {:.4}, {:.4}] m, thrust ratio {:.3}, violations {}",
            s.mode, s.ticks, d[0], d[1], d[2], s.thrust_ratio, s.violations
        ),
        None => format!(
            "{}: {} ticks, position RMSE {:.4} m, orientation RMSE {:.4} rad, violations {}",
            s.mode, s.ticks, s.position_rmse, s.orientation_rmse, s.violations
        ),
    }
}

fn ranges(common: &Common, form: Option<u8>, q: Option<Vec<f64>>) -> Result<ExitCode, Failure> {
    let cfg = load(common, Mode::Flight)?;
    if common.dump_defaults {
        print!("{}", cfg.to_json_string());
        return Ok(ExitCode::SUCCESS);
    }
    let q = match (form, q) {
        (_, Some(v)) => {
            if v.len() != N_JOINTS {
                return Err(Failure::Config(anyhow::anyhow!("--q needs {N_JOINTS} values, got {}", v.len())));
            }
            JointVector::from_column_slice(&v)
        }
        (Some(f), None) => FlightForm::from_index(f)
            .ok_or_else(|| Failure::Config(anyhow::anyhow!("--form must be 1, 2 or 3, got {f}")))?
            .joint_angles(),
        (None, None) => JointVector::zeros(),
    };
    let model = cfg.load_model().map_err(|e| Failure::Config(e.into()))?;
    let kin = forward_kinematics(&model, &q);
    let ranges = valid_range(&kin, &cfg.interference, &[0.0; N_ROTORS]).map_err(runtime)?;
    let json = serde_json::to_string_pretty(&ranges).context("serializing ranges")?;
    match writeln!(std::io::stdout().lock(), "{json}") {
        // A closed pipe (e.g. `| head`) is not an error.
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(anyhow::Error::new(e).into()),
        _ => Ok(ExitCode::SUCCESS),
    }
}

fn sweep(common: &Common, mode: Mode, runs: u64) -> Result<ExitCode, Failure> {
    let base = load(common, mode)?;
    let out_root: &Path = &base.output_dir;
    let results: Vec<(u64, thrustvec_core::Result<Summary>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..runs)
            .map(|k| {
                let mut cfg = base.clone();
                cfg.seed = base.seed + k;
                cfg.output_dir = out_root.join(format!("seed_{}", cfg.seed));
                scope.spawn(move || {
                    let res = run_scenario(&cfg).and_then(|t| {
                        t.write_artifacts(&cfg.output_dir, cfg.sim.record_timing)?;
                        Ok(t.summary)
                    });
                    (cfg.seed, res)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut failed = false;
    for (seed, res) in results {
        match res {
            Ok(s) => {
                failed |= s.violations > 0;
                println!("seed {seed}: {}", summary_line(&s));
            }
            Err(e) => {
                failed = true;
                println!("seed {seed}: error: {e}");
            }
        }
    }
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}
