use std::fs::File;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tensegrity_core::bus::LinkConfig;
use tensegrity_core::control::GaitScript;
use tensegrity_core::experiments::*;
use tensegrity_core::model::{default_robot, ActuatorSpec, RobotConfig};
use tensegrity_core::serve::{serve, ServeOptions, Session};
use tensegrity_core::statics::size_actuator;
use tensegrity_core::trajectory::TrajectoryLog;

#[derive(Parser)]
#[command(
    name = "tensegrity-sim",
    version,
    about = "Three-bar tensegrity robot simulator and experiment runner"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Robot configuration (TOML); the built-in robot when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for result files; results go to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check the actuator against the flattest supported bar angle.
    Size {
        #[arg(long, default_value_t = 8.0)]
        min_angle_deg: f64,
    },
    /// Encoder length error on the tensile rig over a height and load grid.
    LengthTest {
        #[arg(long, default_value = "Dyneema")]
        material: String,
    },
    /// Commanded against realised force for the spring-mode curves.
    StiffnessTest {
        /// Noise-free, frictionless actuator.
        #[arg(long)]
        ideal: bool,
    },
    /// Run a gait script and track the centroid.
    Locomote {
        /// Gait script (TOML); the built-in barrel roll when omitted.
        #[arg(long)]
        gait: Option<PathBuf>,
        /// Simulated seconds.
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        /// Total payload, kg, spread over the bar midpoints.
        #[arg(long, default_value_t = 0.0)]
        payload: f64,
        /// Write the full trajectory; `.bin` selects the binary layout, anything else CSV.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Keep one trajectory sample per this many physics steps.
        #[arg(long, default_value_t = 10)]
        decimation: usize,
    },
    /// Settled height through the payload and stiffness stages.
    PayloadTest,
    /// Smallest uniform cable stiffness that holds the robot up.
    MinStiffness {
        #[arg(long, default_value_t = 5.0)]
        low: f64,
        #[arg(long, default_value_t = 400.0)]
        high: f64,
    },
    /// Stream state snapshots and take operator commands as NDJSON over TCP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// One-way bus latency per link, ms.
        #[arg(long, default_value_t = 0.0)]
        latency_ms: f64,
        #[arg(long, default_value_t = 0.0)]
        drop_probability: f64,
        /// Run ticks as fast as possible instead of at 20 Hz.
        #[arg(long)]
        fast: bool,
        /// Close each connection after this many ticks.
        #[arg(long)]
        max_ticks: Option<usize>,
    },
    /// Print the built-in robot configuration as TOML.
    Config,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let common = &cli.common;
    let config = match &common.config {
        Some(path) => RobotConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => default_robot(),
    };
    let seed = common.seed;
    let result = match cli.command {
        Command::Size { min_angle_deg } => {
            let report = size_actuator(&config, min_angle_deg.to_radians())?;
            let text = serde_json::to_string_pretty(&report)?;
            emit_text(common, "size.json", &text)?;
            return Ok(());
        }
        Command::Config => {
            print!("{}", config.to_toml_string()?);
            return Ok(());
        }
        Command::LengthTest { material } => {
            let params = LengthExperiment {
                actuator: rig_actuator(&config, common),
                ..LengthExperiment::new(&material)
            };
            run_length_experiment(&params, seed)?
        }
        Command::StiffnessTest { ideal } => {
            let actuator = rig_actuator(&config, common);
            let params = StiffnessExperiment {
                actuator: if ideal { actuator.ideal() } else { actuator },
                ..StiffnessExperiment::default()
            };
            run_stiffness_experiment(&params, seed)?
        }
        Command::Locomote {
            gait,
            duration,
            payload,
            trajectory,
            decimation,
        } => {
            let script = match gait {
                Some(path) => GaitScript::load(&path).with_context(|| format!("loading {}", path.display()))?,
                None => default_gait(),
            };
            let params = LocomotionExperiment::new(script, duration, payload);
            match trajectory {
                None => run_locomotion(&config, &params, seed)?,
                Some(path) => {
                    let mut log: Option<TrajectoryLog> = None;
                    let result = run_locomotion_observed(&config, &params, seed, |sim| {
                        log.get_or_insert_with(|| TrajectoryLog::for_simulation(sim, decimation))
                            .offer(sim);
                    })?;
                    if let Some(log) = log {
                        write_trajectory(&log, &path)?;
                    }
                    result
                }
            }
        }
        Command::PayloadTest => run_payload_stiffness(&config, &PayloadExperiment::default(), seed)?,
        Command::MinStiffness { low, high } => {
            let params = MinStiffnessExperiment {
                low,
                high,
                ..MinStiffnessExperiment::default()
            };
            find_min_self_support_stiffness(&config, &params, seed)?
        }
        Command::Serve {
            listen,
            latency_ms,
            drop_probability,
            fast,
            max_ticks,
        } => {
            let link = LinkConfig {
                latency: latency_ms * 1e-3,
                drop_probability,
                ..LinkConfig::default()
            };
            let session = Session::new(config, link, seed)?;
            eprintln!("listening on {listen}");
            serve(
                listen.as_str(),
                session,
                ServeOptions {
                    realtime: !fast,
                    max_ticks,
                },
            )?;
            return Ok(());
        }
    };
    emit(common, &result)
}

/// The rig uses the robot's actuator, so a custom config carries over.
fn rig_actuator(config: &RobotConfig, common: &Common) -> ActuatorSpec {
    match (&common.config, config.cables.iter().find_map(|c| c.actuator.clone())) {
        (Some(_), Some(spec)) => spec,
        _ => ActuatorSpec::default(),
    }
}

fn emit(common: &Common, result: &ExperimentResult) -> Result<()> {
    for (k, v) in &result.summary {
        eprintln!("{k} = {v}");
    }
    match &common.out {
        Some(dir) => {
            for path in result.write_to(dir, common.format.into())? {
                eprintln!("wrote {}", path.display());
            }
        }
        None => match common.format {
            Format::Json => println!("{}", result.to_json()?),
            Format::Csv => result.write_csv(io::stdout().lock())?,
        },
    }
    Ok(())
}

fn emit_text(common: &Common, name: &str, text: &str) -> Result<()> {
    println!("{text}");
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(name);
        std::fs::write(&path, text)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn write_trajectory(log: &TrajectoryLog, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    if path.extension().is_some_and(|e| e == "bin") {
        log.write_binary(out)?;
    } else {
        log.write_csv(out)?;
    }
    eprintln!("wrote {} trajectory samples to {}", log.records.len(), path.display());
    Ok(())
}
