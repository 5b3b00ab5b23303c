use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use robocal::config::SceneConfig;
use robocal::experiment::{
    eyehand_csv, internal_csv, run_eyehand, run_internal, EyeHandSchedule, InternalSchedule,
};
use robocal::orchestrator::{replay, run_session, write_log, CameraOutcome};
use robocal::{CameraId, SensorRig};

/// Robot-to-camera calibration against a simulated cell.
#[derive(Parser)]
#[command(name = "robocal", version)]
struct Cli {
    /// More log output; repeat for more. RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scene configuration (TOML).
    #[arg(long, env = "ROBOCAL_CONFIG")]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full session: per-camera results as JSON plus session.jsonl.
    Calibrate(Common),
    /// Internal calibration accuracy against coverage and tilting.
    ExpInternal {
        #[command(flatten)]
        common: Common,
        /// Schedule (TOML with [[row]] tables); defaults to the built-in table.
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Camera to use; defaults to the first in the configuration.
        #[arg(long)]
        camera: Option<String>,
    },
    /// Eye-to-Hand accuracy against the number of frames.
    ExpEyehand {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Recompute results from a recorded session log.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
    },
}

/// Configuration problems exit with 1, partial results with 2.
enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

enum Status {
    Complete,
    Partial,
}

fn load(common: &Common) -> Result<SceneConfig, Failure> {
    let mut cfg = SceneConfig::load(&common.config).map_err(|e| Failure::Config(e.into()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn read_schedule<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    toml::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::Config)
}

fn write_outcomes(out: &Path, outcomes: &[CameraOutcome]) -> Result<Status> {
    let mut status = Status::Complete;
    for o in outcomes {
        match o {
            CameraOutcome::Done(r) => {
                let t = r.eye_to_hand.robot_from_camera.translation();
                println!(
                    "{}: calibrated, camera at [{:.4}, {:.4}, {:.4}] m, {} / {} inliers",
                    r.camera_id,
                    t.x,
                    t.y,
                    t.z,
                    r.eye_to_hand.inlier_count,
                    r.eye_to_hand.total_count
                );
                let json = serde_json::to_string_pretty(r)?;
                write(&out.join(format!("{}.json", r.camera_id)), &json)?;
            }
            CameraOutcome::Aborted {
                camera_id,
                phase,
                cause,
            } => {
                println!("{camera_id}: aborted in {phase:?}: {cause}");
                status = Status::Partial;
            }
        }
    }
    Ok(status)
}

fn calibrate(common: &Common) -> Result<Status, Failure> {
    let cfg = load(common)?;
    let scene = cfg.to_scene().map_err(|e| Failure::Config(e.into()))?;
    let result = run_session(&scene, &cfg.session, &cfg.sha256())
        .context("session failed")
        .map_err(Failure::Run)?;
    info!(
        "session took {:.1} s of simulated time",
        result.sim_time_ns as f64 * 1e-9
    );
    let run = || -> Result<Status> {
        out_dir(&common.out)?;
        write(&common.out.join("session.jsonl"), &write_log(&result.log))?;
        write_outcomes(&common.out, &result.outcomes)
    };
    run().map_err(Failure::Run)
}

fn exp_internal(
    common: &Common,
    schedule: Option<&Path>,
    camera: Option<&str>,
) -> Result<Status, Failure> {
    let cfg = load(common)?;
    let schedule = match schedule {
        Some(p) => read_schedule(p)?,
        None => InternalSchedule::table(),
    };
    let scene = cfg.to_scene().map_err(|e| Failure::Config(e.into()))?;
    let id = match camera {
        Some(c) => CameraId::from(c),
        None => scene.cameras[0].id.clone(),
    };
    let rows = run_internal(&scene, &id, &cfg.session, &schedule).map_err(|e| match e {
        robocal::experiment::ExperimentError::Schedule(_) => Failure::Config(e.into()),
        _ => Failure::Run(e.into()),
    })?;
    let run = || -> Result<Status> {
        out_dir(&common.out)?;
        let csv = internal_csv(&rows);
        print!("{csv}");
        write(&common.out.join("internal.csv"), &csv)?;
        Ok(Status::Complete)
    };
    run().map_err(Failure::Run)
}

fn exp_eyehand(common: &Common, schedule: Option<&Path>) -> Result<Status, Failure> {
    let cfg = load(common)?;
    let schedule = match schedule {
        Some(p) => read_schedule(p)?,
        None => EyeHandSchedule::table(),
    };
    let scene = cfg.to_scene().map_err(|e| Failure::Config(e.into()))?;
    let report = run_eyehand(&scene, &cfg.session, &schedule, &cfg.sha256()).map_err(|e| {
        match e {
            robocal::experiment::ExperimentError::Schedule(_) => Failure::Config(e.into()),
            _ => Failure::Run(e.into()),
        }
    })?;
    let run = || -> Result<Status> {
        out_dir(&common.out)?;
        let csv = eyehand_csv(&report.rows);
        print!("{csv}");
        write(&common.out.join("eyehand.csv"), &csv)?;
        write(
            &common.out.join("session.jsonl"),
            &write_log(&report.session.log),
        )?;
        let aborted = report
            .session
            .outcomes
            .iter()
            .any(|o| o.result().is_none());
        Ok(if aborted {
            Status::Partial
        } else {
            Status::Complete
        })
    };
    run().map_err(Failure::Run)
}

fn replay_log(common: &Common, log_path: &Path) -> Result<Status, Failure> {
    let cfg = load(common)?;
    let scene = cfg.to_scene().map_err(|e| Failure::Config(e.into()))?;
    let text = fs::read_to_string(log_path)
        .with_context(|| format!("reading {}", log_path.display()))
        .map_err(Failure::Config)?;
    let rigs: Vec<(CameraId, SensorRig)> = scene
        .cameras
        .iter()
        .map(|c| (c.id.clone(), c.nominal))
        .collect();
    let outcome = replay(&text, &cfg.sha256(), &rigs, &scene.board, &cfg.session)
        .map_err(|e| Failure::Run(e.into()))?;
    for w in &outcome.warnings {
        warn!("{w}");
    }
    for (again, recorded) in outcome.outcomes.iter().zip(&outcome.recorded) {
        if let (Some(a), Some(b)) = (again.result(), recorded.result()) {
            let d = (a.eye_to_hand.robot_from_camera.to_matrix4()
                - b.eye_to_hand.robot_from_camera.to_matrix4())
            .abs()
            .max();
            info!("{}: replayed pose differs from the recorded one by {d:.1e}", a.camera_id);
        }
    }
    let run = || -> Result<Status> {
        out_dir(&common.out)?;
        let status = write_outcomes(&common.out, &outcome.outcomes)?;
        Ok(if outcome.warnings.is_empty() {
            status
        } else {
            Status::Partial
        })
    };
    run().map_err(Failure::Run)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Calibrate(c) => calibrate(c),
        Command::ExpInternal {
            common,
            schedule,
            camera,
        } => exp_internal(common, schedule.as_deref(), camera.as_deref()),
        Command::ExpEyehand { common, schedule } => exp_eyehand(common, schedule.as_deref()),
        Command::Replay { common, log } => replay_log(common, log),
    };
    match result {
        Ok(Status::Complete) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(2),
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
