use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pickteach::experiment::{rollout, run_experiment, ExperimentSpec, Stats};
use pickteach::persist;
use pickteach::policy::MudsPolicy;
use pickteach::scenario::bundled;
use pickteach::sim::{Outcome, Scenario};
use pickteach::teaching::{
    record_demo, train_policy, Demonstration, FrameMode, RawSample, RoundConfig, TrainConfig,
    TrainingSession, DEFAULT_RECORD_RATE_HZ,
};
use pickteach_service::service::resolve_scenario;
use pickteach_service::{Server, Service};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "teach",
    version,
    about = "Teach pick-and-place policies from demonstrations and corrections"
)]
struct Cli {
    /// Where demos, policies, archives and reports are stored.
    #[arg(
        long,
        global = true,
        env = "PICKTEACH_DATA_DIR",
        default_value = "pickteach-data"
    )]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve teaching sessions over WebSocket.
    Serve {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Demonstration files.
    Demo {
        #[command(subcommand)]
        command: DemoCommand,
    },
    /// Fit a policy to one or more stored demonstrations.
    Train {
        #[arg(required = true)]
        demos: Vec<PathBuf>,
        /// Training configuration (JSON); defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fit object and goal frames placed at this scenario's object and goal.
        #[arg(long, value_name = "SCENARIO")]
        two_frame: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run uncorrected rollouts of a policy.
    Rollout {
        policy: PathBuf,
        /// Bundled scenario name or scenario JSON file.
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'n', long = "count", default_value_t = 1)]
        n: u64,
        /// Write each rollout's state log as JSON lines into this directory.
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
    /// Run an experiment campaign described by a spec file.
    Experiment {
        spec: PathBuf,
        /// Report path; overrides `output` in the experiment file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a session archive and check that it reproduces the stored policy.
    Replay {
        archive: PathBuf,
        /// Write the replayed policy here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DemoCommand {
    /// Record raw device samples (JSON array, JSON lines or CSV), or a
    /// bundled script given as `bundled:<scenario>`, into a demonstration.
    Import {
        file: String,
        /// Hz.
        #[arg(long, default_value_t = DEFAULT_RECORD_RATE_HZ)]
        rate: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli, out: &mut impl Write) -> Result<ExitCode> {
    let data = cli.data_dir;
    match cli.command {
        Command::Serve { port, host } => {
            std::fs::create_dir_all(&data)
                .with_context(|| format!("creating {}", data.display()))?;
            let server = Server::bind((host.as_str(), port), Service::new(&data))?;
            log::info!(
                "listening on ws://{} with data in {}",
                server.local_addr(),
                data.display()
            );
            server.join();
        }
        Command::Demo {
            command:
                DemoCommand::Import {
                    file,
                    rate,
                    out: target,
                },
        } => {
            let raw = read_raw(&file)?;
            let demo = record_demo(&raw, rate).with_context(|| format!("recording {file}"))?;
            let stem = file.strip_prefix("bundled:").unwrap_or(&file);
            let stem = Path::new(stem)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("demo");
            let path = target.unwrap_or_else(|| data.join("demos").join(format!("{stem}.demo")));
            save(&demo, &path)?;
            writeln!(
                out,
                "{}: {} samples over {:.2} s",
                path.display(),
                demo.samples.len(),
                demo.duration()
            )?;
        }
        Command::Train {
            demos,
            config,
            two_frame,
            out: target,
        } => {
            let stem = demos[0]
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("policy")
                .to_string();
            let demos: Vec<Demonstration> = demos
                .iter()
                .map(|p| persist::load(p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<_>>()?;
            let mut config: TrainConfig = match &config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            if let Some(name) = two_frame {
                let s = resolve_scenario(&name).map_err(anyhow::Error::msg)?;
                let object = s
                    .objects
                    .first()
                    .context("two-frame training needs a scenario with an object")?;
                config.frames = FrameMode::TwoFrame {
                    object: object.position,
                    goal: s.goal,
                };
            }
            let policy = train_policy(&demos, &config)?;
            let path =
                target.unwrap_or_else(|| data.join("policies").join(format!("{stem}.policy")));
            save(&policy, &path)?;
            writeln!(
                out,
                "{}: {} frame(s)",
                path.display(),
                policy.frames().len()
            )?;
        }
        Command::Rollout {
            policy,
            scenario,
            seed,
            n,
            log_dir,
        } => {
            let policy: MudsPolicy =
                persist::load(&policy).with_context(|| format!("loading {}", policy.display()))?;
            let scenario = resolve_scenario(&scenario).map_err(anyhow::Error::msg)?;
            write_rollouts(&policy, &scenario, seed, n, log_dir.as_deref(), out)?;
        }
        Command::Experiment { spec, out: target } => {
            let spec = read_spec(&spec)?;
            let report = run_experiment(&spec)?;
            let text = report.to_jsonl();
            match target.or_else(|| spec.output.as_ref().map(|o| data.join("reports").join(o))) {
                Some(path) => {
                    write_file(&path, text.as_bytes())?;
                    for cell in &report.summary {
                        writeln!(out, "{}", serde_json::to_string(cell)?)?;
                    }
                    writeln!(out, "report: {}", path.display())?;
                }
                None => out.write_all(text.as_bytes())?,
            }
        }
        Command::Replay {
            archive,
            out: target,
        } => {
            let session: TrainingSession = persist::load(&archive)
                .with_context(|| format!("loading {}", archive.display()))?;
            let replayed = session.replay()?;
            for (i, r) in session.rounds.iter().enumerate() {
                writeln!(
                    out,
                    "round {i}: {:?} in {:.2} s, {} corrections",
                    r.outcome(),
                    r.duration(),
                    r.corrections.len()
                )?;
            }
            let identical = persist::to_bytes(&replayed) == persist::to_bytes(&session.policy);
            if let Some(path) = target {
                save(&replayed, &path)?;
            }
            writeln!(
                out,
                "replay {}",
                if identical { "matches" } else { "DIFFERS" }
            )?;
            if !identical {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct RolloutLine {
    seed: u64,
    outcome: Option<Outcome>,
    execution_time: f64,
    corrections: usize,
}

#[derive(Serialize)]
struct RolloutSummary {
    rollouts: u64,
    success_rate: f64,
    outcomes: std::collections::BTreeMap<String, usize>,
    execution_time: Option<Stats>,
}

fn write_rollouts(
    policy: &MudsPolicy,
    scenario: &Scenario,
    seed: u64,
    n: u64,
    log_dir: Option<&Path>,
    out: &mut impl Write,
) -> Result<()> {
    if n == 0 {
        bail!("-n must be at least 1");
    }
    let mut outcomes = std::collections::BTreeMap::new();
    let mut times = Vec::new();
    let mut successes = 0;
    for s in seed..seed + n {
        let record = rollout(policy, scenario, &RoundConfig::seeded(s))?;
        let line = RolloutLine {
            seed: s,
            outcome: record.outcome(),
            execution_time: record.duration(),
            corrections: record.corrections.len(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
        *outcomes
            .entry(record.outcome().map_or("none".into(), |o| format!("{o:?}")))
            .or_insert(0) += 1;
        times.push(record.duration());
        successes += usize::from(record.outcome() == Some(Outcome::Success));
        if let Some(dir) = log_dir {
            write_file(
                &dir.join(format!("rollout-{s}.jsonl")),
                record.log.to_jsonl().as_bytes(),
            )?;
        }
    }
    let summary = RolloutSummary {
        rollouts: n,
        success_rate: successes as f64 / n as f64,
        outcomes,
        execution_time: Stats::of(&times),
    };
    writeln!(out, "{}", serde_json::json!({ "summary": summary }))?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn save<A: persist::Artifact>(artifact: &A, path: &Path) -> Result<()> {
    write_file(path, &persist::to_bytes(artifact))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Accepts a plain JSON spec or a persisted spec artifact.
fn read_spec(path: &Path) -> Result<ExperimentSpec> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if persist::read_header(&bytes).is_ok_and(|h| h.kind == "experiment_spec") {
        return Ok(persist::from_bytes(&bytes)?);
    }
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Deserialize)]
struct CsvSample {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    roll: f64,
    pitch: f64,
    yaw: f64,
    width: f64,
}

fn read_raw(file: &str) -> Result<Vec<RawSample>> {
    if let Some(name) = file.strip_prefix("bundled:") {
        let (_, script) = bundled(name).with_context(|| format!("no bundled scenario `{name}`"))?;
        return Ok(script.raw(pickteach::scenario::DEVICE_RATE_HZ));
    }
    let path = Path::new(file);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {file}"))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => csv::Reader::from_reader(text.as_bytes())
            .deserialize::<CsvSample>()
            .map(|row| {
                let r = row.with_context(|| format!("parsing {file}"))?;
                Ok(RawSample {
                    t: r.t,
                    position: pickteach::sim::Vec3::new(r.x, r.y, r.z),
                    orientation: [r.roll, r.pitch, r.yaw],
                    width: r.width,
                })
            })
            .collect(),
        Some("jsonl") => text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{file}:{}", i + 1)))
            .collect(),
        _ => serde_json::from_str(&text).with_context(|| format!("parsing {file}")),
    }
}
