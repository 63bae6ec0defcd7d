//! Headless experiment campaigns and their reports.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitBall};
use serde::{Deserialize, Serialize};

use crate::policy::MudsPolicy;
use crate::scenario::{bundled, default_train_config};
use crate::sim::{compute_ade, EventKind, Outcome, RobotState, Scenario, SimObject, Vec3};
use crate::teaching::{
    CorrectionEvent, CorrectionKind, CorrectionSource, Demonstration, NoCorrections, RoundConfig,
    RoundRecord, RoundRunner, RoutingConfig, TeachError, TrainingSession,
};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExperimentError {
    #[error("repetitions must be at least 1")]
    NoRepetitions,
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("unknown object preset {0:?}")]
    UnknownObject(String),
    #[error("{0}")]
    Teach(#[from] TeachError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    AblationUm,
    Adaptation,
    FrameGeneralization,
    GripperDelayAudit,
}

/// How rollouts are displaced from the trained setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    None,
    /// Start position offset drawn uniformly from a ball, m.
    StartBall {
        radius: f64,
    },
    /// Object placement offset drawn uniformly from a box, m. The start
    /// moves with the object.
    PlacementBox {
        x: (f64, f64),
        y: (f64, f64),
        z: (f64, f64),
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: ExperimentKind,
    pub repetitions: usize,
    pub perturbation: Perturbation,
    /// Object presets; the scenario's own object when empty.
    #[serde(default)]
    pub objects: Vec<String>,
    pub scenario: String,
    /// Rollout `r` uses seed `seed + r`; training uses `seed`.
    pub seed: u64,
    #[serde(default)]
    pub output: Option<String>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.repetitions == 0 {
            return Err(ExperimentError::NoRepetitions);
        }
        if bundled(&self.scenario).is_none() {
            return Err(ExperimentError::UnknownScenario(self.scenario.clone()));
        }
        for o in &self.objects {
            if SimObject::preset(o, Vec3::zeros()).is_none() {
                return Err(ExperimentError::UnknownObject(o.clone()));
            }
        }
        Ok(())
    }

    pub fn ablation(repetitions: usize, seed: u64) -> Self {
        Self {
            name: ExperimentKind::AblationUm,
            repetitions,
            perturbation: Perturbation::StartBall { radius: 0.03 },
            objects: vec![],
            scenario: "curved-pick-place".into(),
            seed,
            output: None,
        }
    }

    pub fn frame_generalization(repetitions: usize, seed: u64) -> Self {
        Self {
            name: ExperimentKind::FrameGeneralization,
            repetitions,
            perturbation: Perturbation::PlacementBox {
                x: (-0.26, 0.02),
                y: (-0.30, 0.28),
                z: (0.0, 0.08),
            },
            objects: vec![],
            scenario: "curved-pick-place".into(),
            seed,
            output: None,
        }
    }

    pub fn gripper_delay_audit(repetitions: usize, seed: u64) -> Self {
        Self {
            name: ExperimentKind::GripperDelayAudit,
            repetitions,
            perturbation: Perturbation::None,
            objects: vec![],
            scenario: "curved-pick-place".into(),
            seed,
            output: None,
        }
    }

    pub fn adaptation(repetitions: usize, seed: u64, object: &str) -> Self {
        Self {
            name: ExperimentKind::Adaptation,
            repetitions,
            perturbation: Perturbation::None,
            objects: vec![object.into()],
            scenario: "slow-pick-place".into(),
            seed,
            output: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub cell: String,
    pub repetition: usize,
    pub seed: u64,
    pub outcome: Option<Outcome>,
    pub ade: f64,
    pub execution_time: f64,
    /// Start or placement offset applied to this rollout, m.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec3>,
    /// Gripper actuation delays observed in this rollout, s.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub delays: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub rollouts: usize,
    pub success_rate: f64,
    /// Success or a safe stop by the confidence gate.
    pub safe_rate: f64,
    pub outcomes: BTreeMap<String, usize>,
    pub ade: Option<Stats>,
    pub execution_time: Option<Stats>,
    pub delay: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub spec: ExperimentSpec,
    pub records: Vec<RolloutRecord>,
    pub summary: Vec<CellSummary>,
}

impl Report {
    fn build(spec: &ExperimentSpec, records: Vec<RolloutRecord>) -> Self {
        let mut cells: Vec<String> = Vec::new();
        for r in &records {
            if !cells.contains(&r.cell) {
                cells.push(r.cell.clone());
            }
        }
        let summary = cells
            .into_iter()
            .map(|cell| {
                let rs: Vec<&RolloutRecord> = records.iter().filter(|r| r.cell == cell).collect();
                let n = rs.len();
                let count = |f: &dyn Fn(Outcome) -> bool| {
                    rs.iter().filter(|r| r.outcome.is_some_and(f)).count() as f64 / n as f64
                };
                let mut outcomes = BTreeMap::new();
                for r in &rs {
                    let key = r.outcome.map_or("none".to_string(), |o| format!("{o:?}"));
                    *outcomes.entry(key).or_insert(0) += 1;
                }
                let ades: Vec<f64> = rs.iter().map(|r| r.ade).filter(|a| a.is_finite()).collect();
                let times: Vec<f64> = rs.iter().map(|r| r.execution_time).collect();
                let delays: Vec<f64> = rs.iter().flat_map(|r| r.delays.iter().copied()).collect();
                CellSummary {
                    rollouts: n,
                    success_rate: count(&|o| o == Outcome::Success),
                    safe_rate: count(&|o| matches!(o, Outcome::Success | Outcome::Arrested)),
                    outcomes,
                    ade: Stats::of(&ades),
                    execution_time: Stats::of(&times),
                    delay: Stats::of(&delays),
                    cell,
                }
            })
            .collect();
        Self {
            format_version: REPORT_FORMAT_VERSION,
            spec: spec.clone(),
            records,
            summary,
        }
    }

    pub fn cell(&self, name: &str) -> Option<&CellSummary> {
        self.summary.iter().find(|c| c.cell == name)
    }

    /// One line per rollout followed by a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "format_version": self.format_version,
            "spec": self.spec,
            "summary": self.summary,
        });
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }
}

/// Reactive stand-in for a teacher with a gamepad.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeachRule {
    pub kind: CorrectionKind,
    pub value: Vec<f64>,
    pub phase: Phase,
    /// Distance window to the taught grasp position, m.
    pub grasp_distance: (f64, f64),
    /// Distance window to the taught release position, m.
    pub drop_distance: (f64, f64),
    /// Fires only while the end effector is slower than this, m/s.
    pub below_speed: Option<f64>,
    /// Fires only while the end effector is faster than this, m/s.
    #[serde(default)]
    pub above_speed: Option<f64>,
    /// Fires every this many ticks while active.
    pub every: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approach,
    Carry,
}

const ANYWHERE: (f64, f64) = (0.0, f64::INFINITY);

#[derive(Debug, Clone)]
pub struct ScriptedTeacher {
    rules: Vec<TeachRule>,
    grasp: Vec3,
    drop_point: Vec3,
}

impl ScriptedTeacher {
    pub fn new(rules: Vec<TeachRule>, grasp: Vec3, drop_point: Vec3) -> Self {
        Self {
            rules,
            grasp,
            drop_point,
        }
    }
}

fn within(d: f64, (lo, hi): (f64, f64)) -> bool {
    d >= lo && d <= hi
}

impl CorrectionSource for ScriptedTeacher {
    fn poll(&mut self, tick: u64, t: f64, robot: &RobotState) -> Vec<CorrectionEvent> {
        let phase = if robot.held_object.is_some() {
            Phase::Carry
        } else {
            Phase::Approach
        };
        let to_grasp = (robot.position - self.grasp).norm();
        let to_drop = (robot.position - self.drop_point).norm();
        let speed = robot.velocity.norm();
        self.rules
            .iter()
            .filter(|r| {
                r.phase == phase
                    && tick.is_multiple_of(r.every.max(1))
                    && within(to_grasp, r.grasp_distance)
                    && within(to_drop, r.drop_distance)
                    && r.below_speed.is_none_or(|s| speed < s)
                    && r.above_speed.is_none_or(|s| speed > s)
            })
            .map(|r| CorrectionEvent::new(t, r.kind, r.value.clone()))
            .collect()
    }
}

/// Teacher rules that speed a slow pick and place up, most in free flight
/// and least around the grasp, and move the gripper commands earlier.
pub fn speed_up_rules() -> Vec<TeachRule> {
    let press = |phase, grasp_distance, drop_distance, below| TeachRule {
        kind: CorrectionKind::ScalingIncrement,
        value: vec![1.0],
        phase,
        grasp_distance,
        drop_distance,
        below_speed: Some(below),
        above_speed: None,
        every: 10,
    };
    vec![
        press(Phase::Approach, (0.16, f64::INFINITY), ANYWHERE, 0.25),
        press(Phase::Approach, (0.03, 0.16), ANYWHERE, 0.12),
        press(Phase::Carry, (0.07, 0.12), ANYWHERE, 0.12),
        press(
            Phase::Carry,
            (0.12, f64::INFINITY),
            (0.08, f64::INFINITY),
            0.25,
        ),
        press(Phase::Carry, (0.12, f64::INFINITY), (0.0, 0.08), 0.1),
        // close the gripper a little earlier on the way in
        TeachRule {
            kind: CorrectionKind::GripperIncrement,
            value: vec![1.0],
            phase: Phase::Approach,
            grasp_distance: (0.0, 0.02),
            drop_distance: ANYWHERE,
            below_speed: None,
            above_speed: None,
            every: 5,
        },
        // and open it earlier while lowering
        TeachRule {
            kind: CorrectionKind::GripperIncrement,
            value: vec![-1.0],
            phase: Phase::Carry,
            grasp_distance: (0.12, f64::INFINITY),
            drop_distance: (0.0, 0.04),
            below_speed: None,
            above_speed: None,
            every: 5,
        },
    ]
}

/// End-effector positions at the grasp and at the release of a demonstration.
pub fn demo_targets(demo: &Demonstration) -> (Vec3, Vec3) {
    let grasp = demo.grasp_index().unwrap_or(0);
    let release = demo
        .samples
        .iter()
        .rposition(|s| s.width < demo.samples[0].width - 1e-3)
        .unwrap_or(demo.samples.len() - 1);
    (demo.samples[grasp].position, demo.samples[release].position)
}

fn delays_of(record: &RoundRecord) -> Vec<f64> {
    record
        .log
        .events
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::GripperActuated { delay, .. } => Some(delay),
            _ => None,
        })
        .collect()
}

/// One uncorrected rollout of a policy copy.
pub fn rollout(
    policy: &MudsPolicy,
    scenario: &Scenario,
    config: &RoundConfig,
) -> Result<RoundRecord, TeachError> {
    let mut policy = policy.clone();
    let mut runner = RoundRunner::new(
        &mut policy,
        scenario,
        config,
        &[],
        &RoutingConfig::default(),
    )?;
    runner.run(&mut policy, &mut NoCorrections)?;
    Ok(runner.into_record())
}

struct Job {
    cell: String,
    repetition: usize,
    seed: u64,
    policy_index: usize,
    offset: Option<Vec3>,
    scenario: Scenario,
    config: RoundConfig,
}

fn run_jobs(
    policies: &[MudsPolicy],
    demo: &Demonstration,
    jobs: Vec<Job>,
) -> Result<Vec<RolloutRecord>, ExperimentError> {
    let demo_positions = demo.positions();
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(workers.max(1)).max(1);
    let results: Vec<Result<Vec<RolloutRecord>, TeachError>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                let demo_positions = &demo_positions;
                s.spawn(move || {
                    part.iter()
                        .map(|job| {
                            let rec =
                                rollout(&policies[job.policy_index], &job.scenario, &job.config)?;
                            Ok(RolloutRecord {
                                cell: job.cell.clone(),
                                repetition: job.repetition,
                                seed: job.seed,
                                outcome: rec.outcome(),
                                ade: compute_ade(&rec.log.positions(), demo_positions),
                                execution_time: rec.duration(),
                                offset: job.offset,
                                delays: delays_of(&rec),
                            })
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn shifted(scenario: &Scenario, offset: Vec3) -> Scenario {
    let mut s = scenario.clone();
    for o in &mut s.objects {
        o.position += offset;
    }
    s.start.position += offset;
    s
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Runs a campaign and returns its report.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report, ExperimentError> {
    spec.validate()?;
    let (base, script) = bundled(&spec.scenario).expect("validated");
    let demo = script.record(crate::teaching::DEFAULT_RECORD_RATE_HZ)?;
    let mut config = default_train_config(&base, spec.name == ExperimentKind::FrameGeneralization);
    config.options.seed = spec.seed;
    let session = TrainingSession::train(vec![demo.clone()], config)?;
    let policy = session.policy.clone();
    let seeds = (0..spec.repetitions).map(|r| (r, spec.seed.wrapping_add(r as u64)));

    let records = match spec.name {
        ExperimentKind::AblationUm => {
            let mut without = policy.clone();
            without.config.uncertainty_minimization = false;
            let policies = [policy, without];
            let mut jobs = Vec::new();
            for (pi, um) in ["w/ UM", "w/o UM"].iter().enumerate() {
                for perturbed in [false, true] {
                    for (r, seed) in seeds.clone() {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let offset = match (&spec.perturbation, perturbed) {
                            (Perturbation::StartBall { radius }, true) => {
                                Vec3::from(UnitBall.sample(&mut rng)) * *radius
                            }
                            _ => Vec3::zeros(),
                        };
                        let mut scenario = base.clone();
                        scenario.start.position += offset;
                        let cell = format!(
                            "{um} {}",
                            if perturbed {
                                "perturbed"
                            } else {
                                "unperturbed"
                            }
                        );
                        jobs.push(Job {
                            cell,
                            repetition: r,
                            seed,
                            policy_index: pi,
                            offset: perturbed.then_some(offset),
                            scenario,
                            config: RoundConfig::seeded(seed),
                        });
                    }
                }
            }
            run_jobs(&policies, &demo, jobs)?
        }
        ExperimentKind::FrameGeneralization => {
            let mut jobs = Vec::new();
            for (r, seed) in seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let offset = match &spec.perturbation {
                    Perturbation::PlacementBox { x, y, z } => Vec3::new(
                        sample_range(&mut rng, *x),
                        sample_range(&mut rng, *y),
                        sample_range(&mut rng, *z),
                    ),
                    Perturbation::StartBall { radius } => {
                        Vec3::from(UnitBall.sample(&mut rng)) * *radius
                    }
                    Perturbation::None => Vec3::zeros(),
                };
                jobs.push(Job {
                    cell: "two-frame".into(),
                    repetition: r,
                    seed,
                    policy_index: 0,
                    offset: Some(offset),
                    scenario: shifted(&base, offset),
                    config: RoundConfig::seeded(seed),
                });
            }
            run_jobs(&[policy], &demo, jobs)?
        }
        ExperimentKind::GripperDelayAudit => {
            let jobs = seeds
                .map(|(r, seed)| Job {
                    cell: "delay".into(),
                    repetition: r,
                    seed,
                    policy_index: 0,
                    offset: None,
                    scenario: base.clone(),
                    config: RoundConfig::seeded(seed),
                })
                .collect();
            run_jobs(&[policy], &demo, jobs)?
        }
        ExperimentKind::Adaptation => adaptation(spec, &base, &demo, session)?,
    };
    Ok(Report::build(spec, records))
}

/// Speeds the policy up on the trained object, then adapts it to each
/// object named by the experiment with a slow-down trace near the grasp.
fn adaptation(
    spec: &ExperimentSpec,
    base: &Scenario,
    demo: &Demonstration,
    mut session: TrainingSession,
) -> Result<Vec<RolloutRecord>, ExperimentError> {
    let (grasp, drop) = demo_targets(demo);
    for round in 0..SPEED_UP_ROUNDS {
        let mut teacher = ScriptedTeacher::new(speed_up_rules(), grasp, drop);
        session.run_round(
            base,
            &RoundConfig::seeded(spec.seed.wrapping_add(1000 + round)),
            &mut teacher,
        )?;
    }
    let source = session.policy.clone();
    let mut records = Vec::new();
    let objects: Vec<String> = if spec.objects.is_empty() {
        vec![base.objects[0].name.clone()]
    } else {
        spec.objects.clone()
    };
    for name in &objects {
        let mut scenario = base.clone();
        scenario.objects[0] = SimObject::preset(name, base.objects[0].position)
            .ok_or_else(|| ExperimentError::UnknownObject(name.clone()))?;
        let mut adapted = session.clone();
        adapted.policy = source.clone();
        for round in 0..ADAPTATION_ROUNDS {
            let mut teacher = ScriptedTeacher::new(slow_down_rules(), grasp, drop);
            adapted.run_round(
                &scenario,
                &RoundConfig::seeded(spec.seed.wrapping_add(2000 + round)),
                &mut teacher,
            )?;
        }
        let policies = [source.clone(), adapted.policy.clone()];
        let mut jobs = Vec::new();
        for (pi, label) in ["before", "after"].iter().enumerate() {
            for r in 0..spec.repetitions {
                let seed = spec.seed.wrapping_add(r as u64);
                jobs.push(Job {
                    cell: format!("{name} {label}"),
                    repetition: r,
                    seed,
                    policy_index: pi,
                    offset: None,
                    scenario: scenario.clone(),
                    config: RoundConfig::seeded(seed),
                });
            }
        }
        records.extend(run_jobs(&policies, demo, jobs)?);
    }
    Ok(records)
}

pub const SPEED_UP_ROUNDS: u64 = 4;
pub const ADAPTATION_ROUNDS: u64 = 2;

/// Slows the final approach so a lighter or more fragile object is not
/// knocked over on contact.
pub fn slow_down_rules() -> Vec<TeachRule> {
    vec![TeachRule {
        kind: CorrectionKind::ScalingIncrement,
        value: vec![-1.0],
        phase: Phase::Approach,
        grasp_distance: (0.0, 0.1),
        drop_distance: ANYWHERE,
        below_speed: None,
        above_speed: Some(0.05),
        every: 5,
    }]
}
