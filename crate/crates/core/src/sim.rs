//! Desk-scale pick-and-place plant.
//!
//! The end effector is a point mass chasing the commanded attractor through a
//! critically damped spring-damper per axis. The attractor is held constant
//! over each control tick and the linear dynamics are propagated exactly over
//! the tick, so the response matches the continuous-time solution.
//!
//! The gripper executes width commands after a random delay. Objects stand on
//! the table (z = 0); a standing object touched by the end effector either
//! topples (impulse above its threshold) or gets pushed along until the
//! gripper closes on it.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{Continuous, ContinuousCDF};

pub type Vec3 = Vector3<f64>;

pub const DEFAULT_CONTROL_RATE_HZ: f64 = 100.0;
pub const GRAVITY: f64 = 9.81;
/// Support radius at which an object's configured topple impulse applies unscaled.
pub const REFERENCE_SUPPORT_RADIUS: f64 = 0.03;
const PUSH_FRICTION: f64 = 0.4;
const STUCK_AFTER_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Impedance of the inner loop. Damping is always critical and derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpedanceParams {
    /// N/m per axis.
    pub stiffness: Vec3,
    /// kg.
    pub mass: f64,
}

impl Default for ImpedanceParams {
    fn default() -> Self {
        Self {
            stiffness: Vec3::repeat(600.0),
            mass: 1.5,
        }
    }
}

impl ImpedanceParams {
    pub fn damping(&self) -> Vec3 {
        self.stiffness.map(|k| 2.0 * (k * self.mass).sqrt())
    }

    pub fn natural_frequency(&self) -> Vec3 {
        self.stiffness.map(|k| (k / self.mass).sqrt())
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.mass > 0.0 && self.stiffness.iter().all(|k| *k > 0.0 && k.is_finite())) {
            return Err(SimError::InvalidParameter(
                "stiffness and mass must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Truncated normal command delay. `mean` is the mean of the truncated
/// distribution, not of the underlying normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayDistribution {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub std_dev: f64,
}

impl Default for DelayDistribution {
    fn default() -> Self {
        Self {
            mean: 0.93,
            min: 0.56,
            max: 1.54,
            std_dev: 0.25,
        }
    }
}

impl DelayDistribution {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.min <= self.mean
            && self.mean <= self.max
            && self.min >= 0.0
            && self.std_dev >= 0.0)
        {
            return Err(SimError::InvalidParameter(format!(
                "bad delay distribution {self:?}"
            )));
        }
        Ok(())
    }

    fn truncated_mean(&self, location: f64) -> f64 {
        let std = statrs::distribution::Normal::standard();
        let a = (self.min - location) / self.std_dev;
        let b = (self.max - location) / self.std_dev;
        let z = std.cdf(b) - std.cdf(a);
        if z < 1e-300 {
            return if a > 0.0 { self.min } else { self.max };
        }
        location + self.std_dev * (std.pdf(a) - std.pdf(b)) / z
    }

    /// Location of the untruncated normal whose truncation has mean `self.mean`.
    pub fn location(&self) -> f64 {
        if self.std_dev == 0.0 {
            return self.mean;
        }
        let (mut lo, mut hi) = (self.min - 5.0 * self.std_dev, self.max + 5.0 * self.std_dev);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.truncated_mean(mid) < self.mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn sampler(&self) -> DelaySampler {
        DelaySampler {
            normal: (self.std_dev > 0.0)
                .then(|| Normal::new(self.location(), self.std_dev).expect("finite std")),
            mean: self.mean,
            min: self.min,
            max: self.max,
        }
    }
}

#[derive(Debug, Clone)]
struct DelaySampler {
    normal: Option<Normal<f64>>,
    mean: f64,
    min: f64,
    max: f64,
}

impl DelaySampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let Some(normal) = &self.normal else {
            return self.mean;
        };
        loop {
            let v = normal.sample(rng);
            if v >= self.min && v <= self.max {
                return v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperParams {
    pub delay: DelayDistribution,
    /// m/s, both directions.
    pub closing_speed: f64,
    pub max_width: f64,
    /// Commands closer than this to the last commanded target are ignored.
    pub hysteresis: f64,
}

impl Default for GripperParams {
    fn default() -> Self {
        Self {
            delay: DelayDistribution::default(),
            closing_speed: 0.1,
            max_width: 0.08,
            hysteresis: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingCommand {
    pub target: f64,
    pub issued_at: f64,
    pub deadline: f64,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectKind {
    Rigid,
    Flexible,
    Deformable,
}

impl ObjectKind {
    /// Topple threshold relative to a rigid object.
    pub fn topple_factor(self) -> f64 {
        match self {
            ObjectKind::Rigid => 1.0,
            ObjectKind::Flexible => 0.5,
            ObjectKind::Deformable => 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectState {
    Standing,
    /// Touched without toppling; dragged along by the end effector.
    Pushed,
    Held,
    Placed,
    Toppled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub name: String,
    pub kind: ObjectKind,
    /// Base center, m.
    pub position: Vec3,
    pub mass: f64,
    pub width: f64,
    pub height: f64,
    pub support_radius: f64,
    /// N*s for a rigid object with the reference support radius.
    pub topple_impulse: f64,
    pub max_grip_width: f64,
    pub min_grip_width: f64,
    #[serde(default = "standing")]
    pub state: ObjectState,
}

fn standing() -> ObjectState {
    ObjectState::Standing
}

impl SimObject {
    pub fn rigid_250g(position: Vec3) -> Self {
        Self {
            name: "rigid-250g".into(),
            kind: ObjectKind::Rigid,
            position,
            mass: 0.25,
            width: 0.06,
            height: 0.20,
            support_radius: 0.03,
            topple_impulse: 0.45,
            max_grip_width: 0.14,
            min_grip_width: 0.05,
            state: ObjectState::Standing,
        }
    }

    pub fn rigid_900g(position: Vec3) -> Self {
        Self {
            name: "rigid-900g".into(),
            mass: 0.9,
            topple_impulse: 0.9,
            ..Self::rigid_250g(position)
        }
    }

    pub fn flexible_100g(position: Vec3) -> Self {
        Self {
            name: "flexible-100g".into(),
            kind: ObjectKind::Flexible,
            mass: 0.1,
            ..Self::rigid_250g(position)
        }
    }

    pub fn small_deformable_250g(position: Vec3) -> Self {
        Self {
            name: "small-deformable-250g".into(),
            kind: ObjectKind::Deformable,
            width: 0.04,
            height: 0.12,
            support_radius: 0.02,
            max_grip_width: 0.11,
            min_grip_width: 0.03,
            ..Self::rigid_250g(position)
        }
    }

    pub fn preset(name: &str, position: Vec3) -> Option<Self> {
        Some(match name {
            "rigid-250g" => Self::rigid_250g(position),
            "rigid-900g" => Self::rigid_900g(position),
            "flexible-100g" => Self::flexible_100g(position),
            "small-deformable-250g" => Self::small_deformable_250g(position),
            _ => return None,
        })
    }

    /// Impulse above which a horizontal impact knocks the object over.
    pub fn effective_topple_impulse(&self) -> f64 {
        self.topple_impulse * self.kind.topple_factor() * self.support_radius
            / REFERENCE_SUPPORT_RADIUS
    }

    /// Half-width of the region between the prongs where the object can sit.
    pub fn grasp_window(&self) -> f64 {
        0.5 * (self.max_grip_width - self.width)
    }

    pub fn is_pickable(&self) -> bool {
        self.min_grip_width < self.width && self.width < self.max_grip_width
    }

    pub fn toppled(&self) -> bool {
        self.state == ObjectState::Toppled
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.support_radius > 0.0 && self.mass > 0.0 && self.width > 0.0 && self.height > 0.0)
        {
            return Err(SimError::InvalidParameter(format!(
                "object {} has non-positive geometry",
                self.name
            )));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(SimError::NonFinite("object position"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: Vec3,
    pub velocity: Vec3,
    /// Intrinsic XYZ Euler angles, rad.
    pub orientation: [f64; 3],
    pub gripper_width: f64,
    pub gripper_closing: bool,
    pub held_object: Option<usize>,
}

/// What the inner loop tracks during one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setpoint {
    pub position: Vec3,
    pub orientation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartPose {
    pub position: Vec3,
    pub orientation: [f64; 3],
}

/// Everything needed to build a world: plant, objects, goal, seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub objects: Vec<SimObject>,
    pub goal: Vec3,
    /// A released object must land within this horizontal distance of the goal.
    pub goal_tolerance: f64,
    /// Max end-effector height above the goal at release.
    pub release_height: f64,
    pub plant: ImpedanceParams,
    pub gripper: GripperParams,
    pub start: StartPose,
    pub control_rate: f64,
    pub max_duration: f64,
    /// rad/s.
    pub max_angular_rate: f64,
    /// Fraction of a held object's weight the controller cancels (0 to 1).
    #[serde(default = "full_compensation")]
    pub payload_compensation: f64,
    pub seed: u64,
}

fn full_compensation() -> f64 {
    1.0
}

impl Scenario {
    pub fn dt(&self) -> f64 {
        1.0 / self.control_rate
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.plant.validate()?;
        self.gripper.delay.validate()?;
        for o in &self.objects {
            o.validate()?;
        }
        if !(self.control_rate > 0.0 && self.max_duration > 0.0) {
            return Err(SimError::InvalidParameter("rates must be positive".into()));
        }
        Ok(())
    }

    /// Short hash of the configuration, written into rollout log headers.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Toppled,
    MissedGrasp,
    Dropped,
    Arrested,
    Timeout,
    Stuck,
    Stopped,
}

impl Outcome {
    /// Outcomes that leave the object and robot in a safe state.
    pub fn is_safe(self) -> bool {
        matches!(
            self,
            Outcome::Success | Outcome::Arrested | Outcome::Stopped
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    GripperCommand {
        target: f64,
        delay: f64,
    },
    GripperActuated {
        target: f64,
        delay: f64,
    },
    Contact {
        object: usize,
        impulse: f64,
    },
    Pick {
        object: usize,
    },
    Topple {
        object: usize,
        impulse: f64,
    },
    Place {
        object: usize,
        error: f64,
    },
    Drop {
        object: usize,
    },
    MissedGrasp,
    Stuck,
    GateArrest {
        variance: f64,
    },
    GateRelease,
    FrameSwitch {
        label: String,
        variance: f64,
    },
    Correction {
        aspect: String,
        target: String,
        channel: usize,
        epsilon: f64,
        arrested: bool,
    },
    CorrectionDiscarded {
        reason: String,
    },
    GotoStart,
    Stop,
    Outcome {
        outcome: Outcome,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u64,
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSample {
    pub tick: u64,
    pub t: f64,
    pub position: Vec3,
    pub velocity: Vec3,
    pub orientation: [f64; 3],
    pub gripper_width: f64,
    pub attractor: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format_version: u32,
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLog {
    pub header: LogHeader,
    pub samples: Vec<StateSample>,
    pub events: Vec<Event>,
    pub outcome: Option<Outcome>,
    /// Seconds from round start to the terminal outcome.
    pub execution_time: f64,
}

impl RolloutLog {
    pub fn positions(&self) -> Vec<Vec3> {
        self.samples.iter().map(|s| s.position).collect()
    }

    /// Line-delimited export: one header line, then one record per tick with
    /// the events that happened during it.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct TickRecord<'a> {
            tick: u64,
            state: &'a StateSample,
            events: Vec<&'a Event>,
        }
        #[derive(Serialize)]
        struct Summary {
            outcome: Option<Outcome>,
            execution_time: f64,
        }
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        let mut ev = self.events.iter().peekable();
        for s in &self.samples {
            let mut events = Vec::new();
            while let Some(e) = ev.peek() {
                if e.tick > s.tick {
                    break;
                }
                events.push(ev.next().expect("peeked"));
            }
            let rec = TickRecord {
                tick: s.tick,
                state: s,
                events,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        let rest: Vec<&Event> = ev.collect();
        if !rest.is_empty() {
            out.push_str(
                &serde_json::to_string(&serde_json::json!({ "events": rest })).expect("events"),
            );
            out.push('\n');
        }
        out.push_str(
            &serde_json::to_string(&Summary {
                outcome: self.outcome,
                execution_time: self.execution_time,
            })
            .expect("summary serializes"),
        );
        out.push('\n');
        out
    }
}

/// Mean distance from each executed position to the nearest demonstrated one.
pub fn compute_ade(executed: &[Vec3], demo: &[Vec3]) -> f64 {
    if executed.is_empty() || demo.is_empty() {
        return f64::NAN;
    }
    let total: f64 = executed
        .iter()
        .map(|p| {
            demo.iter()
                .map(|q| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / executed.len() as f64
}

#[derive(Debug, Clone)]
struct Gripper {
    params: GripperParams,
    sampler: DelaySampler,
    target: f64,
    last_commanded: f64,
    pending: Vec<PendingCommand>,
    next_seq: u64,
    rng: ChaCha8Rng,
}

/// One episode's world: robot, objects, gripper actuator and the running log.
#[derive(Debug, Clone)]
pub struct SimWorld {
    scenario: Scenario,
    robot: RobotState,
    objects: Vec<SimObject>,
    gripper: Gripper,
    time: f64,
    tick: u64,
    below_table_since: Option<f64>,
    push_offsets: Vec<Option<Vec3>>,
    grip_offset: Option<Vec3>,
    log: RolloutLog,
}

impl SimWorld {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        Self::with_seed(scenario, scenario.seed)
    }

    pub fn with_seed(scenario: &Scenario, seed: u64) -> Result<Self, SimError> {
        scenario.validate()?;
        let width = scenario.gripper.max_width;
        let robot = RobotState {
            position: scenario.start.position,
            velocity: Vec3::zeros(),
            orientation: scenario.start.orientation,
            gripper_width: width,
            gripper_closing: false,
            held_object: None,
        };
        let header = LogHeader {
            format_version: 1,
            scenario: scenario.name.clone(),
            config_hash: scenario.config_hash(),
            seed,
            dt: scenario.dt(),
        };
        Ok(Self {
            gripper: Gripper {
                sampler: scenario.gripper.delay.sampler(),
                params: scenario.gripper.clone(),
                target: width,
                last_commanded: width,
                pending: Vec::new(),
                next_seq: 0,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            objects: scenario.objects.clone(),
            push_offsets: vec![None; scenario.objects.len()],
            scenario: scenario.clone(),
            robot,
            time: 0.0,
            tick: 0,
            below_table_since: None,
            grip_offset: None,
            log: RolloutLog {
                header,
                samples: Vec::new(),
                events: Vec::new(),
                outcome: None,
                execution_time: 0.0,
            },
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn robot(&self) -> &RobotState {
        &self.robot
    }

    pub fn objects(&self) -> &[SimObject] {
        &self.objects
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn pending_commands(&self) -> &[PendingCommand] {
        &self.gripper.pending
    }

    pub fn gripper_target(&self) -> f64 {
        self.gripper.target
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.log.outcome
    }

    pub fn is_done(&self) -> bool {
        self.log.outcome.is_some()
    }

    pub fn log(&self) -> &RolloutLog {
        &self.log
    }

    pub fn into_log(self) -> RolloutLog {
        self.log
    }

    pub fn push_event(&mut self, kind: EventKind) {
        self.log.events.push(Event {
            tick: self.tick,
            t: self.time,
            kind,
        });
    }

    /// Sets the terminal outcome; later calls are ignored.
    pub fn finish(&mut self, outcome: Outcome) {
        if self.log.outcome.is_none() {
            self.log.outcome = Some(outcome);
            self.log.execution_time = self.time;
            self.push_event(EventKind::Outcome { outcome });
        }
    }

    /// Teleports the end effector (zero velocity). Held objects come along.
    pub fn teleport(&mut self, position: Vec3, orientation: [f64; 3]) {
        self.robot.position = position;
        self.robot.velocity = Vec3::zeros();
        self.robot.orientation = orientation;
        self.carry_objects();
    }

    /// Moves a standing object (scenario placement changes between rollouts).
    pub fn place_object(&mut self, index: usize, position: Vec3) {
        if let Some(o) = self.objects.get_mut(index) {
            o.position = position;
        }
    }

    /// Requests a gripper width. Returns the sampled delay if a command was queued.
    pub fn command_gripper(&mut self, width: f64, now: f64) -> Option<f64> {
        let g = &mut self.gripper;
        let width = width.clamp(0.0, g.params.max_width);
        if (width - g.last_commanded).abs() <= g.params.hysteresis {
            return None;
        }
        let delay = g.sampler.sample(&mut g.rng);
        let cmd = PendingCommand {
            target: width,
            issued_at: now,
            deadline: now + delay,
            seq: g.next_seq,
        };
        g.next_seq += 1;
        g.last_commanded = width;
        let at = g.pending.partition_point(|p| p.deadline <= cmd.deadline);
        g.pending.insert(at, cmd);
        self.push_event(EventKind::GripperCommand {
            target: width,
            delay,
        });
        Some(delay)
    }

    /// Draws one delay from the gripper's distribution without queuing anything.
    pub fn sample_delay(&mut self) -> f64 {
        let g = &mut self.gripper;
        g.sampler.sample(&mut g.rng)
    }

    /// Advances one control tick toward `setpoint`.
    pub fn step(&mut self, setpoint: &Setpoint, dt: f64) -> Result<(), SimError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SimError::InvalidTimeStep(dt));
        }
        if !setpoint
            .position
            .iter()
            .chain(&setpoint.orientation)
            .all(|v| v.is_finite())
        {
            return Err(SimError::NonFinite("setpoint"));
        }
        let t_end = self.time + dt;
        self.actuate_gripper(t_end, dt);

        let force = self.external_force();
        let plant = &self.scenario.plant;
        let omega = plant.natural_frequency();
        let decay_base = omega.map(|w| (-w * dt).exp());
        for axis in 0..3 {
            let equilibrium = setpoint.position[axis] + force[axis] / plant.stiffness[axis];
            let e0 = self.robot.position[axis] - equilibrium;
            let v0 = self.robot.velocity[axis];
            let w = omega[axis];
            let b = v0 + w * e0;
            let decay = decay_base[axis];
            self.robot.position[axis] = equilibrium + (e0 + b * dt) * decay;
            self.robot.velocity[axis] = (v0 - w * b * dt) * decay;
        }

        if self.robot.position.z < 0.0 {
            self.robot.position.z = 0.0;
            self.robot.velocity.z = self.robot.velocity.z.max(0.0);
        }
        if setpoint.position.z < 0.0 && self.robot.position.z <= 1e-9 {
            let since = *self.below_table_since.get_or_insert(self.time);
            if t_end - since > STUCK_AFTER_S {
                self.push_event(EventKind::Stuck);
                self.time = t_end;
                self.finish(Outcome::Stuck);
                self.time -= dt;
            }
        } else {
            self.below_table_since = None;
        }

        let max_turn = self.scenario.max_angular_rate * dt;
        for (cur, des) in self.robot.orientation.iter_mut().zip(&setpoint.orientation) {
            let diff = wrap_angle(des - *cur);
            *cur = wrap_angle(*cur + diff.clamp(-max_turn, max_turn));
        }

        self.time = t_end;
        self.tick += 1;
        self.carry_objects();
        self.evaluate_contact();
        self.log.samples.push(StateSample {
            tick: self.tick,
            t: self.time,
            position: self.robot.position,
            velocity: self.robot.velocity,
            orientation: self.robot.orientation,
            gripper_width: self.robot.gripper_width,
            attractor: setpoint.position,
        });
        Ok(())
    }

    fn external_force(&self) -> Vec3 {
        let mut f = Vec3::zeros();
        if let Some(i) = self.robot.held_object {
            f.z -= (1.0 - self.scenario.payload_compensation) * self.objects[i].mass * GRAVITY;
        }
        let v_xy = Vec3::new(self.robot.velocity.x, self.robot.velocity.y, 0.0);
        let speed = v_xy.norm();
        if speed > 1e-9 {
            for o in self
                .objects
                .iter()
                .filter(|o| o.state == ObjectState::Pushed)
            {
                f -= v_xy / speed * PUSH_FRICTION * o.mass * GRAVITY;
            }
        }
        f
    }

    fn actuate_gripper(&mut self, t_end: f64, dt: f64) {
        while let Some(first) = self.gripper.pending.first() {
            if first.deadline > t_end {
                break;
            }
            let cmd = self.gripper.pending.remove(0);
            // A command supersedes everything issued before it.
            self.gripper.pending.retain(|p| p.seq > cmd.seq);
            self.gripper.target = cmd.target;
            let delay = cmd.deadline - cmd.issued_at;
            self.push_event(EventKind::GripperActuated {
                target: cmd.target,
                delay,
            });
        }
        let step = self.gripper.params.closing_speed * dt;
        let target = self.gripper.target;
        let mut w = self.robot.gripper_width;
        w += (target - w).clamp(-step, step);
        if let Some(i) = self.robot.held_object {
            let obj_w = self.objects[i].width;
            if target < obj_w {
                w = w.max(obj_w);
            }
        }
        self.robot.gripper_closing = w < self.robot.gripper_width;
        self.robot.gripper_width = w;
    }

    fn carry_objects(&mut self) {
        let x = self.robot.position;
        if let (Some(i), Some(off)) = (self.robot.held_object, self.grip_offset) {
            self.objects[i].position = x + off;
        }
        for (i, o) in self.objects.iter_mut().enumerate() {
            if o.state != ObjectState::Pushed {
                continue;
            }
            if x.z > o.position.z + o.height || x.z < o.position.z {
                o.state = ObjectState::Standing;
                self.push_offsets[i] = None;
                continue;
            }
            if let Some(off) = self.push_offsets[i] {
                o.position.x = x.x + off.x;
                o.position.y = x.y + off.y;
            }
        }
    }

    /// Resolves contacts, grasps and releases for the current state.
    pub fn evaluate_contact(&mut self) {
        if self.is_done() {
            return;
        }
        let x = self.robot.position;
        let v_xy = Vec3::new(self.robot.velocity.x, self.robot.velocity.y, 0.0);
        let width = self.robot.gripper_width;

        for i in 0..self.objects.len() {
            let o = &self.objects[i];
            if o.state != ObjectState::Standing {
                continue;
            }
            let d = horizontal_distance(&x, &o.position);
            let in_span = x.z >= o.position.z && x.z <= o.position.z + o.height;
            if !(in_span && d <= 0.5 * o.width) {
                continue;
            }
            let impulse = self.scenario.plant.mass * v_xy.norm();
            self.push_event(EventKind::Contact { object: i, impulse });
            if impulse > self.objects[i].effective_topple_impulse() {
                self.objects[i].state = ObjectState::Toppled;
                self.push_event(EventKind::Topple { object: i, impulse });
                self.finish(Outcome::Toppled);
                return;
            }
            let off = self.objects[i].position - x;
            self.push_offsets[i] = Some(Vec3::new(off.x, off.y, 0.0));
            self.objects[i].state = ObjectState::Pushed;
        }

        match self.robot.held_object {
            None => {
                // Closing through an object's width decides the grasp.
                let candidate = self.objects.iter().position(|o| {
                    matches!(o.state, ObjectState::Standing | ObjectState::Pushed)
                        && width <= o.width
                        && x.z >= o.position.z
                        && x.z <= o.position.z + o.height
                        && horizontal_distance(&x, &o.position) < o.grasp_window()
                });
                if let Some(i) = candidate {
                    self.objects[i].state = ObjectState::Held;
                    self.push_offsets[i] = None;
                    self.robot.held_object = Some(i);
                    self.robot.gripper_width = self.objects[i].width;
                    self.grip_offset = Some(self.objects[i].position - x);
                    self.push_event(EventKind::Pick { object: i });
                } else if self.robot.gripper_closing
                    && self.objects.iter().any(|o| {
                        o.state != ObjectState::Placed
                            && o.state != ObjectState::Held
                            && width < o.width
                    })
                {
                    self.push_event(EventKind::MissedGrasp);
                    self.finish(Outcome::MissedGrasp);
                }
            }
            Some(i) => {
                let o = &self.objects[i];
                if self.gripper.target > o.width {
                    let goal = self.scenario.goal;
                    let error = horizontal_distance(&o.position, &goal);
                    let height = x.z - goal.z;
                    self.robot.held_object = None;
                    self.grip_offset = None;
                    if error <= self.scenario.goal_tolerance
                        && height <= self.scenario.release_height
                    {
                        let o = &mut self.objects[i];
                        o.position.z = goal.z;
                        o.state = ObjectState::Placed;
                        self.push_event(EventKind::Place { object: i, error });
                        self.finish(Outcome::Success);
                    } else {
                        self.objects[i].state = ObjectState::Standing;
                        self.push_event(EventKind::Drop { object: i });
                        self.finish(Outcome::Dropped);
                    }
                }
            }
        }
    }
}

fn horizontal_distance(a: &Vec3, b: &Vec3) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}
