//! Demonstration recording, training and the interactive correction loop.

use serde::{Deserialize, Serialize};

use crate::policy::{
    angles_to_sincos, AttractorCommand, CorrectionTarget, Frame, FrameData, FrameLabel, FrameLatch,
    FrameModels, MudsPolicy, PolicyConfig, PolicyError, TrainOptions,
};
use crate::sim::{
    Event, EventKind, Outcome, RobotState, RolloutLog, Scenario, Setpoint, SimError, SimWorld, Vec3,
};

pub const DEFAULT_RECORD_RATE_HZ: f64 = 10.0;
pub const SESSION_FORMAT_VERSION: u32 = 1;
/// Transitions shorter than this count as standing still.
pub const STILL_EPS: f64 = 1e-5;
const ARREST_TIMEOUT_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TeachError {
    #[error("demonstration needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("timestamps must increase strictly (sample {0})")]
    NonMonotone(usize),
    #[error("non-finite value in sample {0}")]
    NonFinite(usize),
    #[error("no demonstrations given")]
    NoDemonstrations,
    #[error("demonstration has no gripper closing, cannot split into object and goal segments")]
    NoGraspInDemo,
    #[error("invalid correction event: {0}")]
    InvalidEvent(String),
    #[error("round start refers to missing demo sample {demo}/{index}")]
    BadStart { demo: usize, index: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// One raw pose sample from the demonstration input device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub t: f64,
    pub position: Vec3,
    /// Intrinsic XYZ Euler angles, rad.
    pub orientation: [f64; 3],
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSample {
    pub t: f64,
    pub position: Vec3,
    pub sin: [f64; 3],
    pub cos: [f64; 3],
    pub width: f64,
}

impl DemoSample {
    pub fn angles6(&self) -> [f64; 6] {
        [
            self.sin[0],
            self.sin[1],
            self.sin[2],
            self.cos[0],
            self.cos[1],
            self.cos[2],
        ]
    }

    pub fn orientation(&self) -> [f64; 3] {
        [
            self.sin[0].atan2(self.cos[0]),
            self.sin[1].atan2(self.cos[1]),
            self.sin[2].atan2(self.cos[2]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub record_rate: f64,
    pub frame: FrameLabel,
    pub samples: Vec<DemoSample>,
    /// `transitions[i] = samples[i + 1].position - samples[i].position`.
    pub transitions: Vec<Vec3>,
}

impl Demonstration {
    pub fn positions(&self) -> Vec<Vec3> {
        self.samples.iter().map(|s| s.position).collect()
    }

    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// Index of the first sample where the commanded width drops below the
    /// opening width, i.e. where the gripper was told to close.
    pub fn grasp_index(&self) -> Option<usize> {
        let open = self.samples.first()?.width;
        self.samples.iter().position(|s| s.width < open - 1e-3)
    }

    pub fn validate(&self) -> Result<(), TeachError> {
        if self.samples.len() < 2 {
            return Err(TeachError::TooFewSamples(self.samples.len()));
        }
        for (i, w) in self.samples.windows(2).enumerate() {
            if w[1].t <= w[0].t {
                return Err(TeachError::NonMonotone(i + 1));
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            let unit = (0..3).all(|k| (s.sin[k].powi(2) + s.cos[k].powi(2) - 1.0).abs() < 1e-9);
            if !unit || !s.position.iter().all(|v| v.is_finite()) || !s.width.is_finite() {
                return Err(TeachError::NonFinite(i));
            }
        }
        if self.transitions.len() + 1 != self.samples.len() {
            return Err(TeachError::TooFewSamples(self.transitions.len()));
        }
        Ok(())
    }
}

/// Downsamples a raw stream to `record_rate` by nearest-sample selection.
pub fn record_demo(raw: &[RawSample], record_rate: f64) -> Result<Demonstration, TeachError> {
    if raw.len() < 2 {
        return Err(TeachError::TooFewSamples(raw.len()));
    }
    for (i, s) in raw.iter().enumerate() {
        let finite = s.t.is_finite()
            && s.width.is_finite()
            && s.position
                .iter()
                .chain(&s.orientation)
                .all(|v| v.is_finite());
        if !finite {
            return Err(TeachError::NonFinite(i));
        }
        if i > 0 && s.t <= raw[i - 1].t {
            return Err(TeachError::NonMonotone(i));
        }
    }
    let period = 1.0 / record_rate;
    let t0 = raw[0].t;
    let t_end = raw[raw.len() - 1].t;
    let mut samples: Vec<DemoSample> = Vec::new();
    let mut last_index = None;
    let mut j = 0;
    for k in 0.. {
        let tick = t0 + k as f64 * period;
        if tick > t_end + 1e-9 {
            break;
        }
        while j + 1 < raw.len() && (raw[j + 1].t - tick).abs() <= (raw[j].t - tick).abs() {
            j += 1;
        }
        if last_index == Some(j) {
            continue;
        }
        last_index = Some(j);
        let r = &raw[j];
        let sc = angles_to_sincos(&r.orientation);
        samples.push(DemoSample {
            t: r.t,
            position: r.position,
            sin: [sc[0], sc[1], sc[2]],
            cos: [sc[3], sc[4], sc[5]],
            width: r.width,
        });
    }
    if samples.len() < 2 {
        return Err(TeachError::TooFewSamples(samples.len()));
    }
    let transitions = transitions_of(&samples);
    Ok(Demonstration {
        record_rate,
        frame: FrameLabel::Global,
        samples,
        transitions,
    })
}

fn transitions_of(samples: &[DemoSample]) -> Vec<Vec3> {
    samples
        .windows(2)
        .map(|w| {
            let d = w[1].position - w[0].position;
            if d.norm() < STILL_EPS {
                Vec3::zeros()
            } else {
                d
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FrameMode {
    Global,
    TwoFrame { object: Vec3, goal: Vec3 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub policy: PolicyConfig,
    pub options: TrainOptions,
    pub frames: FrameMode,
    /// How long the object-frame segment continues past the grasp, s.
    pub overlap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            policy: PolicyConfig::default(),
            options: TrainOptions::default(),
            frames: FrameMode::Global,
            overlap: 2.0,
        }
    }
}

fn frame_data(segments: &[(&Demonstration, usize, usize)], frame: &Frame) -> FrameData {
    let mut data = FrameData {
        transition_inputs: vec![],
        transitions: vec![],
        positions: vec![],
        angles: vec![],
        widths: vec![],
    };
    for (demo, start, end) in segments {
        let s = &demo.samples[*start..*end];
        for (i, sample) in s.iter().enumerate() {
            let local = frame.to_local(&sample.position);
            data.positions.push(local);
            data.angles.push(sample.angles6());
            data.widths.push(sample.width);
            if i + 1 < s.len() {
                data.transition_inputs.push(local);
                data.transitions.push(demo.transitions[start + i]);
            }
        }
    }
    data
}

/// Fits the policy models to the demonstrations.
pub fn train_policy(
    demos: &[Demonstration],
    config: &TrainConfig,
) -> Result<MudsPolicy, TeachError> {
    if demos.is_empty() {
        return Err(TeachError::NoDemonstrations);
    }
    for d in demos {
        d.validate()?;
    }
    let models = match &config.frames {
        FrameMode::Global => {
            let frame = Frame::global();
            let segs: Vec<_> = demos.iter().map(|d| (d, 0, d.samples.len())).collect();
            vec![FrameModels::fit(
                frame.clone(),
                &frame_data(&segs, &frame),
                &config.options,
                &config.policy,
            )?]
        }
        FrameMode::TwoFrame { object, goal } => {
            let mut object_segs = Vec::new();
            let mut goal_segs = Vec::new();
            for d in demos {
                let split = d.grasp_index().ok_or(TeachError::NoGraspInDemo)?;
                let extra = (config.overlap * d.record_rate).round() as usize;
                object_segs.push((d, 0, (split + extra + 1).min(d.samples.len())));
                // Skip the pause while the gripper closes: the goal segment
                // starts at the last still sample before the lift.
                let mut start = split;
                while start + 1 < d.samples.len() && d.transitions[start] == Vec3::zeros() {
                    start += 1;
                }
                goal_segs.push((d, start, d.samples.len()));
            }
            let object_frame = Frame {
                origin: *object,
                label: FrameLabel::Object,
            };
            let goal_frame = Frame {
                origin: *goal,
                label: FrameLabel::Goal,
            };
            let mut goal_opts = config.options.clone();
            goal_opts.seed = goal_opts.seed.wrapping_add(1000);
            vec![
                FrameModels::fit(
                    object_frame.clone(),
                    &frame_data(&object_segs, &object_frame),
                    &config.options,
                    &config.policy,
                )?,
                FrameModels::fit(
                    goal_frame.clone(),
                    &frame_data(&goal_segs, &goal_frame),
                    &goal_opts,
                    &config.policy,
                )?,
            ]
        }
    };
    Ok(MudsPolicy::new(models, config.policy.clone())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionKind {
    AttractorXy,
    AttractorZ,
    ScalingIncrement,
    GripperIncrement,
    Stop,
    GotoStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionEvent {
    /// Seconds since round start.
    pub t: f64,
    pub kind: CorrectionKind,
    #[serde(default)]
    pub value: Vec<f64>,
    /// Filled in when the event is applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<Vec3>,
}

impl CorrectionEvent {
    pub fn new(t: f64, kind: CorrectionKind, value: Vec<f64>) -> Self {
        Self {
            t,
            kind,
            value,
            position: None,
        }
    }

    pub fn validate(&self) -> Result<(), TeachError> {
        let bad = |msg: &str| Err(TeachError::InvalidEvent(format!("{:?}: {msg}", self.kind)));
        let in_unit = self.value.iter().all(|v| v.is_finite() && v.abs() <= 1.0);
        match self.kind {
            CorrectionKind::AttractorXy if self.value.len() != 2 => bad("needs 2 values"),
            CorrectionKind::AttractorZ if self.value.len() != 1 => bad("needs 1 value"),
            CorrectionKind::AttractorXy | CorrectionKind::AttractorZ if !in_unit => {
                bad("deflection outside [-1, 1]")
            }
            CorrectionKind::ScalingIncrement | CorrectionKind::GripperIncrement
                if !(self.value.len() == 1 && self.value[0].abs() == 1.0) =>
            {
                bad("increment must be +1 or -1")
            }
            _ if !self.t.is_finite() => bad("non-finite time"),
            _ => Ok(()),
        }
    }

    pub fn aspect(&self) -> Option<Aspect> {
        match self.kind {
            CorrectionKind::AttractorXy | CorrectionKind::AttractorZ => Some(Aspect::Attractor),
            CorrectionKind::ScalingIncrement => Some(Aspect::Scaling),
            CorrectionKind::GripperIncrement => Some(Aspect::Gripper),
            CorrectionKind::Stop | CorrectionKind::GotoStart => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    /// Change of a local transition per second of full stick deflection, m/s.
    pub stick_rate: f64,
    /// Per-tick bound on a stick correction, m.
    pub stick_cap: f64,
    pub scaling_step: f64,
    /// Width change per gripper increment, m. Positive increments close.
    pub gripper_step: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            stick_rate: 0.02,
            stick_cap: 0.002,
            scaling_step: 0.05,
            gripper_step: 0.002,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutedCorrection {
    pub target: CorrectionTarget,
    pub channel: usize,
    pub epsilon: f64,
}

/// Maps a teacher input to corrections of individual model channels.
pub fn route_correction(
    event: &CorrectionEvent,
    routing: &RoutingConfig,
    dt: f64,
) -> Result<Vec<RoutedCorrection>, TeachError> {
    event.validate()?;
    let stick = |v: f64| (v * routing.stick_rate * dt).clamp(-routing.stick_cap, routing.stick_cap);
    let mut out = Vec::new();
    match event.kind {
        CorrectionKind::AttractorXy => {
            for (channel, v) in event.value.iter().enumerate() {
                if *v != 0.0 {
                    out.push(RoutedCorrection {
                        target: CorrectionTarget::Delta,
                        channel,
                        epsilon: stick(*v),
                    });
                }
            }
        }
        CorrectionKind::AttractorZ => {
            if event.value[0] != 0.0 {
                out.push(RoutedCorrection {
                    target: CorrectionTarget::Delta,
                    channel: 2,
                    epsilon: stick(event.value[0]),
                });
            }
        }
        CorrectionKind::ScalingIncrement => out.push(RoutedCorrection {
            target: CorrectionTarget::Gamma,
            channel: 0,
            epsilon: event.value[0] * routing.scaling_step,
        }),
        CorrectionKind::GripperIncrement => out.push(RoutedCorrection {
            target: CorrectionTarget::Width,
            channel: 0,
            epsilon: -event.value[0] * routing.gripper_step,
        }),
        CorrectionKind::Stop | CorrectionKind::GotoStart => {}
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    Attractor,
    Scaling,
    Gripper,
}

/// Seconds of teacher input per corrected aspect.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AspectSeconds {
    pub attractor: f64,
    pub scaling: f64,
    pub gripper: f64,
}

impl AspectSeconds {
    pub fn total(&self) -> f64 {
        self.attractor + self.scaling + self.gripper
    }

    fn add(&mut self, aspect: Aspect, seconds: f64) {
        match aspect {
            Aspect::Attractor => self.attractor += seconds,
            Aspect::Scaling => self.scaling += seconds,
            Aspect::Gripper => self.gripper += seconds,
        }
    }

    pub fn accumulate(&mut self, other: &AspectSeconds) {
        self.attractor += other.attractor;
        self.scaling += other.scaling;
        self.gripper += other.gripper;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "at", rename_all = "snake_case")]
pub enum RoundStart {
    /// The scenario's start pose.
    Scenario,
    /// A sample of a stored demonstration.
    DemoSample { demo: usize, index: usize },
    Pose {
        position: Vec3,
        orientation: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub start: RoundStart,
    pub seed: u64,
    /// Overrides the scenario's time limit.
    pub max_duration: Option<f64>,
}

impl RoundConfig {
    pub fn seeded(seed: u64) -> Self {
        Self {
            start: RoundStart::Scenario,
            seed,
            max_duration: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickedEvent {
    pub tick: u64,
    pub event: CorrectionEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedCorrection {
    pub tick: u64,
    pub frame: usize,
    pub target: CorrectionTarget,
    pub channel: usize,
    pub epsilon: f64,
    pub position: Vec3,
    /// Applied while the confidence gate held the robot still.
    pub arrested: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub scenario: Scenario,
    pub config: RoundConfig,
    pub events: Vec<TickedEvent>,
    pub corrections: Vec<AppliedCorrection>,
    pub aspects: AspectSeconds,
    pub log: RolloutLog,
}

impl RoundRecord {
    pub fn outcome(&self) -> Option<Outcome> {
        self.log.outcome
    }

    pub fn duration(&self) -> f64 {
        self.log.execution_time
    }
}

/// What happened during one control tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub tick: u64,
    pub t: f64,
    pub robot: RobotState,
    pub command: Option<AttractorCommand>,
    pub events: Vec<Event>,
    pub outcome: Option<Outcome>,
}

/// Supplies teacher input once per tick.
pub trait CorrectionSource {
    fn poll(&mut self, tick: u64, t: f64, robot: &RobotState) -> Vec<CorrectionEvent>;
}

pub struct NoCorrections;

impl CorrectionSource for NoCorrections {
    fn poll(&mut self, _: u64, _: f64, _: &RobotState) -> Vec<CorrectionEvent> {
        Vec::new()
    }
}

/// Replays events by timestamp: an event fires on the first tick starting at
/// or after its `t`.
#[derive(Debug, Clone)]
pub struct TimedTrace {
    events: Vec<CorrectionEvent>,
    next: usize,
}

impl TimedTrace {
    pub fn new(mut events: Vec<CorrectionEvent>) -> Self {
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Self { events, next: 0 }
    }
}

impl CorrectionSource for TimedTrace {
    fn poll(&mut self, _: u64, t: f64, _: &RobotState) -> Vec<CorrectionEvent> {
        let mut out = Vec::new();
        while self.next < self.events.len() && self.events[self.next].t <= t + 1e-9 {
            let mut e = self.events[self.next].clone();
            e.position = None;
            out.push(e);
            self.next += 1;
        }
        out
    }
}

/// Replays events at the exact ticks they were applied.
#[derive(Debug, Clone)]
pub struct TickTrace {
    events: Vec<TickedEvent>,
    next: usize,
}

impl TickTrace {
    pub fn new(events: Vec<TickedEvent>) -> Self {
        Self { events, next: 0 }
    }
}

impl CorrectionSource for TickTrace {
    fn poll(&mut self, tick: u64, _: f64, _: &RobotState) -> Vec<CorrectionEvent> {
        let mut out = Vec::new();
        while self.next < self.events.len() && self.events[self.next].tick <= tick {
            let mut e = self.events[self.next].event.clone();
            e.position = None;
            out.push(e);
            self.next += 1;
        }
        out
    }
}

/// Steps one round tick by tick so that callers can interleave I/O.
#[derive(Debug, Clone)]
pub struct RoundRunner {
    scenario: Scenario,
    config: RoundConfig,
    routing: RoutingConfig,
    world: SimWorld,
    latch: FrameLatch,
    frame: usize,
    dt: f64,
    max_duration: f64,
    start: (Vec3, [f64; 3]),
    arrested_since: Option<f64>,
    events: Vec<TickedEvent>,
    corrections: Vec<AppliedCorrection>,
    aspects: AspectSeconds,
}

impl RoundRunner {
    /// Builds the world and moves two-frame origins to the scenario's
    /// target object (the first one) and goal.
    pub fn new(
        policy: &mut MudsPolicy,
        scenario: &Scenario,
        config: &RoundConfig,
        demos: &[Demonstration],
        routing: &RoutingConfig,
    ) -> Result<Self, TeachError> {
        let mut world = SimWorld::with_seed(scenario, config.seed)?;
        let start = match &config.start {
            RoundStart::Scenario => (scenario.start.position, scenario.start.orientation),
            RoundStart::DemoSample { demo, index } => {
                let s = demos.get(*demo).and_then(|d| d.samples.get(*index)).ok_or(
                    TeachError::BadStart {
                        demo: *demo,
                        index: *index,
                    },
                )?;
                (s.position, s.orientation())
            }
            RoundStart::Pose {
                position,
                orientation,
            } => (*position, *orientation),
        };
        world.teleport(start.0, start.1);
        if policy.is_two_frame() {
            if let Some(o) = scenario.objects.first() {
                policy.set_frame_origin(FrameLabel::Object, o.position);
            }
            policy.set_frame_origin(FrameLabel::Goal, scenario.goal);
        }
        Ok(Self {
            dt: scenario.dt(),
            max_duration: config.max_duration.unwrap_or(scenario.max_duration),
            scenario: scenario.clone(),
            config: config.clone(),
            routing: routing.clone(),
            world,
            latch: FrameLatch::default(),
            frame: policy.select_frame(false),
            start,
            arrested_since: None,
            events: Vec::new(),
            corrections: Vec::new(),
            aspects: AspectSeconds::default(),
        })
    }

    pub fn world(&self) -> &SimWorld {
        &self.world
    }

    pub fn is_done(&self) -> bool {
        self.world.is_done()
    }

    pub fn active_frame(&self) -> usize {
        self.frame
    }

    /// Corrections first, then model evaluation, then the plant step.
    pub fn tick(
        &mut self,
        policy: &mut MudsPolicy,
        incoming: Vec<CorrectionEvent>,
    ) -> Result<TickReport, TeachError> {
        let first_event = self.world.log().events.len();
        let tick = self.world.tick();
        if self.world.is_done() {
            for e in incoming {
                self.world.push_event(EventKind::CorrectionDiscarded {
                    reason: format!("{:?} after round end", e.kind),
                });
            }
            return Ok(self.report(first_event, None));
        }

        let arrested = self.arrested_since.is_some();
        let mut touched: Vec<Aspect> = Vec::new();
        for mut event in incoming {
            let x = self.world.robot().position;
            event.position = Some(x);
            match event.kind {
                CorrectionKind::Stop => {
                    self.events.push(TickedEvent { tick, event });
                    self.world.push_event(EventKind::Stop);
                    self.world.finish(Outcome::Stopped);
                    return Ok(self.report(first_event, None));
                }
                CorrectionKind::GotoStart => {
                    self.events.push(TickedEvent { tick, event });
                    self.world.push_event(EventKind::GotoStart);
                    self.world.teleport(self.start.0, self.start.1);
                    self.arrested_since = None;
                    continue;
                }
                _ => {}
            }
            let routed = match route_correction(&event, &self.routing, self.dt) {
                Ok(r) => r,
                Err(e) => {
                    self.world.push_event(EventKind::CorrectionDiscarded {
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            for r in routed {
                match policy.apply_correction(self.frame, r.target, &x, r.channel, r.epsilon) {
                    Ok(()) => {
                        self.world.push_event(EventKind::Correction {
                            aspect: format!("{:?}", event.kind),
                            target: r.target.name().to_string(),
                            channel: r.channel,
                            epsilon: r.epsilon,
                            arrested,
                        });
                        self.corrections.push(AppliedCorrection {
                            tick,
                            frame: self.frame,
                            target: r.target,
                            channel: r.channel,
                            epsilon: r.epsilon,
                            position: x,
                            arrested,
                        });
                    }
                    Err(e) => self.world.push_event(EventKind::CorrectionDiscarded {
                        reason: e.to_string(),
                    }),
                }
            }
            if let Some(a) = event.aspect() {
                if !touched.contains(&a) {
                    touched.push(a);
                }
            }
            self.events.push(TickedEvent { tick, event });
        }
        // A tick shared by several aspects is split between them.
        for a in &touched {
            self.aspects.add(*a, self.dt / touched.len() as f64);
        }

        let x = self.world.robot().position;
        let frame =
            policy.select_frame(self.latch.update(self.world.robot().held_object.is_some()));
        if frame != self.frame {
            self.frame = frame;
            let variance = policy.variance(frame, &x)?;
            self.world.push_event(EventKind::FrameSwitch {
                label: format!("{:?}", policy.frame_models(frame)?.frame.label),
                variance,
            });
        }
        let stiffness = self.scenario.plant.stiffness;
        let cmd = policy.compute_attractor(frame, &x, &stiffness)?;
        let now = self.world.time();
        if cmd.confidence_ok {
            if self.arrested_since.take().is_some() {
                self.world.push_event(EventKind::GateRelease);
            }
        } else {
            if self.arrested_since.is_none() {
                self.arrested_since = Some(now);
                self.world.push_event(EventKind::GateArrest {
                    variance: cmd.diagnostics.variance,
                });
            }
        }
        self.world.command_gripper(cmd.w_des, now);
        self.world.step(
            &Setpoint {
                position: cmd.x_des,
                orientation: cmd.theta_des,
            },
            self.dt,
        )?;
        let t = self.world.time();
        if let Some(since) = self.arrested_since {
            if t - since > ARREST_TIMEOUT_S {
                self.world.finish(Outcome::Arrested);
            }
        }
        if t >= self.max_duration - 1e-9 {
            self.world.finish(Outcome::Timeout);
        }
        Ok(self.report(first_event, Some(cmd)))
    }

    fn report(&self, first_event: usize, command: Option<AttractorCommand>) -> TickReport {
        TickReport {
            tick: self.world.tick(),
            t: self.world.time(),
            robot: self.world.robot().clone(),
            command,
            events: self.world.log().events[first_event..].to_vec(),
            outcome: self.world.outcome(),
        }
    }

    /// Runs to completion, pulling input from `source` every tick.
    pub fn run(
        &mut self,
        policy: &mut MudsPolicy,
        source: &mut dyn CorrectionSource,
    ) -> Result<(), TeachError> {
        while !self.is_done() {
            let events = source.poll(self.world.tick(), self.world.time(), self.world.robot());
            self.tick(policy, events)?;
        }
        Ok(())
    }

    pub fn into_record(mut self) -> RoundRecord {
        if !self.world.is_done() {
            self.world.finish(Outcome::Stopped);
        }
        RoundRecord {
            scenario: self.scenario,
            config: self.config,
            events: self.events,
            corrections: self.corrections,
            aspects: self.aspects,
            log: self.world.into_log(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timers {
    pub demo: f64,
    pub feedback: f64,
    pub total: f64,
}

/// Demonstrations, the policy before and after teaching, and every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSession {
    pub format_version: u32,
    pub demos: Vec<Demonstration>,
    pub train_config: TrainConfig,
    pub routing: RoutingConfig,
    pub initial_policy: MudsPolicy,
    pub policy: MudsPolicy,
    pub rounds: Vec<RoundRecord>,
    pub timers: Timers,
}

impl TrainingSession {
    pub fn train(demos: Vec<Demonstration>, config: TrainConfig) -> Result<Self, TeachError> {
        let policy = train_policy(&demos, &config)?;
        let demo_time = demos.iter().map(Demonstration::duration).sum();
        Ok(Self {
            format_version: SESSION_FORMAT_VERSION,
            demos,
            train_config: config,
            routing: RoutingConfig::default(),
            initial_policy: policy.clone(),
            policy,
            rounds: Vec::new(),
            timers: Timers {
                demo: demo_time,
                feedback: 0.0,
                total: demo_time,
            },
        })
    }

    pub fn runner(
        &mut self,
        scenario: &Scenario,
        config: &RoundConfig,
    ) -> Result<RoundRunner, TeachError> {
        RoundRunner::new(
            &mut self.policy,
            scenario,
            config,
            &self.demos,
            &self.routing,
        )
    }

    /// Files a finished round and updates the timers.
    pub fn record_round(&mut self, record: RoundRecord) -> &RoundRecord {
        self.timers.feedback += record.aspects.total();
        self.timers.total += record.duration();
        self.rounds.push(record);
        self.rounds.last().expect("just pushed")
    }

    pub fn run_round(
        &mut self,
        scenario: &Scenario,
        config: &RoundConfig,
        source: &mut dyn CorrectionSource,
    ) -> Result<&RoundRecord, TeachError> {
        let mut runner = self.runner(scenario, config)?;
        runner.run(&mut self.policy, source)?;
        Ok(self.record_round(runner.into_record()))
    }

    /// Re-runs every round from the initial policy with the recorded input.
    pub fn replay(&self) -> Result<MudsPolicy, TeachError> {
        let mut policy = self.initial_policy.clone();
        for round in &self.rounds {
            let mut runner = RoundRunner::new(
                &mut policy,
                &round.scenario,
                &round.config,
                &self.demos,
                &self.routing,
            )?;
            let mut trace = TickTrace::new(round.events.clone());
            runner.run(&mut policy, &mut trace)?;
        }
        Ok(policy)
    }
}
