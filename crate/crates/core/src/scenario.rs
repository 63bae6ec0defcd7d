//! Bundled scenarios and scripted demonstrations.
//!
//! A [`DemoScript`] stands in for a kinesthetic demonstration: straight moves
//! at constant speed, pauses and gripper commands, sampled like a 100 Hz
//! teaching device would stream them.

use serde::{Deserialize, Serialize};

use crate::policy::PolicyConfig;
use crate::sim::{GripperParams, ImpedanceParams, Scenario, SimObject, StartPose, Vec3};
use crate::teaching::{record_demo, Demonstration, FrameMode, RawSample, TeachError, TrainConfig};

pub const DEVICE_RATE_HZ: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum DemoStep {
    Move {
        to: Vec3,
        speed: f64,
    },
    /// Quarter-ish circular arc in the horizontal plane around `center`,
    /// sweeping `angle` radians (positive = counter-clockwise).
    Arc {
        center: Vec3,
        angle: f64,
        speed: f64,
    },
    Pause {
        seconds: f64,
    },
    Gripper {
        width: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoScript {
    pub start: Vec3,
    /// Width of the moving-average window rounding corners and speed
    /// changes the way a hand-guided motion would, s.
    #[serde(default)]
    pub smoothing: f64,
    pub orientation: [f64; 3],
    pub open_width: f64,
    pub steps: Vec<DemoStep>,
}

impl DemoScript {
    /// Samples the scripted motion at `rate` Hz.
    pub fn raw(&self, rate: f64) -> Vec<RawSample> {
        let dt = 1.0 / rate;
        let mut out = Vec::new();
        let mut t = 0.0;
        let mut pos = self.start;
        let mut width = self.open_width;
        let push = |t: f64, p: Vec3, w: f64, out: &mut Vec<RawSample>| {
            out.push(RawSample {
                t,
                position: p,
                orientation: self.orientation,
                width: w,
            })
        };
        push(t, pos, width, &mut out);
        for step in &self.steps {
            match step {
                DemoStep::Move { to, speed } => {
                    let from = pos;
                    let duration = (to - from).norm() / speed;
                    let n = (duration / dt).round().max(1.0) as usize;
                    for k in 1..=n {
                        t += dt;
                        pos = from + (to - from) * (k as f64 / n as f64);
                        push(t, pos, width, &mut out);
                    }
                }
                DemoStep::Arc {
                    center,
                    angle,
                    speed,
                } => {
                    let r0 = pos - center;
                    let radius = (r0.x * r0.x + r0.y * r0.y).sqrt();
                    let phi0 = r0.y.atan2(r0.x);
                    let duration = radius * angle.abs() / speed;
                    let n = (duration / dt).round().max(1.0) as usize;
                    for k in 1..=n {
                        t += dt;
                        let phi = phi0 + angle * k as f64 / n as f64;
                        pos = Vec3::new(
                            center.x + radius * phi.cos(),
                            center.y + radius * phi.sin(),
                            pos.z,
                        );
                        push(t, pos, width, &mut out);
                    }
                }
                DemoStep::Pause { seconds } => {
                    let n = (seconds / dt).round() as usize;
                    for _ in 0..n {
                        t += dt;
                        push(t, pos, width, &mut out);
                    }
                }
                DemoStep::Gripper { width: w } => width = *w,
            }
        }
        let half = (self.smoothing * rate / 2.0).round() as usize;
        if half > 0 {
            let raw: Vec<Vec3> = out.iter().map(|s| s.position).collect();
            let n = raw.len();
            for (i, s) in out.iter_mut().enumerate() {
                let k = half.min(i).min(n - 1 - i);
                let sum: Vec3 = raw[i - k..=i + k].iter().sum();
                s.position = sum / (2 * k + 1) as f64;
            }
        }
        out
    }

    pub fn record(&self, record_rate: f64) -> Result<Demonstration, TeachError> {
        record_demo(&self.raw(DEVICE_RATE_HZ), record_rate)
    }
}

/// Height of the end effector while grasping, above the object base.
pub const GRASP_HEIGHT: f64 = 0.1;

/// A gripper-down orientation (yaw a quarter turn).
pub const GRIPPER_DOWN: [f64; 3] = [std::f64::consts::PI, 0.0, std::f64::consts::FRAC_PI_2];

fn base_scenario(name: &str, object: SimObject, goal: Vec3, start: Vec3) -> Scenario {
    Scenario {
        name: name.into(),
        objects: vec![object],
        goal,
        goal_tolerance: 0.03,
        release_height: 0.15,
        plant: ImpedanceParams::default(),
        gripper: GripperParams::default(),
        start: StartPose {
            position: start,
            orientation: GRIPPER_DOWN,
        },
        control_rate: 100.0,
        max_duration: 60.0,
        max_angular_rate: 3.0,
        payload_compensation: 1.0,
        seed: 0,
    }
}

/// Straight-segment pick and place taught slowly, used for speed-up rounds.
pub fn slow_pick_place() -> (Scenario, DemoScript) {
    let object = Vec3::new(0.45, 0.0, 0.0);
    let goal = Vec3::new(0.45, 0.35, 0.0);
    let start = Vec3::new(0.15, -0.2, 0.3);
    let scenario = base_scenario(
        "slow-pick-place",
        SimObject::rigid_250g(object),
        goal,
        start,
    );
    let script = pick_place_script(start, object, goal, 0.05, 0.03, |to, speed| {
        vec![DemoStep::Move { to, speed }]
    });
    (scenario, script)
}

/// Pick and place with curved free-flight segments.
pub fn curved_pick_place() -> (Scenario, DemoScript) {
    let object = Vec3::new(0.45, 0.0, 0.0);
    let goal = Vec3::new(0.15, 0.35, 0.0);
    let start = Vec3::new(0.15, -0.25, 0.3);
    let scenario = base_scenario(
        "curved-pick-place",
        SimObject::rigid_250g(object),
        goal,
        start,
    );
    let h = GRASP_HEIGHT;
    let contact = object.x - 0.03;
    let speed = 0.1;
    let mut steps = vec![
        DemoStep::Move {
            to: Vec3::new(0.15, -0.25, h),
            speed,
        },
        // sweep around toward the object, ending on the approach line
        DemoStep::Arc {
            center: Vec3::new(0.15, 0.0, h),
            angle: std::f64::consts::FRAC_PI_2,
            speed,
        },
        DemoStep::Move {
            to: Vec3::new(contact, 0.0, h),
            speed: 0.05,
        },
        DemoStep::Gripper { width: 0.0 },
        DemoStep::Move {
            to: Vec3::new(contact + 0.04, 0.0, h),
            speed: 0.02,
        },
        DemoStep::Move {
            to: Vec3::new(contact + 0.04, 0.0, h + 0.1),
            speed: 0.05,
        },
        DemoStep::Arc {
            center: Vec3::new(goal.x - 0.03, 0.0, h + 0.1),
            angle: std::f64::consts::FRAC_PI_2,
            speed,
        },
    ];
    steps.extend(lower_and_open(Vec3::new(goal.x - 0.03, goal.y, h), 0.05));
    (
        scenario,
        DemoScript {
            start,
            smoothing: 0.4,
            orientation: GRIPPER_DOWN,
            open_width: 0.08,
            steps,
        },
    )
}

/// Lowers onto `place`, opening the gripper on the last few centimetres so
/// the open width is taught over a stretch of positions.
fn lower_and_open(place: Vec3, speed: f64) -> Vec<DemoStep> {
    vec![
        DemoStep::Move {
            to: place + Vec3::new(0.0, 0.0, 0.03),
            speed,
        },
        DemoStep::Gripper { width: 0.08 },
        DemoStep::Move { to: place, speed },
        DemoStep::Pause { seconds: 2.0 },
    ]
}

/// Approach along +x, push through the grasp, lift, carry, lower and open.
///
/// `travel` builds the free-flight legs; `speed` is used for them and
/// `approach` for the final approach.
pub fn pick_place_script(
    start: Vec3,
    object: Vec3,
    goal: Vec3,
    speed: f64,
    approach: f64,
    travel: impl Fn(Vec3, f64) -> Vec<DemoStep>,
) -> DemoScript {
    let h = object.z + GRASP_HEIGHT;
    let contact = object.x - 0.03;
    let carry = h + 0.1;
    let mut steps = travel(Vec3::new(contact - 0.12, object.y, h), speed);
    steps.push(DemoStep::Move {
        to: Vec3::new(contact, object.y, h),
        speed: approach,
    });
    steps.push(DemoStep::Gripper { width: 0.0 });
    steps.push(DemoStep::Move {
        to: Vec3::new(contact + 0.04, object.y, h),
        speed: 0.02,
    });
    steps.push(DemoStep::Move {
        to: Vec3::new(contact + 0.04, object.y, carry),
        speed,
    });
    // The object rides 3 cm ahead of the end effector.
    let drop_xy = Vec3::new(goal.x - 0.03, goal.y, 0.0);
    steps.extend(travel(Vec3::new(drop_xy.x, drop_xy.y, carry), speed));
    steps.extend(lower_and_open(
        Vec3::new(drop_xy.x, drop_xy.y, goal.z + GRASP_HEIGHT),
        approach,
    ));
    DemoScript {
        start,
        smoothing: 0.4,
        orientation: GRIPPER_DOWN,
        open_width: 0.08,
        steps,
    }
}

/// Training setup used with the bundled scenarios.
pub fn default_train_config(scenario: &Scenario, two_frame: bool) -> TrainConfig {
    let frames = if two_frame {
        FrameMode::TwoFrame {
            object: scenario.objects[0].position,
            goal: scenario.goal,
        }
    } else {
        FrameMode::Global
    };
    TrainConfig {
        policy: PolicyConfig::default(),
        frames,
        ..TrainConfig::default()
    }
}

/// Looks up a bundled scenario and its demonstration script by name.
pub fn bundled(name: &str) -> Option<(Scenario, DemoScript)> {
    match name {
        "slow-pick-place" => Some(slow_pick_place()),
        "curved-pick-place" => Some(curved_pick_place()),
        _ => None,
    }
}

pub const BUNDLED: [&str; 2] = ["slow-pick-place", "curved-pick-place"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripts_record_cleanly() {
        for name in BUNDLED {
            let (_, script) = bundled(name).unwrap();
            let demo = script.record(10.0).unwrap();
            demo.validate().unwrap();
            assert!(demo.grasp_index().is_some(), "{name}");
            assert!(demo.samples.last().unwrap().width > 0.07);
        }
    }

    #[test]
    fn move_speed_is_respected() {
        let script = DemoScript {
            start: Vec3::zeros(),
            smoothing: 0.0,
            orientation: [0.0; 3],
            open_width: 0.08,
            steps: vec![DemoStep::Move {
                to: Vec3::new(0.3, 0.0, 0.0),
                speed: 0.1,
            }],
        };
        let raw = script.raw(100.0);
        assert_eq!(raw.len(), 301);
        assert!((raw.last().unwrap().t - 3.0).abs() < 1e-9);
    }
}
