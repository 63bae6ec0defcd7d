//! Reference implementations used as test oracles. They share no code with
//! the library beyond plain data types.

#![allow(dead_code)]

use nalgebra::DMatrix;
use pickteach::experiment::{demo_targets, speed_up_rules, ScriptedTeacher, SPEED_UP_ROUNDS};
use pickteach::gp::{Bounds, GpModel, Hyperparameters};
use pickteach::scenario::{bundled, default_train_config};
use pickteach::sim::{Scenario, Vec3};
use pickteach::teaching::{
    record_demo, Demonstration, RawSample, RoundConfig, TrainingSession, DEFAULT_RECORD_RATE_HZ,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Squared-exponential kernel with per-axis inverse squared lengthscales.
pub fn se(a: &[f64], b: &[f64], sf: f64, theta: &[f64]) -> f64 {
    let mut d = 0.0;
    for i in 0..a.len() {
        d += theta[i] * (a[i] - b[i]).powi(2);
    }
    sf * sf * (-0.5 * d).exp()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| a[x][c].abs().partial_cmp(&a[y][c].abs()).unwrap())
            .unwrap();
        a.swap(c, p);
        let piv = a[c][c];
        for v in a[c].iter_mut() {
            *v /= piv;
        }
        let pivot_row = a[c].clone();
        for (r, row) in a.iter_mut().enumerate() {
            let f = row[c];
            if r != c && f != 0.0 {
                for (v, p) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Posterior mean per channel and predictive variance by direct inversion.
pub fn dense_posterior(
    inputs: &[Vec<f64>],
    outputs: &[Vec<f64>],
    sf: f64,
    theta: &[f64],
    sn: f64,
    x: &[f64],
) -> (Vec<f64>, f64) {
    let n = inputs.len();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| se(&inputs[i], &inputs[j], sf, theta) + if i == j { sn * sn } else { 0.0 })
                .collect()
        })
        .collect();
    let kinv = invert(&k);
    let ks: Vec<f64> = inputs.iter().map(|xi| se(xi, x, sf, theta)).collect();
    let w: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| kinv[i][j] * ks[j]).sum())
        .collect();
    let m = outputs[0].len();
    let mean = (0..m)
        .map(|c| (0..n).map(|i| w[i] * outputs[i][c]).sum())
        .collect();
    let var = sf * sf + sn * sn - (0..n).map(|i| w[i] * ks[i]).sum::<f64>();
    (mean, var)
}

pub struct Instance {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub sf: f64,
    pub theta: Vec<f64>,
    pub sn: f64,
}

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(1..=20);
        let d = rng.random_range(1..=3);
        let m = rng.random_range(1..=6);
        let inputs = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let outputs = (0..n)
            .map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let theta = (0..d)
            .map(|_| {
                let l: f64 = rng.random_range(0.2..1.5);
                1.0 / (l * l)
            })
            .collect();
        Self {
            inputs,
            outputs,
            sf: rng.random_range(0.3..2.0),
            theta,
            sn: rng.random_range(0.05..0.5),
        }
    }

    pub fn model(&self) -> GpModel {
        let d = self.theta.len();
        let to_m =
            |rows: &[Vec<f64>]| DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
        GpModel::new(
            to_m(&self.inputs),
            to_m(&self.outputs),
            Hyperparameters::new(self.sf, self.theta.clone(), self.sn).unwrap(),
            Bounds::from_lengthscales((1e-3, 10.0), (0.01, 10.0), d, (0.0, 1.0)),
        )
        .unwrap()
    }

    pub fn query(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.theta.len())
            .map(|_| rng.random_range(-1.5..1.5))
            .collect()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Critically damped response from rest at `x0` toward `target`.
pub fn critically_damped(x0: f64, target: f64, omega: f64, t: f64) -> f64 {
    target + (x0 - target) * (1.0 + omega * t) * (-omega * t).exp()
}

/// The slow bundled demo taught faster over several reactive teacher rounds.
pub fn speed_up_session() -> (TrainingSession, Demonstration, Scenario) {
    let (scenario, script) = bundled("slow-pick-place").unwrap();
    let demo = script.record(DEFAULT_RECORD_RATE_HZ).unwrap();
    let (grasp, drop) = demo_targets(&demo);
    let mut session =
        TrainingSession::train(vec![demo.clone()], default_train_config(&scenario, false)).unwrap();
    for round in 0..SPEED_UP_ROUNDS {
        let mut teacher = ScriptedTeacher::new(speed_up_rules(), grasp, drop);
        session
            .run_round(&scenario, &RoundConfig::seeded(100 + round), &mut teacher)
            .unwrap();
    }
    (session, demo, scenario)
}

/// A 100 Hz stream moving at constant speed through `waypoints`, with
/// orientation and gripper width given per arc length fraction.
pub fn path_raw(
    waypoints: &[Vec3],
    speed: f64,
    orientation: impl Fn(f64) -> [f64; 3],
    width: impl Fn(f64) -> f64,
) -> Vec<RawSample> {
    let lengths: Vec<f64> = waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    let total: f64 = lengths.iter().sum();
    let n = (total / speed * 100.0).round() as usize;
    (0..=n)
        .map(|k| {
            let mut s = total * k as f64 / n as f64;
            let frac = s / total;
            let mut seg = 0;
            while seg + 1 < lengths.len() && s > lengths[seg] {
                s -= lengths[seg];
                seg += 1;
            }
            let a = waypoints[seg];
            let b = waypoints[seg + 1];
            RawSample {
                t: k as f64 * 0.01,
                position: a + (b - a) * (s / lengths[seg]).min(1.0),
                orientation: orientation(frac),
                width: width(frac),
            }
        })
        .collect()
}

/// Straight demo along +x at 5 cm/s, gripper down, open.
pub fn line_demo(from: Vec3, length: f64) -> Demonstration {
    let raw = path_raw(
        &[from, from + Vec3::new(length, 0.0, 0.0)],
        0.05,
        |_| [0.0, 0.0, std::f64::consts::FRAC_PI_2],
        |_| 0.08,
    );
    record_demo(&raw, DEFAULT_RECORD_RATE_HZ).unwrap()
}
