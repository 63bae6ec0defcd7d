//! Acceptance checks, one line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use pickteach::experiment::{rollout, run_experiment, ExperimentSpec};
use pickteach::persist;
use pickteach::scenario::{bundled, default_train_config};
use pickteach::sim::{DelayDistribution, ImpedanceParams, Outcome, Setpoint, SimWorld, Vec3};
use pickteach::teaching::{RoundConfig, TrainingSession, DEFAULT_RECORD_RATE_HZ};
use rand::Rng;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gp_oracle() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = rng(11);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let inst = Instance::random(&mut rng);
        let model = inst.model();
        for _ in 0..10 {
            let x = inst.query(&mut rng);
            let got = model.predict(&x).map_err(|e| e.to_string())?;
            let (mean, var) = dense_posterior(
                &inst.inputs,
                &inst.outputs,
                inst.sf,
                &inst.theta,
                inst.sn,
                &x,
            );
            for (a, b) in got.mean.iter().zip(&mean) {
                worst = worst.max((a - b).abs());
            }
            worst = worst.max((got.variance - var).abs());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-8, || format!("max abs error {worst:e}"))?;
    ensure(elapsed < 1.0, || format!("took {elapsed:.2} s"))?;
    Ok(format!(
        "max abs error {worst:.1e} over 50 instances in {elapsed:.3} s"
    ))
}

fn gradient_check() -> Result<String, String> {
    let mut rng = rng(12);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let inst = Instance::random(&mut rng);
        let model = inst.model();
        for _ in 0..100 {
            let x = inst.query(&mut rng);
            let g = model.variance_gradient(&x).map_err(|e| e.to_string())?;
            let mut err = 0.0;
            for d in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[d] += h;
                xm[d] -= h;
                let fd = (model.predict(&xp).unwrap().variance
                    - model.predict(&xm).unwrap().variance)
                    / (2.0 * h);
                err += (fd - g[d]).powi(2);
            }
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            // relative, with an absolute floor for vanishing gradients
            let rel = err.sqrt() / norm.max(1e-4);
            worst = worst.max(rel);
        }
    }
    ensure(worst <= 1e-5, || format!("worst relative error {worst:e}"))?;
    Ok(format!("worst relative error {worst:.1e} over 5000 points"))
}

fn correction_semantics() -> Result<String, String> {
    let mut rng = rng(13);
    for _ in 0..20 {
        let inst = Instance::random(&mut rng);
        let mut model = inst.model();
        let i = rng.random_range(0..inst.inputs.len());
        let c = rng.random_range(0..inst.outputs[0].len());
        let eps = rng.random_range(-0.01..0.01);
        let probes: Vec<Vec<f64>> = (0..100).map(|_| inst.query(&mut rng)).collect();
        let before: Vec<f64> = probes
            .iter()
            .map(|p| model.predict(p).unwrap().variance)
            .collect();
        let y0 = model.outputs()[(i, c)];
        model
            .apply_correction(&inst.inputs[i], c, eps)
            .map_err(|e| e.to_string())?;
        let dy = model.outputs()[(i, c)] - y0;
        ensure((dy - eps).abs() <= 1e-15 * (1.0 + y0.abs()), || {
            format!("output moved by {dy}, expected {eps}")
        })?;
        for (p, v0) in probes.iter().zip(&before) {
            let v1 = model.predict(p).unwrap().variance;
            ensure((v1 - v0).abs() <= 1e-12, || {
                format!("variance moved by {:e}", v1 - v0)
            })?;
        }
    }
    Ok("20 instances, 100 probes each".into())
}

fn mu_non_extrapolation() -> Result<String, String> {
    let (scenario, script) = bundled("curved-pick-place").unwrap();
    let demo = script.record(DEFAULT_RECORD_RATE_HZ).unwrap();
    let session =
        TrainingSession::train(vec![demo.clone()], default_train_config(&scenario, false))
            .map_err(|e| e.to_string())?;
    let policy = &session.policy;
    let fm = policy.frame_models(0).map_err(|e| e.to_string())?;
    let width_model = &fm.gp_width;
    let angle_model = &fm.gp_angles;
    let nearest = |model: &pickteach::gp::GpModel, x: &Vec3| {
        let theta = &model.hyperparameters().inv_sq_lengthscales;
        (0..model.len())
            .min_by(|&a, &b| {
                let d = |i: usize| {
                    let r = model.input(i);
                    (0..3)
                        .map(|k| theta[k] * (r[k] - x[k]).powi(2))
                        .sum::<f64>()
                };
                d(a).partial_cmp(&d(b)).unwrap()
            })
            .unwrap()
    };
    let mut rng = rng(14);
    let (mut queries, mut closed, mut open) = (0, 0, 0);
    while queries < 1000 {
        let x = Vec3::new(
            rng.random_range(-1.0..1.5),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.5..1.0),
        );
        if demo.samples.iter().any(|s| (s.position - x).norm() < 0.1) {
            continue;
        }
        queries += 1;
        let w = policy.infer_gripper(0, &x).map_err(|e| e.to_string())?;
        let i = nearest(width_model, &x);
        let expected =
            width_model.predict_at_index(i).unwrap().mean[0].clamp(0.0, policy.config.w_max);
        ensure(w.to_bits() == expected.to_bits(), || {
            format!("width {w} at {x:?} is not the mean at input {i}")
        })?;
        // the nearest taught width decides open or closed, never the prior
        let data_w = width_model.output(i)[0];
        let half = 0.5 * policy.config.w_max;
        if data_w < 0.01 {
            closed += 1;
            ensure(w < half, || {
                format!("opened to {w} where the demo is closed")
            })?;
        } else if data_w > 0.07 {
            open += 1;
            ensure(w > half, || format!("closed to {w} where the demo is open"))?;
        }
        let th = policy.infer_orientation(0, &x).map_err(|e| e.to_string())?;
        let j = nearest(angle_model, &x);
        let sc = angle_model.predict_at_index(j).unwrap().mean;
        for k in 0..3 {
            let e = sc[k].atan2(sc[k + 3]);
            ensure(th[k].to_bits() == e.to_bits(), || {
                format!("angle {k} is not the mean at input {j}")
            })?;
        }
    }
    ensure(closed > 0 && open > 0, || {
        format!("query set too narrow: {closed} closed, {open} open")
    })?;
    Ok(format!(
        "1000 queries ({closed} nearest closed, {open} nearest open)"
    ))
}

fn plant_closed_form() -> Result<String, String> {
    let (mut scenario, _) = bundled("curved-pick-place").unwrap();
    scenario.objects.clear();
    scenario.plant = ImpedanceParams::default();
    scenario.payload_compensation = 1.0;
    let omega = scenario.plant.natural_frequency();
    let x0 = Vec3::new(0.2, -0.1, 0.3);
    let target = Vec3::new(0.35, 0.05, 0.2);
    let mut world = SimWorld::new(&scenario).map_err(|e| e.to_string())?;
    world.teleport(x0, scenario.start.orientation);
    let setpoint = Setpoint {
        position: target,
        orientation: scenario.start.orientation,
    };
    let dt = scenario.dt();
    let (mut worst, mut overshoot): (f64, f64) = (0.0, 0.0);
    for k in 1..=300 {
        world.step(&setpoint, dt).map_err(|e| e.to_string())?;
        let t = k as f64 * dt;
        let p = world.robot().position;
        for a in 0..3 {
            let expected = critically_damped(x0[a], target[a], omega[a], t);
            worst = worst.max((p[a] - expected).abs());
            let past = (p[a] - target[a]) * (x0[a] - target[a]).signum();
            overshoot = overshoot.max(-past);
        }
    }
    ensure(worst <= 1e-4, || format!("max deviation {worst:e} m"))?;
    ensure(overshoot < 1e-6, || format!("overshoot {overshoot:e} m"))?;
    Ok(format!(
        "max deviation {worst:.1e} m, overshoot {overshoot:.1e} m"
    ))
}

fn delay_audit() -> Result<String, String> {
    let (scenario, _) = bundled("curved-pick-place").unwrap();
    let mut world = SimWorld::with_seed(&scenario, 21).map_err(|e| e.to_string())?;
    let d: DelayDistribution = scenario.gripper.delay.clone();
    let samples: Vec<f64> = (0..1000).map(|_| world.sample_delay()).collect();
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(*v), b.max(*v))
        });
    let mean = samples.iter().sum::<f64>() / 1000.0;
    ensure(lo >= 0.56 && hi <= 1.54, || format!("range [{lo}, {hi}]"))?;
    ensure((mean - 0.93).abs() <= 0.03, || format!("mean {mean}"))?;
    ensure(d.min == 0.56 && d.max == 1.54, || {
        "configured bounds differ".into()
    })?;
    Ok(format!(
        "1000 samples in [{lo:.3}, {hi:.3}] s, mean {mean:.3} s"
    ))
}

fn ablation() -> Result<String, String> {
    let start = Instant::now();
    let report = run_experiment(&ExperimentSpec::ablation(20, 7)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut lines = Vec::new();
    for condition in ["unperturbed", "perturbed"] {
        let with = report
            .cell(&format!("w/ UM {condition}"))
            .ok_or("missing cell")?;
        let without = report
            .cell(&format!("w/o UM {condition}"))
            .ok_or("missing cell")?;
        ensure(with.rollouts == 20 && without.rollouts == 20, || {
            "expected 20 rollouts per cell".into()
        })?;
        let margin = with.success_rate - without.success_rate;
        let (a, b) = (
            with.ade.as_ref().unwrap().mean,
            without.ade.as_ref().unwrap().mean,
        );
        let ade_gain = 1.0 - a / b;
        ensure(margin >= 0.2, || {
            format!("{condition}: success margin {margin:.2}")
        })?;
        ensure(ade_gain >= 0.3, || {
            format!("{condition}: ADE reduction {ade_gain:.2}")
        })?;
        lines.push(format!(
            "{condition} {:.0}%/{a:.4} m vs {:.0}%/{b:.4} m",
            100.0 * with.success_rate,
            100.0 * without.success_rate
        ));
    }
    ensure(elapsed < 120.0, || format!("took {elapsed:.1} s"))?;
    Ok(format!("{}; {elapsed:.1} s", lines.join(", ")))
}

fn speed_up() -> Result<String, String> {
    let (session, demo, scenario) = speed_up_session();
    // the archive is the recorded trace; the rollout uses the replayed policy
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("speed-up.session");
    persist::save(&session, &path).map_err(|e| e.to_string())?;
    let archive: TrainingSession = persist::load(&path).map_err(|e| e.to_string())?;
    let policy = archive.replay().map_err(|e| e.to_string())?;
    let rec = rollout(&policy, &scenario, &RoundConfig::seeded(999)).map_err(|e| e.to_string())?;
    let (t, demo_t) = (rec.duration(), demo.duration());
    ensure(rec.outcome() == Some(Outcome::Success), || {
        format!("outcome {:?}", rec.outcome())
    })?;
    ensure(3.0 * t <= demo_t, || {
        format!("{t:.2} s vs demo {demo_t:.2} s")
    })?;
    let presses = archive.rounds.iter().map(|r| r.events.len()).sum::<usize>();
    Ok(format!(
        "{t:.2} s vs demo {demo_t:.2} s ({:.1}x) after {presses} recorded presses",
        demo_t / t
    ))
}

fn frame_generalization() -> Result<String, String> {
    let report =
        run_experiment(&ExperimentSpec::frame_generalization(20, 7)).map_err(|e| e.to_string())?;
    let outcomes: Vec<Option<Outcome>> = report.records.iter().map(|r| r.outcome).collect();
    ensure(outcomes.len() == 20, || "expected 20 placements".into())?;
    ensure(!outcomes.contains(&Some(Outcome::Toppled)), || {
        "a placement toppled the object".into()
    })?;
    let unsafe_count = outcomes
        .iter()
        .filter(|o| !o.is_some_and(Outcome::is_safe))
        .count();
    ensure(unsafe_count == 0, || {
        format!("{unsafe_count} unsafe failures: {outcomes:?}")
    })?;
    let ok = outcomes
        .iter()
        .filter(|o| matches!(o, Some(Outcome::Success | Outcome::Arrested)))
        .count();
    let success = outcomes
        .iter()
        .filter(|o| **o == Some(Outcome::Success))
        .count();
    ensure(ok >= 15, || format!("only {ok} of 20"))?;
    Ok(format!(
        "{ok}/20 safe ({success} Success, {} Arrested), none toppled",
        ok - success
    ))
}

fn replay_determinism() -> Result<String, String> {
    let (session, _, _) = speed_up_session();
    let live = persist::to_bytes(&session.policy);
    let reloaded: TrainingSession =
        persist::from_bytes(&persist::to_bytes(&session)).map_err(|e| e.to_string())?;
    let replayed = persist::to_bytes(&reloaded.replay().map_err(|e| e.to_string())?);
    ensure(replayed == live, || {
        "replayed policy differs from the live one".into()
    })?;
    let again = persist::to_bytes(&reloaded.replay().map_err(|e| e.to_string())?);
    ensure(again == replayed, || "two replays differ".into())?;
    Ok(format!(
        "{} rounds, {} policy bytes identical",
        session.rounds.len(),
        live.len()
    ))
}

fn main() {
    let checks: [(&str, Check); 10] = [
        ("GP oracle equivalence", gp_oracle),
        ("Variance gradient check", gradient_check),
        ("Correction semantics", correction_semantics),
        ("MU inference non-extrapolation", mu_non_extrapolation),
        ("Critically damped plant", plant_closed_form),
        ("Gripper delay audit", delay_audit),
        ("Uncertainty-minimization ablation", ablation),
        ("Speed-up via corrections", speed_up),
        ("Frame generalization", frame_generalization),
        ("Replay determinism", replay_determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", 10 - failed, 10);
    if failed > 0 {
        std::process::exit(1);
    }
}
