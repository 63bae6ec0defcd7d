mod common;

use std::f64::consts::PI;

use common::*;
use pickteach::experiment::rollout;
use pickteach::persist;
use pickteach::scenario::{bundled, default_train_config};
use pickteach::sim::{EventKind, Outcome, Vec3};
use pickteach::teaching::{
    record_demo, route_correction, train_policy, CorrectionEvent, CorrectionKind, NoCorrections,
    RawSample, RoundConfig, RoundRunner, RoundStart, RoutingConfig, TimedTrace, TrainConfig,
    TrainingSession, DEFAULT_RECORD_RATE_HZ,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recorded_demos_keep_their_invariants(
        n in 20usize..400,
        jitter in 0.0f64..0.002,
        yaw0 in -PI..PI,
        yaw_rate in -2.0f64..2.0,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut r = rng(seed);
        let mut pos = Vec3::new(0.3, 0.0, 0.2);
        let raw: Vec<RawSample> = (0..n)
            .map(|i| {
                pos += Vec3::new(r.random_range(-0.002..0.002), r.random_range(-0.002..0.002), 0.0);
                let t = i as f64 * 0.01 + r.random_range(0.0..jitter.max(1e-12));
                RawSample { t, position: pos, orientation: [PI, 0.1, yaw0 + yaw_rate * t], width: 0.08 }
            })
            .collect();
        let demo = record_demo(&raw, DEFAULT_RECORD_RATE_HZ).unwrap();
        demo.validate().unwrap();
        prop_assert_eq!(demo.transitions.len() + 1, demo.samples.len());
        for w in demo.samples.windows(2) {
            prop_assert!(w[1].t > w[0].t);
            prop_assert!((w[1].t - w[0].t - 0.1).abs() <= 0.01 + 1e-9, "spacing {}", w[1].t - w[0].t);
        }
        for s in &demo.samples {
            for k in 0..3 {
                prop_assert!((s.sin[k].powi(2) + s.cos[k].powi(2) - 1.0).abs() < 1e-9);
            }
        }
        for (i, d) in demo.transitions.iter().enumerate() {
            let step = demo.samples[i + 1].position - demo.samples[i].position;
            prop_assert!(*d == step || (*d == Vec3::zeros() && step.norm() < 1e-5));
        }
    }
}

#[test]
fn eleven_second_stream_gives_110_samples() {
    let raw: Vec<RawSample> = (0..1100)
        .map(|i| RawSample {
            t: i as f64 * 0.01,
            position: Vec3::new(0.3 + 0.0001 * i as f64, 0.0, 0.2),
            orientation: [0.0, 0.0, PI / 2.0],
            width: 0.08,
        })
        .collect();
    let demo = record_demo(&raw, DEFAULT_RECORD_RATE_HZ).unwrap();
    assert_eq!(demo.samples.len(), 110);
    for s in &demo.samples {
        assert!((s.sin[2] - 1.0).abs() < 1e-12 && s.cos[2].abs() < 1e-12);
    }
}

#[test]
fn pause_gives_still_transitions_and_slow_policy() {
    let from = Vec3::new(0.2, 0.0, 0.2);
    let to = Vec3::new(0.4, 0.0, 0.2);
    let mut raw = path_raw(&[from, to], 0.05, |_| [PI, 0.0, 0.0], |_| 0.08);
    let t_end = raw.last().unwrap().t;
    raw.extend((1..=300).map(|k| RawSample {
        t: t_end + k as f64 * 0.01,
        position: to,
        orientation: [PI, 0.0, 0.0],
        width: 0.08,
    }));
    let demo = record_demo(&raw, DEFAULT_RECORD_RATE_HZ).unwrap();
    let still = demo
        .transitions
        .iter()
        .rev()
        .take(25)
        .all(|d| *d == Vec3::zeros());
    assert!(still);
    let policy = train_policy(std::slice::from_ref(&demo), &TrainConfig::default()).unwrap();
    // a fifth of the 5 mm cruise step
    let c = policy
        .compute_attractor(0, &to, &Vec3::repeat(600.0))
        .unwrap();
    assert!(
        c.diagnostics.delta.norm() < 0.001,
        "delta {}",
        c.diagnostics.delta.norm()
    );
}

#[test]
fn second_demo_lowers_variance_along_the_path() {
    let a = line_demo(Vec3::new(0.1, 0.0, 0.2), 0.4);
    // same path, sampled half a record period later
    let mut raw = path_raw(
        &[Vec3::new(0.1, 0.0, 0.2), Vec3::new(0.5, 0.0, 0.2)],
        0.05,
        |_| [0.0, 0.0, PI / 2.0],
        |_| 0.08,
    );
    raw.drain(..5);
    let b = record_demo(&raw, DEFAULT_RECORD_RATE_HZ).unwrap();
    let one = train_policy(std::slice::from_ref(&a), &TrainConfig::default()).unwrap();
    let two = train_policy(&[a.clone(), b], &TrainConfig::default()).unwrap();
    for s in &a.samples {
        let v1 = one.variance(0, &s.position).unwrap();
        let v2 = two.variance(0, &s.position).unwrap();
        assert!(v2 <= v1 * (1.0 + 1e-9), "{v2} > {v1}");
    }
}

#[test]
fn one_second_of_full_stick_accumulates() {
    let demo = line_demo(Vec3::new(0.1, 0.0, 0.2), 0.4);
    let mut policy = train_policy(std::slice::from_ref(&demo), &TrainConfig::default()).unwrap();
    let routing = RoutingConfig::default();
    let j = demo.samples.len() / 2;
    let x = demo.samples[j].position;
    let model_row = |p: &pickteach::policy::MudsPolicy| {
        let m = &p.frame_models(0).unwrap().gp_delta;
        let row = (0..m.len())
            .find(|&i| m.input(i) == x.as_slice().to_vec())
            .unwrap();
        m.output(row)[1]
    };
    let before = model_row(&policy);
    let ev = CorrectionEvent::new(0.0, CorrectionKind::AttractorXy, vec![0.0, 1.0]);
    let routed = route_correction(&ev, &routing, 0.01).unwrap();
    assert_eq!(routed.len(), 1);
    for _ in 0..100 {
        for rc in &routed {
            policy
                .apply_correction(0, rc.target, &x, rc.channel, rc.epsilon)
                .unwrap();
        }
    }
    let expected = 100.0 * (routing.stick_rate * 0.01).min(routing.stick_cap);
    assert!((model_row(&policy) - before - expected).abs() < 1e-12);
}

#[test]
fn stop_ends_round_without_touching_models() {
    let scenario = bundled("slow-pick-place").unwrap().0;
    let mut session = fresh_slow_session();
    let before = session.policy.clone();
    let mut trace = TimedTrace::new(vec![CorrectionEvent::new(
        2.0,
        CorrectionKind::Stop,
        vec![],
    )]);
    let rec = session
        .run_round(&scenario, &RoundConfig::seeded(1), &mut trace)
        .unwrap();
    assert_eq!(rec.outcome(), Some(Outcome::Stopped));
    assert!((rec.duration() - 2.0).abs() < 1e-9);
    assert_eq!(rec.log.samples.last().unwrap().t, rec.duration());
    assert!(rec.corrections.is_empty());
    assert_eq!(session.policy, before);
}

fn fresh_slow_session() -> TrainingSession {
    let (scenario, script) = bundled("slow-pick-place").unwrap();
    let demo = script.record(DEFAULT_RECORD_RATE_HZ).unwrap();
    TrainingSession::train(vec![demo], default_train_config(&scenario, false)).unwrap()
}

#[test]
fn scaling_presses_make_the_next_rollout_faster() {
    let (scenario, _) = bundled("slow-pick-place").unwrap();
    let mut session = fresh_slow_session();
    let base = rollout(&session.policy, &scenario, &RoundConfig::seeded(2)).unwrap();
    // hold the scaling button through the first free-flight stretch
    let events = (0..60)
        .map(|k| {
            CorrectionEvent::new(
                0.5 + 0.1 * k as f64,
                CorrectionKind::ScalingIncrement,
                vec![1.0],
            )
        })
        .collect();
    session
        .run_round(
            &scenario,
            &RoundConfig::seeded(2),
            &mut TimedTrace::new(events),
        )
        .unwrap();
    let after = rollout(&session.policy, &scenario, &RoundConfig::seeded(2)).unwrap();
    assert_eq!(base.outcome(), Some(Outcome::Success));
    assert_eq!(after.outcome(), Some(Outcome::Success));
    assert!(
        after.duration() < base.duration(),
        "{} vs {}",
        after.duration(),
        base.duration()
    );
}

#[test]
fn feedback_time_is_bounded_and_summed() {
    let (session, _, _) = speed_up_session();
    let mut sum = 0.0;
    for r in &session.rounds {
        assert!(r.aspects.total() <= r.duration() + 1e-9);
        assert!(r.aspects.attractor >= 0.0 && r.aspects.scaling >= 0.0 && r.aspects.gripper >= 0.0);
        sum += r.aspects.total();
    }
    assert!((session.timers.feedback - sum).abs() < 1e-9);
    assert!(session.timers.total >= session.timers.demo + session.timers.feedback);
}

#[test]
fn corrections_precede_evaluation_and_plant_step() {
    let (scenario, script) = bundled("slow-pick-place").unwrap();
    let demo = script.record(DEFAULT_RECORD_RATE_HZ).unwrap();
    let mut policy = train_policy(
        std::slice::from_ref(&demo),
        &default_train_config(&scenario, false),
    )
    .unwrap();
    let mut runner = RoundRunner::new(
        &mut policy,
        &scenario,
        &RoundConfig::seeded(4),
        &[],
        &RoutingConfig::default(),
    )
    .unwrap();
    for _ in 0..30 {
        runner.tick(&mut policy, vec![]).unwrap();
    }
    let before = runner
        .tick(&mut policy, vec![])
        .unwrap()
        .command
        .unwrap()
        .diagnostics
        .gamma;
    let press = CorrectionEvent::new(0.0, CorrectionKind::ScalingIncrement, vec![1.0]);
    let report = runner.tick(&mut policy, vec![press]).unwrap();
    let gamma = report.command.unwrap().diagnostics.gamma;
    assert!(
        gamma > before + 0.02,
        "the press was not visible to this tick's attractor"
    );
    let first = report
        .events
        .iter()
        .position(|e| matches!(e.kind, EventKind::Correction { .. }))
        .unwrap();
    assert!(report.events[..first].iter().all(|e| !matches!(
        e.kind,
        EventKind::GripperCommand { .. } | EventKind::GripperActuated { .. }
    )));
    let tick = report.events[first].tick;
    assert!(report.robot.position != Vec3::zeros() && report.tick == tick + 1);
}

#[test]
fn round_can_start_on_a_demo_sample_and_return_home() {
    let (scenario, script) = bundled("slow-pick-place").unwrap();
    let demo = script.record(DEFAULT_RECORD_RATE_HZ).unwrap();
    let mut policy = train_policy(
        std::slice::from_ref(&demo),
        &default_train_config(&scenario, false),
    )
    .unwrap();
    let rc = RoundConfig {
        start: RoundStart::DemoSample { demo: 0, index: 40 },
        seed: 0,
        max_duration: Some(5.0),
    };
    let mut runner = RoundRunner::new(
        &mut policy,
        &scenario,
        &rc,
        std::slice::from_ref(&demo),
        &RoutingConfig::default(),
    )
    .unwrap();
    assert_eq!(runner.world().robot().position, demo.samples[40].position);
    for _ in 0..20 {
        runner.tick(&mut policy, vec![]).unwrap();
    }
    runner
        .tick(
            &mut policy,
            vec![CorrectionEvent::new(0.0, CorrectionKind::GotoStart, vec![])],
        )
        .unwrap();
    let home = demo.samples[40].position;
    let x = runner.world().robot().position;
    assert!((x - home).norm() < 0.01, "not back at the start: {x:?}");
    let bad = RoundConfig {
        start: RoundStart::DemoSample {
            demo: 0,
            index: 10_000,
        },
        ..rc
    };
    assert!(RoundRunner::new(
        &mut policy,
        &scenario,
        &bad,
        std::slice::from_ref(&demo),
        &RoutingConfig::default()
    )
    .is_err());
}

#[test]
fn corrections_while_arrested_are_applied_and_flagged() {
    let (scenario, script) = bundled("slow-pick-place").unwrap();
    let demo = script.record(DEFAULT_RECORD_RATE_HZ).unwrap();
    let mut policy = train_policy(
        std::slice::from_ref(&demo),
        &default_train_config(&scenario, false),
    )
    .unwrap();
    let rc = RoundConfig {
        start: RoundStart::Pose {
            position: Vec3::new(0.8, 0.6, 0.5),
            orientation: scenario.start.orientation,
        },
        seed: 0,
        max_duration: Some(3.0),
    };
    let mut runner =
        RoundRunner::new(&mut policy, &scenario, &rc, &[], &RoutingConfig::default()).unwrap();
    let first = runner.tick(&mut policy, vec![]).unwrap();
    assert!(!first.command.unwrap().confidence_ok);
    let press = CorrectionEvent::new(0.0, CorrectionKind::AttractorZ, vec![-1.0]);
    runner.tick(&mut policy, vec![press]).unwrap();
    let record = runner.into_record();
    assert_eq!(record.corrections.len(), 1);
    assert!(record.corrections[0].arrested);
    let flagged = record
        .log
        .events
        .iter()
        .any(|e| matches!(e.kind, EventKind::Correction { arrested: true, .. }));
    assert!(flagged);
}

#[test]
fn invalid_and_late_events_are_discarded_with_a_record() {
    let (scenario, script) = bundled("slow-pick-place").unwrap();
    let demo = script.record(DEFAULT_RECORD_RATE_HZ).unwrap();
    let mut policy = train_policy(
        std::slice::from_ref(&demo),
        &default_train_config(&scenario, false),
    )
    .unwrap();
    let before = policy.clone();
    let rc = RoundConfig {
        max_duration: Some(0.05),
        ..RoundConfig::seeded(0)
    };
    let mut runner =
        RoundRunner::new(&mut policy, &scenario, &rc, &[], &RoutingConfig::default()).unwrap();
    runner
        .tick(
            &mut policy,
            vec![CorrectionEvent::new(
                0.0,
                CorrectionKind::AttractorXy,
                vec![2.0, 0.0],
            )],
        )
        .unwrap();
    runner.run(&mut policy, &mut NoCorrections).unwrap();
    let late = runner
        .tick(
            &mut policy,
            vec![CorrectionEvent::new(
                0.0,
                CorrectionKind::ScalingIncrement,
                vec![1.0],
            )],
        )
        .unwrap();
    assert!(late
        .events
        .iter()
        .any(|e| matches!(e.kind, EventKind::CorrectionDiscarded { .. })));
    assert_eq!(policy, before);
    let record = runner.into_record();
    let discarded = record
        .log
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::CorrectionDiscarded { .. }))
        .count();
    assert_eq!(discarded, 2);
}

#[test]
fn archive_replay_matches_after_reload() {
    let (session, _, _) = speed_up_session();
    let bytes = persist::to_bytes(&session);
    let loaded: TrainingSession = persist::from_bytes(&bytes).unwrap();
    assert_eq!(loaded, session);
    assert_eq!(
        persist::to_bytes(&loaded.replay().unwrap()),
        persist::to_bytes(&session.policy)
    );
}
