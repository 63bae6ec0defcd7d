#![allow(dead_code)]

use std::time::{Duration, Instant};

use pickteach::scenario::bundled;
use pickteach::sim::Vec3;
use pickteach::teaching::RawSample;
use pickteach_service::protocol::*;
use pickteach_service::{Client, Request, Response, SessionState};

pub const WAIT: Duration = Duration::from_secs(60);

pub fn session_of(r: &Response) -> SessionDescriptor {
    match r {
        Response::Session { session } => session.clone(),
        other => panic!("expected a session descriptor, got {other:?}"),
    }
}

pub fn create(client: &Client, scenario: &str) -> SessionDescriptor {
    session_of(&client.request(Request::CreateSession(CreateSession {
        scenario: scenario.into(),
        mode: SessionMode::Teach,
    })))
}

pub fn get(client: &Client, id: &str) -> SessionDescriptor {
    session_of(&client.request(Request::GetSession(Request::session_ref(id))))
}

/// Polls until the session leaves the transient Training and RollingOut states.
pub fn settle(client: &Client, id: &str) -> SessionDescriptor {
    let start = Instant::now();
    loop {
        let d = get(client, id);
        if !matches!(d.state, SessionState::Training | SessionState::RollingOut) {
            return d;
        }
        assert!(start.elapsed() < WAIT, "session stuck in {:?}", d.state);
        std::thread::sleep(Duration::from_millis(2));
    }
}

/// Reads pushed messages until `pred` matches one, returning everything seen.
pub fn collect_until(client: &Client, pred: impl Fn(&Response) -> bool) -> Vec<Response> {
    let mut seen = Vec::new();
    let deadline = Instant::now() + WAIT;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        let msg = client
            .inbox()
            .recv_timeout(left)
            .expect("pushed message before timeout");
        let done = pred(&msg);
        seen.push(msg);
        if done {
            return seen;
        }
    }
}

/// A 1 s straight move along +x at 10 cm/s, sampled at 100 Hz.
pub fn short_line() -> Vec<RawSample> {
    (0..=100)
        .map(|i| {
            let t = i as f64 * 0.01;
            RawSample {
                t,
                position: Vec3::new(0.2 + 0.1 * t, 0.0, 0.2),
                orientation: pickteach::scenario::GRIPPER_DOWN,
                width: 0.08,
            }
        })
        .collect()
}

pub fn curved_raw() -> Vec<RawSample> {
    bundled("curved-pick-place").unwrap().1.raw(100.0)
}

/// Streams `raw` in chunks and records it as one demonstration.
pub fn demonstrate(client: &Client, id: &str, raw: &[RawSample]) {
    let d = session_of(&client.request(Request::BeginDemo(Request::session_ref(id))));
    assert_eq!(d.state, SessionState::Demonstrating);
    for chunk in raw.chunks(250) {
        let r = client.request(Request::DemoSamples(DemoSamples {
            session: id.into(),
            samples: chunk.to_vec(),
        }));
        assert!(matches!(r, Response::Accepted { .. }), "{r:?}");
    }
    let d = session_of(&client.request(Request::EndDemo(EndDemo {
        session: id.into(),
        record_rate: 10.0,
    })));
    assert!(d.demos >= 1);
}

pub fn train(client: &Client, id: &str) -> SessionDescriptor {
    let d = session_of(&client.request(Request::Train(Train {
        session: id.into(),
        two_frame: false,
    })));
    assert_eq!(d.state, SessionState::Training);
    settle(client, id)
}

pub fn start_round(seed: u64, id: &str, max_duration: Option<f64>, realtime: bool) -> Request {
    Request::StartRound(StartRound {
        session: id.into(),
        seed,
        start: pickteach::teaching::RoundStart::Scenario,
        max_duration,
        realtime,
    })
}
