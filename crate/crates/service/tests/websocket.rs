mod common;

use std::net::TcpStream;
use std::time::{Duration, Instant};

use common::*;
use pickteach_service::protocol::*;
use pickteach_service::{Request, Response, Server, Service, SessionState};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

type Socket = WebSocket<MaybeTlsStream<TcpStream>>;

fn send_text(ws: &mut Socket, text: &str) {
    ws.send(Message::text(text.to_string())).unwrap();
}

fn recv(ws: &mut Socket) -> Response {
    loop {
        match ws.read().unwrap() {
            Message::Text(t) => return serde_json::from_str(&t).unwrap(),
            Message::Close(_) => panic!("server closed"),
            _ => {}
        }
    }
}

/// Sends a request and returns its direct answer, keeping pushed messages.
fn call(ws: &mut Socket, request: &Request, pushed: &mut Vec<Response>) -> Response {
    send_text(ws, &serde_json::to_string(request).unwrap());
    loop {
        let r = recv(ws);
        match r {
            Response::Telemetry(_)
            | Response::StateChanged { .. }
            | Response::RoundFinished { .. } => pushed.push(r),
            other => return other,
        }
    }
}

#[test]
fn teaching_round_over_a_socket() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::bind("127.0.0.1:0", Service::new(dir.path())).unwrap();
    let url = format!("ws://{}", server.local_addr());
    let (mut ws, _) = tungstenite::connect(url.as_str()).unwrap();
    let mut pushed = Vec::new();

    // malformed messages come back as protocol errors naming the field
    send_text(
        &mut ws,
        "{\"type\":\"start_round\",\"session\":\"x\",\"seed\":-1}",
    );
    let r = recv(&mut ws);
    assert!(
        matches!(&r, Response::Error { code: ErrorCode::Protocol, field: Some(f), .. } if f == "seed"),
        "{r:?}"
    );
    send_text(&mut ws, "not json");
    assert!(matches!(
        recv(&mut ws),
        Response::Error {
            code: ErrorCode::Protocol,
            ..
        }
    ));

    let create = Request::CreateSession(CreateSession {
        scenario: "curved-pick-place".into(),
        mode: SessionMode::Teach,
    });
    let id = session_of(&call(&mut ws, &create, &mut pushed)).id;
    let subscribe = Request::Subscribe(Subscribe {
        session: id.clone(),
        rate_hz: 10.0,
    });
    assert!(matches!(
        call(&mut ws, &subscribe, &mut pushed),
        Response::Accepted { .. }
    ));
    call(
        &mut ws,
        &Request::BeginDemo(Request::session_ref(&id)),
        &mut pushed,
    );
    for chunk in curved_raw().chunks(500) {
        let r = call(
            &mut ws,
            &Request::DemoSamples(DemoSamples {
                session: id.clone(),
                samples: chunk.to_vec(),
            }),
            &mut pushed,
        );
        assert!(matches!(r, Response::Accepted { .. }));
    }
    let end = Request::EndDemo(EndDemo {
        session: id.clone(),
        record_rate: 10.0,
    });
    assert_eq!(session_of(&call(&mut ws, &end, &mut pushed)).demos, 1);
    let train = Request::Train(Train {
        session: id.clone(),
        two_frame: false,
    });
    assert_eq!(
        session_of(&call(&mut ws, &train, &mut pushed)).state,
        SessionState::Training
    );

    // wait for the pushed state change out of Training
    let deadline = Instant::now() + WAIT;
    while !pushed
        .iter()
        .any(|m| matches!(m, Response::StateChanged { session } if session.state == SessionState::Correcting))
    {
        assert!(Instant::now() < deadline);
        pushed.push(recv(&mut ws));
    }
    pushed.clear();
    let r = call(
        &mut ws,
        &start_round(11, &id, Some(2.0), false),
        &mut pushed,
    );
    assert_eq!(session_of(&r).state, SessionState::RollingOut);
    while !pushed
        .iter()
        .any(|m| matches!(m, Response::RoundFinished { .. }))
    {
        pushed.push(recv(&mut ws));
    }
    let frames: Vec<u64> = pushed
        .iter()
        .filter_map(|m| match m {
            Response::Telemetry(t) if t.state.is_some() => Some(t.tick),
            _ => None,
        })
        .collect();
    assert!(frames.len() >= 10, "{} frames", frames.len());
    assert!(frames[..frames.len() - 1].iter().all(|t| t % 10 == 0));

    let list = call(&mut ws, &Request::ListSessions(Empty {}), &mut pushed);
    let Response::Sessions { sessions } = list else {
        panic!()
    };
    assert_eq!(sessions.len(), 1);
    assert_eq!(sessions[0].rounds, 1);
    ws.close(None).unwrap();
    let _ = ws.flush();
    std::thread::sleep(Duration::from_millis(20));
}

#[test]
fn two_clients_share_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::bind("127.0.0.1:0", Service::new(dir.path())).unwrap();
    let url = format!("ws://{}", server.local_addr());
    let (mut a, _) = tungstenite::connect(url.as_str()).unwrap();
    let (mut b, _) = tungstenite::connect(url.as_str()).unwrap();
    let mut pushed = Vec::new();
    let create = Request::CreateSession(CreateSession {
        scenario: "slow-pick-place".into(),
        mode: SessionMode::Teach,
    });
    let id = session_of(&call(&mut a, &create, &mut pushed)).id;
    let seen = call(
        &mut b,
        &Request::GetSession(Request::session_ref(&id)),
        &mut pushed,
    );
    assert_eq!(session_of(&seen).state, SessionState::Idle);
    let deleted = call(
        &mut b,
        &Request::DeleteSession(Request::session_ref(&id)),
        &mut pushed,
    );
    assert_eq!(
        deleted,
        Response::Deleted {
            session: id.clone()
        }
    );
    let gone = call(
        &mut a,
        &Request::GetSession(Request::session_ref(&id)),
        &mut pushed,
    );
    assert!(matches!(
        gone,
        Response::Error {
            code: ErrorCode::NotFound,
            ..
        }
    ));
}
