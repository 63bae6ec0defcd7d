//! Wire messages. Every message is one JSON object with a `type` field.
//! Positions are in metres in the world frame, times in seconds, rates in Hz.

use pickteach::sim::{Event, Outcome, RobotState, Vec3};
use pickteach::teaching::{AspectSeconds, CorrectionEvent, RawSample, RoundStart, Timers};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::state::SessionState;

pub const DEFAULT_TELEMETRY_HZ: f64 = 20.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    /// Demonstrate, train and correct.
    #[default]
    Teach,
    /// Created from an imported archive for further rounds.
    Rollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDescriptor {
    pub id: String,
    pub mode: SessionMode,
    /// Bundled scenario name or scenario file path.
    pub scenario: String,
    /// Path of the last persisted archive, if any.
    pub policy: Option<String>,
    pub state: SessionState,
    /// Unix time, s.
    pub created: f64,
    /// Unix time, s.
    pub updated: f64,
    pub demos: usize,
    pub rounds: usize,
    pub timers: Timers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub scenario: String,
    #[serde(default)]
    pub mode: SessionMode,
}

/// Body of every request that only names a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRef {
    pub session: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSamples {
    pub session: String,
    /// Raw device samples in time order, typically at 100 Hz.
    pub samples: Vec<RawSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndDemo {
    pub session: String,
    /// Hz; the stored demonstration is resampled to this rate.
    #[serde(default = "default_record_rate")]
    pub record_rate: f64,
}

fn default_record_rate() -> f64 {
    pickteach::teaching::DEFAULT_RECORD_RATE_HZ
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Train {
    pub session: String,
    /// Fit object and goal frames instead of one global frame.
    #[serde(default)]
    pub two_frame: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRound {
    pub session: String,
    pub seed: u64,
    #[serde(default = "scenario_start")]
    pub start: RoundStart,
    /// Overrides the scenario time limit, s.
    #[serde(default)]
    pub max_duration: Option<f64>,
    /// Pace ticks at wall-clock time. Off runs the round as fast as possible.
    #[serde(default = "yes")]
    pub realtime: bool,
}

fn scenario_start() -> RoundStart {
    RoundStart::Scenario
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Correction {
    pub session: String,
    pub event: CorrectionEvent,
    /// Idempotency key. A repeated key is acknowledged but not applied again.
    #[serde(default)]
    pub key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subscribe {
    pub session: String,
    /// State frames per second, at most the control rate. Events are sent
    /// as they happen regardless.
    #[serde(default = "default_telemetry_hz")]
    pub rate_hz: f64,
}

fn default_telemetry_hz() -> f64 {
    DEFAULT_TELEMETRY_HZ
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    Xy,
    Xz,
    Yz,
}

impl Plane {
    pub fn axes(self) -> (usize, usize) {
        match self {
            Plane::Xy => (0, 1),
            Plane::Xz => (0, 2),
            Plane::Yz => (1, 2),
        }
    }
}

/// A rectangle in an axis-aligned plane through `center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slice {
    pub plane: Plane,
    pub center: Vec3,
    /// Extent along the two in-plane axes, m.
    pub size: [f64; 2],
    /// Grid points along the two in-plane axes.
    pub resolution: [usize; 2],
    /// Policy frame to evaluate; the pre-grasp frame when absent.
    #[serde(default)]
    pub frame: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldRaster {
    pub session: String,
    pub slice: Slice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportArchive {
    pub session: String,
    /// Defaults to `<data dir>/sessions/<id>.session`.
    #[serde(default)]
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportArchive {
    pub path: String,
    /// Scenario for new rounds; the last recorded round's when absent.
    #[serde(default)]
    pub scenario: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Empty {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    CreateSession(CreateSession),
    ListSessions(Empty),
    GetSession(SessionRef),
    DeleteSession(SessionRef),
    BeginDemo(SessionRef),
    DemoSamples(DemoSamples),
    EndDemo(EndDemo),
    Train(Train),
    StartRound(StartRound),
    StopRound(SessionRef),
    Correction(Correction),
    Subscribe(Subscribe),
    Unsubscribe(SessionRef),
    FieldRaster(FieldRaster),
    Finish(SessionRef),
    ExportArchive(ExportArchive),
    ImportArchive(ImportArchive),
}

impl Request {
    pub fn name(&self) -> &'static str {
        match self {
            Request::CreateSession(_) => "create_session",
            Request::ListSessions(_) => "list_sessions",
            Request::GetSession(_) => "get_session",
            Request::DeleteSession(_) => "delete_session",
            Request::BeginDemo(_) => "begin_demo",
            Request::DemoSamples(_) => "demo_samples",
            Request::EndDemo(_) => "end_demo",
            Request::Train(_) => "train",
            Request::StartRound(_) => "start_round",
            Request::StopRound(_) => "stop_round",
            Request::Correction(_) => "correction",
            Request::Subscribe(_) => "subscribe",
            Request::Unsubscribe(_) => "unsubscribe",
            Request::FieldRaster(_) => "field_raster",
            Request::Finish(_) => "finish",
            Request::ExportArchive(_) => "export_archive",
            Request::ImportArchive(_) => "import_archive",
        }
    }

    pub fn session_ref(name: &str) -> SessionRef {
        SessionRef {
            session: name.to_string(),
        }
    }
}

/// One state frame of a running round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub robot: RobotState,
    /// Commanded attractor position, absent on the final tick.
    pub attractor: Option<Vec3>,
    pub gamma: Option<f64>,
    pub variance: Option<f64>,
    pub confidence_ok: Option<bool>,
    pub frame: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub session: String,
    pub tick: u64,
    pub t: f64,
    /// Present on decimated ticks and on the last tick of a round.
    pub state: Option<StateFrame>,
    /// Every simulator event of this tick.
    pub events: Vec<Event>,
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldPoint {
    pub position: Vec3,
    /// Unit vector from the query point to the attractor, zero when they coincide.
    pub direction: Vec3,
    /// Distance to the attractor, m.
    pub magnitude: f64,
    /// Transition-model posterior variance.
    pub variance: f64,
    /// False where the confidence gate would hold the robot still.
    pub confidence_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub index: usize,
    pub outcome: Option<Outcome>,
    /// s.
    pub duration: f64,
    pub corrections: usize,
    pub aspects: AspectSeconds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// The message could not be decoded.
    Protocol,
    IllegalTransition,
    NotFound,
    /// Well formed but rejected by the teaching or simulation layer.
    Rejected,
    Io,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Session {
        session: SessionDescriptor,
    },
    Sessions {
        sessions: Vec<SessionDescriptor>,
    },
    Deleted {
        session: String,
    },
    Accepted {
        session: String,
        request: String,
        /// False when an idempotency key was seen before.
        applied: bool,
    },
    Field {
        session: String,
        slice: Slice,
        points: Vec<FieldPoint>,
    },
    ArchiveSaved {
        session: String,
        path: String,
    },
    Telemetry(Telemetry),
    RoundFinished {
        session: String,
        round: RoundSummary,
    },
    /// Pushed to subscribers whenever the session state changes.
    StateChanged {
        session: SessionDescriptor,
    },
    Error {
        code: ErrorCode,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        field: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        state: Option<SessionState>,
    },
}

impl Response {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Response::Error {
            code,
            message: message.into(),
            field: None,
            state: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct ProtocolError {
    /// Dotted path of the offending field, `type` for an unknown message.
    pub field: String,
    pub message: String,
}

impl From<ProtocolError> for Response {
    fn from(e: ProtocolError) -> Self {
        Response::Error {
            code: ErrorCode::Protocol,
            message: e.message,
            field: Some(e.field),
            state: None,
        }
    }
}

fn body<T: DeserializeOwned>(value: Value) -> Result<T, ProtocolError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        let named = ["missing field `", "unknown field `"]
            .iter()
            .find_map(|p| message.strip_prefix(p))
            .and_then(|rest| rest.split('`').next());
        let field = match (named, path.as_str()) {
            (Some(name), ".") => name.to_string(),
            (Some(name), p) if !p.ends_with(name) => format!("{p}.{name}"),
            _ => path,
        };
        ProtocolError { field, message }
    })
}

/// Decodes one request, naming the offending field on failure.
pub fn parse_request(text: &str) -> Result<Request, ProtocolError> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| ProtocolError {
        field: "<message>".into(),
        message: e.to_string(),
    })?;
    let object = value.as_object_mut().ok_or_else(|| ProtocolError {
        field: "<message>".into(),
        message: "expected a JSON object".into(),
    })?;
    let kind = match object.remove("type") {
        Some(Value::String(s)) => s,
        Some(_) => {
            return Err(ProtocolError {
                field: "type".into(),
                message: "expected a string".into(),
            })
        }
        None => {
            return Err(ProtocolError {
                field: "type".into(),
                message: "missing field `type`".into(),
            })
        }
    };
    Ok(match kind.as_str() {
        "create_session" => Request::CreateSession(body(value)?),
        "list_sessions" => Request::ListSessions(body(value)?),
        "get_session" => Request::GetSession(body(value)?),
        "delete_session" => Request::DeleteSession(body(value)?),
        "begin_demo" => Request::BeginDemo(body(value)?),
        "demo_samples" => Request::DemoSamples(body(value)?),
        "end_demo" => Request::EndDemo(body(value)?),
        "train" => Request::Train(body(value)?),
        "start_round" => Request::StartRound(body(value)?),
        "stop_round" => Request::StopRound(body(value)?),
        "correction" => Request::Correction(body(value)?),
        "subscribe" => Request::Subscribe(body(value)?),
        "unsubscribe" => Request::Unsubscribe(body(value)?),
        "field_raster" => Request::FieldRaster(body(value)?),
        "finish" => Request::Finish(body(value)?),
        "export_archive" => Request::ExportArchive(body(value)?),
        "import_archive" => Request::ImportArchive(body(value)?),
        other => {
            return Err(ProtocolError {
                field: "type".into(),
                message: format!("unknown message type `{other}`"),
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requests_round_trip_through_the_parser() {
        let reqs = vec![
            Request::CreateSession(CreateSession {
                scenario: "curved-pick-place".into(),
                mode: SessionMode::Teach,
            }),
            Request::ListSessions(Empty {}),
            Request::StartRound(StartRound {
                session: "a".into(),
                seed: 3,
                start: RoundStart::DemoSample { demo: 0, index: 4 },
                max_duration: Some(5.0),
                realtime: false,
            }),
            Request::Correction(Correction {
                session: "a".into(),
                event: CorrectionEvent::new(
                    0.5,
                    pickteach::teaching::CorrectionKind::AttractorXy,
                    vec![0.5, 0.0],
                ),
                key: Some("k1".into()),
            }),
        ];
        for r in reqs {
            let text = serde_json::to_string(&r).unwrap();
            assert_eq!(parse_request(&text).unwrap(), r, "{text}");
            assert!(text.contains(&format!("\"type\":\"{}\"", r.name())));
        }
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            ("[1]", "<message>"),
            ("{\"session\":\"a\"}", "type"),
            ("{\"type\":\"warp\"}", "type"),
            ("{\"type\":\"train\"}", "session"),
            ("{\"type\":\"start_round\",\"session\":\"a\",\"seed\":\"x\"}", "seed"),
            ("{\"type\":\"train\",\"session\":\"a\",\"colour\":1}", "colour"),
            (
                "{\"type\":\"correction\",\"session\":\"a\",\"event\":{\"t\":0,\"kind\":\"jump\"}}",
                "event.kind",
            ),
            (
                "{\"type\":\"field_raster\",\"session\":\"a\",\"slice\":{\"plane\":\"xy\",\"center\":[0,0,0],\"size\":[1,1]}}",
                "slice.resolution",
            ),
        ];
        for (text, field) in cases {
            let err = parse_request(text).unwrap_err();
            assert_eq!(err.field, field, "{text}: {}", err.message);
        }
    }

    #[test]
    fn defaults_fill_optional_fields() {
        let r = parse_request("{\"type\":\"subscribe\",\"session\":\"a\"}").unwrap();
        assert_eq!(
            r,
            Request::Subscribe(Subscribe {
                session: "a".into(),
                rate_hz: 20.0
            })
        );
        let Request::StartRound(s) =
            parse_request("{\"type\":\"start_round\",\"session\":\"a\",\"seed\":1}").unwrap()
        else {
            panic!()
        };
        assert!(s.realtime);
        assert_eq!(s.start, RoundStart::Scenario);
    }
}
