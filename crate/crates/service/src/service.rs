//! Session registry and per-session control loops.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use pickteach::persist;
use pickteach::scenario::{bundled, default_train_config};
use pickteach::sim::Scenario;
use pickteach::teaching::{
    record_demo, CorrectionEvent, CorrectionKind, Demonstration, RawSample, RoundConfig,
    RoundRunner, RoundStart, TickReport, TrainConfig, TrainingSession,
};

use crate::field;
use crate::protocol::{
    self, ErrorCode, Request, Response, RoundSummary, SessionDescriptor, SessionMode,
};
use crate::state::{SessionState, StateMachine, TransitionError};
use crate::telemetry::Decimator;

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Looks up a bundled scenario by name, otherwise reads a scenario JSON file.
pub fn resolve_scenario(name: &str) -> Result<Scenario, String> {
    if let Some((s, _)) = bundled(name) {
        return Ok(s);
    }
    let text =
        std::fs::read_to_string(name).map_err(|e| format!("unknown scenario `{name}`: {e}"))?;
    let scenario: Scenario =
        serde_json::from_str(&text).map_err(|e| format!("scenario file `{name}`: {e}"))?;
    scenario
        .validate()
        .map_err(|e| format!("scenario file `{name}`: {e}"))?;
    Ok(scenario)
}

enum Command {
    Train(Box<TrainConfig>),
    Round { config: RoundConfig, realtime: bool },
    Shutdown,
}

struct Subscriber {
    client: u64,
    sink: Sender<Response>,
    decimator: Decimator,
}

struct Core {
    descriptor: SessionDescriptor,
    machine: StateMachine,
    scenario: Scenario,
    draft: Vec<RawSample>,
    demos: Vec<Demonstration>,
    teaching: Option<TrainingSession>,
    keys: HashSet<String>,
}

impl Core {
    fn transition(&mut self, to: SessionState) -> Result<(), TransitionError> {
        self.machine.transition(to)?;
        self.touch();
        Ok(())
    }

    fn touch(&mut self) {
        self.descriptor.state = self.machine.state();
        self.descriptor.updated = now_unix();
        self.descriptor.demos = self.demos.len();
        if let Some(t) = &self.teaching {
            self.descriptor.rounds = t.rounds.len();
            self.descriptor.timers = t.timers;
        }
    }
}

struct Session {
    id: String,
    core: Mutex<Core>,
    commands: Mutex<Sender<Command>>,
    corrections: Mutex<Sender<CorrectionEvent>>,
    stop: AtomicBool,
    subscribers: Mutex<Vec<Subscriber>>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Session {
    fn broadcast(&self, message: &Response) {
        lock(&self.subscribers).retain(|s| s.sink.send(message.clone()).is_ok());
    }

    fn publish_state(&self) {
        let descriptor = lock(&self.core).descriptor.clone();
        self.broadcast(&Response::StateChanged {
            session: descriptor,
        });
    }

    fn command(&self, c: Command) {
        let _ = lock(&self.commands).send(c);
    }

    fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        self.command(Command::Shutdown);
        if let Some(handle) = lock(&self.worker).take() {
            let _ = handle.join();
        }
    }
}

struct Inner {
    data_dir: PathBuf,
    sessions: Mutex<BTreeMap<String, Arc<Session>>>,
    next_client: AtomicU64,
}

impl Drop for Inner {
    fn drop(&mut self) {
        let sessions: Vec<_> = std::mem::take(&mut *lock(&self.sessions))
            .into_values()
            .collect();
        for s in sessions {
            s.shutdown();
        }
    }
}

/// Multiplexes teaching sessions. Cheap to clone.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

/// One connected client. Pushed messages (telemetry, state changes, round
/// results) arrive on `inbox`.
pub struct Client {
    service: Service,
    id: u64,
    sink: Sender<Response>,
    inbox: Receiver<Response>,
}

impl Client {
    pub fn request(&self, request: Request) -> Response {
        self.service.handle(self.id, &self.sink, request)
    }

    pub fn inbox(&self) -> &Receiver<Response> {
        &self.inbox
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        for s in self.service.all() {
            lock(&s.subscribers).retain(|sub| sub.client != self.id);
        }
    }
}

fn illegal(e: TransitionError) -> Response {
    Response::Error {
        code: ErrorCode::IllegalTransition,
        message: e.to_string(),
        field: None,
        state: Some(e.from),
    }
}

fn rejected(message: impl Into<String>, field: Option<&str>, state: SessionState) -> Response {
    Response::Error {
        code: ErrorCode::Rejected,
        message: message.into(),
        field: field.map(str::to_string),
        state: Some(state),
    }
}

impl Service {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            inner: Arc::new(Inner {
                data_dir: data_dir.into(),
                sessions: Mutex::new(BTreeMap::new()),
                next_client: AtomicU64::new(1),
            }),
        }
    }

    pub fn data_dir(&self) -> &Path {
        &self.inner.data_dir
    }

    pub fn connect(&self) -> Client {
        let (sink, inbox) = mpsc::channel();
        Client {
            service: self.clone(),
            id: self.inner.next_client.fetch_add(1, Ordering::Relaxed),
            sink,
            inbox,
        }
    }

    fn all(&self) -> Vec<Arc<Session>> {
        lock(&self.inner.sessions).values().cloned().collect()
    }

    fn get(&self, id: &str) -> Result<Arc<Session>, Response> {
        lock(&self.inner.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| Response::Error {
                code: ErrorCode::NotFound,
                message: format!("no session `{id}`"),
                field: Some("session".into()),
                state: None,
            })
    }

    fn archive_path(&self, id: &str) -> PathBuf {
        archive_path(&self.inner.data_dir, id)
    }

    /// Handles one request on behalf of `client`, whose pushed messages go
    /// to `sink`.
    pub fn handle(&self, client: u64, sink: &Sender<Response>, request: Request) -> Response {
        let result = match request {
            Request::CreateSession(r) => self.create(r.scenario, r.mode, None),
            Request::ListSessions(_) => {
                let mut sessions: Vec<_> = self
                    .all()
                    .iter()
                    .map(|s| lock(&s.core).descriptor.clone())
                    .collect();
                sessions.sort_by(|a, b| {
                    a.created
                        .total_cmp(&b.created)
                        .then_with(|| a.id.cmp(&b.id))
                });
                Ok(Response::Sessions { sessions })
            }
            Request::GetSession(r) => self.get(&r.session).map(|s| Response::Session {
                session: lock(&s.core).descriptor.clone(),
            }),
            Request::DeleteSession(r) => self.delete(&r.session),
            Request::BeginDemo(r) => self.with_core(&r.session, |core| {
                if core.machine.state() != SessionState::Demonstrating {
                    core.transition(SessionState::Demonstrating)
                        .map_err(illegal)?;
                }
                core.draft.clear();
                Ok(None)
            }),
            Request::DemoSamples(r) => self.with_core(&r.session, |core| {
                core.machine
                    .require(SessionState::Demonstrating)
                    .map_err(illegal)?;
                core.draft.extend(r.samples);
                Ok(Some(Response::Accepted {
                    session: r.session.clone(),
                    request: "demo_samples".into(),
                    applied: true,
                }))
            }),
            Request::EndDemo(r) => self.with_core(&r.session, |core| {
                core.machine
                    .require(SessionState::Demonstrating)
                    .map_err(illegal)?;
                let draft = std::mem::take(&mut core.draft);
                let demo = record_demo(&draft, r.record_rate)
                    .map_err(|e| rejected(e.to_string(), Some("samples"), core.machine.state()))?;
                core.demos.push(demo);
                core.touch();
                Ok(None)
            }),
            Request::Train(r) => self.train(&r.session, r.two_frame),
            Request::StartRound(r) => self.start_round(r),
            Request::StopRound(r) => self.get(&r.session).and_then(|s| {
                lock(&s.core)
                    .machine
                    .require(SessionState::RollingOut)
                    .map_err(illegal)?;
                s.stop.store(true, Ordering::SeqCst);
                Ok(Response::Accepted {
                    session: r.session,
                    request: "stop_round".into(),
                    applied: true,
                })
            }),
            Request::Correction(r) => self.correction(r),
            Request::Subscribe(r) => self.get(&r.session).and_then(|s| {
                let control_rate = lock(&s.core).scenario.control_rate;
                let decimator =
                    Decimator::new(control_rate, r.rate_hz).map_err(|e| Response::Error {
                        code: ErrorCode::Rejected,
                        message: e.to_string(),
                        field: Some("rate_hz".into()),
                        state: None,
                    })?;
                let mut subs = lock(&s.subscribers);
                subs.retain(|sub| sub.client != client);
                subs.push(Subscriber {
                    client,
                    sink: sink.clone(),
                    decimator,
                });
                Ok(Response::Accepted {
                    session: r.session,
                    request: "subscribe".into(),
                    applied: true,
                })
            }),
            Request::Unsubscribe(r) => self.get(&r.session).map(|s| {
                lock(&s.subscribers).retain(|sub| sub.client != client);
                Response::Accepted {
                    session: r.session,
                    request: "unsubscribe".into(),
                    applied: true,
                }
            }),
            Request::FieldRaster(r) => self.get(&r.session).and_then(|s| {
                let core = lock(&s.core);
                let teaching = core.teaching.as_ref().ok_or_else(|| {
                    rejected("session has no policy yet", None, core.machine.state())
                })?;
                let points =
                    field::raster(&teaching.policy, &r.slice, &core.scenario.plant.stiffness)
                        .map_err(|e| {
                            rejected(e.to_string(), Some("slice"), core.machine.state())
                        })?;
                Ok(Response::Field {
                    session: r.session,
                    slice: r.slice,
                    points,
                })
            }),
            Request::Finish(r) => self.get(&r.session).and_then(|s| {
                let bytes = {
                    let mut core = lock(&s.core);
                    core.transition(SessionState::Done).map_err(illegal)?;
                    let bytes = core.teaching.as_ref().map(persist::to_bytes);
                    if bytes.is_some() {
                        core.descriptor.policy =
                            Some(self.archive_path(&s.id).display().to_string());
                    }
                    bytes
                };
                s.stop.store(true, Ordering::SeqCst);
                if let Some(bytes) = bytes {
                    write_archive(&self.inner.data_dir, &s, &bytes);
                }
                s.publish_state();
                Ok(Response::Session {
                    session: lock(&s.core).descriptor.clone(),
                })
            }),
            Request::ExportArchive(r) => self.get(&r.session).and_then(|s| {
                let (bytes, state) = {
                    let core = lock(&s.core);
                    (
                        core.teaching.as_ref().map(persist::to_bytes),
                        core.machine.state(),
                    )
                };
                let bytes =
                    bytes.ok_or_else(|| rejected("session has no policy yet", None, state))?;
                let path = r
                    .path
                    .map(PathBuf::from)
                    .unwrap_or_else(|| self.archive_path(&s.id));
                write_file(&path, &bytes)
                    .map_err(|e| Response::error(ErrorCode::Io, e.to_string()))?;
                Ok(Response::ArchiveSaved {
                    session: r.session,
                    path: path.display().to_string(),
                })
            }),
            Request::ImportArchive(r) => self.import(r),
        };
        result.unwrap_or_else(|e| e)
    }

    /// Runs `f` on the session core and answers with `f`'s response or the
    /// updated descriptor.
    fn with_core(
        &self,
        id: &str,
        f: impl FnOnce(&mut Core) -> Result<Option<Response>, Response>,
    ) -> Result<Response, Response> {
        let s = self.get(id)?;
        let (response, changed) = {
            let mut core = lock(&s.core);
            let before = core.descriptor.clone();
            let r = f(&mut core)?;
            (
                r.unwrap_or_else(|| Response::Session {
                    session: core.descriptor.clone(),
                }),
                before.state != core.descriptor.state,
            )
        };
        if changed {
            s.publish_state();
        }
        Ok(response)
    }

    fn create(
        &self,
        scenario_name: String,
        mode: SessionMode,
        archive: Option<TrainingSession>,
    ) -> Result<Response, Response> {
        let scenario = match &archive {
            Some(a) if scenario_name.is_empty() => a
                .rounds
                .last()
                .map(|r| r.scenario.clone())
                .ok_or_else(|| Response::Error {
                    code: ErrorCode::Rejected,
                    message: "archive has no rounds, name a scenario".into(),
                    field: Some("scenario".into()),
                    state: None,
                })?,
            _ => resolve_scenario(&scenario_name).map_err(|m| Response::Error {
                code: ErrorCode::NotFound,
                message: m,
                field: Some("scenario".into()),
                state: None,
            })?,
        };
        let now = now_unix();
        let id = uuid::Uuid::new_v4().simple().to_string();
        let mut core = Core {
            descriptor: SessionDescriptor {
                id: id.clone(),
                mode,
                scenario: if scenario_name.is_empty() {
                    scenario.name.clone()
                } else {
                    scenario_name
                },
                policy: None,
                state: SessionState::Idle,
                created: now,
                updated: now,
                demos: 0,
                rounds: 0,
                timers: Default::default(),
            },
            machine: StateMachine::default(),
            scenario,
            draft: Vec::new(),
            demos: Vec::new(),
            teaching: None,
            keys: HashSet::new(),
        };
        if let Some(archive) = archive {
            // an imported session walks the declared path to Correcting
            for s in [
                SessionState::Demonstrating,
                SessionState::Training,
                SessionState::Correcting,
            ] {
                core.transition(s).map_err(illegal)?;
            }
            core.demos = archive.demos.clone();
            core.teaching = Some(archive);
            core.touch();
        }
        let descriptor = core.descriptor.clone();
        let (command_tx, command_rx) = mpsc::channel();
        let (correction_tx, correction_rx) = mpsc::channel();
        let session = Arc::new(Session {
            id: id.clone(),
            core: Mutex::new(core),
            commands: Mutex::new(command_tx),
            corrections: Mutex::new(correction_tx),
            stop: AtomicBool::new(false),
            subscribers: Mutex::new(Vec::new()),
            worker: Mutex::new(None),
        });
        let worker = {
            let session = session.clone();
            let data_dir = self.inner.data_dir.clone();
            std::thread::Builder::new()
                .name(format!("session-{}", &id[..8]))
                .spawn(move || control_loop(&data_dir, &session, command_rx, correction_rx))
                .map_err(|e| Response::error(ErrorCode::Io, e.to_string()))?
        };
        *lock(&session.worker) = Some(worker);
        lock(&self.inner.sessions).insert(id, session);
        Ok(Response::Session {
            session: descriptor,
        })
    }

    fn delete(&self, id: &str) -> Result<Response, Response> {
        let session = lock(&self.inner.sessions)
            .remove(id)
            .ok_or_else(|| Response::Error {
                code: ErrorCode::NotFound,
                message: format!("no session `{id}`"),
                field: Some("session".into()),
                state: None,
            })?;
        session.shutdown();
        Ok(Response::Deleted {
            session: id.to_string(),
        })
    }

    fn train(&self, id: &str, two_frame: bool) -> Result<Response, Response> {
        let s = self.get(id)?;
        let descriptor = {
            let mut core = lock(&s.core);
            let state = core.machine.state();
            if state == SessionState::Demonstrating && core.demos.is_empty() {
                return Err(rejected("no demonstrations recorded", None, state));
            }
            if two_frame && core.scenario.objects.is_empty() {
                return Err(rejected(
                    "two-frame training needs an object",
                    Some("two_frame"),
                    state,
                ));
            }
            core.transition(SessionState::Training).map_err(illegal)?;
            let config = default_train_config(&core.scenario, two_frame);
            s.command(Command::Train(Box::new(config)));
            core.descriptor.clone()
        };
        s.publish_state();
        Ok(Response::Session {
            session: descriptor,
        })
    }

    fn start_round(&self, r: protocol::StartRound) -> Result<Response, Response> {
        let s = self.get(&r.session)?;
        let descriptor = {
            let mut core = lock(&s.core);
            let state = core.machine.state();
            if let RoundStart::DemoSample { demo, index } = r.start {
                if core
                    .demos
                    .get(demo)
                    .and_then(|d| d.samples.get(index))
                    .is_none()
                {
                    return Err(rejected(
                        format!("no demo sample {demo}/{index}"),
                        Some("start"),
                        state,
                    ));
                }
            }
            if let Some(d) = r.max_duration {
                if !(d.is_finite() && d > 0.0) {
                    return Err(rejected("must be positive", Some("max_duration"), state));
                }
            }
            core.transition(SessionState::RollingOut).map_err(illegal)?;
            s.stop.store(false, Ordering::SeqCst);
            s.command(Command::Round {
                config: RoundConfig {
                    start: r.start,
                    seed: r.seed,
                    max_duration: r.max_duration,
                },
                realtime: r.realtime,
            });
            core.descriptor.clone()
        };
        s.publish_state();
        Ok(Response::Session {
            session: descriptor,
        })
    }

    fn correction(&self, r: protocol::Correction) -> Result<Response, Response> {
        let s = self.get(&r.session)?;
        let mut core = lock(&s.core);
        core.machine
            .require(SessionState::RollingOut)
            .map_err(illegal)?;
        r.event
            .validate()
            .map_err(|e| rejected(e.to_string(), Some("event"), core.machine.state()))?;
        let fresh = match &r.key {
            Some(k) => core.keys.insert(k.clone()),
            None => true,
        };
        if fresh {
            if r.event.kind == CorrectionKind::Stop {
                // Stop overtakes anything still queued
                s.stop.store(true, Ordering::SeqCst);
            } else {
                let _ = lock(&s.corrections).send(r.event);
            }
        }
        Ok(Response::Accepted {
            session: r.session,
            request: "correction".into(),
            applied: fresh,
        })
    }

    fn import(&self, r: protocol::ImportArchive) -> Result<Response, Response> {
        let archive: TrainingSession = persist::load(&r.path).map_err(|e| Response::Error {
            code: ErrorCode::Rejected,
            message: e.to_string(),
            field: Some("path".into()),
            state: None,
        })?;
        let response = self.create(
            r.scenario.unwrap_or_default(),
            SessionMode::Rollout,
            Some(archive),
        )?;
        if let Response::Session { session } = &response {
            if let Ok(s) = self.get(&session.id) {
                lock(&s.core).descriptor.policy = Some(r.path);
                return Ok(Response::Session {
                    session: lock(&s.core).descriptor.clone(),
                });
            }
        }
        Ok(response)
    }
}

fn archive_path(data_dir: &Path, id: &str) -> PathBuf {
    data_dir.join("sessions").join(format!("{id}.session"))
}

fn write_archive(data_dir: &Path, s: &Session, bytes: &[u8]) {
    let path = archive_path(data_dir, &s.id);
    if let Err(e) = write_file(&path, bytes) {
        log::warn!("session {}: archive write failed: {e}", s.id);
        s.broadcast(&Response::error(
            ErrorCode::Io,
            format!("archive write failed: {e}"),
        ));
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)
}

fn control_loop(
    data_dir: &Path,
    session: &Session,
    commands: Receiver<Command>,
    corrections: Receiver<CorrectionEvent>,
) {
    while let Ok(command) = commands.recv() {
        match command {
            Command::Train(config) => train(session, *config),
            Command::Round { config, realtime } => {
                run_round(data_dir, session, &config, realtime, &corrections)
            }
            Command::Shutdown => break,
        }
    }
}

fn train(session: &Session, config: TrainConfig) {
    let demos = lock(&session.core).demos.clone();
    let result = TrainingSession::train(demos, config);
    let failure = {
        let mut core = lock(&session.core);
        if core.machine.state() != SessionState::Training {
            return;
        }
        match result {
            Ok(t) => {
                core.teaching = Some(t);
                let _ = core.transition(SessionState::Correcting);
                None
            }
            Err(e) => {
                let _ = core.transition(SessionState::Demonstrating);
                Some(rejected(
                    format!("training failed: {e}"),
                    None,
                    SessionState::Demonstrating,
                ))
            }
        }
    };
    if let Some(f) = failure {
        session.broadcast(&f);
    }
    session.publish_state();
}

fn run_round(
    data_dir: &Path,
    session: &Session,
    config: &RoundConfig,
    realtime: bool,
    corrections: &Receiver<CorrectionEvent>,
) {
    let started = {
        let mut guard = lock(&session.core);
        let core = &mut *guard;
        let scenario = core.scenario.clone();
        match core.teaching.as_mut() {
            Some(t) => t.runner(&scenario, config).map_err(|e| e.to_string()),
            None => Err("session has no policy".into()),
        }
    };
    let mut runner = match started {
        Ok(r) => r,
        Err(message) => {
            {
                let mut core = lock(&session.core);
                if core.machine.state() == SessionState::RollingOut {
                    let _ = core.transition(SessionState::Correcting);
                }
            }
            session.broadcast(&rejected(message, None, SessionState::Correcting));
            session.publish_state();
            return;
        }
    };

    let clock = Instant::now();
    let mut failure = None;
    while !runner.is_done() {
        let t = runner.world().time();
        let mut incoming = Vec::new();
        if session.stop.swap(false, Ordering::SeqCst) {
            incoming.push(CorrectionEvent::new(t, CorrectionKind::Stop, vec![]));
        }
        incoming.extend(corrections.try_iter().map(|mut e| {
            e.t = t;
            e
        }));
        if let Err(e) = tick(session, &mut runner, incoming) {
            failure = Some(e);
            break;
        }
        if realtime {
            let due = Duration::from_secs_f64(runner.world().time().min(3600.0));
            if let Some(wait) = due.checked_sub(clock.elapsed()) {
                std::thread::sleep(wait);
            }
        }
    }
    let (summary, bytes) = {
        let mut guard = lock(&session.core);
        let core = &mut *guard;
        // Corrections are only queued under this lock while RollingOut, so
        // after this drain nothing can slip in. Late ones are logged as
        // discarded by the finished runner.
        let late: Vec<_> = corrections.try_iter().collect();
        if !late.is_empty() && failure.is_none() {
            match step(core, &mut runner, late) {
                Ok(report) => fan_out(session, &report),
                Err(e) => failure = Some(e),
            }
        }
        session.stop.store(false, Ordering::SeqCst);
        let teaching = core
            .teaching
            .as_mut()
            .expect("policy present during a round");
        let index = teaching.rounds.len();
        let r = teaching.record_round(runner.into_record());
        let summary = RoundSummary {
            index,
            outcome: r.outcome(),
            duration: r.duration(),
            corrections: r.corrections.len(),
            aspects: r.aspects,
        };
        let bytes = persist::to_bytes(&*teaching);
        core.descriptor.policy = Some(archive_path(data_dir, &session.id).display().to_string());
        if core.machine.state() == SessionState::RollingOut {
            let _ = core.transition(SessionState::Correcting);
        } else {
            core.touch();
        }
        (summary, bytes)
    };
    // write-behind: the archive is flushed once the round is over
    write_archive(data_dir, session, &bytes);
    if let Some(message) = failure {
        session.broadcast(&rejected(message, None, SessionState::Correcting));
    }
    session.broadcast(&Response::RoundFinished {
        session: session.id.clone(),
        round: summary,
    });
    session.publish_state();
}

fn step(
    core: &mut Core,
    runner: &mut RoundRunner,
    incoming: Vec<CorrectionEvent>,
) -> Result<TickReport, String> {
    let policy = &mut core
        .teaching
        .as_mut()
        .expect("policy present during a round")
        .policy;
    runner.tick(policy, incoming).map_err(|e| e.to_string())
}

fn fan_out(session: &Session, report: &TickReport) {
    lock(&session.subscribers).retain(|sub| match sub.decimator.filter(&session.id, report) {
        Some(t) => sub.sink.send(Response::Telemetry(t)).is_ok(),
        None => true,
    });
}

/// One control tick under the session lock, then telemetry fan-out.
fn tick(
    session: &Session,
    runner: &mut RoundRunner,
    incoming: Vec<CorrectionEvent>,
) -> Result<(), String> {
    let report = step(&mut lock(&session.core), runner, incoming)?;
    fan_out(session, &report);
    Ok(())
}
