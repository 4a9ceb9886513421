//! Owns the simulation on a dedicated thread. Everything else talks to it
//! through a serialized request queue and reads immutable published snapshots.

use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use e2l_core::codec::Eui;
use e2l_core::control::{ConfigError, ScenarioConfig};
use e2l_core::engine::{Command, CommandError, SecurityView, Simulation, StateView};
use e2l_core::sim::{Micros, Pacer, SECOND};
use serde::Serialize;
use tokio::sync::{broadcast, oneshot, watch};

const PUBLISH_EVERY: Duration = Duration::from_secs(1);
const IDLE_WAIT: Duration = Duration::from_millis(250);
const MAX_PACED_WAIT: Duration = Duration::from_millis(50);
const FAST_CHUNK: Micros = 10 * SECOND;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunAction {
    Start,
    Stop,
    Reset,
}

impl std::str::FromStr for RunAction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "start" => Ok(RunAction::Start),
            "stop" => Ok(RunAction::Stop),
            "reset" => Ok(RunAction::Reset),
            other => Err(format!("unknown run action `{other}`")),
        }
    }
}

enum Request {
    Apply(Command, oneshot::Sender<Result<(), CommandError>>),
    Run(RunAction, oneshot::Sender<()>),
    Security(Eui, oneshot::Sender<Option<SecurityView>>),
    Shutdown,
}

/// One server-sent event: `snapshot` carries metrics, `event` a discrete occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamItem {
    pub event: &'static str,
    pub data: String,
}

/// Pre-serialized JSON views, replaced as a whole on every publish.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Published {
    pub state: String,
    pub metrics: String,
}

#[derive(Serialize)]
struct RuntimeState<'a> {
    running: bool,
    finished: bool,
    interactive: bool,
    error: Option<&'a str>,
    #[serde(flatten)]
    state: StateView,
}

#[derive(Debug, thiserror::Error)]
#[error("engine has stopped")]
pub struct EngineGone;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineOptions {
    /// 0 runs as fast as possible.
    pub pacing: f64,
    pub autostart: bool,
    /// Return from the engine thread once the scenario end is reached.
    pub exit_when_finished: bool,
}

#[derive(Clone)]
pub struct EngineHandle {
    tx: mpsc::Sender<Request>,
    published: watch::Receiver<Arc<Published>>,
    stream: broadcast::Sender<StreamItem>,
    interactive: bool,
}

impl EngineHandle {
    /// Mutations are only accepted in paced runs.
    pub fn interactive(&self) -> bool {
        self.interactive
    }

    pub fn published(&self) -> Arc<Published> {
        self.published.borrow().clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<StreamItem> {
        self.stream.subscribe()
    }

    async fn request<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Request) -> Result<T, EngineGone> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(make(tx)).map_err(|_| EngineGone)?;
        rx.await.map_err(|_| EngineGone)
    }

    /// Resolves once the engine has applied (or rejected) the command.
    pub async fn apply(&self, cmd: Command) -> Result<Result<(), CommandError>, EngineGone> {
        self.request(|tx| Request::Apply(cmd, tx)).await
    }

    pub async fn run(&self, action: RunAction) -> Result<(), EngineGone> {
        self.request(|tx| Request::Run(action, tx)).await
    }

    pub async fn security_view(&self, dev_eui: Eui) -> Result<Option<SecurityView>, EngineGone> {
        self.request(|tx| Request::Security(dev_eui, tx)).await
    }

    pub fn shutdown(&self) {
        let _ = self.tx.send(Request::Shutdown);
    }
}

struct Engine {
    config: ScenarioConfig,
    seed: u64,
    sim: Simulation,
    opts: EngineOptions,
    pacer: Pacer,
    running: bool,
    error: Option<String>,
    last_publish: Instant,
    published: watch::Sender<Arc<Published>>,
    stream: broadcast::Sender<StreamItem>,
}

/// Build the simulation and start its thread. The thread hands the final
/// simulation back when it exits.
pub fn spawn(
    config: ScenarioConfig,
    seed: Option<u64>,
    opts: EngineOptions,
) -> Result<(EngineHandle, JoinHandle<Simulation>), ConfigError> {
    let sim = Simulation::new(config.clone(), seed)?;
    let (tx, rx) = mpsc::channel();
    let (published_tx, published_rx) = watch::channel(Arc::new(Published::default()));
    let (stream, _) = broadcast::channel(1024);
    let mut engine = Engine {
        seed: sim.seed(),
        config,
        pacer: Pacer::new(opts.pacing, 0),
        sim,
        opts,
        running: opts.autostart,
        error: None,
        last_publish: Instant::now(),
        published: published_tx,
        stream: stream.clone(),
    };
    engine.publish(false);
    let handle = EngineHandle { tx, published: published_rx, stream, interactive: opts.pacing > 0.0 };
    let join = std::thread::Builder::new()
        .name("e2l-engine".into())
        .spawn(move || engine.run(rx))
        .expect("spawn engine thread");
    Ok((handle, join))
}

impl Engine {
    fn done(&self) -> bool {
        self.sim.is_finished() || self.error.is_some()
    }

    fn run(mut self, rx: mpsc::Receiver<Request>) -> Simulation {
        loop {
            let wait = self.step();
            match rx.recv_timeout(wait) {
                Ok(req) => {
                    if !self.handle(req) {
                        break;
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    if self.done() || !self.running {
                        break;
                    }
                    std::thread::sleep(wait);
                }
            }
            if self.last_publish.elapsed() >= PUBLISH_EVERY {
                self.publish(true);
            }
            if self.opts.exit_when_finished && self.done() {
                break;
            }
        }
        self.publish(true);
        self.sim
    }

    /// Advance the simulation and return how long to wait for requests.
    fn step(&mut self) -> Duration {
        if !self.running || self.done() {
            return IDLE_WAIT;
        }
        let (target, fast) = if self.opts.pacing > 0.0 {
            (self.pacer.sim_now(), false)
        } else {
            (self.sim.now().saturating_add(FAST_CHUNK), true)
        };
        if let Err(e) = self.sim.run_until(target) {
            log::error!("simulation halted: {e}");
            self.error = Some(e.to_string());
        }
        self.forward_events();
        if fast || self.done() {
            return Duration::ZERO;
        }
        match self.sim.next_event_time() {
            Some(t) => self.pacer.wait_for(t).min(MAX_PACED_WAIT),
            None => MAX_PACED_WAIT,
        }
    }

    fn handle(&mut self, req: Request) -> bool {
        match req {
            Request::Apply(cmd, reply) => {
                let result = self.sim.apply(cmd);
                self.forward_events();
                self.publish(false);
                let _ = reply.send(result);
            }
            Request::Run(action, reply) => {
                match action {
                    RunAction::Start => {
                        self.running = true;
                        self.pacer.rebase(self.sim.now());
                    }
                    RunAction::Stop => self.running = false,
                    RunAction::Reset => {
                        self.sim = Simulation::new(self.config.clone(), Some(self.seed)).expect("config was valid at spawn");
                        self.error = None;
                        self.pacer.rebase(0);
                    }
                }
                self.publish(false);
                let _ = reply.send(());
            }
            Request::Security(dev_eui, reply) => {
                let _ = reply.send(self.sim.security_view(dev_eui));
            }
            Request::Shutdown => return false,
        }
        true
    }

    fn forward_events(&mut self) {
        for e in self.sim.drain_events() {
            let data = serde_json::to_string(&e).expect("events serialize");
            let _ = self.stream.send(StreamItem { event: "event", data });
        }
    }

    fn publish(&mut self, stream_snapshot: bool) {
        let runtime = RuntimeState {
            running: self.running,
            finished: self.sim.is_finished(),
            interactive: self.opts.pacing > 0.0,
            error: self.error.as_deref(),
            state: self.sim.state(),
        };
        let published = Published {
            state: serde_json::to_string(&runtime).expect("state serializes"),
            metrics: serde_json::to_string(&self.sim.snapshot()).expect("metrics serialize"),
        };
        if stream_snapshot {
            let _ = self.stream.send(StreamItem { event: "snapshot", data: published.metrics.clone() });
        }
        self.published.send_replace(Arc::new(published));
        self.last_publish = Instant::now();
    }
}
