//! Real-time WebSocket server.
//!
//! A physics thread steps the scenario against the wall clock and publishes
//! `state` frames on a bounded broadcast channel; a slow client skips the
//! oldest frames. Commands land in a mailbox where the newest value per key
//! wins; the physics thread applies them as they arrive and echoes a frame
//! straight away. The first client to connect steers; later clients only
//! watch.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use anyhow::Context;
use balsim::harness::{Scenario, Simulation};
use balsim::math::Vec3;
use futures_util::{SinkExt, StreamExt};
use serde::Deserialize;
use serde_json::json;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::broadcast;
use tokio_tungstenite::tungstenite::Message;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_RATE: f64 = 30.0;
/// Frames buffered per client before the oldest are dropped.
const FRAME_BUFFER: usize = 4;

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ClientMessage {
    SetTarget { task: String, pos: [f64; 3] },
    Toggle { what: String, on: bool },
    Reset,
}

/// Pending commands; a later write to the same key replaces the earlier one.
#[derive(Debug, Default)]
struct Mailbox {
    reset: bool,
    balance: Option<bool>,
    guides: BTreeMap<String, bool>,
    targets: BTreeMap<String, Vec3>,
}

impl Mailbox {
    fn post(&mut self, msg: ClientMessage) {
        match msg {
            ClientMessage::Reset => {
                // a reset supersedes everything queued before it
                *self = Mailbox {
                    reset: true,
                    ..Default::default()
                };
            }
            ClientMessage::SetTarget { task, pos } => {
                self.targets.insert(task, Vec3::from(pos));
            }
            ClientMessage::Toggle { what, on } => match what.strip_prefix("guide:") {
                Some(name) => {
                    self.guides.insert(name.to_owned(), on);
                }
                None => self.balance = Some(on),
            },
        }
    }

    fn is_empty(&self) -> bool {
        !self.reset && self.balance.is_none() && self.guides.is_empty() && self.targets.is_empty()
    }

    fn apply(self, sim: &mut Simulation) {
        if self.reset {
            sim.reset();
        }
        if let Some(b) = self.balance {
            sim.set_balance(b);
        }
        for (name, on) in self.guides {
            if let Err(e) = sim.set_guide(&name, on) {
                log::warn!("{e}");
            }
        }
        for (task, pos) in self.targets {
            if let Err(e) = sim.set_target(&task, pos) {
                log::warn!("{e}");
            }
        }
    }
}

struct Shared {
    mailbox: Mutex<Mailbox>,
    /// Wakes the physics thread when a command is posted.
    posted: Condvar,
    steering: AtomicBool,
    shutdown: AtomicBool,
    tasks: Vec<String>,
    guides: Vec<String>,
    scenario: String,
    rate: f64,
}

impl Shared {
    /// Rejects commands that name a task or guide the scenario lacks.
    fn check(&self, msg: &ClientMessage) -> Result<(), String> {
        match msg {
            ClientMessage::SetTarget { task, pos } => {
                if !self.tasks.contains(task) {
                    return Err(format!("unknown task `{task}`"));
                }
                if pos.iter().any(|x| !x.is_finite()) {
                    return Err("target position must be finite".into());
                }
            }
            ClientMessage::Toggle { what, .. } => match what.strip_prefix("guide:") {
                Some(name) if !self.guides.iter().any(|g| g == name) => {
                    return Err(format!("unknown guide `{name}`"));
                }
                Some(_) => {}
                None if what != "balance" => {
                    return Err(format!("cannot toggle `{what}`; expected `balance` or `guide:<name>`"));
                }
                None => {}
            },
            ClientMessage::Reset => {}
        }
        Ok(())
    }
}

fn publish(sim: &Simulation, frames: &broadcast::Sender<Arc<str>>) {
    match sim.frame().map(|f| serde_json::to_string(&f)) {
        Ok(Ok(text)) => {
            let _ = frames.send(text.into());
        }
        Ok(Err(e)) => log::error!("encoding frame: {e}"),
        Err(e) => log::error!("building frame: {e}"),
    }
}

fn physics_loop(mut sim: Simulation, shared: Arc<Shared>, frames: broadcast::Sender<Arc<str>>) {
    let period = Duration::from_secs_f64(1.0 / shared.rate);
    let h = sim.params().h;
    let start = Instant::now();
    let mut next = start;
    let mut sim_clock = 0.0;
    while !shared.shutdown.load(Ordering::Relaxed) {
        let wall = start.elapsed().as_secs_f64();
        let budget = Instant::now() + period.mul_f64(0.7);
        while sim_clock + h <= wall && Instant::now() < budget {
            if let Err(e) = sim.step() {
                log::error!("{e}; resetting");
                let _ = frames.send(error_frame(&e.to_string()).into());
                sim.reset();
            }
            sim_clock += h;
        }
        if sim_clock + h <= wall {
            // cannot keep up: drop the backlog rather than spiral
            sim_clock = wall;
        }
        publish(&sim, &frames);
        next += period;
        if next < Instant::now() {
            next = Instant::now();
        }
        // sleep until the next frame, but act on commands as they arrive
        let mut mailbox = shared.mailbox.lock().expect("mailbox poisoned");
        loop {
            if !mailbox.is_empty() {
                std::mem::take(&mut *mailbox).apply(&mut sim);
                publish(&sim, &frames);
            }
            let now = Instant::now();
            if now >= next || shared.shutdown.load(Ordering::Relaxed) {
                break;
            }
            mailbox = shared
                .posted
                .wait_timeout(mailbox, next - now)
                .expect("mailbox poisoned")
                .0;
        }
    }
}

fn error_frame(message: &str) -> String {
    json!({ "type": "error", "message": message }).to_string()
}

async fn client(stream: TcpStream, peer: SocketAddr, shared: Arc<Shared>, mut frames: broadcast::Receiver<Arc<str>>) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("{peer}: handshake failed: {e}");
            return;
        }
    };
    let steer = shared
        .steering
        .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
        .is_ok();
    log::info!("{peer}: connected ({})", if steer { "steering" } else { "read-only" });
    let (mut tx, mut rx) = ws.split();
    let hello = json!({
        "type": "hello",
        "protocol": PROTOCOL_VERSION,
        "role": if steer { "steer" } else { "observe" },
        "scenario": shared.scenario,
        "rate": shared.rate,
        "tasks": shared.tasks,
        "guides": shared.guides,
    });
    if tx.send(Message::text(hello.to_string())).await.is_err() {
        if steer {
            shared.steering.store(false, Ordering::Release);
        }
        return;
    }
    loop {
        tokio::select! {
            frame = frames.recv() => match frame {
                Ok(text) => {
                    if tx.send(Message::text(text.to_string())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::debug!("{peer}: dropped {n} frames"),
                Err(broadcast::error::RecvError::Closed) => break,
            },
            incoming = rx.next() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let reply = match serde_json::from_str::<ClientMessage>(&text) {
                    Err(e) => Some(error_frame(&format!("malformed message: {e}"))),
                    Ok(_) if !steer => Some(error_frame("read-only client: another client is steering")),
                    Ok(msg) => match shared.check(&msg) {
                        Err(e) => Some(error_frame(&e)),
                        Ok(()) => {
                            shared.mailbox.lock().expect("mailbox poisoned").post(msg);
                            shared.posted.notify_one();
                            None
                        }
                    },
                };
                if let Some(r) = reply {
                    if tx.send(Message::text(r)).await.is_err() {
                        break;
                    }
                }
            }
        }
    }
    if steer {
        shared.steering.store(false, Ordering::Release);
    }
    log::info!("{peer}: disconnected");
}

pub fn serve(scenario: Scenario, port: u16, rate: f64) -> anyhow::Result<()> {
    let sim = Simulation::new(scenario)?;
    let shared = Arc::new(Shared {
        mailbox: Mutex::new(Mailbox::default()),
        posted: Condvar::new(),
        steering: AtomicBool::new(false),
        shutdown: AtomicBool::new(false),
        tasks: sim.controller().targets.iter().map(|t| t.task_frame.clone()).collect(),
        guides: sim.controller().guides.iter().map(|g| g.name.clone()).collect(),
        scenario: sim.scenario().file.name.clone(),
        rate,
    });
    let runtime = tokio::runtime::Runtime::new().context("starting async runtime")?;
    runtime.block_on(async move {
        let addr = SocketAddr::from(([127, 0, 0, 1], port));
        let listener = TcpListener::bind(addr)
            .await
            .with_context(|| format!("cannot listen on {addr}"))?;
        println!("listening on ws://{addr}");
        let (frames, _) = broadcast::channel::<Arc<str>>(FRAME_BUFFER);
        let physics = {
            let shared = shared.clone();
            let frames = frames.clone();
            std::thread::spawn(move || physics_loop(sim, shared, frames))
        };
        loop {
            tokio::select! {
                accepted = listener.accept() => match accepted {
                    Ok((stream, peer)) => {
                        tokio::spawn(client(stream, peer, shared.clone(), frames.subscribe()));
                    }
                    Err(e) => log::warn!("accept failed: {e}"),
                },
                _ = tokio::signal::ctrl_c() => break,
            }
        }
        shared.shutdown.store(true, Ordering::Relaxed);
        shared.posted.notify_one();
        let _ = physics.join();
        Ok(())
    })
}
