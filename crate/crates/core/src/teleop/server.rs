//! WebSocket front end. One thread owns the session; socket threads talk to
//! it through an inbox (targets coalesce, latest wins) and a drop-oldest
//! outbox.

use std::collections::VecDeque;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tungstenite::{Message, WebSocket};

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::runtime::collect::QualityGate;

use super::protocol::{parse_client_line, ClientMessage, ServerMessage};
use super::session::TeleopSession;

pub const DEFAULT_PORT: u16 = 8765;
pub const STATE_RATE: f64 = 30.0;
pub const OUTBOX_BOUND: usize = 4;
const INBOX_BOUND: usize = 64;
/// Lag beyond which the realtime loop gives up catching up.
const MAX_LAG_STEPS: u64 = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pacing {
    /// 1 kHz wall-clock loop with state frames at 30 Hz.
    Realtime,
    /// Each inbound line advances the simulation by `steps` periods and is
    /// answered with exactly one state frame. Used for transcript replay.
    Lockstep { steps: usize },
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    /// Where recorded episodes go; `None` disables recording.
    pub out_dir: Option<PathBuf>,
    pub pacing: Pacing,
    pub gate: QualityGate,
}

impl ServeOptions {
    pub fn new(port: u16) -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], port)),
            out_dir: None,
            pacing: Pacing::Realtime,
            gate: QualityGate::default(),
        }
    }
}

/// Bounded FIFO that discards its oldest entry when full.
pub struct DropOldest<T> {
    items: Mutex<VecDeque<T>>,
    bound: usize,
    dropped: AtomicU64,
}

impl<T> DropOldest<T> {
    pub fn new(bound: usize) -> Self {
        Self {
            items: Mutex::new(VecDeque::with_capacity(bound)),
            bound: bound.max(1),
            dropped: AtomicU64::new(0),
        }
    }

    pub fn push(&self, item: T) {
        let mut q = self.items.lock().expect("outbox lock");
        if q.len() == self.bound {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(item);
    }

    pub fn pop(&self) -> Option<T> {
        self.items.lock().expect("outbox lock").pop_front()
    }

    pub fn len(&self) -> usize {
        self.items.lock().expect("outbox lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.items.lock().expect("outbox lock").clear();
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}

type Inbound = std::result::Result<ClientMessage, String>;

/// Client lines waiting for the sim thread. A new target replaces a target
/// still at the back of the queue.
pub struct Inbox {
    items: Mutex<VecDeque<Inbound>>,
    ready: Condvar,
}

impl Default for Inbox {
    fn default() -> Self {
        Self {
            items: Mutex::new(VecDeque::new()),
            ready: Condvar::new(),
        }
    }
}

impl Inbox {
    pub fn push(&self, item: Inbound) {
        let mut q = self.items.lock().expect("inbox lock");
        let is_target = |i: &Inbound| matches!(i, Ok(ClientMessage::Target { .. }));
        if is_target(&item) && q.back().is_some_and(is_target) {
            *q.back_mut().expect("nonempty") = item;
        } else if q.len() < INBOX_BOUND {
            q.push_back(item);
        } else {
            log::warn!("inbox full; dropping a client message");
        }
        self.ready.notify_one();
    }

    pub fn drain(&self) -> Vec<Inbound> {
        self.items.lock().expect("inbox lock").drain(..).collect()
    }

    pub fn wait_pop(&self, timeout: Duration) -> Option<Inbound> {
        let q = self.items.lock().expect("inbox lock");
        let (mut q, _) = self
            .ready
            .wait_timeout_while(q, timeout, |q| q.is_empty())
            .expect("inbox lock");
        q.pop_front()
    }
}

/// A running server. Dropping it without [`ServerHandle::shutdown`] leaves
/// the threads running.
pub struct ServerHandle {
    pub local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    outbox: Arc<DropOldest<String>>,
}

impl ServerHandle {
    /// State frames discarded because the client lagged.
    pub fn dropped_frames(&self) -> u64 {
        self.outbox.dropped()
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads {
            let _ = t.join();
        }
    }

    /// Blocks until the server threads exit.
    pub fn join(self) {
        for t in self.threads {
            let _ = t.join();
        }
    }
}

/// Binds and starts the sim and socket threads.
pub fn spawn(cfg: &SimConfig, opts: ServeOptions) -> Result<ServerHandle> {
    if let Pacing::Lockstep { steps: 0 } = opts.pacing {
        return Err(Error::InvalidArgument("lockstep needs at least one step per message".into()));
    }
    let session = TeleopSession::new(cfg, opts.out_dir.clone(), opts.gate.clone())?;
    let listener = TcpListener::bind(opts.addr).map_err(|e| Error::io(format!("bind {}", opts.addr), e))?;
    let local_addr = listener.local_addr().map_err(|e| Error::io("listener", e))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| Error::io("listener", e))?;
    let stop = Arc::new(AtomicBool::new(false));
    let inbox = Arc::new(Inbox::default());
    let outbox = Arc::new(DropOldest::new(OUTBOX_BOUND));
    let sim = {
        let (stop, inbox, outbox) = (stop.clone(), inbox.clone(), outbox.clone());
        let (pacing, dt) = (opts.pacing, cfg.scene.dt);
        std::thread::Builder::new()
            .name("teleop-sim".into())
            .spawn(move || sim_loop(session, pacing, dt, &stop, &inbox, &outbox))
            .map_err(|e| Error::io("spawn sim thread", e))?
    };
    let net = {
        let (stop, outbox) = (stop.clone(), outbox.clone());
        std::thread::Builder::new()
            .name("teleop-net".into())
            .spawn(move || accept_loop(listener, &stop, &inbox, &outbox))
            .map_err(|e| Error::io("spawn socket thread", e))?
    };
    log::info!("teleop bridge listening on ws://{local_addr}");
    Ok(ServerHandle {
        local_addr,
        stop,
        threads: vec![sim, net],
        outbox,
    })
}

/// Runs until the process is interrupted.
pub fn serve(cfg: &SimConfig, opts: ServeOptions) -> Result<()> {
    spawn(cfg, opts)?.join();
    Ok(())
}

fn apply(session: &mut TeleopSession, item: Inbound, outbox: &DropOldest<String>) {
    let err = match item {
        Ok(msg) => session.handle(&msg).err().map(|e| e.to_string()),
        Err(e) => Some(e),
    };
    if let Some(msg) = err {
        outbox.push(ServerMessage::error(msg).to_line());
    }
}

fn advance(session: &mut TeleopSession, stop: &AtomicBool) -> bool {
    if let Err(e) = session.step() {
        log::error!("simulation halted: {e}");
        stop.store(true, Ordering::SeqCst);
        return false;
    }
    true
}

fn sim_loop(
    mut session: TeleopSession,
    pacing: Pacing,
    dt: f64,
    stop: &AtomicBool,
    inbox: &Inbox,
    outbox: &DropOldest<String>,
) {
    let state = |s: &TeleopSession| ServerMessage::State(s.state()).to_line();
    match pacing {
        Pacing::Lockstep { steps } => {
            while !stop.load(Ordering::SeqCst) {
                let Some(item) = inbox.wait_pop(Duration::from_millis(20)) else {
                    continue;
                };
                apply(&mut session, item, outbox);
                for _ in 0..steps {
                    if !advance(&mut session, stop) {
                        return;
                    }
                }
                outbox.push(state(&session));
            }
        }
        Pacing::Realtime => {
            let start = Instant::now();
            let mut done = 0u64;
            let frame_of = |step: u64| (step as f64 * dt * STATE_RATE).floor() as u64;
            while !stop.load(Ordering::SeqCst) {
                let due = (start.elapsed().as_secs_f64() / dt) as u64;
                if due > done + MAX_LAG_STEPS {
                    log::warn!("simulation fell {} steps behind; skipping ahead", due - done);
                    done = due - 1;
                }
                while done < due {
                    for item in inbox.drain() {
                        apply(&mut session, item, outbox);
                    }
                    if !advance(&mut session, stop) {
                        return;
                    }
                    done += 1;
                    if frame_of(done) != frame_of(done - 1) {
                        outbox.push(state(&session));
                    }
                }
                std::thread::sleep(Duration::from_micros(500));
            }
        }
    }
}

fn accept_loop(listener: TcpListener, stop: &AtomicBool, inbox: &Inbox, outbox: &DropOldest<String>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("client {peer} connected");
                match client_session(stream, stop, inbox, outbox) {
                    Ok(()) => log::info!("client {peer} left"),
                    Err(e) => log::warn!("client {peer}: {e}"),
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                log::error!("accept failed: {e}");
                std::thread::sleep(Duration::from_millis(100));
            }
        }
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn client_session(
    stream: TcpStream,
    stop: &AtomicBool,
    inbox: &Inbox,
    outbox: &DropOldest<String>,
) -> std::result::Result<(), tungstenite::Error> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws: WebSocket<TcpStream> = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(2)))?;
    outbox.clear();
    ws.send(Message::text(ServerMessage::hello().to_line()))?;
    while !stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(Message::Text(text)) => {
                for line in text.as_str().lines().filter(|l| !l.trim().is_empty()) {
                    inbox.push(parse_client_line(line));
                }
            }
            Ok(Message::Binary(_)) => inbox.push(Err("binary frames are not supported".into())),
            Ok(Message::Close(_)) => {
                let _ = ws.flush();
                return Ok(());
            }
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e),
        }
        while let Some(line) = outbox.pop() {
            ws.send(Message::text(line))?;
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}
