//! Wall-clock driver. The kernel runs on the caller's thread; workers are
//! threads or child processes that exchange frames with it over channels or
//! pipes.

use std::collections::BTreeMap;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use crate::kernel::{Kernel, KernelConfig};
use crate::wire::{self, FrameReader, WorkerMsg};
use crate::worker::{Control, RealClock, WorkerCore};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WorkerMode {
    Thread,
    /// Child processes running `exe worker --id N`.
    Process { exe: PathBuf },
}

/// Client-side events fed to the master loop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Input {
    Line(String),
    /// The client connection changed; request ids start over.
    ConnectionReset,
    Shutdown,
}

enum Event {
    Input(Input),
    Bus(u32, Vec<u8>),
    Exit(u32),
}

/// Handle for feeding client input into a running [`Runtime`] from other
/// threads.
#[derive(Clone)]
pub struct InputSender(Sender<Event>);

impl InputSender {
    /// Returns `false` once the runtime is gone.
    pub fn send(&self, input: Input) -> bool {
        self.0.send(Event::Input(input)).is_ok()
    }
}

pub type Sink = Box<dyn FnMut(&str) + Send>;

struct WorkerHandle {
    tx: Sender<Vec<u8>>,
    child: Option<Child>,
}

/// Sends `Exit` when a worker thread ends without being told to.
struct ExitGuard {
    id: u32,
    bus: Sender<Event>,
    armed: bool,
}

impl Drop for ExitGuard {
    fn drop(&mut self) {
        if self.armed {
            let _ = self.bus.send(Event::Exit(self.id));
        }
    }
}

pub struct Runtime {
    kernel: Kernel,
    start: Instant,
    tx: Sender<Event>,
    rx: Receiver<Event>,
    workers: BTreeMap<u32, WorkerHandle>,
    next_worker: u32,
    mode: WorkerMode,
    sink: Sink,
    shutting_down: bool,
}

impl Runtime {
    pub fn new(cfg: KernelConfig, workers: usize, mode: WorkerMode, sink: Sink) -> std::io::Result<Self> {
        let (tx, rx) = mpsc::channel();
        let mut rt = Runtime {
            kernel: Kernel::new(cfg),
            start: Instant::now(),
            tx,
            rx,
            workers: BTreeMap::new(),
            next_worker: 1,
            mode,
            sink,
            shutting_down: false,
        };
        for _ in 0..workers.max(1) {
            rt.spawn_worker()?;
        }
        Ok(rt)
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn input(&self) -> InputSender {
        InputSender(self.tx.clone())
    }

    /// Milliseconds since the runtime started.
    pub fn now_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1000.0
    }

    pub fn worker_ids(&self) -> Vec<u32> {
        self.workers.keys().copied().collect()
    }

    pub fn spawn_worker(&mut self) -> std::io::Result<u32> {
        let id = self.next_worker;
        self.next_worker += 1;
        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        let bus = self.tx.clone();
        let child = match &self.mode {
            WorkerMode::Thread => {
                let opts = self.kernel.config().parse;
                thread::Builder::new().name(format!("worker-{id}")).spawn(move || {
                    let mut guard = ExitGuard { id, bus: bus.clone(), armed: true };
                    let mut core = WorkerCore::new(id, opts);
                    let clock = RealClock::new();
                    for bytes in rx {
                        let Ok(msg) = wire::decode::<WorkerMsg>(&bytes) else {
                            log::warn!("worker {id}: bad frame from master");
                            continue;
                        };
                        let control = core.handle(msg, &clock, &mut |f| {
                            let _ = bus.send(Event::Bus(id, wire::encode(&f)));
                        });
                        if control == Control::Shutdown {
                            guard.armed = false;
                            break;
                        }
                    }
                })?;
                None
            }
            WorkerMode::Process { exe } => {
                let mut child = Command::new(exe)
                    .arg("worker")
                    .arg("--id")
                    .arg(id.to_string())
                    .arg("--max-delay")
                    .arg(self.kernel.config().parse.max_delay_ms.to_string())
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdout = child.stdout.take().expect("piped");
                let stdin = child.stdin.take().expect("piped");
                thread::Builder::new().name(format!("worker-{id}-out")).spawn(move || {
                    let mut reader = FrameReader::new(stdout);
                    while let Ok(Some(frame)) = reader.next_frame() {
                        if bus.send(Event::Bus(id, frame)).is_err() {
                            return;
                        }
                    }
                    let _ = bus.send(Event::Exit(id));
                })?;
                thread::Builder::new().name(format!("worker-{id}-in")).spawn(move || {
                    let mut stdin = BufWriter::new(stdin);
                    for frame in rx {
                        if wire::write_frame(&mut stdin, &frame).is_err() {
                            return;
                        }
                    }
                })?;
                Some(child)
            }
        };
        self.workers.insert(id, WorkerHandle { tx, child });
        let now = self.now_ms();
        self.kernel.add_worker(id, now);
        self.flush();
        Ok(id)
    }

    /// Kills a worker abruptly. Process workers get SIGKILL; thread workers
    /// are cut off from the master and their late frames ignored.
    pub fn kill_worker(&mut self, id: u32) {
        if let Some(mut h) = self.workers.remove(&id) {
            if let Some(child) = h.child.as_mut() {
                let _ = child.kill();
                let _ = child.wait();
            }
            let now = self.now_ms();
            self.kernel.on_worker_exit(id, now);
            self.spawn_replacement();
            self.flush();
        }
    }

    fn spawn_replacement(&mut self) {
        if !self.shutting_down {
            if let Err(e) = self.spawn_worker() {
                log::error!("could not start a replacement worker: {e}");
            }
        }
    }

    /// Feeds a client line directly (same thread).
    pub fn submit(&mut self, line: &str) {
        let now = self.now_ms();
        self.kernel.handle_line(line, now);
        self.flush();
    }

    fn flush(&mut self) {
        for (w, bytes) in self.kernel.take_worker_output() {
            if let Some(h) = self.workers.get(&w) {
                let _ = h.tx.send(bytes);
            }
        }
        for line in self.kernel.take_client_output() {
            (self.sink)(&line);
        }
    }

    fn handle(&mut self, ev: Event) {
        let now = self.now_ms();
        match ev {
            Event::Input(Input::Line(line)) => self.kernel.handle_line(&line, now),
            Event::Input(Input::ConnectionReset) => self.kernel.reset_connection(),
            Event::Input(Input::Shutdown) => self.shutting_down = true,
            Event::Bus(w, bytes) => {
                if self.workers.contains_key(&w) {
                    self.kernel.on_bus_frame(w, &bytes, now);
                }
            }
            Event::Exit(w) => {
                if let Some(mut h) = self.workers.remove(&w) {
                    log::warn!("worker {w} exited");
                    if let Some(child) = h.child.as_mut() {
                        let _ = child.wait();
                    }
                    self.kernel.on_worker_exit(w, now);
                    self.spawn_replacement();
                }
            }
        }
        self.flush();
    }

    /// Processes events until `done` holds, a shutdown input arrives, or
    /// `timeout` passes. Returns whether `done` was reached.
    pub fn run_until(&mut self, mut done: impl FnMut(&Kernel) -> bool, timeout: Option<Duration>) -> bool {
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            if done(&self.kernel) {
                return true;
            }
            if self.shutting_down {
                return false;
            }
            let wait = match deadline {
                Some(d) => match d.checked_duration_since(Instant::now()) {
                    Some(left) => left.min(Duration::from_millis(100)),
                    None => return false,
                },
                None => Duration::from_millis(100),
            };
            match self.rx.recv_timeout(wait) {
                Ok(ev) => self.handle(ev),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return false,
            }
        }
    }

    /// Runs until the kernel has nothing in flight and nothing to dispatch.
    pub fn run_until_idle(&mut self, timeout: Option<Duration>) -> bool {
        self.run_until(Kernel::is_idle, timeout)
    }

    /// Serves input until a `quit` request or a shutdown input.
    pub fn serve(&mut self) {
        self.run_until(Kernel::quit_requested, None);
    }

    pub fn shutdown(&mut self) {
        self.shutting_down = true;
        let shutdown = wire::encode(&WorkerMsg::Shutdown);
        for (_, mut h) in std::mem::take(&mut self.workers) {
            let _ = h.tx.send(shutdown.clone());
            drop(h.tx);
            if let Some(child) = h.child.as_mut() {
                let deadline = Instant::now() + Duration::from_millis(500);
                while matches!(child.try_wait(), Ok(None)) && Instant::now() < deadline {
                    thread::sleep(Duration::from_millis(5));
                }
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.shutdown();
    }
}
