//! Deterministic driver: workers are in-process [`WorkerCore`]s on a virtual
//! clock, and every message crosses the same frame encoding as in the real
//! runtime. Events are ordered by (time, insertion order).

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use crate::kernel::{Kernel, KernelConfig};
use crate::wire::{self, WorkerMsg};
use crate::worker::{VirtualClock, WorkerClock, WorkerCore};

#[derive(Clone, Debug, PartialEq, Eq)]
enum Event {
    Line(String),
    ToWorker(u32, Vec<u8>),
    Bus(u32, Vec<u8>),
}

#[derive(PartialEq, Eq)]
struct Queued {
    at: u64,
    seq: u64,
    event: Event,
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

struct SimWorker {
    core: WorkerCore,
    free_at: f64,
}

/// Times are kept as integer microseconds in the queue so ordering is exact.
fn micros(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

pub struct SimRuntime {
    kernel: Kernel,
    now: f64,
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    workers: BTreeMap<u32, SimWorker>,
    next_worker: u32,
    client_log: Vec<(f64, String)>,
}

impl SimRuntime {
    pub fn new(cfg: KernelConfig, workers: usize) -> Self {
        let mut sim = SimRuntime {
            kernel: Kernel::new(cfg),
            now: 0.0,
            queue: BinaryHeap::new(),
            seq: 0,
            workers: BTreeMap::new(),
            next_worker: 1,
            client_log: Vec::new(),
        };
        for _ in 0..workers {
            sim.spawn_worker();
        }
        sim
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut Kernel {
        &mut self.kernel
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Every line sent to the client so far, with its virtual send time.
    pub fn client_log(&self) -> &[(f64, String)] {
        &self.client_log
    }

    pub fn spawn_worker(&mut self) -> u32 {
        let id = self.next_worker;
        self.next_worker += 1;
        let opts = self.kernel.config().parse;
        self.workers.insert(id, SimWorker { core: WorkerCore::new(id, opts), free_at: self.now });
        self.kernel.add_worker(id, self.now);
        self.flush();
        id
    }

    /// Kills a worker now. Frames it has not delivered yet are lost.
    pub fn kill_worker(&mut self, id: u32) {
        if self.workers.remove(&id).is_some() {
            self.kernel.on_worker_exit(id, self.now);
            self.flush();
        }
    }

    pub fn worker_ids(&self) -> Vec<u32> {
        self.workers.keys().copied().collect()
    }

    /// Queues a client line at virtual time `at_ms` (not before now).
    pub fn submit_at(&mut self, at_ms: f64, line: impl Into<String>) {
        self.push(at_ms.max(self.now), Event::Line(line.into()));
    }

    pub fn submit(&mut self, line: impl Into<String>) {
        self.submit_at(self.now, line);
    }

    fn push(&mut self, at: f64, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Queued { at: micros(at), seq: self.seq, event }));
    }

    fn flush(&mut self) {
        for (w, bytes) in self.kernel.take_worker_output() {
            self.push(self.now, Event::ToWorker(w, bytes));
        }
        for line in self.kernel.take_client_output() {
            self.client_log.push((self.now, line));
        }
    }

    /// Time of the next queued event.
    pub fn next_event_at(&self) -> Option<f64> {
        self.queue.peek().map(|Reverse(q)| q.at as f64 / 1000.0)
    }

    /// Processes one event. Returns `false` when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(q)) = self.queue.pop() else {
            return false;
        };
        self.now = self.now.max(q.at as f64 / 1000.0);
        match q.event {
            Event::Line(line) => self.kernel.handle_line(&line, self.now),
            Event::Bus(w, bytes) => {
                if self.workers.contains_key(&w) {
                    self.kernel.on_bus_frame(w, &bytes, self.now);
                }
            }
            Event::ToWorker(w, bytes) => self.deliver(w, &bytes),
        }
        self.flush();
        true
    }

    fn deliver(&mut self, w: u32, bytes: &[u8]) {
        let now = self.now;
        let Some(worker) = self.workers.get_mut(&w) else {
            return;
        };
        let msg: WorkerMsg = wire::decode(bytes).expect("master frames decode");
        let clock = VirtualClock::starting_at(worker.free_at.max(now));
        let mut frames = Vec::new();
        worker.core.handle(msg, &clock, &mut |f| frames.push((clock.now_ms(), wire::encode(&f))));
        worker.free_at = clock.now_ms();
        for (at, frame) in frames {
            self.push(at, Event::Bus(w, frame));
        }
    }

    /// Runs until no events remain.
    pub fn run_until_idle(&mut self) {
        while self.step() {}
    }

    /// Runs events up to and including time `t`.
    pub fn run_until(&mut self, t: f64) {
        while self.next_event_at().is_some_and(|at| at <= t) {
            self.step();
        }
        self.now = self.now.max(t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proofkernel_core::dag::SpanState;
    use serde_json::Value;

    fn open_line(text: &str) -> String {
        serde_json::json!({"id": 1, "cmd": "open", "text": text}).to_string()
    }

    #[test]
    fn independent_leaves_overlap() {
        let mut sim = SimRuntime::new(KernelConfig::default(), 2);
        sim.submit(open_line("lemma a : true . proof delay 100 . qed . lemma b : true . proof delay 100 . qed ."));
        sim.run_until_idle();
        assert_eq!(sim.now(), 100.0);
        let states: Vec<SpanState> = sim.kernel().status_map().into_iter().map(|(_, s)| s).collect();
        assert_eq!(states, [SpanState::Ok, SpanState::Ok]);
    }

    #[test]
    fn one_worker_serializes() {
        let mut sim = SimRuntime::new(KernelConfig::default(), 1);
        sim.submit(open_line("lemma a : true . proof delay 100 . qed . lemma b : true . proof delay 100 . qed ."));
        sim.run_until_idle();
        assert_eq!(sim.now(), 200.0);
    }

    #[test]
    fn crash_mid_task_redispatches() {
        let text = "def x = 3 . lemma a : x = 3 . proof delay 100 . qed . lemma b : x < 2 . proof delay 10 . qed .";
        let mut sim = SimRuntime::new(KernelConfig::default(), 2);
        sim.submit(open_line(text));
        sim.run_until(50.0);
        sim.kill_worker(1);
        sim.spawn_worker();
        sim.run_until_idle();
        let mut reference = SimRuntime::new(KernelConfig::default(), 1);
        reference.submit(open_line(text));
        reference.run_until_idle();
        assert_eq!(sim.kernel().status_map(), reference.kernel().status_map());
        assert_eq!(sim.kernel().counters().requeued, 1);
        assert_eq!(sim.kernel().counters().worker_deaths, 1);
    }

    #[test]
    fn every_line_gets_one_response() {
        let mut sim = SimRuntime::new(KernelConfig::default(), 1);
        sim.submit(open_line("def a = 1 ."));
        sim.submit("garbage");
        sim.submit(r#"{"id":2,"cmd":"status"}"#);
        sim.run_until_idle();
        let refs: Vec<Value> = sim
            .client_log()
            .iter()
            .map(|(_, l)| serde_json::from_str::<Value>(l).unwrap())
            .filter(|v| v.get("ref").is_some())
            .map(|v| v["ref"].clone())
            .collect();
        assert_eq!(refs, [serde_json::json!(1), Value::Null, serde_json::json!(2)]);
    }
}
