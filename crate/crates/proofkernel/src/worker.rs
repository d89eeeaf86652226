//! Worker side of the master/worker split. [`WorkerCore`] is a pure message
//! handler; the drivers in `runtime` and `sim` feed it frames and carry its
//! output onto the bus.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::time::{Duration, Instant};

use base64::Engine as _;
use base64::engine::general_purpose::STANDARD as B64;
use proofkernel_core::dag::{SpanState, TaskId};
use proofkernel_core::document::SpanId;
use proofkernel_core::script::{CheckOutcome, ParseOptions, Payload, Sleeper, check_proof, parse_document_with};
use proofkernel_core::snapshot::{BlobKey, Snapshot, resolve};

use crate::wire::{self, BusFrame, Feedback, FeedbackKind, FrameReader, MasterMsg, WorkerMsg};

/// Time source for a worker. Real workers sleep; simulated ones advance a
/// counter.
pub trait WorkerClock {
    fn now_ms(&self) -> f64;
    fn sleep_ms(&self, ms: u64);
}

pub struct RealClock {
    start: Instant,
}

impl RealClock {
    pub fn new() -> Self {
        RealClock { start: Instant::now() }
    }
}

impl Default for RealClock {
    fn default() -> Self {
        Self::new()
    }
}

impl WorkerClock for RealClock {
    fn now_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1000.0
    }

    fn sleep_ms(&self, ms: u64) {
        std::thread::sleep(Duration::from_millis(ms));
    }
}

/// A clock that only moves when slept on.
#[derive(Debug)]
pub struct VirtualClock {
    now: std::cell::Cell<f64>,
}

impl VirtualClock {
    pub fn starting_at(ms: f64) -> Self {
        VirtualClock { now: std::cell::Cell::new(ms) }
    }
}

impl WorkerClock for VirtualClock {
    fn now_ms(&self) -> f64 {
        self.now.get()
    }

    fn sleep_ms(&self, ms: u64) {
        self.now.set(self.now.get() + ms as f64);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Shutdown,
}

struct Parked {
    task: TaskId,
    version: u64,
    span: SpanId,
    snapshot: Snapshot,
    lemma: String,
    missing: BTreeSet<BlobKey>,
}

struct Emitter<'a> {
    worker: u32,
    seq: &'a mut u64,
    out: &'a mut dyn FnMut(BusFrame),
}

impl Emitter<'_> {
    fn send(&mut self, msg: MasterMsg) {
        *self.seq += 1;
        (self.out)(BusFrame { worker: self.worker, seq: *self.seq, msg });
    }
}

struct ProgressSleeper<'a, 'b> {
    clock: &'a dyn WorkerClock,
    emit: &'a RefCell<Emitter<'b>>,
    task: TaskId,
    version: u64,
    span: SpanId,
    started: f64,
}

impl Sleeper for ProgressSleeper<'_, '_> {
    fn sleep_ms(&self, ms: u64) {
        self.clock.sleep_ms(ms);
        self.emit.borrow_mut().send(MasterMsg::Feedback(Feedback {
            exec_ref: self.task,
            version: self.version,
            span: self.span,
            kind: FeedbackKind::Progress,
            state: SpanState::Running,
            msg: format!("delay {ms}"),
            ms: self.clock.now_ms() - self.started,
        }));
    }
}

/// Share-nothing proof checker. Its only state is a cache of blob contents
/// for the current assignment and its sequence counter.
pub struct WorkerCore {
    id: u32,
    seq: u64,
    opts: ParseOptions,
    blobs: BTreeMap<BlobKey, Vec<u8>>,
    parked: Option<Parked>,
}

impl WorkerCore {
    pub fn new(id: u32, opts: ParseOptions) -> Self {
        WorkerCore { id, seq: 0, opts, blobs: BTreeMap::new(), parked: None }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    /// Handles one message from the master, emitting bus frames through
    /// `out`.
    pub fn handle(&mut self, msg: WorkerMsg, clock: &dyn WorkerClock, out: &mut dyn FnMut(BusFrame)) -> Control {
        match msg {
            WorkerMsg::Shutdown => return Control::Shutdown,
            WorkerMsg::Assign { task, version, span, snapshot, lemma } => {
                let wanted: BTreeSet<BlobKey> = snapshot.blob_keys.iter().copied().collect();
                self.blobs.retain(|k, _| wanted.contains(k));
                let missing: BTreeSet<BlobKey> = wanted.into_iter().filter(|k| !self.blobs.contains_key(k)).collect();
                let mut emit = Emitter { worker: self.id, seq: &mut self.seq, out };
                for key in &missing {
                    emit.send(MasterMsg::FetchRequest { key: *key });
                }
                self.parked = Some(Parked { task, version, span, snapshot, lemma, missing });
            }
            WorkerMsg::FetchReply { key, bytes } => {
                let Some(parked) = self.parked.as_mut() else {
                    return Control::Continue;
                };
                match bytes.map(|b| B64.decode(b)) {
                    Some(Ok(bytes)) => {
                        parked.missing.remove(&key);
                        self.blobs.insert(key, bytes);
                    }
                    other => {
                        let reason = match other {
                            Some(Err(e)) => format!("blob {key} undecodable: {e}"),
                            _ => format!("blob {key} unavailable"),
                        };
                        let parked = self.parked.take().expect("checked above");
                        let mut emit = Emitter { worker: self.id, seq: &mut self.seq, out };
                        emit.send(MasterMsg::Abandoned { task: parked.task, version: parked.version, reason });
                        return Control::Continue;
                    }
                }
            }
        }
        if self.parked.as_ref().is_some_and(|p| p.missing.is_empty()) {
            let parked = self.parked.take().expect("checked above");
            self.run(parked, clock, out);
        }
        Control::Continue
    }

    fn run(&mut self, job: Parked, clock: &dyn WorkerClock, out: &mut dyn FnMut(BusFrame)) {
        let emit = RefCell::new(Emitter { worker: self.id, seq: &mut self.seq, out });
        let started = clock.now_ms();
        let feedback = |kind, state, msg: String, ms| {
            MasterMsg::Feedback(Feedback {
                exec_ref: job.task,
                version: job.version,
                span: job.span,
                kind,
                state,
                msg,
                ms,
            })
        };
        let abandon = |reason: String| MasterMsg::Abandoned { task: job.task, version: job.version, reason };
        emit.borrow_mut().send(feedback(FeedbackKind::Status, SpanState::Running, String::new(), 0.0));

        let item = match parse_document_with(&job.lemma, &self.opts) {
            Ok(mut items) if items.len() == 1 && matches!(items[0].payload, Payload::Lemma { .. }) => items.remove(0),
            Ok(_) => return emit.borrow_mut().send(abandon("payload is not a single lemma".into())),
            Err(e) => return emit.borrow_mut().send(abandon(format!("payload does not parse: {e}"))),
        };
        let blobs = &self.blobs;
        let env = match resolve(&job.snapshot, |k| blobs.get(&k).cloned()) {
            Ok(env) => env,
            Err(e) => return emit.borrow_mut().send(abandon(e.to_string())),
        };
        let sleeper =
            ProgressSleeper { clock, emit: &emit, task: job.task, version: job.version, span: job.span, started };
        let outcome = check_proof(&item, &env, &sleeper);
        let ms = clock.now_ms() - started;

        // Verdict states come from the master once it commits the result;
        // until then the span is still running.
        let mut emit = emit.into_inner();
        if let CheckOutcome::Fail { at, message } = &outcome {
            emit.send(feedback(FeedbackKind::Diagnostic, SpanState::Running, format!("{at}: {message}"), ms));
        }
        emit.send(feedback(FeedbackKind::Timing, SpanState::Running, format!("{ms:.1} ms"), ms));
        emit.send(MasterMsg::TaskResult { task: job.task, version: job.version, outcome, ms });
    }
}

/// Body of the hidden `worker` subcommand: frames in on `input`, bus frames
/// out on `output`.
pub fn serve_process(id: u32, opts: ParseOptions, input: impl Read, mut output: impl Write) -> std::io::Result<()> {
    let mut core = WorkerCore::new(id, opts);
    let clock = RealClock::new();
    let mut reader = FrameReader::new(input);
    let mut failed = None;
    while let Some(frame) = reader.next_frame()? {
        let msg: WorkerMsg = match wire::decode(&frame) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("worker {id}: dropping bad frame: {e}");
                continue;
            }
        };
        let control = core.handle(msg, &clock, &mut |f| {
            if failed.is_none() {
                if let Err(e) = wire::write_frame(&mut output, &wire::encode(&f)) {
                    failed = Some(e);
                }
            }
        });
        if let Some(e) = failed.take() {
            return Err(e);
        }
        if control == Control::Shutdown {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigUint;
    use proofkernel_core::script::NumEnv;
    use proofkernel_core::snapshot::{BlobStore, trim};

    fn assign(env: &NumEnv, store: &mut BlobStore, threshold: usize, lemma: &str) -> WorkerMsg {
        WorkerMsg::Assign {
            task: TaskId(9),
            version: 1,
            span: SpanId(4),
            snapshot: trim(env, 1, 0, store, threshold),
            lemma: lemma.into(),
        }
    }

    fn collect(core: &mut WorkerCore, msg: WorkerMsg, clock: &dyn WorkerClock) -> Vec<BusFrame> {
        let mut out = Vec::new();
        core.handle(msg, clock, &mut |f| out.push(f));
        out
    }

    fn result_of(frames: &[BusFrame]) -> Option<&CheckOutcome> {
        frames.iter().find_map(|f| match &f.msg {
            MasterMsg::TaskResult { outcome, .. } => Some(outcome),
            _ => None,
        })
    }

    #[test]
    fn inline_assignment_runs_immediately() {
        let mut env = NumEnv::new();
        env.bind("a", BigUint::from(2u32));
        let mut store = BlobStore::new();
        let clock = VirtualClock::starting_at(100.0);
        let mut core = WorkerCore::new(1, ParseOptions::default());
        let frames =
            collect(&mut core, assign(&env, &mut store, 4096, "lemma t : a = 2 . proof delay 30 . qed ."), &clock);
        assert!(result_of(&frames).unwrap().is_ok());
        let seqs: Vec<u64> = frames.iter().map(|f| f.seq).collect();
        assert_eq!(seqs, (1..=frames.len() as u64).collect::<Vec<_>>());
        let kinds: Vec<FeedbackKind> = frames
            .iter()
            .filter_map(|f| match &f.msg {
                MasterMsg::Feedback(fb) => Some(fb.kind),
                _ => None,
            })
            .collect();
        assert_eq!(
            kinds,
            [FeedbackKind::Status, FeedbackKind::Progress, FeedbackKind::Timing]
        );
        assert_eq!(clock.now_ms(), 130.0);
    }

    #[test]
    fn blob_fetch_then_run() {
        let mut env = NumEnv::new();
        env.bind("big", BigUint::from(7u32).pow(5000));
        let mut store = BlobStore::new();
        let clock = VirtualClock::starting_at(0.0);
        let mut core = WorkerCore::new(2, ParseOptions::default());
        let frames = collect(&mut core, assign(&env, &mut store, 64, "lemma t : big = big . proof qed ."), &clock);
        let [BusFrame { msg: MasterMsg::FetchRequest { key }, .. }] = frames.as_slice() else {
            panic!("expected one fetch request, got {frames:?}");
        };
        let bytes = B64.encode(store.get(*key).unwrap());
        let frames = collect(&mut core, WorkerMsg::FetchReply { key: *key, bytes: Some(bytes) }, &clock);
        assert!(result_of(&frames).unwrap().is_ok());
        assert!(frames[0].seq == 2);
    }

    #[test]
    fn missing_blob_abandons() {
        let mut env = NumEnv::new();
        env.bind("big", BigUint::from(7u32).pow(5000));
        let mut store = BlobStore::new();
        let clock = VirtualClock::starting_at(0.0);
        let mut core = WorkerCore::new(2, ParseOptions::default());
        let frames = collect(&mut core, assign(&env, &mut store, 64, "lemma t : true . proof qed ."), &clock);
        let MasterMsg::FetchRequest { key } = frames[0].msg else { panic!() };
        let frames = collect(&mut core, WorkerMsg::FetchReply { key, bytes: None }, &clock);
        assert!(matches!(frames[0].msg, MasterMsg::Abandoned { task: TaskId(9), .. }));
    }

    #[test]
    fn failing_proof_reports_diagnostic() {
        let env = NumEnv::new();
        let mut store = BlobStore::new();
        let clock = VirtualClock::starting_at(0.0);
        let mut core = WorkerCore::new(1, ParseOptions::default());
        let frames = collect(&mut core, assign(&env, &mut store, 4096, "lemma t : true . proof abort . qed ."), &clock);
        let diag = frames
            .iter()
            .find_map(|f| match &f.msg {
                MasterMsg::Feedback(fb) if fb.kind == FeedbackKind::Diagnostic => Some(fb.msg.clone()),
                _ => None,
            })
            .unwrap();
        assert_eq!(diag, "step 0: aborted");
        assert!(!result_of(&frames).unwrap().is_ok());
    }

    #[test]
    fn shutdown_stops() {
        let mut core = WorkerCore::new(1, ParseOptions::default());
        let clock = VirtualClock::starting_at(0.0);
        assert_eq!(core.handle(WorkerMsg::Shutdown, &clock, &mut |_| {}), Control::Shutdown);
    }
}
