//! The master: a single-threaded state machine that owns the document, the
//! task graph, promises and the blob store. Drivers hand it client lines and
//! bus frames and carry away what it queues for clients and workers.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use base64::Engine as _;
use base64::engine::general_purpose::STANDARD as B64;
use proofkernel_core::dag::{
    Availability, Completion, MemoTable, SpanState, TaskGraph, TaskId, TaskKind, TaskOutcome, TaskState,
};
use proofkernel_core::document::{DocumentVersion, Edit, EditError, SpanId, SpanKind, diff};
use proofkernel_core::promise::{LogicalEnvironment, Offender, ProofPromise, Soundness};
use proofkernel_core::script::{CheckOutcome, NumEnv, ParseOptions, ParsedSpan, Payload, elaborate};
use proofkernel_core::snapshot::{BlobStore, DEFAULT_INLINE_THRESHOLD, Snapshot, trim};
use serde::Serialize;
use serde_json::{Map, Value, json};

use crate::protocol::{self, Command, Request};
use crate::wire::{self, BusFrame, Feedback, FeedbackKind, MasterMsg, WorkerMsg};

#[derive(Clone, Debug)]
pub struct KernelConfig {
    /// Only run leaves of observed spans.
    pub lazy: bool,
    pub inline_threshold: usize,
    pub parse: ParseOptions,
    /// Decode every assignment frame again before sending it and compare.
    pub verify_assignments: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            lazy: false,
            inline_threshold: DEFAULT_INLINE_THRESHOLD,
            parse: ParseOptions::default(),
            verify_assignments: cfg!(debug_assertions),
        }
    }
}

/// Counters reported by the `metrics` command. The first two reset whenever
/// a new document version is accepted.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Counters {
    pub tasks_executed: u64,
    pub tasks_skipped_memo: u64,
    pub tasks_executed_total: u64,
    pub tasks_skipped_memo_total: u64,
    pub leaves_dispatched: u64,
    pub bytes_on_bus: u64,
    pub bytes_to_workers: u64,
    pub frames_forwarded: u64,
    pub frames_dropped_stale: u64,
    pub malformed_frames: u64,
    pub seq_gaps: u64,
    pub seq_violations: u64,
    pub stale_results: u64,
    pub duplicate_results: u64,
    pub unknown_results: u64,
    pub fetch_requests: u64,
    pub dangling_fetches: u64,
    pub abandoned: u64,
    pub requeued: u64,
    pub worker_deaths: u64,
    pub versions_released: u64,
    pub blobs_evicted: u64,
    pub requests: u64,
    pub error_responses: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObserveRecord {
    pub request: u64,
    pub span: SpanId,
    pub at_ms: f64,
    pub first_verdict_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpanReport {
    pub span: SpanId,
    pub name: String,
    pub kind: SpanKind,
    pub state: SpanState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msg: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub force_count: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forced: Option<bool>,
}

#[derive(Clone, Copy, Debug, Default)]
struct WorkerSlot {
    busy: Option<TaskId>,
    last_seq: u64,
}

#[derive(Clone, Copy, Debug)]
struct InFlight {
    worker: u32,
    /// Version whose blobs the assignment references.
    holder: u64,
}

pub struct Kernel {
    cfg: KernelConfig,
    version: u64,
    doc: Option<DocumentVersion>,
    graph: Option<TaskGraph>,
    /// Environment at each available node of the current graph.
    envs: Vec<Option<Arc<NumEnv>>>,
    memo: MemoTable,
    promises: BTreeMap<TaskId, ProofPromise>,
    blobs: BlobStore,
    snapshots: BTreeMap<usize, Snapshot>,
    observed: BTreeSet<SpanId>,
    workers: BTreeMap<u32, WorkerSlot>,
    inflight: BTreeMap<TaskId, InFlight>,
    seen_ids: BTreeSet<u64>,
    /// Last state the client was told for each span.
    client_view: BTreeMap<SpanId, SpanState>,
    task_ms: BTreeMap<TaskId, f64>,
    task_msg: BTreeMap<TaskId, String>,
    observes: Vec<ObserveRecord>,
    counters: Counters,
    tag: u64,
    master_seq: u64,
    next_span_id: u64,
    next_task_id: u64,
    client_out: Vec<String>,
    worker_out: Vec<(u32, Vec<u8>)>,
    quit: bool,
}

impl Kernel {
    pub fn new(cfg: KernelConfig) -> Self {
        Kernel {
            cfg,
            version: 0,
            doc: None,
            graph: None,
            envs: Vec::new(),
            memo: MemoTable::new(),
            promises: BTreeMap::new(),
            blobs: BlobStore::new(),
            snapshots: BTreeMap::new(),
            observed: BTreeSet::new(),
            workers: BTreeMap::new(),
            inflight: BTreeMap::new(),
            seen_ids: BTreeSet::new(),
            client_view: BTreeMap::new(),
            task_ms: BTreeMap::new(),
            task_msg: BTreeMap::new(),
            observes: Vec::new(),
            counters: Counters::default(),
            tag: 0,
            master_seq: 0,
            next_span_id: 1,
            next_task_id: 1,
            client_out: Vec::new(),
            worker_out: Vec::new(),
            quit: false,
        }
    }

    pub fn config(&self) -> &KernelConfig {
        &self.cfg
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn document(&self) -> Option<&DocumentVersion> {
        self.doc.as_ref()
    }

    pub fn graph(&self) -> Option<&TaskGraph> {
        self.graph.as_ref()
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn observes(&self) -> &[ObserveRecord] {
        &self.observes
    }

    pub fn quit_requested(&self) -> bool {
        self.quit
    }

    /// Promise of the lemma at span `id` in the current version.
    pub fn promise(&self, id: SpanId) -> Option<&ProofPromise> {
        let (graph, doc) = (self.graph.as_ref()?, self.doc.as_ref()?);
        let leaf = graph.leaf_task(doc.index_of(id)?)?;
        self.promises.get(&leaf.id)
    }

    /// Queued protocol lines (responses and feedback) for the client.
    pub fn take_client_output(&mut self) -> Vec<String> {
        std::mem::take(&mut self.client_out)
    }

    /// Queued frames for workers.
    pub fn take_worker_output(&mut self) -> Vec<(u32, Vec<u8>)> {
        std::mem::take(&mut self.worker_out)
    }

    /// Request ids are unique per connection; a new connection starts over.
    pub fn reset_connection(&mut self) {
        self.seen_ids.clear();
    }

    pub fn add_worker(&mut self, id: u32, now: f64) {
        self.workers.insert(id, WorkerSlot::default());
        self.pump(now);
    }

    pub fn worker_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.workers.keys().copied()
    }

    /// A worker went away; whatever it was running goes back to the queue.
    pub fn on_worker_exit(&mut self, id: u32, now: f64) {
        if self.workers.remove(&id).is_none() {
            return;
        }
        self.counters.worker_deaths += 1;
        let lost: Vec<TaskId> = self.inflight.iter().filter(|(_, f)| f.worker == id).map(|(t, _)| *t).collect();
        for task in lost {
            self.inflight.remove(&task);
            if let Some(graph) = self.graph.as_mut() {
                if graph.requeue(task).unwrap_or(false) {
                    self.counters.requeued += 1;
                }
            }
        }
        self.release_unreferenced();
        self.pump(now);
    }

    /// Nothing is in flight and nothing more will be dispatched.
    pub fn is_idle(&self) -> bool {
        self.inflight.is_empty() && self.dispatchable().is_empty()
    }

    /// Span ids with their current state, in document order.
    pub fn status_map(&self) -> Vec<(SpanId, SpanState)> {
        match &self.graph {
            Some(g) => (0..g.span_count()).map(|i| (g.span_id(i), g.span_state(i))).collect(),
            None => Vec::new(),
        }
    }

    /// Spans as the client currently sees them.
    pub fn client_view(&self) -> &BTreeMap<SpanId, SpanState> {
        &self.client_view
    }

    pub fn soundness(&self) -> Soundness {
        self.logical_environment().soundness()
    }

    // ---- client side -------------------------------------------------------

    /// Handles one protocol line. Exactly one response is queued.
    pub fn handle_line(&mut self, line: &str, now: f64) {
        self.counters.requests += 1;
        match protocol::parse_request(line) {
            Ok(req) => self.handle_request(req, now),
            Err(bad) => self.respond_err(bad.id, &bad.error, None),
        }
    }

    pub fn handle_request(&mut self, req: Request, now: f64) {
        if !self.seen_ids.insert(req.id) {
            return self.respond_err(Some(req.id), "duplicate request id", None);
        }
        let id = req.id;
        match req.command {
            Command::Open { text } => {
                let fields = self.load(text);
                self.respond_ok(id, fields);
                self.pump(now);
            }
            Command::Edit { base_version, from, to, insert } => {
                match self.change(&Edit { base_version, from, to, insert }) {
                    Ok(fields) => {
                        self.respond_ok(id, fields);
                        self.pump(now);
                    }
                    Err(EditError::StaleBase { expected, got }) => self.respond_err(
                        Some(id),
                        "stale base",
                        Some(&format!("document is at version {expected}, edit targets {got}")),
                    ),
                    Err(e @ EditError::InvalidRange { .. }) => {
                        self.respond_err(Some(id), "invalid range", Some(&e.to_string()))
                    }
                }
            }
            Command::Observe { span } => {
                if self.doc.as_ref().and_then(|d| d.index_of(span)).is_none() {
                    return self.respond_err(Some(id), "unknown span", Some(&format!("no span {span}")));
                }
                self.observe(id, span, now);
                let mut m = Map::new();
                m.insert("span".into(), json!(span));
                self.respond_ok(id, m);
                self.pump(now);
            }
            Command::Unobserve => {
                self.observed.clear();
                self.respond_ok(id, Map::new());
            }
            Command::Status => {
                let fields = self.status_fields();
                self.respond_ok(id, fields);
            }
            Command::Metrics => {
                let mut m = Map::new();
                m.insert("metrics".into(), self.metrics_json());
                self.respond_ok(id, m);
            }
            Command::Quit => {
                self.quit = true;
                self.respond_ok(id, Map::new());
            }
        }
    }

    fn respond_ok(&mut self, id: u64, fields: Map<String, Value>) {
        self.client_out.push(protocol::ok_response(id, fields));
    }

    fn respond_err(&mut self, id: Option<u64>, error: &str, detail: Option<&str>) {
        self.counters.error_responses += 1;
        self.client_out.push(protocol::error_response(id, error, detail));
    }

    /// Replaces the document. Version numbers keep increasing across opens.
    pub fn open(&mut self, text: String, now: f64) -> Map<String, Value> {
        let fields = self.load(text);
        self.pump(now);
        fields
    }

    pub fn edit(&mut self, edit: &Edit, now: f64) -> Result<Map<String, Value>, EditError> {
        let fields = self.change(edit)?;
        self.pump(now);
        Ok(fields)
    }

    fn load(&mut self, text: String) -> Map<String, Value> {
        let version = self.version + 1;
        let doc = DocumentVersion::open(text, version, self.next_span_id, self.cfg.parse);
        let graph = TaskGraph::build_from(&doc, self.next_task_id);
        let n = doc.spans().len();
        self.envs = vec![None; n + 1];
        self.envs[0] = Some(Arc::new(NumEnv::new()));
        self.promises.clear();
        self.observed.clear();
        self.task_ms.clear();
        self.task_msg.clear();
        self.install(doc, graph, Vec::new());
        self.span_table()
    }

    fn change(&mut self, edit: &Edit) -> Result<Map<String, Value>, EditError> {
        let Some(old) = self.doc.as_ref() else {
            return Err(EditError::StaleBase { expected: self.version, got: edit.base_version });
        };
        let doc = old.apply_edit(edit)?;
        let inv = diff(old, &doc);
        let graph = self.graph.as_ref().expect("graph exists with a document");
        let out = graph.invalidate(&doc, &inv, &self.memo);
        let n = doc.spans().len();
        let carry = inv.first_spine_invalid.unwrap_or(n).min(n).min(old.spans().len());
        self.envs.truncate(carry + 1);
        self.envs.resize(n + 1, None);
        for t in &out.retired {
            self.promises.remove(&t.id);
        }
        let live: BTreeSet<TaskId> = out.graph.tasks().map(|t| t.id).collect();
        self.task_ms.retain(|t, _| live.contains(t));
        self.task_msg.retain(|t, _| live.contains(t));
        self.install(doc, out.graph, out.memo_satisfied);
        Ok(self.span_table())
    }

    fn install(&mut self, doc: DocumentVersion, graph: TaskGraph, memo_satisfied: Vec<TaskId>) {
        self.version = doc.version();
        self.next_span_id = doc.next_span_id();
        self.next_task_id = graph.next_task_id();
        for i in 0..graph.span_count() {
            if let Some(leaf) = graph.leaf_task(i) {
                self.promises.entry(leaf.id).or_insert_with(|| ProofPromise::new(graph.span_id(i), leaf.memo_key));
            }
        }
        self.observed.retain(|s| doc.index_of(*s).is_some());
        self.client_view.retain(|s, _| doc.index_of(*s).is_some());
        self.snapshots.clear();
        self.doc = Some(doc);
        self.graph = Some(graph);
        self.counters.tasks_executed = 0;
        self.counters.tasks_skipped_memo = 0;
        self.take_memo_results(&memo_satisfied);
        self.release_unreferenced();
    }

    fn observe(&mut self, request: u64, span: SpanId, now: f64) {
        self.observed.insert(span);
        let verdict = self.client_view.get(&span).is_some_and(|s| s.is_terminal()).then_some(0.0);
        self.observes.push(ObserveRecord { request, span, at_ms: now, first_verdict_ms: verdict });
    }

    fn span_table(&self) -> Map<String, Value> {
        let doc = self.doc.as_ref().expect("document present");
        let spans: Vec<Value> = doc
            .spans()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut v = json!({
                    "span": s.id,
                    "kind": s.kind,
                    "name": s.name,
                    "from": s.range.start,
                    "to": s.range.end,
                });
                if let Some(e) = doc.parse_error(i) {
                    v["error"] = json!(e.to_string());
                }
                v
            })
            .collect();
        let mut m = Map::new();
        m.insert("version".into(), json!(doc.version()));
        m.insert("spans".into(), Value::Array(spans));
        m
    }

    /// Builds the logical environment of the current version from the graph
    /// and the promises.
    pub fn logical_environment(&self) -> LogicalEnvironment {
        let mut env = LogicalEnvironment::new();
        let (Some(doc), Some(graph)) = (&self.doc, &self.graph) else {
            return env;
        };
        for (i, parsed) in doc.parsed().iter().enumerate() {
            let span = graph.span_id(i);
            if graph.nodes()[i].availability == Availability::Orphaned {
                env.push_orphaned(span);
                continue;
            }
            let Some(item) = parsed.item() else {
                env.push_failed(span);
                continue;
            };
            if graph.spine_task(i).state == TaskState::DoneFail {
                env.push_failed(span);
                continue;
            }
            match &item.payload {
                Payload::Def(_) => {
                    if let Some(value) = self.envs[i + 1].as_ref().and_then(|e| def_value(e, &item.name)) {
                        env.push_def(span, item.name.clone(), value);
                    }
                }
                Payload::Lemma { statement, .. } => {
                    let promise = graph
                        .leaf_task(i)
                        .and_then(|t| self.promises.get(&t.id))
                        .cloned()
                        .unwrap_or_else(|| ProofPromise::new(span, None));
                    env.push_lemma(span, item.name.clone(), statement.clone(), promise);
                }
            }
        }
        env
    }

    /// One row per span of the current version.
    pub fn span_reports(&self) -> Vec<SpanReport> {
        let (Some(doc), Some(graph)) = (&self.doc, &self.graph) else {
            return Vec::new();
        };
        (0..graph.span_count())
            .map(|i| {
                let span = &doc.spans()[i];
                let leaf = graph.leaf_task(i);
                let promise = leaf.and_then(|t| self.promises.get(&t.id));
                SpanReport {
                    span: span.id,
                    name: span.name.clone(),
                    kind: span.kind,
                    state: graph.span_state(i),
                    msg: self.span_message(i),
                    ms: leaf.and_then(|t| self.task_ms.get(&t.id)).copied(),
                    force_count: promise.map(ProofPromise::force_count),
                    forced: promise.map(ProofPromise::is_forced),
                }
            })
            .collect()
    }

    fn status_fields(&self) -> Map<String, Value> {
        let offenders: Vec<Offender> = match self.soundness() {
            Soundness::Sound => Vec::new(),
            Soundness::Unsound(o) => o,
        };
        let mut m = Map::new();
        m.insert("version".into(), json!(self.version));
        m.insert("spans".into(), json!(self.span_reports()));
        m.insert("sound".into(), json!(offenders.is_empty()));
        m.insert("offenders".into(), json!(offenders));
        m.insert("quiescent".into(), json!(self.graph.as_ref().is_none_or(TaskGraph::is_quiescent)));
        m
    }

    fn span_message(&self, i: usize) -> Option<String> {
        let (doc, graph) = (self.doc.as_ref()?, self.graph.as_ref()?);
        if let Some(e) = doc.parse_error(i) {
            return Some(e.to_string());
        }
        let spine = graph.spine_task(i);
        if let Some(msg) = self.task_msg.get(&spine.id) {
            return Some(msg.clone());
        }
        graph.leaf_task(i).and_then(|t| self.task_msg.get(&t.id)).cloned()
    }

    pub fn metrics_json(&self) -> Value {
        let mut ttfv = Map::new();
        for o in &self.observes {
            if let Some(ms) = o.first_verdict_ms {
                ttfv.insert(o.span.to_string(), json!(ms));
            }
        }
        let mut v = serde_json::to_value(&self.counters).expect("counters serialize");
        v["time_to_first_verdict_ms"] = Value::Object(ttfv);
        v["blob_bytes"] = json!(self.blobs.total_bytes());
        v["blob_count"] = json!(self.blobs.len());
        v["memo_entries"] = json!(self.memo.len());
        v["version"] = json!(self.version);
        v
    }

    // ---- scheduling --------------------------------------------------------

    fn dispatchable(&self) -> Vec<(TaskId, usize)> {
        let Some(graph) = &self.graph else {
            return Vec::new();
        };
        graph
            .runnable(&self.observed)
            .into_iter()
            .filter(|r| matches!(r.kind, TaskKind::Leaf(_)))
            .filter(|r| !self.cfg.lazy || r.priority == proofkernel_core::dag::Priority::Observed)
            .map(|r| (r.id, r.kind.index()))
            .collect()
    }

    /// Runs ready spine tasks, hands ready leaves to idle workers and brings
    /// the client view up to date.
    fn pump(&mut self, now: f64) {
        if let Some(n) = self.graph.as_ref().map(TaskGraph::span_count) {
            for i in 0..n {
                let graph = self.graph.as_ref().expect("checked");
                if graph.spine_task(i).state == TaskState::Pending
                    && graph.nodes()[i].availability == Availability::Available
                {
                    self.run_spine(i);
                }
            }
            let idle: Vec<u32> = self.workers.iter().filter(|(_, s)| s.busy.is_none()).map(|(w, _)| *w).collect();
            if !idle.is_empty() {
                for (w, (task, i)) in idle.into_iter().zip(self.dispatchable()) {
                    self.dispatch(w, task, i);
                }
            }
        }
        self.reconcile(now);
    }

    fn run_spine(&mut self, i: usize) {
        let graph = self.graph.as_mut().expect("graph present");
        let doc = self.doc.as_ref().expect("document present");
        let task = graph.spine_task(i).id;
        let version = graph.spine_task(i).version;
        let item = match &doc.parsed()[i] {
            ParsedSpan::Item(item) => item,
            ParsedSpan::Malformed(_) => unreachable!("malformed spans start failed"),
        };
        let env = self.envs[i].clone().expect("available node has an environment");
        graph.mark_running(task).expect("spine task in graph");
        let result = match elaborate(item, &env) {
            Ok(next) => {
                let fp = next.fingerprint();
                self.envs[i + 1] = Some(Arc::new(next));
                Ok(fp)
            }
            Err(e) => {
                self.task_msg.insert(task, e.to_string());
                Err(e.to_string())
            }
        };
        self.counters.tasks_executed += 1;
        self.counters.tasks_executed_total += 1;
        match graph.complete(&mut self.memo, task, version, TaskOutcome::Spine(result)) {
            Ok(Completion::Applied { memo_satisfied, .. }) => self.take_memo_results(&memo_satisfied),
            other => unreachable!("inline spine completion: {other:?}"),
        }
    }

    fn take_memo_results(&mut self, ids: &[TaskId]) {
        let graph = self.graph.as_ref().expect("graph present");
        for id in ids {
            let Some(TaskOutcome::Leaf(outcome)) = graph.task(*id).and_then(|t| t.outcome.as_ref()) else {
                continue;
            };
            if let Some(p) = self.promises.get_mut(id) {
                p.commit(outcome, false);
            }
            if let CheckOutcome::Fail { at, message } = outcome {
                self.task_msg.insert(*id, format!("{at}: {message}"));
            }
            self.counters.tasks_skipped_memo += 1;
            self.counters.tasks_skipped_memo_total += 1;
        }
    }

    fn dispatch(&mut self, worker: u32, task: TaskId, i: usize) {
        let graph = self.graph.as_mut().expect("graph present");
        let doc = self.doc.as_ref().expect("document present");
        let env = self.envs[i].clone().expect("available node has an environment");
        let version = self.version;
        let (blobs, threshold) = (&mut self.blobs, self.cfg.inline_threshold);
        let snapshot = self.snapshots.entry(i).or_insert_with(|| trim(&env, version, i, blobs, threshold)).clone();
        let item = doc.parsed()[i].item().expect("leaves belong to lemmas");
        let msg = WorkerMsg::Assign {
            task,
            version: graph.task(task).expect("runnable task").version,
            span: graph.span_id(i),
            snapshot,
            lemma: doc.text()[item.range.clone()].to_string(),
        };
        let bytes = wire::encode(&msg);
        if self.cfg.verify_assignments {
            let back: WorkerMsg = wire::decode(&bytes).expect("assignment decodes");
            assert_eq!(back, msg, "assignment does not survive serialization");
        }
        graph.mark_scheduled(task).expect("runnable task");
        self.counters.leaves_dispatched += 1;
        self.counters.bytes_to_workers += bytes.len() as u64;
        self.inflight.insert(task, InFlight { worker, holder: version });
        self.workers.get_mut(&worker).expect("idle worker").busy = Some(task);
        self.worker_out.push((worker, bytes));
    }

    // ---- bus ---------------------------------------------------------------

    /// Handles one frame written by worker `worker` on the bus.
    pub fn on_bus_frame(&mut self, worker: u32, bytes: &[u8], now: f64) {
        self.counters.bytes_on_bus += bytes.len() as u64;
        let frame: BusFrame = match wire::decode(bytes) {
            Ok(f) => f,
            Err(e) => {
                self.counters.malformed_frames += 1;
                log::warn!("dropping malformed frame from worker {worker}: {e}");
                return;
            }
        };
        if frame.worker != worker {
            self.counters.malformed_frames += 1;
            log::warn!("worker {worker} sent a frame signed by {}", frame.worker);
            return;
        }
        let Some(slot) = self.workers.get_mut(&worker) else {
            self.counters.frames_dropped_stale += 1;
            return;
        };
        if frame.seq <= slot.last_seq {
            self.counters.seq_violations += 1;
            log::warn!("worker {worker}: sequence {} after {}", frame.seq, slot.last_seq);
            return;
        }
        self.counters.seq_gaps += frame.seq - slot.last_seq - 1;
        slot.last_seq = frame.seq;
        match frame.msg {
            MasterMsg::Feedback(fb) => self.forward(worker, frame.seq, fb, now),
            MasterMsg::FetchRequest { key } => {
                self.counters.fetch_requests += 1;
                let bytes = self.blobs.get(key).ok().map(|b| B64.encode(b));
                if bytes.is_none() {
                    self.counters.dangling_fetches += 1;
                    log::error!("worker {worker} asked for blob {key}, which is gone");
                }
                let reply = wire::encode(&WorkerMsg::FetchReply { key, bytes });
                self.counters.bytes_to_workers += reply.len() as u64;
                self.worker_out.push((worker, reply));
            }
            MasterMsg::TaskResult { task, version, outcome, ms } => {
                self.finish(worker, task);
                self.commit_leaf(task, version, outcome, ms);
                self.release_unreferenced();
                self.pump(now);
            }
            MasterMsg::Abandoned { task, reason, .. } => {
                log::warn!("worker {worker} abandoned {task}: {reason}");
                self.counters.abandoned += 1;
                self.finish(worker, task);
                if let Some(graph) = self.graph.as_mut() {
                    if graph.requeue(task).unwrap_or(false) {
                        self.counters.requeued += 1;
                    }
                }
                self.release_unreferenced();
                self.pump(now);
            }
        }
    }

    fn finish(&mut self, worker: u32, task: TaskId) {
        if self.inflight.get(&task).is_some_and(|f| f.worker == worker) {
            self.inflight.remove(&task);
        }
        if let Some(slot) = self.workers.get_mut(&worker) {
            if slot.busy == Some(task) {
                slot.busy = None;
            }
        }
    }

    fn commit_leaf(&mut self, task: TaskId, version: u64, outcome: CheckOutcome, ms: f64) {
        let Some(graph) = self.graph.as_mut() else {
            self.counters.stale_results += 1;
            return;
        };
        match graph.complete(&mut self.memo, task, version, TaskOutcome::Leaf(outcome.clone())) {
            Ok(Completion::Applied { .. }) => {
                self.counters.tasks_executed += 1;
                self.counters.tasks_executed_total += 1;
                if let Some(p) = self.promises.get_mut(&task) {
                    p.commit(&outcome, true);
                }
                self.task_ms.insert(task, ms);
                if let CheckOutcome::Fail { at, message } = &outcome {
                    self.task_msg.insert(task, format!("{at}: {message}"));
                }
            }
            Ok(Completion::Stale) => self.counters.stale_results += 1,
            Ok(Completion::Duplicate) => self.counters.duplicate_results += 1,
            Err(e) => {
                self.counters.unknown_results += 1;
                log::warn!("result for {e}");
            }
        }
    }

    /// Passes a worker's feedback on to the client when its task is still
    /// live in the current graph.
    fn forward(&mut self, worker: u32, seq: u64, fb: Feedback, now: f64) {
        let live = self.inflight.get(&fb.exec_ref).is_some_and(|f| f.worker == worker)
            && self.graph.as_ref().and_then(|g| g.task(fb.exec_ref)).is_some_and(|t| t.state.is_in_flight());
        if !live {
            self.counters.frames_dropped_stale += 1;
            return;
        }
        if fb.kind == FeedbackKind::Status && fb.state == SpanState::Running {
            let graph = self.graph.as_mut().expect("live task has a graph");
            graph.mark_running(fb.exec_ref).expect("live task");
        }
        self.counters.frames_forwarded += 1;
        self.emit(fb.span, fb.state, fb.kind, fb.msg, fb.ms, worker, seq, now);
    }

    #[allow(clippy::too_many_arguments)]
    fn emit(&mut self, span: SpanId, state: SpanState, kind: FeedbackKind, msg: String, ms: f64, worker: u32, seq: u64, now: f64) {
        self.tag += 1;
        self.client_view.insert(span, state);
        if state.is_terminal() {
            for o in self.observes.iter_mut().filter(|o| o.span == span && o.first_verdict_ms.is_none()) {
                o.first_verdict_ms = Some(now - o.at_ms);
            }
        }
        let line = json!({"feedback": {
            "version": self.version,
            "span": span,
            "state": state,
            "kind": kind,
            "msg": msg,
            "ms": ms,
            "worker": worker,
            "seq": seq,
            "tag": self.tag,
        }});
        self.client_out.push(line.to_string());
    }

    /// Emits a status frame for every span whose state differs from what the
    /// client was last told.
    fn reconcile(&mut self, now: f64) {
        let Some(graph) = &self.graph else {
            return;
        };
        let changed: Vec<(usize, SpanId, SpanState)> = (0..graph.span_count())
            .map(|i| (i, graph.span_id(i), graph.span_state(i)))
            .filter(|(_, s, st)| self.client_view.get(s) != Some(st))
            .collect();
        for (i, span, state) in changed {
            let graph = self.graph.as_ref().expect("checked");
            let ms = graph.leaf_task(i).and_then(|t| self.task_ms.get(&t.id)).copied().unwrap_or(0.0);
            let msg = if state.is_terminal() { self.span_message(i).unwrap_or_default() } else { String::new() };
            self.master_seq += 1;
            let seq = self.master_seq;
            self.emit(span, state, FeedbackKind::Status, msg, ms, 0, seq, now);
        }
    }

    /// Drops blob references of versions no assignment can still fetch from.
    fn release_unreferenced(&mut self) {
        let held: BTreeSet<u64> = self.inflight.values().map(|f| f.holder).collect();
        let old: Vec<u64> =
            self.blobs.holding_versions().filter(|v| *v < self.version && !held.contains(v)).collect();
        for v in old {
            let released = self.blobs.release_version(v);
            self.counters.versions_released += 1;
            self.counters.blobs_evicted += released.evicted as u64;
        }
    }
}

fn def_value(env: &NumEnv, name: &str) -> Option<Arc<num_bigint::BigUint>> {
    env.defs().find(|(n, _)| *n == name).map(|(_, v)| v.clone())
}

