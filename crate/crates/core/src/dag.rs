//! The task DAG: a spine of statement-elaboration tasks producing environment
//! states, with independent proof-check leaves hanging off those states.
//!
//! ```text
//! node0 --spine(0)--> node1 --spine(1)--> node2 ...
//!   |                   |
//! leaf(0)             leaf(1)
//! ```
//!
//! Leaves never depend on each other, so any set of leaves whose nodes are
//! available can run in parallel.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::document::{DocumentVersion, InvalidationSet, SpanId, SpanKind};
use crate::hash::Hash256;
use crate::script::{CheckOutcome, NumEnv};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Elaborate item `i`, producing node `i + 1`.
    Spine(usize),
    /// Check the proof body of lemma `i` against node `i`.
    Leaf(usize),
}

impl TaskKind {
    pub fn index(self) -> usize {
        match self {
            TaskKind::Spine(i) | TaskKind::Leaf(i) => i,
        }
    }
}

/// Scheduling band; lower sorts first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    Observed,
    Spine,
    Background,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Scheduled,
    Running,
    DoneOk,
    DoneFail,
    Cancelled,
    /// The source node can never become available.
    Orphaned,
}

impl TaskState {
    pub fn is_in_flight(self) -> bool {
        matches!(self, TaskState::Scheduled | TaskState::Running)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::DoneOk | TaskState::DoneFail | TaskState::Orphaned | TaskState::Cancelled)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Availability {
    Available,
    Pending,
    Orphaned,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateNode {
    pub index: usize,
    pub fingerprint: Option<Hash256>,
    pub availability: Availability,
}

impl StateNode {
    fn pending(index: usize) -> Self {
        StateNode { index, fingerprint: None, availability: Availability::Pending }
    }
}

/// Exact-match key for proof-check results.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MemoKey {
    pub env: Hash256,
    pub statement: Hash256,
    pub body: Hash256,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskOutcome {
    /// Fingerprint of the produced node, or the elaboration diagnostic.
    Spine(Result<Hash256, String>),
    Leaf(CheckOutcome),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub id: TaskId,
    /// Document version the task was created for.
    pub version: u64,
    pub kind: TaskKind,
    pub priority: Priority,
    pub state: TaskState,
    pub memo_key: Option<MemoKey>,
    pub outcome: Option<TaskOutcome>,
    /// The outcome was taken from the memo table without running.
    pub from_memo: bool,
}

/// Completed proof checks, keyed by `(env fingerprint, statement, body)`.
/// Entries are never overwritten.
#[derive(Clone, Debug, Default)]
pub struct MemoTable {
    entries: BTreeMap<MemoKey, CheckOutcome>,
}

impl MemoTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &MemoKey) -> Option<&CheckOutcome> {
        self.entries.get(key)
    }

    pub fn record(&mut self, key: MemoKey, outcome: CheckOutcome) {
        self.entries.entry(key).or_insert(outcome);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct SpanSlot {
    id: SpanId,
    kind: SpanKind,
    statement_hash: Hash256,
    body_hash: Hash256,
    malformed: Option<String>,
}

/// Per-span verdict derived from the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanState {
    Pending,
    Running,
    Ok,
    Fail,
    Orphaned,
}

impl SpanState {
    pub fn is_terminal(self) -> bool {
        matches!(self, SpanState::Ok | SpanState::Fail | SpanState::Orphaned)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpanState::Pending => "pending",
            SpanState::Running => "running",
            SpanState::Ok => "ok",
            SpanState::Fail => "fail",
            SpanState::Orphaned => "orphaned",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Runnable {
    pub id: TaskId,
    pub kind: TaskKind,
    pub priority: Priority,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnknownTask(pub TaskId);

impl fmt::Display for UnknownTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown task {}", self.0)
    }
}

impl core::error::Error for UnknownTask {}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Completion {
    Applied {
        /// Leaves resolved from the memo table because this completion made
        /// their node available.
        memo_satisfied: Vec<TaskId>,
        /// Span indices orphaned by a spine failure.
        orphaned: Vec<usize>,
    },
    /// Task no longer belongs to the graph, or belongs to another version.
    Stale,
    /// Task already finished.
    Duplicate,
}

/// Result of carrying a graph over to a new document version.
#[derive(Clone, Debug)]
pub struct Invalidation {
    pub graph: TaskGraph,
    /// Tasks of the old graph that were dropped, in state `Cancelled` when
    /// they were in flight.
    pub retired: Vec<Task>,
    /// Fresh leaves resolved from the memo table.
    pub memo_satisfied: Vec<TaskId>,
}

impl Invalidation {
    pub fn cancelled(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.retired.iter().filter(|t| t.state == TaskState::Cancelled).map(|t| t.id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Vertex {
    Node(usize),
    Task(TaskId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskGraph {
    version: u64,
    spans: Vec<SpanSlot>,
    nodes: Vec<StateNode>,
    spine: Vec<Task>,
    leaves: Vec<Option<Task>>,
    next_task_id: u64,
}

fn slots(doc: &DocumentVersion) -> Vec<SpanSlot> {
    doc.spans()
        .iter()
        .enumerate()
        .map(|(i, s)| SpanSlot {
            id: s.id,
            kind: s.kind,
            statement_hash: s.statement_hash,
            body_hash: s.body_hash,
            malformed: doc.parse_error(i).map(|e| alloc::format!("{e}")),
        })
        .collect()
}

impl TaskGraph {
    /// Builds the graph for `doc` with task ids starting at 1.
    pub fn build(doc: &DocumentVersion) -> Self {
        Self::build_from(doc, 1)
    }

    /// Builds the graph for `doc`, allocating task ids from `first_task_id`.
    pub fn build_from(doc: &DocumentVersion, first_task_id: u64) -> Self {
        let spans = slots(doc);
        let n = spans.len();
        let mut nodes: Vec<StateNode> = (0..=n).map(StateNode::pending).collect();
        nodes[0].availability = Availability::Available;
        nodes[0].fingerprint = Some(NumEnv::new().fingerprint());
        let mut graph = TaskGraph {
            version: doc.version(),
            spans,
            nodes,
            spine: Vec::with_capacity(n),
            leaves: Vec::with_capacity(n),
            next_task_id: first_task_id,
        };
        for i in 0..n {
            let spine = graph.fresh_spine(i);
            graph.spine.push(spine);
            let leaf = graph.fresh_leaf(i);
            graph.leaves.push(leaf);
        }
        graph.settle(0, &MemoTable::new());
        graph
    }

    fn alloc_id(&mut self) -> TaskId {
        let id = TaskId(self.next_task_id);
        self.next_task_id += 1;
        id
    }

    fn fresh_spine(&mut self, i: usize) -> Task {
        let id = self.alloc_id();
        let (state, outcome) = match &self.spans[i].malformed {
            Some(diag) => (TaskState::DoneFail, Some(TaskOutcome::Spine(Err(diag.clone())))),
            None => (TaskState::Pending, None),
        };
        Task {
            id,
            version: self.version,
            kind: TaskKind::Spine(i),
            priority: Priority::Spine,
            state,
            memo_key: None,
            outcome,
            from_memo: false,
        }
    }

    fn fresh_leaf(&mut self, i: usize) -> Option<Task> {
        if self.spans[i].kind != SpanKind::Lemma {
            return None;
        }
        Some(Task {
            id: self.alloc_id(),
            version: self.version,
            kind: TaskKind::Leaf(i),
            priority: Priority::Background,
            state: TaskState::Pending,
            memo_key: None,
            outcome: None,
            from_memo: false,
        })
    }

    /// Propagates node availability from node `from` onwards: orphans
    /// everything behind a failed spine task and binds memo keys (and memo
    /// results) for pending leaves whose node is available.
    fn settle(&mut self, from: usize, memo: &MemoTable) -> Vec<TaskId> {
        let mut satisfied = Vec::new();
        for i in from..self.spans.len() {
            match self.nodes[i].availability {
                Availability::Orphaned => {
                    for task in core::iter::once(&mut self.spine[i]).chain(self.leaves[i].as_mut()) {
                        if !matches!(task.state, TaskState::Orphaned) {
                            task.state = TaskState::Orphaned;
                            task.outcome = None;
                        }
                    }
                    self.nodes[i + 1] = StateNode { availability: Availability::Orphaned, ..StateNode::pending(i + 1) };
                    continue;
                }
                Availability::Available => {
                    if let Some(id) = self.bind_leaf(i, memo) {
                        satisfied.push(id);
                    }
                }
                Availability::Pending => {}
            }
            if self.spine[i].state == TaskState::DoneFail {
                self.nodes[i + 1] = StateNode { availability: Availability::Orphaned, ..StateNode::pending(i + 1) };
            }
        }
        satisfied
    }

    /// Gives a pending leaf at an available node its memo key, resolving it
    /// from `memo` when possible.
    fn bind_leaf(&mut self, i: usize, memo: &MemoTable) -> Option<TaskId> {
        let env = self.nodes[i].fingerprint?;
        let slot = &self.spans[i];
        let key = MemoKey { env, statement: slot.statement_hash, body: slot.body_hash };
        let leaf = self.leaves[i].as_mut()?;
        if leaf.state != TaskState::Pending {
            return None;
        }
        leaf.memo_key = Some(key);
        let hit = memo.get(&key)?;
        leaf.state = if hit.is_ok() { TaskState::DoneOk } else { TaskState::DoneFail };
        leaf.outcome = Some(TaskOutcome::Leaf(hit.clone()));
        leaf.from_memo = true;
        Some(leaf.id)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn span_count(&self) -> usize {
        self.spans.len()
    }

    pub fn span_id(&self, index: usize) -> SpanId {
        self.spans[index].id
    }

    pub fn span_kind(&self, index: usize) -> SpanKind {
        self.spans[index].kind
    }

    pub fn nodes(&self) -> &[StateNode] {
        &self.nodes
    }

    pub fn spine_task(&self, index: usize) -> &Task {
        &self.spine[index]
    }

    pub fn leaf_task(&self, index: usize) -> Option<&Task> {
        self.leaves[index].as_ref()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.spine.iter().chain(self.leaves.iter().flatten())
    }

    pub fn next_task_id(&self) -> u64 {
        self.next_task_id
    }

    pub fn task(&self, id: TaskId) -> Option<&Task> {
        self.tasks().find(|t| t.id == id)
    }

    fn task_mut(&mut self, id: TaskId) -> Option<&mut Task> {
        self.spine.iter_mut().chain(self.leaves.iter_mut().flatten()).find(|t| t.id == id)
    }

    /// Carries the graph over to `doc`, the version following this graph's.
    ///
    /// Tasks before the first spine invalidation keep their identity and
    /// state, except body-changed leaves which are replaced. Everything from
    /// the spine invalidation on is rebuilt. Fresh leaves whose node is
    /// already available are resolved from `memo` when their key matches.
    pub fn invalidate(&self, doc: &DocumentVersion, inv: &InvalidationSet, memo: &MemoTable) -> Invalidation {
        let spans = slots(doc);
        let n = spans.len();
        let carry = inv.first_spine_invalid.unwrap_or(n).min(n).min(self.spans.len());
        let mut graph = TaskGraph {
            version: doc.version(),
            spans,
            nodes: (0..=n).map(StateNode::pending).collect(),
            spine: Vec::with_capacity(n),
            leaves: Vec::with_capacity(n),
            next_task_id: self.next_task_id,
        };
        graph.nodes[..=carry].clone_from_slice(&self.nodes[..=carry]);
        let mut kept = BTreeSet::new();
        for i in 0..n {
            let spine = if i < carry {
                kept.insert(self.spine[i].id);
                self.spine[i].clone()
            } else {
                graph.fresh_spine(i)
            };
            graph.spine.push(spine);
            let leaf = match &self.leaves.get(i) {
                Some(Some(old)) if i < carry && !inv.body_only.contains(&i) => {
                    kept.insert(old.id);
                    Some(old.clone())
                }
                _ => graph.fresh_leaf(i),
            };
            graph.leaves.push(leaf);
        }
        let memo_satisfied = graph.settle(0, memo);
        let retired = self
            .tasks()
            .filter(|t| !kept.contains(&t.id))
            .map(|t| {
                let mut t = t.clone();
                if t.state.is_in_flight() {
                    t.state = TaskState::Cancelled;
                }
                t
            })
            .collect();
        graph.debug_check();
        Invalidation { graph, retired, memo_satisfied }
    }

    /// Pending tasks whose source node is available, in scheduling order:
    /// leaves of observed spans, then spine tasks, then the remaining leaves,
    /// each group in document order.
    pub fn runnable(&self, observed: &BTreeSet<SpanId>) -> Vec<Runnable> {
        let mut out = Vec::new();
        let ready = |task: &Task| {
            task.state == TaskState::Pending && self.nodes[task.kind.index()].availability == Availability::Available
        };
        for (i, leaf) in self.leaves.iter().enumerate() {
            if let Some(t) = leaf.as_ref().filter(|t| ready(t) && observed.contains(&self.spans[i].id)) {
                out.push(Runnable { id: t.id, kind: t.kind, priority: Priority::Observed });
            }
        }
        for t in self.spine.iter().filter(|t| ready(t)) {
            out.push(Runnable { id: t.id, kind: t.kind, priority: Priority::Spine });
        }
        for (i, leaf) in self.leaves.iter().enumerate() {
            if let Some(t) = leaf.as_ref().filter(|t| ready(t) && !observed.contains(&self.spans[i].id)) {
                out.push(Runnable { id: t.id, kind: t.kind, priority: Priority::Background });
            }
        }
        out
    }

    fn transition(&mut self, id: TaskId, from: &[TaskState], to: TaskState) -> Result<bool, UnknownTask> {
        let task = self.task_mut(id).ok_or(UnknownTask(id))?;
        if from.contains(&task.state) {
            task.state = to;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Pending → scheduled. Returns whether the transition happened.
    pub fn mark_scheduled(&mut self, id: TaskId) -> Result<bool, UnknownTask> {
        self.transition(id, &[TaskState::Pending], TaskState::Scheduled)
    }

    /// Scheduled → running.
    pub fn mark_running(&mut self, id: TaskId) -> Result<bool, UnknownTask> {
        self.transition(id, &[TaskState::Pending, TaskState::Scheduled], TaskState::Running)
    }

    /// Puts an in-flight task back to pending, e.g. after its worker died.
    pub fn requeue(&mut self, id: TaskId) -> Result<bool, UnknownTask> {
        self.transition(id, &[TaskState::Scheduled, TaskState::Running], TaskState::Pending)
    }

    /// Records the result of an in-flight task.
    ///
    /// Results for tasks that are no longer part of this graph, or that carry
    /// a different version, are discarded as [`Completion::Stale`].
    pub fn complete(
        &mut self,
        memo: &mut MemoTable,
        id: TaskId,
        version: u64,
        outcome: TaskOutcome,
    ) -> Result<Completion, UnknownTask> {
        let next_task_id = self.next_task_id;
        let Some(task) = self.task_mut(id) else {
            return if id.0 < next_task_id { Ok(Completion::Stale) } else { Err(UnknownTask(id)) };
        };
        if task.version != version {
            return Ok(Completion::Stale);
        }
        if !task.state.is_in_flight() {
            return Ok(Completion::Duplicate);
        }
        let kind = task.kind;
        match (kind, outcome) {
            (TaskKind::Spine(i), TaskOutcome::Spine(result)) => {
                task.state = if result.is_ok() { TaskState::DoneOk } else { TaskState::DoneFail };
                task.outcome = Some(TaskOutcome::Spine(result.clone()));
                let mut memo_satisfied = Vec::new();
                let mut orphaned = Vec::new();
                match result {
                    Ok(fp) => {
                        self.nodes[i + 1].fingerprint = Some(fp);
                        self.nodes[i + 1].availability = Availability::Available;
                        if i + 1 < self.spans.len() {
                            memo_satisfied.extend(self.bind_leaf(i + 1, memo));
                        }
                    }
                    Err(_) => {
                        self.settle(i, memo);
                        orphaned.extend(i + 1..self.spans.len());
                    }
                }
                self.debug_check();
                Ok(Completion::Applied { memo_satisfied, orphaned })
            }
            (TaskKind::Leaf(_), TaskOutcome::Leaf(result)) => {
                task.state = if result.is_ok() { TaskState::DoneOk } else { TaskState::DoneFail };
                if let Some(key) = task.memo_key {
                    memo.record(key, result.clone());
                }
                task.outcome = Some(TaskOutcome::Leaf(result));
                Ok(Completion::Applied { memo_satisfied: Vec::new(), orphaned: Vec::new() })
            }
            // A result of the wrong shape cannot belong to this task.
            _ => Err(UnknownTask(id)),
        }
    }

    pub fn span_state(&self, i: usize) -> SpanState {
        if self.nodes[i].availability == Availability::Orphaned {
            return SpanState::Orphaned;
        }
        let from_task = |t: &Task| match t.state {
            TaskState::DoneOk => SpanState::Ok,
            TaskState::DoneFail => SpanState::Fail,
            TaskState::Orphaned => SpanState::Orphaned,
            TaskState::Scheduled | TaskState::Running => SpanState::Running,
            TaskState::Pending | TaskState::Cancelled => SpanState::Pending,
        };
        let spine = from_task(&self.spine[i]);
        let Some(leaf) = self.leaves[i].as_ref().map(from_task) else {
            return spine;
        };
        match (spine, leaf) {
            (SpanState::Fail, _) | (_, SpanState::Fail) => SpanState::Fail,
            (SpanState::Ok, SpanState::Ok) => SpanState::Ok,
            (SpanState::Running, _) | (_, SpanState::Running) => SpanState::Running,
            _ => SpanState::Pending,
        }
    }

    pub fn span_states(&self) -> Vec<SpanState> {
        (0..self.spans.len()).map(|i| self.span_state(i)).collect()
    }

    /// No task is pending at an available node and none is in flight.
    pub fn is_quiescent(&self) -> bool {
        self.tasks().all(|t| {
            !t.state.is_in_flight()
                && !(t.state == TaskState::Pending
                    && self.nodes[t.kind.index()].availability == Availability::Available)
        })
    }

    /// A topological order over nodes and tasks, or `None` on a cycle.
    pub fn topological_order(&self) -> Option<Vec<Vertex>> {
        let mut edges: BTreeMap<Vertex, Vec<Vertex>> = BTreeMap::new();
        let mut indegree: BTreeMap<Vertex, usize> = BTreeMap::new();
        let mut add = |from: Vertex, to: Vertex| {
            edges.entry(from).or_default().push(to);
            *indegree.entry(to).or_default() += 1;
            indegree.entry(from).or_default();
        };
        for i in 0..self.spans.len() {
            add(Vertex::Node(i), Vertex::Task(self.spine[i].id));
            add(Vertex::Task(self.spine[i].id), Vertex::Node(i + 1));
            if let Some(leaf) = &self.leaves[i] {
                add(Vertex::Node(i), Vertex::Task(leaf.id));
            }
        }
        let total = indegree.len().max(1);
        let mut queue: VecDeque<Vertex> = indegree.iter().filter(|(_, d)| **d == 0).map(|(v, _)| *v).collect();
        if self.spans.is_empty() {
            return Some(vec![Vertex::Node(0)]);
        }
        let mut order = Vec::with_capacity(total);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for next in edges.get(&v).into_iter().flatten() {
                let d = indegree.get_mut(next).expect("target registered");
                *d -= 1;
                if *d == 0 {
                    queue.push_back(*next);
                }
            }
        }
        (order.len() == total).then_some(order)
    }

    fn debug_check(&self) {
        debug_assert_eq!(self.nodes.len(), self.spans.len() + 1);
        debug_assert!(self.spans.len() > 64 || self.topological_order().is_some());
    }
}
