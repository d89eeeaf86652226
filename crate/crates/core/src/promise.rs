//! Proof evidence as deferred computations.
//!
//! A lemma enters the logical environment as soon as its statement is
//! elaborated; its evidence is a [`ProofPromise`] that is forced later (or
//! never). The environment is sound only once every promise has been forced
//! successfully and no statement failed to elaborate.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::dag::MemoKey;
use crate::document::SpanId;
use crate::hash::Hash256;
use crate::script::{CheckOutcome, Prop};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum PromiseState {
    Unforced,
    ForcedOk { evidence: Hash256 },
    ForcedFail { diagnostic: String },
}

impl PromiseState {
    pub fn is_forced(&self) -> bool {
        !matches!(self, PromiseState::Unforced)
    }

    fn from_outcome(outcome: &CheckOutcome) -> Self {
        match outcome {
            CheckOutcome::Ok { evidence } => PromiseState::ForcedOk { evidence: *evidence },
            CheckOutcome::Fail { at, message } => {
                PromiseState::ForcedFail { diagnostic: alloc::format!("{at}: {message}") }
            }
        }
    }
}

/// Deferred evidence for one lemma. Moves from unforced to a forced state
/// exactly once; `force_count` counts how many times the underlying check
/// actually ran.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProofPromise {
    pub span: SpanId,
    pub memo_key: Option<MemoKey>,
    state: PromiseState,
    force_count: u32,
}

impl ProofPromise {
    pub fn new(span: SpanId, memo_key: Option<MemoKey>) -> Self {
        ProofPromise { span, memo_key, state: PromiseState::Unforced, force_count: 0 }
    }

    pub fn state(&self) -> &PromiseState {
        &self.state
    }

    pub fn force_count(&self) -> u32 {
        self.force_count
    }

    pub fn is_forced(&self) -> bool {
        self.state.is_forced()
    }

    /// Runs `runner` if the promise is still unforced; otherwise returns the
    /// recorded state without running anything.
    pub fn force(&mut self, runner: impl FnOnce() -> CheckOutcome) -> &PromiseState {
        if !self.is_forced() {
            let outcome = runner();
            self.force_count += 1;
            self.state = PromiseState::from_outcome(&outcome);
        }
        &self.state
    }

    /// Records an outcome computed elsewhere: by a worker (`ran = true`) or
    /// recovered from the memo table (`ran = false`). Returns `false`, and
    /// changes nothing, when the promise was already forced.
    pub fn commit(&mut self, outcome: &CheckOutcome, ran: bool) -> bool {
        if self.is_forced() {
            return false;
        }
        if ran {
            self.force_count += 1;
        }
        self.state = PromiseState::from_outcome(outcome);
        true
    }
}

// Entries live in one Vec per document; boxing lemmas buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EnvEntry {
    Def { span: SpanId, name: String, value: Arc<BigUint> },
    Lemma { span: SpanId, name: String, statement: Prop, promise: ProofPromise },
}

impl EnvEntry {
    pub fn span(&self) -> SpanId {
        match self {
            EnvEntry::Def { span, .. } | EnvEntry::Lemma { span, .. } => *span,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnsoundReason {
    /// The promise has not been forced yet.
    Unforced,
    /// The promise was forced and the check failed, or the statement did not
    /// elaborate.
    Failed,
    /// An earlier statement failed, so this span never entered the environment.
    Orphaned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offender {
    pub span: SpanId,
    pub reason: UnsoundReason,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Soundness {
    Sound,
    Unsound(Vec<Offender>),
}

impl Soundness {
    pub fn is_sound(&self) -> bool {
        matches!(self, Soundness::Sound)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AbsentName(pub String);

impl fmt::Display for AbsentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "no lemma named {} has been stated", self.0)
    }
}

impl core::error::Error for AbsentName {}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq, Eq)]
enum Slot {
    Entry(EnvEntry),
    Blocked(SpanId, UnsoundReason),
}

/// The ordered contents of a document's spine: def bindings and lemma
/// statements with their promises, plus the spans that could not enter.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LogicalEnvironment {
    slots: Vec<Slot>,
}

impl LogicalEnvironment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_def(&mut self, span: SpanId, name: impl Into<String>, value: Arc<BigUint>) {
        self.slots.push(Slot::Entry(EnvEntry::Def { span, name: name.into(), value }));
    }

    /// A lemma statement enters the environment with whatever promise it has,
    /// forced or not.
    pub fn push_lemma(&mut self, span: SpanId, name: impl Into<String>, statement: Prop, promise: ProofPromise) {
        self.slots.push(Slot::Entry(EnvEntry::Lemma { span, name: name.into(), statement, promise }));
    }

    pub fn push_failed(&mut self, span: SpanId) {
        self.slots.push(Slot::Blocked(span, UnsoundReason::Failed));
    }

    pub fn push_orphaned(&mut self, span: SpanId) {
        self.slots.push(Slot::Blocked(span, UnsoundReason::Orphaned));
    }

    pub fn entries(&self) -> impl Iterator<Item = &EnvEntry> {
        self.slots.iter().filter_map(|s| match s {
            Slot::Entry(e) => Some(e),
            Slot::Blocked(..) => None,
        })
    }

    pub fn promise_mut(&mut self, span: SpanId) -> Option<&mut ProofPromise> {
        self.slots.iter_mut().rev().find_map(|s| match s {
            Slot::Entry(EnvEntry::Lemma { span: s, promise, .. }) if *s == span => Some(promise),
            _ => None,
        })
    }

    /// Sound iff every lemma promise is forced-ok and nothing was blocked.
    /// Otherwise lists every offender in document order.
    pub fn soundness(&self) -> Soundness {
        let offenders: Vec<Offender> = self
            .slots
            .iter()
            .filter_map(|slot| match slot {
                Slot::Blocked(span, reason) => Some(Offender { span: *span, reason: *reason }),
                Slot::Entry(EnvEntry::Lemma { span, promise, .. }) => match promise.state() {
                    PromiseState::ForcedOk { .. } => None,
                    PromiseState::Unforced => Some(Offender { span: *span, reason: UnsoundReason::Unforced }),
                    PromiseState::ForcedFail { .. } => Some(Offender { span: *span, reason: UnsoundReason::Failed }),
                },
                Slot::Entry(EnvEntry::Def { .. }) => None,
            })
            .collect();
        if offenders.is_empty() {
            Soundness::Sound
        } else {
            Soundness::Unsound(offenders)
        }
    }

    /// Statement of the latest lemma called `name`. Never forces its promise.
    pub fn use_statement(&self, name: &str) -> Result<&Prop, AbsentName> {
        self.entries()
            .filter_map(|e| match e {
                EnvEntry::Lemma { name: n, statement, .. } if n == name => Some(statement),
                _ => None,
            })
            .last()
            .ok_or_else(|| AbsentName(name.into()))
    }

    /// The environment as seen by the span at `position` (entries before it).
    pub fn prefix(&self, position: usize) -> LogicalEnvironment {
        LogicalEnvironment { slots: self.slots[..position.min(self.slots.len())].to_vec() }
    }
}
